use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::sgd_step;
use crate::synthgen::{generate_clip, Dataset};
use crate::testutil::{tiny_data, tiny_model};

fn layout(names: &[&str]) -> GenomeLayout {
    GenomeLayout::parse(names).unwrap()
}

fn zeroed(mut b: ModelBundle) -> ModelBundle {
    b.params = b.params.zeros_like();
    b
}

#[test]
fn zero_input_zero_params_gives_zeros() {
    let b = zeroed(ModelBundle::new(&layout(&["RR"]), &tiny_data(4), &tiny_model(), 1).unwrap());
    let x = DenseArray::zeros(&[12, 12]);
    let (e, taps) = b.embed(Modality::Main, &x, 6).unwrap();
    assert_eq!(e.shape(), &[2, 2]);
    assert!(e.data().iter().all(|&v| v == 0.0));
    assert_eq!(taps.0.len(), 2);
    assert!(taps.0.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn one_tap_per_hidden_layer() {
    let cfg = ModelConfig {
        hidden: vec![5, 4, 3],
        ..tiny_model()
    };
    let b = ModelBundle::new(&layout(&["RR"]), &tiny_data(4), &cfg, 1).unwrap();
    let x = DenseArray::filled(&[6, 12], 0.3);
    let (e, taps) = b.embed(Modality::Main, &x, 6).unwrap();
    assert_eq!(e.shape(), &[1, 2]);
    let layers: Vec<usize> = taps.0.iter().map(|(l, _)| *l).collect();
    assert_eq!(layers, [1, 2, 3]);
    let widths: Vec<&[usize]> = taps.0.iter().map(|(_, t)| t.shape()).collect();
    assert_eq!(widths, [&[6, 5][..], &[6, 4], &[6, 3]]);
}

#[test]
fn embed_rejects_wrong_shape() {
    let b = ModelBundle::new(&layout(&["RR"]), &tiny_data(4), &tiny_model(), 1).unwrap();
    assert!(b.embed(Modality::Main, &DenseArray::zeros(&[6, 11]), 6).is_err());
    assert!(b.embed(Modality::Main, &DenseArray::zeros(&[7, 12]), 6).is_err());
    assert!(matches!(
        b.embed(Modality::Flow, &DenseArray::zeros(&[6, 8]), 6),
        Err(crate::Error::MissingInput(_))
    ));
}

#[test]
fn embedding_replays_bit_exactly() {
    let data = tiny_data(8);
    let (ds, _) = Dataset::generate(&data, Exec::Sequential).unwrap();
    let clips: Vec<&MultiModalClip> = ds.clips.iter().collect();
    let run = || {
        let b = ModelBundle::new(&GenomeLayout::full(), &data, &tiny_model(), 9).unwrap();
        b.embed_clips(&clips, Exec::default()).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |x: &DenseArray| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn parallel_and_sequential_embeddings_agree() {
    let data = tiny_data(150);
    let (ds, _) = Dataset::generate(&data, Exec::Sequential).unwrap();
    let clips: Vec<&MultiModalClip> = ds.clips.iter().collect();
    let b = ModelBundle::new(&layout(&["RR"]), &data, &tiny_model(), 3).unwrap();
    let seq = b.embed_clips(&clips, Exec::Sequential).unwrap();
    let par = b.embed_clips(&clips, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.shape(), &[150, 2]);
}

#[test]
fn decoder_shapes_and_zero_output() {
    let data = tiny_data(4);
    let b = zeroed(
        ModelBundle::new(&layout(&["RR", "RP", "RT", "GC", "FT"]), &data, &tiny_model(), 1).unwrap(),
    );
    let e = DenseArray::filled(&[3, 2], 0.7);
    let rr = b.decode(&"RR".parse().unwrap(), &e).unwrap();
    assert_eq!(rr.shape(), &[3, 6 * 12]);
    assert!(rr.data().iter().all(|&v| v == 0.0));
    let rp = b.decode(&"RP".parse().unwrap(), &e).unwrap();
    assert_eq!(rp.shape(), &[3, 2 * 12]);
    // main→flow, grey→main, flow→main
    assert_eq!(b.decode(&"RT".parse().unwrap(), &e).unwrap().shape(), &[3, 6 * 8]);
    assert_eq!(b.decode(&"GC".parse().unwrap(), &e).unwrap().shape(), &[3, 6 * 12]);
    assert_eq!(b.decode(&"FT".parse().unwrap(), &e).unwrap().shape(), &[3, 6 * 12]);
    assert!(b.decode(&"RS".parse().unwrap(), &e).is_err());
}

#[test]
fn binary_predict_values() {
    assert_eq!(BinaryHead::zeros(4).predict(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);
    let h = BinaryHead { w: vec![1.0, 0.0], b: 0.0 };
    assert!((h.predict(&[3f64.ln(), 5.0]).unwrap() - 0.75).abs() < 1e-15);
    let big = BinaryHead { w: vec![1.0], b: 1e6 };
    assert_eq!(big.predict(&[0.0]).unwrap(), 1.0 - 1e-12);
    let small = BinaryHead { w: vec![1.0], b: -1e6 };
    assert_eq!(small.predict(&[0.0]).unwrap(), 1e-12);
    assert!(h.predict(&[1.0]).is_err());
}

#[test]
fn auxiliary_taps_match_main_taps() {
    let data = tiny_data(4);
    let b = ModelBundle::new(&GenomeLayout::full(), &data, &tiny_model(), 1).unwrap();
    let (ds, _) = Dataset::generate(&data, Exec::Sequential).unwrap();
    let clip = &ds.clips[0];
    let (_, main) = b.embed(Modality::Main, &clip.frame_matrix(Modality::Main), 6).unwrap();
    for m in [Modality::Grey, Modality::Flow, Modality::Audio] {
        let (_, aux) = b.embed(m, &clip.frame_matrix(m), 6).unwrap();
        for ((l1, a), (l2, c)) in main.0.iter().zip(&aux.0) {
            assert_eq!(l1, l2);
            assert_eq!(a.shape(), c.shape());
        }
    }
}

#[test]
fn frame_order_changes_embedding() {
    let data = DatasetConfig {
        noise_std: 0.0,
        height: 4,
        width: 4,
        ..tiny_data(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = generate_clip(1, &data, 0, &mut rng).unwrap();
    let b = ModelBundle::new(&layout(&["RS"]), &data, &tiny_model(), 5).unwrap();
    let x = clip.frame_matrix(Modality::Main);
    let mut rows: Vec<Vec<f64>> = (0..6).map(|r| x.row(r).to_vec()).collect();
    rows.reverse();
    let rev = DenseArray::from_rows(&rows).unwrap();
    let (e1, t1) = b.embed(Modality::Main, &x, 6).unwrap();
    let (e2, t2) = b.embed(Modality::Main, &rev, 6).unwrap();
    assert!(t1.0[0].1.max_abs_diff(&t2.0[0].1) > 1e-6);
    assert!(e1.max_abs_diff(&e2) > 1e-9);
}

#[test]
fn future_prediction_ignores_target_frames() {
    use crate::losses::{total_loss, Batch, LossWeights};
    let data = tiny_data(3);
    let (ds, _) = Dataset::generate(&data, Exec::Sequential).unwrap();
    let l = layout(&["RP"]);
    let b = ModelBundle::new(&l, &data, &tiny_model(), 4).unwrap();
    let w = LossWeights::uniform(&l, 1.0).unwrap();
    let clips: Vec<&MultiModalClip> = ds.clips.iter().collect();
    let batch = Batch::from_clips(&clips, &[Modality::Main]).unwrap();
    let base = total_loss(&w, &b, &batch).unwrap().total;
    // the first 4 frames alone decide the prediction; with the last 2 frames
    // replaced by the current prediction the loss must vanish
    let key = "RP".parse().unwrap();
    let x = batch.frame_range(Modality::Main, &key, 0..4).unwrap();
    let (e, _) = b.embed(Modality::Main, &x, 4).unwrap();
    let pred = b.decode(&key, &e).unwrap();
    let mut patched = batch.clone();
    let full = patched.full.get_mut(&Modality::Main).unwrap();
    for i in 0..3 {
        for t in 4..6 {
            let src = &pred.row(i)[(t - 4) * 12..(t - 3) * 12];
            full.row_mut(i * 6 + t).copy_from_slice(src);
        }
    }
    assert!(base > 0.0);
    assert!(total_loss(&w, &b, &patched).unwrap().total < 1e-24);
}

#[test]
fn checkpoint_params_round_trip() {
    let data = tiny_data(4);
    let cfg = tiny_model();
    let l = GenomeLayout::full();
    let b = ModelBundle::new(&l, &data, &cfg, 8).unwrap();
    let loaded = ParamSet::from_bytes(&b.params.to_bytes()).unwrap();
    let back = ModelBundle::from_params(&l, &data, &cfg, loaded).unwrap();
    assert_eq!(back, b);
    let other = ModelBundle::new(&layout(&["RR"]), &data, &cfg, 8).unwrap();
    assert!(ModelBundle::from_params(&l, &data, &cfg, other.params).is_err());
}

#[test]
fn rejects_distill_beyond_hidden_layers() {
    assert!(ModelBundle::new(&layout(&["GD3"]), &tiny_data(4), &tiny_model(), 0).is_err());
}

#[test]
fn reconstruction_overfits_one_clip() {
    use crate::losses::{record_total_loss, Batch, LossWeights};
    let data = DatasetConfig {
        height: 4,
        width: 4,
        ..tiny_data(1)
    };
    let cfg = ModelConfig {
        hidden: vec![16, 8],
        embed_dim: 8,
        decoder_hidden: 16,
        ..tiny_model()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clip = generate_clip(2, &data, 0, &mut rng).unwrap();
    let l = layout(&["RR"]);
    let mut b = ModelBundle::new(&l, &data, &cfg, 0).unwrap();
    let w = LossWeights::uniform(&l, 1.0).unwrap();
    let batch = Batch::from_clips(&[&clip], &[Modality::Main]).unwrap();
    let mut losses = Vec::new();
    for _ in 0..500 {
        let mut tape = Tape::new();
        let (loss, br) = record_total_loss(&mut tape, &w, &b, &batch, true).unwrap();
        losses.push(br.total);
        let g = tape.backward(loss, &b.params).unwrap();
        sgd_step(&mut b.params, &g, 0.3).unwrap();
    }
    let last = *losses.last().unwrap();
    assert!(last < 0.5 * losses[0], "{} -> {last}", losses[0]);
    // decreasing on average: each 100-step block mean below the previous
    let blocks: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
}
