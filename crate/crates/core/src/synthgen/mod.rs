//! Deterministic synthetic multi-modal clips.
//!
//! Each clip shows one Gaussian blob moving over a dark background. The blob
//! color, heading, curvature, speed, and the audio tone are functions of a
//! hidden class drawn from a Zipf distribution. Four synchronized modalities
//! are produced: the colour frames, their grey channel mean, the true
//! per-pixel displacement field, and a mono waveform whose loudness follows
//! the blob speed.

mod io;
mod samplers;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::Exec;

pub use io::{read_labels, write_labels, DATASET_FORMAT_VERSION};
pub use samplers::{
    make_misaligned, make_reversed, make_shuffled, NegativeKind, SampleKind, TaskSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Main,
    Grey,
    Flow,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Main, Modality::Grey, Modality::Flow, Modality::Audio];

    /// One-letter symbol used in loss key names.
    pub fn letter(self) -> char {
        match self {
            Modality::Main => 'R',
            Modality::Grey => 'G',
            Modality::Flow => 'F',
            Modality::Audio => 'A',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.letter() == c)
    }

    /// Values per frame for this modality.
    pub fn frame_len(self, config: &DatasetConfig) -> usize {
        let px = config.height * config.width;
        match self {
            Modality::Main => px * 3,
            Modality::Grey => px,
            Modality::Flow => px * 2,
            Modality::Audio => config.audio_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_clips: usize,
    pub num_classes: usize,
    pub zipf_s: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_rate: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_clips: 4096,
            num_classes: 8,
            zipf_s: 1.0,
            frames: 8,
            height: 16,
            width: 16,
            audio_rate: 64,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        if self.frames < 4 {
            return Err(Error::invalid("at least 4 frames are required"));
        }
        if self.height == 0 || self.width == 0 || self.audio_rate == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if !(self.zipf_s > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::invalid("zipf_s must be > 0 and noise_std >= 0"));
        }
        Ok(())
    }
}

/// One synchronized clip. Every modality covers the same `F` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalClip {
    pub clip_id: u64,
    /// `[F, H, W, 3]`, values in `[0, 1]`.
    pub main: DenseArray,
    /// `[F, H, W, 1]`, channel mean of `main`.
    pub grey: DenseArray,
    /// `[F, H, W, 2]`, (dx, dy) displacement in pixels per frame.
    pub flow: DenseArray,
    /// `[F·R]` mono waveform in `[-1, 1]`.
    pub audio: DenseArray,
}

impl MultiModalClip {
    pub fn modality(&self, m: Modality) -> &DenseArray {
        match m {
            Modality::Main => &self.main,
            Modality::Grey => &self.grey,
            Modality::Flow => &self.flow,
            Modality::Audio => &self.audio,
        }
    }

    pub fn frames(&self) -> usize {
        self.main.shape()[0]
    }

    /// Modality `m` as an `F × frame_len` matrix.
    pub fn frame_matrix(&self, m: Modality) -> DenseArray {
        let a = self.modality(m);
        let f = self.frames();
        a.as_matrix(f, a.len() / f).expect("modality length divisible by frames")
    }
}

/// Probability of each class `0..classes` under Zipf(`s`).
pub fn zipf_probabilities(classes: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=classes).map(|i| (i as f64).powf(-s)).collect();
    let h: f64 = w.iter().sum();
    w.into_iter().map(|v| v / h).collect()
}

/// Draws a 0-based class index with probability `(1/(i+1)^s) / H_{C,s}`.
pub fn zipf_sample<R: Rng + ?Sized>(classes: usize, s: f64, rng: &mut R) -> usize {
    if classes <= 1 {
        return 0;
    }
    let probs = zipf_probabilities(classes, s);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    classes - 1
}

/// Appearance and motion parameters of a rendered blob.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipStyle {
    pub color: [f64; 3],
    /// Initial heading in radians.
    pub heading: f64,
    /// Heading change per frame in radians.
    pub curvature: f64,
    /// Pixels per frame.
    pub speed: f64,
    /// Tone frequency in cycles per audio sample.
    pub tone: f64,
    /// Blob standard deviation in pixels.
    pub radius: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub const MAX_SPEED: f64 = 2.0;

/// Class-determined style, before per-clip jitter.
pub fn class_style(class: usize, config: &DatasetConfig) -> ClipStyle {
    let c = config.num_classes.max(1) as f64;
    let k = class as f64;
    let scale = config.height.min(config.width) as f64 / 16.0;
    ClipStyle {
        color: hsv_to_rgb(k / c, 0.85, 0.95),
        heading: 2.0 * PI * k / c,
        curvature: ((class % 3) as f64 - 1.0) * 0.2,
        speed: scale * (0.5 + 1.5 * ((class * 3) % config.num_classes.max(1)) as f64 / c),
        tone: 0.02 + 0.36 * k / c,
        radius: (1.5 + 0.5 * (class % 2) as f64) * scale,
    }
}

fn toroidal(d: f64, size: f64) -> f64 {
    let d = d.rem_euclid(size);
    if d > size / 2.0 {
        d - size
    } else {
        d
    }
}

/// Renders a clip for a fully specified style. Per-clip randomness (start
/// position, heading jitter, audio phase, noise) comes from `rng`.
pub fn render_clip<R: Rng + ?Sized>(
    style: &ClipStyle,
    config: &DatasetConfig,
    clip_id: u64,
    rng: &mut R,
) -> MultiModalClip {
    let (f, h, w, r) = (config.frames, config.height, config.width, config.audio_rate);
    let (hf, wf) = (h as f64, w as f64);
    let mut x = rng.random_range(0.0..wf);
    let mut y = rng.random_range(0.0..hf);
    let mut heading = style.heading + rng.random_range(-0.3..0.3);
    let speed = style.speed * rng.random_range(0.85..1.15);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).unwrap());
    let background = 0.1;

    let mut main = vec![0.0; f * h * w * 3];
    let mut flow = vec![0.0; f * h * w * 2];
    let mut audio = vec![0.0; f * r];
    let two_var = 2.0 * style.radius * style.radius;
    let mut phase = phase0;
    for t in 0..f {
        let vx = speed * heading.cos();
        let vy = speed * heading.sin();
        for py in 0..h {
            for px in 0..w {
                let dx = toroidal(px as f64 - x, wf);
                let dy = toroidal(py as f64 - y, hf);
                let mask = (-(dx * dx + dy * dy) / two_var).exp();
                let base = ((t * h + py) * w + px) * 3;
                for ch in 0..3 {
                    let mut v = background + (style.color[ch] - background) * mask;
                    if let Some(n) = &noise {
                        v += n.sample(rng);
                    }
                    main[base + ch] = v.clamp(0.0, 1.0);
                }
                let fb = ((t * h + py) * w + px) * 2;
                flow[fb] = vx * mask;
                flow[fb + 1] = vy * mask;
            }
        }
        let amp = 0.2 + 0.6 * (speed / MAX_SPEED).min(1.0);
        for i in 0..r {
            let mut v = amp * phase.sin();
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            audio[t * r + i] = v.clamp(-1.0, 1.0);
            phase += 2.0 * PI * style.tone;
        }
        x = (x + vx).rem_euclid(wf);
        y = (y + vy).rem_euclid(hf);
        heading += style.curvature;
    }
    let main = DenseArray::new(vec![f, h, w, 3], main).unwrap();
    let grey = derive_grey(&main).expect("main has 3 channels");
    MultiModalClip {
        clip_id,
        main,
        grey,
        flow: DenseArray::new(vec![f, h, w, 2], flow).unwrap(),
        audio: DenseArray::new(vec![f * r], audio).unwrap(),
    }
}

pub fn generate_clip<R: Rng + ?Sized>(
    class: usize,
    config: &DatasetConfig,
    clip_id: u64,
    rng: &mut R,
) -> Result<MultiModalClip> {
    if class >= config.num_classes {
        return Err(Error::invalid(format!(
            "class {class} outside 0..{}",
            config.num_classes
        )));
    }
    Ok(render_clip(&class_style(class, config), config, clip_id, rng))
}

/// Per-pixel mean of the three colour channels; keeps a trailing channel
/// axis of size 1.
pub fn derive_grey(main: &DenseArray) -> Result<DenseArray> {
    let shape = main.shape();
    if shape.last() != Some(&3) {
        return Err(Error::shape("derive_grey", shape, &[3]));
    }
    let data: Vec<f64> = main
        .data()
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    let mut grey_shape = shape.to_vec();
    *grey_shape.last_mut().unwrap() = 1;
    DenseArray::new(grey_shape, data)
}

/// Deterministic per-clip generator stream.
pub fn clip_rng(seed: u64, clip_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ clip_id)
}

/// Latent class of clip `clip_id`, plus the generator stream positioned to
/// render it.
pub fn draw_class(config: &DatasetConfig, clip_id: u64) -> (usize, ChaCha8Rng) {
    let mut rng = clip_rng(config.seed, clip_id);
    let class = zipf_sample(config.num_classes, config.zipf_s, &mut rng);
    (class, rng)
}

/// A generated or loaded set of clips. Class labels are kept apart in
/// [`Labels`] and are not needed for anything unsupervised.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub clips: Vec<MultiModalClip>,
}

/// Latent class of every clip, indexed by clip id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels(pub Vec<usize>);

impl Labels {
    pub fn of(&self, clip_id: u64) -> usize {
        self.0[clip_id as usize]
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &c in &self.0 {
            if c < classes {
                h[c] += 1;
            }
        }
        h
    }
}

impl Dataset {
    /// Generates `config.num_clips` clips; clip `i` is a pure function of
    /// `(config, i)` so the work can be split across threads.
    pub fn generate(config: &DatasetConfig, exec: Exec) -> Result<(Dataset, Labels)> {
        config.validate()?;
        let out = exec.map(config.num_clips, |i| {
            let (class, mut rng) = draw_class(config, i as u64);
            let clip = generate_clip(class, config, i as u64, &mut rng);
            clip.map(|c| (c, class))
        });
        let mut clips = Vec::with_capacity(out.len());
        let mut labels = Vec::with_capacity(out.len());
        for r in out {
            let (c, l) = r?;
            clips.push(c);
            labels.push(l);
        }
        Ok((
            Dataset {
                config: config.clone(),
                clips,
            },
            Labels(labels),
        ))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}
