//! Dataset container and label sidecar.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic b"EVDS", version u32
//! num_clips u64, num_classes u64, zipf_s f64, frames u64, height u64,
//! width u64, audio_rate u64, noise_std f64, seed u64
//! per clip: clip_id u64, then named arrays "main", "grey", "flow", "audio"
//! ```
//!
//! The sidecar is a text file with one `clip_id class` pair per line and a
//! leading `#` comment line. Class labels never appear in the container.

use std::io::{BufRead, Read, Write};

use super::{Dataset, DatasetConfig, Labels, Modality, MultiModalClip};
use crate::error::{Error, Result};
use crate::numerics::{read_named_array, read_u32, read_u64, write_named_array};

pub const DATASET_MAGIC: &[u8; 4] = b"EVDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

const NAMES: [(&str, Modality); 4] = [
    ("main", Modality::Main),
    ("grey", Modality::Grey),
    ("flow", Modality::Flow),
    ("audio", Modality::Audio),
];

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

impl Dataset {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
        for v in [self.clips.len() as u64, c.num_classes as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.zipf_s.to_le_bytes())?;
        for v in [c.frames, c.height, c.width, c.audio_rate] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.noise_std.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for clip in &self.clips {
            w.write_all(&clip.clip_id.to_le_bytes())?;
            for (name, m) in NAMES {
                write_named_array(&mut w, name, clip.modality(m))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let num_clips = read_u64(&mut r)? as usize;
        let num_classes = read_u64(&mut r)? as usize;
        let zipf_s = read_f64(&mut r)?;
        let frames = read_u64(&mut r)? as usize;
        let height = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        let audio_rate = read_u64(&mut r)? as usize;
        let noise_std = read_f64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let config = DatasetConfig {
            num_clips,
            num_classes,
            zipf_s,
            frames,
            height,
            width,
            audio_rate,
            noise_std,
            seed,
        };
        let mut clips = Vec::with_capacity(num_clips.min(1 << 20));
        for _ in 0..num_clips {
            let clip_id = read_u64(&mut r)?;
            let mut arrays = Vec::with_capacity(4);
            for (expected, _) in NAMES {
                let (name, arr) = read_named_array(&mut r)?;
                if name != expected {
                    return Err(Error::format(
                        "dataset",
                        format!("expected array {expected}, found {name}"),
                    ));
                }
                arrays.push(arr);
            }
            let mut it = arrays.into_iter();
            clips.push(MultiModalClip {
                clip_id,
                main: it.next().unwrap(),
                grey: it.next().unwrap(),
                flow: it.next().unwrap(),
                audio: it.next().unwrap(),
            });
        }
        Ok(Dataset { config, clips })
    }
}

pub fn write_labels<W: Write>(labels: &Labels, mut w: W) -> Result<()> {
    writeln!(w, "# clip_id latent_class")?;
    for (id, class) in labels.0.iter().enumerate() {
        writeln!(w, "{id} {class}")?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Labels> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("label sidecar", format!("line {}", n + 1)))
        };
        let id = parse(parts.next())?;
        let class = parse(parts.next())?;
        if id != out.len() {
            return Err(Error::format(
                "label sidecar",
                format!("line {}: expected clip id {}, found {id}", n + 1, out.len()),
            ));
        }
        out.push(class);
    }
    Ok(Labels(out))
}
