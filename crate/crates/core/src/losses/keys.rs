//! Loss-term identifiers, the genome layout, and [`LossWeights`].
//!
//! Every term has a short name: a modality letter (`R` main, `G` grey,
//! `F` flow, `A` audio) followed by a task letter, plus a layer number for
//! distillation terms.
//!
//! | letter | task |
//! |---|---|
//! | `R` | reconstruct the clip |
//! | `P` | predict the final frames from the leading ones |
//! | `T` | cross-modal transfer (main→flow, otherwise →main) |
//! | `C` | colorize (grey→main) |
//! | `S` | shuffled-frame detection |
//! | `B` | backward-playback detection |
//! | `A` | temporal alignment against the partner modality |
//! | `E` | contrastive embedding against the partner modality |
//! | `D<n>` | distill hidden layer `n` (1-based) of this modality into main |
//!
//! The sorted order of names is the genome coordinate order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synthgen::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Reconstruct,
    FuturePredict,
    Transfer,
    Colorize,
    Shuffle,
    Backward,
    Align,
    Embed,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Reconstruct,
        TaskKind::FuturePredict,
        TaskKind::Transfer,
        TaskKind::Colorize,
        TaskKind::Shuffle,
        TaskKind::Backward,
        TaskKind::Align,
        TaskKind::Embed,
    ];

    pub fn letter(self) -> char {
        match self {
            TaskKind::Reconstruct => 'R',
            TaskKind::FuturePredict => 'P',
            TaskKind::Transfer => 'T',
            TaskKind::Colorize => 'C',
            TaskKind::Shuffle => 'S',
            TaskKind::Backward => 'B',
            TaskKind::Align => 'A',
            TaskKind::Embed => 'E',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.letter() == c)
    }
}

/// The modality paired with `m` for alignment and contrastive terms.
pub fn partner(m: Modality) -> Modality {
    match m {
        Modality::Main => Modality::Audio,
        _ => Modality::Main,
    }
}

/// Target modality of a transfer or colorize term whose input is `m`.
pub fn transfer_target(m: Modality) -> Modality {
    match m {
        Modality::Main => Modality::Flow,
        _ => Modality::Main,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKey {
    Task(Modality, TaskKind),
    /// Auxiliary source modality and 1-based hidden layer.
    Distill(Modality, usize),
}

impl LossKey {
    pub fn name(&self) -> String {
        match self {
            LossKey::Task(m, t) => format!("{}{}", m.letter(), t.letter()),
            LossKey::Distill(m, l) => format!("{}D{}", m.letter(), l),
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            LossKey::Task(m, _) | LossKey::Distill(m, _) => *m,
        }
    }

    /// Modalities whose encoders this term runs.
    pub fn encoders(&self) -> Vec<Modality> {
        match *self {
            LossKey::Task(m, TaskKind::Align | TaskKind::Embed) => vec![m, partner(m)],
            LossKey::Task(m, _) => vec![m],
            LossKey::Distill(m, _) => vec![Modality::Main, m],
        }
    }

    pub fn check(self) -> Result<Self> {
        match self {
            LossKey::Task(m, TaskKind::Colorize) if m != Modality::Grey => {
                Err(Error::invalid("colorize is defined for grey input only"))
            }
            LossKey::Distill(Modality::Main, _) => {
                Err(Error::invalid("distillation source must be an auxiliary modality"))
            }
            LossKey::Distill(_, 0) => Err(Error::invalid("distillation layers are 1-based")),
            k => Ok(k),
        }
    }
}

impl fmt::Display for LossKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for LossKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unrecognised loss key {s:?}"));
        let mut chars = s.chars();
        let m = chars.next().and_then(Modality::from_letter).ok_or_else(bad)?;
        let t = chars.next().ok_or_else(bad)?;
        let rest: String = chars.collect();
        let key = if t == 'D' {
            LossKey::Distill(m, rest.parse().map_err(|_| bad())?)
        } else if rest.is_empty() {
            LossKey::Task(m, TaskKind::from_letter(t).ok_or_else(bad)?)
        } else {
            return Err(bad());
        };
        key.check()
    }
}

impl Ord for LossKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.name().cmp(&other.name())
    }
}

impl PartialOrd for LossKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for LossKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for LossKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, duplicate-free set of loss keys; position = genome coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LossKey>", into = "Vec<LossKey>")]
pub struct GenomeLayout(Vec<LossKey>);

impl GenomeLayout {
    pub fn new(mut keys: Vec<LossKey>) -> Result<Self> {
        keys.sort();
        let before = keys.len();
        keys.dedup();
        if keys.len() != before {
            return Err(Error::invalid("duplicate loss keys in layout"));
        }
        for k in &keys {
            k.check()?;
        }
        Ok(Self(keys))
    }

    /// Every term the default experiment searches over (d = 21).
    pub fn full() -> Self {
        Self::parse(&[
            "RR", "RP", "RS", "RB", "RA", "RE", "RT", "GR", "GC", "FR", "FP", "FT", "FE", "AR",
            "AP", "GD1", "GD2", "FD1", "FD2", "AD1", "AD2",
        ])
        .expect("valid default layout")
    }

    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|s| s.as_ref().parse()).collect::<Result<_>>()?)
    }

    pub fn keys(&self) -> &[LossKey] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn index_of(&self, key: &LossKey) -> Option<usize> {
        self.0.binary_search(key).ok()
    }

    pub fn distill_keys(&self) -> impl Iterator<Item = &LossKey> {
        self.0.iter().filter(|k| matches!(k, LossKey::Distill(..)))
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(LossKey::name).collect()
    }
}

impl TryFrom<Vec<LossKey>> for GenomeLayout {
    type Error = Error;
    fn try_from(v: Vec<LossKey>) -> Result<Self> {
        GenomeLayout::new(v)
    }
}

impl From<GenomeLayout> for Vec<LossKey> {
    fn from(l: GenomeLayout) -> Self {
        l.0
    }
}

/// One weight in `[0, 1]` per loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    weights: BTreeMap<LossKey, f64>,
}

impl LossWeights {
    pub fn new(weights: BTreeMap<LossKey, f64>) -> Result<Self> {
        for (k, &w) in &weights {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("weight {k} = {w} outside [0, 1]")));
            }
        }
        Ok(Self { weights })
    }

    pub fn from_genome(layout: &GenomeLayout, genome: &[f64]) -> Result<Self> {
        if genome.len() != layout.dim() {
            return Err(Error::shape("from_genome", &[layout.dim()], &[genome.len()]));
        }
        Self::new(layout.keys().iter().copied().zip(genome.iter().copied()).collect())
    }

    pub fn uniform(layout: &GenomeLayout, value: f64) -> Result<Self> {
        Self::from_genome(layout, &vec![value; layout.dim()])
    }

    pub fn genome(&self) -> Vec<f64> {
        self.weights.values().copied().collect()
    }

    pub fn get(&self, key: &LossKey) -> Option<f64> {
        self.weights.get(key).copied()
    }

    pub fn set(&mut self, key: LossKey, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("weight {key} = {value} outside [0, 1]")));
        }
        self.weights.insert(key, value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LossKey, &f64)> {
        self.weights.iter()
    }

    pub fn layout(&self) -> GenomeLayout {
        GenomeLayout(self.weights.keys().copied().collect())
    }

    /// Errors unless the key set equals `layout` exactly.
    pub fn check_layout(&self, layout: &GenomeLayout) -> Result<()> {
        let unknown: Vec<String> = self
            .weights
            .keys()
            .filter(|k| layout.index_of(k).is_none())
            .map(LossKey::name)
            .collect();
        let missing: Vec<String> = layout
            .keys()
            .iter()
            .filter(|k| !self.weights.contains_key(k))
            .map(LossKey::name)
            .collect();
        if unknown.is_empty() && missing.is_empty() {
            Ok(())
        } else {
            Err(Error::KeyMismatch { unknown, missing })
        }
    }

    /// `KEY = value` lines in canonical order. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, w) in &self.weights {
            out.push_str(&format!("{k} = {w:?}\n"));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("loss weights", format!("line {}: expected KEY = value", n + 1))
            })?;
            let key: LossKey = k.trim().parse()?;
            let value: f64 = v.trim().parse().map_err(|_| {
                Error::format("loss weights", format!("line {}: bad number {v:?}", n + 1))
            })?;
            if weights.insert(key, value).is_some() {
                return Err(Error::format("loss weights", format!("duplicate key {key}")));
            }
        }
        Self::new(weights)
    }
}
