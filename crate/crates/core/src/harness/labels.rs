use crate::error::{Error, Result};
use crate::evolve::FitnessKind;

/// Why labels are being read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPurpose {
    Fitness(FitnessKind),
    Evaluation,
    DataGeneration,
}

/// Proof that the caller may read class labels. ELo fitness cannot get one.
#[derive(Debug)]
pub struct LabelCapability {
    purpose: LabelPurpose,
}

impl LabelCapability {
    pub fn request(purpose: LabelPurpose) -> Result<Self> {
        match purpose {
            LabelPurpose::Fitness(FitnessKind::Elo) => Err(Error::LabelAccess(
                "ELo fitness is unsupervised and may not read labels".into(),
            )),
            _ => Ok(Self { purpose }),
        }
    }

    pub fn purpose(&self) -> LabelPurpose {
        self.purpose
    }
}
