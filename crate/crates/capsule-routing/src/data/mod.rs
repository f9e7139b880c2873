//! Dataset ingestion, preprocessing and the toy vote-cloud generator.

pub mod mnist;
pub mod preprocess;
pub mod smallnorb;
pub mod synth;
pub mod toy;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Raw (unpreprocessed) images of one split, 8-bit grayscale.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let px = self.height * self.width;
        &self.images[i * px..(i + 1) * px]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    SmallNorb,
}

impl DatasetKind {
    pub fn classes(&self) -> usize {
        match self {
            DatasetKind::Mnist => 10,
            DatasetKind::SmallNorb => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::SmallNorb => "smallnorb",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let classes = self.kind.classes() as u8;
        for split in [&self.train, &self.test] {
            if split.images.len() != split.len() * split.height * split.width {
                return Err(Error::InvalidArgument {
                    what: "split image buffer does not match label count".into(),
                });
            }
            if let Some(&bad) = split.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::InvalidArgument {
                    what: format!("label {bad} out of range for {} classes", classes),
                });
            }
        }
        Ok(())
    }
}

/// A preprocessed batch ready for the network: [B, H, W, 1] standardized
/// pixels plus integer labels.
#[derive(Clone, Debug)]
pub struct ImageBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
