//! Dataset records, on-disk manifests, the synthetic benchmark, and
//! training-time augmentation.

pub mod augment;
pub mod manifest;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentationConfig};
pub use manifest::{load_dataset, DatasetManifest, RecordDescriptor};
pub use synthetic::{generate_samples, generate_synthetic, SyntheticGenConfig};

/// Semantic classes of the synthetic parsing taxonomy.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_HEAD: u8 = 1;
pub const LABEL_TORSO: u8 = 2;
pub const LABEL_ARMS: u8 = 3;
pub const LABEL_LEGS: u8 = 4;
pub const SYNTHETIC_NUM_CLASSES: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

/// One pedestrian image with its parsing map and metadata.
///
/// The image is stored channels-first, `(3, H', W')`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Array3<f64>,
    pub seg: Array2<u8>,
    pub person_id: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub split: Split,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    /// Checks layout, value range and label range (`labels < num_classes`).
    pub fn validate(&self, num_classes: u8) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::Validation(format!("image has {c} channels, expected 3")));
        }
        if self.seg.dim() != (h, w) {
            return Err(Error::Validation(format!(
                "seg size {:?} differs from image size {:?}",
                self.seg.dim(),
                (h, w)
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values outside [0, 1]".into()));
        }
        if let Some(bad) = self.seg.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "seg label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(())
    }
}
