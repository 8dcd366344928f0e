//! Body masks from parsing maps, and the clothing-invariant masked image.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{LABEL_ARMS, LABEL_HEAD, LABEL_LEGS, LABEL_TORSO};
use crate::error::{Error, Result};

/// Parsing labels treated as identity-related.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet(BTreeSet<u8>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = u8>) -> Result<Self> {
        let set: BTreeSet<u8> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("identity label set is empty".into()));
        }
        if set.contains(&0) {
            return Err(Error::Config("label 0 is background and cannot be an identity label".into()));
        }
        Ok(Self(set))
    }

    /// Head, arms and legs of the synthetic taxonomy.
    pub fn default_identity() -> Self {
        Self::new([LABEL_HEAD, LABEL_ARMS, LABEL_LEGS]).unwrap()
    }

    pub fn contains(&self, label: u8) -> bool {
        self.0.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    pub fn max_label(&self) -> u8 {
        *self.0.iter().next_back().unwrap()
    }

    /// Checks every label fits a taxonomy of `num_classes` (background included).
    pub fn check_range(&self, num_classes: u8) -> Result<()> {
        match self.0.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::Config(format!(
                "identity label {l} outside 1..{num_classes}"
            ))),
            None => Ok(()),
        }
    }

    /// Accepts integers or synthetic class names (`head`, `torso`, `arms`, `legs`).
    pub fn parse_label(token: &str) -> Result<u8> {
        let t = token.trim();
        match t.to_ascii_lowercase().as_str() {
            "head" => Ok(LABEL_HEAD),
            "torso" => Ok(LABEL_TORSO),
            "arms" => Ok(LABEL_ARMS),
            "legs" => Ok(LABEL_LEGS),
            _ => t
                .parse::<u8>()
                .map_err(|_| Error::Config(format!("unknown label '{t}'"))),
        }
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Item {
            Num(u8),
            Name(String),
        }
        let items = Vec::<Item>::deserialize(d)?;
        let labels = items
            .into_iter()
            .map(|it| match it {
                Item::Num(n) => Ok(n),
                Item::Name(s) => LabelSet::parse_label(&s),
            })
            .collect::<Result<Vec<u8>>>()
            .map_err(serde::de::Error::custom)?;
        LabelSet::new(labels).map_err(serde::de::Error::custom)
    }
}

/// Binary `H' x W'` mask, 1 on identity-related pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyMask(pub Array2<u8>);

impl BodyMask {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self(Array2::ones((h, w)))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }
}

pub fn build_body_mask(seg: &Array2<u8>, labels: &LabelSet) -> BodyMask {
    BodyMask(seg.mapv(|l| labels.contains(l) as u8))
}

/// `image ⊙ mask`, broadcasting the mask over channels. Masked-out pixels are
/// exactly zero.
pub fn apply_mask(image: &Array3<f64>, mask: &BodyMask) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "mask size {:?} differs from image size {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut out = image.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut ch).and(&mask.0).for_each(|v, &m| {
            if m == 0 {
                *v = 0.0;
            }
        });
    }
    Ok(out)
}
