//! Retrieval evaluation under the general, same-clothes, and clothes-changing
//! protocols, plus fused-feature saliency maps.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::mask::{build_body_mask, BodyMask};
use crate::model::{Encoded, Model, Scorer};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    General,
    Sc,
    Cc,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" => Ok(Self::General),
            "sc" => Ok(Self::Sc),
            "cc" => Ok(Self::Cc),
            other => Err(Error::Config(format!("unknown protocol '{other}' (general, sc, cc)"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::General => "general",
            Self::Sc => "sc",
            Self::Cc => "cc",
        })
    }
}

/// Identity, clothing, and camera of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub person_id: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
}

impl From<&SampleRecord> for Meta {
    fn from(s: &SampleRecord) -> Self {
        Self {
            person_id: s.person_id,
            clothes_id: s.clothes_id,
            camera_id: s.camera_id,
        }
    }
}

impl Protocol {
    /// Whether a gallery entry is removed from a query's ranking.
    pub fn discards(self, q: Meta, g: Meta) -> bool {
        let same_id = q.person_id == g.person_id;
        let same_cam = same_id && q.camera_id == g.camera_id;
        match self {
            Self::General => same_cam,
            Self::Cc => same_cam || (same_id && q.clothes_id == g.clothes_id),
            Self::Sc => same_cam || (same_id && q.clothes_id != g.clothes_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: Protocol,
    /// Percent.
    pub top1: f64,
    /// Percent.
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Average precision (0..1) of each evaluated query, `None` if excluded.
    pub per_query_ap: Vec<Option<f64>>,
    pub evaluated: usize,
    /// Queries without any valid positive after discarding.
    pub excluded: usize,
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let total = relevant_in_rank_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &r) in relevant_in_rank_order.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Ranks galleries by descending score (ties keep gallery order) and
/// computes Top-1 and mAP over queries with at least one valid positive.
pub fn evaluate_scores(scores: &Array2<f64>, query: &[Meta], gallery: &[Meta], protocol: Protocol) -> Result<EvalResult> {
    if scores.dim() != (query.len(), gallery.len()) {
        return Err(Error::Validation(format!(
            "score matrix {:?} for {} queries and {} galleries",
            scores.dim(),
            query.len(),
            gallery.len()
        )));
    }
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut top1_hits = 0usize;
    for (qi, &q) in query.iter().enumerate() {
        let mut kept: Vec<usize> = (0..gallery.len()).filter(|&g| !protocol.discards(q, gallery[g])).collect();
        kept.sort_by(|&a, &b| scores[[qi, b]].total_cmp(&scores[[qi, a]]));
        let relevant: Vec<bool> = kept.iter().map(|&g| gallery[g].person_id == q.person_id).collect();
        let ap = average_precision(&relevant);
        if ap.is_some() && relevant[0] {
            top1_hits += 1;
        }
        per_query_ap.push(ap);
    }
    let aps: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    let evaluated = aps.len();
    let excluded = query.len() - evaluated;
    if excluded > 0 {
        log::warn!("{excluded} queries have no valid positive under {protocol} and are excluded");
    }
    let (top1, map) = if evaluated == 0 {
        (0.0, 0.0)
    } else {
        (
            100.0 * top1_hits as f64 / evaluated as f64,
            100.0 * aps.iter().sum::<f64>() / evaluated as f64,
        )
    };
    Ok(EvalResult {
        protocol,
        top1,
        map,
        per_query_ap,
        evaluated,
        excluded,
    })
}

/// Encodes samples in chunks.
pub fn encode_samples(model: &Model, samples: &[SampleRecord]) -> Result<Encoded> {
    let labels = &model.config.identity_labels;
    let parts = samples
        .chunks(EVAL_CHUNK)
        .map(|chunk| {
            let views: Vec<_> = chunk.iter().map(|s| s.image.view()).collect();
            let images = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let masks: Vec<BodyMask> = chunk.iter().map(|s| build_body_mask(&s.seg, labels)).collect();
            model.encode(&images, &masks)
        })
        .collect::<Result<Vec<_>>>()?;
    Encoded::concat(&parts)
}

/// Full evaluation of a model on query and gallery samples.
pub fn evaluate(
    model: &Model,
    query: &[SampleRecord],
    gallery: &[SampleRecord],
    protocol: Protocol,
    scorer: Scorer,
) -> Result<EvalResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Validation("query and gallery must be non-empty".into()));
    }
    let q = encode_samples(model, query)?;
    let g = encode_samples(model, gallery)?;
    let scores = model.score(&q, &g, scorer)?;
    let qm: Vec<Meta> = query.iter().map(Meta::from).collect();
    let gm: Vec<Meta> = gallery.iter().map(Meta::from).collect();
    evaluate_scores(&scores, &qm, &gm, protocol)
}

/// Per-position L2 norm of a `(C, H, W)` map, min-max normalized to [0, 1]
/// (all zeros when constant) and upsampled by pixel repetition.
pub fn saliency(maps: &Array3<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (_, h, w) = maps.dim();
    let norms = maps.map_axis(Axis(0), |v| v.dot(&v).sqrt());
    let lo = norms.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = norms.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let scaled = if hi > lo {
        norms.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros((h, w))
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        scaled[[(y * h / out_h).min(h - 1), (x * w / out_w).min(w - 1)]]
    })
}

/// Saliency of one image at input resolution.
pub fn heatmap(model: &Model, image: &Array3<f64>, mask: &BodyMask) -> Result<Array2<f64>> {
    let images: Array4<f64> = image.clone().insert_axis(Axis(0));
    let enc = model.encode(&images, std::slice::from_ref(mask))?;
    let (_, h, w) = image.dim();
    Ok(saliency(&enc.maps.index_axis(Axis(0), 0).to_owned(), h, w))
}
