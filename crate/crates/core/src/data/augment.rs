//! Random flip, pad-and-crop, and erasing. Geometric steps act on the image
//! and parsing map together; erased pixels become background in the map.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Zero padding added on every side before the random crop.
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub erase_area: (f64, f64),
    /// Height/width ratio of the erased rectangle, sampled log-uniformly.
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 4,
            out_height: 64,
            out_width: 32,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 1.0 / 0.3),
        }
    }
}

impl AugmentationConfig {
    /// Leaves every sample of the given size untouched.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip_prob: 0.0,
            pad: 0,
            out_height: height,
            out_width: width,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if (self.out_height, self.out_width) != (height, width) {
            return Err(Error::Config(format!(
                "crop output {}x{} differs from input resolution {height}x{width}",
                self.out_height, self.out_width
            )));
        }
        let (lo, hi) = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("erase_area must satisfy 0 < lo <= hi <= 1".into()));
        }
        let (alo, ahi) = self.erase_aspect;
        if !(0.0 < alo && alo <= ahi) {
            return Err(Error::Config("erase_aspect must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

fn flip(img: &mut Array3<f64>, seg: &mut Array2<u8>) {
    img.invert_axis(ndarray::Axis(2));
    seg.invert_axis(ndarray::Axis(1));
    *img = img.as_standard_layout().into_owned();
    *seg = seg.as_standard_layout().into_owned();
}

fn pad_crop<R: Rng>(
    img: &Array3<f64>,
    seg: &Array2<u8>,
    pad: usize,
    oh: usize,
    ow: usize,
    rng: &mut R,
) -> (Array3<f64>, Array2<u8>) {
    let (c, h, w) = img.dim();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut pimg = Array3::zeros((c, ph, pw));
    let mut pseg = Array2::zeros((ph, pw));
    pimg.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(img);
    pseg.slice_mut(s![pad..pad + h, pad..pad + w]).assign(seg);
    let max_y = ph.saturating_sub(oh);
    let max_x = pw.saturating_sub(ow);
    let y0 = if max_y > 0 { rng.gen_range(0..=max_y) } else { 0 };
    let x0 = if max_x > 0 { rng.gen_range(0..=max_x) } else { 0 };
    let mut out_img = Array3::zeros((c, oh, ow));
    let mut out_seg = Array2::zeros((oh, ow));
    let (ch, cw) = (oh.min(ph - y0), ow.min(pw - x0));
    out_img
        .slice_mut(s![.., ..ch, ..cw])
        .assign(&pimg.slice(s![.., y0..y0 + ch, x0..x0 + cw]));
    out_seg
        .slice_mut(s![..ch, ..cw])
        .assign(&pseg.slice(s![y0..y0 + ch, x0..x0 + cw]));
    (out_img, out_seg)
}

/// Rectangle `(top, left, height, width)` for one erasing draw, or `None` if
/// no attempt fits inside the image.
pub fn erase_rect<R: Rng>(
    h: usize,
    w: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let (lo, hi) = cfg.erase_area;
        let target = area * if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (alo, ahi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
        let aspect = if ahi > alo { rng.gen_range(alo..=ahi) } else { alo }.exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh <= h && ew <= w {
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Flip, then pad-crop, then erase.
pub fn augment<R: Rng>(sample: &SampleRecord, cfg: &AugmentationConfig, rng: &mut R) -> SampleRecord {
    let mut img = sample.image.clone();
    let mut seg = sample.seg.clone();
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        flip(&mut img, &mut seg);
    }
    let (_, h, w) = img.dim();
    if cfg.pad > 0 || (cfg.out_height, cfg.out_width) != (h, w) {
        let (i, s) = pad_crop(&img, &seg, cfg.pad, cfg.out_height, cfg.out_width, rng);
        img = i;
        seg = s;
    }
    if cfg.erase_prob > 0.0 && rng.gen_bool(cfg.erase_prob) {
        let (_, h, w) = img.dim();
        if let Some((t, l, eh, ew)) = erase_rect(h, w, cfg, rng) {
            img.slice_mut(s![.., t..t + eh, l..l + ew]).fill(0.0);
            seg.slice_mut(s![t..t + eh, l..l + ew]).fill(0);
        }
    }
    SampleRecord {
        image: img,
        seg,
        ..sample.clone()
    }
}
