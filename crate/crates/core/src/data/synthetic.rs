//! Toy clothes-changing benchmark.
//!
//! Each identity has a fixed silhouette (head radius, torso proportions, limb
//! thickness, leg length) plus fixed skin and hair tones. Each outfit fixes a
//! shirt color, a shorts color and a shirt texture; outfits of one identity
//! never share either color. Shirt and shorts are labelled torso, so the
//! head, arm and leg labels cover only identity-stable pixels. Colors come from a small palette shared by all
//! identities, so different people frequently wear the same clothes.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_dataset, DatasetManifest};
use super::{SampleRecord, Split, LABEL_ARMS, LABEL_HEAD, LABEL_LEGS, LABEL_TORSO};
use crate::error::{Error, Result};
use crate::mask::LabelSet;

pub const MIN_HEIGHT: usize = 32;
pub const MIN_WIDTH: usize = 16;

const PALETTE: [[u8; 3]; 8] = [
    [200, 30, 30],
    [30, 160, 40],
    [30, 60, 200],
    [220, 200, 40],
    [150, 40, 170],
    [30, 180, 190],
    [230, 120, 20],
    [60, 60, 60],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenConfig {
    pub n_identities: usize,
    /// The first `train_identities` identities form the training split; the
    /// rest are divided into query and gallery.
    pub train_identities: usize,
    pub outfits_per_identity: usize,
    pub images_per_outfit: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
    /// Standard deviation of additive per-pixel noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_identities: 48,
            train_identities: 24,
            outfits_per_identity: 2,
            images_per_outfit: 4,
            height: 64,
            width: 32,
            cameras: 2,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("outfits_per_identity", self.outfits_per_identity),
            ("images_per_outfit", self.images_per_outfit),
            ("cameras", self.cameras),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.train_identities > self.n_identities {
            return Err(Error::Config(
                "train_identities exceeds n_identities".into(),
            ));
        }
        if self.outfits_per_identity > PALETTE.len() {
            return Err(Error::Config(format!(
                "at most {} outfits per identity",
                PALETTE.len()
            )));
        }
        if self.train_identities < self.n_identities && self.images_per_outfit < 2 {
            return Err(Error::Config(
                "test identities need at least 2 images per outfit (query + gallery)".into(),
            ));
        }
        if self.height < MIN_HEIGHT || self.width < MIN_WIDTH {
            return Err(Error::Config(format!(
                "image size {}x{} too small to rasterize a silhouette (min {MIN_HEIGHT}x{MIN_WIDTH})",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.n_identities * self.outfits_per_identity * self.images_per_outfit
    }
}

/// Silhouette and skin/hair parameters, fixed per identity. Lengths are in
/// units of the image height (or width for horizontal extents).
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub head_radius: f64,
    pub torso_width: f64,
    pub torso_height: f64,
    pub limb_thickness: f64,
    pub leg_length: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outfit {
    pub torso_color: [u8; 3],
    pub leg_color: [u8; 3],
    pub stripes: bool,
}

fn stream(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 48 ^ a << 32 ^ b << 16 ^ c);
    rng
}

pub fn silhouette_for(seed: u64, person: usize) -> Silhouette {
    let mut rng = stream(seed, 1, person as u64, 0, 0);
    Silhouette {
        head_radius: rng.gen_range(0.065..0.105),
        torso_width: rng.gen_range(0.34..0.56),
        torso_height: rng.gen_range(0.26..0.34),
        limb_thickness: rng.gen_range(0.09..0.18),
        leg_length: rng.gen_range(0.30..0.40),
        skin: [
            rng.gen_range(0.45..0.95),
            rng.gen_range(0.30..0.75),
            rng.gen_range(0.20..0.60),
        ],
        hair: [
            rng.gen_range(0.0..0.6),
            rng.gen_range(0.0..0.45),
            rng.gen_range(0.0..0.35),
        ],
    }
}

/// Outfits of one identity: torso and leg colors are pairwise distinct
/// across that identity's outfits.
pub fn outfits_for(seed: u64, person: usize, n: usize) -> Vec<Outfit> {
    let mut rng = stream(seed, 2, person as u64, 0, 0);
    let mut torso: Vec<usize> = (0..PALETTE.len()).collect();
    let mut legs: Vec<usize> = (0..PALETTE.len()).collect();
    use rand::seq::SliceRandom;
    torso.shuffle(&mut rng);
    legs.shuffle(&mut rng);
    (0..n)
        .map(|i| Outfit {
            torso_color: PALETTE[torso[i]],
            leg_color: PALETTE[legs[i]],
            stripes: rng.gen_bool(0.5),
        })
        .collect()
}

fn split_for(cfg: &SyntheticGenConfig, person: usize, image_idx: usize) -> Split {
    if person < cfg.train_identities {
        Split::Train
    } else if image_idx % 2 == 0 {
        Split::Query
    } else {
        Split::Gallery
    }
}

struct Canvas {
    rgb: Array3<f64>,
    seg: Array2<u8>,
}

impl Canvas {
    fn paint(&mut self, y: isize, x: isize, color: [f64; 3], label: u8) {
        let (h, w) = self.seg.dim();
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            return;
        }
        let (y, x) = (y as usize, x as usize);
        for c in 0..3 {
            self.rgb[[c, y, x]] = color[c];
        }
        self.seg[[y, x]] = label;
    }

    fn rect(&mut self, y0: f64, x0: f64, y1: f64, x1: f64, label: u8, color: impl Fn(isize, isize) -> [f64; 3]) {
        for y in y0.round() as isize..y1.round() as isize {
            for x in x0.round() as isize..x1.round() as isize {
                self.paint(y, x, color(y, x), label);
            }
        }
    }
}

fn to_unit(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

fn render(
    cfg: &SyntheticGenConfig,
    body: &Silhouette,
    outfit: &Outfit,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Array2<u8>) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let bg = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let mut canvas = Canvas {
        rgb: Array3::from_shape_fn((3, cfg.height, cfg.width), |(c, _, _)| bg[c]),
        seg: Array2::zeros((cfg.height, cfg.width)),
    };
    let scale = rng.gen_range(0.94..1.06);
    let dy = rng.gen_range(-0.03..0.03) * h;
    let dx = rng.gen_range(-0.06..0.06) * w;
    let cx = w / 2.0 + dx;

    let head_r = body.head_radius * h * scale;
    let head_cy = 0.06 * h + head_r + dy;
    let torso_top = head_cy + head_r;
    let torso_h = body.torso_height * h * scale;
    let torso_w = body.torso_width * w * scale;
    let limb = (body.limb_thickness * w * scale).max(1.0);
    let leg_len = body.leg_length * h * scale;

    let torso = to_unit(outfit.torso_color);
    let legs = to_unit(outfit.leg_color);
    let stripes = outfit.stripes;

    // arms first so the torso overlaps their shoulders
    let arm_len = torso_h * 0.9;
    canvas.rect(torso_top + 1.0, cx - torso_w / 2.0 - limb, torso_top + 1.0 + arm_len, cx - torso_w / 2.0, LABEL_ARMS, |_, _| body.skin);
    canvas.rect(torso_top + 1.0, cx + torso_w / 2.0, torso_top + 1.0 + arm_len, cx + torso_w / 2.0 + limb, LABEL_ARMS, |_, _| body.skin);
    canvas.rect(torso_top, cx - torso_w / 2.0, torso_top + torso_h, cx + torso_w / 2.0, LABEL_TORSO, |y, _| {
        if stripes && y.rem_euclid(4) < 2 {
            [torso[0] * 0.55, torso[1] * 0.55, torso[2] * 0.55]
        } else {
            torso
        }
    });
    // shorts in the outfit's leg color count as clothing; the bare legs
    // below them keep the identity's skin and geometry
    let leg_top = torso_top + torso_h;
    let shorts_h = leg_len * 0.35;
    canvas.rect(leg_top, cx - torso_w / 2.0, leg_top + shorts_h, cx + torso_w / 2.0, LABEL_TORSO, |_, _| legs);
    let gap = (torso_w * 0.12).max(1.0);
    let leg_w = ((torso_w - gap) / 2.0).min(limb * 1.6).max(1.0);
    let (l0, r0) = (cx - gap / 2.0 - leg_w, cx + gap / 2.0);
    canvas.rect(leg_top + shorts_h, l0, leg_top + leg_len, l0 + leg_w, LABEL_LEGS, |_, _| body.skin);
    canvas.rect(leg_top + shorts_h, r0, leg_top + leg_len, r0 + leg_w, LABEL_LEGS, |_, _| body.skin);

    let r2 = head_r * head_r;
    for y in (head_cy - head_r).floor() as isize..=(head_cy + head_r).ceil() as isize {
        for x in (cx - head_r).floor() as isize..=(cx + head_r).ceil() as isize {
            let (fy, fx) = (y as f64 + 0.5 - head_cy, x as f64 + 0.5 - cx);
            if fy * fy + fx * fx <= r2 {
                let color = if fy < -head_r * 0.35 { body.hair } else { body.skin };
                canvas.paint(y, x, color, LABEL_HEAD);
            }
        }
    }

    let gain = rng.gen_range(0.9..1.1);
    let noise = cfg.noise;
    let Canvas { mut rgb, seg } = canvas;
    rgb.mapv_inplace(|v| {
        let n = if noise > 0.0 { gaussian(rng) * noise } else { 0.0 };
        quantize((v * gain + n).clamp(0.0, 1.0))
    });
    (rgb, seg)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Rounds to the 8-bit grid so in-memory samples equal their PNG round trip.
fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Generates every sample in memory, ordered by (person, outfit, image).
pub fn generate_samples(cfg: &SyntheticGenConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_samples());
    for person in 0..cfg.n_identities {
        let body = silhouette_for(cfg.seed, person);
        let outfits = outfits_for(cfg.seed, person, cfg.outfits_per_identity);
        for (oi, outfit) in outfits.iter().enumerate() {
            for ii in 0..cfg.images_per_outfit {
                let mut rng = stream(cfg.seed, 3, person as u64, oi as u64, ii as u64);
                let (image, seg) = render(cfg, &body, outfit, &mut rng);
                out.push(SampleRecord {
                    image,
                    seg,
                    person_id: person,
                    clothes_id: oi,
                    camera_id: ii % cfg.cameras,
                    split: split_for(cfg, person, ii),
                });
            }
        }
    }
    Ok(out)
}

/// Generates the benchmark and writes it under `root` in the on-disk layout.
pub fn generate_synthetic(cfg: &SyntheticGenConfig, root: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(cfg)?;
    write_dataset(root, &samples, super::SYNTHETIC_NUM_CLASSES, LabelSet::default_identity())
}
