//! Two-branch model: RGB and masked-RGB backbones, attention fusion, and the
//! quality-aware matcher, with a joint training step.

use ndarray::{concatenate, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::fusion::{global_average, global_average_backward, AttentionConfig, AttentionFusion, EmbeddingNeck};
use crate::losses::{cross_entropy, matching_loss, matching_loss_grad, total_loss, triplet_loss, BatchLabels, LossBreakdown, DEFAULT_MARGIN};
use crate::mask::{build_body_mask, BodyMask, LabelSet};
use crate::matching::{block_size, compute_quality_weights, Matcher, MatcherConfig};
use crate::nn::param::scoped;
use crate::nn::{Param, Parameterized};

/// How query-gallery pairs are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Match probability from the score head.
    Match,
    /// Cosine similarity of the concatenated branch embeddings.
    Embedding,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(Self::Match),
            "embedding" => Ok(Self::Embedding),
            other => Err(Error::Config(format!("unknown scorer '{other}'"))),
        }
    }
}

/// Component switches matching the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// RGB branch only, ranked by embedding.
    RgbOnly,
    /// Both branches and fusion, no matcher, ranked by embedding.
    NoMatcher,
    /// Everything.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub backbone: BackboneConfig,
    pub use_parse: bool,
    pub use_fusion: bool,
    pub attention: AttentionConfig,
    pub matcher: MatcherConfig,
    pub identity_labels: LabelSet,
    /// Classifier width; the trainer sets it from the training split.
    pub num_ids: usize,
    pub triplet_margin: f64,
    pub include_self_pairs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            backbone: BackboneConfig::toy(),
            use_parse: true,
            use_fusion: true,
            attention: AttentionConfig::default(),
            matcher: MatcherConfig::default(),
            identity_labels: LabelSet::default_identity(),
            num_ids: 0,
            triplet_margin: DEFAULT_MARGIN,
            include_self_pairs: true,
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (parse, fusion, matcher) = match ablation {
            Ablation::RgbOnly => (false, false, false),
            Ablation::NoMatcher => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        self.use_parse = parse;
        self.use_fusion = fusion;
        self.matcher.enabled = matcher;
        self
    }

    pub fn feature_hw(&self) -> Result<(usize, usize)> {
        self.backbone.output_hw(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (fh, fw) = self.feature_hw()?;
        if self.use_fusion && !self.use_parse {
            return Err(Error::Config("fusion needs the parsing branch".into()));
        }
        if self.use_fusion {
            self.attention.validate()?;
        }
        if self.matcher.enabled {
            block_size(self.height, self.width, fh, fw)?;
            if self.matcher.hidden == 0 || !(self.matcher.bn_eps > 0.0) {
                return Err(Error::Config("matcher needs hidden > 0 and bn_eps > 0".into()));
            }
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config("triplet_margin must be non-negative".into()));
        }
        Ok(())
    }

    /// Default scorer for this configuration.
    pub fn default_scorer(&self) -> Scorer {
        if self.matcher.enabled {
            Scorer::Match
        } else {
            Scorer::Embedding
        }
    }
}

/// Images, body masks, and classifier targets of one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub masks: Vec<BodyMask>,
    pub classes: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[SampleRecord], classes: Vec<usize>, labels: &LabelSet) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("empty batch".into()))?;
        let dim = first.image.dim();
        if samples.iter().any(|s| s.image.dim() != dim) {
            return Err(Error::Validation("batch images differ in size".into()));
        }
        let views: Vec<_> = samples.iter().map(|s| s.image.view()).collect();
        Ok(Self {
            images: ndarray::stack(Axis(0), &views).expect("checked shapes"),
            masks: samples.iter().map(|s| build_body_mask(&s.seg, labels)).collect(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `I ⊙ M_body` for every image of a batch.
pub fn masked_images(images: &Array4<f64>, masks: &[BodyMask]) -> Array4<f64> {
    let mut out = images.clone();
    for (mut img, m) in out.outer_iter_mut().zip(masks) {
        for mut ch in img.outer_iter_mut() {
            ch.zip_mut_with(&m.0, |v, &k| {
                if k == 0 {
                    *v = 0.0
                }
            });
        }
    }
    out
}

/// Eval-mode features of a set of images.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Batch-normalized global embeddings; both branches concatenated.
    pub embeddings: Array2<f64>,
    /// Input of the matcher (fused map, or the RGB map without fusion).
    pub maps: Array4<f64>,
    /// Flattened quality weights per image.
    pub quality: Array2<f64>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[Encoded]) -> Result<Self> {
        let cat = |f: &dyn Fn(&Encoded) -> ndarray::ArrayViewD<f64>| {
            let views: Vec<_> = parts.iter().map(f).collect();
            concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        };
        Ok(Self {
            embeddings: cat(&|e| e.embeddings.view().into_dyn())?.into_dimensionality().unwrap(),
            maps: cat(&|e| e.maps.view().into_dyn())?.into_dimensionality().unwrap(),
            quality: cat(&|e| e.quality.view().into_dyn())?.into_dimensionality().unwrap(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub backbone: Backbone,
    pub neck: EmbeddingNeck,
}

impl Branch {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::new(&cfg.backbone, rng)?;
        let neck = EmbeddingNeck::new(backbone.out_channels(), cfg.num_ids.max(1), rng);
        Ok(Self { backbone, neck })
    }

    /// Identity and triplet losses on one branch; returns their values and the
    /// gradient on the feature map.
    fn train_losses(&mut self, maps: &Array4<f64>, classes: &[usize], margin: f64) -> Result<(f64, f64, Array4<f64>)> {
        let (_, _, h, w) = maps.dim();
        let pooled = global_average(maps);
        let emb = self.neck.bn.forward_rows_train(&pooled);
        let logits = self.neck.classifier.forward_train(&emb);
        let (cls, d_logits) = cross_entropy(&logits, classes)?;
        let d_emb = self.neck.classifier.backward(&d_logits);
        let mut d_pooled = self.neck.bn.backward_rows(&d_emb);
        let tri = triplet_loss(&pooled, classes, margin)?;
        if !tri.valid {
            log::warn!("batch has no valid triplet");
        }
        d_pooled += &tri.grad;
        Ok((cls, tri.loss, global_average_backward(&d_pooled, h, w)))
    }
}

impl Parameterized for Branch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&scoped(prefix, "backbone"), f);
        self.neck.visit_params(&scoped(prefix, "neck"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub rgb: Branch,
    pub par: Option<Branch>,
    pub fusion: Option<AttentionFusion>,
    pub matcher: Option<Matcher>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_ids == 0 {
            return Err(Error::Config("num_ids must be set before building the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Branch::new(config, &mut rng)?;
        let par = config.use_parse.then(|| Branch::new(config, &mut rng)).transpose()?;
        let c = rgb.backbone.out_channels();
        let fusion = config
            .use_fusion
            .then(|| AttentionFusion::new(c, &config.attention, &mut rng));
        let (fh, fw) = config.feature_hw()?;
        let matcher = config
            .matcher
            .enabled
            .then(|| Matcher::new(&config.matcher, fh * fw, &mut rng));
        Ok(Self {
            config: config.clone(),
            rgb,
            par,
            fusion,
            matcher,
        })
    }

    fn check_input(&self, images: &Array4<f64>, masks: &[BodyMask]) -> Result<()> {
        let (n, c, h, w) = images.dim();
        if c != 3 || (h, w) != (self.config.height, self.config.width) {
            return Err(Error::Shape(format!(
                "expected (N, 3, {}, {}) images, got {:?}",
                self.config.height,
                self.config.width,
                images.dim()
            )));
        }
        if masks.len() != n || masks.iter().any(|m| m.dim() != (h, w)) {
            return Err(Error::Shape("one mask of image size per image required".into()));
        }
        Ok(())
    }

    fn quality_rows(&self, masks: &[BodyMask]) -> Result<Array2<f64>> {
        let (fh, fw) = self.config.feature_hw()?;
        let mut q = Array2::zeros((masks.len(), fh * fw));
        for (mut row, m) in q.outer_iter_mut().zip(masks) {
            row.assign(&compute_quality_weights(m, fh, fw)?.flat());
        }
        Ok(q)
    }

    /// Eval-mode encoding of images with their body masks.
    pub fn encode(&self, images: &Array4<f64>, masks: &[BodyMask]) -> Result<Encoded> {
        self.check_input(images, masks)?;
        let f_rgb = self.rgb.backbone.forward(images);
        let (_, mut embeddings) = self.rgb.neck.global_embed(&f_rgb);
        let mut maps = f_rgb.clone();
        if let Some(par) = &self.par {
            let f_par = par.backbone.forward(&masked_images(images, masks));
            let (_, e) = par.neck.global_embed(&f_par);
            embeddings = concatenate![Axis(1), embeddings, e];
            if let Some(fusion) = &self.fusion {
                maps = fusion.forward(&f_rgb, &f_par)?.fused;
            }
        }
        let quality = if self.matcher.is_some() {
            self.quality_rows(masks)?
        } else {
            Array2::zeros((images.dim().0, 0))
        };
        Ok(Encoded {
            embeddings,
            maps,
            quality,
        })
    }

    /// Scores of every query against every gallery entry, `(nq, ng)`.
    pub fn score(&self, query: &Encoded, gallery: &Encoded, scorer: Scorer) -> Result<Array2<f64>> {
        match scorer {
            Scorer::Embedding => Ok(cosine_matrix(&query.embeddings, &gallery.embeddings)),
            Scorer::Match => {
                let matcher = self
                    .matcher
                    .as_ref()
                    .ok_or_else(|| Error::Config("match scorer needs the matcher enabled".into()))?;
                matcher.score_sets(&query.maps, &query.quality, &gallery.maps, &gallery.quality)
            }
        }
    }

    /// Forward and backward over one batch. Gradients are accumulated into
    /// the parameters (callers zero them); returns the loss terms.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.check_input(&batch.images, &batch.masks)?;
        let classes = &batch.classes;
        let margin = self.config.triplet_margin;

        let f_rgb = self.rgb.backbone.forward_train(&batch.images);
        let (cls_rgb, tri_rgb, mut d_rgb) = self.rgb.train_losses(&f_rgb, classes, margin)?;

        let mut par_state = None;
        let (mut cls_par, mut tri_par) = (0.0, 0.0);
        if let Some(par) = &mut self.par {
            let f_par = par.backbone.forward_train(&masked_images(&batch.images, &batch.masks));
            let (c, t, d) = par.train_losses(&f_par, classes, margin)?;
            cls_par = c;
            tri_par = t;
            par_state = Some((f_par, d));
        }

        let mut matching = 0.0;
        if self.matcher.is_some() {
            let quality = self.quality_rows(&batch.masks)?;
            let maps = match (&mut self.fusion, &par_state) {
                (Some(fusion), Some((f_par, _))) => fusion.forward_train(&f_rgb, f_par)?.fused,
                _ => f_rgb.clone(),
            };
            let matcher = self.matcher.as_mut().unwrap();
            let probs = matcher.forward_train(&maps, &quality, &maps, &quality)?;
            let labels = BatchLabels::new(classes);
            let include_self = self.config.include_self_pairs;
            matching = matching_loss(&probs, &labels.same, include_self)?;
            let d_probs = matching_loss_grad(&probs, &labels.same, include_self)?;
            let (da, db) = matcher.backward(&d_probs, (maps.dim(), maps.dim()));
            let d_maps = da + db;
            match (&mut self.fusion, &mut par_state) {
                (Some(fusion), Some((_, d_par))) => {
                    let (dr, dp) = fusion.backward(&d_maps);
                    d_rgb += &dr;
                    *d_par += &dp;
                }
                _ => d_rgb += &d_maps,
            }
        }

        let breakdown = total_loss(cls_rgb, cls_par, tri_rgb, tri_par, matching);
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {breakdown:?}")));
        }
        self.rgb.backbone.backward(&d_rgb);
        if let (Some(par), Some((_, d_par))) = (&mut self.par, &par_state) {
            par.backbone.backward(d_par);
        }
        Ok(breakdown)
    }
}

impl Parameterized for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.rgb.visit_params(&scoped(prefix, "rgb"), f);
        if let Some(par) = &mut self.par {
            par.visit_params(&scoped(prefix, "par"), f);
        }
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_params(&scoped(prefix, "fusion"), f);
        }
        if let Some(m) = &mut self.matcher {
            m.visit_params(&scoped(prefix, "matcher"), f);
        }
    }
}

/// Cosine similarity between rows of `a` and rows of `b`.
pub fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let unit = |x: &Array2<f64>| {
        let mut u = x.clone();
        for mut r in u.outer_iter_mut() {
            let n = r.dot(&r).sqrt();
            if n > 1e-12 {
                r /= n;
            }
        }
        u
    };
    unit(a).dot(&unit(b).t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_samples, SyntheticGenConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 16,
            num_ids: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_batch() -> Batch {
        let cfg = SyntheticGenConfig {
            height: 32,
            width: 16,
            n_identities: 4,
            train_identities: 3,
            ..SyntheticGenConfig::default()
        };
        let samples: Vec<_> = generate_samples(&cfg)
            .unwrap()
            .into_iter()
            .filter(|s| s.split == crate::data::Split::Train)
            .step_by(2)
            .take(6)
            .collect();
        let classes = samples.iter().map(|s| s.person_id).collect();
        Batch::new(&samples, classes, &LabelSet::default_identity()).unwrap()
    }

    #[test]
    fn ablations_build_expected_components() {
        for (ab, parts) in [
            (Ablation::RgbOnly, (false, false, false)),
            (Ablation::NoMatcher, (true, true, false)),
            (Ablation::Full, (true, true, true)),
        ] {
            let m = Model::new(&tiny_config().with_ablation(ab), 0).unwrap();
            assert_eq!((m.par.is_some(), m.fusion.is_some(), m.matcher.is_some()), parts);
        }
    }

    #[test]
    fn fusion_without_parse_rejected() {
        let cfg = ModelConfig {
            use_parse: false,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn train_step_gives_finite_consistent_losses() {
        let mut m = Model::new(&tiny_config(), 1).unwrap();
        let batch = tiny_batch();
        m.zero_grad();
        let l = m.train_step(&batch).unwrap();
        let sum = l.cls_rgb + l.cls_par + l.tri_rgb + l.tri_par + l.matching;
        assert!(l.total.is_finite() && (l.total - sum).abs() < 1e-6);
        assert!(l.matching > 0.0 && l.cls_par > 0.0);
        let mut norm = 0.0;
        m.visit_params("", &mut |_, p| {
            if p.trainable {
                norm += p.grad.iter().map(|g| g * g).sum::<f64>();
            }
        });
        assert!(norm > 0.0 && norm.is_finite());
    }

    #[test]
    fn encoding_is_deterministic_and_scores_are_probabilities() {
        let mut m = Model::new(&tiny_config(), 2).unwrap();
        let batch = tiny_batch();
        m.train_step(&batch).unwrap();
        let a = m.encode(&batch.images, &batch.masks).unwrap();
        let b = m.encode(&batch.images, &batch.masks).unwrap();
        assert_eq!(a.maps, b.maps);
        let s = m.score(&a, &b, Scorer::Match).unwrap();
        assert_eq!(s.dim(), (6, 6));
        assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn parse_branch_ignores_rgb_parameters() {
        let batch = tiny_batch();
        let mut m = Model::new(&tiny_config(), 3).unwrap();
        let masked = masked_images(&batch.images, &batch.masks);
        let before = m.par.as_ref().unwrap().backbone.forward(&masked);
        m.rgb.visit_params("", &mut |_, p| p.value.mapv_inplace(|v| v * 1.5 + 0.1));
        let after = m.par.as_ref().unwrap().backbone.forward(&masked);
        assert_eq!(before, after);
    }

    #[test]
    fn cosine_of_parallel_rows_is_one() {
        let a = ndarray::arr2(&[[1.0, 2.0], [0.0, 0.0]]);
        let b = ndarray::arr2(&[[2.0, 4.0]]);
        let c = cosine_matrix(&a, &b);
        assert!((c[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(c[[1, 0]], 0.0);
    }
}
