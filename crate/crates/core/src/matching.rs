//! Quality-aware pixel-level matching between fused feature maps.
//!
//! For two maps with `N = H*W` positions:
//! - quality `Q`: softmax over positions of the body-mask occupancy of each
//!   `k x k` input block, `k = H'/H = W'/W`;
//! - `sim1[p, q] = Q1[p] * Q2[q] * cos(f1[p], f2[q])`;
//! - `sim2 = softmax_p(sim1) ⊙ softmax_q(sim1)` (conditionals over image-1
//!   positions per column and over image-2 positions per row);
//! - Bi-GMP: row maxima then column maxima of `sim2`, length `2N`;
//! - score head: batch norm, MLP (`2N -> hidden -> 1`), sigmoid.
//!
//! Positions are flattened row-major by `(i, j)`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BodyMask;
use crate::nn::act::{relu, relu_backward, sigmoid, sigmoid_scalar};
use crate::nn::param::scoped;
use crate::nn::{BatchNorm, Linear, Param, Parameterized};

/// Norms below this are treated as zero; such pixels get cosine 0.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub enabled: bool,
    /// Weight pixel similarities by mask-derived quality.
    pub quality_weights: bool,
    /// Apply the bidirectional softmax constraint before pooling.
    pub bidirectional: bool,
    pub hidden: usize,
    /// Batch-norm epsilon of the score head. Bidirectional similarities are
    /// on the order of `1/N^2` with tiny spread, so this must be far below the
    /// usual 1e-5.
    pub bn_eps: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            quality_weights: true,
            bidirectional: true,
            hidden: 64,
            bn_eps: 1e-20,
        }
    }
}

/// Per-position weights of one image, `(H, W)`, positive and summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMap(pub Array2<f64>);

impl QualityMap {
    pub fn uniform(h: usize, w: usize) -> Self {
        Self(Array2::from_elem((h, w), 1.0 / (h * w) as f64))
    }

    pub fn flat(&self) -> Array1<f64> {
        self.0.iter().copied().collect()
    }
}

/// Block size relating input and feature resolution.
pub fn block_size(in_h: usize, in_w: usize, h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(Error::Config("feature map has zero size".into()));
    }
    let (kh, kw) = (in_h / h, in_w / w);
    if kh != kw {
        return Err(Error::Config(format!(
            "unequal block sizes: floor({in_h}/{h}) = {kh}, floor({in_w}/{w}) = {kw}"
        )));
    }
    if kh == 0 {
        return Err(Error::Config("feature map larger than the mask".into()));
    }
    Ok(kh)
}

/// Block-mean mask occupancy followed by a softmax over all positions.
/// Rows and columns beyond `H*k`, `W*k` do not contribute.
pub fn compute_quality_weights(mask: &BodyMask, h: usize, w: usize) -> Result<QualityMap> {
    let (mh, mw) = mask.dim();
    let k = block_size(mh, mw, h, w)?;
    let kk = (k * k) as f64;
    let occupancy = Array2::from_shape_fn((h, w), |(i, j)| {
        mask.0
            .slice(s![i * k..i * k + k, j * k..j * k + k])
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / kk
    });
    let max = occupancy.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = occupancy.mapv(|v| (v - max).exp());
    let z = e.sum();
    Ok(QualityMap(e / z))
}

/// Row-wise unit pixel vectors of a `(n, C, H, W)` batch as `(n*N, C)`, with
/// the original norms. Zero-norm pixels map to the zero vector.
pub fn unit_pixels(x: &Array4<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut units = Array2::zeros((n * hw, c));
    let mut norms = Array1::zeros(n * hw);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = b * hw + i * w + j;
                let v = x.slice(s![b, .., i, j]);
                let nrm = v.dot(&v).sqrt();
                norms[row] = nrm;
                if nrm > ZERO_NORM {
                    units.row_mut(row).assign(&(&v / nrm));
                }
            }
        }
    }
    (units, norms)
}

fn check_pair(f1: &Array3<f64>, q1: &QualityMap, f2: &Array3<f64>, q2: &QualityMap) -> Result<()> {
    let (_, h, w) = f1.dim();
    if f1.dim() != f2.dim() || q1.0.dim() != (h, w) || q2.0.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "matching shapes differ: f1 {:?}, f2 {:?}, q1 {:?}, q2 {:?}",
            f1.dim(),
            f2.dim(),
            q1.0.dim(),
            q2.0.dim()
        )));
    }
    Ok(())
}

/// Quality-weighted cosine similarity of every pixel pair, `(N, N)`.
pub fn pixel_similarity(
    f1: &Array3<f64>,
    q1: &QualityMap,
    f2: &Array3<f64>,
    q2: &QualityMap,
) -> Result<Array2<f64>> {
    check_pair(f1, q1, f2, q2)?;
    let (u1, _) = unit_pixels(&f1.clone().insert_axis(Axis(0)));
    let (u2, _) = unit_pixels(&f2.clone().insert_axis(Axis(0)));
    let cos = u1.dot(&u2.t());
    Ok(weight_similarity(cos.view(), &q1.flat(), &q2.flat()))
}

fn weight_similarity(cos: ArrayView2<f64>, q1: &Array1<f64>, q2: &Array1<f64>) -> Array2<f64> {
    let mut out = cos.to_owned();
    for (mut row, &a) in out.axis_iter_mut(Axis(0)).zip(q1.iter()) {
        row.zip_mut_with(q2, |v, &b| *v *= a * b);
    }
    out
}

/// Both directional conditionals and their product.
#[derive(Debug, Clone)]
pub struct Bidirectional {
    /// `rho(f1_p | f2_q)`: softmax over `p` for each column `q`.
    pub given_second: Array2<f64>,
    /// `rho(f2_q | f1_p)`: softmax over `q` for each row `p`.
    pub given_first: Array2<f64>,
    pub sim2: Array2<f64>,
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn softmax_cols(x: &Array2<f64>) -> Array2<f64> {
    softmax_rows(&x.t().to_owned()).reversed_axes().as_standard_layout().into_owned()
}

pub fn bidirectional_similarity(sim1: &Array2<f64>) -> Bidirectional {
    let given_second = softmax_cols(sim1);
    let given_first = softmax_rows(sim1);
    let sim2 = &given_second * &given_first;
    Bidirectional {
        given_second,
        given_first,
        sim2,
    }
}

/// Row maxima (one per image-1 position) then column maxima (one per image-2
/// position), with the argmax of each.
fn bi_gmp_with_args(sim: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let (n1, n2) = sim.dim();
    let mut v = Array1::zeros(n1 + n2);
    let mut arg = vec![0; n1 + n2];
    for p in 0..n1 {
        let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
        for q in 0..n2 {
            if sim[[p, q]] > best {
                best = sim[[p, q]];
                bi = q;
            }
        }
        v[p] = best;
        arg[p] = bi;
    }
    for q in 0..n2 {
        let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
        for p in 0..n1 {
            if sim[[p, q]] > best {
                best = sim[[p, q]];
                bi = p;
            }
        }
        v[n1 + q] = best;
        arg[n1 + q] = bi;
    }
    (v, arg)
}

pub fn bi_gmp(sim2: &Array2<f64>) -> Array1<f64> {
    bi_gmp_with_args(sim2).0
}

/// Batch norm, one hidden ReLU layer, a single logit.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub bn: BatchNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    hidden_out: Option<Array2<f64>>,
    /// Running statistics are seeded from the first training batch; the
    /// similarity scale makes the usual (0, 1) initialization useless.
    pub stats_seeded: bool,
}

impl ScoreHead {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, bn_eps: f64, rng: &mut R) -> Self {
        Self {
            bn: BatchNorm::with_eps(inputs, bn_eps),
            fc1: Linear::new(inputs, hidden, true, rng),
            fc2: Linear::new(hidden, 1, true, rng),
            hidden_out: None,
            stats_seeded: false,
        }
    }

    pub fn inputs(&self) -> usize {
        self.bn.features()
    }

    /// Eval-mode logits for `(P, 2N)` Bi-GMP rows.
    pub fn logits(&self, v: &Array2<f64>) -> Result<Array1<f64>> {
        if v.ncols() != self.inputs() {
            return Err(Error::Validation(format!(
                "score head expects {} inputs, got {}",
                self.inputs(),
                v.ncols()
            )));
        }
        let h = relu(&self.fc1.forward(&self.bn.forward_rows(v)));
        Ok(self.fc2.forward(&h).column(0).to_owned())
    }

    pub fn score(&self, v: &Array1<f64>) -> Result<f64> {
        let l = self.logits(&v.clone().insert_axis(Axis(0)))?;
        Ok(sigmoid_scalar(l[0]))
    }

    pub fn logits_train(&mut self, v: &Array2<f64>) -> Array1<f64> {
        if !self.stats_seeded {
            let n = v.nrows() as f64;
            let mean = v.mean_axis(Axis(0)).unwrap();
            let var = v
                .axis_iter(Axis(1))
                .zip(mean.iter())
                .map(|(col, m)| col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0))
                .collect::<Array1<f64>>();
            self.bn.running_mean.value.assign(&mean.into_dyn());
            self.bn.running_var.value.assign(&var.into_dyn());
            self.stats_seeded = true;
        }
        let x = self.bn.forward_rows_train(v);
        let h = relu(&self.fc1.forward_train(&x));
        self.hidden_out = Some(h.clone());
        self.fc2.forward_train(&h).column(0).to_owned()
    }

    pub fn backward(&mut self, d_logit: &Array1<f64>) -> Array2<f64> {
        let h = self.hidden_out.take().expect("score head backward without forward");
        let d = d_logit.clone().insert_axis(Axis(1));
        let dh = self.fc2.backward(&d);
        let dh = relu_backward(&h, &dh);
        let dx = self.fc1.backward(&dh);
        self.bn.backward_rows(&dx)
    }
}

impl Parameterized for ScoreHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bn.visit_params(&scoped(prefix, "bn"), f);
        self.fc1.visit_params(&scoped(prefix, "fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "fc2"), f);
    }
}

/// Everything needed to back-propagate one pair.
#[derive(Debug, Clone)]
struct PairTrace {
    given_second: Array2<f64>,
    given_first: Array2<f64>,
    args: Vec<usize>,
}

#[derive(Debug, Clone)]
struct MatchCache {
    units_a: Array2<f64>,
    norms_a: Array1<f64>,
    units_b: Array2<f64>,
    norms_b: Array1<f64>,
    qa: Array2<f64>,
    qb: Array2<f64>,
    traces: Vec<PairTrace>,
    probs: Array2<f64>,
    n_pos: usize,
}

/// Batched matcher: scores every pair of two feature sets.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub config: MatcherConfig,
    pub head: ScoreHead,
    cache: Option<MatchCache>,
}

impl Matcher {
    pub fn new<R: Rng>(config: &MatcherConfig, positions: usize, rng: &mut R) -> Self {
        Self {
            config: config.clone(),
            head: ScoreHead::new(2 * positions, config.hidden, config.bn_eps, rng),
            cache: None,
        }
    }

    fn pair_forward(
        &self,
        cos: ArrayView2<f64>,
        qa: &Array1<f64>,
        qb: &Array1<f64>,
    ) -> (Array1<f64>, PairTrace) {
        let sim1 = if self.config.quality_weights {
            weight_similarity(cos, qa, qb)
        } else {
            cos.to_owned()
        };
        if self.config.bidirectional {
            let bi = bidirectional_similarity(&sim1);
            let (v, args) = bi_gmp_with_args(&bi.sim2);
            (
                v,
                PairTrace {
                    given_second: bi.given_second,
                    given_first: bi.given_first,
                    args,
                },
            )
        } else {
            let (v, args) = bi_gmp_with_args(&sim1);
            (
                v,
                PairTrace {
                    given_second: Array2::zeros((0, 0)),
                    given_first: Array2::zeros((0, 0)),
                    args,
                },
            )
        }
    }

    fn check_sets(&self, fa: &Array4<f64>, qa: &Array2<f64>, fb: &Array4<f64>, qb: &Array2<f64>) -> Result<usize> {
        let (na, c, h, w) = fa.dim();
        let (nb, cb, hb, wb) = fb.dim();
        let n = h * w;
        if (c, h, w) != (cb, hb, wb) || qa.dim() != (na, n) || qb.dim() != (nb, n) {
            return Err(Error::Validation(format!(
                "matching sets disagree: a {:?} q {:?}, b {:?} q {:?}",
                fa.dim(),
                qa.dim(),
                fb.dim(),
                qb.dim()
            )));
        }
        if 2 * n != self.head.inputs() {
            return Err(Error::Validation(format!(
                "score head built for {} positions, features have {n}",
                self.head.inputs() / 2
            )));
        }
        Ok(n)
    }

    /// Bi-GMP rows for every `(a, b)` pair, row index `a * nb + b`.
    pub fn pooled(&self, fa: &Array4<f64>, qa: &Array2<f64>, fb: &Array4<f64>, qb: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.check_sets(fa, qa, fb, qb)?;
        let (ua, _) = unit_pixels(fa);
        let (ub, _) = unit_pixels(fb);
        let (na, nb) = (fa.dim().0, fb.dim().0);
        let mut v = Array2::zeros((na * nb, 2 * n));
        for a in 0..na {
            let cos_rows = ua.slice(s![a * n..(a + 1) * n, ..]).dot(&ub.t());
            let qa_row = qa.row(a).to_owned();
            for b in 0..nb {
                let cos = cos_rows.slice(s![.., b * n..(b + 1) * n]);
                let (row, _) = self.pair_forward(cos, &qa_row, &qb.row(b).to_owned());
                v.row_mut(a * nb + b).assign(&row);
            }
        }
        Ok(v)
    }

    /// Eval-mode match probabilities `(na, nb)`.
    pub fn score_sets(&self, fa: &Array4<f64>, qa: &Array2<f64>, fb: &Array4<f64>, qb: &Array2<f64>) -> Result<Array2<f64>> {
        let v = self.pooled(fa, qa, fb, qb)?;
        let logits = self.head.logits(&v)?;
        let (na, nb) = (fa.dim().0, fb.dim().0);
        Ok(sigmoid(&logits).into_shape_with_order((na, nb)).unwrap())
    }

    /// Training forward over all ordered pairs of two sets. Returns `(na, nb)`
    /// probabilities; head batch norm uses the statistics of these pairs.
    pub fn forward_train(&mut self, fa: &Array4<f64>, qa: &Array2<f64>, fb: &Array4<f64>, qb: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.check_sets(fa, qa, fb, qb)?;
        let (ua, norms_a) = unit_pixels(fa);
        let (ub, norms_b) = unit_pixels(fb);
        let (na, nb) = (fa.dim().0, fb.dim().0);
        let cos_all = ua.dot(&ub.t());
        let mut v = Array2::zeros((na * nb, 2 * n));
        let mut traces = Vec::with_capacity(na * nb);
        for a in 0..na {
            let qa_row = qa.row(a).to_owned();
            for b in 0..nb {
                let cos = cos_all.slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n]);
                let (row, trace) = self.pair_forward(cos, &qa_row, &qb.row(b).to_owned());
                v.row_mut(a * nb + b).assign(&row);
                traces.push(trace);
            }
        }
        let logits = self.head.logits_train(&v);
        let probs = sigmoid(&logits).into_shape_with_order((na, nb)).unwrap();
        self.cache = Some(MatchCache {
            units_a: ua,
            norms_a,
            units_b: ub,
            norms_b,
            qa: qa.clone(),
            qb: qb.clone(),
            traces,
            probs: probs.clone(),
            n_pos: n,
        });
        Ok(probs)
    }

    /// Gradient of a loss w.r.t. the probabilities -> gradients w.r.t. both
    /// feature sets, shaped like the inputs.
    pub fn backward(&mut self, d_probs: &Array2<f64>, dims: ((usize, usize, usize, usize), (usize, usize, usize, usize))) -> (Array4<f64>, Array4<f64>) {
        let cache = self.cache.take().expect("matcher backward without forward_train");
        let n = cache.n_pos;
        let (na, nb) = cache.probs.dim();
        let d_logit: Array1<f64> = ndarray::Zip::from(d_probs)
            .and(&cache.probs)
            .map_collect(|&g, &p| g * p * (1.0 - p))
            .iter()
            .copied()
            .collect();
        let dv = self.head.backward(&d_logit);

        let mut d_cos = Array2::zeros((na * n, nb * n));
        for a in 0..na {
            for b in 0..nb {
                let t = &cache.traces[a * nb + b];
                let dvr = dv.row(a * nb + b);
                // gradient on the pooled similarity matrix: one entry per max
                let mut d_sim = Array2::<f64>::zeros((n, n));
                for p in 0..n {
                    d_sim[[p, t.args[p]]] += dvr[p];
                }
                for q in 0..n {
                    d_sim[[t.args[n + q], q]] += dvr[n + q];
                }
                let d_sim1 = if self.config.bidirectional {
                    let r1 = &t.given_second;
                    let r2 = &t.given_first;
                    let dr1 = &d_sim * r2;
                    let dr2 = &d_sim * r1;
                    // column softmax (over p) and row softmax (over q)
                    let col_dot = (&dr1 * r1).sum_axis(Axis(0));
                    let row_dot = (&dr2 * r2).sum_axis(Axis(1));
                    let mut g = Array2::zeros((n, n));
                    for p in 0..n {
                        for q in 0..n {
                            g[[p, q]] = r1[[p, q]] * (dr1[[p, q]] - col_dot[q])
                                + r2[[p, q]] * (dr2[[p, q]] - row_dot[p]);
                        }
                    }
                    g
                } else {
                    d_sim
                };
                let mut block = d_cos.slice_mut(s![a * n..(a + 1) * n, b * n..(b + 1) * n]);
                if self.config.quality_weights {
                    for p in 0..n {
                        let qa = cache.qa[[a, p]];
                        for q in 0..n {
                            block[[p, q]] = d_sim1[[p, q]] * qa * cache.qb[[b, q]];
                        }
                    }
                } else {
                    block.assign(&d_sim1);
                }
            }
        }
        let d_ua = d_cos.dot(&cache.units_b);
        let d_ub = d_cos.t().dot(&cache.units_a);
        (
            unit_backward(&d_ua, &cache.units_a, &cache.norms_a, dims.0),
            unit_backward(&d_ub, &cache.units_b, &cache.norms_b, dims.1),
        )
    }
}

/// Back-propagates through `u = f / |f|` and reshapes to `(n, C, H, W)`.
fn unit_backward(
    d_u: &Array2<f64>,
    units: &Array2<f64>,
    norms: &Array1<f64>,
    dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = dim;
    let hw = h * w;
    let mut out = Array4::zeros(dim);
    for row in 0..n * hw {
        let nrm = norms[row];
        if nrm <= ZERO_NORM {
            continue;
        }
        let u = units.row(row);
        let du = d_u.row(row);
        let proj = u.dot(&du);
        let (b, pos) = (row / hw, row % hw);
        let (i, j) = (pos / w, pos % w);
        for ch in 0..c {
            out[[b, ch, i, j]] = (du[ch] - u[ch] * proj) / nrm;
        }
    }
    out
}

impl Parameterized for Matcher {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head.visit_params(&scoped(prefix, "head"), f);
    }
}

/// Bi-GMP vector of a single pair under the full quality-aware pipeline.
pub fn pair_vector(f1: &Array3<f64>, mask1: &BodyMask, f2: &Array3<f64>, mask2: &BodyMask) -> Result<Array1<f64>> {
    let (_, h, w) = f1.dim();
    let q1 = compute_quality_weights(mask1, h, w)?;
    let q2 = compute_quality_weights(mask2, h, w)?;
    let sim1 = pixel_similarity(f1, &q1, f2, &q2)?;
    Ok(bi_gmp(&bidirectional_similarity(&sim1).sim2))
}

/// Full composition for one pair: quality weights, similarities, Bi-GMP and
/// the score head (eval mode).
pub fn match_pair(
    f1: &Array3<f64>,
    mask1: &BodyMask,
    f2: &Array3<f64>,
    mask2: &BodyMask,
    head: &ScoreHead,
) -> Result<f64> {
    head.score(&pair_vector(f1, mask1, f2, mask2)?)
}
