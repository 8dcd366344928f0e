//! Multi-modal attention fusion of RGB and parsing features, plus the global
//! embedding neck used by the classification and triplet losses.
//!
//! Attention: the two maps are concatenated along channels. A channel branch
//! (avg- and max-pooled descriptors through a shared bottleneck MLP, summed,
//! squashed) and a spatial branch (channel mean/max through a 7x7 conv,
//! squashed) are multiplied into the joint map `omega(c,h,w) = ch(c) * sp(h,w)`.
//! Fusion: `mix = omega*rgb + (1-omega)*par`, `sum = rgb + par + mix`,
//! `fuse = conv1x1(sum)` with unchanged width.

use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::param::scoped;
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            spatial_kernel: 7,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction must be positive".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("spatial kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Attention maps for a batch: channel `(B, C)`, spatial `(B, H, W)`, joint
/// `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub channel: Array2<f64>,
    pub spatial: Array3<f64>,
    pub omega: Array4<f64>,
}

/// Outer product of channel and spatial maps.
pub fn joint_map(channel: &Array2<f64>, spatial: &Array3<f64>) -> Array4<f64> {
    let (b, c) = channel.dim();
    let (_, h, w) = spatial.dim();
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, hi, wi)| {
        channel[[bi, ci]] * spatial[[bi, hi, wi]]
    })
}

/// Blends the branches with `omega`; returns `(mix, sum)`.
pub fn mix_features(
    rgb: &Array4<f64>,
    par: &Array4<f64>,
    omega: &Array4<f64>,
) -> Result<(Array4<f64>, Array4<f64>)> {
    if rgb.dim() != par.dim() || rgb.dim() != omega.dim() {
        return Err(Error::Shape(format!(
            "fusion shapes differ: rgb {:?}, par {:?}, omega {:?}",
            rgb.dim(),
            par.dim(),
            omega.dim()
        )));
    }
    let mut mix = Array4::zeros(rgb.raw_dim());
    ndarray::Zip::from(&mut mix)
        .and(rgb)
        .and(par)
        .and(omega)
        .for_each(|m, &r, &p, &o| *m = o * r + (1.0 - o) * p);
    let sum = rgb + par + &mix;
    Ok((mix, sum))
}

#[derive(Debug, Clone)]
struct FusionCache {
    rgb: Array4<f64>,
    par: Array4<f64>,
    channel: Array2<f64>,
    spatial: Array3<f64>,
    omega: Array4<f64>,
    hidden: Array2<f64>,
    max_idx: Vec<usize>,
    chan_max_idx: Vec<usize>,
}

/// Output of a fusion forward pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub attention: AttentionState,
    pub mix: Array4<f64>,
    pub sum: Array4<f64>,
    pub fused: Array4<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionFusion {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial_conv: Conv2d,
    pub fuse_conv: Conv2d,
    cache: Option<FusionCache>,
}

impl AttentionFusion {
    pub fn new<R: Rng>(channels: usize, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let hidden = (2 * channels / cfg.reduction).max(1);
        let k = cfg.spatial_kernel;
        Self {
            fc1: Linear::new(2 * channels, hidden, false, rng),
            fc2: Linear::new(hidden, channels, false, rng),
            spatial_conv: Conv2d::new(2, 1, k, 1, k / 2, false, rng),
            fuse_conv: Conv2d::new(channels, channels, 1, 1, 0, true, rng),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2.outputs()
    }

    fn check(&self, rgb: &Array4<f64>, par: &Array4<f64>) -> Result<()> {
        if rgb.dim() != par.dim() {
            return Err(Error::Shape(format!(
                "rgb {:?} and par {:?} feature shapes differ",
                rgb.dim(),
                par.dim()
            )));
        }
        if rgb.dim().1 != self.channels() {
            return Err(Error::Shape(format!(
                "fusion expects {} channels, got {}",
                self.channels(),
                rgb.dim().1
            )));
        }
        Ok(())
    }

    /// Pooled descriptors of the concatenated maps: stacked `[avg; max]`
    /// `(2B, 2C)` with argmax flat indices, and the `(B, 2, H, W)` channel
    /// mean/max map with argmax channel indices.
    fn pool(x: &Array4<f64>) -> (Array2<f64>, Vec<usize>, Array4<f64>, Vec<usize>) {
        let (b, c2, h, w) = x.dim();
        let hw = (h * w) as f64;
        let mut stacked = Array2::zeros((2 * b, c2));
        let mut max_idx = vec![0; b * c2];
        for bi in 0..b {
            for ci in 0..c2 {
                let plane = x.slice(s![bi, ci, .., ..]);
                stacked[[bi, ci]] = plane.sum() / hw;
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (i, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                stacked[[b + bi, ci]] = best;
                max_idx[bi * c2 + ci] = arg;
            }
        }
        let mut sp = Array4::zeros((b, 2, h, w));
        let mut cmax = vec![0; b * h * w];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let col = x.slice(s![bi, .., hi, wi]);
                    sp[[bi, 0, hi, wi]] = col.sum() / c2 as f64;
                    let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                    for (i, &v) in col.iter().enumerate() {
                        if v > best {
                            best = v;
                            arg = i;
                        }
                    }
                    sp[[bi, 1, hi, wi]] = best;
                    cmax[(bi * h + hi) * w + wi] = arg;
                }
            }
        }
        (stacked, max_idx, sp, cmax)
    }

    fn attention_parts(
        &self,
        rgb: &Array4<f64>,
        par: &Array4<f64>,
        conv: impl FnOnce(&Array4<f64>) -> Array4<f64>,
        fc: impl FnOnce(&Array2<f64>) -> (Array2<f64>, Array2<f64>),
    ) -> (AttentionState, Array2<f64>, Vec<usize>, Vec<usize>) {
        let b = rgb.dim().0;
        let x = concatenate(Axis(1), &[rgb.view(), par.view()]).unwrap();
        let (stacked, max_idx, sp_in, cmax) = Self::pool(&x);
        let (hidden, z2) = fc(&stacked);
        let z = &z2.slice(s![..b, ..]) + &z2.slice(s![b.., ..]);
        let channel = sigmoid(&z);
        let sp_logit = conv(&sp_in);
        let spatial = sigmoid(&sp_logit.index_axis(Axis(1), 0).to_owned());
        let omega = joint_map(&channel, &spatial);
        (
            AttentionState {
                channel,
                spatial,
                omega,
            },
            hidden,
            max_idx,
            cmax,
        )
    }

    /// Eval-mode attention maps.
    pub fn compute_attention(&self, rgb: &Array4<f64>, par: &Array4<f64>) -> Result<AttentionState> {
        self.check(rgb, par)?;
        let (state, ..) = self.attention_parts(
            rgb,
            par,
            |sp| self.spatial_conv.forward(sp),
            |st| {
                let h = relu(&self.fc1.forward(st));
                let z = self.fc2.forward(&h);
                (h, z)
            },
        );
        Ok(state)
    }

    /// Eval-mode fusion given attention maps.
    pub fn fuse(
        &self,
        rgb: &Array4<f64>,
        par: &Array4<f64>,
        omega: &Array4<f64>,
    ) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
        self.check(rgb, par)?;
        let (mix, sum) = mix_features(rgb, par, omega)?;
        let fused = self.fuse_conv.forward(&sum);
        Ok((mix, sum, fused))
    }

    pub fn forward(&self, rgb: &Array4<f64>, par: &Array4<f64>) -> Result<FusionOutput> {
        let attention = self.compute_attention(rgb, par)?;
        let (mix, sum, fused) = self.fuse(rgb, par, &attention.omega)?;
        Ok(FusionOutput {
            attention,
            mix,
            sum,
            fused,
        })
    }

    pub fn forward_train(&mut self, rgb: &Array4<f64>, par: &Array4<f64>) -> Result<FusionOutput> {
        self.check(rgb, par)?;
        let (fc1, fc2, sconv) = (&mut self.fc1, &mut self.fc2, &mut self.spatial_conv);
        let (b, c, h, w) = rgb.dim();
        let x = concatenate(Axis(1), &[rgb.view(), par.view()]).unwrap();
        let (stacked, max_idx, sp_in, cmax) = Self::pool(&x);
        let hidden = relu(&fc1.forward_train(&stacked));
        let z2 = fc2.forward_train(&hidden);
        let z = &z2.slice(s![..b, ..]) + &z2.slice(s![b.., ..]);
        let channel = sigmoid(&z);
        let sp_logit = sconv.forward_train(&sp_in);
        let spatial = sigmoid(&sp_logit.into_shape_with_order((b, h, w)).unwrap());
        let omega = joint_map(&channel, &spatial);
        let (mix, sum) = mix_features(rgb, par, &omega)?;
        let fused = self.fuse_conv.forward_train(&sum);
        debug_assert_eq!(fused.dim(), (b, c, h, w));
        self.cache = Some(FusionCache {
            rgb: rgb.clone(),
            par: par.clone(),
            channel: channel.clone(),
            spatial: spatial.clone(),
            omega: omega.clone(),
            hidden,
            max_idx,
            chan_max_idx: cmax,
        });
        Ok(FusionOutput {
            attention: AttentionState {
                channel,
                spatial,
                omega,
            },
            mix,
            sum,
            fused,
        })
    }

    /// Back-propagates a gradient on the fused map; returns gradients for the
    /// RGB and parsing maps.
    pub fn backward(&mut self, d_fused: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
        let cache = self.cache.take().expect("fusion backward without forward_train");
        let d_sum = self.fuse_conv.backward(d_fused);
        let (b, c, h, w) = d_sum.dim();

        let mut d_rgb = d_sum.clone();
        let mut d_par = d_sum.clone();
        let mut d_omega = Array4::zeros(d_sum.raw_dim());
        ndarray::Zip::from(&mut d_rgb)
            .and(&mut d_par)
            .and(&d_sum)
            .and(&cache.omega)
            .for_each(|dr, dp, &ds, &o| {
                *dr = ds * o;
                *dp = ds * (1.0 - o);
            });
        d_rgb += &d_sum;
        d_par += &d_sum;
        ndarray::Zip::from(&mut d_omega)
            .and(&d_sum)
            .and(&cache.rgb)
            .and(&cache.par)
            .for_each(|dw, &ds, &r, &p| *dw = ds * (r - p));

        let mut d_channel = Array2::zeros((b, c));
        let mut d_spatial = Array3::zeros((b, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let g = d_omega[[bi, ci, hi, wi]];
                        d_channel[[bi, ci]] += g * cache.spatial[[bi, hi, wi]];
                        d_spatial[[bi, hi, wi]] += g * cache.channel[[bi, ci]];
                    }
                }
            }
        }

        let c2 = 2 * c;
        let mut dx = Array4::<f64>::zeros((b, c2, h, w));

        let dz = sigmoid_backward(&cache.channel, &d_channel);
        let dz2 = concatenate(Axis(0), &[dz.view(), dz.view()]).unwrap();
        let dh = self.fc2.backward(&dz2);
        let dh = relu_backward(&cache.hidden, &dh);
        let d_stacked = self.fc1.backward(&dh);
        let hw = (h * w) as f64;
        for bi in 0..b {
            for ci in 0..c2 {
                let ga = d_stacked[[bi, ci]] / hw;
                dx.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v + ga);
                let idx = cache.max_idx[bi * c2 + ci];
                dx[[bi, ci, idx / w, idx % w]] += d_stacked[[b + bi, ci]];
            }
        }

        let ds = sigmoid_backward(&cache.spatial, &d_spatial)
            .into_shape_with_order((b, 1, h, w))
            .unwrap();
        let d_sp_in = self.spatial_conv.backward(&ds);
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let gm = d_sp_in[[bi, 0, hi, wi]] / c2 as f64;
                    dx.slice_mut(s![bi, .., hi, wi]).mapv_inplace(|v| v + gm);
                    let k = cache.chan_max_idx[(bi * h + hi) * w + wi];
                    dx[[bi, k, hi, wi]] += d_sp_in[[bi, 1, hi, wi]];
                }
            }
        }

        d_rgb += &dx.slice(s![.., ..c, .., ..]);
        d_par += &dx.slice(s![.., c.., .., ..]);
        (d_rgb, d_par)
    }
}

impl Parameterized for AttentionFusion {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&scoped(prefix, "channel.fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "channel.fc2"), f);
        self.spatial_conv.visit_params(&scoped(prefix, "spatial"), f);
        self.fuse_conv.visit_params(&scoped(prefix, "fuse"), f);
    }
}

/// Global average pooling over `H x W`.
pub fn global_average(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    x.to_shape((b, c, h * w))
        .unwrap()
        .mean_axis(Axis(2))
        .unwrap()
}

pub fn global_average_backward(d: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = d.dim();
    let hw = (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| d[[bi, ci]] / hw)
}

/// Global embedding neck: pooled features go to the triplet loss; their
/// batch-normalized version feeds the identity classifier.
#[derive(Debug, Clone)]
pub struct EmbeddingNeck {
    pub bn: BatchNorm,
    pub classifier: Linear,
}

impl EmbeddingNeck {
    pub fn new<R: Rng>(channels: usize, num_ids: usize, rng: &mut R) -> Self {
        Self {
            bn: BatchNorm::new(channels),
            classifier: Linear::new(channels, num_ids, false, rng),
        }
    }

    /// Pooled features and their normalized embedding (eval mode).
    pub fn global_embed(&self, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        let pooled = global_average(x);
        let emb = self.bn.forward_rows(&pooled);
        (pooled, emb)
    }
}

impl Parameterized for EmbeddingNeck {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bn.visit_params(&scoped(prefix, "bn"), f);
        self.classifier.visit_params(&scoped(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rand::Rng::gen_range(rng, -1.0..1.0))
    }

    #[test]
    fn omega_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rand4(&mut rng, (2, 3, 2, 2));
        let p = rand4(&mut rng, (2, 3, 2, 2));
        let (mix, sum) = mix_features(&r, &p, &Array4::ones(r.raw_dim())).unwrap();
        assert_eq!(mix, r);
        assert_eq!(sum, &r * 2.0 + &p);
        let (mix, sum) = mix_features(&r, &p, &Array4::zeros(r.raw_dim())).unwrap();
        assert_eq!(mix, p);
        assert_eq!(sum, &r + &p * 2.0);
    }

    #[test]
    fn joint_map_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fusion = AttentionFusion::new(4, &AttentionConfig::default(), &mut rng);
        let r = rand4(&mut rng, (1, 4, 3, 2));
        let p = rand4(&mut rng, (1, 4, 3, 2));
        let st = fusion.compute_attention(&r, &p).unwrap();
        for c in 0..4 {
            for h in 0..3 {
                for w in 0..2 {
                    let expect = st.channel[[0, c]] * st.spatial[[0, h, w]];
                    assert!((st.omega[[0, c, h, w]] - expect).abs() < 1e-15);
                }
            }
        }
        assert!(st.omega.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unit_maps_give_unit_omega() {
        let omega = joint_map(&Array2::ones((1, 3)), &Array3::ones((1, 2, 2)));
        assert!(omega.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pooled_embedding_is_the_spatial_mean() {
        let x = Array4::from_elem((1, 2, 3, 2), 0.75);
        assert!(global_average(&x).iter().all(|&v| (v - 0.75).abs() < 1e-15));
        let one = Array4::from_shape_vec((1, 3, 1, 1), vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(global_average(&one).as_slice().unwrap(), &[1.0, -2.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rand4(&mut rng, (1, 4, 3, 2));
        let g = global_average(&r);
        for c in 0..4 {
            let mut s = 0.0;
            for h in 0..3 {
                for w in 0..2 {
                    s += r[[0, c, h, w]];
                }
            }
            assert!((g[[0, c]] - s / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut fusion = AttentionFusion::new(4, &AttentionConfig::default(), &mut rng);
        let r = rand4(&mut rng, (2, 4, 3, 2));
        let p = rand4(&mut rng, (2, 4, 3, 2));
        let g = rand4(&mut rng, (2, 4, 3, 2));
        let loss = |f: &AttentionFusion, r: &Array4<f64>, p: &Array4<f64>| (&f.forward(r, p).unwrap().fused * &g).sum();

        fusion.zero_grad();
        fusion.forward_train(&r, &p).unwrap();
        let (dr, dp) = fusion.backward(&g);
        let eps = 1e-5;
        let scale = dr.iter().chain(dp.iter()).fold(0.0f64, |a, b| a.max(b.abs()));
        for idx in [[0, 0, 0, 0], [1, 3, 2, 1], [0, 2, 1, 0], [1, 1, 0, 1]] {
            for (x, d) in [(&r, &dr), (&p, &dp)] {
                let mut hi = x.clone();
                hi[idx] += eps;
                let mut lo = x.clone();
                lo[idx] -= eps;
                let (lh, ll) = if std::ptr::eq(x, &r) {
                    (loss(&fusion, &hi, &p), loss(&fusion, &lo, &p))
                } else {
                    (loss(&fusion, &r, &hi), loss(&fusion, &r, &lo))
                };
                let num = (lh - ll) / (2.0 * eps);
                assert!((num - d[idx]).abs() <= 1e-4 * scale, "{idx:?}: {num} vs {}", d[idx]);
            }
        }

        let mut grads = Vec::new();
        fusion.visit_params("", &mut |name, prm| {
            if prm.trainable {
                grads.push((name.to_string(), prm.grad.clone()));
            }
        });
        for (name, grad) in grads {
            let i = grad.len() / 2;
            let bump = |f: &mut AttentionFusion, delta: f64| {
                f.visit_params("", &mut |n, prm| {
                    if n == name {
                        prm.value.as_slice_mut().unwrap()[i] += delta;
                    }
                });
            };
            bump(&mut fusion, eps);
            let lh = loss(&fusion, &r, &p);
            bump(&mut fusion, -2.0 * eps);
            let ll = loss(&fusion, &r, &p);
            bump(&mut fusion, eps);
            let num = (lh - ll) / (2.0 * eps);
            let ana = grad.as_slice().unwrap()[i];
            let s = grad.iter().fold(1e-8f64, |a, b| a.max(b.abs()));
            assert!((num - ana).abs() <= 1e-4 * s, "{name}: {num} vs {ana}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fusion = AttentionFusion::new(4, &AttentionConfig::default(), &mut rng);
        let a = Array4::zeros((1, 4, 3, 2));
        let b = Array4::zeros((1, 4, 2, 2));
        assert!(fusion.compute_attention(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn mix_interpolates(vals in proptest::collection::vec(-5.0f64..5.0, 72), om in proptest::collection::vec(0.0f64..=1.0, 24)) {
            let r = Array4::from_shape_vec((1, 4, 3, 2), vals[..24].to_vec()).unwrap();
            let p = Array4::from_shape_vec((1, 4, 3, 2), vals[24..48].to_vec()).unwrap();
            let o = Array4::from_shape_vec((1, 4, 3, 2), om).unwrap();
            let (mix, _) = mix_features(&r, &p, &o).unwrap();
            for ((m, a), b) in mix.iter().zip(r.iter()).zip(p.iter()) {
                prop_assert!(*m >= a.min(*b) - 1e-12 && *m <= a.max(*b) + 1e-12);
            }
            let (mix, sum) = mix_features(&r, &r, &o).unwrap();
            prop_assert!(mix.iter().zip(r.iter()).all(|(m, x)| (m - x).abs() < 1e-12));
            prop_assert!(sum.iter().zip(r.iter()).all(|(s, x)| (s - 3.0 * x).abs() < 1e-12));
        }
    }
}
