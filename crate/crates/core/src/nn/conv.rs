use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::{scoped, Param, Parameterized};
use super::Layer;

/// 2-D convolution over NCHW tensors, lowered to a single GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
}

pub(crate) fn out_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let ho = out_size(h, kh, stride, pad);
    let wo = out_size(w, kw, stride, pad);
    let ncol = b * ho * wo;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0; c * kh * kw * ncol];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kh * kw, ncol), cols).unwrap()
}

fn col2im(
    cols: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = in_dim;
    let ho = out_size(h, kh, stride, pad);
    let wo = out_size(w, kw, stride, pad);
    let ncol = b * ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut out = vec![0.0; b * c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cs[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).unwrap()
}

impl Conv2d {
    /// He-normal initialized convolution (fan-out mode), zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).unwrap();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), || {
            normal.sample(rng)
        });
        Self {
            weight: Param::new(w),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let o = self.out_channels();
        let n = self.weight.value.len() / o;
        self.weight
            .value
            .to_shape((o, n))
            .unwrap()
            .into_owned()
    }

    fn apply(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (kh, kw) = self.kernel();
        let ho = out_size(h, kh, self.stride, self.pad);
        let wo = out_size(w, kw, self.stride, self.pad);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let ymat = self.weight_matrix().dot(&cols);
        let o = self.out_channels();
        let mut y = ymat
            .into_shape_with_order((o, b, ho, wo))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        if let Some(bias) = &self.bias {
            for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(bias.value.iter()) {
                ch += bv;
            }
        }
        (y, cols)
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.apply(x).0
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (y, cols) = self.apply(x);
        self.cache = Some(ConvCache {
            cols,
            in_dim: x.dim(),
        });
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("conv backward without forward_train");
        let (b, o, ho, wo) = dy.dim();
        let dmat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, b * ho * wo))
            .unwrap();
        let dw = dmat.dot(&cache.cols.t());
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((o, dw.ncols()))
                .unwrap();
            g += &dw;
        }
        if let Some(bias) = &mut self.bias {
            let db = dmat.sum_axis(Axis(1));
            let mut g = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += &db;
        }
        let dcols = self.weight_matrix().t().dot(&dmat);
        let (kh, kw) = self.kernel();
        col2im(&dcols, cache.in_dim, kh, kw, self.stride, self.pad)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }
}

#[allow(dead_code)]
pub(crate) fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().unwrap()
}

#[allow(dead_code)]
pub(crate) fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (kh, kw) = conv.kernel();
        let o = conv.out_channels();
        let ho = out_size(h, kh, conv.stride, conv.pad);
        let wo = out_size(w, kw, conv.stride, conv.pad);
        let wt = as4(&conv.weight.value);
        let mut y = Array4::zeros((b, o, ho, wo));
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.as_ref().map_or(0.0, |p| p.value[[oc]]);
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += wt[[oc, ci, ki, kj]]
                                            * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, oc, oy, ox]] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 0, 1), (2, 1, 3), (1, 3, 7), (2, 0, 3)] {
            let mut conv = Conv2d::new(3, 4, k, stride, pad, true, &mut rng);
            conv.bias.as_mut().unwrap().value.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            let x = Array4::from_shape_simple_fn((2, 3, 9, 6), || rng.gen_range(-1.0..1.0));
            let fast = conv.forward(&x);
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 2, 5, 4), || rng.gen_range(-1.0..1.0));
        let proj = conv.forward(&x).mapv(|_| rng.gen_range(-1.0..1.0));
        let loss = |c: &Conv2d, x: &Array4<f64>| (c.forward(x) * &proj).sum();

        conv.zero_grad();
        conv.forward_train(&x);
        let dx = conv.backward(&proj);

        let eps = 1e-5;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-7, "dx {idx:?}: {num} vs {}", dx[idx]);
        }
        let analytic = conv.weight.grad.clone();
        for flat in [0usize, 7, 20, 53] {
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += eps;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[flat];
            assert!((num - a).abs() < 1e-7, "dw {flat}: {num} vs {a}");
        }
    }
}
