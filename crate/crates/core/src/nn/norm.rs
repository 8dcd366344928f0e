use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, IxDyn};

use super::param::{scoped, Param, Parameterized};
use super::Layer;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of an `(N, C, S)` view.
///
/// `BatchNorm2d` uses `S = H * W`; the 1-D form uses `S = 1`. Training mode
/// normalizes with biased batch statistics and updates running estimates
/// (unbiased variance); eval mode uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array3<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self::with_eps(features, DEFAULT_BN_EPS)
    }

    pub fn with_eps(features: usize, eps: f64) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[features]))),
            beta: Param::zeros(&[features]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[features]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[features]))),
            eps,
            momentum: DEFAULT_BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    fn vec<'a>(p: &'a Param) -> ndarray::ArrayView1<'a, f64> {
        p.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn normalize_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let g = Self::vec(&self.gamma);
        let b = Self::vec(&self.beta);
        let m = Self::vec(&self.running_mean);
        let v = Self::vec(&self.running_var);
        let mut y = x.clone();
        for (c, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = g[c] / (v[c] + self.eps).sqrt();
            let shift = b[c] - m[c] * scale;
            lane.mapv_inplace(|t| t * scale + shift);
        }
        y
    }

    fn normalize_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (n, c, s) = x.dim();
        let count = (n * s) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for (ci, lane) in x.axis_iter(Axis(1)).enumerate() {
            let mu = lane.sum() / count;
            mean[ci] = mu;
            var[ci] = lane.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / count;
        }
        let inv_std = var.mapv(|v: f64| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = x.clone();
        for (ci, mut lane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, is) = (mean[ci], inv_std[ci]);
            lane.mapv_inplace(|t| (t - mu) * is);
        }
        let g = Self::vec(&self.gamma).to_owned();
        let b = Self::vec(&self.beta).to_owned();
        let mut y = x_hat.clone();
        for (ci, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|t| t * g[ci] + b[ci]);
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mom = self.momentum;
        for ci in 0..c {
            let rm = &mut self.running_mean.value[[ci]];
            *rm = (1.0 - mom) * *rm + mom * mean[ci];
            let rv = &mut self.running_var.value[[ci]];
            *rv = (1.0 - mom) * *rv + mom * var[ci] * unbias;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    fn backward3(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.take().expect("batch norm backward without forward_train");
        let (n, c, s) = dy.dim();
        let count = (n * s) as f64;
        let g = Self::vec(&self.gamma).to_owned();
        let mut dx = Array3::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.x_hat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xh = (&dyc * &xh).sum();
            self.gamma.grad[[ci]] += sum_dy_xh;
            self.beta.grad[[ci]] += sum_dy;
            let k = g[ci] * cache.inv_std[ci] / count;
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &dyv, &xhv| {
                    *d = k * (count * dyv - sum_dy - xhv * sum_dy_xh);
                });
        }
        dx
    }

    pub fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        let x3 = x.to_shape((n, c, 1)).unwrap().into_owned();
        self.normalize_eval(&x3).into_shape_with_order((n, c)).unwrap()
    }

    pub fn forward_rows_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        let x3 = x.to_shape((n, c, 1)).unwrap().into_owned();
        self.normalize_train(&x3).into_shape_with_order((n, c)).unwrap()
    }

    pub fn backward_rows(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let (n, c) = dy.dim();
        let d3 = dy.to_shape((n, c, 1)).unwrap().into_owned();
        self.backward3(&d3).into_shape_with_order((n, c)).unwrap()
    }
}

fn to3(x: &Array4<f64>) -> Array3<f64> {
    let (b, c, h, w) = x.dim();
    x.to_shape((b, c, h * w)).unwrap().into_owned()
}

fn to4(x: Array3<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    x.into_shape_with_order(dim).unwrap()
}

impl Layer for BatchNorm {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        to4(self.normalize_eval(&to3(x)), x.dim())
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        to4(self.normalize_train(&to3(x)), x.dim())
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        to4(self.backward3(&to3(dy)), dy.dim())
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&scoped(prefix, "gamma"), &mut self.gamma);
        f(&scoped(prefix, "beta"), &mut self.beta);
        f(&scoped(prefix, "running_mean"), &mut self.running_mean);
        f(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}
