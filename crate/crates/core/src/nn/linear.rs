use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;

use super::param::{scoped, Param, Parameterized};

/// Fully connected layer on row-major `(N, in)` batches: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Array2<f64>>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)`.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[outputs, inputs]), || {
            rng.gen_range(-bound..bound)
        });
        let b = bias.then(|| {
            Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[outputs]), || {
                rng.gen_range(-bound..bound)
            }))
        });
        Self {
            weight: Param::new(w),
            bias: b,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.inputs(), "linear input width");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().unwrap();
            y += &b;
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.forward(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward without forward_train");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &dy.t().dot(&x);
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &dy.sum_axis(Axis(0));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&w)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }
}
