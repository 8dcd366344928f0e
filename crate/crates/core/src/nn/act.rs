use ndarray::{Array, Array4, Dimension};

use super::Layer;

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|t| t.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// Gradient of the logistic function given its output.
pub fn sigmoid_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &s| *d *= s * (1.0 - s));
    dx
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    out: Option<Array4<f64>>,
}

impl Layer for Relu {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        relu(x)
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = relu(x);
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let y = self.out.take().expect("relu backward without forward_train");
        relu_backward(&y, dy)
    }
}
