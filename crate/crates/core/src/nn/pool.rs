use ndarray::Array4;

use super::conv::out_size;
use super::Layer;

/// Max pooling with square window; padded cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn apply(&self, x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
        let (b, c, h, w) = x.dim();
        let ho = out_size(h, self.kernel, self.stride, self.pad);
        let wo = out_size(w, self.kernel, self.stride, self.pad);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut y = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
        (Array4::from_shape_vec((b, c, ho, wo), y).unwrap(), arg)
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.apply(x).0
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (y, arg) = self.apply(x);
        self.cache = Some((arg, x.dim()));
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (arg, dim) = self.cache.take().expect("pool backward without forward_train");
        let mut dx = Array4::<f64>::zeros(dim);
        let ds = dx.as_slice_mut().unwrap();
        for (g, &i) in dy.iter().zip(arg.iter()) {
            ds[i] += g;
        }
        dx
    }
}
