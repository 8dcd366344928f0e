use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::param::Parameterized;

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state survives a checkpoint round trip.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| {
                (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim()))
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        });
    }
}

/// Step decay: `base * factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = if self.every == 0 { 0 } else { epoch / self.every };
        self.base_lr * self.factor.powi(drops as i32)
    }
}
