//! Convolutional feature extractors tapped after their third stage.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::scoped;
use crate::nn::{BatchNorm, Conv2d, Layer, MaxPool2d, Param, Parameterized, Relu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    /// Three conv stages, CPU friendly.
    Toy,
    /// 50-layer bottleneck residual network through its third stage (stride 16).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output width of each toy stage.
    pub widths: Vec<usize>,
    /// Stride of each toy stage.
    pub strides: Vec<usize>,
    /// 3x3 conv layers per toy stage (the first carries the stride).
    pub convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            convs_per_stage: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            variant: BackboneVariant::Full,
            widths: vec![256, 512, 1024],
            strides: vec![4, 2, 2],
            convs_per_stage: 0,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 || self.strides.len() != 3 {
            return Err(Error::Config("backbone needs exactly three stages".into()));
        }
        if self.widths.iter().chain(self.strides.iter()).any(|&v| v == 0) {
            return Err(Error::Config("backbone widths and strides must be positive".into()));
        }
        match self.variant {
            BackboneVariant::Toy if self.convs_per_stage == 0 => {
                Err(Error::Config("toy backbone needs convs_per_stage >= 1".into()))
            }
            BackboneVariant::Full if *self != Self::full() => Err(Error::Config(
                "full backbone has fixed widths 256/512/1024 and strides 4/2/2".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Feature map size for an input of `h x w`. Requires the total stride to
    /// divide both sides.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "total stride {s} does not divide input {h}x{w}"
            )));
        }
        Ok((h / s, w / s))
    }
}

#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu: Relu,
}

impl ConvBnRelu {
    fn new<R: Rng>(inp: usize, out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(inp, out, k, stride, k / 2, false, rng),
            bn: BatchNorm::new(out),
            relu: Relu::default(),
        }
    }
}

impl Layer for ConvBnRelu {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.relu.forward(&self.bn.forward(&self.conv.forward(x)))
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.conv.forward_train(x);
        let y = self.bn.forward_train(&y);
        self.relu.forward_train(&y)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl Parameterized for ConvBnRelu {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(&scoped(prefix, "conv"), f);
        self.bn.visit_params(&scoped(prefix, "bn"), f);
    }
}

/// 1x1 -> 3x3 (strided) -> 1x1 residual unit with 4x expansion.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    a: ConvBnRelu,
    b: ConvBnRelu,
    c_conv: Conv2d,
    c_bn: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
    out: Option<Array4<f64>>,
}

impl Bottleneck {
    fn new<R: Rng>(inp: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let out = width * 4;
        let down = (stride != 1 || inp != out).then(|| {
            (
                Conv2d::new(inp, out, 1, stride, 0, false, rng),
                BatchNorm::new(out),
            )
        });
        Self {
            a: ConvBnRelu::new(inp, width, 1, 1, rng),
            b: ConvBnRelu::new(width, width, 3, stride, rng),
            c_conv: Conv2d::new(width, out, 1, 1, 0, false, rng),
            c_bn: BatchNorm::new(out),
            down,
            out: None,
        }
    }
}

impl Layer for Bottleneck {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let main = self.c_bn.forward(&self.c_conv.forward(&self.b.forward(&self.a.forward(x))));
        let short = match &self.down {
            Some((c, b)) => b.forward(&c.forward(x)),
            None => x.clone(),
        };
        (main + short).mapv(|v| v.max(0.0))
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let m = self.a.forward_train(x);
        let m = self.b.forward_train(&m);
        let m = self.c_conv.forward_train(&m);
        let main = self.c_bn.forward_train(&m);
        let short = match &mut self.down {
            Some((c, b)) => {
                let s = c.forward_train(x);
                b.forward_train(&s)
            }
            None => x.clone(),
        };
        let y = (main + short).mapv(|v| v.max(0.0));
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let out = self.out.take().expect("bottleneck backward without forward_train");
        let d = crate::nn::act::relu_backward(&out, dy);
        let dm = self.c_bn.backward(&d);
        let dm = self.c_conv.backward(&dm);
        let dm = self.b.backward(&dm);
        let dx_main = self.a.backward(&dm);
        let dx_short = match &mut self.down {
            Some((c, b)) => {
                let s = b.backward(&d);
                c.backward(&s)
            }
            None => d,
        };
        dx_main + dx_short
    }
}

impl Parameterized for Bottleneck {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.a.visit_params(&scoped(prefix, "a"), f);
        self.b.visit_params(&scoped(prefix, "b"), f);
        self.c_conv.visit_params(&scoped(prefix, "c.conv"), f);
        self.c_bn.visit_params(&scoped(prefix, "c.bn"), f);
        if let Some((c, b)) = &mut self.down {
            c.visit_params(&scoped(prefix, "down.conv"), f);
            b.visit_params(&scoped(prefix, "down.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Unit(ConvBnRelu),
    Pool(MaxPool2d),
    Residual(Box<Bottleneck>),
}

impl Block {
    fn as_layer(&mut self) -> &mut dyn Layer {
        match self {
            Block::Unit(b) => b,
            Block::Pool(p) => p,
            Block::Residual(r) => r.as_mut(),
        }
    }

    fn as_layer_ref(&self) -> &dyn Layer {
        match self {
            Block::Unit(b) => b,
            Block::Pool(p) => p,
            Block::Residual(r) => r.as_ref(),
        }
    }
}

/// One branch's feature extractor. Each branch owns an independent instance.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        match config.variant {
            BackboneVariant::Toy => {
                let mut inp = 3;
                for (&w, &s) in config.widths.iter().zip(&config.strides) {
                    blocks.push(Block::Unit(ConvBnRelu::new(inp, w, 3, s, rng)));
                    for _ in 1..config.convs_per_stage {
                        blocks.push(Block::Unit(ConvBnRelu::new(w, w, 3, 1, rng)));
                    }
                    inp = w;
                }
            }
            BackboneVariant::Full => {
                blocks.push(Block::Unit(ConvBnRelu::new(3, 64, 7, 2, rng)));
                blocks.push(Block::Pool(MaxPool2d::new(3, 2, 1)));
                let mut inp = 64;
                for (stage, (&n, &width)) in [3usize, 4, 6].iter().zip(&[64usize, 128, 256]).enumerate() {
                    for i in 0..n {
                        let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                        blocks.push(Block::Residual(Box::new(Bottleneck::new(inp, width, stride, rng))));
                        inp = width * 4;
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Eval-mode forward of a `(B, 3, H', W')` batch.
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.blocks
            .iter()
            .fold(x.clone(), |h, b| b.as_layer_ref().forward(&h))
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.as_layer().forward_train(&h);
        }
        h
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.as_layer().backward(&d);
        }
        d
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = scoped(prefix, &format!("block{i}"));
            match b {
                Block::Unit(u) => u.visit_params(&p, f),
                Block::Pool(_) => {}
                Block::Residual(r) => r.visit_params(&p, f),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_variant_output_at_256x128() {
        assert_eq!(BackboneConfig::full().output_hw(384, 192).unwrap(), (24, 12));
        assert_eq!(BackboneConfig::full().out_channels(), 1024);
    }

    #[test]
    fn toy_variant_shapes() {
        let cfg = BackboneConfig::toy();
        assert_eq!(cfg.output_hw(64, 32).unwrap(), (8, 4));
        assert!(cfg.output_hw(60, 32).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let y = bb.forward(&Array4::zeros((2, 3, 64, 32)));
        assert_eq!(y.dim(), (2, 64, 8, 4));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_variant_runs_at_small_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bb = Backbone::new(&BackboneConfig::full(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((2, 3, 32, 16), |(b, c, h, w)| ((b + c * 3 + h + w) % 7) as f64 / 7.0);
        let y = bb.forward_train(&x);
        assert_eq!(y.dim(), (2, 1024, 2, 1));
        let dx = bb.backward(&Array4::ones(y.dim()));
        assert_eq!(dx.dim(), x.dim());
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&BackboneConfig::toy(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 64, 32), |(_, c, h, w)| ((c + h * w) % 11) as f64 / 11.0);
        let mut two = Array4::zeros((2, 3, 64, 32));
        two.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&x);
        two.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&x);
        let y = bb.forward(&two);
        assert_eq!(y.slice(ndarray::s![0, .., .., ..]), y.slice(ndarray::s![1, .., .., ..]));
    }
}
