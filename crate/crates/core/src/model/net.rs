use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::{bn_forward_eval, bn_forward_train, AffineVars, BnMode, BranchTag, DsbnState};
use crate::numerics::{Conv2dSpec, Tape, Tensor, Var};
use crate::seeding::rng_for;

/// The `[model]` config table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base channel width F.
    pub width: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub bn_mode: BnMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 16,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            bn_mode: BnMode::Dsbn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("model.width must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "model.bn_momentum must lie in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!("model.bn_eps must be > 0, got {}", self.bn_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub spec: Conv2dSpec,
}

/// stem → two stride-2 stages → dilated middle block → 1×1 classifier → ×4 upsample.
///
/// Every conv is followed by a [`DsbnState`] and relu. The classifier runs
/// at quarter resolution before the upsample; a 1×1 conv with bias commutes
/// with bilinear resizing, so the logits match the upsample-then-classify order.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroSegNet {
    pub width: usize,
    pub classes: usize,
    pub bn_mode: BnMode,
    pub convs: Vec<ConvLayer>,
    pub norms: Vec<DsbnState>,
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

/// Parameter handles of one network bound onto a tape, in [`MicroSegNet::param_names`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn kaiming(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl MicroSegNet {
    pub fn new(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let f = cfg.width;
        let mut rng = rng_for(&[seed, 0x1417]);
        let plan = [
            (3, f, Conv2dSpec::new(1, 1)),
            (f, 2 * f, Conv2dSpec::new(2, 1)),
            (2 * f, 4 * f, Conv2dSpec::new(2, 1)),
            (4 * f, 4 * f, Conv2dSpec::new(1, 2).dilated(2)),
        ];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (cin, cout, spec) in plan {
            convs.push(ConvLayer {
                kernel: kaiming(&[cout, cin, 3, 3], 2.0, &mut rng),
                spec,
            });
            norms.push(DsbnState::new(cout, cfg.bn_momentum, cfg.bn_eps)?);
        }
        Ok(MicroSegNet {
            width: f,
            classes,
            bn_mode: cfg.bn_mode,
            convs,
            norms,
            classifier: kaiming(&[classes, 4 * f, 1, 1], 1.0, &mut rng),
            classifier_bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("bn{i}.gamma"));
            names.push(format!("bn{i}.beta"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.extend([&c.kernel, &n.gamma, &n.beta]);
        }
        out.push(&self.classifier);
        out.push(&self.classifier_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut c.kernel);
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.norms.len()).map(|i| format!("bn{i}")).collect()
    }

    pub fn init_pbn(&mut self) {
        self.norms.iter_mut().for_each(DsbnState::init_pbn);
    }

    /// Records every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params().into_iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params().into_iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Logits `[N, C, H, W]` for images `[N, 3, H, W]`.
    ///
    /// In [`Mode::Train`] each normalization layer uses batch statistics and
    /// updates the bank selected by `tag`; in [`Mode::Eval`] it reads the weak
    /// bank only and nothing is mutated.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, images: Var, tag: BranchTag, mode: Mode) -> Result<Var> {
        if mode == Mode::Eval {
            return eval_forward(self, tape, bound, images);
        }
        let (h, w) = check_input(tape.shape(images))?;
        let mut x = images;
        for (i, (conv, norm)) in self.convs.iter().zip(self.norms.iter_mut()).enumerate() {
            x = tape.conv2d(x, bound.vars[3 * i], conv.spec)?;
            let affine = AffineVars {
                gamma: bound.vars[3 * i + 1],
                beta: bound.vars[3 * i + 2],
            };
            x = bn_forward_train(tape, x, affine, norm, tag, self.bn_mode)?;
            x = tape.relu(x)?;
        }
        head(self, tape, bound, x, h, w)
    }

    /// Eval-mode logits without recording gradients. Takes `&self`: the
    /// network is not mutated.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let y = eval_forward(self, &mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Order-sensitive hash of every parameter and running-statistic bit.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: f64| {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        };
        for t in self.params() {
            t.data().iter().for_each(|&v| eat(v));
        }
        for n in &self.norms {
            for bank in [&n.weak, &n.strong] {
                bank.mean.iter().chain(&bank.var).for_each(|&v| eat(v));
            }
        }
        h
    }
}

fn check_input(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Dimension(format!("expected images [N, 3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "input height and width must be positive multiples of 4, got {h}x{w}"
        )));
    }
    Ok((h, w))
}

fn head(net: &MicroSegNet, tape: &mut Tape, bound: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
    let k = 3 * net.convs.len();
    let x = tape.conv2d(x, bound.vars[k], Conv2dSpec::new(1, 0))?;
    let x = tape.add_channel_bias(x, bound.vars[k + 1])?;
    tape.resize_bilinear(x, h, w)
}

fn eval_forward(net: &MicroSegNet, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
    let (h, w) = check_input(tape.shape(images))?;
    let mut x = images;
    for (i, (conv, norm)) in net.convs.iter().zip(&net.norms).enumerate() {
        x = tape.conv2d(x, bound.vars[3 * i], conv.spec)?;
        let affine = AffineVars {
            gamma: bound.vars[3 * i + 1],
            beta: bound.vars[3 * i + 2],
        };
        x = bn_forward_eval(tape, x, affine, norm)?;
        x = tape.relu(x)?;
    }
    head(net, tape, bound, x, h, w)
}
