//! PointNet segmentation network shared by the three training regimes.
//!
//! Layout (per point unless noted):
//!
//! ```text
//! x[B×N×6] ─ input T-Net (6×6) ─ mlp1 6→64 ─ feature T-Net (64×64) ─┬─ local[64]
//!     mlp2 64→128 ─ mlp3 128→1024 ─ max over points ─ global[1024] ──┤
//!     head0 1088→512 ─ head1 512→256 ─ head2 256→128 ─ head3 128→m ───┘
//! ```
//!
//! Kernel-size-1 convolutions are shared per-point linear maps. Every
//! shared-MLP layer may carry batch normalization; T-Net fully connected
//! layers do not. In the Bayesian regime every weight-bearing layer is
//! variational (see [`crate::varbayes`]); normalization parameters stay
//! point estimates.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::mc_dropout::{sample_mask, DropoutSpec};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::varbayes::{self, Prior, VariationalLayer};
use crate::{Error, Result, BLOCK_POINTS, INPUT_CHANNELS};

/// Number of layers in the scoring head.
pub const HEAD_LAYERS: usize = 4;

const TNET_CONV_WIDTHS: [usize; 3] = [64, 128, 1024];
const TNET_FC_WIDTHS: [usize; 2] = [512, 256];
const LOCAL_WIDTH: usize = 64;
const GLOBAL_WIDTH: usize = 1024;
const HEAD_WIDTHS: [usize; 3] = [512, 256, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Frequentist,
    Dropout,
    Bayesian,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Frequentist, Regime::Dropout, Regime::Bayesian];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Frequentist => "frequentist",
            Regime::Dropout => "dropout",
            Regime::Bayesian => "bayesian",
        }
    }

    /// Whether forward passes can be stochastic at test time.
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Regime::Frequentist)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequentist" => Ok(Regime::Frequentist),
            "dropout" => Ok(Regime::Dropout),
            "bayesian" => Ok(Regime::Bayesian),
            _ => Err(Error::Config(alloc::format!("unknown model regime `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub classes: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub dropout: DropoutSpec,
    pub regime: Regime,
    pub bn_eps: f64,
    /// Weight of the newest batch in the running normalization statistics.
    pub bn_momentum: f64,
}

impl NetConfig {
    /// Regime defaults: ReLU for the frequentist and dropout networks,
    /// leaky ReLU (0.01) for the Bayesian one; dropout 0.1 before the last
    /// three head layers in the dropout regime; batch normalization on.
    pub fn new(regime: Regime, classes: usize) -> Self {
        let (activation, dropout) = match regime {
            Regime::Frequentist => (Activation::Relu, DropoutSpec::none()),
            Regime::Dropout => (Activation::Relu, DropoutSpec::last_three(0.1)),
            Regime::Bayesian => (Activation::LeakyRelu(0.01), DropoutSpec::none()),
        };
        Self {
            classes,
            activation,
            batch_norm: true,
            dropout,
            regime,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(alloc::format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let s = self.activation.slope();
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(alloc::format!("activation slope {s} outside [0, 1)")));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid batch-norm settings".to_string()));
        }
        self.dropout.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Scalar spread parameter of a variational tensor.
    Delta,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    fn add(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        debug_assert!(self.by_name(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }
}

/// A weight-bearing layer: `x·W + b`, optionally variational.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    /// `(delta_w, delta_b)` in the Bayesian regime.
    pub delta: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer {
    pub dense: Dense,
    pub norm: Option<Norm>,
    pub activate: bool,
}

/// Alignment network predicting a `k×k` transform per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct TNet {
    pub k: usize,
    pub convs: Vec<MlpLayer>,
    /// Two activated hidden layers then the `k²` output layer.
    pub fcs: Vec<Dense>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TNetKind {
    Input,
    Feature,
}

/// What a forward pass does with its stochastic and normalization paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch normalization from batch statistics (else running statistics).
    pub train: bool,
    /// Sample variational weights / draw dropout masks (else means / no masks).
    pub sample: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        train: true,
        sample: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        sample: false,
    };
    pub const MC: ForwardMode = ForwardMode {
        train: false,
        sample: true,
    };
}

/// Tape variables bound to the network's trainable parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is not trainable")
    }

    /// `(param, var)` for every bound parameter.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

pub struct ForwardOutput<T> {
    /// Per-point class scores `[B×N×m]`.
    pub logits: Var,
    /// Max-pooled global feature `[B×1024]`.
    pub global: Var,
    pub input_transform: Var,
    pub feature_transform: Var,
    pub bound: Bound,
    /// Batch statistics per normalized layer (training mode only).
    pub norm_stats: Vec<(Norm, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T> {
    config: NetConfig,
    params: ParamStore<T>,
    input_tnet: TNet,
    mlp1: MlpLayer,
    feature_tnet: TNet,
    mlp2: MlpLayer,
    mlp3: MlpLayer,
    head: Vec<MlpLayer>,
}

/// Kaiming-normal tensor: `std = sqrt(2 / (1 + slope²)) / sqrt(fan_in)`.
pub fn kaiming_normal<T: Real>(fan_in: usize, fan_out: usize, slope: f64, rng: &mut RngStream) -> Tensor<T> {
    let std = (2.0 / (1.0 + slope * slope)).sqrt() / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(std * rng.normal()))
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    cfg: &'a NetConfig,
    rng: &'a mut RngStream,
}

impl<T: Real> Builder<'_, T> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let slope = self.cfg.activation.slope();
        let w = kaiming_normal(fan_in, fan_out, slope, self.rng);
        self.dense_with(name, w, Tensor::zeros(&[fan_out]))
    }

    fn dense_with(&mut self, name: &str, w: Tensor<T>, b: Tensor<T>) -> Dense {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let bayes = self.cfg.regime == Regime::Bayesian;
        let (wn, bn) = if bayes { ("mu_w", "mu_b") } else { ("weight", "bias") };
        let weight = self.store.add(alloc::format!("{name}.{wn}"), ParamKind::Weight, w);
        let bias = self.store.add(alloc::format!("{name}.{bn}"), ParamKind::Bias, b);
        let delta = bayes.then(|| {
            let d0 = T::lit(varbayes::inverse_tau(varbayes::INITIAL_TAU));
            let dw = self
                .store
                .add(alloc::format!("{name}.delta_w"), ParamKind::Delta, Tensor::scalar(d0));
            let db = self
                .store
                .add(alloc::format!("{name}.delta_b"), ParamKind::Delta, Tensor::scalar(d0));
            (dw, db)
        });
        Dense {
            name: name.to_string(),
            fan_in,
            fan_out,
            weight,
            bias,
            delta,
        }
    }

    fn mlp(&mut self, name: &str, fan_in: usize, fan_out: usize, normed: bool, activate: bool) -> MlpLayer {
        let dense = self.dense(name, fan_in, fan_out);
        let norm = (normed && self.cfg.batch_norm).then(|| {
            let mut add = |suffix: &str, kind, v: T| {
                self.store
                    .add(alloc::format!("{name}.bn.{suffix}"), kind, Tensor::full(&[fan_out], v))
            };
            Norm {
                gamma: add("gamma", ParamKind::NormScale, T::one()),
                beta: add("beta", ParamKind::NormShift, T::zero()),
                running_mean: add("running_mean", ParamKind::RunningMean, T::zero()),
                running_var: add("running_var", ParamKind::RunningVar, T::one()),
            }
        });
        MlpLayer { dense, norm, activate }
    }

    fn tnet(&mut self, name: &str, k: usize) -> TNet {
        let mut convs = Vec::new();
        let mut width = k;
        for (i, &w) in TNET_CONV_WIDTHS.iter().enumerate() {
            convs.push(self.mlp(&alloc::format!("{name}.conv{i}"), width, w, true, true));
            width = w;
        }
        let mut fcs = Vec::new();
        for (i, &w) in TNET_FC_WIDTHS.iter().enumerate() {
            fcs.push(self.dense(&alloc::format!("{name}.fc{i}"), width, w));
            width = w;
        }
        // Zero weights and identity bias: the initial transform is exactly I.
        let identity = Tensor::from_fn(&[k * k], |i| if i / k == i % k { T::one() } else { T::zero() });
        fcs.push(self.dense_with(&alloc::format!("{name}.fc2"), Tensor::zeros(&[width, k * k]), identity));
        TNet { k, convs, fcs }
    }
}

impl<T: Real> SegNet<T> {
    /// Fresh network: Kaiming-normal weights for the configured slope,
    /// zero biases, identity-initialized T-Nets.
    pub fn new(config: NetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
            cfg: &config,
            rng,
        };
        let input_tnet = b.tnet("tnet_in", INPUT_CHANNELS);
        let mlp1 = b.mlp("mlp1", INPUT_CHANNELS, LOCAL_WIDTH, true, true);
        let feature_tnet = b.tnet("tnet_feat", LOCAL_WIDTH);
        let mlp2 = b.mlp("mlp2", LOCAL_WIDTH, 128, true, true);
        let mlp3 = b.mlp("mlp3", 128, GLOBAL_WIDTH, true, true);
        let mut head = Vec::new();
        let mut width = LOCAL_WIDTH + GLOBAL_WIDTH;
        for (i, &w) in HEAD_WIDTHS.iter().enumerate() {
            head.push(b.mlp(&alloc::format!("head{i}"), width, w, true, true));
            width = w;
        }
        head.push(b.mlp("head3", width, config.classes, false, false));
        let params = b.store;
        Ok(Self {
            config,
            params,
            input_tnet,
            mlp1,
            feature_tnet,
            mlp2,
            mlp3,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn regime(&self) -> Regime {
        self.config.regime
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn tnet(&self, kind: TNetKind) -> &TNet {
        match kind {
            TNetKind::Input => &self.input_tnet,
            TNetKind::Feature => &self.feature_tnet,
        }
    }

    /// All weight-bearing layers in forward order.
    pub fn dense_layers(&self) -> Vec<&Dense> {
        let mut out = Vec::new();
        for l in &self.input_tnet.convs {
            out.push(&l.dense);
        }
        out.extend(self.input_tnet.fcs.iter());
        out.push(&self.mlp1.dense);
        for l in &self.feature_tnet.convs {
            out.push(&l.dense);
        }
        out.extend(self.feature_tnet.fcs.iter());
        out.push(&self.mlp2.dense);
        out.push(&self.mlp3.dense);
        for l in &self.head {
            out.push(&l.dense);
        }
        out
    }

    /// Variational parameters of a named layer (Bayesian regime only).
    pub fn variational_layer(&self, name: &str) -> Option<VariationalLayer<T>> {
        let d = self.dense_layers().into_iter().find(|d| d.name == name)?;
        let (dw, db) = d.delta?;
        Some(VariationalLayer {
            mu_w: self.params.get(d.weight).value.clone(),
            delta_w: self.params.get(dw).value.item(),
            mu_b: self.params.get(d.bias).value.clone(),
            delta_b: self.params.get(db).value.item(),
        })
    }

    /// Binds every trainable parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .params
            .iter()
            .map(|p| p.kind.trainable().then(|| tape.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    fn activation(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.leaky_relu(x, T::lit(self.config.activation.slope()))
    }

    /// Effective `(W, b)` of a layer: a fresh reparameterized sample for
    /// variational layers in sampling mode, the bound parameters otherwise.
    fn weights(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        d: &Dense,
        rng: &mut RngStream,
        mode: ForwardMode,
    ) -> Result<(Var, Var)> {
        let (w, b) = (bound.get(d.weight), bound.get(d.bias));
        match d.delta {
            Some((dw, db)) if mode.sample => {
                let ws = varbayes::sample_on_tape(tape, w, bound.get(dw), rng)?;
                let bs = varbayes::sample_on_tape(tape, b, bound.get(db), rng)?;
                Ok((ws, bs))
            }
            _ => Ok((w, b)),
        }
    }

    fn normalize(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        norm: &Norm,
        x: Var,
        mode: ForwardMode,
        stats: &mut Vec<(Norm, BatchStats<T>)>,
    ) -> Result<Var> {
        let eps = T::lit(self.config.bn_eps);
        let (g, b) = (bound.get(norm.gamma), bound.get(norm.beta));
        if mode.train {
            let (y, s) = tape.batch_norm(x, g, b, None, eps)?;
            stats.push((norm.clone(), s.expect("batch statistics")));
            Ok(y)
        } else {
            let rm = self.params.get(norm.running_mean).value.data();
            let rv = self.params.get(norm.running_var).value.data();
            Ok(tape.batch_norm(x, g, b, Some((rm, rv)), eps)?.0)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mlp_layer(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &MlpLayer,
        x: Var,
        rng: &mut RngStream,
        mode: ForwardMode,
        stats: &mut Vec<(Norm, BatchStats<T>)>,
    ) -> Result<Var> {
        let (w, b) = self.weights(tape, bound, &layer.dense, rng, mode)?;
        let mut h = tape.linear(x, w, Some(b))?;
        if let Some(norm) = &layer.norm {
            h = self.normalize(tape, bound, norm, h, mode, stats)?;
        }
        if layer.activate {
            h = self.activation(tape, h)?;
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn tnet_inner(
        &self,
        t: &TNet,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        rng: &mut RngStream,
        mode: ForwardMode,
        stats: &mut Vec<(Norm, BatchStats<T>)>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != t.k {
            return Err(Error::shape(
                "tnet input",
                &s,
                &[s.first().copied().unwrap_or(0), 0, t.k],
            ));
        }
        let mut h = x;
        for layer in &t.convs {
            h = self.mlp_layer(tape, bound, layer, h, rng, mode, stats)?;
        }
        let (mut h, _) = tape.max_over_points(h)?;
        let last = t.fcs.len() - 1;
        for (i, d) in t.fcs.iter().enumerate() {
            let (w, b) = self.weights(tape, bound, d, rng, mode)?;
            h = tape.linear(h, w, Some(b))?;
            if i < last {
                h = self.activation(tape, h)?;
            }
        }
        tape.reshape(h, &[s[0], t.k, t.k])
    }

    /// Runs one T-Net on `x[B×N×k]`, returning `[B×k×k]`.
    pub fn tnet_forward(
        &self,
        kind: TNetKind,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        rng: &mut RngStream,
        mode: ForwardMode,
    ) -> Result<Var> {
        let mut stats = Vec::new();
        self.tnet_inner(self.tnet(kind), tape, bound, x, rng, mode, &mut stats)
    }

    /// Full forward pass over `x[B×N×6]` for any `N ≥ 1`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut RngStream,
        mode: ForwardMode,
    ) -> Result<ForwardOutput<T>> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != INPUT_CHANNELS || s[1] == 0 {
            return Err(Error::shape("seg_forward input", &s, &[0, 0, INPUT_CHANNELS]));
        }
        let n = s[1];
        let bound = self.bind(tape);
        let mut stats = Vec::new();
        let st = &mut stats;

        let input_transform = self.tnet_inner(&self.input_tnet, tape, &bound, x, rng, mode, st)?;
        let aligned = tape.bmm(x, input_transform)?;
        let h = self.mlp_layer(tape, &bound, &self.mlp1, aligned, rng, mode, st)?;
        let feature_transform = self.tnet_inner(&self.feature_tnet, tape, &bound, h, rng, mode, st)?;
        let local = tape.bmm(h, feature_transform)?;
        let h = self.mlp_layer(tape, &bound, &self.mlp2, local, rng, mode, st)?;
        let h = self.mlp_layer(tape, &bound, &self.mlp3, h, rng, mode, st)?;
        let (global, _) = tape.max_over_points(h)?;

        let dropout = self.config.regime == Regime::Dropout && mode.sample;
        let mut h = local;
        for (i, layer) in self.head.iter().enumerate() {
            let masked = dropout && self.config.dropout.applies_to(i);
            let (w, b) = self.weights(tape, &bound, &layer.dense, rng, mode)?;
            h = if i == 0 && !masked {
                tape.concat_linear(local, global, w, Some(b))?
            } else {
                let mut input = if i == 0 {
                    let g = tape.broadcast_points(global, n)?;
                    tape.concat_channels(local, g)?
                } else {
                    h
                };
                if masked {
                    let len = tape.value(input).numel();
                    let mask = sample_mask(len, self.config.dropout.drop_prob, rng);
                    input = tape.mul_const(input, mask)?;
                }
                tape.linear(input, w, Some(b))?
            };
            if let Some(norm) = &layer.norm {
                h = self.normalize(tape, &bound, norm, h, mode, st)?;
            }
            if layer.activate {
                h = self.activation(tape, h)?;
            }
        }
        Ok(ForwardOutput {
            logits: h,
            global,
            input_transform,
            feature_transform,
            bound,
            norm_stats: stats,
        })
    }

    /// Inference pass over full blocks `x[B×4096×6]`: running normalization
    /// statistics, stochastic paths active iff `sample`.
    pub fn seg_forward(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        rng: &mut RngStream,
        sample: bool,
    ) -> Result<ForwardOutput<T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != BLOCK_POINTS || s[2] != INPUT_CHANNELS {
            return Err(Error::shape(
                "seg_forward input",
                s,
                &[s[0], BLOCK_POINTS, INPUT_CHANNELS],
            ));
        }
        let x = tape.constant(x);
        self.forward(tape, x, rng, ForwardMode { train: false, sample })
    }

    /// Sum of per-layer KL divergences to the prior; `None` outside the
    /// Bayesian regime.
    pub fn kl_divergence(&self, tape: &mut Tape<T>, bound: &Bound, prior: &Prior) -> Result<Option<Var>> {
        prior.validate()?;
        let mut total: Option<Var> = None;
        for d in self.dense_layers() {
            let Some((dw, db)) = d.delta else { continue };
            let kw = varbayes::kl_on_tape(tape, bound.get(d.weight), bound.get(dw), prior.sigma_w)?;
            let kb = varbayes::kl_on_tape(tape, bound.get(d.bias), bound.get(db), prior.sigma_b)?;
            let layer = tape.add(kw, kb)?;
            total = Some(match total {
                Some(t) => tape.add(t, layer)?,
                None => layer,
            });
        }
        Ok(total)
    }

    /// Analytic KL of the current parameters to the prior, without a tape.
    pub fn kl_value(&self, prior: &Prior) -> f64 {
        self.dense_layers()
            .iter()
            .filter_map(|d| {
                let (dw, db) = d.delta?;
                let tw = varbayes::tau(self.params.get(dw).value.item().as_f64());
                let tb = varbayes::tau(self.params.get(db).value.item().as_f64());
                Some(
                    varbayes::kl_mean_scaled(
                        self.params.get(d.weight).value.data(),
                        tw,
                        prior.sigma_w,
                        varbayes::SIGMA_FLOOR,
                    ) + varbayes::kl_mean_scaled(
                        self.params.get(d.bias).value.data(),
                        tb,
                        prior.sigma_b,
                        varbayes::SIGMA_FLOOR,
                    ),
                )
            })
            .sum()
    }

    /// L2 penalty over all weights and biases (normalization excluded).
    pub fn l2_penalty(&self, tape: &mut Tape<T>, bound: &Bound, weight_decay: f64) -> Result<Var> {
        let vars: Vec<Var> = self
            .dense_layers()
            .iter()
            .flat_map(|d| [bound.get(d.weight), bound.get(d.bias)])
            .collect();
        crate::mc_dropout::l2_penalty(tape, &vars, weight_decay)
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(Norm, BatchStats<T>)]) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for (norm, s) in stats {
            for (id, src) in [(norm.running_mean, &s.mean), (norm.running_var, &s.var)] {
                let dst = self.params.get_mut(id).value.data_mut();
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = keep * *d + m * v;
                }
            }
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            params: ParamStore {
                params: self
                    .params
                    .params
                    .iter()
                    .map(|p| Param {
                        name: p.name.clone(),
                        kind: p.kind,
                        value: p.value.cast(),
                    })
                    .collect(),
            },
            input_tnet: self.input_tnet.clone(),
            mlp1: self.mlp1.clone(),
            feature_tnet: self.feature_tnet.clone(),
            mlp2: self.mlp2.clone(),
            mlp3: self.mlp3.clone(),
            head: self.head.clone(),
        }
    }

    /// Replaces the value of the named parameter, checking its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .params
            .by_name(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter `{name}`")))?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// Packs blocks' network-input columns into `[B×N×6]`.
pub fn network_input<T: Real>(features: &[&[f32]], points: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(features.len() * points * INPUT_CHANNELS);
    for f in features {
        if f.len() != points * crate::BLOCK_FEATURES {
            return Err(Error::shape(
                "network_input",
                &[f.len()],
                &[points, crate::BLOCK_FEATURES],
            ));
        }
        for row in f.chunks_exact(crate::BLOCK_FEATURES) {
            data.extend(row[..INPUT_CHANNELS].iter().map(|&v| T::lit(v as f64)));
        }
    }
    Tensor::new(&[features.len(), points, INPUT_CHANNELS], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_input(b: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed);
        Tensor::from_fn(&[b, n, INPUT_CHANNELS], |_| r.normal())
    }

    #[test]
    fn widths_and_counts() {
        let net = SegNet::<f32>::new(NetConfig::new(Regime::Frequentist, 9), &mut RngStream::new(0)).unwrap();
        let dense = net.dense_layers();
        assert_eq!(dense.len(), 19);
        let head: Vec<(usize, usize)> = dense[15..].iter().map(|d| (d.fan_in, d.fan_out)).collect();
        assert_eq!(head, vec![(1088, 512), (512, 256), (256, 128), (128, 9)]);
        let bayes = SegNet::<f32>::new(NetConfig::new(Regime::Bayesian, 9), &mut RngStream::new(0)).unwrap();
        assert_eq!(
            bayes.params().trainable_scalars(),
            net.params().trainable_scalars() + 2 * dense.len()
        );
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = NetConfig::new(Regime::Bayesian, 6);
        let a = SegNet::<f32>::new(cfg.clone(), &mut RngStream::new(5)).unwrap();
        let b = SegNet::<f32>::new(cfg, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        for d in a.dense_layers() {
            if d.name.ends_with("fc2") {
                continue;
            }
            assert!(a.params().get(d.bias).value.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_tnet_is_identity() {
        let net = SegNet::<f64>::new(NetConfig::new(Regime::Frequentist, 4), &mut RngStream::new(1)).unwrap();
        let mut tape = Tape::no_grad();
        let bound = net.bind(&mut tape);
        let x = tape.constant(small_input(2, 50, 2));
        let t = net
            .tnet_forward(
                TNetKind::Input,
                &mut tape,
                &bound,
                x,
                &mut RngStream::new(0),
                ForwardMode::EVAL,
            )
            .unwrap();
        assert_eq!(tape.shape(t), &[2, 6, 6]);
        for (i, &v) in tape.value(t).data().iter().enumerate() {
            let e = if (i % 36) / 6 == i % 6 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_forward_is_bit_identical() {
        let net = SegNet::<f32>::new(NetConfig::new(Regime::Dropout, 5), &mut RngStream::new(3)).unwrap();
        let x = small_input(1, 64, 4).cast::<f32>();
        let run = |rng_seed| {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let out = net
                .forward(&mut tape, xv, &mut RngStream::new(rng_seed), ForwardMode::EVAL)
                .unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn seg_forward_requires_full_blocks() {
        let net = SegNet::<f32>::new(NetConfig::new(Regime::Frequentist, 3), &mut RngStream::new(3)).unwrap();
        let mut tape = Tape::no_grad();
        let bad = Tensor::zeros(&[1, 100, 6]);
        assert!(net.seg_forward(&mut tape, bad, &mut RngStream::new(0), false).is_err());
        let bad_c = Tensor::zeros(&[1, BLOCK_POINTS, 9]);
        assert!(net
            .seg_forward(&mut tape, bad_c, &mut RngStream::new(0), false)
            .is_err());
    }

    #[test]
    fn dropout_placement_on_first_head_layer_matches_fused_path_when_inactive() {
        let mut cfg = NetConfig::new(Regime::Dropout, 4);
        cfg.dropout = DropoutSpec {
            placements: vec![0],
            drop_prob: 0.0,
            weight_decay: 0.0,
        };
        let net = SegNet::<f64>::new(cfg, &mut RngStream::new(8)).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(small_input(1, 30, 9));
        let a = net
            .forward(&mut tape, x, &mut RngStream::new(0), ForwardMode::MC)
            .unwrap();
        let b = net
            .forward(&mut tape, x, &mut RngStream::new(0), ForwardMode::EVAL)
            .unwrap();
        for (p, q) in tape.value(a.logits).data().iter().zip(tape.value(b.logits).data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}
