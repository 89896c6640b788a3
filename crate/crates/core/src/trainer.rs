//! Training loops for the three regimes and the per-scene evaluation
//! driver.
//!
//! Losses: mean negative log-softmax likelihood, plus an L2 term when
//! `weight_decay > 0` (the dropout default), plus the scaled KL term in the
//! Bayesian regime. Optimization is SGD with momentum over shuffled
//! mini-batches of blocks with a step-decayed learning rate.
//!
//! A batch may be processed as several micro-batches whose gradients are
//! accumulated before the single optimizer step; batch normalization then
//! uses per-micro-batch statistics.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::arch::{network_input, ForwardMode, NetConfig, Regime, SegNet};
use crate::autodiff::Tape;
use crate::datapipe::{assemble_predictions, evaluation_blocks, Block, PointCloud};
use crate::inference::{mc_forward, predict, SampleStack, DEFAULT_SAMPLES};
use crate::mc_dropout::{DropoutSpec, DEFAULT_WEIGHT_DECAY};
use crate::metrics::{accuracy, filtered_metrics, mean_iou, ConfusionMatrix, Filtered};
use crate::optim::SgdMomentum;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::uncertainty::{report, Measure, UncertaintyReport};
use crate::varbayes::{elbo_loss, Prior};
use crate::{Error, Result, BLOCK_POINTS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    /// Blocks per forward/backward pass; gradients of the micro-batches of
    /// one batch are summed before the optimizer step.
    pub micro_batch: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    /// Monte-Carlo samples used at evaluation.
    pub samples: usize,
    pub prior: Prior,
    pub drop_prob: f64,
    /// Head layers whose inputs get dropout masks (dropout regime).
    pub dropout_placements: Vec<usize>,
    pub weight_decay: f64,
    /// Multiplier of the KL term (1 gives the plain ELBO).
    pub kl_scale: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Regime defaults: 100 epochs, batches of 16, momentum 0.9, decay
    /// every 10 epochs; lr 0.001 decayed by 0.7 (frequentist, dropout) or
    /// 0.01 decayed by 0.9 (Bayesian).
    pub fn new(regime: Regime) -> Self {
        let (lr0, lr_decay) = match regime {
            Regime::Bayesian => (0.01, 0.9),
            _ => (0.001, 0.7),
        };
        Self {
            regime,
            epochs: 100,
            batch_size: 16,
            micro_batch: 1,
            lr0,
            lr_decay,
            decay_every: 10,
            momentum: 0.9,
            samples: DEFAULT_SAMPLES,
            prior: Prior::default(),
            drop_prob: 0.1,
            dropout_placements: alloc::vec![1, 2, 3],
            weight_decay: if regime == Regime::Dropout {
                DEFAULT_WEIGHT_DECAY
            } else {
                0.0
            },
            kl_scale: 1.0,
            checkpoint_every: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("micro_batch", self.micro_batch),
            ("decay_every", self.decay_every),
            ("samples", self.samples),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("need lr > 0 and 0 < lr decay <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.kl_scale >= 0.0) {
            return Err(Error::Config("kl_scale must be >= 0".into()));
        }
        self.prior.validate()?;
        self.dropout_spec().validate()
    }

    pub fn dropout_spec(&self) -> DropoutSpec {
        match self.regime {
            Regime::Dropout => DropoutSpec {
                placements: self.dropout_placements.clone(),
                drop_prob: self.drop_prob,
                weight_decay: self.weight_decay,
            },
            _ => DropoutSpec::none(),
        }
    }

    pub fn net_config(&self, classes: usize) -> NetConfig {
        NetConfig {
            dropout: self.dropout_spec(),
            ..NetConfig::new(self.regime, classes)
        }
    }
}

/// Learning rate in (0-based) `epoch`: `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// Fresh network for `cfg`, seeded from `cfg.seed`.
pub fn init_network<T: Real>(cfg: &TrainConfig, classes: usize) -> Result<SegNet<T>> {
    cfg.validate()?;
    SegNet::new(cfg.net_config(classes), &mut RngStream::new(cfg.seed).split(0))
}

/// Batches of block indices for one epoch.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).collect()
}

/// Share of the full KL assigned to each batch of an epoch (sums to 1).
pub fn kl_fractions(blocks: usize, batch_size: usize) -> Vec<f64> {
    let order: Vec<usize> = (0..blocks).collect();
    batches(&order, batch_size)
        .iter()
        .map(|b| b.len() as f64 / blocks as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

pub enum TrainEvent<'a, T> {
    Epoch(EpochLog),
    /// Emitted every `checkpoint_every` epochs except after the last.
    Checkpoint {
        epoch: usize,
        net: &'a SegNet<T>,
    },
}

fn shuffle(order: &mut [usize], rng: &mut RngStream) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
}

/// Trains `net` in place on labeled blocks. The observer sees every epoch
/// and intermediate checkpoint and may abort by returning an error.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    net: &mut SegNet<T>,
    blocks: &[Block],
    observer: &mut dyn FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if cfg.regime != net.regime() {
        return Err(Error::Config(alloc::format!(
            "training config is {} but the network is {}",
            cfg.regime,
            net.regime()
        )));
    }
    if blocks.is_empty() {
        return Err(Error::Empty("training blocks"));
    }
    for b in blocks {
        if b.rows() != BLOCK_POINTS || b.labels.is_none() {
            return Err(Error::Contract("training blocks need 4096 labeled rows".into()));
        }
    }
    let mut rng = RngStream::new(cfg.seed).split(1);
    let sizes: Vec<usize> = net.params().iter().map(|(_, p)| p.value.numel()).collect();
    let mut opt = SgdMomentum::new(sizes.iter().copied(), T::lit(cfg.momentum));
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let all = batches(&order, cfg.batch_size);
        for batch in &all {
            let loss = train_step(cfg, net, blocks, batch, &mut opt, lr, &mut rng)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss,
                });
            }
            loss_sum += loss;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            step,
            loss: loss_sum / all.len() as f64,
            lr,
        };
        logs.push(log);
        observer(TrainEvent::Epoch(log))?;
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            observer(TrainEvent::Checkpoint { epoch: epoch + 1, net })?;
        }
    }
    Ok(logs)
}

/// One optimizer step over `batch`; returns the batch loss.
fn train_step<T: Real>(
    cfg: &TrainConfig,
    net: &mut SegNet<T>,
    blocks: &[Block],
    batch: &[usize],
    opt: &mut SgdMomentum<T>,
    lr: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let batch_points = (batch.len() * BLOCK_POINTS) as f64;
    let kl_fraction = batch.len() as f64 / blocks.len() as f64;
    let mut grads: Vec<Option<Vec<T>>> = alloc::vec![None; net.params().len()];
    let mut loss_total = 0.0;

    for (i, chunk) in batch.chunks(cfg.micro_batch).enumerate() {
        let share = chunk.len() as f64 / batch.len() as f64;
        let feats: Vec<&[f32]> = chunk.iter().map(|&b| blocks[b].features.as_slice()).collect();
        let labels: Vec<usize> = chunk
            .iter()
            .flat_map(|&b| blocks[b].labels.as_deref().unwrap_or_default().iter().copied())
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(network_input::<T>(&feats, BLOCK_POINTS)?);
        let out = net.forward(&mut tape, x, rng, ForwardMode::TRAIN)?;

        // Batch-level terms ride on the first micro-batch only.
        let first = i == 0;
        let (kl, kl_weight) = match cfg.regime {
            Regime::Bayesian if first && cfg.kl_scale > 0.0 => {
                let kl = net.kl_divergence(&mut tape, &out.bound, &cfg.prior)?;
                (kl, cfg.kl_scale * kl_fraction / batch_points / share)
            }
            _ => (None, 0.0),
        };
        let mut loss = elbo_loss(&mut tape, out.logits, &labels, kl, kl_weight)?;
        if first && cfg.weight_decay > 0.0 {
            let l2 = net.l2_penalty(&mut tape, &out.bound, cfg.weight_decay)?;
            let l2 = tape.scale(l2, T::lit(1.0 / share));
            loss = tape.add(loss, l2)?;
        }
        let loss = tape.scale(loss, T::lit(share));
        loss_total += tape.value(loss).item().as_f64();
        tape.backward(loss)?;
        for (id, var) in out.bound.iter() {
            if let Some(g) = tape.take_grad(var) {
                let slot = &mut grads[id.index()];
                match slot {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g.into_data()),
                }
            }
        }
        net.update_running_stats(&out.norm_stats);
    }

    let lr = T::lit(lr);
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            let id = net.params().iter().nth(i).map(|(id, _)| id).expect("parameter index");
            opt.step(i, net.params_mut().get_mut(id).value.data_mut(), &g, lr)?;
        }
    }
    Ok(loss_total)
}

/// Monte-Carlo samples of one block (`[4096 × m]` per sample).
pub fn block_samples<T: Real>(net: &SegNet<T>, block: &Block, samples: usize, rng: &RngStream) -> Result<SampleStack> {
    let x: Tensor<T> = network_input(&[&block.features], block.rows())?;
    mc_forward(net, &x, samples, rng)
}

/// Covers the cloud with evaluation blocks and returns the per-point
/// sample stack. Blocks are cut with `rng.split(0)`; every block uses
/// `rng.split(1)` for its Monte-Carlo draws, so sample `k` shares one weight
/// draw across the scene.
pub fn predict_cloud<T: Real>(
    net: &SegNet<T>,
    cloud: &PointCloud,
    block_size: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<SampleStack> {
    let blocks = evaluation_blocks(cloud, block_size, &mut rng.split(0))?;
    let mc = rng.split(1);
    let stacks = blocks
        .iter()
        .map(|b| block_samples(net, b, samples, &mc))
        .collect::<Result<Vec<_>>>()?;
    assemble_predictions(cloud.len(), &blocks, &stacks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureResult {
    pub report: UncertaintyReport,
    pub filtered: Filtered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEvaluation {
    pub prediction: Vec<usize>,
    pub accuracy: f64,
    pub miou: Option<f64>,
    pub measures: Vec<MeasureResult>,
}

/// Plain and uncertainty-filtered scores of one scene.
pub fn evaluate_stack(
    stack: &SampleStack,
    labels: &[usize],
    measures: &[Measure],
    sigmas: f64,
) -> Result<SceneEvaluation> {
    if labels.len() != stack.points() {
        return Err(Error::shape("evaluate", &[labels.len()], &[stack.points()]));
    }
    let prediction = predict(stack);
    let cm = ConfusionMatrix::from_labels(stack.classes(), labels, &prediction)?;
    let measures = measures
        .iter()
        .map(|&m| {
            let report = report(stack, m, sigmas)?;
            let filtered = filtered_metrics(labels, &prediction, &report.certain)?;
            Ok(MeasureResult { report, filtered })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneEvaluation {
        accuracy: accuracy(&cm)?,
        miou: mean_iou(&cm),
        prediction,
        measures,
    })
}
