//! Monte-Carlo posterior predictive: `K` stochastic forward passes,
//! averaged, then argmax.

use alloc::vec::Vec;

use num_traits::Float;

use crate::arch::{Regime, SegNet};
use crate::autodiff::Tape;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Default number of posterior samples.
pub const DEFAULT_SAMPLES: usize = 50;

const ROW_TOLERANCE: f64 = 1e-5;

/// `K × P × m` softmax outputs, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStack {
    samples: usize,
    points: usize,
    classes: usize,
    regime: Option<Regime>,
    values: Vec<f64>,
}

impl SampleStack {
    /// Builds a stack, checking that every row is a distribution.
    pub fn new(samples: usize, points: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        let stack = Self::from_raw(samples, points, classes, values)?;
        stack.validate()?;
        Ok(stack)
    }

    /// Builds a stack without the row-sum check (shape is still checked).
    pub fn from_raw(samples: usize, points: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if samples == 0 {
            return Err(Error::TooFewSamples {
                what: "sample stack",
                required: 1,
                got: 0,
            });
        }
        if classes < 2 {
            return Err(Error::Contract("a sample stack needs at least 2 classes".into()));
        }
        if values.len() != samples * points * classes {
            return Err(Error::shape(
                "sample stack",
                &[values.len()],
                &[samples, points, classes],
            ));
        }
        Ok(Self {
            samples,
            points,
            classes,
            regime: None,
            values,
        })
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (r, row) in self.values.chunks_exact(self.classes).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Consistency(alloc::format!(
                    "row {} of sample {} is not a distribution (sum {s})",
                    r % self.points.max(1),
                    r / self.points.max(1)
                )));
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn regime(&self) -> Option<Regime> {
        self.regime
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Probabilities of sample `k` at point `p`.
    pub fn row(&self, k: usize, p: usize) -> &[f64] {
        let o = (k * self.points + p) * self.classes;
        &self.values[o..o + self.classes]
    }

    /// The `K` sample probabilities of class `c` at point `p`.
    pub fn class_samples(&self, p: usize, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples).map(move |k| self.row(k, p)[c])
    }
}

/// Mean over samples, `[P × m]` row-major.
pub fn predictive_mean(stack: &SampleStack) -> Vec<f64> {
    let (p, m) = (stack.points, stack.classes);
    let mut mean = alloc::vec![0.0; p * m];
    for sample in stack.values.chunks_exact(p * m) {
        for (acc, v) in mean.iter_mut().zip(sample) {
            *acc += v;
        }
    }
    let inv = 1.0 / stack.samples as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-point class of largest predictive mean.
pub fn predict(stack: &SampleStack) -> Vec<usize> {
    predict_from_mean(&predictive_mean(stack), stack.classes)
}

pub fn predict_from_mean(mean: &[f64], classes: usize) -> Vec<usize> {
    mean.chunks_exact(classes).map(argmax).collect()
}

/// Row-wise softmax of `[.. × m]` scores, evaluated in `f64`.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for v in row {
            let e = Float::exp(v.as_f64() - max);
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}

/// Draws `samples` stochastic forwards of every block.
///
/// `blocks` is `[B × 4096 × 6]`. Sample `k` uses `rng.split(k)` for all
/// blocks, so the result does not depend on the order in which samples are
/// computed. Frequentist networks always yield a single deterministic
/// sample. The returned stack has `P = B·4096` rows in block order.
pub fn mc_forward<T: Real>(
    net: &SegNet<T>,
    blocks: &Tensor<T>,
    samples: usize,
    rng: &RngStream,
) -> Result<SampleStack> {
    if samples == 0 {
        return Err(Error::TooFewSamples {
            what: "Monte-Carlo forward",
            required: 1,
            got: 0,
        });
    }
    let stochastic = net.regime().is_stochastic();
    let samples = if stochastic { samples } else { 1 };
    let m = net.classes();
    let points = blocks.shape().first().copied().unwrap_or(0) * blocks.shape().get(1).copied().unwrap_or(0);
    let mut values = Vec::with_capacity(samples * points * m);
    for k in 0..samples {
        let mut sub = rng.split(k as u64);
        let mut tape = Tape::no_grad();
        let out = net.seg_forward(&mut tape, blocks.clone(), &mut sub, stochastic)?;
        let logits = tape.value(out.logits);
        if !logits.all_finite() {
            return Err(Error::NonFinite("network scores"));
        }
        values.extend(softmax_rows(logits.data(), m));
    }
    Ok(SampleStack::from_raw(samples, points, m, values)?.with_regime(net.regime()))
}
