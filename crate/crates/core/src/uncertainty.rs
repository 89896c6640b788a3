//! Per-point uncertainty measures over a [`SampleStack`] and the rules that
//! turn them into certain/uncertain decisions.
//!
//! Entropies are in nats. The variance measure is the unbiased sample
//! variance of the predicted class's probability.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::inference::{predict_from_mean, predictive_mean, SampleStack};
use crate::{Error, Result};

/// Tolerance below zero accepted (and clamped) for the epistemic part.
pub const EPISTEMIC_TOLERANCE: f64 = 1e-9;

/// Fewest samples for which 2.5/97.5 percentiles are meaningful.
pub const MIN_CREDIBLE_SAMPLES: usize = 20;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SIGMAS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Predictive,
    Aleatoric,
    Epistemic,
    Variance,
    Credible,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Predictive,
        Measure::Aleatoric,
        Measure::Epistemic,
        Measure::Variance,
        Measure::Credible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Predictive => "predictive",
            Measure::Aleatoric => "aleatoric",
            Measure::Epistemic => "epistemic",
            Measure::Variance => "variance",
            Measure::Credible => "credible",
        }
    }

    /// Fewest samples the measure accepts.
    pub fn min_samples(self) -> usize {
        match self {
            Measure::Variance => 2,
            Measure::Credible => MIN_CREDIBLE_SAMPLES,
            _ => 1,
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown uncertainty measure `{s}`")))
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Entropy of the predictive mean.
pub fn u_pred(stack: &SampleStack) -> Vec<f64> {
    predictive_mean(stack)
        .chunks_exact(stack.classes())
        .map(entropy)
        .collect()
}

/// Mean entropy of the individual samples.
pub fn u_alea(stack: &SampleStack) -> Vec<f64> {
    let (k, p) = (stack.samples(), stack.points());
    let mut out = alloc::vec![0.0; p];
    for s in 0..k {
        for (i, acc) in out.iter_mut().enumerate() {
            *acc += entropy(stack.row(s, i));
        }
    }
    out.iter_mut().for_each(|v| *v /= k as f64);
    out
}

/// Predictive minus aleatoric entropy (mutual information).
pub fn u_epi(stack: &SampleStack) -> Result<Vec<f64>> {
    if stack.samples() == 1 {
        return Ok(alloc::vec![0.0; stack.points()]);
    }
    u_pred(stack)
        .into_iter()
        .zip(u_alea(stack))
        .enumerate()
        .map(|(i, (p, a))| {
            let d = p - a;
            if d < -EPISTEMIC_TOLERANCE {
                Err(Error::Consistency(alloc::format!(
                    "negative epistemic uncertainty {d} at point {i}"
                )))
            } else {
                Ok(d.max(0.0))
            }
        })
        .collect()
}

/// Unbiased variance, over samples, of the predicted class's probability.
pub fn u_var(stack: &SampleStack) -> Result<Vec<f64>> {
    require_samples(stack, Measure::Variance)?;
    let mean = predictive_mean(stack);
    let m = stack.classes();
    let pred = predict_from_mean(&mean, m);
    let k = stack.samples() as f64;
    Ok(pred
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let mu = mean[p * m + c];
            stack.class_samples(p, c).map(|v| (v - mu) * (v - mu)).sum::<f64>() / (k - 1.0)
        })
        .collect())
}

fn require_samples(stack: &SampleStack, measure: Measure) -> Result<()> {
    let required = measure.min_samples();
    if stack.samples() < required {
        return Err(Error::TooFewSamples {
            what: measure.as_str(),
            required,
            got: stack.samples(),
        });
    }
    Ok(())
}

/// Percentile `q ∈ [0, 1]` of sorted data by linear interpolation between
/// order statistics at fractional rank `q·(n−1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of empty data");
    let rank = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Central credible interval `[lower, upper]` of one class at one point.
pub fn credible_interval(stack: &SampleStack, point: usize, class: usize, level: f64) -> (f64, f64) {
    let mut v: Vec<f64> = stack.class_samples(point, class).collect();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile_sorted(&v, tail), percentile_sorted(&v, 1.0 - tail))
}

/// `true` where the predicted class's interval lies strictly above every
/// other class's interval.
pub fn credible_overlap(stack: &SampleStack, level: f64) -> Result<Vec<bool>> {
    require_samples(stack, Measure::Credible)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Contract(alloc::format!("credible level {level} outside (0, 1)")));
    }
    let m = stack.classes();
    let pred = predict_from_mean(&predictive_mean(stack), m);
    Ok(pred
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let (lower, _) = credible_interval(stack, p, c, level);
            (0..m)
                .filter(|&o| o != c)
                .all(|o| lower > credible_interval(stack, p, o, level).1)
        })
        .collect())
}

/// Threshold `mean + sigmas·std` over `values` (sample std).
pub fn threshold(values: &[f64], sigmas: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            what: "threshold filter",
            required: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if sigmas == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(mean + sigmas * var.sqrt())
}

/// `true` where the value does not exceed `mean + sigmas·std`.
pub fn threshold_filter(values: &[f64], sigmas: f64) -> Result<Vec<bool>> {
    let t = threshold(values, sigmas)?;
    Ok(values.iter().map(|&v| v <= t).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub measure: Measure,
    /// Per-point values; empty for the credible-interval rule.
    pub values: Vec<f64>,
    pub certain: Vec<bool>,
    /// Threshold applied to `values`; `None` for the credible rule.
    pub threshold: Option<f64>,
}

impl UncertaintyReport {
    pub fn drop_rate(&self) -> f64 {
        if self.certain.is_empty() {
            return 0.0;
        }
        self.certain.iter().filter(|c| !**c).count() as f64 / self.certain.len() as f64
    }
}

/// Computes one measure and its certain mask.
pub fn report(stack: &SampleStack, measure: Measure, sigmas: f64) -> Result<UncertaintyReport> {
    require_samples(stack, measure)?;
    let values = match measure {
        Measure::Predictive => u_pred(stack),
        Measure::Aleatoric => u_alea(stack),
        Measure::Epistemic => u_epi(stack)?,
        Measure::Variance => u_var(stack)?,
        Measure::Credible => {
            return Ok(UncertaintyReport {
                measure,
                values: Vec::new(),
                certain: credible_overlap(stack, DEFAULT_LEVEL)?,
                threshold: None,
            })
        }
    };
    let t = threshold(&values, sigmas)?;
    Ok(UncertaintyReport {
        measure,
        certain: values.iter().map(|&v| v <= t).collect(),
        values,
        threshold: Some(t),
    })
}

/// Five-number summary (min, q25, median, q75, max) of each class's samples
/// at one point.
pub fn quantile_table(stack: &SampleStack, point: usize) -> Result<Vec<[f64; 5]>> {
    if point >= stack.points() {
        return Err(Error::Contract(alloc::format!(
            "point {point} out of range for {} points",
            stack.points()
        )));
    }
    Ok((0..stack.classes())
        .map(|c| {
            let mut v: Vec<f64> = stack.class_samples(point, c).collect();
            v.sort_by(f64::total_cmp);
            [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| percentile_sorted(&v, q))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn stack(k: usize, p: usize, m: usize, v: Vec<f64>) -> SampleStack {
        SampleStack::new(k, p, m, v).unwrap()
    }

    #[test]
    fn entropy_cases() {
        let uniform = stack(1, 1, 9, vec![1.0 / 9.0; 9]);
        assert!((u_pred(&uniform)[0] - 9f64.ln()).abs() < 1e-12);
        let onehot = stack(1, 1, 3, vec![0.0, 1.0, 0.0]);
        assert_eq!(u_pred(&onehot)[0], 0.0);
        let half = stack(1, 1, 2, vec![0.5, 0.5]);
        assert!((u_pred(&half)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn opposite_one_hots_are_purely_epistemic() {
        let s = stack(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(u_alea(&s)[0], 0.0);
        assert_eq!(u_pred(&s)[0], 2f64.ln());
        assert_eq!(u_epi(&s).unwrap()[0], 2f64.ln());
    }

    #[test]
    fn single_sample_has_no_epistemic_part() {
        let s = stack(1, 2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        assert_eq!(u_alea(&s), u_pred(&s));
        assert_eq!(u_epi(&s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_sample_variance() {
        let s = stack(2, 1, 2, vec![0.9, 0.1, 0.7, 0.3]);
        let v = u_var(&s).unwrap()[0];
        assert!((v - 0.2f64.powi(2) / 2.0).abs() < 1e-15);
        assert!(u_var(&stack(1, 1, 2, vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let d = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&d, 0.5), 2.0);
        assert_eq!(percentile_sorted(&d, 0.1), 0.4);
        assert_eq!(percentile_sorted(&d, 1.0), 4.0);
    }

    #[test]
    fn credible_cases() {
        let k = 20;
        let mut certain = Vec::new();
        let mut tied = Vec::new();
        for i in 0..k {
            let a = 0.8 + 0.01 * (i % 5) as f64;
            certain.extend([a, (1.0 - a) / 2.0, (1.0 - a) / 2.0]);
            let b = 0.4 + 0.01 * (i % 4) as f64;
            tied.extend([b, b, 1.0 - 2.0 * b]);
        }
        assert_eq!(credible_overlap(&stack(k, 1, 3, certain), 0.95).unwrap(), vec![true]);
        assert_eq!(credible_overlap(&stack(k, 1, 3, tied), 0.95).unwrap(), vec![false]);
        let short = stack(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(
            credible_overlap(&short, 0.95),
            Err(Error::TooFewSamples { required: 20, .. })
        ));
    }

    #[test]
    fn threshold_cases() {
        assert!(threshold_filter(&[3.0; 10], 2.0).unwrap().iter().all(|&c| c));
        let mut v = vec![0.0; 99];
        v.push(100.0);
        let mask = threshold_filter(&v, 2.0).unwrap();
        assert_eq!(mask.iter().filter(|c| !**c).count(), 1);
        assert!(!mask[99]);
        assert!(threshold_filter(&v, f64::INFINITY).unwrap().iter().all(|&c| c));
        assert!(threshold_filter(&[1.0], 2.0).is_err());
    }

    #[test]
    fn measure_names_round_trip() {
        for m in Measure::ALL {
            assert_eq!(m.as_str().parse::<Measure>().unwrap(), m);
        }
        assert!("entropy".parse::<Measure>().is_err());
    }

    #[test]
    fn quantiles_of_constant_samples() {
        let s = stack(3, 1, 2, vec![0.25, 0.75, 0.25, 0.75, 0.25, 0.75]);
        let q = quantile_table(&s, 0).unwrap();
        assert_eq!(q, vec![[0.25; 5], [0.75; 5]]);
    }
}
