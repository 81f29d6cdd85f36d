use serde::{Deserialize, Serialize};

use crate::tolerance::CLT_SIGMAS;

/// Sample mean with its `3σ` CLT half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub half_width: f64,
}

impl Summary {
    pub fn of(samples: impl IntoIterator<Item = f64>) -> Self {
        let mut acc = Accumulator::default();
        samples.into_iter().for_each(|x| acc.push(x));
        acc.summary()
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    /// The band `mean ± half-width` contains `value`.
    pub fn straddles(&self, value: f64) -> bool {
        self.lower() <= value && value <= self.upper()
    }
}

/// Streaming mean and variance (Welford); feeding samples in a fixed order
/// gives bit-identical summaries.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub(crate) fn summary(&self) -> Summary {
        let variance = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        let std_error = (variance / self.n.max(1) as f64).sqrt();
        Summary { n: self.n, mean: self.mean, std_error, half_width: CLT_SIGMAS * std_error }
    }
}

/// Least-squares slope of `y` against `x`.
pub(crate) fn slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
