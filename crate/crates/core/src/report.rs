use serde::{Deserialize, Serialize};

/// Empirical constants gathered by a ratio scan.
///
/// `max_ratio`/`min_ratio` are the sup and inf of the scanned ratio over
/// the accepted samples; `violations` counts samples excluded because they
/// fell outside the hypothesis region or hit a degenerate denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lemma: String,
    pub samples: usize,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub violations: usize,
    pub seed: u64,
}

impl BoundReport {
    pub(crate) fn empty(lemma: &str, seed: u64) -> Self {
        BoundReport {
            lemma: lemma.to_string(),
            samples: 0,
            max_ratio: f64::NEG_INFINITY,
            min_ratio: f64::INFINITY,
            violations: 0,
            seed,
        }
    }

    /// Number of samples that produced a ratio.
    pub fn accepted(&self) -> usize {
        self.samples - self.violations
    }

    pub fn is_finite(&self) -> bool {
        self.max_ratio.is_finite() && self.min_ratio.is_finite()
    }

    pub(crate) fn record(&mut self, ratio: Option<f64>) {
        self.samples += 1;
        match ratio {
            Some(r) if r.is_finite() => {
                self.max_ratio = self.max_ratio.max(r);
                self.min_ratio = self.min_ratio.min(r);
            }
            _ => self.violations += 1,
        }
    }

    pub(crate) fn merge(mut self, other: BoundReport) -> BoundReport {
        self.samples += other.samples;
        self.violations += other.violations;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
        self.min_ratio = self.min_ratio.min(other.min_ratio);
        self
    }
}
