//! The smoothing multiplier `m_{N,s}` and the operator `I = I_{N,s}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::BoundReport;
use crate::spectral::SpectralField;

/// Interpolant used on the transition band `N < |ξ| < 2N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Cubic Hermite interpolation of `log m` against `log |ξ|`, matching
    /// value and slope of both outer branches. C¹ and monotone for `s < 0`.
    #[default]
    HermiteLogLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IParams {
    big_n: f64,
    s: f64,
    #[serde(default)]
    transition: Transition,
}

impl IParams {
    pub fn new(big_n: f64, s: f64) -> Result<Self> {
        if !(big_n.is_finite() && big_n >= 4.0) {
            return Err(Error::InvalidParameter(format!("N must be >= 4, got {big_n}")));
        }
        if !(-0.75..0.0).contains(&s) {
            return Err(Error::InvalidParameter(format!("s must lie in [-3/4, 0), got {s}")));
        }
        Ok(IParams {
            big_n,
            s,
            transition: Transition::HermiteLogLog,
        })
    }

    pub fn big_n(&self) -> f64 {
        self.big_n
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn transition(&self) -> Transition {
        self.transition
    }

    /// Same `s`, different cutoff.
    pub fn with_big_n(&self, big_n: f64) -> Result<Self> {
        IParams::new(big_n, self.s)
    }
}

/// `m_{N,s}(ξ)`: 1 on `|ξ| ≤ N`, `(|ξ|/N)^s` on `|ξ| ≥ 2N`.
pub fn m_multiplier(xi: f64, ip: &IParams) -> f64 {
    let a = xi.abs();
    let n = ip.big_n;
    if a <= n {
        1.0
    } else if a >= 2.0 * n {
        (a / n).powf(ip.s)
    } else {
        match ip.transition {
            Transition::HermiteLogLog => {
                let ln2 = std::f64::consts::LN_2;
                let t = (a / n).ln() / ln2;
                (ip.s * ln2 * t * t * (2.0 - t)).exp()
            }
        }
    }
}

/// `Îu(ξ) = m(ξ) û(ξ)`.
pub fn apply_i(u: &SpectralField, ip: &IParams) -> SpectralField {
    u.apply_symbol(|xi| Complex64::new(m_multiplier(xi, ip), 0.0))
}

/// `⟨ξ⟩ = (1 + ξ²)^{1/2}`.
pub fn japanese(xi: f64) -> f64 {
    (1.0 + xi * xi).sqrt()
}

/// Discrete `H^s` norm `(Σ ⟨ξ⟩^{2s} |û(ξ)|²)^{1/2}`.
pub fn sobolev_norm(u: &SpectralField, s: f64) -> f64 {
    let grid = u.grid();
    grid.indices()
        .map(|k| japanese(grid.wavenumber(k)).powf(2.0 * s) * u.coeff(k).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Two-sided constants of `C⁻¹‖u‖_{H^s} ≤ ‖Iu‖ ≤ C N^{-s} ‖u‖_{H^s}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalence {
    /// Ratios `‖u‖_{H^s} / ‖Iu‖_{L²}`.
    pub lower: BoundReport,
    /// Ratios `‖Iu‖_{L²} / (N^{-s} ‖u‖_{H^s})`.
    pub upper: BoundReport,
}

impl NormEquivalence {
    /// Smallest `C` consistent with both sides over the ensemble.
    pub fn constant(&self) -> f64 {
        self.lower.max_ratio.max(self.upper.max_ratio)
    }
}

pub fn check_norm_equivalence(ensemble: &[SpectralField], ip: &IParams) -> Result<NormEquivalence> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut lower = BoundReport::empty("norm-equivalence-lower", 0);
    let mut upper = BoundReport::empty("norm-equivalence-upper", 0);
    let scale = ip.big_n.powf(-ip.s);
    for u in ensemble {
        let hs = sobolev_norm(u, ip.s);
        let iu = apply_i(u, ip).l2_norm();
        if hs == 0.0 || iu == 0.0 {
            lower.record(None);
            upper.record(None);
            continue;
        }
        lower.record(Some(hs / iu));
        upper.record(Some(iu / (scale * hs)));
    }
    Ok(NormEquivalence { lower, upper })
}
