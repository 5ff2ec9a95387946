//! Periodic spectral representation of real fields and the Fourier symbols
//! of the linear Benjamin operator.
//!
//! Coefficients use the unitary convention on a box of length `L`:
//!
//! ```text
//! u(x) = L^{-1/2} Σ_k û_k e^{i ξ_k x},   ξ_k = 2πk / L,
//! ```
//!
//! so that `‖u‖²_{L²} = Σ |û_k|²` and the coefficients of `u²` are
//! `L^{-1/2} Σ_{a+b=k} û_a û_b`. The Nyquist mode is always zero, which keeps
//! the frequency set symmetric about the origin.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

fn inverse_plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Periodic spatial grid with `modes` collocation points on `[0, length)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    length: f64,
    modes: usize,
}

impl Grid {
    pub fn new(length: f64, modes: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("box length must be positive, got {length}")));
        }
        if modes < 8 || !modes.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "mode count must be even and at least 8, got {modes}"
            )));
        }
        Ok(Grid { length, modes })
    }

    /// `2π`-periodic grid.
    pub fn standard(modes: usize) -> Result<Self> {
        Grid::new(2.0 * PI, modes)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Largest resolved wavenumber index (the Nyquist index `M/2` is excluded).
    pub fn kmax(&self) -> i64 {
        (self.modes / 2) as i64 - 1
    }

    /// Largest wavenumber index kept by the 2/3 rule.
    pub fn dealias_cutoff(&self) -> i64 {
        (self.modes / 3) as i64
    }

    /// Physical frequency `ξ_k = 2πk/L`.
    pub fn wavenumber(&self, k: i64) -> f64 {
        2.0 * PI * k as f64 / self.length
    }

    /// Physical frequency of the dealiasing cutoff.
    pub fn dealias_frequency(&self) -> f64 {
        self.wavenumber(self.dealias_cutoff())
    }

    /// Position of wavenumber index `k` in FFT ordering.
    pub fn index(&self, k: i64) -> usize {
        k.rem_euclid(self.modes as i64) as usize
    }

    /// Wavenumber index stored at FFT position `i`; the Nyquist slot maps to `M/2`.
    pub fn wavenumber_index(&self, i: usize) -> i64 {
        let m = self.modes as i64;
        let i = i as i64;
        if i <= m / 2 {
            i
        } else {
            i - m
        }
    }

    /// Resolved wavenumber indices `-kmax..=kmax`.
    pub fn indices(&self) -> impl Iterator<Item = i64> {
        let kmax = self.kmax();
        -kmax..=kmax
    }

    pub fn nodes(&self) -> Vec<f64> {
        let dx = self.length / self.modes as f64;
        (0..self.modes).map(|j| j as f64 * dx).collect()
    }

    pub(crate) fn same_as(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Physical coefficients `(ν, μ)` of the Benjamin equation
/// `u_t + ν H(u_xx) + μ u_xxx + (u²)_x = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    nu: f64,
    mu: f64,
}

impl PhysParams {
    pub fn new(nu: f64, mu: f64) -> Result<Self> {
        if !nu.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidParameter("nu and mu must be finite".into()));
        }
        if mu == 0.0 {
            return Err(Error::InvalidParameter("mu must be nonzero".into()));
        }
        Ok(PhysParams { nu, mu })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Threshold `a = 2 max(1, |2ν/3μ|)` beyond which the cubic resonance
    /// function is bounded below by the product of the frequencies.
    pub fn a(&self) -> f64 {
        2.0 * f64::max(1.0, (2.0 * self.nu / (3.0 * self.mu)).abs())
    }
}

/// Dispersion relation `φ(ξ) = -νξ|ξ| + μξ³`.
pub fn phase(xi: f64, p: &PhysParams) -> f64 {
    -p.nu * xi * xi.abs() + p.mu * xi * xi * xi
}

/// `φ'(ξ) = -2ν|ξ| + 3μξ²`.
pub fn phase_derivative(xi: f64, p: &PhysParams) -> f64 {
    -2.0 * p.nu * xi.abs() + 3.0 * p.mu * xi * xi
}

/// Fourier coefficients of a real field on a [`Grid`], stored in FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: Grid) -> Self {
        SpectralField {
            grid,
            coeffs: vec![Complex64::new(0.0, 0.0); grid.modes],
        }
    }

    /// Builds a field from `(k, û_k)` pairs; the conjugate mode `-k` is filled
    /// in so the field is real. The mean mode keeps only its real part.
    pub fn from_modes(grid: Grid, modes: &[(i64, Complex64)]) -> Result<Self> {
        let mut f = SpectralField::zeros(grid);
        for &(k, c) in modes {
            if k.abs() > grid.kmax() {
                return Err(Error::InvalidParameter(format!(
                    "mode {k} outside resolved range ±{}",
                    grid.kmax()
                )));
            }
            f.set_mode(k, c);
        }
        Ok(f)
    }

    /// Coefficients from FFT-ordered data; the result is projected onto real
    /// fields with zero Nyquist mode.
    pub fn from_coeffs(grid: Grid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.modes {
            return Err(Error::GridMismatch(format!(
                "{} coefficients for {} modes",
                coeffs.len(),
                grid.modes
            )));
        }
        let mut f = SpectralField { grid, coeffs };
        f.symmetrize_reality();
        Ok(f)
    }

    /// Transform of real nodal values `u(x_j)`.
    pub fn from_physical(grid: Grid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.modes {
            return Err(Error::GridMismatch(format!(
                "{} nodal values for {} modes",
                values.len(),
                grid.modes
            )));
        }
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        forward_plan(grid.modes).process(&mut buf);
        let scale = grid.length.sqrt() / grid.modes as f64;
        for c in buf.iter_mut() {
            *c *= scale;
        }
        SpectralField::from_coeffs(grid, buf)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// FFT-ordered coefficient slice.
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeff(&self, k: i64) -> Complex64 {
        if k.abs() > self.grid.kmax() {
            return Complex64::new(0.0, 0.0);
        }
        self.coeffs[self.grid.index(k)]
    }

    /// Sets `û_k = c` and `û_{-k} = conj(c)`.
    pub fn set_mode(&mut self, k: i64, c: Complex64) {
        let i = self.grid.index(k);
        if k == 0 {
            self.coeffs[i] = Complex64::new(c.re, 0.0);
        } else {
            self.coeffs[i] = c;
            let j = self.grid.index(-k);
            self.coeffs[j] = c.conj();
        }
    }

    /// Nodal values `u(x_j)`.
    pub fn to_physical(&self) -> Vec<f64> {
        let mut buf = self.coeffs.clone();
        inverse_plan(self.grid.modes).process(&mut buf);
        let scale = 1.0 / self.grid.length.sqrt();
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// `(Σ |û_k|²)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `∫ u dx`.
    pub fn mean_integral(&self) -> f64 {
        self.coeffs[0].re * self.grid.length.sqrt()
    }

    /// Largest violation of `û_{-k} = conj(û_k)` and of the zero Nyquist mode.
    pub fn reality_defect(&self) -> f64 {
        let mut defect = self.coeffs[0].im.abs();
        defect = defect.max(self.coeffs[self.grid.modes / 2].norm());
        for k in 1..=self.grid.kmax() {
            let a = self.coeffs[self.grid.index(k)];
            let b = self.coeffs[self.grid.index(-k)];
            defect = defect.max((a - b.conj()).norm());
        }
        defect
    }

    pub fn max_abs_diff(&self, other: &SpectralField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Applies a diagonal Fourier multiplier `û_k ↦ symbol(ξ_k) û_k`.
    pub fn apply_symbol<F>(&self, symbol: F) -> SpectralField
    where
        F: Fn(f64) -> Complex64,
    {
        let mut out = SpectralField::zeros(self.grid);
        for k in self.grid.indices() {
            let i = self.grid.index(k);
            out.coeffs[i] = symbol(self.grid.wavenumber(k)) * self.coeffs[i];
        }
        out
    }

    /// Zeroes every mode with `|k| > kcut`.
    pub fn truncate(&self, kcut: i64) -> SpectralField {
        let mut out = self.clone();
        for k in self.grid.indices() {
            if k.abs() > kcut {
                out.coeffs[self.grid.index(k)] = Complex64::new(0.0, 0.0);
            }
        }
        out
    }

    /// Largest `|k|` with a nonzero coefficient.
    pub fn support(&self) -> i64 {
        self.grid
            .indices()
            .filter(|&k| self.coeff(k) != Complex64::new(0.0, 0.0))
            .map(i64::abs)
            .max()
            .unwrap_or(0)
    }

    pub fn scale(&self, factor: f64) -> SpectralField {
        SpectralField {
            grid: self.grid,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &SpectralField, factor: f64) -> SpectralField {
        debug_assert_eq!(self.grid, other.grid);
        SpectralField {
            grid: self.grid,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b * factor)
                .collect(),
        }
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    fn symmetrize_reality(&mut self) {
        let m = self.grid.modes;
        self.coeffs[m / 2] = Complex64::new(0.0, 0.0);
        self.coeffs[0].im = 0.0;
        for k in 1..=self.grid.kmax() {
            let i = self.grid.index(k);
            let j = self.grid.index(-k);
            let avg = 0.5 * (self.coeffs[i] + self.coeffs[j].conj());
            self.coeffs[i] = avg;
            self.coeffs[j] = avg.conj();
        }
    }
}

/// Hilbert transform, symbol `-i sgn(ξ)` with `sgn(0) = 0`.
pub fn hilbert(u: &SpectralField) -> SpectralField {
    u.apply_symbol(|xi| Complex64::new(0.0, -signum0(xi)))
}

/// `∂_x^order u`, symbol `(iξ)^order`.
pub fn derivative(u: &SpectralField, order: u32) -> SpectralField {
    u.apply_symbol(|xi| Complex64::new(0.0, xi).powu(order))
}

/// Free evolution `S(t)u`, symbol `e^{itφ(ξ)}`.
pub fn linear_propagator(u: &SpectralField, t: f64, p: &PhysParams) -> SpectralField {
    u.apply_symbol(|xi| Complex64::from_polar(1.0, t * phase(xi, p)))
}

/// Fourier coefficients of `u²` restricted to the 2/3-rule band.
///
/// Both the factor and the product are truncated to `|k| ≤ ⌊M/3⌋`; the
/// product is formed on a zero-padded grid, so the result is exactly the
/// truncated convolution `L^{-1/2} Σ_{a+b=k, |a|,|b|,|k| ≤ K} û_a û_b`.
pub fn dealiased_square(u: &SpectralField) -> SpectralField {
    let grid = *u.grid();
    let kcut = grid.dealias_cutoff();
    let padded = 2 * grid.modes();
    let mut buf = vec![Complex64::new(0.0, 0.0); padded];
    for k in -kcut..=kcut {
        buf[k.rem_euclid(padded as i64) as usize] = u.coeff(k);
    }
    inverse_plan(padded).process(&mut buf);
    let inv_sqrt_l = 1.0 / grid.length().sqrt();
    for c in buf.iter_mut() {
        let v = c.re * inv_sqrt_l;
        *c = Complex64::new(v * v, 0.0);
    }
    forward_plan(padded).process(&mut buf);
    let scale = grid.length().sqrt() / padded as f64;
    let mut out = SpectralField::zeros(grid);
    for k in 0..=kcut {
        let c = buf[k as usize] * scale;
        out.set_mode(k, c);
    }
    out
}

pub(crate) fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
