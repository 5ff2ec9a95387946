//! Space-time `X_{s,b}` norms of ψ-windowed signals and empirical ratio scans
//! for the bilinear estimates.
//!
//! A windowed signal is a finite sum of modulated bumps per spatial mode,
//! `F(ξ, t) = Σ c W(t/δ) e^{iωt}` with `W ∈ {ψ, ψ², ψ³}` supported on
//! `[-2, 2]`. On the time circle of length `4δ` its coefficients at
//! `τ_j = jπ/(2δ)` are `(4δ)^{-1/2} Σ c δ Ŵ(δ(τ_j − ω))`, evaluated from a
//! tabulated transform of `W`. Plancherel holds exactly on this lattice.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imethod::{apply_i, japanese, m_multiplier, IParams};
use crate::multipliers::{sample_rng, BilinearForm};
use crate::solver::psi;
use crate::spectral::{phase, phase_derivative, Grid, PhysParams, SpectralField};

/// `ε` in `b = 1/2 + ε` and in the `0+` exponents.
pub const DEFAULT_EPS: f64 = 0.01;

/// `|Ŵ(σ)|` is below 1e-8 past this point for all three windows.
const SIGMA_CUTOFF: f64 = 200.0;
const TABLE_STEP_LOG2: u32 = 21;
const TABLE_DT: f64 = 1.0 / 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    Psi,
    PsiSquared,
    PsiCubed,
}

impl Window {
    fn profile(self, t: f64) -> f64 {
        let w = psi(t);
        match self {
            Window::Psi => w,
            Window::PsiSquared => w * w,
            Window::PsiCubed => w * w * w,
        }
    }

    fn table(self) -> &'static WindowTable {
        static TABLES: [OnceLock<WindowTable>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
        let slot = match self {
            Window::Psi => 0,
            Window::PsiSquared => 1,
            Window::PsiCubed => 2,
        };
        TABLES[slot].get_or_init(|| WindowTable::build(self))
    }

    /// `Ŵ(σ) = ∫ W(s) e^{-iσs} ds` (real, even).
    pub fn transform(self, sigma: f64) -> f64 {
        self.table().eval(sigma)
    }
}

struct WindowTable {
    step: f64,
    values: Vec<f64>,
}

impl WindowTable {
    fn build(w: Window) -> Self {
        let n = 1usize << TABLE_STEP_LOG2;
        let half = (2.0 / TABLE_DT).round() as usize;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..=half {
            let v = w.profile(i as f64 * TABLE_DT);
            buf[i] = Complex64::new(v, 0.0);
            if i > 0 {
                buf[n - i] = Complex64::new(v, 0.0);
            }
        }
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let step = 2.0 * std::f64::consts::PI / (n as f64 * TABLE_DT);
        let len = (SIGMA_CUTOFF / step).ceil() as usize + 8;
        let values = buf[..len].iter().map(|c| c.re * TABLE_DT).collect();
        WindowTable { step, values }
    }

    /// 8-point Lagrange interpolation; the table is extended evenly below 0.
    fn eval(&self, sigma: f64) -> f64 {
        let a = sigma.abs();
        if a >= SIGMA_CUTOFF {
            return 0.0;
        }
        let x = a / self.step;
        let base = x.floor() as i64 - 3;
        let mut left = [1.0; 8];
        let mut right = [1.0; 8];
        for m in 1..8 {
            left[m] = left[m - 1] * (x - (base + m as i64 - 1) as f64);
        }
        for m in (0..7).rev() {
            right[m] = right[m + 1] * (x - (base + m as i64 + 1) as f64);
        }
        // Π_{n≠m} (m − n) for nodes 0..8
        const DENOM: [f64; 8] = [-5040.0, 720.0, -240.0, 144.0, -144.0, 240.0, -720.0, 5040.0];
        (0..8)
            .map(|m| {
                let j = (base + m as i64).unsigned_abs() as usize;
                self.values[j] * left[m] * right[m] / DENOM[m]
            })
            .sum()
    }
}

/// One modulated window `c W(t/δ) e^{iωt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub omega: f64,
    pub coeff: Complex64,
}

/// Windowed space-time signal; per spatial mode `k` a list of bumps sharing
/// the window `W(t/δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Grid,
    delta: f64,
    window: Window,
    modes: Vec<(i64, Vec<Bump>)>,
}

impl SpaceTimeField {
    pub fn new(grid: Grid, delta: f64, window: Window, modes: Vec<(i64, Vec<Bump>)>) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidParameter(format!("window scale must be positive, got {delta}")));
        }
        let mut merged: BTreeMap<i64, Vec<Bump>> = BTreeMap::new();
        for (k, bumps) in modes {
            merged.entry(k).or_default().extend(bumps);
        }
        let modes = merged
            .into_iter()
            .filter_map(|(k, bumps)| {
                let b = compact(bumps);
                (!b.is_empty()).then_some((k, b))
            })
            .collect();
        Ok(SpaceTimeField { grid, delta, window, modes })
    }

    pub fn zeros(grid: Grid, delta: f64) -> Result<Self> {
        SpaceTimeField::new(grid, delta, Window::Psi, Vec::new())
    }

    /// `ψ(t/δ) S(t)u₀`.
    pub fn free_evolution(u0: &SpectralField, delta: f64, p: &PhysParams) -> Result<Self> {
        let grid = *u0.grid();
        let modes = grid
            .indices()
            .filter(|&k| u0.coeff(k) != Complex64::new(0.0, 0.0))
            .map(|k| {
                let bump = Bump {
                    omega: phase(grid.wavenumber(k), p),
                    coeff: u0.coeff(k),
                };
                (k, vec![bump])
            })
            .collect();
        SpaceTimeField::new(grid, delta, Window::Psi, modes)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn modes(&self) -> &[(i64, Vec<Bump>)] {
        &self.modes
    }

    pub fn is_zero(&self) -> bool {
        self.modes.is_empty()
    }

    /// Length `4δ` of the time circle.
    pub fn period(&self) -> f64 {
        4.0 * self.delta
    }

    /// Spacing of the `τ` lattice.
    pub fn tau_step(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.period()
    }

    /// `F(ξ_k, t)`.
    pub fn sample(&self, k: i64, t: f64) -> Complex64 {
        let w = self.window.profile(t / self.delta);
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        self.bumps(k)
            .iter()
            .map(|b| b.coeff * Complex64::from_polar(w, b.omega * t))
            .sum()
    }

    /// Lattice coefficient at `(ξ_k, τ_j)`.
    pub fn coefficient(&self, k: i64, j: i64) -> Complex64 {
        let tau = j as f64 * self.tau_step();
        let scale = self.delta / self.period().sqrt();
        self.bumps(k)
            .iter()
            .map(|b| b.coeff * (scale * self.window.transform(self.delta * (tau - b.omega))))
            .sum()
    }

    fn bumps(&self, k: i64) -> &[Bump] {
        match self.modes.binary_search_by_key(&k, |(m, _)| *m) {
            Ok(i) => &self.modes[i].1,
            Err(_) => &[],
        }
    }

    /// `Σ_j w(τ_j) |F̂(ξ_k, τ_j)|²` over the lattice points any bump reaches.
    fn weighted_mode<W: Fn(f64) -> f64>(&self, bumps: &[Bump], weight: W) -> f64 {
        let step = self.tau_step();
        let reach = SIGMA_CUTOFF / self.delta;
        let scale = self.delta / self.period().sqrt();
        let mut total = 0.0;
        let mut start = 0;
        // bumps are sorted by ω; split where the supports in τ cannot overlap
        while start < bumps.len() {
            let mut end = start + 1;
            while end < bumps.len() && bumps[end].omega - bumps[end - 1].omega < 2.0 * reach {
                end += 1;
            }
            let cluster = &bumps[start..end];
            let j0 = ((cluster[0].omega - reach) / step).ceil() as i64;
            let j1 = ((cluster[cluster.len() - 1].omega + reach) / step).floor() as i64;
            for j in j0..=j1 {
                let tau = j as f64 * step;
                let c: Complex64 = cluster
                    .iter()
                    .filter(|b| (tau - b.omega).abs() < reach)
                    .map(|b| b.coeff * self.window.transform(self.delta * (tau - b.omega)))
                    .sum();
                total += weight(tau) * c.norm_sqr();
            }
            start = end;
        }
        total * scale * scale
    }
}

/// Sorts by frequency, merges exactly equal frequencies and drops zeros.
fn compact(mut bumps: Vec<Bump>) -> Vec<Bump> {
    bumps.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    let mut out: Vec<Bump> = Vec::with_capacity(bumps.len());
    for b in bumps {
        match out.last_mut() {
            Some(last) if last.omega == b.omega => last.coeff += b.coeff,
            _ => out.push(b),
        }
    }
    out.retain(|b| b.coeff != Complex64::new(0.0, 0.0));
    out
}

/// `(Σ_ξ Σ_τ ⟨ξ⟩^{2s} ⟨τ − φ(ξ)⟩^{2b} |F̂(ξ, τ)|²)^{1/2}`.
pub fn xsb_norm(f: &SpaceTimeField, s: f64, b: f64, p: &PhysParams) -> f64 {
    let parts: Vec<f64> = f
        .modes
        .par_iter()
        .map(|(k, bumps)| {
            let xi = f.grid.wavenumber(*k);
            let ph = phase(xi, p);
            let spatial = japanese(xi).powf(2.0 * s);
            let inner = if b == 0.0 {
                f.weighted_mode(bumps, |_| 1.0)
            } else {
                f.weighted_mode(bumps, |tau| (1.0 + (tau - ph) * (tau - ph)).powf(b))
            };
            spatial * inner
        })
        .collect();
    parts.iter().sum::<f64>().sqrt()
}

/// Windowed bilinear interaction of two free evolutions; `kernel(ξ, ξ₁, ξ₂)`
/// multiplies `g û(ξ₁) v̂(ξ₂)` (or `conj v̂(ξ₂)` in the exchanged form).
fn interaction<K>(
    u: &SpectralField,
    v: &SpectralField,
    delta: f64,
    window: Window,
    p: &PhysParams,
    form: BilinearForm,
    kernel: K,
) -> Result<SpaceTimeField>
where
    K: Fn(f64, f64, f64) -> Complex64,
{
    u.grid().same_as(v.grid())?;
    let grid = *u.grid();
    let g = 1.0 / grid.length().sqrt();
    let support = |f: &SpectralField| -> Vec<(i64, Complex64)> {
        grid.indices()
            .map(|k| (k, f.coeff(k)))
            .filter(|(_, c)| *c != Complex64::new(0.0, 0.0))
            .collect()
    };
    let (su, sv) = (support(u), support(v));
    let mut modes: BTreeMap<i64, Vec<Bump>> = BTreeMap::new();
    for &(a, ua) in &su {
        let xa = grid.wavenumber(a);
        for &(b, vb) in &sv {
            let xb = grid.wavenumber(b);
            let (k, omega, vb) = match form {
                BilinearForm::Product => (a + b, phase(xa, p) + phase(xb, p), vb),
                BilinearForm::Exchanged => (a - b, phase(xa, p) - phase(xb, p), vb.conj()),
            };
            let coeff = kernel(grid.wavenumber(k), xa, xb) * ua * vb * g;
            modes.entry(k).or_default().push(Bump { omega, coeff });
        }
    }
    SpaceTimeField::new(grid, delta, window, modes.into_iter().collect())
}

/// `‖ψ(t/δ) ∂ₓI(ũṽ)‖_{X_{s,b−1}} / ((δ^{1/2−ε} + N^{−3/2+ε}) ‖Iũ‖_{X_{s,b}} ‖Iṽ‖_{X_{s,b}})`
/// with `ũ = ψ(t/δ)S(t)u₀`, `ṽ = ψ(t/δ)S(t)v₀` and `ε = b − 1/2`. `s` is
/// the spatial index of all three norms.
pub fn bilinear_ratio(
    u0: &SpectralField,
    v0: &SpectralField,
    s: f64,
    b: f64,
    delta: f64,
    p: &PhysParams,
    ip: &IParams,
) -> Result<f64> {
    if !(b > 0.5 && b < 1.0) {
        return Err(Error::InvalidParameter(format!("b must lie in (1/2, 1), got {b}")));
    }
    if !(delta.is_finite() && delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("δ must lie in (0, 1], got {delta}")));
    }
    let eps = b - 0.5;
    let iu = SpaceTimeField::free_evolution(&apply_i(u0, ip), delta, p)?;
    let iv = SpaceTimeField::free_evolution(&apply_i(v0, ip), delta, p)?;
    let den = (delta.powf(0.5 - eps) + ip.big_n().powf(-1.5 + eps)) * xsb_norm(&iu, s, b, p) * xsb_norm(&iv, s, b, p);
    if den == 0.0 {
        return Err(Error::ZeroDenominator("bilinear ratio: Iũ or Iṽ vanishes"));
    }
    let num_field = interaction(u0, v0, delta, Window::PsiCubed, p, BilinearForm::Product, |xi, _, _| {
        Complex64::new(0.0, xi * m_multiplier(xi, ip))
    })?;
    Ok(xsb_norm(&num_field, s, b - 1.0, p) / den)
}

/// `‖I^{s}(ũ, ṽ)‖_{L²} / (‖ũ‖_{X_{0,1/2+ε}} ‖ṽ‖_{X_{0,b̃+ε}})` with
/// `ũ = ψ(t)S(t)u₀`, `ṽ = ψ(t)S(t)v₀` and `ε` = [`DEFAULT_EPS`].
pub fn is_estimate_ratio(u0: &SpectralField, v0: &SpectralField, s_exp: f64, b_tilde: f64, p: &PhysParams) -> Result<f64> {
    is_estimate_ratio_with(u0, v0, s_exp, b_tilde, p, BilinearForm::Product, DEFAULT_EPS)
}

pub fn is_estimate_ratio_with(
    u0: &SpectralField,
    v0: &SpectralField,
    s_exp: f64,
    b_tilde: f64,
    p: &PhysParams,
    form: BilinearForm,
    eps: f64,
) -> Result<f64> {
    if !(0.0..=0.5).contains(&s_exp) {
        return Err(Error::InvalidParameter(format!("s must lie in [0, 1/2], got {s_exp}")));
    }
    if !(b_tilde >= 1.0 / 6.0 + 2.0 * s_exp / 3.0 - 1e-15) {
        return Err(Error::InvalidParameter(format!(
            "b̃ = {b_tilde} below 1/6 + 2s/3 = {}",
            1.0 / 6.0 + 2.0 * s_exp / 3.0
        )));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidParameter(format!("ε must lie in (0, 1/2), got {eps}")));
    }
    let u = SpaceTimeField::free_evolution(u0, 1.0, p)?;
    let v = SpaceTimeField::free_evolution(v0, 1.0, p)?;
    let den = xsb_norm(&u, 0.0, 0.5 + eps, p) * xsb_norm(&v, 0.0, b_tilde + eps, p);
    if den == 0.0 {
        return Err(Error::ZeroDenominator("I^s ratio: ũ or ṽ vanishes"));
    }
    let kernel = |_: f64, a: f64, b: f64| {
        let w = if s_exp == 0.0 {
            1.0
        } else {
            (phase_derivative(a, p) - phase_derivative(b, p)).abs().powf(s_exp)
        };
        Complex64::new(w, 0.0)
    };
    let num_field = interaction(u0, v0, 1.0, Window::PsiSquared, p, form, kernel)?;
    Ok(xsb_norm(&num_field, 0.0, 0.0, p) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    #[serde(rename = "N")]
    pub big_n: f64,
    pub delta: f64,
    pub ratio: f64,
}

/// [`bilinear_ratio`] over the `(N, δ)` grid, in row-major order.
pub fn bilinear_scan(
    u0: &SpectralField,
    v0: &SpectralField,
    s: f64,
    b: f64,
    ns: &[f64],
    deltas: &[f64],
    p: &PhysParams,
    i_exponent: f64,
) -> Result<Vec<ScanPoint>> {
    let grid: Vec<(f64, f64)> = ns.iter().flat_map(|&n| deltas.iter().map(move |&d| (n, d))).collect();
    grid.par_iter()
        .map(|&(n, delta)| {
            let ip = IParams::new(n, i_exponent)?;
            let ratio = bilinear_ratio(u0, v0, s, b, delta, p, &ip)?;
            Ok(ScanPoint { big_n: n, delta, ratio })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationPoint {
    pub separation: i64,
    pub ratio: f64,
}

/// [`is_estimate_ratio`] for random-phase packets on modes `1..=width` and
/// `D..D+width` as the separation `D` varies.
#[allow(clippy::too_many_arguments)]
pub fn is_separation_scan(
    grid: Grid,
    p: &PhysParams,
    s_exp: f64,
    b_tilde: f64,
    separations: &[i64],
    width: i64,
    seed: u64,
) -> Result<Vec<SeparationPoint>> {
    if width < 1 {
        return Err(Error::InvalidParameter(format!("packet width must be positive, got {width}")));
    }
    separations
        .par_iter()
        .map(|&d| {
            let u0 = random_packet(grid, 1, width, seed, 0, d as u64)?;
            let v0 = random_packet(grid, d, width, seed, 1, d as u64)?;
            let ratio = is_estimate_ratio(&u0, &v0, s_exp, b_tilde, p)?;
            Ok(SeparationPoint { separation: d, ratio })
        })
        .collect()
}

/// Unit-modulus random-phase coefficients on modes `lo..lo+width`.
pub fn random_packet(grid: Grid, lo: i64, width: i64, seed: u64, stream: u64, index: u64) -> Result<SpectralField> {
    let mut rng = sample_rng(seed, stream, index);
    let modes: Vec<(i64, Complex64)> = (lo..lo + width)
        .map(|k| (k, Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU))))
        .collect();
    SpectralField::from_modes(grid, &modes)
}

/// `max / median` of a scan; `None` when empty or the median is not positive.
pub fn max_over_median(ratios: &[f64]) -> Option<f64> {
    if ratios.is_empty() {
        return None;
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (median > 0.0).then(|| sorted[n - 1] / median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multipliers::is_bilinear;
    use crate::spectral::{derivative, linear_propagator};

    fn phys() -> PhysParams {
        PhysParams::new(1.0, 1.0).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Space-time L² by the periodic trapezoid rule on `[-2δ, 2δ]`.
    fn time_l2(f: &SpaceTimeField, samples: usize) -> f64 {
        let h = f.period() / samples as f64;
        let mut total = 0.0;
        for (k, _) in f.modes() {
            for n in 0..samples {
                let t = -2.0 * f.delta() + n as f64 * h;
                total += f.sample(*k, t).norm_sqr() * h;
            }
        }
        total.sqrt()
    }

    #[test]
    fn window_transform_values() {
        // Ŵ(0) = ∫ W
        let h = 1e-4;
        let integral = |w: Window| (-20_000..=20_000).map(|i| w.profile(i as f64 * h)).sum::<f64>() * h;
        for w in [Window::Psi, Window::PsiSquared, Window::PsiCubed] {
            assert!((w.transform(0.0) - integral(w)).abs() < 1e-10);
            assert_eq!(w.transform(SIGMA_CUTOFF + 1.0), 0.0);
        }
        assert!((Window::Psi.transform(0.0) - 3.0).abs() < 1e-10);
        // off-node value against a direct cosine quadrature
        let sigma = 7.3;
        let direct = (-20_000..=20_000)
            .map(|i| {
                let s = i as f64 * h;
                psi(s) * (sigma * s).cos()
            })
            .sum::<f64>()
            * h;
        assert!((Window::Psi.transform(sigma) - direct).abs() < 1e-10);
        assert_eq!(Window::Psi.transform(-sigma), Window::Psi.transform(sigma));
    }

    #[test]
    fn zero_field_has_zero_norm() {
        let grid = Grid::standard(16).unwrap();
        let f = SpaceTimeField::zeros(grid, 0.2).unwrap();
        assert!(f.is_zero());
        assert_eq!(xsb_norm(&f, 0.3, 0.7, &phys()), 0.0);
        assert!(SpaceTimeField::zeros(grid, 0.0).is_err());
    }

    #[test]
    fn plancherel_on_the_lattice() {
        let grid = Grid::standard(16).unwrap();
        let u = SpectralField::from_modes(grid, &[(0, c(0.4, 0.0)), (1, c(0.3, -0.2)), (3, c(-1.0, 0.5)), (5, c(0.1, 0.1))]).unwrap();
        for delta in [0.05, 0.3, 1.0] {
            let f = SpaceTimeField::free_evolution(&u, delta, &phys()).unwrap();
            let lattice = xsb_norm(&f, 0.0, 0.0, &phys());
            let direct = time_l2(&f, 1 << 14);
            assert!((lattice - direct).abs() < 1e-12 * direct, "δ={delta}: {lattice} vs {direct}");
        }
        let v = SpectralField::from_modes(grid, &[(2, c(0.2, 0.7)), (4, c(-0.5, 0.0))]).unwrap();
        let prod = interaction(&u, &v, 0.2, Window::PsiCubed, &phys(), BilinearForm::Product, |_, _, _| c(1.0, 0.0)).unwrap();
        let direct = time_l2(&prod, 1 << 14);
        assert!((xsb_norm(&prod, 0.0, 0.0, &phys()) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn lattice_coefficients_of_real_signals_are_hermitian() {
        let grid = Grid::standard(16).unwrap();
        let u = SpectralField::from_modes(grid, &[(2, c(0.3, -0.2)), (3, c(-1.0, 0.5))]).unwrap();
        let f = SpaceTimeField::free_evolution(&u, 0.1, &phys()).unwrap();
        let j0 = (phase(grid.wavenumber(3), &phys()) / f.tau_step()).round() as i64;
        for j in [j0 - 3, j0, j0 + 5] {
            let a = f.coefficient(3, j);
            let b = f.coefficient(-3, -j);
            assert!(a.norm() > 1e-3);
            assert!((a - b.conj()).norm() < 1e-15);
        }
    }

    #[test]
    fn monotone_in_b_and_s() {
        let grid = Grid::standard(32).unwrap();
        let p = phys();
        let u = SpectralField::from_modes(grid, &[(6, c(1.0, 0.0))]).unwrap();
        let on = SpaceTimeField::free_evolution(&u, 0.2, &p).unwrap();
        let xi = grid.wavenumber(6);
        let off_bump = Bump {
            omega: phase(xi, &p) + 60.0,
            coeff: c(1.0, 0.0),
        };
        let off = SpaceTimeField::new(grid, 0.2, Window::Psi, vec![(6, vec![off_bump]), (-6, vec![Bump { omega: -off_bump.omega, coeff: c(1.0, 0.0) }])]).unwrap();
        let bs = [0.0, 0.25, 0.5, 0.51, 0.75, 1.0];
        let norms = |f: &SpaceTimeField| bs.iter().map(|&b| xsb_norm(f, 0.0, b, &p)).collect::<Vec<_>>();
        let (n_on, n_off) = (norms(&on), norms(&off));
        for w in n_on.windows(2).chain(n_off.windows(2)) {
            assert!(w[1] > w[0]);
        }
        assert!((n_on[0] - n_off[0]).abs() < 1e-12);
        assert!(n_off[5] / n_off[0] > 5.0 * n_on[5] / n_on[0]);

        let wide = SpectralField::from_modes(grid, &[(1, c(0.5, 0.0)), (4, c(0.2, 0.3)), (9, c(-0.4, 0.1))]).unwrap();
        let f = SpaceTimeField::free_evolution(&wide, 0.1, &p).unwrap();
        let ss = [-0.75, -0.5, -0.25, -0.01];
        for w in ss.windows(2) {
            assert!(xsb_norm(&f, w[0], 0.5, &p) < xsb_norm(&f, w[1], 0.5, &p));
        }
    }

    #[test]
    fn interaction_matches_pointwise_product() {
        let grid = Grid::standard(32).unwrap();
        let p = phys();
        let ip = IParams::new(4.0, -0.5).unwrap();
        let u = SpectralField::from_modes(grid, &[(1, c(0.5, 0.2)), (3, c(-0.1, 0.4)), (5, c(0.2, 0.0))]).unwrap();
        let v = SpectralField::from_modes(grid, &[(2, c(0.3, -0.6)), (4, c(0.2, 0.1))]).unwrap();
        let delta = 0.3;
        let f = interaction(&u, &v, delta, Window::PsiCubed, &p, BilinearForm::Product, |xi, _, _| c(0.0, xi * m_multiplier(xi, &ip))).unwrap();
        for t in [-0.45, -0.1, 0.0, 0.27, 0.5] {
            let w = psi(t / delta);
            let ut = linear_propagator(&u, t, &p).scale(w);
            let vt = linear_propagator(&v, t, &p).scale(w);
            let direct = derivative(&apply_i(&is_bilinear(&ut, &vt, 0.0, &p, BilinearForm::Product).unwrap(), &ip), 1).scale(w);
            for k in -9..=9 {
                assert!((f.sample(k, t) - direct.coeff(k)).norm() < 1e-13, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn bilinear_ratio_examples() {
        let grid = Grid::standard(64).unwrap();
        let p = phys();
        let ip = IParams::new(16.0, -0.5).unwrap();
        let zero = SpectralField::zeros(grid);
        let u = random_packet(grid, 1, 6, 3, 0, 0).unwrap();
        assert!(matches!(bilinear_ratio(&zero, &u, 0.0, 0.51, 0.1, &p, &ip), Err(Error::ZeroDenominator(_))));
        assert!(bilinear_ratio(&u, &u, 0.0, 0.5, 0.1, &p, &ip).is_err());
        assert!(bilinear_ratio(&u, &u, 0.0, 0.51, 0.0, &p, &ip).is_err());

        let v = random_packet(grid, 2, 5, 3, 1, 0).unwrap();
        let r = bilinear_ratio(&u, &v, 0.0, 0.51, 0.1, &p, &ip).unwrap();
        assert!(r.is_finite() && r > 0.0);
        // below N the operator I is the identity, so N does not enter the norms
        let ip2 = IParams::new(32.0, -0.5).unwrap();
        let r2 = bilinear_ratio(&u, &v, 0.0, 0.51, 0.1, &p, &ip2).unwrap();
        let factor = (0.1f64.powf(0.49) + 16f64.powf(-1.49)) / (0.1f64.powf(0.49) + 32f64.powf(-1.49));
        assert!((r2 / r - factor).abs() < 1e-12);
    }

    #[test]
    fn bilinear_scan_is_bounded_relative_to_median() {
        let grid = Grid::standard(256).unwrap();
        let p = phys();
        let u = random_packet(grid, 1, 80, 7, 0, 0).unwrap().apply_symbol(|xi| c((1.0 + xi.abs()).powi(-1), 0.0));
        let v = random_packet(grid, 1, 80, 7, 1, 0).unwrap().apply_symbol(|xi| c((1.0 + xi.abs()).powi(-1), 0.0));
        let pts = bilinear_scan(&u, &v, 0.0, 0.5 + DEFAULT_EPS, &[16.0, 32.0, 64.0], &[0.1, 0.05], &p, -0.5).unwrap();
        assert_eq!(pts.len(), 6);
        let ratios: Vec<f64> = pts.iter().map(|q| q.ratio).collect();
        assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0));
        assert!(max_over_median(&ratios).unwrap() <= 10.0, "{ratios:?}");
    }

    #[test]
    fn is_ratio_examples() {
        let grid = Grid::standard(64).unwrap();
        let p = phys();
        let a = SpectralField::from_modes(grid, &[(3, c(1.0, 0.0))]).unwrap();
        assert!(is_estimate_ratio(&a, &a, 0.6, 1.0, &p).is_err());
        assert!(is_estimate_ratio(&a, &a, 0.5, 0.4, &p).is_err());
        assert!(matches!(is_estimate_ratio(&a, &SpectralField::zeros(grid), 0.0, 0.2, &p), Err(Error::ZeroDenominator(_))));

        let u = random_packet(grid, 1, 5, 1, 0, 0).unwrap();
        let v = random_packet(grid, 4, 5, 1, 1, 0).unwrap();
        let r0 = is_estimate_ratio(&u, &v, 0.0, 1.0 / 6.0, &p).unwrap();
        assert!(r0.is_finite() && r0 > 0.0);
        let rx = is_estimate_ratio_with(&u, &v, 0.5, 0.5, &p, BilinearForm::Exchanged, DEFAULT_EPS).unwrap();
        assert!(rx.is_finite() && rx > 0.0);
    }

    #[test]
    fn identical_single_modes_do_not_interact() {
        let grid = Grid::standard(64).unwrap();
        let p = phys();
        // ±5 against ±5: φ' is even, so every kernel value |φ'(ξ₁) − φ'(ξ₂)| vanishes
        let single = SpectralField::from_modes(grid, &[(5, c(1.0, 0.0))]).unwrap();
        assert_eq!(is_estimate_ratio(&single, &single, 0.5, 0.5, &p).unwrap(), 0.0);
        assert!(is_estimate_ratio(&single, &single, 0.0, 0.5, &p).unwrap() > 0.0);
    }

    #[test]
    fn separated_single_modes_follow_the_kernel() {
        // one mode per input: every interacting pair carries the same kernel
        // (φ' is even) and lands on its own output mode, so the ratio is
        // |φ'(ξ₁) − φ'(ξ₂)|^s times window constants
        let grid = Grid::standard(256).unwrap();
        let p = phys();
        let s = 0.5;
        let u = SpectralField::from_modes(grid, &[(2, c(1.0, 0.0))]).unwrap();
        let mut normalized = Vec::new();
        for d in [8, 16, 32, 64] {
            let v = SpectralField::from_modes(grid, &[(d, c(1.0, 0.0))]).unwrap();
            let r = is_estimate_ratio(&u, &v, s, 0.5, &p).unwrap();
            let kernel = (phase_derivative(grid.wavenumber(2), &p) - phase_derivative(grid.wavenumber(d), &p)).abs().powf(s);
            normalized.push(r / kernel);
        }
        // the X_{0,b} weights see where φ(ξ₂) falls between τ-lattice points,
        // which leaves a few percent of spread
        let lo = normalized.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = normalized.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 1.05, "{normalized:?}");
        let raw: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&d| {
                let v = SpectralField::from_modes(grid, &[(d, c(1.0, 0.0))]).unwrap();
                is_estimate_ratio(&u, &v, s, 0.5, &p).unwrap()
            })
            .collect();
        // nothing on the torus offsets the kernel, so the raw ratio grows
        assert!(raw.windows(2).all(|w| w[1] > 1.5 * w[0]), "{raw:?}");
    }

    #[test]
    fn max_over_median_examples() {
        assert_eq!(max_over_median(&[]), None);
        assert_eq!(max_over_median(&[0.0, 0.0, 1.0]), None);
        assert_eq!(max_over_median(&[1.0, 2.0, 8.0]), Some(4.0));
        assert_eq!(max_over_median(&[1.0, 3.0, 5.0, 6.0]), Some(1.5));
    }
}
