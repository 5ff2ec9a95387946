//! Time integration on the periodic grid.
//!
//! The state lives on the 2/3-rule band `|k| ≤ ⌊M/3⌋`; initial data are
//! projected there before the first step so the discrete system is closed.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imethod::{apply_i, IParams};
use crate::spectral::{dealiased_square, phase, Grid, PhysParams, SpectralField};

/// `L²` growth factor treated as blow-up.
pub const BLOWUP_GROWTH: f64 = 1e6;

/// `-∂ₓ(u²)` with the dealiased product.
pub fn rhs_nonlinear(u: &SpectralField) -> SpectralField {
    let sq = dealiased_square(u);
    sq.apply_symbol(|xi| Complex64::new(0.0, -xi))
}

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Explicit integrating-factor RK4.
    #[default]
    Ifrk4,
    /// Two-stage Gauss–Legendre collocation in the interaction picture.
    /// Implicit, 4th order, and conserves `‖u‖_{L²}` to solver tolerance.
    IfGauss4,
}

/// Precomputed integrating factors for a fixed step.
struct Stepper {
    half: Vec<Complex64>,
    full: Vec<Complex64>,
    dt: f64,
    nonlinear: bool,
    scheme: Scheme,
    gauss: Option<GaussFactors>,
}

/// `S(c·dt)` for the offsets the Gauss stages need.
struct GaussFactors {
    c1: Vec<Complex64>,
    c2: Vec<Complex64>,
    c21: Vec<Complex64>,
    one_c1: Vec<Complex64>,
    one_c2: Vec<Complex64>,
}

const SQRT3_6: f64 = 0.288_675_134_594_812_9;
const GAUSS_MAX_SWEEPS: usize = 100;

impl Stepper {
    fn new(grid: &Grid, dt: f64, p: &PhysParams, nonlinear: bool, scheme: Scheme) -> Self {
        let factor = |frac: f64| {
            let mut f = vec![Complex64::new(0.0, 0.0); grid.modes()];
            for k in grid.indices() {
                f[grid.index(k)] = Complex64::from_polar(1.0, frac * dt * phase(grid.wavenumber(k), p));
            }
            f
        };
        let gauss = (scheme == Scheme::IfGauss4).then(|| GaussFactors {
            c1: factor(0.5 - SQRT3_6),
            c2: factor(0.5 + SQRT3_6),
            c21: factor(2.0 * SQRT3_6),
            one_c1: factor(0.5 + SQRT3_6),
            one_c2: factor(0.5 - SQRT3_6),
        });
        Stepper {
            half: factor(0.5),
            full: factor(1.0),
            dt,
            nonlinear,
            scheme,
            gauss,
        }
    }

    fn apply_conj(factor: &[Complex64], u: &SpectralField) -> SpectralField {
        let mut out = u.clone();
        for (c, f) in out.coeffs_mut().iter_mut().zip(factor) {
            *c *= f.conj();
        }
        out
    }

    fn step(&self, u: &SpectralField) -> SpectralField {
        match self.scheme {
            Scheme::Ifrk4 => self.step_rk4(u),
            Scheme::IfGauss4 => self.step_gauss(u),
        }
    }

    /// Stages `U_i = S(c_i dt)u + dt Σ_j a_ij S((c_i − c_j)dt) N(U_j)`,
    /// solved by fixed-point sweeps.
    fn step_gauss(&self, u: &SpectralField) -> SpectralField {
        let g = self.gauss.as_ref().expect("gauss factors");
        let e2u = Self::apply(&self.full, u);
        if !self.nonlinear {
            return e2u;
        }
        let (a11, a12, a21, a22) = (0.25, 0.25 - SQRT3_6, 0.25 + SQRT3_6, 0.25);
        let base1 = Self::apply(&g.c1, u);
        let base2 = Self::apply(&g.c2, u);
        let mut u1 = base1.clone();
        let mut u2 = base2.clone();
        let tol = 1e-15 * u.l2_norm().max(f64::MIN_POSITIVE);
        for _ in 0..GAUSS_MAX_SWEEPS {
            let n1 = rhs_nonlinear(&u1);
            let n2 = rhs_nonlinear(&u2);
            let next1 = base1
                .add_scaled(&n1, self.dt * a11)
                .add_scaled(&Self::apply_conj(&g.c21, &n2), self.dt * a12);
            let next2 = base2
                .add_scaled(&Self::apply(&g.c21, &n1), self.dt * a21)
                .add_scaled(&n2, self.dt * a22);
            let change = next1.add_scaled(&u1, -1.0).l2_norm().max(next2.add_scaled(&u2, -1.0).l2_norm());
            u1 = next1;
            u2 = next2;
            if !(change > tol) {
                break;
            }
        }
        let n1 = rhs_nonlinear(&u1);
        let n2 = rhs_nonlinear(&u2);
        e2u.add_scaled(&Self::apply(&g.one_c1, &n1), 0.5 * self.dt)
            .add_scaled(&Self::apply(&g.one_c2, &n2), 0.5 * self.dt)
    }

    fn apply(factor: &[Complex64], u: &SpectralField) -> SpectralField {
        let mut out = u.clone();
        for (c, f) in out.coeffs_mut().iter_mut().zip(factor) {
            *c *= f;
        }
        out
    }

    fn step_rk4(&self, u: &SpectralField) -> SpectralField {
        let eu = Self::apply(&self.half, u);
        let e2u = Self::apply(&self.full, u);
        if !self.nonlinear {
            return e2u;
        }
        let n = |v: &SpectralField| rhs_nonlinear(v).scale(self.dt);
        let a = n(u);
        let b = n(&Self::apply(&self.half, &u.add_scaled(&a, 0.5)));
        let c = n(&eu.add_scaled(&b, 0.5));
        let d = n(&e2u.add_scaled(&Self::apply(&self.half, &c), 1.0));
        let bc = Self::apply(&self.half, &b.add_scaled(&c, 1.0));
        e2u.add_scaled(&Self::apply(&self.full, &a), 1.0 / 6.0)
            .add_scaled(&bc, 2.0 / 6.0)
            .add_scaled(&d, 1.0 / 6.0)
    }
}

/// One integrating-factor RK4 step of the full equation.
pub fn step_ifrk4(u: &SpectralField, dt: f64, p: &PhysParams) -> Result<SpectralField> {
    step_ifrk4_with(u, dt, p, true)
}

/// As [`step_ifrk4`]; `nonlinear = false` gives the exact linear flow.
pub fn step_ifrk4_with(u: &SpectralField, dt: f64, p: &PhysParams, nonlinear: bool) -> Result<SpectralField> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let next = Stepper::new(u.grid(), dt, p, nonlinear, Scheme::Ifrk4).step(u);
    if !next.is_finite() {
        return Err(Error::BlowUp {
            time: dt,
            reason: "non-finite coefficient".into(),
        });
    }
    Ok(next)
}

/// `(t, ∫u, ‖u‖_{L²})` at one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservedRecord {
    pub t: f64,
    pub mean: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Steps between stored samples.
    pub sample_every: usize,
    pub nonlinear: bool,
    pub scheme: Scheme,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            sample_every: 1,
            nonlinear: true,
            scheme: Scheme::Ifrk4,
        }
    }
}

/// Uniformly sampled solution with its conservation log.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Grid,
    phys: PhysParams,
    ip: IParams,
    dt: f64,
    sample_spacing: f64,
    samples: Vec<(f64, SpectralField)>,
    conserved: Vec<ConservedRecord>,
    nonlinear: bool,
}

impl Trajectory {
    /// Assembles a trajectory from stored samples; times must be uniform.
    pub fn from_samples(
        phys: PhysParams,
        ip: IParams,
        dt: f64,
        samples: Vec<(f64, SpectralField)>,
        nonlinear: bool,
    ) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyEnsemble)?;
        let grid = *first.1.grid();
        for (_, f) in &samples {
            grid.same_as(f.grid())?;
        }
        let sample_spacing = if samples.len() > 1 {
            samples[1].0 - samples[0].0
        } else {
            dt
        };
        for w in samples.windows(2) {
            let h = w[1].0 - w[0].0;
            if !(h > 0.0) || (h - sample_spacing).abs() > 1e-9 * sample_spacing.abs().max(1.0) {
                return Err(Error::InvalidParameter("sample times must be uniform and increasing".into()));
            }
        }
        let conserved = samples
            .iter()
            .map(|(t, f)| ConservedRecord {
                t: *t,
                mean: f.mean_integral(),
                l2: f.l2_norm(),
            })
            .collect();
        Ok(Trajectory {
            grid,
            phys,
            ip,
            dt,
            sample_spacing,
            samples,
            conserved,
            nonlinear,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn phys(&self) -> &PhysParams {
        &self.phys
    }

    pub fn iparams(&self) -> &IParams {
        &self.ip
    }

    /// Integrator step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Whether the quadratic term was integrated.
    pub fn nonlinear(&self) -> bool {
        self.nonlinear
    }

    /// Time between consecutive samples.
    pub fn sample_spacing(&self) -> f64 {
        self.sample_spacing
    }

    pub fn samples(&self) -> &[(f64, SpectralField)] {
        &self.samples
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn conserved(&self) -> &[ConservedRecord] {
        &self.conserved
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> &SpectralField {
        &self.samples[self.samples.len() - 1].1
    }

    /// `max_t |∫u(t) − ∫u(0)|`.
    pub fn mean_drift(&self) -> f64 {
        let m0 = self.conserved[0].mean;
        self.conserved.iter().map(|r| (r.mean - m0).abs()).fold(0.0, f64::max)
    }

    /// `max_t |‖u(t)‖ − ‖u(0)‖| / ‖u(0)‖`, or the absolute drift when `u(0) = 0`.
    pub fn l2_drift(&self) -> f64 {
        let n0 = self.conserved[0].l2;
        let d = self.conserved.iter().map(|r| (r.l2 - n0).abs()).fold(0.0, f64::max);
        if n0 > 0.0 {
            d / n0
        } else {
            d
        }
    }
}

/// Solves on `[0, T]` with step `dt`, storing every step.
///
/// Stability is not enforced; IFRK4 treats the dispersion exactly and is
/// stable for roughly `dt · ξ_K · max|u| ≲ 1`.
pub fn solve(u0: &SpectralField, t_final: f64, dt: f64, p: &PhysParams, ip: &IParams) -> Result<Trajectory> {
    solve_with(u0, t_final, dt, p, ip, SolveOptions::default())
}

pub fn solve_with(
    u0: &SpectralField,
    t_final: f64,
    dt: f64,
    p: &PhysParams,
    ip: &IParams,
    opts: SolveOptions,
) -> Result<Trajectory> {
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::InvalidParameter(format!("final time must be positive, got {t_final}")));
    }
    if !(dt.is_finite() && dt > 0.0 && dt <= t_final) {
        return Err(Error::InvalidParameter(format!("dt must lie in (0, T], got {dt}")));
    }
    if opts.sample_every == 0 {
        return Err(Error::InvalidParameter("sample_every must be at least 1".into()));
    }
    let steps = (t_final / dt).round() as usize;
    let stepper = Stepper::new(u0.grid(), dt, p, opts.nonlinear, opts.scheme);
    let mut u = u0.truncate(u0.grid().dealias_cutoff());
    let limit = BLOWUP_GROWTH * u.l2_norm().max(f64::MIN_POSITIVE);
    let mut samples = vec![(0.0, u.clone())];
    for n in 1..=steps {
        u = stepper.step(&u);
        let t = n as f64 * dt;
        if !u.is_finite() {
            return Err(Error::BlowUp {
                time: t,
                reason: "non-finite coefficient".into(),
            });
        }
        let norm = u.l2_norm();
        if norm > limit {
            return Err(Error::BlowUp {
                time: t,
                reason: format!("L2 norm {norm:e} exceeds {BLOWUP_GROWTH:e} times its initial value"),
            });
        }
        if n % opts.sample_every == 0 {
            samples.push((t, u.clone()));
        }
    }
    Trajectory::from_samples(*p, *ip, dt, samples, opts.nonlinear)
}

/// Even cutoff: 1 on `|t| ≤ 1`, 0 on `|t| ≥ 2`, smooth in between.
pub fn psi(t: f64) -> f64 {
    fn f(x: f64) -> f64 {
        if x > 0.0 {
            (-1.0 / x).exp()
        } else {
            0.0
        }
    }
    let a = t.abs();
    if a <= 1.0 {
        1.0
    } else if a >= 2.0 {
        0.0
    } else {
        let up = f(2.0 - a);
        up / (up + f(a - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    /// Quadrature sub-intervals on `[0, δ]` (rounded up to even); `None`
    /// picks a count resolving the fastest resonant oscillation.
    pub nodes: Option<usize>,
    /// Stop once the residual falls below `tol · ‖Iu₀‖`.
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { nodes: None, tol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    /// Last iterate at `t = δ`.
    pub field: SpectralField,
    /// `sup_t ‖I(u^{(j)} − u^{(j−1)})(t)‖_{L²}` per iteration.
    pub residuals: Vec<f64>,
    /// Residuals decreased monotonically to tolerance within budget.
    pub contracted: bool,
}

impl PicardOutcome {
    /// Ratios of successive residuals.
    pub fn ratios(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

const MAX_PICARD_NODES: usize = 1 << 16;

/// Largest `|φ(ξ_a) + φ(ξ_b) − φ(ξ_{a+b})|` over the dealiased band: the
/// fastest oscillation of the interaction-picture integrand.
pub fn max_resonance(grid: &Grid, p: &PhysParams) -> f64 {
    let kc = grid.dealias_cutoff();
    let mut best: f64 = 0.0;
    for a in -kc..=kc {
        for b in (-kc - a).max(-kc)..=(kc - a).min(kc) {
            let w = |k: i64| phase(grid.wavenumber(k), p);
            best = best.max((w(a) + w(b) - w(a + b)).abs());
        }
    }
    best
}

/// Sub-intervals with `h · max|α₃| ≤ phase_step`.
fn picard_nodes(grid: &Grid, delta: f64, p: &PhysParams, phase_step: f64) -> usize {
    let n = (delta * max_resonance(grid, p) / phase_step).ceil() as usize;
    let n = n.clamp(16, MAX_PICARD_NODES);
    n + n % 2
}

/// Iterates the Duhamel map `u ↦ S(t)u₀ − ∫₀ᵗ S(t−s)∂ₓ(u²)(s) ds` on `[0, δ]`.
///
/// For `δ ≤ 1` both time cutoffs equal 1 on the integration range, so they
/// drop out. The zeroth iterate is 0, so the first is `S(t)u₀`.
pub fn picard_solve(
    u0: &SpectralField,
    delta: f64,
    iterations: usize,
    p: &PhysParams,
    ip: &IParams,
) -> Result<PicardOutcome> {
    picard_solve_with(u0, delta, iterations, p, ip, PicardOptions::default())
}

pub fn picard_solve_with(
    u0: &SpectralField,
    delta: f64,
    iterations: usize,
    p: &PhysParams,
    ip: &IParams,
    opts: PicardOptions,
) -> Result<PicardOutcome> {
    if !(delta.is_finite() && delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1], got {delta}")));
    }
    if iterations == 0 {
        return Err(Error::InvalidParameter("need at least one iteration".into()));
    }
    let grid = *u0.grid();
    let u0 = u0.truncate(grid.dealias_cutoff());
    let n = match opts.nodes {
        Some(n) => n.max(2) + n % 2,
        None => picard_nodes(&grid, delta, p, 0.1),
    };
    let h = delta / n as f64;
    let times: Vec<f64> = (0..=n).map(|j| j as f64 * h).collect();
    let free: Vec<SpectralField> = times.iter().map(|&t| crate::spectral::linear_propagator(&u0, t, p)).collect();
    let scale = apply_i(&u0, ip).l2_norm().max(f64::MIN_POSITIVE);

    let mut current: Vec<SpectralField> = vec![SpectralField::zeros(grid); n + 1];
    let mut residuals = Vec::new();
    let mut contracted = false;
    for it in 0..iterations {
        let next = if it == 0 {
            free.clone()
        } else {
            duhamel_iterate(&free, &current, &times, h, p)
        };
        let res = next
            .iter()
            .zip(&current)
            .map(|(a, b)| apply_i(&a.add_scaled(b, -1.0), ip).l2_norm())
            .fold(0.0, f64::max);
        current = next;
        residuals.push(res);
        if !res.is_finite() {
            break;
        }
        if res <= opts.tol * scale {
            contracted = true;
            break;
        }
        let k = residuals.len();
        if k >= 3 && residuals[k - 1] >= residuals[k - 2] {
            break;
        }
    }
    Ok(PicardOutcome {
        field: current.pop().expect("at least one node"),
        residuals,
        contracted,
    })
}

/// `S(t_j)u₀ − S(t_j) ∫₀^{t_j} S(−s) ∂ₓ(u²)(s) ds` at every node.
///
/// Cumulative Simpson on even nodes; odd nodes add the half-panel rule
/// `h/12 (5f₀ + 8f₁ − f₂)` to the preceding even node.
fn duhamel_iterate(
    free: &[SpectralField],
    current: &[SpectralField],
    times: &[f64],
    h: f64,
    p: &PhysParams,
) -> Vec<SpectralField> {
    use rayon::prelude::*;
    let g: Vec<SpectralField> = current
        .par_iter()
        .zip(times.par_iter())
        .map(|(u, &t)| crate::spectral::linear_propagator(&rhs_nonlinear(u), -t, p))
        .collect();
    let n = g.len() - 1;
    let zero = SpectralField::zeros(*free[0].grid());
    let mut cumulative = vec![zero.clone(); n + 1];
    for j in (2..=n).step_by(2) {
        let panel = g[j - 2].add_scaled(&g[j - 1], 4.0).add_scaled(&g[j], 1.0);
        cumulative[j] = cumulative[j - 2].add_scaled(&panel, h / 3.0);
    }
    for j in (1..n).step_by(2) {
        let half = g[j - 1].scale(5.0).add_scaled(&g[j], 8.0).add_scaled(&g[j + 1], -1.0);
        cumulative[j] = cumulative[j - 1].add_scaled(&half, h / 12.0);
    }
    cumulative
        .par_iter()
        .zip(free.par_iter())
        .zip(times.par_iter())
        .map(|((acc, f), &t)| f.add_scaled(&crate::spectral::linear_propagator(acc, t, p), 1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeRow {
    pub amplitude: f64,
    pub i_norm: f64,
    pub delta_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeScan {
    pub rows: Vec<LifetimeRow>,
    /// Least-squares slope of `log δ*` against `log ‖Iu₀‖`.
    pub slope: f64,
}

/// Picard budget used by the lifetime bisection.
pub const LIFETIME_ITERATIONS: usize = 60;
const LIFETIME_DELTA_MAX: f64 = 1.0;
const LIFETIME_BISECTIONS: usize = 8;

fn contracts(u0: &SpectralField, delta: f64, p: &PhysParams, ip: &IParams) -> Result<bool> {
    // the contraction verdict needs far less quadrature accuracy than the iterate
    let opts = PicardOptions {
        nodes: Some(picard_nodes(u0.grid(), delta, p, 0.5)),
        tol: 1e-10,
    };
    Ok(picard_solve_with(u0, delta, LIFETIME_ITERATIONS, p, ip, opts)?.contracted)
}

/// Largest `δ ≤ 1` (to bisection accuracy) at which Picard iteration
/// contracts for `λ u₀`, for each amplitude `λ`.
pub fn lifetime_scan(u0: &SpectralField, amplitudes: &[f64], p: &PhysParams, ip: &IParams) -> Result<LifetimeScan> {
    if amplitudes.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: amplitudes.len(),
        });
    }
    if amplitudes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::InvalidParameter("amplitudes must be positive".into()));
    }
    if u0.l2_norm() == 0.0 {
        return Err(Error::ZeroDenominator("initial datum is zero"));
    }
    let mut rows = Vec::with_capacity(amplitudes.len());
    for &amp in amplitudes {
        let u = u0.scale(amp);
        let i_norm = apply_i(&u.truncate(u.grid().dealias_cutoff()), ip).l2_norm();
        rows.push(LifetimeRow {
            amplitude: amp,
            i_norm,
            delta_star: delta_star(&u, p, ip)?,
        });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.i_norm.ln(), r.delta_star.ln())).collect();
    Ok(LifetimeScan {
        slope: least_squares_slope(&pts),
        rows,
    })
}

fn delta_star(u: &SpectralField, p: &PhysParams, ip: &IParams) -> Result<f64> {
    let mut hi = LIFETIME_DELTA_MAX;
    if contracts(u, hi, p, ip)? {
        return Ok(hi);
    }
    let mut lo = hi;
    loop {
        lo *= 0.5;
        if lo < 1e-12 {
            return Ok(0.0);
        }
        if contracts(u, lo, p, ip)? {
            break;
        }
        hi = lo;
    }
    // geometric bisection between a contracting and a failing δ
    for _ in 0..LIFETIME_BISECTIONS {
        let mid = (lo * hi).sqrt();
        if contracts(u, mid, p, ip)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{derivative, linear_propagator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phys() -> PhysParams {
        PhysParams::new(1.0, 1.0).unwrap()
    }

    fn ip() -> IParams {
        IParams::new(8.0, -0.5).unwrap()
    }

    fn smooth_field(grid: Grid, amp: f64, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SpectralField::zeros(grid);
        for k in 1..=grid.dealias_cutoff() {
            let a = amp * (1.0 + k as f64).powi(-2);
            f.set_mode(k, Complex64::from_polar(a, rng.gen_range(0.0..std::f64::consts::TAU)));
        }
        f
    }

    #[test]
    fn rhs_examples() {
        let grid = Grid::standard(16).unwrap();
        assert_eq!(rhs_nonlinear(&SpectralField::zeros(grid)), SpectralField::zeros(grid));

        let nodes = grid.nodes();
        let cosx: Vec<f64> = nodes.iter().map(|x| x.cos()).collect();
        let sin2x: Vec<f64> = nodes.iter().map(|x| (2.0 * x).sin()).collect();
        let u = SpectralField::from_physical(grid, &cosx).unwrap();
        let expect = SpectralField::from_physical(grid, &sin2x).unwrap();
        assert!(rhs_nonlinear(&u).max_abs_diff(&expect) < 1e-14);

        // brute-force convolution followed by the derivative symbol
        let u = smooth_field(grid, 1.0, 3);
        let kc = grid.dealias_cutoff();
        let g = 1.0 / grid.length().sqrt();
        let mut brute = SpectralField::zeros(grid);
        for k in 0..=kc {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in -kc..=kc {
                if (k - a).abs() <= kc {
                    acc += u.coeff(a) * u.coeff(k - a);
                }
            }
            brute.set_mode(k, acc * g);
        }
        let brute = derivative(&brute, 1).scale(-1.0);
        let fast = rhs_nonlinear(&u);
        assert!(fast.max_abs_diff(&brute) < 1e-12);
        assert_eq!(fast.coeff(0), Complex64::new(0.0, 0.0));
        assert!(fast.reality_defect() < 1e-15);
    }

    #[test]
    fn linear_step_is_exact() {
        let grid = Grid::standard(64).unwrap();
        let p = phys();
        let u = smooth_field(grid, 1.0, 5);
        let stepped = step_ifrk4_with(&u, 1e-3, &p, false).unwrap();
        assert!(stepped.max_abs_diff(&linear_propagator(&u, 1e-3, &p)) < 1e-14);
        assert_eq!(step_ifrk4(&SpectralField::zeros(grid), 0.01, &p).unwrap(), SpectralField::zeros(grid));
        assert!(step_ifrk4(&u, 0.0, &p).is_err());

        let single = SpectralField::from_modes(grid, &[(5, Complex64::new(1.0, 0.0))]).unwrap();
        let s = step_ifrk4_with(&single, 0.01, &p, false).unwrap();
        let w = phase(5.0, &p);
        assert!((s.coeff(5) - Complex64::from_polar(1.0, 0.01 * w)).norm() < 1e-14);
    }

    #[test]
    fn blowup_is_reported() {
        let grid = Grid::standard(32).unwrap();
        let mut u = SpectralField::zeros(grid);
        u.set_mode(1, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(step_ifrk4(&u, 0.01, &phys()), Err(Error::BlowUp { .. })));
        assert!(matches!(solve(&u, 0.1, 0.01, &phys(), &ip()), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn fourth_order_self_convergence() {
        let grid = Grid::standard(32).unwrap();
        let p = phys();
        let u0 = smooth_field(grid, 1.0, 11);
        for scheme in [Scheme::Ifrk4, Scheme::IfGauss4] {
            let opts = SolveOptions {
                scheme,
                ..SolveOptions::default()
            };
            let end = |dt: f64| solve_with(&u0, 0.5, dt, &p, &ip(), opts).unwrap().last().clone();
            let reference = end(0.01 / 16.0);
            let errs: Vec<f64> = [0.01, 0.005, 0.0025]
                .iter()
                .map(|&dt| end(dt).add_scaled(&reference, -1.0).l2_norm())
                .collect();
            for w in errs.windows(2) {
                let order = (w[0] / w[1]).log2();
                assert!(order > 3.7, "{scheme:?} errors {errs:?}");
            }
        }
    }

    #[test]
    fn conservation_and_trajectory_layout() {
        let grid = Grid::standard(64).unwrap();
        let p = phys();
        let mut u0 = smooth_field(grid, 1.0, 2);
        u0.set_mode(0, Complex64::new(0.4, 0.0));
        let traj = solve(&u0, 0.2, 1e-3, &p, &ip()).unwrap();
        assert_eq!(traj.len(), 201);
        assert!(traj.mean_drift() < 1e-12);
        assert!(traj.l2_drift() < 1e-6, "{}", traj.l2_drift());
        let opts = SolveOptions {
            scheme: Scheme::IfGauss4,
            ..SolveOptions::default()
        };
        let gauss = solve_with(&u0, 0.2, 1e-3, &p, &ip(), opts).unwrap();
        assert!(gauss.l2_drift() < 1e-12, "{}", gauss.l2_drift());
        assert!(gauss.mean_drift() < 1e-12);
        // both schemes carry ~5e-6 error on the top modes at this step
        assert!(gauss.last().max_abs_diff(traj.last()) < 2e-5);
        let t = traj.times();
        assert!(t.windows(2).all(|w| (w[1] - w[0] - 1e-3).abs() < 1e-12));
        assert!(traj.samples().iter().all(|(_, f)| f.reality_defect() < 1e-14));

        let zero = solve(&SpectralField::zeros(grid), 0.1, 0.01, &p, &ip()).unwrap();
        assert!(zero.samples().iter().all(|(_, f)| f.l2_norm() == 0.0));
    }

    #[test]
    fn small_amplitude_matches_linear_flow_quadratically() {
        let grid = Grid::standard(32).unwrap();
        let p = phys();
        let defect = |eps: f64| {
            let u0 = SpectralField::from_modes(grid, &[(3, Complex64::new(eps, 0.0))]).unwrap();
            let traj = solve(&u0, 1.0, 1e-3, &p, &ip()).unwrap();
            traj.last().add_scaled(&linear_propagator(&u0, 1.0, &p), -1.0).l2_norm()
        };
        let ratio = defect(1e-2) / defect(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn psi_profile() {
        assert_eq!(psi(0.0), 1.0);
        assert_eq!(psi(-1.0), 1.0);
        assert_eq!(psi(2.0), 0.0);
        assert_eq!(psi(1.5), 0.5);
        assert_eq!(psi(1.3), psi(-1.3));
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = psi(1.0 + i as f64 / 100.0);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn picard_examples() {
        let grid = Grid::standard(32).unwrap();
        let p = phys();
        let zero = picard_solve(&SpectralField::zeros(grid), 0.1, 10, &p, &ip()).unwrap();
        assert!(zero.contracted);
        assert_eq!(zero.residuals.len(), 1);
        assert_eq!(zero.field, SpectralField::zeros(grid));

        let u0 = smooth_field(grid, 0.3, 4);
        let first = picard_solve(&u0, 0.05, 1, &p, &ip()).unwrap();
        assert_eq!(first.field, linear_propagator(&u0, 0.05, &p));

        let out = picard_solve(&u0, 0.05, 60, &p, &ip()).unwrap();
        assert!(out.contracted, "{:?}", out.residuals);
        assert!(out.ratios().iter().all(|&r| r < 1.0));
        let rk = solve(&u0, 0.05, 0.05 / 200.0, &p, &ip()).unwrap();
        assert!(out.field.max_abs_diff(rk.last()) < 1e-6);
    }

    #[test]
    fn lifetime_scan_monotone() {
        let grid = Grid::standard(16).unwrap();
        let p = phys();
        let u0 = smooth_field(grid, 1.0, 8);
        let scan = lifetime_scan(&u0, &[8.0, 16.0, 32.0, 64.0], &p, &ip()).unwrap();
        assert!(scan.slope < 0.0, "{scan:?}");
        for w in scan.rows.windows(2) {
            assert!(w[1].delta_star <= w[0].delta_star, "{scan:?}");
        }
        assert!(lifetime_scan(&u0, &[1.0, 2.0], &p, &ip()).is_err());
    }
}
