//! Multilinear functionals `Λ_k` on the lattice hyperplanes and the modified
//! energies `E²_I, E³_I, E⁴_I`.
//!
//! On a box of length `L` the functional is the lattice sum
//!
//! ```text
//! Λ_k(m; u) = κ_k Σ_{k₁+⋯+k_k=0} m(ξ_{k₁},…,ξ_{k_k}) û_{k₁}⋯û_{k_k}
//! ```
//!
//! with `κ₂ = 1`, `κ₃ = −g`, `κ₄ = −4g²`, `κ₅ = −20g³` and `g = L^{-1/2}`
//! the product coupling of the unitary convention. With these weights the
//! derivative identities hold exactly for the dealiased flow, with the
//! multipliers `M₃, M₄, M₅` exactly as the hierarchy defines them.
//!
//! Every sum runs over tuples drawn from the support of `u`; the extra
//! indicator that the dealiased product imposes on merged frequencies is
//! carried by the lattice cutoff of `σ₃` and `σ₄`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imethod::{apply_i, m_multiplier, IParams};
use crate::multipliers::{Hierarchy, PAIRS4, PAIRS5};
use crate::solver::Trajectory;
use crate::spectral::{Grid, PhysParams, SpectralField};

/// Largest grid on which `Λ₅` is evaluated unless explicitly allowed; the
/// sum costs `O(M⁴)` multiplier evaluations.
pub const LAMBDA5_MAX_MODES: usize = 32;

/// Product coupling `g = L^{-1/2}`.
pub fn coupling(grid: &Grid) -> f64 {
    1.0 / grid.length().sqrt()
}

/// Weight `κ_k` of the lattice functional `Λ_k`.
pub fn kappa(k: usize, g: f64) -> Result<f64> {
    match k {
        2 => Ok(1.0),
        3 => Ok(-g),
        4 => Ok(-4.0 * g * g),
        5 => Ok(-20.0 * g * g * g),
        _ => Err(Error::Arity {
            got: k,
            expected: "2..=5",
        }),
    }
}

/// Calls `visit` on every zero-sum `k`-tuple in `[-s, s]^k` whose first
/// entry is `first`.
fn for_each_tuple<F: FnMut(&[i64])>(s: i64, k: usize, first: i64, visit: &mut F) {
    fn rec<F: FnMut(&[i64])>(s: i64, k: usize, idx: &mut Vec<i64>, sum: i64, visit: &mut F) {
        let left = (k - idx.len()) as i64;
        if left == 1 {
            let last = -sum;
            if last.abs() <= s {
                idx.push(last);
                visit(idx);
                idx.pop();
            }
            return;
        }
        // the remaining entries can cancel at most `(left - 1) s`
        let lo = (-s).max(-sum - (left - 1) * s);
        let hi = s.min(-sum + (left - 1) * s);
        for a in lo..=hi {
            idx.push(a);
            rec(s, k, idx, sum + a, visit);
            idx.pop();
        }
    }
    let mut idx = vec![first];
    rec(s, k, &mut idx, first, visit);
}

/// Complex lattice sum `κ_k Σ_{Γ_k} m ∏ û`; the imaginary part is rounding
/// residue when `m(−ξ) = conj(m(ξ))`.
pub fn lambda_k_complex<F>(mult: F, u: &SpectralField, k: usize) -> Result<Complex64>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let kap = kappa(k, coupling(u.grid()))?;
    let s = u.support();
    let grid = *u.grid();
    let rows: Vec<Complex64> = (-s..=s)
        .into_par_iter()
        .map(|first| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut xi = vec![0.0; k];
            for_each_tuple(s, k, first, &mut |idx| {
                let mut prod = Complex64::new(1.0, 0.0);
                for (x, &j) in xi.iter_mut().zip(idx) {
                    *x = grid.wavenumber(j);
                    prod *= u.coeff(j);
                }
                if prod != Complex64::new(0.0, 0.0) {
                    acc += mult(&xi) * prod;
                }
            });
            acc
        })
        .collect();
    Ok(kap * rows.into_iter().sum::<Complex64>())
}

/// Real part of [`lambda_k_complex`].
pub fn lambda_k<F>(mult: F, u: &SpectralField, k: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    Ok(lambda_k_complex(mult, u, k)?.re)
}

/// Sums a real functional over rows `first = 0..=kc`, using that the row at
/// `−first` is the conjugate of the row at `first`.
#[allow(clippy::redundant_closure)] // `&F` is Sync but not Send
fn conjugate_reduce<F>(kc: i64, row: F) -> f64
where
    F: Fn(i64) -> Complex64 + Sync,
{
    let rows: Vec<Complex64> = (0..=kc).into_par_iter().map(|a| row(a)).collect();
    rows[0].re + 2.0 * rows[1..].iter().map(|r| r.re).sum::<f64>()
}

/// Precomputed lattice tables for one `(grid, ν, μ, N, s)`.
///
/// `σ₃` is tabulated on `[-K, K]²` (third argument implied) and, when
/// requested, `σ₄` on `[-K, K]³`. `M₄` and `M₅` are assembled from these on
/// the fly through their merged-pair forms.
pub struct EnergyEvaluator {
    grid: Grid,
    hier: Hierarchy,
    kc: i64,
    width: usize,
    coupling: f64,
    xi: Vec<f64>,
    m3: Vec<f64>,
    sigma3: Vec<f64>,
    sigma4: Option<Vec<f64>>,
}

impl EnergyEvaluator {
    /// Tables sufficient for energies and identities up to `level`.
    pub fn new(grid: Grid, p: PhysParams, ip: IParams, level: u8) -> Result<Self> {
        if !(2..=4).contains(&level) {
            return Err(Error::InvalidParameter(format!("energy level must be 2, 3 or 4, got {level}")));
        }
        let hier = Hierarchy::new(p, ip).with_cutoff(grid.dealias_frequency());
        let kc = grid.dealias_cutoff();
        let width = (2 * kc + 1) as usize;
        let xi: Vec<f64> = (-kc..=kc).map(|k| grid.wavenumber(k)).collect();

        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (-kc..=kc)
            .into_par_iter()
            .map(|a| {
                let mut m3 = vec![0.0; width];
                let mut s3 = vec![0.0; width];
                for b in -kc..=kc {
                    let c = -a - b;
                    if c.abs() > kc {
                        continue;
                    }
                    let x = [grid.wavenumber(a), grid.wavenumber(b), grid.wavenumber(c)];
                    m3[(b + kc) as usize] = hier.m3_im(x);
                    s3[(b + kc) as usize] = hier.sigma3_val(x)?;
                }
                Ok((m3, s3))
            })
            .collect();
        let mut m3 = Vec::with_capacity(width * width);
        let mut sigma3 = Vec::with_capacity(width * width);
        for r in rows {
            let (a, b) = r?;
            m3.extend(a);
            sigma3.extend(b);
        }

        let sigma4 = if level >= 4 {
            let planes: Vec<Result<Vec<f64>>> = (-kc..=kc)
                .into_par_iter()
                .map(|a| {
                    let mut plane = vec![0.0; width * width];
                    for b in -kc..=kc {
                        for c in -kc..=kc {
                            let d = -a - b - c;
                            if d.abs() > kc {
                                continue;
                            }
                            let x = [grid.wavenumber(a), grid.wavenumber(b), grid.wavenumber(c), grid.wavenumber(d)];
                            plane[((b + kc) as usize) * width + (c + kc) as usize] = hier.sigma4_val(x)?.value;
                        }
                    }
                    Ok(plane)
                })
                .collect();
            let mut t = Vec::with_capacity(width * width * width);
            for p in planes {
                t.extend(p?);
            }
            Some(t)
        } else {
            None
        };

        Ok(EnergyEvaluator {
            grid,
            hier,
            kc,
            width,
            coupling: coupling(&grid),
            xi,
            m3,
            sigma3,
            sigma4,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hier
    }

    fn off(&self, k: i64) -> usize {
        (k + self.kc) as usize
    }

    fn wn(&self, k: i64) -> f64 {
        self.xi[self.off(k)]
    }

    fn s3(&self, a: i64, b: i64) -> f64 {
        self.sigma3[self.off(a) * self.width + self.off(b)]
    }

    fn s4(&self, a: i64, b: i64, c: i64) -> f64 {
        let t = self.sigma4.as_ref().expect("σ₄ table requested at level 4");
        t[(self.off(a) * self.width + self.off(b)) * self.width + self.off(c)]
    }

    fn sigma4_table(&self) -> Result<()> {
        if self.sigma4.is_none() {
            return Err(Error::InvalidParameter("evaluator was built without the level-4 tables".into()));
        }
        Ok(())
    }

    /// `M̂₄` on a lattice tuple from the six merged pairs.
    fn m4_hat(&self, k: [i64; 4]) -> f64 {
        let mut total = 0.0;
        for &(i, j, [a, b]) in PAIRS4.iter() {
            let s = self.s3(k[a], k[b]);
            if s != 0.0 {
                total += s * self.wn(k[i] + k[j]);
            }
        }
        -(3.0 / 4.0) / 6.0 * total
    }

    /// `M̂₅` on a lattice tuple from the ten merged pairs.
    fn m5_hat(&self, k: [i64; 5]) -> f64 {
        let mut total = 0.0;
        for &(i, j, [a, b, c]) in PAIRS5.iter() {
            let s = self.s4(k[a], k[b], k[c]);
            if s != 0.0 {
                total += s * self.wn(k[i] + k[j]);
            }
        }
        -(4.0 / 5.0) / 10.0 * total
    }

    fn band_coeffs(&self, u: &SpectralField) -> Result<Vec<Complex64>> {
        self.grid.same_as(u.grid())?;
        Ok((-self.kc..=self.kc).map(|k| u.coeff(k)).collect())
    }

    fn range3(&self, a: i64) -> std::ops::RangeInclusive<i64> {
        (-self.kc).max(-self.kc - a)..=self.kc.min(self.kc - a)
    }

    /// Row-wise sum over `Γ₃ ∩ [-K, K]³` of `f(a, b, c) û_a û_b û_c`.
    fn sum3<F>(&self, c: &[Complex64], f: F) -> f64
    where
        F: Fn(i64, i64, i64) -> Complex64 + Sync,
    {
        conjugate_reduce(self.kc, |a| {
            let ua = c[self.off(a)];
            let mut acc = Complex64::new(0.0, 0.0);
            if ua == Complex64::new(0.0, 0.0) {
                return acc;
            }
            for b in self.range3(a) {
                let d = -a - b;
                let w = f(a, b, d);
                if w != Complex64::new(0.0, 0.0) {
                    acc += w * c[self.off(b)] * c[self.off(d)];
                }
            }
            acc * ua
        })
    }

    /// Row-wise sum over `Γ₄ ∩ [-K, K]⁴`.
    fn sum4<F>(&self, c: &[Complex64], f: F) -> f64
    where
        F: Fn([i64; 4]) -> Complex64 + Sync,
    {
        let kc = self.kc;
        conjugate_reduce(kc, |a| {
            let ua = c[self.off(a)];
            let mut acc = Complex64::new(0.0, 0.0);
            if ua == Complex64::new(0.0, 0.0) {
                return acc;
            }
            for b in -kc..=kc {
                let ub = c[self.off(b)];
                if ub == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let mut inner = Complex64::new(0.0, 0.0);
                for cc in self.range3(a + b) {
                    let d = -a - b - cc;
                    let w = f([a, b, cc, d]);
                    if w != Complex64::new(0.0, 0.0) {
                        inner += w * c[self.off(cc)] * c[self.off(d)];
                    }
                }
                acc += inner * ub;
            }
            acc * ua
        })
    }

    /// Row-wise sum over `Γ₅ ∩ [-K, K]⁵`.
    fn sum5<F>(&self, c: &[Complex64], f: F) -> f64
    where
        F: Fn([i64; 5]) -> Complex64 + Sync,
    {
        let kc = self.kc;
        conjugate_reduce(kc, |a| {
            let ua = c[self.off(a)];
            let mut acc = Complex64::new(0.0, 0.0);
            if ua == Complex64::new(0.0, 0.0) {
                return acc;
            }
            for b in -kc..=kc {
                for cc in -kc..=kc {
                    let head = a + b + cc;
                    if head.abs() > 2 * kc {
                        continue;
                    }
                    let ubc = c[self.off(b)] * c[self.off(cc)];
                    if ubc == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let mut inner = Complex64::new(0.0, 0.0);
                    for d in self.range3(head) {
                        let e = -head - d;
                        let w = f([a, b, cc, d, e]);
                        if w != Complex64::new(0.0, 0.0) {
                            inner += w * c[self.off(d)] * c[self.off(e)];
                        }
                    }
                    acc += inner * ubc;
                }
            }
            acc * ua
        })
    }

    /// `E²_I = ‖Iu‖²_{L²}`.
    pub fn e2(&self, u: &SpectralField) -> Result<f64> {
        self.grid.same_as(u.grid())?;
        let ip = self.hier.iparams();
        Ok(self
            .grid
            .indices()
            .map(|k| {
                let m = m_multiplier(self.grid.wavenumber(k), ip);
                m * m * u.coeff(k).norm_sqr()
            })
            .sum())
    }

    /// `Λ₃(σ₃)`.
    pub fn lambda3_sigma3(&self, u: &SpectralField) -> Result<f64> {
        let c = self.band_coeffs(u)?;
        let k3 = kappa(3, self.coupling)?;
        Ok(k3 * self.sum3(&c, |a, b, _| Complex64::new(self.s3(a, b), 0.0)))
    }

    /// `Λ₄(σ₄)`; needs level-4 tables.
    pub fn lambda4_sigma4(&self, u: &SpectralField) -> Result<f64> {
        self.sigma4_table()?;
        let c = self.band_coeffs(u)?;
        let k4 = kappa(4, self.coupling)?;
        Ok(k4 * self.sum4(&c, |k| Complex64::new(self.s4(k[0], k[1], k[2]), 0.0)))
    }

    pub fn e3(&self, u: &SpectralField) -> Result<f64> {
        Ok(self.e2(u)? + self.lambda3_sigma3(u)?)
    }

    pub fn e4(&self, u: &SpectralField) -> Result<f64> {
        Ok(self.e3(u)? + self.lambda4_sigma4(u)?)
    }

    /// `Λ₃(M₃)`, the right side of `dE²/dt`.
    pub fn lambda3_m3(&self, u: &SpectralField) -> Result<f64> {
        let c = self.band_coeffs(u)?;
        let k3 = kappa(3, self.coupling)?;
        Ok(k3 * self.sum3(&c, |a, b, _| Complex64::new(0.0, self.m3[self.off(a) * self.width + self.off(b)])))
    }

    /// `(Λ₄(M₄), Λ₄(M̄₄))`.
    pub fn lambda4_m4(&self, u: &SpectralField) -> Result<(f64, f64)> {
        let c = self.band_coeffs(u)?;
        let k4 = kappa(4, self.coupling)?;
        let n = self.hier.iparams().big_n();
        let full = self.sum4(&c, |k| Complex64::new(0.0, self.m4_hat(k)));
        let bar = self.sum4(&c, |k| {
            if k.iter().all(|&j| self.wn(j).abs() >= n) {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, self.m4_hat(k))
            }
        });
        Ok((k4 * full, k4 * bar))
    }

    /// `Λ₅(M₅)`; needs level-4 tables.
    pub fn lambda5_m5(&self, u: &SpectralField) -> Result<f64> {
        self.sigma4_table()?;
        let c = self.band_coeffs(u)?;
        let k5 = kappa(5, self.coupling)?;
        Ok(k5 * self.sum5(&c, |k| Complex64::new(0.0, self.m5_hat(k))))
    }
}

/// `E²_I(u) = ‖Iu‖²_{L²}`.
pub fn e2(u: &SpectralField, ip: &IParams) -> f64 {
    apply_i(u, ip).l2_norm().powi(2)
}

/// `E³_I(u) = E²_I(u) + Λ₃(σ₃)`.
pub fn e3(u: &SpectralField, p: &PhysParams, ip: &IParams) -> Result<f64> {
    EnergyEvaluator::new(*u.grid(), *p, *ip, 3)?.e3(u)
}

/// `E⁴_I(u) = E³_I(u) + Λ₄(σ₄)`.
pub fn e4(u: &SpectralField, p: &PhysParams, ip: &IParams) -> Result<f64> {
    EnergyEvaluator::new(*u.grid(), *p, *ip, 4)?.e4(u)
}

/// One sample of an [`EnergyReport`]; `None` where the level does not call
/// for the quantity or the stencil does not reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub t: f64,
    #[serde(rename = "E2")]
    pub e2: f64,
    #[serde(rename = "E3")]
    pub e3: Option<f64>,
    #[serde(rename = "E4")]
    pub e4: Option<f64>,
    #[serde(rename = "lambda3_M3")]
    pub lambda3_m3: f64,
    #[serde(rename = "lambda4_M4")]
    pub lambda4_m4: Option<f64>,
    #[serde(rename = "lambda4_M4bar")]
    pub lambda4_m4bar: Option<f64>,
    #[serde(rename = "lambda5_M5")]
    pub lambda5_m5: Option<f64>,
    #[serde(rename = "fd_dE2")]
    pub fd_de2: Option<f64>,
    #[serde(rename = "fd_dE3")]
    pub fd_de3: Option<f64>,
    #[serde(rename = "fd_dE4")]
    pub fd_de4: Option<f64>,
    pub rel_err2: Option<f64>,
    pub rel_err3: Option<f64>,
    pub rel_err4: Option<f64>,
}

/// Finite-difference check of `dE^ℓ/dt` against its multilinear form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub level: u8,
    pub rows: Vec<EnergyRow>,
    /// Worst interior `|fd − Λ| / max|Λ|` for levels 2, 3, 4.
    pub rel_err: [Option<f64>; 3],
}

impl EnergyReport {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    /// Residual of the identity at `level`.
    pub fn error_at(&self, level: u8) -> Option<f64> {
        match level {
            2..=4 => self.rel_err[(level - 2) as usize],
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyOptions {
    /// Evaluate `Λ₅` above [`LAMBDA5_MAX_MODES`].
    pub allow_large_lambda5: bool,
}

/// 5-point central difference, 4th order.
fn central_difference(f: &[f64], h: f64, i: usize) -> f64 {
    (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h)
}

pub fn check_energy_derivative(traj: &Trajectory, level: u8, p: &PhysParams, ip: &IParams) -> Result<EnergyReport> {
    check_energy_derivative_with(traj, level, p, ip, EnergyOptions::default())
}

/// Compares `dE²/dt` with `Λ₃(M₃)`, `dE³/dt` with `Λ₄(M₄)` and `dE⁴/dt`
/// with `Λ₄(M̄₄) + Λ₅(M₅)` at every interior sample, for all identities up
/// to `level`.
///
/// On a trajectory integrated without the quadratic term the right sides
/// are taken as 0 (the source is absent); only level 2 is meaningful there.
pub fn check_energy_derivative_with(
    traj: &Trajectory,
    level: u8,
    p: &PhysParams,
    ip: &IParams,
    opts: EnergyOptions,
) -> Result<EnergyReport> {
    if !(2..=4).contains(&level) {
        return Err(Error::InvalidParameter(format!("energy level must be 2, 3 or 4, got {level}")));
    }
    if traj.len() < 5 {
        return Err(Error::TooFewSamples {
            needed: 5,
            got: traj.len(),
        });
    }
    if level >= 3 && !traj.nonlinear() {
        return Err(Error::InvalidParameter(
            "identities above level 2 need a trajectory of the full equation".into(),
        ));
    }
    if level == 4 && traj.grid().modes() > LAMBDA5_MAX_MODES && !opts.allow_large_lambda5 {
        return Err(Error::InvalidParameter(format!(
            "level 4 sums O(M^4) quintic terms; M = {} exceeds {LAMBDA5_MAX_MODES} (set allow_large_lambda5 to override)",
            traj.grid().modes()
        )));
    }
    let ev = EnergyEvaluator::new(*traj.grid(), *p, *ip, level)?;
    let source = traj.nonlinear();

    struct Sample {
        e: [f64; 3],
        rhs: [f64; 3],
        m4: f64,
        m4bar: f64,
        m5: f64,
    }
    let samples: Vec<Result<Sample>> = traj
        .samples()
        .par_iter()
        .map(|(_, u)| {
            let mut s = Sample {
                e: [ev.e2(u)?, 0.0, 0.0],
                rhs: [0.0; 3],
                m4: 0.0,
                m4bar: 0.0,
                m5: 0.0,
            };
            if source {
                s.rhs[0] = ev.lambda3_m3(u)?;
            }
            if level >= 3 {
                s.e[1] = s.e[0] + ev.lambda3_sigma3(u)?;
                let (full, bar) = ev.lambda4_m4(u)?;
                s.m4 = full;
                s.m4bar = bar;
                s.rhs[1] = full;
            }
            if level >= 4 {
                s.e[2] = s.e[1] + ev.lambda4_sigma4(u)?;
                s.m5 = ev.lambda5_m5(u)?;
                s.rhs[2] = s.m4bar + s.m5;
            }
            Ok(s)
        })
        .collect();
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;

    let h = traj.sample_spacing();
    let n = samples.len();
    let interior = 2..n.saturating_sub(2);
    let mut fd = vec![[None; 3]; n];
    let mut rel = vec![[None; 3]; n];
    let mut worst = [None; 3];
    for lvl in 0..(level - 1) as usize {
        let series: Vec<f64> = samples.iter().map(|s| s.e[lvl]).collect();
        let scale = interior.clone().map(|i| samples[i].rhs[lvl].abs()).fold(0.0, f64::max);
        // absolute error when the right side vanishes identically
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut w: f64 = 0.0;
        for i in interior.clone() {
            let d = central_difference(&series, h, i);
            let r = (d - samples[i].rhs[lvl]).abs() / scale;
            fd[i][lvl] = Some(d);
            rel[i][lvl] = Some(r);
            w = w.max(r);
        }
        worst[lvl] = Some(w);
    }

    let rows = traj
        .samples()
        .iter()
        .zip(&samples)
        .enumerate()
        .map(|(i, ((t, _), s))| EnergyRow {
            t: *t,
            e2: s.e[0],
            e3: (level >= 3).then_some(s.e[1]),
            e4: (level >= 4).then_some(s.e[2]),
            lambda3_m3: s.rhs[0],
            lambda4_m4: (level >= 3).then_some(s.m4),
            lambda4_m4bar: (level >= 4).then_some(s.m4bar),
            lambda5_m5: (level >= 4).then_some(s.m5),
            fd_de2: fd[i][0],
            fd_de3: fd[i][1],
            fd_de4: fd[i][2],
            rel_err2: rel[i][0],
            rel_err3: rel[i][1],
            rel_err4: rel[i][2],
        })
        .collect();
    Ok(EnergyReport {
        level,
        rows,
        rel_err: worst,
    })
}

/// `(|E²_I − E⁴_I|, N^{-3/2}‖Iu‖³ + N^{-3}‖Iu‖⁴)`.
pub fn compare_e2_e4(u: &SpectralField, p: &PhysParams, ip: &IParams) -> Result<(f64, f64)> {
    compare_with(&EnergyEvaluator::new(*u.grid(), *p, *ip, 4)?, u)
}

/// As [`compare_e2_e4`] with prebuilt tables.
pub fn compare_with(ev: &EnergyEvaluator, u: &SpectralField) -> Result<(f64, f64)> {
    let ip = ev.hierarchy().iparams();
    let n = ip.big_n();
    let iu = apply_i(u, ip).l2_norm();
    let gap = (ev.e2(u)? - ev.e4(u)?).abs();
    Ok((gap, n.powf(-1.5) * iu.powi(3) + n.powi(-3) * iu.powi(4)))
}
