//! The multiplier hierarchy `α_k, M₃, σ₃, M₄, M̄₄/M̃₄, σ₄, M₅` on the
//! zero-sum hyperplanes `Γ_k`, the bilinear operator `I^s`, and empirical
//! scans of the pointwise multiplier bounds.
//!
//! Every `M_k` is purely imaginary for real `(ν, μ)`; internally they are
//! carried as their imaginary coefficient (`M_k = i·M̂_k`) and the resonance
//! function as `α̃_k = Σ φ(ξ_j)` with `α_k = i·α̃_k`, so `σ = -M/α = -M̂/α̃`
//! is a real quotient.
//!
//! A [`Hierarchy`] may carry a lattice cutoff: when set, `σ₃` and `σ₄`
//! vanish whenever one of their arguments exceeds it. This is the form the
//! truncated semi-discrete flow produces (every merged frequency must itself
//! be a retained mode) and the form used by the lattice functionals.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imethod::{m_multiplier, IParams};
use crate::report::BoundReport;
use crate::spectral::{phase, phase_derivative, PhysParams, SpectralField};

/// Point of `Γ_k = {ξ₁ + ⋯ + ξ_k = 0}`, `k ∈ {2,…,5}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqTuple {
    xi: Vec<f64>,
}

impl FreqTuple {
    pub fn new(xi: Vec<f64>) -> Result<Self> {
        if !(2..=5).contains(&xi.len()) {
            return Err(Error::Arity {
                got: xi.len(),
                expected: "2..=5",
            });
        }
        let sum: f64 = xi.iter().sum();
        let scale: f64 = xi.iter().map(|x| x.abs()).sum();
        if sum.abs() > 1e-12 * (1.0 + scale) {
            return Err(Error::NotZeroSum {
                values: xi,
                residual: sum,
            });
        }
        Ok(FreqTuple { xi })
    }

    /// Completes the tuple with `-(ξ₁ + ⋯ + ξ_{k-1})`.
    pub fn closing(mut head: Vec<f64>) -> Result<Self> {
        let last = -head.iter().sum::<f64>();
        head.push(last);
        FreqTuple::new(head)
    }

    pub fn arity(&self) -> usize {
        self.xi.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.xi
    }

    fn expect(&self, k: usize, expected: &'static str) -> Result<()> {
        if self.xi.len() == k {
            Ok(())
        } else {
            Err(Error::Arity {
                got: self.xi.len(),
                expected,
            })
        }
    }
}

/// Real resonance function `α̃_k = Σ φ(ξ_j)`; `α_k = i·α̃_k`.
pub fn alpha(t: &FreqTuple, p: &PhysParams) -> f64 {
    alpha_of(t.values(), p)
}

pub(crate) fn alpha_of(xi: &[f64], p: &PhysParams) -> f64 {
    xi.iter().map(|&x| phase(x, p)).sum()
}

/// `|α̃|` counts as zero below `1e-12 (1 + Σ|ξ_j|)³`.
pub fn resonance_guard(xi: &[f64]) -> f64 {
    let s: f64 = xi.iter().map(|x| x.abs()).sum();
    1e-12 * (1.0 + s).powi(3)
}

/// Relative size below which a multiplier assembled from cancelling terms is
/// treated as zero.
const MULTIPLIER_GUARD: f64 = 1e-8;

/// `|α̃₃(ξ₁,ξ₂,ξ₃+ξ₄) + α̃₃(ξ₃,ξ₄,ξ₁+ξ₂) − α̃₄(ξ₁,…,ξ₄)|`.
pub fn check_telescope(t: &FreqTuple, p: &PhysParams) -> Result<f64> {
    t.expect(4, "4")?;
    let x = t.values();
    let a = alpha_of(&[x[0], x[1], x[2] + x[3]], p);
    let b = alpha_of(&[x[2], x[3], x[0] + x[1]], p);
    Ok((a + b - alpha_of(x, p)).abs())
}

/// Average of `f` over all permutations of its arguments.
pub fn symmetrize<F>(f: F, xi: &[f64]) -> Complex64
where
    F: Fn(&[f64]) -> Complex64,
{
    let mut perm = xi.to_vec();
    let mut total = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for_each_permutation(&mut perm, &mut |q| {
        total += f(q);
        count += 1;
    });
    total / count as f64
}

/// Lifts `f` to its symmetrization.
pub fn symmetrized<F>(f: F) -> impl Fn(&[f64]) -> Complex64
where
    F: Fn(&[f64]) -> Complex64,
{
    move |xi: &[f64]| symmetrize(&f, xi)
}

/// Heap's algorithm.
pub(crate) fn for_each_permutation<T: Copy, F: FnMut(&[T])>(items: &mut [T], visit: &mut F) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Index pairs `{i, j}` of a 4-tuple, merged frequency placed last.
pub(crate) const PAIRS4: [(usize, usize, [usize; 2]); 6] = [
    (0, 1, [2, 3]),
    (0, 2, [1, 3]),
    (0, 3, [1, 2]),
    (1, 2, [0, 3]),
    (1, 3, [0, 2]),
    (2, 3, [0, 1]),
];

pub(crate) const PAIRS5: [(usize, usize, [usize; 3]); 10] = [
    (0, 1, [2, 3, 4]),
    (0, 2, [1, 3, 4]),
    (0, 3, [1, 2, 4]),
    (0, 4, [1, 2, 3]),
    (1, 2, [0, 3, 4]),
    (1, 3, [0, 2, 4]),
    (1, 4, [0, 2, 3]),
    (2, 3, [0, 1, 4]),
    (2, 4, [0, 1, 3]),
    (3, 4, [0, 1, 2]),
];

/// Outcome of the `σ₄` quotient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma4 {
    pub value: f64,
    /// The tuple sat on the resonant set and the quotient was replaced by 0.
    pub resonant: bool,
}

/// Multiplier hierarchy for fixed `(ν, μ)` and `I_{N,s}`.
#[derive(Debug, Clone, Copy)]
pub struct Hierarchy {
    phys: PhysParams,
    ip: IParams,
    cutoff: Option<f64>,
}

impl Hierarchy {
    pub fn new(phys: PhysParams, ip: IParams) -> Self {
        Hierarchy {
            phys,
            ip,
            cutoff: None,
        }
    }

    /// Restricts `σ₃`, `σ₄` to arguments with `|ξ| ≤ cutoff`.
    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    pub fn phys(&self) -> &PhysParams {
        &self.phys
    }

    pub fn iparams(&self) -> &IParams {
        &self.ip
    }

    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    fn m2xi(&self, x: f64) -> f64 {
        let m = m_multiplier(x, &self.ip);
        m * m * x
    }

    fn retained(&self, xi: &[f64]) -> bool {
        match self.cutoff {
            // relative slack absorbs rounding in merged sums
            Some(c) => xi.iter().all(|x| x.abs() <= c * (1.0 + 1e-9)),
            None => true,
        }
    }

    pub(crate) fn in_omega(&self, xi: &[f64]) -> bool {
        xi.iter().all(|x| x.abs() >= self.ip.big_n())
    }

    /// `M̂₃ = -(2/3)(m²(ξ₁)ξ₁ + m²(ξ₂)ξ₂ + m²(ξ₃)ξ₃)`, exactly 0 when every
    /// `|ξ_j| ≤ N`.
    pub(crate) fn m3_im(&self, x: [f64; 3]) -> f64 {
        let n = self.ip.big_n();
        if x.iter().all(|v| v.abs() <= n) {
            return 0.0;
        }
        -(2.0 / 3.0) * (self.m2xi(x[0]) + self.m2xi(x[1]) + self.m2xi(x[2]))
    }

    /// `σ₃ = -M₃/α₃`; 0 where `M₃ = 0` or outside the cutoff.
    pub(crate) fn sigma3_val(&self, x: [f64; 3]) -> Result<f64> {
        if !self.retained(&x) {
            return Ok(0.0);
        }
        let m = self.m3_im(x);
        if m == 0.0 {
            return Ok(0.0);
        }
        let a = alpha_of(&x, &self.phys);
        if a.abs() <= resonance_guard(&x) {
            return Err(Error::ResonanceGuard {
                tuple: x.to_vec(),
                alpha: a,
                multiplier: m,
            });
        }
        Ok(-m / a)
    }

    /// `M̂₄` and the sum of absolute values of its six pair terms.
    fn m4_parts(&self, x: [f64; 4]) -> Result<(f64, f64)> {
        let mut total = 0.0;
        let mut scale = 0.0;
        for &(i, j, [a, b]) in PAIRS4.iter() {
            let merged = x[i] + x[j];
            let term = self.sigma3_val([x[a], x[b], merged])? * merged;
            total += term;
            scale += term.abs();
        }
        // -(3/4) [σ₃(ξ₁,ξ₂,ξ₃+ξ₄)(ξ₃+ξ₄)]_sym; σ₃ is symmetric, so the 24
        // permutations collapse onto the 6 merged pairs (each appearing 4 times).
        let c = -(3.0 / 4.0) / 6.0;
        Ok((c * total, c.abs() * scale))
    }

    pub(crate) fn m4_im(&self, x: [f64; 4]) -> Result<f64> {
        Ok(self.m4_parts(x)?.0)
    }

    /// `(M̄₄, M̃₄)` imaginary coefficients.
    pub(crate) fn split_m4_im(&self, x: [f64; 4]) -> Result<(f64, f64)> {
        let m = self.m4_im(x)?;
        if self.in_omega(&x) {
            Ok((0.0, m))
        } else {
            Ok((m, 0.0))
        }
    }

    pub(crate) fn sigma4_val(&self, x: [f64; 4]) -> Result<Sigma4> {
        let zero = Sigma4 {
            value: 0.0,
            resonant: false,
        };
        if !self.retained(&x) || !self.in_omega(&x) {
            return Ok(zero);
        }
        let (m, scale) = self.m4_parts(x)?;
        let exact_resonance = x[0] + x[1] == 0.0 || x[0] + x[2] == 0.0 || x[0] + x[3] == 0.0;
        let a = alpha_of(&x, &self.phys);
        if exact_resonance || a.abs() <= resonance_guard(&x) {
            if m.abs() <= MULTIPLIER_GUARD * scale {
                return Ok(Sigma4 {
                    value: 0.0,
                    resonant: true,
                });
            }
            return Err(Error::ResonanceGuard {
                tuple: x.to_vec(),
                alpha: a,
                multiplier: m,
            });
        }
        Ok(Sigma4 {
            value: -m / a,
            resonant: false,
        })
    }

    /// `M̂₅ = -(4/5)[σ₄(ξ₁,ξ₂,ξ₃,ξ₄+ξ₅)(ξ₄+ξ₅)]_sym`, reduced to the 10 merged pairs.
    pub(crate) fn m5_im(&self, x: [f64; 5]) -> Result<f64> {
        let mut total = 0.0;
        for &(i, j, [a, b, c]) in PAIRS5.iter() {
            let merged = x[i] + x[j];
            total += self.sigma4_val([x[a], x[b], x[c], merged])?.value * merged;
        }
        Ok(-(4.0 / 5.0) / 10.0 * total)
    }

    pub fn m3(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(3, "3")?;
        let x = t.values();
        Ok(Complex64::new(0.0, self.m3_im([x[0], x[1], x[2]])))
    }

    pub fn sigma3(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(3, "3")?;
        let x = t.values();
        Ok(Complex64::new(self.sigma3_val([x[0], x[1], x[2]])?, 0.0))
    }

    pub fn m4(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(4, "4")?;
        let x = t.values();
        Ok(Complex64::new(0.0, self.m4_im([x[0], x[1], x[2], x[3]])?))
    }

    /// `M₄` from its definition, symmetrizing over all 24 permutations.
    pub fn m4_by_definition(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(4, "4")?;
        let err = std::cell::RefCell::new(None);
        let v = symmetrize(
            |q| match self.sigma3_val([q[0], q[1], q[2] + q[3]]) {
                Ok(s) => Complex64::new(s * (q[2] + q[3]), 0.0),
                Err(e) => {
                    err.borrow_mut().get_or_insert(e.to_string());
                    Complex64::new(0.0, 0.0)
                }
            },
            t.values(),
        );
        if let Some(e) = err.into_inner() {
            return Err(Error::InvalidParameter(e));
        }
        Ok(Complex64::new(0.0, -0.75) * v)
    }

    pub fn split_m4(&self, t: &FreqTuple) -> Result<(Complex64, Complex64)> {
        t.expect(4, "4")?;
        let x = t.values();
        let (bar, tilde) = self.split_m4_im([x[0], x[1], x[2], x[3]])?;
        Ok((Complex64::new(0.0, bar), Complex64::new(0.0, tilde)))
    }

    pub fn sigma4(&self, t: &FreqTuple) -> Result<Sigma4> {
        t.expect(4, "4")?;
        let x = t.values();
        self.sigma4_val([x[0], x[1], x[2], x[3]])
    }

    pub fn m5(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(5, "5")?;
        let x = t.values();
        Ok(Complex64::new(0.0, self.m5_im([x[0], x[1], x[2], x[3], x[4]])?))
    }

    /// `M₅` from its definition, symmetrizing over all 120 permutations.
    pub fn m5_by_definition(&self, t: &FreqTuple) -> Result<Complex64> {
        t.expect(5, "5")?;
        let err = std::cell::RefCell::new(None);
        let v = symmetrize(
            |q| match self.sigma4_val([q[0], q[1], q[2], q[3] + q[4]]) {
                Ok(s) => Complex64::new(s.value * (q[3] + q[4]), 0.0),
                Err(e) => {
                    err.borrow_mut().get_or_insert(e.to_string());
                    Complex64::new(0.0, 0.0)
                }
            },
            t.values(),
        );
        if let Some(e) = err.into_inner() {
            return Err(Error::InvalidParameter(e));
        }
        Ok(Complex64::new(0.0, -0.8) * v)
    }

    /// Does some regrouping `(ξ_a, ξ_b, ξ_c, ξ_d + ξ_e)` of the quintuple lie
    /// in `Ω`? Returns the smallest `|ξ_a ξ_b ξ_c|` over such regroupings.
    pub fn omega5_weight(&self, x: [f64; 5]) -> Option<f64> {
        let n = self.ip.big_n();
        PAIRS5
            .iter()
            .filter(|&&(i, j, [a, b, c])| {
                [x[a], x[b], x[c], x[i] + x[j]].iter().all(|v| v.abs() >= n)
            })
            .map(|&(_, _, [a, b, c])| (x[a] * x[b] * x[c]).abs())
            .min_by(|p, q| p.total_cmp(q))
    }
}

/// Flavour of the bilinear operator `I^s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilinearForm {
    /// `Σ_{ξ₁+ξ₂=ξ} |φ'(ξ₁) − φ'(ξ₂)|^s û(ξ₁) v̂(ξ₂)`.
    Product,
    /// Output slot exchanged with an input:
    /// `Σ_{ξ−ξ₂=η} |φ'(ξ) − φ'(ξ₂)|^s û(ξ) conj(v̂(ξ₂))`.
    Exchanged,
}

/// `I^s(u, v)` on the grid by direct convolution. The result is restricted to
/// the 2/3-rule band, like [`crate::spectral::dealiased_square`], and the
/// inputs are truncated to it.
pub fn is_bilinear(
    u: &SpectralField,
    v: &SpectralField,
    s_exp: f64,
    p: &PhysParams,
    form: BilinearForm,
) -> Result<SpectralField> {
    u.grid().same_as(v.grid())?;
    let grid = *u.grid();
    let kc = grid.dealias_cutoff();
    let g = 1.0 / grid.length().sqrt();
    let kernel = |a: f64, b: f64| {
        if s_exp == 0.0 {
            1.0
        } else {
            (phase_derivative(a, p) - phase_derivative(b, p)).abs().powf(s_exp)
        }
    };
    let mut out = SpectralField::zeros(grid);
    for k in 0..=kc {
        let mut acc = Complex64::new(0.0, 0.0);
        for b in -kc..=kc {
            let a = match form {
                BilinearForm::Product => k - b,
                BilinearForm::Exchanged => k + b,
            };
            if a.abs() > kc {
                continue;
            }
            let w = kernel(grid.wavenumber(a), grid.wavenumber(b));
            let vb = match form {
                BilinearForm::Product => v.coeff(b),
                BilinearForm::Exchanged => v.coeff(b).conj(),
            };
            acc += u.coeff(a) * vb * w;
        }
        out.set_mode(k, acc * g);
    }
    Ok(out)
}

/// Pointwise bounds that can be scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lemma {
    /// `|M₃| ≲ m²(ξ_min)|ξ_min|`.
    M3Bound,
    /// `|α̃₃| ≳ |ξ₁ξ₂ξ₃|` when `max|ξ_j| ≥ a` (two-sided report).
    Alpha3Lower,
    /// `|α̃₄| ∼ |ξ₁+ξ₂||ξ₁+ξ₃||ξ₁+ξ₄|`.
    Alpha4Factor,
    /// `|Σ m²(ξ_j)ξ_j| ≲ |α̃₄| / ξ_max²`.
    DoubleMeanValue,
    /// `|M₄| ≲ 1/ξ_max`.
    M4Decay,
    /// `|M₄| ≲ |α̃₄| / |ξ₁ξ₂ξ₃ξ₄|`.
    M4Resonance,
    /// `|M₅| ≲ χ_{Ω₅} / |ξ₁ξ₂ξ₃|` after relabeling.
    M5Bound,
    /// `σ₄` over lattice points of `Ω`, half of them resonant; ratio `|σ₄|·|ξ₁ξ₂ξ₃ξ₄|`.
    Sigma4Guard,
}

impl Lemma {
    pub const ALL: [Lemma; 8] = [
        Lemma::M3Bound,
        Lemma::Alpha3Lower,
        Lemma::Alpha4Factor,
        Lemma::DoubleMeanValue,
        Lemma::M4Decay,
        Lemma::M4Resonance,
        Lemma::M5Bound,
        Lemma::Sigma4Guard,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Lemma::M3Bound => "4.1",
            Lemma::Alpha3Lower => "claim-alpha3",
            Lemma::Alpha4Factor => "4.2ii",
            Lemma::DoubleMeanValue => "4.2iii",
            Lemma::M4Decay => "4.3a",
            Lemma::M4Resonance => "4.3b",
            Lemma::M5Bound => "4.4",
            Lemma::Sigma4Guard => "sigma4-guard",
        }
    }

    pub fn parse(s: &str) -> Result<Lemma> {
        Lemma::ALL
            .iter()
            .copied()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown lemma id `{s}`")))
    }

    fn tag(&self) -> u64 {
        Lemma::ALL.iter().position(|l| l == self).unwrap() as u64 + 1
    }
}

/// Counters kept alongside a [`BoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    #[serde(flatten)]
    pub bound: BoundReport,
    /// Resonant tuples where a quotient was replaced by 0.
    pub resonant: usize,
    /// Resonance-guard contradictions or support violations.
    pub hard_errors: usize,
}

impl ScanReport {
    fn empty(lemma: Lemma, seed: u64) -> Self {
        ScanReport {
            bound: BoundReport::empty(lemma.id(), seed),
            resonant: 0,
            hard_errors: 0,
        }
    }
}

/// Per-sample generator seeded from `(seed, lemma, index)`; independent of
/// scheduling, so serial and parallel scans agree bit for bit.
pub(crate) fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(stream);
    rng
}

pub(crate) fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Log-uniform magnitude in `[lo, hi]` with a random sign.
fn signed_log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let mag = (rng.gen_range(lo.ln()..hi.ln())).exp();
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn random_head(rng: &mut ChaCha8Rng, count: usize, n: f64) -> Vec<f64> {
    (0..count)
        .map(|_| signed_log_uniform(rng, 0.05 * n, 30.0 * n))
        .collect()
}

enum Sample {
    Ratio(f64),
    Excluded,
    Resonant(f64),
    HardError,
}

/// Empirical sup/inf of the ratio named by `lemma` over `samples` tuples.
pub fn scan_bound(
    lemma: Lemma,
    samples: usize,
    seed: u64,
    phys: &PhysParams,
    ip: &IParams,
) -> ScanReport {
    let h = Hierarchy::new(*phys, *ip);
    let chunk = 4096;
    let n_chunks = samples.div_ceil(chunk);
    let mut partials: Vec<ScanReport> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rep = ScanReport::empty(lemma, seed);
            for i in (c * chunk)..((c + 1) * chunk).min(samples) {
                let mut rng = sample_rng(seed, lemma.tag(), i as u64);
                match draw(lemma, &h, &mut rng) {
                    Sample::Ratio(r) => rep.bound.record(Some(r)),
                    Sample::Excluded => rep.bound.record(None),
                    Sample::Resonant(r) => {
                        rep.resonant += 1;
                        rep.bound.record(Some(r));
                    }
                    Sample::HardError => {
                        rep.hard_errors += 1;
                        rep.bound.record(None);
                    }
                }
            }
            rep
        })
        .collect();
    let mut total = ScanReport::empty(lemma, seed);
    for part in partials.drain(..) {
        total.bound = total.bound.merge(part.bound);
        total.resonant += part.resonant;
        total.hard_errors += part.hard_errors;
    }
    total
}

fn draw(lemma: Lemma, h: &Hierarchy, rng: &mut ChaCha8Rng) -> Sample {
    let n = h.ip.big_n();
    let p = &h.phys;
    let m2 = |x: f64| m_multiplier(x, &h.ip).powi(2);
    let max_abs = |x: &[f64]| x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    match lemma {
        Lemma::M3Bound => {
            let mut x = random_head(rng, 2, n);
            x.push(-(x[0] + x[1]));
            let xmin = x.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if xmin == 0.0 {
                return Sample::Excluded;
            }
            let m3 = h.m3_im([x[0], x[1], x[2]]).abs();
            Sample::Ratio(m3 / (m2(xmin) * xmin))
        }
        Lemma::Alpha3Lower => {
            let mut x = random_head(rng, 2, n);
            x.push(-(x[0] + x[1]));
            if max_abs(&x) < p.a() {
                return Sample::Excluded;
            }
            let prod = (x[0] * x[1] * x[2]).abs();
            Sample::Ratio(alpha_of(&x, p).abs() / prod)
        }
        Lemma::Alpha4Factor | Lemma::DoubleMeanValue | Lemma::M4Decay | Lemma::M4Resonance => {
            let mut x = random_head(rng, 3, n);
            x.push(-(x[0] + x[1] + x[2]));
            let xm = max_abs(&x);
            if xm < n {
                return Sample::Excluded;
            }
            let a4 = alpha_of(&x, p);
            let small = a4.abs() <= resonance_guard(&x);
            let q = [x[0], x[1], x[2], x[3]];
            match lemma {
                Lemma::Alpha4Factor => {
                    let prod = ((x[0] + x[1]) * (x[0] + x[2]) * (x[0] + x[3])).abs();
                    if small || prod == 0.0 {
                        return Sample::Excluded;
                    }
                    Sample::Ratio(a4.abs() / prod)
                }
                Lemma::DoubleMeanValue => {
                    if small {
                        return Sample::Excluded;
                    }
                    let s: f64 = x.iter().map(|&v| m2(v) * v).sum();
                    Sample::Ratio(s.abs() * xm * xm / a4.abs())
                }
                Lemma::M4Decay => match h.m4_im(q) {
                    Ok(m) => Sample::Ratio(m.abs() * xm),
                    Err(_) => Sample::HardError,
                },
                _ => {
                    if small {
                        return Sample::Excluded;
                    }
                    match h.m4_im(q) {
                        Ok(m) => {
                            let prod: f64 = x.iter().map(|v| v.abs()).product();
                            Sample::Ratio(m.abs() * prod / a4.abs())
                        }
                        Err(_) => Sample::HardError,
                    }
                }
            }
        }
        Lemma::M5Bound => {
            // bias toward Ω₅: three large frequencies and a large merged pair
            let mut x: Vec<f64> = (0..3).map(|_| signed_log_uniform(rng, n, 30.0 * n)).collect();
            x.push(signed_log_uniform(rng, 0.05 * n, 30.0 * n));
            x.push(-(x[0] + x[1] + x[2] + x[3]));
            let q = [x[0], x[1], x[2], x[3], x[4]];
            let m5 = match h.m5_im(q) {
                Ok(v) => v.abs(),
                Err(_) => return Sample::HardError,
            };
            match h.omega5_weight(q) {
                Some(w) => Sample::Ratio(m5 * w),
                None if m5 == 0.0 => Sample::Ratio(0.0),
                None => Sample::HardError,
            }
        }
        Lemma::Sigma4Guard => {
            // integer lattice points of Ω; every other sample is exactly resonant
            let ni = n.ceil() as i64;
            let hi = 30 * ni;
            let pick = |rng: &mut ChaCha8Rng| {
                let v = rng.gen_range(ni..=hi) as f64;
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            };
            let x = if rng.gen_bool(0.5) {
                let a = pick(rng);
                let b = pick(rng);
                let mut q = [a, -a, b, -b];
                // random placement of the cancelling pairs
                let r = rng.gen_range(0..3);
                q.swap(1, 1 + r);
                q
            } else {
                loop {
                    let a = pick(rng);
                    let b = pick(rng);
                    let c = pick(rng);
                    let d = -(a + b + c);
                    if d.abs() >= n && d.abs() <= hi as f64 * 3.0 {
                        break [a, b, c, d];
                    }
                }
            };
            match h.sigma4_val(x) {
                Ok(s) => {
                    let prod: f64 = x.iter().map(|v| v.abs()).product();
                    if s.resonant {
                        Sample::Resonant(s.value.abs() * prod)
                    } else {
                        Sample::Ratio(s.value.abs() * prod)
                    }
                }
                Err(_) => Sample::HardError,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Grid;

    fn kdv() -> PhysParams {
        PhysParams::new(0.0, 1.0).unwrap()
    }

    fn hier(nu: f64, mu: f64, n: f64, s: f64) -> Hierarchy {
        Hierarchy::new(PhysParams::new(nu, mu).unwrap(), IParams::new(n, s).unwrap())
    }

    fn t(v: &[f64]) -> FreqTuple {
        FreqTuple::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tuple_validation() {
        assert!(FreqTuple::new(vec![1.0, 2.0]).is_err());
        assert!(FreqTuple::new(vec![1.0]).is_err());
        assert!(FreqTuple::new(vec![1.0; 6]).is_err());
        assert_eq!(FreqTuple::closing(vec![1.0, 2.0]).unwrap().values(), &[1.0, 2.0, -3.0]);
    }

    #[test]
    fn alpha_examples() {
        let p = PhysParams::new(0.3, 1.7).unwrap();
        assert_eq!(alpha(&t(&[5.5, -5.5]), &p), 0.0);
        assert_eq!(alpha(&t(&[1.0, 1.0, -2.0]), &kdv()), -6.0);
        assert_eq!(alpha(&t(&[25.0, -22.0, -3.0]), &kdv()), 4950.0);
        let a = alpha(&t(&[3.0, -1.0, -2.0]), &p);
        assert_eq!(alpha(&t(&[-2.0, 3.0, -1.0]), &p), a);
    }

    #[test]
    fn m3_and_sigma3_examples() {
        let h = hier(0.0, 1.0, 10.0, -0.5);
        assert_eq!(h.m3(&t(&[4.0, 5.0, -9.0])).unwrap(), Complex64::new(0.0, 0.0));
        assert_eq!(h.m3(&t(&[33.0, -33.0, 0.0])).unwrap(), Complex64::new(0.0, 0.0));
        let m3 = h.m3(&t(&[25.0, -22.0, -3.0])).unwrap();
        assert!(m3.re == 0.0 && (m3.im - 2.0).abs() < 1e-14, "{m3}");

        assert_eq!(h.sigma3(&t(&[4.0, 5.0, -9.0])).unwrap().re, 0.0);
        let s = h.sigma3(&t(&[25.0, -22.0, -3.0])).unwrap();
        assert!((s.re + 2.0 / 4950.0).abs() < 1e-17, "{s}");
        for perm in [[-22.0, 25.0, -3.0], [-3.0, -22.0, 25.0], [25.0, -3.0, -22.0]] {
            assert_eq!(h.sigma3(&t(&perm)).unwrap(), s);
        }
    }

    #[test]
    fn symmetrize_examples() {
        let sym = symmetrized(|q: &[f64]| Complex64::new(q[0] * q[1] + q[2], 0.0));
        let x = [1.0, 2.0, -3.0];
        assert!((sym(&x) - symmetrize(&sym, &x)).norm() < 1e-14);
        let lin = symmetrize(|q| Complex64::new(q[0], 0.0), &[2.5, -2.5]);
        assert_eq!(lin, Complex64::new(0.0, 0.0));
        // pseudo-random tabulated function of 4 arguments
        let table = |q: &[f64]| {
            let h = q.iter().enumerate().fold(0u64, |acc, (i, v)| {
                acc.wrapping_mul(6364136223846793005).wrapping_add((*v as i64 as u64) ^ (i as u64 * 0x9e37))
            });
            Complex64::new((h % 1000) as f64 / 997.0, ((h / 1000) % 1000) as f64 / 991.0)
        };
        let once = symmetrized(table);
        let x4 = [3.0, -7.0, 1.0, 3.0];
        let twice = symmetrize(&once, &x4);
        assert!((twice - once(&x4)).norm() < 1e-14);
        let mut count = 0;
        for_each_permutation(&mut [1, 2, 3, 4, 5], &mut |_| count += 1);
        assert_eq!(count, 120);
    }

    #[test]
    fn m4_examples() {
        let h = hier(1.0, 1.0, 16.0, -0.5);
        assert_eq!(h.m4(&t(&[8.0, -3.0, 2.0, -7.0])).unwrap(), Complex64::new(0.0, 0.0));
        let m = h.m4(&t(&[40.0, -40.0, 23.0, -23.0])).unwrap();
        assert!(m.norm() <= 1e-14, "{m}");

        let x = [37.3, -81.2, 12.9, 31.0];
        let base = h.m4(&t(&x)).unwrap();
        assert_eq!(base.re, 0.0);
        assert!(base.im != 0.0);
        let by_def = h.m4_by_definition(&t(&x)).unwrap();
        assert!((base - by_def).norm() <= 1e-13 * base.norm());
        let mut q = x;
        for_each_permutation(&mut q, &mut |perm| {
            let v = h.m4(&t(perm)).unwrap();
            assert!((v - base).norm() <= 1e-13 * base.norm().max(1e-300));
        });
    }

    #[test]
    fn split_examples() {
        let h = hier(1.0, 1.0, 16.0, -0.5);
        let omega = t(&[40.0, -57.0, 33.0, -16.0]);
        let (bar, tilde) = h.split_m4(&omega).unwrap();
        assert_eq!(bar, Complex64::new(0.0, 0.0));
        assert_eq!(tilde, h.m4(&omega).unwrap());
        let off = t(&[40.0, -57.0, 32.0, -15.0]);
        let (bar, tilde) = h.split_m4(&off).unwrap();
        assert_eq!(tilde, Complex64::new(0.0, 0.0));
        assert_eq!(bar, h.m4(&off).unwrap());
    }

    #[test]
    fn sigma4_examples() {
        let h = hier(1.0, 1.0, 16.0, -0.5);
        assert_eq!(h.sigma4(&t(&[10.0, 30.0, -20.0, -20.0])).unwrap().value, 0.0);
        let r = h.sigma4(&t(&[40.0, -40.0, 23.0, -23.0])).unwrap();
        assert_eq!(r, Sigma4 { value: 0.0, resonant: true });
        let r = h.sigma4(&t(&[23.0, 40.0, -23.0, -40.0])).unwrap();
        assert!(r.resonant);
        let x = [40.0, -57.0, 33.0, -16.0];
        let s = h.sigma4(&t(&x)).unwrap();
        assert!(!s.resonant);
        let expect = -h.m4(&t(&x)).unwrap().im / alpha(&t(&x), h.phys());
        assert_eq!(s.value, expect);
    }

    #[test]
    fn m5_examples() {
        let h = hier(0.5, 1.0, 8.0, -0.5);
        assert_eq!(h.m5(&t(&[1.0, 2.0, -3.0, 4.0, -4.0])).unwrap(), Complex64::new(0.0, 0.0));
        let x = [20.0, -31.0, 45.0, -17.0, -17.0];
        let base = h.m5(&t(&x)).unwrap();
        assert!(base.norm() > 0.0);
        let by_def = h.m5_by_definition(&t(&x)).unwrap();
        assert!((base - by_def).norm() <= 1e-12 * base.norm());
        let mut q = x;
        for_each_permutation(&mut q, &mut |perm| {
            let v = h.m5(&t(perm)).unwrap();
            assert!((v - base).norm() <= 1e-12 * base.norm());
        });
    }

    #[test]
    fn cutoff_zeroes_sigma_outside_lattice() {
        let h = hier(1.0, 1.0, 4.0, -0.5).with_cutoff(10.0);
        assert_eq!(h.sigma3_val([9.0, 3.0, -12.0]).unwrap(), 0.0);
        assert!(h.sigma3_val([9.0, -3.0, -6.0]).unwrap() != 0.0);
        // pair (9, 3) merges to 12 > 10, so its term drops out of M₄
        let full = hier(1.0, 1.0, 4.0, -0.5);
        let x = [9.0, 3.0, -5.0, -7.0];
        assert!(h.m4_im(x).unwrap() != full.m4_im(x).unwrap());
    }

    #[test]
    fn telescope_examples() {
        let p = PhysParams::new(1.0, 1.0).unwrap();
        assert!(check_telescope(&t(&[1.0, 2.0, 3.0, -6.0]), &p).unwrap() <= 1e-12);
        assert_eq!(check_telescope(&t(&[5.0, -5.0, 2.0, -2.0]), &p).unwrap(), 0.0);
        assert!(check_telescope(&t(&[1.0, 2.0, -3.0]), &p).is_err());
    }

    #[test]
    fn is_bilinear_examples() {
        let grid = Grid::standard(16).unwrap();
        let p = PhysParams::new(1.0, 1.0).unwrap();
        let u = SpectralField::from_modes(grid, &[(1, Complex64::new(0.5, 0.2)), (3, Complex64::new(-0.1, 0.4))]).unwrap();
        let v = SpectralField::from_modes(grid, &[(2, Complex64::new(0.3, -0.6)), (0, Complex64::new(0.2, 0.0))]).unwrap();
        let plain = is_bilinear(&u, &v, 0.0, &p, BilinearForm::Product).unwrap();
        let x = grid.nodes();
        let (uu, vv) = (u.truncate(5).to_physical(), v.truncate(5).to_physical());
        let prod: Vec<f64> = uu.iter().zip(&vv).map(|(a, b)| a * b).collect();
        let direct = SpectralField::from_physical(grid, &prod).unwrap().truncate(5);
        assert!(plain.max_abs_diff(&direct) < 1e-14);
        assert_eq!(x.len(), 16);

        let a = SpectralField::from_modes(grid, &[(2, Complex64::new(1.0, 0.0))]).unwrap();
        let b = SpectralField::from_modes(grid, &[(1, Complex64::new(0.0, 1.0))]).unwrap();
        let out = is_bilinear(&a, &b, 0.5, &p, BilinearForm::Product).unwrap();
        let w = (phase_derivative(2.0, &p) - phase_derivative(1.0, &p)).abs().sqrt();
        let expect = Complex64::new(0.0, 1.0) * w / grid.length().sqrt();
        assert!((out.coeff(3) - expect).norm() < 1e-15);
        assert!(out.reality_defect() < 1e-15);

        let same = is_bilinear(&a, &a, 0.5, &p, BilinearForm::Product).unwrap();
        assert!(same.coeff(4).norm() < 1e-15);
        let ex = is_bilinear(&u, &v, 0.5, &p, BilinearForm::Exchanged).unwrap();
        assert!(ex.reality_defect() < 1e-15);
    }

    #[test]
    fn scan_examples() {
        let h = hier(0.0, 1.0, 10.0, -0.5);
        let m3 = h.m3_im([25.0, -22.0, -3.0]).abs();
        assert!((m3 / 3.0 - 2.0 / 3.0).abs() < 1e-14);
        let p = kdv();
        let a4 = alpha_of(&[1.0, 2.0, 3.0, -6.0], &p);
        assert_eq!(a4.abs(), 180.0);
        assert_eq!(((1.0 + 2.0) * (1.0 + 3.0) * (1.0 - 6.0f64)).abs(), 60.0);

        let ip = IParams::new(32.0, -0.5).unwrap();
        let pp = PhysParams::new(1.0, 1.0).unwrap();
        let rep = scan_bound(Lemma::Alpha3Lower, 20_000, 3, &pp, &ip);
        assert!(rep.bound.min_ratio > 0.0);
        let again = scan_bound(Lemma::Alpha3Lower, 20_000, 3, &pp, &ip);
        assert_eq!(rep, again);
        assert_eq!(Lemma::parse("4.2ii").unwrap(), Lemma::Alpha4Factor);
        assert!(Lemma::parse("9.9").is_err());
    }
}
