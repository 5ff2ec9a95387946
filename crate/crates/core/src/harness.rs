//! Run configuration, experiment drivers and persistence.
//!
//! Configs are JSON. Validation walks the document by key path so errors
//! name the offending field (`physics.mu`). Outputs are written to a
//! temporary file and renamed into place; the manifest goes last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bourgain::{self, ScanPoint, SeparationPoint, SpaceTimeField};
use crate::energies::{check_energy_derivative, EnergyEvaluator, EnergyReport};
use crate::error::{Error, Result};
use crate::imethod::IParams;
use crate::multipliers::{check_telescope, sample_rng, scan_bound, FreqTuple, Lemma, ScanReport};
use crate::solver::{least_squares_slope, solve_with, Scheme, SolveOptions, Trajectory};
use crate::spectral::{phase, Grid, PhysParams, SpectralField};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

const IC_STREAM: u64 = 101;
const TELESCOPE_STREAM: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub nu: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IMethodConfig {
    #[serde(rename = "N")]
    pub big_n: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "M")]
    pub modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub scheme: Scheme,
    pub sample_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub k: i64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    Modes { modes: Vec<ModeSpec> },
    /// `|û(k)| = amplitude (1+|k|)^{-decay}` on `1 ≤ |k| ≤ K`, seeded phases.
    Random { decay: f64, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NScanConfig {
    #[serde(rename = "N")]
    pub big_ns: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearConfig {
    #[serde(rename = "N")]
    pub big_ns: Vec<f64>,
    pub delta: Vec<f64>,
    pub s: f64,
    pub eps: f64,
    /// Separations of the `I^s` scan.
    pub separations: Vec<i64>,
    pub packet_width: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsConfig {
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub physics: PhysicsConfig,
    pub imethod: IMethodConfig,
    pub grid: GridConfig,
    pub integration: IntegrationConfig,
    pub initial_condition: InitialCondition,
    pub energy_level: u8,
    pub nscan: NScanConfig,
    pub bilinear: BilinearConfig,
    pub bounds: BoundsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "simulate".into(),
            seed: 1,
            output_dir: PathBuf::from("out"),
            physics: PhysicsConfig { nu: 1.0, mu: 1.0 },
            imethod: IMethodConfig { big_n: 8.0, s: -0.5 },
            grid: GridConfig {
                length: std::f64::consts::TAU,
                modes: 128,
            },
            integration: IntegrationConfig {
                dt: 1e-3,
                t_final: 1.0,
                scheme: Scheme::Ifrk4,
                sample_every: 10,
            },
            initial_condition: InitialCondition::Random {
                decay: 2.0,
                amplitude: 1.0,
            },
            energy_level: 2,
            nscan: NScanConfig {
                big_ns: vec![4.0, 8.0, 16.0, 32.0, 64.0],
                delta: 0.1,
            },
            bilinear: BilinearConfig {
                big_ns: vec![16.0, 32.0, 64.0],
                delta: vec![0.1, 0.05],
                s: 0.0,
                eps: bourgain::DEFAULT_EPS,
                separations: vec![4, 8, 16, 32],
                packet_width: 4,
            },
            bounds: BoundsConfig { samples: 100_000 },
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults per experiment.
    pub fn preset(experiment: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            experiment: experiment.to_string(),
            ..RunConfig::default()
        };
        match experiment {
            "simulate" | "energies" | "verify" | "suite" => {}
            "nscan" => {
                cfg.grid.modes = 256;
                // the increments at large N sit near 1e-13; only a very fine
                // step resolves them against the error of the high modes
                cfg.integration.dt = 3.90625e-6;
                cfg.integration.t_final = 0.1;
                cfg.integration.scheme = Scheme::IfGauss4;
                cfg.integration.sample_every = 1280;
            }
            "xnorm" | "bilinear-scan" => cfg.grid.modes = 256,
            other => return Err(Error::InvalidParameter(format!("unknown experiment `{other}`"))),
        }
        Ok(cfg)
    }

    pub fn phys(&self) -> Result<PhysParams> {
        PhysParams::new(self.physics.nu, self.physics.mu)
    }

    pub fn iparams(&self) -> Result<IParams> {
        IParams::new(self.imethod.big_n, self.imethod.s)
    }

    pub fn make_grid(&self) -> Result<Grid> {
        Grid::new(self.grid.length, self.grid.modes)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            sample_every: self.integration.sample_every,
            scheme: self.integration.scheme,
            ..SolveOptions::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a config document; absent optional sections take
    /// the preset of the named experiment.
    pub fn from_json_str(text: &str, file: &Path) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            file: file.to_path_buf(),
            message: e.to_string(),
        })?;
        let root = Obj::root(&doc)?;
        root.allow(&[
            "experiment",
            "seed",
            "output_dir",
            "physics",
            "imethod",
            "grid",
            "integration",
            "initial_condition",
            "energy_level",
            "nscan",
            "bilinear",
            "bounds",
        ])?;
        let experiment = root.opt_str("experiment")?.unwrap_or_else(|| "simulate".into());
        let mut cfg = RunConfig::preset(&experiment).map_err(|e| root.err("experiment", e.to_string()))?;
        if let Some(seed) = root.opt_u64("seed")? {
            cfg.seed = seed;
        }
        if let Some(dir) = root.opt_str("output_dir")? {
            cfg.output_dir = PathBuf::from(dir);
        }

        let phys = root.req_section("physics")?;
        phys.allow(&["nu", "mu"])?;
        cfg.physics = PhysicsConfig {
            nu: phys.req_f64("nu")?,
            mu: phys.req_f64("mu")?,
        };
        cfg.phys().map_err(|e| phys.err("mu", e.to_string()))?;

        let im = root.req_section("imethod")?;
        im.allow(&["N", "s"])?;
        cfg.imethod = IMethodConfig {
            big_n: im.req_f64("N")?,
            s: im.req_f64("s")?,
        };
        if !(cfg.imethod.big_n >= 4.0) {
            return Err(im.err("N", format!("N must be >= 4, got {}", cfg.imethod.big_n)));
        }
        cfg.iparams().map_err(|e| im.err("s", e.to_string()))?;

        let g = root.req_section("grid")?;
        g.allow(&["L", "M"])?;
        cfg.grid = GridConfig {
            length: g.req_f64("L")?,
            modes: g.req_usize("M")?,
        };
        cfg.make_grid().map_err(|e| g.err("M", e.to_string()))?;

        if let Some(int) = root.opt_section("integration")? {
            int.allow(&["dt", "T", "scheme", "sample_every"])?;
            if let Some(dt) = int.opt_f64("dt")? {
                cfg.integration.dt = dt;
            }
            if let Some(t) = int.opt_f64("T")? {
                cfg.integration.t_final = t;
            }
            if let Some(s) = int.opt_str("scheme")? {
                cfg.integration.scheme = match s.as_str() {
                    "ifrk4" => Scheme::Ifrk4,
                    "if-gauss4" => Scheme::IfGauss4,
                    other => return Err(int.err("scheme", format!("unknown scheme `{other}` (ifrk4 | if-gauss4)"))),
                };
            }
            if let Some(n) = int.opt_usize("sample_every")? {
                cfg.integration.sample_every = n;
            }
            let i = cfg.integration;
            if !(i.dt.is_finite() && i.dt > 0.0) {
                return Err(int.err("dt", "must be positive".into()));
            }
            if !(i.t_final.is_finite() && i.t_final >= i.dt) {
                return Err(int.err("T", "must be at least dt".into()));
            }
            if i.sample_every == 0 {
                return Err(int.err("sample_every", "must be positive".into()));
            }
        }

        if let Some(ic) = root.opt_section("initial_condition")? {
            cfg.initial_condition = match ic.req_str("kind")?.as_str() {
                "random" => {
                    ic.allow(&["kind", "decay", "amplitude"])?;
                    let decay = ic.opt_f64("decay")?.unwrap_or(2.0);
                    let amplitude = ic.opt_f64("amplitude")?.unwrap_or(1.0);
                    if !(decay.is_finite() && amplitude.is_finite() && amplitude >= 0.0) {
                        return Err(ic.err("amplitude", "must be finite and nonnegative".into()));
                    }
                    InitialCondition::Random { decay, amplitude }
                }
                "modes" => {
                    ic.allow(&["kind", "modes"])?;
                    let list = ic.req_array("modes")?;
                    let mut modes = Vec::with_capacity(list.len());
                    for (i, item) in list.iter().enumerate() {
                        let m = ic.element("modes", i, item)?;
                        m.allow(&["k", "amplitude", "phase"])?;
                        let k = m.req_i64("k")?;
                        if k.unsigned_abs() as usize > cfg.grid.modes / 2 - 1 {
                            return Err(m.err("k", format!("mode {k} outside the grid")));
                        }
                        modes.push(ModeSpec {
                            k,
                            amplitude: m.req_f64("amplitude")?,
                            phase: m.opt_f64("phase")?.unwrap_or(0.0),
                        });
                    }
                    InitialCondition::Modes { modes }
                }
                other => return Err(ic.err("kind", format!("unknown initial condition `{other}` (random | modes)"))),
            };
        }

        if let Some(level) = root.opt_u64("energy_level")? {
            if !(2..=4).contains(&level) {
                return Err(root.err("energy_level", "must be 2, 3 or 4".into()));
            }
            cfg.energy_level = level as u8;
        }

        if let Some(ns) = root.opt_section("nscan")? {
            ns.allow(&["N", "delta"])?;
            if let Some(list) = ns.opt_f64_list("N")? {
                cfg.nscan.big_ns = list;
            }
            if let Some(d) = ns.opt_f64("delta")? {
                cfg.nscan.delta = d;
            }
            if !(cfg.nscan.delta > 0.0 && cfg.nscan.delta.is_finite()) {
                return Err(ns.err("delta", "must be positive".into()));
            }
        }

        if let Some(bl) = root.opt_section("bilinear")? {
            bl.allow(&["N", "delta", "s", "eps", "separations", "packet_width"])?;
            if let Some(list) = bl.opt_f64_list("N")? {
                cfg.bilinear.big_ns = list;
            }
            if let Some(list) = bl.opt_f64_list("delta")? {
                cfg.bilinear.delta = list;
            }
            if let Some(s) = bl.opt_f64("s")? {
                cfg.bilinear.s = s;
            }
            if let Some(e) = bl.opt_f64("eps")? {
                if !(e > 0.0 && e < 0.5) {
                    return Err(bl.err("eps", "must lie in (0, 1/2)".into()));
                }
                cfg.bilinear.eps = e;
            }
            if let Some(list) = bl.opt_f64_list("separations")? {
                cfg.bilinear.separations = list.iter().map(|&x| x as i64).collect();
            }
            if let Some(w) = bl.opt_usize("packet_width")? {
                cfg.bilinear.packet_width = w as i64;
            }
        }

        if let Some(b) = root.opt_section("bounds")? {
            b.allow(&["samples"])?;
            if let Some(n) = b.opt_usize("samples")? {
                cfg.bounds.samples = n;
            }
        }
        Ok(cfg)
    }
}

/// JSON object at a key path.
struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn root(v: &'a Value) -> Result<Self> {
        match v {
            Value::Object(map) => Ok(Obj { path: String::new(), map }),
            _ => Err(Error::Config {
                path: "<root>".into(),
                message: "expected an object".into(),
            }),
        }
    }

    fn key(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn err(&self, key: &str, message: String) -> Error {
        Error::Config { path: self.key(key), message }
    }

    fn allow(&self, keys: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unknown field".into())),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn required(&self, key: &str) -> Result<&'a Value> {
        self.get(key).ok_or_else(|| self.err(key, "missing required field".into()))
    }

    fn as_section(&self, key: &str, v: &'a Value) -> Result<Obj<'a>> {
        match v {
            Value::Object(map) => Ok(Obj { path: self.key(key), map }),
            _ => Err(self.err(key, "expected an object".into())),
        }
    }

    fn opt_section(&self, key: &str) -> Result<Option<Obj<'a>>> {
        self.get(key).map(|v| self.as_section(key, v)).transpose()
    }

    fn req_section(&self, key: &str) -> Result<Obj<'a>> {
        self.as_section(key, self.required(key)?)
    }

    fn element(&self, key: &str, i: usize, v: &'a Value) -> Result<Obj<'a>> {
        match v {
            Value::Object(map) => Ok(Obj {
                path: format!("{}[{i}]", self.key(key)),
                map,
            }),
            _ => Err(Error::Config {
                path: format!("{}[{i}]", self.key(key)),
                message: "expected an object".into(),
            }),
        }
    }

    fn f64_of(&self, key: &str, v: &Value) -> Result<f64> {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(key, "expected a finite number".into()))
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| self.f64_of(key, v)).transpose()
    }

    fn req_f64(&self, key: &str) -> Result<f64> {
        self.f64_of(key, self.required(key)?)
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| v.as_u64().ok_or_else(|| self.err(key, "expected a nonnegative integer".into())))
            .transpose()
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.opt_u64(key)?.map(|x| x as usize))
    }

    fn req_usize(&self, key: &str) -> Result<usize> {
        self.required(key)?;
        Ok(self.opt_usize(key)?.unwrap_or_default())
    }

    fn req_i64(&self, key: &str) -> Result<i64> {
        self.required(key)?
            .as_i64()
            .ok_or_else(|| self.err(key, "expected an integer".into()))
    }

    fn opt_str(&self, key: &str) -> Result<Option<String>> {
        self.get(key)
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| self.err(key, "expected a string".into())))
            .transpose()
    }

    fn req_str(&self, key: &str) -> Result<String> {
        self.required(key)?;
        Ok(self.opt_str(key)?.unwrap_or_default())
    }

    fn req_array(&self, key: &str) -> Result<&'a Vec<Value>> {
        self.required(key)?
            .as_array()
            .ok_or_else(|| self.err(key, "expected an array".into()))
    }

    fn opt_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let arr = v.as_array().ok_or_else(|| self.err(key, "expected an array".into()))?;
        arr.iter()
            .enumerate()
            .map(|(i, x)| {
                x.as_f64().filter(|x| x.is_finite()).ok_or_else(|| Error::Config {
                    path: format!("{}[{i}]", self.key(key)),
                    message: "expected a finite number".into(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    RunConfig::from_json_str(&text, path)
}

pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Initial datum described by the config.
pub fn initial_field(cfg: &RunConfig) -> Result<SpectralField> {
    initial_field_seeded(cfg, cfg.seed)
}

pub fn initial_field_seeded(cfg: &RunConfig, seed: u64) -> Result<SpectralField> {
    let grid = cfg.make_grid()?;
    match &cfg.initial_condition {
        InitialCondition::Modes { modes } => {
            let list: Vec<(i64, Complex64)> = modes.iter().map(|m| (m.k, Complex64::from_polar(m.amplitude, m.phase))).collect();
            SpectralField::from_modes(grid, &list)
        }
        InitialCondition::Random { decay, amplitude } => Ok(random_field(grid, *decay, *amplitude, seed)),
    }
}

/// `|û(k)| = amplitude (1+|k|)^{-decay}` for `1 ≤ k ≤ K` with seeded phases.
pub fn random_field(grid: Grid, decay: f64, amplitude: f64, seed: u64) -> SpectralField {
    let mut rng = sample_rng(seed, IC_STREAM, 0);
    let mut f = SpectralField::zeros(grid);
    for k in 1..=grid.dealias_cutoff() {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        f.set_mode(k, Complex64::from_polar(amplitude * (1.0 + k as f64).powf(-decay), theta));
    }
    f
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Trajectory> {
    let u0 = initial_field(cfg)?;
    solve_with(&u0, cfg.integration.t_final, cfg.integration.dt, &cfg.phys()?, &cfg.iparams()?, cfg.solve_options())
}

pub fn run_energies(cfg: &RunConfig) -> Result<EnergyReport> {
    let traj = run_simulate(cfg)?;
    check_energy_derivative(&traj, cfg.energy_level, &cfg.phys()?, &cfg.iparams()?)
}

/// Energy identities along a trajectory saved by `simulate` into `dir`
/// (`config.json` and `trajectory.csv`).
pub fn energies_from_dir(dir: &Path, level: Option<u8>) -> Result<(RunConfig, EnergyReport)> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path)?;
    let mut cfg = RunConfig::from_json_str(&text, &cfg_path)?;
    if let Some(l) = level {
        cfg.energy_level = l;
    }
    let rows: Vec<StateRow> = read_csv(&dir.join("trajectory.csv"))?;
    let traj = trajectory_from_rows(&rows, cfg.make_grid()?, cfg.phys()?, cfg.iparams()?, cfg.integration.dt, true)?;
    let rep = check_energy_derivative(&traj, cfg.energy_level, &cfg.phys()?, &cfg.iparams()?)?;
    Ok((cfg, rep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NScanRow {
    #[serde(rename = "N")]
    pub big_n: f64,
    pub increment: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NScanReport {
    pub rows: Vec<NScanRow>,
    /// Least-squares slope of `log increment` against `log N` over the
    /// legs with a positive increment.
    pub slope: Option<f64>,
    pub strictly_decreasing: bool,
}

impl NScanReport {
    pub fn passed(&self) -> bool {
        self.strictly_decreasing && self.slope.is_some_and(|s| s < 0.0)
    }
}

/// `sup_{t ≤ δ} |E⁴(t) − E⁴(0)|` for the configured datum, per `N`.
pub fn run_nscan(cfg: &RunConfig) -> Result<NScanReport> {
    let ns = &cfg.nscan.big_ns;
    if ns.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: ns.len(),
        });
    }
    let grid = cfg.make_grid()?;
    let quarter = grid.modes() as f64 / 4.0;
    if let Some(bad) = ns.iter().find(|&&n| !(4.0..=quarter).contains(&n)) {
        return Err(Error::InvalidParameter(format!("N = {bad} outside [4, M/4 = {quarter}]")));
    }
    let p = cfg.phys()?;
    let u0 = initial_field(cfg)?;
    let ip0 = IParams::new(ns[0], cfg.imethod.s)?;
    let traj = solve_with(&u0, cfg.nscan.delta, cfg.integration.dt, &p, &ip0, cfg.solve_options());
    let rows: Vec<NScanRow> = match traj {
        Err(e) => ns
            .iter()
            .map(|&n| NScanRow {
                big_n: n,
                increment: None,
                status: format!("failed: {e}"),
            })
            .collect(),
        Ok(traj) => ns
            .iter()
            .map(|&n| {
                let leg = || -> Result<f64> {
                    let ev = EnergyEvaluator::new(grid, p, IParams::new(n, cfg.imethod.s)?, 4)?;
                    let e0 = ev.e4(&traj.samples()[0].1)?;
                    let mut sup: f64 = 0.0;
                    for (_, f) in traj.samples() {
                        sup = sup.max((ev.e4(f)? - e0).abs());
                    }
                    if sup.is_finite() {
                        Ok(sup)
                    } else {
                        Err(Error::BlowUp {
                            time: cfg.nscan.delta,
                            reason: "non-finite energy".into(),
                        })
                    }
                };
                match leg() {
                    Ok(v) => NScanRow {
                        big_n: n,
                        increment: Some(v),
                        status: "ok".into(),
                    },
                    Err(e) => NScanRow {
                        big_n: n,
                        increment: None,
                        status: format!("failed: {e}"),
                    },
                }
            })
            .collect(),
    };
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.increment.filter(|&v| v > 0.0).map(|v| (r.big_n.ln(), v.ln())))
        .collect();
    let slope = (pts.len() >= 2).then(|| least_squares_slope(&pts));
    let strictly_decreasing = rows.iter().all(|r| r.increment.is_some())
        && rows.windows(2).all(|w| w[1].increment.unwrap() < w[0].increment.unwrap());
    Ok(NScanReport {
        rows,
        slope,
        strictly_decreasing,
    })
}

/// One energy identity checked under two step halvings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityLeg {
    pub level: u8,
    #[serde(rename = "M")]
    pub modes: usize,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "N")]
    pub big_n: f64,
    pub s: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub dt: f64,
    pub tolerance: f64,
}

/// Identity legs; `dt` is the coarsest step, then halved twice. The steps sit
/// above the ≈5e-8 rounding floor of the finite differences.
pub const IDENTITY_LEGS: [IdentityLeg; 3] = [
    IdentityLeg {
        level: 2,
        modes: 64,
        length: std::f64::consts::TAU,
        big_n: 8.0,
        s: -0.5,
        t_final: 0.02,
        dt: 6e-5,
        tolerance: 1e-4,
    },
    IdentityLeg {
        level: 3,
        modes: 32,
        length: std::f64::consts::PI,
        big_n: 4.0,
        s: -0.5,
        t_final: 0.02,
        dt: 8e-5,
        tolerance: 1e-3,
    },
    IdentityLeg {
        level: 4,
        modes: 16,
        length: std::f64::consts::PI,
        big_n: 4.0,
        s: -0.5,
        t_final: 0.02,
        dt: 4e-4,
        tolerance: 1e-2,
    },
];

pub const MIN_OBSERVED_ORDER: f64 = 3.7;
pub const TELESCOPE_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityResult {
    pub level: u8,
    #[serde(rename = "M")]
    pub modes: usize,
    pub tolerance: f64,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySuite {
    pub legs: Vec<IdentityResult>,
    pub telescope_samples: usize,
    /// Worst `|defect| / (1 + Σ|φ(ξ_j)|)` over the telescoping samples.
    pub telescope_max_defect: f64,
    pub passed: bool,
}

pub fn run_identity_leg(leg: &IdentityLeg, p: &PhysParams, seed: u64) -> Result<IdentityResult> {
    let grid = Grid::new(leg.length, leg.modes)?;
    let ip = IParams::new(leg.big_n, leg.s)?;
    let u0 = random_field(grid, 2.0, 1.0, seed);
    let mut errors = Vec::with_capacity(3);
    for j in 0..3 {
        let dt = leg.dt / f64::from(1u32 << j);
        let traj = solve_with(&u0, leg.t_final, dt, p, &ip, SolveOptions::default())?;
        let rep = check_energy_derivative(&traj, leg.level, p, &ip)?;
        errors.push(rep.error_at(leg.level).unwrap_or(f64::NAN));
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let passed = errors.iter().all(|e| *e <= leg.tolerance) && orders.iter().all(|o| *o >= MIN_OBSERVED_ORDER);
    Ok(IdentityResult {
        level: leg.level,
        modes: leg.modes,
        tolerance: leg.tolerance,
        errors,
        orders,
        passed,
    })
}

/// Worst relative telescoping defect over random integer tuples of `Γ₄`.
pub fn telescope_defect(samples: usize, p: &PhysParams, seed: u64) -> Result<f64> {
    let worst = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, TELESCOPE_STREAM, i as u64);
            let head: Vec<f64> = (0..3).map(|_| rng.gen_range(-1000i64..=1000) as f64).collect();
            let t = FreqTuple::closing(head)?;
            let scale = 1.0 + t.values().iter().map(|&x| phase(x, p).abs()).sum::<f64>();
            Ok(check_telescope(&t, p)? / scale)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

pub fn run_identity_suite(cfg: &RunConfig) -> Result<IdentitySuite> {
    let p = cfg.phys()?;
    let legs = IDENTITY_LEGS
        .iter()
        .map(|leg| run_identity_leg(leg, &p, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let telescope_max_defect = telescope_defect(TELESCOPE_SAMPLES, &p, cfg.seed)?;
    let passed = legs.iter().all(|l| l.passed) && telescope_max_defect <= 1e-12;
    Ok(IdentitySuite {
        legs,
        telescope_samples: TELESCOPE_SAMPLES,
        telescope_max_defect,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSuite {
    pub reports: Vec<ScanReport>,
    pub passed: bool,
}

/// Verdict on one scan: finite sup, a positive inf where the bound is
/// two-sided, and no resonance-guard contradictions.
pub fn bound_report_ok(lemma: Lemma, rep: &ScanReport) -> bool {
    let two_sided = matches!(lemma, Lemma::Alpha4Factor | Lemma::Alpha3Lower);
    rep.bound.max_ratio.is_finite() && (!two_sided || rep.bound.min_ratio > 0.0) && rep.hard_errors == 0
}

pub fn run_bound_suite(cfg: &RunConfig) -> Result<BoundSuite> {
    let p = cfg.phys()?;
    let ip = cfg.iparams()?;
    let reports: Vec<ScanReport> = Lemma::ALL.iter().map(|&l| scan_bound(l, cfg.bounds.samples, cfg.seed, &p, &ip)).collect();
    let passed = Lemma::ALL.iter().zip(&reports).all(|(&l, r)| bound_report_ok(l, r));
    Ok(BoundSuite { reports, passed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XNormRow {
    pub s: f64,
    pub b: f64,
    pub delta: f64,
    pub norm: f64,
}

/// `‖ψ(t/δ)S(t)u₀‖_{X_{s,b}}` of the configured datum.
pub fn run_xnorm(cfg: &RunConfig, s: f64, b: f64, delta: f64) -> Result<XNormRow> {
    let f = SpaceTimeField::free_evolution(&initial_field(cfg)?, delta, &cfg.phys()?)?;
    Ok(XNormRow {
        s,
        b,
        delta,
        norm: bourgain::xsb_norm(&f, s, b, &cfg.phys()?),
    })
}

/// Bilinear ratio over the `(N, δ)` grid for two independently seeded data.
pub fn run_bilinear_scan(cfg: &RunConfig) -> Result<Vec<ScanPoint>> {
    let u0 = initial_field_seeded(cfg, cfg.seed)?;
    let v0 = initial_field_seeded(cfg, cfg.seed.wrapping_add(1))?;
    let bl = &cfg.bilinear;
    bourgain::bilinear_scan(&u0, &v0, bl.s, 0.5 + bl.eps, &bl.big_ns, &bl.delta, &cfg.phys()?, cfg.imethod.s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsScanRow {
    pub s_exp: f64,
    pub b_tilde: f64,
    pub separation: i64,
    pub ratio: f64,
}

/// `I^s` ratios across the separation scan at `s ∈ {0, 1/4, 1/2}` with the
/// smallest admissible `b̃`.
pub fn run_is_scan(cfg: &RunConfig) -> Result<Vec<IsScanRow>> {
    let grid = cfg.make_grid()?;
    let p = cfg.phys()?;
    let mut rows = Vec::new();
    for s_exp in [0.0, 0.25, 0.5] {
        let b_tilde = 1.0 / 6.0 + 2.0 * s_exp / 3.0;
        let pts: Vec<SeparationPoint> = bourgain::is_separation_scan(
            grid,
            &p,
            s_exp,
            b_tilde,
            &cfg.bilinear.separations,
            cfg.bilinear.packet_width,
            cfg.seed,
        )?;
        rows.extend(pts.into_iter().map(|q| IsScanRow {
            s_exp,
            b_tilde,
            separation: q.separation,
            ratio: q.ratio,
        }));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub experiment: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "M")]
    pub modes: usize,
    pub nu: f64,
    pub mu: f64,
    #[serde(rename = "N")]
    pub big_n: f64,
    pub s: f64,
    pub seed: u64,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Collects the files of one run and writes the manifest last.
pub struct OutputWriter {
    dir: PathBuf,
    config_bytes: Vec<u8>,
    started: f64,
    outputs: Vec<String>,
}

impl OutputWriter {
    /// `config_bytes` are the bytes the manifest hash covers.
    pub fn new(dir: &Path, config_bytes: Vec<u8>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            config_bytes,
            started: unix_now(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.raw(name, &bytes)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.raw(name, text.as_bytes())
    }

    pub fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    pub fn finish(self, cfg: &RunConfig) -> Result<RunManifest> {
        let manifest = RunManifest {
            config_hash: config_hash(&self.config_bytes),
            artifact_version: ARTIFACT_VERSION.to_string(),
            experiment: cfg.experiment.clone(),
            started_unix: self.started,
            finished_unix: unix_now(),
            length: cfg.grid.length,
            modes: cfg.grid.modes,
            nu: cfg.physics.nu,
            mu: cfg.physics.mu,
            big_n: cfg.imethod.big_n,
            s: cfg.imethod.s,
            seed: cfg.seed,
            outputs: self.outputs,
        };
        write_atomic(&self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }
}

/// Writes next to the target and renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("output");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path,
        message: e.to_string(),
    })
}

/// Checks the manifest in `dir` against the config bytes it claims.
pub fn verify_manifest(dir: &Path, config_bytes: &[u8]) -> Result<RunManifest> {
    let manifest = read_manifest(dir)?;
    let actual = config_hash(config_bytes);
    if manifest.config_hash != actual {
        return Err(Error::HashMismatch {
            expected: manifest.config_hash,
            actual,
        });
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub t: f64,
    pub k: i64,
    pub re: f64,
    pub im: f64,
}

/// Samples of a trajectory as `(t, k, Re û_k, Im û_k)` for `0 ≤ k ≤ M/2 − 1`.
pub fn trajectory_rows(traj: &Trajectory) -> Vec<StateRow> {
    let kmax = traj.grid().kmax();
    traj.samples()
        .iter()
        .flat_map(|(t, f)| {
            (0..=kmax).map(move |k| StateRow {
                t: *t,
                k,
                re: f.coeff(k).re,
                im: f.coeff(k).im,
            })
        })
        .collect()
}

/// Rebuilds a trajectory from [`trajectory_rows`] output.
pub fn trajectory_from_rows(
    rows: &[StateRow],
    grid: Grid,
    phys: PhysParams,
    ip: IParams,
    dt: f64,
    nonlinear: bool,
) -> Result<Trajectory> {
    let mut samples: Vec<(f64, SpectralField)> = Vec::new();
    for r in rows {
        if samples.last().is_none_or(|(t, _)| *t != r.t) {
            samples.push((r.t, SpectralField::zeros(grid)));
        }
        let f = &mut samples.last_mut().unwrap().1;
        if r.k.abs() > grid.kmax() {
            return Err(Error::InvalidParameter(format!("mode {} outside the grid", r.k)));
        }
        f.set_mode(r.k, Complex64::new(r.re, r.im));
    }
    Trajectory::from_samples(phys, ip, dt, samples, nonlinear)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "physics": {"nu": 1.0, "mu": 1.0},
            "imethod": {"N": 8, "s": -0.5},
            "grid": {"L": 6.283185307179586, "M": 64}
        }"#
        .to_string()
    }

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_json_str(text, Path::new("test.json"))
    }

    fn config_path(err: Error) -> String {
        match err {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse(&minimal()).unwrap();
        assert_eq!(cfg.grid.modes, 64);
        assert_eq!(cfg.integration, RunConfig::default().integration);
        assert_eq!(cfg.experiment, "simulate");
    }

    #[test]
    fn missing_and_invalid_fields_name_their_path() {
        let no_mu = minimal().replace(r#", "mu": 1.0"#, "");
        assert_eq!(config_path(parse(&no_mu).unwrap_err()), "physics.mu");
        let zero_mu = minimal().replace(r#""mu": 1.0"#, r#""mu": 0.0"#);
        assert_eq!(config_path(parse(&zero_mu).unwrap_err()), "physics.mu");
        let bad_s = minimal().replace(r#""s": -0.5"#, r#""s": 0.5"#);
        assert_eq!(config_path(parse(&bad_s).unwrap_err()), "imethod.s");
        let bad_n = minimal().replace(r#""N": 8"#, r#""N": 2"#);
        assert_eq!(config_path(parse(&bad_n).unwrap_err()), "imethod.N");
        let extra = minimal().replace(r#""nu": 1.0"#, r#""nu": 1.0, "kappa": 2"#);
        assert_eq!(config_path(parse(&extra).unwrap_err()), "physics.kappa");
        let text_m = minimal().replace(r#""M": 64"#, r#""M": "64""#);
        assert_eq!(config_path(parse(&text_m).unwrap_err()), "grid.M");
        let modes = minimal().replace(
            r#""grid""#,
            r#""initial_condition": {"kind": "modes", "modes": [{"k": 1, "amplitude": 1}, {"amplitude": 2}]}, "grid""#,
        );
        assert_eq!(config_path(parse(&modes).unwrap_err()), "initial_condition.modes[1].k");
        assert!(matches!(parse("{ not json"), Err(Error::Parse { .. })));
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = RunConfig::preset("nscan").unwrap();
        cfg.initial_condition = InitialCondition::Modes {
            modes: vec![
                ModeSpec {
                    k: 2,
                    amplitude: 0.5,
                    phase: 0.25,
                },
                ModeSpec {
                    k: 7,
                    amplitude: 0.125,
                    phase: -1.0,
                },
            ],
        };
        cfg.seed = 42;
        cfg.energy_level = 3;
        let text = cfg.to_json().unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
        for name in ["simulate", "energies", "nscan", "xnorm", "bilinear-scan", "suite", "verify"] {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(parse(&c.to_json().unwrap()).unwrap(), c);
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn random_field_is_seeded_and_shaped() {
        let grid = Grid::standard(32).unwrap();
        let a = random_field(grid, 2.0, 1.0, 5);
        assert_eq!(a, random_field(grid, 2.0, 1.0, 5));
        assert_ne!(a, random_field(grid, 2.0, 1.0, 6));
        assert_eq!(a.coeff(0).norm(), 0.0);
        assert!((a.coeff(3).norm() - 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(a.coeff(grid.dealias_cutoff() + 1).norm(), 0.0);
    }

    #[test]
    fn manifest_hash_and_atomic_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let bytes = cfg.to_json().unwrap().into_bytes();
        let mut w = OutputWriter::new(dir.path(), bytes.clone()).unwrap();
        w.csv("rows.csv", &[XNormRow { s: 0.0, b: 0.5, delta: 0.1, norm: 1.25 }]).unwrap();
        w.json("summary.json", &vec![1, 2]).unwrap();
        let m = w.finish(&cfg).unwrap();
        assert_eq!(m.outputs, vec!["rows.csv", "summary.json"]);
        assert!(m.finished_unix >= m.started_unix);
        let text = fs::read_to_string(dir.path().join("rows.csv")).unwrap();
        assert_eq!(text, "s,b,delta,norm\n0.0,0.5,0.1,1.25\n");
        assert_eq!(verify_manifest(dir.path(), &bytes).unwrap(), m);
        // timestamps must survive the JSON round trip bit for bit
        let mut t = 1.7923917250297713e9_f64;
        for _ in 0..10_000 {
            let back: f64 = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            assert_eq!(back.to_bits(), t.to_bits());
            t = f64::from_bits(t.to_bits() + 7919);
        }
        assert!(matches!(verify_manifest(dir.path(), b"other"), Err(Error::HashMismatch { .. })));
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn trajectory_persistence_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.grid.modes = 32;
        cfg.integration.t_final = 0.01;
        cfg.integration.sample_every = 2;
        let traj = run_simulate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::new(dir.path(), Vec::new()).unwrap();
        w.csv("trajectory.csv", &trajectory_rows(&traj)).unwrap();
        let rows: Vec<StateRow> = read_csv(&dir.path().join("trajectory.csv")).unwrap();
        let back = trajectory_from_rows(&rows, *traj.grid(), cfg.phys().unwrap(), cfg.iparams().unwrap(), cfg.integration.dt, true).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((t0, a), (t1, b)) in traj.samples().iter().zip(back.samples()) {
            assert_eq!(t0, t1);
            assert_eq!(a.max_abs_diff(b), 0.0);
        }
    }

    #[test]
    fn nscan_preconditions_and_trivial_data() {
        let mut cfg = RunConfig::preset("nscan").unwrap();
        cfg.grid.modes = 64;
        cfg.integration.dt = 1e-3;
        cfg.integration.sample_every = 10;
        cfg.nscan.delta = 0.05;
        cfg.nscan.big_ns = vec![4.0, 8.0, 16.0];
        assert!(matches!(run_nscan(&cfg), Err(Error::TooFewSamples { .. })));
        cfg.nscan.big_ns = vec![4.0, 8.0, 16.0, 32.0];
        assert!(run_nscan(&cfg).is_err());

        cfg.nscan.big_ns = vec![4.0, 6.0, 8.0, 16.0];
        cfg.initial_condition = InitialCondition::Modes { modes: Vec::new() };
        let zero = run_nscan(&cfg).unwrap();
        assert!(zero.rows.iter().all(|r| r.increment == Some(0.0)));
        assert_eq!(zero.slope, None);

        cfg.initial_condition = InitialCondition::Modes {
            modes: vec![
                ModeSpec {
                    k: 1,
                    amplitude: 0.1,
                    phase: 0.3,
                },
                ModeSpec {
                    k: 2,
                    amplitude: 0.05,
                    phase: -1.1,
                },
            ],
        };
        let low = run_nscan(&cfg).unwrap();
        for r in &low.rows {
            assert!(r.increment.unwrap() < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn nscan_blow_up_marks_every_leg() {
        let mut cfg = RunConfig::preset("nscan").unwrap();
        cfg.grid.modes = 32;
        cfg.integration.dt = 0.05;
        cfg.integration.sample_every = 1;
        cfg.nscan.delta = 2.0;
        cfg.nscan.big_ns = vec![4.0, 5.0, 6.0, 8.0];
        cfg.initial_condition = InitialCondition::Random {
            decay: 0.0,
            amplitude: 1e3,
        };
        let rep = run_nscan(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.rows.iter().all(|r| r.increment.is_none() && r.status.starts_with("failed")));
        assert!(!rep.passed());
    }

    #[test]
    fn bound_suite_is_deterministic() {
        let mut cfg = RunConfig::default();
        cfg.bounds.samples = 2000;
        let a = run_bound_suite(&cfg).unwrap();
        let b = run_bound_suite(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.reports.iter().all(|r| r.bound.max_ratio.is_finite()));
        assert!(a.passed);
    }

    #[test]
    fn telescope_defect_vanishes_on_integers() {
        let p = PhysParams::new(1.0, 1.0).unwrap();
        assert!(telescope_defect(1000, &p, 3).unwrap() <= 1e-12);
    }
}
