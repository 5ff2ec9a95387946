use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use benjamin_core::bourgain::max_over_median;
use benjamin_core::harness::{self, OutputWriter, RunConfig};
use benjamin_core::multipliers::{scan_bound, Lemma, ScanReport};
use benjamin_core::Error;

/// Periodic Benjamin-equation solver and I-method laboratory.
#[derive(Parser)]
#[command(name = "benjamin", version)]
struct Cli {
    /// JSON run configuration; the subcommand's preset when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all results are independent of this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the configured datum; writes conserved.csv and trajectory.csv.
    Simulate,
    /// Finite-difference check of the energy identities along a solution.
    Energies {
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
        level: Option<u8>,
        /// Output directory of an earlier `simulate` run to analyse instead
        /// of integrating afresh.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Empirical bound scan for one lemma (all when `--lemma` is absent),
    /// printed as JSON.
    Verify {
        #[arg(long)]
        lemma: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        nu: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        mu: Option<f64>,
        #[arg(long = "bigN")]
        big_n: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        s: Option<f64>,
        /// Instead of scanning, check the manifest of a finished run directory
        /// against its `config.json`.
        #[arg(long, conflicts_with_all = ["lemma", "samples", "nu", "mu", "big_n", "s"])]
        manifest: Option<PathBuf>,
    },
    /// Almost-conservation increment of E⁴ as N doubles.
    Nscan,
    /// X_{s,b} norm of the windowed free evolution of the datum.
    Xnorm {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        s: f64,
        #[arg(long, default_value_t = 0.5 + benjamin_core::bourgain::DEFAULT_EPS)]
        b: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Bilinear-estimate ratios over an (N, δ) grid and the I^s separation scan.
    BilinearScan {
        #[arg(long, allow_negative_numbers = true)]
        s: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        delta: Option<Vec<f64>>,
        #[arg(long = "bigN", value_delimiter = ',')]
        big_n: Option<Vec<f64>>,
    },
    /// Identity and bound suites.
    Suite,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Energies { .. } => "energies",
            Command::Verify { .. } => "verify",
            Command::Nscan => "nscan",
            Command::Xnorm { .. } => "xnorm",
            Command::BilinearScan { .. } => "bilinear-scan",
            Command::Suite => "suite",
        }
    }
}

const PASS: ExitCode = ExitCode::SUCCESS;

fn fail() -> ExitCode {
    ExitCode::from(1)
}

fn usage() -> ExitCode {
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { usage() } else { PASS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Parse { .. } | Error::InvalidParameter(_) | Error::TooFewSamples { .. } => usage(),
                _ => fail(),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    let name = cli.command.name();
    let (mut cfg, bytes) = match &cli.config {
        Some(path) => {
            let bytes = fs::read(path)?;
            let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse {
                file: path.clone(),
                message: e.to_string(),
            })?;
            (RunConfig::from_json_str(&text, path)?, bytes)
        }
        None => {
            let cfg = RunConfig::preset(name)?;
            let bytes = cfg.to_json()?.into_bytes();
            (cfg, bytes)
        }
    };
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    if let Command::Verify {
        manifest: Some(dir), ..
    } = &cli.command
    {
        let bytes = match &cli.config {
            Some(_) => bytes,
            None => fs::read(dir.join("config.json"))?,
        };
        return match harness::verify_manifest(dir, &bytes) {
            Ok(m) => {
                println!("verify: manifest {} matches config ({} outputs)", m.config_hash, m.outputs.len());
                Ok(PASS)
            }
            Err(e @ Error::HashMismatch { .. }) => {
                println!("verify: FAIL {e}");
                Ok(fail())
            }
            Err(e) => Err(e),
        };
    }

    let mut out = OutputWriter::new(&cfg.output_dir, bytes.clone())?;
    out.raw("config.json", &bytes)?;
    let mut code = PASS;
    match &cli.command {
        Command::Verify {
            lemma,
            samples,
            nu,
            mu,
            big_n,
            s,
            ..
        } => {
            cfg.physics.nu = nu.unwrap_or(cfg.physics.nu);
            cfg.physics.mu = mu.unwrap_or(cfg.physics.mu);
            cfg.imethod.big_n = big_n.unwrap_or(cfg.imethod.big_n);
            cfg.imethod.s = s.unwrap_or(cfg.imethod.s);
            cfg.bounds.samples = samples.unwrap_or(cfg.bounds.samples);
            if cfg.bounds.samples == 0 {
                return Err(Error::InvalidParameter("--samples must be positive".into()));
            }
            let (p, ip) = (cfg.phys()?, cfg.iparams()?);
            let lemmas = match lemma {
                Some(id) => vec![Lemma::parse(id)?],
                None => Lemma::ALL.to_vec(),
            };
            let reports: Vec<ScanReport> =
                lemmas.iter().map(|&l| scan_bound(l, cfg.bounds.samples, cfg.seed, &p, &ip)).collect();
            let json = match reports.as_slice() {
                [one] => serde_json::to_string_pretty(one),
                all => serde_json::to_string_pretty(all),
            }
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            out.raw("verify.json", json.as_bytes())?;
            println!("{json}");
            if !lemmas.iter().zip(&reports).all(|(&l, r)| harness::bound_report_ok(l, r)) {
                code = fail();
            }
        }
        Command::Simulate => {
            let traj = harness::run_simulate(&cfg)?;
            out.csv("conserved.csv", traj.conserved())?;
            out.csv("trajectory.csv", &harness::trajectory_rows(&traj))?;
            println!(
                "simulate: {} samples, mean drift {:.3e}, relative L2 drift {:.3e}",
                traj.len(),
                traj.mean_drift(),
                traj.l2_drift()
            );
        }
        Command::Energies { level, trajectory } => {
            let rep = match trajectory {
                Some(dir) => harness::energies_from_dir(dir, *level)?.1,
                None => {
                    if let Some(l) = level {
                        cfg.energy_level = *l;
                    }
                    harness::run_energies(&cfg)?
                }
            };
            out.csv("energies.csv", &rep.rows)?;
            out.json("energies_summary.json", &(rep.level, rep.rel_err))?;
            println!("energies: level {} relative residuals {:?}", rep.level, rep.rel_err);
        }
        Command::Nscan => {
            let rep = harness::run_nscan(&cfg)?;
            out.csv("nscan.csv", &rep.rows)?;
            out.json("nscan_summary.json", &rep)?;
            for r in &rep.rows {
                println!("nscan: N={} increment={:?} {}", r.big_n, r.increment, r.status);
            }
            println!("nscan: slope {:?} strictly decreasing {}", rep.slope, rep.strictly_decreasing);
            if !rep.passed() {
                code = fail();
            }
        }
        Command::Xnorm { s, b, delta } => {
            let row = harness::run_xnorm(&cfg, *s, *b, *delta)?;
            out.csv("xnorm.csv", &[row])?;
            println!("xnorm: s={s} b={b} delta={delta} norm={}", row.norm);
        }
        Command::BilinearScan { s, b, delta, big_n } => {
            if let Some(s) = s {
                cfg.bilinear.s = *s;
            }
            if let Some(b) = b {
                cfg.bilinear.eps = b - 0.5;
            }
            if let Some(d) = delta {
                cfg.bilinear.delta = d.clone();
            }
            if let Some(n) = big_n {
                cfg.bilinear.big_ns = n.clone();
            }
            let pts = harness::run_bilinear_scan(&cfg)?;
            let is_rows = harness::run_is_scan(&cfg)?;
            out.csv("bilinear.csv", &pts)?;
            out.csv("is_scan.csv", &is_rows)?;
            let ratios: Vec<f64> = pts.iter().map(|p| p.ratio).collect();
            let spread = max_over_median(&ratios);
            println!("bilinear-scan: {} points, max/median {:?}", pts.len(), spread);
            let mut ok = spread.is_some_and(|x| x <= 10.0);
            for s_exp in [0.0, 0.25, 0.5] {
                let r: Vec<f64> = is_rows.iter().filter(|q| q.s_exp == s_exp).map(|q| q.ratio).collect();
                let spread = max_over_median(&r);
                println!("bilinear-scan: I^s s={s_exp} max/median {spread:?}");
                ok &= spread.is_some_and(|x| x <= 10.0);
            }
            if !ok {
                code = fail();
            }
        }
        Command::Suite => {
            let ids = harness::run_identity_suite(&cfg)?;
            let bounds = harness::run_bound_suite(&cfg)?;
            out.csv("identity.csv", &identity_rows(&ids))?;
            out.csv("bounds.csv", &bound_rows(&bounds))?;
            out.json("suite.json", &(&ids, &bounds))?;
            for l in &ids.legs {
                println!(
                    "suite: level {} M={} errors {:?} orders {:?} {}",
                    l.level,
                    l.modes,
                    l.errors,
                    l.orders,
                    verdict(l.passed)
                );
            }
            println!("suite: telescoping defect {:.3e}", ids.telescope_max_defect);
            for r in &bounds.reports {
                println!(
                    "suite: bound {} sup {:.4e} inf {:.4e} hard errors {}",
                    r.bound.lemma, r.bound.max_ratio, r.bound.min_ratio, r.hard_errors
                );
            }
            let ok = ids.passed && bounds.passed;
            println!("suite: {}", verdict(ok));
            if !ok {
                code = fail();
            }
        }
    }
    out.finish(&cfg)?;
    Ok(code)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Serialize)]
struct IdentityRow {
    level: u8,
    #[serde(rename = "M")]
    modes: usize,
    tolerance: f64,
    err_dt: f64,
    err_dt_half: f64,
    err_dt_quarter: f64,
    order_1: f64,
    order_2: f64,
    passed: bool,
}

fn identity_rows(s: &harness::IdentitySuite) -> Vec<IdentityRow> {
    s.legs
        .iter()
        .map(|l| IdentityRow {
            level: l.level,
            modes: l.modes,
            tolerance: l.tolerance,
            err_dt: l.errors[0],
            err_dt_half: l.errors[1],
            err_dt_quarter: l.errors[2],
            order_1: l.orders[0],
            order_2: l.orders[1],
            passed: l.passed,
        })
        .collect()
}

#[derive(Serialize)]
struct BoundRow<'a> {
    lemma: &'a str,
    samples: usize,
    max_ratio: f64,
    min_ratio: f64,
    violations: usize,
    resonant: usize,
    hard_errors: usize,
    seed: u64,
}

fn bound_rows(s: &harness::BoundSuite) -> Vec<BoundRow<'_>> {
    s.reports
        .iter()
        .map(|r| BoundRow {
            lemma: &r.bound.lemma,
            samples: r.bound.samples,
            max_ratio: r.bound.max_ratio,
            min_ratio: r.bound.min_ratio,
            violations: r.bound.violations,
            resonant: r.resonant,
            hard_errors: r.hard_errors,
            seed: r.bound.seed,
        })
        .collect()
}
