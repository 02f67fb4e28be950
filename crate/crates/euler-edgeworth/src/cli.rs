//! Command-line front end: JSON run configuration, subcommand dispatch,
//! deterministic seeding and CSV/JSON emission. Numbers are written with 17
//! significant digits so reruns can be audited byte for byte; all
//! randomness is keyed by (seed, stream), so the worker count never changes
//! any output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::edgeworth::{
    studentized_coeffs, studentized_density, MarginalVDensity, PairDensity,
};
use crate::errorproc::ErrorFunctionals;
use crate::experiments::{
    clt_validation, density_improvement, leading_term_gaps, limit_variance, second_order_check,
    strong_error, symbol_sample, weak_error, Campaign, TestFunction,
};
use crate::grid::TimeGrid;
use crate::limitlaw::LimitLawProfile;
use crate::malliavin::KbarMode;
use crate::model::{builtin_model, check_derivatives, BuiltinKind, DiffusionModel};
use crate::pathsim::{sample_brownian, write_dump, CoupledPaths};

#[derive(Debug, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub mc: McConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Deserialize)]
pub struct ModelConfig {
    pub kind: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct GridConfig {
    pub n_list: Vec<usize>,
    pub m: usize,
    pub t_points: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize, Default)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub campaigns: Vec<String>,
    #[serde(default)]
    pub test_functions: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub h_paths: Option<usize>,
    #[serde(default)]
    pub h_n: Option<usize>,
    #[serde(default)]
    pub h_m: Option<usize>,
    #[serde(default)]
    pub inner_draws: Option<usize>,
}

/// Parse and validate a configuration file. Violations are reported all at
/// once, each with a path into the document.
pub fn parse_config(path: &Path) -> Result<RunConfig, Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| vec![format!("json syntax: {e}")])?;
    let mut errors = Vec::new();
    if BuiltinKind::parse(&config.model.kind).is_err() {
        errors.push(format!("model.kind: unknown kind `{}`", config.model.kind));
    } else if let Err(e) = config.build_model() {
        errors.push(format!("model.params: {e}"));
    }
    if config.grid.n_list.is_empty() {
        errors.push("grid.n_list: must be nonempty".into());
    }
    for (i, &n) in config.grid.n_list.iter().enumerate() {
        if n == 0 {
            errors.push(format!("grid.n_list[{i}]: must be >= 1"));
        }
    }
    if config.grid.m == 0 || !config.grid.m.is_power_of_two() {
        errors.push(format!(
            "grid.m: must be a power of two >= 1, got {}",
            config.grid.m
        ));
    }
    if config.grid.t_points.is_empty() {
        errors.push("grid.t_points: must be nonempty".into());
    }
    for (i, &t) in config.grid.t_points.iter().enumerate() {
        if !(t > 0.0 && t <= 1.0) {
            errors.push(format!("grid.t_points[{i}]: {t} outside (0, 1]"));
        }
    }
    if config.mc.paths == 0 {
        errors.push("mc.paths: must be >= 1".into());
    }
    for (i, name) in config.experiment.test_functions.iter().enumerate() {
        if TestFunction::parse(name).is_none() {
            errors.push(format!(
                "experiment.test_functions[{i}]: unknown function `{name}`"
            ));
        }
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

impl RunConfig {
    pub fn build_model(&self) -> Result<DiffusionModel, crate::model::ModelError> {
        builtin_model(BuiltinKind::parse(&self.model.kind)?, &self.model.params)
    }

    pub fn campaign(&self) -> Campaign {
        let model = self.build_model().expect("validated");
        let mut c = Campaign::new(
            model,
            self.grid.n_list.clone(),
            self.grid.m,
            self.mc.paths,
            self.grid.t_points[0],
            self.mc.seed,
        );
        if let Some(v) = self.experiment.h_paths {
            c.h_paths = v;
        }
        if let Some(v) = self.experiment.h_n {
            c.h_n = v;
        }
        if let Some(v) = self.experiment.h_m {
            c.h_m = v;
        }
        if let Some(v) = self.experiment.inner_draws {
            c.inner_draws = v;
        }
        c
    }
}

#[derive(Parser)]
#[command(
    name = "euler-edgeworth",
    about = "Second-order error analysis for the Euler scheme of scalar diffusions",
    version
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (env: EULER_EDGEWORTH_OUTDIR).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads (env: EULER_EDGEWORTH_WORKERS); 0 = all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate coupled paths; write terminal summaries and optional dumps.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Binary EWP1 dump of the Brownian increments.
        #[arg(long)]
        dump_paths: bool,
        /// Per-path functional CSV (t, X_ref, X_euler, V, Vbar, N) for the
        /// first few streams.
        #[arg(long)]
        functionals: bool,
    },
    /// Limit-law profiles and random-symbol coefficient tables.
    Coefficients {
        #[command(flatten)]
        common: Common,
    },
    /// Density evaluation tables.
    Density {
        #[command(flatten)]
        common: Common,
        /// studentized, pair or marginal.
        #[arg(long, default_value = "studentized")]
        kind: String,
    },
    /// Invariant suite; exit 1 on any failure.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Strong/weak error campaigns with rate regressions.
    Rates {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured campaigns and write a JSON manifest.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// 17-significant-digit decimal, round-trip safe for f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: PathBuf) -> std::io::Result<Output> {
        fs::create_dir_all(&dir)?;
        Ok(Output {
            dir,
            files: Vec::new(),
        })
    }

    fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<f64>]) -> std::io::Result<()> {
        let mut text = String::with_capacity(rows.len() * 64);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            let cells: Vec<String> = row.iter().map(|x| fmt_float(*x)).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_raw(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn resolve_common(common: &Common) -> Result<(RunConfig, Output, u64), i32> {
    let config = match parse_config(&common.config) {
        Ok(c) => c,
        Err(errors) => {
            for e in errors {
                eprintln!("config error: {e}");
            }
            return Err(2);
        }
    };
    let workers = common
        .workers
        .or_else(|| {
            std::env::var("EULER_EDGEWORTH_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if workers > 0 {
        // ignore the error if a pool already exists (tests, repeated calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let out_dir = common
        .output_dir
        .clone()
        .or_else(|| {
            std::env::var("EULER_EDGEWORTH_OUTDIR")
                .ok()
                .map(PathBuf::from)
        })
        .or_else(|| config.experiment.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let output = Output::new(out_dir).map_err(|e| {
        eprintln!("cannot create output dir: {e}");
        1
    })?;
    let seed = common.seed.unwrap_or(config.mc.seed);
    Ok((config, output, seed))
}

pub fn run() -> i32 {
    let args = CliArgs::parse();
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(args: CliArgs) -> Result<i32, Box<dyn std::error::Error>> {
    match args.command {
        Command::Simulate {
            common,
            dump_paths,
            functionals,
        } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            cmd_simulate(&campaign, &mut out, dump_paths, functionals)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(0)
        }
        Command::Coefficients { common } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            cmd_coefficients(&campaign, &mut out)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(0)
        }
        Command::Density { common, kind } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            cmd_density(&campaign, &kind, &mut out)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(0)
        }
        Command::Validate { common } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            let ok = cmd_validate(&campaign, &mut out)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::Rates { common } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            cmd_rates(&campaign, &config, &mut out)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(0)
        }
        Command::Report { common } => {
            let (config, mut out, seed) = match resolve_common(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut campaign = config.campaign();
            campaign.seed = seed;
            cmd_simulate(&campaign, &mut out, false, false)?;
            cmd_coefficients(&campaign, &mut out)?;
            cmd_density(&campaign, "studentized", &mut out)?;
            cmd_rates(&campaign, &config, &mut out)?;
            write_manifest(&common.config, &config, seed, &mut out)?;
            Ok(0)
        }
    }
}

fn cmd_simulate(
    campaign: &Campaign,
    out: &mut Output,
    dump_paths: bool,
    functionals: bool,
) -> Result<(), Box<dyn std::error::Error>> {
    for &n in &campaign.n_list {
        let grid = std::sync::Arc::new(TimeGrid::new(n, campaign.m, &[campaign.t])?);
        let t_index = grid.index_of_time(campaign.t).expect("t on grid");
        let mut rows = Vec::with_capacity(campaign.paths);
        for stream in 0..campaign.paths as u64 {
            let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
            let f = ErrorFunctionals::compute(&cp);
            rows.push(vec![
                stream as f64,
                cp.x_ref[t_index],
                cp.x_euler[t_index],
                f.v_path[t_index],
                f.vbar_path[t_index],
                f.n_path[t_index],
            ]);
        }
        out.write_csv(
            &format!("simulate_n{n}.csv"),
            "stream,x_ref,x_euler,v,vbar,n2",
            &rows,
        )?;
        if dump_paths {
            let paths: Vec<_> = (0..campaign.paths.min(64) as u64)
                .map(|s| sample_brownian(&grid, campaign.seed, s))
                .collect();
            let mut bytes = Vec::new();
            write_dump(&mut bytes, &grid, &paths)?;
            out.write_raw(&format!("paths_n{n}.ewp1"), &bytes)?;
        }
        if functionals {
            for stream in 0..campaign.paths.min(4) as u64 {
                let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
                let f = ErrorFunctionals::compute(&cp);
                let rows: Vec<Vec<f64>> = (0..=grid.steps())
                    .map(|i| {
                        vec![
                            grid.times()[i],
                            cp.x_ref[i],
                            cp.x_euler[i],
                            f.v_path[i],
                            f.vbar_path[i],
                            f.n_path[i],
                        ]
                    })
                    .collect();
                out.write_csv(
                    &format!("functionals_n{n}_s{stream}.csv"),
                    "t,x_ref,x_euler,v,vbar,n2",
                    &rows,
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_coefficients(
    campaign: &Campaign,
    out: &mut Output,
) -> Result<(), Box<dyn std::error::Error>> {
    // per-path limit-law profile export
    let grid = std::sync::Arc::new(TimeGrid::new(campaign.h_n, campaign.h_m, &[campaign.t])?);
    let seed = campaign.seed ^ 0x9d2c_5680_a5a5_1e35;
    let mut rows = Vec::new();
    for stream in 0..campaign.h_paths.min(4096) as u64 {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, seed, stream)?;
        let p = LimitLawProfile::compute(&cp, campaign.t, campaign.inner_draws)?;
        rows.push(vec![
            stream as f64,
            p.c_t,
            p.s_t,
            p.a3_t,
            p.mu_t,
            p.theta.t11,
            p.theta.t21,
            p.theta.t31,
            p.theta.t22,
            p.theta.t32,
            p.theta.t33,
        ]);
    }
    out.write_csv(
        "profile.csv",
        "stream,c_t,s_t,a3_t,mu_t,theta11,theta21,theta31,theta22,theta32,theta33",
        &rows,
    )?;
    // symbol coefficients and studentized a's (degenerate models stop here)
    match symbol_sample(campaign, KbarMode::PathwiseK) {
        Ok(sample) => {
            let rows: Vec<Vec<f64>> = sample
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    vec![
                        i as f64, h.h1, h.h2, h.h3, h.h4, h.h5, h.h6, h.h7, h.h8, h.c_t,
                        h.sigma_t,
                    ]
                })
                .collect();
            out.write_csv(
                "symbols.csv",
                "stream,h1,h2,h3,h4,h5,h6,h7,h8,c_t,sigma_t",
                &rows,
            )?;
            let coeffs = studentized_coeffs(&sample)?;
            out.write_csv(
                "studentized_coeffs.csv",
                "a1,a1_stderr,a2,a2_stderr,a3,a3_stderr",
                &[vec![
                    coeffs.a1.value,
                    coeffs.a1.stderr,
                    coeffs.a2.value,
                    coeffs.a2.stderr,
                    coeffs.a3.value,
                    coeffs.a3.stderr,
                ]],
            )?;
        }
        Err(e) => eprintln!("symbol table skipped: {e}"),
    }
    Ok(())
}

fn cmd_density(
    campaign: &Campaign,
    kind: &str,
    out: &mut Output,
) -> Result<(), Box<dyn std::error::Error>> {
    let sample = symbol_sample(campaign, KbarMode::PathwiseK)?;
    let n = *campaign.n_list.first().unwrap_or(&64);
    match kind {
        "studentized" => {
            let coeffs = studentized_coeffs(&sample)?;
            let rows: Vec<Vec<f64>> = (0..=800)
                .map(|i| {
                    let y = -5.0 + 10.0 * i as f64 / 800.0;
                    let v = studentized_density(&coeffs, n, y);
                    vec![
                        y,
                        v.order0,
                        v.correction,
                        v.total,
                        v.total.max(0.0),
                    ]
                })
                .collect();
            out.write_csv(
                "density_studentized.csv",
                "y,order0,correction,total,rectified",
                &rows,
            )?;
        }
        "pair" => {
            let p = PairDensity::from_sample(&sample, n)?;
            let (lo, hi) = p.x_support();
            let zmax = 8.0 * hi.sqrt();
            let mut rows = Vec::new();
            for ix in 0..=40 {
                let x = lo + (hi - lo) * ix as f64 / 40.0;
                let slice = match p.slice(x) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                for iz in 0..=80 {
                    let z = -zmax + 2.0 * zmax * iz as f64 / 80.0;
                    let v = slice.eval(z);
                    rows.push(vec![z, x, v.order0, v.correction, v.total, v.total.max(0.0)]);
                }
            }
            out.write_csv(
                "density_pair.csv",
                "z,x,order0,correction,total,rectified",
                &rows,
            )?;
        }
        "marginal" => {
            let d = MarginalVDensity::from_sample(&sample, n)?;
            let zmax = 10.0
                * sample
                    .iter()
                    .map(|h| (h.sigma_t * h.sigma_t * h.c_t).sqrt())
                    .fold(0.0, f64::max);
            let rows: Vec<Vec<f64>> = (0..=800)
                .map(|i| {
                    let z = -zmax + 2.0 * zmax * i as f64 / 800.0;
                    let v = d.evaluate(z);
                    vec![z, v.order0, v.correction, v.total, v.total.max(0.0), v.stderr]
                })
                .collect();
            out.write_csv(
                "density_marginal.csv",
                "z,order0,correction,total,rectified,stderr",
                &rows,
            )?;
        }
        other => {
            eprintln!("unknown density kind `{other}` (studentized, pair, marginal)");
            return Ok(());
        }
    }
    Ok(())
}

fn cmd_validate(campaign: &Campaign, out: &mut Output) -> Result<bool, Box<dyn std::error::Error>> {
    let mut ok = true;
    let mut lines: Vec<String> = Vec::new();
    let mut check = |name: &str, pass: bool, detail: String| {
        lines.push(format!(
            "{} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        ));
        ok &= pass;
    };

    // model derivative consistency on a grid in the support region
    let x0 = campaign.model.x0();
    let xs: Vec<f64> = (0..100)
        .map(|i| x0 - 1.0 + 2.0 * i as f64 / 99.0)
        .collect();
    let report = check_derivatives(&campaign.model, &xs, 1e-4);
    for pair in &report.pairs {
        check(
            &format!("derivative {}", pair.pair),
            !pair.flagged,
            format!("max mismatch {:.3e}", pair.max_mismatch),
        );
    }

    // reproducibility of a path
    let grid = std::sync::Arc::new(TimeGrid::new(
        campaign.n_list[0],
        campaign.m,
        &[campaign.t],
    )?);
    let a = sample_brownian(&grid, campaign.seed, 0);
    let b = sample_brownian(&grid, campaign.seed, 0);
    check(
        "rng determinism",
        a.increments() == b.increments(),
        "identical keys give identical paths".into(),
    );

    // coupling invariant: recompute both paths from the stored increments
    let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, 1)?;
    let rebuilt = CoupledPaths::from_path(&campaign.model, cp.path.clone())?;
    check(
        "coupling invariant",
        rebuilt.x_euler == cp.x_euler && rebuilt.x_ref == cp.x_ref,
        "paths are a pure function of the increments".into(),
    );

    let sigma_ok = cp.sigma.iter().all(|s| *s > 0.0) && cp.sigma[0] == 1.0;
    check("sigma positivity", sigma_ok, "Sigma > 0, Sigma_0 = 1".into());

    // limit-law profile invariants on a few paths
    let mut worst_minor: f64 = 0.0;
    let mut theta_ok = true;
    let mut c_nonneg = true;
    for stream in 0..8u64 {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
        let p = LimitLawProfile::compute(&cp, campaign.t, 512)?;
        c_nonneg &= p.c_t >= 0.0 && p.s_t >= 0.0;
        theta_ok &= p.theta.is_psd(1e-10);
        worst_minor = worst_minor.min(p.theta.min_minor);
        theta_ok &= (p.theta.t11 - p.c_t).abs() <= 1e-12 * (1.0 + p.c_t);
    }
    check("C and S nonnegative", c_nonneg, "C_T >= 0, S_T >= 0".into());
    check(
        "theta psd and theta11 = C_T",
        theta_ok,
        format!("min principal minor {worst_minor:.3e}"),
    );

    // symbol identities when the model is nondegenerate
    match symbol_sample(
        &{
            let mut c = campaign.clone();
            c.h_paths = c.h_paths.min(64);
            c
        },
        KbarMode::PathwiseK,
    ) {
        Ok(sample) => {
            let mut id_ok = true;
            let mut worst: f64 = 0.0;
            for h in &sample {
                let scale = 1e-12 + h.h5.abs() + h.h7.abs();
                let e1 = (h.h4 - 0.5 * h.h5).abs() / scale;
                let e2 = (4.0 * h.h6 - h.h7).abs() / scale;
                let e3 = (h.h7 - h.h8).abs() / scale;
                worst = worst.max(e1).max(e2).max(e3);
                id_ok &= e1 < 1e-8 && e2 < 1e-8 && e3 < 1e-8;
            }
            check(
                "symbol identities H4 = H5/2, 4H6 = H7 = H8",
                id_ok,
                format!("worst relative deviation {worst:.3e}"),
            );
            let coeffs = studentized_coeffs(&sample)?;
            let total = crate::edgeworth::simpson(
                |y| studentized_density(&coeffs, campaign.n_list[0], y).total,
                -12.0,
                12.0,
                4001,
            );
            check(
                "studentized density normalization",
                (total - 1.0).abs() < 1e-6,
                format!("integral {total:.9}"),
            );
        }
        Err(e) => {
            check(
                "degenerate model detected",
                true,
                format!("symbol pipeline skipped: {e}"),
            );
        }
    }

    for line in &lines {
        println!("{line}");
    }
    let text = lines.join("\n") + "\n";
    out.write_raw("validate.txt", text.as_bytes())?;
    Ok(ok)
}

fn cmd_rates(
    campaign: &Campaign,
    config: &RunConfig,
    out: &mut Output,
) -> Result<(), Box<dyn std::error::Error>> {
    let strong = strong_error(campaign, 2.0)?;
    let rows: Vec<Vec<f64>> = strong
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n as f64,
                r.empirical.value,
                r.empirical.stderr,
                r.predicted.unwrap_or(f64::NAN),
                r.ratio.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    out.write_csv(
        "strong_error.csv",
        "n,empirical,stderr,predicted,ratio",
        &rows,
    )?;
    println!(
        "strong error: slope {:.4} +- {:.4}",
        strong.fit.slope, strong.fit.slope_stderr
    );

    for name in &config.experiment.test_functions {
        let f = TestFunction::parse(name).expect("validated");
        let weak = weak_error(campaign, f)?;
        let rows: Vec<Vec<f64>> = weak
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.n as f64,
                    r.empirical.value,
                    r.empirical.stderr,
                    r.scaled.value,
                    r.scaled.stderr,
                    if r.coupling_ok { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        out.write_csv(
            &format!("weak_error_{}.csv", f.name()),
            "n,empirical,stderr,scaled,scaled_stderr,coupling_ok",
            &rows,
        )?;
        if weak.surrogate_warning {
            eprintln!("weak error: reference is a fine-Euler surrogate; bias may reach O(1/(n m))");
        }
        match weak.fit {
            Some(fit) => println!(
                "weak error[{}]: slope {:.4} +- {:.4}, predicted constant {:.6e} +- {:.2e}",
                f.name(),
                fit.slope,
                fit.slope_stderr,
                weak.predicted.value,
                weak.predicted.stderr
            ),
            None => println!(
                "weak error[{}]: empirical error indistinguishable from zero, predicted constant {:.6e} +- {:.2e}",
                f.name(),
                weak.predicted.value,
                weak.predicted.stderr
            ),
        }
    }

    let clt = clt_validation(campaign, *campaign.n_list.last().unwrap())?;
    let rows: Vec<Vec<f64>> = clt
        .entries
        .iter()
        .map(|e| {
            vec![
                e.empirical.value,
                e.empirical.stderr,
                e.predicted,
                e.z_score,
            ]
        })
        .collect();
    out.write_csv("clt_validation.csv", "empirical,stderr,predicted,z", &rows)?;

    let imp = density_improvement(campaign)?;
    let rows: Vec<Vec<f64>> = imp
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n as f64,
                r.d0,
                r.d1,
                if r.improved { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    out.write_csv("density_improvement.csv", "n,d0,d1,improved", &rows)?;

    // expansion checks at the largest n
    let n_big = *campaign.n_list.last().unwrap();
    let lv = limit_variance(campaign, n_big)?;
    let so = second_order_check(campaign, n_big)?;
    let gaps = leading_term_gaps(campaign)?;
    let mut rows = vec![vec![
        n_big as f64,
        lv.var_v.value,
        lv.var_v.stderr,
        lv.predicted,
        so.mean.value,
        so.mean_predicted,
        so.variance.value,
        so.var_predicted,
    ]];
    rows[0].extend(gaps.iter().map(|(_, g)| *g));
    out.write_csv(
        "expansion_checks.csv",
        "n,var_v,var_v_stderr,var_v_pred,n2_mean,n2_mean_pred,n2_var,n2_var_pred",
        &rows,
    )?;
    Ok(())
}

fn write_manifest(
    config_path: &Path,
    _config: &RunConfig,
    seed: u64,
    out: &mut Output,
) -> Result<(), Box<dyn std::error::Error>> {
    let raw = fs::read(config_path)?;
    let mut hasher = Sha256::new();
    hasher.update(&raw);
    let config_hash = format!("{:x}", hasher.finalize());
    let mut tables = out.files.clone();
    tables.sort();
    let manifest = serde_json::json!({
        "config_hash": config_hash,
        "seed": seed,
        "tables": tables,
    });
    let mut file = fs::File::create(out.dir.join("manifest.json"))?;
    writeln!(file, "{}", serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
