//! Command-line front end: `simulate`, `train`, `oracle`, `experiment`, `audit`.
//!
//! Every run reads one TOML file (see `RunConfig`). Seeds inside experiment
//! specs are offsets from the global seed, so `--seed` shifts a whole sweep.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diagnostics::{
    cell_seeds, consistency_experiment, convergence_experiment, decomposition_experiment,
    gmm_objective, gradient_audit, linearization_experiment, regret_harness, train_discrete,
    DecompositionSpec, Instance, LinearizationSpec, NetSpec, RegretSpec, SweepSpec,
};
use crate::error::{Error, Result};
use crate::game::{sgda_run, AveragedEstimator, Estimator, GameConfig, Sample, TrainTrace};
use crate::io::{sha256_hex, Table};
use crate::nn::{NetConfig, NetworkState};
use crate::oracle::{regularity_sum, svd_system, TikhonovOracle};
use crate::sem::{gen_iv, gen_panel, read_samples_csv, write_samples_csv, IvDesign, PanelDesign, TestFunction};
use crate::sem::{gen_discrete, DiscreteDesign};

/// Tolerance of the regret decomposition identity checked by `experiment`.
pub const IDENTITY_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "asem", version, about = "Adversarial neural estimation of structural equation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Write tables as JSON arrays instead of CSV.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw samples from the configured generator.
    Simulate,
    /// Run SGDA on generated or stored samples.
    Train,
    /// Tikhonov solution, singular system and truth of a discrete instance.
    Oracle,
    /// Run a sweep or harness from the `[experiment]` section.
    Experiment,
    /// Compare analytic gradients with finite differences.
    Audit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Oracle => "oracle",
            Command::Experiment => "experiment",
            Command::Audit => "audit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorSection>,
    /// Sample CSV used by `train` when no generator is given.
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub audit: Option<AuditSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSection {
    Iv { n: usize, design: IvDesign },
    Panel { design: PanelDesign },
    Discrete { n: usize, instance: Instance },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub net: NetSpec,
    pub width: usize,
    pub alpha: f64,
    pub eta: f64,
    pub iterations: usize,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    #[serde(default = "one")]
    pub batch_size: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub instance: Instance,
    pub alpha: f64,
    /// Regenerates the truth at this smoothness (circular instances only).
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentSection {
    Convergence(SweepSpec),
    Consistency(SweepSpec),
    Linearization(LinearizationSpec),
    Regret(RegretSpec),
    Decomposition(DecompositionSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub nets: Vec<NetConfig>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_audit_alpha")]
    pub alpha: f64,
    #[serde(default = "default_audit_tol")]
    pub tolerance: f64,
}

fn default_probes() -> usize {
    100
}

fn default_audit_alpha() -> f64 {
    0.1
}

fn default_audit_tol() -> f64 {
    1e-5
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Applies the global seed to every seed inside an experiment spec.
    fn resolved_experiment(&self) -> Option<ExperimentSection> {
        let s = self.seed;
        let shift = |v: &mut Vec<u64>| v.iter_mut().for_each(|x| *x = x.wrapping_add(s));
        self.experiment.clone().map(|mut e| {
            match &mut e {
                ExperimentSection::Convergence(sp) | ExperimentSection::Consistency(sp) => shift(&mut sp.seeds),
                ExperimentSection::Linearization(sp) => sp.seed = sp.seed.wrapping_add(s),
                ExperimentSection::Regret(sp) => shift(&mut sp.seeds),
                ExperimentSection::Decomposition(sp) => sp.seed = sp.seed.wrapping_add(s),
            }
            e
        })
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Exit status for an error: 1 for invalid input, 3 for a failed invariant,
/// 2 for anything that went wrong while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Toml(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidPmf(_)
        | Error::InvalidAlpha(_) => 1,
        Error::Invariant(_) => 3,
        _ => 2,
    }
}

struct Ctx {
    command: Command,
    config: RunConfig,
    hash: String,
    out: PathBuf,
    json: bool,
    files: Vec<String>,
}

impl Ctx {
    fn comment(&self, extra: &str) -> String {
        let mut c = format!("config_sha256={} seed={}", self.hash, self.config.seed);
        if !extra.is_empty() {
            c.push(' ');
            c.push_str(extra);
        }
        c
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_table(&mut self, stem: &str, table: &Table, extra: &str) -> Result<()> {
        if self.json {
            let mut w = self.create(&format!("{stem}.json"))?;
            serde_json::to_writer_pretty(&mut w, &table.to_json())?;
            writeln!(w)?;
        } else {
            let comment = self.comment(extra);
            let w = self.create(&format!("{stem}.csv"))?;
            table.write_csv(w, Some(&comment))?;
        }
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        Ok(())
    }

    fn manifest(&mut self, extra: Value) -> Result<()> {
        let mut doc = json!({
            "command": self.command.name(),
            "config_sha256": self.hash,
            "seed": self.config.seed,
            "config": self.config,
            "version": env!("CARGO_PKG_VERSION"),
        });
        if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
            d.extend(e);
        }
        let mut files = self.files.clone();
        files.push("manifest.json".into());
        doc["files"] = json!(files);
        let mut w = BufWriter::new(File::create(self.out.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        Ok(())
    }
}

fn missing(section: &str, command: Command) -> Error {
    Error::config(format!("`{}` needs a [{section}] section", command.name()))
}

/// Runs a parsed command line. Returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config PATH is required"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("--workers must be at least 1"));
        }
        // fails only if a global pool already exists (repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("asem_out"));
    let hash = config.hash();
    let mut ctx = Ctx {
        command: cli.command,
        config,
        hash,
        out,
        json: cli.json,
        files: Vec::new(),
    };
    // validate before touching the filesystem
    match cli.command {
        Command::Simulate => {
            ctx.config.generator.as_ref().ok_or_else(|| missing("generator", cli.command))?;
        }
        Command::Train => {
            ctx.config.train.as_ref().ok_or_else(|| missing("train", cli.command))?;
            if ctx.config.generator.is_none() && ctx.config.samples.is_none() {
                return Err(Error::config("`train` needs a [generator] section or a `samples` file"));
            }
        }
        Command::Oracle => {
            ctx.config.oracle.as_ref().ok_or_else(|| missing("oracle", cli.command))?;
        }
        Command::Experiment => {
            ctx.config.experiment.as_ref().ok_or_else(|| missing("experiment", cli.command))?;
        }
        Command::Audit => {
            ctx.config.audit.as_ref().ok_or_else(|| missing("audit", cli.command))?;
        }
    }
    log::info!("{} with config {} -> {}", cli.command.name(), ctx.hash, ctx.out.display());
    fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&mut ctx),
        Command::Train => cmd_train(&mut ctx),
        Command::Oracle => cmd_oracle(&mut ctx),
        Command::Experiment => cmd_experiment(&mut ctx),
        Command::Audit => cmd_audit(&mut ctx),
    }
}

fn generate(section: &GeneratorSection, seed: u64) -> Result<Vec<Sample>> {
    match section {
        GeneratorSection::Iv { n, design } => gen_iv(design, *n, seed),
        GeneratorSection::Panel { design } => gen_panel(design, seed),
        GeneratorSection::Discrete { n, instance } => gen_discrete(&instance.design(None)?, *n, seed),
    }
}

fn write_samples(ctx: &mut Ctx, samples: &[Sample]) -> Result<()> {
    if ctx.json {
        let mut w = ctx.create("samples.json")?;
        serde_json::to_writer(&mut w, samples)?;
        writeln!(w)?;
    } else {
        let comment = ctx.comment("");
        let w = ctx.create("samples.csv")?;
        write_samples_csv(samples, w, Some(&comment))?;
    }
    Ok(())
}

fn cmd_simulate(ctx: &mut Ctx) -> Result<()> {
    let section = ctx.config.generator.clone().expect("checked");
    let samples = generate(&section, ctx.config.seed)?;
    write_samples(ctx, &samples)?;
    let n_points = samples.first().map(|s| s.eval_points.len()).unwrap_or(0);
    let dim = samples.first().map(Sample::dim).unwrap_or(0);
    ctx.manifest(json!({
        "design": section,
        "samples": samples.len(),
        "eval_points_per_sample": n_points,
        "dim": dim,
    }))
}

fn write_trace(ctx: &mut Ctx, trace: &TrainTrace) -> Result<()> {
    if ctx.json {
        let mut w = ctx.create("trace.json")?;
        serde_json::to_writer(&mut w, &trace.rows)?;
        writeln!(w)?;
    } else {
        let comment = ctx.comment("");
        let mut w = ctx.create("trace.csv")?;
        writeln!(w, "# {comment}")?;
        trace.write_csv(w)?;
    }
    let mut blob = ctx.create("snapshots.bin")?;
    for s in &trace.theta_snapshots {
        blob.write_all(&s.weights_to_le_bytes())?;
    }
    blob.flush()?;
    let first = &trace.theta_snapshots[0];
    ctx.write_json(
        "snapshots.json",
        &json!({
            "config": first.config(),
            "seed": first.seed(),
            "params": first.num_params(),
            "iterations": trace.snapshot_iters,
            "weights_file": "snapshots.bin",
            "encoding": "little-endian f64, one snapshot after another",
        }),
    )?;
    let theta: Value = serde_json::from_str(&trace.theta.to_json()?)?;
    let omega: Value = serde_json::from_str(&trace.omega.to_json()?)?;
    ctx.write_json("final_state.json", &json!({ "theta": theta, "omega": omega }))
}

fn cmd_train(ctx: &mut Ctx) -> Result<()> {
    let tr = ctx.config.train.clone().expect("checked");
    if tr.width == 0 {
        return Err(Error::config("train.width must be at least 1"));
    }
    let seed = ctx.config.seed;
    let mut game = GameConfig::new(tr.alpha, tr.eta, tr.iterations);
    if let Some(s) = tr.snapshot_stride {
        game.snapshot_stride = s;
    }
    game.batch_size = tr.batch_size;
    game.seed = seed;
    game.validate()?;

    let mut summary = json!({
        "width": tr.width,
        "alpha": tr.alpha,
        "eta": tr.eta,
        "iterations": tr.iterations,
    });
    let trace = match (&ctx.config.generator, &ctx.config.samples) {
        (Some(GeneratorSection::Discrete { instance, .. }), _) => {
            let design = instance.design(None)?;
            let trace = train_discrete(&design, &tr.net, tr.width, &game)?;
            discrete_summary(&design, &trace, tr.alpha, &mut summary)?;
            trace
        }
        (gen, file) => {
            let samples = match (gen, file) {
                (Some(g), _) => generate(g, seed)?,
                (None, Some(path)) => {
                    let f = File::open(path)
                        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
                    read_samples_csv(BufReader::new(f))?
                }
                (None, None) => unreachable!("checked before dispatch"),
            };
            let needed = game.iterations * game.batch_size;
            if samples.len() < needed {
                return Err(Error::config(format!(
                    "{} samples cannot feed {} iterations of batch {}",
                    samples.len(),
                    game.iterations,
                    game.batch_size
                )));
            }
            let d = samples[0].dim();
            let (ts, os, _) = cell_seeds(seed, tr.width);
            let theta = NetworkState::init(tr.net.theta_config(d, tr.width), ts)?;
            let omega = NetworkState::init(tr.net.omega_config(d, tr.width), os)?;
            let trace = sgda_run(&theta, &omega, &game, samples.iter().take(needed).cloned())?;
            let est = AveragedEstimator::new(trace.theta_snapshots.clone())?;
            let gmm = gmm_objective(&est, &TestFunction::battery(), &samples)?;
            summary["gmm_objective"] = json!(gmm.value);
            summary["gmm_moments"] = json!(gmm.psi);
            trace
        }
    };
    summary["theta_displacement"] = json!(trace.theta.distance_from_init());
    summary["omega_displacement"] = json!(trace.omega.distance_from_init());
    summary["snapshots"] = json!(trace.theta_snapshots.len());
    summary["final_payoff"] = json!(trace.rows.last().map(|r| r.payoff));
    write_trace(ctx, &trace)?;
    ctx.write_json("summary.json", &summary)?;
    ctx.manifest(json!({}))
}

fn discrete_summary(design: &DiscreteDesign, trace: &TrainTrace, alpha: f64, summary: &mut Value) -> Result<()> {
    let op = design.operator()?;
    let b = op.apply(&design.f_true)?;
    let oracle = TikhonovOracle::new(op, b, alpha)?;
    let est = AveragedEstimator::new(trace.theta_snapshots.clone())?;
    let f_bar = est.tabulate(oracle.op.x1_grid())?;
    let diff: Vec<f64> = f_bar.iter().zip(&design.f_true).map(|(a, b)| a - b).collect();
    summary["suboptimality"] = json!(oracle.suboptimality(&f_bar)?);
    summary["l2_error_vs_oracle"] = json!(oracle.distance(&f_bar)?);
    summary["sq_error_to_truth"] = json!(oracle.op.inner_h(&diff, &diff)?);
    summary["oracle_loss"] = json!(oracle.l_star);
    Ok(())
}

fn cmd_oracle(ctx: &mut Ctx) -> Result<()> {
    let sec = ctx.config.oracle.clone().expect("checked");
    let design = sec.instance.design(sec.beta)?;
    let op = design.operator()?;
    let b = op.apply(&design.f_true)?;
    let oracle = TikhonovOracle::new(op.clone(), b.clone(), sec.alpha)?;
    let f_alpha = oracle.f_alpha.clone();
    let sys = svd_system(&op)?;

    let mut sol = Table::new(&["i", "w1", "f_alpha", "f_true"]);
    for i in 0..op.k1() {
        sol.push(vec![i.into(), op.w1()[i].into(), f_alpha[i].into(), design.f_true[i].into()]);
    }
    ctx.write_table("tikhonov", &sol, &format!("alpha={}", sec.alpha))?;

    let coeffs = sys.coefficients(&design.f_true)?;
    let mut svd = Table::new(&["j", "lambda_j", "truth_coefficient"]);
    for (j, (l, c)) in sys.values.iter().zip(&coeffs).enumerate() {
        svd.push(vec![(j + 1).into(), (*l).into(), (*c).into()]);
    }
    ctx.write_table("svd", &svd, "")?;

    let mut rhs = Table::new(&["j", "w2", "b"]);
    for j in 0..op.k2() {
        rhs.push(vec![j.into(), op.w2()[j].into(), b[j].into()]);
    }
    ctx.write_table("rhs", &rhs, "")?;

    let mut w = ctx.create("operator.json")?;
    w.write_all(op.to_json()?.as_bytes())?;
    writeln!(w)?;
    drop(w);

    let diff: Vec<f64> = f_alpha.iter().zip(&design.f_true).map(|(a, t)| a - t).collect();
    let beta = sec.beta.or(match sec.instance {
        Instance::Circular(c) => Some(c.beta),
        Instance::Discrete(_) => None,
    });
    let summary = json!({
        "alpha": sec.alpha,
        "oracle_loss": oracle.l_star,
        "sq_bias": op.inner_h(&diff, &diff)?,
        "truth_norm": op.norm_h(&design.f_true)?,
        "smallest_singular_value": sys.values.last(),
        "beta": beta,
        "regularity_sum": beta.map(|b| regularity_sum(&sys.values, &coeffs, b)),
    });
    ctx.write_json("summary.json", &summary)?;
    ctx.manifest(json!({}))
}

fn cmd_experiment(ctx: &mut Ctx) -> Result<()> {
    let exp = ctx.config.resolved_experiment().expect("checked");
    let mut invariant_failure = None;
    let extra = match &exp {
        ExperimentSection::Convergence(spec) | ExperimentSection::Consistency(spec) => {
            let convergence = matches!(exp, ExperimentSection::Convergence(_));
            let report = if convergence {
                convergence_experiment(spec)?
            } else {
                consistency_experiment(spec)?
            };
            let stem = spec
                .output
                .clone()
                .unwrap_or_else(|| if convergence { "convergence" } else { "consistency" }.into());
            let seeds = format!("seeds={:?}", spec.seeds).replace(' ', "");
            ctx.write_table(&format!("{stem}_rows"), &report.rows, &seeds)?;
            ctx.write_table(&format!("{stem}_summary"), &report.summary, &seeds)?;
            let failed = report
                .rows
                .rows
                .iter()
                .filter(|r| r.last().map(|c| c.to_string() != "ok").unwrap_or(false))
                .count();
            if failed == report.rows.rows.len() {
                return Err(Error::Invariant("every sweep cell failed".into()));
            }
            json!({ "cells": report.rows.rows.len(), "failed_cells": failed })
        }
        ExperimentSection::Linearization(spec) => {
            let r = linearization_experiment(spec)?;
            ctx.write_table("linearization_rows", &r.rows, "")?;
            let mut s = Table::new(&[
                "value_slope",
                "grad_slope",
                "rel_grad_slope",
                "value_spearman",
                "grad_spearman",
            ]);
            s.push(vec![
                r.value_slope.into(),
                r.grad_slope.into(),
                r.rel_grad_slope.into(),
                r.value_spearman.into(),
                r.grad_spearman.into(),
            ]);
            ctx.write_table("linearization_summary", &s, "")?;
            json!({
                "value_slope": r.value_slope,
                "grad_slope": r.grad_slope,
                "rel_grad_slope": r.rel_grad_slope,
            })
        }
        ExperimentSection::Regret(spec) => {
            let r = regret_harness(spec)?;
            let mut t = Table::new(&["seed", "regret", "bound", "violated", "max_update_norm"]);
            for row in &r.rows {
                t.push(vec![
                    row.seed.into(),
                    row.regret.into(),
                    row.bound.into(),
                    usize::from(row.violated).into(),
                    row.max_update_norm.into(),
                ]);
            }
            let seeds = format!("seeds={:?}", spec.seeds).replace(' ', "");
            ctx.write_table("regret_rows", &t, &seeds)?;
            let mut s = Table::new(&[
                "step_term",
                "radius_term",
                "concentration_term",
                "bias_term",
                "violations",
                "pass",
            ]);
            s.push(vec![
                r.terms.step_term.into(),
                r.terms.radius_term.into(),
                r.terms.concentration_term.into(),
                r.terms.bias_term.into(),
                r.violations.into(),
                usize::from(r.pass).into(),
            ]);
            ctx.write_table("regret_summary", &s, &seeds)?;
            if !r.pass {
                invariant_failure = Some(format!(
                    "{} regret bound violations exceed the allowed {}",
                    r.violations, spec.max_violations
                ));
            }
            json!({ "violations": r.violations, "pass": r.pass })
        }
        ExperimentSection::Decomposition(spec) => {
            let rows = decomposition_experiment(spec)?;
            let mut t = Table::new(&[
                "m",
                "snapshots",
                "raw_regret",
                "gap_at_iterates",
                "linear_regret",
                "gap_at_comparator",
                "identity_error",
            ]);
            for (m, d) in &rows {
                t.push(vec![
                    (*m).into(),
                    d.snapshots.into(),
                    d.raw_regret.into(),
                    d.gap_at_iterates.into(),
                    d.linear_regret.into(),
                    d.gap_at_comparator.into(),
                    d.identity_error.into(),
                ]);
            }
            ctx.write_table("decomposition", &t, "")?;
            let worst = rows.iter().map(|(_, d)| d.identity_error).fold(0.0, f64::max);
            if !(worst <= IDENTITY_TOL) {
                invariant_failure = Some(format!("decomposition identity error {worst:e} exceeds {IDENTITY_TOL:e}"));
            }
            json!({ "max_identity_error": worst })
        }
    };
    ctx.write_json("summary.json", &extra)?;
    ctx.manifest(json!({ "experiment": exp }))?;
    match invariant_failure {
        Some(msg) => Err(Error::Invariant(msg)),
        None => Ok(()),
    }
}

fn cmd_audit(ctx: &mut Ctx) -> Result<()> {
    let sec = ctx.config.audit.clone().expect("checked");
    if sec.nets.is_empty() || sec.probes == 0 {
        return Err(Error::config("audit needs at least one net and one probe"));
    }
    let rows = gradient_audit(&sec.nets, sec.probes, sec.alpha, ctx.config.seed)?;
    let mut t = Table::new(&[
        "arch",
        "input_dim",
        "width",
        "depth",
        "probes",
        "resampled",
        "max_rel_err_network",
        "max_rel_err_theta",
        "max_rel_err_omega",
    ]);
    for r in &rows {
        t.push(vec![
            r.arch.clone().into(),
            r.input_dim.into(),
            r.width.into(),
            r.depth.into(),
            r.probes.into(),
            r.resampled.into(),
            r.max_rel_err_network.into(),
            r.max_rel_err_theta.into(),
            r.max_rel_err_omega.into(),
        ]);
    }
    ctx.write_table("audit", &t, "")?;
    let worst = rows.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    ctx.write_json("summary.json", &json!({ "max_rel_error": worst, "tolerance": sec.tolerance }))?;
    ctx.manifest(json!({}))?;
    if worst > sec.tolerance {
        return Err(Error::Invariant(format!(
            "max relative gradient error {worst:e} exceeds {:e}",
            sec.tolerance
        )));
    }
    Ok(())
}

/// Reads a config file from disk; used by tests and tooling.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&fs::read_to_string(path)?)
}
