//! Subcommand implementations. Each returns the process exit status.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use tdpg_core::autodiff::{Checkpoint, Rng, Tensor};
use tdpg_core::envs::render::write_ppm;
use tdpg_core::envs::{Backdrop, BallCatch, BallCatchState, EnvShiftSpec, Environment, Lava};
use tdpg_core::eval::{
    ballcatch_policy_from_checkpoint, entropic_risk, evaluate, export_histogram, lava_policy_from_checkpoint,
    value_range, EvalReport, Histogram, REPORT_HEADER,
};
use tdpg_core::mine::{gaussian_selftest, SelftestConfig};
use tdpg_core::nets::{build_ballcatch_nets, build_lava_nets, PolicyParams};
use tdpg_core::tdpg::{select_policy, tags, train, Algorithm, EnvId, SweepEntry, TrainOutcome};
use tdpg_core::{Error, Result};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::NoFeasiblePolicy { .. } => EXIT_INFEASIBLE,
        _ => EXIT_USAGE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "tdpg", version, about = "Train and evaluate task-driven policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    /// Config file with [train], [env] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides applied on top of the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(clap::Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory for `mine_selftest.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one policy (PG or TDPG).
    Train(RunArgs),
    /// Train TDPG for every β in `betas` and select a policy under the cost cap.
    Sweep(RunArgs),
    /// Evaluate a checkpoint on a scenario set.
    Eval(RunArgs),
    /// Render one ball-catching frame as a PPM file.
    RenderDebug(RunArgs),
    /// Check the MI estimator against closed-form Gaussian values.
    MineSelftest(SelftestArgs),
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&load(&a)?),
        Command::Sweep(a) => cmd_sweep(&load(&a)?).map(|_| ()),
        Command::Eval(a) => cmd_eval(&load(&a)?).map(|_| ()),
        Command::RenderDebug(a) => cmd_render_debug(&load(&a)?),
        Command::MineSelftest(a) => cmd_mine_selftest(&a),
    }
}

fn load(a: &RunArgs) -> Result<RunConfig> {
    RunConfig::load(a.config.as_deref(), &a.overrides)
}

fn lava_env(cfg: &RunConfig, shift: &EnvShiftSpec) -> Lava {
    Lava {
        action_limit: cfg.env.action_limit,
        ..Lava::with_shift(shift)
    }
}

fn ball_env(cfg: &RunConfig, shift: &EnvShiftSpec) -> BallCatch {
    BallCatch::with_shift(shift, cfg.env.image_size)
}

fn load_policy(cfg: &RunConfig, path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{}: no such checkpoint", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    match cfg.env.id {
        EnvId::Lava => lava_policy_from_checkpoint(&ck),
        EnvId::BallCatch => ballcatch_policy_from_checkpoint(&ck, cfg.env.image_size),
    }
}

fn initial_policy(cfg: &RunConfig) -> Result<PolicyParams> {
    if let Some(p) = &cfg.init {
        return load_policy(cfg, p);
    }
    let mut rng = Rng::stream(cfg.train.seed, &[tags::INIT, 0]);
    match cfg.env.id {
        EnvId::Lava => build_lava_nets(cfg.train.trv_dim, Lava::default().horizon, &mut rng),
        EnvId::BallCatch => build_ballcatch_nets(cfg.env.image_size, cfg.train.trv_dim, &mut rng),
    }
}

fn train_one(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    let params = initial_policy(cfg)?;
    let shift = &cfg.env.shift;
    match cfg.env.id {
        EnvId::Lava => train(&lava_env(cfg, shift), params, &cfg.train, Some(dir)),
        EnvId::BallCatch => train(&ball_env(cfg, shift), params, &cfg.train, Some(dir)),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.write_manifest(&cfg.out_dir.join("manifest_train.cfg"))?;
    let out = train_one(cfg, &cfg.out_dir)?;
    if let Some(last) = out.records.last() {
        println!(
            "{} {} seed {}: {} epochs, final cost {:.3} ± {:.3}, MI {:.4}",
            cfg.env.id.label(),
            cfg.train.algorithm.label(),
            cfg.train.seed,
            out.records.len(),
            last.cost_mean,
            last.cost_std,
            last.mi_sum()
        );
    }
    Ok(())
}

/// Result of a sweep: the chosen checkpoint and every candidate.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub chosen: SweepEntry,
    pub checkpoint: PathBuf,
    pub entries: Vec<SweepEntry>,
}

pub const SWEEP_HEADER: &str = "beta,run,chosen_epoch,cost_mean,mi_sum";

/// Trains TDPG once per β into `out_dir/beta_<i>` and applies the selection
/// rule. The per-β summary and `selected.cfg` are written even when nothing
/// is feasible.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    if cfg.train.betas.is_empty() {
        return Err(Error::Config {
            line: 0,
            message: "sweep needs at least one beta".into(),
        });
    }
    cfg.write_manifest(&cfg.out_dir.join("manifest_sweep.cfg"))?;
    let mut entries = Vec::new();
    let mut summary = format!("{SWEEP_HEADER}\n");
    for (i, &beta) in cfg.train.betas.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.train.algorithm = Algorithm::Tdpg;
        sub.train.beta = beta;
        let run = format!("beta_{i}");
        let dir = cfg.out_dir.join(&run);
        sub.out_dir = dir.clone();
        sub.write_manifest(&dir.join("manifest_train.cfg"))?;
        let out = train_one(&sub, &dir)?;
        let mine: Vec<SweepEntry> = out
            .records
            .into_iter()
            .map(|record| SweepEntry {
                run: run.clone(),
                record,
            })
            .collect();
        match select_policy(&mine, cfg.train.cost_cap) {
            Ok(e) => writeln!(
                summary,
                "{beta},{run},{},{},{}",
                e.record.epoch,
                e.record.cost_mean,
                e.record.mi_sum()
            )
            .unwrap(),
            Err(_) => writeln!(summary, "{beta},{run},none,,").unwrap(),
        }
        println!("beta {beta}: {}", summary.lines().last().unwrap_or_default());
        entries.extend(mine);
    }
    fs::write(cfg.out_dir.join("sweep.csv"), &summary)?;
    let chosen = match select_policy(&entries, cfg.train.cost_cap) {
        Ok(e) => e.clone(),
        Err(e) => {
            fs::write(cfg.out_dir.join("selected.cfg"), format!("# {e}\n"))?;
            return Err(e);
        }
    };
    let ck_name = chosen.record.checkpoint.clone().unwrap_or_default();
    let checkpoint = cfg.out_dir.join(&chosen.run).join(&ck_name);
    fs::write(
        cfg.out_dir.join("selected.cfg"),
        format!(
            "# selected policy\n[eval]\ncheckpoint = {}\n# beta = {}\n# epoch = {}\n# cost_mean = {}\n# mi_sum = {}\n",
            checkpoint.display(),
            chosen.record.beta,
            chosen.record.epoch,
            chosen.record.cost_mean,
            chosen.record.mi_sum()
        ),
    )?;
    println!(
        "selected {} epoch {} (beta {}): cost {:.3}, MI {:.4}",
        chosen.run,
        chosen.record.epoch,
        chosen.record.beta,
        chosen.record.cost_mean,
        chosen.record.mi_sum()
    );
    Ok(SweepResult {
        chosen,
        checkpoint,
        entries,
    })
}

/// A named test condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub shift: EnvShiftSpec,
}

/// Expands a comma-separated scenario list. `paper` stands for the training
/// condition followed by the paper's test conditions; other entries are
/// `training`, `noise-<x>`, `backdrop-<k>` and `proc-<seed>`.
pub fn scenarios(cfg: &RunConfig) -> Result<Vec<Scenario>> {
    let usage = |m: String| Error::Config { line: 0, message: m };
    let mut names = Vec::new();
    for item in cfg.eval.scenarios.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "paper" {
            names.push("training".to_string());
            match cfg.env.id {
                EnvId::Lava => names.extend(["noise-0.001", "noise-0.01", "noise-0.1", "noise-1"].map(String::from)),
                EnvId::BallCatch => {
                    names.extend(["noise-0.1", "noise-0.15", "noise-0.2", "noise-0.25"].map(String::from));
                    names.extend((1..=7).map(|k| format!("backdrop-{k}")));
                }
            }
        } else {
            names.push(item.to_string());
        }
    }
    if names.is_empty() {
        return Err(usage("empty scenario set".into()));
    }
    names
        .into_iter()
        .map(|name| {
            let mut shift = cfg.env.shift.clone();
            if name == "training" {
            } else if let Some(x) = name.strip_prefix("noise-") {
                shift.sensor_noise = x
                    .parse()
                    .ok()
                    .filter(|v: &f64| *v >= 0.0)
                    .ok_or_else(|| usage(format!("bad noise level in scenario `{name}`")))?;
            } else if cfg.env.id == EnvId::Lava {
                return Err(usage(format!("scenario `{name}` does not apply to lava")));
            } else if let Some(k) = name.strip_prefix("backdrop-") {
                shift.backdrop = Backdrop::parse(&format!("test-{k}"))?;
            } else if name.starts_with("proc-") {
                shift.backdrop = Backdrop::parse(&name)?;
            } else {
                return Err(usage(format!("unknown scenario `{name}`")));
            }
            Ok(Scenario { name, shift })
        })
        .collect()
}

fn evaluate_in(cfg: &RunConfig, policy: &PolicyParams, sc: &Scenario) -> Result<EvalReport> {
    let (n, seed, chunk) = (cfg.eval.rollouts, cfg.eval.seed, cfg.train.chunk);
    match cfg.env.id {
        EnvId::Lava => evaluate(&lava_env(cfg, &sc.shift), policy, &sc.name, n, seed, chunk),
        EnvId::BallCatch => evaluate(&ball_env(cfg, &sc.shift), policy, &sc.name, n, seed, chunk),
    }
}

fn write_reports(dir: &Path, prefix: &str, reports: &[EvalReport]) -> Result<()> {
    let mut summary = format!("{REPORT_HEADER}\n");
    for r in reports {
        writeln!(summary, "{}", r.csv()).unwrap();
        let mut rows = String::from("rollout,cost,distance\n");
        for (i, (c, d)) in r.costs.iter().zip(&r.distances).enumerate() {
            writeln!(rows, "{i},{c},{d}").unwrap();
        }
        fs::write(dir.join(format!("{prefix}_{}.csv", r.scenario)), rows)?;
    }
    fs::write(dir.join(format!("{prefix}.csv")), summary)?;
    Ok(())
}

fn print_table(title: &str, reports: &[EvalReport], beta: f64) {
    println!("{title}");
    println!("{:<14} {:>12} {:>10} {:>10} {:>12}", "scenario", "mean cost", "std", "distance", "risk");
    for r in reports {
        let risk = entropic_risk(&r.costs, beta).map(|e| e.rho).unwrap_or(f64::NAN);
        println!(
            "{:<14} {:>12.3} {:>10.3} {:>10.3} {:>12.3}",
            r.scenario, r.cost_mean, r.cost_std, r.dist_mean, risk
        );
    }
}

/// Evaluations of the main policy and, when configured, the comparison one.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub reports: Vec<EvalReport>,
    pub compare: Option<Vec<EvalReport>>,
}

/// Writes `eval.csv` plus per-rollout `eval_<scenario>.csv`; with a
/// comparison policy also `compare*.csv` and paired `hist_<scenario>` CSV and
/// SVG files on pooled bins.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalResult> {
    let path = cfg.eval.checkpoint.as_ref().ok_or_else(|| Error::Config {
        line: 0,
        message: "eval needs --checkpoint".into(),
    })?;
    let scs = scenarios(cfg)?;
    let policy = load_policy(cfg, path)?;
    let other = cfg.eval.compare.as_ref().map(|p| load_policy(cfg, p)).transpose()?;
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.write_manifest(&cfg.out_dir.join("manifest_eval.cfg"))?;

    let reports = scs
        .iter()
        .map(|sc| evaluate_in(cfg, &policy, sc))
        .collect::<Result<Vec<_>>>()?;
    write_reports(&cfg.out_dir, "eval", &reports)?;
    print_table(&path.display().to_string(), &reports, cfg.train.beta);

    let compare = match (&other, &cfg.eval.compare) {
        (Some(op), Some(cp)) => {
            let theirs = scs
                .iter()
                .map(|sc| evaluate_in(cfg, op, sc))
                .collect::<Result<Vec<_>>>()?;
            write_reports(&cfg.out_dir, "compare", &theirs)?;
            print_table(&cp.display().to_string(), &theirs, cfg.train.beta);
            for (a, b) in reports.iter().zip(&theirs) {
                let pooled: Vec<f64> = a.costs.iter().chain(&b.costs).copied().collect();
                let (lo, hi) = value_range(&pooled);
                let ha = Histogram::new(&a.costs, cfg.eval.bins, lo, hi)?;
                let hb = Histogram::new(&b.costs, cfg.eval.bins, lo, hi)?;
                export_histogram(
                    &[("policy", &ha), ("compare", &hb)],
                    &cfg.out_dir.join(format!("hist_{}.csv", a.scenario)),
                    &cfg.out_dir.join(format!("hist_{}.svg", a.scenario)),
                )?;
            }
            Some(theirs)
        }
        _ => None,
    };
    Ok(EvalResult { reports, compare })
}

/// Renders `state = d[,bx,by[,vx,vy]]` (default: launch position with the
/// robot at 0) under the configured shift.
pub fn cmd_render_debug(cfg: &RunConfig) -> Result<()> {
    if cfg.env.id != EnvId::BallCatch {
        return Err(Error::Config {
            line: 0,
            message: format!("environment `{}` has no renderer", cfg.env.id.label()),
        });
    }
    cfg.env.shift.backdrop.validate()?;
    let env = ball_env(cfg, &cfg.env.shift);
    let mut s = BallCatchState::launch(0.0);
    match cfg.env.state.as_deref() {
        None => {}
        Some([d]) => s.d = *d,
        Some([d, bx, by]) => (s.d, s.bx, s.by) = (*d, *bx, *by),
        Some([d, bx, by, vx, vy]) => (s.d, s.bx, s.by, s.vx, s.vy) = (*d, *bx, *by, *vx, *vy),
        Some(v) => {
            return Err(Error::Config {
                line: 0,
                message: format!("state needs 1, 3 or 5 values, got {}", v.len()),
            })
        }
    }
    let mut rng = Rng::stream(cfg.train.seed, &[tags::EVAL]);
    let pixels = env.render(&s, cfg.env.shift.sensor_noise, &mut rng);
    let size = cfg.env.image_size;
    let image = Tensor::new(vec![3, size, size], pixels)?;
    if let Some(dir) = cfg.env.frame.parent() {
        fs::create_dir_all(dir)?;
    }
    write_ppm(&cfg.env.frame, &image)?;
    cfg.write_manifest(&cfg.out_dir.join("manifest_render.cfg"))?;
    println!("wrote {} ({size}x{size}, obs dims {:?})", cfg.env.frame.display(), env.obs_shape());
    Ok(())
}

/// `(ρ, closed form, tolerance)` for the Gaussian oracle.
pub const SELFTEST_CASES: [(f64, f64, f64); 3] = [(0.0, 0.0, 0.05), (0.5, 0.1438, 0.05), (0.9, 0.8304, 0.13)];

pub fn cmd_mine_selftest(a: &SelftestArgs) -> Result<()> {
    let mut cfg = SelftestConfig::default();
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut csv = String::from("rho,closed_form,estimate,tolerance,pass\n");
    let mut failed = Vec::new();
    for (rho, truth, tol) in SELFTEST_CASES {
        let est = gaussian_selftest(rho, &cfg, a.seed)?;
        let pass = (est - truth).abs() <= tol;
        println!(
            "{} rho={rho}: estimate {est:.4}, closed form {truth:.4} (tolerance {tol})",
            if pass { "PASS" } else { "FAIL" }
        );
        writeln!(csv, "{rho},{truth},{est},{tol},{pass}").unwrap();
        if !pass {
            failed.push(rho);
        }
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("mine_selftest.csv"), csv)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Tolerance(format!("Gaussian MI oracle failed for rho in {failed:?}")))
    }
}
