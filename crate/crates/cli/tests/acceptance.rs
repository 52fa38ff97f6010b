//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! The ball-catching tier takes hours and only runs with
//! `TDPG_ACCEPT_BALL=1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use tdpg_cli::commands::{cmd_eval, cmd_sweep, cmd_train};
use tdpg_cli::config::RunConfig;
use tdpg_core::autodiff::{Rng, Tensor};
use tdpg_core::envs::Environment;
use tdpg_core::eval::{entropic_risk, EvalReport};
use tdpg_core::gradcheck::{run_suite, TRIALS};
use tdpg_core::mine::{gaussian_selftest, SelftestConfig};
use tdpg_core::nets::{Activation, Dense, GaussianNet, Mlp, PolicyParams};
use tdpg_core::tdpg::{pg_gradient, rollout_batch, Algorithm, EnvId, PgOptions, RolloutSpec};

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);

const MINE_SAMPLES: usize = 10_000;
const MINE_CASES: [(f64, f64, f64); 3] = [(0.0, 0.0, 0.05), (0.5, 0.1438, 0.05), (0.9, 0.8304, 0.13)];
const MINE_SEED: u64 = 1;
const MINE_BUDGET: Duration = Duration::from_secs(300);

const SCORE_ROLLOUTS: usize = 1_000_000;
const SCORE_TOL: f64 = 0.02;
const SCORE_BUDGET: Duration = Duration::from_secs(60);

const LAVA_SEEDS: [u64; 3] = [1, 2, 3];
const LAVA_PG_TRAIN_MAX: f64 = 40.0;
const LAVA_TDPG_RATIO_MAX: f64 = 1.5;
const LAVA_PG_RATIO_MIN: f64 = 2.5;
const LAVA_GOAL: f64 = 3.0;
const LAVA_GOAL_RADIUS: f64 = 0.75;
const LAVA_GOAL_FRACTION: f64 = 0.70;
const LAVA_TEST_SCENARIO: &str = "noise-1";
const LAVA_BUDGET: Duration = Duration::from_secs(2 * 3600);

const BALL_SEED: u64 = 1;
const BALL_NOISE_SCENARIO: &str = "noise-0.25";
const BALL_BACKDROP_WINS: usize = 4;
const BALL_BUDGET: Duration = Duration::from_secs(8 * 3600);

const RISK_EXACT: f64 = 0.0;
const RISK_SMALL_BETA: f64 = 1e-7;
const RISK_LIMIT_TOL: f64 = 1e-4;
const RISK_BERNOULLI: f64 = 62.011;
const RISK_BERNOULLI_TOL: f64 = 1e-6;
const RISK_BUDGET: Duration = Duration::from_secs(1);

const DETERMINISM_THREADS: [usize; 2] = [1, 3];

/// Writes past the test harness's output capture so the report shows up in
/// passing runs too.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

struct Outcome {
    failures: Vec<String>,
}

impl Outcome {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        report(&format!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" }));
        if !pass {
            self.failures.push(format!("{id}: {detail}"));
        }
    }
}

fn within(budget: Duration, took: Duration) -> (bool, String) {
    (took <= budget, format!("{:.1}s of {:.0}s", took.as_secs_f64(), budget.as_secs_f64()))
}

fn gradient_checks(out: &mut Outcome) {
    let start = Instant::now();
    let results = run_suite(TRIALS);
    let (fast, time) = within(GRADCHECK_BUDGET, start.elapsed());
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("checks ran");
    let complete = results.iter().all(|r| r.trials == TRIALS);
    let pass = worst.max_rel_err <= GRADCHECK_TOL && complete && fast;
    out.record(
        "1 (gradient checks)",
        pass,
        format!(
            "{} checks x {TRIALS} trials, worst {} at {:.2e} (tol {GRADCHECK_TOL:e}), {time}",
            results.len(),
            worst.name,
            worst.max_rel_err
        ),
    );
}

fn mine_oracle(out: &mut Outcome) {
    let start = Instant::now();
    let cfg = SelftestConfig {
        samples: MINE_SAMPLES,
        ..SelftestConfig::default()
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for (rho, truth, tol) in MINE_CASES {
        match gaussian_selftest(rho, &cfg, MINE_SEED) {
            Ok(est) => {
                ok &= (est - truth).abs() <= tol;
                parts.push(format!("rho {rho}: {est:.4} vs {truth} ±{tol}"));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("rho {rho}: {e}"));
            }
        }
    }
    let (fast, time) = within(MINE_BUDGET, start.elapsed());
    out.record("2 (MINE Gaussian oracle)", ok && fast, format!("{}; {time}", parts.join("; ")));
}

/// One step from a fixed observation: `x̃ ~ N(w·y + b, e^{2(v·y + c)})`,
/// `u ~ N(a·x̃ + b', e^{2(c'·x̃ + d)})`, cost `(u − 2)²`.
struct OneStep;

const ONE_STEP_Y: f64 = 1.0;
const ONE_STEP_TARGET: f64 = 2.0;

impl Environment for OneStep {
    type State = f64;
    fn horizon(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_shape(&self) -> Vec<usize> {
        vec![1]
    }
    fn sample_initial(&self, _: &mut Rng) -> f64 {
        ONE_STEP_Y
    }
    fn observe(&self, s: &f64, _: &mut Rng) -> Vec<f64> {
        vec![*s]
    }
    fn step(&self, s: &f64, _: &[f64]) -> f64 {
        *s
    }
    fn stage_cost(&self, _: &f64, u: &[f64], _: usize) -> f64 {
        (u[0] - ONE_STEP_TARGET).powi(2)
    }
    fn terminal_cost(&self, _: &f64) -> f64 {
        0.0
    }
    fn state_vector(&self, s: &f64) -> Vec<f64> {
        vec![*s]
    }
    fn final_distance(&self, _: &f64) -> f64 {
        0.0
    }
}

fn one_step_policy(t: &[f64; 10]) -> PolicyParams {
    let linear = |w: Vec<f64>, rows: usize, b: [f64; 2]| Mlp {
        layers: vec![Dense {
            weight: Tensor::new(vec![rows, 2], w).unwrap(),
            bias: Tensor::vector(b.to_vec()),
        }],
        hidden: Activation::Identity,
    };
    let q = linear(vec![t[0], t[1], t[2], t[3]], 2, [t[4], t[5]]);
    let pi = linear(vec![t[6], t[7]], 1, [t[8], t[9]]);
    PolicyParams {
        q: vec![GaussianNet::new("q/t0", Vec::new(), q).unwrap()],
        pi: vec![GaussianNet::new("pi/t0", Vec::new(), pi).unwrap()],
        time_varying: true,
        trv_dim: 1,
        action_dim: 1,
    }
}

/// `E(u − g)² = (a·m + b' − g)² + a²s² + exp(2d + 2c'm + 2c'²s²)`.
fn one_step_expected_cost(t: &[f64; 10]) -> f64 {
    let m = t[0] * ONE_STEP_Y + t[4];
    let s = (t[1] * ONE_STEP_Y + t[5]).exp();
    let (a, c, b, d) = (t[6], t[7], t[8], t[9]);
    (a * m + b - ONE_STEP_TARGET).powi(2) + a * a * s * s + (2.0 * d + 2.0 * c * m + 2.0 * c * c * s * s).exp()
}

fn score_function_oracle(out: &mut Outcome) {
    let start = Instant::now();
    let theta = [0.4, -0.3, 0.2, 0.1, 0.1, -0.2, 0.8, 0.15, 0.3, -0.5];
    let h = 1e-6;
    let exact: Vec<f64> = (0..10)
        .map(|i| {
            let (mut up, mut down) = (theta, theta);
            up[i] += h;
            down[i] -= h;
            (one_step_expected_cost(&up) - one_step_expected_cost(&down)) / (2.0 * h)
        })
        .collect();
    let policy = one_step_policy(&theta);
    let opts = PgOptions {
        baseline: true,
        reward_to_go: false,
        chunk: 1000,
    };
    let batches = 10;
    let mut est = [0.0; 10];
    for k in 0..batches {
        let spec = RolloutSpec {
            n: SCORE_ROLLOUTS / batches,
            seed: 11,
            stream: k as u64,
            chunk: 1000,
            deterministic: false,
        };
        let batch = rollout_batch(&OneStep, &policy, &spec).unwrap();
        let g = pg_gradient(&policy, &batch, &opts).unwrap();
        for (e, v) in est.iter_mut().zip(g.iter().flat_map(|(_, t)| t.data().to_vec())) {
            *e += v / batches as f64;
        }
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let rel = norm(&mut est.iter().zip(&exact).map(|(a, b)| a - b)) / norm(&mut exact.iter().copied());
    let (fast, time) = within(SCORE_BUDGET, start.elapsed());
    out.record(
        "3 (score-function oracle)",
        rel <= SCORE_TOL && fast,
        format!("{SCORE_ROLLOUTS} rollouts, relative error {rel:.4} (tol {SCORE_TOL}), {time}"),
    );
}

fn run_config(env: EnvId, dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::defaults(env);
    cfg.train.seed = seed;
    cfg.out_dir = dir.to_path_buf();
    cfg
}

/// Reports for the training distribution and one test scenario.
fn evaluate_pair(env: EnvId, checkpoint: &Path, dir: &Path, scenarios: &str) -> Vec<EvalReport> {
    let mut cfg = run_config(env, dir, 0);
    cfg.eval.checkpoint = Some(checkpoint.to_path_buf());
    cfg.eval.scenarios = scenarios.into();
    cmd_eval(&cfg).expect("evaluation").reports
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn lava_reproduction(out: &mut Outcome, root: &Path) {
    let start = Instant::now();
    let scenarios = format!("training,{LAVA_TEST_SCENARIO}");
    let (mut pg_train, mut pg_test) = (Vec::new(), Vec::new());
    let (mut td_train, mut td_test, mut td_dist) = (Vec::new(), Vec::new(), Vec::new());
    let mut feasible = Vec::new();
    for seed in LAVA_SEEDS {
        let dir = root.join(format!("lava_pg_{seed}"));
        let mut cfg = run_config(EnvId::Lava, &dir, seed);
        cfg.train.algorithm = Algorithm::Pg;
        cmd_train(&cfg).expect("pg training");
        let r = evaluate_pair(EnvId::Lava, &dir.join("final.bin"), &dir.join("eval"), &scenarios);
        report(&format!(
            "  lava pg seed {seed}: training {:.2}, {LAVA_TEST_SCENARIO} {:.2}",
            r[0].cost_mean, r[1].cost_mean
        ));
        pg_train.push(r[0].cost_mean);
        pg_test.push(r[1].cost_mean);

        let dir = root.join(format!("lava_sweep_{seed}"));
        let cfg = run_config(EnvId::Lava, &dir, seed);
        match cmd_sweep(&cfg) {
            Ok(sweep) => {
                let r = evaluate_pair(EnvId::Lava, &sweep.checkpoint, &dir.join("eval"), &scenarios);
                report(&format!(
                    "  lava tdpg seed {seed}: beta {:.4} epoch {}, training {:.2}, {LAVA_TEST_SCENARIO} {:.2}",
                    sweep.chosen.record.beta, sweep.chosen.record.epoch, r[0].cost_mean, r[1].cost_mean
                ));
                feasible.push(true);
                td_train.push(r[0].cost_mean);
                td_test.push(r[1].cost_mean);
                td_dist.extend(r[1].distances.iter().copied());
            }
            Err(e) => {
                report(&format!("  lava tdpg seed {seed}: {e}"));
                feasible.push(false);
            }
        }
    }
    let took = start.elapsed();

    let pg_mean = mean(&pg_train);
    out.record(
        "4a (lava PG training cost)",
        pg_mean <= LAVA_PG_TRAIN_MAX,
        format!("mean {pg_mean:.2} over {} seeds (max {LAVA_PG_TRAIN_MAX})", LAVA_SEEDS.len()),
    );
    let n_feasible = feasible.iter().filter(|f| **f).count();
    out.record(
        "4b (lava TDPG feasible under cap)",
        n_feasible == LAVA_SEEDS.len(),
        format!("{n_feasible} of {} sweeps found a policy", LAVA_SEEDS.len()),
    );
    let pg_ratio = mean(&pg_test) / pg_mean;
    let (td_ratio, close) = if td_train.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let hits = td_dist.iter().filter(|d| **d <= LAVA_GOAL_RADIUS).count();
        (mean(&td_test) / mean(&td_train), hits as f64 / td_dist.len() as f64)
    };
    out.record(
        "4c (lava robustness ratios)",
        td_ratio <= LAVA_TDPG_RATIO_MAX && pg_ratio >= LAVA_PG_RATIO_MIN,
        format!(
            "TDPG {td_ratio:.3} (max {LAVA_TDPG_RATIO_MAX}), PG {pg_ratio:.3} (min {LAVA_PG_RATIO_MIN}) under {LAVA_TEST_SCENARIO}"
        ),
    );
    out.record(
        "4d (lava open-loop goal reaching)",
        close >= LAVA_GOAL_FRACTION,
        format!(
            "{:.1}% of TDPG rollouts end within {LAVA_GOAL_RADIUS} of d = {LAVA_GOAL} (min {:.0}%)",
            100.0 * close,
            100.0 * LAVA_GOAL_FRACTION
        ),
    );
    let (fast, time) = within(LAVA_BUDGET, took);
    out.record("4 (lava runtime)", fast, time);
}

fn ball_robustness(out: &mut Outcome, root: &Path) {
    if std::env::var("TDPG_ACCEPT_BALL").as_deref() != Ok("1") {
        report("SKIP criterion 5 (ball-catching tier): optional, set TDPG_ACCEPT_BALL=1 to run");
        return;
    }
    let start = Instant::now();
    let pg_dir = root.join("ball_pg");
    let mut cfg = run_config(EnvId::BallCatch, &pg_dir, BALL_SEED);
    cfg.train.algorithm = Algorithm::Pg;
    cmd_train(&cfg).expect("pg training");
    let td_dir = root.join("ball_tdpg");
    let mut cfg = run_config(EnvId::BallCatch, &td_dir, BALL_SEED);
    cfg.train.algorithm = Algorithm::Tdpg;
    cfg.init = Some(pg_dir.join("final.bin"));
    cmd_train(&cfg).expect("tdpg training");

    let scenarios: Vec<String> = ["training".to_string(), BALL_NOISE_SCENARIO.to_string()]
        .into_iter()
        .chain((1..=7).map(|k| format!("backdrop-{k}")))
        .collect();
    let list = scenarios.join(",");
    let pg = evaluate_pair(EnvId::BallCatch, &pg_dir.join("final.bin"), &pg_dir.join("eval"), &list);
    let td = evaluate_pair(EnvId::BallCatch, &td_dir.join("final.bin"), &td_dir.join("eval"), &list);
    let ratio = |r: &[EvalReport]| r[1].cost_mean / r[0].cost_mean;
    let wins = (2..9).filter(|&i| td[i].cost_mean < pg[i].cost_mean).count();
    let (fast, time) = within(BALL_BUDGET, start.elapsed());
    out.record(
        "5 (ball-catching robustness)",
        ratio(&td) < ratio(&pg) && wins >= BALL_BACKDROP_WINS && fast,
        format!(
            "{BALL_NOISE_SCENARIO} ratio TDPG {:.3} vs PG {:.3}; TDPG lower on {wins} of 7 backdrops (min {BALL_BACKDROP_WINS}); {time}",
            ratio(&td),
            ratio(&pg)
        ),
    );
}

fn risk(costs: &[f64], beta: f64) -> f64 {
    entropic_risk(costs, beta).expect("valid input").rho
}

fn entropic_risk_properties(out: &mut Outcome) {
    let start = Instant::now();
    let constant = risk(&[7.0; 5], 0.3);
    let constant_ok = (constant - 7.0).abs() <= RISK_EXACT;

    let mut rng = Rng::new(21);
    let mut limit_err = 0.0f64;
    let mut monotone = true;
    for _ in 0..200 {
        let n = 2 + (rng.uniform(0.0, 30.0) as usize);
        let costs: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 100.0)).collect();
        limit_err = limit_err.max((risk(&costs, RISK_SMALL_BETA) - mean(&costs)).abs());
        let mut prev = f64::NEG_INFINITY;
        for beta in [1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0, 5.0] {
            let r = risk(&costs, beta);
            monotone &= r >= prev - 1e-12;
            prev = r;
        }
    }
    let bernoulli = risk(&[0.0, 100.0], 0.01);
    let closed = 100.0 * ((1.0 + 1f64.exp()) / 2.0).ln();
    let bernoulli_ok = (bernoulli - closed).abs() <= RISK_BERNOULLI_TOL && (closed - RISK_BERNOULLI).abs() < 1e-3;
    let (fast, time) = within(RISK_BUDGET, start.elapsed());
    out.record(
        "6 (entropic risk)",
        constant_ok && limit_err <= RISK_LIMIT_TOL && monotone && bernoulli_ok && fast,
        format!(
            "constant {constant}, small-beta gap {limit_err:.2e} (tol {RISK_LIMIT_TOL:e}), monotone {monotone}, \
             Bernoulli {bernoulli:.7} vs {closed:.7}, {time}"
        ),
    );
}

fn tdpg_bin(args: &[&str], threads: usize) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tdpg"))
        .args(args)
        .env("TDPG_THREADS", threads.to_string())
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A short TDPG run and an evaluation of its checkpoint, each rerun from its
/// manifest at a different thread count.
fn determinism(out: &mut Outcome, root: &Path) {
    let base = root.join("determinism");
    let [first, second] = DETERMINISM_THREADS;
    let train_a = base.join("train_a");
    let ok_a = tdpg_bin(
        &[
            "train", "--env", "lava", "--algo", "tdpg", "--epochs", "4", "--rollouts", "120",
            "--mine-epochs-first", "40", "--mine-epochs", "5", "--seed", "9", "--out-dir", s(&train_a),
        ],
        first,
    );
    let train_b = base.join("train_b");
    let ok_b = tdpg_bin(
        &["train", "--config", s(&train_a.join("manifest_train.cfg")), "--out-dir", s(&train_b)],
        second,
    );
    let eval_a = base.join("eval_a");
    let ok_c = tdpg_bin(
        &[
            "eval", "--env", "lava", "--checkpoint", s(&train_a.join("final.bin")), "--scenarios",
            "paper", "--eval-rollouts", "300", "--out-dir", s(&eval_a),
        ],
        first,
    );
    let eval_b = base.join("eval_b");
    let ok_d = tdpg_bin(
        &["eval", "--config", s(&eval_a.join("manifest_eval.cfg")), "--out-dir", s(&eval_b)],
        second,
    );
    let train = (csv_files(&train_a), csv_files(&train_b));
    let eval = (csv_files(&eval_a), csv_files(&eval_b));
    let same = !train.0.is_empty() && !eval.0.is_empty() && train.0 == train.1 && eval.0 == eval.1;
    out.record(
        "7 (determinism)",
        ok_a && ok_b && ok_c && ok_d && same,
        format!(
            "{} train and {} eval CSV files identical across {first} and {second} threads: {same}",
            train.0.len(),
            eval.0.len()
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root: PathBuf = tmp.path().to_path_buf();
    let mut out = Outcome { failures: Vec::new() };
    gradient_checks(&mut out);
    mine_oracle(&mut out);
    score_function_oracle(&mut out);
    entropic_risk_properties(&mut out);
    determinism(&mut out, &root);
    lava_reproduction(&mut out, &root);
    ball_robustness(&mut out, &root);
    assert!(out.failures.is_empty(), "failed criteria:\n{}", out.failures.join("\n"));
}
