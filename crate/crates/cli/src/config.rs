//! Run configuration: a flat `key = value` file with `[train]`, `[env]` and
//! `[eval]` sections, overridable from the command line.
//!
//! Keys are unique across sections, so an override only names the key. The
//! manifest written by every command is itself a valid config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tdpg_core::envs::{BallCatch, Backdrop, EnvShiftSpec, Lava};
use tdpg_core::tdpg::{Algorithm, EnvId, TrainConfig};
use tdpg_core::{Error, Result};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Train,
    Env,
    Eval,
}

impl Section {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Section::Train),
            "env" => Some(Section::Env),
            "eval" => Some(Section::Eval),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Section::Train => "train",
            Section::Env => "env",
            Section::Eval => "eval",
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "algo",
    "beta",
    "betas",
    "rollouts",
    "mine_minibatch",
    "lr_policy",
    "lr_mine",
    "epochs",
    "mine_epochs_first",
    "mine_epochs",
    "mine_ema_alpha",
    "value_ema_alpha",
    "mine_hidden",
    "mine_parallel",
    "terminal_mi",
    "trv_dim",
    "cost_cap",
    "seed",
    "baseline",
    "reward_to_go",
    "grad_clip",
    "checkpoint_every",
    "early_stop",
    "early_stop_tol",
    "chunk",
    "mine_log_every",
    "init",
    "out_dir",
    "label",
    "code_version",
];

const ENV_KEYS: &[&str] = &[
    "env",
    "sensor_noise",
    "backdrop",
    "initial_min",
    "initial_max",
    "image_size",
    "action_limit",
    "state",
    "frame",
];

const EVAL_KEYS: &[&str] = &[
    "checkpoint",
    "compare",
    "scenarios",
    "eval_rollouts",
    "eval_seed",
    "bins",
];

pub fn section_of(key: &str) -> Option<Section> {
    if TRAIN_KEYS.contains(&key) {
        Some(Section::Train)
    } else if ENV_KEYS.contains(&key) {
        Some(Section::Env)
    } else if EVAL_KEYS.contains(&key) {
        Some(Section::Eval)
    } else {
        None
    }
}

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

fn config_error(origin: &Origin, message: String) -> Error {
    match origin {
        Origin::File { path, line } => Error::Config {
            line: *line,
            message: format!("{}:{line}: {message}", path.display()),
        },
        Origin::Flag => Error::Config {
            line: 0,
            message: format!("command line: {message}"),
        },
    }
}

/// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_file(text: &str, path: &Path) -> Result<Vec<Setting>> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::File {
            path: path.to_path_buf(),
            line: i + 1,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(
                Section::parse(name.trim())
                    .ok_or_else(|| config_error(&origin, format!("unknown section [{name}]")))?,
            );
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(&origin, format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        let home = section_of(key).ok_or_else(|| config_error(&origin, format!("unknown key `{key}`")))?;
        match section {
            None => {
                return Err(config_error(&origin, format!("key `{key}` appears before any section")));
            }
            Some(s) if s != home => {
                return Err(config_error(
                    &origin,
                    format!("key `{key}` belongs in [{}], not [{}]", home.name(), s.name()),
                ));
            }
            _ => {}
        }
        out.push(Setting {
            key: key.to_string(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(out)
}

/// Turns `--key value` pairs into settings. `--key=value` is accepted too.
pub fn parse_flags(args: &[String]) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| config_error(&Origin::Flag, format!("expected `--key`, found `{a}`")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| config_error(&Origin::Flag, format!("`--{body}` needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if section_of(&key).is_none() {
            return Err(config_error(&Origin::Flag, format!("unknown key `{key}`")));
        }
        out.push(Setting {
            key,
            value,
            origin: Origin::Flag,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSettings {
    pub id: EnvId,
    pub shift: EnvShiftSpec,
    pub image_size: usize,
    pub action_limit: f64,
    /// State used by `render-debug`.
    pub state: Option<Vec<f64>>,
    pub frame: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    /// Second policy whose histograms are paired with the first.
    pub compare: Option<PathBuf>,
    pub scenarios: String,
    pub rollouts: usize,
    pub seed: u64,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env: EnvSettings,
    pub eval: EvalSettings,
    /// Warm-start checkpoint.
    pub init: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub label: String,
}

fn parse_value<T: std::str::FromStr>(s: &Setting) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.value
        .parse()
        .map_err(|e| config_error(&s.origin, format!("bad value `{}` for `{}`: {e}", s.value, s.key)))
}

fn parse_bool(s: &Setting) -> Result<bool> {
    match s.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_error(&s.origin, format!("`{}` expects true or false", s.key))),
    }
}

fn parse_list(s: &Setting) -> Result<Vec<f64>> {
    s.value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| config_error(&s.origin, format!("bad number `{v}` in `{}`: {e}", s.key)))
        })
        .collect()
}

fn parse_path(s: &Setting) -> Option<PathBuf> {
    (s.value != "none" && !s.value.is_empty()).then(|| PathBuf::from(&s.value))
}

fn wrap<T>(s: &Setting, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => config_error(&s.origin, other.to_string()),
    })
}

impl RunConfig {
    /// Defaults for `env`.
    pub fn defaults(env: EnvId) -> Self {
        let (mut shift, image_size, initial) = match env {
            EnvId::Lava => (EnvShiftSpec::lava_training(), 0, Lava::default().initial),
            EnvId::BallCatch => (
                EnvShiftSpec::ballcatch_training(),
                16,
                BallCatch::default().initial,
            ),
        };
        shift.initial = Some(initial);
        RunConfig {
            train: TrainConfig::for_env(env),
            env: EnvSettings {
                id: env,
                shift,
                image_size,
                action_limit: f64::INFINITY,
                state: None,
                frame: PathBuf::from("frame.ppm"),
            },
            eval: EvalSettings {
                checkpoint: None,
                compare: None,
                scenarios: "paper".into(),
                rollouts: tdpg_core::eval::EVAL_ROLLOUTS,
                seed: 0,
                bins: tdpg_core::eval::HISTOGRAM_BINS,
            },
            init: None,
            out_dir: PathBuf::from("runs/default"),
            label: "run".into(),
        }
    }

    /// Resolves settings in order; later ones win. The environment must be
    /// named somewhere since it selects the defaults.
    pub fn resolve(settings: &[Setting]) -> Result<Self> {
        let env_setting = settings
            .iter()
            .rev()
            .find(|s| s.key == "env")
            .ok_or_else(|| Error::Config {
                line: 0,
                message: "no environment given (set `env` or pass --env lava|ballcatch)".into(),
            })?;
        let env = wrap(env_setting, EnvId::parse(&env_setting.value))?;
        let mut cfg = RunConfig::defaults(env);
        for s in settings {
            cfg.apply(s)?;
        }
        if let Some(v) = settings.iter().rev().find(|s| s.key == "code_version") {
            if v.value != CODE_VERSION {
                eprintln!(
                    "warning: manifest written by `{}`, running `{CODE_VERSION}`",
                    v.value
                );
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Loads an optional file and applies overrides on top.
    pub fn load(file: Option<&Path>, flags: &[String]) -> Result<Self> {
        let mut settings = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config {
                        line: 0,
                        message: format!("{}: {e}", p.display()),
                    })?;
                parse_file(&text, p)?
            }
            None => Vec::new(),
        };
        settings.extend(parse_flags(flags)?);
        Self::resolve(&settings)
    }

    fn apply(&mut self, s: &Setting) -> Result<()> {
        let t = &mut self.train;
        match s.key.as_str() {
            "algo" => t.algorithm = wrap(s, Algorithm::parse(&s.value))?,
            "beta" => t.beta = parse_value(s)?,
            "betas" => t.betas = parse_list(s)?,
            "rollouts" => t.rollouts = parse_value(s)?,
            "mine_minibatch" => t.mine_minibatch = parse_value(s)?,
            "lr_policy" => t.lr_policy = parse_value(s)?,
            "lr_mine" => t.lr_mine = parse_value(s)?,
            "epochs" => t.epochs = parse_value(s)?,
            "mine_epochs_first" => t.mine_epochs_first = parse_value(s)?,
            "mine_epochs" => t.mine_epochs = parse_value(s)?,
            "mine_ema_alpha" => t.mine_ema_alpha = parse_value(s)?,
            "value_ema_alpha" => {
                t.value_ema_alpha = if s.value == "none" {
                    None
                } else {
                    Some(parse_value(s)?)
                }
            }
            "mine_hidden" => t.mine_hidden = parse_value(s)?,
            "mine_parallel" => t.mine_parallel = parse_bool(s)?,
            "terminal_mi" => t.terminal_mi = parse_bool(s)?,
            "trv_dim" => t.trv_dim = parse_value(s)?,
            "cost_cap" => t.cost_cap = parse_value(s)?,
            "seed" => t.seed = parse_value(s)?,
            "baseline" => t.baseline = parse_bool(s)?,
            "reward_to_go" => t.reward_to_go = parse_bool(s)?,
            "grad_clip" => t.grad_clip = parse_value(s)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(s)?,
            "early_stop" => t.early_stop = parse_bool(s)?,
            "early_stop_tol" => t.early_stop_tol = parse_value(s)?,
            "chunk" => t.chunk = parse_value(s)?,
            "mine_log_every" => t.mine_log_every = parse_value(s)?,
            "init" => self.init = parse_path(s),
            "out_dir" => self.out_dir = PathBuf::from(&s.value),
            "label" => self.label = s.value.clone(),
            "code_version" => {}
            "env" => {
                let id = wrap(s, EnvId::parse(&s.value))?;
                if id != self.env.id {
                    return Err(config_error(&s.origin, "conflicting `env` settings".into()));
                }
            }
            "sensor_noise" => self.env.shift.sensor_noise = parse_value(s)?,
            "backdrop" => self.env.shift.backdrop = wrap(s, Backdrop::parse(&s.value))?,
            "initial_min" => self.initial_mut().0 = parse_value(s)?,
            "initial_max" => self.initial_mut().1 = parse_value(s)?,
            "image_size" => self.env.image_size = parse_value(s)?,
            "action_limit" => self.env.action_limit = parse_value(s)?,
            "state" => {
                self.env.state = if s.value == "none" {
                    None
                } else {
                    Some(parse_list(s)?)
                }
            }
            "frame" => self.env.frame = PathBuf::from(&s.value),
            "checkpoint" => self.eval.checkpoint = parse_path(s),
            "compare" => self.eval.compare = parse_path(s),
            "scenarios" => self.eval.scenarios = s.value.clone(),
            "eval_rollouts" => self.eval.rollouts = parse_value(s)?,
            "eval_seed" => self.eval.seed = parse_value(s)?,
            "bins" => self.eval.bins = parse_value(s)?,
            other => return Err(config_error(&s.origin, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn initial_mut(&mut self) -> &mut (f64, f64) {
        self.env.shift.initial.get_or_insert((0.0, 0.0))
    }

    /// The fully resolved configuration as a config file.
    pub fn manifest(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = String::new();
        let mut kv = |k: &str, v: String| writeln!(m, "{k} = {v}").unwrap();
        kv("[train]\ncode_version", CODE_VERSION.to_string());
        kv("algo", t.algorithm.label().to_string());
        kv("beta", t.beta.to_string());
        kv("betas", list(&t.betas));
        kv("rollouts", t.rollouts.to_string());
        kv("mine_minibatch", t.mine_minibatch.to_string());
        kv("lr_policy", t.lr_policy.to_string());
        kv("lr_mine", t.lr_mine.to_string());
        kv("epochs", t.epochs.to_string());
        kv("mine_epochs_first", t.mine_epochs_first.to_string());
        kv("mine_epochs", t.mine_epochs.to_string());
        kv("mine_ema_alpha", t.mine_ema_alpha.to_string());
        kv(
            "value_ema_alpha",
            t.value_ema_alpha.map_or("none".into(), |a| a.to_string()),
        );
        kv("mine_hidden", t.mine_hidden.to_string());
        kv("mine_parallel", t.mine_parallel.to_string());
        kv("terminal_mi", t.terminal_mi.to_string());
        kv("trv_dim", t.trv_dim.to_string());
        kv("cost_cap", t.cost_cap.to_string());
        kv("seed", t.seed.to_string());
        kv("baseline", t.baseline.to_string());
        kv("reward_to_go", t.reward_to_go.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("early_stop", t.early_stop.to_string());
        kv("early_stop_tol", t.early_stop_tol.to_string());
        kv("chunk", t.chunk.to_string());
        kv("mine_log_every", t.mine_log_every.to_string());
        kv("init", path(&self.init));
        kv("out_dir", self.out_dir.display().to_string());
        kv("label", self.label.clone());
        kv("\n[env]\nenv", self.env.id.label().to_string());
        kv("sensor_noise", self.env.shift.sensor_noise.to_string());
        kv("backdrop", self.env.shift.backdrop.label());
        if let Some((lo, hi)) = self.env.shift.initial {
            kv("initial_min", lo.to_string());
            kv("initial_max", hi.to_string());
        }
        kv("image_size", self.env.image_size.to_string());
        kv("action_limit", self.env.action_limit.to_string());
        kv(
            "state",
            self.env.state.as_deref().map_or("none".into(), list),
        );
        kv("frame", self.env.frame.display().to_string());
        kv("\n[eval]\ncheckpoint", path(&self.eval.checkpoint));
        kv("compare", path(&self.eval.compare));
        kv("scenarios", self.eval.scenarios.clone());
        kv("eval_rollouts", self.eval.rollouts.to_string());
        kv("eval_seed", self.eval.seed.to_string());
        kv("bins", self.eval.bins.to_string());
        m
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.manifest())?;
        Ok(())
    }
}
