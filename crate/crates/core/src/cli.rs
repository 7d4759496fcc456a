//! Command-line entry point.
//!
//! Every setting is a `key = value` pair. Values come from the built-in
//! defaults, then an optional `--config` file, then `--key value` flags,
//! each layer overriding the previous one. The effective settings of a
//! command are echoed into the header of every file it writes. All random
//! streams derive from the single `seed` (see [`crate::rng`]).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

use crate::autodiff::Precision;
use crate::behavior::{train_behavior_model, BehaviorModel, CurveLog, TrainConfig};
use crate::dataset::{generate_dataset, Dataset};
use crate::env::EnvConfig;
use crate::error::Error;
use crate::fileio;
use crate::lbrac::{
    best_behavior, discretize_returns, eval_rows, evaluate_policy, format_eval_report, train_lbrac, LbracConfig,
    LbracPolicy,
};
use crate::networks::{ActionBox, Checkpoint, Networks};
use crate::viz::{clustering_scores, export_report, pca_project, projection_rows, TrajectoryInfo};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// A setting with its default. `None` means derived from other settings.
struct Key {
    name: &'static str,
    default: Option<&'static str>,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

const SEED: Key = key("seed", "0", "global seed; every stream derives from it");
const DATA: Key = key("data", "dataset.jsonl", "dataset file");
const BEHAVIOR: Key = key("behavior", "behavior.ckpt.json", "behavior-model checkpoint");
const POLICY: Key = key("policy", "policy.ckpt.json", "policy checkpoint");
const EVAL_REPORT: Key = key("eval-report", "eval.txt", "evaluation table");
const EVAL_EPISODES: Key = key("eval-episodes", "20", "evaluation episodes");

const TRAIN_KEYS: [Key; 8] = [
    key("alpha", "0.1", "commitment weight"),
    key("batch-size", "256", "transitions per step"),
    key("policy-lr", "5e-5", "policy-side Adam rate"),
    key("q-lr", "1e-4", "Q-side Adam rate"),
    key("rho", "0.001", "target soft-update rate"),
    key("gamma", "0.99", "discount"),
    key("log-every", "100", "steps per training-log record"),
    key("matmul-precision", "f32", "f32 or f64 matrix products during training"),
];

const GEN_KEYS: [Key; 11] = [
    SEED,
    DATA,
    key("k-true", "3", "number of scripted sources"),
    key("m", "300", "number of trajectories"),
    Key {
        name: "n-goals",
        default: None,
        help: "number of goals [default: k-true]",
    },
    key("goal-radius", "0.8", "goal distance from the origin"),
    key("action-box", "0.1", "half-width of the action box"),
    key("noise-std", "0.01", "dynamics noise"),
    key("horizon", "50", "steps per trajectory"),
    key("reward-bandwidth", "8", "reward kernel bandwidth"),
    key("gamma", "0.99", "discount"),
];

struct Spec {
    name: &'static str,
    about: &'static str,
    keys: Vec<&'static Key>,
}

fn specs() -> Vec<Spec> {
    static BEHAVIOR_ONLY: [Key; 4] = [
        key("k", "3", "codebook size"),
        key("steps", "20000", "training steps"),
        key("behavior-log", "behavior.log", "training curve"),
        SEED,
    ];
    static POLICY_ONLY: [Key; 6] = [
        key("beta", "1", "KL regularization weight"),
        key("policy-steps", "20000", "LBRAC-v training steps"),
        key("kl-samples", "1", "KL samples per state in training"),
        key("policy-log", "policy.log", "training curve"),
        EVAL_EPISODES,
        SEED,
    ];
    static EVAL_ONLY: [Key; 5] = [SEED, DATA, POLICY, EVAL_REPORT, EVAL_EPISODES];
    static REPORT_ONLY: [Key; 4] = [
        DATA,
        key("checkpoint", "policy.ckpt.json", "behavior or policy checkpoint"),
        key("projection", "projection.csv", "projected points"),
        key("scores", "scores.txt", "clustering scores"),
    ];
    static IO_BEHAVIOR: [Key; 2] = [DATA, BEHAVIOR];
    static IO_POLICY: [Key; 4] = [DATA, BEHAVIOR, POLICY, EVAL_REPORT];

    let mut train_behavior: Vec<&'static Key> = IO_BEHAVIOR.iter().chain(&BEHAVIOR_ONLY).collect();
    train_behavior.extend(TRAIN_KEYS.iter());
    let mut train_policy: Vec<&'static Key> = IO_POLICY.iter().chain(&POLICY_ONLY).collect();
    train_policy.extend(TRAIN_KEYS.iter());
    vec![
        Spec {
            name: "gen-data",
            about: "Generate a multi-source dataset",
            keys: GEN_KEYS.iter().collect(),
        },
        Spec {
            name: "train-behavior",
            about: "Learn a behavior set from a dataset",
            keys: train_behavior,
        },
        Spec {
            name: "train-policy",
            about: "Train an LBRAC-v policy from a behavior checkpoint and evaluate it",
            keys: train_policy,
        },
        Spec {
            name: "eval",
            about: "Evaluate a policy checkpoint",
            keys: EVAL_ONLY.iter().collect(),
        },
        Spec {
            name: "report",
            about: "Project embeddings to 2D and score clusters",
            keys: REPORT_ONLY.iter().collect(),
        },
    ]
}

/// Every key any command accepts; config files may carry all of them.
fn known_keys() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = specs().iter().flat_map(|s| s.keys.iter().map(|k| k.name)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn command() -> Command {
    let mut root = Command::new("behavior-forge")
        .about("Behavior-set estimation and LBRAC-v on a synthetic multi-source environment")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in specs() {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value settings file"),
        );
        for k in &spec.keys {
            let mut arg = Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help);
            if let Some(d) = k.default {
                arg = arg.help(format!("{} [default: {d}]", k.help));
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parse a `key = value` file. `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let known = known_keys();
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !known.contains(&k) {
            return Err(format!("line {}: unknown key `{k}`", n + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{k}`", n + 1));
        }
    }
    Ok(out)
}

/// Effective settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl Settings {
    fn raw(&self, k: &str) -> CliResult<&str> {
        self.values
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("missing setting `{k}`")))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(k)?;
        v.parse()
            .map_err(|e| CliError::Usage(format!("--{k}: cannot parse `{v}`: {e}")))
    }

    fn path(&self, k: &str) -> CliResult<PathBuf> {
        let v = self.raw(k)?;
        if v.is_empty() {
            return Err(CliError::Usage(format!("--{k} must not be empty")));
        }
        Ok(PathBuf::from(v))
    }

    /// Header block: the command and every effective setting.
    pub fn header(&self) -> BTreeMap<String, String> {
        let mut h = self.values.clone();
        h.insert("command".into(), self.command.clone());
        h
    }
}

fn resolve(spec: &Spec, m: &ArgMatches) -> CliResult<Settings> {
    let file = match m.get_one::<String>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("--config {p}: {e}")))?;
            parse_config(&text).map_err(|e| CliError::Usage(format!("{p}: {e}")))?
        }
        None => BTreeMap::new(),
    };
    let mut values = BTreeMap::new();
    for k in &spec.keys {
        let v = m
            .get_one::<String>(k.name)
            .cloned()
            .or_else(|| file.get(k.name).cloned())
            .or_else(|| k.default.map(str::to_string));
        if let Some(v) = v {
            values.insert(k.name.to_string(), v);
        }
    }
    if spec.name == "gen-data" && !values.contains_key("n-goals") {
        let k = values["k-true"].clone();
        values.insert("n-goals".into(), k);
    }
    Ok(Settings {
        command: spec.name.to_string(),
        values,
    })
}

/// Parse `args` (including the program name) into effective settings.
pub fn settings_from_args<I, T>(args: I) -> CliResult<Settings>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command()
        .try_get_matches_from(args)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (name, sub) = m.subcommand().expect("subcommand required");
    let spec = specs().into_iter().find(|s| s.name == name).expect("known subcommand");
    resolve(&spec, sub)
}

/// Run with `args` and return the process exit code. Help and version
/// requests print and return 0.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args);
    let m = match matches {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, sub) = m.subcommand().expect("subcommand required");
    let spec = specs().into_iter().find(|s| s.name == name).expect("known subcommand");
    let result = resolve(&spec, sub).and_then(|s| execute(&s));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("behavior-forge {name}: {e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Runtime(_) => EXIT_RUNTIME,
            }
        }
    }
}

pub fn execute(s: &Settings) -> CliResult<()> {
    match s.command.as_str() {
        "gen-data" => gen_data(s),
        "train-behavior" => train_behavior(s),
        "train-policy" => train_policy(s),
        "eval" => eval(s),
        "report" => report(s),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn env_config(s: &Settings) -> CliResult<EnvConfig> {
    let half: f64 = s.parse("action-box")?;
    if !(half > 0.0 && half.is_finite()) {
        return Err(CliError::Usage(format!("--action-box must be positive, got {half}")));
    }
    let cfg = EnvConfig {
        n_goals: s.parse("n-goals")?,
        goal_radius: s.parse("goal-radius")?,
        action_box: ActionBox::symmetric(2, half),
        noise_std: s.parse("noise-std")?,
        horizon: s.parse("horizon")?,
        reward_bandwidth: s.parse("reward-bandwidth")?,
        gamma: s.parse("gamma")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(s: &Settings, steps_key: &str) -> CliResult<TrainConfig> {
    let precision: Precision = s.parse("matmul-precision")?;
    let tc = TrainConfig {
        alpha: s.parse("alpha")?,
        batch_size: s.parse("batch-size")?,
        total_steps: s.parse(steps_key)?,
        policy_lr: s.parse("policy-lr")?,
        q_lr: s.parse("q-lr")?,
        rho: s.parse("rho")?,
        gamma: s.parse("gamma")?,
        seed: s.parse("seed")?,
        log_every: s.parse("log-every")?,
        precision,
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(tc)
}

fn gen_data(s: &Settings) -> CliResult<()> {
    let cfg = env_config(s)?;
    let k_true: usize = s.parse("k-true")?;
    let m: usize = s.parse("m")?;
    if k_true == 0 || m == 0 {
        return Err(CliError::Usage("--k-true and --m must be positive".into()));
    }
    let ds = generate_dataset(&cfg, k_true, m, s.parse("seed")?)?;
    ds.save(&s.path("data")?)?;
    Ok(())
}

fn header_text(h: &BTreeMap<String, String>) -> String {
    h.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

fn write_log(path: &Path, header: &BTreeMap<String, String>, log: &CurveLog, keys: &[&str]) -> CliResult<()> {
    let text = header_text(header) + &log.to_table(keys);
    fileio::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::Runtime(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ))),
        _ => Ok(()),
    }
}

fn train_behavior(s: &Settings) -> CliResult<()> {
    let tc = train_config(s, "steps")?;
    let k: usize = s.parse("k")?;
    if k == 0 {
        return Err(CliError::Usage("--k must be positive".into()));
    }
    let (out, log_path) = (s.path("behavior")?, s.path("behavior-log")?);
    ensure_parent(&out)?;
    ensure_parent(&log_path)?;
    let ds = Dataset::load(&s.path("data")?)?;
    let trained = train_behavior_model(&ds, k, &tc)?;
    let header = s.header();
    Checkpoint::from_networks(&trained.model.nets, "behavior", tc.seed, header.clone()).save(&out)?;
    write_log(&log_path, &header, &trained.log, &["rec", "com", "q"])
}

fn load_behavior(path: &Path, ds: &Dataset) -> CliResult<BehaviorModel> {
    let ck = Checkpoint::load(path)?;
    if ck.manifest.kind != "behavior" {
        return Err(CliError::Runtime(Error::Format {
            what: "checkpoint",
            detail: format!("{} is a `{}` checkpoint, expected `behavior`", path.display(), ck.manifest.kind),
        }));
    }
    let nets = ck.to_networks()?;
    if nets.m() != ds.m() {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "checkpoint has M={} but the dataset has {}",
            nets.m(),
            ds.m()
        ))));
    }
    Ok(BehaviorModel { nets })
}

fn regularization_label(beta: f64) -> String {
    if beta == 0.0 {
        "unregularized".into()
    } else {
        format!("behavior-regularized (beta = {beta})")
    }
}

fn train_policy(s: &Settings) -> CliResult<()> {
    let tc = train_config(s, "policy-steps")?;
    let cfg = LbracConfig {
        train: tc,
        beta: s.parse("beta")?,
        eval_episodes: s.parse("eval-episodes")?,
        kl_samples: s.parse("kl-samples")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (out, log_path, report_path) = (s.path("policy")?, s.path("policy-log")?, s.path("eval-report")?);
    for p in [&out, &log_path, &report_path] {
        ensure_parent(p)?;
    }
    let ds = Dataset::load(&s.path("data")?)?;
    let model = load_behavior(&s.path("behavior")?, &ds)?;
    let trained = train_lbrac(&ds, model, &cfg)?;
    let mut header = s.header();
    header.insert("k-star".into(), (trained.policy.k_star + 1).to_string());
    header.insert("regularization".into(), regularization_label(cfg.beta));
    trained.policy.checkpoint(cfg.train.seed, header.clone()).save(&out)?;
    write_log(
        &log_path,
        &header,
        &trained.log,
        &["rec", "com", "actor", "kl", "q", "critic", "drift_e", "drift_w"],
    )?;
    let returns = evaluate_policy(&trained.policy, &ds.meta.env, cfg.eval_episodes, cfg.train.seed)?;
    let rows = eval_rows(&ds.meta, cfg.train.seed, &returns)?;
    fileio::write_atomic(&report_path, format_eval_report(&header, &rows).as_bytes())?;
    Ok(())
}

fn load_policy(path: &Path) -> CliResult<LbracPolicy> {
    let ck = Checkpoint::load(path)?;
    if ck.manifest.kind != "policy" {
        return Err(CliError::Runtime(Error::Format {
            what: "checkpoint",
            detail: format!("{} is a `{}` checkpoint, expected `policy`", path.display(), ck.manifest.kind),
        }));
    }
    Ok(LbracPolicy::load(&ck)?)
}

fn eval(s: &Settings) -> CliResult<()> {
    let episodes: usize = s.parse("eval-episodes")?;
    if episodes == 0 {
        return Err(CliError::Usage("--eval-episodes must be positive".into()));
    }
    let seed: u64 = s.parse("seed")?;
    let out = s.path("eval-report")?;
    ensure_parent(&out)?;
    let ds = Dataset::load(&s.path("data")?)?;
    let policy = load_policy(&s.path("policy")?)?;
    let returns = evaluate_policy(&policy, &ds.meta.env, episodes, seed)?;
    let rows = eval_rows(&ds.meta, seed, &returns)?;
    let mut header = s.header();
    header.insert("k-star".into(), (policy.k_star + 1).to_string());
    fileio::write_atomic(&out, format_eval_report(&header, &rows).as_bytes())?;
    Ok(())
}

fn report(s: &Settings) -> CliResult<()> {
    let ds = Dataset::load(&s.path("data")?)?;
    let ck = Checkpoint::load(&s.path("checkpoint")?)?;
    let (nets, policy): (Networks, Option<LbracPolicy>) = match ck.manifest.kind.as_str() {
        "policy" => {
            let p = LbracPolicy::load(&ck)?;
            (p.nets.clone(), Some(p))
        }
        "behavior" => (ck.to_networks()?, None),
        other => {
            return Err(CliError::Runtime(Error::Format {
                what: "checkpoint",
                detail: format!("unknown checkpoint kind `{other}`"),
            }))
        }
    };
    if nets.m() != ds.m() {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "checkpoint has M={} but the dataset has {}",
            nets.m(),
            ds.m()
        ))));
    }
    let model = BehaviorModel { nets };
    let store = &model.nets.store;
    let w = crate::autodiff::l2_normalize_rows(store.get(model.nets.policy.trajectories));
    let e = crate::autodiff::l2_normalize_rows(store.get(model.nets.policy.codebook));
    let e_pi = policy.as_ref().map(LbracPolicy::embedding);
    let projection = pca_project(&w, Some(&e), e_pi.as_deref())?;
    let returns = ds.undiscounted_returns();
    let info = TrajectoryInfo {
        discretized: discretize_returns(&returns)?,
        returns,
        assignments: model.assignments(),
        source_labels: ds.source_labels(),
    };
    let k_star = match &policy {
        Some(p) => Some(p.k_star),
        None => Some(best_behavior(&ds, &model)?),
    };
    let rows = projection_rows(&projection, &info, policy.as_ref().and(k_star))?;
    let scores = clustering_scores(&model.assignment_matrix(), &info.source_labels)?;
    let mut header = s.header();
    header.insert("k".into(), model.k().to_string());
    header.insert("m".into(), model.m().to_string());
    if let Some(k) = k_star {
        header.insert("k-star".into(), (k + 1).to_string());
    }
    export_report(
        &s.path("projection")?,
        &s.path("scores")?,
        &header,
        &rows,
        &scores,
        projection.explained,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_every_key() {
        let s = settings_from_args(["bf", "train-behavior"]).unwrap();
        assert_eq!(s.values["alpha"], "0.1");
        assert_eq!(s.values["k"], "3");
        assert_eq!(s.values["steps"], "20000");
        let g = settings_from_args(["bf", "gen-data", "--k-true", "2"]).unwrap();
        assert_eq!(g.values["n-goals"], "2");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# shared\nseed = 7\nk = 5\nbeta = 3\n").unwrap();
        let ps = p.to_str().unwrap();
        let s = settings_from_args(["bf", "train-behavior", "--config", ps, "--k", "4"]).unwrap();
        assert_eq!(s.values["seed"], "7");
        assert_eq!(s.values["k"], "4");
        assert!(!s.values.contains_key("beta"));
    }

    #[test]
    fn config_errors() {
        assert!(parse_config("nonsense").is_err());
        assert!(parse_config("color = red").is_err());
        assert!(parse_config("seed = 1\nseed = 2").is_err());
        assert_eq!(parse_config("  seed=4  \n\n").unwrap()["seed"], "4");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["bf", "gen-data", "--m", "lots"]), EXIT_USAGE);
        assert_eq!(run(["bf", "train-behavior", "--no-such-flag", "1"]), EXIT_USAGE);
        assert_eq!(run(["bf"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("absent.jsonl");
        assert_eq!(run(["bf".as_ref(), "eval".as_ref(), "--data".as_ref(), data.as_os_str()]), EXIT_RUNTIME);
    }

    #[test]
    fn beta_zero_label() {
        assert_eq!(regularization_label(0.0), "unregularized");
        assert!(regularization_label(1.0).starts_with("behavior-regularized"));
    }
}
