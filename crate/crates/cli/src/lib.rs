//! Experiment driver behind the `flab` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flab_core::checks::{compare_trajectories, plateau_then_drop, CheckOutcome, Suite};
use flab_core::data::{load_cifar, load_mnist, Dataset, Split};
use flab_core::experiments::{feedback_alignment, train_with, RunRecord, TrainSpec};
use flab_core::mirror::{factorize_feedback, pre_mirror};
use flab_core::network::init_network;
use flab_core::numerics::Rng;
use flab_core::theory::{alignment_csv, integrate, simulate_finite_d, TeacherStudent, Trajectory};
use flab_core::FlabError;

pub use config::{ConfigError, DatasetKind, RunConfig, TheoryMode};

const INIT_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 11;
const FACTOR_STREAM: u64 = 12;
const PREMIRROR_STREAM: u64 = 13;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Run(#[from] FlabError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Usage(_)
            | CliError::Run(FlabError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sizes the global rayon pool from `FLAB_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "FLAB_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Usage("FLAB_THREADS must be at least 1".into()));
    }
    // a pool that already exists (e.g. in tests) is left as is
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Builds a config from an optional preset, then a config file, then `key=value` overrides.
pub fn build_config(
    preset: Option<&str>,
    file: Option<&Path>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut cfg = match preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{s}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, dir: &Path, split: Split) -> Result<Dataset, CliError> {
    let ds = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(dir, split)?,
        DatasetKind::Cifar10 => load_cifar(dir, 10, split)?,
        DatasetKind::Cifar100 => load_cifar(dir, 100, split)?,
    };
    let limit = match split {
        Split::Train => cfg.train_samples,
        Split::Test => cfg.test_samples,
    };
    Ok(if limit > 0 { ds.head(limit)? } else { ds })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// F↔W_totᵀ angle before the first epoch (after any pre-mirroring).
    pub initial_alignment: f64,
}

/// Trains per `cfg`, reporting each epoch to `progress`.
pub fn run_train(
    cfg: &RunConfig,
    mut progress: impl FnMut(&str),
) -> Result<TrainOutcome, CliError> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or(ConfigError::Missing("data_dir"))?;
    let train_set = load_split(cfg, dir, Split::Train)?;
    let test_set = load_split(cfg, dir, Split::Test)?;
    let base = Rng::new(cfg.seed);
    let mut net = init_network(&cfg.network_config(), &mut base.fork(INIT_STREAM))?;
    let opt = cfg.optimizer();
    if cfg.mirror || cfg.factorized_feedback {
        net = factorize_feedback(&net, &mut base.fork(FACTOR_STREAM))?;
    }
    let mirror = if cfg.mirror {
        let m = cfg
            .mirror_config(net.config.feedback_std())
            .expect("mirror enabled");
        let steps = train_set.len().div_ceil(opt.batch_size.max(1));
        net = pre_mirror(&net, &m, &mut base.fork(PREMIRROR_STREAM), steps)?;
        Some(m)
    } else {
        None
    };
    let initial_alignment = feedback_alignment(&net)?;
    progress(&format!("epoch 0: align_F_Wtot {initial_alignment:.2}"));
    let spec = TrainSpec {
        rule: cfg.rule,
        opt: &opt,
        mirror: mirror.as_ref(),
        epochs: cfg.epochs,
    };
    let record = train_with(
        &mut net,
        &train_set,
        &test_set,
        &spec,
        &base.fork(TRAIN_STREAM),
        |r| {
            progress(&format!(
                "epoch {}: loss {:.4} test {:.2}% align_F_Wtot {:.2}",
                r.epoch, r.train_loss, r.test_accuracy, r.align_f_wtot
            ))
        },
    )?;
    Ok(TrainOutcome {
        record,
        initial_alignment,
    })
}

#[derive(Debug, Default)]
pub struct TheoryOutcome {
    pub ode: Option<Trajectory>,
    pub sim: Option<Trajectory>,
    pub checks: Vec<CheckOutcome>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(&path, text).map_err(io_err(&path))?;
    files.push(path);
    Ok(())
}

/// Integrates the ODEs and/or simulates the finite-D system from one
/// shared initialization, writing trajectory and alignment CSVs to `out_dir`.
pub fn run_theory(cfg: &RunConfig) -> Result<TheoryOutcome, CliError> {
    let ts_cfg = cfg.teacher_student();
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut out = TheoryOutcome::default();
    if matches!(cfg.theory_mode, TheoryMode::Ode | TheoryMode::Both) {
        let op0 = TeacherStudent::init(&ts_cfg)?.order_params()?;
        let traj = integrate(&op0, cfg.eta, cfg.t_max, cfg.dt, &cfg.integrate_options())?;
        write_file(out_dir.join("theory.csv"), &traj.to_csv(), &mut out.files)?;
        write_file(
            out_dir.join("theory_alignment.csv"),
            &alignment_csv(&traj.alignment()),
            &mut out.files,
        )?;
        out.ode = Some(traj);
    }
    if matches!(cfg.theory_mode, TheoryMode::Sim | TheoryMode::Both) {
        let traj = simulate_finite_d(&ts_cfg, cfg.theory_rule, &cfg.simulate_options())?;
        write_file(
            out_dir.join("simulation.csv"),
            &traj.to_csv(),
            &mut out.files,
        )?;
        write_file(
            out_dir.join("simulation_alignment.csv"),
            &alignment_csv(&traj.alignment()),
            &mut out.files,
        )?;
        out.sim = Some(traj);
    }
    if let (Some(o), Some(s)) = (&out.ode, &out.sim) {
        if cfg.t_max >= 1.0 {
            out.checks
                .push(compare_trajectories(o, s, 1.0, cfg.t_max, 20));
        }
        if cfg.t_max >= 5000.0 {
            out.checks
                .push(plateau_then_drop(s, 10f64.powf(2.5), 10f64.powf(3.5)));
        }
    }
    Ok(out)
}

/// Runs one suite, printing a line per property; `Ok(true)` iff all pass.
pub fn run_check(suite: &str, seed: u64, mut w: impl Write) -> Result<bool, CliError> {
    let suite: Suite = suite
        .parse()
        .map_err(|e: FlabError| CliError::Usage(e.to_string()))?;
    let outcomes = suite.run(seed)?;
    for o in &outcomes {
        writeln!(w, "{o}").map_err(io_err(Path::new("<stdout>")))?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}
