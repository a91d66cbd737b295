//! Plain `key = value` run configuration: one pair per line, `#` starts a
//! comment. Unknown keys are rejected; omitted keys keep their defaults.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use flab_core::mirror::MirrorConfig;
use flab_core::network::{ActivationKind, InitKind, NetworkConfig};
use flab_core::rules::{BatchReduction, OptimizerConfig, RuleKind};
use flab_core::theory::{IntegrateOptions, SimulateOptions, TeacherStudentConfig, TheoryRule};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value, got '{text}'")]
    Syntax { line: usize, text: String },

    #[error("unknown key '{0}'")]
    UnknownKey(String),

    #[error("invalid value '{value}' for '{key}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error(
        "unknown preset '{0}' (known: mnist-1h, cifar10-1h, fig3, fig3-refine, table1-pepita-wm)"
    )]
    UnknownPreset(String),

    #[error("missing required key '{0}'")]
    Missing(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn input_dim(self) -> usize {
        match self {
            DatasetKind::Mnist => 784,
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => 3072,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            _ => Err("expected mnist, cifar10 or cifar100".into()),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryMode {
    Ode,
    Sim,
    Both,
}

impl FromStr for TheoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ode" => Ok(TheoryMode::Ode),
            "sim" => Ok(TheoryMode::Sim),
            "both" => Ok(TheoryMode::Both),
            _ => Err("expected ode, sim or both".into()),
        }
    }
}

impl fmt::Display for TheoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TheoryMode::Ode => "ode",
            TheoryMode::Sim => "sim",
            TheoryMode::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub rule: RuleKind,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// 0 keeps the whole split.
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,

    pub hidden_layers: Vec<usize>,
    pub hidden_activation: ActivationKind,
    pub output_activation: ActivationKind,
    pub init: InitKind,
    pub feedback_scale: f64,
    pub dropout: f64,
    pub normalize: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub reduction: BatchReduction,

    /// Store `F` as a product of per-layer factors even without mirroring.
    pub factorized_feedback: bool,
    pub mirror: bool,
    pub lr_mirror: f64,
    pub weight_decay_mirror: f64,
    pub noise_std: f64,
    pub premirror_epochs: usize,

    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    pub q0: f64,
    pub kappa: f64,
    pub theory_rule: TheoryRule,
    pub theory_mode: TheoryMode,
    pub t_max: f64,
    pub dt: f64,
    pub n_mc: usize,
    pub n_records: usize,
    pub n_test: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let ts = TeacherStudentConfig::default();
        Self {
            seed: 0,
            rule: RuleKind::Pepita,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            out: None,
            train_samples: 0,
            test_samples: 0,
            epochs: 100,
            hidden_layers: vec![1024],
            hidden_activation: ActivationKind::Relu,
            output_activation: ActivationKind::Softmax,
            init: InitKind::HeNormal,
            feedback_scale: 0.05,
            dropout: 0.1,
            normalize: false,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            decay_epochs: opt.decay_epochs,
            decay_factor: opt.decay_factor,
            batch_size: opt.batch_size,
            reduction: opt.reduction,
            factorized_feedback: false,
            mirror: false,
            lr_mirror: 0.1,
            weight_decay_mirror: 0.0,
            noise_std: 0.03,
            premirror_epochs: 0,
            d: ts.d,
            k: ts.k,
            m: ts.m,
            eta: ts.eta,
            q0: ts.q0,
            kappa: ts.kappa,
            theory_rule: TheoryRule::Afa,
            theory_mode: TheoryMode::Both,
            t_max: 1.0e4,
            dt: 0.5,
            n_mc: 20_000,
            n_records: 60,
            n_test: 20_000,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "rule" => self.rule = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "data_dir" => self.data_dir = parse_path(value),
            "out" => self.out = parse_path(value),
            "train_samples" => self.train_samples = parse(key, value)?,
            "test_samples" => self.test_samples = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "hidden_layers" => self.hidden_layers = parse_list(key, value)?,
            "hidden_activation" => self.hidden_activation = parse(key, value)?,
            "output_activation" => self.output_activation = parse(key, value)?,
            "init" => self.init = parse(key, value)?,
            "feedback_scale" => self.feedback_scale = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "decay_epochs" => self.decay_epochs = parse_list(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            "factorized_feedback" => self.factorized_feedback = parse(key, value)?,
            "mirror" => self.mirror = parse(key, value)?,
            "lr_mirror" => self.lr_mirror = parse(key, value)?,
            "weight_decay_mirror" => self.weight_decay_mirror = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "premirror_epochs" => self.premirror_epochs = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "q0" => self.q0 = parse(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "theory_rule" => self.theory_rule = parse(key, value)?,
            "theory_mode" => self.theory_mode = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "n_mc" => self.n_mc = parse(key, value)?,
            "n_records" => self.n_records = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "out_dir" => self.out_dir = parse_path(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("rule", self.rule.to_string());
        kv("dataset", self.dataset.to_string());
        kv("data_dir", path_str(&self.data_dir));
        kv("out", path_str(&self.out));
        kv("train_samples", self.train_samples.to_string());
        kv("test_samples", self.test_samples.to_string());
        kv("epochs", self.epochs.to_string());
        kv("hidden_layers", join(&self.hidden_layers));
        kv("hidden_activation", self.hidden_activation.to_string());
        kv("output_activation", self.output_activation.to_string());
        kv("init", self.init.to_string());
        kv("feedback_scale", self.feedback_scale.to_string());
        kv("dropout", self.dropout.to_string());
        kv("normalize", self.normalize.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("decay_epochs", join(&self.decay_epochs));
        kv("decay_factor", self.decay_factor.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("reduction", self.reduction.to_string());
        kv("factorized_feedback", self.factorized_feedback.to_string());
        kv("mirror", self.mirror.to_string());
        kv("lr_mirror", self.lr_mirror.to_string());
        kv("weight_decay_mirror", self.weight_decay_mirror.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("premirror_epochs", self.premirror_epochs.to_string());
        kv("d", self.d.to_string());
        kv("k", self.k.to_string());
        kv("m", self.m.to_string());
        kv("eta", self.eta.to_string());
        kv("q0", self.q0.to_string());
        kv("kappa", self.kappa.to_string());
        kv("theory_rule", self.theory_rule.to_string());
        kv("theory_mode", self.theory_mode.to_string());
        kv("t_max", self.t_max.to_string());
        kv("dt", self.dt.to_string());
        kv("n_mc", self.n_mc.to_string());
        kv("n_records", self.n_records.to_string());
        kv("n_test", self.n_test.to_string());
        kv("out_dir", path_str(&self.out_dir));
        s
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let text = match name {
            // one hidden layer of 1024
            "mnist-1h" => "dataset = mnist\nlr = 0.1\nweight_decay = 1e-5\n",
            "cifar10-1h" => "dataset = cifar10\nlr = 0.01\nweight_decay = 1e-4\n",
            "table1-pepita-wm" => {
                "dataset = mnist\nlr = 0.1\nweight_decay = 1e-5\nmirror = true\nlr_mirror = 0.1\n\
                 weight_decay_mirror = 0.0\npremirror_epochs = 5\n"
            }
            "fig3" => "d = 500\nk = 2\nm = 2\neta = 0.05\ntheory_mode = both\n",
            "fig3-refine" => "d = 500\nk = 2\nm = 2\neta = 0.05\ndt = 0.25\ntheory_mode = ode\n",
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let mut sizes = vec![self.dataset.input_dim()];
        sizes.extend(&self.hidden_layers);
        sizes.push(self.dataset.n_classes());
        let depth = sizes.len() - 1;
        let mut activations = vec![self.hidden_activation; depth];
        activations[depth - 1] = self.output_activation;
        NetworkConfig {
            layer_sizes: sizes,
            activations,
            init: self.init,
            feedback_scale: self.feedback_scale,
            dropout_rate: self.dropout,
            normalize_activations: self.normalize,
            seed: self.seed,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            batch_size: self.batch_size,
            reduction: self.reduction,
        }
    }

    /// `None` unless mirroring is enabled.
    pub fn mirror_config(&self, target_std: f64) -> Option<MirrorConfig> {
        self.mirror.then(|| MirrorConfig {
            lr_mirror: self.lr_mirror,
            weight_decay_mirror: self.weight_decay_mirror,
            noise_std: self.noise_std,
            premirror_epochs: self.premirror_epochs,
            target_std,
        })
    }

    pub fn teacher_student(&self) -> TeacherStudentConfig {
        TeacherStudentConfig {
            d: self.d,
            k: self.k,
            m: self.m,
            eta: self.eta,
            q0: self.q0,
            kappa: self.kappa,
            seed: self.seed,
        }
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            n_mc: self.n_mc,
            n_records: self.n_records,
            seed: self.seed,
        }
    }

    pub fn simulate_options(&self) -> SimulateOptions {
        SimulateOptions {
            t_max: self.t_max,
            n_records: self.n_records,
            n_test: self.n_test,
        }
    }
}
