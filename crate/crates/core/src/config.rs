//! Flat key-value run configuration. Every key has a default; unknown keys
//! are rejected so a run file diffs cleanly against its effective
//! configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::distill::{PolicyKind, TrainConfig, ValLossMode};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::replay::ReplaySchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Corpus.
    pub vocab_size: usize,
    pub num_states: usize,
    pub corpus_seed: u64,
    pub sample_seed: u64,
    pub n_pairs: usize,
    pub prompt_len: usize,
    pub cont_len: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,

    // Models.
    pub context_len: usize,
    pub teacher_embed_dim: usize,
    pub teacher_hidden_dim: usize,
    pub teacher_seed: u64,
    pub student_embed_dim: usize,
    pub student_hidden_dim: usize,
    pub student_seed: u64,

    // Teacher pre-training.
    pub teacher_pairs: usize,
    pub teacher_steps: usize,
    pub teacher_lr: f64,

    // Distillation.
    pub divergence: String,
    pub alpha: f64,
    pub beta: f64,
    pub policy: String,
    pub mixed_rho: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub val_period: usize,
    pub buffer_capacity: usize,
    pub replay_schedule: String,
    pub train_seed: u64,
    pub pretrain_steps: usize,
    pub scheduler_eps: f64,
    pub n_phi: usize,
    pub val_loss_mode: String,

    // Evaluation.
    pub eval_seeds: Vec<u64>,
    pub eval_temperature: f64,

    // Estimator study.
    pub study_vocab: usize,
    pub study_trials: usize,
    pub study_ns: Vec<usize>,
    pub study_alphas: Vec<f64>,
    pub study_seed: u64,
    pub hist_bins: usize,

    // Output.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 16,
            num_states: 8,
            corpus_seed: 7,
            sample_seed: 1,
            n_pairs: 2000,
            prompt_len: 4,
            cont_len: 16,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            context_len: 4,
            teacher_embed_dim: 32,
            teacher_hidden_dim: 64,
            teacher_seed: 100,
            student_embed_dim: 2,
            student_hidden_dim: 4,
            student_seed: 200,
            teacher_pairs: 100_000,
            teacher_steps: 4000,
            teacher_lr: 1e-3,
            divergence: "srkl".into(),
            alpha: 0.1,
            beta: 0.5,
            policy: "adaptive_off_policy".into(),
            mixed_rho: 0.5,
            total_steps: 5000,
            batch_size: 32,
            lr: 1e-2,
            temperature: 1.0,
            val_period: 250,
            buffer_capacity: 1000,
            replay_schedule: "decreasing".into(),
            train_seed: 300,
            pretrain_steps: 500,
            scheduler_eps: 0.1,
            n_phi: 10,
            val_loss_mode: "divergence".into(),
            eval_seeds: vec![0, 1, 2, 3, 4],
            eval_temperature: 1.0,
            study_vocab: 10,
            study_trials: 2000,
            study_ns: vec![10, 100, 1000, 10_000],
            study_alphas: vec![0.0, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9],
            study_seed: 9,
            hist_bins: 50,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad list entry for {key}: {v}")))
        })
        .collect()
}

impl RunConfig {
    /// Parses `key = value` lines; '#' starts a comment. Unknown keys are
    /// rejected. `DLLM_OUT` in the environment overrides `out_dir`.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Ok(dir) = std::env::var("DLLM_OUT") {
            cfg.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            () => {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))?
            };
        }
        match key {
            "vocab_size" => self.vocab_size = parse!(),
            "num_states" => self.num_states = parse!(),
            "corpus_seed" => self.corpus_seed = parse!(),
            "sample_seed" => self.sample_seed = parse!(),
            "n_pairs" => self.n_pairs = parse!(),
            "prompt_len" => self.prompt_len = parse!(),
            "cont_len" => self.cont_len = parse!(),
            "train_frac" => self.train_frac = parse!(),
            "val_frac" => self.val_frac = parse!(),
            "test_frac" => self.test_frac = parse!(),
            "context_len" => self.context_len = parse!(),
            "teacher_embed_dim" => self.teacher_embed_dim = parse!(),
            "teacher_hidden_dim" => self.teacher_hidden_dim = parse!(),
            "teacher_seed" => self.teacher_seed = parse!(),
            "student_embed_dim" => self.student_embed_dim = parse!(),
            "student_hidden_dim" => self.student_hidden_dim = parse!(),
            "student_seed" => self.student_seed = parse!(),
            "teacher_pairs" => self.teacher_pairs = parse!(),
            "teacher_steps" => self.teacher_steps = parse!(),
            "teacher_lr" => self.teacher_lr = parse!(),
            "divergence" => self.divergence = value.to_string(),
            "alpha" => self.alpha = parse!(),
            "beta" => self.beta = parse!(),
            "policy" => self.policy = value.to_string(),
            "mixed_rho" => self.mixed_rho = parse!(),
            "total_steps" => self.total_steps = parse!(),
            "batch_size" => self.batch_size = parse!(),
            "lr" => self.lr = parse!(),
            "temperature" => self.temperature = parse!(),
            "val_period" => self.val_period = parse!(),
            "buffer_capacity" => self.buffer_capacity = parse!(),
            "replay_schedule" => self.replay_schedule = value.to_string(),
            "train_seed" => self.train_seed = parse!(),
            "pretrain_steps" => self.pretrain_steps = parse!(),
            "scheduler_eps" => self.scheduler_eps = parse!(),
            "n_phi" => self.n_phi = parse!(),
            "val_loss_mode" => self.val_loss_mode = value.to_string(),
            "eval_seeds" => self.eval_seeds = parse_list(key, value)?,
            "eval_temperature" => self.eval_temperature = parse!(),
            "study_vocab" => self.study_vocab = parse!(),
            "study_trials" => self.study_trials = parse!(),
            "study_ns" => self.study_ns = parse_list(key, value)?,
            "study_alphas" => self.study_alphas = parse_list(key, value)?,
            "study_seed" => self.study_seed = parse!(),
            "hist_bins" => self.hist_bins = parse!(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    pub fn divergence_kind(&self) -> Result<DivergenceKind> {
        DivergenceKind::from_tag(&self.divergence, self.alpha, self.beta)
    }

    pub fn policy_kind(&self) -> Result<PolicyKind> {
        PolicyKind::from_tag(&self.policy, self.mixed_rho)
    }

    pub fn val_loss_mode_kind(&self) -> Result<ValLossMode> {
        match self.val_loss_mode.as_str() {
            "divergence" => Ok(ValLossMode::Divergence),
            "nll" => Ok(ValLossMode::Nll),
            other => Err(Error::Config(format!("unknown val_loss_mode: {other}"))),
        }
    }

    pub fn teacher_model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            context_len: self.context_len,
            embed_dim: self.teacher_embed_dim,
            hidden_dim: self.teacher_hidden_dim,
            param_seed: self.teacher_seed,
        }
    }

    pub fn student_model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            context_len: self.context_len,
            embed_dim: self.student_embed_dim,
            hidden_dim: self.student_hidden_dim,
            param_seed: self.student_seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            divergence: self.divergence_kind()?,
            policy: self.policy_kind()?,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            temperature: self.temperature,
            val_period: self.val_period,
            buffer_capacity: self.buffer_capacity,
            replay_schedule: ReplaySchedule::from_tag(&self.replay_schedule)?,
            seed: self.train_seed,
            pretrain_steps: self.pretrain_steps,
            scheduler_eps: self.scheduler_eps,
            n_phi: self.n_phi,
            val_loss_mode: self.val_loss_mode_kind()?,
        })
    }

    /// The full effective configuration, echoed into run summaries.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("vocab_size", self.vocab_size.to_string());
        kv("num_states", self.num_states.to_string());
        kv("corpus_seed", self.corpus_seed.to_string());
        kv("sample_seed", self.sample_seed.to_string());
        kv("n_pairs", self.n_pairs.to_string());
        kv("prompt_len", self.prompt_len.to_string());
        kv("cont_len", self.cont_len.to_string());
        kv("train_frac", self.train_frac.to_string());
        kv("val_frac", self.val_frac.to_string());
        kv("test_frac", self.test_frac.to_string());
        kv("context_len", self.context_len.to_string());
        kv("teacher_embed_dim", self.teacher_embed_dim.to_string());
        kv("teacher_hidden_dim", self.teacher_hidden_dim.to_string());
        kv("teacher_seed", self.teacher_seed.to_string());
        kv("student_embed_dim", self.student_embed_dim.to_string());
        kv("student_hidden_dim", self.student_hidden_dim.to_string());
        kv("student_seed", self.student_seed.to_string());
        kv("teacher_pairs", self.teacher_pairs.to_string());
        kv("teacher_steps", self.teacher_steps.to_string());
        kv("teacher_lr", self.teacher_lr.to_string());
        kv("divergence", self.divergence.clone());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("policy", self.policy.clone());
        kv("mixed_rho", self.mixed_rho.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("temperature", self.temperature.to_string());
        kv("val_period", self.val_period.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("replay_schedule", self.replay_schedule.clone());
        kv("train_seed", self.train_seed.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("scheduler_eps", self.scheduler_eps.to_string());
        kv("n_phi", self.n_phi.to_string());
        kv("val_loss_mode", self.val_loss_mode.clone());
        kv(
            "eval_seeds",
            self.eval_seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("eval_temperature", self.eval_temperature.to_string());
        kv("study_vocab", self.study_vocab.to_string());
        kv("study_trials", self.study_trials.to_string());
        kv(
            "study_ns",
            self.study_ns
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "study_alphas",
            self.study_alphas
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("study_seed", self.study_seed.to_string());
        kv("hist_bins", self.hist_bins.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        out
    }
}
