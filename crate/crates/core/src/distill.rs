//! The distillation training loop: the adaptive off-policy pipeline plus
//! the baseline policies (SFT, fixed-data KD, SeqKD, on-policy, mixed).
//!
//! Per step of the adaptive policy one uniform draw u is compared first
//! against lambda_R = phi * zeta(t) (generate student continuations and
//! store them) and then against phi (train from the replay buffer instead
//! of the fixed dataset). Teacher target distributions are recomputed on
//! whatever trajectory the batch carries.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, SeqPair};
use crate::divergence::{categorical_div, grad_wrt_q, DivergenceKind};
use crate::error::{Error, Result};
use crate::model::{adam_step, AdamState, ModelParams, Tensors};
use crate::replay::{generation_prob, replay_ratio, ReplayBuffer, ReplaySchedule};
use crate::scheduler;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Sft,
    KdFixed,
    SeqKd,
    OnPolicy,
    Mixed { rho: f64 },
    AdaptiveOffPolicy,
}

impl PolicyKind {
    pub fn from_tag(tag: &str, rho: f64) -> Result<Self> {
        let policy = match tag {
            "sft" => PolicyKind::Sft,
            "kd_fixed" => PolicyKind::KdFixed,
            "seqkd" => PolicyKind::SeqKd,
            "on_policy" => PolicyKind::OnPolicy,
            "mixed" => {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::InvalidArgument(format!(
                        "mixed ratio must be in [0, 1], got {rho}"
                    )));
                }
                PolicyKind::Mixed { rho }
            }
            "adaptive_off_policy" => PolicyKind::AdaptiveOffPolicy,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown policy tag: {tag}"
                )))
            }
        };
        Ok(policy)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PolicyKind::Sft => "sft",
            PolicyKind::KdFixed => "kd_fixed",
            PolicyKind::SeqKd => "seqkd",
            PolicyKind::OnPolicy => "on_policy",
            PolicyKind::Mixed { .. } => "mixed",
            PolicyKind::AdaptiveOffPolicy => "adaptive_off_policy",
        }
    }
}

/// What the scheduler's validation loss measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValLossMode {
    /// Active distillation divergence, teacher-forced on ground truth.
    Divergence,
    /// Plain NLL of the ground-truth continuations.
    Nll,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub divergence: DivergenceKind,
    pub policy: PolicyKind,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Sampling temperature for student-generated outputs.
    pub temperature: f64,
    pub val_period: usize,
    pub buffer_capacity: usize,
    pub replay_schedule: ReplaySchedule,
    pub seed: u64,
    /// SFT steps run on the student before the policy loop.
    pub pretrain_steps: usize,
    pub scheduler_eps: f64,
    pub n_phi: usize,
    pub val_loss_mode: ValLossMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.divergence.validate()?;
        if self.total_steps < 1 || self.batch_size < 1 || self.val_period < 1 {
            return Err(Error::InvalidArgument(
                "total_steps, batch_size, val_period must all be >= 1".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(Error::InvalidArgument(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Fixed,
    FreshSgo,
    ReplaySgo,
}

impl BatchSource {
    pub fn tag(&self) -> &'static str {
        match self {
            BatchSource::Fixed => "fixed",
            BatchSource::FreshSgo => "fresh_sgo",
            BatchSource::ReplaySgo => "replay_sgo",
        }
    }
}

/// Outcome of the two nested comparisons of the adaptive policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectedSource {
    GenerateAndReplay,
    Replay,
    Fixed,
}

/// Branch rule: u < lambda_R generates and trains from the buffer;
/// lambda_R <= u < phi replays (falling back to fixed data when the buffer
/// is empty); otherwise the fixed dataset is used.
pub fn select_source(u: f64, phi: f64, lambda_r: f64, buffer_nonempty: bool) -> SelectedSource {
    if u < lambda_r {
        SelectedSource::GenerateAndReplay
    } else if u < phi {
        if buffer_nonempty {
            SelectedSource::Replay
        } else {
            SelectedSource::Fixed
        }
    } else {
        SelectedSource::Fixed
    }
}

/// Loss used on the batch a baseline policy selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    Divergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineBatch {
    Fixed,
    TeacherGenerated,
    FreshSgo,
}

/// Batch source and loss kind for one step of a non-adaptive policy.
/// `u` is the step's uniform draw (used only by the mixed policy).
pub fn baseline_step(policy: PolicyKind, u: f64) -> (BaselineBatch, LossKind) {
    match policy {
        PolicyKind::Sft => (BaselineBatch::Fixed, LossKind::Nll),
        PolicyKind::KdFixed => (BaselineBatch::Fixed, LossKind::Divergence),
        PolicyKind::SeqKd => (BaselineBatch::TeacherGenerated, LossKind::Nll),
        PolicyKind::OnPolicy => (BaselineBatch::FreshSgo, LossKind::Divergence),
        PolicyKind::Mixed { rho } => {
            if u < rho {
                (BaselineBatch::FreshSgo, LossKind::Divergence)
            } else {
                (BaselineBatch::Fixed, LossKind::Divergence)
            }
        }
        PolicyKind::AdaptiveOffPolicy => {
            unreachable!("adaptive policy is handled by the main loop")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub source: BatchSource,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub step: usize,
    pub val_loss: f64,
    pub loss_ref: f64,
    pub phi: f64,
    pub lambda_r: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub fixed_count: usize,
    pub fresh_sgo_count: usize,
    pub replay_sgo_count: usize,
    /// Batch-level SGO generation events.
    pub generation_events: usize,
    /// Replay branches that fell back to fixed data on an empty buffer.
    pub buffer_fallbacks: usize,
    pub gen_seconds: f64,
    pub update_seconds: f64,
}

impl TrainReport {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,source,loss\n");
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.step, s.source.tag(), s.loss).expect("string write");
        }
        out
    }

    pub fn scheduler_trace_csv(&self) -> String {
        let mut out = String::from("step,val_loss,loss_ref,phi\n");
        for v in &self.validations {
            writeln!(out, "{},{},{},{}", v.step, v.val_loss, v.loss_ref, v.phi)
                .expect("string write");
        }
        out
    }
}

/// Mean sequence divergence over the validation pairs, teacher-forced on
/// the ground-truth continuations.
pub fn validation_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    val_set: &Dataset,
    divergence: DivergenceKind,
) -> f64 {
    assert!(!val_set.pairs.is_empty());
    let mut total = 0.0;
    for pair in &val_set.pairs {
        let p_dists = teacher.sequence_dists(&pair.x, &pair.y);
        let q_dists = student.sequence_dists(&pair.x, &pair.y);
        total += p_dists
            .iter()
            .zip(q_dists.iter())
            .map(|(p, q)| categorical_div(divergence, p, q))
            .sum::<f64>()
            / pair.y.len() as f64;
    }
    total / val_set.pairs.len() as f64
}

/// One optimizer update on a batch of trajectories; returns the mean loss.
fn train_batch(
    student: &mut ModelParams,
    adam: &mut AdamState,
    teacher: &ModelParams,
    batch: &[SeqPair],
    loss_kind: LossKind,
    divergence: DivergenceKind,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let b = batch.len() as f64;
    let mut grad = Tensors::zeros(&student.config);
    let mut loss = 0.0;
    for pair in batch {
        let q_dists = student.sequence_dists(&pair.x, &pair.y);
        let len = pair.y.len() as f64;
        let upstream: Vec<Vec<f64>> = match loss_kind {
            LossKind::Nll => q_dists
                .iter()
                .zip(&pair.y)
                .map(|(q, &tok)| {
                    let q_tok = q.probs()[tok];
                    loss += -q_tok.ln() / (len * b);
                    let mut u = vec![0.0; student.config.vocab_size];
                    u[tok] = -1.0 / (q_tok * len * b);
                    u
                })
                .collect(),
            LossKind::Divergence => {
                let p_dists = teacher.sequence_dists(&pair.x, &pair.y);
                p_dists
                    .iter()
                    .zip(q_dists.iter())
                    .map(|(p, q)| {
                        loss += categorical_div(divergence, p, q) / (len * b);
                        grad_wrt_q(divergence, p, q)
                            .into_iter()
                            .map(|g| g / (len * b))
                            .collect()
                    })
                    .collect()
            }
        };
        let pair_grad = student.backward(&pair.x, &pair.y, &upstream);
        grad.add_scaled(&pair_grad, 1.0);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    adam_step(student, adam, &grad, lr)?;
    Ok(loss)
}

fn sample_fixed_batch(train_set: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<SeqPair> {
    (0..batch_size)
        .map(|_| train_set.pairs[rng.gen_range(0..train_set.pairs.len())].clone())
        .collect()
}

/// Samples B prompts from the training set and rolls out continuations from
/// the current student. Prompts keep their reference continuation length.
fn generate_sgo_batch(
    student: &ModelParams,
    train_set: &Dataset,
    batch_size: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<SeqPair> {
    (0..batch_size)
        .map(|_| {
            let src = &train_set.pairs[rng.gen_range(0..train_set.pairs.len())];
            let y = student.sample_continuation(&src.x, src.y.len(), temperature, rng);
            SeqPair { x: src.x.clone(), y }
        })
        .collect()
}

/// Runs the configured policy to completion and returns the trained student
/// with its report.
pub fn distill_run(
    config: &TrainConfig,
    teacher: &ModelParams,
    student: ModelParams,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size
        || teacher.config.context_len != student.config.context_len
    {
        return Err(Error::InvalidArgument(format!(
            "teacher and student must share vocab and context length: \
             teacher V={} k={}, student V={} k={}",
            teacher.config.vocab_size,
            teacher.config.context_len,
            student.config.vocab_size,
            student.config.context_len
        )));
    }
    if train_set.pairs.is_empty() || val_set.pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "train and validation sets must be non-empty".into(),
        ));
    }

    let mut student = student;
    let mut adam = AdamState::new(&student.config, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();

    // Student warm-up by supervised fine-tuning.
    for step in 0..config.pretrain_steps {
        let batch = sample_fixed_batch(train_set, config.batch_size, &mut rng);
        train_batch(
            &mut student,
            &mut adam,
            teacher,
            &batch,
            LossKind::Nll,
            config.divergence,
            config.lr,
            step,
        )?;
    }

    // SeqKD distills through teacher-generated continuations, produced once.
    let teacher_generated = if config.policy == PolicyKind::SeqKd {
        let mut gen_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(config.seed, u64::MAX));
        let pairs = train_set
            .pairs
            .iter()
            .map(|pair| {
                let y =
                    teacher.sample_continuation(&pair.x, pair.y.len(), config.temperature, &mut gen_rng);
                SeqPair { x: pair.x.clone(), y }
            })
            .collect();
        Some(Dataset {
            pairs,
            role: train_set.role,
        })
    } else {
        None
    };

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut sched = match config.val_loss_mode {
        ValLossMode::Divergence => scheduler::init_state_with(
            validation_loss(&student, teacher, val_set, config.divergence),
            config.scheduler_eps,
            config.n_phi,
        )?,
        ValLossMode::Nll => scheduler::init_state_with(
            student.nll(&val_set.pairs),
            config.scheduler_eps,
            config.n_phi,
        )?,
    };

    for step in 0..config.total_steps {
        let u: f64 = rng.gen();
        let (batch, source, loss_kind) = match config.policy {
            PolicyKind::AdaptiveOffPolicy => {
                let zeta = replay_ratio(config.replay_schedule, step, config.total_steps);
                let lambda_r = generation_prob(sched.phi, zeta);
                match select_source(u, sched.phi, lambda_r, !buffer.is_empty()) {
                    SelectedSource::GenerateAndReplay => {
                        let t0 = Instant::now();
                        let sgos = generate_sgo_batch(
                            &student,
                            train_set,
                            config.batch_size,
                            config.temperature,
                            &mut rng,
                        );
                        report.gen_seconds += t0.elapsed().as_secs_f64();
                        report.generation_events += 1;
                        buffer.push_batch(sgos);
                        let batch = buffer.sample_batch(config.batch_size, &mut rng)?;
                        (batch, BatchSource::FreshSgo, LossKind::Divergence)
                    }
                    SelectedSource::Replay => {
                        let batch = buffer.sample_batch(config.batch_size, &mut rng)?;
                        (batch, BatchSource::ReplaySgo, LossKind::Divergence)
                    }
                    SelectedSource::Fixed => {
                        if u < sched.phi {
                            report.buffer_fallbacks += 1;
                        }
                        let batch = sample_fixed_batch(train_set, config.batch_size, &mut rng);
                        (batch, BatchSource::Fixed, LossKind::Divergence)
                    }
                }
            }
            policy => {
                let (batch_kind, loss_kind) = baseline_step(policy, u);
                match batch_kind {
                    BaselineBatch::Fixed => (
                        sample_fixed_batch(train_set, config.batch_size, &mut rng),
                        BatchSource::Fixed,
                        loss_kind,
                    ),
                    BaselineBatch::TeacherGenerated => (
                        sample_fixed_batch(
                            teacher_generated.as_ref().expect("seqkd dataset"),
                            config.batch_size,
                            &mut rng,
                        ),
                        BatchSource::Fixed,
                        loss_kind,
                    ),
                    BaselineBatch::FreshSgo => {
                        let t0 = Instant::now();
                        let batch = generate_sgo_batch(
                            &student,
                            train_set,
                            config.batch_size,
                            config.temperature,
                            &mut rng,
                        );
                        report.gen_seconds += t0.elapsed().as_secs_f64();
                        report.generation_events += 1;
                        (batch, BatchSource::FreshSgo, loss_kind)
                    }
                }
            }
        };

        match source {
            BatchSource::Fixed => report.fixed_count += 1,
            BatchSource::FreshSgo => report.fresh_sgo_count += 1,
            BatchSource::ReplaySgo => report.replay_sgo_count += 1,
        }

        let t0 = Instant::now();
        let loss = train_batch(
            &mut student,
            &mut adam,
            teacher,
            &batch,
            loss_kind,
            config.divergence,
            config.lr,
            step,
        )?;
        report.update_seconds += t0.elapsed().as_secs_f64();
        report.steps.push(StepRecord {
            step,
            source,
            loss,
        });

        if (step + 1) % config.val_period == 0 {
            let val_loss = match config.val_loss_mode {
                ValLossMode::Divergence => {
                    validation_loss(&student, teacher, val_set, config.divergence)
                }
                ValLossMode::Nll => student.nll(&val_set.pairs),
            };
            if config.policy == PolicyKind::AdaptiveOffPolicy {
                sched = scheduler::update(sched, val_loss)?;
            }
            let zeta = replay_ratio(config.replay_schedule, step + 1, config.total_steps);
            report.validations.push(ValidationRecord {
                step: step + 1,
                val_loss,
                loss_ref: sched.loss_ref,
                phi: sched.phi,
                lambda_r: generation_prob(sched.phi, zeta),
            });
        }
    }

    Ok((student, report))
}
