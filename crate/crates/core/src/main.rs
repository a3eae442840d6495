//! Command-line orchestration: corpus generation, teacher training,
//! distillation runs, evaluation, and the estimator / gradient-coefficient
//! studies. All randomness flows from seeds in the config; reruns with the
//! same config produce byte-identical CSV outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distillab::config::RunConfig;
use distillab::corpus::{self, DatasetHeader, Role};
use distillab::distill::{self, PolicyKind, TrainReport};
use distillab::divergence::DivergenceKind;
use distillab::error::Error;
use distillab::model::{self, ModelParams};
use distillab::skewlab::{self, MseReport};
use distillab::{eval, mix_seed};

#[derive(Parser)]
#[command(name = "distillab", version, about = "Desk-scale distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test dataset files from the synthetic source.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the teacher by SFT on a large sample and write its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a distillation policy and write checkpoint, report, and trace.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        divergence: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the SFT warm-up before distillation.
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Evaluate a student checkpoint on the test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Monte-Carlo estimator-error grid (raw and normalized CSVs).
    StudyEstimator {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gradient-coefficient histograms for SKL/SRKL over the alpha grid.
    StudyGrad {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let cfg = RunConfig::from_file(path)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg)
}

fn dataset_paths(cfg: &RunConfig) -> (PathBuf, PathBuf, PathBuf) {
    (
        cfg.out_dir.join("train.txt"),
        cfg.out_dir.join("val.txt"),
        cfg.out_dir.join("test.txt"),
    )
}

fn teacher_ckpt_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("teacher.ckpt")
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenCorpus { config } => gen_corpus(&load_config(&config)?),
        Command::TrainTeacher { config } => train_teacher(&load_config(&config)?),
        Command::Distill {
            config,
            policy,
            divergence,
            alpha,
            beta,
            seed,
            no_pretrain,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(d) = divergence {
                cfg.divergence = d;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            if no_pretrain {
                cfg.pretrain_steps = 0;
            }
            distill_cmd(&cfg)
        }
        Command::Eval { config, student } => eval_cmd(&load_config(&config)?, &student),
        Command::StudyEstimator { config } => study_estimator(&load_config(&config)?),
        Command::StudyGrad {
            config,
            teacher,
            student,
        } => study_grad(&load_config(&config)?, &teacher, &student),
    }
}

fn gen_corpus(cfg: &RunConfig) -> Result<(), Error> {
    let spec = corpus::make_generator(cfg.num_states, cfg.vocab_size, cfg.corpus_seed)?;
    let ds = corpus::sample_corpus(
        &spec,
        cfg.n_pairs,
        cfg.prompt_len,
        cfg.cont_len,
        cfg.sample_seed,
    )?;
    let (train, val, test) = corpus::split(ds, (cfg.train_frac, cfg.val_frac, cfg.test_frac))?;
    let header = DatasetHeader {
        vocab_size: cfg.vocab_size,
        prompt_len: cfg.prompt_len,
        cont_len: cfg.cont_len,
        seed: cfg.sample_seed,
    };
    let (train_path, val_path, test_path) = dataset_paths(cfg);
    corpus::write_dataset(&train_path, &train, &header)?;
    corpus::write_dataset(&val_path, &val, &header)?;
    corpus::write_dataset(&test_path, &test, &header)?;
    println!(
        "wrote {} ({} pairs), {} ({}), {} ({})",
        train_path.display(),
        train.pairs.len(),
        val_path.display(),
        val.pairs.len(),
        test_path.display(),
        test.pairs.len()
    );
    Ok(())
}

fn train_teacher(cfg: &RunConfig) -> Result<(), Error> {
    let spec = corpus::make_generator(cfg.num_states, cfg.vocab_size, cfg.corpus_seed)?;
    // The teacher gets its own, much larger sample from the same source.
    let sample = corpus::sample_corpus(
        &spec,
        cfg.teacher_pairs,
        cfg.prompt_len,
        cfg.cont_len,
        mix_seed(cfg.sample_seed, 0x7eac),
    )?;
    let (train, val, _test) = corpus::split(sample, (0.9, 0.05, 0.05))?;
    let teacher = model::init(&cfg.teacher_model_config())?;
    let initial_nll = teacher.nll(&val.pairs);
    let sft = distill::TrainConfig {
        divergence: DivergenceKind::Kl,
        policy: PolicyKind::Sft,
        total_steps: cfg.teacher_steps,
        batch_size: cfg.batch_size,
        lr: cfg.teacher_lr,
        temperature: 1.0,
        val_period: cfg.teacher_steps,
        buffer_capacity: 1,
        replay_schedule: distillab::replay::ReplaySchedule::Decreasing,
        seed: mix_seed(cfg.teacher_seed, 1),
        pretrain_steps: 0,
        scheduler_eps: cfg.scheduler_eps,
        n_phi: cfg.n_phi,
        val_loss_mode: distill::ValLossMode::Nll,
    };
    // SFT ignores the teacher argument; the model plays both roles here.
    let (trained, _report) = distill::distill_run(&sft, &teacher, teacher.clone(), &train, &val)?;
    let final_nll = trained.nll(&val.pairs);
    let path = teacher_ckpt_path(cfg);
    model::save_checkpoint(&trained, &path)?;
    println!(
        "teacher NLL: {initial_nll:.4} -> {final_nll:.4} nats/token; wrote {}",
        path.display()
    );
    Ok(())
}

fn run_stem(cfg: &RunConfig) -> String {
    format!(
        "{}_{}_seed{}",
        cfg.policy, cfg.divergence, cfg.train_seed
    )
}

fn distill_cmd(cfg: &RunConfig) -> Result<(), Error> {
    // Reject bad policy/divergence tags before touching any artifact.
    let train_cfg = cfg.train_config()?;
    let (train_path, val_path, _test_path) = dataset_paths(cfg);
    let (train, _) = corpus::read_dataset(&train_path, Role::Train)?;
    let (val, _) = corpus::read_dataset(&val_path, Role::Val)?;
    let teacher = model::load_checkpoint(&teacher_ckpt_path(cfg))?;
    if teacher.config.vocab_size != cfg.vocab_size {
        return Err(Error::Checkpoint(format!(
            "teacher vocab {} does not match config vocab {}",
            teacher.config.vocab_size, cfg.vocab_size
        )));
    }
    let student = model::init(&cfg.student_model_config())?;
    let (trained, report) = distill::distill_run(&train_cfg, &teacher, student, &train, &val)?;

    let stem = run_stem(cfg);
    let ckpt_path = cfg.out_dir.join(format!("student_{stem}.ckpt"));
    model::save_checkpoint(&trained, &ckpt_path)?;
    std::fs::write(
        cfg.out_dir.join(format!("train_{stem}.csv")),
        report.steps_csv(),
    )?;
    std::fs::write(
        cfg.out_dir.join(format!("sched_{stem}.csv")),
        report.scheduler_trace_csv(),
    )?;
    let summary = run_summary(cfg, &report, &trained, &teacher, &val);
    std::fs::write(cfg.out_dir.join(format!("summary_{stem}.txt")), summary)?;
    println!(
        "trained {stem}: final val divergence {:.4}, sources fixed={} fresh={} replay={} generations={}",
        report
            .validations
            .last()
            .map(|v| v.val_loss)
            .unwrap_or(f64::NAN),
        report.fixed_count,
        report.fresh_sgo_count,
        report.replay_sgo_count,
        report.generation_events
    );
    Ok(())
}

fn run_summary(
    cfg: &RunConfig,
    report: &TrainReport,
    student: &ModelParams,
    teacher: &ModelParams,
    val: &corpus::Dataset,
) -> String {
    let mut out = String::from("# effective configuration\n");
    out.push_str(&cfg.echo());
    out.push_str("# results\n");
    let kind = cfg
        .divergence_kind()
        .unwrap_or(DivergenceKind::Srkl { alpha: 0.1 });
    let final_div = distill::validation_loss(student, teacher, val, kind);
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    kv("final_val_divergence", format!("{final_div}"));
    kv("final_val_nll", format!("{}", student.nll(&val.pairs)));
    kv("fixed_count", report.fixed_count.to_string());
    kv("fresh_sgo_count", report.fresh_sgo_count.to_string());
    kv("replay_sgo_count", report.replay_sgo_count.to_string());
    kv("generation_events", report.generation_events.to_string());
    kv("buffer_fallbacks", report.buffer_fallbacks.to_string());
    kv("gen_seconds", format!("{:.3}", report.gen_seconds));
    kv("update_seconds", format!("{:.3}", report.update_seconds));
    out
}

fn eval_cmd(cfg: &RunConfig, student_path: &Path) -> Result<(), Error> {
    let (_, _, test_path) = dataset_paths(cfg);
    let (test, _) = corpus::read_dataset(&test_path, Role::Test)?;
    let teacher = model::load_checkpoint(&teacher_ckpt_path(cfg))?;
    let student = model::load_checkpoint(student_path)?;
    let kind = cfg.divergence_kind()?;
    let report = eval::evaluate(
        &student,
        &teacher,
        &test,
        cfg.eval_temperature,
        &cfg.eval_seeds,
        kind,
    )?;
    let stem = student_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "student".into());
    let csv_path = cfg.out_dir.join(format!("eval_{stem}.csv"));
    report.write_csv(&csv_path)?;
    let mut summary = String::new();
    writeln!(summary, "mean_rouge_f1 = {}", report.mean_f1).expect("string write");
    writeln!(summary, "mean_nll = {}", report.mean_nll).expect("string write");
    writeln!(summary, "mean_divergence = {}", report.mean_divergence).expect("string write");
    std::fs::write(cfg.out_dir.join(format!("eval_{stem}_summary.txt")), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Fixed non-trivial distribution pair for the estimator study, drawn
/// deterministically from the study seed with a spread of scales so small
/// probabilities are present.
fn study_distributions(cfg: &RunConfig) -> (model::TokenDist, model::TokenDist) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.study_seed);
    let mut draw = || {
        let mut w: Vec<f64> = (0..cfg.study_vocab)
            .map(|i| {
                let u: f64 = rng.gen_range(0.05..1.0);
                // Geometric decay gives a heavy head and a thin tail.
                u * 0.5f64.powi((i % 6) as i32)
            })
            .collect();
        let sum: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= sum;
        }
        model::TokenDist::new(w).expect("normalized")
    };
    let p1 = draw();
    let mut p2 = draw();
    // Reverse so the pair disagrees where it matters.
    {
        let mut probs: Vec<f64> = p2.probs().to_vec();
        probs.reverse();
        p2 = model::TokenDist::new(probs).expect("normalized");
    }
    (p1, p2)
}

fn study_estimator(cfg: &RunConfig) -> Result<(), Error> {
    let (p1, p2) = study_distributions(cfg);
    let report = skewlab::estimator_study(
        &p1,
        &p2,
        &cfg.study_alphas,
        &cfg.study_ns,
        cfg.study_trials,
        cfg.study_seed,
    )?;
    report.write_csv(&cfg.out_dir.join("estimator_mse.csv"))?;
    let normalized = MseReport {
        cells: report
            .cells
            .iter()
            .filter(|c| c.alpha < 1.0)
            .map(|c| skewlab::normalized_mse(c).expect("alpha < 1"))
            .collect(),
    };
    normalized.write_csv(&cfg.out_dir.join("estimator_mse_normalized.csv"))?;
    println!(
        "wrote {} cells to estimator_mse.csv / estimator_mse_normalized.csv in {}",
        report.cells.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn study_grad(cfg: &RunConfig, teacher_path: &Path, student_path: &Path) -> Result<(), Error> {
    let teacher = model::load_checkpoint(teacher_path)?;
    let student = model::load_checkpoint(student_path)?;
    let (train_path, _, _) = dataset_paths(cfg);
    let (train, _) = corpus::read_dataset(&train_path, Role::Train)?;

    let mut summary = String::from("kind,alpha,variance,variance_norm\n");
    let families: [(&str, fn(f64) -> DivergenceKind); 2] = [
        ("skl", |a| DivergenceKind::Skl { alpha: a }),
        ("srkl", |a| DivergenceKind::Srkl { alpha: a }),
    ];
    for (tag, make) in families {
        for &alpha in &cfg.study_alphas {
            let kind = make(alpha);
            let samples = skewlab::coefficient_samples(&teacher, &student, &train, kind)?;
            let hist = skewlab::histogram(&samples, cfg.hist_bins);
            skewlab::write_histogram_csv(
                &cfg.out_dir.join(format!("coeff_{tag}_a{alpha}.csv")),
                &hist,
            )?;
            let normalized = skewlab::median_normalize(&samples);
            let hist_norm = skewlab::histogram(&normalized, cfg.hist_bins);
            skewlab::write_histogram_csv(
                &cfg.out_dir.join(format!("coeff_{tag}_a{alpha}_norm.csv")),
                &hist_norm,
            )?;
            writeln!(
                summary,
                "{tag},{alpha},{},{}",
                skewlab::variance(&samples),
                skewlab::variance(&normalized)
            )
            .expect("string write");
        }
    }
    std::fs::write(cfg.out_dir.join("coeff_variance.csv"), summary)?;
    println!("wrote coefficient histograms to {}", cfg.out_dir.display());
    Ok(())
}
