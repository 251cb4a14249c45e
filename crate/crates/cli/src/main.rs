mod config;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use convrec::arch::{count_params, parse_arch};
use convrec::checkpoint::Checkpoint;
use convrec::data::{load_csv, read_records, split_train_val, write_records, Batch, Document, DEFAULT_MAX_LEN};
use convrec::gradcheck::grad_check;
use convrec::head::predict;
use convrec::layers::min_input_length;
use convrec::model::predict_probs;
use convrec::synth::{separable_corpus, topic_corpus};
use convrec::trainer::{metrics_tsv, StopReason};
use convrec::{evaluate, Error, Result, Rng, TrainConfig, Trainer, Vocabulary};
use log::info;
use serde_json::json;

use crate::config::ConfigFile;

pub const OUT_DIR_ENV: &str = "CONVREC_OUT_DIR";

#[derive(Parser)]
#[command(name = "convrec", version, about = "Character-level convolution-recurrent document classifier")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a labelled CSV into a class-balanced validation set and the remaining training set.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        val_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        val_out: PathBuf,
    },
    /// Train a model; writes best.crnc, last.crnc, metrics.tsv and metrics.json to the output directory.
    Train(TrainArgs),
    /// Loss, error rate and confusion matrix of a checkpoint on a labelled CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify one document given as an argument, or read from stdin with "-".
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        text: String,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Per-layer parameter counts of a named architecture.
    CountParams {
        arch: String,
        #[arg(long)]
        classes: usize,
    },
    /// Finite-difference check of every gradient on a reduced model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic labelled corpus in the training CSV format.
    MakeCorpus {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long)]
        docs: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Topic corpus only: probability that a word comes from the class lexicon.
        #[arg(long, default_value_t = 0.5)]
        signal: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    /// A class trigram planted in random letters.
    Separable,
    /// Class lexicons mixed with a shared lexicon.
    Topic,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// key=value file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// Initial patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Output directory; the CONVREC_OUT_DIR environment variable overrides the config file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from last.crnc in the output directory.
    #[arg(long)]
    resume: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Split {
            input,
            classes,
            val_per_class,
            seed,
            train_out,
            val_out,
        } => split(&input, classes, val_per_class, seed, &train_out, &val_out),
        Command::Train(args) => train(args),
        Command::Evaluate { checkpoint, data } => evaluate_cmd(&checkpoint, &data),
        Command::Predict {
            checkpoint,
            text,
            precision,
        } => predict_cmd(&checkpoint, &text, precision),
        Command::CountParams { arch, classes } => {
            let count = count_params(&parse_arch(&arch, classes)?);
            for (layer, n) in &count.layers {
                println!("{layer:<12}{:>14}", group(*n));
            }
            println!("{:<12}{:>14}", "total", group(count.total));
            Ok(0)
        }
        Command::GradCheck { seed } => {
            let report = grad_check(seed)?;
            for t in &report.tensors {
                let status = if t.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
                println!("{:<24} {:>12.3e}  {status}", t.name, t.max_rel_error);
            }
            for t in report.failures() {
                let (i, a, n) = t.worst;
                println!("{}: entry {i}: analytic {a:e} vs numeric {n:e}", t.name);
            }
            println!(
                "{} (max relative error {:.3e}, tolerance {:e})",
                if report.passed() { "PASS" } else { "FAIL" },
                report.max_rel_error(),
                report.tolerance
            );
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::MakeCorpus {
            kind,
            docs,
            classes,
            seed,
            signal,
            out,
        } => {
            let records = match kind {
                CorpusKind::Separable => separable_corpus(docs, classes, seed)?,
                CorpusKind::Topic => topic_corpus(docs, classes, signal, seed)?,
            };
            write_records(fs::File::create(&out)?, &records)?;
            println!("wrote {} documents to {}", records.len(), out.display());
            Ok(0)
        }
    }
}

/// `1234567` → `1,234,567`.
fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn split(input: &Path, classes: usize, per_class: usize, seed: u64, train_out: &Path, val_out: &Path) -> Result<u8> {
    let records = read_records(input, classes).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let (train, val) = split_train_val(&records, classes, per_class, &mut Rng::new(seed))
        .map_err(|e| Error::Config(e.to_string()))?;
    write_records(fs::File::create(train_out)?, &train)?;
    write_records(fs::File::create(val_out)?, &val)?;
    println!("class\ttrain\tval");
    for k in 0..classes {
        let t = train.iter().filter(|r| r.label == k).count();
        let v = val.iter().filter(|r| r.label == k).count();
        println!("{}\t{t}\t{v}", k + 1);
    }
    println!("total\t{}\t{}", train.len(), val.len());
    Ok(0)
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required setting --{name}")))
}

fn load_docs(path: &Path, classes: usize, max_len: usize) -> Result<Vec<Document>> {
    load_csv(path, classes, &Vocabulary::build(), max_len).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        e => Error::Config(format!("{}: {e}", path.display())),
    })
}

fn train(a: TrainArgs) -> Result<u8> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: a.batch_size.or(file.get("batch-size")?).unwrap_or(d.batch_size),
        lambda: a.lambda.or(file.get("lambda")?).unwrap_or(d.lambda),
        rho: a.rho.or(file.get("rho")?).unwrap_or(d.rho),
        eps: a.eps.or(file.get("eps")?).unwrap_or(d.eps),
        clip: a.clip.or(file.get("clip")?).unwrap_or(d.clip),
        initial_patience: a.patience.or(file.get("patience")?).unwrap_or(d.initial_patience),
        improvement: d.improvement,
        max_epochs: a.max_epochs.or(file.get("max-epochs")?),
        seed: a.seed.or(file.get("seed")?).unwrap_or(d.seed),
        max_len: a.max_len.or(file.get("max-len")?).unwrap_or(DEFAULT_MAX_LEN),
    };
    cfg.validate()?;
    let classes: usize = required(a.classes.or(file.get("classes")?), "classes")?;
    let arch_name: String = required(a.arch.or(file.get("arch")?), "arch")?;
    let arch = parse_arch(&arch_name, classes)?;
    let train_path: PathBuf = required(a.train.or(file.get("train")?), "train")?;
    let val_path: PathBuf = required(a.val.or(file.get("val")?), "val")?;
    let env_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out_dir = a
        .out_dir
        .or(env_dir)
        .or(file.get("out-dir")?)
        .unwrap_or_else(|| PathBuf::from("run"));

    let train_docs = load_docs(&train_path, classes, cfg.max_len)?;
    let val_docs = load_docs(&val_path, classes, cfg.max_len)?;
    fs::create_dir_all(&out_dir)?;
    let vocab = Vocabulary::build();
    let trainer = Trainer::new(&arch, &cfg, &vocab);
    let (best_path, last_path) = (out_dir.join("best.crnc"), out_dir.join("last.crnc"));
    let tsv_path = out_dir.join("metrics.tsv");
    let on_epoch = |e: &convrec::trainer::EpochEvent| -> Result<()> {
        e.last.save(&last_path)?;
        if e.new_best {
            e.best.save(&best_path)?;
        }
        fs::write(&tsv_path, metrics_tsv(&e.last.meta.history))?;
        Ok(())
    };
    let outcome = if a.resume {
        let last = Checkpoint::load(&last_path)?;
        let comparable = |c: &TrainConfig| TrainConfig { max_epochs: None, ..c.clone() };
        if comparable(&last.meta.train) != comparable(&cfg) {
            return Err(Error::Config(
                "resume: hyperparameters other than --max-epochs differ from the checkpoint's".into(),
            ));
        }
        let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
        info!("resuming after epoch {}", last.meta.epoch);
        trainer.resume(last, best, &train_docs, &val_docs, on_epoch)?
    } else {
        trainer.train_with(&train_docs, &val_docs, on_epoch)?
    };
    outcome.last.save(&last_path)?;
    outcome.best.save(&best_path)?;
    fs::write(&tsv_path, metrics_tsv(outcome.history()))?;
    let summary = json!({
        "arch": arch.label(),
        "train": cfg,
        "stop": outcome.stop,
        "epochs": outcome.last.meta.epoch,
        "best": outcome.best.meta.best,
        "skipped_train": outcome.skipped_train,
        "skipped_val": outcome.skipped_val,
        "history": outcome.history(),
    });
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&summary).unwrap() + "\n")?;

    println!("epochs\t{}", outcome.last.meta.epoch);
    if let Some(b) = &outcome.best.meta.best {
        println!("best_epoch\t{}", b.epoch);
        println!("best_val_error\t{}", b.val_error);
        println!("best_val_loss\t{}", b.val_loss);
    }
    match &outcome.stop {
        StopReason::Diverged { epoch, message } => {
            println!("stop\tdiverged");
            eprintln!("error: training diverged in epoch {epoch}: {message}; last good checkpoints kept");
            Ok(1)
        }
        StopReason::Patience => {
            println!("stop\tpatience");
            Ok(0)
        }
        StopReason::MaxEpochs => {
            println!("stop\tmax-epochs");
            Ok(0)
        }
    }
}

fn evaluate_cmd(checkpoint: &Path, data: &Path) -> Result<u8> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let docs = load_docs(data, ckpt.arch.classes, ckpt.meta.train.max_len)?;
    let ev = evaluate(&ckpt.params, &ckpt.arch, &docs)?;
    println!("documents\t{}", ev.evaluated);
    println!("skipped\t{}", ev.skipped);
    println!("loss\t{}", ev.loss);
    println!("error_rate\t{}", ev.error_rate);
    println!("confusion (rows: true class, columns: predicted)");
    for row in &ev.confusion {
        println!("{}", row.iter().map(usize::to_string).collect::<Vec<_>>().join("\t"));
    }
    Ok(0)
}

fn predict_cmd(checkpoint: &Path, text: &str, precision: Precision) -> Result<u8> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let text = if text == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        text.to_string()
    };
    let doc = Document::new(0, text, &ckpt.vocab, ckpt.meta.train.max_len)
        .map_err(|_| Error::Parameter("text contains no characters from the vocabulary".into()))?;
    let min = min_input_length(&ckpt.arch.pools());
    if doc.len() < min {
        return Err(Error::SequenceTooShort {
            length: doc.len(),
            minimum: min,
        });
    }
    let batch = Batch::from_docs([(0, &doc)]);
    let probs: Vec<f64> = match precision {
        Precision::F64 => predict_probs(&ckpt.params, &batch)?.into_data(),
        Precision::F32 => predict_probs(&ckpt.params.cast::<f32>(), &batch)?
            .into_data()
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    let k = probs.len();
    let label = predict(&convrec::Tensor::from_vec(&[1, k], probs.clone())?)[0];
    println!("label\t{}", label + 1);
    let formatted: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
    println!("probabilities\t{}", formatted.join("\t"));
    Ok(0)
}
