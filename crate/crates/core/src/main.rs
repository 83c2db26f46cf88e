//! Command-line entry point: dataset generation, SGD and parameter-server
//! training, checkpoint evaluation, and the verification suite, all driven
//! by a plain-text key=value config file.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use tcblstm::asgd::{asgd_train, AsgdEpochRecord};
use tcblstm::config::{load_config, ExperimentConfig};
use tcblstm::data::{
    dataset_summary, extract_windows, generate_synthetic, load_checkpoint, load_dataset,
    save_checkpoint, save_dataset, Utterance, WindowDataset,
};
use tcblstm::error::{Error, Result};
use tcblstm::model::{init_params, ModelConfig};
use tcblstm::optim::{evaluate, train, EpochRecord};
use tcblstm::verify;

#[derive(Parser)]
#[command(
    name = "tcblstm",
    about = "Frame-classification toolkit: time-convolved DNN-BLSTM-DNN models with SGD and async parameter-server training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/dev/test dataset files plus a summary dump
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// output directory (must exist)
        #[arg(long)]
        out: PathBuf,
        /// overrides data.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured variant with minibatch SGD
    Train {
        #[arg(long)]
        config: PathBuf,
        /// directory holding the dataset files; receives checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// overrides model.seed
        #[arg(long)]
        seed: Option<u64>,
        /// checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train with the asynchronous parameter-server harness
    Asgd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// overrides model.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report frame accuracy and mean cross-entropy of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run every gradient and oracle check; nonzero exit if any fails
    Verify,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => cmd_train(&config, &out, seed, resume.as_deref()),
        Command::Asgd { config, out, seed } => cmd_asgd(&config, &out, seed),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Verify => cmd_verify(),
    }
}

fn require_dir(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", out.display()),
        )));
    }
    Ok(())
}

fn cmd_gen(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.data.seed = seed;
    }
    config.validate()?;
    require_dir(out)?;

    let data = generate_synthetic(&config.data)?;
    save_dataset(out.join("train.tcbd"), &data.train)?;
    save_dataset(out.join("dev.tcbd"), &data.dev)?;
    save_dataset(out.join("test.tcbd"), &data.test)?;

    let mut summary = String::new();
    summary.push_str(&dataset_summary("train", &data.train));
    summary.push_str(&dataset_summary("dev", &data.dev));
    summary.push_str(&dataset_summary("test", &data.test));
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(0)
}

fn load_split(out: &Path, name: &str, config: &ExperimentConfig) -> Result<Vec<Utterance>> {
    let path = out.join(format!("{name}.tcbd"));
    let utts = load_dataset(&path)?;
    for utt in &utts {
        utt.validate(config.model.num_classes)?;
        if utt.feat_dim() != config.model.feat_dim {
            return Err(Error::Config(format!(
                "dataset {} has feat_dim {}, model expects {}",
                path.display(),
                utt.feat_dim(),
                config.model.feat_dim
            )));
        }
    }
    Ok(utts)
}

fn load_windows(
    out: &Path,
    config: &ExperimentConfig,
) -> Result<(WindowDataset, WindowDataset)> {
    let train_utts = load_split(out, "train", config)?;
    let dev_utts = load_split(out, "dev", config)?;
    let context = config.model.tc.context_frames;
    Ok((
        extract_windows(&train_utts, context)?,
        extract_windows(&dev_utts, context)?,
    ))
}

pub fn format_epoch_line(r: &EpochRecord) -> String {
    format!(
        "{}\t{:.8}\t{:.6}\t{:.6}\t{:.4}\t{:.3}",
        r.epoch, r.lr, r.train_loss, r.dev_loss, r.dev_acc, r.seconds
    )
}

fn format_asgd_line(r: &AsgdEpochRecord) -> String {
    format!(
        "{}\t{}\t{:.3}",
        format_epoch_line(&r.base()),
        r.messages_applied,
        r.mean_staleness
    )
}

const TRAIN_HEADER: &str = "# epoch\tlr\ttrain_loss\tdev_loss\tdev_acc\tseconds";
const ASGD_HEADER: &str =
    "# epoch\tlr\ttrain_loss\tdev_loss\tdev_acc\tseconds\tmessages\tmean_staleness";

fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<i32> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.model.seed = seed;
    }
    config.validate()?;
    require_dir(out)?;
    let (train_set, dev_set) = load_windows(out, &config)?;

    let (params, state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_config_match(&ckpt.config, &config.model)?;
            (ckpt.params, Some(ckpt.state))
        }
        None => (init_params(&config.model)?, None),
    };

    println!("{TRAIN_HEADER}");
    let mut log_lines = vec![TRAIN_HEADER.to_string()];
    let outcome = train(
        &config.model,
        params,
        &train_set,
        &dev_set,
        &config.optim,
        state,
        |record| {
            let line = format_epoch_line(record);
            println!("{line}");
            log_lines.push(line);
        },
    )?;

    let mut best_state = outcome.state;
    best_state.lr = outcome.log.last().map(|r| r.lr).unwrap_or(best_state.lr);
    save_checkpoint(out.join("best.tckp"), &config.model, &outcome.best_params, &best_state)?;
    save_checkpoint(out.join("last.tckp"), &config.model, &outcome.last_params, &outcome.state)?;
    write_lines(&out.join("train.log"), &log_lines)?;
    Ok(0)
}

fn cmd_asgd(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.model.seed = seed;
    }
    config.validate()?;
    require_dir(out)?;
    let (train_set, dev_set) = load_windows(out, &config)?;

    let params = init_params(&config.model)?;
    println!("{ASGD_HEADER}");
    let mut log_lines = vec![ASGD_HEADER.to_string()];
    let outcome = asgd_train(
        &config.model,
        params,
        &train_set,
        &dev_set,
        &config.asgd(),
        |record| {
            let line = format_asgd_line(record);
            println!("{line}");
            log_lines.push(line);
        },
    );
    // a shard failure still leaves the partial log on disk
    let write_partial = |lines: &[String]| write_lines(&out.join("asgd.log"), lines);
    let outcome = match outcome {
        Ok(outcome) => outcome,
        Err(e) => {
            write_partial(&log_lines)?;
            return Err(e);
        }
    };

    save_checkpoint(out.join("best.tckp"), &config.model, &outcome.best_params, &outcome.state)?;
    save_checkpoint(out.join("last.tckp"), &config.model, &outcome.last_params, &outcome.state)?;
    write_partial(&log_lines)?;
    Ok(0)
}

fn check_config_match(from_checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    if from_checkpoint != requested {
        return Err(Error::Config(format!(
            "checkpoint was built for variant '{}' with a different configuration than the requested '{}'",
            from_checkpoint.variant.as_str(),
            requested.variant.as_str()
        )));
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for line in lines {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<i32> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let utts = load_dataset(data_path)?;
    for utt in &utts {
        utt.validate(ckpt.config.num_classes)?;
        if utt.feat_dim() != ckpt.config.feat_dim {
            return Err(Error::Config(format!(
                "dataset feat_dim {} does not match checkpoint feat_dim {}",
                utt.feat_dim(),
                ckpt.config.feat_dim
            )));
        }
    }
    let windows = extract_windows(&utts, ckpt.config.tc.context_frames)?;
    let (loss, acc) = evaluate(&ckpt.params, &ckpt.config, &windows, 256)?;
    println!("frames\t{}", windows.len());
    println!("accuracy\t{acc:.4}");
    println!("mean_ce\t{loss:.6}");
    Ok(0)
}

fn cmd_verify() -> Result<i32> {
    let reports = verify::run_all_checks()?;
    let mut failures = 0usize;
    for report in &reports {
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}\t{}\tmax_rel_err={:.3e}\ttolerance={:.0e}",
            report.name, report.max_rel_err, report.tolerance
        );
        failures += usize::from(!report.passed());
    }
    println!(
        "# {} checks, {} failed",
        reports.len(),
        failures
    );
    Ok(if failures == 0 { 0 } else { 2 })
}
