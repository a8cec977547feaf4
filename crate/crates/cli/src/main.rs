use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colora::data::{Balance, Keep};
use colora::Order;
use colora_cli::{
    cmd_distill, cmd_eval, cmd_params, cmd_synth, cmd_train, cmd_transfer, merge_equivalence, CliError, CliResult,
    DistillOptions, ParamsSource, SynthTask, TransferOptions, KEYS,
};

// Training allocates and frees large temporaries every step; the system
// allocator returns them to the OS and pays page faults on each reuse.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "colora", version, about = "Mergeable depthwise x pointwise adapters for CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more runs from a key=value config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied after the config file.
        overrides: Vec<String>,
    },
    /// Class-wise metrics, confusion matrix and ROC of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_plots: bool,
    },
    /// Entropy-based selection of training samples.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        discard_top: usize,
        /// Per-class count to keep, or `all`.
        #[arg(long, default_value = "all")]
        keep: String,
        /// Balance the train split first: `none`, `min` or a count.
        #[arg(long, default_value = "none")]
        balance: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_plots: bool,
    },
    /// Per-layer parameter counts of a configured model or a checkpoint.
    Params {
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Check that merged kernels reproduce the factored forward pass.
    MergeCheck {
        #[arg(long, default_value_t = 100)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        /// blobs, stripes-source or stripes-target.
        #[arg(long, default_value = "blobs")]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Per-class counts.
        #[arg(long, default_value_t = 100)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        val: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain on source stripes, then compare adaptation strategies.
    Transfer {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value = "pw_dw")]
        order: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the config keys with defaults.
    Keys,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let s = cmd_train(config.as_deref(), &overrides)?;
            for (r, acc) in s.final_test_acc.iter().enumerate() {
                println!("run {r}: final test accuracy {acc:.4}");
            }
            println!("trainable fraction {:.4}", s.trainable_fraction);
            println!("wrote {} artifacts to {}", s.artifacts.len(), s.out_dir.display());
        }
        Command::Eval { checkpoint, data, split, out, no_plots } => {
            let r = cmd_eval(&checkpoint, &data, &split, &out, !no_plots)?;
            print!("{}", r.classwise_csv());
        }
        Command::Distill { checkpoint, data, discard_top, keep, balance, out, no_plots } => {
            let balance = match balance.as_str() {
                "none" => None,
                b => Some(Balance::parse(b)?),
            };
            let opts = DistillOptions { discard_top, keep: Keep::parse(&keep)?, balance, plots: !no_plots };
            let r = cmd_distill(&checkpoint, &data, &opts, &out)?;
            for c in &r.per_class {
                println!("class {}: discarded {}, retained {}", c.class, c.discarded.len(), c.retained.len());
            }
            println!("retained {} in total", r.retained_total());
        }
        Command::Params { config, checkpoint, csv, overrides } => {
            let source = match &checkpoint {
                Some(p) => ParamsSource::Checkpoint(p),
                None => ParamsSource::Config { path: config.as_deref(), overrides: &overrides },
            };
            print!("{}", cmd_params(source, csv.as_deref())?.to_table());
        }
        Command::MergeCheck { layers, seed } => {
            let m = merge_equivalence(layers, seed)?;
            println!("{} layers in {:.2}s, max relative deviation {:.3e}", m.cases.len(), m.seconds, m.max_deviation());
            if let Some(w) = m.worst() {
                println!("worst: {} h={} w={} C={} T={}", w.order, w.h, w.w, w.c, w.t);
            }
            if !m.passed() {
                return Err(CliError::Numeric("merged forward deviates beyond tolerance".into()));
            }
        }
        Command::Synth { task, out, size, train, val, test, seed } => {
            let d = cmd_synth(SynthTask::parse(&task)?, [train, val, test], size, seed, &out)?;
            println!(
                "{} classes, {}/{}/{} samples written to {}",
                d.num_classes,
                d.train.len(),
                d.val.len(),
                d.test.len(),
                out.display()
            );
        }
        Command::Transfer { out, epochs, order, seed } => {
            let opts = TransferOptions { finetune_epochs: epochs, order: Order::parse(&order)?, seed, ..Default::default() };
            let r = cmd_transfer(&opts, &out)?;
            println!("source test accuracy {:.4}", r.source_test_acc);
            print!("{}", r.to_csv());
        }
        Command::Keys => {
            for (k, v, doc) in KEYS {
                println!("{k:<18} {v:<12} {doc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
