use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmbgn::config::KvConfig;
use dmbgn::data::{dataset_stats, Dataset, DatasetConfig};
use dmbgn::error::{Error, Result};
use dmbgn::eval::build_report;
use dmbgn::pipeline::{
    export_embeddings, predict_dir, pretrain_items, pretrain_vouchers_dir, read_metrics, rerun, run_training,
    ExportTable, MODELS,
};
use dmbgn::pretrain::Checkpoint;
use dmbgn::synth::{generate, GenConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dmbgn",
    version,
    about = "Voucher redemption modeling with user-behavior graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct Settings {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings; override the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Settings {
    fn load(&self) -> Result<KvConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal synthetic dataset.
    Gen {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre/post-collection sequence length statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train item embeddings on every event of a data directory.
    PretrainItems {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the graph encoder and voucher embeddings.
    PretrainVouchers {
        #[arg(long)]
        data: PathBuf,
        /// Item embedding checkpoint.
        #[arg(long)]
        items: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long, help = format!("one of {}", MODELS.join(", ")), required_unless_present = "from")]
        model: Option<String>,
        #[arg(long, required_unless_present = "from")]
        data: Option<PathBuf>,
        /// Voucher pre-training checkpoint (required by the pre-trained variants).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Re-run the frozen configuration of an earlier run directory.
        #[arg(long, conflicts_with_all = ["model", "data", "ckpt", "seed", "config", "set"])]
        from: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run directories into a report.
    Eval {
        /// Comma-separated run directories.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Comma-separated base models for the relative improvement columns.
        #[arg(long, value_delimiter = ',', default_value = "dnn,din")]
        base: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every session of a data directory with a trained model.
    Predict {
        /// Model checkpoint from a run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export embeddings as TSV.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        /// item, voucher or uvg_b.
        #[arg(long)]
        table: String,
        /// Data directory; needed for uvg_b.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { settings, out } => {
            let cfg = GenConfig::from_kv(&settings.load()?)?;
            log::info!("effective config:\n{}", cfg.to_kv().render());
            let generated = generate(&cfg)?;
            generated.write(&out, &cfg.dataset_config())?;
            let m = &generated.manifest;
            println!(
                "{} sessions, {} events, label rate {:.4}, Bayes AUC {:.4}",
                m.sessions, m.events, m.label_rate, m.bayes_auc
            );
        }
        Command::Stats { data, out } => {
            let ds = Dataset::load(&data, DatasetConfig::for_dir(&data)?, None)?;
            if !ds.rejects.is_empty() {
                log::warn!("{} rows rejected at ingestion", ds.rejects.len());
            }
            let text = serde_json::to_string_pretty(&dataset_stats(&ds.sessions)?)?;
            match out {
                Some(p) => write(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::PretrainItems { data, settings, out } => {
            pretrain_items(&data, &settings.load()?)?.save(&out)?;
            log::info!("item embeddings written to {}", out.display());
        }
        Command::PretrainVouchers {
            data,
            items,
            settings,
            out,
        } => {
            let items = Checkpoint::load(&items)?;
            pretrain_vouchers_dir(&data, &items, &settings.load()?)?.save(&out)?;
            log::info!("voucher pre-training written to {}", out.display());
        }
        Command::Train {
            model,
            data,
            ckpt,
            seed,
            from,
            settings,
            out,
        } => {
            let result = match from {
                Some(dir) => rerun(&dir, &out)?,
                None => {
                    let mut kv = settings.load()?;
                    if let Some(m) = model {
                        kv.set("model", m);
                    }
                    if let Some(d) = data {
                        kv.set("data", d.display());
                    }
                    if let Some(c) = ckpt {
                        kv.set("ckpt", c.display());
                    }
                    if let Some(s) = seed {
                        kv.set("seed", s);
                    }
                    run_training(&kv, &out)?
                }
            };
            println!(
                "{} seed {}: test AUC {:.6} logloss {:.6}",
                result.model, result.seed, result.auc, result.logloss
            );
        }
        Command::Eval { runs, base, out } => {
            let results = runs.iter().map(|r| read_metrics(r)).collect::<Result<Vec<_>>>()?;
            let bases: Vec<&str> = base.iter().map(String::as_str).collect();
            let report = build_report(&results, &bases)?;
            if let Some(p) = out {
                write(&p, &serde_json::to_string_pretty(&report)?)?;
            }
            print!("{}", report.render_text());
        }
        Command::Predict { model, data, out } => {
            let n = predict_dir(&Checkpoint::load(&model)?, &data, &out)?;
            log::info!("{n} scores written to {}", out.display());
        }
        Command::ExportEmb { ckpt, table, data, out } => {
            let table: ExportTable = table.parse()?;
            let text = export_embeddings(&Checkpoint::load(&ckpt)?, table, data.as_deref())?;
            write(&out, &text)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 1,
        Error::Numeric(_) => 3,
        Error::Data(_) | Error::Shape { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
