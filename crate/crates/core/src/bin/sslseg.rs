use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use sslseg::expharness::{
    corrupt_labels, emit_report, export_overlay, generate_dataset, run_experiment,
    ExperimentConfig, ExperimentError, RunOptions, SyntheticSpec,
};
use sslseg::imagery::{read_image, read_mask, write_dataset, write_mask, Dataset, Split};
use sslseg::metrics::binarize;
use sslseg::model::{load_checkpoint, save_checkpoint};
use sslseg::train::{evaluate, finetune, predict, pretrain, RunHistory};
use sslseg::Error;

#[derive(Parser)]
#[command(
    name = "sslseg",
    version,
    about = "Self-supervised solar panel segmentation"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Scalar overrides of the config's `train` section.
#[derive(Args, Clone, Copy)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.pretrain.epochs = Some(e);
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
            cfg.pretrain.lr = Some(lr);
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
            cfg.pretrain.batch_size = Some(b);
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastive pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Supervised fine-tuning on a train subset.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// A pretrained checkpoint, or `random`.
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        subset_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// IoU of a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        report: PathBuf,
        /// Also write each binarized prediction as `<id>.png` here.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Run the experiment described by a config file.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Colour-coded comparison of a predicted and a reference mask.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn write_history(ckpt: &Path, history: &RunHistory) -> Result<(), Error> {
    let path = ckpt.with_extension("history.jsonl");
    let mut buf = Vec::new();
    history.write_json_lines(&mut buf).map_err(io_err(&path))?;
    fs::write(&path, buf).map_err(io_err(&path))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let text = fs::read_to_string(&spec).map_err(io_err(&spec))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
                    path: spec.clone(),
                    reason: e.to_string(),
                })?;
            let seed = seed.unwrap_or(spec.seed);
            let clean = generate_dataset(&spec, seed)?;
            match spec.corruption.filter(|c| !c.is_identity()) {
                Some(c) => {
                    let corrupted = corrupt_labels(&clean, &c, seed)?;
                    let masks: BTreeMap<_, _> = clean
                        .manifest
                        .items
                        .iter()
                        .filter_map(|it| Some((it.id.clone(), clean.sample(&it.id)?.mask.clone()?)))
                        .collect();
                    write_dataset(&out, &corrupted, Some(("masks_clean", &masks)))?;
                }
                None => write_dataset(&out, &clean, None)?,
            }
            info!(
                "wrote {} items to {}",
                clean.manifest.items.len(),
                out.display()
            );
        }
        Command::Pretrain {
            data,
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let ds = Dataset::load(&data)?;
            let (params, history) = pretrain(&ds, &cfg.arch, &cfg.pretrain_config())?;
            save_checkpoint(&params, &out)?;
            write_history(&out, &history)?;
        }
        Command::Finetune {
            data,
            config,
            init,
            fraction,
            subset_seed,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let ds = Dataset::load(&data)?;
            let init = match init.as_str() {
                "random" => None,
                path => Some(load_checkpoint(Path::new(path))?.0),
            };
            let (params, history) = finetune(
                init.as_ref(),
                &ds,
                &cfg.arch,
                &cfg.finetune_config(),
                fraction,
                subset_seed,
            )?;
            save_checkpoint(&params, &out)?;
            write_history(&out, &history)?;
            if let Some(best) = history.best_val_iou {
                println!("best val iou {best:.6}");
            }
        }
        Command::Eval {
            data,
            ckpt,
            split,
            threshold,
            report,
            pred_dir,
        } => {
            let ds = Dataset::load(&data)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let r = evaluate(&params, &ds, split, threshold)?;
            if let Some(dir) = pred_dir {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let masks = binarize(&predict(&params, &ds, split)?, threshold)?;
                for (i, id) in ds.ids(split).iter().enumerate() {
                    write_mask(&dir.join(format!("{id}.png")), &masks.tile(i))?;
                }
            }
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            fs::write(&report, text).map_err(io_err(&report))?;
            println!("{split} iou {:.6}", r.iou);
        }
        Command::Experiment {
            spec,
            out_dir,
            jobs,
            overrides,
        } => {
            let cfg = load_config(&spec, &overrides)?;
            let outcome = run_experiment(&cfg, RunOptions { jobs, cache: None })?;
            fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
            emit_report(
                &outcome.report,
                &out_dir.join("report.csv"),
                &out_dir.join("report.json"),
            )?;
            info!(
                "{} rows, {} pretraining runs",
                outcome.report.rows.len(),
                outcome.pretrain_runs
            );
        }
        Command::Overlay {
            image,
            pred,
            truth,
            out,
        } => {
            let image = read_image(&image)?;
            let pred = read_mask(&pred)?;
            let truth = read_mask(&truth)?;
            export_overlay(&image, &pred, &truth, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
