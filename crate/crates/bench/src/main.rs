use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sre_bench::{dataset, heatmap, lodo, pretrain, report, synth};
use sre_core::checkpoint::Checkpoint;
use sre_core::image::RasterImage;
use sre_core::refocus::Frozen;
use sre_core::rng::{self, tag};
use sre_core::simulate;
use sre_core::trainer::{self, Mode, Model, Precision, TrainConfig, TrainData};
use sre_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sre-bench", version, about = "Synthetic domain-generalization benchmark for attention refocusing")]
struct Cli {
    /// Seed for generation, training and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file applied over the default training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Where pretrained encoders are cached.
    #[arg(long, global = true, default_value = ".sre-cache")]
    cache: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset to a directory tree.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_cell: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train on every domain except `--held-out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with `.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint per domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to these domains (comma separated).
        #[arg(long)]
        domains: Option<String>,
    },
    /// Leave-one-domain-out sweep.
    Lodo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "zs,ar,sr,sr_ema,sre")]
        modes: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Also keep every selected checkpoint under `<out>/checkpoints`.
        #[arg(long)]
        keep_checkpoints: bool,
    },
    /// Write one simulated-target version of an image.
    Simulate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the refined attention of a checkpoint on one image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a LODO report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Directory for `table.txt` and `table.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config(_)) {
        2
    } else {
        1
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = Precision::parse(p)?;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = Mode::parse(m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn frozen_pair(cache: &Path) -> Result<(sre_core::clip::Backbone, sre_core::clip::TextTable)> {
    let spec = pretrain::PretrainSpec::default();
    log::info!("loading pretrained encoder {}", spec.cache_key());
    pretrain::cached(&spec, cache)
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(f).collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Generate {
            out,
            per_cell,
            image_size,
            force,
        } => {
            let spec = synth::DatasetSpec {
                per_cell: *per_cell,
                image_size: *image_size,
                ..Default::default()
            };
            let n = dataset::write_tree(out, &spec, cli.seed.unwrap_or(0), *force)?;
            println!("wrote {n} images to {}", out.display());
        }
        Cmd::Train {
            data,
            held_out,
            out,
            log,
        } => {
            let cfg = train_config(&cli)?;
            let ds = dataset::load(data)?;
            let held = ds.domain_index(held_out)?;
            let (bb, text) = frozen_pair(&cli.cache)?;
            let prepared = trainer::prepare_all(&bb, &ds)?;
            let sources: Vec<usize> = (0..ds.domain_names.len()).filter(|&d| d != held).collect();
            let data = TrainData::from_sources(Frozen { backbone: &bb, text: &text }, &ds, &prepared, &sources, &cfg)?;
            let (result, train_log) = trainer::train(&cfg, &data)?;
            result.checkpoint.save(out)?;
            let log_path = log.clone().unwrap_or_else(|| out.with_extension("jsonl"));
            std::fs::write(&log_path, train_log.to_jsonl())?;
            println!(
                "{} val {:.4} at step {} -> {}",
                result.mode.label(),
                result.val_accuracy,
                result.best_step,
                out.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            data,
            domains,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let ds = dataset::load(data)?;
            let model = Model::from_checkpoint(&ck)?;
            let prepared = trainer::prepare_all(&ck.backbone, &ds)?;
            let chosen = match domains {
                Some(list) => parse_list(list, |d| ds.domain_index(d))?,
                None => (0..ds.domain_names.len()).collect(),
            };
            for d in chosen {
                let r = trainer::evaluate_indices(&model, &ds, &prepared, &ds.in_domains(&[d]))?;
                println!("{:<10} {:.4} ({} images)", ds.domain_names[d], r.accuracy, r.count);
            }
        }
        Cmd::Lodo {
            data,
            modes,
            seeds,
            out,
            keep_checkpoints,
        } => {
            let train = train_config(&cli)?;
            let cfg = lodo::LodoConfig {
                train,
                modes: parse_list(modes, Mode::parse)?,
                seeds: parse_list(seeds, |s| {
                    s.parse().map_err(|_| Error::Config(format!("bad seed {s:?}")))
                })?,
            };
            let ds = dataset::load(data)?;
            let (bb, text) = frozen_pair(&cli.cache)?;
            let prepared = trainer::prepare_all(&bb, &ds)?;
            std::fs::create_dir_all(out)?;
            let ck_dir = out.join("checkpoints");
            let rep = lodo::run_lodo(
                &cfg,
                Frozen { backbone: &bb, text: &text },
                &ds,
                &prepared,
                keep_checkpoints.then_some(ck_dir.as_path()),
                |r| log::info!("{} {} seed {}: {:.4}", r.held_out, r.mode.label(), r.seed, r.accuracy),
            )?;
            std::fs::write(out.join("report.json"), rep.to_json())?;
            let table = report::table(&rep)?;
            let text = report::render_text(&table);
            std::fs::write(out.join("table.txt"), &text)?;
            std::fs::write(out.join("table.json"), report::render_json(&table))?;
            print!("{text}");
        }
        Cmd::Simulate { image, out } => {
            let cfg = train_config(&cli)?;
            let x = RasterImage::read_ppm(image)?;
            let mut r = rng::stream(cfg.seed, &[tag::AUGMENT]);
            let (y, phi) = simulate::simulate_target(&x, &cfg.augmentation, &mut r);
            y.write_ppm(out)?;
            std::fs::write(out.with_extension("txt"), phi.to_sidecar())?;
        }
        Cmd::Heatmap {
            checkpoint,
            image,
            out,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let x = RasterImage::read_ppm(image)?;
            let inf = trainer::infer(&ck, &x)?;
            let class = ck.text.class_names.get(inf.class).cloned();
            let h = heatmap::render(&x, &inf.refined_attention, ck.backbone.config.grid(), class)?;
            heatmap::write(&h, out)?;
            if h.sidecar.degenerate {
                log::warn!("attention map is constant; wrote uniform gray");
            }
        }
        Cmd::Report { input, out } => {
            let rep = lodo::LodoReport::from_json(&std::fs::read_to_string(input)?)?;
            let table = report::table(&rep)?;
            let text = report::render_text(&table);
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("table.txt"), &text)?;
                std::fs::write(dir.join("table.json"), report::render_json(&table))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}
