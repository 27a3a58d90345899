//! Command-line workflows: dataset generation, training, attacks, sweeps, the
//! translation demo and result export.

mod config;

pub use config::{Overrides, RunConfig};

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{ingest_idx, synth, write_idx, Dataset};
use crate::error::{Error, Result};
use crate::harness::{self, config_hash, Axis, Bench, ExportFormat, SweepResult};
use crate::model::{self, Architecture, Checkpoint, Model, TrainConfig};
use crate::seed::{self, STREAM_INIT, STREAM_TRAIN};

#[derive(Parser, Debug)]
#[command(name = "saat", version, about = "Feature-statistic alignment attacks on small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write a procedurally generated training set and attack pool as IDX files.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 60)]
        pool_per_class: usize,
    },
    /// Train every model listed in `models` and save checkpoints.
    Train,
    /// Attack the white box once per seed and evaluate transfer.
    Attack,
    /// Repeat the attack at each tap of the white box.
    SweepLayers,
    /// Repeat the attack for each target-label rank.
    SweepRanks,
    /// Repeat the polynomial-kernel attack for each bias value.
    SweepC,
    /// Compare losses on mirrored images and shifted feature maps.
    DemoTranslation,
    /// Convert a results JSON file to CSV or JSON.
    Export {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        /// `csv` or `json`.
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

/// Executes a parsed command line. The configuration is validated before any
/// data is loaded.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.overrides)?;
    match &cli.command {
        Command::Synth {
            dir,
            per_class,
            pool_per_class,
        } => synth_cmd(&cfg, dir, *per_class, *pool_per_class),
        Command::Train => train_cmd(&cfg).map(|_| ()),
        Command::Attack => sweep_cmd(&cfg, "attack", Axis::Tap).map(|_| ()),
        Command::SweepLayers => sweep_cmd(&cfg, "sweep-layers", Axis::Tap).map(|_| ()),
        Command::SweepRanks => sweep_cmd(&cfg, "sweep-ranks", Axis::Rank).map(|_| ()),
        Command::SweepC => sweep_cmd(&cfg, "sweep-c", Axis::C).map(|_| ()),
        Command::DemoTranslation => demo_cmd(&cfg).map(|_| ()),
        Command::Export { from, to, format } => {
            let format = match format.as_str() {
                "csv" => ExportFormat::Csv,
                "json" => ExportFormat::Json,
                f => return Err(Error::Config(format!("export format `{f}` is not csv or json"))),
            };
            export_cmd(from, to, format)
        }
    }
}

fn synth_cmd(cfg: &RunConfig, dir: &Path, per_class: usize, pool_per_class: usize) -> Result<()> {
    if per_class == 0 || pool_per_class == 0 {
        return Err(Error::Config("per_class and pool_per_class must be positive".into()));
    }
    std::fs::create_dir_all(dir)?;
    let train = synth::generate(per_class, seed::derive_indexed(cfg.seed, seed::STREAM_DATA, 0));
    let pool = synth::generate(pool_per_class, seed::derive_indexed(cfg.seed, seed::STREAM_DATA, 1));
    write_idx(&train, &dir.join("train-images.idx"), &dir.join("train-labels.idx"))?;
    write_idx(&pool, &dir.join("pool-images.idx"), &dir.join("pool-labels.idx"))?;
    println!(
        "wrote {} training and {} pool images to {}",
        train.len(),
        pool.len(),
        dir.display()
    );
    Ok(())
}

fn load_train(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.dataset_images, &cfg.dataset_labels) {
        (Some(i), Some(l)) => ingest_idx(i, l, cfg.num_classes),
        _ => Err(Error::Missing {
            what: "training dataset",
            path: PathBuf::from("<unset>"),
            hint: "pass --dataset-images and --dataset-labels (see `saat synth`)",
        }),
    }
}

fn load_pool(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.pool_images, &cfg.pool_labels) {
        (Some(i), Some(l)) => ingest_idx(i, l, cfg.num_classes),
        _ => load_train(cfg),
    }
}

pub fn checkpoint_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{name}.ckpt"))
}

fn load_model(cfg: &RunConfig, name: &str) -> Result<Model> {
    let path = checkpoint_path(cfg, name);
    if !path.exists() {
        return Err(Error::Missing {
            what: "checkpoint",
            path,
            hint: "run `saat train` with the same --checkpoint-dir first",
        });
    }
    Checkpoint::load(&path)?.to_model()
}

/// Creates `<out>/<command>-<hash>` and stores the resolved config in it.
pub fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let hash = config_hash(cfg)?;
    let dir = cfg.out.join(format!("{command}-{hash}"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(dir.join("config_hash"), format!("{hash}\n"))?;
    Ok(dir)
}

/// Trains each configured model and returns the checkpoint paths.
pub fn train_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_train(cfg)?;
    let pool = match (&cfg.pool_images, &cfg.pool_labels) {
        (Some(i), Some(l)) => Some(ingest_idx(i, l, cfg.num_classes)?),
        _ => None,
    };
    let dir = run_dir(cfg, "train")?;
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut paths = Vec::new();
    let mut histories = serde_json::Map::new();
    for (i, name) in cfg.models.iter().enumerate() {
        let arch = Architecture::by_name(name)?;
        let input = [1, data.height(), data.width()];
        let mut m = Model::build(
            &arch,
            cfg.num_classes,
            input,
            seed::derive_indexed(cfg.seed, STREAM_INIT, i as u64),
        )?;
        let tc = TrainConfig::new(
            cfg.epochs,
            cfg.lr,
            cfg.batch,
            seed::derive_indexed(cfg.seed, STREAM_TRAIN, i as u64),
        );
        let out = model::train(&mut m, &data, pool.as_ref(), &tc, |r| {
            let val = r.val_accuracy.map_or(String::new(), |v| format!(" pool {:.4}", v));
            println!(
                "{name} epoch {} loss {:.4} train {:.4}{val}",
                r.epoch, r.mean_loss, r.train_accuracy
            );
        })?;
        let path = checkpoint_path(cfg, name);
        out.checkpoint.save(&path)?;
        histories.insert(name.clone(), serde_json::to_value(&out.history)?);
        println!("saved {}", path.display());
        paths.push(path);
    }
    std::fs::write(dir.join("history.json"), serde_json::to_string_pretty(&histories)?)?;
    Ok(paths)
}

/// Runs an attack or sweep and writes `results.csv` and `results.json`.
pub fn sweep_cmd(cfg: &RunConfig, command: &str, axis: Axis) -> Result<SweepResult> {
    let white = load_model(cfg, &cfg.white_box)?;
    let blacks = cfg
        .black_boxes
        .iter()
        .map(|n| load_model(cfg, n))
        .collect::<Result<Vec<_>>>()?;
    let pool = load_pool(cfg)?;
    let base = cfg.attack()?;
    let mut bench = Bench::new(&white, blacks.iter().collect(), &pool);
    bench.gallery_k = cfg.gallery_k;
    bench.n_images = cfg.n_images;
    bench.batch = cfg.attack_batch;
    bench.record_runtime = cfg.record_runtime;
    let seeds = cfg.seeds();
    let result = match (command, axis) {
        ("attack", _) => harness::sweep(&bench, Axis::Tap, &[base], &seeds)?,
        (_, Axis::Tap) => {
            let taps = cfg.taps.clone().unwrap_or_else(|| (0..white.tap_count()).collect());
            harness::layer_sweep(&bench, &base, &taps, &seeds)?
        }
        (_, Axis::Rank) => harness::rank_sweep(&bench, &base, &cfg.ranks, &seeds)?,
        (_, Axis::C) => harness::c_sweep(&bench, &base, &cfg.c_values, &seeds)?,
    };
    let dir = run_dir(cfg, command)?;
    harness::write_csv(&result.rows, &dir.join("results.csv"))?;
    harness::write_json(&result.rows, &dir.join("results.json"))?;
    print_summary(&result);
    println!("results in {}", dir.display());
    Ok(result)
}

fn print_summary(result: &SweepResult) {
    println!(
        "{:<10} {:<7} {:>4} {:>10} {:>5} {:>8} {:>8} {:>8}",
        "black_box", "loss", "tap", "target", "c", "tsuc", "ttr", "white"
    );
    for s in result.summary() {
        let ttr = s.mean_ttr.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let white = result.mean_white_tsuc(s.tap, &s.rank_or_random, s.c, s.loss);
        println!(
            "{:<10} {:<7} {:>4} {:>10} {:>5.2} {:>8.2} {:>8} {:>8.2}",
            s.black_box, s.loss, s.tap, s.rank_or_random, s.c, s.mean_tsuc, ttr, white
        );
    }
    println!(
        "constraint audit: {} examples, {} violations, max linf {:.6}",
        result.audit.checked, result.audit.violations, result.audit.max_linf
    );
}

/// Runs the translation demo at every tap of the white box on one pool image.
pub fn demo_cmd(cfg: &RunConfig) -> Result<Vec<harness::TranslationReport>> {
    let white = load_model(cfg, &cfg.white_box)?;
    let pool = load_pool(cfg)?;
    if cfg.demo_image >= pool.len() {
        return Err(Error::Config(format!(
            "demo_image {} outside a pool of {}",
            cfg.demo_image,
            pool.len()
        )));
    }
    let image = pool.image(cfg.demo_image);
    let reports = (0..white.tap_count())
        .map(|t| harness::translation_demo(&white, &image, t, cfg.demo_shift))
        .collect::<Result<Vec<_>>>()?;
    let dir = run_dir(cfg, "demo-translation")?;
    std::fs::write(dir.join("translation.json"), serde_json::to_string_pretty(&reports)?)?;
    println!(
        "{:<4} {:<7} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "tap", "pair", "euclid", "paa_l", "paa_p", "paa_g", "gaa"
    );
    for r in &reports {
        for (pair, d) in [("flip", &r.flip), ("shift", &r.shifted)] {
            println!(
                "{:<4} {:<7} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
                r.tap, pair, d.euclid, d.paa_linear, d.paa_poly, d.paa_gauss, d.gaa
            );
        }
    }
    println!("results in {}", dir.display());
    Ok(reports)
}

fn export_cmd(from: &Path, to: &Path, format: ExportFormat) -> Result<()> {
    if !from.exists() {
        return Err(Error::Missing {
            what: "results file",
            path: from.to_path_buf(),
            hint: "point --from at a results.json written by an attack or sweep",
        });
    }
    let rows = harness::read_json(from)?;
    match format {
        ExportFormat::Csv => harness::write_csv(&rows, to)?,
        ExportFormat::Json => harness::write_json(&rows, to)?,
    }
    println!("wrote {} rows to {}", rows.len(), to.display());
    Ok(())
}
