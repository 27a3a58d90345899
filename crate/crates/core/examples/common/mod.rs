use std::path::{Path, PathBuf};

use saat::data::{synth, Dataset};
use saat::model::{train, Architecture, Checkpoint, Model, TrainConfig};
use saat::seed;

/// Directory shared by the examples for cached checkpoints.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("SAAT_EXAMPLE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("saat-examples"))
}

pub fn training_set() -> Dataset {
    synth::generate(200, seed::derive_indexed(0, seed::STREAM_DATA, 0))
}

pub fn pool() -> Dataset {
    synth::generate(30, seed::derive_indexed(0, seed::STREAM_DATA, 1))
}

/// Loads the three shipped models from the cache, training any that are missing.
pub fn zoo(dir: &Path) -> Vec<Model> {
    std::fs::create_dir_all(dir).unwrap();
    let data = training_set();
    ["vgg", "resnet", "inception"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let path = dir.join(format!("{name}.ckpt"));
            if let Ok(ck) = Checkpoint::load(&path) {
                return ck.to_model().unwrap();
            }
            let arch = Architecture::by_name(name).unwrap();
            let mut m = Model::build(
                &arch,
                10,
                [1, 32, 32],
                seed::derive_indexed(0, seed::STREAM_INIT, i as u64),
            )
            .unwrap();
            let cfg = TrainConfig::new(6, 0.05, 32, seed::derive_indexed(0, seed::STREAM_TRAIN, i as u64));
            let out = train(&mut m, &data, None, &cfg, |r| {
                println!(
                    "  {name} epoch {} loss {:.4} train acc {:.4}",
                    r.epoch, r.mean_loss, r.train_accuracy
                )
            })
            .unwrap();
            out.checkpoint.save(&path).unwrap();
            m
        })
        .collect()
}
