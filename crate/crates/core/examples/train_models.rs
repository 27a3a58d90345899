//! Trains the three shipped architectures on the generated dataset, saves
//! checkpoints and reloads them to confirm identical predictions.

mod common;

use saat::model::{accuracy, Checkpoint};

fn main() -> saat::Result<()> {
    let dir = common::cache_dir();
    let models = common::zoo(&dir);
    let train = common::training_set();
    let pool = common::pool();
    for m in &models {
        let path = dir.join(format!("{}.ckpt", m.name()));
        let reloaded = Checkpoint::load(&path)?.to_model()?;
        let batch = pool.batch(&(0..10).collect::<Vec<_>>());
        assert_eq!(m.predict(&batch)?, reloaded.predict(&batch)?);
        println!(
            "{:<10} taps {:?}  train acc {:.4}  pool acc {:.4}  {}",
            m.name(),
            m.tap_shapes()?,
            accuracy(m, &train)?,
            accuracy(m, &pool)?,
            path.display()
        );
    }
    Ok(())
}
