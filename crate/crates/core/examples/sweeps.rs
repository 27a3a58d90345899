//! Layer, target-rank and kernel-bias sweeps at small scale, written as CSV.
//!
//! Usage: `cargo run --release --example sweeps -- [layers|ranks|c]`

mod common;

use saat::attack::{AttackConfig, LossKind};
use saat::harness::{c_grid, c_sweep, layer_sweep, rank_sweep, write_csv, Bench};

fn main() -> saat::Result<()> {
    let axis = std::env::args().nth(1).unwrap_or_else(|| "layers".into());
    let models = common::zoo(&common::cache_dir());
    let pool = common::pool();
    let mut bench = Bench::new(&models[0], models[1..].iter().collect(), &pool);
    bench.n_images = 30;
    bench.gallery_k = 10;
    let cfg = AttackConfig {
        loss: LossKind::PaaPoly,
        tap: 2,
        ..AttackConfig::default()
    };
    let seeds = [0, 1];
    let result = match axis.as_str() {
        "layers" => layer_sweep(&bench, &cfg, &(0..models[0].tap_count()).collect::<Vec<_>>(), &seeds)?,
        "ranks" => rank_sweep(&bench, &cfg, &[2, 4, 6, 8, 10], &seeds)?,
        "c" => c_sweep(&bench, &cfg, &c_grid()[..6], &seeds)?,
        other => panic!("unknown axis {other}; use layers, ranks or c"),
    };
    for s in result.summary() {
        let ttr = s.mean_ttr.map_or("n/a".to_string(), |v| format!("{v:.1}"));
        println!(
            "{:<10} tap {} {:<7} c {:.1}: tSuc {:5.1}  tTR {ttr}",
            s.black_box, s.tap, s.rank_or_random, s.c, s.mean_tsuc
        );
    }
    let path = common::cache_dir().join(format!("sweep-{axis}.csv"));
    write_csv(&result.rows, &path)?;
    println!("{} rows written to {}", result.rows.len(), path.display());
    Ok(())
}
