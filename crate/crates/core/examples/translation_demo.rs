//! Shows that the alignment losses ignore where a pattern sits while the
//! Euclidean feature distance does not: a feature map against its own
//! circular shift, and an image against its mirror.

mod common;

use saat::harness::translation_demo;

fn main() -> saat::Result<()> {
    let models = common::zoo(&common::cache_dir());
    let pool = common::pool();
    let image = pool.image(0);
    for model in &models {
        println!("{}", model.name());
        println!(
            "  {:<4} {:<6} {:>11} {:>11} {:>11} {:>11} {:>11}",
            "tap", "pair", "euclid", "paa_l", "paa_p", "paa_g", "gaa"
        );
        for tap in 0..model.tap_count() {
            let r = translation_demo(model, &image, tap, 1)?;
            for (pair, d) in [("flip", r.flip), ("shift", r.shifted)] {
                println!(
                    "  {:<4} {:<6} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}",
                    tap, pair, d.euclid, d.paa_linear, d.paa_poly, d.paa_gauss, d.gaa
                );
            }
            assert!(r.shift_invariant);
        }
    }
    Ok(())
}
