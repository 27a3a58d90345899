//! Attacks a handful of images with every loss and reports the loss trace,
//! the white-box prediction and whether the other two models follow.

mod common;

use saat::attack::{build_gallery, run_attack_batch, AttackConfig, AttackRequest, LossKind};

fn main() -> saat::Result<()> {
    let models = common::zoo(&common::cache_dir());
    let pool = common::pool();
    let (white, blacks) = (&models[0], &models[1..]);
    let requests: Vec<AttackRequest> = (0..6)
        .map(|i| AttackRequest {
            id: i as u64,
            image: pool.image(i),
            label: pool.label(i),
        })
        .collect();
    let gallery = build_gallery(&pool, white, 2, 5, 0)?;
    for loss in LossKind::ALL {
        let cfg = AttackConfig {
            loss,
            tap: 2,
            ..AttackConfig::default()
        };
        println!("{loss}");
        for r in run_attack_batch(white, &requests, &cfg, Some(&gallery))? {
            let follows: Vec<bool> = blacks
                .iter()
                .map(|b| b.predict_labels(&r.x_adv).map(|p| p[0] == r.y_tgt))
                .collect::<saat::Result<_>>()?;
            println!(
                "  image {} label {} -> target {}: loss {:.4} -> {:.4}, white box says {}, black boxes fooled {:?}",
                r.id, r.y, r.y_tgt, r.loss_trace[0], r.loss_trace[cfg.iters], r.white_box_prediction, follows
            );
        }
    }
    Ok(())
}
