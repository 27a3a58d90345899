//! Checks reverse-mode gradients against central finite differences, first on
//! a small convolutional network and then on each feature-alignment loss.

use rand::Rng;
use saat::model::{Architecture, Mode, Model};
use saat::statalign::{Bandwidth, FeatureLoss, FeatureMap, KernelSpec, SplitStrategy};
use saat::tensor::{grad_check, Tensor};

fn main() -> saat::Result<()> {
    let mut rng = saat::seed::rng(1);
    let arch = Architecture::parse("tiny", "conv:4 pool res conv:6 pool flatten linear", &[0, 2, 3])?;
    let model = Model::build(&arch, 3, [1, 8, 8], 5)?;
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen::<f64>());
    for tap in 0..model.tap_count() {
        let err = grad_check(
            |tape, input| {
                let pass = model.forward(tape, input, Mode::Eval, Some(tap))?;
                tape.sum(pass.taps[tap])
            },
            &x,
            1e-5,
        )?;
        println!("network tap {tap}: max relative error {err:.2e}");
    }

    let fm =
        |rng: &mut rand_chacha::ChaCha8Rng| FeatureMap::new(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (s, t) = (fm(&mut rng)?, fm(&mut rng)?);
    let losses = [
        (
            "paa linear",
            FeatureLoss::Paa {
                kernel: KernelSpec::linear(),
                strategy: SplitStrategy::PointWise,
            },
        ),
        (
            "paa poly",
            FeatureLoss::Paa {
                kernel: KernelSpec::polynomial(0.0, 2),
                strategy: SplitStrategy::PointWise,
            },
        ),
        (
            "paa gauss",
            FeatureLoss::Paa {
                kernel: KernelSpec::gaussian(Bandwidth::Fixed(1.0)),
                strategy: SplitStrategy::ChannelWise,
            },
        ),
        ("gaa", FeatureLoss::Gaa),
        ("euclid", FeatureLoss::Euclid),
    ];
    for (name, loss) in losses {
        let (value, grad) = loss.eval_grad(&s, &t)?;
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let mut up = s.values().to_vec();
            let mut dn = s.values().to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd =
                (loss.eval(&FeatureMap::new(4, 6, up)?, &t)? - loss.eval(&FeatureMap::new(4, 6, dn)?, &t)?) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
        }
        println!("{name:<10} loss {value:.5}  max relative error {worst:.2e}");
    }
    Ok(())
}
