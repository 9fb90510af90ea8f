//! The training objectives on hand-sized inputs.

use boxdistill::objectives::{asymmetric_dice, self_correct, weighted_cross_entropy};
use candle_core::{Device, Tensor};

fn main() -> anyhow::Result<()> {
    let dev = Device::Cpu;
    let g = Tensor::new(&[1f64, 1.0, 0.0, 0.0], &dev)?;
    for (name, p) in [
        ("perfect", [1f64, 1.0, 0.0, 0.0]),
        ("misses one defect pixel", [1.0, 0.0, 0.0, 0.0]),
        ("one false alarm", [1.0, 1.0, 1.0, 0.0]),
    ] {
        let p = Tensor::new(&p, &dev)?;
        let beta_04: f64 = asymmetric_dice(&p, &g, 0.4, 1e-6)?.to_scalar()?;
        let beta_10: f64 = asymmetric_dice(&p, &g, 0.999, 1e-6)?.to_scalar()?;
        println!("dice {name:>24}: beta 0.4 -> {beta_04:.4}, beta ~1 -> {beta_10:.4}");
    }

    let logits = Tensor::new(&[[[[2f64, 0.0]], [[0.0, 2.0]], [[0.0, 0.0]]]], &dev)?;
    for weights in [[1.0, 1.0, 1.0], [0.2, 5.0, 5.0]] {
        let l: f64 = weighted_cross_entropy(&logits, &[0, 2], &weights)?.to_scalar()?;
        println!("weighted CE with weights {weights:?}: {l:.4}");
    }

    // pixels: confident defect on background, unsure background, labeled defect
    let pseudo = [0u8, 0, 1];
    let probs = [0.03f32, 0.95, 0.02, 0.15, 0.85, 0.0, 0.05, 0.0, 0.95];
    let (warm, _) = self_correct(&pseudo, &probs, 3, 0.9, true)?;
    let (after, stats) = self_correct(&pseudo, &probs, 3, 0.9, false)?;
    println!("self-correction: {pseudo:?} -> warm-up {warm:?}, after warm-up {after:?}, {stats:?}");
    Ok(())
}
