//! Transfers a backbone to a new label set under noise, once in a single
//! noisy round and once clean-then-noisy.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::PeftConfig;
use smoothcert::train::{evaluate, joint_adapt, train, two_stage_adapt, TrainConfig, TrainMode};
use smoothcert::vit::{VitConfig, VitModel};

fn main() -> smoothcert::Result<()> {
    let source = DeskSpec::new(DeskFamily::Mixed, 16, 1000, 0).generate(Split::Train)?;
    let config = VitConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        embed_dim: 32,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: source.num_classes,
    };
    let mut backbone = VitModel::<f32>::new(config, 0)?;
    train(&mut backbone, &source, &TrainConfig { epochs: 6, mode: TrainMode::CleanPretrain, ..Default::default() })?;
    backbone.freeze();

    let target = DeskSpec::new(DeskFamily::Blobs, 16, 1000, 1);
    let (train_ds, test) = (target.generate(Split::Train)?, target.generate(Split::Test)?);
    let sigma = 0.25;
    let cfg = TrainConfig { sigma, epochs: 4, learning_rate: 1e-2, ..Default::default() };
    let pc = PeftConfig::lora(8);
    let (joint, _) = joint_adapt(backbone.clone(), &train_ds, &pc, &cfg)?;
    let (staged, trace) = two_stage_adapt(backbone, &train_ds, &pc, &cfg)?;
    println!("two-stage ran {} epochs in total", trace.len());
    println!("joint     noisy accuracy {:.3}", evaluate(&joint, &test, sigma, 0)?);
    println!("two-stage noisy accuracy {:.3}", evaluate(&staged, &test, sigma, 0)?);
    Ok(())
}
