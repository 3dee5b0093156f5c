//! Pretrains on clean data, then LoRA-fine-tunes on Gaussian-noise-augmented
//! copies and compares noisy accuracy before and after.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig};
use smoothcert::train::{evaluate, train, write_loss_csv, TrainConfig, TrainMode};
use smoothcert::vit::{VitConfig, VitModel};

fn main() -> smoothcert::Result<()> {
    let config = VitConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        embed_dim: 32,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 10,
    };
    let data = DeskSpec::new(DeskFamily::Gratings, 16, 1000, 0);
    let (train_ds, test) = (data.generate(Split::Train)?, data.generate(Split::Test)?);
    let sigma = 0.5;

    let mut base = VitModel::<f32>::new(config, 0)?;
    train(&mut base, &train_ds, &TrainConfig { epochs: 6, mode: TrainMode::CleanPretrain, ..Default::default() })?;
    base.freeze();
    println!("backbone noisy accuracy at σ={sigma}: {:.3}", evaluate(&base, &test, sigma, 1)?);

    let mut tuned = peft::attach(base, &PeftConfig::lora(2), 0)?;
    let cfg = TrainConfig { sigma, epochs: 5, ..Default::default() };
    let trace = train(&mut tuned, &train_ds, &cfg)?;
    for e in &trace {
        println!("epoch {} loss {:.4} noisy acc {:.3}", e.epoch, e.mean_loss, e.noisy_acc);
    }
    println!("LoRA noisy accuracy at σ={sigma}: {:.3}", evaluate(&tuned, &test, sigma, 1)?);

    let csv = std::env::temp_dir().join("smoothcert_finetune_loss.csv");
    write_loss_csv(&csv, &trace, &[("train.sigma".into(), sigma.to_string())])?;
    println!("loss trace in {}", csv.display());
    Ok(())
}
