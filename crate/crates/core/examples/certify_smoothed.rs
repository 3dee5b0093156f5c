//! Certifies a handful of test images with a noise-fine-tuned model and
//! prints the certified radius of each.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig};
use smoothcert::smoothing::{certify, SmoothingParams};
use smoothcert::train::{train, TrainConfig, TrainMode};
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
    let sigma = 0.25;

    let mut base = VitModel::<f32>::new(config, 0)?;
    train(&mut base, &train_ds, &TrainConfig { epochs: 6, mode: TrainMode::CleanPretrain, ..Default::default() })?;
    base.freeze();
    let mut model = peft::attach(base, &PeftConfig::lora(2), 0)?;
    train(&mut model, &train_ds, &TrainConfig { sigma, epochs: 4, ..Default::default() })?;

    let params = SmoothingParams { sigma, ..Default::default() };
    println!("n0={} n={} α={}", params.n0, params.n, params.alpha);
    for i in 0..10 {
        let o = certify(&model, test.image(i), &params, 0, i as u64)?;
        let verdict = match o.prediction {
            Some(c) if c == test.labels[i] => format!("class {c}, R = {:.3}", o.radius),
            Some(c) => format!("class {c} (wrong, label {}), R = {:.3}", test.labels[i], o.radius),
            None => "abstain".to_string(),
        };
        println!("#{i:<2} pA ≥ {:.4}  {verdict}  [{:?}]", o.pa_lower, o.wall_time);
    }
    Ok(())
}
