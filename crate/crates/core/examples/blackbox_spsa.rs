//! Black-box adaptation: trains a Coordinator that paints input-dependent
//! prompts onto images, using only score queries to a frozen model.

use smoothcert::blackbox::{evaluate_decorated, spsa_train, Coordinator, CountingOracle, SpsaConfig, SpsaSchedule};
use smoothcert::data::{DeskFamily, DeskSpec, Split};
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
    let mut model = VitModel::<f32>::new(config, 0)?;
    train(&mut model, &train_ds, &TrainConfig { epochs: 6, mode: TrainMode::CleanPretrain, ..Default::default() })?;
    model.freeze();

    let sigma = 0.25;
    let mut coord = Coordinator::new(&model, 0.3, 0)?;
    println!("coordinator has {} trainable parameters", coord.num_parameters());
    let before = evaluate_decorated(&coord, &model, &test, sigma, 1)?;

    let oracle = CountingOracle::new(&model);
    let cfg = SpsaConfig { sigma, steps: 400, ..Default::default() };
    let trace = spsa_train(&mut coord, &oracle, &train_ds, &SpsaSchedule::default(), &cfg)?;
    for (i, chunk) in trace.chunks(100).enumerate() {
        println!("steps {:>3}..{:>3} mean loss {:.4}", i * 100, (i + 1) * 100, chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let after = evaluate_decorated(&coord, &model, &test, sigma, 1)?;
    println!("{} oracle queries", oracle.queries());
    println!("noisy accuracy at σ={sigma}: {before:.3} undecorated-init → {after:.3} trained");
    Ok(())
}
