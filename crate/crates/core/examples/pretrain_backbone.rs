//! Trains a small ViT from scratch on clean desk data and saves it as the
//! frozen backbone that the adaptation examples start from.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::train::{train, TrainConfig, TrainMode};
use smoothcert::vit::{checkpoint, VitConfig, VitModel};

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
    println!("{} parameters", model.count_parameters(false));
    let cfg = TrainConfig { epochs: 6, mode: TrainMode::CleanPretrain, ..Default::default() };
    for e in train(&mut model, &train_ds, &cfg)? {
        println!("epoch {} loss {:.4} clean acc {:.3}", e.epoch, e.mean_loss, e.clean_acc);
    }
    model.freeze();
    println!("held-out clean accuracy {:.3}", smoothcert::train::evaluate(&model, &test, 0.0, 0)?);
    println!("noisy accuracy at σ=0.5 {:.3}", smoothcert::train::evaluate(&model, &test, 0.5, 0)?);

    let path = std::env::temp_dir().join("smoothcert_backbone.psmc");
    checkpoint::save_checkpoint(&model, &path)?;
    println!("saved {} (backbone sha256 {})", path.display(), &model.backbone_sha256()[..16]);
    Ok(())
}
