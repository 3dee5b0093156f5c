//! Saves a backbone and a LoRA delta separately, reloads both, and folds the
//! low-rank update into the base weights.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig};
use smoothcert::train::{train, TrainConfig};
use smoothcert::vit::{checkpoint, VitConfig, VitModel};

fn main() -> smoothcert::Result<()> {
    let config = VitConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 10,
    };
    let dir = std::env::temp_dir().join("smoothcert_checkpoints");
    std::fs::create_dir_all(&dir)?;
    let mut base = VitModel::<f32>::new(config, 0)?;
    base.freeze();
    checkpoint::save_checkpoint(&base, dir.join("backbone.psmc"))?;

    let ds = DeskSpec::new(DeskFamily::Gratings, 8, 200, 0).generate(Split::Train)?;
    let mut tuned = peft::attach(base, &PeftConfig::lora(4), 0)?;
    train(&mut tuned, &ds, &TrainConfig { epochs: 2, ..Default::default() })?;
    checkpoint::save_peft_checkpoint(&tuned, dir.join("lora.psmc"))?;

    for name in ["backbone.psmc", "lora.psmc"] {
        let m = checkpoint::read_manifest(dir.join(name))?;
        let bytes = std::fs::metadata(dir.join(name))?.len();
        println!("{name:<14} {:?} {} tensors, {bytes} bytes", m.kind, m.tensors.len());
    }

    let backbone = checkpoint::load_checkpoint::<f32>(dir.join("backbone.psmc"))?;
    let reloaded = checkpoint::load_peft_checkpoint(dir.join("lora.psmc"), backbone)?;
    let x = ds.image(0);
    let a = tuned.forward_pixels(x, 1)?;
    assert!(reloaded.forward_pixels(x, 1)?.bit_eq(&a));
    let merged = peft::merge_lora(reloaded)?;
    let b = merged.forward_pixels(x, 1)?;
    let gap = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    println!("reload is bit-exact; merged model differs by at most {gap:.2e}");
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
