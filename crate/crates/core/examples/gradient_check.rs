//! Compares backward-pass gradients with finite differences, in double
//! precision, for every adaptation method on a one-block ViT.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig, PeftMethod};
use smoothcert::tensor::gradcheck::finite_difference_check;
use smoothcert::train::BatchLoss;
use smoothcert::vit::{VitConfig, VitModel};

fn main() -> smoothcert::Result<()> {
    let config = VitConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 2,
        num_classes: 10,
    };
    let ds = DeskSpec::new(DeskFamily::Gratings, 8, 6, 0).generate(Split::Train)?;
    for pc in [PeftConfig::lora(2), PeftConfig::adapter(4), PeftConfig::prompt(3), PeftConfig::new(PeftMethod::Full)] {
        let model = peft::attach(VitModel::<f64>::new(config.clone(), 1)?, &pc, 2)?;
        let mut obj = BatchLoss { model, pixels: ds.images.clone(), labels: ds.labels.clone() };
        let rep = finite_difference_check(&mut obj, 1e-4, 8, 0)?;
        println!(
            "{:<8} {:>4} coordinates, max error {:.2e} at {}[{}]",
            pc.method.to_string(),
            rep.coordinates_checked,
            rep.max_error,
            rep.worst_param,
            rep.worst_index
        );
    }
    Ok(())
}
