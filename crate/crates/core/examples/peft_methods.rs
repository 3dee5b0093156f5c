//! Attaches each adaptation method to the same backbone and reports what it
//! trains and whether the logits change at attach time.

use smoothcert::peft::{self, PeftConfig, PeftMethod, PromptDepth};
use smoothcert::vit::{VitConfig, VitModel};

fn main() -> smoothcert::Result<()> {
    let config = VitConfig {
        image_size: 32,
        channels: 3,
        patch_size: 4,
        embed_dim: 64,
        num_heads: 4,
        depth: 4,
        mlp_ratio: 2,
        num_classes: 10,
    };
    let base = VitModel::<f32>::new(config.clone(), 0)?;
    let x: Vec<f32> = (0..4 * config.image_len()).map(|i| (i % 97) as f32 / 97.0).collect();
    let reference = base.forward_pixels(&x, 4)?;

    let methods = [
        PeftConfig::lora(2),
        PeftConfig { lora_alpha: Some(8.0), ..PeftConfig::lora(4) },
        PeftConfig::adapter(8),
        PeftConfig::prompt(100),
        PeftConfig { prompt_depth: PromptDepth::Shallow, ..PeftConfig::prompt(100) },
        PeftConfig::new(PeftMethod::Full),
    ];
    println!("{:<22} {:>9} {:>9} {:>10}", "method", "delta", "trained", "identity");
    for pc in methods {
        let m = peft::attach(base.clone(), &pc, 1)?;
        let same = m.forward_pixels(&x, 4)?.bit_eq(&reference);
        let name = match pc.method {
            PeftMethod::Lora => format!("lora r={} scale={}", pc.rank, pc.lora_scale()),
            PeftMethod::Adapter => format!("adapter r={}", pc.adapter_bottleneck),
            PeftMethod::Prompt => format!("prompt p={} {}", pc.prompt_length, pc.prompt_depth),
            other => other.to_string(),
        };
        println!(
            "{name:<22} {:>9} {:>9} {:>10}",
            pc.delta_parameter_count(config.embed_dim, config.depth),
            m.count_parameters(true),
            same
        );
    }
    Ok(())
}
