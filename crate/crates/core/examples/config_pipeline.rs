//! Drives the experiment harness from a key = value configuration: pretrain,
//! fine-tune, certify and report, all into one output directory.

use smoothcert::harness::{config::parse_pairs, run, Command, ExperimentConfig};

const CONFIG: &str = "
seed = 1
[data]
train_count = 400
test_count = 20
[vit]
image_size = 16
embed_dim = 32
num_heads = 2
depth = 2
[pretrain]
epochs = 4
[peft]
method = lora
rank = 2
[train]
epochs = 2
[smoothing]
n = 200
[report]
radius_max = 1.0
radius_step = 0.25
";

fn main() -> smoothcert::Result<()> {
    let mut pairs = parse_pairs(CONFIG)?;
    let out = std::env::temp_dir().join("smoothcert_pipeline");
    pairs.push(("out".into(), out.display().to_string()));
    let cfg = ExperimentConfig::from_pairs(&pairs)?;
    for command in [Command::Pretrain, Command::Finetune, Command::Certify, Command::Report] {
        let outcome = run(command, &cfg, &[])?;
        println!("[{command}]");
        for line in outcome.summary {
            println!("  {line}");
        }
        for path in outcome.artifacts {
            println!("  wrote {}", path.display());
        }
    }
    print!("{}", std::fs::read_to_string(cfg.out.join("curve.csv"))?);
    std::fs::remove_dir_all(&cfg.out)?;
    Ok(())
}
