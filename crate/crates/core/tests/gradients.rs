//! Finite-difference checks of backward passes through every adaptation
//! method, in double precision.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig, PeftMethod, PromptDepth};
use smoothcert::rng::{self, Domain};
use smoothcert::tensor::gradcheck::finite_difference_check;
use smoothcert::tensor::Tensor;
use smoothcert::train::BatchLoss;
use smoothcert::vit::{VitConfig, VitModel};

fn one_block() -> VitConfig {
    VitConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

/// Attaches `pc` and replaces the zero-initialised halves (LoRA `B`, adapter
/// up-projections) with random values so every gradient is exercised.
fn objective(pc: &PeftConfig) -> BatchLoss {
    let model = VitModel::<f64>::new(one_block(), 11).unwrap();
    let mut model = peft::attach(model, pc, 12).unwrap();
    let mut r = rng::stream(13, Domain::Init, 99, 0);
    if let Some(state) = model.peft.as_mut() {
        state.visit_mut(&mut |name, t| {
            if name.ends_with(".b") || name.ends_with(".up") {
                let fresh = Tensor::randn(t.shape(), 0.3, &mut r).with_requires_grad(true);
                *t = fresh;
            }
        });
    }
    let ds = DeskSpec::new(DeskFamily::Gratings, 8, 4, 3).generate(Split::Train).unwrap();
    let labels = ds.labels.iter().map(|l| l % 3).collect();
    BatchLoss { model, pixels: ds.images, labels }
}

fn check(pc: PeftConfig) {
    let mut obj = objective(&pc);
    let report = finite_difference_check(&mut obj, 1e-4, 12, 5).unwrap();
    assert!(report.coordinates_checked > 0);
    assert!(
        report.max_error < 1e-6,
        "{:?}: worst {} at {} with error {:e}",
        pc.method,
        report.worst_param,
        report.worst_index,
        report.max_error
    );
}

#[test]
fn lora_gradients() {
    check(PeftConfig::lora(2));
}

#[test]
fn lora_gradients_with_custom_alpha() {
    check(PeftConfig { lora_alpha: Some(5.0), ..PeftConfig::lora(3) });
}

#[test]
fn adapter_gradients() {
    check(PeftConfig::adapter(4));
}

#[test]
fn adapter_gelu_gradients() {
    check(PeftConfig { adapter_activation: peft::Activation::Gelu, ..PeftConfig::adapter(4) });
}

#[test]
fn deep_prompt_gradients() {
    check(PeftConfig::prompt(3));
}

#[test]
fn shallow_prompt_gradients() {
    check(PeftConfig { prompt_depth: PromptDepth::Shallow, ..PeftConfig::prompt(3) });
}

#[test]
fn full_fine_tune_gradients() {
    check(PeftConfig::new(PeftMethod::Full));
}

#[test]
fn only_trainable_tensors_are_probed() {
    let mut obj = objective(&PeftConfig::lora(1));
    let mut names = Vec::new();
    use smoothcert::tensor::gradcheck::Objective;
    obj.visit_params(&mut |n, _| names.push(n.to_string()));
    assert!(names.iter().all(|n| n.starts_with("peft.") || n.starts_with("head.")), "{names:?}");
    assert_eq!(names.iter().filter(|n| n.starts_with("peft.lora")).count(), 4);
}
