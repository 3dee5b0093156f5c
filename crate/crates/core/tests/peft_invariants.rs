//! Attach-time identity, frozen backbones and parameter accounting.

use smoothcert::data::{DeskFamily, DeskSpec, Split};
use smoothcert::peft::{self, PeftConfig, PeftMethod, PromptDepth};
use smoothcert::rng::{self, Domain};
use smoothcert::train::{train, TrainConfig};
use smoothcert::vit::{VitConfig, VitModel};
use rand::Rng;

fn config() -> VitConfig {
    VitConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 10,
    }
}

fn random_inputs(count: usize, len: usize) -> Vec<f32> {
    let mut r = rng::stream(3, Domain::Data, 77, 0);
    (0..count * len).map(|_| r.random::<f32>()).collect()
}

fn assert_bit_identical(pc: &PeftConfig) {
    let base = VitModel::<f32>::new(config(), 1).unwrap();
    let x = random_inputs(100, config().image_len());
    let before = base.forward_pixels(&x, 100).unwrap();
    let tuned = peft::attach(base, pc, 9).unwrap();
    let after = tuned.forward_pixels(&x, 100).unwrap();
    assert!(before.bit_eq(&after), "{:?} changed the logits at attach time", pc.method);
}

#[test]
fn lora_is_bit_identical_at_attach() {
    assert_bit_identical(&PeftConfig::lora(2));
    assert_bit_identical(&PeftConfig { lora_alpha: Some(7.0), ..PeftConfig::lora(4) });
}

#[test]
fn adapter_is_bit_identical_at_attach() {
    assert_bit_identical(&PeftConfig::adapter(8));
    assert_bit_identical(&PeftConfig { adapter_activation: peft::Activation::Gelu, ..PeftConfig::adapter(3) });
}

#[test]
fn full_and_none_are_bit_identical_at_attach() {
    assert_bit_identical(&PeftConfig::new(PeftMethod::Full));
    assert_bit_identical(&PeftConfig::new(PeftMethod::None));
}

#[test]
fn prompt_changes_logits_but_leaves_backbone_alone() {
    let base = VitModel::<f32>::new(config(), 1).unwrap();
    let hash = base.backbone_sha256();
    let x = random_inputs(4, config().image_len());
    let before = base.forward_pixels(&x, 4).unwrap();
    let tuned = peft::attach(base, &PeftConfig::prompt(5), 9).unwrap();
    assert_eq!(tuned.backbone_sha256(), hash);
    assert_eq!(tuned.tokens_per_layer(), config().num_patches() + 1 + 5);
    let after = tuned.forward_pixels(&x, 4).unwrap();
    assert!(!before.bit_eq(&after));
    assert!(after.data().iter().all(|v| v.is_finite()));
}

fn trained(pc: &PeftConfig, steps_hint: usize) -> (VitModel<f32>, String) {
    let ds = DeskSpec::new(DeskFamily::Gratings, 8, steps_hint * 4, 0).generate(Split::Train).unwrap();
    let base = VitModel::<f32>::new(config(), 1).unwrap();
    let hash = base.backbone_sha256();
    let mut m = peft::attach(base, pc, 2).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-2, eval_examples: 8, ..Default::default() };
    train(&mut m, &ds, &cfg).unwrap();
    (m, hash)
}

#[test]
fn frozen_backbone_survives_training() {
    for pc in [PeftConfig::lora(2), PeftConfig::adapter(4), PeftConfig::prompt(3)] {
        let (m, hash) = trained(&pc, 100);
        assert_eq!(m.backbone_sha256(), hash, "{:?}", pc.method);
    }
    let (m, hash) = trained(&PeftConfig::new(PeftMethod::Full), 10);
    assert_ne!(m.backbone_sha256(), hash);
}

#[test]
fn closed_form_counts_match_the_model() {
    let c = config();
    let (d, l) = (c.embed_dim, c.depth);
    let head = d * c.num_classes + c.num_classes;
    let cases = [
        (PeftConfig::lora(1), 4 * l * d),
        (PeftConfig::lora(3), 4 * l * d * 3),
        (PeftConfig::adapter(5), 4 * d * 5 * l),
        (PeftConfig::prompt(7), l * 7 * d),
        (PeftConfig { prompt_depth: PromptDepth::Shallow, ..PeftConfig::prompt(7) }, 7 * d),
    ];
    for (pc, expect) in cases {
        assert_eq!(pc.delta_parameter_count(d, l), expect);
        let m = peft::attach(VitModel::<f32>::new(c.clone(), 0).unwrap(), &pc, 0).unwrap();
        assert_eq!(m.peft.as_ref().unwrap().num_parameters(), expect, "{pc:?}");
        assert_eq!(m.count_parameters(true), expect + head, "{pc:?}");
    }
    let base = VitModel::<f32>::new(c.clone(), 0).unwrap();
    let full = peft::attach(base.clone(), &PeftConfig::new(PeftMethod::Full), 0).unwrap();
    assert_eq!(full.count_parameters(true), base.count_parameters(false));
}

#[test]
fn merged_lora_matches_the_adapted_model() {
    let (m, _) = trained(&PeftConfig::lora(2), 25);
    let x = random_inputs(6, config().image_len());
    let adapted = m.forward_pixels(&x, 6).unwrap();
    let merged = peft::merge_lora(m).unwrap();
    assert!(merged.peft.is_none());
    let folded = merged.forward_pixels(&x, 6).unwrap();
    for (a, b) in adapted.data().iter().zip(folded.data()) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}
