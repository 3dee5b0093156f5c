//! Parameter-efficient adaptation of a frozen [`VitModel`].
//!
//! Four strategies share one attach/train/save lifecycle:
//!
//! * **LoRA**: `h = W0·x + (alpha/r)·B·A·x` on the query and value
//!   projections of every block, `A ~ N(0, 0.02²)`, `B = 0`.
//! * **Adapter**: a serial bottleneck `h = s + f(s·W_down)·W_up` after both the
//!   attention and the feed-forward sub-layer of every block, `W_up = 0`.
//! * **Prompt**: `p` trainable tokens per block. In deep mode each block sees
//!   `[CLS, P_i, E]` and the prompt outputs are dropped before the next block;
//!   shallow mode inserts a single prompt before the first block.
//! * **Full**: every backbone tensor is trainable.
//!
//! The classifier head is trainable under every method.

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::vit::VitModel;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftMethod {
    None,
    Lora,
    Adapter,
    Prompt,
    Full,
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftMethod::None => "none",
            PeftMethod::Lora => "lora",
            PeftMethod::Adapter => "adapter",
            PeftMethod::Prompt => "prompt",
            PeftMethod::Full => "full",
        })
    }
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PeftMethod::None,
            "lora" => PeftMethod::Lora,
            "adapter" => PeftMethod::Adapter,
            "prompt" => PeftMethod::Prompt,
            "full" => PeftMethod::Full,
            other => {
                return Err(Error::config(
                    "peft.method",
                    format!("unknown method `{other}` (lora|adapter|prompt|full|none)"),
                ))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptDepth {
    Deep,
    Shallow,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            _ => Err(Error::config("peft.adapter_activation", format!("unknown activation `{s}` (relu|gelu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

impl FromStr for PromptDepth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(PromptDepth::Deep),
            "shallow" => Ok(PromptDepth::Shallow),
            _ => Err(Error::config("peft.prompt_depth", format!("unknown depth `{s}` (deep|shallow)"))),
        }
    }
}

impl fmt::Display for PromptDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptDepth::Deep => "deep",
            PromptDepth::Shallow => "shallow",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub method: PeftMethod,
    pub rank: usize,
    /// `None` means alpha = rank, i.e. a LoRA scale of one.
    pub lora_alpha: Option<f64>,
    pub adapter_bottleneck: usize,
    pub adapter_activation: Activation,
    pub prompt_length: usize,
    pub prompt_depth: PromptDepth,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            method: PeftMethod::None,
            rank: 2,
            lora_alpha: None,
            adapter_bottleneck: 8,
            adapter_activation: Activation::Relu,
            prompt_length: 100,
            prompt_depth: PromptDepth::Deep,
        }
    }
}

impl PeftConfig {
    pub fn new(method: PeftMethod) -> Self {
        PeftConfig {
            method,
            ..Self::default()
        }
    }

    pub fn lora(rank: usize) -> Self {
        PeftConfig {
            rank,
            ..Self::new(PeftMethod::Lora)
        }
    }

    pub fn adapter(bottleneck: usize) -> Self {
        PeftConfig {
            adapter_bottleneck: bottleneck,
            ..Self::new(PeftMethod::Adapter)
        }
    }

    pub fn prompt(length: usize) -> Self {
        PeftConfig {
            prompt_length: length,
            ..Self::new(PeftMethod::Prompt)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            PeftMethod::Lora if self.rank == 0 => Err(Error::config("peft.rank", "must be >= 1")),
            PeftMethod::Lora if self.lora_alpha.is_some_and(|a| !(a > 0.0)) => {
                Err(Error::config("peft.lora_alpha", "must be positive"))
            }
            PeftMethod::Adapter if self.adapter_bottleneck == 0 => {
                Err(Error::config("peft.adapter_bottleneck", "must be >= 1"))
            }
            PeftMethod::Prompt if self.prompt_length == 0 => {
                Err(Error::config("peft.prompt_length", "must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    /// Closed-form size of the adaptation parameters (head excluded) for a
    /// model of width `d` and depth `layers`.
    pub fn delta_parameter_count(&self, d: usize, layers: usize) -> usize {
        match self.method {
            PeftMethod::Lora => 4 * layers * d * self.rank,
            PeftMethod::Adapter => 2 * (2 * d * self.adapter_bottleneck) * layers,
            PeftMethod::Prompt => match self.prompt_depth {
                PromptDepth::Deep => layers * self.prompt_length * d,
                PromptDepth::Shallow => self.prompt_length * d,
            },
            PeftMethod::None | PeftMethod::Full => 0,
        }
    }
}

/// Low-rank update `(alpha/r)·B·A` of one projection: `A` is `r×k`, `B` is
/// `d×r` for a `d×k` base weight.
#[derive(Clone, Debug)]
pub struct LoraDelta<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LoraLayer<T> {
    pub query: LoraDelta<T>,
    pub value: LoraDelta<T>,
}

/// Bottleneck residual: `down` is `d×r`, `up` is `r×d`.
#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdapterLayer<T> {
    pub attn: Adapter<T>,
    pub mlp: Adapter<T>,
}

/// Trainable tensors of the active adaptation method.
#[derive(Clone, Debug)]
pub struct PeftState<T> {
    pub config: PeftConfig,
    pub lora: Vec<LoraLayer<T>>,
    pub adapters: Vec<AdapterLayer<T>>,
    /// One `p×d` prompt per block (deep) or a single one (shallow).
    pub prompts: Vec<Tensor<T>>,
}

impl<T: Element> PeftState<T> {
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.lora.iter().enumerate() {
            f(&format!("peft.lora.{i}.query.a"), &l.query.a);
            f(&format!("peft.lora.{i}.query.b"), &l.query.b);
            f(&format!("peft.lora.{i}.value.a"), &l.value.a);
            f(&format!("peft.lora.{i}.value.b"), &l.value.b);
        }
        for (i, l) in self.adapters.iter().enumerate() {
            f(&format!("peft.adapter.{i}.attn.down"), &l.attn.down);
            f(&format!("peft.adapter.{i}.attn.up"), &l.attn.up);
            f(&format!("peft.adapter.{i}.mlp.down"), &l.mlp.down);
            f(&format!("peft.adapter.{i}.mlp.up"), &l.mlp.up);
        }
        for (i, p) in self.prompts.iter().enumerate() {
            f(&format!("peft.prompt.{i}"), p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.lora.iter_mut().enumerate() {
            f(&format!("peft.lora.{i}.query.a"), &mut l.query.a);
            f(&format!("peft.lora.{i}.query.b"), &mut l.query.b);
            f(&format!("peft.lora.{i}.value.a"), &mut l.value.a);
            f(&format!("peft.lora.{i}.value.b"), &mut l.value.b);
        }
        for (i, l) in self.adapters.iter_mut().enumerate() {
            f(&format!("peft.adapter.{i}.attn.down"), &mut l.attn.down);
            f(&format!("peft.adapter.{i}.attn.up"), &mut l.attn.up);
            f(&format!("peft.adapter.{i}.mlp.down"), &mut l.mlp.down);
            f(&format!("peft.adapter.{i}.mlp.up"), &mut l.mlp.up);
        }
        for (i, p) in self.prompts.iter_mut().enumerate() {
            f(&format!("peft.prompt.{i}"), p);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Prompt tokens seen by block `layer`, if any.
    pub fn prompt_for_layer(&self, layer: usize) -> Option<&Tensor<T>> {
        match self.config.prompt_depth {
            PromptDepth::Deep => self.prompts.get(layer),
            PromptDepth::Shallow if layer == 0 => self.prompts.first(),
            PromptDepth::Shallow => None,
        }
    }
}

/// `h = x·W0ᵀ + bias + (alpha/r)·(x·Aᵀ)·Bᵀ` inside a graph.
///
/// `x` is `rows×k`, `w0` is `d×k`, `a` is `r×k`, `b` is `d×r`.
pub fn lora_linear<T: Element>(
    g: &mut Graph<'_, T>,
    x: Var,
    w0: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scale: T,
) -> Result<Var> {
    let mut h = g.matmul_nt(x, w0)?;
    if let Some(bias) = bias {
        h = g.add_row(h, bias)?;
    }
    let ax = g.matmul_nt(x, a)?;
    let bax = g.matmul_nt(ax, b)?;
    let delta = if scale == T::one() { bax } else { g.scale(bax, scale) };
    g.add(h, delta)
}

/// Row-batch version of `h = W0·x + (alpha/r)·B·A·x` on plain tensors.
pub fn lora_forward<T: Element>(
    x: &Tensor<T>,
    w0: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let rank = a.shape()[0];
    let mut g = Graph::no_grad();
    let (vx, vw, va, vb) = (g.param(x), g.param(w0), g.param(a), g.param(b));
    let h = lora_linear(&mut g, vx, vw, None, va, vb, T::from_f64(alpha / rank as f64))?;
    Ok(g.to_tensor(h))
}

/// `h = s + f(s·W_down)·W_up` inside a graph.
pub fn adapter_block<T: Element>(
    g: &mut Graph<'_, T>,
    sublayer_out: Var,
    down: Var,
    up: Var,
    activation: Activation,
) -> Result<Var> {
    let z = g.matmul(sublayer_out, down)?;
    let z = match activation {
        Activation::Relu => g.relu(z),
        Activation::Gelu => g.gelu(z),
    };
    let r = g.matmul(z, up)?;
    g.add(sublayer_out, r)
}

pub fn adapter_forward<T: Element>(
    sublayer_out: &Tensor<T>,
    down: &Tensor<T>,
    up: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let (s, d, u) = (g.param(sublayer_out), g.param(down), g.param(up));
    let h = adapter_block(&mut g, s, d, u, activation)?;
    Ok(g.to_tensor(h))
}

/// Builds the block input `[CLS, P, E]` from `tokens[B×T×d]` laid out as
/// `[CLS, old prompt (old_len tokens), E]`. The old prompt positions are
/// discarded. With `prompt = None` the old prompt is only removed.
pub fn prompt_insert<T: Element>(
    g: &mut Graph<'_, T>,
    tokens: Var,
    old_len: usize,
    prompt: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let [batch, total, d] = shape[..] else {
        return Err(Error::shape("prompt_forward", format!("expected [B, T, d], got {shape:?}")));
    };
    if total < 1 + old_len + 1 {
        return Err(Error::shape(
            "prompt_forward",
            format!("{total} tokens cannot hold CLS, {old_len} prompts and patches"),
        ));
    }
    let cls = g.narrow(tokens, 1, 0, 1)?;
    let patches = g.narrow(tokens, 1, 1 + old_len, total - 1 - old_len)?;
    match prompt {
        Some(p) => {
            if g.shape(p).len() != 2 || g.shape(p)[1] != d {
                return Err(Error::shape(
                    "prompt_forward",
                    format!("prompt {:?} for width {d}", g.shape(p)),
                ));
            }
            let pb = g.expand_leading(p, batch)?;
            g.concat(&[cls, pb, patches], 1)
        }
        None if old_len == 0 => Ok(tokens),
        None => g.concat(&[cls, patches], 1),
    }
}

/// Plain-tensor version of [`prompt_insert`] for a layer input with no
/// previous prompt.
pub fn prompt_forward<T: Element>(tokens: &Tensor<T>, prompt: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let t = g.param(tokens);
    let p = prompt.map(|p| g.param(p));
    let out = prompt_insert(&mut g, t, 0, p)?;
    Ok(g.to_tensor(out))
}

/// Attaches a fresh adaptation state. Backbone tensors are frozen (unless the
/// method is `full`), the head is trainable, and at attach time the LoRA and
/// adapter deltas are exactly zero.
pub fn attach<T: Element>(mut model: VitModel<T>, config: &PeftConfig, seed: u64) -> Result<VitModel<T>> {
    if model.peft.is_some() {
        return Err(Error::Contract("a PEFT state is already attached".into()));
    }
    config.validate()?;
    let vc = model.config.clone();
    let (d, layers) = (vc.embed_dim, vc.depth);
    let mut rng = rng::stream(seed, Domain::Init, 0x9EF7, 0);
    let trainable = |t: Tensor<T>| t.with_requires_grad(true);
    let mut state = PeftState {
        config: config.clone(),
        lora: Vec::new(),
        adapters: Vec::new(),
        prompts: Vec::new(),
    };
    match config.method {
        PeftMethod::Lora => {
            let r = config.rank;
            for _ in 0..layers {
                let mut delta = || LoraDelta {
                    a: trainable(Tensor::randn(&[r, d], 0.02, &mut rng)),
                    b: trainable(Tensor::zeros(&[d, r])),
                };
                let query = delta();
                let value = delta();
                state.lora.push(LoraLayer { query, value });
            }
        }
        PeftMethod::Adapter => {
            let r = config.adapter_bottleneck;
            let std = (2.0 / d as f64).sqrt();
            for _ in 0..layers {
                let mut adapter = || Adapter {
                    down: trainable(Tensor::randn(&[d, r], std, &mut rng)),
                    up: trainable(Tensor::zeros(&[r, d])),
                };
                let attn = adapter();
                let mlp = adapter();
                state.adapters.push(AdapterLayer { attn, mlp });
            }
        }
        PeftMethod::Prompt => {
            let count = match config.prompt_depth {
                PromptDepth::Deep => layers,
                PromptDepth::Shallow => 1,
            };
            for _ in 0..count {
                state
                    .prompts
                    .push(trainable(Tensor::randn(&[config.prompt_length, d], 0.02, &mut rng)));
            }
        }
        PeftMethod::None | PeftMethod::Full => {}
    }
    let full = config.method == PeftMethod::Full;
    model.visit_backbone_mut(&mut |name, t| {
        t.set_requires_grad(full || VitModel::<T>::is_head(name));
    });
    model.peft = Some(state);
    Ok(model)
}

/// Folds LoRA deltas into the base projections and returns a plain model.
pub fn merge_lora<T: Element>(mut model: VitModel<T>) -> Result<VitModel<T>> {
    let state = match model.peft.take() {
        Some(s) if s.config.method == PeftMethod::Lora => s,
        Some(s) => {
            let method = s.config.method;
            model.peft = Some(s);
            return Err(Error::Contract(format!("merge_lora called on a `{method}` model")));
        }
        None => return Err(Error::Contract("merge_lora called on a model without LoRA".into())),
    };
    let scale = state.config.lora_scale();
    for (block, layer) in model.blocks.iter_mut().zip(&state.lora) {
        fold(&mut block.query.weight, &layer.query, scale);
        fold(&mut block.value.weight, &layer.value, scale);
    }
    model.visit_backbone_mut(&mut |_, t| t.set_requires_grad(false));
    Ok(model)
}

fn fold<T: Element>(w0: &mut Tensor<T>, delta: &LoraDelta<T>, scale: f64) {
    let (d, k) = (w0.shape()[0], w0.shape()[1]);
    let r = delta.a.shape()[0];
    if delta.b.data().iter().all(|v| *v == T::zero()) {
        return;
    }
    let mut ba = vec![T::zero(); d * k];
    crate::tensor::matmul_into(delta.b.data(), delta.a.data(), &mut ba, d, r, k, false);
    let s = T::from_f64(scale);
    for (w, u) in w0.data_mut().iter_mut().zip(ba) {
        *w = *w + s * u;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn lora_forward_examples() {
        let x = m(1, 2, &[3.0, 5.0]);
        let w0 = m(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let a = m(1, 2, &[1.0, 0.0]);
        let b = m(2, 1, &[1.0, 1.0]);
        // W0·x = (13, -0.5); delta = (3, 3)
        let h = lora_forward(&x, &w0, &a, &b, 1.0).unwrap();
        assert_eq!(h.data(), &[16.0, 2.5]);

        let zero_b = m(2, 1, &[0.0, 0.0]);
        let h = lora_forward(&x, &w0, &a, &zero_b, 1.0).unwrap();
        assert_eq!(h.data(), &[13.0, -0.5]);

        let zero_w = m(2, 2, &[0.0; 4]);
        let h = lora_forward(&x, &zero_w, &a, &b, 1.0).unwrap();
        assert_eq!(h.data(), &[3.0, 3.0]);
    }

    #[test]
    fn adapter_forward_examples() {
        let s = m(1, 1, &[2.0]);
        let one = m(1, 1, &[1.0]);
        let h = adapter_forward(&s, &one, &one, Activation::Relu).unwrap();
        assert_eq!(h.data(), &[4.0]);

        let zero = m(1, 1, &[0.0]);
        let h = adapter_forward(&s, &one, &zero, Activation::Relu).unwrap();
        assert_eq!(h.data(), &[2.0]);

        // negative pre-activation is cut by ReLU
        let neg = m(1, 1, &[-3.0]);
        let h = adapter_forward(&s, &neg, &one, Activation::Relu).unwrap();
        assert_eq!(h.data(), &[2.0]);
    }

    #[test]
    fn prompt_forward_layout() {
        let tokens = Tensor::new(vec![1, 3, 2], vec![9.0, 9.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = m(2, 2, &[5.0, 5.0, 6.0, 6.0]);
        let out = prompt_forward(&tokens, Some(&p)).unwrap();
        assert_eq!(out.shape(), &[1, 5, 2]);
        assert_eq!(out.data(), &[9.0, 9.0, 5.0, 5.0, 6.0, 6.0, 1.0, 1.0, 2.0, 2.0]);
        let same = prompt_forward(&tokens, None).unwrap();
        assert!(same.bit_eq(&tokens));
    }

    #[test]
    fn config_validation() {
        assert!(PeftConfig::lora(0).validate().is_err());
        assert!(PeftConfig::prompt(0).validate().is_err());
        assert!(PeftConfig::adapter(0).validate().is_err());
        assert!(PeftConfig::lora(2).validate().is_ok());
        assert!("bogus".parse::<PeftMethod>().is_err());
        assert_eq!("adapter".parse::<PeftMethod>().unwrap(), PeftMethod::Adapter);
    }

    #[test]
    fn double_attach_is_rejected() {
        let cfg = VitConfig {
            depth: 1,
            ..VitConfig::default()
        };
        let model = VitModel::<f32>::new(cfg, 1).unwrap();
        let model = attach(model, &PeftConfig::lora(2), 2).unwrap();
        assert!(matches!(
            attach(model, &PeftConfig::lora(2), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn merge_requires_lora() {
        let cfg = VitConfig {
            depth: 1,
            ..VitConfig::default()
        };
        let plain = VitModel::<f32>::new(cfg.clone(), 1).unwrap();
        assert!(merge_lora(plain).is_err());
        let prompted = attach(VitModel::<f32>::new(cfg, 1).unwrap(), &PeftConfig::prompt(3), 0).unwrap();
        assert!(merge_lora(prompted).is_err());
    }
}
