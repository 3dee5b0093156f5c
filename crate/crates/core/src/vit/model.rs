use super::VitConfig;
use crate::error::{Error, Result};
use crate::peft::{self, PeftMethod, PeftState};
use crate::rng::{self, Domain};
use crate::tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Affine map `y = x·Wᵀ + b` with `W` stored `out×in`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[out, inp], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn apply<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Vision Transformer classifier: patch embedding, `[CLS]` token, learned
/// positions, pre-norm blocks, final norm and a linear head on `[CLS]`.
#[derive(Clone, Debug)]
pub struct VitModel<T> {
    pub config: VitConfig,
    pub patch: Linear<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub head: Linear<T>,
    pub peft: Option<PeftState<T>>,
}

macro_rules! visit_block {
    ($b:expr, $i:expr, $f:expr, [$($r:tt)*]) => {{
        let p = format!("blocks.{}", $i);
        $f(&format!("{p}.ln1.gain"), $($r)* $b.ln1_gain);
        $f(&format!("{p}.ln1.bias"), $($r)* $b.ln1_bias);
        $f(&format!("{p}.attn.query.weight"), $($r)* $b.query.weight);
        $f(&format!("{p}.attn.query.bias"), $($r)* $b.query.bias);
        $f(&format!("{p}.attn.key.weight"), $($r)* $b.key.weight);
        $f(&format!("{p}.attn.key.bias"), $($r)* $b.key.bias);
        $f(&format!("{p}.attn.value.weight"), $($r)* $b.value.weight);
        $f(&format!("{p}.attn.value.bias"), $($r)* $b.value.bias);
        $f(&format!("{p}.attn.proj.weight"), $($r)* $b.proj.weight);
        $f(&format!("{p}.attn.proj.bias"), $($r)* $b.proj.bias);
        $f(&format!("{p}.ln2.gain"), $($r)* $b.ln2_gain);
        $f(&format!("{p}.ln2.bias"), $($r)* $b.ln2_bias);
        $f(&format!("{p}.mlp.fc1.weight"), $($r)* $b.fc1.weight);
        $f(&format!("{p}.mlp.fc1.bias"), $($r)* $b.fc1.bias);
        $f(&format!("{p}.mlp.fc2.weight"), $($r)* $b.fc2.weight);
        $f(&format!("{p}.mlp.fc2.bias"), $($r)* $b.fc2.bias);
    }};
}

impl<T: Element> VitModel<T> {
    /// Randomly initialised model; every tensor trainable.
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, 0x717, 0);
        let (d, hidden) = (config.embed_dim, config.mlp_hidden());
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                query: Linear::init(d, d, &mut rng),
                key: Linear::init(d, d, &mut rng),
                value: Linear::init(d, d, &mut rng),
                proj: Linear::init(d, d, &mut rng),
                ln2_gain: Tensor::full(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                fc1: Linear::init(hidden, d, &mut rng),
                fc2: Linear::init(d, hidden, &mut rng),
            })
            .collect();
        let mut model = VitModel {
            patch: Linear::init(d, config.patch_dim(), &mut rng),
            cls_token: Tensor::randn(&[1, d], 0.02, &mut rng),
            pos_embed: Tensor::randn(&[1 + config.num_patches(), d], 0.02, &mut rng),
            blocks,
            norm_gain: Tensor::full(&[d], T::one()),
            norm_bias: Tensor::zeros(&[d]),
            head: Linear {
                weight: Tensor::randn(&[config.num_classes, d], 0.02, &mut rng),
                bias: Tensor::zeros(&[config.num_classes]),
            },
            config,
            peft: None,
        };
        model.visit_backbone_mut(&mut |_, t| t.set_requires_grad(true));
        Ok(model)
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Backbone tensors (everything except the PEFT state), in a fixed order.
    pub fn visit_backbone(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("patch.weight", &self.patch.weight);
        f("patch.bias", &self.patch.bias);
        f("cls_token", &self.cls_token);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_block!(b, i, |n: &str, t: &Tensor<T>| f(n, t), [&]);
        }
        f("norm.gain", &self.norm_gain);
        f("norm.bias", &self.norm_bias);
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    pub fn visit_backbone_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("patch.weight", &mut self.patch.weight);
        f("patch.bias", &mut self.patch.bias);
        f("cls_token", &mut self.cls_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_block!(b, i, |n: &str, t: &mut Tensor<T>| f(n, t), [&mut]);
        }
        f("norm.gain", &mut self.norm_gain);
        f("norm.bias", &mut self.norm_bias);
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    /// Every tensor: backbone first, then PEFT state.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_backbone(f);
        if let Some(p) = &self.peft {
            p.visit(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_backbone_mut(f);
        if let Some(p) = &mut self.peft {
            p.visit_mut(f);
        }
    }

    pub fn peft_method(&self) -> PeftMethod {
        self.peft.as_ref().map_or(PeftMethod::None, |p| p.config.method)
    }

    /// Exact parameter count; with `trainable_only` only tensors that
    /// currently require grad are counted.
    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            if !trainable_only || t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }

    /// Marks every backbone tensor frozen (no PEFT attached afterwards means
    /// zero trainable parameters).
    pub fn freeze(&mut self) {
        self.visit_params_mut(&mut |_, t| t.set_requires_grad(false));
    }

    /// SHA-256 over the frozen trunk: every backbone tensor except the head.
    pub fn backbone_sha256(&self) -> String {
        let mut h = Sha256::new();
        self.visit_backbone(&mut |name, t| {
            if Self::is_head(name) {
                return;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces the classifier head with a fresh one for `num_classes`.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::config("vit.num_classes", "must be positive"));
        }
        let mut rng = rng::stream(seed, Domain::Init, 0x4EAD, 0);
        let d = self.config.embed_dim;
        self.head = Linear {
            weight: Tensor::randn(&[num_classes, d], 0.02, &mut rng).with_requires_grad(true),
            bias: Tensor::zeros(&[num_classes]).with_requires_grad(true),
        };
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Tokens per block input: `[CLS]`, prompts (if any), patches. Shallow
    /// prompts are carried through every block, so the count is the same for
    /// all layers.
    pub fn tokens_per_layer(&self) -> usize {
        let prompts = match &self.peft {
            Some(p) if p.config.method == PeftMethod::Prompt => p.config.prompt_length,
            _ => 0,
        };
        1 + prompts + self.config.num_patches()
    }

    /// Rearranges `[B, C, H, W]` pixels into `[B·N, C·P·P]` patch rows.
    pub fn patchify(&self, pixels: &[f32], batch: usize) -> Result<Vec<T>> {
        let c = &self.config;
        if pixels.len() != batch * c.image_len() || batch == 0 {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} pixels for {batch} images of {}x{}x{}",
                    pixels.len(),
                    c.channels,
                    c.image_size,
                    c.image_size
                ),
            ));
        }
        let (s, p, grid) = (c.image_size, c.patch_size, c.grid());
        let mut out = Vec::with_capacity(pixels.len());
        for b in 0..batch {
            let img = &pixels[b * c.image_len()..(b + 1) * c.image_len()];
            for gy in 0..grid {
                for gx in 0..grid {
                    for ch in 0..c.channels {
                        for py in 0..p {
                            let row = ch * s * s + (gy * p + py) * s + gx * p;
                            out.extend(img[row..row + p].iter().map(|&v| T::from_f64(v as f64)));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records the forward pass and returns the `[batch × classes]` logits.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a, T>, pixels: &[f32], batch: usize) -> Result<Var> {
        self.logits_inner(g, pixels, batch, None)
    }

    /// Token states `[batch, T, d]` after the last block.
    fn trunk<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        pixels: &[f32],
        batch: usize,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let c = &self.config;
        let (d, n) = (c.embed_dim, c.num_patches());
        let patches = self.patchify(pixels, batch)?;
        let x = g.constant(&[batch * n, c.patch_dim()], patches)?;
        let e = self.patch.apply(g, x)?;
        let e = g.reshape(e, &[batch, n, d])?;
        let cls = g.param(&self.cls_token);
        let cls = g.expand_leading(cls, batch)?;
        let x = g.concat(&[cls, e], 1)?;
        let pos = g.param(&self.pos_embed);
        let pos = g.expand_leading(pos, batch)?;
        let mut x = g.add(x, pos)?;

        let peft = self.peft.as_ref();
        let prompt_mode = peft.filter(|p| p.config.method == PeftMethod::Prompt);
        let mut carried = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(state) = prompt_mode {
                match state.config.prompt_depth {
                    peft::PromptDepth::Deep => {
                        let p = g.param(&state.prompts[i]);
                        x = peft::prompt_insert(g, x, carried, Some(p))?;
                        carried = state.config.prompt_length;
                    }
                    peft::PromptDepth::Shallow if i == 0 => {
                        let p = g.param(&state.prompts[0]);
                        x = peft::prompt_insert(g, x, 0, Some(p))?;
                        carried = state.config.prompt_length;
                    }
                    peft::PromptDepth::Shallow => {}
                }
            }
            x = self.block_forward(g, i, block, x, attention.as_deref_mut())?;
        }
        Ok(x)
    }

    fn logits_inner<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        pixels: &[f32],
        batch: usize,
        attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let x = self.trunk(g, pixels, batch, attention)?;
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[batch, d])?;
        let (ng, nb) = (g.param(&self.norm_gain), g.param(&self.norm_bias));
        let h = g.layer_norm(cls, ng, nb, LN_EPS)?;
        self.head.apply(g, h)
    }

    fn block_forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        index: usize,
        b: &'a Block<T>,
        x: Var,
        attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        let (batch, tokens, d) = (shape[0], shape[1], shape[2]);
        let (heads, hd) = (c.num_heads, c.head_dim());
        let rows = batch * tokens;
        let flat = g.reshape(x, &[rows, d])?;

        let (lg, lb) = (g.param(&b.ln1_gain), g.param(&b.ln1_bias));
        let h = g.layer_norm(flat, lg, lb, LN_EPS)?;
        let lora = self
            .peft
            .as_ref()
            .filter(|p| p.config.method == PeftMethod::Lora)
            .map(|p| (&p.lora[index], T::from_f64(p.config.lora_scale())));
        let (q, v) = match lora {
            Some((layer, scale)) => {
                let q = self.lora_projection(g, h, &b.query, &layer.query, scale)?;
                let v = self.lora_projection(g, h, &b.value, &layer.value, scale)?;
                (q, v)
            }
            None => (b.query.apply(g, h)?, b.value.apply(g, h)?),
        };
        let k = b.key.apply(g, h)?;

        let split = |g: &mut Graph<'a, T>, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[batch, tokens, heads, hd])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[batch * heads, tokens, hd])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (hd as f64).sqrt()));
        let probs = g.softmax(scores);
        if let Some(a) = attention {
            a.push(probs);
        }
        let o = g.batch_matmul(probs, v, false)?;
        let o = g.reshape(o, &[batch, heads, tokens, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[rows, d])?;
        let mut a = b.proj.apply(g, o)?;

        let adapters = self
            .peft
            .as_ref()
            .filter(|p| p.config.method == PeftMethod::Adapter)
            .map(|p| (&p.adapters[index], p.config.adapter_activation));
        if let Some((layer, act)) = adapters {
            let (dn, up) = (g.param(&layer.attn.down), g.param(&layer.attn.up));
            a = peft::adapter_block(g, a, dn, up, act)?;
        }
        let x1 = g.add(flat, a)?;

        let (lg, lb) = (g.param(&b.ln2_gain), g.param(&b.ln2_bias));
        let h2 = g.layer_norm(x1, lg, lb, LN_EPS)?;
        let m = b.fc1.apply(g, h2)?;
        let m = g.gelu(m);
        let mut m = b.fc2.apply(g, m)?;
        if let Some((layer, act)) = adapters {
            let (dn, up) = (g.param(&layer.mlp.down), g.param(&layer.mlp.up));
            m = peft::adapter_block(g, m, dn, up, act)?;
        }
        let out = g.add(x1, m)?;
        g.reshape(out, &[batch, tokens, d])
    }

    fn lora_projection<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        h: Var,
        base: &'a Linear<T>,
        delta: &'a peft::LoraDelta<T>,
        scale: T,
    ) -> Result<Var> {
        let w = g.param(&base.weight);
        let bias = g.param(&base.bias);
        let a = g.param(&delta.a);
        let bm = g.param(&delta.b);
        peft::lora_linear(g, h, w, Some(bias), a, bm, scale)
    }

    /// Inference on `[batch, C, H, W]` pixels; returns `[batch, classes]`.
    pub fn forward_pixels(&self, pixels: &[f32], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let out = self.logits(&mut g, pixels, batch)?;
        Ok(g.to_tensor(out))
    }

    /// Inference on an image tensor of shape `[batch, C, H, W]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "images {s:?} do not match [B, {}, {}, {}]",
                    c.channels, c.image_size, c.image_size
                ),
            ));
        }
        let pixels: Vec<f32> = images.data().iter().map(|v| v.as_f64() as f32).collect();
        self.forward_pixels(&pixels, s[0])
    }

    /// Per-block attention probabilities, each `[batch·heads, T, T]`.
    pub fn attention_maps(&self, pixels: &[f32], batch: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::no_grad();
        let mut maps = Vec::new();
        self.logits_inner(&mut g, pixels, batch, Some(&mut maps))?;
        Ok(maps.into_iter().map(|v| g.to_tensor(v)).collect())
    }

    /// Top-1 class per image.
    pub fn predict_pixels(&self, pixels: &[f32], batch: usize) -> Result<Vec<usize>> {
        let logits = self.forward_pixels(pixels, batch)?;
        Ok(argmax_rows(logits.data(), self.config.num_classes))
    }

    /// Mean of the final token states, `[batch, d]`.
    pub fn features(&self, pixels: &[f32], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = self.trunk(&mut g, pixels, batch, None)?;
        let (tokens, d) = (g.shape(x)[1], self.config.embed_dim);
        let scale = T::from_f64(1.0 / tokens as f64);
        let mut out = vec![T::zero(); batch * d];
        for (o, img) in out.chunks_exact_mut(d).zip(g.value(x).chunks_exact(tokens * d)) {
            for tok in img.chunks_exact(d) {
                for (a, &v) in o.iter_mut().zip(tok) {
                    *a = *a + v;
                }
            }
            for a in o.iter_mut() {
                *a = *a * scale;
            }
        }
        Tensor::new(vec![batch, d], out)
    }

    /// A frozen copy keeping only the first `depth` blocks and no PEFT state.
    pub fn truncated(&self, depth: usize) -> Result<VitModel<T>> {
        if depth == 0 || depth > self.config.depth {
            return Err(Error::config("vit.depth", format!("cannot keep {depth} of {} blocks", self.config.depth)));
        }
        let mut m = self.clone();
        m.peft = None;
        m.blocks.truncate(depth);
        m.config.depth = depth;
        m.freeze();
        Ok(m)
    }

    /// Same model in another element type.
    pub fn cast<U: Element>(&self) -> VitModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        VitModel {
            config: self.config.clone(),
            patch: lin(&self.patch),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    query: lin(&b.query),
                    key: lin(&b.key),
                    value: lin(&b.value),
                    proj: lin(&b.proj),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            norm_gain: self.norm_gain.cast(),
            norm_bias: self.norm_bias.cast(),
            head: lin(&self.head),
            peft: self.peft.as_ref().map(|p| PeftState {
                config: p.config.clone(),
                lora: p
                    .lora
                    .iter()
                    .map(|l| peft::LoraLayer {
                        query: peft::LoraDelta {
                            a: l.query.a.cast(),
                            b: l.query.b.cast(),
                        },
                        value: peft::LoraDelta {
                            a: l.value.a.cast(),
                            b: l.value.b.cast(),
                        },
                    })
                    .collect(),
                adapters: p
                    .adapters
                    .iter()
                    .map(|a| peft::AdapterLayer {
                        attn: peft::Adapter {
                            down: a.attn.down.cast(),
                            up: a.attn.up.cast(),
                        },
                        mlp: peft::Adapter {
                            down: a.mlp.down.cast(),
                            up: a.mlp.up.cast(),
                        },
                    })
                    .collect(),
                prompts: p.prompts.iter().map(|t| t.cast()).collect(),
            }),
        }
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Element>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{attach, PeftConfig};

    fn small() -> VitConfig {
        VitConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 5,
        }
    }

    fn pixels(n: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, Domain::Data, 0, 0);
        (0..n).map(|_| r.random::<f32>()).collect()
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = VitModel::<f32>::new(small(), 3).unwrap();
        let x = pixels(2 * 192, 1);
        let a = m.forward_pixels(&x, 2).unwrap();
        let b = m.forward_pixels(&x, 2).unwrap();
        assert_eq!(a.shape(), &[2, 5]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let m = VitModel::<f32>::new(small(), 3).unwrap();
        assert!(matches!(m.forward_pixels(&[0.0; 10], 1), Err(Error::Shape { .. })));
        let bad = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(m.forward(&bad).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = VitModel::<f64>::new(small(), 3).unwrap();
        let maps = m.attention_maps(&pixels(192, 2), 1).unwrap();
        assert_eq!(maps.len(), 2);
        for map in maps {
            let t = *map.shape().last().unwrap();
            for row in map.data().chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prompt_token_count() {
        let m = VitModel::<f32>::new(small(), 3).unwrap();
        let m = attach(m, &PeftConfig::prompt(7), 1).unwrap();
        assert_eq!(m.tokens_per_layer(), 1 + 7 + 4);
        let maps = m.attention_maps(&pixels(192, 2), 1).unwrap();
        assert_eq!(maps[1].shape(), &[2, 12, 12]);
    }

    #[test]
    fn backbone_hash_ignores_head() {
        let mut m = VitModel::<f32>::new(small(), 3).unwrap();
        let before = m.backbone_sha256();
        m.head.bias.data_mut()[0] = 1.0;
        assert_eq!(before, m.backbone_sha256());
        m.norm_bias.data_mut()[0] = 1.0;
        assert_ne!(before, m.backbone_sha256());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax_rows(&[1.0f32, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}
