//! Minimal ViT backbone: patch embedding, class token, pre-LN transformer
//! layers with multi-head self-attention, and a linear task head.
//!
//! Every layer exposes its attention internals through [`AttentionRecord`];
//! token slots are position-stable within a layer: class token at index 0,
//! prompts at 1..=N, image tokens after that.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub patch_size: usize,
    /// Token dimension D.
    pub dim: usize,
    /// Head count.
    pub heads: usize,
    /// Transformer layer count.
    pub layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Backbone init seed (the stand-in for pre-trained weights).
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

impl ModelConfig {
    /// Desk-scale default: 16x16 single-channel images, patch 4 (M=16),
    /// D=32, 4 heads, 4 layers.
    pub fn desk_default() -> Self {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            dim: 32,
            heads: 4,
            layers: 4,
            mlp_ratio: 2,
            num_classes: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("need at least one layer"));
        }
        if self.num_classes == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("num_classes, channels, mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Image-token count M.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attention scale 1/sqrt(D/N_h).
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Per-layer projection and MLP weights. Frozen after init.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

impl LayerParams {
    fn init(dim: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        let hidden = dim * mlp_ratio;
        let xavier = |rows: usize, cols: usize, rng: &mut Rng| {
            let mut t = Tensor::zeros(vec![rows, cols]);
            t.fill_uniform(rng, (6.0 / (rows + cols) as f64).sqrt());
            t
        };
        LayerParams {
            w_q: xavier(dim, dim, rng),
            b_q: Tensor::zeros(vec![1, dim]),
            w_k: xavier(dim, dim, rng),
            b_k: Tensor::zeros(vec![1, dim]),
            w_v: xavier(dim, dim, rng),
            b_v: Tensor::zeros(vec![1, dim]),
            w_o: xavier(dim, dim, rng),
            b_o: Tensor::zeros(vec![1, dim]),
            ln1_gain: Tensor::full(vec![1, dim], 1.0),
            ln1_bias: Tensor::zeros(vec![1, dim]),
            ln2_gain: Tensor::full(vec![1, dim], 1.0),
            ln2_bias: Tensor::zeros(vec![1, dim]),
            w_fc1: xavier(dim, hidden, rng),
            b_fc1: Tensor::zeros(vec![1, hidden]),
            w_fc2: xavier(hidden, dim, rng),
            b_fc2: Tensor::zeros(vec![1, dim]),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        f("w_q", &self.w_q);
        f("b_q", &self.b_q);
        f("w_k", &self.w_k);
        f("b_k", &self.b_k);
        f("w_v", &self.w_v);
        f("b_v", &self.b_v);
        f("w_o", &self.w_o);
        f("b_o", &self.b_o);
        f("ln1_gain", &self.ln1_gain);
        f("ln1_bias", &self.ln1_bias);
        f("ln2_gain", &self.ln2_gain);
        f("ln2_bias", &self.ln2_bias);
        f("w_fc1", &self.w_fc1);
        f("b_fc1", &self.b_fc1);
        f("w_fc2", &self.w_fc2);
        f("b_fc2", &self.b_fc2);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor)) {
        f("w_q", &mut self.w_q);
        f("b_q", &mut self.b_q);
        f("w_k", &mut self.w_k);
        f("b_k", &mut self.b_k);
        f("w_v", &mut self.w_v);
        f("b_v", &mut self.b_v);
        f("w_o", &mut self.w_o);
        f("b_o", &mut self.b_o);
        f("ln1_gain", &mut self.ln1_gain);
        f("ln1_bias", &mut self.ln1_bias);
        f("ln2_gain", &mut self.ln2_gain);
        f("ln2_bias", &mut self.ln2_bias);
        f("w_fc1", &mut self.w_fc1);
        f("b_fc1", &mut self.b_fc1);
        f("w_fc2", &mut self.w_fc2);
        f("b_fc2", &mut self.b_fc2);
    }
}

/// Frozen backbone: embedding weights plus L transformer layers, all
/// deterministically initialised from the config seed.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
}

impl Backbone {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(config.seed);
        let d = config.dim;
        let patch_in = config.patch_size * config.patch_size * config.channels;
        let m = config.num_patches();

        let mut patch_proj = Tensor::zeros(vec![patch_in, d]);
        patch_proj.fill_uniform(&mut rng, (6.0 / (patch_in + d) as f64).sqrt());
        let mut cls_token = Tensor::zeros(vec![1, d]);
        cls_token.fill_uniform(&mut rng, 0.02);
        // Frozen-random backbone: positional information must be baked in at
        // init with magnitude comparable to the patch content, otherwise
        // position-coded tasks are unreadable from the class token.
        let mut pos_embed = Tensor::zeros(vec![m, d]);
        pos_embed.fill_uniform(&mut rng, 0.5);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(d, config.mlp_ratio, &mut rng))
            .collect();

        Ok(Backbone {
            config,
            patch_proj,
            patch_bias: Tensor::zeros(vec![1, d]),
            cls_token,
            pos_embed,
            layers,
        })
    }

    /// Iterates all backbone tensors with stable hierarchical names.
    pub fn visit(&self, mut f: impl FnMut(String, &Tensor)) {
        f("embed.patch_proj".into(), &self.patch_proj);
        f("embed.patch_bias".into(), &self.patch_bias);
        f("embed.cls_token".into(), &self.cls_token);
        f("embed.pos_embed".into(), &self.pos_embed);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(|name, t| f(format!("layer{l}.{name}"), t));
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("embed.patch_proj".into(), &mut self.patch_proj);
        f("embed.patch_bias".into(), &mut self.patch_bias);
        f("embed.cls_token".into(), &mut self.cls_token);
        f("embed.pos_embed".into(), &mut self.pos_embed);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(|name, t| f(format!("layer{l}.{name}"), t));
        }
    }
}

/// Ordered [class | prompt | image] token block.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub cls: Tensor,
    pub prompts: Tensor,
    pub images: Tensor,
}

/// Slot role at a sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    Cls,
    Prompt(usize),
    Image(usize),
}

impl TokenSequence {
    pub fn num_prompts(&self) -> usize {
        self.prompts.rows() * usize::from(self.prompts.numel() > 0)
    }

    pub fn num_images(&self) -> usize {
        self.images.rows()
    }

    pub fn len(&self) -> usize {
        1 + self.num_prompts() + self.num_images()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn role_of(&self, idx: usize) -> SlotRole {
        let n = self.num_prompts();
        if idx == 0 {
            SlotRole::Cls
        } else if idx <= n {
            SlotRole::Prompt(idx - 1)
        } else {
            SlotRole::Image(idx - 1 - n)
        }
    }
}

/// Per-layer, per-head attention internals of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub n_prompts: usize,
    pub n_images: usize,
    /// Raw pre-softmax logits per head, T x T. Empty in class-row capture mode.
    pub logits: Vec<Tensor>,
    /// Normalised weights per head, T x T. Empty in class-row capture mode.
    pub weights: Vec<Tensor>,
    /// Head-mean class-token attention over image slots (length M).
    pub cls_image_mean: Vec<f64>,
    /// Class-token query per head (d_h each); captured in full mode for the
    /// decomposition checks.
    pub cls_query: Vec<Vec<f64>>,
}

/// How much attention detail a forward pass keeps around.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnCapture {
    /// Logits, weights and class queries for each head.
    Full,
    /// Only the head-mean class row over image slots (enough for AR).
    ClassRow,
}

/// Token block on the tape; prompt slots are absent either when N=0 or after
/// a layer dropped its prompt outputs.
#[derive(Clone, Copy, Debug)]
pub struct SeqVars {
    pub cls: Var,
    pub prompts: Option<Var>,
    pub images: Var,
}

impl SeqVars {
    pub fn num_prompts(&self, tape: &Tape) -> usize {
        self.prompts.map_or(0, |p| tape.shape(p).0)
    }
}

/// Learnable prompt offsets injected inside a layer (EXPRESS-style hooks).
#[derive(Clone, Copy, Debug, Default)]
pub struct PromptHooks {
    pub pre_ln: Option<Var>,
    pub pre_qkv: Option<Var>,
    pub post_msa: Option<Var>,
}

/// Tape handles for one layer's frozen parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_fc1: Var,
    pub b_fc1: Var,
    pub w_fc2: Var,
    pub b_fc2: Var,
}

impl BoundLayer {
    pub fn bind(tape: &mut Tape, p: &LayerParams) -> Result<Self> {
        Ok(BoundLayer {
            w_q: tape.leaf(&p.w_q)?,
            b_q: tape.leaf(&p.b_q)?,
            w_k: tape.leaf(&p.w_k)?,
            b_k: tape.leaf(&p.b_k)?,
            w_v: tape.leaf(&p.w_v)?,
            b_v: tape.leaf(&p.b_v)?,
            w_o: tape.leaf(&p.w_o)?,
            b_o: tape.leaf(&p.b_o)?,
            ln1_gain: tape.leaf(&p.ln1_gain)?,
            ln1_bias: tape.leaf(&p.ln1_bias)?,
            ln2_gain: tape.leaf(&p.ln2_gain)?,
            ln2_bias: tape.leaf(&p.ln2_bias)?,
            w_fc1: tape.leaf(&p.w_fc1)?,
            b_fc1: tape.leaf(&p.b_fc1)?,
            w_fc2: tape.leaf(&p.w_fc2)?,
            b_fc2: tape.leaf(&p.b_fc2)?,
        })
    }
}

/// Extracts non-overlapping patches of `image` ([H, W, C]) into an
/// M x (P*P*C) matrix, grid-ordered by rows, each patch flattened in
/// (py, px, c) order.
pub fn extract_patches(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if image.shape() != [cfg.image_height, cfg.image_width, cfg.channels] {
        return Err(Error::ShapeMismatch {
            op: "extract_patches",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.image_height, cfg.image_width, cfg.channels],
        });
    }
    let p = cfg.patch_size;
    let (w, c) = (cfg.image_width, cfg.channels);
    let grid_w = w / p;
    let m = cfg.num_patches();
    let mut out = vec![0.0; m * p * p * c];
    let v = image.values();
    for patch in 0..m {
        let (gy, gx) = (patch / grid_w, patch % grid_w);
        let dst = &mut out[patch * p * p * c..(patch + 1) * p * p * c];
        let mut o = 0;
        for py in 0..p {
            for px in 0..p {
                for ch in 0..c {
                    dst[o] = v[((gy * p + py) * w + (gx * p + px)) * c + ch];
                    o += 1;
                }
            }
        }
    }
    Tensor::new(vec![m, p * p * c], out)
}

/// Patch-embeds an image: projected patches get the positional embedding,
/// the class token is prepended, prompt slots stay empty (and never receive
/// positional embedding).
pub fn embed(image: &Tensor, backbone: &Backbone) -> Result<TokenSequence> {
    let cfg = &backbone.config;
    let patches = extract_patches(image, cfg)?;
    let m = cfg.num_patches();
    let d = cfg.dim;
    let pin = patches.cols();
    let mut tokens = vec![0.0; m * d];
    crate::tensor::matmul_into(patches.values(), backbone.patch_proj.values(), &mut tokens, m, pin, d);
    for r in 0..m {
        for i in 0..d {
            tokens[r * d + i] += backbone.patch_bias.values()[i] + backbone.pos_embed.values()[r * d + i];
        }
    }
    let images = Tensor::new(vec![m, d], tokens)?;
    if !images.is_finite() {
        return Err(Error::NonFinite { op: "embed" });
    }
    Ok(TokenSequence {
        cls: backbone.cls_token.clone(),
        prompts: Tensor::zeros(vec![0, d]),
        images,
    })
}

fn concat_seq(tape: &mut Tape, seq: &SeqVars) -> Result<Var> {
    match seq.prompts {
        Some(p) => tape.concat_rows(&[seq.cls, p, seq.images]),
        None => tape.concat_rows(&[seq.cls, seq.images]),
    }
}

fn split_seq(tape: &mut Tape, x: Var, n_prompts: usize, keep_prompts: bool) -> Result<SeqVars> {
    let rows = tape.shape(x).0;
    let cls = tape.slice_rows(x, 0, 1)?;
    let prompts = if n_prompts > 0 && keep_prompts {
        Some(tape.slice_rows(x, 1, 1 + n_prompts)?)
    } else {
        None
    };
    let images = tape.slice_rows(x, 1 + n_prompts, rows)?;
    Ok(SeqVars { cls, prompts, images })
}

/// Multi-head self-attention over all slots, scale 1/sqrt(D/N_h).
/// Returns the projected output (after W_O) and the attention record.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    layer_idx: usize,
    n_prompts: usize,
    capture: AttnCapture,
) -> Result<(Var, AttentionRecord)> {
    let t = tape.shape(x).0;
    let d_h = cfg.head_dim();
    let m = t - 1 - n_prompts;

    let q_all = {
        let qm = tape.matmul(x, layer.w_q)?;
        tape.add_row(qm, layer.b_q)?
    };
    let k_all = {
        let km = tape.matmul(x, layer.w_k)?;
        tape.add_row(km, layer.b_k)?
    };
    let v_all = {
        let vm = tape.matmul(x, layer.w_v)?;
        tape.add_row(vm, layer.b_v)?
    };

    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut rec = AttentionRecord {
        layer: layer_idx,
        n_prompts,
        n_images: m,
        logits: Vec::new(),
        weights: Vec::new(),
        cls_image_mean: vec![0.0; m],
        cls_query: Vec::new(),
    };
    for h in 0..cfg.heads {
        let (c0, c1) = (h * d_h, (h + 1) * d_h);
        let q_h = tape.slice_cols(q_all, c0, c1)?;
        let k_h = tape.slice_cols(k_all, c0, c1)?;
        let v_h = tape.slice_cols(v_all, c0, c1)?;
        let raw = tape.matmul_tb(q_h, k_h)?;
        let logits = tape.scale(raw, cfg.attn_scale())?;
        let weights = tape.softmax_rows(logits)?;
        let out_h = tape.matmul(weights, v_h)?;
        head_outs.push(out_h);

        let w_vals = tape.value(weights);
        for i in 0..m {
            rec.cls_image_mean[i] += w_vals[1 + n_prompts + i] / cfg.heads as f64;
        }
        if capture == AttnCapture::Full {
            rec.logits.push(tape.to_tensor(logits));
            rec.weights.push(tape.to_tensor(weights));
            rec.cls_query.push(tape.value(q_h)[..d_h].to_vec());
        }
    }
    let merged = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul(merged, layer.w_o)?;
    let out = tape.add_row(proj, layer.b_o)?;
    Ok((out, rec))
}

/// One pre-LN transformer layer: x + MSA(LN(x)), then + MLP(LN(.)).
/// With `keep_prompt_outputs=false` the returned sequence drops its prompt
/// block (the structure supplies fresh prompts next layer).
pub fn forward_layer(
    tape: &mut Tape,
    seq: &SeqVars,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    layer_idx: usize,
    keep_prompt_outputs: bool,
    capture: AttnCapture,
    hooks: PromptHooks,
) -> Result<(SeqVars, AttentionRecord)> {
    let n = seq.num_prompts(tape);
    let prompt_rows: Vec<usize> = (1..=n).collect();
    let mut x = concat_seq(tape, seq)?;
    if let Some(off) = hooks.pre_ln {
        x = tape.scatter_add_rows(x, off, &prompt_rows)?;
    }
    let mut h1 = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
    if let Some(off) = hooks.pre_qkv {
        h1 = tape.scatter_add_rows(h1, off, &prompt_rows)?;
    }
    let (mut msa_out, rec) = attention(tape, h1, layer, cfg, layer_idx, n, capture)?;
    if let Some(off) = hooks.post_msa {
        msa_out = tape.scatter_add_rows(msa_out, off, &prompt_rows)?;
    }
    let x2 = tape.add(x, msa_out)?;
    let h2 = tape.layer_norm(x2, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    let fc1 = tape.matmul(h2, layer.w_fc1)?;
    let fc1b = tape.add_row(fc1, layer.b_fc1)?;
    let act = tape.gelu(fc1b)?;
    let fc2 = tape.matmul(act, layer.w_fc2)?;
    let mlp = tape.add_row(fc2, layer.b_fc2)?;
    let out = tape.add(x2, mlp)?;
    let seq_out = split_seq(tape, out, n, keep_prompt_outputs)?;
    Ok((seq_out, rec))
}

/// Linear task head over the final class token.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    /// Zero init; always trainable.
    pub fn init(dim: usize, num_classes: usize) -> Self {
        HeadParams {
            weight: Tensor::zeros(vec![dim, num_classes]).with_requires_grad(true),
            bias: Tensor::zeros(vec![1, num_classes]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn bind(tape: &mut Tape, p: &HeadParams) -> Result<Self> {
        Ok(BoundHead {
            weight: tape.leaf(&p.weight)?,
            bias: tape.leaf(&p.bias)?,
        })
    }
}

/// Affine map from the class token to per-class logits.
pub fn head(tape: &mut Tape, cls_out: Var, h: &BoundHead) -> Result<Var> {
    let z = tape.matmul(cls_out, h.weight)?;
    tape.add_row(z, h.bias)
}
