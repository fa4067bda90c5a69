//! Full prompted model: frozen backbone, prompt bank, task head, and the
//! layer loop that threads prompt state, attention records and attentive
//! reinforcement through a tape.

use sha2::{Digest, Sha256};

use crate::ar::{apply_ar, SalienceSelection};
use crate::prompts::{compose_input_prompts, BoundBank, PromptBank, PromptState, StructureSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{
    embed, forward_layer, head, AttentionRecord, AttnCapture, Backbone, BoundHead, BoundLayer,
    HeadParams, ModelConfig, PromptHooks, SeqVars,
};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub bank: PromptBank,
    pub head: HeadParams,
}

/// Tape handles for everything a forward pass needs.
pub struct BoundModel {
    pub layers: Vec<BoundLayer>,
    pub bank: BoundBank,
    pub head: BoundHead,
}

/// One sample's forward-pass outputs on the tape.
pub struct ForwardOutput {
    pub logits: Var,
    pub cls_final: Var,
    pub records: Vec<AttentionRecord>,
    pub selections: Vec<Option<SalienceSelection>>,
}

impl Model {
    /// Builds a model: backbone init from `config.seed` then frozen; bank and
    /// head trainable, bank drawn from `bank_seed`. The head weight draws from
    /// its own stream keyed off `bank_seed`, so models that differ only in
    /// structure share their head init.
    pub fn build(config: ModelConfig, spec: &StructureSpec, bank_seed: u64) -> Result<Self> {
        let backbone = Backbone::init(config.clone())?;
        let bank = PromptBank::init(&config, spec, bank_seed)?;
        let mut head = HeadParams::init(config.dim, config.num_classes);
        let mut head_rng = crate::rng::Rng::seeded(crate::rng::mix_seed(bank_seed, u64::from_le_bytes(*b"taskhead")));
        let r = (6.0 / (config.dim + config.num_classes) as f64).sqrt();
        head.weight.fill_uniform(&mut head_rng, r);
        Ok(Model { backbone, bank, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let layers = self
            .backbone
            .layers
            .iter()
            .map(|l| BoundLayer::bind(tape, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            layers,
            bank: BoundBank::bind(tape, &self.bank)?,
            head: BoundHead::bind(tape, &self.head)?,
        })
    }

    /// Runs one image through embedding, all layers (with prompt composition
    /// and AR), and the head.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        image: &Tensor,
        capture: AttnCapture,
    ) -> Result<ForwardOutput> {
        let cfg = self.config();
        let seq0 = embed(image, &self.backbone)?;
        let mut cls = tape.leaf(&seq0.cls)?;
        let mut images = tape.leaf(&seq0.images)?;

        let keep = self.bank.structure.keeps_prompt_outputs();
        let mut state = PromptState::default();
        let mut records = Vec::with_capacity(cfg.layers);
        let mut selections = Vec::with_capacity(cfg.layers);

        for l in 0..cfg.layers {
            let (block, hooks) = compose_input_prompts(tape, &self.bank, &bound.bank, l, &state)?;
            let seq = SeqVars { cls, prompts: block, images };
            let (seq_out, rec) =
                forward_layer(tape, &seq, &bound.layers[l], cfg, l, keep, capture, hooks)?;

            let (z, sel) = if self.bank.ar_applies_at(l) {
                apply_ar(
                    tape,
                    self.bank.ar_mode,
                    seq_out.images,
                    &rec,
                    bound.bank.p_re.get(l).copied(),
                    l,
                )?
            } else {
                (seq_out.images, None)
            };

            state.prev_input = block;
            state.prev_output = seq_out.prompts;
            cls = seq_out.cls;
            images = z;
            records.push(rec);
            selections.push(sel);
        }

        let logits = head(tape, cls, &bound.head)?;
        Ok(ForwardOutput { logits, cls_final: cls, records, selections })
    }

    /// Convenience single-image forward on a fresh tape; returns logits and
    /// attention records.
    pub fn forward(&self, image: &Tensor, capture: AttnCapture) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.forward_on_tape(&mut tape, &bound, image, capture)?;
        Ok((tape.value(out.logits).to_vec(), out.records))
    }

    /// Stacked logits [B x C] plus mean cross-entropy for a batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        batch: &[&crate::data::Sample],
    ) -> Result<(Var, Var)> {
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for s in batch {
            let out = self.forward_on_tape(tape, bound, &s.image, AttnCapture::ClassRow)?;
            rows.push(out.logits);
            labels.push(s.label);
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy_mean(logits, &labels)?;
        Ok((loss, logits))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let (logits, _) = self.forward(image, AttnCapture::ClassRow)?;
        Ok(argmax(&logits))
    }

    pub fn eval_accuracy(&self, samples: &[crate::data::Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for chunk in samples.chunks(32) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape)?;
            for s in chunk {
                let out = self.forward_on_tape(&mut tape, &bound, &s.image, AttnCapture::ClassRow)?;
                if argmax(tape.value(out.logits)) == s.label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    // ── parameter registry ────────────────────────────────────────────

    /// Visits every parameter with (name, tensor, trainable).
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor, bool)) {
        self.backbone.visit(|name, t| f(&name, t, t.requires_grad()));
        self.bank.visit(|name, t| f(&name, t, t.requires_grad()));
        f("head.weight", &self.head.weight, self.head.weight.requires_grad());
        f("head.bias", &self.head.bias, self.head.bias.requires_grad());
    }

    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        self.bank.visit_mut(|name, t| {
            debug_assert!(t.requires_grad());
            f(name, t)
        });
        f("head.weight".into(), &mut self.head.weight);
        f("head.bias".into(), &mut self.head.bias);
    }

    /// Count of trainable scalars in the registry (the oracle the closed-form
    /// breakdown is checked against).
    pub fn trainable_scalar_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(|_, t, trainable| {
            if trainable {
                count += t.numel();
            }
        });
        count
    }

    /// (name, var) pairs in `visit_trainable_mut` order for the bound model.
    pub fn trainable_vars(&self, bound: &BoundModel) -> Vec<(String, Var)> {
        let mut pairs = Vec::new();
        for (l, &v) in bound.bank.p.iter().enumerate() {
            pairs.push((format!("bank.p{l}"), v));
        }
        for (l, &v) in bound.bank.gamma.iter().enumerate() {
            pairs.push((format!("bank.gamma{l}"), v));
        }
        for (l, &v) in bound.bank.p_re.iter().enumerate() {
            pairs.push((format!("bank.p_re{l}"), v));
        }
        for (l, e) in bound.bank.express.iter().enumerate() {
            pairs.push((format!("bank.express{l}.pre_ln"), e[0]));
            pairs.push((format!("bank.express{l}.pre_qkv"), e[1]));
            pairs.push((format!("bank.express{l}.post_msa"), e[2]));
        }
        pairs.push(("head.weight".into(), bound.head.weight));
        pairs.push(("head.bias".into(), bound.head.bias));
        pairs
    }

    /// After `tape.backward`, writes dLoss/dLeaf into every trainable tensor
    /// (zeros where no gradient flowed). Frozen tensors keep `grad = None`.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        let pairs = self.trainable_vars(bound);
        let mut grads: std::collections::HashMap<String, Vec<f64>> = pairs
            .into_iter()
            .map(|(name, var)| {
                let g = tape
                    .grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(var).len()]);
                (name, g)
            })
            .collect();
        self.visit_trainable_mut(|name, t| {
            let g = grads.remove(&name).expect("trainable var bound");
            t.set_grad(Some(g));
        });
    }

    /// SHA-256 over every frozen tensor (names and little-endian values) in
    /// registry order.
    pub fn backbone_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.backbone.visit(|name, t| {
            hasher.update(name.as_bytes());
            for v in t.values() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Argmax with ties resolved to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Prompt-free ViT forward (the plain path the N=0 model must reduce to).
/// Returns (logits, final cls features, records).
pub fn forward_plain(
    backbone: &Backbone,
    head_params: &HeadParams,
    image: &Tensor,
    capture: AttnCapture,
) -> Result<(Vec<f64>, Vec<f64>, Vec<AttentionRecord>)> {
    let cfg = &backbone.config;
    let mut tape = Tape::new();
    let layers = backbone
        .layers
        .iter()
        .map(|l| BoundLayer::bind(&mut tape, l))
        .collect::<Result<Vec<_>>>()?;
    let bound_head = BoundHead::bind(&mut tape, head_params)?;
    let seq0 = embed(image, backbone)?;
    let mut cls = tape.leaf(&seq0.cls)?;
    let mut images = tape.leaf(&seq0.images)?;
    let mut records = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let seq = SeqVars { cls, prompts: None, images };
        let (out, rec) = forward_layer(
            &mut tape,
            &seq,
            layer,
            cfg,
            l,
            false,
            capture,
            PromptHooks::default(),
        )?;
        cls = out.cls;
        images = out.images;
        records.push(rec);
    }
    let logits = head(&mut tape, cls, &bound_head)?;
    Ok((
        tape.value(logits).to_vec(),
        tape.value(cls).to_vec(),
        records,
    ))
}

/// Frozen class-token features of the plain backbone (for linear probes).
pub fn cls_features(backbone: &Backbone, image: &Tensor) -> Result<Vec<f64>> {
    let head_params = HeadParams::init(backbone.config.dim, backbone.config.num_classes);
    let (_, cls, _) = forward_plain(backbone, &head_params, image, AttnCapture::ClassRow)?;
    Ok(cls)
}

impl std::fmt::Debug for BoundModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundModel")
            .field("layers", &self.layers.len())
            .finish()
    }
}
