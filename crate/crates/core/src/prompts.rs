//! Prompt-structure registry: how the prompt block entering each layer is
//! built from the learnable bank.
//!
//! Structures:
//! - `VptShallow`: prompts only at layer 0, outputs retained.
//! - `VptDeep`: fresh prompts per layer, outputs dropped.
//! - `Provp`: fresh prompts added to the preserved prompt-slot outputs.
//! - `Express`: preserved prompt outputs plus three per-layer additive
//!   offsets injected inside the layer (pre-LN, pre-QKV, post-MSA).
//! - `VanillaCdc`: fresh prompts plus the running sum of all earlier input
//!   prompts.
//! - `Cdc`: fresh prompts plus the previous layer's input prompts, optionally
//!   routed through the dynamic-aggregation weights gamma.

use serde::{Deserialize, Serialize};

use crate::ar::ArMode;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, PromptHooks};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    VptShallow,
    VptDeep,
    Provp,
    Express,
    VanillaCdc,
    Cdc,
}

impl Structure {
    pub const ALL: [Structure; 6] = [
        Structure::VptShallow,
        Structure::VptDeep,
        Structure::Provp,
        Structure::Express,
        Structure::VanillaCdc,
        Structure::Cdc,
    ];

    /// Whether prompt-slot outputs of layer l feed layer l+1.
    pub fn keeps_prompt_outputs(self) -> bool {
        matches!(self, Structure::VptShallow | Structure::Provp | Structure::Express)
    }

    /// Per-layer prompt tensors held in the bank (1 for input-only-at-layer-0
    /// structures, L otherwise).
    pub fn prompt_tensor_count(self, layers: usize) -> usize {
        match self {
            Structure::VptShallow | Structure::Express => 1,
            _ => layers,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::VptShallow => "vpt-shallow",
            Structure::VptDeep => "vpt-deep",
            Structure::Provp => "provp",
            Structure::Express => "express",
            Structure::VanillaCdc => "vanilla-cdc",
            Structure::Cdc => "cdc",
        }
    }

    pub fn parse(s: &str) -> Result<Structure> {
        Structure::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown structure '{s}'")))
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaInit {
    /// Start exactly at plain cross-layer connection.
    Identity,
    /// Start exactly at independent per-layer prompts.
    Zero,
    Uniform,
}

/// Per-layer additive offsets used by the EXPRESS structure.
#[derive(Clone, Debug)]
pub struct ExpressOffsets {
    pub pre_ln: Tensor,
    pub pre_qkv: Tensor,
    pub post_msa: Tensor,
}

/// All learnable adaptation state except the task head.
///
/// Everything stored here is trainable; gamma is present iff `da_enabled`,
/// AR prompts iff `k > 0`.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub structure: Structure,
    pub da_enabled: bool,
    pub ar_mode: ArMode,
    /// Layers AR applies to; `None` means every layer.
    pub ar_layers: Option<Vec<usize>>,
    /// Prompt count N.
    pub n: usize,
    /// AR prompt count k (already resolved: 0 for mode none, M for mode all).
    pub k: usize,
    /// Input prompts P^l.
    pub p: Vec<Tensor>,
    /// DA weights gamma^{l-1}, length L-1 when enabled.
    pub gamma: Vec<Tensor>,
    /// AR prompts P^l_re, length L when k > 0.
    pub p_re: Vec<Tensor>,
    /// EXPRESS insertion offsets, length L for that structure.
    pub express: Vec<ExpressOffsets>,
}

/// Selection of the adaptation structure for a model build.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub structure: Structure,
    #[serde(default)]
    pub da: bool,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: GammaInit,
    /// Prompt count N.
    pub prompts: usize,
    #[serde(default)]
    pub ar: ArMode,
    #[serde(default)]
    pub ar_k: usize,
    #[serde(default)]
    pub ar_layers: Option<Vec<usize>>,
}

fn default_gamma_init() -> GammaInit {
    GammaInit::Identity
}

impl StructureSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.da && self.structure != Structure::Cdc {
            return Err(Error::config(
                "dynamic aggregation extends the cdc structure only",
            ));
        }
        if self.ar == ArMode::TopK && self.ar_k > cfg.num_patches() {
            return Err(Error::config(format!(
                "ar_k {} exceeds image-token count {}",
                self.ar_k,
                cfg.num_patches()
            )));
        }
        if let Some(layers) = &self.ar_layers {
            if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.layers) {
                return Err(Error::config(format!(
                    "ar layer {bad} out of range for {} layers",
                    cfg.layers
                )));
            }
        }
        Ok(())
    }
}

impl PromptBank {
    /// Builds and initialises the bank. Draw order is fixed (P, then gamma,
    /// then AR prompts) so structures sharing a seed share their P values.
    pub fn init(cfg: &ModelConfig, spec: &StructureSpec, seed: u64) -> Result<Self> {
        spec.validate(cfg)?;
        let mut rng = Rng::seeded(seed);
        let d = cfg.dim;
        let n = spec.prompts;
        let l = cfg.layers;
        let r = (6.0 / (d + d) as f64).sqrt();

        let p: Vec<Tensor> = (0..spec.structure.prompt_tensor_count(l))
            .map(|_| {
                let mut t = Tensor::zeros(vec![n, d]);
                t.fill_uniform(&mut rng, r);
                t.with_requires_grad(true)
            })
            .collect();

        let da_enabled = spec.da;
        let gamma: Vec<Tensor> = if da_enabled {
            (0..l.saturating_sub(1))
                .map(|_| {
                    let t = match spec.gamma_init {
                        GammaInit::Identity => Tensor::eye(n),
                        GammaInit::Zero => Tensor::zeros(vec![n, n]),
                        GammaInit::Uniform => {
                            let mut t = Tensor::zeros(vec![n, n]);
                            t.fill_uniform(&mut rng, (3.0 / n.max(1) as f64).sqrt());
                            t
                        }
                    };
                    t.with_requires_grad(true)
                })
                .collect()
        } else {
            Vec::new()
        };

        let k = match spec.ar {
            ArMode::None => 0,
            ArMode::All => cfg.num_patches(),
            ArMode::TopK => spec.ar_k,
        };
        let p_re: Vec<Tensor> = if k > 0 {
            (0..l)
                .map(|_| {
                    let mut t = Tensor::zeros(vec![k, d]);
                    t.fill_uniform(&mut rng, r);
                    t.with_requires_grad(true)
                })
                .collect()
        } else {
            Vec::new()
        };

        let express: Vec<ExpressOffsets> = if spec.structure == Structure::Express {
            (0..l)
                .map(|_| ExpressOffsets {
                    pre_ln: Tensor::zeros(vec![n, d]).with_requires_grad(true),
                    pre_qkv: Tensor::zeros(vec![n, d]).with_requires_grad(true),
                    post_msa: Tensor::zeros(vec![n, d]).with_requires_grad(true),
                })
                .collect()
        } else {
            Vec::new()
        };

        Ok(PromptBank {
            structure: spec.structure,
            da_enabled,
            ar_mode: spec.ar,
            ar_layers: spec.ar_layers.clone(),
            n,
            k,
            p,
            gamma,
            p_re,
            express,
        })
    }

    pub fn ar_applies_at(&self, layer: usize) -> bool {
        if self.ar_mode == ArMode::None || self.k == 0 {
            return false;
        }
        match &self.ar_layers {
            Some(layers) => layers.contains(&layer),
            None => true,
        }
    }

    pub fn visit(&self, mut f: impl FnMut(String, &Tensor)) {
        for (l, t) in self.p.iter().enumerate() {
            f(format!("bank.p{l}"), t);
        }
        for (l, t) in self.gamma.iter().enumerate() {
            f(format!("bank.gamma{l}"), t);
        }
        for (l, t) in self.p_re.iter().enumerate() {
            f(format!("bank.p_re{l}"), t);
        }
        for (l, e) in self.express.iter().enumerate() {
            f(format!("bank.express{l}.pre_ln"), &e.pre_ln);
            f(format!("bank.express{l}.pre_qkv"), &e.pre_qkv);
            f(format!("bank.express{l}.post_msa"), &e.post_msa);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (l, t) in self.p.iter_mut().enumerate() {
            f(format!("bank.p{l}"), t);
        }
        for (l, t) in self.gamma.iter_mut().enumerate() {
            f(format!("bank.gamma{l}"), t);
        }
        for (l, t) in self.p_re.iter_mut().enumerate() {
            f(format!("bank.p_re{l}"), t);
        }
        for (l, e) in self.express.iter_mut().enumerate() {
            f(format!("bank.express{l}.pre_ln"), &mut e.pre_ln);
            f(format!("bank.express{l}.pre_qkv"), &mut e.pre_qkv);
            f(format!("bank.express{l}.post_msa"), &mut e.post_msa);
        }
    }
}

/// Tape handles for the bank.
#[derive(Clone, Debug, Default)]
pub struct BoundBank {
    pub p: Vec<Var>,
    pub gamma: Vec<Var>,
    pub p_re: Vec<Var>,
    pub express: Vec<[Var; 3]>,
}

impl BoundBank {
    pub fn bind(tape: &mut Tape, bank: &PromptBank) -> Result<Self> {
        let mut out = BoundBank::default();
        for t in &bank.p {
            out.p.push(tape.leaf(t)?);
        }
        for t in &bank.gamma {
            out.gamma.push(tape.leaf(t)?);
        }
        for t in &bank.p_re {
            out.p_re.push(tape.leaf(t)?);
        }
        for e in &bank.express {
            out.express.push([
                tape.leaf(&e.pre_ln)?,
                tape.leaf(&e.pre_qkv)?,
                tape.leaf(&e.post_msa)?,
            ]);
        }
        Ok(out)
    }
}

/// Cross-layer state threaded through the forward pass (kept out of the bank
/// so passes stay reentrant).
#[derive(Clone, Copy, Debug, Default)]
pub struct PromptState {
    /// Input prompt block of the previous layer (after composition).
    pub prev_input: Option<Var>,
    /// Preserved prompt-slot outputs of the previous layer.
    pub prev_output: Option<Var>,
}

/// Row i of the output aggregates all previous-layer prompts:
/// `gamma · p_prev` as a matrix product.
pub fn da_aggregate(tape: &mut Tape, gamma: Var, p_prev: Var) -> Result<Var> {
    tape.matmul(gamma, p_prev)
}

/// Builds the prompt block entering layer `l` plus any in-layer hooks.
/// Returns `None` for the block when the structure contributes no prompt
/// slots at this layer (N=0).
pub fn compose_input_prompts(
    tape: &mut Tape,
    bank: &PromptBank,
    bound: &BoundBank,
    l: usize,
    state: &PromptState,
) -> Result<(Option<Var>, PromptHooks)> {
    let layers_with_own_prompts = bank.p.len();
    if bank.n == 0 {
        return Ok((None, PromptHooks::default()));
    }
    if l > 0 && l >= layers_with_own_prompts && !bank.structure.keeps_prompt_outputs() {
        return Err(Error::contract(format!("layer {l} out of range for prompt bank")));
    }

    let block = match bank.structure {
        Structure::VptDeep => Some(bound.p[l]),
        Structure::VptShallow => {
            if l == 0 {
                Some(bound.p[0])
            } else {
                Some(state.prev_output.ok_or_else(|| {
                    Error::contract("vpt-shallow needs preserved prompt outputs")
                })?)
            }
        }
        Structure::Cdc => {
            if l == 0 {
                Some(bound.p[0])
            } else {
                let prev = if bank.da_enabled {
                    da_aggregate(tape, bound.gamma[l - 1], bound.p[l - 1])?
                } else {
                    bound.p[l - 1]
                };
                Some(tape.add(bound.p[l], prev)?)
            }
        }
        Structure::VanillaCdc => {
            if l == 0 {
                Some(bound.p[0])
            } else {
                let prev = state.prev_input.ok_or_else(|| {
                    Error::contract("vanilla-cdc needs the previous input prompts")
                })?;
                Some(tape.add(bound.p[l], prev)?)
            }
        }
        Structure::Provp => {
            if l == 0 {
                Some(bound.p[0])
            } else {
                let prev = state.prev_output.ok_or_else(|| {
                    Error::contract("provp needs preserved prompt outputs")
                })?;
                Some(tape.add(bound.p[l], prev)?)
            }
        }
        Structure::Express => {
            if l == 0 {
                Some(bound.p[0])
            } else {
                Some(state.prev_output.ok_or_else(|| {
                    Error::contract("express needs preserved prompt outputs")
                })?)
            }
        }
    };

    let hooks = if bank.structure == Structure::Express {
        let [pre_ln, pre_qkv, post_msa] = bound.express[l];
        PromptHooks {
            pre_ln: Some(pre_ln),
            pre_qkv: Some(pre_qkv),
            post_msa: Some(post_msa),
        }
    } else {
        PromptHooks::default()
    };
    Ok((block, hooks))
}

/// Learnable-parameter breakdown; `cdc` is the prompt-structure block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub cdc: usize,
    pub da: usize,
    pub ar: usize,
    pub head: usize,
    pub total: usize,
}

/// Closed-form learnable-parameter counts: L·N·D prompts (N·D for shallow,
/// plus the three per-layer offsets for EXPRESS), (L-1)·N² DA weights,
/// L·k·D AR prompts, (D+1)·classes head.
pub fn count_learnable_params(cfg: &ModelConfig, bank: &PromptBank) -> ParamBreakdown {
    let (l, n, d) = (cfg.layers, bank.n, cfg.dim);
    let cdc = match bank.structure {
        Structure::VptShallow => n * d,
        Structure::Express => n * d + 3 * l * n * d,
        _ => l * n * d,
    };
    let da = if bank.da_enabled { (l - 1) * n * n } else { 0 };
    let ar = l * bank.k * d;
    let head = (d + 1) * cfg.num_classes;
    ParamBreakdown {
        cdc,
        da,
        ar,
        head,
        total: cdc + da + ar + head,
    }
}
