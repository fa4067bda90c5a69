//! Numeric verification of the attention re-weighting decomposition, plus
//! attention-map export.
//!
//! The check: with layer normalization bypassed, the exponential of the
//! class-token/prompt logit under a cross-layer connected prompt splits into
//! the plain-prompt exponential times a re-weighting factor (one factor per
//! aggregated previous-layer prompt under DA). Checked on raw exponentials
//! with a logit-magnitude guard, never through the softmax's max subtraction.

use serde_json::json;

use crate::model::Model;
use crate::prompts::Structure;
use crate::tensor::Tensor;
use crate::vit::{AttnCapture, LayerParams};
use crate::{Error, Result};

/// Largest |logit| fed to exp; past this the factors overflow f64.
pub const LOGIT_GUARD: f64 = 300.0;

/// Default relative tolerance for the identity residuals.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub layer: usize,
    pub head: usize,
    /// Relative residual |lhs - rhs| / max(lhs, rhs) per prompt.
    pub residuals: Vec<f64>,
    /// Re-weighting term per prompt: one factor for the plain connection,
    /// the product of N factors under DA.
    pub reweight: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl DecompositionReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "layer": self.layer,
            "head": self.head,
            "max_residual": self.max_residual(),
            "tolerance": self.tolerance,
            "pass": self.pass,
        })
    }
}

/// Key-path selection: the derivation bypasses layer normalization (keys come
/// from raw prompt vectors through W_K only); the full-LN mode pushes every
/// key through LN first to document how large the residuals get when the
/// bypass assumption is dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyPath {
    LnBypassed,
    FullLn,
}

/// q · (prep(p) · W_K_head) / scale, where `w_k_head` is the D x d_h slice.
fn key_logit(q: &[f64], w_k_head: &[f64], p: &[f64], scale: f64) -> Result<f64> {
    let d_h = q.len();
    let mut acc = 0.0;
    for (j, &qj) in q.iter().enumerate() {
        let mut proj = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            proj += pi * w_k_head[i * d_h + j];
        }
        acc += qj * proj;
    }
    let logit = acc / scale;
    if !logit.is_finite() || logit.abs() > LOGIT_GUARD {
        return Err(Error::NonFinite { op: "decomposition logit" });
    }
    Ok(logit)
}

fn relative_residual(lhs: f64, rhs: f64) -> f64 {
    let denom = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    (lhs - rhs).abs() / denom
}

type KeyPrep<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

fn cdc_check(
    q: &[f64],
    w_k_head: &[f64],
    p_l: &Tensor,
    p_prev: &Tensor,
    scale: f64,
    layer: usize,
    head: usize,
    tolerance: f64,
    prep: KeyPrep,
) -> Result<DecompositionReport> {
    let n = p_l.rows();
    let d = p_l.cols();
    if p_prev.rows() != n || p_prev.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "verify_cdc_decomposition",
            lhs: p_l.shape().to_vec(),
            rhs: p_prev.shape().to_vec(),
        });
    }
    let mut residuals = Vec::with_capacity(n);
    let mut reweight = Vec::with_capacity(n);
    for i in 0..n {
        let combined: Vec<f64> = p_l.row(i).iter().zip(p_prev.row(i)).map(|(a, b)| a + b).collect();
        let lhs = key_logit(q, w_k_head, &prep(&combined), scale)?.exp();
        let base = key_logit(q, w_k_head, &prep(p_l.row(i)), scale)?.exp();
        let alpha = key_logit(q, w_k_head, &prep(p_prev.row(i)), scale)?.exp();
        residuals.push(relative_residual(lhs, base * alpha));
        reweight.push(alpha);
    }
    let pass = residuals.iter().all(|&r| r < tolerance);
    Ok(DecompositionReport { layer, head, residuals, reweight, tolerance, pass })
}

/// Checks, per prompt i, that
/// exp(q·W_K(p_l[i]+p_prev[i])/s) = exp(q·W_K p_l[i]/s) · exp(q·W_K p_prev[i]/s),
/// and reports the re-weighting factor exp(q·W_K p_prev[i]/s).
/// Keys go through W_K only (the derivation's LN bypass).
pub fn verify_cdc_decomposition(
    q: &[f64],
    w_k_head: &[f64],
    p_l: &Tensor,
    p_prev: &Tensor,
    scale: f64,
    layer: usize,
    head: usize,
    tolerance: f64,
) -> Result<DecompositionReport> {
    cdc_check(q, w_k_head, p_l, p_prev, scale, layer, head, tolerance, &|p| p.to_vec())
}

fn da_check(
    q: &[f64],
    w_k_head: &[f64],
    p_l: &Tensor,
    p_prev: &Tensor,
    gamma: &Tensor,
    scale: f64,
    layer: usize,
    head: usize,
    tolerance: f64,
    prep: KeyPrep,
) -> Result<DecompositionReport> {
    let n = p_l.rows();
    if gamma.rows() != n || gamma.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "verify_da_decomposition",
            lhs: vec![n, n],
            rhs: gamma.shape().to_vec(),
        });
    }
    // previous-layer prompt logits are shared across i
    let prev_logits: Vec<f64> = (0..n)
        .map(|j| key_logit(q, w_k_head, &prep(p_prev.row(j)), scale))
        .collect::<Result<_>>()?;
    let mut residuals = Vec::with_capacity(n);
    let mut reweight = Vec::with_capacity(n);
    for i in 0..n {
        let mut agg = p_l.row(i).to_vec();
        for j in 0..n {
            let g = gamma.row(i)[j];
            for (a, &pv) in agg.iter_mut().zip(p_prev.row(j)) {
                *a += g * pv;
            }
        }
        let lhs = key_logit(q, w_k_head, &prep(&agg), scale)?.exp();
        let base = key_logit(q, w_k_head, &prep(p_l.row(i)), scale)?.exp();
        let mut product = 1.0;
        for j in 0..n {
            let factor_logit = gamma.row(i)[j] * prev_logits[j];
            if factor_logit.abs() > LOGIT_GUARD {
                return Err(Error::NonFinite { op: "decomposition logit" });
            }
            product *= factor_logit.exp();
        }
        residuals.push(relative_residual(lhs, base * product));
        reweight.push(product);
    }
    let pass = residuals.iter().all(|&r| r < tolerance);
    Ok(DecompositionReport { layer, head, residuals, reweight, tolerance, pass })
}

/// DA variant: the aggregated key exponential must equal
/// exp(q·W_K p_l[i]/s) · prod_j exp(gamma[i,j] · q·W_K p_prev[j]/s).
/// Reports the product of the N per-prompt factors.
pub fn verify_da_decomposition(
    q: &[f64],
    w_k_head: &[f64],
    p_l: &Tensor,
    p_prev: &Tensor,
    gamma: &Tensor,
    scale: f64,
    layer: usize,
    head: usize,
    tolerance: f64,
) -> Result<DecompositionReport> {
    da_check(q, w_k_head, p_l, p_prev, gamma, scale, layer, head, tolerance, &|p| p.to_vec())
}

/// Proportionality statement made testable: with a shared set of non-prompt
/// logits, the ratio w̃_i / (w_i · alpha_i) must be constant across prompts.
/// Returns the max relative deviation of the ratio from its i=0 value.
pub fn proportionality_residual(
    q: &[f64],
    w_k_head: &[f64],
    p_l: &Tensor,
    p_prev: &Tensor,
    other_logits: &[f64],
    scale: f64,
) -> Result<f64> {
    let n = p_l.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let other_sum: f64 = other_logits.iter().map(|&z| z.exp()).sum();
    let mut fused = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let combined: Vec<f64> = p_l.row(i).iter().zip(p_prev.row(i)).map(|(a, b)| a + b).collect();
        fused.push(key_logit(q, w_k_head, &combined, scale)?.exp());
        base.push(key_logit(q, w_k_head, p_l.row(i), scale)?.exp());
        alpha.push(key_logit(q, w_k_head, p_prev.row(i), scale)?.exp());
    }
    let z_fused: f64 = other_sum + fused.iter().sum::<f64>();
    let z_base: f64 = other_sum + base.iter().sum::<f64>();
    let ratio = |i: usize| (fused[i] / z_fused) / ((base[i] / z_base) * alpha[i]);
    let r0 = ratio(0);
    let mut worst = 0.0f64;
    for i in 1..n {
        worst = worst.max((ratio(i) / r0 - 1.0).abs());
    }
    Ok(worst)
}

/// Reports for one model: the plain cross-layer check and, when DA is
/// enabled, the aggregated check, for every layer >= 1 and every head.
#[derive(Clone, Debug, Default)]
pub struct VerificationRun {
    pub cdc: Vec<DecompositionReport>,
    pub da: Vec<DecompositionReport>,
}

impl VerificationRun {
    pub fn all_pass(&self) -> bool {
        self.cdc.iter().chain(self.da.iter()).all(|r| r.pass)
    }

    pub fn max_residual(&self) -> f64 {
        self.cdc
            .iter()
            .chain(self.da.iter())
            .map(DecompositionReport::max_residual)
            .fold(0.0, f64::max)
    }
}

fn head_slice_of_wk(layer: &LayerParams, head: usize, d_h: usize) -> Vec<f64> {
    let d = layer.w_k.rows();
    let mut out = vec![0.0; d * d_h];
    for i in 0..d {
        for j in 0..d_h {
            out[i * d_h + j] = layer.w_k.row(i)[head * d_h + j];
        }
    }
    out
}

fn ln_vec(p: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let d = p.len();
    let mean = p.iter().sum::<f64>() / d as f64;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + crate::vit::LN_EPS).sqrt();
    (0..d)
        .map(|i| (p[i] - mean) * inv * gain.values()[i] + bias.values()[i])
        .collect()
}

/// Runs the decomposition checks against a live forward pass on `image`:
/// the class-token query of each layer/head is taken from the real model.
/// Requires the cdc structure (with or without DA).
pub fn verify_model(
    model: &Model,
    image: &Tensor,
    tolerance: f64,
    path: KeyPath,
) -> Result<VerificationRun> {
    if model.bank.structure != Structure::Cdc {
        return Err(Error::config(format!(
            "decomposition checks apply to the cdc structure, model uses {}",
            model.bank.structure.name()
        )));
    }
    let cfg = model.config();
    let (_, records) = model.forward(image, AttnCapture::Full)?;
    let scale = (cfg.head_dim() as f64).sqrt();
    let mut run = VerificationRun::default();
    for l in 1..cfg.layers {
        let layer = &model.backbone.layers[l];
        let (p_l, p_prev) = (&model.bank.p[l], &model.bank.p[l - 1]);
        let prep: Box<dyn Fn(&[f64]) -> Vec<f64>> = match path {
            KeyPath::LnBypassed => Box::new(|p: &[f64]| p.to_vec()),
            KeyPath::FullLn => {
                let gain = layer.ln1_gain.clone();
                let bias = layer.ln1_bias.clone();
                Box::new(move |p: &[f64]| ln_vec(p, &gain, &bias))
            }
        };
        for h in 0..cfg.heads {
            let q = &records[l].cls_query[h];
            let wk = head_slice_of_wk(layer, h, cfg.head_dim());
            run.cdc.push(cdc_check(
                q, &wk, p_l, p_prev, scale, l, h, tolerance, &prep,
            )?);
            if model.bank.da_enabled {
                run.da.push(da_check(
                    q,
                    &wk,
                    p_l,
                    p_prev,
                    &model.bank.gamma[l - 1],
                    scale,
                    l,
                    h,
                    tolerance,
                    &prep,
                )?);
            }
        }
    }
    Ok(run)
}

/// Per-layer head-mean class-token attention over image tokens, ordered by
/// the patch grid (row-major): one row per layer.
pub fn export_attention(model: &Model, image: &Tensor) -> Result<Vec<(usize, Vec<f64>)>> {
    let (_, records) = model.forward(image, AttnCapture::Full)?;
    Ok(records
        .into_iter()
        .map(|rec| (rec.layer, rec.cls_image_mean))
        .collect())
}

/// CSV with header `layer,slot_0,...,slot_{M-1}`.
pub fn attention_csv(rows: &[(usize, Vec<f64>)]) -> String {
    let m = rows.first().map_or(0, |(_, v)| v.len());
    let mut out = String::from("layer");
    for i in 0..m {
        out.push_str(&format!(",slot_{i}"));
    }
    out.push('\n');
    for (layer, vals) in rows {
        out.push_str(&layer.to_string());
        for v in vals {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::ArMode;
    use crate::prompts::{GammaInit, StructureSpec};
    use crate::rng::Rng;
    use crate::vit::ModelConfig;

    fn random_inputs(seed: u64, n: usize, d: usize, d_h: usize) -> (Vec<f64>, Vec<f64>, Tensor, Tensor) {
        let mut rng = Rng::seeded(seed);
        let q: Vec<f64> = (0..d_h).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wk: Vec<f64> = (0..d * d_h).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let mut p_l = Tensor::zeros(vec![n, d]);
        p_l.fill_uniform(&mut rng, 1.0);
        let mut p_prev = Tensor::zeros(vec![n, d]);
        p_prev.fill_uniform(&mut rng, 1.0);
        (q, wk, p_l, p_prev)
    }

    #[test]
    fn zero_previous_prompt_gives_unit_reweight_and_zero_residual() {
        let (q, wk, p_l, _) = random_inputs(1, 3, 6, 2);
        let p_prev = Tensor::zeros(vec![3, 6]);
        let rep = verify_cdc_decomposition(&q, &wk, &p_l, &p_prev, 2.0, 1, 0, 1e-10).unwrap();
        assert!(rep.pass);
        assert!(rep.reweight.iter().all(|&a| a == 1.0));
        assert!(rep.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn identity_holds_across_seeds() {
        for seed in 0..10 {
            let (q, wk, p_l, p_prev) = random_inputs(seed, 4, 8, 4);
            let rep = verify_cdc_decomposition(&q, &wk, &p_l, &p_prev, 2.0, 1, 0, 1e-10).unwrap();
            assert!(rep.pass, "seed {seed}: max residual {}", rep.max_residual());
            let gamma = {
                let mut g = Tensor::zeros(vec![4, 4]);
                g.fill_uniform(&mut Rng::seeded(seed + 100), 0.7);
                g
            };
            let rep = verify_da_decomposition(&q, &wk, &p_l, &p_prev, &gamma, 2.0, 1, 0, 1e-10).unwrap();
            assert!(rep.pass, "seed {seed} (da): max residual {}", rep.max_residual());
        }
    }

    #[test]
    fn da_with_identity_gamma_collapses_to_plain_check() {
        let (q, wk, p_l, p_prev) = random_inputs(7, 4, 8, 4);
        let cdc = verify_cdc_decomposition(&q, &wk, &p_l, &p_prev, 2.0, 2, 1, 1e-10).unwrap();
        let da = verify_da_decomposition(&q, &wk, &p_l, &p_prev, &Tensor::eye(4), 2.0, 2, 1, 1e-10).unwrap();
        for (a, b) in cdc.reweight.iter().zip(da.reweight.iter()) {
            assert!((a / b - 1.0).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(da.pass);
    }

    #[test]
    fn da_with_zero_gamma_gives_unit_factors() {
        let (q, wk, p_l, p_prev) = random_inputs(8, 3, 8, 4);
        let zero = Tensor::zeros(vec![3, 3]);
        let rep = verify_da_decomposition(&q, &wk, &p_l, &p_prev, &zero, 2.0, 1, 0, 1e-10).unwrap();
        assert!(rep.reweight.iter().all(|&p| p == 1.0));
        assert!(rep.pass);
    }

    #[test]
    fn oversized_logits_are_an_overflow_error() {
        let (mut q, wk, p_l, p_prev) = random_inputs(3, 2, 6, 2);
        for v in &mut q {
            *v *= 1e6;
        }
        assert!(matches!(
            verify_cdc_decomposition(&q, &wk, &p_l, &p_prev, 1.0, 1, 0, 1e-10),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn proportionality_ratio_is_constant() {
        let (q, wk, p_l, p_prev) = random_inputs(5, 4, 8, 4);
        let other: Vec<f64> = (0..10).map(|i| -1.0 + 0.3 * i as f64).collect();
        let dev = proportionality_residual(&q, &wk, &p_l, &p_prev, &other, 2.0).unwrap();
        assert!(dev < 1e-10, "deviation {dev}");
    }

    fn cdc_model(da: bool) -> Model {
        let cfg = ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            dim: 8,
            heads: 2,
            layers: 3,
            mlp_ratio: 2,
            num_classes: 2,
            seed: 3,
        };
        Model::build(
            cfg,
            &StructureSpec {
                structure: Structure::Cdc,
                da,
                gamma_init: GammaInit::Uniform,
                prompts: 3,
                ar: ArMode::None,
                ar_k: 0,
                ar_layers: None,
            },
            11,
        )
        .unwrap()
    }

    fn test_image(seed: u64) -> Tensor {
        let mut rng = Rng::seeded(seed);
        Tensor::new(vec![8, 8, 1], (0..64).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn model_level_checks_pass_with_bypassed_ln() {
        let model = cdc_model(true);
        let run = verify_model(&model, &test_image(4), 1e-10, KeyPath::LnBypassed).unwrap();
        let cfg = model.config();
        assert_eq!(run.cdc.len(), (cfg.layers - 1) * cfg.heads);
        assert_eq!(run.da.len(), (cfg.layers - 1) * cfg.heads);
        assert!(run.all_pass(), "max residual {}", run.max_residual());
    }

    #[test]
    fn full_ln_path_reports_nonzero_residuals() {
        // LN(p_l + p_prev) is not LN(p_l) + LN(p_prev), so pushing keys
        // through LN breaks the exponential split; residuals document that.
        let model = cdc_model(false);
        let run = verify_model(&model, &test_image(9), 1e-10, KeyPath::FullLn).unwrap();
        assert!(!run.cdc.is_empty());
        assert!(run.max_residual() > 1e-10, "expected visible LN residual");
        assert!(!run.all_pass());
    }

    #[test]
    fn non_cdc_structure_is_rejected() {
        let cfg = ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            dim: 8,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            num_classes: 2,
            seed: 3,
        };
        let model = Model::build(
            cfg,
            &StructureSpec {
                structure: Structure::VptDeep,
                da: false,
                gamma_init: GammaInit::Identity,
                prompts: 2,
                ar: ArMode::None,
                ar_k: 0,
                ar_layers: None,
            },
            1,
        )
        .unwrap();
        assert!(verify_model(&model, &test_image(1), 1e-10, KeyPath::LnBypassed).is_err());
    }

    #[test]
    fn zeroed_queries_export_uniform_attention() {
        let mut model = cdc_model(false);
        for layer in &mut model.backbone.layers {
            layer.w_q = Tensor::zeros(vec![8, 8]);
            layer.b_q = Tensor::zeros(vec![1, 8]);
        }
        let rows = export_attention(&model, &test_image(2)).unwrap();
        let slots = 1 + model.bank.n + model.config().num_patches();
        for (_, vals) in &rows {
            for &v in vals {
                assert!((v - 1.0 / slots as f64).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn export_matches_records_and_contract() {
        let model = cdc_model(false);
        let image = test_image(12);
        let rows = export_attention(&model, &image).unwrap();
        let cfg = model.config();
        assert_eq!(rows.len(), cfg.layers);
        assert!(rows.iter().all(|(_, v)| v.len() == cfg.num_patches()));

        let (_, records) = model.forward(&image, AttnCapture::Full).unwrap();
        for ((layer, vals), rec) in rows.iter().zip(records.iter()) {
            assert_eq!(*layer, rec.layer);
            for (a, b) in vals.iter().zip(rec.cls_image_mean.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        let csv = attention_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap().split(',').count(),
            1 + cfg.num_patches()
        );
        assert_eq!(lines.count(), cfg.layers);
    }
}
