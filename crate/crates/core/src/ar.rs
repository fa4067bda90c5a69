//! Attentive reinforcement: pick the k image-token outputs the class token
//! attends to most, and add learnable prompts to them.
//!
//! Salience comes from the head-mean post-softmax class row of the same
//! layer's attention record. Ranking is non-differentiable; the gather is
//! straight-through (gradient of P_re[j] equals the gradient flowing into
//! image row omega[j]).

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::vit::AttentionRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArMode {
    #[default]
    None,
    /// Reinforce every image token (k = M, identity ordering).
    All,
    /// Reinforce the top-k most salient image tokens.
    #[serde(rename = "topk")]
    TopK,
}

impl ArMode {
    pub fn name(self) -> &'static str {
        match self {
            ArMode::None => "none",
            ArMode::All => "all",
            ArMode::TopK => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<ArMode> {
        match s {
            "none" => Ok(ArMode::None),
            "all" => Ok(ArMode::All),
            "topk" => Ok(ArMode::TopK),
            other => Err(Error::config(format!("unknown ar mode '{other}'"))),
        }
    }
}

/// Result of top-k salience selection at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SalienceSelection {
    pub layer: usize,
    /// Selected image-token indices, descending by salience.
    pub omega: Vec<usize>,
    /// The head-mean class-row weights the ranking used (length M).
    pub weights_used: Vec<f64>,
}

/// Indices of the k largest entries of `w`, descending by value, ties broken
/// by the smaller index. `k` may be 0; `k > len(w)` is a contract error.
pub fn topk_select(w: &[f64], k: usize, layer: usize) -> Result<SalienceSelection> {
    if k > w.len() {
        return Err(Error::contract(format!(
            "top-k asked for {k} of {} entries",
            w.len()
        )));
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(SalienceSelection {
        layer,
        omega: idx,
        weights_used: w.to_vec(),
    })
}

/// Adds P_re rows to the selected image-token rows: row omega[j] += P_re[j].
pub fn reinforce(tape: &mut Tape, z_out: Var, sel: &SalienceSelection, p_re: Var) -> Result<Var> {
    let rows = tape.shape(p_re).0;
    if rows != sel.omega.len() {
        return Err(Error::contract(format!(
            "{} reinforcement prompts for {} selected tokens",
            rows,
            sel.omega.len()
        )));
    }
    tape.scatter_add_rows(z_out, p_re, &sel.omega)
}

/// Applies the configured AR setting to one layer's image-token outputs.
/// Returns the (possibly reinforced) image block and the selection used.
pub fn apply_ar(
    tape: &mut Tape,
    mode: ArMode,
    z_out: Var,
    rec: &AttentionRecord,
    p_re: Option<Var>,
    layer: usize,
) -> Result<(Var, Option<SalienceSelection>)> {
    match mode {
        ArMode::None => Ok((z_out, None)),
        ArMode::All => {
            let m = tape.shape(z_out).0;
            let sel = SalienceSelection {
                layer,
                omega: (0..m).collect(),
                weights_used: rec.cls_image_mean.clone(),
            };
            let p_re = p_re.ok_or_else(|| Error::contract("ar mode all needs P_re"))?;
            let z = reinforce(tape, z_out, &sel, p_re)?;
            Ok((z, Some(sel)))
        }
        ArMode::TopK => {
            let p_re = p_re.ok_or_else(|| Error::contract("ar mode topk needs P_re"))?;
            let k = tape.shape(p_re).0;
            let sel = topk_select(&rec.cls_image_mean, k, layer)?;
            let z = reinforce(tape, z_out, &sel, p_re)?;
            Ok((z, Some(sel)))
        }
    }
}
