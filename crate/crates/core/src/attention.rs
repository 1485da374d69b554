//! Attention mechanisms: multi-head self-attention blocks, cross-modality
//! attention, sigmoid patch-task attention and select-integrate attention
//! (SIA) with its two equivalent execution modes.
//!
//! SIA lets every patch and task token query a reduced key set: the task
//! tokens, the foreground patches picked out by a binary mask, and one
//! background token that averages every masked-out patch. In
//! [`SiaMode::Select`] the foreground rows are gathered physically. In
//! [`SiaMode::Masked`] all patches stay in the key set and background
//! columns receive a [`MASK_LOGIT`] bias, which gives the same outputs with
//! static shapes.

use crate::autograd::{ParamId, Var};
use crate::error::{Error, Result};
use crate::geometry::{resize_nearest, TokenSeq};
use crate::layers::{AttentionParams, Graph, Linear, ParamBuilder, TransformerLayerParams};
use crate::macs;
use crate::tensor::Tensor;

/// Additive logit used for masked-out keys.
pub const MASK_LOGIT: f64 = -1e30;

/// Multi-head scaled dot-product attention with output projection.
///
/// `q_in` is `nq×e`; `k_in` and `v_in` are `nk×e`. `bias`, when present, is
/// an `nq×nk` additive logit mask.
pub fn multi_head_attention<'t>(
    g: &Graph<'t>,
    p: &AttentionParams,
    q_in: Var<'t>,
    k_in: Var<'t>,
    v_in: Var<'t>,
    bias: Option<&Tensor>,
) -> Result<Var<'t>> {
    let (q, k, v) = {
        let _s = macs::scope("proj");
        (
            p.w_q.forward(g, q_in)?,
            p.w_k.forward(g, k_in)?,
            p.w_v.forward(g, v_in)?,
        )
    };
    let dh = p.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice_cols(h * dh, dh)?,
                k.slice_cols(h * dh, dh)?,
                v.slice_cols(h * dh, dh)?,
            )
        };
        let mut logits = {
            let _s = macs::scope("score");
            qh.matmul_nt(kh)?.scale(scale)
        };
        if let Some(b) = bias {
            logits = logits.add_const(b)?;
        }
        let weights = logits.softmax_rows()?;
        let _s = macs::scope("value");
        heads.push(weights.matmul(vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_cols(&heads)?
    };
    let _s = macs::scope("proj");
    p.w_o.forward(g, merged)
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `+ FFN(LN(·))`.
pub fn msa_block<'t>(g: &Graph<'t>, layer: &TransformerLayerParams, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != layer.width() {
        return Err(Error::dim("msa_block", &shape, &[layer.width()]));
    }
    let h = layer.norm1.forward(g, x)?;
    let a = {
        let _s = macs::scope("attn");
        multi_head_attention(g, &layer.attn, h, h, h, None)?
    };
    let x = x.add(a)?;
    layer.ffn_residual(g, x)
}

/// Cross-modality attention layer. Each stream queries the other with the
/// shared projections, then goes through its own residual and FFN:
/// returns `(CA(a, b), CA(b, a))`.
pub fn cross_modality_attention<'t>(
    g: &Graph<'t>,
    layer: &TransformerLayerParams,
    a: Var<'t>,
    b: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::dim("cross_modality_attention", &sa, &sb));
    }
    let ha = layer.norm1.forward(g, a)?;
    let hb = layer.norm1.forward(g, b)?;
    let (ca, cb) = {
        let _s = macs::scope("attn");
        (
            multi_head_attention(g, &layer.attn, ha, hb, hb, None)?,
            multi_head_attention(g, &layer.attn, hb, ha, ha, None)?,
        )
    };
    let a = layer.ffn_residual(g, a.add(ca)?)?;
    let b = layer.ffn_residual(g, b.add(cb)?)?;
    Ok((a, b))
}

/// Projections for one patch-task attention: queries from patches, a single
/// key and value from the task token.
#[derive(Debug, Clone)]
pub struct PatchTaskParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
}

impl PatchTaskParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        b.scoped(name, |b| PatchTaskParams {
            w_q: Linear::new(b, "w_q", width, width, false),
            w_k: Linear::new(b, "w_k", width, width, false),
            w_v: Linear::new(b, "w_v", width, width, false),
        })
    }
}

/// `sigmoid(Q·Kᵀ/√d)·V + patches` with `Q` from the `l×d` patches and the
/// `1×d` key and value from the task token.
pub fn patch_task_attention<'t>(
    g: &Graph<'t>,
    p: &PatchTaskParams,
    patches: Var<'t>,
    task: Var<'t>,
) -> Result<Var<'t>> {
    let ps = patches.shape();
    let ts = task.shape();
    let d = p.w_q.input;
    if ts != [1, d] {
        return Err(Error::dim("patch_task_attention", &ts, &[1, d]));
    }
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::dim("patch_task_attention", &ps, &[d]));
    }
    let (q, k, v) = {
        let _s = macs::scope("proj");
        (
            p.w_q.forward(g, patches)?,
            p.w_k.forward(g, task)?,
            p.w_v.forward(g, task)?,
        )
    };
    let gate = {
        let _s = macs::scope("score");
        q.matmul_nt(k)?.scale(1.0 / (d as f64).sqrt()).sigmoid()
    };
    let _s = macs::scope("value");
    gate.matmul(v)?.add(patches)
}

/// Saliency and boundary task tokens plus the learned encodings of the
/// saliency, boundary and background tokens.
#[derive(Debug, Clone)]
pub struct TaskTokens {
    pub saliency: ParamId,
    pub boundary: ParamId,
    pub pe_saliency: ParamId,
    pub pe_boundary: ParamId,
    pub pe_background: ParamId,
}

impl TaskTokens {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize) -> Self {
        b.scoped("task", |b| TaskTokens {
            saliency: b.uniform("saliency", &[1, width], width),
            boundary: b.uniform("boundary", &[1, width], width),
            pe_saliency: b.uniform("pe_saliency", &[1, width], width),
            pe_boundary: b.uniform("pe_boundary", &[1, width], width),
            pe_background: b.uniform("pe_background", &[1, width], width),
        })
    }

    pub fn vars<'t>(&self, g: &Graph<'t>) -> TaskVars<'t> {
        TaskVars {
            saliency: g.param(self.saliency),
            boundary: g.param(self.boundary),
        }
    }

    pub fn encodings<'t>(&self, g: &Graph<'t>) -> TaskEncodings<'t> {
        TaskEncodings {
            saliency: g.param(self.pe_saliency),
            boundary: g.param(self.pe_boundary),
            background: g.param(self.pe_background),
        }
    }
}

/// Current saliency and boundary token values during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TaskVars<'t> {
    pub saliency: Var<'t>,
    pub boundary: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct TaskEncodings<'t> {
    pub saliency: Var<'t>,
    pub boundary: Var<'t>,
    pub background: Var<'t>,
}

/// Binary foreground selection over the positions of a token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    bits: Vec<bool>,
    grid: (usize, usize),
}

impl ForegroundMask {
    pub fn new(bits: Vec<bool>, grid: (usize, usize)) -> Result<Self> {
        if bits.len() != grid.0 * grid.1 {
            return Err(Error::dim(
                "ForegroundMask",
                &[bits.len()],
                &[grid.0, grid.1],
            ));
        }
        Ok(ForegroundMask { bits, grid })
    }

    /// Thresholds a map at exactly 0.5 (strictly greater is foreground).
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let (h, w) = map.as_matrix("ForegroundMask")?;
        Ok(ForegroundMask {
            bits: map.data().iter().map(|&v| v > 0.5).collect(),
            grid: (h, w),
        })
    }

    /// `round(fraction·l)` foreground positions spread evenly over the grid.
    pub fn synthetic(grid: (usize, usize), fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Contract(format!(
                "foreground fraction {fraction} outside [0, 1]"
            )));
        }
        let l = grid.0 * grid.1;
        let n = (fraction * l as f64).round() as usize;
        let bits = (0..l).map(|j| (j + 1) * n / l > j * n / l).collect();
        Ok(ForegroundMask { bits, grid })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn background_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn to_map(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect::<Vec<_>>();
        Tensor::new([self.grid.0, self.grid.1], data).expect("grid matches bit count")
    }
}

/// Upsamples the previous-level prediction 2× per axis (nearest) and
/// binarizes it at 0.5.
pub fn prepare_mask(prev_pred: &Tensor, target_grid: (usize, usize)) -> Result<ForegroundMask> {
    let (h, w) = prev_pred.as_matrix("prepare_mask")?;
    if target_grid != (2 * h, 2 * w) {
        return Err(Error::Contract(format!(
            "mask source {h}×{w} is not half of target {}×{}",
            target_grid.0, target_grid.1
        )));
    }
    ForegroundMask::from_map(&resize_nearest(prev_pred, target_grid)?)
}

/// Mean of the background rows, or `None` when every position is foreground.
pub fn background_token(seq: &TokenSeq, mask: &ForegroundMask) -> Result<Option<Tensor>> {
    if mask.len() != seq.len() {
        return Err(Error::dim("background_token", &[mask.len()], &[seq.len()]));
    }
    let bg = mask.background_indices();
    if bg.is_empty() {
        return Ok(None);
    }
    let e = seq.width();
    let mut out = vec![0.0; e];
    for &i in &bg {
        for (o, x) in out.iter_mut().zip(seq.tokens().row(i)) {
            *o += x;
        }
    }
    let inv = 1.0 / bg.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Some(Tensor::new([1, e], out)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiaMode {
    /// Gather foreground rows into the key set (inference form).
    Select,
    /// Keep all rows and mask background columns (training form).
    Masked,
}

fn check_decoder_inputs(
    layer: &TransformerLayerParams,
    patches: &Var<'_>,
    pe: &Var<'_>,
) -> Result<usize> {
    let ps = patches.shape();
    let d = layer.width();
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::dim("decoder block", &ps, &[d]));
    }
    let pes = pe.shape();
    if pes != ps {
        return Err(Error::dim("decoder block position encoding", &pes, &ps));
    }
    Ok(ps[0])
}

fn split_stack<'t>(x: Var<'t>, l: usize) -> Result<(Var<'t>, TaskVars<'t>)> {
    Ok((
        x.slice_rows(1, l)?,
        TaskVars {
            saliency: x.slice_rows(0, 1)?,
            boundary: x.slice_rows(l + 1, 1)?,
        },
    ))
}

/// Self-attention over the stacked `[t^s; patches; t^b]` sequence. The
/// position encoding (patch rows) and learned task encodings are added to
/// queries and keys only.
pub fn decoder_self_attention_block<'t>(
    g: &Graph<'t>,
    layer: &TransformerLayerParams,
    patches: Var<'t>,
    tasks: TaskVars<'t>,
    pe: Var<'t>,
    task_pe: &TaskEncodings<'t>,
) -> Result<(Var<'t>, TaskVars<'t>)> {
    let l = check_decoder_inputs(layer, &patches, &pe)?;
    let x = g
        .tape
        .concat_rows(&[tasks.saliency, patches, tasks.boundary])?;
    let pe_full = g
        .tape
        .concat_rows(&[task_pe.saliency, pe, task_pe.boundary])?;
    let h = layer.norm1.forward(g, x)?;
    let qk = h.add(pe_full)?;
    let a = {
        let _s = macs::scope("attn");
        multi_head_attention(g, &layer.attn, qk, qk, h, None)?
    };
    let x = layer.ffn_residual(g, x.add(a)?)?;
    split_stack(x, l)
}

/// Select-integrate attention block.
///
/// Queries come from `[t^s; patches; t^b]`. Keys and values come from
/// `[t^s; foreground patches; t^g; t^b]`, where `t^g` is the mean of the
/// (normalized) background patches and is omitted when the mask has no
/// background. Both modes return the same values.
#[allow(clippy::too_many_arguments)]
pub fn sia_block<'t>(
    g: &Graph<'t>,
    layer: &TransformerLayerParams,
    patches: Var<'t>,
    tasks: TaskVars<'t>,
    mask: &ForegroundMask,
    pe: Var<'t>,
    task_pe: &TaskEncodings<'t>,
    mode: SiaMode,
) -> Result<(Var<'t>, TaskVars<'t>)> {
    let l = check_decoder_inputs(layer, &patches, &pe)?;
    if mask.len() != l {
        return Err(Error::dim("sia_block mask", &[mask.len()], &[l]));
    }
    let fg = mask.foreground_indices();
    let bg = mask.background_indices();
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Degenerate(
            "no patch keys and no background token".into(),
        ));
    }
    macs::record_foreground(l, fg.len());

    let x = g
        .tape
        .concat_rows(&[tasks.saliency, patches, tasks.boundary])?;
    let pe_full = g
        .tape
        .concat_rows(&[task_pe.saliency, pe, task_pe.boundary])?;
    let h = layer.norm1.forward(g, x)?;
    let q = h.add(pe_full)?;

    let h_s = h.slice_rows(0, 1)?;
    let h_patch = h.slice_rows(1, l)?;
    let h_b = h.slice_rows(l + 1, 1)?;
    let h_g = if bg.is_empty() {
        None
    } else {
        Some(h_patch.mean_rows(&bg)?)
    };

    let (patch_k, patch_v, bias) = match mode {
        SiaMode::Select => {
            let v = h_patch.gather_rows(&fg)?;
            let k = v.add(pe.gather_rows(&fg)?)?;
            (k, v, None)
        }
        SiaMode::Masked => {
            let k = h_patch.add(pe)?;
            let nk = l + 2 + usize::from(h_g.is_some());
            let mut b = vec![0.0; (l + 2) * nk];
            for row in b.chunks_mut(nk) {
                for &j in &bg {
                    row[1 + j] = MASK_LOGIT;
                }
            }
            (k, h_patch, Some(Tensor::new([l + 2, nk], b)?))
        }
    };

    let mut keys = vec![h_s.add(task_pe.saliency)?, patch_k];
    let mut values = vec![h_s, patch_v];
    if let Some(tg) = h_g {
        keys.push(tg.add(task_pe.background)?);
        values.push(tg);
    }
    keys.push(h_b.add(task_pe.boundary)?);
    values.push(h_b);
    let k = g.tape.concat_rows(&keys)?;
    let v = g.tape.concat_rows(&values)?;

    let a = {
        let _s = macs::scope("attn");
        multi_head_attention(g, &layer.attn, q, k, v, bias.as_ref())?
    };
    let x = layer.ffn_residual(g, x.add(a)?)?;
    split_stack(x, l)
}
