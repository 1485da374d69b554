//! Central finite-difference verification of model gradients.

use std::fmt::Write as _;

use crate::autograd::{ParamId, Tape};
use crate::error::Result;
use crate::geometry::DepthMap;
use crate::layers::Graph;
use crate::model::{ConvertorParams, ForwardOptions, MaskSource, Model};
use crate::objectives::{total_loss_var, GroundTruth, LossTerms};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so entries whose true gradient
/// is numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}[{}]\tanalytic {:.12e}\tnumeric {:.12e}\trel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            );
        }
        let _ = writeln!(s, "max_rel_error\t{:.3e}", self.max_rel_error);
        s
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Saliency and boundary tokens (checked in full) and one weight from each
/// module (checked at its largest-gradient entry).
pub fn sampled_params(model: &Model) -> (Vec<ParamId>, Vec<ParamId>) {
    let p = &model.params;
    let dec = &p.decoder;
    let full = vec![dec.tasks.saliency, dec.tasks.boundary];
    let mut sampled = vec![
        p.rgb_encoder.embed1.weight,
        p.rgb_encoder.block1.attn.w_q.weight,
    ];
    if let Some(layer) = p.rgb_encoder.layers.first() {
        sampled.push(layer.ffn.fc2.weight);
    }
    if let Some(d) = &p.depth_encoder {
        sampled.push(d.embed2.weight);
    }
    match &p.convertor {
        ConvertorParams::Rgb(layers) => sampled.extend(layers.first().map(|l| l.attn.w_k.weight)),
        ConvertorParams::Rgbd { rounds, fuse } => {
            sampled.extend(rounds.first().map(|r| r.cross.attn.w_q.weight));
            sampled.push(fuse.weight);
        }
    }
    for layers in &dec.layers {
        sampled.extend(layers.first().map(|l| l.attn.w_v.weight));
    }
    sampled.push(dec.up[0].expand.weight);
    sampled.push(dec.fuse[1].reduce.weight);
    sampled.push(dec.heads[2].saliency.w_k.weight);
    sampled.push(dec.heads[3].dense_boundary.weight);
    sampled.push(dec.heads[3].norm.gain);
    sampled.push(dec.tasks.pe_background);
    if let Some(z) = dec.depth_scales {
        sampled.push(z[1]);
    }
    (full, sampled)
}

fn loss_and_grads(
    model: &Model,
    rgb: &Tensor,
    depth: Option<&DepthMap>,
    gt: &GroundTruth,
    opts: &ForwardOptions,
) -> Result<(f64, crate::autograd::Gradients)> {
    let tape = Tape::new();
    let g = Graph::new(&tape, &model.store);
    let fv = model.forward_on(&g, rgb, depth, opts)?;
    let loss = total_loss_var(&fv.levels, gt, LossTerms::ALL)?;
    Ok((loss.value().item()?, tape.gradients(loss)?))
}

fn loss_at(
    model: &mut Model,
    id: ParamId,
    index: usize,
    value: f64,
    eval: &dyn Fn(&Model) -> Result<f64>,
) -> Result<f64> {
    let original = model.store.value(id).clone();
    let mut data = original.to_vec();
    data[index] = value;
    model
        .store
        .set_value(id, Tensor::new(original.shape().to_vec(), data)?)?;
    let out = eval(model);
    model.store.set_value(id, original)?;
    out
}

/// Compares autograd against central differences of `L_total`. Masks are
/// fixed synthetic half-foreground masks so that perturbations cannot flip
/// a mask bit.
pub fn gradient_check(
    model: &mut Model,
    rgb: &Tensor,
    depth: Option<&DepthMap>,
    gt: &GroundTruth,
) -> Result<GradCheckReport> {
    let opts = ForwardOptions {
        mask_source: MaskSource::Synthetic([0.5, 0.5]),
        ..Default::default()
    };
    let (_, grads) = loss_and_grads(model, rgb, depth, gt, &opts)?;
    let eval = |m: &Model| loss_and_grads(m, rgb, depth, gt, &opts).map(|(l, _)| l);

    let (full, sampled) = sampled_params(model);
    let mut targets = Vec::new();
    for id in full {
        targets.extend((0..model.store.value(id).len()).map(|i| (id, i)));
    }
    for id in sampled {
        let g = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape().to_vec()));
        let best = (0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0);
        targets.push((id, best));
    }

    let mut entries = Vec::with_capacity(targets.len());
    for (id, index) in targets {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
        let x = model.store.value(id).data()[index];
        let hi = loss_at(model, id, index, x + FD_STEP, &eval)?;
        let lo = loss_at(model, id, index, x - FD_STEP, &eval)?;
        let numeric = (hi - lo) / (2.0 * FD_STEP);
        entries.push(GradCheckEntry {
            param: model.store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthetic_scene, Modality, ModelConfig};

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn tiny_model_gradients_match_differences() {
        let cfg = ModelConfig {
            side: 16,
            c: 4,
            d: 8,
            encoder_layers: 1,
            convertor_layers: 2,
            decoder_layers: [1, 1, 1],
            modality: Modality::Rgbd,
            heads: 2,
            encoder_heads: 1,
            ffn_ratio: 2,
            seed: 5,
        };
        let mut model = Model::new(cfg).unwrap();
        let (rgb, gt) = synthetic_scene(16);
        let depth = DepthMap::new(crate::complexity::rgb_luma(&rgb)).unwrap();
        let gt = GroundTruth::new(gt).unwrap();
        let report = gradient_check(&mut model, &rgb, Some(&depth), &gt).unwrap();
        assert!(report.entries.len() > 16);
        assert!(report.max_rel_error < 1e-4, "{}", report.to_text());
    }
}
