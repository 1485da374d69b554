//! Closed-form MAC models and counted forward passes.
//!
//! One MAC is one multiply-add inside a matrix product. Softmax, sigmoid,
//! layer norm and element-wise arithmetic are not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::SiaMode;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ENCODER_SCHEDULE, RT2T_SCHEDULE};
use crate::layers::Graph;
use crate::macs::{self, MacReport};
use crate::model::{
    synthetic_scene, DecoderAttention, ForwardOptions, Level, MaskSource, Modality, Model,
    ModelConfig, PredictionSet,
};
use crate::tensor::Tensor;

/// Key set of one decoder attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Every patch plus both task tokens.
    Full,
    /// Task tokens, `n_fg` foreground patches and, when present, the
    /// background token.
    Sia { with_background: bool },
    /// Masked execution of SIA: every patch stays in the key set.
    MaskedSia { with_background: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionCost {
    /// Query, key, value and output projections.
    pub projection: u64,
    /// `Q·Kᵀ`.
    pub score: u64,
    /// `A·V`.
    pub value: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.projection + self.score + self.value
    }

    /// Score plus value products, the part that grows with the key count.
    pub fn mixing(&self) -> u64 {
        self.score + self.value
    }
}

fn attention(q: usize, kv: usize, e: usize) -> AttentionCost {
    let (q, kv, e) = (q as u64, kv as u64, e as u64);
    AttentionCost {
        projection: 2 * q * e * e + 2 * kv * e * e,
        score: q * kv * e,
        value: q * kv * e,
    }
}

/// Cost of one decoder attention over `l` patches plus two task tokens.
pub fn closed_form_attention_cost(
    l: usize,
    n_fg: usize,
    e: usize,
    variant: Variant,
) -> Result<AttentionCost> {
    if n_fg > l {
        return Err(Error::Contract(format!(
            "{n_fg} foreground tokens out of {l}"
        )));
    }
    let q = l + 2;
    let kv = match variant {
        Variant::Full => l + 2,
        Variant::Sia { with_background } => n_fg + 2 + usize::from(with_background),
        Variant::MaskedSia { with_background } => l + 2 + usize::from(with_background),
    };
    Ok(attention(q, kv, e))
}

fn ffn(n: usize, e: usize, ratio: usize) -> u64 {
    2 * (n * e * e * ratio) as u64
}

fn layer(n: usize, e: usize, ratio: usize) -> u64 {
    attention(n, n, e).total() + ffn(n, e, ratio)
}

fn linear(n: usize, i: usize, o: usize) -> u64 {
    (n * i * o) as u64
}

/// Patch-task attention, dense projection and token-supervised products
/// for both tasks.
fn heads(l: usize, d: usize) -> u64 {
    let pta = linear(l, d, d) + 2 * linear(1, d, d) + 2 * (l * d) as u64;
    2 * (pta + linear(l, d, 1) + (l * d) as u64)
}

fn sq(g: (usize, usize)) -> usize {
    g.0 * g.1
}

/// Closed-form MACs of a whole forward pass, keyed by stage:
/// `encoder`, `convertor`, `decoder/d16`, `decoder/d8`, `decoder/d4` and
/// `decoder/d1`. `foreground` holds the mask counts at 1/8 and 1/4.
pub fn model_macs(
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    foreground: [usize; 2],
) -> Result<BTreeMap<String, u64>> {
    cfg.validate()?;
    let (c, d, r) = (cfg.c, cfg.d, cfg.ffn_ratio);
    let l: Vec<usize> = Level::ALL.iter().map(|&lv| sq(cfg.grid(lv))).collect();
    let (l16, l8, l4, l1) = (l[0], l[1], l[2], l[3]);
    let [s1, s2, s3] = ENCODER_SCHEDULE;

    let encoder = linear(l4, 3 * s1.k * s1.k, c)
        + layer(l4, c, r)
        + linear(l8, c * s2.k * s2.k, c)
        + layer(l8, c, r)
        + linear(l16, c * s3.k * s3.k, c)
        + linear(l16, c, d)
        + cfg.encoder_layers as u64 * layer(l16, d, r);
    let streams = if cfg.modality == Modality::Rgbd { 2 } else { 1 };

    let convertor = match cfg.modality {
        Modality::Rgb => cfg.convertor_layers as u64 * layer(l16, d, r),
        Modality::Rgbd => {
            let round =
                2 * (attention(l16, l16, d).total() + ffn(l16, d, r)) + 2 * layer(l16, d, r);
            (cfg.convertor_layers / 2) as u64 * round + linear(l16, 2 * d, d)
        }
    };

    let mut out = BTreeMap::new();
    out.insert("encoder".to_owned(), streams * encoder);
    out.insert("convertor".to_owned(), convertor);
    out.insert(
        "decoder/d16".to_owned(),
        cfg.decoder_layers[0] as u64 * layer(l16 + 2, d, r) + heads(l16, d),
    );
    for (i, (lv, prev)) in [(l8, l16), (l4, l8)].into_iter().enumerate() {
        let spec = RT2T_SCHEDULE[i];
        let up = linear(prev, d, c) + linear(prev, c, c * spec.k * spec.k);
        let fuse = linear(lv, 2 * c, c) + linear(lv, c, d);
        let n_fg = foreground[i];
        let variant = match (opts.decoder_attention, opts.sia_mode) {
            (DecoderAttention::SelfAttention, _) => Variant::Full,
            (DecoderAttention::Sia, SiaMode::Select) => Variant::Sia {
                with_background: n_fg < lv,
            },
            (DecoderAttention::Sia, SiaMode::Masked) => Variant::MaskedSia {
                with_background: n_fg < lv,
            },
        };
        let block = closed_form_attention_cost(lv, n_fg, d, variant)?.total() + ffn(lv + 2, d, r);
        let key = format!("decoder/{}", Level::ALL[i + 1].tag());
        out.insert(
            key,
            up + fuse + cfg.decoder_layers[i + 1] as u64 * block + heads(lv, d),
        );
    }
    let spec = RT2T_SCHEDULE[2];
    out.insert(
        "decoder/d1".to_owned(),
        linear(l4, d, c) + linear(l4, c, c * spec.k * spec.k) + linear(l1, c, d) + heads(l1, d),
    );
    Ok(out)
}

/// Result of a forward pass with MAC counting enabled.
#[derive(Debug, Clone)]
pub struct CountedForward {
    pub predictions: PredictionSet,
    pub report: MacReport,
    /// Foreground counts of the masks used at 1/8 and 1/4.
    pub foreground: [usize; 2],
}

pub fn counted_forward(
    model: &Model,
    rgb: &Tensor,
    depth: Option<&DepthMap>,
    opts: &ForwardOptions,
) -> Result<CountedForward> {
    let (out, report) = macs::count(|| -> Result<_> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.store);
        let fv = model.forward_on(&g, rgb, depth, opts)?;
        let fg = [fv.masks[0].n_foreground(), fv.masks[1].n_foreground()];
        Ok((fv.predictions(), fg))
    });
    let (predictions, foreground) = out?;
    Ok(CountedForward {
        predictions,
        report,
        foreground,
    })
}

fn is_decoder_mixing(label: &str) -> bool {
    label.starts_with("decoder/")
        && (label.ends_with("/attn/score") || label.ends_with("/attn/value"))
}

fn reduction(baseline: u64, reduced: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - reduced as f64 / baseline as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSavings {
    pub level: Level,
    pub tokens: usize,
    pub foreground: usize,
    /// Score plus value MACs of the level's attention layers.
    pub baseline_mixing: u64,
    pub sia_mixing: u64,
    pub reduction: f64,
    pub predicted_reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavingsReport {
    pub baseline_total: u64,
    pub sia_total: u64,
    pub total_reduction: f64,
    pub levels: Vec<LevelSavings>,
    pub decoder_mixing_baseline: u64,
    pub decoder_mixing_sia: u64,
    pub decoder_mixing_reduction: f64,
    /// Decoder score/value reduction predicted by the closed forms.
    pub predicted_decoder_mixing_reduction: f64,
    pub baseline: MacReport,
    pub sia: MacReport,
}

impl SavingsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "baseline_total\t{}", self.baseline_total);
        let _ = writeln!(s, "sia_total\t{}", self.sia_total);
        let _ = writeln!(
            s,
            "total_reduction_pct\t{:.4}",
            100.0 * self.total_reduction
        );
        let _ = writeln!(
            s,
            "decoder_attention_mixing_baseline\t{}",
            self.decoder_mixing_baseline
        );
        let _ = writeln!(
            s,
            "decoder_attention_mixing_sia\t{}",
            self.decoder_mixing_sia
        );
        let _ = writeln!(
            s,
            "decoder_attention_mixing_reduction_pct\t{:.4}",
            100.0 * self.decoder_mixing_reduction
        );
        let _ = writeln!(
            s,
            "decoder_attention_mixing_predicted_pct\t{:.4}",
            100.0 * self.predicted_decoder_mixing_reduction
        );
        for l in &self.levels {
            let tag = l.level.tag();
            let _ = writeln!(s, "{tag}.tokens\t{}", l.tokens);
            let _ = writeln!(s, "{tag}.foreground\t{}", l.foreground);
            let _ = writeln!(s, "{tag}.baseline_mixing\t{}", l.baseline_mixing);
            let _ = writeln!(s, "{tag}.sia_mixing\t{}", l.sia_mixing);
            let _ = writeln!(s, "{tag}.reduction_pct\t{:.4}", 100.0 * l.reduction);
            let _ = writeln!(
                s,
                "{tag}.predicted_pct\t{:.4}",
                100.0 * l.predicted_reduction
            );
        }
        s
    }
}

/// Counts the SIA decoder against the all-self-attention decoder with the
/// same weights, using evenly spread synthetic masks with foreground
/// fractions `fg` at 1/8 and 1/4.
pub fn savings_report(model: &Model, fg: [f64; 2]) -> Result<SavingsReport> {
    let cfg = &model.cfg;
    let (rgb, _) = synthetic_scene(cfg.side);
    let depth = match cfg.modality {
        Modality::Rgb => None,
        Modality::Rgbd => Some(DepthMap::new(rgb_luma(&rgb))?),
    };
    let sia_opts = ForwardOptions {
        sia_mode: SiaMode::Select,
        decoder_attention: DecoderAttention::Sia,
        mask_source: MaskSource::Synthetic(fg),
    };
    let base_opts = ForwardOptions {
        decoder_attention: DecoderAttention::SelfAttention,
        ..sia_opts
    };
    let sia = counted_forward(model, &rgb, depth.as_ref(), &sia_opts)?;
    let base = counted_forward(model, &rgb, depth.as_ref(), &base_opts)?;

    let d = cfg.d;
    let mut levels = Vec::new();
    let (mut pred_base, mut pred_sia) = (0u64, 0u64);
    for (i, &level) in Level::ALL[..3].iter().enumerate() {
        let l = sq(cfg.grid(level));
        let n = cfg.decoder_layers[i] as u64;
        let n_fg = if i == 0 { l } else { sia.foreground[i - 1] };
        let full = n * closed_form_attention_cost(l, l, d, Variant::Full)?.mixing();
        let reduced = if i == 0 {
            full
        } else {
            n * closed_form_attention_cost(
                l,
                n_fg,
                d,
                Variant::Sia {
                    with_background: n_fg < l,
                },
            )?
            .mixing()
        };
        pred_base += full;
        pred_sia += reduced;
        let prefix = format!("decoder/{}/", level.tag());
        let pick =
            |r: &MacReport| r.total_where(|k| k.starts_with(&prefix) && is_decoder_mixing(k));
        let (b, s) = (pick(&base.report), pick(&sia.report));
        levels.push(LevelSavings {
            level,
            tokens: l,
            foreground: n_fg,
            baseline_mixing: b,
            sia_mixing: s,
            reduction: reduction(b, s),
            predicted_reduction: reduction(full, reduced),
        });
    }
    let db = base.report.total_where(is_decoder_mixing);
    let ds = sia.report.total_where(is_decoder_mixing);
    Ok(SavingsReport {
        baseline_total: base.report.total(),
        sia_total: sia.report.total(),
        total_reduction: reduction(base.report.total(), sia.report.total()),
        levels,
        decoder_mixing_baseline: db,
        decoder_mixing_sia: ds,
        decoder_mixing_reduction: reduction(db, ds),
        predicted_decoder_mixing_reduction: reduction(pred_base, pred_sia),
        baseline: base.report,
        sia: sia.report,
    })
}

/// Channel mean of an `h×w×3` image.
pub fn rgb_luma(rgb: &Tensor) -> Tensor {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let data = rgb
        .data()
        .chunks(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect::<Vec<_>>();
    Tensor::new([h, w], data).expect("one value per pixel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{msa_block, ForegroundMask};
    use crate::autograd::ParamStore;
    use crate::init::RngSpec;
    use crate::layers::{Linear, ParamBuilder, TransformerLayerParams};

    fn tiny() -> ModelConfig {
        ModelConfig {
            side: 32,
            c: 8,
            d: 16,
            encoder_layers: 1,
            convertor_layers: 2,
            decoder_layers: [1, 2, 1],
            modality: Modality::Rgb,
            heads: 2,
            encoder_heads: 1,
            ffn_ratio: 2,
            seed: 1,
        }
    }

    #[test]
    fn lone_linear_counts_rows_times_in_times_out() {
        let mut store = ParamStore::new();
        let lin = Linear::new(
            &mut ParamBuilder::new(&mut store, RngSpec::new(0)),
            "lin",
            5,
            3,
            true,
        );
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let (_, r) = macs::count(|| lin.forward(&g, g.constant(Tensor::zeros([7, 5]))).unwrap());
        assert_eq!(r.total(), 7 * 5 * 3);
        assert_eq!(lin.macs(7), 105);
    }

    #[test]
    fn self_attention_hand_formula() {
        let (n, e) = (6usize, 8usize);
        let mut store = ParamStore::new();
        let lp = TransformerLayerParams::new(
            &mut ParamBuilder::new(&mut store, RngSpec::new(0)),
            "l",
            e,
            1,
            4,
        )
        .unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let (_, r) = macs::count(|| msa_block(&g, &lp, g.constant(Tensor::zeros([n, e]))).unwrap());
        let attn = r.total_under("attn");
        assert_eq!(attn, (2 * n * n * e + 4 * n * e * e) as u64);
        assert_eq!(
            r.total_under("attn/score") + r.total_under("attn/value"),
            (2 * n * n * e) as u64
        );
        assert_eq!(r.total(), attn + (2 * n * e * 4 * e) as u64);
    }

    #[test]
    fn closed_form_examples() {
        let (l, e) = (30, 8);
        let full = closed_form_attention_cost(l, l, e, Variant::Full).unwrap();
        let sia = closed_form_attention_cost(
            l,
            l,
            e,
            Variant::Sia {
                with_background: true,
            },
        )
        .unwrap();
        assert_eq!(sia.mixing() - full.mixing(), ((l + 2) * e * 2) as u64);

        let empty = closed_form_attention_cost(
            l,
            0,
            e,
            Variant::Sia {
                with_background: true,
            },
        )
        .unwrap();
        assert_eq!(empty.score, ((l + 2) * 3 * e) as u64);
        let double = closed_form_attention_cost(
            2 * l,
            0,
            e,
            Variant::Sia {
                with_background: true,
            },
        )
        .unwrap();
        assert_eq!(double.score, ((2 * l + 2) * 3 * e) as u64);

        let full = closed_form_attention_cost(254, 254, e, Variant::Full).unwrap();
        let half = closed_form_attention_cost(
            254,
            127,
            e,
            Variant::Sia {
                with_background: true,
            },
        )
        .unwrap();
        let ratio = half.score as f64 / full.score as f64;
        assert!((ratio - 130.0 / 256.0).abs() < 1e-15);
        assert!((ratio - 0.508).abs() < 1e-3);

        assert!(closed_form_attention_cost(4, 5, e, Variant::Full).is_err());
    }

    #[test]
    fn counted_model_matches_closed_form_per_stage() {
        for modality in [Modality::Rgb, Modality::Rgbd] {
            let cfg = ModelConfig { modality, ..tiny() };
            let model = Model::new(cfg.clone()).unwrap();
            let (rgb, _) = synthetic_scene(cfg.side);
            let depth =
                (modality == Modality::Rgbd).then(|| DepthMap::new(rgb_luma(&rgb)).unwrap());
            for opts in [
                ForwardOptions::default(),
                ForwardOptions {
                    sia_mode: SiaMode::Masked,
                    ..Default::default()
                },
                ForwardOptions {
                    mask_source: MaskSource::Synthetic([0.3, 0.7]),
                    ..Default::default()
                },
                ForwardOptions {
                    decoder_attention: DecoderAttention::SelfAttention,
                    ..Default::default()
                },
            ] {
                let run = counted_forward(&model, &rgb, depth.as_ref(), &opts).unwrap();
                let closed = model_macs(&cfg, &opts, run.foreground).unwrap();
                for (stage, &m) in &closed {
                    assert_eq!(
                        run.report.total_under(stage),
                        m,
                        "{modality} {opts:?} {stage}"
                    );
                }
                assert_eq!(run.report.total(), closed.values().sum::<u64>());
            }
        }
    }

    #[test]
    fn counting_does_not_change_outputs() {
        let model = Model::new(tiny()).unwrap();
        let (rgb, _) = synthetic_scene(32);
        let plain = model.forward(&rgb, None).unwrap();
        let counted = counted_forward(&model, &rgb, None, &ForwardOptions::default()).unwrap();
        assert_eq!(plain, counted.predictions);
    }

    #[test]
    fn savings_shrink_as_foreground_grows() {
        let model = Model::new(tiny()).unwrap();
        let mut last = f64::INFINITY;
        for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let r = savings_report(&model, [f, f]).unwrap();
            assert!(r.decoder_mixing_reduction <= last + 1e-15);
            assert!(r.total_reduction.is_finite());
            assert!(
                (r.decoder_mixing_reduction - r.predicted_decoder_mixing_reduction).abs() < 1e-12
            );
            last = r.decoder_mixing_reduction;
        }
        // All foreground costs one extra key per level: a small negative saving.
        assert!(last <= 0.0 && last > -0.05);
        let m = ForegroundMask::synthetic((4, 4), 0.5).unwrap();
        assert_eq!(m.n_foreground(), 8);
    }
}
