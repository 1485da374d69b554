//! Full saliency model: a soft-split transformer encoder per modality, a
//! convertor, and a multi-level decoder that upsamples tokens with reverse
//! T2T folding and predicts saliency and boundary maps at 1/16, 1/8, 1/4
//! and full resolution.

use crate::attention::{
    cross_modality_attention, decoder_self_attention_block, msa_block, patch_task_attention,
    prepare_mask, sia_block, ForegroundMask, PatchTaskParams, SiaMode, TaskTokens, TaskVars,
};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    depth_pe_table, spatial_pe_2d, DepthMap, SoftSplitSpec, ENCODER_SCHEDULE, RT2T_SCHEDULE,
};
use crate::init::RngSpec;
use crate::layers::{Graph, LayerNormParams, Linear, ParamBuilder, TransformerLayerParams};
use crate::macs;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Rgbd,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "rgbd" => Ok(Modality::Rgbd),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Rgbd => "rgbd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input side `h = w`.
    pub side: usize,
    /// Low-level token width.
    pub c: usize,
    /// Decoder token width.
    pub d: usize,
    pub encoder_layers: usize,
    pub convertor_layers: usize,
    /// Decoder layers at 1/16, 1/8 and 1/4.
    pub decoder_layers: [usize; 3],
    pub modality: Modality,
    /// Heads of every width-`d` attention.
    pub heads: usize,
    /// Heads of the width-`c` encoder blocks.
    pub encoder_heads: usize,
    pub ffn_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            side: 64,
            c: 64,
            d: 384,
            encoder_layers: 4,
            convertor_layers: 4,
            decoder_layers: [4, 2, 2],
            modality: Modality::Rgb,
            heads: 6,
            encoder_heads: 1,
            ffn_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.side == 0 || !self.side.is_multiple_of(16) {
            return fail(format!(
                "side {} must be a positive multiple of 16",
                self.side
            ));
        }
        if self.c == 0 || self.d == 0 || self.ffn_ratio == 0 {
            return fail("widths and ffn ratio must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            ));
        }
        if self.encoder_heads == 0 || !self.c.is_multiple_of(self.encoder_heads) {
            return fail(format!(
                "c = {} is not divisible by {} heads",
                self.c, self.encoder_heads
            ));
        }
        if !self.d.is_multiple_of(4) {
            return fail(format!("d = {} must be divisible by 4", self.d));
        }
        if self.modality == Modality::Rgbd {
            if !self.d.is_multiple_of(8) {
                return fail(format!("rgbd needs d divisible by 8, got {}", self.d));
            }
            if !self.convertor_layers.is_multiple_of(2) {
                return fail(format!(
                    "rgbd needs an even convertor layer count, got {}",
                    self.convertor_layers
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self, level: Level) -> (usize, usize) {
        let s = self.side / level.divisor();
        (s, s)
    }
}

/// Decoder output scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Sixteenth,
    Eighth,
    Quarter,
    Full,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Sixteenth, Level::Eighth, Level::Quarter, Level::Full];

    pub fn divisor(self) -> usize {
        match self {
            Level::Sixteenth => 16,
            Level::Eighth => 8,
            Level::Quarter => 4,
            Level::Full => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::Sixteenth => "1/16",
            Level::Eighth => "1/8",
            Level::Quarter => "1/4",
            Level::Full => "1/1",
        }
    }

    /// Short form usable in file names.
    pub fn tag(self) -> &'static str {
        match self {
            Level::Sixteenth => "d16",
            Level::Eighth => "d8",
            Level::Quarter => "d4",
            Level::Full => "d1",
        }
    }
}

/// Maps predicted at one level, each `h_i×w_i` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: Level,
    pub grid: (usize, usize),
    pub dense_saliency: Tensor,
    pub dense_boundary: Tensor,
    pub token_saliency: Tensor,
    pub token_boundary: Tensor,
}

impl LevelPrediction {
    pub fn maps(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("dense_saliency", &self.dense_saliency),
            ("dense_boundary", &self.dense_boundary),
            ("token_saliency", &self.token_saliency),
            ("token_boundary", &self.token_boundary),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub levels: Vec<LevelPrediction>,
}

impl PredictionSet {
    pub fn level(&self, level: Level) -> &LevelPrediction {
        self.levels
            .iter()
            .find(|l| l.level == level)
            .expect("every level is predicted")
    }

    /// Uniform prediction set, handy for loss checks.
    pub fn constant(cfg: &ModelConfig, value: f64) -> Self {
        let levels = Level::ALL
            .iter()
            .map(|&level| {
                let grid = cfg.grid(level);
                let m = Tensor::full([grid.0, grid.1], value);
                LevelPrediction {
                    level,
                    grid,
                    dense_saliency: m.clone(),
                    dense_boundary: m.clone(),
                    token_saliency: m.clone(),
                    token_boundary: m,
                }
            })
            .collect();
        PredictionSet { levels }
    }
}

/// Recorded level outputs, each shaped `h_i×w_i`.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars<'t> {
    pub level: Level,
    pub grid: (usize, usize),
    pub dense_saliency: Var<'t>,
    pub dense_boundary: Var<'t>,
    pub token_saliency: Var<'t>,
    pub token_boundary: Var<'t>,
}

impl LevelVars<'_> {
    fn values(&self) -> LevelPrediction {
        LevelPrediction {
            level: self.level,
            grid: self.grid,
            dense_saliency: self.dense_saliency.value(),
            dense_boundary: self.dense_boundary.value(),
            token_saliency: self.token_saliency.value(),
            token_boundary: self.token_boundary.value(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenVars<'t> {
    pub tokens: Var<'t>,
    pub grid: (usize, usize),
}

/// Encoder tokens: `t1` at 1/4 and `t2` at 1/8 (width `c`), `te` at 1/16
/// (width `d`).
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput<'t> {
    pub t1: TokenVars<'t>,
    pub t2: TokenVars<'t>,
    pub te: TokenVars<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderAttention {
    /// Select-integrate attention at 1/8 and 1/4.
    Sia,
    /// Plain self-attention at every level (cost baseline).
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSource {
    /// Masks come from the previous level's dense saliency map.
    Predicted,
    /// Fixed evenly spread masks with the given foreground fractions at
    /// 1/8 and 1/4.
    Synthetic([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub sia_mode: SiaMode,
    pub decoder_attention: DecoderAttention,
    pub mask_source: MaskSource,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            sia_mode: SiaMode::Select,
            decoder_attention: DecoderAttention::Sia,
            mask_source: MaskSource::Predicted,
        }
    }
}

/// Everything a recorded forward pass exposes.
pub struct ForwardVars<'t> {
    pub levels: Vec<LevelVars<'t>>,
    /// Task tokens after the last decoder layer; they also drive the
    /// full-resolution heads.
    pub tasks: TaskVars<'t>,
    /// Masks used at 1/8 and 1/4.
    pub masks: Vec<ForegroundMask>,
}

impl ForwardVars<'_> {
    pub fn predictions(&self) -> PredictionSet {
        PredictionSet {
            levels: self.levels.iter().map(LevelVars::values).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed1: Linear,
    pub block1: TransformerLayerParams,
    pub embed2: Linear,
    pub block2: TransformerLayerParams,
    pub embed3: Linear,
    pub to_d: Linear,
    pub layers: Vec<TransformerLayerParams>,
}

#[derive(Debug, Clone)]
pub struct CrossRound {
    pub cross: TransformerLayerParams,
    pub rgb: TransformerLayerParams,
    pub depth: TransformerLayerParams,
}

#[derive(Debug, Clone)]
pub enum ConvertorParams {
    Rgb(Vec<TransformerLayerParams>),
    Rgbd {
        rounds: Vec<CrossRound>,
        fuse: Linear,
    },
}

/// Task-specific dense heads of one level. `norm` is applied to the patch
/// and task tokens before any head reads them.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub norm: LayerNormParams,
    pub saliency: PatchTaskParams,
    pub boundary: PatchTaskParams,
    pub dense_saliency: Linear,
    pub dense_boundary: Linear,
}

/// Reverse T2T: reduce to `c`, expand to `c·k²`, fold.
#[derive(Debug, Clone)]
pub struct Rt2tParams {
    pub reduce: Linear,
    pub expand: Linear,
    pub spec: SoftSplitSpec,
}

/// Fusion of upsampled tokens with encoder tokens: `2c → c → d`.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub reduce: Linear,
    pub expand: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub tasks: TaskTokens,
    pub layers: [Vec<TransformerLayerParams>; 3],
    pub heads: [HeadParams; 4],
    pub up: [Rt2tParams; 3],
    pub fuse: [FuseParams; 2],
    pub full_embed: Linear,
    /// Depth encoding scales at 1/16, 1/8 and 1/4 (rgbd only).
    pub depth_scales: Option<[ParamId; 3]>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub rgb_encoder: EncoderParams,
    pub depth_encoder: Option<EncoderParams>,
    pub convertor: ConvertorParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

fn layer_stack(
    b: &mut ParamBuilder<'_>,
    name: &str,
    n: usize,
    width: usize,
    heads: usize,
    ratio: usize,
) -> Result<Vec<TransformerLayerParams>> {
    (0..n)
        .map(|i| TransformerLayerParams::new(b, &format!("{name}{i}"), width, heads, ratio))
        .collect()
}

fn build_encoder(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<EncoderParams> {
    let [s1, s2, s3] = ENCODER_SCHEDULE;
    let c = cfg.c;
    Ok(EncoderParams {
        embed1: Linear::new(b, "embed1", 3 * s1.k * s1.k, c, true),
        block1: TransformerLayerParams::new(b, "block1", c, cfg.encoder_heads, cfg.ffn_ratio)?,
        embed2: Linear::new(b, "embed2", c * s2.k * s2.k, c, true),
        block2: TransformerLayerParams::new(b, "block2", c, cfg.encoder_heads, cfg.ffn_ratio)?,
        embed3: Linear::new(b, "embed3", c * s3.k * s3.k, c, true),
        to_d: Linear::new(b, "to_d", c, cfg.d, true),
        layers: layer_stack(
            b,
            "layer",
            cfg.encoder_layers,
            cfg.d,
            cfg.heads,
            cfg.ffn_ratio,
        )?,
    })
}

fn build_heads(b: &mut ParamBuilder<'_>, d: usize) -> HeadParams {
    HeadParams {
        norm: LayerNormParams::new(b, "norm", d),
        saliency: PatchTaskParams::new(b, "pta_saliency", d),
        boundary: PatchTaskParams::new(b, "pta_boundary", d),
        dense_saliency: Linear::new(b, "dense_saliency", d, 1, true),
        dense_boundary: Linear::new(b, "dense_boundary", d, 1, true),
    }
}

fn build_rt2t(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, spec: SoftSplitSpec) -> Rt2tParams {
    Rt2tParams {
        reduce: Linear::new(b, "reduce", cfg.d, cfg.c, true),
        expand: Linear::new(b, "expand", cfg.c, cfg.c * spec.k * spec.k, true),
        spec,
    }
}

fn build_decoder(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<DecoderParams> {
    let tasks = TaskTokens::new(b, cfg.d);
    let mut layers: [Vec<TransformerLayerParams>; 3] = Default::default();
    let mut heads = Vec::with_capacity(4);
    let mut up = Vec::with_capacity(3);
    let mut fuse = Vec::with_capacity(2);
    for (i, level) in Level::ALL.iter().enumerate() {
        b.scoped(level.tag(), |b| -> Result<()> {
            if i > 0 {
                up.push(b.scoped("rt2t", |b| build_rt2t(b, cfg, RT2T_SCHEDULE[i - 1])));
            }
            if (1..3).contains(&i) {
                fuse.push(b.scoped("fuse", |b| FuseParams {
                    reduce: Linear::new(b, "reduce", 2 * cfg.c, cfg.c, true),
                    expand: Linear::new(b, "expand", cfg.c, cfg.d, true),
                }));
            }
            if i < 3 {
                layers[i] = layer_stack(
                    b,
                    "layer",
                    cfg.decoder_layers[i],
                    cfg.d,
                    cfg.heads,
                    cfg.ffn_ratio,
                )?;
            }
            heads.push(b.scoped("heads", |b| build_heads(b, cfg.d)));
            Ok(())
        })?;
    }
    let full_embed = b.scoped("d1", |b| Linear::new(b, "embed", cfg.c, cfg.d, true));
    let depth_scales = (cfg.modality == Modality::Rgbd)
        .then(|| [0, 1, 2].map(|i| b.constant(&format!("depth_scale{i}"), Tensor::full([1], 1.0))));
    Ok(DecoderParams {
        tasks,
        layers,
        heads: heads.try_into().expect("four head sets"),
        up: up.try_into().expect("three upsamplers"),
        fuse: fuse.try_into().expect("two fusions"),
        full_embed,
        depth_scales,
    })
}

/// Token-supervised map `sigmoid(t·Tᵀ/√d)` reshaped to `grid`.
pub fn token_supervised_head<'t>(
    patches: Var<'t>,
    task: Var<'t>,
    grid: (usize, usize),
) -> Result<Var<'t>> {
    let ps = patches.shape();
    let ts = task.shape();
    if ts.len() != 2 || ts[0] != 1 || ps.len() != 2 || ts[1] != ps[1] {
        return Err(Error::dim("token_supervised_head", &ps, &ts));
    }
    let logits = task.matmul_nt(patches)?.scale(1.0 / (ps[1] as f64).sqrt());
    logits.sigmoid().reshape([grid.0, grid.1])
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, RngSpec::new(cfg.seed));
        let rgb_encoder = b.scoped("encoder_rgb", |b| build_encoder(b, &cfg))?;
        let depth_encoder = match cfg.modality {
            Modality::Rgb => None,
            Modality::Rgbd => Some(b.scoped("encoder_depth", |b| build_encoder(b, &cfg))?),
        };
        let convertor = b.scoped("convertor", |b| -> Result<ConvertorParams> {
            Ok(match cfg.modality {
                Modality::Rgb => ConvertorParams::Rgb(layer_stack(
                    b,
                    "layer",
                    cfg.convertor_layers,
                    cfg.d,
                    cfg.heads,
                    cfg.ffn_ratio,
                )?),
                Modality::Rgbd => {
                    let rounds = (0..cfg.convertor_layers / 2)
                        .map(|i| {
                            b.scoped(&format!("round{i}"), |b| -> Result<CrossRound> {
                                Ok(CrossRound {
                                    cross: TransformerLayerParams::new(
                                        b,
                                        "cross",
                                        cfg.d,
                                        cfg.heads,
                                        cfg.ffn_ratio,
                                    )?,
                                    rgb: TransformerLayerParams::new(
                                        b,
                                        "rgb",
                                        cfg.d,
                                        cfg.heads,
                                        cfg.ffn_ratio,
                                    )?,
                                    depth: TransformerLayerParams::new(
                                        b,
                                        "depth",
                                        cfg.d,
                                        cfg.heads,
                                        cfg.ffn_ratio,
                                    )?,
                                })
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ConvertorParams::Rgbd {
                        rounds,
                        fuse: Linear::new(b, "fuse", 2 * cfg.d, cfg.d, true),
                    }
                }
            })
        })?;
        let decoder = b.scoped("decoder", |b| build_decoder(b, &cfg))?;
        Ok(Model {
            cfg,
            store,
            params: ModelParams {
                rgb_encoder,
                depth_encoder,
                convertor,
                decoder,
            },
        })
    }

    fn check_inputs(&self, rgb: &Tensor, depth: Option<&DepthMap>) -> Result<()> {
        let s = self.cfg.side;
        if rgb.shape() != [s, s, 3] {
            return Err(Error::dim("model input", rgb.shape(), &[s, s, 3]));
        }
        match (self.cfg.modality, depth) {
            (Modality::Rgb, Some(_)) => {
                Err(Error::Config("rgb mode does not take a depth map".into()))
            }
            (Modality::Rgbd, None) => Err(Error::Config("rgbd mode needs a depth map".into())),
            (Modality::Rgbd, Some(d)) if d.shape() != (s, s) => Err(Error::dim(
                "depth input",
                &[d.shape().0, d.shape().1],
                &[s, s],
            )),
            _ => Ok(()),
        }
    }

    /// Three-stage soft-split encoder over an `h×w×3` image.
    pub fn encode<'t>(
        &self,
        g: &Graph<'t>,
        p: &EncoderParams,
        image: &Tensor,
    ) -> Result<EncoderOutput<'t>> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let [s1, s2, s3] = ENCODER_SCHEDULE;
        let x = g.constant(image.reshape([h * w, 3])?);
        let (x, g1) = x.unfold((h, w), s1)?;
        let t1 = p.embed1.forward(g, x)?;
        let x = msa_block(g, &p.block1, t1)?;
        let (x, g2) = x.unfold(g1, s2)?;
        let t2 = p.embed2.forward(g, x)?;
        let x = msa_block(g, &p.block2, t2)?;
        let (x, g3) = x.unfold(g2, s3)?;
        let x = p.embed3.forward(g, x)?;
        let x = p.to_d.forward(g, x)?;
        let mut x = x.add_const(&spatial_pe_2d(g3, self.cfg.d)?.table)?;
        for layer in &p.layers {
            x = msa_block(g, layer, x)?;
        }
        Ok(EncoderOutput {
            t1: TokenVars {
                tokens: t1,
                grid: g1,
            },
            t2: TokenVars {
                tokens: t2,
                grid: g2,
            },
            te: TokenVars {
                tokens: x,
                grid: g3,
            },
        })
    }

    pub fn convert_rgb<'t>(
        &self,
        g: &Graph<'t>,
        layers: &[TransformerLayerParams],
        enc: &EncoderOutput<'t>,
    ) -> Result<TokenVars<'t>> {
        let mut x = enc.te.tokens;
        for layer in layers {
            x = msa_block(g, layer, x)?;
        }
        Ok(TokenVars {
            tokens: x,
            grid: enc.te.grid,
        })
    }

    pub fn convert_rgbd<'t>(
        &self,
        g: &Graph<'t>,
        rounds: &[CrossRound],
        fuse: &Linear,
        rgb: &EncoderOutput<'t>,
        depth: &EncoderOutput<'t>,
    ) -> Result<TokenVars<'t>> {
        if rgb.te.grid != depth.te.grid {
            let (a, b) = (rgb.te.grid, depth.te.grid);
            return Err(Error::dim("convert_rgbd", &[a.0, a.1], &[b.0, b.1]));
        }
        let (mut a, mut b) = (rgb.te.tokens, depth.te.tokens);
        for r in rounds {
            (a, b) = cross_modality_attention(g, &r.cross, a, b)?;
            a = msa_block(g, &r.rgb, a)?;
            b = msa_block(g, &r.depth, b)?;
        }
        let x = fuse.forward(g, g.tape.concat_cols(&[a, b])?)?;
        Ok(TokenVars {
            tokens: x,
            grid: rgb.te.grid,
        })
    }

    /// Decoder position encoding at one of the three attention levels.
    pub fn decoder_pe<'t>(
        &self,
        g: &Graph<'t>,
        level_index: usize,
        depth: Option<&DepthMap>,
    ) -> Result<Var<'t>> {
        let grid = self.cfg.grid(Level::ALL[level_index]);
        let d = self.cfg.d;
        match (depth, self.params.decoder.depth_scales) {
            (Some(depth), Some(scales)) => {
                let spatial = g.constant(spatial_pe_2d(grid, d / 2)?.table);
                let z = g.param(scales[level_index]);
                let dpe = g
                    .constant(depth_pe_table(depth, grid, d / 2)?)
                    .scale_by(z)?;
                g.tape.concat_cols(&[spatial, dpe])
            }
            _ => Ok(g.constant(spatial_pe_2d(grid, d)?.table)),
        }
    }

    fn heads<'t>(
        &self,
        g: &Graph<'t>,
        hp: &HeadParams,
        patches: Var<'t>,
        tasks: TaskVars<'t>,
        level: Level,
    ) -> Result<LevelVars<'t>> {
        let _s = macs::scope("heads");
        let grid = self.cfg.grid(level);
        let shape = [grid.0, grid.1];
        let patches = hp.norm.forward(g, patches)?;
        let tasks = TaskVars {
            saliency: hp.norm.forward(g, tasks.saliency)?,
            boundary: hp.norm.forward(g, tasks.boundary)?,
        };
        let dense = |pta: &PatchTaskParams, lin: &Linear, task: Var<'t>| -> Result<Var<'t>> {
            let x = patch_task_attention(g, pta, patches, task)?;
            lin.forward(g, x)?.sigmoid().reshape(shape)
        };
        Ok(LevelVars {
            level,
            grid,
            dense_saliency: dense(&hp.saliency, &hp.dense_saliency, tasks.saliency)?,
            dense_boundary: dense(&hp.boundary, &hp.dense_boundary, tasks.boundary)?,
            token_saliency: token_supervised_head(patches, tasks.saliency, grid)?,
            token_boundary: token_supervised_head(patches, tasks.boundary, grid)?,
        })
    }

    fn upsample<'t>(
        &self,
        g: &Graph<'t>,
        p: &Rt2tParams,
        x: Var<'t>,
        from: Level,
        to: Level,
    ) -> Result<Var<'t>> {
        let _s = macs::scope("rt2t");
        let x = p.reduce.forward(g, x)?;
        let x = p.expand.forward(g, x)?;
        x.fold(self.cfg.grid(from), p.spec, self.cfg.grid(to))
    }

    /// Multi-level decoder from the convertor output.
    pub fn decode<'t>(
        &self,
        g: &Graph<'t>,
        tc: &TokenVars<'t>,
        enc: &EncoderOutput<'t>,
        depth: Option<&DepthMap>,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars<'t>> {
        let dp = &self.params.decoder;
        let task_pe = dp.tasks.encodings(g);
        let mut tasks = dp.tasks.vars(g);
        let mut x = tc.tokens;
        let mut levels = Vec::with_capacity(4);
        let mut masks = Vec::with_capacity(2);

        {
            let _s = macs::scope(Level::Sixteenth.tag());
            let pe = self.decoder_pe(g, 0, depth)?;
            for layer in &dp.layers[0] {
                (x, tasks) = decoder_self_attention_block(g, layer, x, tasks, pe, &task_pe)?;
            }
            levels.push(self.heads(g, &dp.heads[0], x, tasks, Level::Sixteenth)?);
        }

        for (i, (level, low)) in [(Level::Eighth, enc.t2), (Level::Quarter, enc.t1)]
            .into_iter()
            .enumerate()
        {
            let _s = macs::scope(level.tag());
            let prev = Level::ALL[i];
            let up = self.upsample(g, &dp.up[i], x, prev, level)?;
            x = {
                let _s = macs::scope("fuse");
                let f = &dp.fuse[i];
                let cat = g.tape.concat_cols(&[up, low.tokens])?;
                f.expand.forward(g, f.reduce.forward(g, cat)?)?
            };
            let grid = self.cfg.grid(level);
            let mask = match opts.mask_source {
                MaskSource::Predicted => prepare_mask(&levels[i].dense_saliency.value(), grid)?,
                MaskSource::Synthetic(f) => ForegroundMask::synthetic(grid, f[i])?,
            };
            let pe = self.decoder_pe(g, i + 1, depth)?;
            for layer in &dp.layers[i + 1] {
                (x, tasks) = match opts.decoder_attention {
                    DecoderAttention::Sia => {
                        sia_block(g, layer, x, tasks, &mask, pe, &task_pe, opts.sia_mode)?
                    }
                    DecoderAttention::SelfAttention => {
                        decoder_self_attention_block(g, layer, x, tasks, pe, &task_pe)?
                    }
                };
            }
            masks.push(mask);
            levels.push(self.heads(g, &dp.heads[i + 1], x, tasks, level)?);
        }

        {
            let _s = macs::scope(Level::Full.tag());
            let up = self.upsample(g, &dp.up[2], x, Level::Quarter, Level::Full)?;
            let x = dp.full_embed.forward(g, up)?;
            levels.push(self.heads(g, &dp.heads[3], x, tasks, Level::Full)?);
        }
        Ok(ForwardVars {
            levels,
            tasks,
            masks,
        })
    }

    /// Records a full forward pass on `g`.
    pub fn forward_on<'t>(
        &self,
        g: &Graph<'t>,
        rgb: &Tensor,
        depth: Option<&DepthMap>,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars<'t>> {
        self.check_inputs(rgb, depth)?;
        let enc = {
            let _s = macs::scope("encoder");
            let _r = macs::scope("rgb");
            self.encode(g, &self.params.rgb_encoder, rgb)?
        };
        let tc = match (&self.params.convertor, depth, &self.params.depth_encoder) {
            (ConvertorParams::Rgb(layers), _, _) => {
                let _s = macs::scope("convertor");
                self.convert_rgb(g, layers, &enc)?
            }
            (ConvertorParams::Rgbd { rounds, fuse }, Some(depth), Some(dp)) => {
                let denc = {
                    let _s = macs::scope("encoder");
                    let _r = macs::scope("depth");
                    self.encode(g, dp, &depth_as_image(depth))?
                };
                let _s = macs::scope("convertor");
                self.convert_rgbd(g, rounds, fuse, &enc, &denc)?
            }
            _ => return Err(Error::Config("rgbd mode needs a depth map".into())),
        };
        let _s = macs::scope("decoder");
        self.decode(g, &tc, &enc, depth, opts)
    }

    pub fn forward_with(
        &self,
        rgb: &Tensor,
        depth: Option<&DepthMap>,
        opts: &ForwardOptions,
    ) -> Result<PredictionSet> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &self.store);
        Ok(self.forward_on(&g, rgb, depth, opts)?.predictions())
    }

    pub fn forward(&self, rgb: &Tensor, depth: Option<&DepthMap>) -> Result<PredictionSet> {
        self.forward_with(rgb, depth, &ForwardOptions::default())
    }
}

/// A depth map repeated over three channels.
pub fn depth_as_image(depth: &DepthMap) -> Tensor {
    let (h, w) = depth.shape();
    let data: Vec<f64> = depth
        .values()
        .data()
        .iter()
        .flat_map(|&v| [v, v, v])
        .collect();
    Tensor::new([h, w, 3], data).expect("three channels per pixel")
}

/// Grayscale scene with a centred bright square covering half the side.
pub fn synthetic_scene(side: usize) -> (Tensor, Tensor) {
    let lo = side / 4;
    let hi = side - side / 4;
    let mut image = Vec::with_capacity(side * side * 3);
    let mut gt = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let inside = (lo..hi).contains(&i) && (lo..hi).contains(&j);
            let v = if inside { 0.9 } else { 0.1 };
            image.extend([v, v * 0.8, v * 0.6]);
            gt.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (
        Tensor::new([side, side, 3], image).expect("image shape"),
        Tensor::new([side, side], gt).expect("mask shape"),
    )
}
