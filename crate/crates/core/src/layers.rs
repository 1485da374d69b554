//! Parameterized building blocks shared by the encoder, convertor and
//! decoder: linear maps, layer norms, feed-forward networks and the
//! transformer-layer parameter bundle.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{init_with_fan_in, RngSpec};
use crate::macs;
use crate::tensor::Tensor;

/// Read-only view of the parameters used while recording one forward pass.
#[derive(Clone, Copy)]
pub struct Graph<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Graph<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Graph { tape, store }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Allocates parameters with hierarchical names and per-parameter seeds.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: RngSpec,
    prefix: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: RngSpec) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the naming prefix.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_owned());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let rng = self.rng.derive(self.store.len() as u64);
        let value = init_with_fan_in(shape, fan_in, rng);
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }
}

/// `y = x·Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", &[output, input], input);
            let bias = bias.then(|| b.uniform("bias", &[1, output], input));
            Linear {
                weight,
                bias,
                input,
                output,
            }
        })
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::dim("linear", &shape, &[self.output, self.input]));
        }
        let y = x.matmul_nt(g.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(g.param(b)),
            None => Ok(y),
        }
    }

    /// MACs of one forward over `rows` inputs.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.input * self.output) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        b.scoped(name, |b| LayerNormParams {
            gain: b.constant("gain", Tensor::full([width], 1.0)),
            bias: b.constant("bias", Tensor::zeros([width])),
        })
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(g.param(self.gain), g.param(self.bias))
    }
}

/// Position-wise feed-forward network `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize, ratio: usize) -> Self {
        b.scoped("ffn", |b| FeedForward {
            fc1: Linear::new(b, "fc1", width, width * ratio, true),
            fc2: Linear::new(b, "fc2", width * ratio, width, true),
        })
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let _s = macs::scope("ffn");
        let h = self.fc1.forward(g, x)?.gelu();
        self.fc2.forward(g, h)
    }
}

/// Query, key, value and output projections of a multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(b.scoped("attn", |b| AttentionParams {
            w_q: Linear::new(b, "w_q", width, width, false),
            w_k: Linear::new(b, "w_k", width, width, false),
            w_v: Linear::new(b, "w_v", width, width, false),
            w_o: Linear::new(b, "w_o", width, width, false),
            heads,
        }))
    }

    pub fn width(&self) -> usize {
        self.w_q.input
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }
}

/// Pre-norm transformer layer: attention and feed-forward, each preceded
/// by a layer norm and wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
}

impl TransformerLayerParams {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        width: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(TransformerLayerParams {
                norm1: LayerNormParams::new(b, "norm1", width),
                attn: AttentionParams::new(b, width, heads)?,
                norm2: LayerNormParams::new(b, "norm2", width),
                ffn: FeedForward::new(b, width, ffn_ratio),
            })
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    /// `x + FFN(LN(x))`.
    pub fn ffn_residual<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm2.forward(g, x)?;
        x.add(self.ffn.forward(g, h)?)
    }
}
