//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. [`backward`] walks the tape in reverse from a scalar loss and
//! accumulates `∂loss/∂param` into the [`ParamStore`] entries that took part
//! in the computation.
//!
//! ```
//! use saliency_core::autograd::{backward, ParamStore, Tape};
//! use saliency_core::tensor::Tensor;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
//! let tape = Tape::new();
//! let x = tape.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
//! let loss = tape.param(&store, w).matmul(x).unwrap().sum();
//! backward(&tape, loss, &mut store).unwrap();
//! assert_eq!(store.get(w).grad.data(), &[3.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{fold_raw, unfold_raw, SoftSplitSpec};
use crate::tensor::{gemm, row_moments, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn reset_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape().to_vec());
    }
}

/// Owns every learnable tensor of a model; layers refer to entries by id.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            id,
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().find(|p| p.name == name).map(|p| p.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn reset_grads(&mut self) {
        for p in &mut self.params {
            p.reset_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            let p = &mut self.params[id.0];
            p.grad = p
                .grad
                .add(g)
                .expect("gradient shape matches parameter shape");
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        b_t: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        a: usize,
        row: usize,
    },
    Scale(usize, f64),
    ScaleBy {
        a: usize,
        s: usize,
    },
    AddConst(usize),
    Softmax(usize),
    Sigmoid(usize),
    Gelu(usize),
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    MeanRows {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    Unfold {
        a: usize,
        geom: FoldGeometry,
    },
    Fold {
        a: usize,
        geom: FoldGeometry,
    },
    Sum(usize),
    Bce {
        p: usize,
        gt: Tensor,
    },
}

/// Shapes shared by an unfold and its transpose fold.
#[derive(Debug, Clone, Copy)]
struct FoldGeometry {
    image: (usize, usize),
    grid: (usize, usize),
    channels: usize,
    spec: SoftSplitSpec,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that receives no parameter gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter; repeated calls with the same id share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
        let rows = values.first().map_or(0, Tensor::rows);
        for v in &values {
            v.as_matrix("concat_cols")?;
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let cols: usize = values.iter().map(Tensor::cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, cols], out),
            Op::ConcatCols(parts.iter().map(|v| v.id).collect()),
        ))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
        let cols = values.first().map_or(0, Tensor::cols);
        for v in &values {
            v.as_matrix("concat_rows")?;
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", values[0].shape(), v.shape()));
            }
        }
        let rows: usize = values.iter().map(Tensor::rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for v in &values {
            out.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, cols], out),
            Op::ConcatRows(parts.iter().map(|v| v.id).collect()),
        ))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.unary(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                b_t: false,
            },
        ))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().matmul_nt(&other.value())?;
        Ok(self.unary(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                b_t: true,
            },
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.unary(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.unary(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.unary(v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let r = row.value();
        let (m, n) = a.as_matrix("add_row")?;
        if r.len() != n {
            return Err(Error::dim("add_row", a.shape(), r.shape()));
        }
        let mut out = a.to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.unary(
            Tensor::from_vec(vec![m, n], out),
            Op::AddRow {
                a: self.id,
                row: row.id,
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(self.value().scale(factor), Op::Scale(self.id, factor))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        let factor = s.value().item()?;
        Ok(self.unary(
            self.value().scale(factor),
            Op::ScaleBy {
                a: self.id,
                s: s.id,
            },
        ))
    }

    /// Adds a constant tensor; the constant receives no gradient.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().add(c)?;
        Ok(self.unary(v, Op::AddConst(self.id)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value().softmax_rows()?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().sigmoid(), Op::Sigmoid(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(self.value().map(gelu), Op::Gelu(self.id))
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.as_matrix("layer_norm")?;
        let g = gain.value();
        let b = bias.value();
        if g.len() != n || b.len() != n {
            return Err(Error::dim("layer_norm", x.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = x.row(r);
            let (mean, is) = row_moments(row);
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.unary(
            Tensor::from_vec(vec![m, n], out),
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("slice_cols")?;
        if start + width > n {
            return Err(Error::dim("slice_cols", a.shape(), &[start, width]));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&a.row(r)[start..start + width]);
        }
        Ok(self.unary(
            Tensor::from_vec(vec![m, width], out),
            Op::SliceCols { a: self.id, start },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("slice_rows")?;
        if start + len > m {
            return Err(Error::dim("slice_rows", a.shape(), &[start, len]));
        }
        let out = a.data()[start * n..(start + len) * n].to_vec();
        Ok(self.unary(
            Tensor::from_vec(vec![len, n], out),
            Op::SliceRows { a: self.id, start },
        ))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", a.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(a.row(i));
        }
        Ok(self.unary(
            Tensor::from_vec(vec![idx.len(), n], out),
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean of the selected rows as a `1×n` matrix.
    pub fn mean_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("mean_rows")?;
        if idx.is_empty() {
            return Err(Error::Degenerate("mean over zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("mean_rows", a.shape(), &[bad]));
        }
        let mut out = vec![0.0; n];
        for &i in idx {
            for (o, x) in out.iter_mut().zip(a.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.unary(
            Tensor::from_vec(vec![1, n], out),
            Op::MeanRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Soft split of a token grid. `self` holds `h·w` rows of `e` channels
    /// laid out row-major over `image`; returns the tokens and their grid.
    pub fn unfold(
        &self,
        image: (usize, usize),
        spec: SoftSplitSpec,
    ) -> Result<(Var<'t>, (usize, usize))> {
        let a = self.value();
        let (rows, channels) = a.as_matrix("unfold")?;
        if rows != image.0 * image.1 {
            return Err(Error::dim("unfold", a.shape(), &[image.0, image.1]));
        }
        let (data, grid) = unfold_raw(a.data(), image, channels, spec)?;
        let geom = FoldGeometry {
            image,
            grid,
            channels,
            spec,
        };
        let width = channels * spec.k * spec.k;
        Ok((
            self.unary(
                Tensor::from_vec(vec![grid.0 * grid.1, width], data),
                Op::Unfold { a: self.id, geom },
            ),
            grid,
        ))
    }

    /// Reverse soft split: scatters each token of `grid` as a `k×k` patch
    /// into a canvas of `target` pixels, summing overlaps.
    pub fn fold(
        &self,
        grid: (usize, usize),
        spec: SoftSplitSpec,
        target: (usize, usize),
    ) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, width) = a.as_matrix("fold")?;
        let kk = spec.k * spec.k;
        if rows != grid.0 * grid.1 || width % kk != 0 {
            return Err(Error::dim("fold", a.shape(), &[grid.0 * grid.1, kk]));
        }
        let channels = width / kk;
        let data = fold_raw(a.data(), grid, channels, spec, target)?;
        let geom = FoldGeometry {
            image: target,
            grid,
            channels,
            spec,
        };
        Ok(self.unary(
            Tensor::from_vec(vec![target.0 * target.1, channels], data),
            Op::Fold { a: self.id, geom },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean binary cross-entropy against `gt`, with predictions clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` (no gradient through clamped entries).
    pub fn bce(&self, gt: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        let loss = crate::objectives::bce_value(&p, gt)?;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::Bce {
                p: self.id,
                gt: gt.clone(),
            },
        ))
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Result of a backward pass: gradients for every recorded node.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary recorded value.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn acc_add(grads: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
    acc(grads, id, delta.len(), |g| {
        for (x, d) in g.iter_mut().zip(delta) {
            *x += d;
        }
    });
}

impl Tape {
    /// Computes gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(self, loss.tape),
            "loss belongs to another tape"
        );
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul { a, b, b_t } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = (av.rows(), av.cols());
                    let n = node.value.cols();
                    acc(&mut grads, *a, m * k, |g| {
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, &dy, false, bv.data(), !*b_t, g, true);
                    });
                    acc(&mut grads, *b, k * n, |g| {
                        if *b_t {
                            // B is n×k: dB = dCᵀ · A
                            gemm(n, m, k, &dy, true, av.data(), false, g, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, av.data(), true, &dy, false, g, true);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc_add(&mut grads, *a, &dy);
                    acc_add(&mut grads, *b, &dy);
                }
                Op::Sub(a, b) => {
                    acc_add(&mut grads, *a, &dy);
                    let neg: Vec<f64> = dy.iter().map(|x| -x).collect();
                    acc_add(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = dy.iter().zip(val(*b).data()).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = dy.iter().zip(val(*a).data()).map(|(d, x)| d * x).collect();
                    acc_add(&mut grads, *a, &da);
                    acc_add(&mut grads, *b, &db);
                }
                Op::AddRow { a, row } => {
                    acc_add(&mut grads, *a, &dy);
                    let n = node.value.cols();
                    acc(&mut grads, *row, n, |g| {
                        for chunk in dy.chunks(n) {
                            for (x, d) in g.iter_mut().zip(chunk) {
                                *x += d;
                            }
                        }
                    });
                }
                Op::Scale(a, f) => {
                    let da: Vec<f64> = dy.iter().map(|d| d * f).collect();
                    acc_add(&mut grads, *a, &da);
                }
                Op::ScaleBy { a, s } => {
                    let factor = val(*s).data()[0];
                    let da: Vec<f64> = dy.iter().map(|d| d * factor).collect();
                    acc_add(&mut grads, *a, &da);
                    let ds: f64 = dy.iter().zip(val(*a).data()).map(|(d, x)| d * x).sum();
                    acc_add(&mut grads, *s, &[ds]);
                }
                Op::AddConst(a) | Op::Reshape(a) => acc_add(&mut grads, *a, &dy),
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut da = vec![0.0; y.len()];
                    for ((yr, dr), out) in y.chunks(n).zip(dy.chunks(n)).zip(da.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (dr[j] - dot);
                        }
                    }
                    acc_add(&mut grads, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect();
                    acc_add(&mut grads, *a, &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(val(*a).data())
                        .map(|(d, x)| d * gelu_grad(*x))
                        .collect();
                    acc_add(&mut grads, *a, &da);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = val(*gain).data();
                    let n = g.len();
                    let mut da = vec![0.0; dy.len()];
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let dr = &dy[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = dr[j] * g[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                            dg[j] += dr[j] * hr[j];
                            db[j] += dr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            da[r * n + j] = is * (dr[j] * g[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc_add(&mut grads, *a, &da);
                    acc_add(&mut grads, *gain, &dg);
                    acc_add(&mut grads, *bias, &db);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        acc(&mut grads, p, rows * w, |g| {
                            for r in 0..rows {
                                for j in 0..w {
                                    g[r * w + j] += dy[r * total + offset + j];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc_add(&mut grads, p, &dy[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SliceCols { a, start } => {
                    let src = val(*a);
                    let (m, n) = (src.rows(), src.cols());
                    let w = node.value.cols();
                    acc(&mut grads, *a, m * n, |g| {
                        for r in 0..m {
                            for j in 0..w {
                                g[r * n + start + j] += dy[r * w + j];
                            }
                        }
                    });
                }
                Op::SliceRows { a, start } => {
                    let src = val(*a);
                    let n = src.cols();
                    acc(&mut grads, *a, src.len(), |g| {
                        for (x, d) in g[start * n..start * n + dy.len()].iter_mut().zip(&dy) {
                            *x += d;
                        }
                    });
                }
                Op::GatherRows { a, idx } => {
                    let src = val(*a);
                    let n = src.cols();
                    acc(&mut grads, *a, src.len(), |g| {
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..n {
                                g[i * n + j] += dy[k * n + j];
                            }
                        }
                    });
                }
                Op::MeanRows { a, idx } => {
                    let src = val(*a);
                    let n = src.cols();
                    let inv = 1.0 / idx.len() as f64;
                    acc(&mut grads, *a, src.len(), |g| {
                        for &i in idx {
                            for j in 0..n {
                                g[i * n + j] += dy[j] * inv;
                            }
                        }
                    });
                }
                Op::Unfold { a, geom } => {
                    let back = fold_raw(&dy, geom.grid, geom.channels, geom.spec, geom.image)
                        .expect("fold is feasible for an unfold's own geometry");
                    acc_add(&mut grads, *a, &back);
                }
                Op::Fold { a, geom } => {
                    let (back, _) = unfold_raw(&dy, geom.image, geom.channels, geom.spec)
                        .expect("unfold is feasible for a fold's target");
                    // The fold target may admit more windows than the source
                    // grid; keep the leading windows that the fold placed.
                    let back = crop_grid(&back, geom, unfold_grid(geom));
                    acc_add(&mut grads, *a, &back);
                }
                Op::Sum(a) => {
                    let len = val(*a).len();
                    acc(&mut grads, *a, len, |g| {
                        g.iter_mut().for_each(|x| *x += dy[0])
                    });
                }
                Op::Bce { p, gt } => {
                    let pv = val(*p);
                    let da = crate::objectives::bce_grad(pv, gt, dy[0]);
                    acc_add(&mut grads, *p, &da);
                }
            }
            grads[id] = Some(dy);
        }

        let mut params = Vec::new();
        let node_grads: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    let t = Tensor::from_vec(nodes[i].value.shape().to_vec(), g);
                    if let Op::Param(pid) = nodes[i].op {
                        params.push((pid, t.clone()));
                    }
                    t
                })
            })
            .collect();
        Ok(Gradients {
            nodes: node_grads,
            params,
        })
    }
}

fn unfold_grid(geom: &FoldGeometry) -> (usize, usize) {
    let s = geom.spec;
    (
        crate::geometry::ss_length(geom.image.0, s).unwrap_or(0),
        crate::geometry::ss_length(geom.image.1, s).unwrap_or(0),
    )
}

/// Keeps the rows of an unfolded `full` grid that correspond to `geom.grid`.
fn crop_grid(data: &[f64], geom: &FoldGeometry, full: (usize, usize)) -> Vec<f64> {
    if full == geom.grid {
        return data.to_vec();
    }
    let width = geom.channels * geom.spec.k * geom.spec.k;
    let mut out = Vec::with_capacity(geom.grid.0 * geom.grid.1 * width);
    for i in 0..geom.grid.0 {
        for j in 0..geom.grid.1 {
            let t = i * full.1 + j;
            out.extend_from_slice(&data[t * width..(t + 1) * width]);
        }
    }
    out
}

/// Runs backward from `loss` and accumulates parameter gradients into `store`.
pub fn backward(tape: &Tape, loss: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
    let grads = tape.gradients(loss)?;
    store.accumulate(&grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init, RngSpec};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        init(shape, RngSpec::new(seed)).scale((*shape.last().unwrap() as f64).sqrt())
    }

    /// Compares the gradient of `Σ R ⊙ f(inputs)` with central differences
    /// for every entry of every input.
    fn check(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let eval = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&tape, &vars);
            let weights = rand(&out.shape(), 99);
            let loss = out.mul(tape.constant(weights)).unwrap().sum();
            let grads = tape.gradients(loss).unwrap();
            let gs = vars
                .iter()
                .map(|v| {
                    grads
                        .wrt(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(v.shape()))
                })
                .collect();
            (loss.value().item().unwrap(), gs)
        };
        let (_, analytic) = eval(inputs);
        let h = 1e-6;
        for (i, x) in inputs.iter().enumerate() {
            for k in 0..x.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut v = x.to_vec();
                v[k] += h;
                plus[i] = Tensor::new(x.shape().to_vec(), v.clone()).unwrap();
                v[k] -= 2.0 * h;
                minus[i] = Tensor::new(x.shape().to_vec(), v).unwrap();
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[i].data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(
                    err < 1e-6,
                    "input {i} entry {k}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        check(&[rand(&[3, 4], 1), rand(&[4, 2], 2)], |_, v| {
            v[0].matmul(v[1]).unwrap()
        });
        check(&[rand(&[3, 4], 3), rand(&[5, 4], 4)], |_, v| {
            v[0].matmul_nt(v[1]).unwrap()
        });
        // Shared operand on both sides.
        check(&[rand(&[3, 3], 5)], |_, v| v[0].matmul(v[0]).unwrap());
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand(&[2, 3], 6);
        let b = rand(&[2, 3], 7);
        check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1]).unwrap());
        check(&[a.clone(), b.clone()], |_, v| v[0].sub(v[1]).unwrap());
        check(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1]).unwrap());
        check(&[a.clone(), rand(&[1, 3], 8)], |_, v| {
            v[0].add_row(v[1]).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| v[0].scale(-1.7));
        check(&[a.clone(), Tensor::full([1], 0.6)], |_, v| {
            v[0].scale_by(v[1]).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].add_const(&Tensor::full([2, 3], 2.0)).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| v[0].sigmoid());
        check(std::slice::from_ref(&a), |_, v| v[0].gelu());
        check(&[a], |_, v| v[0].softmax_rows().unwrap());
    }

    #[test]
    fn layer_norm_gradients() {
        check(
            &[rand(&[3, 5], 9), rand(&[5], 10), rand(&[5], 11)],
            |_, v| v[0].layer_norm(v[1], v[2]).unwrap(),
        );
    }

    #[test]
    fn structural_gradients() {
        let a = rand(&[4, 3], 12);
        let b = rand(&[4, 2], 13);
        check(&[a.clone(), b.clone()], |t, v| {
            t.concat_cols(&[v[0], v[1], v[0]]).unwrap()
        });
        check(&[a.clone(), rand(&[2, 3], 14)], |t, v| {
            t.concat_rows(&[v[1], v[0]]).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].slice_cols(1, 2).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].slice_rows(1, 2).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].gather_rows(&[3, 0, 3]).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].mean_rows(&[0, 2, 3]).unwrap()
        });
        check(std::slice::from_ref(&a), |_, v| {
            v[0].reshape([2, 6]).unwrap()
        });
        check(&[a], |_, v| v[0].sum());
    }

    #[test]
    fn unfold_and_fold_gradients() {
        let spec = SoftSplitSpec::new(3, 1, 1).unwrap();
        check(&[rand(&[16, 2], 15)], |_, v| {
            v[0].unfold((4, 4), spec).unwrap().0
        });
        check(&[rand(&[4, 18], 16)], |_, v| {
            v[0].fold((2, 2), spec, (4, 4)).unwrap()
        });
    }

    #[test]
    fn bce_gradient() {
        let p = Tensor::new([2, 2], vec![0.2, 0.7, 0.4, 0.9]).unwrap();
        let gt = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        check(&[p], move |_, v| v[0].bce(&gt).unwrap());
    }

    #[test]
    fn param_gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new([1, 2], vec![0.5, -1.0]).unwrap());
        let tape = Tape::new();
        let p = tape.param(&store, w);
        let loss = p
            .add(p)
            .unwrap()
            .sum()
            .add(tape.param(&store, w).sum())
            .unwrap();
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_inputs_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2], 1.0));
        let y = tape.constant(Tensor::full([1, 2], 2.0));
        let grads = tape.gradients(x.sum()).unwrap();
        assert!(grads.wrt(y).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }
}
