//! Define-by-run reverse-mode tensor engine.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. Three execution
//! modes share the same graph-building code:
//!
//! * gradient mode: every node keeps its value so backward can run;
//! * inference mode (`grad_enabled = false`): [`Tape::reclaim_since`] frees
//!   intermediate buffers between pipeline stages;
//! * dry mode: no values are computed at all, only shapes and MAC counts,
//!   which is how the profiler walks a model without paying for it.
//!
//! Shape conventions: convolutions and norms act on `[channels, length,
//! batch]` with the convolved axis in the middle; matmuls act on
//! `[batch, rows, cols]`; softmax acts on the last axis.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod store;

use std::collections::HashMap;

use crate::dsp::{self, StftConfig};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::scalar::Scalar;
use kernels::{axpy, dot};
pub use store::{Param, ParameterStore};

/// Epsilon inside the square root of every normalization op.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, S),
    AddConst(TensorId, S),
    Relu(TensorId),
    Sigmoid(TensorId),
    Sqrt(TensorId),
    Ln(TensorId),
    Abs(TensorId),
    PRelu { x: TensorId, alpha: TensorId },
    SoftmaxLast(TensorId),
    Conv1d { x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize, pad: usize, groups: usize },
    Matmul { a: TensorId, b: TensorId },
    MatmulNt { a: TensorId, b: TensorId },
    GroupNorm { x: TensorId, gamma: TensorId, beta: TensorId, groups: usize },
    LayerNormCh { x: TensorId, gamma: TensorId, beta: TensorId },
    AvgPool { x: TensorId, factor: usize },
    UpsampleNearest { x: TensorId, factor: usize },
    PadEnd { x: TensorId, axis: usize, count: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
    Concat { xs: Vec<TensorId>, axis: usize },
    Permute { x: TensorId, perm: Vec<usize> },
    Reshape(TensorId),
    SumAll(TensorId),
    Stft { x: TensorId, cfg: StftConfig },
    Istft { x: TensorId, cfg: StftConfig },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Op-specific context for backward (normalization statistics).
    saved: Vec<S>,
    op: Op<S>,
    scope: u32,
    macs: u64,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, TensorId>,
    scope_names: Vec<String>,
    scope_stack: Vec<String>,
    current_scope: u32,
    grad_enabled: bool,
    dry: bool,
    bytes_live: usize,
    bytes_peak: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape at `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            scope_names: vec![String::new()],
            scope_stack: Vec::new(),
            current_scope: 0,
            grad_enabled,
            dry: false,
            bytes_live: 0,
            bytes_peak: 0,
        }
    }

    /// A tape that computes shapes and MAC counts but no values.
    pub fn dry() -> Self {
        let mut t = Tape::new(false);
        t.dry = true;
        t
    }

    pub fn is_dry(&self) -> bool {
        self.dry
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn bytes_peak(&self) -> usize {
        self.bytes_peak
    }

    pub fn bytes_live(&self) -> usize {
        self.bytes_live
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Panics if the node's value was reclaimed or the tape is dry.
    pub fn value(&self, id: TensorId) -> &[S] {
        let n = &self.nodes[id.0];
        assert!(
            !self.dry && (n.data.len() == numel(&n.shape)),
            "value of node {} unavailable (dry tape or reclaimed buffer)",
            id.0
        );
        &n.data
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        v[0]
    }

    // ---- scopes ------------------------------------------------------

    pub fn push_scope(&mut self, name: &str) {
        self.scope_stack.push(name.to_string());
        let full = self.scope_stack.join(".");
        self.current_scope = match self.scope_names.iter().position(|s| *s == full) {
            Some(i) => i as u32,
            None => {
                self.scope_names.push(full);
                (self.scope_names.len() - 1) as u32
            }
        };
    }

    pub fn pop_scope(&mut self) {
        self.scope_stack.pop();
        let full = self.scope_stack.join(".");
        self.current_scope = self
            .scope_names
            .iter()
            .position(|s| *s == full)
            .expect("parent scope was interned") as u32;
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    /// MACs aggregated by full scope path (leaf scopes, not rolled up).
    pub fn macs_by_scope(&self) -> Vec<(String, u64)> {
        let mut acc: HashMap<u32, u64> = HashMap::new();
        for n in &self.nodes {
            if n.macs > 0 {
                *acc.entry(n.scope).or_insert(0) += n.macs;
            }
        }
        let mut out: Vec<(String, u64)> = acc
            .into_iter()
            .map(|(s, m)| (self.scope_names[s as usize].clone(), m))
            .collect();
        out.sort();
        out
    }

    // ---- node management ---------------------------------------------

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, saved: Vec<S>, op: Op<S>, macs: u64) -> TensorId {
        let needs_grad = match &op {
            Op::Leaf => false,
            op => self.any_input_needs_grad(op),
        };
        self.push_node(shape, data, saved, op, macs, needs_grad)
    }

    fn push_node(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        saved: Vec<S>,
        op: Op<S>,
        macs: u64,
        needs_grad: bool,
    ) -> TensorId {
        self.bytes_live += (data.len() + saved.len()) * std::mem::size_of::<S>();
        self.bytes_peak = self.bytes_peak.max(self.bytes_live);
        self.nodes.push(Node {
            shape,
            data,
            saved,
            op,
            scope: self.current_scope,
            macs,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_input_needs_grad(&self, op: &Op<S>) -> bool {
        let mut needs = false;
        for_each_input(op, |id| needs |= self.nodes[id.0].needs_grad);
        needs
    }

    /// High-water mark for [`Tape::reclaim_since`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// In inference mode, free the value buffers of nodes created since
    /// `mark`, except those listed in `keep`. Leaves survive: parameters
    /// bound inside the region may be reused by later graph sections.
    /// No-op when gradients are on.
    pub fn reclaim_since(&mut self, mark: usize, keep: &[TensorId]) {
        if self.grad_enabled || self.dry {
            return;
        }
        for i in mark..self.nodes.len() {
            if keep.iter().any(|k| k.0 == i) || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let n = &mut self.nodes[i];
            self.bytes_live -= (n.data.len() + n.saved.len()) * std::mem::size_of::<S>();
            n.data = Vec::new();
            n.saved = Vec::new();
        }
    }

    // ---- leaves --------------------------------------------------------

    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId> {
        if data.len() != numel(&shape) && !self.dry {
            return shape_err(format!("constant data length {} != shape {:?}", data.len(), shape));
        }
        let data = if self.dry { Vec::new() } else { data };
        Ok(self.push_node(shape, data, Vec::new(), Op::Leaf, 0, false))
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.constant(vec![v], vec![1]).expect("scalar constant")
    }

    /// Bind a named parameter from the store as a differentiable leaf.
    /// Repeated binds of the same name return the same node, which is how
    /// parameter sharing works: gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        let data = if self.dry { Vec::new() } else { p.data.clone() };
        let id =
            self.push_node(p.shape.clone(), data, Vec::new(), Op::Leaf, 0, self.grad_enabled);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- element-wise --------------------------------------------------

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: fn(TensorId, TensorId) -> Op<S>,
        f: fn(S, S) -> S,
        what: &str,
    ) -> Result<TensorId> {
        self.check_same_shape(a, b, what)?;
        let shape = self.nodes[a.0].shape.clone();
        let data = if self.dry {
            Vec::new()
        } else {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok(self.push(shape, data, Vec::new(), op(a, b), 0))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Div, |x, y| x / y, "div")
    }

    fn unary(&mut self, x: TensorId, op: Op<S>, f: impl Fn(S) -> S) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let data = if self.dry {
            Vec::new()
        } else {
            self.nodes[x.0].data.iter().map(|&v| f(v)).collect()
        };
        self.push(shape, data, Vec::new(), op, 0)
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&mut self, x: TensorId, c: S) -> TensorId {
        self.unary(x, Op::AddConst(x, c), |v| v + c)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Relu(x), |v| v.max(S::zero()))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sigmoid(x), |v| S::one() / (S::one() + (-v).exp()))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Leaky rectifier with a learned scalar slope for the negative side.
    pub fn prelu(&mut self, x: TensorId, alpha: TensorId) -> Result<TensorId> {
        if self.nodes[alpha.0].shape != [1] {
            return shape_err("prelu slope must have shape [1]".to_string());
        }
        let shape = self.nodes[x.0].shape.clone();
        let data = if self.dry {
            Vec::new()
        } else {
            let a = self.nodes[alpha.0].data[0];
            self.nodes[x.0]
                .data
                .iter()
                .map(|&v| if v > S::zero() { v } else { a * v })
                .collect()
        };
        Ok(self.push(shape, data, Vec::new(), Op::PRelu { x, alpha }, 0))
    }

    pub fn softmax_last(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().expect("softmax needs at least 1 axis");
        let data = if self.dry {
            Vec::new()
        } else {
            let xv = &self.nodes[x.0].data;
            let mut out = vec![S::zero(); xv.len()];
            for (row_in, row_out) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let m = row_in.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let mut sum = S::zero();
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = (v - m).exp();
                    sum += *o;
                }
                for o in row_out.iter_mut() {
                    *o = *o / sum;
                }
            }
            out
        };
        self.push(shape, data, Vec::new(), Op::SoftmaxLast(x), 0)
    }

    // ---- structure -----------------------------------------------------

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != numel(&self.nodes[x.0].shape) {
            return shape_err(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, shape
            ));
        }
        let data = if self.dry { Vec::new() } else { self.nodes[x.0].data.clone() };
        Ok(self.push(shape, data, Vec::new(), Op::Reshape(x), 0))
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[x.0].shape.clone();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return invalid_arg(format!("invalid permutation {perm:?} for rank {nd}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = if self.dry {
            Vec::new()
        } else {
            permute_data(&self.nodes[x.0].data, &in_shape, perm)
        };
        Ok(self.push(out_shape, data, Vec::new(), Op::Permute { x, perm: perm.to_vec() }, 0))
    }

    pub fn pad_end(&mut self, x: TensorId, axis: usize, count: usize) -> Result<TensorId> {
        let in_shape = self.nodes[x.0].shape.clone();
        if axis >= in_shape.len() {
            return invalid_arg(format!("pad axis {axis} out of range"));
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] += count;
        let data = if self.dry {
            Vec::new()
        } else {
            let (outer, len, inner) = split_axis(&in_shape, axis);
            let xv = &self.nodes[x.0].data;
            let mut out = vec![S::zero(); numel(&out_shape)];
            for o in 0..outer {
                let src = &xv[o * len * inner..(o + 1) * len * inner];
                let dst = &mut out[o * (len + count) * inner..][..len * inner];
                dst.copy_from_slice(src);
            }
            out
        };
        Ok(self.push(out_shape, data, Vec::new(), Op::PadEnd { x, axis, count }, 0))
    }

    pub fn slice_axis(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.nodes[x.0].shape.clone();
        if axis >= in_shape.len() || start + len > in_shape[axis] || len == 0 {
            return invalid_arg(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {in_shape:?}"
            ));
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let data = if self.dry {
            Vec::new()
        } else {
            let (outer, full, inner) = split_axis(&in_shape, axis);
            let xv = &self.nodes[x.0].data;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&xv[base..base + len * inner]);
            }
            out
        };
        Ok(self.push(out_shape, data, Vec::new(), Op::Slice { x, axis, start, len }, 0))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return invalid_arg("concat of zero tensors");
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return invalid_arg(format!("concat axis {axis} out of range"));
        }
        let mut total = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err(format!("concat shapes differ off-axis: {s:?} vs {first:?}"));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let data = if self.dry {
            Vec::new()
        } else {
            let (outer, _, inner) = split_axis(&first, axis);
            let mut out = vec![S::zero(); numel(&out_shape)];
            let mut offset = 0;
            for &x in xs {
                let len = self.nodes[x.0].shape[axis];
                let xv = &self.nodes[x.0].data;
                for o in 0..outer {
                    let dst = &mut out[(o * total + offset) * inner..][..len * inner];
                    dst.copy_from_slice(&xv[o * len * inner..(o + 1) * len * inner]);
                }
                offset += len;
            }
            out
        };
        Ok(self.push(out_shape, data, Vec::new(), Op::Concat { xs: xs.to_vec(), axis }, 0))
    }

    // ---- linear ops ------------------------------------------------------

    /// Grouped 1D convolution: `x [ci, l, bt]`, `w [co, ci/groups, k]`,
    /// optional `bias [co]`. Zero padding on both ends of the middle axis.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 3 {
            return shape_err(format!("conv1d expects 3-d input/weight, got {xs:?} / {ws:?}"));
        }
        let (ci, l, bt) = (xs[0], xs[1], xs[2]);
        let (co, cig, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || ci % groups != 0 || co % groups != 0 || cig != ci / groups {
            return invalid_arg(format!(
                "conv1d channel/group mismatch: x channels {ci}, weight {co}x{cig}x{k}, groups {groups}"
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [co] {
                return shape_err(format!("conv1d bias must be [{co}]"));
            }
        }
        let lo = kernels::out_len_for(l, k, stride, pad)
            .ok_or_else(|| Error::InvalidArgument(format!("kernel {k} exceeds padded length {}", l + 2 * pad)))?;
        let macs = (co as u64) * (lo as u64) * (bt as u64) * (cig as u64) * (k as u64);
        let data = if self.dry {
            Vec::new()
        } else {
            let mut out = vec![S::zero(); co * lo * bt];
            kernels::conv1d_forward(
                &self.nodes[x.0].data,
                ci,
                l,
                bt,
                &self.nodes[w.0].data,
                co,
                k,
                bias.map(|b| self.nodes[b.0].data.as_slice()),
                stride,
                pad,
                groups,
                &mut out,
                lo,
            );
            out
        };
        Ok(self.push(
            vec![co, lo, bt],
            data,
            Vec::new(),
            Op::Conv1d { x, w, bias, stride, pad, groups },
            macs,
        ))
    }

    fn matmul_common(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("matmul expects [batch,m,k] x [batch,..], got {sa:?} / {sb:?}"));
        }
        let (bm, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return shape_err(format!("matmul_nt inner dims {k} vs {}", sb[2]));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return shape_err(format!("matmul inner dims {k} vs {}", sb[1]));
            }
            sb[2]
        };
        let macs = (bm * m * n * k) as u64;
        let data = if self.dry {
            Vec::new()
        } else {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            let mut out = vec![S::zero(); bm * m * n];
            for i in 0..bm {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    kernels::mm_nt(ai, &bv[i * n * k..(i + 1) * n * k], oi, m, k, n);
                } else {
                    kernels::mm_nn(ai, &bv[i * k * n..(i + 1) * k * n], oi, m, k, n);
                }
            }
            out
        };
        let op = if transpose_b { Op::MatmulNt { a, b } } else { Op::Matmul { a, b } };
        Ok(self.push(vec![bm, m, n], data, Vec::new(), op, macs))
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_common(a, b, false)
    }

    /// `[batch, m, k] x [batch, n, k]^T -> [batch, m, n]`
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_common(a, b, true)
    }

    // ---- normalization ---------------------------------------------------

    /// Normalizes each of `groups` channel groups over (channels-in-group x
    /// all remaining axes) to zero mean / unit variance, then applies a
    /// per-channel affine.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let c = xs[0];
        if groups == 0 || c % groups != 0 {
            return invalid_arg(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return shape_err(format!("group_norm affine params must be [{c}]"));
        }
        let rest: usize = xs[1..].iter().product();
        let cg = c / groups;
        let (data, saved) = if self.dry {
            (Vec::new(), Vec::new())
        } else {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            let mut out = vec![S::zero(); xv.len()];
            let mut saved = Vec::with_capacity(2 * groups);
            let n = S::from_usize_c(cg * rest);
            for g in 0..groups {
                let seg = &xv[g * cg * rest..(g + 1) * cg * rest];
                let mean = seg.iter().copied().sum::<S>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                let rstd = S::one() / (var + S::from_f64c(NORM_EPS)).sqrt();
                saved.push(mean);
                saved.push(rstd);
                for cl in 0..cg {
                    let ch = g * cg + cl;
                    let src = &seg[cl * rest..(cl + 1) * rest];
                    let dst = &mut out[ch * rest..(ch + 1) * rest];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (s - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
            }
            (out, saved)
        };
        Ok(self.push(xs, data, saved, Op::GroupNorm { x, gamma, beta, groups }, 0))
    }

    /// Channel-wise layer norm: normalizes over axis 0 independently at
    /// every position of the remaining axes.
    pub fn layer_norm_ch(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let c = xs[0];
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return shape_err(format!("layer_norm affine params must be [{c}]"));
        }
        let m: usize = xs[1..].iter().product();
        let (data, saved) = if self.dry {
            (Vec::new(), Vec::new())
        } else {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            let mut out = vec![S::zero(); xv.len()];
            let mut saved = vec![S::zero(); 2 * m];
            let n = S::from_usize_c(c);
            for pos in 0..m {
                let mut mean = S::zero();
                for ch in 0..c {
                    mean += xv[ch * m + pos];
                }
                mean = mean / n;
                let mut var = S::zero();
                for ch in 0..c {
                    let d = xv[ch * m + pos] - mean;
                    var += d * d;
                }
                let rstd = S::one() / (var / n + S::from_f64c(NORM_EPS)).sqrt();
                saved[2 * pos] = mean;
                saved[2 * pos + 1] = rstd;
                for ch in 0..c {
                    out[ch * m + pos] = (xv[ch * m + pos] - mean) * rstd * gv[ch] + bv[ch];
                }
            }
            (out, saved)
        };
        Ok(self.push(xs, data, saved, Op::LayerNormCh { x, gamma, beta }, 0))
    }

    // ---- resampling ------------------------------------------------------

    /// Mean over non-overlapping windows of `factor` along axis 1 of
    /// `[c, l, bt]`. The length must divide evenly; callers pad first.
    pub fn avg_pool(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return shape_err(format!("avg_pool expects [c,l,bt], got {xs:?}"));
        }
        if factor == 0 || xs[1] % factor != 0 {
            return invalid_arg(format!("avg_pool length {} not divisible by factor {factor}", xs[1]));
        }
        let (c, l, bt) = (xs[0], xs[1], xs[2]);
        let lo = l / factor;
        let data = if self.dry {
            Vec::new()
        } else {
            let xv = &self.nodes[x.0].data;
            let inv = S::one() / S::from_usize_c(factor);
            let mut out = vec![S::zero(); c * lo * bt];
            for ch in 0..c {
                for j in 0..lo {
                    let dst = &mut out[(ch * lo + j) * bt..][..bt];
                    for i in 0..factor {
                        axpy(dst, inv, &xv[(ch * l + j * factor + i) * bt..][..bt]);
                    }
                }
            }
            out
        };
        Ok(self.push(vec![c, lo, bt], data, Vec::new(), Op::AvgPool { x, factor }, 0))
    }

    /// Nearest-neighbor upsampling along axis 1 of `[c, l, bt]`:
    /// every entry is repeated `factor` times.
    pub fn upsample_nearest(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return shape_err(format!("upsample expects [c,l,bt], got {xs:?}"));
        }
        if factor == 0 {
            return invalid_arg("upsample factor must be >= 1");
        }
        let (c, l, bt) = (xs[0], xs[1], xs[2]);
        let lo = l * factor;
        let data = if self.dry {
            Vec::new()
        } else {
            let xv = &self.nodes[x.0].data;
            let mut out = vec![S::zero(); c * lo * bt];
            for ch in 0..c {
                for j in 0..lo {
                    let src = &xv[(ch * l + j / factor) * bt..][..bt];
                    out[(ch * lo + j) * bt..][..bt].copy_from_slice(src);
                }
            }
            out
        };
        Ok(self.push(vec![c, lo, bt], data, Vec::new(), Op::UpsampleNearest { x, factor }, 0))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let data = if self.dry {
            Vec::new()
        } else {
            vec![self.nodes[x.0].data.iter().copied().sum()]
        };
        self.push(vec![1], data, Vec::new(), Op::SumAll(x), 0)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = numel(&self.nodes[x.0].shape);
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::from_usize_c(n))
    }

    /// Scalar inner product of two same-shape tensors.
    pub fn dot_all(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // ---- DSP bridges -------------------------------------------------------

    /// Short-time analysis of a 1-d signal; output is `[2, bins, frames]`
    /// with plane 0 real, plane 1 imaginary.
    pub fn stft(&mut self, x: TensorId, cfg: &StftConfig) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 1 || xs[0] == 0 {
            return shape_err(format!("stft expects non-empty 1-d input, got {xs:?}"));
        }
        let frames = cfg.frames_for_len(xs[0]);
        let bins = cfg.bins();
        let data = if self.dry {
            Vec::new()
        } else {
            let (re, im, _) = dsp::stft_raw(&self.nodes[x.0].data, cfg);
            let mut out = re;
            out.extend_from_slice(&im);
            out
        };
        Ok(self.push(vec![2, bins, frames], data, Vec::new(), Op::Stft { x, cfg: *cfg }, 0))
    }

    /// Overlap-add synthesis from `[2, bins, frames]` back to `[out_len]`.
    pub fn istft(&mut self, x: TensorId, cfg: &StftConfig, out_len: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || xs[0] != 2 || xs[1] != cfg.bins() {
            return shape_err(format!("istft expects [2, {}, frames], got {xs:?}", cfg.bins()));
        }
        let frames = xs[2];
        if out_len == 0 || out_len > cfg.max_synthesis_len(frames) {
            return invalid_arg(format!(
                "istft out_len {out_len} outside synthesis range 1..={}",
                cfg.max_synthesis_len(frames)
            ));
        }
        let data = if self.dry {
            Vec::new()
        } else {
            let planes = &self.nodes[x.0].data;
            let half = planes.len() / 2;
            dsp::istft_raw(&planes[..half], &planes[half..], frames, cfg, out_len)
        };
        Ok(self.push(vec![out_len], data, Vec::new(), Op::Istft { x, cfg: *cfg }, 0))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Returns per-node cotangents.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<S>> {
        if self.dry {
            return invalid_arg("cannot backprop through a dry tape");
        }
        if !self.grad_enabled {
            return invalid_arg("tape was built with gradients disabled");
        }
        if self.nodes[root.0].shape != [1] {
            return shape_err(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].shape
            ));
        }
        let mut g: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = g[i].take().unwrap();
            self.backward_step(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Gradients { g })
    }

    /// Collect gradients for every bound parameter (zeros if unreached).
    pub fn param_gradients(&self, grads: &Gradients<S>) -> std::collections::BTreeMap<String, Vec<S>> {
        let mut out = std::collections::BTreeMap::new();
        for (name, &id) in &self.bound {
            let v = match &grads.g[id.0] {
                Some(v) => v.clone(),
                None => vec![S::zero(); numel(&self.nodes[id.0].shape)],
            };
            out.insert(name.clone(), v);
        }
        out
    }

    fn accumulate(&self, g: &mut [Option<Vec<S>>], id: TensorId, contrib: &[S]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut g[id.0];
        match slot {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contrib) {
                    *b = *b + c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn accumulate_owned(&self, g: &mut [Option<Vec<S>>], id: TensorId, contrib: Vec<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut g[id.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b = *b + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    #[allow(clippy::too_many_lines)]
    fn backward_step(&self, i: usize, gout: &[S], g: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(g, *a, gout);
                self.accumulate(g, *b, gout);
            }
            Op::Sub(a, b) => {
                self.accumulate(g, *a, gout);
                if self.needs(*b) {
                    let neg: Vec<S> = gout.iter().map(|&v| -v).collect();
                    self.accumulate_owned(g, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = &self.nodes[b.0].data;
                    let ga: Vec<S> = gout.iter().zip(bv).map(|(&gv, &v)| gv * v).collect();
                    self.accumulate_owned(g, *a, ga);
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].data;
                    let gb: Vec<S> = gout.iter().zip(av).map(|(&gv, &v)| gv * v).collect();
                    self.accumulate_owned(g, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].data;
                if self.needs(*a) {
                    let ga: Vec<S> = gout.iter().zip(bv).map(|(&gv, &v)| gv / v).collect();
                    self.accumulate_owned(g, *a, ga);
                }
                if self.needs(*b) {
                    let out = &node.data;
                    let gb: Vec<S> = gout
                        .iter()
                        .zip(out.iter().zip(bv))
                        .map(|(&gv, (&o, &v))| -gv * o / v)
                        .collect();
                    self.accumulate_owned(g, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let gx: Vec<S> = gout.iter().map(|&v| v * *c).collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::AddConst(x, _) => self.accumulate(g, *x, gout),
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].data;
                    let gx: Vec<S> = gout
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = &node.data;
                    let gx: Vec<S> =
                        gout.iter().zip(y).map(|(&gv, &yv)| gv * yv * (S::one() - yv)).collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Sqrt(x) => {
                if self.needs(*x) {
                    let y = &node.data;
                    let half = S::from_f64c(0.5);
                    let gx: Vec<S> = gout.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Ln(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].data;
                    let gx: Vec<S> = gout.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].data;
                    let gx: Vec<S> = gout
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| {
                            if v > S::zero() {
                                gv
                            } else if v < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::PRelu { x, alpha } => {
                let xv = &self.nodes[x.0].data;
                let a = self.nodes[alpha.0].data[0];
                if self.needs(*x) {
                    let gx: Vec<S> = gout
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { gv * a })
                        .collect();
                    self.accumulate_owned(g, *x, gx);
                }
                if self.needs(*alpha) {
                    let mut da = S::zero();
                    for (&gv, &v) in gout.iter().zip(xv) {
                        if v <= S::zero() {
                            da += gv * v;
                        }
                    }
                    self.accumulate_owned(g, *alpha, vec![da]);
                }
            }
            Op::SoftmaxLast(x) => {
                if self.needs(*x) {
                    let y = &node.data;
                    let n = *node.shape.last().unwrap();
                    let mut gx = vec![S::zero(); y.len()];
                    for ((gr, yr), out) in
                        gout.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n))
                    {
                        let s = dot(gr, yr);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - s);
                        }
                    }
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Conv1d { x, w, bias, stride, pad, groups } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (ci, l, bt) = (xs[0], xs[1], xs[2]);
                let (co, _, k) = (ws[0], ws[1], ws[2]);
                let lo = node.shape[1];
                let mut gx = if self.needs(*x) { Some(vec![S::zero(); ci * l * bt]) } else { None };
                let mut gw = if self.needs(*w) { Some(vec![S::zero(); self.nodes[w.0].data.len()]) } else { None };
                let mut gb = match bias {
                    Some(b) if self.needs(*b) => Some(vec![S::zero(); co]),
                    _ => None,
                };
                kernels::conv1d_backward(
                    &self.nodes[x.0].data,
                    ci,
                    l,
                    bt,
                    &self.nodes[w.0].data,
                    co,
                    k,
                    *stride,
                    *pad,
                    *groups,
                    gout,
                    lo,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate_owned(g, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate_owned(g, *w, gw);
                }
                if let (Some(gb), Some(b)) = (gb, bias) {
                    self.accumulate_owned(g, *b, gb);
                }
            }
            Op::Matmul { a, b } => {
                // c = a.b: ga = gc.b^T, gb = a^T.gc
                let (bm, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
                let k = self.nodes[a.0].shape[2];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                if self.needs(*a) {
                    let mut ga = vec![S::zero(); av.len()];
                    for i in 0..bm {
                        kernels::mm_nt(
                            &gout[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate_owned(g, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![S::zero(); bv.len()];
                    for i in 0..bm {
                        kernels::mm_tn(
                            &av[i * m * k..(i + 1) * m * k],
                            &gout[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate_owned(g, *b, gb);
                }
            }
            Op::MatmulNt { a, b } => {
                // c = a.b^T: ga = gc.b, gb = gc^T.a
                let (bm, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
                let k = self.nodes[a.0].shape[2];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                if self.needs(*a) {
                    let mut ga = vec![S::zero(); av.len()];
                    for i in 0..bm {
                        kernels::mm_nn(
                            &gout[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate_owned(g, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![S::zero(); bv.len()];
                    for i in 0..bm {
                        kernels::mm_tn(
                            &gout[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accumulate_owned(g, *b, gb);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let xs = &self.nodes[x.0].shape;
                let c = xs[0];
                let rest: usize = xs[1..].iter().product();
                let cg = c / groups;
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gamma.0].data;
                let n = S::from_usize_c(cg * rest);

                let mut gx = if self.needs(*x) { Some(vec![S::zero(); xv.len()]) } else { None };
                let mut ggamma = if self.needs(*gamma) { Some(vec![S::zero(); c]) } else { None };
                let mut gbeta = if self.needs(*beta) { Some(vec![S::zero(); c]) } else { None };

                for grp in 0..*groups {
                    let mean = node.saved[2 * grp];
                    let rstd = node.saved[2 * grp + 1];
                    let base = grp * cg * rest;
                    // Two reductions over the group: sum(h) and sum(h*xhat).
                    let mut sum_h = S::zero();
                    let mut sum_hx = S::zero();
                    for cl in 0..cg {
                        let ch = grp * cg + cl;
                        let gch = gv[ch];
                        for r in 0..rest {
                            let idx = base + cl * rest + r;
                            let xhat = (xv[idx] - mean) * rstd;
                            let h = gout[idx] * gch;
                            sum_h += h;
                            sum_hx += h * xhat;
                        }
                    }
                    let mean_h = sum_h / n;
                    let mean_hx = sum_hx / n;
                    for cl in 0..cg {
                        let ch = grp * cg + cl;
                        let gch = gv[ch];
                        let mut dgam = S::zero();
                        let mut dbet = S::zero();
                        for r in 0..rest {
                            let idx = base + cl * rest + r;
                            let xhat = (xv[idx] - mean) * rstd;
                            let go = gout[idx];
                            if let Some(gx) = gx.as_mut() {
                                gx[idx] = rstd * (go * gch - mean_h - xhat * mean_hx);
                            }
                            dgam += go * xhat;
                            dbet += go;
                        }
                        if let Some(gg) = ggamma.as_mut() {
                            gg[ch] += dgam;
                        }
                        if let Some(gb) = gbeta.as_mut() {
                            gb[ch] += dbet;
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate_owned(g, *x, gx);
                }
                if let Some(gg) = ggamma {
                    self.accumulate_owned(g, *gamma, gg);
                }
                if let Some(gb) = gbeta {
                    self.accumulate_owned(g, *beta, gb);
                }
            }
            Op::LayerNormCh { x, gamma, beta } => {
                let xs = &self.nodes[x.0].shape;
                let c = xs[0];
                let m: usize = xs[1..].iter().product();
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gamma.0].data;
                let n = S::from_usize_c(c);

                let mut gx = if self.needs(*x) { Some(vec![S::zero(); xv.len()]) } else { None };
                let mut ggamma = if self.needs(*gamma) { Some(vec![S::zero(); c]) } else { None };
                let mut gbeta = if self.needs(*beta) { Some(vec![S::zero(); c]) } else { None };

                for pos in 0..m {
                    let mean = node.saved[2 * pos];
                    let rstd = node.saved[2 * pos + 1];
                    let mut sum_h = S::zero();
                    let mut sum_hx = S::zero();
                    for ch in 0..c {
                        let idx = ch * m + pos;
                        let xhat = (xv[idx] - mean) * rstd;
                        let h = gout[idx] * gv[ch];
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    let mean_h = sum_h / n;
                    let mean_hx = sum_hx / n;
                    for ch in 0..c {
                        let idx = ch * m + pos;
                        let xhat = (xv[idx] - mean) * rstd;
                        let go = gout[idx];
                        if let Some(gx) = gx.as_mut() {
                            gx[idx] = rstd * (go * gv[ch] - mean_h - xhat * mean_hx);
                        }
                        if let Some(gg) = ggamma.as_mut() {
                            gg[ch] += go * xhat;
                        }
                        if let Some(gb) = gbeta.as_mut() {
                            gb[ch] += go;
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate_owned(g, *x, gx);
                }
                if let Some(gg) = ggamma {
                    self.accumulate_owned(g, *gamma, gg);
                }
                if let Some(gb) = gbeta {
                    self.accumulate_owned(g, *beta, gb);
                }
            }
            Op::AvgPool { x, factor } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].shape;
                    let (c, l, bt) = (xs[0], xs[1], xs[2]);
                    let lo = l / factor;
                    let inv = S::one() / S::from_usize_c(*factor);
                    let mut gx = vec![S::zero(); c * l * bt];
                    for ch in 0..c {
                        for j in 0..lo {
                            let src = &gout[(ch * lo + j) * bt..][..bt];
                            for i in 0..*factor {
                                axpy(&mut gx[(ch * l + j * factor + i) * bt..][..bt], inv, src);
                            }
                        }
                    }
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].shape;
                    let (c, l, bt) = (xs[0], xs[1], xs[2]);
                    let lo = l * factor;
                    let mut gx = vec![S::zero(); c * l * bt];
                    for ch in 0..c {
                        for j in 0..lo {
                            axpy(
                                &mut gx[(ch * l + j / factor) * bt..][..bt],
                                S::one(),
                                &gout[(ch * lo + j) * bt..][..bt],
                            );
                        }
                    }
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::PadEnd { x, axis, count } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].shape;
                    let (outer, len, inner) = split_axis(xs, *axis);
                    let mut gx = vec![S::zero(); numel(xs)];
                    for o in 0..outer {
                        let src = &gout[o * (len + count) * inner..][..len * inner];
                        gx[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Slice { x, axis, start, len } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].shape;
                    let (outer, full, inner) = split_axis(xs, *axis);
                    let mut gx = vec![S::zero(); numel(xs)];
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                        dst.copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Concat { xs, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &xi in xs {
                    let len = self.nodes[xi.0].shape[*axis];
                    if self.needs(xi) {
                        let mut gx = vec![S::zero(); numel(&self.nodes[xi.0].shape)];
                        for o in 0..outer {
                            let src = &gout[(o * total + offset) * inner..][..len * inner];
                            gx[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                        }
                        self.accumulate_owned(g, xi, gx);
                    }
                    offset += len;
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    // The cotangent flows through the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gx = permute_data(gout, &node.shape, &inv);
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Reshape(x) => self.accumulate(g, *x, gout),
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gx = vec![gout[0]; numel(&self.nodes[x.0].shape)];
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Stft { x, cfg } => {
                if self.needs(*x) {
                    let frames = node.shape[2];
                    let half = gout.len() / 2;
                    let in_len = self.nodes[x.0].shape[0];
                    let gx = dsp::stft_adjoint_raw(&gout[..half], &gout[half..], frames, cfg, in_len);
                    self.accumulate_owned(g, *x, gx);
                }
            }
            Op::Istft { x, cfg } => {
                if self.needs(*x) {
                    let frames = self.nodes[x.0].shape[2];
                    let (gre, gim) = dsp::istft_adjoint_raw(gout, cfg, frames);
                    let mut gx = gre;
                    gx.extend_from_slice(&gim);
                    self.accumulate_owned(g, *x, gx);
                }
            }
        }
    }
}

fn for_each_input<S: Scalar>(op: &Op<S>, mut f: impl FnMut(TensorId)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Scale(x, _)
        | Op::AddConst(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Sqrt(x)
        | Op::Ln(x)
        | Op::Abs(x)
        | Op::SoftmaxLast(x)
        | Op::Reshape(x)
        | Op::SumAll(x) => f(*x),
        Op::PRelu { x, alpha } => {
            f(*x);
            f(*alpha);
        }
        Op::Conv1d { x, w, bias, .. } => {
            f(*x);
            f(*w);
            if let Some(b) = bias {
                f(*b);
            }
        }
        Op::Matmul { a, b } | Op::MatmulNt { a, b } => {
            f(*a);
            f(*b);
        }
        Op::GroupNorm { x, gamma, beta, .. } | Op::LayerNormCh { x, gamma, beta } => {
            f(*x);
            f(*gamma);
            f(*beta);
        }
        Op::AvgPool { x, .. }
        | Op::UpsampleNearest { x, .. }
        | Op::PadEnd { x, .. }
        | Op::Slice { x, .. }
        | Op::Permute { x, .. }
        | Op::Stft { x, .. }
        | Op::Istft { x, .. } => f(*x),
        Op::Concat { xs, .. } => {
            for &x in xs {
                f(x);
            }
        }
    }
}

fn permute_data<S: Scalar>(data: &[S], in_shape: &[usize], perm: &[usize]) -> Vec<S> {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd - 1).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();

    let mut out = vec![S::zero(); data.len()];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // Odometer increment over the output index space.
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub struct Gradients<S: Scalar> {
    g: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, id: TensorId) -> Option<&[S]> {
        self.g[id.0].as_deref()
    }
}
