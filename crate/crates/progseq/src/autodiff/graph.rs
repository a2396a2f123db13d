//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a single-use tape: leaves are created from tensors or
//! parameters, ops append nodes, and [`Graph::backward`] runs the
//! reverse sweep. Inputs of every op strictly precede it on the tape,
//! so the sweep is a single reverse pass. Repeated backward calls
//! accumulate gradients; nothing is zeroed implicitly.

use std::sync::Arc;

use crate::scalar::Scalar;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One store's parameters bound into one graph, indexed by
/// [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

enum Op<S> {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        m: usize,
        row: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: S,
    },
    Sigmoid {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: S,
        hi: S,
    },
    SoftmaxRows {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        inv_std: Vec<S>,
        normed: Vec<S>,
    },
    SumAll {
        x: usize,
    },
    MeanRows {
        x: usize,
    },
    BroadcastRow {
        row: usize,
        rows: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    SliceRows {
        x: usize,
        r0: usize,
    },
    SliceCols {
        x: usize,
        c0: usize,
    },
    EmbedLookup {
        table: usize,
        ids: Vec<usize>,
    },
    Conv1dSame {
        x: usize,
        w: usize,
        b: usize,
        ksize: usize,
    },
    MdnNll {
        logits: usize,
        means: usize,
        log_sigmas: usize,
        targets: Arc<Vec<S>>,
        mask: Arc<Vec<bool>>,
        dim: usize,
        sigma_floor: S,
    },
    MdnSelect {
        logits: usize,
        means: usize,
        dim: usize,
        chosen: Vec<usize>,
    },
}

/// Single-use computation tape.
pub struct Graph<S> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Arc<Vec<S>>>,
    grads: Vec<Vec<S>>,
    requires: Vec<bool>,
    param_of: Vec<Option<(u64, ParamId)>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            param_of: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<S>,
        requires: bool,
        param: Option<(u64, ParamId)>,
        op: Op<S>,
    ) -> Var {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.shapes.push(shape);
        self.values.push(Arc::new(values));
        // Gradient buffers materialize lazily on first backward flow,
        // so forward-only graphs never allocate them.
        self.grads.push(Vec::new());
        self.requires.push(requires);
        self.param_of.push(param);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        values: Arc<Vec<S>>,
        requires: bool,
        param: Option<(u64, ParamId)>,
    ) -> Var {
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(Vec::new());
        self.requires.push(requires);
        self.param_of.push(param);
        self.ops.push(Op::Leaf);
        Var(self.ops.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant leaf from raw data; gradients do not flow into it.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Var {
        self.push(shape, values, false, None, Op::Leaf)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(vec![1, 1], vec![v])
    }

    /// Leaf sharing a tensor's buffer. Gradients flow if the tensor
    /// has `requires_grad` set; they stay on the graph node and can be
    /// read back with [`Graph::grad`].
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push_shared(t.shape().to_vec(), t.values_arc(), t.requires_grad, None)
    }

    /// Trainable-parameter leaf; [`Graph::scatter_grads`] later adds
    /// this node's gradient into the store entry.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push_shared(
            t.shape().to_vec(),
            t.values_arc(),
            true,
            Some((store.uid(), id)),
        )
    }

    /// Parameter leaf with gradient flow disabled (frozen network).
    pub fn frozen_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push_shared(t.shape().to_vec(), t.values_arc(), false, None)
    }

    /// Binds every parameter of a store, trainable or frozen.
    pub fn bind_store(&mut self, store: &ParamStore<S>, trainable: bool) -> Binding {
        let vars = store
            .ids()
            .map(|id| {
                if trainable {
                    self.param(store, id)
                } else {
                    self.frozen_param(store, id)
                }
            })
            .collect();
        Binding { vars }
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[S] {
        &self.values[v.0]
    }

    /// Gradient of a node. Empty until backward flow first reaches it;
    /// an empty slice means an all-zero gradient.
    pub fn grad(&self, v: Var) -> &[S] {
        &self.grads[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][0]
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        let s = &self.shapes[v.0];
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(AutodiffError::NotTwoDim {
                op,
                shape: s.clone(),
            })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shapes[a.0] == self.shapes[b.0] {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[b.0].clone(),
            })
        }
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[b.0].clone(),
            });
        }
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let mut out = vec![S::zero(); m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(vec![m, n], out, req, None, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("transpose", x)?;
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(vec![c, r], out, req, None, Op::Transpose { x: x.0 }))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out: Vec<S> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(shape, out, req, None, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out: Vec<S> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(shape, out, req, None, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out: Vec<S> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(shape, out, req, None, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Adds a row vector (`1×C` or `C`) to every row of an `R×C` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("add_row", m)?;
        if self.values[row.0].len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.shapes[m.0].clone(),
                rhs: self.shapes[row.0].clone(),
            });
        }
        let mv = &self.values[m.0];
        let rv = &self.values[row.0];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + rv[j];
            }
        }
        let req = self.requires[m.0] || self.requires[row.0];
        Ok(self.push(
            vec![r, c],
            out,
            req,
            None,
            Op::AddRow { m: m.0, row: row.0 },
        ))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out: Vec<S> = self.values[x.0].iter().map(|&v| v * c).collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Relu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let out: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| if v > S::zero() { v } else { v * slope })
            .collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let out: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Sigmoid { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<S> = self.values[x.0].iter().map(|&v| v.exp()).collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<S> = self.values[x.0].iter().map(|&v| v.ln()).collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Log { x: x.0 })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the range.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
            .collect();
        let req = self.requires[x.0];
        let shape = self.shapes[x.0].clone();
        self.push(shape, out, req, None, Op::Clamp { x: x.0, lo, hi })
    }

    // ── Row-structured ops ──────────────────────────────────────────

    /// Row-wise softmax. `mask`, when given, marks allowed positions;
    /// disallowed positions get exactly zero weight. A fully masked
    /// row is an error.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("softmax", x)?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax",
                    lhs: vec![r, c],
                    rhs: vec![m.len()],
                });
            }
        }
        let xv = Arc::clone(&self.values[x.0]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut max = S::neg_infinity();
            let mut any = false;
            for j in 0..c {
                if allowed(j) && row[j] > max {
                    max = row[j];
                    any = true;
                } else if allowed(j) {
                    any = true;
                }
            }
            if !any {
                return Err(AutodiffError::AllMaskedRow { row: i });
            }
            let mut sum = S::zero();
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let req = self.requires[x.0];
        // masked outputs are exactly zero, so backward needs no mask
        Ok(self.push(vec![r, c], out, req, None, Op::SoftmaxRows { x: x.0 }))
    }

    /// Per-row layer normalization with learned gain and bias
    /// (each `1×C`), applied over the last dimension.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: S,
    ) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.values[gain.0].len() != c || self.values[bias.0].len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.shapes[gain.0].clone(),
            });
        }
        let xv = &self.values[x.0];
        let gv = &self.values[gain.0];
        let bv = &self.values[bias.0];
        let cn = S::of_usize(c);
        let mut out = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut normed = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let nh = (row[j] - mean) * is;
                normed[i * c + j] = nh;
                out[i * c + j] = nh * gv[j] + bv[j];
            }
        }
        let req = self.requires[x.0] || self.requires[gain.0] || self.requires[bias.0];
        Ok(self.push(
            vec![r, c],
            out,
            req,
            None,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                inv_std,
                normed,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.values[x.0].iter().copied().sum();
        let req = self.requires[x.0];
        self.push(vec![1, 1], vec![s], req, None, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::of_usize(n))
    }

    /// Column means over rows: `R×C → 1×C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let xv = &self.values[x.0];
        let rn = S::of_usize(r);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + xv[i * c + j];
            }
        }
        for v in &mut out {
            *v = *v / rn;
        }
        let req = self.requires[x.0];
        Ok(self.push(vec![1, c], out, req, None, Op::MeanRows { x: x.0 }))
    }

    /// Repeats a `1×C` row vector into an `R×C` matrix.
    pub fn broadcast_row(&mut self, row: Var, rows: usize) -> Result<Var, AutodiffError> {
        let c = self.values[row.0].len();
        let rv = &self.values[row.0];
        let mut out = vec![S::zero(); rows * c];
        for i in 0..rows {
            out[i * c..(i + 1) * c].copy_from_slice(rv);
        }
        let req = self.requires[row.0];
        Ok(self.push(
            vec![rows, c],
            out,
            req,
            None,
            Op::BroadcastRow { row: row.0, rows },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "concat_rows",
                msg: "no operands".into(),
            });
        }
        let (_, c) = self.dims2("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shapes[parts[0].0].clone(),
                    rhs: self.shapes[p.0].clone(),
                });
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(&self.values[p.0]);
        }
        let req = parts.iter().any(|&p| self.requires[p.0]);
        Ok(self.push(
            vec![total, c],
            out,
            req,
            None,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "concat_cols",
                msg: "no operands".into(),
            });
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shapes[parts[0].0].clone(),
                    rhs: self.shapes[p.0].clone(),
                });
            }
            total += pc;
        }
        let mut out = vec![S::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims2("concat_cols", p)?;
            let pv = &self.values[p.0];
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let req = parts.iter().any(|&p| self.requires[p.0]);
        Ok(self.push(
            vec![r, total],
            out,
            req,
            None,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if r0 >= r1 || r1 > r {
            return Err(AutodiffError::Invalid {
                op: "slice_rows",
                msg: format!("range {r0}..{r1} out of bounds for {r} rows"),
            });
        }
        let out = self.values[x.0][r0 * c..r1 * c].to_vec();
        let req = self.requires[x.0];
        Ok(self.push(
            vec![r1 - r0, c],
            out,
            req,
            None,
            Op::SliceRows { x: x.0, r0 },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if c0 >= c1 || c1 > c {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                msg: format!("range {c0}..{c1} out of bounds for {c} cols"),
            });
        }
        let w = c1 - c0;
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xv[i * c + c0..i * c + c1]);
        }
        let req = self.requires[x.0];
        Ok(self.push(vec![r, w], out, req, None, Op::SliceCols { x: x.0, c0 }))
    }

    /// Row lookup into an embedding table (`V×d`), one output row per id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = self.dims2("embed_lookup", table)?;
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::EmbedIndex { id, rows: v });
            }
        }
        let tv = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let req = self.requires[table.0];
        Ok(self.push(
            vec![ids.len(), d],
            out,
            req,
            None,
            Op::EmbedLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 1-D convolution over the time axis with stride 1 and zero
    /// `same` padding. `x` is `U×C_in` (time-major), `w` is
    /// `(C_out, C_in, k)` with odd `k`, `b` has `C_out` entries.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (u, cin) = self.dims2("conv1d", x)?;
        let ws = self.shapes[w.0].clone();
        if ws.len() != 3 || ws[1] != cin || ws[2] % 2 == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![u, cin],
                rhs: ws,
            });
        }
        let (cout, ksize) = (ws[0], ws[2]);
        if self.values[b.0].len() != cout {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![cout],
                rhs: self.shapes[b.0].clone(),
            });
        }
        let pad = ksize / 2;
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let mut out = vec![S::zero(); u * cout];
        for ui in 0..u {
            for o in 0..cout {
                let mut acc = bv[o];
                for t in 0..ksize {
                    let src = ui + t;
                    if src < pad || src - pad >= u {
                        continue;
                    }
                    let xrow = &xv[(src - pad) * cin..(src - pad + 1) * cin];
                    let wrow = &wv[o * cin * ksize + t..];
                    for c in 0..cin {
                        acc = acc + xrow[c] * wrow[c * ksize];
                    }
                }
                out[ui * cout + o] = acc;
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        Ok(self.push(
            vec![u, cout],
            out,
            req,
            None,
            Op::Conv1dSame {
                x: x.0,
                w: w.0,
                b: b.0,
                ksize,
            },
        ))
    }

    /// Per-row negative log-likelihood of an isotropic Gaussian
    /// mixture, computed with log-sum-exp stabilization.
    ///
    /// Inputs per row r (R rows): `logits` `R×M`, `means` `R×(M·D)`
    /// (component-major), `log_sigmas` `R×M`, plus host-side targets
    /// `R×D` and a row validity mask. Output is `R×1`; masked rows
    /// produce exactly zero. Sigma is floored at `sigma_floor` with
    /// zero gradient below the floor.
    pub fn mdn_nll(
        &mut self,
        logits: Var,
        means: Var,
        log_sigmas: Var,
        targets: Arc<Vec<S>>,
        mask: Arc<Vec<bool>>,
        dim: usize,
        sigma_floor: S,
    ) -> Result<Var, AutodiffError> {
        let (r, m) = self.dims2("mdn_nll", logits)?;
        let (rm, md) = self.dims2("mdn_nll", means)?;
        let (rs, ms) = self.dims2("mdn_nll", log_sigmas)?;
        if rm != r || rs != r || ms != m || md != m * dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "mdn_nll",
                lhs: vec![r, m],
                rhs: vec![rm, md],
            });
        }
        if targets.len() != r * dim || mask.len() != r {
            return Err(AutodiffError::Invalid {
                op: "mdn_nll",
                msg: format!(
                    "targets/mask sized {}x{} expected {r} rows of dim {dim}",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let mut out = vec![S::zero(); r];
        for row in 0..r {
            if !mask[row] {
                continue;
            }
            let lt = log_component_terms(
                &self.values[logits.0][row * m..(row + 1) * m],
                &self.values[means.0][row * m * dim..(row + 1) * m * dim],
                &self.values[log_sigmas.0][row * m..(row + 1) * m],
                &targets[row * dim..(row + 1) * dim],
                dim,
                sigma_floor,
            );
            out[row] = -log_sum_exp(&lt);
        }
        let req =
            self.requires[logits.0] || self.requires[means.0] || self.requires[log_sigmas.0];
        Ok(self.push(
            vec![r, 1],
            out,
            req,
            None,
            Op::MdnNll {
                logits: logits.0,
                means: means.0,
                log_sigmas: log_sigmas.0,
                targets,
                mask,
                dim,
                sigma_floor,
            },
        ))
    }

    /// Per row, selects the mean vector of the highest-weight mixture
    /// component (ties break toward the lowest index). Gradients flow
    /// only into the selected means.
    pub fn mdn_select(&mut self, logits: Var, means: Var, dim: usize) -> Result<Var, AutodiffError> {
        let (r, m) = self.dims2("mdn_select", logits)?;
        let (rm, md) = self.dims2("mdn_select", means)?;
        if rm != r || md != m * dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "mdn_select",
                lhs: vec![r, m],
                rhs: vec![rm, md],
            });
        }
        let lv = &self.values[logits.0];
        let mv = &self.values[means.0];
        let mut chosen = Vec::with_capacity(r);
        let mut out = vec![S::zero(); r * dim];
        for row in 0..r {
            let lrow = &lv[row * m..(row + 1) * m];
            let mut best = 0;
            for i in 1..m {
                if lrow[i] > lrow[best] {
                    best = i;
                }
            }
            chosen.push(best);
            out[row * dim..(row + 1) * dim]
                .copy_from_slice(&mv[row * m * dim + best * dim..row * m * dim + (best + 1) * dim]);
        }
        let req = self.requires[means.0];
        Ok(self.push(
            vec![r, dim],
            out,
            req,
            None,
            Op::MdnSelect {
                logits: logits.0,
                means: means.0,
                dim,
                chosen,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep seeded from a scalar loss. Leaf gradients
    /// accumulate across repeated calls; interior-node gradients are
    /// flow buffers reset at the start of each sweep.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.values[loss.0].len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shapes[loss.0].clone(),
            });
        }
        for id in 0..self.grads.len() {
            if !matches!(self.ops[id], Op::Leaf) {
                for g in self.grads[id].iter_mut() {
                    *g = S::zero();
                }
            }
        }
        if self.grads[loss.0].is_empty() {
            self.grads[loss.0].push(S::zero());
        }
        self.grads[loss.0][0] = self.grads[loss.0][0] + S::one();
        for id in (0..=loss.0).rev() {
            if !self.requires[id] {
                continue;
            }
            self.backward_op(id);
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into its store entry.
    /// Leaves bound from other stores, and leaves the flow never
    /// reached, contribute nothing.
    pub fn scatter_grads(&self, store: &mut ParamStore<S>) {
        for (id, param) in self.param_of.iter().enumerate() {
            if let Some((uid, pid)) = param {
                if *uid == store.uid() && !self.grads[id].is_empty() {
                    store.get_mut(*pid).accumulate_grad(&self.grads[id]);
                }
            }
        }
    }

    fn op_inputs(op: &Op<S>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { m, row } => vec![*m, *row],
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Clamp { x, .. }
            | Op::SoftmaxRows { x }
            | Op::SumAll { x }
            | Op::MeanRows { x }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::BroadcastRow { row, .. } => vec![*row],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::Conv1dSame { x, w, b, .. } => vec![*x, *w, *b],
            Op::MdnNll {
                logits,
                means,
                log_sigmas,
                ..
            } => vec![*logits, *means, *log_sigmas],
            Op::MdnSelect { logits, means, .. } => vec![*logits, *means],
        }
    }

    fn backward_op(&mut self, id: usize) {
        if self.grads[id].is_empty() {
            return; // no flow reached this node
        }
        // Materialize input gradient buffers before the split borrow.
        for input in Self::op_inputs(&self.ops[id]) {
            if self.grads[input].is_empty() {
                let n = self.values[input].len();
                self.grads[input].resize(n, S::zero());
            }
        }
        // Tape property: inputs strictly precede their op, so the
        // output grad lives in the `hi` half of the split.
        let (lo, hi) = self.grads.split_at_mut(id);
        let go: &[S] = &hi[0];
        let values = &self.values;
        let shapes = &self.shapes;
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shapes[*a][0], shapes[*a][1]);
                let n = shapes[*b][1];
                let av = &values[*a];
                let bv = &values[*b];
                // dA += dC · Bᵀ and dB += Aᵀ · dC, both routed through
                // the blocked kernel on transposed copies
                let bt = transpose_into(bv, k, n);
                matmul_into(go, &bt, &mut lo[*a], m, n, k);
                let at = transpose_into(av, m, k);
                matmul_into(&at, go, &mut lo[*b], k, m, n);
            }
            Op::Transpose { x } => {
                let (r, c) = (shapes[*x][0], shapes[*x][1]);
                let gx = &mut lo[*x];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + go[j * r + i];
                    }
                }
            }
            Op::Add { a, b } => {
                for (g, &u) in lo[*a].iter_mut().zip(go) {
                    *g = *g + u;
                }
                for (g, &u) in lo[*b].iter_mut().zip(go) {
                    *g = *g + u;
                }
            }
            Op::Sub { a, b } => {
                for (g, &u) in lo[*a].iter_mut().zip(go) {
                    *g = *g + u;
                }
                for (g, &u) in lo[*b].iter_mut().zip(go) {
                    *g = *g - u;
                }
            }
            Op::Mul { a, b } => {
                let av = &values[*a];
                let bv = &values[*b];
                for ((g, &u), &bvv) in lo[*a].iter_mut().zip(go).zip(bv.iter()) {
                    *g = *g + u * bvv;
                }
                for ((g, &u), &avv) in lo[*b].iter_mut().zip(go).zip(av.iter()) {
                    *g = *g + u * avv;
                }
            }
            Op::AddRow { m, row } => {
                let c = shapes[*row].iter().product::<usize>();
                let r = go.len() / c;
                for (g, &u) in lo[*m].iter_mut().zip(go) {
                    *g = *g + u;
                }
                let grow = &mut lo[*row];
                for i in 0..r {
                    for j in 0..c {
                        grow[j] = grow[j] + go[i * c + j];
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                for (g, &u) in lo[*x].iter_mut().zip(go) {
                    *g = *g + u * c;
                }
            }
            Op::Relu { x } => {
                let xv = &values[*x];
                for ((g, &u), &v) in lo[*x].iter_mut().zip(go).zip(xv.iter()) {
                    if v > S::zero() {
                        *g = *g + u;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                let xv = &values[*x];
                for ((g, &u), &v) in lo[*x].iter_mut().zip(go).zip(xv.iter()) {
                    *g = *g + if v > S::zero() { u } else { u * slope };
                }
            }
            Op::Sigmoid { x } => {
                let yv = &values[id];
                for ((g, &u), &y) in lo[*x].iter_mut().zip(go).zip(yv.iter()) {
                    *g = *g + u * y * (S::one() - y);
                }
            }
            Op::Exp { x } => {
                let yv = &values[id];
                for ((g, &u), &y) in lo[*x].iter_mut().zip(go).zip(yv.iter()) {
                    *g = *g + u * y;
                }
            }
            Op::Log { x } => {
                let xv = &values[*x];
                for ((g, &u), &v) in lo[*x].iter_mut().zip(go).zip(xv.iter()) {
                    *g = *g + u / v;
                }
            }
            Op::Clamp { x, lo: l, hi: h } => {
                let (l, h) = (*l, *h);
                let xv = &values[*x];
                for ((g, &u), &v) in lo[*x].iter_mut().zip(go).zip(xv.iter()) {
                    if v >= l && v <= h {
                        *g = *g + u;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (shapes[id][0], shapes[id][1]);
                let yv = &values[id];
                let gx = &mut lo[*x];
                for i in 0..r {
                    let yrow = &yv[i * c..(i + 1) * c];
                    let grow = &go[i * c..(i + 1) * c];
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot = dot + grow[j] * yrow[j];
                    }
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            } => {
                let (r, c) = (shapes[id][0], shapes[id][1]);
                let cn = S::of_usize(c);
                let gv = &values[*gain];
                {
                    let gb = &mut lo[*bias];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + go[i * c + j];
                        }
                    }
                }
                {
                    let gg = &mut lo[*gain];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + go[i * c + j] * normed[i * c + j];
                        }
                    }
                }
                {
                    let gx = &mut lo[*x];
                    for i in 0..r {
                        let mut sum1 = S::zero();
                        let mut sum2 = S::zero();
                        for j in 0..c {
                            let dn = go[i * c + j] * gv[j];
                            sum1 = sum1 + dn;
                            sum2 = sum2 + dn * normed[i * c + j];
                        }
                        for j in 0..c {
                            let dn = go[i * c + j] * gv[j];
                            let term = dn - (sum1 + normed[i * c + j] * sum2) / cn;
                            gx[i * c + j] = gx[i * c + j] + inv_std[i] * term;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let u = go[0];
                for g in lo[*x].iter_mut() {
                    *g = *g + u;
                }
            }
            Op::MeanRows { x } => {
                let c = shapes[id][1];
                let r = shapes[*x][0];
                let rn = S::of_usize(r);
                let gx = &mut lo[*x];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + go[j] / rn;
                    }
                }
            }
            Op::BroadcastRow { row, rows } => {
                let c = go.len() / rows;
                let grow = &mut lo[*row];
                for i in 0..*rows {
                    for j in 0..c {
                        grow[j] = grow[j] + go[i * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = values[p].len();
                    for (g, &u) in lo[p].iter_mut().zip(&go[off..off + n]) {
                        *g = *g + u;
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = shapes[id][1];
                let r = shapes[id][0];
                let mut off = 0;
                for &p in parts {
                    let pc = shapes[p][1];
                    let gp = &mut lo[p];
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] = gp[i * pc + j] + go[i * total + off + j];
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, r0 } => {
                let c = shapes[id][1];
                let gx = &mut lo[*x];
                for (idx, &u) in go.iter().enumerate() {
                    gx[r0 * c + idx] = gx[r0 * c + idx] + u;
                }
            }
            Op::SliceCols { x, c0 } => {
                let w = shapes[id][1];
                let r = shapes[id][0];
                let c = shapes[*x][1];
                let gx = &mut lo[*x];
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + c0 + j] = gx[i * c + c0 + j] + go[i * w + j];
                    }
                }
            }
            Op::EmbedLookup { table, ids } => {
                let d = shapes[id][1];
                let gt = &mut lo[*table];
                for (t, &tok) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[tok * d + j] = gt[tok * d + j] + go[t * d + j];
                    }
                }
            }
            Op::Conv1dSame { x, w, b, ksize } => {
                let (u, cout) = (shapes[id][0], shapes[id][1]);
                let cin = shapes[*x][1];
                let ksize = *ksize;
                let pad = ksize / 2;
                let xv = &values[*x];
                let wv = &values[*w];
                {
                    let gb = &mut lo[*b];
                    for ui in 0..u {
                        for o in 0..cout {
                            gb[o] = gb[o] + go[ui * cout + o];
                        }
                    }
                }
                {
                    let gw = &mut lo[*w];
                    for ui in 0..u {
                        for t in 0..ksize {
                            let src = ui + t;
                            if src < pad || src - pad >= u {
                                continue;
                            }
                            let xrow = &xv[(src - pad) * cin..(src - pad + 1) * cin];
                            for o in 0..cout {
                                let g = go[ui * cout + o];
                                for c in 0..cin {
                                    let wi = o * cin * ksize + c * ksize + t;
                                    gw[wi] = gw[wi] + g * xrow[c];
                                }
                            }
                        }
                    }
                }
                {
                    let gx = &mut lo[*x];
                    for ui in 0..u {
                        for t in 0..ksize {
                            let src = ui + t;
                            if src < pad || src - pad >= u {
                                continue;
                            }
                            let xi = src - pad;
                            for o in 0..cout {
                                let g = go[ui * cout + o];
                                for c in 0..cin {
                                    gx[xi * cin + c] =
                                        gx[xi * cin + c] + g * wv[o * cin * ksize + c * ksize + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::MdnNll {
                logits,
                means,
                log_sigmas,
                targets,
                mask,
                dim,
                sigma_floor,
            } => {
                let (r, m) = (shapes[*logits][0], shapes[*logits][1]);
                let dim = *dim;
                let floor = *sigma_floor;
                let lv = &values[*logits];
                let mv = &values[*means];
                let sv = &values[*log_sigmas];
                for row in 0..r {
                    if !mask[row] {
                        continue;
                    }
                    let g = go[row];
                    if g == S::zero() {
                        continue;
                    }
                    let lrow = &lv[row * m..(row + 1) * m];
                    let mrow = &mv[row * m * dim..(row + 1) * m * dim];
                    let srow = &sv[row * m..(row + 1) * m];
                    let trow = &targets[row * dim..(row + 1) * dim];
                    let terms = log_component_terms(lrow, mrow, srow, trow, dim, floor);
                    let lse = log_sum_exp(&terms);
                    // Posterior responsibilities and mixture weights.
                    let max_l = lrow.iter().copied().fold(S::neg_infinity(), S::max);
                    let alpha_sum: S = lrow.iter().map(|&v| (v - max_l).exp()).sum();
                    for i in 0..m {
                        let w_i = (terms[i] - lse).exp();
                        let alpha_i = (lrow[i] - max_l).exp() / alpha_sum;
                        // d nll / d logit_i = alpha_i - w_i
                        lo[*logits][row * m + i] =
                            lo[*logits][row * m + i] + g * (alpha_i - w_i);
                        let sigma = srow[i].exp().max(floor);
                        let sig2 = sigma * sigma;
                        let mut dist2 = S::zero();
                        for j in 0..dim {
                            let diff = mrow[i * dim + j] - trow[j];
                            dist2 = dist2 + diff * diff;
                            // d nll / d mu = w_i * (mu - y) / sigma^2
                            let gm = g * w_i * diff / sig2;
                            lo[*means][row * m * dim + i * dim + j] =
                                lo[*means][row * m * dim + i * dim + j] + gm;
                        }
                        // d nll / d log_sigma = w_i (D - ||y-mu||^2 / sigma^2),
                        // zero when the floor is active.
                        if srow[i].exp() > floor {
                            let gs = g * w_i * (S::of_usize(dim) - dist2 / sig2);
                            lo[*log_sigmas][row * m + i] = lo[*log_sigmas][row * m + i] + gs;
                        }
                    }
                }
            }
            Op::MdnSelect {
                means,
                dim,
                chosen,
                ..
            } => {
                let r = shapes[id][0];
                let dim = *dim;
                let m = shapes[*means][1] / dim;
                let gm = &mut lo[*means];
                for row in 0..r {
                    let best = chosen[row];
                    for j in 0..dim {
                        let idx = row * m * dim + best * dim + j;
                        gm[idx] = gm[idx] + go[row * dim + j];
                    }
                }
            }
        }
    }
}

/// `log(alpha_i) + log(phi_i(y))` for each component of one row,
/// suitable for log-sum-exp.
fn log_component_terms<S: Scalar>(
    logits: &[S],
    means: &[S],
    log_sigmas: &[S],
    target: &[S],
    dim: usize,
    sigma_floor: S,
) -> Vec<S> {
    let m = logits.len();
    let max_l = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let log_norm = logits
        .iter()
        .map(|&v| (v - max_l).exp())
        .sum::<S>()
        .ln()
        + max_l;
    let half = S::of_f64(0.5);
    let ln_2pi = S::of_f64((2.0 * std::f64::consts::PI).ln());
    let dn = S::of_usize(dim);
    (0..m)
        .map(|i| {
            let log_alpha = logits[i] - log_norm;
            let sigma = log_sigmas[i].exp().max(sigma_floor);
            let mut dist2 = S::zero();
            for j in 0..dim {
                let diff = target[j] - means[i * dim + j];
                dist2 = dist2 + diff * diff;
            }
            log_alpha - half * dn * ln_2pi - dn * sigma.ln() - dist2 / (S::of_f64(2.0) * sigma * sigma)
        })
        .collect()
}

fn log_sum_exp<S: Scalar>(terms: &[S]) -> S {
    let max = terms.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// `c += a · b` with `a: m×k`, `b: k×n`. Four output rows are
/// accumulated per pass over `b`, with contiguous vectorizable inner
/// loops.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let (a0p, a1p, a2p, a3p) = (a0[p], a1[p], a2[p], a3[p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c0[j] = c0[j] + a0p * brow[j];
                c1[j] = c1[j] + a1p * brow[j];
                c2[j] = c2[j] + a2p * brow[j];
                c3[j] = c3[j] + a3p * brow[j];
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
        i += 1;
    }
}

/// Row-major transpose of `x: r×c` into a fresh buffer.
pub(crate) fn transpose_into<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::finite_diff_check;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec())
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1, 2], vec![0.0, 0.0]);
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![3, 4], vec![1.0, -2.0, 0.5, 3.0, 10.0, 10.0, 10.0, 10.0, -5.0, 0.0, 5.0, 2.5]);
        let y = g.softmax_rows(x, None).unwrap();
        for i in 0..3 {
            let s: f64 = g.value(y)[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_errors_on_empty_row() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let mask = Arc::new(vec![true, false, true, true, true, true]);
        let y = g.softmax_rows(x, Some(mask)).unwrap();
        assert_eq!(g.value(y)[1], 0.0);
        let s: f64 = g.value(y)[0..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        let x2 = g.constant(vec![1, 2], vec![1.0, 2.0]);
        let empty = Arc::new(vec![false, false]);
        let err = g.softmax_rows(x2, Some(empty)).unwrap_err();
        assert!(matches!(err, AutodiffError::AllMaskedRow { row: 0 }));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1, 3], vec![-1.0, 0.0, 2.0]);
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_is_transposed_map() {
        // d(sum(a·b))/da at a=[[1,2]], b=[[3],[4]] equals [[3,4]]
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(&[1, 2], &[1.0, 2.0]).with_requires_grad());
        let b = g.constant(vec![2, 1], vec![3.0, 4.0]);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), &[3.0, 4.0]);
    }

    #[test]
    fn square_loss_gradient() {
        // loss = x^2 at x=3 -> grad 6
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[1, 1], &[3.0]).with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[1, 4], &[0.0; 4]).with_requires_grad());
        let s = g.sigmoid(x);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        for &gv in g.grad(x) {
            assert!((gv - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[1, 1], &[3.0]).with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[1, 2], &[1.0, 2.0]).with_requires_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]);
        let b = g.constant(vec![2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn layer_norm_centers_and_scales_before_gain_bias() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![2, 8], vec![3.1, -0.4, 2.2, 7.7, -1.3, 0.2, 4.4, 1.0,
                                            10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]);
        let gain = g.constant(vec![1, 8], vec![1.0; 8]);
        let bias = g.constant(vec![1, 8], vec![0.0; 8]);
        let y = g.layer_norm(x, gain, bias, 1e-9).unwrap();
        for i in 0..2 {
            let row = &g.value(y)[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6, "row {i} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "row {i} var {var}");
        }
    }

    #[test]
    fn embed_lookup_rejects_out_of_range_id() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.constant(vec![4, 2], vec![0.0; 8]);
        let err = g.embed_lookup(table, &[0, 4]).unwrap_err();
        assert!(matches!(err, AutodiffError::EmbedIndex { id: 4, rows: 4 }));
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        let build = || {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(vec![2, 2], vec![0.3, -1.7, 2.9, 0.01]);
            let s = g.sigmoid(x);
            let e = g.exp(s);
            let l = g.sum_all(e);
            g.scalar_value(l)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn mdn_select_takes_argmax_with_low_index_ties() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.5]);
        let means = g.constant(
            vec![2, 6],
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0, 6.0, 6.0],
        );
        let y = g.mdn_select(logits, means, 2).unwrap();
        assert_eq!(g.value(y), &[2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn elementwise_and_structural_ops_pass_finite_differences() {
        let x = t(&[3, 4], &[0.31, -1.2, 0.77, 2.03, -0.42, 1.13, 0.5, -0.9, 1.6, -1.4, 0.22, 0.8]);
        let y = t(&[3, 4], &[0.5, 0.25, -0.75, 1.5, 0.9, -0.6, 0.3, 1.1, -0.2, 0.7, -1.0, 0.4]);
        let row = t(&[1, 4], &[0.3, -0.2, 0.9, -1.1]);

        let checks: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>)> = vec![
            ("add", Box::new(|g, vs| { let o = g.add(vs[0], vs[1])?; let w = g.constant(vec![3,4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()); let p = g.mul(o, w)?; Ok(g.sum_all(p)) })),
            ("sub", Box::new(|g, vs| { let o = g.sub(vs[0], vs[1])?; let w = g.constant(vec![3,4], (0..12).map(|i| 0.2 * i as f64 - 1.0).collect()); let p = g.mul(o, w)?; Ok(g.sum_all(p)) })),
            ("mul", Box::new(|g, vs| { let o = g.mul(vs[0], vs[1])?; Ok(g.sum_all(o)) })),
            ("transpose", Box::new(|g, vs| { let o = g.transpose(vs[0])?; let p = g.mul(o, o)?; Ok(g.sum_all(p)) })),
            ("softmax", Box::new(|g, vs| { let o = g.softmax_rows(vs[0], None)?; let w = g.constant(vec![3,4], (0..12).map(|i| (i as f64).sin()).collect()); let p = g.mul(o, w)?; Ok(g.sum_all(p)) })),
            ("mean_rows", Box::new(|g, vs| { let o = g.mean_rows(vs[0])?; let p = g.mul(o, o)?; Ok(g.sum_all(p)) })),
            ("slice_concat", Box::new(|g, vs| {
                let a = g.slice_rows(vs[0], 0, 2)?;
                let b = g.slice_rows(vs[0], 1, 3)?;
                let cat = g.concat_rows(&[a, b])?;
                let c0 = g.slice_cols(cat, 1, 3)?;
                let c1 = g.slice_cols(cat, 0, 2)?;
                let cc = g.concat_cols(&[c0, c1])?;
                let p = g.mul(cc, cc)?;
                Ok(g.sum_all(p))
            })),
        ];
        for (name, build) in checks {
            let r = finite_diff_check(name, &[x.clone(), y.clone()], 1e-5, 1e-4, build.as_ref()).unwrap();
            assert!(r.passed(), "{name}: max rel err {}", r.max_rel_err);
        }

        let r = finite_diff_check("add_row", &[x.clone(), row], 1e-5, 1e-4, |g, vs| {
            let o = g.add_row(vs[0], vs[1])?;
            let p = g.mul(o, o)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "add_row: {}", r.max_rel_err);
    }

    #[test]
    fn layer_norm_and_matmul_pass_finite_differences() {
        let x = t(&[2, 5], &[0.4, -1.1, 0.9, 2.2, -0.3, 1.4, 0.1, -0.8, 0.6, -1.9]);
        let gain = t(&[1, 5], &[1.2, 0.8, -0.5, 1.0, 0.3]);
        let bias = t(&[1, 5], &[0.1, -0.2, 0.05, 0.4, -0.6]);
        let r = finite_diff_check("layer_norm", &[x.clone(), gain, bias], 1e-5, 1e-4, |g, vs| {
            let o = g.layer_norm(vs[0], vs[1], vs[2], 1e-5)?;
            let w = g.constant(vec![2, 5], (0..10).map(|i| (i as f64 * 0.7).cos()).collect());
            let p = g.mul(o, w)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "layer_norm: {}", r.max_rel_err);

        let a = t(&[2, 3], &[0.3, 1.7, -0.4, 0.9, -1.2, 0.5]);
        let b = t(&[3, 4], &[0.2, -0.7, 1.1, 0.4, -0.9, 0.3, 0.8, -1.3, 0.6, 1.0, -0.2, 0.5]);
        let r = finite_diff_check("matmul", &[a, b], 1e-5, 1e-4, |g, vs| {
            let o = g.matmul(vs[0], vs[1])?;
            let w = g.constant(vec![2, 4], (0..8).map(|i| 0.3 * i as f64 - 1.0).collect());
            let p = g.mul(o, w)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "matmul: {}", r.max_rel_err);
    }

    #[test]
    fn conv_embed_broadcast_pass_finite_differences() {
        let x = t(&[5, 2], &[0.3, -0.8, 1.2, 0.4, -0.6, 0.9, 0.1, -1.4, 0.7, 0.2]);
        let w = t(&[3, 2, 3], &[
            0.4, -0.2, 0.7, 0.1, -0.9, 0.3,
            -0.5, 0.8, 0.2, 0.6, -0.3, 1.0,
            0.9, -0.1, -0.7, 0.5, 0.35, -0.45,
        ]);
        let b = t(&[1, 3], &[0.05, -0.15, 0.25]);
        let r = finite_diff_check("conv1d", &[x, w, b], 1e-5, 1e-4, |g, vs| {
            let o = g.conv1d_same(vs[0], vs[1], vs[2])?;
            let wts = g.constant(vec![5, 3], (0..15).map(|i| (i as f64 * 0.9).sin()).collect());
            let p = g.mul(o, wts)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "conv1d: {}", r.max_rel_err);

        let table = t(&[4, 3], &[0.3, -0.6, 0.9, 1.2, -0.1, 0.4, -0.8, 0.55, 0.05, 0.2, -1.3, 0.7]);
        let r = finite_diff_check("embed_lookup", &[table], 1e-5, 1e-4, |g, vs| {
            let o = g.embed_lookup(vs[0], &[2, 0, 2, 3])?;
            let p = g.mul(o, o)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "embed: {}", r.max_rel_err);

        let rowt = t(&[1, 3], &[0.4, -0.9, 1.3]);
        let r = finite_diff_check("broadcast_row", &[rowt], 1e-5, 1e-4, |g, vs| {
            let o = g.broadcast_row(vs[0], 4)?;
            let wts = g.constant(vec![4, 3], (0..12).map(|i| 0.25 * i as f64 - 1.0).collect());
            let p = g.mul(o, wts)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.passed(), "broadcast_row: {}", r.max_rel_err);
    }

    #[test]
    fn mdn_nll_passes_finite_differences() {
        let logits = t(&[2, 3], &[0.4, -0.7, 0.2, 1.1, 0.3, -0.5]);
        let means = t(&[2, 6], &[0.3, -0.2, 0.8, 0.1, -0.6, 0.9, 0.5, 0.4, -0.3, 0.7, 0.2, -0.8]);
        let log_sigmas = t(&[2, 3], &[0.1, -0.3, 0.25, -0.15, 0.05, 0.4]);
        let targets = Arc::new(vec![0.25, -0.4, 0.6, 0.35]);
        let mask = Arc::new(vec![true, true]);
        let r = finite_diff_check(
            "mdn_nll",
            &[logits, means, log_sigmas],
            1e-5,
            1e-4,
            move |g, vs| {
                let nll = g.mdn_nll(
                    vs[0],
                    vs[1],
                    vs[2],
                    Arc::clone(&targets),
                    Arc::clone(&mask),
                    2,
                    1e-4,
                )?;
                Ok(g.sum_all(nll))
            },
        )
        .unwrap();
        assert!(r.passed(), "mdn_nll: {}", r.max_rel_err);
    }
}
