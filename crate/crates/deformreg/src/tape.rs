//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every differentiable operation in the pipeline records a node holding
//! its forward value; `backward` walks the tape in reverse topological
//! order (creation order) and accumulates vector-Jacobian products. The
//! op inventory is closed: elementwise arithmetic, log/exp, separable
//! strided convolution, trilinear displacement sampling, the basis
//! network layers, batched small SPD solves, bending energy, packing and
//! reductions.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::kernels;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    StopGradient,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Silu(NodeId),
    SumAll(NodeId),
    AffineMap {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    PolyFeatures {
        input: NodeId,
        exponents: Vec<Vec<u32>>,
    },
    PrependOnes(NodeId),
    Reshape(NodeId),
    SliceChannel(NodeId, usize),
    ConvStrided {
        input: NodeId,
        taps: [Vec<f64>; 3],
        stride: [usize; 3],
        shift: [usize; 3],
    },
    SampleDisp {
        source: NodeId,
        disp: NodeId,
    },
    PackSym {
        parts: Vec<NodeId>,
        j: usize,
    },
    PackVec {
        parts: Vec<NodeId>,
    },
    SolveSpd {
        gram: NodeId,
        rhs: NodeId,
        ridge_rel: f64,
    },
    QuadForm {
        gram: NodeId,
        vecs: NodeId,
    },
    DotVec(NodeId, NodeId),
    BendingEnergy {
        field: NodeId,
        spacing: [f64; 3],
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Silu(_) => "silu",
            Op::SumAll(_) => "sum",
            Op::AffineMap { .. } => "affine_map",
            Op::PolyFeatures { .. } => "poly_features",
            Op::PrependOnes(_) => "prepend_ones",
            Op::Reshape(_) => "reshape",
            Op::SliceChannel(..) => "slice_channel",
            Op::ConvStrided { .. } => "conv_strided",
            Op::SampleDisp { .. } => "sample_disp",
            Op::PackSym { .. } => "pack_sym",
            Op::PackVec { .. } => "pack_vec",
            Op::SolveSpd { .. } => "solve_spd",
            Op::QuadForm { .. } => "quad_form",
            Op::DotVec(..) => "dot_vec",
            Op::BendingEnergy { .. } => "bending_energy",
        }
    }
}

/// Extra forward byproducts kept for the builder and the adjoints.
enum Aux {
    None,
    /// Inside-domain indicator of a sampling op.
    Inside(Field),
    /// Cholesky factors and per-system success of a batched solve.
    Solve { factors: Field, ok: Vec<bool> },
}

struct Node {
    value: Field,
    op: Op,
    requires_grad: bool,
    aux: Aux,
}

/// Gradients of a scalar loss with respect to the tape leaves.
pub struct Gradients {
    grads: Vec<Option<Field>>,
}

impl Gradients {
    /// Gradient for `id`, zero-shaped if the leaf never received one.
    pub fn take(&mut self, id: NodeId, shape: &[usize]) -> Field {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Field::zeros(shape))
    }

    pub fn get(&self, id: NodeId) -> Option<&Field> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Field {
        &self.nodes[id.0].value
    }

    /// Inside-domain indicator byproduct of a sampling node.
    pub fn inside_mask(&self, id: NodeId) -> &Field {
        match &self.nodes[id.0].aux {
            Aux::Inside(m) => m,
            _ => panic!("node has no inside mask"),
        }
    }

    /// Per-system success flags of a batched solve node.
    pub fn solve_ok(&self, id: NodeId) -> &[bool] {
        match &self.nodes[id.0].aux {
            Aux::Solve { ok, .. } => ok,
            _ => panic!("node is not a solve"),
        }
    }

    fn push(&mut self, value: Field, op: Op, requires_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input leaf.
    pub fn leaf(&mut self, value: Field) -> NodeId {
        self.push(value, Op::Leaf, true, Aux::None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Field) -> NodeId {
        self.push(value, Op::Leaf, false, Aux::None)
    }

    /// Forward passthrough whose adjoint contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, Aux::None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, Aux::None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, Aux::None)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg, Aux::None)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg, Aux::None)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|x| s * x);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg, Aux::None)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg, Aux::None)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg, Aux::None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg, Aux::None)
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg, Aux::None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Field::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg, Aux::None)
    }

    /// Dense layer over voxels: `input` is `[c_in, n]`, `weight`
    /// `[c_out, c_in]`, `bias` `[c_out]`; output is `[c_out, n]`.
    pub fn affine_map(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(input);
        let wm = self.value(weight);
        let b = self.value(bias);
        let (c_in, n) = (x.shape()[0], x.channel_len());
        let c_out = wm.shape()[0];
        debug_assert_eq!(wm.shape(), [c_out, c_in]);
        debug_assert_eq!(b.len(), c_out);
        let mut out = Field::zeros(&[c_out, n]);
        for o in 0..c_out {
            let dst = out.channel_mut(o);
            dst.fill(b.data()[o]);
            for ci in 0..c_in {
                let wv = wm.data()[o * c_in + ci];
                let src = x.channel(ci);
                for i in 0..n {
                    dst[i] += wv * src[i];
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(out, Op::AffineMap { input, weight, bias }, rg, Aux::None)
    }

    /// Monomial features of a `[c, n]` field: one output channel per
    /// exponent tuple.
    pub fn poly_features(&mut self, input: NodeId, exponents: &[Vec<u32>]) -> NodeId {
        let x = self.value(input);
        let (c, n) = (x.shape()[0], x.channel_len());
        let terms = exponents.len();
        let mut out = Field::zeros(&[terms, n]);
        for (t, exps) in exponents.iter().enumerate() {
            debug_assert_eq!(exps.len(), c);
            let dst = out.channel_mut(t);
            dst.fill(1.0);
            for (ci, &e) in exps.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let src = x.channel(ci);
                for i in 0..n {
                    dst[i] *= src[i].powi(e as i32);
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            out,
            Op::PolyFeatures {
                input,
                exponents: exponents.to_vec(),
            },
            rg,
            Aux::None,
        )
    }

    /// Prepends a constant-one channel: `[c, n]` becomes `[c+1, n]`.
    pub fn prepend_ones(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (c, n) = (x.shape()[0], x.channel_len());
        let mut out = Field::zeros(&[c + 1, n]);
        out.channel_mut(0).fill(1.0);
        out.data_mut()[n..].copy_from_slice(x.data());
        let rg = self.rg(a);
        self.push(out, Op::PrependOnes(a), rg, Aux::None)
    }

    /// Same data under a new shape of identical element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, Aux::None)
    }

    /// Extracts channel `c` of a rank >= 2 field.
    pub fn slice_channel(&mut self, a: NodeId, c: usize) -> NodeId {
        let x = self.value(a);
        let shape = x.shape()[1..].to_vec();
        let value = Field::from_vec(&shape, x.channel(c).to_vec()).expect("slice shape");
        let rg = self.rg(a);
        self.push(value, Op::SliceChannel(a, c), rg, Aux::None)
    }

    /// Strided separable convolution of a `[d, h, w]` node.
    pub fn conv_strided(
        &mut self,
        input: NodeId,
        taps: [&[f64]; 3],
        stride: [usize; 3],
        shift: [usize; 3],
    ) -> NodeId {
        let value = kernels::conv3_strided(self.value(input), taps, stride, shift);
        let rg = self.rg(input);
        self.push(
            value,
            Op::ConvStrided {
                input,
                taps: [taps[0].to_vec(), taps[1].to_vec(), taps[2].to_vec()],
                stride,
                shift,
            },
            rg,
            Aux::None,
        )
    }

    /// Samples `source` at the identity grid plus `disp`. The inside
    /// indicator is retained as an aux byproduct (`inside_mask`).
    pub fn sample_disp(&mut self, source: NodeId, disp: NodeId) -> NodeId {
        let (values, inside) = kernels::sample_disp_forward(self.value(source), self.value(disp));
        let rg = self.rg(source) || self.rg(disp);
        self.push(
            values,
            Op::SampleDisp { source, disp },
            rg,
            Aux::Inside(inside),
        )
    }

    /// Packs `j*(j+1)/2` per-center fields (ordered `(0,0), (0,1), ...,
    /// (0,j-1), (1,1), ...`) into symmetric `[n, j, j]` matrices.
    pub fn pack_sym(&mut self, parts: &[NodeId], j: usize) -> NodeId {
        debug_assert_eq!(parts.len(), j * (j + 1) / 2);
        let n = self.value(parts[0]).len();
        let mut out = Field::zeros(&[n, j, j]);
        let mut idx = 0;
        for row in 0..j {
            for col in row..j {
                let part = self.value(parts[idx]).data();
                debug_assert_eq!(part.len(), n);
                for i in 0..n {
                    out.data_mut()[i * j * j + row * j + col] = part[i];
                    out.data_mut()[i * j * j + col * j + row] = part[i];
                }
                idx += 1;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::PackSym {
                parts: parts.to_vec(),
                j,
            },
            rg,
            Aux::None,
        )
    }

    /// Packs `j` per-center fields into `[n, j]` vectors.
    pub fn pack_vec(&mut self, parts: &[NodeId]) -> NodeId {
        let j = parts.len();
        let n = self.value(parts[0]).len();
        let mut out = Field::zeros(&[n, j]);
        for (col, &p) in parts.iter().enumerate() {
            let part = self.value(p).data();
            for i in 0..n {
                out.data_mut()[i * j + col] = part[i];
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::PackVec {
                parts: parts.to_vec(),
            },
            rg,
            Aux::None,
        )
    }

    /// Batched solve of `(gram + ridge_rel * trace/j * I) theta = rhs`
    /// with `gram` `[n, j, j]` and `rhs` `[n, j]`. Failed systems yield
    /// zero solutions; flags are exposed via `solve_ok`.
    pub fn solve_spd(&mut self, gram: NodeId, rhs: NodeId, ridge_rel: f64) -> NodeId {
        let solved = kernels::solve_spd_batch(self.value(gram), self.value(rhs), ridge_rel);
        let rg = self.rg(gram) || self.rg(rhs);
        self.push(
            solved.theta,
            Op::SolveSpd {
                gram,
                rhs,
                ridge_rel,
            },
            rg,
            Aux::Solve {
                factors: solved.factors,
                ok: solved.ok,
            },
        )
    }

    /// Per-center quadratic form `v^T G v`: `gram` `[n, j, j]`, `vecs`
    /// `[n, j]`, output `[n]`.
    pub fn quad_form(&mut self, gram: NodeId, vecs: NodeId) -> NodeId {
        let g = self.value(gram);
        let v = self.value(vecs);
        let j = v.shape()[1];
        let n = v.shape()[0];
        let mut out = Field::zeros(&[n]);
        for i in 0..n {
            let gi = &g.data()[i * j * j..(i + 1) * j * j];
            let vi = &v.data()[i * j..(i + 1) * j];
            let mut acc = 0.0;
            for r in 0..j {
                let mut row = 0.0;
                for c in 0..j {
                    row += gi[r * j + c] * vi[c];
                }
                acc += vi[r] * row;
            }
            out.data_mut()[i] = acc;
        }
        let rg = self.rg(gram) || self.rg(vecs);
        self.push(out, Op::QuadForm { gram, vecs }, rg, Aux::None)
    }

    /// Per-center dot product of `[n, j]` fields, output `[n]`.
    pub fn dot_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let x = self.value(a);
        let y = self.value(b);
        let n = x.shape()[0];
        let j = x.shape()[1];
        let mut out = Field::zeros(&[n]);
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..j {
                acc += x.data()[i * j + c] * y.data()[i * j + c];
            }
            out.data_mut()[i] = acc;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::DotVec(a, b), rg, Aux::None)
    }

    /// Bending energy of a 3-channel `[3, d, h, w]` node; scalar output.
    pub fn bending_energy(&mut self, field: NodeId, spacing: [f64; 3]) -> NodeId {
        let value = Field::scalar(kernels::bending_energy_forward(self.value(field), spacing));
        let rg = self.rg(field);
        self.push(value, Op::BendingEnergy { field, spacing }, rg, Aux::None)
    }

    /// Reverse-mode gradients of a scalar `loss` node with respect to all
    /// differentiable leaves. Deterministic given an identical tape; a
    /// non-finite adjoint aborts with the originating op's name.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut adj: Vec<Option<Field>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Field::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                adj[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Field>],
        id: NodeId,
        delta: Field,
        origin: &'static str,
    ) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        if !delta.all_finite() {
            return Err(Error::NonFinite(format!("adjoint produced by op '{origin}'")));
        }
        match &mut adj[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Field, adj: &mut [Option<Field>]) -> Result<()> {
        let origin = self.nodes[i].op.name();
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone(), origin)?;
                self.accumulate(adj, *b, g.clone(), origin)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone(), origin)?;
                self.accumulate(adj, *b, g.map(|x| -x), origin)?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv), origin)?;
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, g.zip_map(self.value(*a), |gv, av| gv * av), origin)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(adj, *a, g.zip_map(bv, |gv, y| gv / y), origin)?;
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut d = g.zip_map(av, |gv, x| gv * x);
                    for (dv, &y) in d.data_mut().iter_mut().zip(bv.data()) {
                        *dv = -*dv / (y * y);
                    }
                    self.accumulate(adj, *b, d, origin)?;
                }
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|x| -x), origin)?,
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(adj, *a, g.map(|x| s * x), origin)?;
            }
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone(), origin)?,
            Op::Log(a) => {
                self.accumulate(adj, *a, g.zip_map(self.value(*a), |gv, x| gv / x), origin)?;
            }
            Op::Exp(a) => {
                // value of this node is exp(x)
                self.accumulate(adj, *a, g.zip_map(&self.nodes[i].value, |gv, e| gv * e), origin)?;
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(adj, *a, d, origin)?;
            }
            Op::SumAll(a) => {
                let gv = g.as_scalar();
                self.accumulate(adj, *a, Field::filled(self.value(*a).shape(), gv), origin)?;
            }
            Op::AffineMap {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wm = self.value(*weight);
                let (c_in, n) = (x.shape()[0], x.channel_len());
                let c_out = wm.shape()[0];
                if self.rg(*input) {
                    let mut dx = Field::zeros(&[c_in, n]);
                    for o in 0..c_out {
                        let go = g.channel(o);
                        for ci in 0..c_in {
                            let wv = wm.data()[o * c_in + ci];
                            let dst = dx.channel_mut(ci);
                            for i2 in 0..n {
                                dst[i2] += wv * go[i2];
                            }
                        }
                    }
                    self.accumulate(adj, *input, dx, origin)?;
                }
                if self.rg(*weight) {
                    let mut dw = Field::zeros(&[c_out, c_in]);
                    for o in 0..c_out {
                        let go = g.channel(o);
                        for ci in 0..c_in {
                            let src = x.channel(ci);
                            let mut acc = 0.0;
                            for i2 in 0..n {
                                acc += go[i2] * src[i2];
                            }
                            dw.data_mut()[o * c_in + ci] = acc;
                        }
                    }
                    self.accumulate(adj, *weight, dw, origin)?;
                }
                if self.rg(*bias) {
                    let mut db = Field::zeros(&[c_out]);
                    for o in 0..c_out {
                        db.data_mut()[o] = g.channel(o).iter().sum();
                    }
                    self.accumulate(adj, *bias, db, origin)?;
                }
            }
            Op::PolyFeatures { input, exponents } => {
                let x = self.value(*input);
                let (c, n) = (x.shape()[0], x.channel_len());
                let mut dx = Field::zeros(&[c, n]);
                for (t, exps) in exponents.iter().enumerate() {
                    let go = g.channel(t);
                    for ci in 0..c {
                        let e = exps[ci];
                        if e == 0 {
                            continue;
                        }
                        // e * x_ci^(e-1) * prod of other channels
                        for i2 in 0..n {
                            let gv = go[i2];
                            if gv == 0.0 {
                                continue;
                            }
                            let mut term = e as f64 * x.channel(ci)[i2].powi(e as i32 - 1);
                            for (cj, &ej) in exps.iter().enumerate() {
                                if cj != ci && ej > 0 {
                                    term *= x.channel(cj)[i2].powi(ej as i32);
                                }
                            }
                            dx.channel_mut(ci)[i2] += gv * term;
                        }
                    }
                }
                self.accumulate(adj, *input, dx, origin)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = g.clone().reshape(&shape).expect("reshape adjoint");
                self.accumulate(adj, *a, d, origin)?;
            }
            Op::PrependOnes(a) => {
                let n = self.value(*a).channel_len();
                let c = self.value(*a).shape()[0];
                let d = Field::from_vec(&[c, n], g.data()[n..].to_vec()).expect("drop ones");
                self.accumulate(adj, *a, d, origin)?;
            }
            Op::SliceChannel(a, c) => {
                let mut d = Field::zeros(self.value(*a).shape());
                d.channel_mut(*c).copy_from_slice(g.data());
                self.accumulate(adj, *a, d, origin)?;
            }
            Op::ConvStrided {
                input,
                taps,
                stride,
                shift,
            } => {
                let dims = self.value(*input).dims3();
                let d = kernels::conv3_strided_transpose(
                    g,
                    dims,
                    [&taps[0], &taps[1], &taps[2]],
                    *stride,
                    *shift,
                );
                self.accumulate(adj, *input, d, origin)?;
            }
            Op::SampleDisp { source, disp } => {
                let (ds, dd) = kernels::sample_disp_vjp(
                    self.value(*source),
                    self.value(*disp),
                    g,
                    self.rg(*source),
                    self.rg(*disp),
                );
                if let Some(ds) = ds {
                    self.accumulate(adj, *source, ds, origin)?;
                }
                if let Some(dd) = dd {
                    self.accumulate(adj, *disp, dd, origin)?;
                }
            }
            Op::PackSym { parts, j } => {
                let j = *j;
                let n = self.value(parts[0]).len();
                let mut idx = 0;
                for row in 0..j {
                    for col in row..j {
                        let p = parts[idx];
                        idx += 1;
                        if !self.rg(p) {
                            continue;
                        }
                        let mut d = Field::zeros(&[n]);
                        for i2 in 0..n {
                            let base = i2 * j * j;
                            d.data_mut()[i2] = if row == col {
                                g.data()[base + row * j + col]
                            } else {
                                g.data()[base + row * j + col] + g.data()[base + col * j + row]
                            };
                        }
                        self.accumulate(adj, p, d, origin)?;
                    }
                }
            }
            Op::PackVec { parts } => {
                let j = parts.len();
                let n = self.value(parts[0]).len();
                for (col, &p) in parts.iter().enumerate() {
                    if !self.rg(p) {
                        continue;
                    }
                    let mut d = Field::zeros(&[n]);
                    for i2 in 0..n {
                        d.data_mut()[i2] = g.data()[i2 * j + col];
                    }
                    self.accumulate(adj, p, d, origin)?;
                }
            }
            Op::SolveSpd { gram, rhs, .. } => {
                // theta = A^-1 rhs with A = gram + ridge; for symmetric A:
                // d_rhs = A^-1 g, d_gram = -d_rhs theta^T (plus the trace
                // term from the ridge coupling)
                let theta = &self.nodes[i].value;
                let (factors, ok) = match &self.nodes[i].aux {
                    Aux::Solve { factors, ok } => (factors, ok),
                    _ => unreachable!(),
                };
                let j = theta.shape()[1];
                let n = theta.shape()[0];
                let ridge_rel = match &self.nodes[i].op {
                    Op::SolveSpd { ridge_rel, .. } => *ridge_rel,
                    _ => unreachable!(),
                };
                let mut drhs = Field::zeros(&[n, j]);
                let mut dgram = Field::zeros(&[n, j, j]);
                for s in 0..n {
                    if !ok[s] {
                        continue;
                    }
                    let fac = &factors.data()[s * j * j..(s + 1) * j * j];
                    let mut sol = g.data()[s * j..(s + 1) * j].to_vec();
                    kernels::cholesky_solve(fac, j, &mut sol);
                    drhs.data_mut()[s * j..(s + 1) * j].copy_from_slice(&sol);
                    if self.rg(*gram) {
                        let th = &theta.data()[s * j..(s + 1) * j];
                        let da = &mut dgram.data_mut()[s * j * j..(s + 1) * j * j];
                        let mut tr = 0.0;
                        for r in 0..j {
                            for c2 in 0..j {
                                da[r * j + c2] = -sol[r] * th[c2];
                            }
                            tr += da[r * j + r];
                        }
                        if ridge_rel != 0.0 {
                            let add = ridge_rel * tr / j as f64;
                            for r in 0..j {
                                da[r * j + r] += add;
                            }
                        }
                    }
                }
                if self.rg(*rhs) {
                    self.accumulate(adj, *rhs, drhs, origin)?;
                }
                if self.rg(*gram) {
                    self.accumulate(adj, *gram, dgram, origin)?;
                }
            }
            Op::QuadForm { gram, vecs } => {
                let gm = self.value(*gram);
                let v = self.value(*vecs);
                let n = v.shape()[0];
                let j = v.shape()[1];
                if self.rg(*gram) {
                    let mut dg = Field::zeros(&[n, j, j]);
                    for s in 0..n {
                        let gv = g.data()[s];
                        if gv == 0.0 {
                            continue;
                        }
                        let vs = &v.data()[s * j..(s + 1) * j];
                        let da = &mut dg.data_mut()[s * j * j..(s + 1) * j * j];
                        for r in 0..j {
                            for c2 in 0..j {
                                da[r * j + c2] = gv * vs[r] * vs[c2];
                            }
                        }
                    }
                    self.accumulate(adj, *gram, dg, origin)?;
                }
                if self.rg(*vecs) {
                    let mut dv = Field::zeros(&[n, j]);
                    for s in 0..n {
                        let gv = g.data()[s];
                        if gv == 0.0 {
                            continue;
                        }
                        let gs = &gm.data()[s * j * j..(s + 1) * j * j];
                        let vs = &v.data()[s * j..(s + 1) * j];
                        let ds = &mut dv.data_mut()[s * j..(s + 1) * j];
                        for r in 0..j {
                            let mut acc = 0.0;
                            for c2 in 0..j {
                                acc += (gs[r * j + c2] + gs[c2 * j + r]) * vs[c2];
                            }
                            ds[r] = gv * acc;
                        }
                    }
                    self.accumulate(adj, *vecs, dv, origin)?;
                }
            }
            Op::DotVec(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.shape()[0];
                let j = av.shape()[1];
                let expand = |other: &Field| {
                    let mut d = Field::zeros(&[n, j]);
                    for s in 0..n {
                        let gv = g.data()[s];
                        for c2 in 0..j {
                            d.data_mut()[s * j + c2] = gv * other.data()[s * j + c2];
                        }
                    }
                    d
                };
                if self.rg(*a) {
                    self.accumulate(adj, *a, expand(bv), origin)?;
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, expand(av), origin)?;
                }
            }
            Op::BendingEnergy { field, spacing } => {
                let d = kernels::bending_energy_vjp(self.value(*field), *spacing, g.as_scalar());
                self.accumulate(adj, *field, d, origin)?;
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
