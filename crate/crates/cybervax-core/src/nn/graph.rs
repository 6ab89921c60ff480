//! Define-by-run autodiff tape over dense `N×C×H×W` arrays.
//!
//! Every builder method computes the forward value immediately and records
//! enough context to run the exact reverse pass later. Values live in a
//! node arena; `backward` walks the tape in reverse creation order, frees
//! intermediate gradients as soon as they have been propagated, and leaves
//! gradients on the leaves that asked for them.

use ndarray::{s, Array2, Array4, Axis, Zip};

use super::conv::{conv2d_backward, conv2d_forward, conv_out_size};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Padding behaviour for [`Graph::pad2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<S: Scalar> {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    Abs(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Clamp01(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Pad2d {
        x: NodeId,
        pad: usize,
        mode: PadMode,
    },
    Upsample2(NodeId),
    ConcatC(NodeId, NodeId),
    Reshape(NodeId),
    Mean(NodeId),
    SpatialMean(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        /// Per (sample, group): (mean, inv_std) captured during forward.
        stats: Array2<(S, S)>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        head_dim: usize,
        /// Softmax probabilities per (sample·heads), each `T×T`.
        probs: Vec<Array2<S>>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: NodeId,
    },
}

struct Node<S: Scalar> {
    value: Array4<S>,
    grad: Option<Array4<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Keep gradients on interior nodes after backward (for inspection in
    /// tests); the default frees them early to bound peak memory.
    retain_interior_grads: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            retain_interior_grads: false,
        }
    }

    pub fn with_retained_grads() -> Self {
        Graph {
            nodes: Vec::new(),
            retain_interior_grads: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array4<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        let s = self.nodes[id.0].value.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Gradient left on a node after [`Graph::backward`]. Interior nodes
    /// only hold one if the graph was built `with_retained_grads`.
    pub fn grad(&self, id: NodeId) -> Option<&Array4<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Array4<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register a leaf. `needs_grad` marks trainable parameters (or inputs
    /// whose sensitivity a test wants). Values are normalised to standard
    /// layout so later reshaping slices stay contiguous.
    pub fn input(&mut self, value: Array4<S>, needs_grad: bool) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, Op::Input, needs_grad)
    }

    // ---- elementwise binary ops (with broadcasting) -------------------

    fn broadcast_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<[usize; 4]> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let mut out = [0usize; 4];
        for i in 0..4 {
            out[i] = if sa[i] == sb[i] {
                sa[i]
            } else if sa[i] == 1 {
                sb[i]
            } else if sb[i] == 1 {
                sa[i]
            } else {
                return Err(Error::dimension(
                    what,
                    format!("broadcastable shapes, lhs {sa:?}"),
                    format!("rhs {sb:?}"),
                ));
            };
        }
        Ok(out)
    }

    fn binary<F>(&mut self, a: NodeId, b: NodeId, what: &str, f: F, op: Op<S>) -> Result<NodeId>
    where
        F: Fn(S, S) -> S,
    {
        let shape = self.broadcast_shape(a, b, what)?;
        let mut out = Array4::<S>::zeros(shape);
        Zip::from(&mut out)
            .and_broadcast(&self.nodes[a.0].value)
            .and_broadcast(&self.nodes[b.0].value)
            .for_each(|o, &x, &y| *o = f(x, y));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ops ----------------------------------------

    fn unary<F>(&mut self, a: NodeId, f: F, op: Op<S>) -> NodeId
    where
        F: Fn(S) -> S,
    {
        let out = self.nodes[a.0].value.mapv(f);
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid_stable, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * sigmoid_stable(x), Op::Silu(a))
    }

    /// Clamp to `[0, 1]`; gradient passes through wherever the input is
    /// inside the interval (inclusive) and is cut elsewhere.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(S::zero()).min(S::one()), Op::Clamp01(a))
    }

    // ---- structural ops ------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if groups == 0 || xs[1] != ws[1] * groups || ws[0] % groups != 0 {
            return Err(Error::dimension(
                "conv2d channels",
                format!("input C == weight_Cin*groups, weight {ws:?} groups {groups}"),
                format!("input {xs:?}"),
            ));
        }
        let ho = conv_out_size(xs[2], ws[2], stride, pad);
        let wo = conv_out_size(xs[3], ws[3], stride, pad);
        if ho.is_none() || wo.is_none() {
            return Err(Error::dimension(
                "conv2d geometry",
                "kernel fits padded input",
                format!("input {xs:?} kernel {}x{} stride {stride} pad {pad}", ws[2], ws[3]),
            ));
        }
        let out = conv2d_forward(
            self.nodes[x.0].value.view(),
            self.nodes[w.0].value.view(),
            stride,
            pad,
            groups,
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad, groups }, needs))
    }

    pub fn pad2d(&mut self, x: NodeId, pad: usize, mode: PadMode) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        let mut out = Array4::<S>::zeros((n, c, h + 2 * pad, w + 2 * pad));
        {
            let src = &self.nodes[x.0].value;
            match mode {
                PadMode::Zero => {
                    out.slice_mut(s![.., .., pad..pad + h, pad..pad + w]).assign(src);
                }
                PadMode::Replicate => {
                    for ((ni, ci, y, xx), v) in out.indexed_iter_mut() {
                        let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                        let sx = (xx as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                        *v = src[[ni, ci, sy, sx]];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Pad2d { x, pad, mode }, needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        let src = &self.nodes[x.0].value;
        let mut out = Array4::<S>::zeros((n, c, 2 * h, 2 * w));
        for ((ni, ci, y, xx), v) in out.indexed_iter_mut() {
            *v = src[[ni, ci, y / 2, xx / 2]];
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dimension(
                "concat_c",
                format!("matching N/H/W, lhs {sa:?}"),
                format!("rhs {sb:?}"),
            ));
        }
        let out = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("checked shapes");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatC(a, b), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: [usize; 4]) -> Result<NodeId> {
        let n_old: usize = self.shape(x).iter().product();
        let n_new: usize = shape.iter().product();
        if n_old != n_new {
            return Err(Error::dimension(
                "reshape",
                format!("{n_old} elements"),
                format!("{:?} = {n_new} elements", shape),
            ));
        }
        let out = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(shape)
            .expect("size checked");
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    // ---- reductions -----------------------------------------------------

    /// Mean over every element, producing a `1×1×1×1` scalar node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let m = v.iter().copied().sum::<S>() / S::from_usize(v.len()).unwrap();
        let out = Array4::from_elem((1, 1, 1, 1), m);
        let needs = self.needs(x);
        self.push(out, Op::Mean(x), needs)
    }

    /// Mean over H and W, producing `N×C×1×1`.
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        let denom = S::from_usize(h * w).unwrap();
        let v = &self.nodes[x.0].value;
        let mut out = Array4::<S>::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                let s: S = v.slice(s![ni, ci, .., ..]).iter().copied().sum();
                out[[ni, ci, 0, 0]] = s / denom;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SpatialMean(x), needs)
    }

    // ---- fused layers ----------------------------------------------------

    /// Group normalisation with affine parameters `gamma`/`beta` of shape
    /// `1×C×1×1`.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dimension(
                "group_norm",
                format!("groups dividing C={c}"),
                groups.to_string(),
            ));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [1, c, 1, 1] {
                return Err(Error::dimension(
                    "group_norm affine",
                    format!("{name} of shape [1,{c},1,1]"),
                    format!("{:?}", self.shape(id)),
                ));
            }
        }
        let cpg = c / groups;
        let m = S::from_usize(cpg * h * w).unwrap();
        let eps = S::of_f64(GROUP_NORM_EPS);
        let mut out = Array4::<S>::zeros((n, c, h, w));
        let mut stats = Array2::from_elem((n, groups), (S::zero(), S::zero()));
        {
            let xv = &self.nodes[x.0].value;
            let ga = &self.nodes[gamma.0].value;
            let be = &self.nodes[beta.0].value;
            for ni in 0..n {
                for g in 0..groups {
                    let sl = s![ni, g * cpg..(g + 1) * cpg, .., ..];
                    let xg = xv.slice(sl);
                    let mean = xg.iter().copied().sum::<S>() / m;
                    let var = xg
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<S>()
                        / m;
                    let inv_std = S::one() / (var + eps).sqrt();
                    stats[[ni, g]] = (mean, inv_std);
                    let mut og = out.slice_mut(sl);
                    for ci in 0..cpg {
                        let gm = ga[[0, g * cpg + ci, 0, 0]];
                        let bt = be[[0, g * cpg + ci, 0, 0]];
                        Zip::from(og.slice_mut(s![ci, .., ..]))
                            .and(xg.slice(s![ci, .., ..]))
                            .for_each(|o, &v| {
                                *o = gm * ((v - mean) * inv_std) + bt;
                            });
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, needs))
    }

    /// Multi-head self-attention over spatial positions. `q`, `k`, `v` are
    /// `N×C×H×W` projections with `C` divisible by `head_dim`; the output
    /// has the same shape as `q`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        head_dim: usize,
    ) -> Result<NodeId> {
        let sq = self.shape(q);
        if self.shape(k) != sq || self.shape(v) != sq {
            return Err(Error::dimension(
                "attention",
                format!("q/k/v all {sq:?}"),
                format!("k {:?} v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let [n, c, h, w] = sq;
        if head_dim == 0 || c % head_dim != 0 {
            return Err(Error::dimension(
                "attention head_dim",
                format!("head_dim dividing C={c}"),
                head_dim.to_string(),
            ));
        }
        let heads = c / head_dim;
        let scale = S::one() / S::from_usize(head_dim).unwrap().sqrt();
        let mut out = Array4::<S>::zeros((n, c, h, w));
        let mut probs = Vec::with_capacity(n * heads);
        for ni in 0..n {
            for hd in 0..heads {
                let qm = self.head_tokens(q, ni, hd, head_dim); // T×d
                let km = self.head_tokens(k, ni, hd, head_dim);
                let vm = self.head_tokens(v, ni, hd, head_dim);
                let mut scores: Array2<S> = qm.dot(&km.t());
                scores.mapv_inplace(|x| x * scale);
                // Row-stable softmax.
                for mut row in scores.rows_mut() {
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    row.mapv_inplace(|x| (x - mx).exp());
                    let sum = row.iter().copied().sum::<S>();
                    row.mapv_inplace(|x| x / sum);
                }
                let o: Array2<S> = scores.dot(&vm); // T×d
                let mut dst = out.slice_mut(s![ni, hd * head_dim..(hd + 1) * head_dim, .., ..]);
                dst.assign(
                    &o.t()
                        .as_standard_layout()
                        .to_shape((head_dim, h, w))
                        .unwrap(),
                );
                probs.push(scores);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, head_dim, probs }, needs))
    }

    /// Extract one attention head as a `T×d` token matrix.
    fn head_tokens(&self, id: NodeId, n: usize, head: usize, d: usize) -> Array2<S> {
        let [_, _, h, w] = self.shape(id);
        self.nodes[id.0]
            .value
            .slice(s![n, head * d..(head + 1) * d, .., ..])
            .to_shape((d, h * w))
            .expect("contiguous slice")
            .t()
            .to_owned()
    }

    /// Mean binary cross-entropy on logits; numerically stable. `targets`
    /// must share the logits' shape and hold values in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        if self.shape(logits) != self.shape(targets) {
            return Err(Error::dimension(
                "bce_with_logits",
                format!("{:?}", self.shape(logits)),
                format!("{:?}", self.shape(targets)),
            ));
        }
        let z = &self.nodes[logits.0].value;
        let t = &self.nodes[targets.0].value;
        let numel = S::from_usize(z.len()).unwrap();
        let mut acc = S::zero();
        Zip::from(z).and(t).for_each(|&z, &t| {
            let pos = z.max(S::zero());
            acc = acc + pos - z * t + (S::one() + (-z.abs()).exp()).ln();
        });
        let out = Array4::from_elem((1, 1, 1, 1), acc / numel);
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }, needs))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Run the reverse pass from a scalar node. Leaf gradients accumulate
    /// on nodes created with `needs_grad = true`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Parameter(format!(
                "backward target must be a scalar node, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Parameter(
                "backward target does not depend on any gradient-tracked leaf".into(),
            ));
        }
        self.accumulate(loss, Array4::ones((1, 1, 1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Input) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let deltas = self.backward_op(i, &g);
            if self.retain_interior_grads {
                self.nodes[i].grad = Some(g);
            }
            for (id, d) in deltas {
                self.accumulate(id, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Array4<S>) {
        debug_assert_eq!(delta.shape(), self.nodes[id.0].value.shape());
        match self.nodes[id.0].grad.as_mut() {
            None => self.nodes[id.0].grad = Some(delta),
            Some(g) => g.zip_mut_with(&delta, |a, &b| *a = *a + b),
        }
    }

    /// Compute the input deltas for node `i` given its output gradient.
    fn backward_op(&self, i: usize, g: &Array4<S>) -> Vec<(NodeId, Array4<S>)> {
        let mut out: Vec<(NodeId, Array4<S>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, sum_to_shape(g, self.shape(*a))));
                }
                if self.needs(*b) {
                    out.push((*b, sum_to_shape(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, sum_to_shape(g, self.shape(*a))));
                }
                if self.needs(*b) {
                    let neg = g.mapv(|x| -x);
                    out.push((*b, sum_to_shape(&neg, self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut da = Array4::<S>::zeros(g.raw_dim());
                    Zip::from(&mut da)
                        .and(g)
                        .and_broadcast(&self.nodes[b.0].value)
                        .for_each(|o, &gg, &bv| *o = gg * bv);
                    out.push((*a, sum_to_shape(&da, self.shape(*a))));
                }
                if self.needs(*b) {
                    let mut db = Array4::<S>::zeros(g.raw_dim());
                    Zip::from(&mut db)
                        .and(g)
                        .and_broadcast(&self.nodes[a.0].value)
                        .for_each(|o, &gg, &av| *o = gg * av);
                    out.push((*b, sum_to_shape(&db, self.shape(*b))));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let mut da = Array4::<S>::zeros(g.raw_dim());
                    Zip::from(&mut da)
                        .and(g)
                        .and_broadcast(&self.nodes[b.0].value)
                        .for_each(|o, &gg, &bv| *o = gg / bv);
                    out.push((*a, sum_to_shape(&da, self.shape(*a))));
                }
                if self.needs(*b) {
                    let mut db = Array4::<S>::zeros(g.raw_dim());
                    Zip::from(&mut db)
                        .and(g)
                        .and_broadcast(&self.nodes[a.0].value)
                        .and_broadcast(&self.nodes[b.0].value)
                        .for_each(|o, &gg, &av, &bv| *o = -gg * av / (bv * bv));
                    out.push((*b, sum_to_shape(&db, self.shape(*b))));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    out.push((*a, g.mapv(|x| x * *c)));
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(&self.nodes[a.0].value).for_each(|o, &x| {
                        *o = if x > S::zero() {
                            *o
                        } else if x < S::zero() {
                            -*o
                        } else {
                            S::zero()
                        };
                    });
                    out.push((*a, da));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(&node.value).for_each(|o, &y| {
                        *o = *o * y * (S::one() - y);
                    });
                    out.push((*a, da));
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(&self.nodes[a.0].value).for_each(|o, &x| {
                        let sg = sigmoid_stable(x);
                        *o = *o * (sg + x * sg * (S::one() - sg));
                    });
                    out.push((*a, da));
                }
            }
            Op::Clamp01(a) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(&self.nodes[a.0].value).for_each(|o, &x| {
                        if !(x >= S::zero() && x <= S::one()) {
                            *o = S::zero();
                        }
                    });
                    out.push((*a, da));
                }
            }
            Op::Conv2d { x, w, stride, pad, groups } => {
                let (dx, dw) = conv2d_backward(
                    self.nodes[x.0].value.view(),
                    self.nodes[w.0].value.view(),
                    g.view(),
                    *stride,
                    *pad,
                    *groups,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::Pad2d { x, pad, mode } => {
                if self.needs(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let p = *pad;
                    let dx = match mode {
                        PadMode::Zero => g.slice(s![.., .., p..p + h, p..p + w]).to_owned(),
                        PadMode::Replicate => {
                            let mut dx = Array4::<S>::zeros((n, c, h, w));
                            for ((ni, ci, y, xx), &gv) in g.indexed_iter() {
                                let sy = (y as isize - p as isize).clamp(0, h as isize - 1) as usize;
                                let sx = (xx as isize - p as isize).clamp(0, w as isize - 1) as usize;
                                dx[[ni, ci, sy, sx]] = dx[[ni, ci, sy, sx]] + gv;
                            }
                            dx
                        }
                    };
                    out.push((*x, dx));
                }
            }
            Op::Upsample2(a) => {
                if self.needs(*a) {
                    let [n, c, h, w] = self.shape(*a);
                    let mut da = Array4::<S>::zeros((n, c, h, w));
                    for ((ni, ci, y, xx), &gv) in g.indexed_iter() {
                        da[[ni, ci, y / 2, xx / 2]] = da[[ni, ci, y / 2, xx / 2]] + gv;
                    }
                    out.push((*a, da));
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.shape(*a)[1];
                if self.needs(*a) {
                    out.push((*a, g.slice(s![.., ..ca, .., ..]).to_owned()));
                }
                if self.needs(*b) {
                    out.push((*b, g.slice(s![.., ca.., .., ..]).to_owned()));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let da = g
                        .clone()
                        .into_shape_with_order(self.shape(*a))
                        .expect("same element count");
                    out.push((*a, da));
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let shape = self.shape(*a);
                    let numel: usize = shape.iter().product();
                    let v = g[[0, 0, 0, 0]] / S::from_usize(numel).unwrap();
                    out.push((*a, Array4::from_elem(shape, v)));
                }
            }
            Op::SpatialMean(a) => {
                if self.needs(*a) {
                    let [n, c, h, w] = self.shape(*a);
                    let denom = S::from_usize(h * w).unwrap();
                    let mut da = Array4::<S>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let v = g[[ni, ci, 0, 0]] / denom;
                            da.slice_mut(s![ni, ci, .., ..]).fill(v);
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let [n, c, h, w] = self.shape(*x);
                let cpg = c / groups;
                let m = S::from_usize(cpg * h * w).unwrap();
                let xv = &self.nodes[x.0].value;
                let ga = &self.nodes[gamma.0].value;
                let need_dx = self.needs(*x);
                let need_dg = self.needs(*gamma);
                let need_db = self.needs(*beta);
                let mut dx = need_dx.then(|| Array4::<S>::zeros((n, c, h, w)));
                let mut dgamma = need_dg.then(|| Array4::<S>::zeros((1, c, 1, 1)));
                let mut dbeta = need_db.then(|| Array4::<S>::zeros((1, c, 1, 1)));
                for ni in 0..n {
                    for gi in 0..*groups {
                        let (mean, inv_std) = stats[[ni, gi]];
                        let sl = s![ni, gi * cpg..(gi + 1) * cpg, .., ..];
                        let xg = xv.slice(sl);
                        let gg = g.slice(sl);
                        // dxhat = g·γ; two reductions then the fused form.
                        let mut sum1 = S::zero();
                        let mut sum2 = S::zero();
                        for ci in 0..cpg {
                            let gmc = ga[[0, gi * cpg + ci, 0, 0]];
                            let xc = xg.slice(s![ci, .., ..]);
                            let gc = gg.slice(s![ci, .., ..]);
                            Zip::from(&xc).and(&gc).for_each(|&xx, &gv| {
                                let xhat = (xx - mean) * inv_std;
                                let dxh = gv * gmc;
                                sum1 = sum1 + dxh;
                                sum2 = sum2 + dxh * xhat;
                            });
                        }
                        for ci in 0..cpg {
                            let cc = gi * cpg + ci;
                            let gmc = ga[[0, cc, 0, 0]];
                            let xc = xg.slice(s![ci, .., ..]);
                            let gc = gg.slice(s![ci, .., ..]);
                            if let Some(dg) = dgamma.as_mut() {
                                let mut acc = S::zero();
                                Zip::from(&xc).and(&gc).for_each(|&xx, &gv| {
                                    acc = acc + gv * ((xx - mean) * inv_std);
                                });
                                dg[[0, cc, 0, 0]] = dg[[0, cc, 0, 0]] + acc;
                            }
                            if let Some(db) = dbeta.as_mut() {
                                let acc = gc.iter().copied().sum::<S>();
                                db[[0, cc, 0, 0]] = db[[0, cc, 0, 0]] + acc;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let mut dxc = dx.slice_mut(s![ni, cc, .., ..]);
                                Zip::from(&mut dxc).and(&xc).and(&gc).for_each(|o, &xx, &gv| {
                                    let xhat = (xx - mean) * inv_std;
                                    let dxh = gv * gmc;
                                    *o = inv_std * (dxh - (sum1 + xhat * sum2) / m);
                                });
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dg) = dgamma {
                    out.push((*gamma, dg));
                }
                if let Some(db) = dbeta {
                    out.push((*beta, db));
                }
            }
            Op::Attention { q, k, v, head_dim, probs } => {
                let [n, c, h, w] = self.shape(*q);
                let heads = c / head_dim;
                let d = *head_dim;
                let scale = S::one() / S::from_usize(d).unwrap().sqrt();
                let need_dq = self.needs(*q);
                let need_dk = self.needs(*k);
                let need_dv = self.needs(*v);
                let mut dq = need_dq.then(|| Array4::<S>::zeros((n, c, h, w)));
                let mut dk = need_dk.then(|| Array4::<S>::zeros((n, c, h, w)));
                let mut dv = need_dv.then(|| Array4::<S>::zeros((n, c, h, w)));
                for ni in 0..n {
                    for hd in 0..heads {
                        let p = &probs[ni * heads + hd]; // T×T
                        let go = g
                            .slice(s![ni, hd * d..(hd + 1) * d, .., ..])
                            .to_shape((d, h * w))
                            .expect("contiguous")
                            .t()
                            .to_owned(); // T×d
                        if let Some(dv) = dv.as_mut() {
                            let dvm: Array2<S> = p.t().dot(&go); // T×d
                            let mut dst = dv.slice_mut(s![ni, hd * d..(hd + 1) * d, .., ..]);
                            let add = dvm.t().as_standard_layout().to_owned().into_shape_with_order((d, h, w)).unwrap();
                            dst.zip_mut_with(&add, |a, &b| *a = *a + b);
                        }
                        if need_dq || need_dk {
                            let vm = self.head_tokens(*v, ni, hd, d);
                            let dp: Array2<S> = go.dot(&vm.t()); // T×T
                            // Softmax backward: ds = p ∘ (dp − rowsum(dp∘p))
                            let mut ds = Array2::<S>::zeros(dp.raw_dim());
                            for ti in 0..dp.shape()[0] {
                                let prow = p.row(ti);
                                let dprow = dp.row(ti);
                                let dot = prow
                                    .iter()
                                    .zip(dprow.iter())
                                    .map(|(&a, &b)| a * b)
                                    .sum::<S>();
                                let mut dsrow = ds.row_mut(ti);
                                Zip::from(&mut dsrow).and(&prow).and(&dprow).for_each(
                                    |o, &pv, &dpv| {
                                        *o = pv * (dpv - dot);
                                    },
                                );
                            }
                            if let Some(dq) = dq.as_mut() {
                                let km = self.head_tokens(*k, ni, hd, d);
                                let mut dqm: Array2<S> = ds.dot(&km); // T×d
                                dqm.mapv_inplace(|x| x * scale);
                                let mut dst = dq.slice_mut(s![ni, hd * d..(hd + 1) * d, .., ..]);
                                let add =
                                    dqm.t().as_standard_layout().to_owned().into_shape_with_order((d, h, w)).unwrap();
                                dst.zip_mut_with(&add, |a, &b| *a = *a + b);
                            }
                            if let Some(dk) = dk.as_mut() {
                                let qm = self.head_tokens(*q, ni, hd, d);
                                let mut dkm: Array2<S> = ds.t().dot(&qm); // T×d
                                dkm.mapv_inplace(|x| x * scale);
                                let mut dst = dk.slice_mut(s![ni, hd * d..(hd + 1) * d, .., ..]);
                                let add =
                                    dkm.t().as_standard_layout().to_owned().into_shape_with_order((d, h, w)).unwrap();
                                dst.zip_mut_with(&add, |a, &b| *a = *a + b);
                            }
                        }
                    }
                }
                if let Some(dq) = dq {
                    out.push((*q, dq));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                if let Some(dv) = dv {
                    out.push((*v, dv));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                let t = &self.nodes[targets.0].value;
                let numel = S::from_usize(z.len()).unwrap();
                let gs = g[[0, 0, 0, 0]] / numel;
                if self.needs(*logits) {
                    let mut dz = Array4::<S>::zeros(z.raw_dim());
                    Zip::from(&mut dz).and(z).and(t).for_each(|o, &z, &t| {
                        *o = gs * (sigmoid_stable(z) - t);
                    });
                    out.push((*logits, dz));
                }
                if self.needs(*targets) {
                    // dL/dt = −z (per element, scaled); targets are labels
                    // in practice but the derivative is defined.
                    let mut dt = Array4::<S>::zeros(z.raw_dim());
                    Zip::from(&mut dt).and(z).for_each(|o, &z| {
                        *o = -gs * z;
                    });
                    out.push((*targets, dt));
                }
            }
        }
        out
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Reduce a broadcast gradient back to the operand's shape by summing the
/// broadcast axes (those where the operand had extent 1).
fn sum_to_shape<S: Scalar>(g: &Array4<S>, target: [usize; 4]) -> Array4<S> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = g.clone();
    for ax in 0..4 {
        if out.shape()[ax] != target[ax] {
            debug_assert_eq!(target[ax], 1, "invalid broadcast reduction");
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut s = seed;
        Array4::from_shape_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    /// Central finite difference of a scalar-valued graph function with
    /// respect to one leaf, compared against the tape gradient.
    fn check_grad<F>(build: F, input: Array4<f64>, tol: f64)
    where
        F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let x = g.input(input.clone(), true);
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().clone();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for idx in ndarray::indices(input.raw_dim()) {
            let mut xp = input.clone();
            xp[idx] += eps;
            let mut gp = Graph::new();
            let n = gp.input(xp, false);
            // needs_grad=false would refuse backward; we only need forward.
            let lp = build(&mut gp, n);
            let fp = gp.scalar(lp);

            let mut xm = input.clone();
            xm[idx] -= eps;
            let mut gm = Graph::new();
            let n = gm.input(xm, false);
            let lm = build(&mut gm, n);
            let fm = gm.scalar(lm);

            let fd = (fp - fm) / (2.0 * eps);
            let diff = (analytic[idx] - fd).abs();
            worst = worst.max(diff);
        }
        assert!(worst < tol, "worst grad error {worst}");
    }

    #[test]
    fn elementwise_chain_gradient() {
        let x = fill((1, 2, 3, 3), 42);
        check_grad(
            |g, x| {
                let a = g.silu(x);
                let b = g.sigmoid(a);
                let c = g.abs(b);
                let d = g.scale(c, 3.0);
                let e = g.add_scalar(d, -0.1);
                g.mean(e)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn broadcast_mul_div_gradient() {
        let x = fill((2, 3, 2, 2), 7).mapv(|v| v + 2.0); // keep away from 0 for div
        check_grad(
            |g, x| {
                let c = g.input(fill((1, 3, 1, 1), 3).mapv(|v| v + 2.0), false);
                let m = g.mul(x, c).unwrap();
                let d = g.div(m, c).unwrap();
                let e = g.mul(d, d).unwrap();
                g.mean(e)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn broadcast_backward_reduces_to_param_shape() {
        // Gradient wrt a (1,C,1,1) bias broadcast over (N,C,H,W).
        let mut g = Graph::<f64>::new();
        let x = g.input(fill((2, 3, 4, 4), 1), false);
        let b = g.input(fill((1, 3, 1, 1), 2), true);
        let y = g.add(x, b).unwrap();
        let loss = g.mean(y);
        g.backward(loss).unwrap();
        let gb = g.grad(b).unwrap();
        assert_eq!(gb.shape(), &[1, 3, 1, 1]);
        // d mean / d b_c = (N·H·W)/(N·C·H·W) = 1/C
        for &v in gb.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_ops_gradient() {
        let x = fill((1, 2, 4, 4), 9);
        check_grad(
            |g, x| {
                let up = g.upsample2(x);
                let pad = g.pad2d(up, 1, PadMode::Replicate);
                let z = g.pad2d(pad, 1, PadMode::Zero);
                let r = g.reshape(z, [1, 8, 6, 6]).unwrap();
                let other = g.input(Array4::from_elem((1, 8, 6, 6), 0.3), false);
                let cat = g.concat_c(r, other).unwrap();
                let m = g.mul(cat, cat).unwrap();
                g.mean(m)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn conv_and_spatial_mean_gradient() {
        let x = fill((1, 2, 5, 5), 17);
        check_grad(
            |g, x| {
                let w = g.input(fill((3, 2, 3, 3), 23), false);
                let y = g.conv2d(x, w, 1, 1, 1).unwrap();
                let sm = g.spatial_mean(y);
                let m2 = g.mul(sm, sm).unwrap();
                g.mean(m2)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn group_norm_gradient_x_gamma_beta() {
        let x = fill((2, 4, 3, 3), 31);
        check_grad(
            |g, x| {
                let gamma = g.input(fill((1, 4, 1, 1), 5).mapv(|v| v + 1.0), false);
                let beta = g.input(fill((1, 4, 1, 1), 6), false);
                let y = g.group_norm(x, gamma, beta, 2).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.mean(sq)
            },
            x,
            1e-5,
        );
        // Gradient wrt gamma and beta via dedicated leaves.
        let mut g = Graph::<f64>::new();
        let xv = fill((2, 4, 3, 3), 31);
        let x = g.input(xv.clone(), false);
        let gamma = g.input(fill((1, 4, 1, 1), 5).mapv(|v| v + 1.0), true);
        let beta = g.input(fill((1, 4, 1, 1), 6), true);
        let y = g.group_norm(x, gamma, beta, 2).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        let dgamma = g.grad(gamma).unwrap().clone();
        let dbeta = g.grad(beta).unwrap().clone();
        let eps = 1e-6;
        for ci in 0..4 {
            for (param_grad, which) in [(&dgamma, "gamma"), (&dbeta, "beta")] {
                let f = |delta: f64| {
                    let mut g = Graph::<f64>::new();
                    let x = g.input(xv.clone(), false);
                    let mut gm = fill((1, 4, 1, 1), 5).mapv(|v| v + 1.0);
                    let mut bt = fill((1, 4, 1, 1), 6);
                    if which == "gamma" {
                        gm[[0, ci, 0, 0]] += delta;
                    } else {
                        bt[[0, ci, 0, 0]] += delta;
                    }
                    let gamma = g.input(gm, false);
                    let beta = g.input(bt, false);
                    let y = g.group_norm(x, gamma, beta, 2).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    let l = g.mean(sq);
                    g.scalar(l)
                };
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                let got = param_grad[[0, ci, 0, 0]];
                assert!((got - fd).abs() < 1e-6, "{which}[{ci}]: {got} vs {fd}");
            }
        }
    }

    #[test]
    fn attention_gradient() {
        // Small single-head attention over 2×2 tokens.
        let x = fill((1, 4, 2, 2), 77);
        check_grad(
            |g, x| {
                let wq = g.input(fill((4, 4, 1, 1), 1), false);
                let wk = g.input(fill((4, 4, 1, 1), 2), false);
                let wv = g.input(fill((4, 4, 1, 1), 3), false);
                let q = g.conv2d(x, wq, 1, 0, 1).unwrap();
                let k = g.conv2d(x, wk, 1, 0, 1).unwrap();
                let v = g.conv2d(x, wv, 1, 0, 1).unwrap();
                let o = g.attention(q, k, v, 4).unwrap();
                let sq = g.mul(o, o).unwrap();
                g.mean(sq)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn multihead_attention_gradient() {
        let x = fill((2, 4, 2, 2), 101);
        check_grad(
            |g, x| {
                let o = g.attention(x, x, x, 2).unwrap(); // 2 heads, q=k=v
                let sq = g.mul(o, o).unwrap();
                g.mean(sq)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn bce_matches_closed_form_and_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Array4::from_elem((1, 1, 1, 1), 0.0), true);
        let t = g.input(Array4::from_elem((1, 1, 1, 1), 1.0), false);
        let l = g.bce_with_logits(z, t).unwrap();
        // BCE(0, 1) = ln 2
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        g.backward(l).unwrap();
        // d/dz = σ(0) − 1 = −0.5
        assert!((g.grad(z).unwrap()[[0, 0, 0, 0]] + 0.5).abs() < 1e-12);

        let x = fill((2, 1, 1, 1), 55);
        check_grad(
            |g, x| {
                let t = g.input(Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 0.0]).unwrap(), false);
                g.bce_with_logits(x, t).unwrap()
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn clamp_cuts_gradient_outside_interval() {
        let mut g = Graph::<f64>::new();
        let x = g.input(
            Array4::from_shape_vec((1, 1, 1, 3), vec![-0.5, 0.5, 1.5]).unwrap(),
            true,
        );
        let c = g.clamp01(x);
        let l = g.mean(c);
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[[0, 0, 0, 0]], 0.0);
        assert!((gx[[0, 0, 0, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(gx[[0, 0, 0, 2]], 0.0);
    }

    #[test]
    fn interior_grads_freed_by_default_retained_on_request() {
        let run = |retain: bool| {
            let mut g = if retain {
                Graph::<f64>::with_retained_grads()
            } else {
                Graph::<f64>::new()
            };
            let x = g.input(fill((1, 1, 2, 2), 3), true);
            let y = g.silu(x);
            let l = g.mean(y);
            g.backward(l).unwrap();
            (g.grad(x).is_some(), g.grad(y).is_some())
        };
        assert_eq!(run(false), (true, false));
        assert_eq!(run(true), (true, true));
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let mut g = Graph::<f64>::new();
        let x = g.input(fill((1, 1, 2, 2), 3), true);
        assert!(g.backward(x).is_err()); // not scalar
        let mut g = Graph::<f64>::new();
        let x = g.input(fill((1, 1, 1, 1), 3), false);
        let y = g.silu(x);
        assert!(g.backward(y).is_err()); // nothing tracked
    }

    #[test]
    fn shape_mismatches_are_dimension_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(fill((1, 2, 4, 4), 1), false);
        let b = g.input(fill((1, 3, 4, 4), 2), false);
        assert!(g.add(a, b).is_err());
        assert!(g.concat_c(a, b).is_ok());
        let w = g.input(fill((4, 3, 3, 3), 3), false);
        assert!(g.conv2d(a, w, 1, 1, 1).is_err()); // channel mismatch
        assert!(g.reshape(a, [1, 2, 4, 5]).is_err());
        let c = g.input(fill((1, 4, 2, 2), 4), false);
        assert!(g.attention(c, c, c, 3).is_err()); // head_dim ∤ C
        let gamma = g.input(fill((1, 2, 1, 1), 5), false);
        let beta = g.input(fill((1, 2, 1, 1), 6), false);
        assert!(g.group_norm(a, gamma, beta, 3).is_err()); // groups ∤ C
    }
}

