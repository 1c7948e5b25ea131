//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Sequences are packed row-wise: a batch of variable-length sequences is a
//! single `total_tokens × width` matrix plus a [`Segments`] table of row
//! offsets. Row-wise ops (linear, layer norm, activations) ignore the
//! segmentation; attention, recurrence and pooling ops respect it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{self, Matrix};

/// Row offsets of packed sequences: sequence `i` occupies rows
/// `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    #[inline]
    pub fn range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Concatenation of two layouts (rows of `other` follow rows of `self`).
    pub fn concat(&self, other: &Segments) -> Segments {
        Segments::from_lengths(self.lengths().chain(other.lengths()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let id = ParamId(self.tensors.len() as u32);
        self.names.push(name.into());
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0 as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId(i as u32))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.tensors.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    /// Binds every tensor onto `tape`. Frozen bindings receive no gradient.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|m| if trainable { tape.param(m) } else { tape.constant(m) })
            .collect();
        BoundParams { vars }
    }
}

/// The tape variables of a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0 as usize]
    }

    /// Gradients of the bound parameters after a backward pass.
    pub fn gradients(&self, back: &Backward) -> Gradients {
        Gradients {
            slots: self.vars.iter().map(|v| back.grad(*v).cloned()).collect(),
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` means no
/// gradient path reached that tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn slots(&self) -> &[Option<Matrix>] {
        &self.slots
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            let Some(g) = theirs else { continue };
            match mine {
                Some(m) => {
                    for (a, b) in m.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut m = g.clone();
                    m.scale_assign(scale);
                    *mine = Some(m);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.slots.iter_mut().flatten() {
            m.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Matrix::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .fold(0.0, |m, g| math::fmax(m, g.max_abs()))
    }
}

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

struct AttnCache {
    heads: usize,
    q_segs: Segments,
    k_segs: Segments,
    causal: bool,
    /// Softmax weights, one `lq × lk` block per (segment, head).
    probs: Vec<f64>,
}

struct GruCache {
    segs: Segments,
    reverse: bool,
    hidden: usize,
    // Per packed row: r, z, n gates and the recurrent contribution to n.
    r: Matrix,
    z: Matrix,
    n: Matrix,
    ghn: Matrix,
    // Hidden state entering each step.
    h_prev: Matrix,
}

enum Op {
    Leaf,
    Param,
    Gather { table: Var, ids: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    Relu(Var),
    Selu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, cache: AttnCache },
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: Option<u32>, probs: Matrix, count: usize },
    Gru { gi: Var, w_hh: Var, b_hh: Var, cache: GruCache },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SegmentMean { x: Var, segs: Segments },
    Mean(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// A recording of forward computations, replayed backwards by
/// [`Tape::backward`].
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: gradients for every node that needed one.
pub struct Backward {
    grads: Vec<Option<Matrix>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    /// Owned constant; receives no gradient.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, m: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Param,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed frozen tensor; gradients stop here.
    pub fn constant(&mut self, m: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.leaf(m)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// `x · w + b` with `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a + s * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        tensor::axpy(s, vb.data(), out.data_mut());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddScaled(a, b, s), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, -1.0)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = if *x > 0.0 { *x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = math::selu(*x));
        let ng = self.ng(a);
        self.push(out, Op::Selu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (y, xhat, inv_std) =
            tensor::layer_norm(self.value(x), self.value(gamma).data(), self.value(beta).data());
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// Query segment `i` attends to key segment `i`. With `causal`, query
    /// row `t` of a segment sees key rows `0..=t` of the same segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &Segments,
        k_segs: &Segments,
        causal: bool,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        assert_eq!(d % heads, 0, "width must divide into heads");
        assert_eq!(q_segs.count(), k_segs.count(), "segment count mismatch");
        assert_eq!(qm.rows(), q_segs.total());
        assert_eq!(km.rows(), k_segs.total());
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut out = Matrix::zeros(qm.rows(), d);
        let mut probs = Vec::new();
        for s in 0..q_segs.count() {
            let (qr, kr) = (q_segs.range(s), k_segs.range(s));
            let lk = kr.len();
            if causal {
                debug_assert_eq!(qr.len(), lk, "causal attention needs square blocks");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (ti, qi) in qr.clone().enumerate() {
                    let qrow = &qm.row(qi)[cols.clone()];
                    let visible = if causal { ti + 1 } else { lk };
                    let start = probs.len();
                    for (tj, kj) in kr.clone().enumerate() {
                        probs.push(if tj < visible {
                            tensor::dot(qrow, &km.row(kj)[cols.clone()]) * scale
                        } else {
                            f64::NEG_INFINITY
                        });
                    }
                    let p = &mut probs[start..];
                    tensor::softmax_in_place(p);
                    let orow = &mut out.row_mut(qi)[cols.clone()];
                    for (tj, kj) in kr.clone().enumerate().take(visible) {
                        tensor::axpy(probs[start + tj], &vm.row(kj)[cols.clone()], orow);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let cache = AttnCache {
            heads,
            q_segs: q_segs.clone(),
            k_segs: k_segs.clone(),
            causal,
            probs,
        };
        self.push(out, Op::Attention { q, k, v, cache }, ng)
    }

    /// Mean token-level cross entropy of `logits` against `targets`,
    /// skipping positions whose target equals `ignore`. Yields a 1×1 value;
    /// zero when every position is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: Option<u32>) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target per logit row");
        let mut probs = lm.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, math::fmax);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = math::exp(*x - max);
                sum += *x;
            }
            if Some(t) != ignore {
                total += math::ln(sum) - (lm.get(r, t as usize) - max);
                count += 1;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        )
    }

    /// GRU recurrence over packed sequences given precomputed input gates
    /// `gi = x · W_ih + b_ih` (columns ordered reset, update, new). Returns
    /// each segment's final hidden state (`segments × hidden`).
    pub fn gru(&mut self, gi: Var, w_hh: Var, b_hh: Var, segs: &Segments, reverse: bool) -> Var {
        let (gim, whh, bhh) = (self.value(gi), self.value(w_hh), self.value(b_hh));
        let h = whh.rows();
        assert_eq!(whh.cols(), 3 * h);
        assert_eq!(gim.cols(), 3 * h);
        assert_eq!(gim.rows(), segs.total());
        let rows = gim.rows();
        let mut r_g = Matrix::zeros(rows, h);
        let mut z_g = Matrix::zeros(rows, h);
        let mut n_g = Matrix::zeros(rows, h);
        let mut ghn = Matrix::zeros(rows, h);
        let mut h_prev = Matrix::zeros(rows, h);
        let mut out = Matrix::zeros(segs.count(), h);
        let mut gh = vec![0.0; 3 * h];
        let mut state = vec![0.0; h];
        for s in 0..segs.count() {
            state.iter_mut().for_each(|x| *x = 0.0);
            let range = segs.range(s);
            let order: Vec<usize> = if reverse { range.rev().collect() } else { range.collect() };
            for t in order {
                gh.copy_from_slice(bhh.data());
                tensor::matmul_acc(&state, whh.data(), &mut gh, 1, h, 3 * h);
                h_prev.row_mut(t).copy_from_slice(&state);
                let g = gim.row(t);
                for j in 0..h {
                    let r = math::sigmoid(g[j] + gh[j]);
                    let z = math::sigmoid(g[h + j] + gh[h + j]);
                    let n = math::tanh(g[2 * h + j] + r * gh[2 * h + j]);
                    r_g.set(t, j, r);
                    z_g.set(t, j, z);
                    n_g.set(t, j, n);
                    ghn.set(t, j, gh[2 * h + j]);
                    state[j] = (1.0 - z) * n + z * state[j];
                }
            }
            out.row_mut(s).copy_from_slice(&state);
        }
        let ng = self.ng(gi) || self.ng(w_hh) || self.ng(b_hh);
        let cache = GruCache {
            segs: segs.clone(),
            reverse,
            hidden: h,
            r: r_g,
            z: z_g,
            n: n_g,
            ghn,
            h_prev,
        };
        self.push(out, Op::Gru { gi, w_hh, b_hh, cache }, ng)
    }

    /// Vertical concatenation; all inputs share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows(), "concat_cols height mismatch");
        let mut out = Matrix::zeros(ma.rows(), ma.cols() + mb.cols());
        for r in 0..ma.rows() {
            let row = out.row_mut(r);
            row[..ma.cols()].copy_from_slice(ma.row(r));
            row[ma.cols()..].copy_from_slice(mb.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Per-segment row mean (`segments × cols`).
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Var {
        let xm = self.value(x);
        let mut out = Matrix::zeros(segs.count(), xm.cols());
        for s in 0..segs.count() {
            let n = segs.len_of(s) as f64;
            let orow = out.row_mut(s);
            for r in segs.range(s) {
                tensor::axpy(1.0 / n, xm.row(r), orow);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, segs: segs.clone() }, ng)
    }

    /// Mean of all entries (1×1).
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.data().iter().sum::<f64>() / m.len() as f64;
        let ng = self.ng(a);
        self.push(Matrix::scalar(v), Op::Mean(a), ng)
    }

    /// Reverse pass from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Backward {
        self.backward_seeded(&[(root, 1.0)])
    }

    /// Reverse pass from several 1×1 roots with the given seeds.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Backward {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(root, s) in seeds {
            assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
            accumulate(&mut grads, root, Matrix::scalar(s));
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Backward { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Gather { table, ids } => {
                if self.ng(*table) {
                    let t = self.value(*table);
                    let gt = slot(grads, *table, t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        tensor::axpy(1.0, g.row(r), gt.row_mut(id as usize));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let gx = slot(grads, *x, xm.rows(), xm.cols());
                    tensor::matmul_bt_acc(g.data(), wm.data(), gx.data_mut(), g.rows(), g.cols(), wm.rows());
                }
                if self.ng(*w) {
                    let gw = slot(grads, *w, wm.rows(), wm.cols());
                    tensor::matmul_at_acc(xm.data(), g.data(), gw.data_mut(), xm.rows(), xm.cols(), g.cols());
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = slot(grads, *b, 1, g.cols());
                        for r in 0..g.rows() {
                            tensor::axpy(1.0, g.row(r), gb.data_mut());
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        add_into(grads, *v, g, 1.0);
                    }
                }
            }
            Op::AddScaled(a, b, s) => {
                if self.ng(*a) {
                    add_into(grads, *a, g, 1.0);
                }
                if self.ng(*b) {
                    add_into(grads, *b, g, *s);
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    add_into(grads, *a, g, *s);
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let gm = slot(grads, *a, g.rows(), g.cols());
                    for ((d, gi), o) in gm.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Selu(a) => {
                if self.ng(*a) {
                    let gm = slot(grads, *a, g.rows(), g.cols());
                    for ((d, gi), o) in gm.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gi * math::selu_grad_from_output(*o);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = g.cols();
                let gam = self.value(*gamma);
                if self.ng(*gamma) {
                    let gg = slot(grads, *gamma, 1, d);
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = slot(grads, *beta, 1, d);
                    for r in 0..g.rows() {
                        tensor::axpy(1.0, g.row(r), gb.data_mut());
                    }
                }
                if self.ng(*x) {
                    let gx = slot(grads, *x, g.rows(), d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gam.data()[c];
                            sum += dxhat[c];
                            sum_x += dxhat[c] * xh[c];
                        }
                        let k = inv_std[r] / d as f64;
                        let row = gx.row_mut(r);
                        for c in 0..d {
                            row[c] += k * (d as f64 * dxhat[c] - sum - xh[c] * sum_x);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, cache } => self.attention_backward(*q, *k, *v, cache, g, grads),
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if self.ng(*logits) && *count > 0 {
                    let s = g.item() / *count as f64;
                    let gl = slot(grads, *logits, probs.rows(), probs.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = gl.row_mut(r);
                        tensor::axpy(s, probs.row(r), row);
                        row[t as usize] -= s;
                    }
                }
            }
            Op::Gru { gi, w_hh, b_hh, cache } => self.gru_backward(*gi, *w_hh, *b_hh, cache, g, grads),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.ng(*p) {
                        let piece = g.slice_rows(start, start + rows);
                        add_into(grads, *p, &piece, 1.0);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.rows(), ca);
                    for r in 0..g.rows() {
                        tensor::axpy(1.0, &g.row(r)[..ca], ga.row_mut(r));
                    }
                }
                if self.ng(*b) {
                    let cb = g.cols() - ca;
                    let gb = slot(grads, *b, g.rows(), cb);
                    for r in 0..g.rows() {
                        tensor::axpy(1.0, &g.row(r)[ca..], gb.row_mut(r));
                    }
                }
            }
            Op::SegmentMean { x, segs } => {
                if self.ng(*x) {
                    let xm = self.value(*x);
                    let gx = slot(grads, *x, xm.rows(), xm.cols());
                    for s in 0..segs.count() {
                        let n = segs.len_of(s) as f64;
                        for r in segs.range(s) {
                            tensor::axpy(1.0 / n, g.row(s), gx.row_mut(r));
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if self.ng(*a) {
                    let am = self.value(*a);
                    let s = g.item() / am.len() as f64;
                    let ga = slot(grads, *a, am.rows(), am.cols());
                    ga.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cache: &AttnCache,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        let dh = d / cache.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut dq = Matrix::zeros(qm.rows(), d);
        let mut dk = Matrix::zeros(km.rows(), d);
        let mut dv = Matrix::zeros(vm.rows(), d);
        let mut offset = 0;
        let mut dp = Vec::new();
        for s in 0..cache.q_segs.count() {
            let (qr, kr) = (cache.q_segs.range(s), cache.k_segs.range(s));
            let lk = kr.len();
            for h in 0..cache.heads {
                let cols = h * dh..(h + 1) * dh;
                for (ti, qi) in qr.clone().enumerate() {
                    let p = &cache.probs[offset..offset + lk];
                    offset += lk;
                    let visible = if cache.causal { ti + 1 } else { lk };
                    let grow = &g.row(qi)[cols.clone()];
                    dp.clear();
                    let mut weighted = 0.0;
                    for (tj, kj) in kr.clone().enumerate().take(visible) {
                        let val = tensor::dot(grow, &vm.row(kj)[cols.clone()]);
                        weighted += p[tj] * val;
                        dp.push(val);
                        tensor::axpy(p[tj], grow, &mut dv.row_mut(kj)[cols.clone()]);
                    }
                    for (tj, kj) in kr.clone().enumerate().take(visible) {
                        let ds = p[tj] * (dp[tj] - weighted) * scale;
                        if ds != 0.0 {
                            tensor::axpy(ds, &km.row(kj)[cols.clone()], &mut dq.row_mut(qi)[cols.clone()]);
                            tensor::axpy(ds, &qm.row(qi)[cols.clone()], &mut dk.row_mut(kj)[cols.clone()]);
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            add_into(grads, q, &dq, 1.0);
        }
        if self.ng(k) {
            add_into(grads, k, &dk, 1.0);
        }
        if self.ng(v) {
            add_into(grads, v, &dv, 1.0);
        }
    }

    fn gru_backward(
        &self,
        gi: Var,
        w_hh: Var,
        b_hh: Var,
        cache: &GruCache,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let h = cache.hidden;
        let whh = self.value(w_hh);
        let rows = self.value(gi).rows();
        let mut dgi = Matrix::zeros(rows, 3 * h);
        let mut dwhh = Matrix::zeros(h, 3 * h);
        let mut dbhh = vec![0.0; 3 * h];
        let mut dh = vec![0.0; h];
        let mut dgh = vec![0.0; 3 * h];
        for s in 0..cache.segs.count() {
            dh.copy_from_slice(g.row(s));
            let range = cache.segs.range(s);
            // Walk steps in reverse processing order.
            let order: Vec<usize> = if cache.reverse { range.collect() } else { range.rev().collect() };
            for t in order {
                let hp = cache.h_prev.row(t);
                let mut dh_prev = vec![0.0; h];
                for j in 0..h {
                    let (r, z, n, ghn) = (cache.r.get(t, j), cache.z.get(t, j), cache.n.get(t, j), cache.ghn.get(t, j));
                    let dn = dh[j] * (1.0 - z);
                    let dz = dh[j] * (hp[j] - n);
                    dh_prev[j] = dh[j] * z;
                    let dpre_n = dn * (1.0 - n * n);
                    let dr = dpre_n * ghn;
                    let dpre_r = dr * r * (1.0 - r);
                    let dpre_z = dz * z * (1.0 - z);
                    dgh[j] = dpre_r;
                    dgh[h + j] = dpre_z;
                    dgh[2 * h + j] = dpre_n * r;
                    let row = dgi.row_mut(t);
                    row[j] = dpre_r;
                    row[h + j] = dpre_z;
                    row[2 * h + j] = dpre_n;
                }
                tensor::axpy(1.0, &dgh, &mut dbhh);
                tensor::matmul_at_acc(hp, &dgh, dwhh.data_mut(), 1, h, 3 * h);
                tensor::matmul_bt_acc(&dgh, whh.data(), &mut dh_prev, 1, 3 * h, h);
                dh.copy_from_slice(&dh_prev);
            }
        }
        if self.ng(gi) {
            add_into(grads, gi, &dgi, 1.0);
        }
        if self.ng(w_hh) {
            add_into(grads, w_hh, &dwhh, 1.0);
        }
        if self.ng(b_hh) {
            add_into(grads, b_hh, &Matrix::from_vec(1, 3 * h, dbhh), 1.0);
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn add_into(grads: &mut [Option<Matrix>], v: Var, g: &Matrix, s: f64) {
    let m = slot(grads, v, g.rows(), g.cols());
    tensor::axpy(s, g.data(), m.data_mut());
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(m) => m.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` w.r.t. every entry of `inputs[which]`.
    fn check_grad<F>(inputs: &[Matrix], f: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m)).collect();
        let out = f(&mut tape, &vars);
        let back = tape.backward(out);
        for (which, m) in inputs.iter().enumerate() {
            let analytic = back.grad(vars[which]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for i in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Matrix> = inputs.to_vec();
                    perturbed[which].data_mut()[i] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|m| t.leaf(m.clone())).collect();
                    let o = f(&mut t, &vs);
                    t.value(o).item()
                };
                let eps = 1e-6;
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[i];
                let denom = math::fmax(1e-8, math::fmax(a.abs(), numeric.abs()));
                assert!(
                    (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-9,
                    "input {which} entry {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn pseudo(rows: usize, cols: usize, seed: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| math::sin(seed + 1.7 * i as f64) * 0.8).collect(),
        )
    }

    #[test]
    fn linear_layernorm_selu_gradients() {
        let x = pseudo(3, 4, 0.1);
        let w = pseudo(4, 5, 0.7);
        let b = pseudo(1, 5, 1.3);
        let gam = pseudo(1, 5, 2.1);
        let bet = pseudo(1, 5, 2.9);
        check_grad(&[x, w, b, gam, bet], |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]));
            let h = t.layer_norm(h, v[3], v[4]);
            let h = t.selu(h);
            let h2 = t.relu(h);
            let s = t.add_scaled(h, h2, 0.3);
            t.mean(s)
        });
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        let q = pseudo(5, 4, 0.3);
        let k = pseudo(6, 4, 0.9);
        let v = pseudo(6, 4, 1.9);
        let qs = Segments::from_lengths([2, 3]);
        let ks = Segments::from_lengths([4, 2]);
        check_grad(&[q.clone(), k, v], |t, vs| {
            let o = t.attention(vs[0], vs[1], vs[2], 2, &qs, &ks, false);
            let o2 = t.selu(o);
            t.mean(o2)
        });
        let selfs = Segments::from_lengths([2, 3]);
        let k2 = pseudo(5, 4, 4.0);
        let v2 = pseudo(5, 4, 5.0);
        check_grad(&[q, k2, v2], |t, vs| {
            let o = t.attention(vs[0], vs[1], vs[2], 2, &selfs, &selfs, true);
            let o2 = t.selu(o);
            t.mean(o2)
        });
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let q = pseudo(4, 4, 0.3);
        let k = pseudo(4, 4, 0.9);
        let mut v = pseudo(4, 4, 1.9);
        let segs = Segments::from_lengths([4]);
        let mut t = Tape::new();
        let (a, b, c) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
        let o1 = t.attention(a, b, c, 2, &segs, &segs, true);
        let first = t.value(o1).row(1).to_vec();
        v.row_mut(3).iter_mut().for_each(|x| *x += 5.0);
        let mut t2 = Tape::new();
        let (a, b, c) = (t2.leaf(q), t2.leaf(k), t2.leaf(v));
        let o2 = t2.attention(a, b, c, 2, &segs, &segs, true);
        assert_eq!(first, t2.value(o2).row(1));
    }

    #[test]
    fn cross_entropy_gradients_and_ignore() {
        let logits = pseudo(4, 6, 0.5);
        check_grad(&[logits.clone()], |t, v| t.cross_entropy(v[0], &[1, 0, 5, 2], Some(0)));
        let mut t = Tape::new();
        let l = t.leaf(Matrix::zeros(3, 10));
        let ce = t.cross_entropy(l, &[1, 2, 3], None);
        assert!((t.value(ce).item() - math::ln(10.0)).abs() < 1e-12);
    }

    #[test]
    fn gru_gradients_both_directions() {
        let gi = pseudo(5, 9, 0.2);
        let whh = pseudo(3, 9, 1.1);
        let bhh = pseudo(1, 9, 2.2);
        let segs = Segments::from_lengths([3, 2]);
        for reverse in [false, true] {
            check_grad(&[gi.clone(), whh.clone(), bhh.clone()], |t, v| {
                let h = t.gru(v[0], v[1], v[2], &segs, reverse);
                let h = t.selu(h);
                t.mean(h)
            });
        }
    }

    #[test]
    fn gather_concat_segment_mean_gradients() {
        let table = pseudo(5, 3, 0.4);
        let other = pseudo(2, 3, 0.8);
        let segs = Segments::from_lengths([1, 3]);
        check_grad(&[table, other], |t, v| {
            let g = t.gather(v[0], &[4, 1, 1, 0]);
            let m = t.segment_mean(g, &segs);
            let c = t.concat_rows(&[m, v[1]]);
            let w = t.concat_cols(c, c);
            let s = t.selu(w);
            let sc = t.scale(s, 1.5);
            t.mean(sc)
        });
    }

    #[test]
    fn constants_and_detach_block_gradients() {
        let w = pseudo(2, 2, 0.1);
        let mut tape = Tape::new();
        let p = tape.param(&w);
        let c = tape.constant(&w);
        let d = tape.detach(p);
        let s = tape.add(c, d);
        let s = tape.add(s, p);
        let m = tape.mean(s);
        let back = tape.backward(m);
        assert!(back.grad(c).is_none());
        assert!(back.grad(d).is_none());
        assert!(back.grad(p).is_some());
    }
}
