use rand::Rng as _;

use super::{gemm, Mat, MatMut, ParamSet, Scalar};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Interleave {
        parts: Vec<Var>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
    },
    Dot {
        x: Var,
        weights: Vec<F>,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

/// Per-parameter gradients produced by [`Graph::backward`]; `None` for
/// parameters the loss does not depend on through the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F>(Vec<Option<Vec<F>>>);

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, param: usize) -> Option<&[F]> {
        self.0.get(param).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Vec<F>>> {
        self.0.iter().map(Option::as_ref)
    }
}

/// A tape of matrix operations over a borrowed parameter set.
pub struct Graph<'p, F: Scalar> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    training: bool,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: vec![lhs.0, lhs.1],
        rhs: vec![rhs.0, rhs.1],
    }
}

pub(crate) fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    let one = F::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + F::lit(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>, training: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn param(&mut self, id: usize) -> Var {
        let (rows, cols) = self.params.get(id).rows_cols();
        self.push(rows, cols, Vec::new(), Op::Param(id))
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err("input", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Input))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            F::one(),
            Mat { data: self.value(a), rs: k, cs: 1 },
            Mat { data: self.value(b), rs: n, cs: 1 },
            F::zero(),
            MatMut { data: &mut out, rs: n, cs: 1 },
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `x[N x d] + b[1 x d]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(b) != (1, d) {
            return Err(shape_err("add_bias", (n, d), self.shape(b)));
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks_exact(d.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, b)| *x + *b))
            .collect();
        Ok(self.push(n, d, out, Op::AddBias(x, b)))
    }

    /// Dense layer `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(usize, usize, Vec<F>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((sa.0, sa.1, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| *v * s).collect();
        self.push(r, c, out, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F) -> (usize, usize, Vec<F>) {
        let (r, c) = self.shape(x);
        (r, c, self.value(x).iter().map(|v| f(*v)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c, out) = self.map(x, |v| v.max(F::zero()));
        self.push(r, c, out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c, out) = self.map(x, |v| gelu_parts(v).0);
        self.push(r, c, out, Op::Gelu(x))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(x))
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// learned `gamma` and `beta` (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, d) {
                return Err(shape_err("layer_norm", (n, d), self.shape(p)));
            }
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_usize(d).expect("width");
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (*v - mean) * r));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| *h * *g + *b))
            .collect();
        Ok(self.push(
            n,
            d,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout with a mask drawn from `seed`; the identity when the
    /// graph is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let keep = F::lit(1.0 / (1.0 - p));
        let mut rng = rng_from_seed(seed);
        let mask: Vec<F> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        self.push(r, c, out, Op::Dropout { x, mask })
    }

    /// Rows of `table` selected by `rows` (an embedding lookup).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, d) = self.shape(table);
        if let Some(bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row {bad} out of range for {n} rows")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in &rows {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(rows.len(), d, out, Op::Gather { table, rows }))
    }

    /// Interleaves `P` parts of shape `[groups * len x d]` into one
    /// `[groups * len * P x d]` sequence: within each group, step `t`
    /// contributes `part_0[t], part_1[t], ...`.
    pub fn interleave(&mut self, parts: &[Var], groups: usize, len: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("interleave of zero parts"));
        };
        let (rows, d) = self.shape(first);
        if rows != groups * len {
            return Err(shape_err("interleave", (rows, d), (groups, len)));
        }
        for &p in parts {
            if self.shape(p) != (rows, d) {
                return Err(shape_err("interleave", (rows, d), self.shape(p)));
            }
        }
        let n_parts = parts.len();
        let mut out = vec![F::zero(); rows * n_parts * d];
        for (pi, &p) in parts.iter().enumerate() {
            let src = self.value(p);
            for r in 0..rows {
                let dst = r * n_parts + pi;
                out[dst * d..(dst + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        Ok(self.push(
            rows * n_parts,
            d,
            out,
            Op::Interleave {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention core. `qkv` holds `[q | k | v]` per
    /// row for `batch` sequences of `len` tokens; returns the concatenated
    /// head outputs `[batch * len x d]` (before the output projection).
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let (rows, w) = self.shape(qkv);
        if rows != batch * len || w % 3 != 0 {
            return Err(shape_err("causal_attention", (rows, w), (batch * len, 3)));
        }
        let d = w / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).expect("head width").sqrt();
        let src = self.value(qkv);
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * len * len];
        for b in 0..batch {
            let r0 = b * len * w;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * len * len..][..len * len];
                gemm(
                    len,
                    dh,
                    len,
                    scale,
                    Mat { data: &src[r0 + h * dh..], rs: w, cs: 1 },
                    Mat { data: &src[r0 + d + h * dh..], rs: 1, cs: w },
                    F::zero(),
                    MatMut { data: p, rs: len, cs: 1 },
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                }
                gemm(
                    len,
                    len,
                    dh,
                    F::one(),
                    Mat { data: p, rs: len, cs: 1 },
                    Mat { data: &src[r0 + 2 * d + h * dh..], rs: w, cs: 1 },
                    F::zero(),
                    MatMut { data: &mut out[b * len * d + h * dh..], rs: d, cs: 1 },
                );
            }
        }
        Ok(self.push(
            rows,
            d,
            out,
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            },
        ))
    }

    /// Attention weights of a causal-attention node, `[batch][head][i][j]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<F>) -> Result<Var> {
        let (r, c) = self.shape(pred);
        if target.len() != r * c {
            return Err(shape_err("mse", (r, c), (target.len(), 1)));
        }
        let n = F::from_usize((r * c).max(1)).expect("count");
        let loss = self
            .value(pred)
            .iter()
            .zip(&target)
            .map(|(p, t)| (*p - *t) * (*p - *t))
            .sum::<F>()
            / n;
        Ok(self.push(1, 1, vec![loss], Op::Mse { pred, target }))
    }

    /// `sum(x * weights)` for constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if weights.len() != r * c {
            return Err(shape_err("dot", (r, c), (weights.len(), 1)));
        }
        let s = self.value(x).iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        Ok(self.push(1, 1, vec![s], Op::Dot { x, weights }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| *v * *v).sum();
        self.push(1, 1, vec![s], Op::SumSquares(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Vec<F>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        grads[loss.0] = vec![F::one()];
        let mut param_grads: Vec<Option<Vec<F>>> = vec![None; self.params.len()];
        for idx in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.is_empty() {
                continue;
            }
            self.propagate(idx, &g, &mut grads, &mut param_grads);
        }
        Ok(Gradients(param_grads))
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[F],
        grads: &mut [Vec<F>],
        param_grads: &mut [Option<Vec<F>>],
    ) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut param_grads[*id] {
                Some(p) => p.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => param_grads[*id] = Some(g.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                gemm(
                    m,
                    n,
                    k,
                    F::one(),
                    Mat { data: g, rs: n, cs: 1 },
                    Mat { data: bv, rs: 1, cs: n },
                    F::one(),
                    MatMut { data: acc!(*a), rs: k, cs: 1 },
                );
                gemm(
                    k,
                    m,
                    n,
                    F::one(),
                    Mat { data: av, rs: 1, cs: k },
                    Mat { data: g, rs: n, cs: 1 },
                    F::one(),
                    MatMut { data: acc!(*b), rs: n, cs: 1 },
                );
            }
            Op::AddBias(x, b) => {
                add_into(acc!(*x), g);
                let gb = acc!(*b);
                for row in g.chunks_exact(cols.max(1)) {
                    add_into(gb, row);
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, gi), bi) in acc!(*a).iter_mut().zip(g).zip(bv) {
                    *d += *gi * *bi;
                }
                for ((d, gi), ai) in acc!(*b).iter_mut().zip(g).zip(av) {
                    *d += *gi * *ai;
                }
            }
            Op::Scale(x, s) => {
                for (d, gi) in acc!(*x).iter_mut().zip(g) {
                    *d += *gi * *s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                for ((d, gi), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    if *xi > F::zero() {
                        *d += *gi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                for ((d, gi), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    *d += *gi * gelu_parts(*xi).1;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let dx = acc!(*x);
                for ((dr, gr), yr) in dx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += *yi * (*gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let inv_d = F::one() / F::from_usize(cols).expect("width");
                {
                    let gg = acc!(*gamma);
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += *gi * *hi;
                        }
                    }
                }
                {
                    let gb = acc!(*beta);
                    for gr in g.chunks_exact(cols) {
                        add_into(gb, gr);
                    }
                }
                let dx = acc!(*x);
                let mut dxhat = vec![F::zero(); cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    for ((dh, gi), gam) in dxhat.iter_mut().zip(gr).zip(gv) {
                        *dh = *gi * *gam;
                    }
                    let mean_d = dxhat.iter().copied().sum::<F>() * inv_d;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| *a * *b).sum::<F>() * inv_d;
                    for ((d, dh), h) in dx[r * cols..(r + 1) * cols].iter_mut().zip(&dxhat).zip(hr) {
                        *d += rstd[r] * (*dh - mean_d - *h * mean_dh);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((d, gi), m) in acc!(*x).iter_mut().zip(g).zip(mask) {
                    *d += *gi * *m;
                }
            }
            Op::Gather { table, rows: idx } => {
                let dt = acc!(*table);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dt[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::Interleave { parts, .. } => {
                let n_parts = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    let dp = acc!(p);
                    let part_rows = rows / n_parts;
                    for r in 0..part_rows {
                        let src = r * n_parts + pi;
                        add_into(&mut dp[r * cols..(r + 1) * cols], &g[src * cols..(src + 1) * cols]);
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            } => {
                let (batch, len, heads) = (*batch, *len, *heads);
                let d = cols;
                let w = 3 * d;
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).expect("head width").sqrt();
                let src = self.value(*qkv);
                let dq = acc!(*qkv);
                let mut dp = vec![F::zero(); len * len];
                for b in 0..batch {
                    let r0 = b * len * w;
                    let go = &g[b * len * d..];
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * len * len..][..len * len];
                        // dV += P^T dO
                        gemm(
                            len,
                            len,
                            dh,
                            F::one(),
                            Mat { data: p, rs: 1, cs: len },
                            Mat { data: &go[h * dh..], rs: d, cs: 1 },
                            F::one(),
                            MatMut { data: &mut dq[r0 + 2 * d + h * dh..], rs: w, cs: 1 },
                        );
                        // dP = dO V^T
                        gemm(
                            len,
                            dh,
                            len,
                            F::one(),
                            Mat { data: &go[h * dh..], rs: d, cs: 1 },
                            Mat { data: &src[r0 + 2 * d + h * dh..], rs: 1, cs: w },
                            F::zero(),
                            MatMut { data: &mut dp, rs: len, cs: 1 },
                        );
                        // dS = P * (dP - rowdot(P, dP)), masked entries have P = 0
                        for i in 0..len {
                            let pr = &p[i * len..i * len + i + 1];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: F = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                            for (ds, pi) in dr.iter_mut().zip(pr) {
                                *ds = *pi * (*ds - dot);
                            }
                            dr[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                        }
                        // dQ += scale dS K
                        gemm(
                            len,
                            len,
                            dh,
                            scale,
                            Mat { data: &dp, rs: len, cs: 1 },
                            Mat { data: &src[r0 + d + h * dh..], rs: w, cs: 1 },
                            F::one(),
                            MatMut { data: &mut dq[r0 + h * dh..], rs: w, cs: 1 },
                        );
                        // dK += scale dS^T Q
                        gemm(
                            len,
                            len,
                            dh,
                            scale,
                            Mat { data: &dp, rs: 1, cs: len },
                            Mat { data: &src[r0 + h * dh..], rs: w, cs: 1 },
                            F::one(),
                            MatMut { data: &mut dq[r0 + d + h * dh..], rs: w, cs: 1 },
                        );
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = F::from_usize(target.len().max(1)).expect("count");
                let k = F::lit(2.0) * g[0] / n;
                for ((d, p), t) in acc!(*pred).iter_mut().zip(pv).zip(target) {
                    *d += k * (*p - *t);
                }
            }
            Op::Dot { x, weights } => {
                for (d, wi) in acc!(*x).iter_mut().zip(weights) {
                    *d += g[0] * *wi;
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                for (d, xi) in acc!(*x).iter_mut().zip(xv) {
                    *d += F::lit(2.0) * g[0] * *xi;
                }
            }
            Op::Sum(x) => {
                for d in acc!(*x).iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

fn grad_slot<'g, F: Scalar>(grads: &'g mut [Vec<F>], nodes: &[Node<F>], v: Var) -> &'g mut Vec<F> {
    let slot = &mut grads[v.0];
    if slot.is_empty() {
        *slot = vec![F::zero(); nodes[v.0].rows * nodes[v.0].cols];
    }
    slot
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;
    use crate::rng::rng_from_seed;

    fn random(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::normal(shape.to_vec(), 1.0, rng)
    }

    fn check(params: &mut ParamSet<f64>, build: impl Fn(&mut Graph<'_, f64>) -> Var, coords: usize, seed: u64) {
        let worst = super::super::gradient_check(params, build, coords, 1e-3, seed).worst;
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    fn weights(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        random(rng, &[n]).data
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut rng = rng_from_seed(1);
        let mut ps = ParamSet::new();
        ps.push("p", random(&mut rng, &[3, 4])).unwrap();
        ps.push("unused", random(&mut rng, &[2])).unwrap();
        let g = Graph::new(&ps, true);
        let mut g = g;
        let p = g.param(0);
        let loss = g.sum_squares(p);
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = ps.get(0).data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(grads.get(0).unwrap(), want.as_slice());
        assert!(grads.get(1).is_none());
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps, false);
        let x = g.input(2, 4, vec![3.0; 8]).unwrap();
        let y = g.softmax(x);
        assert!(g.value(y).iter().all(|v| (*v - 0.25).abs() < 1e-7));
        let big = g.input(1, 3, vec![1000.0, 1000.0, -1000.0]).unwrap();
        let y = g.softmax(big);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = rng_from_seed(2);
        let mut ps = ParamSet::<f32>::new();
        ps.push("g", Tensor::filled(vec![16], 1.0)).unwrap();
        ps.push("b", Tensor::zeros(vec![16])).unwrap();
        let mut g = Graph::new(&ps, false);
        let x = g.input(5, 16, Tensor::<f32>::normal(vec![80], 3.0, &mut rng).data).unwrap();
        let (gamma, beta) = (g.param(0), g.param(1));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).chunks(16) {
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps, false);
        let a = g.input(2, 3, vec![0.0; 6]).unwrap();
        let b = g.input(2, 3, vec![0.0; 6]).unwrap();
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
        let qkv = g.input(2, 9, vec![0.0; 18]).unwrap();
        assert!(g.causal_attention(qkv, 1, 2, 2).is_err());
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = rng_from_seed(3);
        let mut ps = ParamSet::new();
        ps.push("x", random(&mut rng, &[5, 4])).unwrap();
        ps.push("w", random(&mut rng, &[4, 3])).unwrap();
        ps.push("b", random(&mut rng, &[3])).unwrap();
        let w = weights(&mut rng, 15);
        check(&mut ps, |g| {
            let (x, wt, b) = (g.param(0), g.param(1), g.param(2));
            let y = g.linear(x, wt, b).unwrap();
            g.dot(y, w.clone()).unwrap()
        }, 100, 0);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = rng_from_seed(4);
        let mut ps = ParamSet::new();
        ps.push("a", random(&mut rng, &[4, 6])).unwrap();
        ps.push("b", random(&mut rng, &[4, 6])).unwrap();
        let w = weights(&mut rng, 24);
        check(&mut ps, |g| {
            let (a, b) = (g.param(0), g.param(1));
            let s = g.add(a, b).unwrap();
            let m = g.mul(s, a).unwrap();
            let r = g.relu(m);
            let e = g.gelu(s);
            let t = g.add(r, e).unwrap();
            let t = g.scale(t, 0.7);
            let sm = g.softmax(t);
            let l1 = g.dot(sm, w.clone()).unwrap();
            let l2 = g.sum(t);
            let both = g.input(1, 1, vec![0.0]).unwrap();
            let l = g.add(l1, l2).unwrap();
            g.add(l, both).unwrap()
        }, 100, 1);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = rng_from_seed(5);
        let mut ps = ParamSet::new();
        ps.push("x", random(&mut rng, &[6, 8])).unwrap();
        ps.push("g", random(&mut rng, &[8])).unwrap();
        ps.push("b", random(&mut rng, &[8])).unwrap();
        let w = weights(&mut rng, 48);
        check(&mut ps, |g| {
            let (x, ga, be) = (g.param(0), g.param(1), g.param(2));
            let y = g.layer_norm(x, ga, be).unwrap();
            g.dot(y, w.clone()).unwrap()
        }, 100, 2);
    }

    #[test]
    fn gather_interleave_dropout_gradients() {
        let mut rng = rng_from_seed(6);
        let mut ps = ParamSet::new();
        ps.push("table", random(&mut rng, &[5, 3])).unwrap();
        ps.push("a", random(&mut rng, &[4, 3])).unwrap();
        ps.push("b", random(&mut rng, &[4, 3])).unwrap();
        let w = weights(&mut rng, 36);
        check(&mut ps, |g| {
            let t = g.param(0);
            let e = g.gather(t, vec![4, 0, 4, 2]).unwrap();
            let (a, b) = (g.param(1), g.param(2));
            let x = g.interleave(&[e, a, b], 2, 2).unwrap();
            let x = g.dropout(x, 0.3, 99);
            let y = g.mse(x, w.clone()).unwrap();
            let z = g.dot(x, w.clone()).unwrap();
            g.add(y, z).unwrap()
        }, 100, 3);
    }

    #[test]
    fn interleave_layout() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps, false);
        let a = g.input(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = g.input(4, 1, vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let x = g.interleave(&[a, b], 2, 2).unwrap();
        assert_eq!(g.value(x), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = rng_from_seed(7);
        let mut ps = ParamSet::new();
        ps.push("qkv", random(&mut rng, &[2 * 5, 3 * 8])).unwrap();
        let w = weights(&mut rng, 2 * 5 * 8);
        check(&mut ps, |g| {
            let x = g.param(0);
            let y = g.causal_attention(x, 2, 5, 2).unwrap();
            g.dot(y, w.clone()).unwrap()
        }, 100, 4);
    }

    #[test]
    fn attention_is_causal_and_normalised() {
        let mut rng = rng_from_seed(8);
        let base = Tensor::<f32>::normal(vec![6 * 12], 1.0, &mut rng).data;
        let ps = ParamSet::<f32>::new();
        let run = |data: Vec<f32>| {
            let mut g = Graph::new(&ps, false);
            let x = g.input(6, 12, data).unwrap();
            let y = g.causal_attention(x, 1, 6, 2).unwrap();
            let probs = g.attention_probs(y).unwrap().to_vec();
            (g.value(y).to_vec(), probs)
        };
        let (out, probs) = run(base.clone());
        for row in probs.chunks(6) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let mut changed = base.clone();
        for v in &mut changed[4 * 12..] {
            *v += 1.0;
        }
        let (out2, _) = run(changed);
        assert_eq!(out[..4 * 4], out2[..4 * 4]);
        assert_ne!(out[4 * 4..], out2[4 * 4..]);
        // A single token attends only to itself and returns its value slice.
        let (single, p) = run_single(&base[..12]);
        assert_eq!(p, vec![1.0]);
        assert_eq!(single, base[8..12].to_vec());
    }

    fn run_single(row: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps, false);
        let x = g.input(1, 12, row.to_vec()).unwrap();
        let y = g.causal_attention(x, 1, 1, 1).unwrap();
        (g.value(y).to_vec(), g.attention_probs(y).unwrap().to_vec())
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps, true);
        let x = g.input(10, 10, vec![1.0; 100]).unwrap();
        let a = g.dropout(x, 0.5, 3);
        let b = g.dropout(x, 0.5, 3);
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).iter().all(|v| *v == 0.0 || *v == 2.0));
        let mut e = Graph::new(&ps, false);
        let x = e.input(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(e.dropout(x, 0.5, 3), x);
    }
}
