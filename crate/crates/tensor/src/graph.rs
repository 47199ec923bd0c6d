//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are stored in
//! creation order, so reverse iteration is a valid topological order for the
//! backward sweep. The tape is meant to be rebuilt (or [`Graph::reset`]) every
//! training step.

use crate::error::{Result, TensorError};
use crate::kernels::{gemm, log_sum_exp, softmax_row, MatRef};
use crate::param::Parameter;
use crate::tensor::{check_shape, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow {
        x: usize,
        row: usize,
        n: usize,
    },
    SubRow {
        x: usize,
        row: usize,
        n: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows {
        x: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        n: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        n: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    Reshape(usize),
    MeanPool {
        x: usize,
        seq: usize,
        dim: usize,
        pad: Vec<bool>,
        counts: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
        vocab: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        sq: usize,
        sk: usize,
        heads: usize,
        dim: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the accumulator of `param`. Frozen
    /// parameters and parameters not reached by the sweep are left untouched.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter) -> Result<()> {
        if param.is_frozen() {
            return Ok(());
        }
        let Some(g) = self.get(v) else {
            return Ok(());
        };
        let acc = param.grad_mut();
        if acc.len() != g.len() {
            return Err(TensorError::Shape {
                op: "accumulate_into",
                lhs: vec![acc.len()],
                rhs: vec![g.len()],
            });
        }
        for (a, &b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Accumulator of node `j`, allocated on first use, if it participates in the sweep.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].data.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Drops every node recorded after the first `len`; [`Var`]s below `len`
    /// stay valid. Used to reuse shared prefixes such as bound parameters.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shapes are validated on push")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        self.push("leaf", shape, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Records a tensor as a leaf; it requires a gradient iff the tensor does.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a parameter as a leaf. Frozen parameters enter as constants, so no
    /// gradient is ever computed for them.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        let t = p.tensor();
        self.leaf(t.shape().to_vec(), t.data().to_vec(), !p.is_frozen())
    }

    /// `[..., k] · [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].data.len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(&self.nodes[a.0].data, 0, k),
            MatRef::row_major(&self.nodes[b.0].data, 0, n),
            &mut out,
            0,
            n,
            1,
            0.0,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a.0, b.0]);
        self.push("matmul", shape, out, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg)
    }

    /// Batched product `[g, m, k] · [g, k, n] -> [g, m, n]`; with `trans_b` the
    /// right operand is stored as `[g, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; groups * m * n];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for g in 0..groups {
            let bview = if trans_b {
                MatRef::transposed(bd, g * n * k, k)
            } else {
                MatRef::row_major(bd, g * k * n, n)
            };
            gemm(m, k, n, MatRef::row_major(ad, g * m * k, k), bview, &mut out, g * m * n, n, 1, 0.0);
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            "bmm",
            vec![groups, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, row: Var, sign: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(row).to_vec();
        let n = *sx.last().unwrap();
        if sr.len() != 1 || sr[0] != n {
            return Err(shape_err(name, &sx, &sr));
        }
        let r = &self.nodes[row.0].data;
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + sign * r[i % n])
            .collect();
        let op = if sign > 0.0 {
            Op::AddRow { x: x.0, row: row.0, n }
        } else {
            Op::SubRow { x: x.0, row: row.0, n }
        };
        let rg = self.rg(&[x.0, row.0]);
        self.push(name, sx, out, op, rg)
    }

    /// Adds a `[n]` row to every row of `[..., n]` (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, 1.0)
    }

    /// Subtracts a `[n]` row from every row of `[..., n]`.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("sub_row", x, row, -1.0)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.nodes[x.0].data.iter().map(|&v| scale * v + shift).collect();
        let rg = self.rg(&[x.0]);
        self.push("affine", self.shape(x).to_vec(), out, Op::Affine { x: x.0, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x.0]);
        self.push(name, self.shape(x).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// Tanh-form GELU, smooth everywhere.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(&[x.0]);
        self.push("sum", vec![1], vec![s], Op::SumAll(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = &self.nodes[x.0].data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push("mean", vec![1], vec![s], Op::MeanAll(x.0), rg)
    }

    /// Sums `[..., n]` over every leading axis, giving `[n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let mut out = vec![0.0; n];
        for row in self.nodes[x.0].data.chunks(n) {
            add_into(&mut out, row);
        }
        let rg = self.rg(&[x.0]);
        self.push("sum_rows", vec![n], out, Op::SumRows { x: x.0, n }, rg)
    }

    /// Mean of `[..., n]` over every leading axis, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let rows = self.nodes[x.0].data.len() / n;
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / rows as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(n) {
            softmax_row(row, None);
        }
        let rg = self.rg(&[x.0]);
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax { x: x.0, n }, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            "layer_norm",
            sx,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                n,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Gathers rows of a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[ids.len()]));
        }
        let (vocab, dim) = (st[0], st[1]);
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(&[table.0]);
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, self.nodes[x.0].data.len())?;
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(&[x.0]);
        self.push("reshape", shape, data, Op::Reshape(x.0), rg)
    }

    /// Mean of `[B, S, D]` over non-padded positions, giving `[B, D]`.
    /// `pad[b * S + s]` is true where position `s` of row `b` is padding.
    pub fn masked_mean_pool(&mut self, x: Var, pad: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || pad.len() != sx[0] * sx[1] {
            return Err(shape_err("masked_mean_pool", &sx, &[pad.len()]));
        }
        let (b, s, d) = (sx[0], sx[1], sx[2]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            for si in 0..s {
                if !pad[bi * s + si] {
                    counts[bi] += 1;
                    add_into(&mut out[bi * d..(bi + 1) * d], &xd[(bi * s + si) * d..(bi * s + si + 1) * d]);
                }
            }
            if counts[bi] == 0 {
                return Err(TensorError::DegenerateBatch { op: "masked_mean_pool" });
            }
            let inv = 1.0 / counts[bi] as f64;
            out[bi * d..(bi + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x.0]);
        self.push(
            "masked_mean_pool",
            vec![b, d],
            out,
            Op::MeanPool {
                x: x.0,
                seq: s,
                dim: d,
                pad: pad.to_vec(),
                counts,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits` (`[..., V]`),
    /// skipping positions where `pad` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: &[bool]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let vocab = *sl.last().unwrap();
        let rows = self.nodes[logits.0].data.len() / vocab;
        if targets.len() != rows || pad.len() != rows {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let count = pad.iter().filter(|p| !**p).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch { op: "cross_entropy" });
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for r in 0..rows {
            if pad[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits.0]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                pad: pad.to_vec(),
                probs,
                count,
                vocab,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention core.
    ///
    /// `q` is `[B, Sq, D]`, `k` and `v` are `[B, Sk, D]`; heads are contiguous
    /// column blocks of width `D / heads`. `allowed` is `[B, Sq, Sk]` and marks
    /// the key positions each query may attend to. Returns `[B, Sq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
        let sq_shape = self.shape(q).to_vec();
        let sk_shape = self.shape(k).to_vec();
        if sq_shape.len() != 3
            || sk_shape.len() != 3
            || self.shape(v) != sk_shape.as_slice()
            || sq_shape[0] != sk_shape[0]
            || sq_shape[2] != sk_shape[2]
        {
            return Err(shape_err("attention", &sq_shape, &sk_shape));
        }
        let (batch, sq, dim) = (sq_shape[0], sq_shape[1], sq_shape[2]);
        let sk = sk_shape[1];
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        if allowed.len() != batch * sq * sk {
            return Err(shape_err("attention", &[batch, sq, sk], &[allowed.len()]));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        let mut probs = vec![0.0; batch * heads * sq * sk];
        let mut out = vec![0.0; batch * sq * dim];
        for b in 0..batch {
            let mask = &allowed[b * sq * sk..(b + 1) * sq * sk];
            for h in 0..heads {
                let p_off = (b * heads + h) * sq * sk;
                let scores = &mut probs[p_off..p_off + sq * sk];
                gemm(
                    sq,
                    dh,
                    sk,
                    MatRef::strided(qd, b * sq * dim + h * dh, dim, 1),
                    MatRef::strided(kd, b * sk * dim + h * dh, 1, dim),
                    scores,
                    0,
                    sk,
                    1,
                    0.0,
                );
                for i in 0..sq {
                    let row = &mut scores[i * sk..(i + 1) * sk];
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_row(row, Some(&mask[i * sk..(i + 1) * sk]));
                }
                gemm(
                    sq,
                    sk,
                    dh,
                    MatRef::row_major(&probs, p_off, sk),
                    MatRef::strided(vd, b * sk * dim + h * dh, dim, 1),
                    &mut out,
                    b * sq * dim + h * dh,
                    dim,
                    1,
                    0.0,
                );
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        self.push(
            "attention",
            vec![batch, sq, dim],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                sq,
                sk,
                heads,
                dim,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that require a gradient
    /// receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($j:expr) => {
                slot(nodes, grads, $j)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = acc!(a) {
                    gemm(m, n, k, MatRef::row_major(g, 0, n), MatRef::transposed(&nodes[b].data, 0, n), ga, 0, k, 1, 1.0);
                }
                if let Some(gb) = acc!(b) {
                    gemm(k, m, n, MatRef::transposed(&nodes[a].data, 0, k), MatRef::row_major(g, 0, n), gb, 0, n, 1, 1.0);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(ga) = acc!(a) {
                    for gi in 0..groups {
                        let bt = if trans_b {
                            MatRef::row_major(&nodes[b].data, gi * n * k, k)
                        } else {
                            MatRef::transposed(&nodes[b].data, gi * k * n, n)
                        };
                        gemm(m, n, k, MatRef::row_major(g, gi * m * n, n), bt, ga, gi * m * k, k, 1, 1.0);
                    }
                }
                if let Some(gb) = acc!(b) {
                    for gi in 0..groups {
                        if trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                MatRef::transposed(g, gi * m * n, n),
                                MatRef::row_major(&nodes[a].data, gi * m * k, k),
                                gb,
                                gi * n * k,
                                k,
                                1,
                                1.0,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(&nodes[a].data, gi * m * k, k),
                                MatRef::row_major(g, gi * m * n, n),
                                gb,
                                gi * k * n,
                                n,
                                1,
                                1.0,
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = acc!(a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&nodes[b].data) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&nodes[a].data) {
                        *d += s * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (&nodes[a].data, &nodes[b].data);
                if let Some(ga) = acc!(a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s / y;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for (j, d) in gb.iter_mut().enumerate() {
                        *d -= g[j] * ad[j] / (bd[j] * bd[j]);
                    }
                }
            }
            &Op::AddRow { x, row, n } | &Op::SubRow { x, row, n } => {
                let sign = if matches!(nodes[i].op, Op::AddRow { .. }) { 1.0 } else { -1.0 };
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
                if let Some(gr) = acc!(row) {
                    for chunk in g.chunks(n) {
                        for (d, s) in gr.iter_mut().zip(chunk) {
                            *d += sign * s;
                        }
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s);
                }
            }
            &Op::Relu(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&nodes[x].data) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&nodes[x].data) {
                        *d += s * gelu_derivative(*v);
                    }
                }
            }
            &Op::Abs(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&nodes[x].data) {
                        if *v > 0.0 {
                            *d += s;
                        } else if *v < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            &Op::Square(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&nodes[x].data) {
                        *d += 2.0 * v * s;
                    }
                }
            }
            &Op::Sqrt(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&nodes[i].data) {
                        *d += s / (2.0 * y);
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::MeanAll(x) => {
                if let Some(gx) = acc!(x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::SumRows { x, n } => {
                if let Some(gx) = acc!(x) {
                    for chunk in gx.chunks_mut(n) {
                        add_into(chunk, g);
                    }
                }
            }
            &Op::Softmax { x, n } => {
                if let Some(gx) = acc!(x) {
                    let y = &nodes[i].data;
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            } => {
                let n = *n;
                let gd = &nodes[*gamma].data;
                if let Some(gg) = acc!(*gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gd[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(gt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
            }
            Op::MeanPool {
                x,
                seq,
                dim,
                pad,
                counts,
            } => {
                if let Some(gx) = acc!(*x) {
                    let (s, d) = (*seq, *dim);
                    for (b, &c) in counts.iter().enumerate() {
                        let inv = 1.0 / c as f64;
                        for si in 0..s {
                            if pad[b * s + si] {
                                continue;
                            }
                            let dst = &mut gx[(b * s + si) * d..(b * s + si + 1) * d];
                            for (dv, gv) in dst.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                                *dv += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
                vocab,
            } => {
                if let Some(gl) = acc!(*logits) {
                    let s = g[0] / *count as f64;
                    let v = *vocab;
                    for (r, &t) in targets.iter().enumerate() {
                        if pad[r] {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += s * probs[r * v + j];
                        }
                        row[t] -= s;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                sq,
                sk,
                heads,
                dim,
                probs,
            } => {
                let (batch, sq, sk, heads, dim) = (*batch, *sq, *sk, *heads, *dim);
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (&nodes[*q].data, &nodes[*k].data, &nodes[*v].data);
                let need_q = nodes[*q].requires_grad;
                let need_k = nodes[*k].requires_grad;
                let need_v = nodes[*v].requires_grad;
                let mut dp = vec![0.0; sq * sk];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_off = (b * heads + h) * sq * sk;
                        let q_off = b * sq * dim + h * dh;
                        let kv_off = b * sk * dim + h * dh;
                        let p = &probs[p_off..p_off + sq * sk];
                        if need_v {
                            let gv = acc!(*v).unwrap();
                            gemm(sk, sq, dh, MatRef::transposed(p, 0, sk), MatRef::strided(g, q_off, dim, 1), gv, kv_off, dim, 1, 1.0);
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        gemm(sq, dh, sk, MatRef::strided(g, q_off, dim, 1), MatRef::strided(vd, kv_off, 1, dim), &mut dp, 0, sk, 1, 0.0);
                        for r in 0..sq {
                            let pr = &p[r * sk..(r + 1) * sk];
                            let dr = &mut dp[r * sk..(r + 1) * sk];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..sk {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        if need_q {
                            let gq = acc!(*q).unwrap();
                            gemm(sq, sk, dh, MatRef::row_major(&dp, 0, sk), MatRef::strided(kd, kv_off, dim, 1), gq, q_off, dim, 1, 1.0);
                        }
                        if need_k {
                            let gk = acc!(*k).unwrap();
                            gemm(sk, sq, dh, MatRef::transposed(&dp, 0, sk), MatRef::strided(qd, q_off, dim, 1), gk, kv_off, dim, 1, 1.0);
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}
