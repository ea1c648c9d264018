//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. Nodes are appended in topological order, so the backward
//! sweep is a single reverse walk over the tape.

use crate::tensor::{gemm, ConvGeometry, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    ReverseGrad(Var),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanLastAxis(Var),
    SwapLastTwo(Var),
    SoftmaxPool {
        x: Var,
        scores: Var,
        weights: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    NegSqDist {
        q: Var,
        p: Var,
    },
    Cosine {
        q: Var,
        p: Var,
        q_norm: Vec<f64>,
        p_norm: Vec<f64>,
    },
    ScalarAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    DiagCrossEntropy {
        s: Var,
        probs: Vec<f64>,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
    ColumnDiff(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    (batch, channels, spatial)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Identity in the forward pass; negates the gradient on the way back.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        let ng = self.needs(a);
        self.push(out, Op::ReverseGrad(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// `x [n, in]`, `w [out, in]`, optional `b [out]` → `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear expects a 2-D input, got {xs:?}");
        assert_eq!(xs[1], ws[1], "linear input width {} vs weight {:?}", xs[1], ws);
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            fan_in,
            fan_out,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[n, fan_out], out), Op::Linear { x, w, b }, ng)
    }

    /// Square-kernel 2-D convolution without bias. `w` is `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv channels: input {xs:?} weight {ws:?}");
        let geo = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (batch, cout) = (xs[0], ws[0]);
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let in_sz = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; batch * cout * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..batch {
            geo.im2col(&xd[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm(
                cout,
                rows,
                cols_n,
                1.0,
                wd,
                false,
                &cols,
                false,
                0.0,
                &mut out[b * cout * cols_n..(b + 1) * cout * cols_n],
            );
        }
        let shape = [batch, cout, geo.out_height(), geo.out_width()];
        let ng = self.needs(x) || self.needs(w);
        self.push(Tensor::from_vec(&shape, out), Op::Conv2d { x, w, geo }, ng)
    }

    /// Normalizes every channel (axis 1) with the statistics of the current
    /// batch, then applies the per-channel affine `gamma, beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, NormStats) {
        let shape = self.value(x).shape().to_vec();
        let (batch, channels, spatial) = channel_layout(&shape);
        let m = (batch * spatial) as f64;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                mean[c] += xd[base..base + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                var[c] += xd[base..base + spatial]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = xhat[i] * g[c] + bt[c];
                }
            }
        }
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v / (m - 1.0)).collect()
        } else {
            vec![0.0; channels]
        };
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (
            v,
            NormStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Inference-mode normalization with fixed running statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (batch, channels, spatial) = channel_layout(&shape);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in base..base + spatial {
                    out[i] = (xd[i] - running_mean[c]) * inv_std[c] * g[c] + bt[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            ng,
        )
    }

    /// Averages over the last axis.
    pub fn mean_last_axis(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let last = *shape.last().unwrap();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(last)
            .map(|c| c.iter().sum::<f64>() / last as f64)
            .collect();
        let ng = self.needs(a);
        self.push(
            Tensor::from_vec(&shape[..shape.len() - 1], out),
            Op::MeanLastAxis(a),
            ng,
        )
    }

    /// `[B, P, Q]` → `[B, Q, P]`.
    pub fn swap_last_two(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let (b, p, q) = (shape[0], shape[1], shape[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 0..p {
                for j in 0..q {
                    out[(bi * q + j) * p + i] = src[(bi * p + i) * q + j];
                }
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::from_vec(&[b, q, p], out), Op::SwapLastTwo(a), ng)
    }

    /// `x [B, T, C]`, `scores [B, T]` → `[B, C]`: the softmax-over-time
    /// weighted sum of frames.
    pub fn softmax_pool(&mut self, x: Var, scores: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.value(scores).shape(), &[b, t]);
        let s = self.value(scores).data();
        let mut weights = vec![0.0; b * t];
        for bi in 0..b {
            let row = &s[bi * t..(bi + 1) * t];
            softmax_into(row, &mut weights[bi * t..(bi + 1) * t]);
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let a = weights[bi * t + ti];
                let frame = &xd[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(frame) {
                    *o += a * v;
                }
            }
        }
        let ng = self.needs(x) || self.needs(scores);
        self.push(
            Tensor::from_vec(&[b, c], out),
            Op::SoftmaxPool { x, scores, weights },
            ng,
        )
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert!(start + len <= shape[0]);
        let w = self.value(x).len() / shape[0];
        let out = self.value(x).data()[start * w..(start + len) * w].to_vec();
        let mut s = shape.clone();
        s[0] = len;
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&s, out), Op::SliceRows { x, start }, ng)
    }

    /// `[N, Da] ⧺ [N, Db]` → `[N, Da + Db]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa[0], sb[0]);
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[n, da + db], out), Op::ConcatCols(a, b), ng)
    }

    /// Stacks `[Na, D]` on top of `[Nb, D]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[1..], sb[1..]);
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let mut s = sa.clone();
        s[0] += sb[0];
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&s, out), Op::ConcatRows(a, b), ng)
    }

    /// `S[i, j] = -‖q_i − p_j‖²`.
    pub fn neg_sq_dist(&mut self, q: Var, p: Var) -> Var {
        let (qs, ps) = (self.value(q).shape().to_vec(), self.value(p).shape().to_vec());
        assert_eq!(qs[1], ps[1]);
        let (n, m) = (qs[0], ps[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let qi = self.value(q).row(i);
            for j in 0..m {
                let pj = self.value(p).row(j);
                out[i * m + j] = -qi.iter().zip(pj).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        let ng = self.needs(q) || self.needs(p);
        self.push(Tensor::from_vec(&[n, m], out), Op::NegSqDist { q, p }, ng)
    }

    /// `C[i, j] = cos(q_i, p_j)`. Zero rows must be rejected by the caller.
    pub fn cosine(&mut self, q: Var, p: Var) -> Var {
        let (qs, ps) = (self.value(q).shape().to_vec(), self.value(p).shape().to_vec());
        assert_eq!(qs[1], ps[1]);
        let (n, m) = (qs[0], ps[0]);
        let q_norm: Vec<f64> = (0..n).map(|i| l2(self.value(q).row(i))).collect();
        let p_norm: Vec<f64> = (0..m).map(|j| l2(self.value(p).row(j))).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let qi = self.value(q).row(i);
            for j in 0..m {
                let pj = self.value(p).row(j);
                let dot: f64 = qi.iter().zip(pj).map(|(a, b)| a * b).sum();
                out[i * m + j] = dot / (q_norm[i] * p_norm[j]);
            }
        }
        let ng = self.needs(q) || self.needs(p);
        self.push(
            Tensor::from_vec(&[n, m], out),
            Op::Cosine {
                q,
                p,
                q_norm,
                p_norm,
            },
            ng,
        )
    }

    /// `w * x + b` with scalar `w` and `b`.
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (wv, bv) = (self.value(w).item(), self.value(b).item());
        let out = self.value(x).map(|v| wv * v + bv);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::ScalarAffine { x, w, b }, ng)
    }

    /// Mean over rows of the cross-entropy of each row's softmax against the
    /// diagonal entry.
    pub fn diag_cross_entropy(&mut self, s: Var) -> Var {
        let shape = self.value(s).shape().to_vec();
        let (n, m) = (shape[0], shape[1]);
        assert_eq!(n, m, "diagonal cross-entropy needs a square matrix");
        let sd = self.value(s).data();
        let mut probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &sd[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            loss += lse - row[i];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.needs(s);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::DiagCrossEntropy { s, probs },
            ng,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `targets`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Var {
        let zd = self.value(z).data();
        assert_eq!(zd.len(), targets.len());
        let loss = zd
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<f64>()
            / zd.len() as f64;
        let ng = self.needs(z);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// `[n, 2]` → `[n, 1]` holding `z[:, 1] - z[:, 0]`.
    pub fn column_diff(&mut self, z: Var) -> Var {
        let shape = self.value(z).shape().to_vec();
        assert_eq!(shape[1], 2);
        let out: Vec<f64> = self.value(z).data().chunks(2).map(|r| r[1] - r[0]).collect();
        let ng = self.needs(z);
        self.push(Tensor::from_vec(&[shape[0], 1], out), Op::ColumnDiff(z), ng)
    }

    /// Back-propagates from the scalar `root`. Only leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::ReverseGrad(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, fan_in) = (xs[0], xs[1]);
                let fan_out = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * fan_in];
                    gemm(
                        n,
                        fan_out,
                        fan_in,
                        1.0,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, fan_in], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    gemm(
                        fan_out,
                        n,
                        fan_in,
                        1.0,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    let ws = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[fan_out], db));
                }
            }
            Op::Conv2d { x, w, geo } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (batch, cout) = (xs[0], ws[0]);
                let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
                let in_sz = xs[1] * xs[2] * xs[3];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![0.0; rows * cols_n];
                let mut dw = vec![0.0; cout * rows];
                let need_x = self.needs(*x);
                let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                for b in 0..batch {
                    let gb = &g.data()[b * cout * cols_n..(b + 1) * cout * cols_n];
                    if self.needs(*w) {
                        geo.im2col(&xd[b * in_sz..(b + 1) * in_sz], &mut cols);
                        gemm(cout, cols_n, rows, 1.0, gb, false, &cols, true, 1.0, &mut dw);
                    }
                    if need_x {
                        gemm(rows, cout, cols_n, 1.0, wd, true, gb, false, 0.0, &mut cols);
                        geo.col2im(&cols, &mut dx[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (batch, channels, spatial) = channel_layout(out.shape());
                let m = (batch * spatial) as f64;
                let gm = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for i in base..base + spatial {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.needs(*x) {
                    // dxhat = g * gamma, so the sums reduce to gamma * dbeta and gamma * dgamma.
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let k = gm[c] * inv_std[c] / m;
                            for i in base..base + spatial {
                                dx[i] = k * (m * gd[i] - dbeta[c] - xhat[i] * dgamma[c]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(out.shape(), dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[channels], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[channels], dbeta));
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (batch, channels, spatial) = channel_layout(out.shape());
                let gm = self.value(*gamma).data();
                let xd = self.value(*x).data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for i in base..base + spatial {
                            dx[i] = gd[i] * inv_std[c] * gm[c];
                            dgamma[c] += gd[i] * (xd[i] - mean[c]) * inv_std[c];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), dx));
                self.accumulate(grads, *gamma, Tensor::from_vec(&[channels], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[channels], dbeta));
            }
            Op::MeanLastAxis(a) => {
                let shape = self.value(*a).shape().to_vec();
                let last = *shape.last().unwrap();
                let mut d = Vec::with_capacity(self.value(*a).len());
                for v in g.data() {
                    d.extend(std::iter::repeat_n(v / last as f64, last));
                }
                self.accumulate(grads, *a, Tensor::from_vec(&shape, d));
            }
            Op::SwapLastTwo(a) => {
                let shape = self.value(*a).shape().to_vec();
                let (b, p, q) = (shape[0], shape[1], shape[2]);
                let gd = g.data();
                let mut d = vec![0.0; gd.len()];
                for bi in 0..b {
                    for i in 0..p {
                        for j in 0..q {
                            d[(bi * p + i) * q + j] = gd[(bi * q + j) * p + i];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&shape, d));
            }
            Op::SoftmaxPool { x, scores, weights } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, t, c) = (xs[0], xs[1], xs[2]);
                let xd = self.value(*x).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ti in 0..t {
                            let a = weights[bi * t + ti];
                            for ci in 0..c {
                                dx[(bi * t + ti) * c + ci] = a * gd[bi * c + ci];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.needs(*scores) {
                    let mut ds = vec![0.0; b * t];
                    for bi in 0..b {
                        let gb = &gd[bi * c..(bi + 1) * c];
                        let da: Vec<f64> = (0..t)
                            .map(|ti| {
                                let frame = &xd[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                                frame.iter().zip(gb).map(|(x, g)| x * g).sum()
                            })
                            .collect();
                        let w = &weights[bi * t..(bi + 1) * t];
                        let mean: f64 = w.iter().zip(&da).map(|(a, d)| a * d).sum();
                        for ti in 0..t {
                            ds[bi * t + ti] = w[ti] * (da[ti] - mean);
                        }
                    }
                    self.accumulate(grads, *scores, Tensor::from_vec(&[b, t], ds));
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let w = self.value(*x).len() / shape[0];
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * w..start * w + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::from_vec(&shape, d));
            }
            Op::ConcatCols(a, b) => {
                let (sa, sb) = (
                    self.value(*a).shape().to_vec(),
                    self.value(*b).shape().to_vec(),
                );
                let (da, db) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(sa[0] * da);
                let mut gb = Vec::with_capacity(sb[0] * db);
                for row in g.data().chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&sa, ga));
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gb));
            }
            Op::ConcatRows(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let na = self.value(*a).len();
                self.accumulate(grads, *a, Tensor::from_vec(&sa, g.data()[..na].to_vec()));
                self.accumulate(grads, *b, Tensor::from_vec(&sb, g.data()[na..].to_vec()));
            }
            Op::NegSqDist { q, p } => {
                let (qs, ps) = (self.value(*q).shape().to_vec(), self.value(*p).shape().to_vec());
                let (n, m, d) = (qs[0], ps[0], qs[1]);
                let mut dq = vec![0.0; n * d];
                let mut dp = vec![0.0; m * d];
                let gd = g.data();
                for i in 0..n {
                    let qi = self.value(*q).row(i);
                    for j in 0..m {
                        let pj = self.value(*p).row(j);
                        let gij = gd[i * m + j];
                        for k in 0..d {
                            let diff = qi[k] - pj[k];
                            dq[i * d + k] -= 2.0 * gij * diff;
                            dp[j * d + k] += 2.0 * gij * diff;
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::from_vec(&qs, dq));
                self.accumulate(grads, *p, Tensor::from_vec(&ps, dp));
            }
            Op::Cosine {
                q,
                p,
                q_norm,
                p_norm,
            } => {
                let (qs, ps) = (self.value(*q).shape().to_vec(), self.value(*p).shape().to_vec());
                let (n, m, d) = (qs[0], ps[0], qs[1]);
                let qd = self.value(*q).data();
                let pd = self.value(*p).data();
                let u: Vec<f64> = (0..n * d).map(|i| qd[i] / q_norm[i / d]).collect();
                let v: Vec<f64> = (0..m * d).map(|j| pd[j] / p_norm[j / d]).collect();
                let mut du = vec![0.0; n * d];
                let mut dv = vec![0.0; m * d];
                // du = G v, dv = G^T u
                gemm(n, m, d, 1.0, g.data(), false, &v, false, 0.0, &mut du);
                gemm(m, n, d, 1.0, g.data(), true, &u, false, 0.0, &mut dv);
                let project = |dir: &[f64], unit: &[f64], norms: &[f64], rows: usize| {
                    let mut out = vec![0.0; rows * d];
                    for r in 0..rows {
                        let dr = &dir[r * d..(r + 1) * d];
                        let ur = &unit[r * d..(r + 1) * d];
                        let dot: f64 = dr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            out[r * d + k] = (dr[k] - dot * ur[k]) / norms[r];
                        }
                    }
                    out
                };
                self.accumulate(grads, *q, Tensor::from_vec(&qs, project(&du, &u, q_norm, n)));
                self.accumulate(grads, *p, Tensor::from_vec(&ps, project(&dv, &v, p_norm, m)));
            }
            Op::ScalarAffine { x, w, b } => {
                let wv = self.value(*w).item();
                let xd = self.value(*x).data();
                let gd = g.data();
                self.accumulate(grads, *x, g.map(|v| v * wv));
                let dw: f64 = gd.iter().zip(xd).map(|(g, x)| g * x).sum();
                let db: f64 = gd.iter().sum();
                self.accumulate(grads, *w, Tensor::scalar(dw));
                self.accumulate(grads, *b, Tensor::scalar(db));
            }
            Op::DiagCrossEntropy { s, probs } => {
                let n = self.value(*s).shape()[0];
                let scale = g.item() / n as f64;
                let mut d = probs.iter().map(|p| p * scale).collect::<Vec<_>>();
                for i in 0..n {
                    d[i * n + i] -= scale;
                }
                self.accumulate(grads, *s, Tensor::from_vec(&[n, n], d));
            }
            Op::BceWithLogits { z, targets } => {
                let zv = self.value(*z);
                let scale = g.item() / targets.len() as f64;
                let d = zv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                self.accumulate(grads, *z, Tensor::from_vec(zv.shape(), d));
            }
            Op::ColumnDiff(z) => {
                let mut d = Vec::with_capacity(g.len() * 2);
                for v in g.data() {
                    d.push(-v);
                    d.push(*v);
                }
                let shape = self.value(*z).shape().to_vec();
                self.accumulate(grads, *z, Tensor::from_vec(&shape, d));
            }
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every leaf of `build` against backward().
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or(Tensor::zeros(leaf.shape()));
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[k] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let r = build(&mut g, &vs);
                    g.value(r).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-5, "leaf {li}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces any tensor to a scalar with a fixed random projection.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let n = g.value(v).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = g.reshape(v, &[1, n]);
        let w = g.constant(random(&[1, n], &mut rng));
        let y = g.linear(flat, w, None);
        g.reshape(y, &[1])
    }

    #[test]
    fn conv_and_batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            random(&[2, 2, 5, 4], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng),
        ];
        check(leaves, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1);
            let (y, _) = g.batch_norm(y, v[2], v[3], 1e-5);
            let y = g.relu(y);
            project(g, y, 7)
        });
    }

    #[test]
    fn pooling_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            random(&[2, 3, 4, 5], &mut rng),
            random(&[6, 3], &mut rng),
            random(&[6], &mut rng),
            random(&[1, 6], &mut rng),
        ];
        check(leaves, |g, v| {
            let x = g.mean_last_axis(v[0]);
            let x = g.swap_last_two(x);
            let flat = g.reshape(x, &[8, 3]);
            let h = g.linear(flat, v[1], Some(v[2]));
            let h = g.tanh(h);
            let s = g.linear(h, v[3], None);
            let s = g.reshape(s, &[2, 4]);
            let pooled = g.softmax_pool(x, s);
            project(g, pooled, 3)
        });
    }

    #[test]
    fn similarity_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
            Tensor::scalar(2.0),
            Tensor::scalar(-0.5),
        ];
        check(leaves.clone(), |g, v| {
            let c = g.cosine(v[0], v[1]);
            let s = g.scalar_affine(c, v[2], v[3]);
            g.diag_cross_entropy(s)
        });
        check(leaves, |g, v| {
            let s = g.neg_sq_dist(v[0], v[1]);
            g.diag_cross_entropy(s)
        });
    }

    #[test]
    fn classifier_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            random(&[3, 2], &mut rng),
            random(&[3, 2], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[5], &mut rng),
            random(&[2, 5], &mut rng),
        ];
        check(leaves, |g, v| {
            let same = g.concat_cols(v[0], v[1]);
            let diff = g.concat_cols(v[1], v[0]);
            let x = g.concat_rows(same, diff);
            let h = g.linear(x, v[2], Some(v[3]));
            let h = g.relu(h);
            let gamma = g.constant(Tensor::full(&[5], 1.3));
            let beta = g.constant(Tensor::full(&[5], 0.1));
            let (h, _) = g.batch_norm(h, gamma, beta, 1e-5);
            let z = g.linear(h, v[4], None);
            let z = g.column_diff(z);
            let z = g.slice_rows(z, 1, 5);
            let z = g.scale(z, 0.7);
            g.bce_with_logits(z, &[1.0, 1.0, 0.0, 0.0, 0.0])
        });
    }

    #[test]
    fn reverse_grad_negates_only_the_backward_pass() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let r = g.reverse_grad(x);
        assert_eq!(g.value(r), g.value(x));
        let w = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 5.0]));
        let r = g.reshape(r, &[1, 2]);
        let y = g.linear(r, w, None);
        let y = g.reshape(y, &[1]);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[-3.0, -5.0]);
    }

    #[test]
    fn bce_is_stable_for_saturated_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[2], vec![800.0, -800.0]));
        let l = g.bce_with_logits(z, &[1.0, 0.0]);
        assert_eq!(g.value(l).item(), 0.0);
    }
}
