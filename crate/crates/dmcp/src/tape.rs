//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass: each operation records its
//! inputs, output value, and enough saved state to run its backward rule.
//! [`Tape::backward`] sweeps the recorded operations in exact reverse order
//! and *adds* the resulting adjoints into per-node gradient accumulators, so
//! several backward calls on one tape (or several tapes scattering into the
//! same parameter storage) sum their contributions.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics produced by a training-mode batch norm, for the caller's
/// running-average update. `var_unbiased` carries the M/(M-1) correction.
#[derive(Clone, Debug)]
pub struct BnBatch {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize, groups: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GlobalAvgPool { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleConst { input: Var, c: f64 },
    Sum { input: Var },
    FuseChannels { input: Var, marginals: Var, group_size: usize },
    MarkovMarginals { alpha: Var, transitions: Vec<f64> },
    BernoulliMarginals { alpha: Var },
    BudgetLoss { flops: Var, target: f64, gamma: f64 },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
}

/// Recorded forward graph plus gradient accumulators.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { data, shape, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter value. The tape owns a copy; gradients
    /// are read back through [`Tape::grad`] after `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.push(vec![x], vec![], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "scalar() on non-scalar node");
        self.nodes[v.0].data[0]
    }

    /// Accumulated gradient of a node (zeros before any backward call).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    // ---- operations -------------------------------------------------

    /// 2-d cross-correlation, NCHW layout, square kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?} / weight {ws:?} must be rank 4")));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err("conv2d", format!("groups {groups} must divide cin {cin} and cout {cout}")));
        }
        if wc != cin / groups {
            return Err(shape_err("conv2d", format!("weight expects {wc} input channels per group, input provides {}", cin / groups)));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(shape_err("conv2d", format!("kernel {k} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding)));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let hout = (h + 2 * padding - k) / stride + 1;
        let wout = (w + 2 * padding - k) / stride + 1;
        let out = conv2d_forward(
            &self.nodes[input.0].data,
            &self.nodes[weight.0].data,
            ConvDims { n, cin, h, w, cout, k, stride, padding, groups, hout, wout },
        );
        Ok(self.push(out, vec![n, cout, hout, wout], Op::Conv2d { input, weight, stride, padding, groups }))
    }

    /// Training-mode batch norm: normalizes by per-channel batch statistics.
    /// Returns the batch stats so the caller can maintain running averages.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnBatch)> {
        let (n, c, h, w) = self.bn_check(input, gamma, beta)?;
        let m = n * h * w;
        if m < 2 {
            return Err(shape_err("batch_norm", format!("training mode needs N*H*W >= 2, got {m}")));
        }
        let x = &self.nodes[input.0].data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                acc += x[base..base + h * w].iter().sum::<f64>();
            }
            mean[ci] = acc / m as f64;
            let mut acc2 = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                acc2 += x[base..base + h * w].iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
            }
            var[ci] = acc2 / m as f64;
        }
        let var_unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
        let out = self.bn_apply(input, gamma, beta, eps, &mean, &var, true);
        Ok((out, BnBatch { mean, var_unbiased }))
    }

    /// Eval-mode batch norm against fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, eps: f64, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (_, c, _, _) = self.bn_check(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", format!("running stats length {} != channels {c}", mean.len())));
        }
        Ok(self.bn_apply(input, gamma, beta, eps, mean, var, false))
    }

    fn bn_check(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(shape_err("batch_norm", format!("input must be rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("gamma {:?} / beta {:?} must both be [{c}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, h, w))
    }

    fn bn_apply(&mut self, input: Var, gamma: Var, beta: Var, eps: f64, mean: &[f64], var: &[f64], training: bool) -> Var {
        let xs = self.shape(input).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let x = &self.nodes[input.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], b[ci]);
                for i in base..base + hw {
                    let xh = (x[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = gc * xh + bc;
                }
            }
        }
        self.push(out, xs, Op::BatchNorm { input, gamma, beta, xhat, inv_std, training })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, Op::Relu { input })
    }

    /// Affine map: input [N,F] x weight [O,F] + bias [O] -> [N,O].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(shape_err("linear", format!("ranks: input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        let (o, wf) = (ws[0], ws[1]);
        if wf != f || bs[0] != o {
            return Err(shape_err("linear", format!("input [{n},{f}] incompatible with weight [{o},{wf}] / bias [{}]", bs[0])));
        }
        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; n * o];
        for ni in 0..n {
            let xrow = &x[ni * f..(ni + 1) * f];
            for oi in 0..o {
                let wrow = &wt[oi * f..(oi + 1) * f];
                let mut acc = b[oi];
                for fi in 0..f {
                    acc += xrow[fi] * wrow[fi];
                }
                out[ni * o + oi] = acc;
            }
        }
        Ok(self.push(out, vec![n, o], Op::Linear { input, weight, bias }))
    }

    /// Mean negative log-softmax over the batch; max-subtraction stabilized.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(shape_err("cross_entropy", format!("logits must be [N,K], got {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
        }
        let z = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for ni in 0..n {
            let row = &z[ni * k..(ni + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[ni * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[ni * k + j] /= denom;
            }
            loss -= (row[labels[ni]] - max - denom.ln()) / n as f64;
        }
        Ok(self.push(vec![loss], vec![], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input must be rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ni * c + ci] = x[base..base + h * w].iter().sum::<f64>() / hw;
            }
        }
        Ok(self.push(out, vec![n, c], Op::GlobalAvgPool { input }))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Add { a, b }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Mul { a, b }))
    }

    pub fn scale_const(&mut self, input: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, Op::ScaleConst { input, c })
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.nodes[input.0].data.iter().sum();
        self.push(vec![s], vec![], Op::Sum { input })
    }

    /// Scales every channel in group g by marginals[g].
    pub fn fuse_channels(&mut self, input: Var, marginals: Var, group_size: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ms = self.shape(marginals).to_vec();
        if xs.len() != 4 || ms.len() != 1 {
            return Err(shape_err("fuse_channels", format!("input {xs:?} must be rank 4, marginals {ms:?} rank 1")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if ms[0] * group_size != c {
            return Err(shape_err("fuse_channels", format!("{} groups of {group_size} != {c} channels", ms[0])));
        }
        let hw = h * w;
        let x = &self.nodes[input.0].data;
        let m = &self.nodes[marginals.0].data;
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let scale = m[ci / group_size];
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    out[i] = x[i] * scale;
                }
            }
        }
        Ok(self.push(out, xs, Op::FuseChannels { input, marginals, group_size }))
    }

    /// Marginal retention probabilities of the channel-group chain:
    /// m_1 = 1, m_k = prod_{i<=k} sigmoid(alpha_i). Input has length G-1,
    /// output length G. The backward rule is the closed form
    /// dm_k/dalpha_j = m_k * (1 - p_j) for j <= k.
    pub fn markov_marginals(&mut self, alpha: Var) -> Var {
        let a = &self.nodes[alpha.0].data;
        let transitions: Vec<f64> = a.iter().map(|&v| sigmoid(v)).collect();
        let g = a.len() + 1;
        let mut m = vec![1.0; g];
        for k in 1..g {
            m[k] = m[k - 1] * transitions[k - 1];
        }
        self.push(m, vec![g], Op::MarkovMarginals { alpha, transitions })
    }

    /// Independent per-group retention: m_1 = 1, m_k = sigmoid(alpha_k).
    pub fn bernoulli_marginals(&mut self, alpha: Var) -> Var {
        let a = &self.nodes[alpha.0].data;
        let g = a.len() + 1;
        let mut m = vec![1.0; g];
        for k in 1..g {
            m[k] = sigmoid(a[k - 1]);
        }
        self.push(m, vec![g], Op::BernoulliMarginals { alpha })
    }

    /// log-distance budget loss with a one-sided margin: zero on
    /// [gamma*T, T], log|e - T| outside, with |e - T| clamped below by 1.
    pub fn budget_loss(&mut self, flops: Var, target: f64, gamma: f64) -> Result<Var> {
        if !self.shape(flops).is_empty() && self.shape(flops) != [1] {
            return Err(shape_err("budget_loss", "expected FLOPs must be scalar".into()));
        }
        let e = self.nodes[flops.0].data[0];
        let loss = budget_loss_value(e, target, gamma);
        Ok(self.push(vec![loss], vec![], Op::BudgetLoss { flops, target, gamma }))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Adjoints are computed in transient
    /// buffers and then added into each node's persistent gradient, so a
    /// second backward call on another loss sums correctly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        adj[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            self.backward_node(idx, &mut adj);
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (g, v) in node.grad.iter_mut().zip(a) {
                *g += v;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, adj: &mut [Vec<f64>]) {
        if adj[idx].iter().all(|&v| v == 0.0) {
            return;
        }
        // Detach this node's adjoint so the borrow checker allows writes to
        // input adjoints; restored after the match (no op feeds itself).
        let d_out = std::mem::take(&mut adj[idx]);
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, stride, padding, groups } => {
                let xs = &self.nodes[input.0].shape;
                let ws = &self.nodes[weight.0].shape;
                let dims = ConvDims {
                    n: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    cout: ws[0],
                    k: ws[2],
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                    hout: node.shape[2],
                    wout: node.shape[3],
                };
                conv2d_backward_input(&d_out, &self.nodes[weight.0].data, &mut adj[input.0], &dims);
                conv2d_backward_weight(&d_out, &self.nodes[input.0].data, &mut adj[weight.0], &dims);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let xs = &self.nodes[input.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = &self.nodes[gamma.0].data;
                for ci in 0..c {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            sum_d += d_out[i];
                            sum_dx += d_out[i] * xhat[i];
                        }
                    }
                    adj[beta.0][ci] += sum_d;
                    adj[gamma.0][ci] += sum_dx;
                    let (gc, is) = (g[ci], inv_std[ci]);
                    if *training {
                        // d_x = inv_std/M * (M*d_xhat - sum(d_xhat) - xhat * sum(d_xhat*xhat))
                        let k1 = gc * sum_d / m;
                        let k2 = gc * sum_dx / m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in base..base + hw {
                                adj[input.0][i] += is * (gc * d_out[i] - k1 - xhat[i] * k2);
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in base..base + hw {
                                adj[input.0][i] += is * gc * d_out[i];
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = &self.nodes[input.0].data;
                for i in 0..x.len() {
                    if x[i] > 0.0 {
                        adj[input.0][i] += d_out[i];
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let o = self.nodes[weight.0].shape[0];
                let x = &self.nodes[input.0].data;
                let wt = &self.nodes[weight.0].data;
                for ni in 0..n {
                    for oi in 0..o {
                        let d = d_out[ni * o + oi];
                        if d == 0.0 {
                            continue;
                        }
                        adj[bias.0][oi] += d;
                        let wrow = &wt[oi * f..(oi + 1) * f];
                        let xrow = &x[ni * f..(ni + 1) * f];
                        let dx = &mut adj[input.0][ni * f..(ni + 1) * f];
                        for fi in 0..f {
                            dx[fi] += d * wrow[fi];
                        }
                        let dw = &mut adj[weight.0][oi * f..(oi + 1) * f];
                        for fi in 0..f {
                            dw[fi] += d * xrow[fi];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let d = d_out[0];
                let n = labels.len();
                let k = self.nodes[logits.0].shape[1];
                let scale = d / n as f64;
                for ni in 0..n {
                    for j in 0..k {
                        let onehot = if j == labels[ni] { 1.0 } else { 0.0 };
                        adj[logits.0][ni * k + j] += scale * (probs[ni * k + j] - onehot);
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let xs = &self.nodes[input.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let d = d_out[ni * c + ci] * inv;
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            adj[input.0][i] += d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (g, d) in adj[a.0].iter_mut().zip(&d_out) {
                    *g += d;
                }
                for (g, d) in adj[b.0].iter_mut().zip(&d_out) {
                    *g += d;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                for i in 0..d_out.len() {
                    adj[a.0][i] += d_out[i] * self.nodes[b.0].data[i];
                }
                for i in 0..d_out.len() {
                    adj[b.0][i] += d_out[i] * self.nodes[a.0].data[i];
                }
            }
            Op::ScaleConst { input, c } => {
                for (g, d) in adj[input.0].iter_mut().zip(&d_out) {
                    *g += c * d;
                }
            }
            Op::Sum { input } => {
                let d = d_out[0];
                for g in adj[input.0].iter_mut() {
                    *g += d;
                }
            }
            Op::FuseChannels { input, marginals, group_size } => {
                let xs = &self.nodes[input.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let m = &self.nodes[marginals.0].data;
                let x = &self.nodes[input.0].data;
                for ni in 0..n {
                    for ci in 0..c {
                        let g = ci / group_size;
                        let scale = m[g];
                        let base = (ni * c + ci) * hw;
                        let mut dm = 0.0;
                        for i in base..base + hw {
                            adj[input.0][i] += d_out[i] * scale;
                            dm += d_out[i] * x[i];
                        }
                        adj[marginals.0][g] += dm;
                    }
                }
            }
            Op::MarkovMarginals { alpha, transitions } => {
                // dm_k/dalpha_j = m_k * (1 - p_j) for j <= k (0 otherwise).
                let m = &node.data;
                let g = m.len();
                for j in 0..g - 1 {
                    let mut acc = 0.0;
                    for k in (j + 1)..g {
                        acc += d_out[k] * m[k];
                    }
                    adj[alpha.0][j] += acc * (1.0 - transitions[j]);
                }
            }
            Op::BernoulliMarginals { alpha } => {
                let m = &node.data;
                for k in 1..m.len() {
                    adj[alpha.0][k - 1] += d_out[k] * m[k] * (1.0 - m[k]);
                }
            }
            Op::BudgetLoss { flops, target, gamma } => {
                let e = self.nodes[flops.0].data[0];
                adj[flops.0][0] += d_out[0] * budget_loss_grad(e, *target, *gamma);
            }
        }
    }
}

pub(crate) fn budget_loss_value(e: f64, target: f64, gamma: f64) -> f64 {
    if e >= gamma * target && e <= target {
        return 0.0;
    }
    (e - target).abs().max(1.0).ln()
}

pub(crate) fn budget_loss_grad(e: f64, target: f64, gamma: f64) -> f64 {
    if e >= gamma * target && e <= target {
        return 0.0;
    }
    let d = e - target;
    if d.abs() <= 1.0 {
        return 0.0;
    }
    1.0 / d
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    hout: usize,
    wout: usize,
}

/// Output-index range [lo, hi) for which o*stride + k_off - pad stays inside
/// [0, in_extent).
fn out_range(k_off: usize, pad: usize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let max_i = in_extent as isize - 1 + pad as isize - k_off as isize;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &[f64], wt: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.cout * d.hout * d.wout];
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    for ni in 0..d.n {
        for g in 0..d.groups {
            for oc in g * cout_g..(g + 1) * cout_g {
                let out_base = (ni * d.cout + oc) * d.hout * d.wout;
                for ic_g in 0..cin_g {
                    let ic = g * cin_g + ic_g;
                    let in_base = (ni * d.cin + ic) * d.h * d.w;
                    let w_base = (oc * cin_g + ic_g) * d.k * d.k;
                    for kh in 0..d.k {
                        let (oh_lo, oh_hi) = out_range(kh, d.padding, d.stride, d.h, d.hout);
                        for kw in 0..d.k {
                            let w_val = wt[w_base + kh * d.k + kw];
                            if w_val == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = out_range(kw, d.padding, d.stride, d.w, d.wout);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.padding;
                                let in_row = in_base + ih * d.w;
                                let out_row = out_base + oh * d.wout;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    out[out_row + ow] += w_val * x[in_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(d_out: &[f64], wt: &[f64], d_x: &mut [f64], d: &ConvDims) {
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    for ni in 0..d.n {
        for g in 0..d.groups {
            for oc in g * cout_g..(g + 1) * cout_g {
                let out_base = (ni * d.cout + oc) * d.hout * d.wout;
                for ic_g in 0..cin_g {
                    let ic = g * cin_g + ic_g;
                    let in_base = (ni * d.cin + ic) * d.h * d.w;
                    let w_base = (oc * cin_g + ic_g) * d.k * d.k;
                    for kh in 0..d.k {
                        let (oh_lo, oh_hi) = out_range(kh, d.padding, d.stride, d.h, d.hout);
                        for kw in 0..d.k {
                            let w_val = wt[w_base + kh * d.k + kw];
                            if w_val == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = out_range(kw, d.padding, d.stride, d.w, d.wout);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.padding;
                                let in_row = in_base + ih * d.w;
                                let out_row = out_base + oh * d.wout;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    d_x[in_row + iw] += w_val * d_out[out_row + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(d_out: &[f64], x: &[f64], d_w: &mut [f64], d: &ConvDims) {
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    for ni in 0..d.n {
        for g in 0..d.groups {
            for oc in g * cout_g..(g + 1) * cout_g {
                let out_base = (ni * d.cout + oc) * d.hout * d.wout;
                for ic_g in 0..cin_g {
                    let ic = g * cin_g + ic_g;
                    let in_base = (ni * d.cin + ic) * d.h * d.w;
                    let w_base = (oc * cin_g + ic_g) * d.k * d.k;
                    for kh in 0..d.k {
                        let (oh_lo, oh_hi) = out_range(kh, d.padding, d.stride, d.h, d.hout);
                        for kw in 0..d.k {
                            let (ow_lo, ow_hi) = out_range(kw, d.padding, d.stride, d.w, d.wout);
                            let mut acc = 0.0;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + kh - d.padding;
                                let in_row = in_base + ih * d.w;
                                let out_row = out_base + oh * d.wout;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    acc += d_out[out_row + ow] * x[in_row + iw];
                                }
                            }
                            d_w[w_base + kh * d.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_kernel_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.leaf(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_1x1_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(&tensor(vec![1, 1, 4, 4], data.clone()));
        let w = tape.leaf(&Tensor::full(vec![1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, w, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn conv_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 3, 4, 4]));
        let w = tape.leaf(&Tensor::zeros(vec![2, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 1, 1), Err(Error::Shape { .. })));
        let w2 = tape.leaf(&Tensor::zeros(vec![2, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w2, 1, 0, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn bn_constant_input_returns_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2, 2, 2, 2], 3.0));
        let gamma = tape.leaf(&Tensor::full(vec![2], 1.5));
        let beta = tape.leaf(&tensor(vec![2], vec![0.25, -0.5]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for ni in 0..2 {
            for ci in 0..2 {
                for i in 0..4 {
                    let v = tape.value(y)[(ni * 2 + ci) * 4 + i];
                    let expect = if ci == 0 { 0.25 } else { -0.5 };
                    assert!((v - expect).abs() < 1e-9, "got {v}");
                }
            }
        }
        assert!((stats.mean[0] - 3.0).abs() < 1e-12);
        assert!(stats.var_unbiased[0].abs() < 1e-12);
    }

    #[test]
    fn bn_normalizes_to_unit_stats() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 2.0 + 1.0).collect();
        let x = tape.leaf(&tensor(vec![2, 2, 2, 4], data));
        let gamma = tape.leaf(&Tensor::full(vec![2], 1.0));
        let beta = tape.leaf(&Tensor::zeros(vec![2]));
        let (y, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for ci in 0..2 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                let base = (ni * 2 + ci) * 8;
                vals.extend_from_slice(&tape.value(y)[base..base + 8]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let pos = tape.leaf(&tensor(vec![3], vec![0.5, 1.0, 2.0]));
        let y2 = tape.relu(pos);
        assert_eq!(tape.value(y2), tape.value(pos));
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(&tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero_w = tape.leaf(&Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(&tensor(vec![2], vec![0.7, -0.3]));
        let y2 = tape.linear(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y2), &[0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![2, 5]));
        let loss = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.scalar(loss) - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_logit_goes_to_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 4];
        data[1] = 50.0;
        let logits = tape.leaf(&tensor(vec![1, 4], data));
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![4], vec![0.3, -1.0, 2.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn two_backward_calls_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![2], vec![1.0, 2.0]));
        let l1 = tape.sum(x);
        let scaled = tape.scale_const(x, 3.0);
        let l2 = tape.sum(scaled);
        tape.backward(l1).unwrap();
        tape.backward(l2).unwrap();
        assert_eq!(tape.grad(x), &[4.0, 4.0]);
    }

    #[test]
    fn markov_marginals_values() {
        let mut tape = Tape::new();
        let alpha = tape.leaf(&Tensor::zeros(vec![2]));
        let m = tape.markov_marginals(alpha);
        let v = tape.value(m);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn fuse_identity_and_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let ones = tape.leaf(&Tensor::full(vec![2], 1.0));
        let y = tape.fuse_channels(x, ones, 2).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let gate = tape.leaf(&tensor(vec![2], vec![1.0, 0.0]));
        let y2 = tape.fuse_channels(x, gate, 2).unwrap();
        assert_eq!(tape.value(y2), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn budget_loss_margin_and_sides() {
        assert_eq!(budget_loss_value(97.0, 100.0, 0.95), 0.0);
        assert!((budget_loss_value(110.0, 100.0, 0.95) - 10.0f64.ln()).abs() < 1e-12);
        assert!((budget_loss_value(90.0, 100.0, 0.95) - 10.0f64.ln()).abs() < 1e-12);
        // clamp below 1 keeps the loss at zero
        assert_eq!(budget_loss_value(100.4, 100.0, 0.999), 0.0);
        assert_eq!(budget_loss_grad(97.0, 100.0, 0.95), 0.0);
        assert!((budget_loss_grad(110.0, 100.0, 0.95) - 0.1).abs() < 1e-12);
        assert!((budget_loss_grad(90.0, 100.0, 0.95) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.1 - 0.9).collect();
        let x = tape.leaf(&tensor(vec![1, 2, 3, 3], data.clone()));
        let w = tape.leaf(&Tensor::full(vec![2, 2, 3, 3], 0.5));
        let y = tape.conv2d(x, w, 1, 1, 1).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(x), &data[..]);
    }
}
