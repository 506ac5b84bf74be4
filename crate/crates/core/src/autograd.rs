//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and the inputs its
//! backward rule needs, so node order is already topological. [`Tape::backward`]
//! walks the nodes once in reverse, then adds the results into the gradient
//! accumulators of leaves that were created with [`Tape::param`].

use rand::Rng;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, shape_err, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits every `(col_row, col_col, input_offset)` triple that falls
    /// inside the unpadded input of sample `n`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            let offset = (ch * self.h + ii as usize) * self.w + jj as usize;
                            f(row, oi * self.wo + oj, offset);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    AddChannelBias(Var, Var),
    Relu(Var),
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    GroupMean {
        input: Var,
        group: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    LinearCombination(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// A recorded computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `param` leaf, present after any `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dimensions differ: {n}×{k} · {k2}×{m}"
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(n, k, m, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(bias).numel() != m {
            return Err(shape_err(format!(
                "row bias of {} values for {m} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// 2-D cross-correlation of `N×C×H×W` input with an `F×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (f, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(shape_err(format!(
                "kernel expects {kc} channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.needs(kernel);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; n * f * cols_n];
        let mut all_cols = if keep_cols {
            vec![0.0; n * rows * cols_n]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; rows * cols_n];
        let sample = c * h * w;
        for s in 0..n {
            let cols = if keep_cols {
                &mut all_cols[s * rows * cols_n..(s + 1) * rows * cols_n]
            } else {
                scratch.fill(0.0);
                &mut scratch[..]
            };
            let xs = &x[s * sample..(s + 1) * sample];
            geom.for_each_tap(|row, col, off| cols[row * cols_n + col] = xs[off]);
            gemm_nn(
                f,
                rows,
                cols_n,
                k,
                cols,
                &mut out[s * f * cols_n..(s + 1) * f * cols_n],
            );
        }
        let value = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            cols: keep_cols.then_some(all_cols),
        };
        Ok(self.push(value, op, &[input, kernel]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(bias).numel() != c {
            return Err(shape_err(format!(
                "channel bias of {} values for {c} channels",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = b[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Spatial mean per channel: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let area = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * mask[i]);
        Ok(self.push(out, Op::Dropout { input: x, mask }, &[x]))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(shape_err(format!(
                "row slice {start}..{} of a {n}-row matrix",
                start + len
            )));
        }
        let out = self.value(x).data()[start * m..(start + len) * m].to_vec();
        Ok(self.push(Tensor::new(vec![len, m], out)?, Op::SliceRows { input: x, start }, &[x]))
    }

    /// Averages consecutive groups of `group` rows: `(g·n)×m → n×m`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, m) = self.value(x).dims2()?;
        if group == 0 || rows % group != 0 {
            return Err(shape_err(format!(
                "{rows} rows do not split into groups of {group}"
            )));
        }
        let n = rows / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for (g, dst) in out.chunks_exact_mut(m).enumerate() {
            for r in 0..group {
                let row = &src[(g * group + r) * m..(g * group + r + 1) * m];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= group as f64);
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::GroupMean { input: x, group }, &[x]))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    /// Returns the scalar loss node and the row probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Label { label, classes: k });
        }
        let probs = softmax_rows(self.value(logits))?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -log_softmax_at(&self.value(logits).data()[i * k..(i + 1) * k], l))
            .sum::<f64>()
            / n as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs: probs.clone(),
        };
        Ok((self.push(Tensor::scalar(loss), op, &[logits]), probs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ wᵢ xᵢ` against fixed weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err("weighted_sum weight count differs from input size"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum();
        let op = Op::WeightedSum {
            input: x,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    /// `Σ cᵢ vᵢ` over same-shaped nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(shape_err("empty linear combination"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let val = self.value(v);
            if val.shape() != shape {
                return Err(shape_err("linear combination of differently shaped nodes"));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::LinearCombination(terms.to_vec()), &inputs))
    }

    /// Back-propagates from a scalar node. Gradients add onto whatever the
    /// `param` leaves already hold; unreached params end with zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaf_grads);
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let g = Tensor::new(node.value.shape().to_vec(), g)?;
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        let mut emit = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    leaf_grads.push((i, g));
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[a.0].value.dims2().expect("matrix");
                let m = node.value.shape()[1];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                emit(*a, &mut |ga| gemm_nt(n, m, k, &g, bv, ga));
                emit(*b, &mut |gb| gemm_tn(k, n, m, av, &g, gb));
            }
            Op::AddRowBias(x, bias) => {
                let m = node.value.shape()[1];
                emit(*x, &mut |gx| add_into(gx, &g));
                emit(*bias, &mut |gb| {
                    for row in g.chunks_exact(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_sample = geom.f * cols_n;
                if let Some(cols) = cols {
                    emit(*kernel, &mut |gk| {
                        for s in 0..geom.n {
                            gemm_nt(
                                geom.f,
                                cols_n,
                                rows,
                                &g[s * out_sample..(s + 1) * out_sample],
                                &cols[s * rows * cols_n..(s + 1) * rows * cols_n],
                                gk,
                            );
                        }
                    });
                }
                let kv = self.nodes[kernel.0].value.data();
                let in_sample = geom.c * geom.h * geom.w;
                emit(*input, &mut |gx| {
                    let mut dcols = vec![0.0; rows * cols_n];
                    for s in 0..geom.n {
                        dcols.fill(0.0);
                        gemm_tn(
                            rows,
                            geom.f,
                            cols_n,
                            kv,
                            &g[s * out_sample..(s + 1) * out_sample],
                            &mut dcols,
                        );
                        let gxs = &mut gx[s * in_sample..(s + 1) * in_sample];
                        geom.for_each_tap(|row, col, off| gxs[off] += dcols[row * cols_n + col]);
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                let shape = node.value.shape();
                let (c, area) = (shape[1], shape[2] * shape[3]);
                emit(*x, &mut |gx| add_into(gx, &g));
                emit(*bias, &mut |gb| {
                    for (p, plane) in g.chunks_exact(area).enumerate() {
                        gb[p % c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                emit(*x, &mut |gx| {
                    for ((d, &up), &inp) in gx.iter_mut().zip(&g).zip(xv) {
                        if inp > 0.0 {
                            *d += up;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[x.0].value.shape();
                let area = shape[2] * shape[3];
                emit(*x, &mut |gx| {
                    for (plane, &up) in gx.chunks_exact_mut(area).zip(&g) {
                        let share = up / area as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Dropout { input, mask } => {
                emit(*input, &mut |gx| {
                    for ((d, &up), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        *d += up * m;
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let m = node.value.shape()[1];
                emit(*input, &mut |gx| add_into(&mut gx[start * m..start * m + g.len()], &g));
            }
            Op::GroupMean { input, group } => {
                let m = node.value.shape()[1];
                emit(*input, &mut |gx| {
                    for (r, dst) in gx.chunks_exact_mut(m).enumerate() {
                        let up = &g[(r / group) * m..(r / group + 1) * m];
                        for (d, &u) in dst.iter_mut().zip(up) {
                            *d += u / *group as f64;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let scale = g[0] / labels.len() as f64;
                emit(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let p = &probs.data()[r * k..(r + 1) * k];
                        let dst = &mut gl[r * k..(r + 1) * k];
                        for (j, (d, &pj)) in dst.iter_mut().zip(p).enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            *d += scale * (pj - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                emit(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::WeightedSum { input, weights } => {
                emit(*input, &mut |gx| {
                    for (d, &w) in gx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                });
            }
            Op::LinearCombination(terms) => {
                for &(v, c) in terms {
                    emit(v, &mut |gv| {
                        for (d, &up) in gv.iter_mut().zip(&g) {
                            *d += c * up;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

/// Numerically stable row-wise softmax of an `n×k` matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Tensor::new(vec![n, k], out)
}
