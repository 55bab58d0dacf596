//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only record of primitive applications. Every
//! operation appends one node whose inputs already exist, so the record is
//! topologically ordered by construction and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use fairdetect::graph::Graph;
//! use fairdetect::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Mean over the two trailing spatial axes of a `[B, C, H, W]` tensor.
    GlobalAvgPool,
}

/// One primitive application.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Unary {
        input: Var,
        kind: Elementwise,
    },
    Reduce {
        input: Var,
        kind: Reduction,
        axes: Vec<usize>,
    },
    ChannelMask {
        input: Var,
        active: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Softmax {
        input: Var,
    },
    Column {
        input: Var,
        col: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    /// `Σ_ij plan_ij (src[src_idx[i]] - dst[dst_idx[j]])²` with the plan held fixed.
    TransportCost {
        src: Var,
        src_idx: Vec<usize>,
        dst: Var,
        dst_idx: Vec<usize>,
        plan: Vec<f64>,
    },
}

impl Op {
    /// Nodes this op reads.
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Unary { input, .. }
            | Op::Reduce { input, .. }
            | Op::ChannelMask { input, .. }
            | Op::Softmax { input }
            | Op::Column { input, .. }
            | Op::Scale { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Add { a, b } => vec![*a, *b],
            Op::TransportCost { src, dst, .. } => vec![*src, *dst],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` is not on a
    /// path to the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, |v| &self.nodes[v.0].value)?;
        value.ensure_finite("forward")?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            kernel,
            stride,
        })
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.push(Op::ChannelBias { input, bias })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(Op::Dense {
            input,
            weight,
            bias,
        })
    }

    pub fn elementwise(&mut self, input: Var, kind: Elementwise) -> Result<Var> {
        self.push(Op::Unary { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.elementwise(input, Elementwise::Relu)
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.elementwise(input, Elementwise::Exp)
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        self.elementwise(input, Elementwise::Log)
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        self.elementwise(input, Elementwise::Square)
    }

    pub fn reduce(&mut self, input: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        self.push(Op::Reduce {
            input,
            kind,
            axes: axes.to_vec(),
        })
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, Reduction::Sum, axes)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, Reduction::Mean, axes)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, Reduction::GlobalAvgPool, &[2, 3])
    }

    pub fn channel_mask(&mut self, input: Var, active: &[bool]) -> Result<Var> {
        self.push(Op::ChannelMask {
            input,
            active: active.to_vec(),
        })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Softmax { input })
    }

    pub fn column(&mut self, input: Var, col: usize) -> Result<Var> {
        self.push(Op::Column { input, col })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale { input, factor })
    }

    pub fn transport_cost(
        &mut self,
        src: Var,
        src_idx: &[usize],
        dst: Var,
        dst_idx: &[usize],
        plan: &[f64],
    ) -> Result<Var> {
        self.push(Op::TransportCost {
            src,
            src_idx: src_idx.to_vec(),
            dst,
            dst_idx: dst_idx.to_vec(),
            plan: plan.to_vec(),
        })
    }

    /// Recompute every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => compute(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.nodes[root.0].value.is_scalar() {
            bail!(
                Usage,
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.adjoint(idx, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
            // Non-leaf gradients are not retained.
        }
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                out[i] = g;
            }
        }
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn adjoint(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let (gi, gk) = kernels::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    *stride,
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                let mut v = Vec::new();
                if let Some(gi) = gi {
                    v.push((*input, gi));
                }
                if let Some(gk) = gk {
                    v.push((*kernel, gk));
                }
                v
            }
            Op::ChannelBias { input, bias } => {
                let c = val(*bias).len();
                let shape = g.shape();
                let spatial: usize = shape[2..].iter().product();
                let mut gb = vec![0.0; c];
                for b in 0..shape[0] {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let base = (b * c + ch) * spatial;
                        *acc += g.data()[base..base + spatial].iter().sum::<f64>();
                    }
                }
                vec![(*input, g.clone()), (*bias, Tensor::vector(gb)?)]
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (gx, gw, gb) = kernels::dense_backward(val(*input), val(*weight), g);
                vec![(*input, gx), (*weight, gw), (*bias, gb)]
            }
            Op::Unary { input, kind } => {
                let x = val(*input);
                let y = &node.value;
                let data: Vec<f64> = match kind {
                    Elementwise::Relu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Elementwise::Exp => y.data().iter().zip(g.data()).map(|(y, g)| y * g).collect(),
                    Elementwise::Log => x.data().iter().zip(g.data()).map(|(x, g)| g / x).collect(),
                    Elementwise::Square => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| 2.0 * x * g)
                        .collect(),
                };
                vec![(*input, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Reduce { input, kind, axes } => {
                let x = val(*input);
                let map = kernels::ReduceMap::new(x.shape(), axes)?;
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean | Reduction::GlobalAvgPool => 1.0 / map.count as f64,
                };
                let data: Vec<f64> = (0..x.len())
                    .map(|i| g.data()[map.out_index(i)] * scale)
                    .collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::ChannelMask { input, active } => {
                let mut gx = g.clone();
                kernels::zero_channels(&mut gx, active);
                vec![(*input, gx)]
            }
            Op::CrossEntropy { logits, labels } => {
                let x = val(*logits);
                let (b, n) = (x.shape()[0], x.shape()[1]);
                let probs = kernels::softmax_rows(x);
                let scale = g.item()? / b as f64;
                let mut data = probs.into_data();
                for (r, &label) in labels.iter().enumerate() {
                    data[r * n + label] -= 1.0;
                }
                data.iter_mut().for_each(|d| *d *= scale);
                vec![(*logits, Tensor::new(vec![b, n], data)?)]
            }
            Op::Softmax { input } => {
                let p = &node.value;
                let n = p.shape()[1];
                let mut data = vec![0.0; p.len()];
                for ((prow, grow), out) in p
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(data.chunks_mut(n))
                {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in out.iter_mut().zip(prow).zip(grow) {
                        *o = p * (g - dot);
                    }
                }
                vec![(*input, Tensor::new(p.shape().to_vec(), data)?)]
            }
            Op::Column { input, col } => {
                let x = val(*input);
                let n = x.shape()[1];
                let mut gx = Tensor::zeros(x.shape());
                for (r, gv) in g.data().iter().enumerate() {
                    gx.data_mut()[r * n + col] = *gv;
                }
                vec![(*input, gx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { input, factor } => vec![(*input, g.map(|v| v * factor))],
            Op::TransportCost {
                src,
                src_idx,
                dst,
                dst_idx,
                plan,
            } => {
                let (s, d) = (val(*src), val(*dst));
                let scale = g.item()?;
                let mut gs = Tensor::zeros(s.shape());
                let mut gd = Tensor::zeros(d.shape());
                let m = dst_idx.len();
                for (i, &si) in src_idx.iter().enumerate() {
                    let x = s.data()[si];
                    for (j, &dj) in dst_idx.iter().enumerate() {
                        let w = 2.0 * plan[i * m + j] * (x - d.data()[dj]) * scale;
                        gs.data_mut()[si] += w;
                        gd.data_mut()[dj] -= w;
                    }
                }
                vec![(*src, gs), (*dst, gd)]
            }
        };
        Ok(out)
    }
}

fn compute<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => bail!(Usage, "leaves carry their own value"),
        Op::Conv2d {
            input,
            kernel,
            stride,
        } => kernels::conv2d(get(*input), get(*kernel), *stride),
        Op::ChannelBias { input, bias } => kernels::channel_bias(get(*input), get(*bias)),
        Op::Dense {
            input,
            weight,
            bias,
        } => kernels::dense(get(*input), get(*weight), get(*bias)),
        Op::Unary { input, kind } => kernels::elementwise(get(*input), *kind),
        Op::Reduce { input, kind, axes } => kernels::reduce(get(*input), *kind, axes),
        Op::ChannelMask { input, active } => {
            let x = get(*input);
            if x.rank() < 2 || x.shape()[1] != active.len() {
                bail!(
                    Dimension,
                    "mask of {} channels on shape {:?}",
                    active.len(),
                    x.shape()
                );
            }
            let mut y = x.clone();
            kernels::zero_channels(&mut y, active);
            Ok(y)
        }
        Op::CrossEntropy { logits, labels } => kernels::cross_entropy(get(*logits), labels),
        Op::Softmax { input } => {
            let x = get(*input);
            if x.rank() != 2 {
                bail!(Dimension, "softmax expects [B, n], got {:?}", x.shape());
            }
            Ok(kernels::softmax_rows(x))
        }
        Op::Column { input, col } => {
            let x = get(*input);
            if x.rank() != 2 || *col >= x.shape()[1] {
                bail!(Dimension, "column {col} of shape {:?}", x.shape());
            }
            let n = x.shape()[1];
            Tensor::vector(x.data().chunks(n).map(|r| r[*col]).collect())
        }
        Op::Add { a, b } => {
            let mut y = get(*a).clone();
            y.add_assign(get(*b))?;
            Ok(y)
        }
        Op::Scale { input, factor } => Ok(get(*input).map(|v| v * factor)),
        Op::TransportCost {
            src,
            src_idx,
            dst,
            dst_idx,
            plan,
        } => {
            let (s, d) = (get(*src), get(*dst));
            if plan.len() != src_idx.len() * dst_idx.len() {
                bail!(
                    Dimension,
                    "plan of {} entries for {}x{} supports",
                    plan.len(),
                    src_idx.len(),
                    dst_idx.len()
                );
            }
            if src_idx.iter().any(|&i| i >= s.len()) || dst_idx.iter().any(|&j| j >= d.len()) {
                bail!(Dimension, "support index out of range");
            }
            let xs: Vec<f64> = src_idx.iter().map(|&i| s.data()[i]).collect();
            let ys: Vec<f64> = dst_idx.iter().map(|&j| d.data()[j]).collect();
            Ok(Tensor::scalar(kernels::plan_cost(plan, &xs, &ys)))
        }
    }
}

/// Forward and adjoint kernels shared by the graph and by graph-free callers.
/// Plain SGD update `θ ← θ − lr·g` over matching parameter/gradient lists.
pub fn sgd_update(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        bail!(Dimension, "{} gradients for {} parameters", grads.len(), params.len());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            bail!(Dimension, "gradient shape {:?} vs parameter {:?}", g.shape(), p.shape());
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

pub mod kernels {
    use super::{Elementwise, Reduction};
    use crate::error::{bail, Result};
    use crate::tensor::Tensor;

    /// Valid (unpadded) 2-D convolution, `[B,Cin,H,W] * [Cout,Cin,kH,kW]`.
    pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (b, cin, h, w, cout, kh, kw, oh, ow) = conv_dims(input, kernel, stride)?;
        input.ensure_finite("conv2d input")?;
        let x = input.data();
        let k = kernel.data();
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                let plane = &mut out[obase..obase + oh * ow];
                for ci in 0..cin {
                    let ibase = (bi * cin + ci) * h * w;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kv = k[((co * cin + ci) * kh + ki) * kw + kj];
                            for oi in 0..oh {
                                let row = ibase + (oi * stride + ki) * w + kj;
                                let orow = &mut plane[oi * ow..(oi + 1) * ow];
                                if stride == 1 {
                                    for (o, xv) in orow.iter_mut().zip(&x[row..row + ow]) {
                                        *o += kv * xv;
                                    }
                                } else {
                                    for (oj, o) in orow.iter_mut().enumerate() {
                                        *o += kv * x[row + oj * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b, cout, oh, ow], out)
    }

    #[allow(clippy::type_complexity)]
    fn conv_dims(
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
        if input.rank() != 4 || kernel.rank() != 4 {
            bail!(
                Dimension,
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            );
        }
        if stride == 0 {
            bail!(Dimension, "conv2d stride must be positive");
        }
        let s = input.shape();
        let ks = kernel.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || kh > h || kw > w {
            bail!(
                Dimension,
                "conv2d kernel {:?} incompatible with input {:?}",
                ks,
                s
            );
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        Ok((b, cin, h, w, cout, kh, kw, oh, ow))
    }

    pub fn conv2d_backward(
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        g: &Tensor,
        want_input: bool,
        want_kernel: bool,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let s = input.shape();
        let ks = kernel.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let x = input.data();
        let k = kernel.data();
        let gd = g.data();
        let mut gi = want_input.then(|| vec![0.0; x.len()]);
        let mut gk = want_kernel.then(|| vec![0.0; k.len()]);
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                for ci in 0..cin {
                    let ibase = (bi * cin + ci) * h * w;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kidx = ((co * cin + ci) * kh + ki) * kw + kj;
                            let kv = k[kidx];
                            let mut acc = 0.0;
                            for oi in 0..oh {
                                let row = ibase + (oi * stride + ki) * w + kj;
                                let grow = &gd[obase + oi * ow..obase + (oi + 1) * ow];
                                if stride == 1 {
                                    if gk.is_some() {
                                        acc += grow
                                            .iter()
                                            .zip(&x[row..row + ow])
                                            .map(|(g, x)| g * x)
                                            .sum::<f64>();
                                    }
                                    if let Some(gi) = gi.as_mut() {
                                        for (o, gv) in gi[row..row + ow].iter_mut().zip(grow) {
                                            *o += kv * gv;
                                        }
                                    }
                                } else {
                                    for (oj, gv) in grow.iter().enumerate() {
                                        let xi = row + oj * stride;
                                        acc += gv * x[xi];
                                        if let Some(gi) = gi.as_mut() {
                                            gi[xi] += kv * gv;
                                        }
                                    }
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
        (
            gi.map(|d| Tensor::new(s.to_vec(), d).expect("input shape")),
            gk.map(|d| Tensor::new(ks.to_vec(), d).expect("kernel shape")),
        )
    }

    pub fn channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if input.rank() < 2 || bias.rank() != 1 || bias.len() != input.shape()[1] {
            bail!(
                Dimension,
                "channel bias {:?} on input {:?}",
                bias.shape(),
                input.shape()
            );
        }
        let c = bias.len();
        let spatial: usize = input.shape()[2..].iter().product();
        let mut y = input.clone();
        for (i, chunk) in y.data_mut().chunks_mut(spatial).enumerate() {
            let bv = bias.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(y)
    }

    /// `out[b, j] = Σ_k weight[j, k] · input[b, k] + bias[j]`.
    pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 {
            bail!(
                Dimension,
                "dense expects [B,n], [m,n], [m]; got {:?}, {:?}, {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            );
        }
        let (b, n) = (input.shape()[0], input.shape()[1]);
        let m = weight.shape()[0];
        if weight.shape()[1] != n || bias.len() != m {
            bail!(
                Dimension,
                "dense inner dimensions disagree: {:?} x {:?} + {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            );
        }
        let mut out = Vec::with_capacity(b * m);
        for row in input.data().chunks(n) {
            for (wrow, bv) in weight.data().chunks(n).zip(bias.data()) {
                let dot: f64 = wrow.iter().zip(row).map(|(w, x)| w * x).sum();
                out.push(dot + bv);
            }
        }
        Tensor::new(vec![b, m], out)
    }

    pub fn dense_backward(input: &Tensor, weight: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (b, n) = (input.shape()[0], input.shape()[1]);
        let m = weight.shape()[0];
        let mut gx = vec![0.0; b * n];
        let mut gw = vec![0.0; m * n];
        let mut gb = vec![0.0; m];
        for bi in 0..b {
            let x = &input.data()[bi * n..(bi + 1) * n];
            for j in 0..m {
                let gv = g.data()[bi * m + j];
                gb[j] += gv;
                let w = &weight.data()[j * n..(j + 1) * n];
                for k in 0..n {
                    gx[bi * n + k] += gv * w[k];
                    gw[j * n + k] += gv * x[k];
                }
            }
        }
        (
            Tensor::new(vec![b, n], gx).expect("dx"),
            Tensor::new(vec![m, n], gw).expect("dw"),
            Tensor::new(vec![m], gb).expect("db"),
        )
    }

    pub fn elementwise(input: &Tensor, kind: Elementwise) -> Result<Tensor> {
        Ok(match kind {
            Elementwise::Relu => input.map(|x| if x > 0.0 { x } else { 0.0 }),
            Elementwise::Exp => input.map(f64::exp),
            Elementwise::Log => {
                if let Some(x) = input.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    bail!(Domain, "log of non-positive value {x}");
                }
                input.map(f64::ln)
            }
            Elementwise::Square => input.map(|x| x * x),
        })
    }

    /// Flat-index mapping from an input to its reduced output.
    pub struct ReduceMap {
        pub out_shape: Vec<usize>,
        pub count: usize,
        in_shape: Vec<usize>,
        out_strides: Vec<usize>,
    }

    impl ReduceMap {
        pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
            if axes.is_empty() {
                bail!(Domain, "reduction over no axes");
            }
            let mut reduced = vec![false; shape.len()];
            for &a in axes {
                if a >= shape.len() || reduced[a] {
                    bail!(Dimension, "invalid reduction axes {axes:?} for {shape:?}");
                }
                reduced[a] = true;
            }
            let out_shape: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            let count = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| r)
                .map(|(&d, _)| d)
                .product();
            let mut out_strides = vec![0; shape.len()];
            let mut stride = 1;
            for i in (0..shape.len()).rev() {
                if !reduced[i] {
                    out_strides[i] = stride;
                    stride *= shape[i];
                }
            }
            Ok(ReduceMap {
                out_shape,
                count,
                in_shape: shape.to_vec(),
                out_strides,
            })
        }

        pub fn out_index(&self, mut flat: usize) -> usize {
            let mut out = 0;
            for i in (0..self.in_shape.len()).rev() {
                let d = self.in_shape[i];
                out += (flat % d) * self.out_strides[i];
                flat /= d;
            }
            out
        }
    }

    /// Sum/mean with accumulation in increasing input flat-index order.
    pub fn reduce(input: &Tensor, kind: Reduction, axes: &[usize]) -> Result<Tensor> {
        if kind == Reduction::GlobalAvgPool && (input.rank() != 4 || axes != [2, 3]) {
            bail!(
                Dimension,
                "global average pooling expects [B,C,H,W], got {:?}",
                input.shape()
            );
        }
        let map = ReduceMap::new(input.shape(), axes)?;
        let n_out: usize = map.out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (i, v) in input.data().iter().enumerate() {
            out[map.out_index(i)] += v;
        }
        if kind != Reduction::Sum {
            let c = map.count as f64;
            out.iter_mut().for_each(|v| *v /= c);
        }
        Tensor::new(map.out_shape, out)
    }

    pub fn zero_channels(t: &mut Tensor, active: &[bool]) {
        let c = active.len();
        let spatial: usize = t.shape()[2..].iter().product();
        for (i, chunk) in t.data_mut().chunks_mut(spatial).enumerate() {
            if !active[i % c] {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn softmax_rows(x: &Tensor) -> Tensor {
        let n = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if logits.rank() != 2 {
            bail!(
                Dimension,
                "cross_entropy expects [B, n], got {:?}",
                logits.shape()
            );
        }
        let (b, n) = (logits.shape()[0], logits.shape()[1]);
        if labels.is_empty() {
            bail!(Domain, "cross_entropy of an empty batch");
        }
        if labels.len() != b {
            bail!(Dimension, "{} labels for batch of {b}", labels.len());
        }
        let mut total = 0.0;
        for (row, &label) in logits.data().chunks(n).zip(labels) {
            if label >= n {
                bail!(Domain, "label {label} out of range for {n} classes");
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        Ok(Tensor::scalar(total / b as f64))
    }

    /// `Σ_ij plan_ij (xs_i - ys_j)²`, row-major plan, fixed summation order.
    pub fn plan_cost(plan: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
        let m = ys.len();
        let mut total = 0.0;
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                let d = x - y;
                total += plan[i * m + j] * d * d;
            }
        }
        total
    }
}
