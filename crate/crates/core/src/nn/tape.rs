use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{shape_err, NnError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding that preserves height and width; odd remainders go to the
    /// bottom/right.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Permute { input: Var, axes: Vec<usize> },
    Reshape { input: Var },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Dropout { input: Var, mask: Vec<F> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Abs(Var),
    Concat(Var, Var),
    Gather { input: Var, rows: Vec<usize> },
    Upsample { input: Var, factor: usize },
    ResizeLast { input: Var },
    Sum(Var),
    Mean(Var),
    BinaryLogistic { score: Var, y: Vec<F> },
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F>, norm: F },
    Mse { pred: Var, target: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Records primitive applications in topological order so that a single
/// reverse sweep yields every gradient.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, needs_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    /// Records a tensor; gradients flow to it only if it requires them.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var, NnError> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, data.len()));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf not backed by a [`Tensor`]; handy in tests.
    pub fn variable(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var, NnError> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var, NnError> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
            return Err(shape_err("conv2d", "[B,Cin,H,W] with kernel [Cout,Cin,kh,kw]", (is, ks)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(shape_err("conv2d bias", [ks[0]], self.shape(b)));
            }
        }
        let (kh, kw) = (ks[2], ks[3]);
        let (pt, pb, pl, pr) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => ((kh - 1) / 2, kh - 1 - (kh - 1) / 2, (kw - 1) / 2, kw - 1 - (kw - 1) / 2),
        };
        if kh > is[2] + pt + pb || kw > is[3] + pl + pr {
            return Err(shape_err("conv2d", "kernel no larger than padded input", (ks, is)));
        }
        let geom = ConvGeom {
            batch: is[0],
            cin: is[1],
            h: is[2],
            w: is[3],
            cout: ks[0],
            kh,
            kw,
            pad_top: pt,
            pad_left: pl,
            hout: is[2] + pt + pb - kh + 1,
            wout: is[3] + pl + pr - kw + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        let ng = self.ng(&[input, kernel]) || bias.is_some_and(|b| self.node(b).needs_grad);
        Ok(self.push(vec![geom.batch, geom.cout, geom.hout, geom.wout], out, ng, Op::Conv2d { input, kernel, bias, geom }))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var, NnError> {
        let s = self.shape(input).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("permutation of {} axes", s.len()), axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(self.value(input), &s, axes);
        let ng = self.ng(&[input]);
        Ok(self.push(out_shape, out, ng, Op::Permute { input, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, NnError> {
        if numel(shape) != self.value(input).len() {
            return Err(shape_err("reshape", self.shape(input), shape));
        }
        let v = self.value(input).to_vec();
        let ng = self.ng(&[input]);
        Ok(self.push(shape.to_vec(), v, ng, Op::Reshape { input }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input).iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        let s = self.shape(input).to_vec();
        let ng = self.ng(&[input]);
        self.push(s, v, ng, Op::Relu { input })
    }

    /// Non-overlapping max pooling over the last two axes of a 4-D input.
    /// Trailing partial windows are dropped; ties go to the first element.
    pub fn maxpool2d(&mut self, input: Var, pool_h: usize, pool_w: usize) -> Result<Var, NnError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || pool_h == 0 || pool_w == 0 || pool_h > s[2] || pool_w > s[3] {
            return Err(shape_err("maxpool2d", "pool within [B,C,H,W]", (s, pool_h, pool_w)));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / pool_h, w / pool_w);
        let planes = s[0] * s[1];
        let x = self.value(input);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * pool_h * w + j * pool_w;
                    for u in 0..pool_h {
                        let row = base + (i * pool_h + u) * w + j * pool_w;
                        for idx in row..row + pool_w {
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[input]);
        Ok(self.push(vec![s[0], s[1], ho, wo], out, ng, Op::MaxPool { input, argmax }))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in training and
    /// evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument { op: "dropout", message: format!("rate {rate} outside [0, 1)") });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(input).len()).map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep }).collect();
        let v = self.value(input).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let s = self.shape(input).to_vec();
        let ng = self.ng(&[input]);
        Ok(self.push(s, v, ng, Op::Dropout { input, mask }))
    }

    /// `input [B,F] · weight [F,D] + bias [D]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, NnError> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
            return Err(shape_err("linear", "[B,F] x [F,D]", (is, ws)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("linear bias", [ws[1]], self.shape(b)));
            }
        }
        let (bsz, f, d) = (is[0], is[1], ws[1]);
        let x = self.value(input);
        let w = self.value(weight);
        let mut out = vec![F::zero(); bsz * d];
        for b in 0..bsz {
            let row = &mut out[b * d..(b + 1) * d];
            if let Some(bv) = bias {
                row.copy_from_slice(self.value(bv));
            }
            for k in 0..f {
                kernels::axpy(row, x[b * f + k], &w[k * d..(k + 1) * d]);
            }
        }
        let ng = self.ng(&[input, weight]) || bias.is_some_and(|b| self.node(b).needs_grad);
        Ok(self.push(vec![bsz, d], out, ng, Op::Linear { input, weight, bias }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Vec<F>, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(s, v, ng, Op::Scale(a, c))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.abs()).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(s, v, ng, Op::Abs(a))
    }

    /// Concatenates two `[B,·]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", sa, sb));
        }
        let (rows, da, db) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * da..(r + 1) * da]);
            out.extend_from_slice(&self.value(b)[r * db..(r + 1) * db]);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![rows, da + db], out, ng, Op::Concat(a, b)))
    }

    /// Selects rows of a `[N,D]` matrix; repeated rows accumulate gradient.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var, NnError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err("gather_rows", s.clone(), rows.iter().max()));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&self.value(input)[r * d..(r + 1) * d]);
        }
        let ng = self.ng(&[input]);
        Ok(self.push(vec![rows.len(), d], out, ng, Op::Gather { input, rows: rows.to_vec() }))
    }

    /// Nearest-neighbour upsampling of the last axis.
    pub fn upsample_last(&mut self, input: Var, factor: usize) -> Result<Var, NnError> {
        if factor == 0 {
            return Err(NnError::InvalidArgument { op: "upsample", message: "factor must be positive".into() });
        }
        let mut s = self.shape(input).to_vec();
        let w = *s.last().expect("non-empty shape");
        let out: Vec<F> =
            self.value(input).chunks(w).flat_map(|row| row.iter().flat_map(move |&x| std::iter::repeat_n(x, factor))).collect();
        *s.last_mut().unwrap() = w * factor;
        let ng = self.ng(&[input]);
        Ok(self.push(s, out, ng, Op::Upsample { input, factor }))
    }

    /// Crops or zero-pads the last axis to `len`.
    pub fn resize_last(&mut self, input: Var, len: usize) -> Result<Var, NnError> {
        if len == 0 {
            return Err(NnError::InvalidArgument { op: "resize_last", message: "length must be positive".into() });
        }
        let mut s = self.shape(input).to_vec();
        let w = *s.last().expect("non-empty shape");
        let keep = w.min(len);
        let mut out = Vec::with_capacity(self.value(input).len() / w * len);
        for row in self.value(input).chunks(w) {
            out.extend_from_slice(&row[..keep]);
            out.extend(std::iter::repeat_n(F::zero(), len - keep));
        }
        *s.last_mut().unwrap() = len;
        let ng = self.ng(&[input]);
        Ok(self.push(s, out, ng, Op::ResizeLast { input }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![v], ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::of(self.value(a).len() as f64);
        let v = self.value(a).iter().copied().sum::<F>() / n;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![v], ng, Op::Mean(a))
    }

    /// Mean of `log(1 + exp(-y·s))` over the batch, in the overflow-free form
    /// `log1p(exp(-|z|)) + max(0, -z)` with `z = y·s`.
    pub fn binary_logistic_loss(&mut self, score: Var, y: &[F]) -> Result<Var, NnError> {
        let s = self.value(score);
        if s.len() != y.len() || y.is_empty() {
            return Err(shape_err("binary_logistic_loss", s.len(), y.len()));
        }
        let total: F = s
            .iter()
            .zip(y)
            .map(|(&si, &yi)| {
                let z = yi * si;
                (-z.abs()).exp().ln_1p() + (-z).max(F::zero())
            })
            .sum();
        let v = total / F::of(y.len() as f64);
        let ng = self.ng(&[score]);
        Ok(self.push(vec![1], vec![v], ng, Op::BinaryLogistic { score, y: y.to_vec() }))
    }

    /// Class-weighted softmax cross-entropy, normalised by the summed weights
    /// of the batch targets.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var, NnError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[1] != weights.len() {
            return Err(shape_err("weighted_cross_entropy", (targets.len(), weights.len()), s));
        }
        let k = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::TargetOutOfRange { target: t, classes: k });
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(x.len());
        let mut num = F::zero();
        let mut norm = F::zero();
        for (row, &t) in x.chunks(k).zip(targets) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            num += weights[t] * (lse - row[t]);
            norm += weights[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        if norm <= F::zero() {
            return Err(NnError::InvalidArgument { op: "weighted_cross_entropy", message: "target weights sum to zero".into() });
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![num / norm],
            ng,
            Op::WeightedCe { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, norm },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &[F]) -> Result<Var, NnError> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("mse", p.len(), target.len()));
        }
        let v = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>() / F::of(p.len() as f64);
        let ng = self.ng(&[pred]);
        Ok(self.push(vec![1], vec![v], ng, Op::Mse { pred, target: target.to_vec() }))
    }

    /// Reverse sweep from a scalar. A tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, NnError> {
        if self.consumed {
            return Err(NnError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, &y)| *x += y),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let (gi, gk, gb) = kernels::conv2d_backward(geom, self.value(*input), self.value(*kernel), g, needs(*input));
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                acc(*kernel, gk);
                if let Some(b) = bias {
                    acc(*b, gb);
                }
            }
            Op::Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(*input, permute_data(g, &node.shape, &inv));
            }
            Op::Reshape { input } => acc(*input, g.to_vec()),
            Op::ResizeLast { input } => {
                let w_in = *self.shape(*input).last().unwrap();
                let w_out = *node.shape.last().unwrap();
                let keep = w_in.min(w_out);
                let mut out = Vec::with_capacity(self.value(*input).len());
                for row in g.chunks(w_out) {
                    out.extend_from_slice(&row[..keep]);
                    out.extend(std::iter::repeat_n(F::zero(), w_in - keep));
                }
                acc(*input, out);
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                acc(*input, g.iter().zip(x).map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() }).collect());
            }
            Op::MaxPool { input, argmax } => {
                let mut out = vec![F::zero(); self.value(*input).len()];
                for (&gi, &a) in g.iter().zip(argmax) {
                    out[a] += gi;
                }
                acc(*input, out);
            }
            Op::Dropout { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(&a, &b)| a * b).collect());
            }
            Op::Linear { input, weight, bias } => {
                let (bsz, f) = (self.shape(*input)[0], self.shape(*input)[1]);
                let d = self.shape(*weight)[1];
                let x = self.value(*input);
                let w = self.value(*weight);
                if needs(*input) {
                    let mut gi = vec![F::zero(); bsz * f];
                    for b in 0..bsz {
                        let grow = &g[b * d..(b + 1) * d];
                        for k in 0..f {
                            gi[b * f + k] = kernels::dot(grow, &w[k * d..(k + 1) * d]);
                        }
                    }
                    acc(*input, gi);
                }
                if needs(*weight) {
                    let mut gw = vec![F::zero(); f * d];
                    for b in 0..bsz {
                        let grow = &g[b * d..(b + 1) * d];
                        for k in 0..f {
                            kernels::axpy(&mut gw[k * d..(k + 1) * d], x[b * f + k], grow);
                        }
                    }
                    acc(*weight, gw);
                }
                if let Some(bv) = bias {
                    let mut gb = vec![F::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc(*bv, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| {
                            if xi > F::zero() {
                                gi
                            } else if xi < F::zero() {
                                -gi
                            } else {
                                F::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.shape(*a)[1], self.shape(*b)[1]);
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Gather { input, rows } => {
                let d = self.shape(*input)[1];
                let mut gi = vec![F::zero(); self.value(*input).len()];
                for (grow, &r) in g.chunks(d).zip(rows) {
                    gi[r * d..(r + 1) * d].iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                }
                acc(*input, gi);
            }
            Op::Upsample { input, factor } => {
                let gi = g.chunks(*factor).map(|c| c.iter().copied().sum()).collect();
                acc(*input, gi);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / F::of(n as f64); n]);
            }
            Op::BinaryLogistic { score, y } => {
                let n = F::of(y.len() as f64);
                let s = self.value(*score);
                // d/ds log(1+exp(-y s)) = -y * sigmoid(-y s)
                let gi = s
                    .iter()
                    .zip(y)
                    .map(|(&si, &yi)| {
                        let z = yi * si;
                        let sig = if z >= F::zero() {
                            let e = (-z).exp();
                            e / (F::one() + e)
                        } else {
                            F::one() / (F::one() + z.exp())
                        };
                        -yi * sig * g[0] / n
                    })
                    .collect();
                acc(*score, gi);
            }
            Op::WeightedCe { logits, targets, weights, probs, norm } => {
                let k = weights.len();
                let mut gi = probs.clone();
                for (row, &t) in gi.chunks_mut(k).zip(targets) {
                    row[t] -= F::one();
                    let c = weights[t] * g[0] / *norm;
                    row.iter_mut().for_each(|x| *x *= c);
                }
                acc(*logits, gi);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = F::of(2.0) * g[0] / F::of(p.len() as f64);
                acc(*pred, p.iter().zip(target).map(|(&a, &b)| c * (a - b)).collect());
            }
        }
    }
}

fn permute_data<F: Copy>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
