use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    OneMinus { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    Transpose { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    MeanRows { x: Var },
    Softmax { x: Var },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
        geom: ConvGeometry,
        out_channels: usize,
    },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order. `backward` replays the record in
/// reverse, so every op is visited exactly once per call.
///
/// Leaf gradients persist on the tape and accumulate across `backward`
/// calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => {
            let c = *s.last().unwrap();
            (t.len() / c, c)
        }
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::dim("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions differ: {sa:?} × {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// x + bias, with `bias` broadcast over every row of `x`'s last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.value(x));
        let blen = self.value(bias).len();
        if blen != cols {
            return Err(Error::dim(
                "add_bias",
                format!("bias of {blen} entries against last axis of {:?}", self.shape(x)),
            ));
        }
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 - v, Op::OneMinus { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    /// Concatenate along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no operands"));
        }
        let rows = rows_cols(self.value(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.value(p));
            if r != rows {
                return Err(Error::dim("concat", format!("row counts differ: {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if self.shape(parts[0]).len() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    /// Stack 2-D parts with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no operands"));
        }
        let cols = rows_cols(self.value(parts[0])).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.value(p));
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column counts differ: {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Row gather (embedding lookup): output row r is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = match self.shape(table) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("gather_rows", format!("table must be 2-D, got {s:?}"))),
        };
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("row id {bad} out of range for table of {rows} rows")));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor {
            shape: vec![ids.len(), cols],
            data,
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}"))),
        };
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::MeanAll { x }, &[x])
    }

    /// Column means of an m×n matrix, as a 1×n row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(Error::dim("mean_rows", format!("expected 2-D, got {s:?}"))),
        };
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n];
        for row in src.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::row(out), Op::MeanRows { x }, &[x]))
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = rows_cols(t);
        if cols == 0 {
            return Err(Error::dim("softmax", "empty axis"));
        }
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= total);
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Cross-correlation of a C×H×W input with O×C×k×k kernels (plus an
    /// optional per-output-channel bias).
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv2d", format!("input must be C×H×W, got {s:?}"))),
        };
        let (o, kc, kh, kw) = match self.shape(kernels) {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(Error::dim("conv2d", format!("kernels must be O×C×k×k, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim("conv2d", format!("kernel expects {kc} input channels, input has {c}")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != o {
                return Err(Error::dim("conv2d", format!("bias length {} for {o} output channels", self.value(b).len())));
            }
        }
        let (out_h, out_w) = match (
            kernels::conv_output_size(h, kh, stride, padding),
            kernels::conv_output_size(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("{kh}×{kw} kernel larger than padded {h}×{w} input (padding {padding}, stride {stride})"),
                ))
            }
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let cols = kernels::im2col(self.nodes[input.0].value.data(), &geom);
        let p = geom.out_len();
        let mut out = vec![0.0; o * p];
        kernels::gemm_ordered_acc(o, geom.patch_len(), p, self.nodes[kernels.0].value.data(), &cols, &mut out);
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for (row, &bv) in out.chunks_mut(p).zip(bd) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor {
            shape: vec![o, out_h, out_w],
            data: out,
        };
        let mut inputs = vec![input, kernels];
        inputs.extend(bias);
        // The unfolded input is only needed for the kernel gradient.
        let keep_cols = self.nodes[kernels.0].requires_grad;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols: if keep_cols { cols } else { Vec::new() },
                geom,
                out_channels: o,
            },
            &inputs,
        ))
    }

    /// Non-overlapping max pooling with a square `window` (stride = window).
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("max_pool2d", format!("input must be C×H×W, got {s:?}"))),
        };
        if window == 0 || window > h || window > w {
            return Err(Error::dim("max_pool2d", format!("window {window} on {h}×{w} input")));
        }
        let (oh, ow) = (h / window, w / window);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (ch * h + oy * window + dy) * w + ox * window + dx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor {
            shape: vec![c, oh, ow],
            data,
        };
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean token-level cross-entropy of T×V logits against `targets`,
    /// counting only rows where `mask` is true.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = match self.shape(logits) {
            [t, v] => (*t, *v),
            s => return Err(Error::dim("cross_entropy", format!("logits must be T×V, got {s:?}"))),
        };
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "cross_entropy",
                format!("{t} logit rows but {} targets and {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&id| id >= v) {
            return Err(Error::Data(format!("target id {bad} out of range for {v} classes")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("cross-entropy mask selects no positions".into()));
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (r, row) in src.chunks(v).enumerate() {
            if !mask[r] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    kernels::gemm(m, n, k, g, false, val(*b), true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::gemm(k, m, n, val(*a), true, g, false, db, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul { a, b } => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *bias) {
                    let cols = d.len();
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
                }
            }
            Op::OneMinus { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Tanh { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Relu { x } => {
                let input = val(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(input) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(d) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(d) = self.slot(grads, p) {
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = self.shape(*table)[1];
                if let Some(d) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        d[id * cols..(id + 1) * cols].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    let share = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::MeanRows { x } => {
                let m = self.shape(*x)[0] as f64;
                if let Some(d) = self.slot(grads, *x) {
                    let n = g.len();
                    for row in d.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g / m);
                    }
                }
            }
            Op::Softmax { x } => {
                let cols = *out.shape().last().unwrap();
                if let Some(d) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels: kv,
                bias,
                cols,
                geom,
                out_channels,
            } => {
                let o = *out_channels;
                let p = geom.out_len();
                let ckk = geom.patch_len();
                if let Some(dk) = self.slot(grads, *kv) {
                    kernels::gemm(o, p, ckk, g, false, cols, true, dk, true);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; ckk * p];
                    kernels::gemm(ckk, o, p, val(*kv), true, g, false, &mut dcols, false);
                    if let Some(di) = self.slot(grads, *input) {
                        kernels::col2im_acc(&dcols, geom, di);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(d) = self.slot(grads, *x) {
                    for (&src, g) in argmax.iter().zip(g) {
                        d[src] += g;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for (r, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut d[r * v..(r + 1) * v];
                        for (dv, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *dv += scale * p;
                        }
                        row[target] -= scale;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let z = tape.constant(t(&[2, 1], &[0.0, 0.0]));
        let c = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] × [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.26894).abs() < 1e-4 && (d[1] - 0.73106).abs() < 1e-4);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        // Second call without reset accumulates.
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[0.3, -1.2, 2.0, 0.5]));
        let y = tape.softmax(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        for g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn conv_identity_and_zero_kernel() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 4, 5], |i| i as f64 * 0.1);
        let x = tape.constant(img.clone());
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);

        let k0 = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, k0, None, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[2, 4, 5]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[3, 7]));
        let loss = tape.cross_entropy_masked(logits, &[1, 4, 0], &[true, true, false]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g[14..21].iter().all(|&v| v == 0.0), "masked row gets no gradient");
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2, 2], &[0.1, 0.9, 0.3, 0.2]));
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.9]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
