//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Values are computed
//! eagerly; [`Tape::backward`] walks the record in reverse and returns the
//! gradients of every leaf created with [`Tape::param`]. Leaves created with
//! [`Tape::constant`] (and everything computed only from constants) never
//! receive or propagate gradients.
//!
//! Reductions accumulate in `f64`; storage is `f32`.

use crate::error::{Error, Result};
use crate::kernels::{self, Mat, MatMut};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRowBias(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
        temperature: f32,
    },
    Attention {
        qkv: Var,
        seqs: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f32>,
        eps: f32,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        temperature: f32,
        probs: Vec<f32>,
    },
    MinMaxScale {
        x: Var,
        /// Per (item, axis): (argmin row, argmax row, range).
        extrema: Vec<(usize, usize, f32)>,
    },
    SamplePatches {
        images: Var,
        coords: Var,
        patch: usize,
    },
    BilinearSample {
        image: Var,
        points: Var,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        seqs: usize,
    },
    RowDistanceMean {
        a: Var,
        b: Var,
        dists: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Rebuilt for every training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves that requested them.
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

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { t.numel() / cols };
    (rows, cols)
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || !self.inputs_finite(&op),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        op_inputs(op)
            .iter()
            .all(|v| self.nodes[v.0].value.is_finite())
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m×k]·[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        let bm = Mat::new(tb.data(), tb.shape()[0], tb.shape()[1]);
        gemm_maybe_t(Mat::new(ta.data(), m, k), bm, trans_b, &mut out, n, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect()).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds `b[n]` to every row of `x[..×n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, n) = as_matrix(tx);
        if tb.numel() != n {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} for rows of width {n}", tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRowBias(x, b), ng))
    }

    /// `x·w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| gelu(*v)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Normalizes each row of `x[..×d]` to zero mean and unit variance, then
    /// applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = as_matrix(tx);
        if d == 0 || tg.numel() != d || tb.numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (*v as f64 - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise `softmax(x / temperature)` over the last dimension.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(x);
        let (_, k) = as_matrix(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            softmax_row(row, temperature);
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, temperature }, ng))
    }

    /// Multi-head self-attention core over `seqs` independent sequences.
    ///
    /// `qkv` is `[seqs·t × 3d]`; returns `[seqs·t × d]`.
    pub fn attention(&mut self, qkv: Var, seqs: usize, heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        let (rows, w) = as_matrix(t);
        if seqs == 0 || rows % seqs != 0 || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("qkv {:?} with {seqs} sequences and {heads} heads", t.shape()),
            ));
        }
        let d = w / 3;
        let len = rows / seqs;
        let mut out = vec![0.0; rows * d];
        let probs = kernels::attention_forward(t.data(), seqs, len, d, heads, &mut out);
        let out = Tensor::new(&[rows, d], out)?;
        let ng = self.ng(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                seqs,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Valid-padding cross-correlation.
    ///
    /// `x` is `[c_in×h×w]` or `[n×c_in×h×w]`, `kernel` is `[c_out×c_in×kh×kw]`,
    /// `bias` (optional) is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (n, ci, h, w) = match *tx.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim("conv2d", format!("input {:?}", tx.shape()))),
        };
        let [co, kc, kh, kw] = *tk.shape() else {
            return Err(Error::dim("conv2d", format!("kernel {:?}", tk.shape())));
        };
        if kc != ci || kh > h || kw > w || stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {:?} does not fit input {:?} (stride {stride})",
                    tk.shape(),
                    tx.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return Err(Error::dim("conv2d", "bias length != output channels"));
            }
        }
        let ho = kernels::conv_out(h, kh, stride);
        let wo = kernels::conv_out(w, kw, stride);
        let plane = ho * wo;
        let kdim = ci * kh * kw;
        let mut cols = vec![0.0; kdim * plane];
        let mut out = vec![0.0; n * co * plane];
        for i in 0..n {
            let img = &tx.data()[i * ci * h * w..(i + 1) * ci * h * w];
            kernels::im2col(img, (ci, h, w), (kh, kw), stride, &mut cols);
            kernels::gemm(
                Mat::new(tk.data(), co, kdim),
                Mat::new(&cols, kdim, plane),
                MatMut::new(&mut out[i * co * plane..(i + 1) * co * plane], plane),
                0.0,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (chunk, bv) in out.chunks_mut(plane).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|o| *o += bv);
            }
        }
        let shape: Vec<usize> = if tx.ndim() == 3 {
            vec![co, ho, wo]
        } else {
            vec![n, co, ho, wo]
        };
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || self.ng(kernel) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Selects rows of `x` viewed as `[rows × width]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        let width = if rows == 0 { 0 } else { t.numel() / rows };
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of range for {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?} vs trailing {tail:?}", t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let t = self.value(x);
        let (_, d) = as_matrix(t);
        let mut out = t.data().to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            let n = n.max(eps);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows { x, norms, eps }, ng)
    }

    /// Mean over rows of `H(target, softmax(logits / temperature))`.
    ///
    /// `targets` is a constant distribution per row (not differentiated).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::dim(
                "soft_cross_entropy",
                format!("logits {:?} vs targets {:?}", t.shape(), targets.shape()),
            ));
        }
        let (rows, k) = as_matrix(t);
        let mut probs = t.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(k.max(1)).enumerate() {
            let logz = log_softmax_norm(&t.data()[r * k..(r + 1) * k], temperature);
            for (j, p) in row.iter_mut().enumerate() {
                let lp = t.data()[r * k + j] as f64 / temperature as f64 - logz;
                let tj = targets.data()[r * k + j] as f64;
                if tj != 0.0 {
                    total -= tj * lp;
                }
                *p = lp.exp() as f32;
            }
        }
        let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                temperature,
                probs,
            },
            ng,
        ))
    }

    /// Per item and per axis, maps the minimum over rows to 0 and the maximum to 1.
    ///
    /// `x` is `[n×r×2]` (or `[r×2]`).
    pub fn min_max_scale(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (items, rows, axes) = match *t.shape() {
            [r, a] => (1, r, a),
            [n, r, a] => (n, r, a),
            _ => return Err(Error::dim("min_max_scale", format!("{:?}", t.shape()))),
        };
        if rows < 2 {
            return Err(Error::Config(format!(
                "min-max scaling needs at least 2 landmarks, got {rows}"
            )));
        }
        let mut out = t.data().to_vec();
        let mut extrema = Vec::with_capacity(items * axes);
        for i in 0..items {
            let base = i * rows * axes;
            for a in 0..axes {
                let at = |r: usize| t.data()[base + r * axes + a];
                let (mut lo, mut hi) = (0, 0);
                for r in 1..rows {
                    if at(r) < at(lo) {
                        lo = r;
                    }
                    if at(r) > at(hi) {
                        hi = r;
                    }
                }
                let range = (at(hi) - at(lo)).max(1e-12);
                let min = at(lo);
                for r in 0..rows {
                    out[base + r * axes + a] = (at(r) - min) / range;
                }
                out[base + lo * axes + a] = 0.0;
                out[base + hi * axes + a] = 1.0;
                extrema.push((lo, hi, range));
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MinMaxScale { x, extrema }, ng))
    }

    /// Samples a `patch×patch` unit-spaced grid centred on each landmark.
    ///
    /// `images` is `[n×c×h×w]`, `coords` is `[n×r×2]` in normalized `[0,1]`
    /// units (x then y), mapped to pixels as `x·(w−1)`. Returns
    /// `[n·r × c·patch·patch]`, each row laid out channel, row, column.
    pub fn sample_patches(&mut self, images: Var, coords: Var, patch: usize) -> Result<Var> {
        let (ti, tc) = (self.value(images), self.value(coords));
        let [n, c, h, w] = *ti.shape() else {
            return Err(Error::dim("sample_patches", format!("images {:?}", ti.shape())));
        };
        let [nc, r, 2] = *tc.shape() else {
            return Err(Error::dim("sample_patches", format!("coords {:?}", tc.shape())));
        };
        if nc != n || patch == 0 {
            return Err(Error::dim(
                "sample_patches",
                format!("images {:?} vs coords {:?}", ti.shape(), tc.shape()),
            ));
        }
        let width = c * patch * patch;
        let mut out = vec![0.0; n * r * width];
        let offs: Vec<f32> = kernels::patch_offsets(patch).collect();
        for i in 0..n {
            let img = &ti.data()[i * c * h * w..(i + 1) * c * h * w];
            for l in 0..r {
                let cx = kernels::to_pixel(tc.data()[(i * r + l) * 2], w);
                let cy = kernels::to_pixel(tc.data()[(i * r + l) * 2 + 1], h);
                let row = &mut out[(i * r + l) * width..(i * r + l + 1) * width];
                for ch in 0..c {
                    let plane = &img[ch * h * w..(ch + 1) * h * w];
                    for (py, oy) in offs.iter().enumerate() {
                        for (px, ox) in offs.iter().enumerate() {
                            row[(ch * patch + py) * patch + px] =
                                kernels::bilinear(plane, h, w, cx + ox, cy + oy);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n * r, width], out)?;
        let ng = self.ng(images) || self.ng(coords);
        Ok(self.push(
            out,
            Op::SamplePatches {
                images,
                coords,
                patch,
            },
            ng,
        ))
    }

    /// Bilinear sampling of `image[c×h×w]` at continuous pixel positions
    /// `points[m×2]` (x, y), zero padded. Returns `[m×c]`.
    pub fn bilinear_sample(&mut self, image: Var, points: Var) -> Result<Var> {
        let (ti, tp) = (self.value(image), self.value(points));
        let [c, h, w] = *ti.shape() else {
            return Err(Error::dim("bilinear_sample", format!("image {:?}", ti.shape())));
        };
        let [m, 2] = *tp.shape() else {
            return Err(Error::dim("bilinear_sample", format!("points {:?}", tp.shape())));
        };
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let (x, y) = (tp.data()[2 * i], tp.data()[2 * i + 1]);
            for ch in 0..c {
                out[i * c + ch] = kernels::bilinear(&ti.data()[ch * h * w..(ch + 1) * h * w], h, w, x, y);
            }
        }
        let out = Tensor::new(&[m, c], out)?;
        let ng = self.ng(image) || self.ng(points);
        Ok(self.push(out, Op::BilinearSample { image, points }, ng))
    }

    /// Builds `seqs` token sequences `[cls, p_1, .., p_r]` and adds positional
    /// rows `0..=r` by slot.
    ///
    /// `patches` is `[seqs·r × d]`, `cls` is `[d]`, `pos` is `[≥r+1 × d]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, seqs: usize) -> Result<Var> {
        let (tp, tc, tq) = (self.value(patches), self.value(cls), self.value(pos));
        let (rows, d) = as_matrix(tp);
        let (pos_rows, pd) = as_matrix(tq);
        if seqs == 0 || rows % seqs != 0 || tc.numel() != d || pd != d {
            return Err(Error::dim(
                "assemble_tokens",
                format!(
                    "patches {:?}, cls {:?}, pos {:?}, {seqs} sequences",
                    tp.shape(),
                    tc.shape(),
                    tq.shape()
                ),
            ));
        }
        let r = rows / seqs;
        if r + 1 > pos_rows {
            return Err(Error::dim(
                "assemble_tokens",
                format!("{r} patches exceed {} positional slots", pos_rows - 1),
            ));
        }
        let mut out = vec![0.0; seqs * (r + 1) * d];
        for s in 0..seqs {
            for slot in 0..=r {
                let dst = &mut out[(s * (r + 1) + slot) * d..(s * (r + 1) + slot + 1) * d];
                let src = if slot == 0 {
                    tc.data()
                } else {
                    &tp.data()[(s * r + slot - 1) * d..(s * r + slot) * d]
                };
                let p = &tq.data()[slot * d..(slot + 1) * d];
                for j in 0..d {
                    dst[j] = src[j] + p[j];
                }
            }
        }
        let out = Tensor::new(&[seqs * (r + 1), d], out)?;
        let ng = self.ng(patches) || self.ng(cls) || self.ng(pos);
        Ok(self.push(
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                seqs,
            },
            ng,
        ))
    }

    /// Mean over rows of the Euclidean distance `‖a_i − b_i‖₂`.
    pub fn row_distance_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_distance_mean", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, d) = as_matrix(ta);
        let mut dists = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        for r in 0..rows {
            let s: f64 = (0..d)
                .map(|j| (ta.data()[r * d + j] as f64 - tb.data()[r * d + j] as f64).powi(2))
                .sum();
            let dist = s.sqrt();
            total += dist;
            dists.push(dist as f32);
        }
        let mean = if rows == 0 { 0.0 } else { total / rows as f64 };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(mean as f32), Op::RowDistanceMean { a, b, dists }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| *v as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| *v as f64).sum();
        let m = if t.numel() == 0 { 0.0 } else { s / t.numel() as f64 };
        let ng = self.ng(x);
        self.push(Tensor::scalar(m as f32), Op::Mean(x), ng)
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {
                accumulate(&mut grads[$v.0], val($v).numel())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                let gm = Mat::new(g, m, n);
                let bm = Mat::new(tb.data(), tb.shape()[0], tb.shape()[1]);
                if want(*a) {
                    // dA = dC·Bᵀ (or dC·B when b was transposed)
                    let da = slot!(*a);
                    let bt = if *trans_b { bm } else { bm.t() };
                    kernels::gemm(gm, bt, MatMut::new(da, k), 1.0);
                }
                if want(*b) {
                    let db = slot!(*b);
                    let am = Mat::new(ta.data(), m, k);
                    if *trans_b {
                        // B is [n×k]: dB = dCᵀ·A
                        kernels::gemm(gm.t(), am, MatMut::new(db, k), 1.0);
                    } else {
                        kernels::gemm(am.t(), gm, MatMut::new(db, n), 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(slot!(*a), g);
                }
                if want(*b) {
                    add_into(slot!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(slot!(*a), g);
                }
                if want(*b) {
                    slot!(*b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let tb = val(*b).data();
                    let da = slot!(*a);
                    for i in 0..g.len() {
                        da[i] += g[i] * tb[i];
                    }
                }
                if want(*b) {
                    let ta = val(*a).data();
                    let db = slot!(*b);
                    for i in 0..g.len() {
                        db[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddRowBias(x, b) => {
                if want(*x) {
                    add_into(slot!(*x), g);
                }
                if want(*b) {
                    let n = val(*b).numel();
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n.max(1)) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
                    }
                    slot!(*b).iter_mut().zip(acc).for_each(|(d, a)| *d += a as f32);
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let tx = val(*x).data();
                    let dx = slot!(*x);
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(tx[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let tx = val(*x).data();
                    let dx = slot!(*x);
                    for i in 0..g.len() {
                        if tx[i] > 0.0 {
                            dx[i] += g[i];
                        }
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
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if want(*gamma) {
                    let mut acc = vec![0.0f64; d];
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += (row[j] * hrow[j]) as f64;
                        }
                    }
                    slot!(*gamma).iter_mut().zip(acc).for_each(|(s, a)| *s += a as f32);
                }
                if want(*beta) {
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
                    }
                    slot!(*beta).iter_mut().zip(acc).for_each(|(s, a)| *s += a as f32);
                }
                if want(*x) {
                    let dx = slot!(*x);
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dh = (row[j] * gam[j]) as f64;
                            m1 += dh;
                            m2 += dh * hrow[j] as f64;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = (row[j] * gam[j]) as f64;
                            dx[r * d + j] +=
                                (rstd[r] as f64 * (dh - m1 - hrow[j] as f64 * m2)) as f32;
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                if want(*x) {
                    let y = node.value.data();
                    let (_, k) = as_matrix(&node.value);
                    let dx = slot!(*x);
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for j in 0..k {
                            dr[j] += (yr[j] as f64 * (gr[j] as f64 - dot) / *temperature as f64) as f32;
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                seqs,
                heads,
                probs,
            } => {
                if want(*qkv) {
                    let t = val(*qkv);
                    let (rows, w) = as_matrix(t);
                    let d = w / 3;
                    let dq = slot!(*qkv);
                    kernels::attention_backward(
                        t.data(),
                        probs,
                        g,
                        *seqs,
                        rows / seqs,
                        d,
                        *heads,
                        dq,
                    );
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (n, ci, h, w) = match *tx.shape() {
                    [c, h, w] => (1, c, h, w),
                    [n, c, h, w] => (n, c, h, w),
                    _ => unreachable!(),
                };
                let [co, _, kh, kw] = *tk.shape() else { unreachable!() };
                let ho = kernels::conv_out(h, kh, *stride);
                let wo = kernels::conv_out(w, kw, *stride);
                let plane = ho * wo;
                let kdim = ci * kh * kw;
                if let Some(b) = bias {
                    if want(*b) {
                        let mut acc = vec![0.0f64; co];
                        for (idx, chunk) in g.chunks(plane).enumerate() {
                            acc[idx % co] += chunk.iter().map(|v| *v as f64).sum::<f64>();
                        }
                        slot!(*b).iter_mut().zip(acc).for_each(|(s, a)| *s += a as f32);
                    }
                }
                let mut cols = vec![0.0; kdim * plane];
                let mut dcols = vec![0.0; kdim * plane];
                let want_k = want(*kernel);
                let want_x = want(*x);
                let mut dk = if want_k { Some(vec![0.0; tk.numel()]) } else { None };
                let mut dx = if want_x { Some(vec![0.0; tx.numel()]) } else { None };
                for i in 0..n {
                    let gi = &g[i * co * plane..(i + 1) * co * plane];
                    if let Some(dk) = dk.as_mut() {
                        let img = &tx.data()[i * ci * h * w..(i + 1) * ci * h * w];
                        kernels::im2col(img, (ci, h, w), (kh, kw), *stride, &mut cols);
                        kernels::gemm(
                            Mat::new(gi, co, plane),
                            Mat::new(&cols, kdim, plane).t(),
                            MatMut::new(dk, kdim),
                            1.0,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(
                            Mat::new(tk.data(), co, kdim).t(),
                            Mat::new(gi, co, plane),
                            MatMut::new(&mut dcols, plane),
                            0.0,
                        );
                        kernels::col2im(
                            &dcols,
                            (ci, h, w),
                            (kh, kw),
                            *stride,
                            &mut dx[i * ci * h * w..(i + 1) * ci * h * w],
                        );
                    }
                }
                if let Some(dk) = dk {
                    add_into(slot!(*kernel), &dk);
                }
                if let Some(dx) = dx {
                    add_into(slot!(*x), &dx);
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    add_into(slot!(*x), g);
                }
            }
            Op::GatherRows { x, index } => {
                if want(*x) {
                    let width = if index.is_empty() { 0 } else { g.len() / index.len() };
                    let dx = slot!(*x);
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut dx[i * width..(i + 1) * width], &g[k * width..(k + 1) * width]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    if want(*p) {
                        add_into(slot!(*p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                if want(*x) {
                    let y = node.value.data();
                    let d = y.len() / norms.len().max(1);
                    let dx = slot!(*x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dr = &mut dx[r * d..(r + 1) * d];
                        if nrm > *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                            for j in 0..d {
                                dr[j] += ((gr[j] as f64 - yr[j] as f64 * dot) / nrm as f64) as f32;
                            }
                        } else {
                            for j in 0..d {
                                dr[j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                temperature,
                probs,
            } => {
                if want(*logits) {
                    let (rows, k) = as_matrix(targets);
                    let scale = g[0] as f64 / (rows as f64 * *temperature as f64);
                    let dl = slot!(*logits);
                    for r in 0..rows {
                        let tr = &targets.data()[r * k..(r + 1) * k];
                        let mass: f64 = tr.iter().map(|v| *v as f64).sum();
                        for j in 0..k {
                            let v = probs[r * k + j] as f64 * mass - tr[j] as f64;
                            dl[r * k + j] += (v * scale) as f32;
                        }
                    }
                }
            }
            Op::MinMaxScale { x, extrema } => {
                if want(*x) {
                    let y = node.value.data();
                    let shape = val(*x).shape();
                    let (rows, axes) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let dx = slot!(*x);
                    for (e, &(lo, hi, range)) in extrema.iter().enumerate() {
                        let (item, a) = (e / axes, e % axes);
                        let base = item * rows * axes;
                        let inv = 1.0 / range as f64;
                        let mut dmin = 0.0f64;
                        let mut dmax = 0.0f64;
                        for r in 0..rows {
                            let idx = base + r * axes + a;
                            let gv = g[idx] as f64;
                            let yv = y[idx] as f64;
                            dx[idx] += (gv * inv) as f32;
                            dmin += gv * (yv - 1.0) * inv;
                            dmax -= gv * yv * inv;
                        }
                        dx[base + lo * axes + a] += dmin as f32;
                        dx[base + hi * axes + a] += dmax as f32;
                    }
                }
            }
            Op::SamplePatches {
                images,
                coords,
                patch,
            } => {
                let (ti, tc) = (val(*images), val(*coords));
                let [n, c, h, w] = *ti.shape() else { unreachable!() };
                let r = tc.shape()[1];
                let width = c * patch * patch;
                let offs: Vec<f32> = kernels::patch_offsets(*patch).collect();
                let want_i = want(*images);
                let want_c = want(*coords);
                let mut di = if want_i { Some(vec![0.0; ti.numel()]) } else { None };
                let mut dc = if want_c { Some(vec![0.0; tc.numel()]) } else { None };
                for i in 0..n {
                    let img = &ti.data()[i * c * h * w..(i + 1) * c * h * w];
                    for l in 0..r {
                        let cx = kernels::to_pixel(tc.data()[(i * r + l) * 2], w);
                        let cy = kernels::to_pixel(tc.data()[(i * r + l) * 2 + 1], h);
                        let grow = &g[(i * r + l) * width..(i * r + l + 1) * width];
                        let (mut gx, mut gy) = (0.0f64, 0.0f64);
                        for ch in 0..c {
                            let plane = &img[ch * h * w..(ch + 1) * h * w];
                            for (py, oy) in offs.iter().enumerate() {
                                for (px, ox) in offs.iter().enumerate() {
                                    let gv = grow[(ch * patch + py) * patch + px];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let dplane = di
                                        .as_mut()
                                        .map(|d| &mut d[(i * c + ch) * h * w..(i * c + ch + 1) * h * w]);
                                    let (ddx, ddy) = kernels::bilinear_backward(
                                        plane,
                                        h,
                                        w,
                                        cx + ox,
                                        cy + oy,
                                        gv,
                                        dplane,
                                    );
                                    gx += ddx as f64;
                                    gy += ddy as f64;
                                }
                            }
                        }
                        if let Some(dc) = dc.as_mut() {
                            dc[(i * r + l) * 2] += (gx * (w as f64 - 1.0)) as f32;
                            dc[(i * r + l) * 2 + 1] += (gy * (h as f64 - 1.0)) as f32;
                        }
                    }
                }
                if let Some(di) = di {
                    add_into(slot!(*images), &di);
                }
                if let Some(dc) = dc {
                    add_into(slot!(*coords), &dc);
                }
            }
            Op::BilinearSample { image, points } => {
                let (ti, tp) = (val(*image), val(*points));
                let [c, h, w] = *ti.shape() else { unreachable!() };
                let m = tp.shape()[0];
                let mut di = if want(*image) { Some(vec![0.0; ti.numel()]) } else { None };
                let mut dp = vec![0.0f32; 2 * m];
                for i in 0..m {
                    let (x, y) = (tp.data()[2 * i], tp.data()[2 * i + 1]);
                    for ch in 0..c {
                        let plane = &ti.data()[ch * h * w..(ch + 1) * h * w];
                        let dplane = di.as_mut().map(|d| &mut d[ch * h * w..(ch + 1) * h * w]);
                        let (gx, gy) =
                            kernels::bilinear_backward(plane, h, w, x, y, g[i * c + ch], dplane);
                        dp[2 * i] += gx;
                        dp[2 * i + 1] += gy;
                    }
                }
                if let Some(di) = di {
                    add_into(slot!(*image), &di);
                }
                if want(*points) {
                    add_into(slot!(*points), &dp);
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                seqs,
            } => {
                let d = val(*cls).numel();
                let r = val(*patches).shape()[0] / seqs;
                if want(*patches) {
                    let dp = slot!(*patches);
                    for s in 0..*seqs {
                        for slot in 1..=r {
                            let src = &g[(s * (r + 1) + slot) * d..(s * (r + 1) + slot + 1) * d];
                            add_into(&mut dp[(s * r + slot - 1) * d..(s * r + slot) * d], src);
                        }
                    }
                }
                if want(*cls) {
                    let dc = slot!(*cls);
                    for s in 0..*seqs {
                        add_into(dc, &g[s * (r + 1) * d..(s * (r + 1) + 1) * d]);
                    }
                }
                if want(*pos) {
                    let dq = slot!(*pos);
                    for s in 0..*seqs {
                        for slot in 0..=r {
                            let src = &g[(s * (r + 1) + slot) * d..(s * (r + 1) + slot + 1) * d];
                            add_into(&mut dq[slot * d..(slot + 1) * d], src);
                        }
                    }
                }
            }
            Op::RowDistanceMean { a, b, dists } => {
                let (ta, tb) = (val(*a), val(*b));
                let rows = dists.len();
                let d = if rows == 0 { 0 } else { ta.numel() / rows };
                let scale = g[0] / rows.max(1) as f32;
                let mut da = vec![0.0f32; ta.numel()];
                for (r, &dist) in dists.iter().enumerate() {
                    if dist == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let idx = r * d + j;
                        da[idx] = scale * (ta.data()[idx] - tb.data()[idx]) / dist;
                    }
                }
                if want(*a) {
                    add_into(slot!(*a), &da);
                }
                if want(*b) {
                    slot!(*b).iter_mut().zip(&da).for_each(|(s, v)| *s -= v);
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    slot!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let n = val(*x).numel().max(1) as f32;
                    slot!(*x).iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddRowBias(a, b) | Op::RowDistanceMean { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _) | Op::Gelu(a) | Op::Relu(a) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => {
            vec![*a]
        }
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Softmax { x, .. }
        | Op::GatherRows { x, .. }
        | Op::L2NormalizeRows { x, .. }
        | Op::MinMaxScale { x, .. } => vec![*x],
        Op::Attention { qkv, .. } => vec![*qkv],
        Op::Conv2d { x, kernel, bias, .. } => {
            let mut v = vec![*x, *kernel];
            v.extend(bias.iter().copied());
            v
        }
        Op::ConcatRows(parts) => parts.clone(),
        Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        Op::SamplePatches { images, coords, .. } => vec![*images, *coords],
        Op::BilinearSample { image, points } => vec![*image, *points],
        Op::AssembleTokens { patches, cls, pos, .. } => vec![*patches, *cls, *pos],
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gemm_maybe_t(a: Mat, b: Mat, trans_b: bool, out: &mut [f32], n: usize, beta: f32) {
    let b = if trans_b { b.t() } else { b };
    kernels::gemm(a, b, MatMut::new(out, n), beta);
}

/// `log Σ exp(x/T)` computed stably in `f64`.
fn log_softmax_norm(row: &[f32], temperature: f32) -> f64 {
    let t = temperature as f64;
    let max = row.iter().map(|v| *v as f64 / t).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (*v as f64 / t - max).exp()).sum();
    max + s.ln()
}

/// In-place `softmax(row / temperature)` with max subtraction.
pub(crate) fn softmax_row(row: &mut [f32], temperature: f32) {
    let t = temperature as f64;
    let max = row.iter().map(|v| *v as f64 / t).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    let mut tmp: Vec<f64> = row
        .iter()
        .map(|v| {
            let e = (*v as f64 / t - max).exp();
            sum += e;
            e
        })
        .collect();
    tmp.iter_mut().for_each(|e| *e /= sum);
    row.iter_mut().zip(tmp).for_each(|(r, e)| *r = e as f32);
}
