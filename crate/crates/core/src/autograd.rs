//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every op in creation order; [`Tape::backward`] walks
//! it in reverse, so every consumer of a node has contributed to its
//! gradient before the node's own backward rule runs. Op outputs are
//! rounded onto the tape's activation dtype; gradients are kept in `f64`.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::memory::{Category, MemoryLedger};
use crate::rng::Rng;
use crate::tensor::{matmul_at_acc, matmul_bt_into, matmul_into, DType, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mask(Var, Vec<f64>),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rope {
        a: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    act_dtype: DType,
    ledger: Option<Rc<RefCell<MemoryLedger>>>,
    registered: u64,
    budget_error: Option<Error>,
}

impl Tape {
    /// A tape whose op outputs are rounded onto `act_dtype`.
    pub fn new(act_dtype: DType) -> Self {
        Tape {
            nodes: Vec::new(),
            act_dtype,
            ledger: None,
            registered: 0,
            budget_error: None,
        }
    }

    /// Registers every activation buffer in `ledger` under
    /// [`Category::Activations`] for as long as the tape lives.
    pub fn with_ledger(act_dtype: DType, ledger: Rc<RefCell<MemoryLedger>>) -> Self {
        let mut t = Self::new(act_dtype);
        t.ledger = Some(ledger);
        t
    }

    pub fn act_dtype(&self) -> DType {
        self.act_dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First budget refusal seen while recording, if any.
    pub fn check_budget(&self) -> Result<()> {
        match &self.budget_error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(n.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn account(&mut self, bytes: u64) {
        let Some(ledger) = &self.ledger else { return };
        match ledger.borrow_mut().enforce(Category::Activations, bytes) {
            Ok(()) => self.registered += bytes,
            Err(e) => {
                if self.budget_error.is_none() {
                    self.budget_error = Some(e);
                }
            }
        }
    }

    /// Leaf node. Trainable leaves (`requires_grad`) are views of storage
    /// owned elsewhere and are not charged to the ledger; constant leaves are.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if !requires_grad {
            self.account((value.numel() * value.dtype().size_bytes()) as u64);
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let dtype = self.act_dtype;
        let value = Tensor::new(shape, dtype, data).expect("op output shape");
        self.account((value.numel() * dtype.size_bytes()) as u64);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dims(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&[m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the layout of every linear layer (`weight` is `[out × in]`).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dims(
                "matmul_bt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&[m, n], out, Op::MatMulBt(a, b), ng))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb || self.value(b).numel() == 1 {
            Ok(())
        } else {
            Err(Error::dims(op, sa, sb))
        }
    }

    /// Elementwise sum; `b` may be a single-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<f64> = if bv.len() == 1 && av.numel() != 1 {
            av.data().iter().map(|x| x + bv[0]).collect()
        } else {
            av.data().iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&shape, out, Op::Add(a, b), ng))
    }

    /// Elementwise product; `b` may be a single-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<f64> = if bv.len() == 1 && av.numel() != 1 {
            av.data().iter().map(|x| x * bv[0]).collect()
        } else {
            av.data().iter().zip(bv).map(|(x, y)| x * y).collect()
        };
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&shape, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * s).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a);
        self.push(&shape, out, Op::Scale(a, s), ng)
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).numel() != n {
            return Err(Error::dims(
                "add_row",
                self.value(a).shape(),
                self.value(row).shape(),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(&[m, n], out, Op::AddRow(a, row), ng))
    }

    /// Adds a constant tensor of the same shape; no gradient flows into it.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::dims("add_const", self.value(a).shape(), c.shape()));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = c.shape().to_vec();
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::AddConst(a), ng))
    }

    /// Inverted dropout. Identity (same node) when `train` is off or the
    /// rate is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut s = rng.stream();
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if s.uniform() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::Mask(a, mask), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_K * x * x * x))))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a);
        self.push(&shape, out, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        Ok(self.push(&[m, n], out, Op::SoftmaxRows(a), ng))
    }

    /// Standardizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (m, d) = self.dims2(x)?;
        if d == 0 {
            return Err(Error::Contract("layer_norm over an empty axis".into()));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dims(
                "layer_norm",
                self.value(x).shape(),
                self.value(gain).shape(),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, max-subtracted.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (b, v) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::dims("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index {
                what: "target",
                index: t as usize,
                bound: v,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        for i in 0..b {
            let row = &x[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[targets[i] as usize];
            softmax_into(row, &mut probs[i * v..(i + 1) * v]);
        }
        let loss = if b == 0 { 0.0 } else { total / b as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Row lookup: `table[V×d]` indexed by `ids` gives `[len(ids)×d]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            &[ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(Error::dims("slice_cols", self.value(a).shape(), &[start, len]));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(&[m, len], out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::dims("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(&[m, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rotary position embedding on `a[T×d]` (d even), positions `0..T`.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let (t, d) = self.dims2(a)?;
        if d % 2 != 0 {
            return Err(Error::Contract(format!("rotary dimension {d} must be even")));
        }
        let half = d / 2;
        let mut cos = vec![0.0; t * half];
        let mut sin = vec![0.0; t * half];
        for pos in 0..t {
            for i in 0..half {
                let theta = pos as f64 * libm::pow(base, -2.0 * i as f64 / d as f64);
                cos[pos * half + i] = libm::cos(theta);
                sin[pos * half + i] = libm::sin(theta);
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; t * d];
        for pos in 0..t {
            for i in 0..half {
                let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                let x0 = x[pos * d + 2 * i];
                let x1 = x[pos * d + 2 * i + 1];
                out[pos * d + 2 * i] = x0 * c - x1 * s;
                out[pos * d + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(&[t, d], out, Op::Rope { a, cos, sin }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(&[1], vec![s], Op::Sum(a), ng)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {n} elements"
            )));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Backpropagates `seed` as the gradient of `out`.
    pub fn backward_from(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::dims("backward_from", self.value(out).shape(), &[seed.len()]));
        }
        self.accumulate(out, seed.to_vec());
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            None => node.grad = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }

    fn local_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g, val(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_acc(val(*a), g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (n, _) = self.nodes[b.0].value.dims2().unwrap();
                if ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, val(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if ng(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_at_acc(g, val(*a), &mut gb, m, n, k);
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    out.push((*a, g.to_vec()));
                }
                if ng(*b) {
                    out.push((*b, reduce_like(g, self.nodes[b.0].value.numel())));
                }
            }
            Op::AddConst(a) => {
                if ng(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::AddRow(a, row) => {
                if ng(*a) {
                    out.push((*a, g.to_vec()));
                }
                if ng(*row) {
                    let n = self.nodes[row.0].value.numel();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(r, x)| *r += x);
                    }
                    out.push((*row, gr));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() == 1 && av.len() != 1;
                if ng(*a) {
                    let ga = if scalar_b {
                        g.iter().map(|x| x * bv[0]).collect()
                    } else {
                        g.iter().zip(bv).map(|(x, y)| x * y).collect()
                    };
                    out.push((*a, ga));
                }
                if ng(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    out.push((*b, reduce_like(&prod, bv.len())));
                }
            }
            Op::Scale(a, s) => {
                if ng(*a) {
                    out.push((*a, g.iter().map(|x| x * s).collect()));
                }
            }
            Op::Mask(a, mask) => {
                if ng(*a) {
                    out.push((*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()));
                }
            }
            Op::Gelu(a) => {
                if ng(*a) {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(gy, &x)| {
                            let t = libm::tanh(GELU_C * (x + GELU_K * x * x * x));
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect();
                    out.push((*a, ga));
                }
            }
            Op::SoftmaxRows(a) => {
                if ng(*a) {
                    let (m, n) = node.value.dims2().unwrap();
                    let y = node.value.data();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*a, ga));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = node.value.dims2().unwrap();
                let gv = val(*gain);
                if ng(*x) {
                    let mut gx = vec![0.0; m * d];
                    for i in 0..m {
                        let gr = &g[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    out.push((*x, gx));
                }
                if ng(*gain) {
                    let mut gg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    out.push((*gain, gg));
                }
                if ng(*bias) {
                    let mut gb = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        gb.iter_mut().zip(chunk).for_each(|(r, x)| *r += x);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if ng(*logits) {
                    let b = targets.len();
                    let v = probs.len().checked_div(b).unwrap_or(0);
                    let scale = g[0] / b.max(1) as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t as usize] -= scale;
                    }
                    out.push((*logits, gl));
                }
            }
            Op::Gather { table, ids } => {
                if ng(*table) {
                    let (v, d) = self.nodes[table.0].value.dims2().unwrap();
                    let mut gt = vec![0.0; v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, gt));
                }
            }
            Op::SliceCols { a, start } => {
                if ng(*a) {
                    let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                    let (_, len) = node.value.dims2().unwrap();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    out.push((*a, ga));
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p.0].value.dims2().unwrap();
                    if ng(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        out.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::Rope { a, cos, sin } => {
                if ng(*a) {
                    let (t, d) = node.value.dims2().unwrap();
                    let half = d / 2;
                    let mut ga = vec![0.0; t * d];
                    for pos in 0..t {
                        for i in 0..half {
                            let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                            let g0 = g[pos * d + 2 * i];
                            let g1 = g[pos * d + 2 * i + 1];
                            ga[pos * d + 2 * i] = g0 * c + g1 * s;
                            ga[pos * d + 2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                    out.push((*a, ga));
                }
            }
            Op::Sum(a) => {
                if ng(*a) {
                    out.push((*a, vec![g[0]; self.nodes[a.0].value.numel()]));
                }
            }
        }
        out
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(ledger) = &self.ledger {
            ledger.borrow_mut().release(Category::Activations, self.registered);
        }
    }
}

fn reduce_like(g: &[f64], n: usize) -> Vec<f64> {
    if n == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Analytic versus numeric gradient of a scalar function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i|`.
    pub max_abs_err: f64,
    /// `max_i max(|analytic_i|, |numeric_i|)`.
    pub scale: f64,
    /// `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8)`.
    pub elementwise: f64,
}

impl GradCheck {
    /// Error relative to the largest gradient component.
    pub fn relative(&self) -> f64 {
        self.max_abs_err / self.scale.max(1e-8)
    }
}

/// Central differences with step `h` against the tape gradient of `f` at
/// `x`, in double precision regardless of `x`'s tag.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = x.cast(DType::Double);
    let mut tape = Tape::new(DType::Double);
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape(), DType::Double));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new(DType::Double);
        let v = tape.leaf(t, false);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).data()[0])
    };

    let mut out = GradCheck {
        max_abs_err: 0.0,
        scale: 0.0,
        elementwise: 0.0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = libm::fabs(a - numeric);
        out.max_abs_err = out.max_abs_err.max(err);
        out.scale = out.scale.max(libm::fabs(a)).max(libm::fabs(numeric));
        out.elementwise = out.elementwise.max(err / (libm::fabs(a) + 1e-8));
    }
    Ok(out)
}

/// [`grad_check`] reduced to [`GradCheck::relative`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(grad_check(f, x, h)?.relative())
}
