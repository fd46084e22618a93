//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed when
//! the node is created, and [`Graph::backward`] replays the tape in reverse. Nodes
//! are stored in creation order, which is a valid topological order, so the graph
//! is acyclic by construction.
//!
//! Shape mismatches inside individual ops are programming errors and panic. The
//! fallible entry points (`backward`, loss builders elsewhere in the crate) report
//! contract violations through [`crate::Error`].

use super::optim::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    },
    MeanTime(Var),
    SumAll(Var),
    MeanAll(Var),
    ColMean(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        a: Var,
        target: Vec<T>,
    },
    SupCon(Box<SupConCache>),
}

struct SupConCache {
    z: Var,
    tau: f64,
    units: Vec<f64>,
    norms: Vec<f64>,
    /// Row-wise softmax over `a != i`, flattened `n x n` (diagonal zero).
    probs: Vec<f64>,
    /// Per-anchor positive weight `1/|P(i)|`, zero for skipped anchors.
    pos_weight: Vec<f64>,
    labels: Vec<usize>,
    contributing: usize,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Reshape(..) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanTime(..) => "mean_time",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::ColMean(..) => "col_mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::SupCon(..) => "supcon",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    first_nonfinite: Option<usize>,
    supcon_degenerate: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`]; only leaf nodes are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf created by `input_tracked` or `param`.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store`, aligned with its order.
    /// Parameters that did not take part in the loss receive zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = out[id.0].data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
        }
        out
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_nonfinite: None,
            supcon_degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Which side of its kink every ReLU and clamp input lies on. Two
    /// evaluations with equal patterns share one smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|&v| (v > T::zero()) as i8)),
                Op::Clamp(x, lo, hi) => out.extend(
                    self.value(x)
                        .data()
                        .iter()
                        .map(|&v| if v < lo { -1 } else if v > hi { 1 } else { 0 }),
                ),
                _ => {}
            }
        }
        out
    }

    /// Whether a contrastive node in this graph had no contributing anchors.
    pub fn supcon_degenerate(&self) -> bool {
        self.supcon_degenerate
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is retained by `backward`.
    pub fn input_tracked(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a).shape());
        let (k2, n) = dims2(self.value(b).shape());
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// Adds a bias row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape().last().copied().unwrap_or(1);
        assert_eq!(self.value(b).len(), n, "bias length mismatch");
        let bd = self.value(b).data();
        let data: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), Op::AddBias(x, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Scales row `i` of `x` (`m x n`) by `c[i]` (`c` has `m` elements).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (m, n) = dims2(self.value(x).shape());
        assert_eq!(self.value(c).len(), m, "mul_col length mismatch");
        let cd = self.value(c).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cd[i / n])
            .collect();
        let ng = self.ng(x) || self.ng(c);
        self.push(Tensor::from_vec(&[m, n], data), Op::MulCol(x, c), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + s).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), Op::AddScalar(x), ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.map(x, move |v| v.max(l).min(h), Op::Clamp(x, l, h))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Valid (unpadded) 1-D convolution over channels-last input.
    ///
    /// `x` is `[batch, length, c_in]`, `w` is `[kernel * c_in, c_out]` with the tap
    /// index major, `b` is `[c_out]`. Output is `[batch, l_out, c_out]` with
    /// `l_out = (length - kernel) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv1d expects [batch, length, channels]");
        let (batch, len, cin) = (xs[0], xs[1], xs[2]);
        let (kc, cout) = dims2(self.value(w).shape());
        assert_eq!(kc, kernel * cin, "conv1d weight shape mismatch");
        assert!(len >= kernel && stride > 0, "conv1d input too short");
        assert_eq!(self.value(b).len(), cout);
        let lout = (len - kernel) / stride + 1;
        let mut out = vec![T::zero(); batch * lout * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for bi in 0..batch {
            let xb = &xd[bi * len * cin..(bi + 1) * len * cin];
            let ob = &mut out[bi * lout * cout..(bi + 1) * lout * cout];
            T::gemm(
                lout,
                kc,
                cout,
                T::one(),
                xb,
                stride * cin,
                1,
                wd,
                cout,
                1,
                T::one(),
                ob,
                cout,
                1,
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::from_vec(&[batch, lout, cout], out),
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            },
            ng,
        )
    }

    /// Mean over the middle (time) axis of a `[batch, length, channels]` tensor.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "mean_time expects a rank-3 tensor");
        let (b, l, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for t in 0..l {
                    acc += xd[(bi * l + t) * c + ci].as_f64();
                }
                out.push(T::from_f64_lossy(acc / l as f64));
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[b, c], out), Op::MeanTime(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(!xv.is_empty(), "mean of an empty tensor");
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::MeanAll(x), ng)
    }

    /// Column means of an `m x n` matrix, shape `[n]`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.value(x).shape());
        let xd = self.value(x).data();
        let out = (0..n)
            .map(|j| {
                let s: f64 = (0..m).map(|i| xd[i * n + j].as_f64()).sum();
                T::from_f64_lossy(s / m as f64)
            })
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n], out), Op::ColMean(x), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = dims2(self.value(a).shape());
        let (m2, nb) = dims2(self.value(b).shape());
        assert_eq!(m, m2, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, na + nb], out), Op::ConcatCols(a, b), ng)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (m, n) = dims2(self.value(x).shape());
        assert!(start + width <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.value(x).row(i)[start..start + width]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[m, width], out), Op::SliceCols(x, start), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.value(x).shape());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax_f64(self.value(x).row(i)).into_iter().map(T::from_f64_lossy));
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[m, n], out), Op::SoftmaxRows(x), ng)
    }

    /// Mean cross-entropy of integer labels under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (m, k) = dims2(self.value(logits).shape());
        assert_eq!(labels.len(), m, "label count mismatch");
        let mut probs = Vec::with_capacity(m * k);
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = self.value(logits).row(i);
            let p = softmax_f64(row);
            let lse = log_sum_exp(row);
            loss += lse - row[y].as_f64();
            probs.extend(p);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(T::from_f64_lossy(loss / m as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target, averaged over all elements.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len(), "mse size mismatch");
        assert!(!av.is_empty(), "mse of empty tensors");
        let s: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let v = s / av.len() as f64;
        let ng = self.ng(a);
        self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::Mse {
                a,
                target: target.data().to_vec(),
            },
            ng,
        )
    }

    /// Supervised contrastive loss over L2-normalized rows of `z`.
    ///
    /// Anchors without a positive are skipped; if every anchor is skipped the loss
    /// is zero and [`Graph::supcon_degenerate`] reports it.
    pub fn supcon(&mut self, z: Var, labels: &[usize], tau: f64) -> Var {
        let (n, d) = dims2(self.value(z).shape());
        assert_eq!(labels.len(), n, "label count mismatch");
        assert!(tau > 0.0, "temperature must be positive");
        let zd = self.value(z).data();
        let mut norms = vec![0.0f64; n];
        let mut units = vec![0.0f64; n * d];
        for i in 0..n {
            let row = &zd[i * d..(i + 1) * d];
            let nr = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            norms[i] = nr;
            let denom = nr.max(1e-12);
            for j in 0..d {
                units[i * d + j] = row[j].as_f64() / denom;
            }
        }
        let sim = |i: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..d {
                s += units[i * d + k] * units[j * d + k];
            }
            s / tau
        };
        let mut probs = vec![0.0f64; n * n];
        let mut pos_weight = vec![0.0f64; n];
        let mut total = 0.0f64;
        let mut contributing = 0usize;
        for i in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let s: Vec<f64> = (0..n).map(|a| if a == i { 0.0 } else { sim(i, a) }).collect();
            let mx = (0..n)
                .filter(|&a| a != i)
                .map(|a| s[a])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (s[a] - mx).exp()).sum();
            let lse = mx + denom.ln();
            for a in 0..n {
                if a != i {
                    probs[i * n + a] = (s[a] - mx).exp() / denom;
                }
            }
            let mean_pos = positives.iter().map(|&p| s[p]).sum::<f64>() / positives.len() as f64;
            total += lse - mean_pos;
            pos_weight[i] = 1.0 / positives.len() as f64;
            contributing += 1;
        }
        let loss = if contributing == 0 {
            self.supcon_degenerate = true;
            0.0
        } else {
            total / contributing as f64
        };
        let ng = self.ng(z);
        self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SupCon(Box::new(SupConCache {
                z,
                tau,
                units,
                norms,
                probs,
                pos_weight,
                labels: labels.to_vec(),
                contributing,
            })),
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(idx) = self.first_nonfinite {
            if idx <= loss.0 {
                return Err(Error::Numeric {
                    node: format!("#{idx} ({})", self.nodes[idx].op.name()),
                });
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => continue,
                Op::Param(id) => {
                    params.push((i, id));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: format!("#{i} ({}) gradient", node.op.name()),
                });
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a).shape());
                let n = val(*b).shape()[1];
                if want(*a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    // dA = dC @ B^T
                    T::gemm(m, n, k, T::one(), g, n, 1, val(*b).data(), 1, n, T::one(), ga, k, 1);
                }
                if want(*b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    // dB = A^T @ dC
                    T::gemm(k, m, n, T::one(), val(*a).data(), 1, k, g, n, 1, T::one(), gb, n, 1);
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d = *d + *s;
                    }
                }
                if want(*b) {
                    let n = val(*b).len();
                    let mut sums = vec![0.0f64; n];
                    for (j, v) in g.iter().enumerate() {
                        sums[j % n] += v.as_f64();
                    }
                    let gb = acc(&mut grads[b.0], n);
                    for (d, s) in gb.iter_mut().zip(sums) {
                        *d = *d + T::from_f64_lossy(s);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if want(*a) {
                    let ga = acc(&mut grads[a.0], g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d = *d + *s;
                    }
                }
                if want(*b) {
                    let gb = acc(&mut grads[b.0], g.len());
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d = *d + sign * *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = val(*b).data().to_vec();
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + *s * y;
                    }
                }
                if want(*b) {
                    let av = val(*a).data().to_vec();
                    let gb = acc(&mut grads[b.0], g.len());
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + *s * x;
                    }
                }
            }
            Op::MulCol(x, c) => {
                let (m, n) = dims2(val(*x).shape());
                if want(*x) {
                    let cd = val(*c).data();
                    let gx = acc(&mut grads[x.0], m * n);
                    for (idx, d) in gx.iter_mut().enumerate() {
                        *d = *d + g[idx] * cd[idx / n];
                    }
                }
                if want(*c) {
                    let xd = val(*x).data();
                    let sums: Vec<f64> = (0..m)
                        .map(|r| (0..n).map(|j| (g[r * n + j] * xd[r * n + j]).as_f64()).sum())
                        .collect();
                    let gc = acc(&mut grads[c.0], m);
                    for (d, s) in gc.iter_mut().zip(sums) {
                        *d = *d + T::from_f64_lossy(s);
                    }
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d = *d + *v * *s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if want(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d = *d + *v;
                    }
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xd = val(*x).data().to_vec();
                    let gx = acc(&mut grads[x.0], g.len());
                    for ((d, v), xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi > T::zero() {
                            *d = *d + *v;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for ((d, v), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + *v * *yi;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if want(*x) {
                    let xd = val(*x).data().to_vec();
                    let gx = acc(&mut grads[x.0], g.len());
                    for ((d, v), xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi >= *lo && xi <= *hi {
                            *d = *d + *v;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            } => {
                let xs = val(*x).shape();
                let (batch, len, cin) = (xs[0], xs[1], xs[2]);
                let cout = val(*w).shape()[1];
                let kc = kernel * cin;
                let lout = (len - kernel) / stride + 1;
                if want(*b) {
                    let mut sums = vec![0.0f64; cout];
                    for (j, v) in g.iter().enumerate() {
                        sums[j % cout] += v.as_f64();
                    }
                    let gb = acc(&mut grads[b.0], cout);
                    for (d, s) in gb.iter_mut().zip(sums) {
                        *d = *d + T::from_f64_lossy(s);
                    }
                }
                if want(*w) {
                    let xd = val(*x).data();
                    let gw = acc(&mut grads[w.0], kc * cout);
                    for bi in 0..batch {
                        let xb = &xd[bi * len * cin..(bi + 1) * len * cin];
                        let gb = &g[bi * lout * cout..(bi + 1) * lout * cout];
                        T::gemm(
                            kc,
                            lout,
                            cout,
                            T::one(),
                            xb,
                            1,
                            stride * cin,
                            gb,
                            cout,
                            1,
                            T::one(),
                            gw,
                            cout,
                            1,
                        );
                    }
                }
                if want(*x) {
                    let wd = val(*w).data();
                    let mut cols = vec![T::zero(); lout * kc];
                    let gx = acc(&mut grads[x.0], batch * len * cin);
                    for bi in 0..batch {
                        let gb = &g[bi * lout * cout..(bi + 1) * lout * cout];
                        T::gemm(
                            lout,
                            cout,
                            kc,
                            T::one(),
                            gb,
                            cout,
                            1,
                            wd,
                            1,
                            cout,
                            T::zero(),
                            &mut cols,
                            kc,
                            1,
                        );
                        let base = bi * len * cin;
                        for t in 0..lout {
                            let off = base + t * stride * cin;
                            for j in 0..kc {
                                gx[off + j] = gx[off + j] + cols[t * kc + j];
                            }
                        }
                    }
                }
            }
            Op::MeanTime(x) => {
                if want(*x) {
                    let s = val(*x).shape();
                    let (b, l, c) = (s[0], s[1], s[2]);
                    let inv = T::from_f64_lossy(1.0 / l as f64);
                    let gx = acc(&mut grads[x.0], b * l * c);
                    for bi in 0..b {
                        for t in 0..l {
                            for ci in 0..c {
                                let idx = (bi * l + t) * c + ci;
                                gx[idx] = gx[idx] + g[bi * c + ci] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if want(*x) {
                    let n = val(*x).len();
                    let scale = if matches!(node.op, Op::MeanAll(_)) {
                        T::from_f64_lossy(1.0 / n as f64)
                    } else {
                        T::one()
                    };
                    let gv = g[0] * scale;
                    let gx = acc(&mut grads[x.0], n);
                    for d in gx.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::ColMean(x) => {
                if want(*x) {
                    let (m, n) = dims2(val(*x).shape());
                    let inv = T::from_f64_lossy(1.0 / m as f64);
                    let gx = acc(&mut grads[x.0], m * n);
                    for (idx, d) in gx.iter_mut().enumerate() {
                        *d = *d + g[idx % n] * inv;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = dims2(val(*a).shape());
                let nb = val(*b).shape()[1];
                if want(*a) {
                    let ga = acc(&mut grads[a.0], m * na);
                    for r in 0..m {
                        for j in 0..na {
                            ga[r * na + j] = ga[r * na + j] + g[r * (na + nb) + j];
                        }
                    }
                }
                if want(*b) {
                    let gb = acc(&mut grads[b.0], m * nb);
                    for r in 0..m {
                        for j in 0..nb {
                            gb[r * nb + j] = gb[r * nb + j] + g[r * (na + nb) + na + j];
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if want(*x) {
                    let (m, n) = dims2(val(*x).shape());
                    let width = node.value.shape()[1];
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        for j in 0..width {
                            gx[r * n + start + j] = gx[r * n + start + j] + g[r * width + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if want(*x) {
                    let (m, n) = dims2(node.value.shape());
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        let dot: f64 = (0..n)
                            .map(|j| (g[r * n + j] * y[r * n + j]).as_f64())
                            .sum();
                        let dot = T::from_f64_lossy(dot);
                        for j in 0..n {
                            let idx = r * n + j;
                            gx[idx] = gx[idx] + y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let (m, k) = dims2(val(*logits).shape());
                    let scale = g[0].as_f64() / m as f64;
                    let gl = acc(&mut grads[logits.0], m * k);
                    for r in 0..m {
                        for j in 0..k {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            let idx = r * k + j;
                            gl[idx] = gl[idx] + T::from_f64_lossy((probs[idx] - onehot) * scale);
                        }
                    }
                }
            }
            Op::Mse { a, target } => {
                if want(*a) {
                    let av = val(*a).data();
                    let scale = 2.0 * g[0].as_f64() / av.len() as f64;
                    let ga = acc(&mut grads[a.0], av.len());
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(target) {
                        *d = *d + T::from_f64_lossy((x.as_f64() - y.as_f64()) * scale);
                    }
                }
            }
            Op::SupCon(c) => {
                if want(c.z) && c.contributing > 0 {
                    let (n, d) = dims2(val(c.z).shape());
                    let scale = g[0].as_f64() / c.contributing as f64;
                    // G[i][a] = dL/ds_ia
                    let mut gs = vec![0.0f64; n * n];
                    for i in 0..n {
                        if c.pos_weight[i] == 0.0 {
                            continue;
                        }
                        for a in 0..n {
                            if a == i {
                                continue;
                            }
                            let pos = if c.labels[a] == c.labels[i] {
                                c.pos_weight[i]
                            } else {
                                0.0
                            };
                            gs[i * n + a] = scale * (c.probs[i * n + a] - pos);
                        }
                    }
                    let mut du = vec![0.0f64; n * d];
                    for i in 0..n {
                        for a in 0..n {
                            let w = (gs[i * n + a] + gs[a * n + i]) / c.tau;
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                du[i * d + k] += w * c.units[a * d + k];
                            }
                        }
                    }
                    let gz = acc(&mut grads[c.z.0], n * d);
                    for i in 0..n {
                        let u = &c.units[i * d..(i + 1) * d];
                        let dui = &du[i * d..(i + 1) * d];
                        let proj: f64 = u.iter().zip(dui).map(|(a, b)| a * b).sum();
                        let denom = c.norms[i].max(1e-12);
                        for k in 0..d {
                            let v = (dui[k] - u[k] * proj) / denom;
                            gz[i * d + k] = gz[i * d + k] + T::from_f64_lossy(v);
                        }
                    }
                }
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let mx = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax evaluated in `f64`.
pub fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let mx = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(&[values.len()], values.to_vec()));
        (s, id)
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let (s, id) = store_with(&[0.3, -1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let l = g.sum_all(p);
        let grads = g.backward(l).unwrap().for_store(&s);
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let (s, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let sq = g.square(p);
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap().for_store(&s);
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::from_vec(&[2], vec![1.0, 1.0]));
        s.insert("b", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]));
        let mut g = Graph::new();
        let p = g.param(&s, a);
        let l = g.sum_all(p);
        let grads = g.backward(l).unwrap().for_store(&s);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (s, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(&s, id);
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_names_the_offending_node() {
        let (s, id) = store_with(&[1000.0]);
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let e = g.exp(p);
        let e2 = g.exp(e);
        let l = g.sum_all(e2);
        match g.backward(l) {
            Err(Error::Numeric { node }) => assert!(node.contains("exp"), "{node}"),
            other => panic!("expected numeric failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn supcon_three_sample_example() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::from_vec(
            &[3, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        ));
        let l = g.supcon(z, &[0, 0, 1], 1.0);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!(!g.supcon_degenerate());
    }

    #[test]
    fn supcon_without_positives_is_degenerate_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.5, -0.2, 1.0]));
        let l = g.supcon(z, &[0, 1], 0.1);
        assert_eq!(g.scalar(l), 0.0);
        assert!(g.supcon_degenerate());
    }

    #[test]
    fn conv1d_matches_direct_evaluation() {
        let mut g = Graph::<f64>::new();
        let (len, cin, cout, k, stride) = (9, 2, 3, 3, 2);
        let xs: Vec<f64> = (0..len * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..k * cin * cout).map(|i| (i as f64 * 0.11).cos()).collect();
        let bs = vec![0.1, -0.2, 0.3];
        let x = g.input(Tensor::from_vec(&[1, len, cin], xs.clone()));
        let w = g.input(Tensor::from_vec(&[k * cin, cout], ws.clone()));
        let b = g.input(Tensor::from_vec(&[cout], bs.clone()));
        let y = g.conv1d(x, w, b, k, stride);
        let lout = (len - k) / stride + 1;
        assert_eq!(g.value(y).shape(), &[1, lout, cout]);
        for t in 0..lout {
            for o in 0..cout {
                let mut s = bs[o];
                for j in 0..k {
                    for c in 0..cin {
                        s += xs[(t * stride + j) * cin + c] * ws[(j * cin + c) * cout + o];
                    }
                }
                assert!((g.value(y).data()[t * cout + o] - s).abs() < 1e-12);
            }
        }
    }
}
