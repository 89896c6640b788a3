//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; node order is a
//! topological order, so [`Tape::backward`] is a single reverse sweep
//! that visits each node once. Only the operations the segmentation
//! networks need are provided, several of them fused (linear layers,
//! batch normalization, the reparameterized weight sample, the Gaussian
//! KL term) to keep per-block memory bounded.
//!
//! Leaves created with [`Tape::param`] receive gradients; their
//! gradient slots accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`]. A tape built with [`Tape::no_grad`] records no
//! backward information at all.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Real, Tensor};
use crate::varbayes;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch normalization:
/// biased mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatLinear {
        local: Var,
        global: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LeakyRelu(Var, T),
    LogSoftmax(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    MaxOverPoints {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    BroadcastPoints(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Reparam {
        mu: Var,
        tau: Var,
        eps: Vec<T>,
    },
    GaussianKl {
        mu: Var,
        tau: Var,
        sigma_p: T,
        floor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape for inference: parameters are recorded as constants and no
    /// backward state is kept.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a parameter leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        // Without a gradient path the saved backward state is dead weight.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    // ---------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------

    /// `a[r×k] · b[k×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); r * c];
        gemm(
            r,
            k,
            c,
            (self.value(a).data(), k, 1),
            (self.value(b).data(), c, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Per-batch product `a[B×N×k] · b[B×k×c] → [B×N×c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bs, n, k, c) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * n * c];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                n,
                k,
                c,
                (&ad[i * n * k..], k, 1),
                (&bd[i * k * c..], c, 1),
                &mut out[i * n * c..(i + 1) * n * c],
                false,
            );
        }
        let value = Tensor::new(&[bs, n, c], out)?;
        Ok(self.push(value, Op::BatchedMatMul(a, b), &[a, b]))
    }

    /// Shared per-row affine map: `x[..., i] · w[i×j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let cin = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != cin {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let cout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(
            rows,
            cin,
            cout,
            (self.value(x).data(), cin, 1),
            (self.value(w).data(), cout, 1),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// `linear(concat(local, broadcast(global)), w, b)` without
    /// materializing the concatenation: the global rows of `w` are applied
    /// once per cloud instead of once per point.
    pub fn concat_linear(&mut self, local: Var, global: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sl, sg, sw) = (
            self.shape(local).to_vec(),
            self.shape(global).to_vec(),
            self.shape(w).to_vec(),
        );
        if sl.len() != 3 || sg.len() != 2 || sl[0] != sg[0] {
            return Err(Error::shape("concat_linear", &sl, &sg));
        }
        let (bs, n, cl, cg) = (sl[0], sl[1], sl[2], sg[1]);
        if sw.len() != 2 || sw[0] != cl + cg {
            return Err(Error::shape("concat_linear weight", &sw, &[cl + cg]));
        }
        let cout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("concat_linear bias", self.shape(b), &[cout]));
            }
        }
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); bs * n * cout];
        gemm(
            bs * n,
            cl,
            cout,
            (self.value(local).data(), cl, 1),
            (&wd[..cl * cout], cout, 1),
            &mut out,
            false,
        );
        let mut per_cloud = vec![T::zero(); bs * cout];
        gemm(
            bs,
            cg,
            cout,
            (self.value(global).data(), cg, 1),
            (&wd[cl * cout..], cout, 1),
            &mut per_cloud,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in per_cloud.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        for (i, block) in out.chunks_exact_mut(n * cout).enumerate() {
            let add = &per_cloud[i * cout..(i + 1) * cout];
            for row in block.chunks_exact_mut(cout) {
                for (o, &a) in row.iter_mut().zip(add) {
                    *o = *o + a;
                }
            }
        }
        let value = Tensor::new(&[bs, n, cout], out)?;
        let mut parents = vec![local, global, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConcatLinear { local, global, w, b }, &parents))
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).unwrap()
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[mask.len()]));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::MulConst(a, mask), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.unary(a, T::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// `ln(1 + e^x)`, returning `x` itself above 30.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.unary(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// `max(x, slope·x)`. The derivative at exactly zero is taken to be `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(Error::Contract(format!("leaky_relu slope {slope} outside [0, 1)")));
        }
        let v = self.unary(a, |x| if x > T::zero() { x } else { x * slope });
        Ok(self.push(v, Op::LeakyRelu(a, slope), &[a]))
    }

    // ---------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Log-softmax over the trailing axis, max-subtracted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, m) = t.rows_cols();
        if m < 2 {
            return Err(Error::Contract(format!(
                "log_softmax needs at least 2 classes, got {m}"
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(m) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    /// Mean negative log-likelihood of `labels` under per-row log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        let (rows, m) = t.rows_cols();
        if labels.len() != rows {
            return Err(Error::shape("nll", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange { label: bad, classes: m });
        }
        let d = t.data();
        let s: T = labels.iter().enumerate().map(|(i, &l)| d[i * m + l]).sum();
        let v = Tensor::scalar(-s / T::lit(rows as f64));
        Ok(self.push(
            v,
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            &[logp],
        ))
    }

    /// Per-channel maximum over the point axis of `x[B×N×C]`. Ties resolve
    /// to the lowest point index. Also returns the flat argmax point index
    /// for every `(batch, channel)`.
    pub fn max_over_points(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("max_over_points", s, &[0, 0, 0]));
        }
        let (bs, n, c) = (s[0], s[1], s[2]);
        let d = t.data();
        let mut out = vec![T::zero(); bs * c];
        let mut arg = vec![0usize; bs * c];
        for b in 0..bs {
            let o = &mut out[b * c..(b + 1) * c];
            let a = &mut arg[b * c..(b + 1) * c];
            o.copy_from_slice(&d[b * n * c..b * n * c + c]);
            for p in 1..n {
                let row = &d[(b * n + p) * c..(b * n + p + 1) * c];
                for ch in 0..c {
                    if row[ch] > o[ch] {
                        o[ch] = row[ch];
                        a[ch] = p;
                    }
                }
            }
        }
        let v = Tensor::new(&[bs, c], out)?;
        let var = self.push(v, Op::MaxOverPoints { x, argmax: arg.clone() }, &[x]);
        Ok((var, arg))
    }

    // ---------------------------------------------------------------
    // Shape manipulation
    // ---------------------------------------------------------------

    /// Concatenates along the trailing (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).numel() / ca;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Repeats `g[B×C]` for `n` points: `[B×n×C]`.
    pub fn broadcast_points(&mut self, g: Var, n: usize) -> Result<Var> {
        let s = self.shape(g).to_vec();
        if s.len() != 2 || n == 0 {
            return Err(Error::shape("broadcast_points", &s, &[n]));
        }
        let (bs, c) = (s[0], s[1]);
        let d = self.value(g).data();
        let mut out = Vec::with_capacity(bs * n * c);
        for b in 0..bs {
            for _ in 0..n {
                out.extend_from_slice(&d[b * c..(b + 1) * c]);
            }
        }
        let v = Tensor::new(&[bs, n, c], out)?;
        Ok(self.push(v, Op::BroadcastPoints(g), &[g]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    // ---------------------------------------------------------------
    // Fused network operations
    // ---------------------------------------------------------------

    /// Batch normalization over all rows of `x[..., C]`.
    ///
    /// With `running = None` the batch's own statistics are used and
    /// returned; otherwise the supplied `(mean, var)` are applied as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let t = self.value(x);
        let (rows, c) = t.rows_cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", t.shape(), self.shape(gamma)));
        }
        let d = t.data();
        let (mean, inv_std, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[rm.len()]));
                }
                let inv: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (rm.to_vec(), inv, None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                for row in d.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let nr = T::lit(rows as f64);
                mean.iter_mut().for_each(|m| *m = *m / nr);
                let mut var = vec![T::zero(); c];
                for row in d.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let dv = v - m;
                        *s = *s + dv * dv;
                    }
                }
                let inv: Vec<T> = var.iter().map(|&s| T::one() / (s / nr + eps).sqrt()).collect();
                let denom = T::lit(rows.max(2) as f64 - 1.0);
                let unbiased = var.iter().map(|&s| s / denom).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv, Some(stats))
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = d.to_vec();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = g[j] * (row[j] - mean[j]) * inv_std[j] + bt[j];
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch: running.is_none(),
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Reparameterized multiplicative-Gaussian sample `mu ⊙ (1 + tau·eps)`,
    /// with a scalar `tau` and externally drawn standard-normal `eps`.
    pub fn reparam(&mut self, mu: Var, tau: Var, eps: Vec<T>) -> Result<Var> {
        if self.shape(tau) != [1] {
            return Err(Error::shape("reparam tau", self.shape(tau), &[1]));
        }
        if eps.len() != self.value(mu).numel() {
            return Err(Error::shape("reparam eps", self.shape(mu), &[eps.len()]));
        }
        let tv = self.value(tau).item();
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(&eps)
            .map(|(&m, &e)| m * (T::one() + tv * e))
            .collect();
        let v = Tensor::new(self.shape(mu), data)?;
        Ok(self.push(v, Op::Reparam { mu, tau, eps }, &[mu, tau]))
    }

    /// Analytic `KL(N(mu, diag((tau·|mu|)²)) ‖ N(0, sigma_p² I))` with the
    /// per-coordinate standard deviation floored at `floor`.
    pub fn gaussian_kl(&mut self, mu: Var, tau: Var, sigma_p: T, floor: T) -> Result<Var> {
        if self.shape(tau) != [1] {
            return Err(Error::shape("gaussian_kl tau", self.shape(tau), &[1]));
        }
        let kl = varbayes::kl_mean_scaled(
            self.value(mu).data(),
            self.value(tau).item().as_f64(),
            sigma_p.as_f64(),
            floor.as_f64(),
        );
        let v = Tensor::scalar(T::lit(kl));
        Ok(self.push(
            v,
            Op::GaussianKl {
                mu,
                tau,
                sigma_p,
                floor,
            },
            &[mu, tau],
        ))
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable parameter leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaves.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaves {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a = *a + *v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let ga = slot(grads, *a, r * k);
                    gemm(r, c, k, (g, c, 1), (self.value(*b).data(), 1, c), ga, true);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * c);
                    gemm(k, r, c, (self.value(*a).data(), 1, k), (g, c, 1), gb, true);
                }
            }
            Op::BatchedMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, n, k, c) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, bs * n * k);
                    for s in 0..bs {
                        gemm(
                            n,
                            c,
                            k,
                            (&g[s * n * c..], c, 1),
                            (&bd[s * k * c..], 1, c),
                            &mut ga[s * n * k..(s + 1) * n * k],
                            true,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, bs * k * c);
                    for s in 0..bs {
                        gemm(
                            k,
                            n,
                            c,
                            (&ad[s * n * k..], 1, k),
                            (&g[s * n * c..], c, 1),
                            &mut gb[s * k * c..(s + 1) * k * c],
                            true,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (cin, cout) = (sw[0], sw[1]);
                let rows = self.numel(*x) / cin;
                if self.wants(*x) {
                    let gx = slot(grads, *x, rows * cin);
                    gemm(
                        rows,
                        cout,
                        cin,
                        (g, cout, 1),
                        (self.value(*w).data(), 1, cout),
                        gx,
                        true,
                    );
                }
                if self.wants(*w) {
                    let gw = slot(grads, *w, cin * cout);
                    gemm(cin, rows, cout, (self.value(*x).data(), 1, cin), (g, cout, 1), gw, true);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = slot(grads, *b, cout);
                        for row in g.chunks_exact(cout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    }
                }
            }
            Op::ConcatLinear { local, global, w, b } => {
                let sl = self.shape(*local);
                let (bs, n, cl) = (sl[0], sl[1], sl[2]);
                let cg = self.shape(*global)[1];
                let cout = self.shape(*w)[1];
                let wd = self.value(*w).data();
                // Per-cloud sums of the output gradient feed the global branch.
                let mut gsum = vec![T::zero(); bs * cout];
                for s in 0..bs {
                    let acc = &mut gsum[s * cout..(s + 1) * cout];
                    for row in g[s * n * cout..(s + 1) * n * cout].chunks_exact(cout) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                }
                if self.wants(*local) {
                    let gl = slot(grads, *local, bs * n * cl);
                    gemm(bs * n, cout, cl, (g, cout, 1), (&wd[..cl * cout], 1, cout), gl, true);
                }
                if self.wants(*global) {
                    let gg = slot(grads, *global, bs * cg);
                    gemm(bs, cout, cg, (&gsum, cout, 1), (&wd[cl * cout..], 1, cout), gg, true);
                }
                if self.wants(*w) {
                    let gw = slot(grads, *w, (cl + cg) * cout);
                    let (top, bottom) = gw.split_at_mut(cl * cout);
                    gemm(
                        cl,
                        bs * n,
                        cout,
                        (self.value(*local).data(), 1, cl),
                        (g, cout, 1),
                        top,
                        true,
                    );
                    gemm(
                        cg,
                        bs,
                        cout,
                        (self.value(*global).data(), 1, cg),
                        (&gsum, cout, 1),
                        bottom,
                        true,
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = slot(grads, *b, cout);
                        for row in gsum.chunks_exact(cout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.wants(v) {
                        let gv = slot(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.wants(v) {
                        let gv = slot(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let od = self.value(other).data();
                        let gv = slot(grads, v, g.len());
                        for ((x, &y), &o) in gv.iter_mut().zip(g).zip(od) {
                            *x = *x + y * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let gv = slot(grads, *a, g.len());
                gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + *c * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let gv = slot(grads, *a, g.len());
                gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            Op::MulConst(a, mask) => {
                let gv = slot(grads, *a, g.len());
                for ((x, &y), &m) in gv.iter_mut().zip(g).zip(mask) {
                    *x = *x + y * m;
                }
            }
            Op::Sum(a) => {
                let n = self.numel(*a);
                let gv = slot(grads, *a, n);
                gv.iter_mut().for_each(|x| *x = *x + g[0]);
            }
            Op::Mean(a) => {
                let n = self.numel(*a);
                let s = g[0] / T::lit(n as f64);
                let gv = slot(grads, *a, n);
                gv.iter_mut().for_each(|x| *x = *x + s);
            }
            Op::SumSquares(a) => {
                let ad = self.value(*a).data();
                let gv = slot(grads, *a, ad.len());
                let two = T::lit(2.0);
                for (x, &v) in gv.iter_mut().zip(ad) {
                    *x = *x + two * v * g[0];
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let gv = slot(grads, *a, g.len());
                for ((x, &y), &o) in gv.iter_mut().zip(g).zip(out) {
                    *x = *x + y * o;
                }
            }
            Op::Log(a) => {
                let ad = self.value(*a).data();
                let gv = slot(grads, *a, g.len());
                for ((x, &y), &v) in gv.iter_mut().zip(g).zip(ad) {
                    *x = *x + y / v;
                }
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                let gv = slot(grads, *a, g.len());
                for ((x, &y), &v) in gv.iter_mut().zip(g).zip(ad) {
                    *x = *x + y * sigmoid(v);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let out = node.value.data();
                let gv = slot(grads, *a, g.len());
                for ((x, &y), &o) in gv.iter_mut().zip(g).zip(out) {
                    let d = if o > T::zero() { T::one() } else { *slope };
                    *x = *x + y * d;
                }
            }
            Op::LogSoftmax(a) => {
                let (_, m) = node.value.rows_cols();
                let out = node.value.data();
                let gv = slot(grads, *a, g.len());
                for ((gx, gy), o) in gv.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(out.chunks_exact(m)) {
                    let s: T = gy.iter().copied().sum();
                    for j in 0..m {
                        gx[j] = gx[j] + gy[j] - o[j].exp() * s;
                    }
                }
            }
            Op::Nll { logp, labels } => {
                let (rows, m) = self.value(*logp).rows_cols();
                let s = -g[0] / T::lit(rows as f64);
                let gv = slot(grads, *logp, rows * m);
                for (r, &l) in labels.iter().enumerate() {
                    gv[r * m + l] = gv[r * m + l] + s;
                }
            }
            Op::MaxOverPoints { x, argmax } => {
                let s = self.shape(*x);
                let (n, c) = (s[1], s[2]);
                let gv = slot(grads, *x, self.numel(*x));
                for (bc, (&p, &y)) in argmax.iter().zip(g).enumerate() {
                    let (b, ch) = (bc / c, bc % c);
                    let idx = (b * n + p) * c + ch;
                    gv[idx] = gv[idx] + y;
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = g.len() / (ca + cb);
                if self.wants(*a) {
                    let gv = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        for j in 0..ca {
                            gv[r * ca + j] = gv[r * ca + j] + g[r * (ca + cb) + j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gv = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            gv[r * cb + j] = gv[r * cb + j] + g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::BroadcastPoints(a) => {
                let s = node.value.shape();
                let (bs, n, c) = (s[0], s[1], s[2]);
                let gv = slot(grads, *a, bs * c);
                for b in 0..bs {
                    for p in 0..n {
                        let row = &g[(b * n + p) * c..(b * n + p + 1) * c];
                        for (x, &y) in gv[b * c..(b + 1) * c].iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            } => {
                let xd = self.value(*x).data();
                let c = mean.len();
                let rows = xd.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (row, grow) in xd.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for j in 0..c {
                        let xh = (row[j] - mean[j]) * inv_std[j];
                        sum_g[j] = sum_g[j] + grow[j];
                        sum_gx[j] = sum_gx[j] + grow[j] * xh;
                    }
                }
                if self.wants(*gamma) {
                    let gv = slot(grads, *gamma, c);
                    gv.iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a = *a + v);
                }
                if self.wants(*beta) {
                    let gv = slot(grads, *beta, c);
                    gv.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a = *a + v);
                }
                if self.wants(*x) {
                    let gv = slot(grads, *x, xd.len());
                    if *batch {
                        let nr = T::lit(rows as f64);
                        let k: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j] / nr).collect();
                        for ((gx, row), grow) in gv.chunks_exact_mut(c).zip(xd.chunks_exact(c)).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                let xh = (row[j] - mean[j]) * inv_std[j];
                                gx[j] = gx[j] + k[j] * (nr * grow[j] - sum_g[j] - xh * sum_gx[j]);
                            }
                        }
                    } else {
                        let k: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j]).collect();
                        for (gx, grow) in gv.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                gx[j] = gx[j] + k[j] * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Reparam { mu, tau, eps } => {
                let tv = self.value(*tau).item();
                if self.wants(*mu) {
                    let gv = slot(grads, *mu, g.len());
                    for ((x, &y), &e) in gv.iter_mut().zip(g).zip(eps) {
                        *x = *x + y * (T::one() + tv * e);
                    }
                }
                if self.wants(*tau) {
                    let md = self.value(*mu).data();
                    let s: T = g.iter().zip(md).zip(eps).map(|((&y, &m), &e)| y * m * e).sum();
                    let gv = slot(grads, *tau, 1);
                    gv[0] = gv[0] + s;
                }
            }
            Op::GaussianKl {
                mu,
                tau,
                sigma_p,
                floor,
            } => {
                let md = self.value(*mu).data();
                let tv = self.value(*tau).item();
                let inv_var_p = T::one() / (*sigma_p * *sigma_p);
                let tau2 = tv * tv;
                let g0 = g[0];
                let mut dtau = T::zero();
                let wants_mu = self.wants(*mu);
                let mut gmu = if wants_mu {
                    Some(slot(grads, *mu, md.len()))
                } else {
                    None
                };
                for (j, &m) in md.iter().enumerate() {
                    let floored = tv * m.abs() <= *floor;
                    let d_mu = if floored {
                        m * inv_var_p
                    } else {
                        dtau = dtau - T::one() / tv + tv * m * m * inv_var_p;
                        -T::one() / m + (tau2 + T::one()) * m * inv_var_p
                    };
                    if let Some(gm) = gmu.as_deref_mut() {
                        gm[j] = gm[j] + g0 * d_mu;
                    }
                }
                if self.wants(*tau) {
                    let gv = slot(grads, *tau, 1);
                    gv[0] = gv[0] + g0 * dtau;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let ai = tape.matmul(a, i).unwrap();
        let ap = tape.matmul(a, p).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(ap).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[2.0, -1.0, -3.0]));
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data()[0], 2.0);
        assert!((tape.value(y).data()[1] + 0.01).abs() < 1e-15);
        let r = tape.leaky_relu(x, 0.0).unwrap();
        assert_eq!(tape.value(r).data()[2], 0.0);
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_gradient_at_zero_is_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[0.0, 1.0]));
        let y = tape.leaky_relu(x, 0.25).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25, 1.0]);
    }

    #[test]
    fn log_softmax_uniform_shift_and_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-12);
        }
        let big = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let yb = tape.log_softmax(big).unwrap();
        let d = tape.value(yb).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[0].abs() < 1e-12 && (d[1] + 1000.0).abs() < 1e-9);

        let v = [0.3, -1.2, 2.5, 0.7];
        let w: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        let a = tape.constant(t(&[1, 4], &v));
        let b = tape.constant(t(&[1, 4], &w));
        let la = tape.log_softmax(a).unwrap();
        let lb = tape.log_softmax(b).unwrap();
        for (p, q) in tape.value(la).data().iter().zip(tape.value(lb).data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert_eq!(tape.log_softmax(x).unwrap_err(), Error::NonFinite("log_softmax input"));
    }

    #[test]
    fn max_over_points_values_ties_and_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let (m, arg) = tape.max_over_points(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        let y = tape.constant(t(&[1, 3, 1], &[4.0, 4.0, 4.0]));
        let (_, arg) = tape.max_over_points(y).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn max_over_points_single_point_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let (m, _) = tape.max_over_points(x).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 1.0));

        tape.zero_grad();
        let sq = tape.sum_squares(w);
        let half = tape.scale(sq, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), tape.value(w).data());
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_tape_records_no_gradients() {
        let mut tape = Tape::<f64>::no_grad();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(w);
        assert!(!tape.requires_grad(s));
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn concat_linear_matches_explicit_concat() {
        let mut tape = Tape::<f64>::new();
        let local = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.37).sin()));
        let global = tape.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.91).cos()));
        let w = tape.constant(Tensor::from_fn(&[6, 5], |i| (i as f64 * 0.13).sin()));
        let b = tape.constant(Tensor::from_fn(&[5], |i| i as f64));
        let fused = tape.concat_linear(local, global, w, Some(b)).unwrap();
        let bc = tape.broadcast_points(global, 3).unwrap();
        let cat = tape.concat_channels(local, bc).unwrap();
        let plain = tape.linear(cat, w, Some(b)).unwrap();
        for (p, q) in tape.value(fused).data().iter().zip(tape.value(plain).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn reparam_with_zero_noise_is_mean() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let tau = tape.param(t(&[1], &[0.3]));
        let w = tape.reparam(mu, tau, vec![0.0; 3]).unwrap();
        assert_eq!(tape.value(w).data(), tape.value(mu).data());
    }
}
