//! Wengert-list reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Every op carries its own
//! vector-Jacobian product; only the ops needed by the denoiser, the residual
//! head and the clustering losses are provided.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{DiecError, Result};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

const GN_EPS: f64 = 1e-5;
pub const Q_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One neighbor term of the graph-smoothness loss: weight and a cached,
/// gradient-free soft-assignment row for the neighbor.
#[derive(Clone, Debug)]
pub struct NeighborTerm<F> {
    pub weight: F,
    pub row: Vec<F>,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    WeightedSum(Vec<(Var, F)>),
    Reshape(Var),
    Relu(Var),
    Silu(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(F, F)> },
    Modulate { x: Var, ss: Var },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    MeanSpatial(Var),
    SumAll(Var),
    SumSquares(Var),
    Mse { pred: Var, target: Vec<F> },
    StudentT { z: Var, mu: Var, alpha: F },
    KlToTarget { q: Var, p: Vec<F> },
    GraphSmooth { q: Var, terms: Vec<Vec<NeighborTerm<F>>> },
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose vector-Jacobian product was evaluated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `c[m x n] += a[m x k] * b[k x n]`
fn gemm_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, cols: &mut [F]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        cols[row + y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<F: Real>(cols: &[F], c: usize, h: usize, w: usize, dx: &mut [F]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dx[ci * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(DiecError::shape(format!("expected NCHW, got {shape:?}"))),
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(DiecError::shape(format!("expected a matrix, got {shape:?}"))),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Gradient-free input.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(DiecError::shape(format!("constant {shape:?} with {} values", value.len())));
        }
        Ok(self.push(value, shape, false, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(DiecError::shape(format!("param {shape:?} with {} values", value.len())));
        }
        Ok(self.push(value, shape, true, Op::Leaf))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DiecError::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, s, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, s, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, s, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = F::of(k);
        let v = self.value(a).iter().map(|&x| x * k).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(v, s, rg, Op::Scale(a, k))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = F::zero();
        let mut stored = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(DiecError::shape("weighted_sum expects scalar terms"));
            }
            let w = F::of(w);
            total += w * self.scalar(v);
            stored.push((v, w));
        }
        let rg = terms.iter().any(|(v, _)| self.nodes[v.0].requires_grad);
        Ok(self.push(vec![total], vec![1], rg, Op::WeightedSum(stored)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(DiecError::shape(format!("reshape {:?} to {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(v, shape, rg, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(F::zero())).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(v, s, rg, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(v, s, rg, Op::Silu(a))
    }

    /// `x[N, I] * w[O, I]^T + b[O]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = dims2(self.shape(x))?;
        let (o, wi) = dims2(self.shape(w))?;
        if wi != i || self.shape(b) != [o] {
            return Err(DiecError::shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![F::zero(); n * o];
        for r in 0..n {
            let xr = &xv[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wv[c * i..(c + 1) * i];
                let mut s = bv[c];
                for (&a, &bb) in xr.iter().zip(wr) {
                    s += a * bb;
                }
                out[r * o + c] = s;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, vec![n, o], rg, Op::Linear { x, w, b }))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, ci, h, wd) = dims4(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 || self.shape(b) != [ws[0]] {
            return Err(DiecError::shape(format!("conv3x3: x {:?}, w {:?}", self.shape(x), ws)));
        }
        let co = ws[0];
        let hw = h * wd;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![F::zero(); n * co * hw];
        let mut cols = vec![F::zero(); ci * 9 * hw];
        for s in 0..n {
            im2col(&xv[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, &mut cols);
            let dst = &mut out[s * co * hw..(s + 1) * co * hw];
            for c in 0..co {
                dst[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = bv[c]);
            }
            gemm_acc(co, ci * 9, hw, wv, &cols, dst);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, vec![n, co, h, wd], rg, Op::Conv3x3 { x, w, b }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if groups == 0 || c % groups != 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DiecError::shape(format!("group_norm: {c} channels, {groups} groups")));
        }
        let cg = c / groups;
        let len = cg * h * w;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![F::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * h * w;
                let seg = &xv[off..off + len];
                let mut mean = 0.0f64;
                for &v in seg {
                    mean += v.to_f64_lossy();
                }
                mean /= len as f64;
                let mut var = 0.0f64;
                for &v in seg {
                    let d = v.to_f64_lossy() - mean;
                    var += d * d;
                }
                var /= len as f64;
                let rstd = 1.0 / (var + GN_EPS).sqrt();
                let (mf, rf) = (F::of(mean), F::of(rstd));
                for (k, &v) in seg.iter().enumerate() {
                    let ch = g * cg + k / (h * w);
                    out[off + k] = (v - mf) * rf * gv[ch] + bv[ch];
                }
                stats.push((mf, rf));
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, vec![n, c, h, w], rg, Op::GroupNorm { x, gamma, beta, groups, stats }))
    }

    /// `x * (1 + scale) + shift` with `ss[N, 2C] = [scale | shift]` per channel.
    pub fn modulate(&mut self, x: Var, ss: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if self.shape(ss) != [n, 2 * c] {
            return Err(DiecError::shape(format!("modulate: x {:?}, ss {:?}", self.shape(x), self.shape(ss))));
        }
        let hw = h * w;
        let (xv, sv) = (self.value(x), self.value(ss));
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let scale = F::one() + sv[s * 2 * c + ch];
                let shift = sv[s * 2 * c + c + ch];
                let off = (s * c + ch) * hw;
                for k in 0..hw {
                    out[off + k] = xv[off + k] * scale + shift;
                }
            }
        }
        let rg = self.rg(&[x, ss]);
        Ok(self.push(out, vec![n, c, h, w], rg, Op::Modulate { x, ss }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DiecError::shape(format!("avg_pool2 on odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let quarter = F::of(0.25);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = s * quarter;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![n, c, oh, ow], rg, Op::AvgPool2(x)))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![n, c, oh, ow], rg, Op::Upsample2(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.shape(a))?;
        let (nb, cb, hb, wb) = dims4(self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(DiecError::shape(format!("concat {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![n, ca + cb, h, w], rg, Op::ConcatChannels(a, b)))
    }

    /// Global average pool over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let hw = h * w;
        let inv = F::of(1.0 / hw as f64);
        let xv = self.value(x);
        let out = (0..n * c).map(|p| xv[p * hw..(p + 1) * hw].iter().copied().sum::<F>() * inv).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![n, c], rg, Op::MeanSpatial(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![1], rg, Op::SumAll(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v * v).sum::<F>();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![1], rg, Op::SumSquares(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<F>) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(DiecError::shape("mse: target length mismatch"));
        }
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let d = (p - t).to_f64_lossy();
                d * d
            })
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![F::of(s / n)], vec![1], rg, Op::Mse { pred, target }))
    }

    /// Student-t soft assignment between rows of `z[N, D]` and `mu[K, D]`.
    pub fn student_t(&mut self, z: Var, mu: Var, alpha: f64) -> Result<Var> {
        let (n, d) = dims2(self.shape(z))?;
        let (k, dm) = dims2(self.shape(mu))?;
        if d != dm || k == 0 {
            return Err(DiecError::shape(format!("student_t: z {:?}, mu {:?}", self.shape(z), self.shape(mu))));
        }
        if !(alpha > 0.0) {
            return Err(DiecError::param("student_t: alpha must be positive"));
        }
        let q = student_t_rows(self.value(z), self.value(mu), n, k, d, alpha);
        let rg = self.rg(&[z, mu]);
        Ok(self.push(q, vec![n, k], rg, Op::StudentT { z, mu, alpha: F::of(alpha) }))
    }

    /// `(1/N) sum_i sum_k p_ik log(p_ik / q_ik)` with constant `p`.
    pub fn kl_to_target(&mut self, q: Var, p: Vec<F>) -> Result<Var> {
        let (n, _) = dims2(self.shape(q))?;
        if p.len() != self.value(q).len() {
            return Err(DiecError::shape("kl_to_target: P/Q size mismatch"));
        }
        let s = kl_sum(&p, self.value(q)) / n.max(1) as f64;
        let rg = self.rg(&[q]);
        Ok(self.push(vec![F::of(s)], vec![1], rg, Op::KlToTarget { q, p }))
    }

    /// `(1/N) sum_i sum_j s_ij ||q_i - qhat_j||^2` with cached neighbor rows.
    pub fn graph_smooth(&mut self, q: Var, terms: Vec<Vec<NeighborTerm<F>>>) -> Result<Var> {
        let (n, k) = dims2(self.shape(q))?;
        if terms.len() != n || terms.iter().flatten().any(|t| t.row.len() != k) {
            return Err(DiecError::shape("graph_smooth: neighbor terms do not match Q"));
        }
        let qv = self.value(q);
        let mut s = 0.0f64;
        for (i, row_terms) in terms.iter().enumerate() {
            let qi = &qv[i * k..(i + 1) * k];
            for t in row_terms {
                let d: f64 = qi.iter().zip(&t.row).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum();
                s += t.weight.to_f64_lossy() * d;
            }
        }
        let rg = self.rg(&[q]);
        Ok(self.push(vec![F::of(s / n.max(1) as f64)], vec![1], rg, Op::GraphSmooth { q, terms }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(DiecError::shape(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.vjp(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn vjp(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *k)),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |d| d[0] += g[0] * w);
                }
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > F::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(av[i]);
                        d[i] += g[i] * s * (F::one() + av[i] * (F::one() - s));
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, i) = dims2(self.shape(*x))?;
                let o = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, &mut |d| gemm_acc(n, o, i, g, wv, d));
                acc(*w, &mut |d| {
                    for r in 0..n {
                        for c in 0..o {
                            let gv = g[r * o + c];
                            if gv == F::zero() {
                                continue;
                            }
                            let xr = &xv[r * i..(r + 1) * i];
                            for (dv, &xvv) in d[c * i..(c + 1) * i].iter_mut().zip(xr) {
                                *dv += gv * xvv;
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for r in 0..n {
                        for c in 0..o {
                            d[c] += g[r * o + c];
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, b } => {
                let (n, ci, h, wd) = dims4(self.shape(*x))?;
                let co = self.shape(*w)[0];
                let hw = h * wd;
                let kk = ci * 9;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![F::zero(); kk * hw];
                let mut dcols = vec![F::zero(); kk * hw];
                let mut dw = vec![F::zero(); co * kk];
                let mut dx = vec![F::zero(); if need_x { xv.len() } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * co * hw..(s + 1) * co * hw];
                    if need_w {
                        im2col(&xv[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, &mut cols);
                        for c in 0..co {
                            let gr = &gs[c * hw..(c + 1) * hw];
                            for r in 0..kk {
                                let cr = &cols[r * hw..(r + 1) * hw];
                                let mut dot = F::zero();
                                for (&a, &bb) in gr.iter().zip(cr) {
                                    dot += a * bb;
                                }
                                dw[c * kk + r] += dot;
                            }
                        }
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = F::zero());
                        for c in 0..co {
                            let gr = &gs[c * hw..(c + 1) * hw];
                            for r in 0..kk {
                                let wv_cr = wv[c * kk + r];
                                if wv_cr == F::zero() {
                                    continue;
                                }
                                for (dv, &gg) in dcols[r * hw..(r + 1) * hw].iter_mut().zip(gr) {
                                    *dv += wv_cr * gg;
                                }
                            }
                        }
                        col2im_acc(&dcols, ci, h, wd, &mut dx[s * ci * hw..(s + 1) * ci * hw]);
                    }
                }
                acc(*x, &mut |d| d.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v));
                acc(*w, &mut |d| d.iter_mut().zip(&dw).for_each(|(d, &v)| *d += v));
                acc(*b, &mut |d| {
                    for s in 0..n {
                        for c in 0..co {
                            d[c] += g[(s * co + c) * hw..(s * co + c + 1) * hw].iter().copied().sum::<F>();
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (n, c, h, w) = dims4(self.shape(*x))?;
                let hw = h * w;
                let cg = c / groups;
                let len = cg * hw;
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let inv_len = F::of(1.0 / len as f64);
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[s * groups + gi];
                        let off = (s * c + gi * cg) * hw;
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for k in 0..len {
                            let ch = gi * cg + k / hw;
                            let xhat = (xv[off + k] - mean) * rstd;
                            let dy = g[off + k];
                            dgamma[ch] += dy * xhat;
                            dbeta[ch] += dy;
                            let dxhat = dy * gv[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_len;
                        let m2 = sum_dxhat_xhat * inv_len;
                        for k in 0..len {
                            let ch = gi * cg + k / hw;
                            let xhat = (xv[off + k] - mean) * rstd;
                            let dxhat = g[off + k] * gv[ch];
                            dx[off + k] = rstd * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                acc(*x, &mut |d| d.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v));
                acc(*gamma, &mut |d| d.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v));
                acc(*beta, &mut |d| d.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v));
            }
            Op::Modulate { x, ss } => {
                let (n, c, h, w) = dims4(self.shape(*x))?;
                let hw = h * w;
                let (xv, sv) = (self.value(*x), self.value(*ss));
                acc(*x, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = F::one() + sv[s * 2 * c + ch];
                            let off = (s * c + ch) * hw;
                            for k in 0..hw {
                                d[off + k] += g[off + k] * scale;
                            }
                        }
                    }
                });
                acc(*ss, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let mut dscale = F::zero();
                            let mut dshift = F::zero();
                            for k in 0..hw {
                                dscale += g[off + k] * xv[off + k];
                                dshift += g[off + k];
                            }
                            d[s * 2 * c + ch] += dscale;
                            d[s * 2 * c + c + ch] += dshift;
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = dims4(self.shape(*x))?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = F::of(0.25);
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[p * h * w + y * w + xx] += g[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = dims4(self.shape(*x))?;
                let (oh, ow) = (2 * h, 2 * w);
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[p * h * w + (y / 2) * w + xx / 2] += g[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = dims4(self.shape(*a))?;
                let cb = self.shape(*b)[1];
                let hw = h * w;
                acc(*a, &mut |d| {
                    for s in 0..n {
                        let src = &g[s * (ca + cb) * hw..s * (ca + cb) * hw + ca * hw];
                        d[s * ca * hw..(s + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
                acc(*b, &mut |d| {
                    for s in 0..n {
                        let start = s * (ca + cb) * hw + ca * hw;
                        let src = &g[start..start + cb * hw];
                        d[s * cb * hw..(s + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let (n, c, h, w) = dims4(self.shape(*x))?;
                let hw = h * w;
                let inv = F::of(1.0 / hw as f64);
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        let gv = g[p] * inv;
                        d[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                let two = F::of(2.0);
                acc(*x, &mut |d| d.iter_mut().zip(xv).for_each(|(d, &v)| *d += two * v * g[0]));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let k = F::of(2.0 / target.len().max(1) as f64) * g[0];
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += k * (pv[i] - target[i]);
                    }
                });
            }
            Op::StudentT { z, mu, alpha } => {
                let (n, d) = dims2(self.shape(*z))?;
                let k = self.shape(*mu)[0];
                let (zv, mv, qv) = (self.value(*z), self.value(*mu), &node.value);
                let half_exp = (*alpha + F::one()) / F::of(2.0);
                let mut dz = vec![F::zero(); zv.len()];
                let mut dmu = vec![F::zero(); mv.len()];
                for i in 0..n {
                    let qi = &qv[i * k..(i + 1) * k];
                    let gi = &g[i * k..(i + 1) * k];
                    let inner: F = qi.iter().zip(gi).map(|(&q, &gg)| q * gg).sum();
                    let zi = &zv[i * d..(i + 1) * d];
                    for c in 0..k {
                        let dlogit = qi[c] * (gi[c] - inner);
                        let mc = &mv[c * d..(c + 1) * d];
                        let dist: F = zi.iter().zip(mc).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        let u = F::one() + dist / *alpha;
                        let ddist = -dlogit * half_exp / (*alpha * u);
                        for j in 0..d {
                            let diff = F::of(2.0) * (zi[j] - mc[j]) * ddist;
                            dz[i * d + j] += diff;
                            dmu[c * d + j] -= diff;
                        }
                    }
                }
                acc(*z, &mut |dd| dd.iter_mut().zip(&dz).for_each(|(a, &b)| *a += b));
                acc(*mu, &mut |dd| dd.iter_mut().zip(&dmu).for_each(|(a, &b)| *a += b));
            }
            Op::KlToTarget { q, p } => {
                let n = self.shape(*q)[0].max(1);
                let qv = self.value(*q);
                let clip = F::of(Q_CLIP);
                let scale = g[0] / F::of(n as f64);
                acc(*q, &mut |d| {
                    for i in 0..d.len() {
                        if qv[i] > clip {
                            d[i] -= scale * p[i] / qv[i];
                        }
                    }
                });
            }
            Op::GraphSmooth { q, terms } => {
                let (n, k) = dims2(self.shape(*q))?;
                let qv = self.value(*q);
                let scale = F::of(2.0 / n.max(1) as f64) * g[0];
                acc(*q, &mut |d| {
                    for (i, row_terms) in terms.iter().enumerate() {
                        for t in row_terms {
                            for c in 0..k {
                                d[i * k + c] += scale * t.weight * (qv[i * k + c] - t.row[c]);
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Row-wise Student-t kernel, normalized per row; accumulates in `f64`.
pub fn student_t_rows<F: Real>(z: &[F], mu: &[F], n: usize, k: usize, d: usize, alpha: f64) -> Vec<F> {
    let expo = -(alpha + 1.0) / 2.0;
    let mut out = vec![F::zero(); n * k];
    let mut logs = vec![0.0f64; k];
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        for c in 0..k {
            let mc = &mu[c * d..(c + 1) * d];
            let dist: f64 = zi.iter().zip(mc).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum();
            logs[c] = expo * (1.0 + dist / alpha).ln();
        }
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        for c in 0..k {
            out[i * k + c] = F::of((logs[c] - mx).exp() / total);
        }
    }
    out
}

fn kl_sum<F: Real>(p: &[F], q: &[F]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let p = p.to_f64_lossy();
            if p <= 0.0 {
                0.0
            } else {
                p * (p.ln() - q.to_f64_lossy().max(Q_CLIP).ln())
            }
        })
        .sum()
}

/// Central finite differences of `f` with respect to every entry of `params`.
pub fn finite_difference_grad<Fun>(mut f: Fun, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    Fun: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let up = f(&work);
            work[p][i] = orig - h;
            let down = f(&work);
            work[p][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest entry-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
