use super::ops::{self, TubeletGeometry};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv3d { x: Var, k: Var, b: Var, geo: TubeletGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulMask { x: Var, mask: Var },
    Scale(Var, F),
    AddScalar(Var),
    Clamp { x: Var, lo: F, hi: F },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, shift: Var, mean: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Resize { x: Var, scale: f64 },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Unpatchify { x: Var, geo: TubeletGeometry },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    Mse(Var, Var),
    Sam { pred: Var, target: Var, eps: F },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records executed operations so the gradient of a scalar can be pulled
/// back to every leaf created with [`Tape::param`].
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; exact zeros when the loss never touched it.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Indices of the operation nodes in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.derived(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn conv3d(&mut self, x: Var, k: Var, b: Var, stride: (usize, usize, usize)) -> Result<Var> {
        let geo = ops::conv3d_geometry(self.value(x), self.value(k), self.value(b), stride)?;
        let y = ops::conv3d(self.value(x), self.value(k), self.value(b), stride)?;
        Ok(self.derived(y, Op::Conv3d { x, k, b, geo }, &[x, k, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Mul(a, b), &[a, b]))
    }

    /// `x · mask` with the `[T, C, H, W]` × `[T, H, W]` broadcast.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let y = ops::mul_mask(self.value(x), self.value(mask))?;
        Ok(self.derived(y, Op::MulMask { x, mask }, &[x, mask]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let y = ops::scale(self.value(x), s);
        self.derived(y, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        let y = ops::add_scalar(self.value(x), s);
        self.derived(y, Op::AddScalar(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let y = ops::clamp(self.value(x), lo, hi);
        self.derived(y, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.derived(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gain), self.value(shift))?;
        let op = Op::LayerNorm { x, gain, shift, mean: out.mean, rstd: out.rstd };
        Ok(self.derived(out.y, op, &[x, gain, shift]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.derived(y, Op::Gelu(x), &[x])
    }

    pub fn bilinear_resize(&mut self, x: Var, scale: f64) -> Result<Var> {
        if scale == 1.0 && ops::SUPPORTED_SCALES.contains(&scale) {
            return Ok(x);
        }
        let y = ops::bilinear_resize(self.value(x), scale)?;
        Ok(self.derived(y, Op::Resize { x, scale }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), axes)?;
        Ok(self.derived(y, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(y, Op::Reshape(x), &[x]))
    }

    /// Scatters `[tokens, tubelet_len]` rows into a `[C, T, H, W]` volume.
    pub fn unpatchify(&mut self, x: Var, geo: TubeletGeometry) -> Result<Var> {
        let want = [geo.tokens(), geo.tubelet_len()];
        if self.shape(x) != want {
            return Err(Error::shape(format!("unpatchify expects {want:?}, got {:?}", self.shape(x))));
        }
        let data = ops::unpatchify(self.value(x).data(), &geo);
        let y = Tensor::from_parts(vec![geo.channels, geo.frames, geo.height, geo.width], data);
        Ok(self.derived(y, Op::Unpatchify { x, geo }, &[x]))
    }

    /// Multi-head scaled dot-product attention over packed heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let out = ops::multi_head_attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.derived(out.out, Op::Attention { q, k, v, heads, probs: out.probs }, &[q, k, v]))
    }

    /// Attention weights `[heads, tokens, tokens]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let y = ops::mse(self.value(pred), self.value(target))?;
        Ok(self.derived(Tensor::scalar(y), Op::Mse(pred, target), &[pred, target]))
    }

    pub fn sam(&mut self, pred: Var, target: Var, eps: F) -> Result<Var> {
        let y = ops::sam(self.value(pred), self.value(target), eps)?;
        Ok(self.derived(Tensor::scalar(y), Op::Sam { pred, target, eps }, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.derived(y, Op::Sum(x), &[x])
    }

    /// Reverse-mode pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            visited.push(i);
            self.pull_back(node, &dy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn pull_back(&self, node: &Node<F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(a), self.value(b), dy);
                acc(a, da);
                acc(b, db);
            }
            &Op::Linear { x, w, b } => {
                let g = ops::linear_backward(self.value(x), self.value(w), dy, rg(x));
                if let Some(dx) = g.dx {
                    acc(x, dx);
                }
                acc(w, g.dw);
                acc(b, g.db);
            }
            &Op::Conv3d { x, k, b, geo } => {
                let g = ops::conv3d_backward(self.value(x), self.value(k), &geo, dy, rg(x));
                if let Some(dx) = g.dinput {
                    acc(x, dx);
                }
                acc(k, g.dkernel);
                acc(b, g.dbias);
            }
            &Op::Add(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, dy.clone());
                acc(b, ops::scale(dy, -F::one()));
            }
            &Op::Mul(a, b) => {
                acc(a, ops::mul(dy, self.value(b)).expect("shapes recorded"));
                acc(b, ops::mul(dy, self.value(a)).expect("shapes recorded"));
            }
            &Op::MulMask { x, mask } => {
                let (xv, mv) = (self.value(x), self.value(mask));
                acc(x, ops::mul_mask(dy, mv).expect("shapes recorded"));
                if rg(mask) {
                    let prod = ops::mul(dy, xv).expect("shapes recorded");
                    let dm = if xv.shape() == mv.shape() {
                        prod
                    } else {
                        Tensor::from_parts(mv.shape().to_vec(), ops::mask_reduce(xv.shape(), prod.data()))
                    };
                    acc(mask, dm);
                }
            }
            &Op::Scale(x, s) => acc(x, ops::scale(dy, s)),
            &Op::AddScalar(x) => acc(x, dy.clone()),
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v < lo || v > hi { F::zero() } else { g })
                    .collect();
                acc(x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            &Op::Softmax { x, axis } => acc(x, ops::softmax_backward(&node.value, dy, axis)),
            Op::LayerNorm { x, gain, shift, mean, rstd } => {
                let g = ops::layer_norm_backward(self.value(*x), self.value(*gain), mean, rstd, dy);
                acc(*x, g.dx);
                acc(*gain, g.dgain);
                acc(*shift, g.dshift);
            }
            &Op::Gelu(x) => acc(x, ops::gelu_backward(self.value(x), dy)),
            &Op::Resize { x, scale } => acc(x, ops::bilinear_resize_backward(self.shape(x), scale, dy)),
            Op::Permute { x, axes } => {
                let inv = ops::inverse_permutation(axes);
                acc(*x, ops::permute(dy, &inv).expect("valid permutation"));
            }
            &Op::Reshape(x) => acc(x, dy.clone().reshape(self.shape(x)).expect("same size")),
            &Op::Unpatchify { x, geo } => {
                let rows = ops::patchify(dy.data(), &geo);
                acc(x, Tensor::from_parts(self.shape(x).to_vec(), rows));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let g = ops::multi_head_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *heads,
                    dy,
                );
                acc(*q, g.dq);
                acc(*k, g.dk);
                acc(*v, g.dv);
            }
            &Op::Mse(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                let w = F::lit(2.0) * dy.item() / F::lit(pv.numel() as f64);
                let dp = Tensor::from_parts(
                    pv.shape().to_vec(),
                    pv.data().iter().zip(tv.data()).map(|(&a, &b)| w * (a - b)).collect(),
                );
                if rg(t) {
                    acc(t, ops::scale(&dp, -F::one()));
                }
                acc(p, dp);
            }
            &Op::Sam { pred, target, eps } => {
                let (dp, dt) = ops::sam_backward(self.value(pred), self.value(target), eps, dy.item());
                acc(pred, dp);
                acc(target, dt);
            }
            &Op::Sum(x) => acc(x, Tensor::full(self.shape(x).to_vec(), dy.item())),
        }
    }
}
