//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! enter through [`Graph::param`] (gradient tracked) and data or frozen
//! weights through [`Graph::constant`] (not tracked). Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every tracked input. Nodes that do not depend on
//! a tracked leaf are skipped entirely, which is what makes "detach" and
//! "freeze" free: a detached tensor is just a constant.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Mean {
        x: Var,
    },
    LnClamped {
        x: Var,
        lo: T,
        hi: T,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Abs {
        x: Var,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Operation tape. Borrowed leaves live for `'a`.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        value.debug_check();
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowed from a parameter container.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// A borrowed leaf that receives no gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// An owned leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    /// An owned leaf whose gradient is tracked (used for input-gradient tests).
    pub fn tracked(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn conv_common(&self, x: Var, w: Var, b: Var) -> Result<([usize; 4], [usize; 4], usize)> {
        let xd = self.value(x).dims4()?;
        let wd = self.value(w).dims4()?;
        let bl = self.value(b).len();
        if wd[2] != wd[3] {
            return Err(Error::BadShape(format!("non-square kernel {wd:?}")));
        }
        Ok((xd, wd, bl))
    }

    /// 2-D convolution; `w` is `[Co, Ci, k, k]`, `b` is `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let ([bs, c, h, wd], [co, ci, k, _], bl) = self.conv_common(x, w, b)?;
        if ci != c || bl != co {
            return Err(Error::BadShape(format!(
                "conv2d: input has {c} channels, weight expects {ci}; bias {bl} vs {co}"
            )));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::BadShape(format!("conv2d: kernel {k} too large for {h}x{wd}")))?;
        let y = kernels::conv2d_forward(
            &geom,
            bs,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            co,
        );
        let out = Tensor::new(vec![bs, co, geom.out_h, geom.out_w], y)?;
        let tracked = self.tracked_any(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, tracked))
    }

    /// 2-D transposed convolution; `w` is `[Ci, Co, k, k]`, `b` is `[Co]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ([bs, c, h, wd], [ci, co, k, _], bl) = self.conv_common(x, w, b)?;
        if ci != c || bl != co {
            return Err(Error::BadShape(format!(
                "conv_transpose2d: input has {c} channels, weight expects {ci}; bias {bl} vs {co}"
            )));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::BadShape("conv_transpose2d: padding too large".into()))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::BadShape("conv_transpose2d: padding too large".into()))?;
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::BadShape("conv_transpose2d: inconsistent geometry".into()))?;
        let y = kernels::conv_transpose2d_forward(
            &geom,
            bs,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            c,
        );
        let out = Tensor::new(vec![bs, co, oh, ow], y)?;
        let tracked = self.tracked_any(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, tracked))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let tracked = self.tracked_any(&[x]);
        self.push(out, op, tracked)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let edge = below_one::<T>();
        self.unary(x, |v| v.tanh().max(-edge).min(edge), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let edge = below_one::<T>();
        self.unary(x, |v| sigmoid(v).max(T::min_positive_value()).min(edge), Op::Sigmoid { x })
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::MixedShapes(format!(
                "dropout mask of {} entries for tensor {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, tracked))
    }

    /// Channel concatenation of two `[B, C, H, W]` tensors, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::concat_channels(self.value(a), self.value(b))?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, tracked))
    }

    /// Batch normalization over `(B, H, W)` per channel using batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let [bs, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::BadShape("batch_norm: affine parameters must have C entries".into()));
        }
        let plane = h * w;
        let count = T::from_usize(bs * plane).unwrap();
        let xs = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut y = vec![T::zero(); xs.len()];
        for ch in 0..c {
            let idx = |bi: usize| (bi * c + ch) * plane;
            let mut mean = T::zero();
            for bi in 0..bs {
                mean = mean + xs[idx(bi)..idx(bi) + plane].iter().copied().sum::<T>();
            }
            mean = mean / count;
            let mut var = T::zero();
            for bi in 0..bs {
                for &v in &xs[idx(bi)..idx(bi) + plane] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..bs {
                for i in idx(bi)..idx(bi) + plane {
                    let xh = (xs[i] - mean) * is;
                    xhat[i] = xh;
                    y[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let out = Tensor::new(vec![bs, c, h, w], y)?;
        let tracked = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, tracked)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi).ln(), Op::LnClamped { x, lo, hi })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::MixedShapes(format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    /// Which side of each non-differentiable point every element sits on:
    /// ReLU/LeakyReLU/abs input signs and clamp activity. Two evaluations of
    /// the same graph structure with equal patterns lie on one smooth piece,
    /// which is what central differences need.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => {
                    bits.extend(self.value(*x).data().iter().map(|&v| v > T::zero()))
                }
                Op::Abs { x } => bits.extend(self.value(*x).data().iter().map(|&v| v >= T::zero())),
                Op::LnClamped { x, lo, hi } => {
                    bits.extend(self.value(*x).data().iter().flat_map(|&v| [v < *lo, v > *hi]))
                }
                Op::Tanh { .. } => {
                    let edge = below_one::<T>();
                    bits.extend(node.value.data().iter().map(|&v| v.abs() >= edge))
                }
                Op::Sigmoid { .. } => {
                    let edge = below_one::<T>();
                    bits.extend(node.value.data().iter().map(|&v| v >= edge || v <= T::min_positive_value()))
                }
                _ => {}
            }
        }
        bits
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::BadShape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
        }
        // keep only leaf gradients plus whatever the caller might inspect
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let co = self.value(*w).dim(0);
                let bs = self.value(*x).dim(0);
                let need_params = self.is_tracked(*w) || self.is_tracked(*b);
                let gr = kernels::conv2d_backward(
                    geom,
                    bs,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    co,
                    self.is_tracked(*x),
                    need_params,
                );
                self.scatter_conv(grads, *x, *w, *b, gr);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let ci = self.value(*w).dim(0);
                let bs = self.value(*x).dim(0);
                let need_params = self.is_tracked(*w) || self.is_tracked(*b);
                let gr = kernels::conv_transpose2d_backward(
                    geom,
                    bs,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    ci,
                    self.is_tracked(*x),
                    need_params,
                );
                self.scatter_conv(grads, *x, *w, *b, gr);
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x).data();
                let g = xs
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let g = xs
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh { x } => {
                let g = y.iter().zip(gy).map(|(&t, &g)| g * (T::one() - t * t)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid { x } => {
                let g = y.iter().zip(gy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Dropout { x, mask } => {
                let g = mask.iter().zip(gy).map(|(&m, &g)| m * g).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Concat { a, b } => {
                let [bs, ca, h, w] = self.value(*a).dims4().expect("rank-4");
                let cb = self.value(*b).dim(1);
                let plane = h * w;
                let mut ga = Vec::with_capacity(bs * ca * plane);
                let mut gb = Vec::with_capacity(bs * cb * plane);
                for chunk in gy.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [bs, c, h, w] = self.value(*x).dims4().expect("rank-4");
                let plane = h * w;
                let count = T::from_usize(bs * plane).unwrap();
                let g = self.value(*gamma).data();
                let mut dx = vec![T::zero(); gy.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
                    for bi in 0..bs {
                        let base = (bi * c + ch) * plane;
                        for j in base..base + plane {
                            sum_dy = sum_dy + gy[j];
                            sum_dy_xh = sum_dy_xh + gy[j] * xhat[j];
                        }
                    }
                    dgamma[ch] = sum_dy_xh;
                    dbeta[ch] = sum_dy;
                    let k = g[ch] * inv_std[ch] / count;
                    for bi in 0..bs {
                        let base = (bi * c + ch) * plane;
                        for j in base..base + plane {
                            dx[j] = k * (count * gy[j] - sum_dy - xhat[j] * sum_dy_xh);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let g = gy[0] / T::from_usize(n.max(1)).unwrap();
                self.accumulate(grads, *x, vec![g; n]);
            }
            Op::LnClamped { x, lo, hi } => {
                let xs = self.value(*x).data();
                let g = xs
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| {
                        if v < *lo || v > *hi {
                            T::zero()
                        } else {
                            g / v
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Affine { x, scale } => {
                let g = gy.iter().map(|&g| g * *scale).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|&g| -g).collect());
            }
            Op::Abs { x } => {
                let xs = self.value(*x).data();
                let g = xs
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
        }
    }

    fn scatter_conv(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        b: Var,
        gr: kernels::ConvGrads<T>,
    ) {
        if let Some(g) = gr.input {
            self.accumulate(grads, x, g);
        }
        if let Some(g) = gr.weight {
            self.accumulate(grads, w, g);
        }
        if let Some(g) = gr.bias {
            self.accumulate(grads, b, g);
        }
    }
}

/// Largest value below one; saturated tanh/sigmoid outputs are held here so
/// their ranges stay open.
#[inline]
fn below_one<T: Scalar>() -> T {
    T::one() - T::epsilon() / (T::one() + T::one())
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
