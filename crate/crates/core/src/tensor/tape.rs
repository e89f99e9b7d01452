use super::ops;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    CenterPivot {
        x: Var,
        wq: Var,
        ws: Var,
        b: Option<Var>,
        stride: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: ops::GroupNormSaved<T>,
    },
    Resize(Var),
    MeanTrailing(Var),
    PoolSupport(Var, usize, usize),
    Concat(Var, Var),
    Softmax(Var),
    LogClamped(Var, T),
    Bce(Var, Vec<bool>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are kept on the tape so the reverse pass can read the inputs of
/// every op. [`Tape::backward`] visits the record in exact reverse order,
/// sums gradients at fan-out points and clears the tape.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the loss with respect to every tape value that required one.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::hadamard(self.value(a), self.value(b))?;
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let x = self.value(a);
        let v = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&e| e * s).collect());
        self.record(v, Op::Scale(a, s), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = ops::relu(self.value(a));
        self.record(v, Op::Relu(a), &[a], "relu")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d_bias(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(v, Op::Conv2d { x, w, b, stride, pad }, &inputs, "conv2d")
    }

    pub fn center_pivot(&mut self, x: Var, wq: Var, ws: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let v = ops::center_pivot(
            self.value(x),
            self.value(wq),
            self.value(ws),
            b.map(|b| self.value(b)),
            stride,
        )?;
        let mut inputs = vec![x, wq, ws];
        inputs.extend(b);
        self.record(v, Op::CenterPivot { x, wq, ws, b, stride }, &inputs, "center_pivot")
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (v, saved) = ops::group_norm(self.value(x), self.value(gamma), self.value(beta), groups, 1e-5)?;
        self.record(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
            "group_norm",
        )
    }

    /// Bilinear resize of axes 1 and 2.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        self.record(v, Op::Resize(x), &[x], "resize")
    }

    /// Mean over all axes after the first `keep`.
    pub fn mean_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let v = ops::mean_trailing(self.value(x), keep)?;
        self.record(v, Op::MeanTrailing(x), &[x], "mean_trailing")
    }

    pub fn pool_support(&mut self, x: Var, fy: usize, fx: usize) -> Result<Var> {
        let v = ops::pool_support(self.value(x), fy, fx)?;
        self.record(v, Op::PoolSupport(x, fy, fx), &[x], "pool_support")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        self.record(v, Op::Concat(a, b), &[a, b], "concat")
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let v = ops::softmax_channels(self.value(x))?;
        self.record(v, Op::Softmax(x), &[x], "softmax")
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&e| e.max(floor).ln()).collect(),
        );
        self.record(v, Op::LogClamped(x, floor), &[x], "log")
    }

    /// Mean foreground binary cross-entropy against `target` (row-major H x W).
    pub fn bce_foreground(&mut self, probs: Var, target: &[bool]) -> Result<Var> {
        let loss = ops::bce_foreground(self.value(probs), target)?;
        self.record(
            Tensor::scalar(loss),
            Op::Bce(probs, target.to_vec()),
            &[probs],
            "bce",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum(x), &[x], "sum")
    }

    /// Reverse pass from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            grads[idx] = Some(g);
            for (var, dg) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], dg);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let da = elementwise(g, self.value(*b), |g, y| g * y);
                let db = elementwise(g, self.value(*a), |g, x| g * x);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, map(g, |v| v * s))]
            }
            Op::Relu(a) => {
                let d = elementwise(g, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                vec![(*a, d)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::CenterPivot { x, wq, ws, b, stride } => {
                let (dx, dwq, dws, db) =
                    ops::center_pivot_backward(self.value(*x), self.value(*wq), self.value(*ws), g, *stride);
                let mut out = vec![(*x, dx), (*wq, dwq), (*ws, dws)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let (dx, dg, db) = ops::group_norm_backward(saved, self.value(*gamma), g, *groups);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Resize(x) => vec![(*x, ops::bilinear_resize_backward(g, self.value(*x).shape()))],
            Op::MeanTrailing(x) => vec![(*x, ops::mean_trailing_backward(g, self.value(*x).shape()))],
            Op::PoolSupport(x, fy, fx) => {
                vec![(*x, ops::pool_support_backward(g, self.value(*x).shape(), *fy, *fx))]
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let da = Tensor::from_parts(self.value(*a).shape().to_vec(), g.data()[..na].to_vec());
                let db = Tensor::from_parts(self.value(*b).shape().to_vec(), g.data()[na..].to_vec());
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_channels_backward(&node.value, g))],
            Op::LogClamped(x, floor) => {
                let floor = *floor;
                let d = elementwise(g, self.value(*x), |g, x| if x > floor { g / x } else { T::zero() });
                vec![(*x, d)]
            }
            Op::Bce(p, target) => {
                vec![(*p, ops::bce_foreground_backward(self.value(*p), target, g.data()[0]))]
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                vec![(*x, Tensor::full(self.value(*x).shape().to_vec(), s))]
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, dg: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(dg.data())
            .for_each(|(a, &d)| *a = *a + d),
        None => *slot = Some(dg),
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn elementwise<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let c = tape.constant(Tensor::zeros([3]));
        let z = tape.mul(w, c).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new([1], vec![3.0]).unwrap());
        let a = tape.scale(w, 2.0).unwrap();
        let b = tape.add(a, w).unwrap();
        let loss = tape.sum(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
        tape.clear();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
    }
}
