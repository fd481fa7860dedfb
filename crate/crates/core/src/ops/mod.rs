//! Differentiable operations recorded on a [`Graph`].
//!
//! Broadcasting is limited to leading axes: in a binary op the smaller
//! operand's shape must be a suffix of the larger one's, and it is repeated
//! over the remaining leading axes.

mod conv;

pub use conv::{avgpool2d_forward, conv2d_forward, conv_output_size, ConvGeometry};

use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::{dims2, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand repeats over the left's leading axes.
    Right,
    /// Left operand repeats over the right's leading axes.
    Left,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Right)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Left)
    } else {
        Err(Error::dim(format!(
            "shapes {a:?} and {b:?} are not broadcast-compatible over leading axes"
        )))
    }
}

/// Sum `g` (the big shape) down to its trailing `len` elements.
fn reduce_leading<T: Real>(g: &Tensor<T>, small_shape: &[usize]) -> Tensor<T> {
    let n: usize = small_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::new(small_shape, out).expect("reduced shape")
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
    broadcast: Broadcast,
}

impl<T: Real> Backward<T> for BinaryBackward {
    fn backward(
        &self,
        up: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        // Full-size gradient for each operand before reduction.
        let (ga, gb) = match self.kind {
            BinaryKind::Add => (up.clone(), up.clone()),
            BinaryKind::Sub => (up.clone(), up.scale(-T::one())),
            BinaryKind::Mul => {
                let ga = elementwise(up, b, |u, y| u * y)?;
                let gb = elementwise(up, a, |u, x| u * x)?;
                (ga, gb)
            }
        };
        let (ga, gb) = match self.broadcast {
            Broadcast::Same => (ga, gb),
            Broadcast::Right => (ga, reduce_leading(&gb, b.shape())),
            Broadcast::Left => (reduce_leading(&ga, a.shape()), gb),
        };
        Ok(vec![Some(ga), Some(gb)])
    }

    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

/// Elementwise map of `big` with `small` broadcast over leading axes.
fn elementwise<T: Real>(x: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    match broadcast_kind(x.shape(), y.shape())? {
        Broadcast::Same => x.zip_map(y, f),
        Broadcast::Right => {
            let n = y.len();
            let data = x
                .data()
                .chunks(n)
                .flat_map(|c| c.iter().zip(y.data()).map(|(&a, &b)| f(a, b)))
                .collect();
            Tensor::new(x.shape(), data)
        }
        Broadcast::Left => {
            let n = x.len();
            let data = y
                .data()
                .chunks(n)
                .flat_map(|c| x.data().iter().zip(c).map(|(&a, &b)| f(a, b)))
                .collect();
            Tensor::new(y.shape(), data)
        }
    }
}

struct ScaleBackward<T>(T);

impl<T: Real> Backward<T> for ScaleBackward<T> {
    fn backward(&self, up: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(up.scale(self.0))])
    }

    fn name(&self) -> &'static str {
        "scale"
    }
}

struct PassThrough(&'static str);

impl<T: Real> Backward<T> for PassThrough {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        // Same data layout, possibly a different shape.
        Ok(vec![Some(up.clone().reshape(inputs[0].shape())?)])
    }

    fn name(&self) -> &'static str {
        self.0
    }
}

struct MatmulBackward {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatmulBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        // dA = dC · Bᵀ, dB = Aᵀ · dC
        let mut ga = vec![T::zero(); m * k];
        T::gemm(false, true, m, k, n, T::one(), up.data(), b.data(), T::zero(), &mut ga);
        let mut gb = vec![T::zero(); k * n];
        T::gemm(true, false, k, n, m, T::one(), a.data(), up.data(), T::zero(), &mut gb);
        Ok(vec![
            Some(Tensor::new(&[m, k], ga)?),
            Some(Tensor::new(&[k, n], gb)?),
        ])
    }

    fn name(&self) -> &'static str {
        "matmul"
    }
}

struct SumBackward;

impl<T: Real> Backward<T> for SumBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), up.item()))])
    }

    fn name(&self) -> &'static str {
        "sum"
    }
}

struct SumAxisBackward {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Real> Backward<T> for SumAxisBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = Vec::with_capacity(self.outer * self.len * self.inner);
        for o in 0..self.outer {
            let row = &up.data()[o * self.inner..(o + 1) * self.inner];
            for _ in 0..self.len {
                g.extend_from_slice(row);
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }

    fn name(&self) -> &'static str {
        "sum_axis"
    }
}

struct StackBackward;

impl<T: Real> Backward<T> for StackBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        (0..inputs.len()).map(|i| up.select(i).map(Some)).collect()
    }

    fn name(&self) -> &'static str {
        "stack"
    }
}

struct SelectBackward {
    index: usize,
}

impl<T: Real> Backward<T> for SelectBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        let n = up.len();
        g.data_mut()[self.index * n..(self.index + 1) * n].copy_from_slice(up.data());
        Ok(vec![Some(g)])
    }

    fn name(&self) -> &'static str {
        "select"
    }
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let broadcast = broadcast_kind(self.shape(a), self.shape(b))?;
        let f = match kind {
            BinaryKind::Add => |x: T, y: T| x + y,
            BinaryKind::Sub => |x: T, y: T| x - y,
            BinaryKind::Mul => |x: T, y: T| x * y,
        };
        let value = elementwise(self.value(a), self.value(b), f)?;
        Ok(self.record(&[a, b], value, Box::new(BinaryBackward { kind, broadcast })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.record(&[a], value, Box::new(ScaleBackward(c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.record(&[a], value, Box::new(PassThrough("add_scalar")))
    }

    /// Step function `x > 0` as a constant: no gradient flows through it.
    pub fn heaviside_detached(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|v| if v > T::zero() { T::one() } else { T::zero() });
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {m}x{k} by {k2}x{n}: inner dimensions differ"
            )));
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(&[a, b], value, Box::new(MatmulBackward { m, k, n })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.record(&[a], value, Box::new(PassThrough("reshape"))))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(&[a], value, Box::new(SumBackward))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over one axis, removing it. Accumulation runs in index order.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.record(&[a], value, Box::new(SumAxisBackward { outer, len, inner })))
    }

    /// Stack same-shape values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::stack(&values)?;
        Ok(self.record(parts, value, Box::new(StackBackward)))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = self.value(a).select(index)?;
        Ok(self.record(&[a], value, Box::new(SelectBackward { index })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 4.0, 5.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(matches!(g.matmul(r, r), Err(Error::Dimension(_))));
    }

    #[test]
    fn heaviside_is_strict_and_detached() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-0.5, 0.5, 0.0]));
        let h = g.heaviside_detached(x);
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0]);
        assert!(!g.requires_grad(h));
    }

    #[test]
    fn sum_over_time_of_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[10, 1]));
        let s = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[10.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_product_gradient_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.leaf(t(&[3], &[4.0, 5.0, 6.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        g.zero_grad();
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn leading_axis_broadcast_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let big = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let small = g.leaf(t(&[2], &[10.0, 100.0]));
        let p = g.mul(small, big).unwrap();
        assert_eq!(g.value(p).data(), &[10.0, 200.0, 30.0, 400.0, 50.0, 600.0]);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(small).unwrap().data(), &[9.0, 12.0]);
        let bad = g.leaf(t(&[3], &[0.0; 3]));
        assert!(g.add(big, bad).is_err());
    }

    #[test]
    fn stack_select_round_trip_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]));
        let st = g.stack(&[a, b]).unwrap();
        let second = g.select(st, 1).unwrap();
        let w = g.constant(t(&[2], &[5.0, 7.0]));
        let p = g.mul(second, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[5.0, 7.0]);
    }
}
