//! Elementwise, reduction, linear-algebra and shape primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, split_at_axis, strides, Tensor};

use super::{Backward, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn apply<E: Scalar>(self, a: E, b: E) -> E {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

struct Binary(BinaryKind);

impl<E: Scalar> Backward<E> for Binary {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (grad.clone(), grad.clone()),
            BinaryKind::Sub => (grad.clone(), grad.map(|g| -g)),
            BinaryKind::Mul => (grad.zip_map(b, "mul", |g, b| g * b)?, grad.zip_map(a, "mul", |g, a| g * a)?),
            BinaryKind::Div => {
                let ga = grad.zip_map(b, "div", |g, b| g / b)?;
                let mut gb = grad.clone();
                for ((g, &a), &b) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *g = -*g * a / (b * b);
                }
                (ga, gb)
            }
        };
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

/// `a op c` for a constant `c`.
struct BinaryScalar(BinaryKind, f64);

impl<E: Scalar> Backward<E> for BinaryScalar {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let c = E::of(self.1);
        let g = match self.0 {
            BinaryKind::Add | BinaryKind::Sub => grad.clone(),
            BinaryKind::Mul => grad.scale(c),
            BinaryKind::Div => grad.map(|g| g / c),
        };
        Ok(vec![Some(g)])
    }
}

struct Abs;

impl<E: Scalar> Backward<E> for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        // Subgradient 0 at the kink.
        let g = grad.zip_map(inputs[0], "abs", |g, x| {
            if x > E::zero() {
                g
            } else if x < E::zero() {
                -g
            } else {
                E::zero()
            }
        })?;
        Ok(vec![Some(g)])
    }
}

struct Neg;

impl<E: Scalar> Backward<E> for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(grad.map(|g| -g))])
    }
}

/// For each input element, the flat index of the reduced output element it feeds.
fn reduction_targets(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut scatter = Vec::with_capacity(shape.len());
    let mut k = 0;
    for &r in reduced {
        if r {
            scatter.push(0);
        } else {
            scatter.push(out_strides[k]);
            k += 1;
        }
    }
    let rank = shape.len();
    let mut targets = Vec::with_capacity(numel(shape));
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel(shape) {
        targets.push(offset);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += scatter[d];
            if index[d] < shape[d] {
                break;
            }
            offset -= scatter[d] * shape[d];
            index[d] = 0;
        }
    }
    targets
}

struct Reduce {
    mean: bool,
    reduced: Vec<bool>,
    count: usize,
}

impl<E: Scalar> Backward<E> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let scale = if self.mean {
            E::one() / E::of(self.count as f64)
        } else {
            E::one()
        };
        let targets = reduction_targets(inputs[0].shape(), &self.reduced);
        let g = grad.data();
        let data = targets.iter().map(|&t| g[t] * scale).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

pub(crate) fn matmul_forward<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(
        m,
        k,
        n,
        E::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        E::zero(),
        &mut c,
        (n as isize, 1),
    );
    c
}

/// Batched `[B,m,k] x [B,k,n]`; plain 2-D matmul is the `B = 1` case.
struct Matmul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<E: Scalar> Backward<E> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let Matmul { batch, m, k, n } = *self;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let g = grad.data();
        let mut ga = needs[0].then(|| vec![E::zero(); batch * m * k]);
        let mut gb = needs[1].then(|| vec![E::zero(); batch * k * n]);
        for s in 0..batch {
            let gs = &g[s * m * n..(s + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ
                E::gemm(
                    m,
                    n,
                    k,
                    E::one(),
                    gs,
                    (n as isize, 1),
                    &b[s * k * n..(s + 1) * k * n],
                    (1, n as isize),
                    E::zero(),
                    &mut ga[s * m * k..(s + 1) * m * k],
                    (k as isize, 1),
                );
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G
                E::gemm(
                    k,
                    m,
                    n,
                    E::one(),
                    &a[s * m * k..(s + 1) * m * k],
                    (1, k as isize),
                    gs,
                    (n as isize, 1),
                    E::zero(),
                    &mut gb[s * k * n..(s + 1) * k * n],
                    (n as isize, 1),
                );
            }
        }
        Ok(vec![
            ga.map(|d| Tensor::new(inputs[0].shape(), d)).transpose()?,
            gb.map(|d| Tensor::new(inputs[1].shape(), d)).transpose()?,
        ])
    }
}

struct Reshape;

impl<E: Scalar> Backward<E> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

struct Permute(Vec<usize>);

impl<E: Scalar> Backward<E> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let mut inverse = vec![0; self.0.len()];
        for (i, &a) in self.0.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(vec![Some(grad.permute(&inverse)?)])
    }
}

struct Slice {
    axis: usize,
    start: usize,
}

impl<E: Scalar> Backward<E> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let shape = inputs[0].shape();
        let (outer, extent, inner) = split_at_axis(shape, self.axis);
        let width = grad.shape()[self.axis] * inner;
        let mut data = vec![E::zero(); numel(shape)];
        for o in 0..outer {
            let dst = o * extent * inner + self.start * inner;
            data[dst..dst + width].copy_from_slice(&grad.data()[o * width..(o + 1) * width]);
        }
        Ok(vec![Some(Tensor::new(shape, data)?)])
    }
}

struct Concat {
    axis: usize,
}

impl<E: Scalar> Backward<E> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (input, &need) in inputs.iter().zip(needs) {
            let end = start + input.shape()[self.axis];
            out.push(if need {
                Some(grad.slice(self.axis, start, end)?)
            } else {
                None
            });
            start = end;
        }
        Ok(out)
    }
}

impl<E: Scalar> Tape<E> {
    /// Same-shape elementwise binary operation.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if kind == BinaryKind::Div {
            let floor = self.div_floor;
            if let Some(&bad) = bv.data().iter().find(|v| !(v.abs() > floor)) {
                return Err(Error::DivisionFloor {
                    value: bad.as_f64(),
                    floor: floor.as_f64(),
                });
            }
        }
        let out = av.zip_map(bv, kind.name(), |x, y| kind.apply(x, y))?;
        self.record(&[a, b], out, Binary(kind))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise `a op c` against a scalar constant.
    pub fn binary_scalar(&mut self, kind: BinaryKind, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        if kind == BinaryKind::Div && !(c.abs() > self.div_floor.as_f64()) {
            return Err(Error::DivisionFloor {
                value: c,
                floor: self.div_floor.as_f64(),
            });
        }
        let ce = E::of(c);
        let out = self.value(a).map(|x| kind.apply(x, ce));
        self.record(&[a], out, BinaryScalar(kind, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.binary_scalar(BinaryKind::Mul, a, c)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.abs());
        self.record(&[a], out, Abs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| -x);
        self.record(&[a], out, Neg)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a);
        let rank = value.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank || reduced[axis] {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        if axes.is_empty() {
            return Ok(a);
        }
        let out_shape: Vec<usize> = value
            .shape()
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count = value.numel() / numel(&out_shape);
        let targets = reduction_targets(value.shape(), &reduced);
        let mut out = vec![E::zero(); numel(&out_shape)];
        for (&t, &v) in targets.iter().zip(value.data()) {
            out[t] = out[t] + v;
        }
        if mean {
            let c = E::of(count as f64);
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let out = Tensor::new(out_shape, out)?;
        self.record(
            &[a],
            out,
            Reduce {
                mean,
                reduced,
                count,
            },
        )
    }

    /// Sums over `axes`, removing them. An empty axis set returns `a` unchanged.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, true)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new([m, n], matmul_forward(av.data(), bv.data(), m, k, n))?;
        self.record(&[a, b], out, Matmul { batch: 1, m, k, n })
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut data = Vec::with_capacity(batch * m * n);
        for s in 0..batch {
            data.extend(matmul_forward(
                &av.data()[s * m * k..(s + 1) * m * k],
                &bv.data()[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::new([batch, m, n], data)?;
        self.record(&[a, b], out, Matmul { batch, m, k, n })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        self.record(&[a], out, Reshape)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).permute(axes)?;
        self.record(&[a], out, Permute(axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).slice(axis, start, end)?;
        self.record(&[a], out, Slice { axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        self.record(parts, out, Concat { axis })
    }
}
