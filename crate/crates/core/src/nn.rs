//! Neural primitives: zero-padded 2-D convolution, PReLU, ReLU, sigmoid,
//! softmax and per-channel rescaling, plus the `Conv2d` / `Prelu` layers.

use rand::Rng;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{split_at_axis, Tensor};

/// Unfolds one `[c,h,w]` image into `[c*k*k, h*w]` patch columns with zero padding.
fn im2col<E: Scalar>(x: &[E], c: usize, h: usize, w: usize, k: usize, col: &mut [E]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let off = kx as isize - pad;
                // destination columns whose source column lies inside the image
                let lo = (-off).clamp(0, w as isize) as usize;
                let hi = (w as isize - off).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..lo].fill(E::zero());
                    dst[hi..].fill(E::zero());
                    let s0 = (lo as isize + off) as usize;
                    dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<E: Scalar>(col: &[E], c: usize, h: usize, w: usize, k: usize, x: &mut [E]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let off = kx as isize - pad;
                let lo = (-off).clamp(0, w as isize) as usize;
                let hi = (w as isize - off).clamp(0, w as isize) as usize;
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + lo..y * w + hi];
                    let s0 = (lo as isize + off) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn conv_forward<E: Scalar>(x: &[E], weight: &[E], bias: Option<&[E]>, g: ConvGeometry) -> Vec<E> {
    let (patch, hw) = (g.patch(), g.hw());
    let mut out = vec![E::zero(); g.n * g.c_out * hw];
    let mut col = if g.k == 1 { Vec::new() } else { vec![E::zero(); patch * hw] };
    for s in 0..g.n {
        let xs = &x[s * g.c_in * hw..(s + 1) * g.c_in * hw];
        let cols: &[E] = if g.k == 1 {
            xs
        } else {
            im2col(xs, g.c_in, g.h, g.w, g.k, &mut col);
            &col
        };
        let os = &mut out[s * g.c_out * hw..(s + 1) * g.c_out * hw];
        if let Some(bias) = bias {
            for (co, &b) in bias.iter().enumerate() {
                os[co * hw..(co + 1) * hw].fill(b);
            }
        }
        E::gemm(
            g.c_out,
            patch,
            hw,
            E::one(),
            weight,
            (patch as isize, 1),
            cols,
            (hw as isize, 1),
            if bias.is_some() { E::one() } else { E::zero() },
            os,
            (hw as isize, 1),
        );
    }
    out
}

struct Conv2dOp {
    geometry: ConvGeometry,
    has_bias: bool,
}

impl<E: Scalar> Backward<E> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let g = self.geometry;
        let (patch, hw) = (g.patch(), g.hw());
        let (x, weight) = (inputs[0].data(), inputs[1].data());
        let gout = grad.data();
        let mut gx = needs[0].then(|| vec![E::zero(); x.len()]);
        let mut gw = needs[1].then(|| vec![E::zero(); weight.len()]);
        let mut col = if g.k == 1 { Vec::new() } else { vec![E::zero(); patch * hw] };
        let mut dcol = if g.k == 1 { Vec::new() } else { vec![E::zero(); patch * hw] };
        for s in 0..g.n {
            let xs = &x[s * g.c_in * hw..(s + 1) * g.c_in * hw];
            let gs = &gout[s * g.c_out * hw..(s + 1) * g.c_out * hw];
            if let Some(gw) = gw.as_mut() {
                let cols: &[E] = if g.k == 1 {
                    xs
                } else {
                    im2col(xs, g.c_in, g.h, g.w, g.k, &mut col);
                    &col
                };
                // dW += G · colsᵀ
                E::gemm(
                    g.c_out,
                    hw,
                    patch,
                    E::one(),
                    gs,
                    (hw as isize, 1),
                    cols,
                    (1, hw as isize),
                    E::one(),
                    gw,
                    (patch as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[s * g.c_in * hw..(s + 1) * g.c_in * hw];
                // dcols = Wᵀ · G
                let target: &mut [E] = if g.k == 1 { gxs } else { &mut dcol };
                E::gemm(
                    patch,
                    g.c_out,
                    hw,
                    E::one(),
                    weight,
                    (1, patch as isize),
                    gs,
                    (hw as isize, 1),
                    E::zero(),
                    target,
                    (hw as isize, 1),
                );
                if g.k != 1 {
                    col2im(&dcol, g.c_in, g.h, g.w, g.k, gxs);
                }
            }
        }
        let mut out = vec![
            gx.map(|d| Tensor::new(inputs[0].shape(), d)).transpose()?,
            gw.map(|d| Tensor::new(inputs[1].shape(), d)).transpose()?,
        ];
        if self.has_bias {
            let gb = needs[2].then(|| {
                let mut gb = vec![E::zero(); g.c_out];
                for s in 0..g.n {
                    for (co, b) in gb.iter_mut().enumerate() {
                        let start = (s * g.c_out + co) * hw;
                        *b = *b + gout[start..start + hw].iter().copied().sum::<E>();
                    }
                }
                gb
            });
            out.push(gb.map(|d| Tensor::new(inputs[2].shape(), d)).transpose()?);
        }
        Ok(out)
    }
}

struct Relu;

impl<E: Scalar> Backward<E> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let g = grad.zip_map(inputs[0], "relu", |g, x| if x >= E::zero() { g } else { E::zero() })?;
        Ok(vec![Some(g)])
    }
}

struct PreluOp;

impl<E: Scalar> Backward<E> for PreluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, slope) = (inputs[0], inputs[1]);
        let (outer, channels, inner) = split_at_axis(x.shape(), 1);
        let mut gx = needs[0].then(|| grad.clone());
        let mut ga = needs[1].then(|| vec![E::zero(); channels]);
        for o in 0..outer {
            for c in 0..channels {
                let a = slope.data()[c];
                let start = (o * channels + c) * inner;
                for i in start..start + inner {
                    let xv = x.data()[i];
                    if xv < E::zero() {
                        if let Some(gx) = gx.as_mut() {
                            gx.data_mut()[i] = grad.data()[i] * a;
                        }
                        if let Some(ga) = ga.as_mut() {
                            ga[c] = ga[c] + grad.data()[i] * xv;
                        }
                    }
                }
            }
        }
        Ok(vec![gx, ga.map(|d| Tensor::new([channels], d)).transpose()?])
    }
}

struct Sigmoid;

impl<E: Scalar> Backward<E> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let g = grad.zip_map(output, "sigmoid", |g, s| g * s * (E::one() - s))?;
        Ok(vec![Some(g)])
    }
}

fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

struct Softmax {
    axis: usize,
}

impl<E: Scalar> Backward<E> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (outer, extent, inner) = split_at_axis(output.shape(), self.axis);
        let (s, g) = (output.data(), grad.data());
        let mut out = vec![E::zero(); s.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let dot: E = (0..extent).map(|j| s[base + j * inner] * g[base + j * inner]).sum();
                for j in 0..extent {
                    let idx = base + j * inner;
                    out[idx] = s[idx] * (g[idx] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::new(output.shape(), out)?)])
    }
}

struct ScaleChannels;

impl<E: Scalar> Backward<E> for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, v) = (inputs[0], inputs[1]);
        let rows = v.numel();
        let inner = x.numel() / rows;
        let mut gx = needs[0].then(|| grad.clone());
        let mut gv = needs[1].then(|| vec![E::zero(); rows]);
        for r in 0..rows {
            let span = r * inner..(r + 1) * inner;
            if let Some(gx) = gx.as_mut() {
                let s = v.data()[r];
                gx.data_mut()[span.clone()].iter_mut().for_each(|g| *g = *g * s);
            }
            if let Some(gv) = gv.as_mut() {
                gv[r] = grad.data()[span.clone()]
                    .iter()
                    .zip(&x.data()[span])
                    .map(|(&g, &x)| g * x)
                    .sum();
            }
        }
        Ok(vec![gx, gv.map(|d| Tensor::new(v.shape(), d)).transpose()?])
    }
}

impl<E: Scalar> Tape<E> {
    /// Stride-1 cross-correlation with spatial-preserving zero padding.
    ///
    /// `x` is `[N,C_in,H,W]`, `weight` is `[C_out,C_in,k,k]` with odd `k`,
    /// `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let (xv, wv) = (self.value(x), self.value(weight));
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(mismatch());
        }
        let (n, c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        if wv.shape()[1] != c_in || wv.shape()[3] != k || k % 2 == 0 {
            return Err(mismatch());
        }
        let bias_data = match bias {
            Some(b) => {
                self.check(b)?;
                let bv = self.value(b);
                if bv.shape() != [c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: wv.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv.data())
            }
            None => None,
        };
        let geometry = ConvGeometry {
            n,
            c_in,
            c_out,
            h,
            w,
            k,
        };
        let out = conv_forward(xv.data(), wv.data(), bias_data, geometry);
        let out = Tensor::new([n, c_out, h, w], out)?;
        let op = Conv2dOp {
            geometry,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(&[x, weight, b], out, op),
            None => self.record(&[x, weight], out, op),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v >= E::zero() { v } else { E::zero() });
        self.record(&[x], out, Relu)
    }

    /// `y = x` for `x >= 0`, `y = a_c * x` otherwise, with one slope per
    /// channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.check(x)?;
        self.check(slope)?;
        let (xv, av) = (self.value(x), self.value(slope));
        if xv.rank() < 2 || av.shape() != [xv.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: xv.shape().to_vec(),
                rhs: av.shape().to_vec(),
            });
        }
        let (outer, channels, inner) = split_at_axis(xv.shape(), 1);
        let mut out = xv.clone();
        for o in 0..outer {
            for c in 0..channels {
                let a = av.data()[c];
                let start = (o * channels + c) * inner;
                for v in &mut out.data_mut()[start..start + inner] {
                    if *v < E::zero() {
                        *v = *v * a;
                    }
                }
            }
        }
        self.record(&[x, slope], out, PreluOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(sigmoid);
        self.record(&[x], out, Sigmoid)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        xv.check_axis(axis)?;
        let (outer, extent, inner) = split_at_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![E::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let max = (0..extent)
                    .map(|j| d[base + j * inner])
                    .fold(E::neg_infinity(), E::max);
                let mut total = E::zero();
                for j in 0..extent {
                    let e = (d[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..extent {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.record(&[x], out, Softmax { axis })
    }

    /// Multiplies each `[N,C,...]` feature plane by the matching entry of `v`
    /// (shape `[N,C]` or `[N,C,1,1]`).
    pub fn scale_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check(x)?;
        self.check(v)?;
        let (xv, vv) = (self.value(x), self.value(v));
        let ok = xv.rank() >= 2
            && vv.rank() >= 2
            && vv.shape()[..2] == xv.shape()[..2]
            && vv.shape()[2..].iter().all(|&d| d == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let inner = xv.numel() / vv.numel();
        let mut out = xv.clone();
        for (r, &s) in vv.data().iter().enumerate() {
            out.data_mut()[r * inner..(r + 1) * inner]
                .iter_mut()
                .for_each(|x| *x = *x * s);
        }
        self.record(&[x, v], out, ScaleChannels)
    }
}

/// Fan-in scaled Gaussian initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Convolution layer: `weight [C_out,C_in,k,k]`, `bias [C_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<E: Scalar>(
        params: &mut ParamSet<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::config(format!(
                "{name}: kernel must be odd and channels positive (k={kernel}, {c_in}->{c_out})"
            )));
        }
        let weight = params.register(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
        );
        let bias = params.register(format!("{name}.bias"), Tensor::zeros([c_out]));
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)))
    }

    pub fn zero<E: Scalar>(&self, params: &mut ParamSet<E>) {
        for id in [self.weight, self.bias] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = E::zero());
        }
    }
}

/// PReLU with a learnable slope per channel, initialized to 0.25.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl Prelu {
    pub const INITIAL_SLOPE: f64 = 0.25;

    pub fn new<E: Scalar>(params: &mut ParamSet<E>, name: &str, channels: usize) -> Self {
        let slope = params.register(
            format!("{name}.slope"),
            Tensor::full([channels], E::of(Self::INITIAL_SLOPE)),
        );
        Prelu { slope, channels }
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, x: Var) -> Result<Var> {
        tape.prelu(x, bound.var(self.slope))
    }
}
