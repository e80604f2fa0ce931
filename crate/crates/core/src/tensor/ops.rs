//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and registers a closure that
//! maps the output gradient onto the parents. Shapes are validated up front;
//! the backward path can assume they are consistent.

use std::cell::Ref;

use statrs::function::erf::erf;

use super::{Element, Result, Tensor, TensorError};

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Gelu,
    Sigmoid,
    Elu,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            what: "operands",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    fn grad_ref(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.grad.borrow(), |g| {
            g.as_deref().expect("backward called without output gradient")
        })
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, other)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |out| {
                let g = out.grad_ref();
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g);
                }
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, other)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |out| {
                let g = out.grad_ref();
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, other)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |out| {
                let g = out.grad_ref();
                if a.requires_grad() {
                    let da: Vec<E> =
                        g.iter().zip(b.data().iter()).map(|(&g, &b)| g * b).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<E> =
                        g.iter().zip(a.data().iter()).map(|(&g, &a)| g * a).collect();
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("div", self, other)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a / b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |out| {
                let g = out.grad_ref();
                if a.requires_grad() {
                    let da: Vec<E> =
                        g.iter().zip(b.data().iter()).map(|(&g, &b)| g / b).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let bd = b.data();
                    let db: Vec<E> = g
                        .iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect();
                    drop(ad);
                    drop(bd);
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v + c).collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            a.accumulate_grad(&g);
        })
    }

    pub fn mul_scalar(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v * c).collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let da: Vec<E> = g.iter().map(|&v| v * c).collect();
            a.accumulate_grad(&da);
        })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.mul_scalar(-E::one())
    }

    pub fn abs(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.abs()).collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let da: Vec<E> = g
                .iter()
                .zip(a.data().iter())
                .map(|(&g, &x)| {
                    if x > E::zero() {
                        g
                    } else if x < E::zero() {
                        -g
                    } else {
                        E::zero()
                    }
                })
                .collect();
            a.accumulate_grad(&da);
        })
    }

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.exp()).collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let od = out.data();
            let da: Vec<E> = g.iter().zip(od.iter()).map(|(&g, &y)| g * y).collect();
            drop(od);
            a.accumulate_grad(&da);
        })
    }

    /// Elementwise 1/x.
    pub fn reciprocal(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| E::one() / v).collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let od = out.data();
            let da: Vec<E> = g.iter().zip(od.iter()).map(|(&g, &y)| -g * y * y).collect();
            drop(od);
            a.accumulate_grad(&da);
        })
    }

    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let a = self.clone();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |out| {
            let g = out.grad_ref()[0];
            a.accumulate_grad(&vec![g; n]);
        })
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::one() / E::from_f64(n as f64);
        let total: E = self.data().iter().copied().sum();
        let a = self.clone();
        Tensor::from_op(vec![total * inv], vec![1], vec![self.clone()], move |out| {
            let g = out.grad_ref()[0] * inv;
            a.accumulate_grad(&vec![g; n]);
        })
    }

    /// Divide by a one-element tensor (differentiable in both operands).
    pub fn div_by_scalar_tensor(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "div_by_scalar_tensor",
                what: "divisor",
                expected: vec![1],
                got: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let data: Vec<E> = self.data().iter().map(|&v| v / sv).collect();
        let (a, b) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            move |out| {
                let g = out.grad_ref();
                let sv = b.item();
                if a.requires_grad() {
                    let da: Vec<E> = g.iter().map(|&v| v / sv).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut acc = E::zero();
                    for (&g, &x) in g.iter().zip(a.data().iter()) {
                        acc += g * x;
                    }
                    b.accumulate_grad(&[-acc / (sv * sv)]);
                }
            },
        ))
    }

    /// Mean over the channel dimension: (N, C, H, W) -> (N, 1, H, W).
    pub fn mean_channels(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("mean_channels")?;
        let hw = h * w;
        let inv = E::one() / E::from_f64(c as f64);
        let src = self.data();
        let mut data = vec![E::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let dst = &mut data[ni * hw..(ni + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + hw]) {
                    *d += s;
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, 1, h, w],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for (d, &gv) in da[base..base + hw].iter_mut().zip(&g[ni * hw..]) {
                            *d = gv * inv;
                        }
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c1, h, w) = self.dims4("concat_channels")?;
        let (n2, c2, h2, w2) = other.dims4("concat_channels")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                what: "spatial/batch dims",
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        let hw = h * w;
        let src_a = self.data();
        let src_b = other.data();
        let mut data = Vec::with_capacity(n * (c1 + c2) * hw);
        for ni in 0..n {
            data.extend_from_slice(&src_a[ni * c1 * hw..(ni + 1) * c1 * hw]);
            data.extend_from_slice(&src_b[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        drop(src_a);
        drop(src_b);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            vec![n, c1 + c2, h, w],
            vec![self.clone(), other.clone()],
            move |out| {
                let g = out.grad_ref();
                let stride = (c1 + c2) * hw;
                if a.requires_grad() {
                    let mut da = Vec::with_capacity(n * c1 * hw);
                    for ni in 0..n {
                        da.extend_from_slice(&g[ni * stride..ni * stride + c1 * hw]);
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = Vec::with_capacity(n * c2 * hw);
                    for ni in 0..n {
                        db.extend_from_slice(&g[ni * stride + c1 * hw..(ni + 1) * stride]);
                    }
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Reflect-pad spatial dims by one pixel (PyTorch "reflect" convention,
    /// edge pixel not repeated). Needs H, W >= 2.
    pub fn reflect_pad1(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("reflect_pad1")?;
        if h < 2 || w < 2 {
            return Err(TensorError::KernelTooLarge {
                op: "reflect_pad1",
                k: 3,
                k2: 3,
                pad: 1,
                h,
                w,
            });
        }
        let (oh, ow) = (h + 2, w + 2);
        let reflect = |i: isize, len: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= len {
                2 * len - 2 - i as usize
            } else {
                i as usize
            }
        };
        let src = self.data();
        let mut data = vec![E::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let dbase = nc * oh * ow;
            for oy in 0..oh {
                let sy = reflect(oy as isize - 1, h);
                for ox in 0..ow {
                    let sx = reflect(ox as isize - 1, w);
                    data[dbase + oy * ow + ox] = src[sbase + sy * w + sx];
                }
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let sbase = nc * h * w;
                    let dbase = nc * oh * ow;
                    for oy in 0..oh {
                        let sy = reflect(oy as isize - 1, h);
                        for ox in 0..ow {
                            let sx = reflect(ox as isize - 1, w);
                            da[sbase + sy * w + sx] += g[dbase + oy * ow + ox];
                        }
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Forward difference along width: out[..., x] = in[..., x+1] - in[..., x].
    pub fn diff_x(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("diff_x")?;
        if w < 2 {
            return Err(TensorError::RankMismatch {
                op: "diff_x",
                rank: 4,
                got: self.shape().to_vec(),
            });
        }
        let src = self.data();
        let ow = w - 1;
        let mut data = vec![E::zero(); n * c * h * ow];
        for row in 0..n * c * h {
            let s = &src[row * w..(row + 1) * w];
            let d = &mut data[row * ow..(row + 1) * ow];
            for x in 0..ow {
                d[x] = s[x + 1] - s[x];
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, c, h, ow],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * h * w];
                for row in 0..n * c * h {
                    let gs = &g[row * ow..(row + 1) * ow];
                    let d = &mut da[row * w..(row + 1) * w];
                    for x in 0..ow {
                        d[x + 1] += gs[x];
                        d[x] -= gs[x];
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Forward difference along height.
    pub fn diff_y(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("diff_y")?;
        if h < 2 {
            return Err(TensorError::RankMismatch {
                op: "diff_y",
                rank: 4,
                got: self.shape().to_vec(),
            });
        }
        let src = self.data();
        let oh = h - 1;
        let mut data = vec![E::zero(); n * c * oh * w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * oh * w..(plane + 1) * oh * w];
            for y in 0..oh {
                for x in 0..w {
                    d[y * w + x] = s[(y + 1) * w + x] - s[y * w + x];
                }
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, w],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g[plane * oh * w..(plane + 1) * oh * w];
                    let d = &mut da[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..w {
                            d[(y + 1) * w + x] += gs[y * w + x];
                            d[y * w + x] -= gs[y * w + x];
                        }
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Nearest-neighbor 2x upsampling: every source pixel becomes a 2x2 block.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("upsample_nearest_2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![E::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut da[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(y / 2) * w + x / 2] += gs[y * ow + x];
                        }
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Bilinear resize to an arbitrary spatial size (half-pixel centers,
    /// matching the usual align_corners=false convention).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("upsample_bilinear")?;
        assert!(oh > 0 && ow > 0);
        let coords = |o: usize, osz: usize, isz: usize| -> (usize, usize, f64) {
            let scale = isz as f64 / osz as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(isz - 1);
            let i1 = (i0 + 1).min(isz - 1);
            (i0, i1, src - i0 as f64)
        };
        let src = self.data();
        let mut data = vec![E::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, fy) = coords(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = coords(ox, ow, w);
                    let v00 = s[y0 * w + x0].to_f64();
                    let v01 = s[y0 * w + x1].to_f64();
                    let v10 = s[y1 * w + x0].to_f64();
                    let v11 = s[y1 * w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    d[oy * ow + ox] = E::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            vec![self.clone()],
            move |out| {
                let g = out.grad_ref();
                let mut da = vec![E::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut da[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = coords(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = coords(ox, ow, w);
                            let gv = gs[oy * ow + ox].to_f64();
                            d[y0 * w + x0] += E::from_f64(gv * (1.0 - fx) * (1.0 - fy));
                            d[y0 * w + x1] += E::from_f64(gv * fx * (1.0 - fy));
                            d[y1 * w + x0] += E::from_f64(gv * (1.0 - fx) * fy);
                            d[y1 * w + x1] += E::from_f64(gv * fx * fy);
                        }
                    }
                }
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Elementwise nonlinearity; sigmoid output is strictly inside (0, 1)
    /// for non-saturating inputs.
    pub fn nonlinearity(&self, kind: Nonlinearity) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| {
                let x = v.to_f64();
                let y = match kind {
                    Nonlinearity::Gelu => gelu_f64(x),
                    Nonlinearity::Sigmoid => sigmoid_f64(x),
                    Nonlinearity::Elu => {
                        if x > 0.0 {
                            x
                        } else {
                            x.exp() - 1.0
                        }
                    }
                };
                E::from_f64(y)
            })
            .collect();
        let a = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let xs = a.data();
            let da: Vec<E> = g
                .iter()
                .zip(xs.iter())
                .map(|(&g, &v)| {
                    let x = v.to_f64();
                    let d = match kind {
                        Nonlinearity::Gelu => gelu_grad_f64(x),
                        Nonlinearity::Sigmoid => {
                            let s = sigmoid_f64(x);
                            s * (1.0 - s)
                        }
                        Nonlinearity::Elu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                x.exp()
                            }
                        }
                    };
                    g * E::from_f64(d)
                })
                .collect();
            drop(xs);
            a.accumulate_grad(&da);
        })
    }

    pub fn gelu(&self) -> Tensor<E> {
        self.nonlinearity(Nonlinearity::Gelu)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.nonlinearity(Nonlinearity::Sigmoid)
    }

    pub fn elu(&self) -> Tensor<E> {
        self.nonlinearity(Nonlinearity::Elu)
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&self) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let last = *shape.last().expect("softmax on 0-d tensor");
        let src = self.data();
        let mut data = vec![E::zero(); src.len()];
        for (row_in, row_out) in src.chunks(last).zip(data.chunks_mut(last)) {
            softmax_slice(row_in, row_out);
        }
        drop(src);
        let a = self.clone();
        Tensor::from_op(data, shape, vec![self.clone()], move |out| {
            let g = out.grad_ref();
            let ys = out.data();
            let mut da = vec![E::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(last).zip(ys.chunks(last)).zip(da.chunks_mut(last)) {
                let mut dot = E::zero();
                for (&gv, &yv) in gr.iter().zip(yr) {
                    dot += gv * yv;
                }
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            drop(ys);
            a.accumulate_grad(&da);
        })
    }

    /// Layer normalization over the channel dimension of an (N, C, H, W)
    /// tensor: at every spatial position the C-vector is standardized and
    /// then scaled/shifted by gamma and beta (each of length C).
    pub fn layer_norm_channels(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4("layer_norm_channels")?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if t.numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_channels",
                    what: if name == "gamma" { "gamma" } else { "beta" },
                    expected: vec![c],
                    got: t.shape().to_vec(),
                });
            }
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let hw = h * w;
        let src = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let inv_c = 1.0 / c as f64;
        let mut data = vec![E::zero(); src.len()];
        // Cache per-position mean and inverse stddev for the backward pass.
        let mut inv_std = vec![0.0f64; n * hw];
        let mut means = vec![0.0f64; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += src[(ni * c + ci) * hw + p].to_f64();
                }
                mean *= inv_c;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = src[(ni * c + ci) * hw + p].to_f64() - mean;
                    var += d * d;
                }
                var *= inv_c;
                let istd = 1.0 / (var + eps).sqrt();
                means[ni * hw + p] = mean;
                inv_std[ni * hw + p] = istd;
                for ci in 0..c {
                    let idx = (ni * c + ci) * hw + p;
                    let xh = (src[idx].to_f64() - mean) * istd;
                    data[idx] = E::from_f64(xh * gd[ci].to_f64() + bd[ci].to_f64());
                }
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        let (a, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |out| {
                let g = out.grad_ref();
                let src = a.data();
                let gd = gm.data();
                let mut da = vec![E::zero(); src.len()];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for ni in 0..n {
                    for p in 0..hw {
                        let mean = means[ni * hw + p];
                        let istd = inv_std[ni * hw + p];
                        // ghat = dL/dxhat, plus the two reduction terms.
                        let mut sum_ghat = 0.0;
                        let mut sum_ghat_xhat = 0.0;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * hw + p;
                            let xh = (src[idx].to_f64() - mean) * istd;
                            let gh = g[idx].to_f64() * gd[ci].to_f64();
                            sum_ghat += gh;
                            sum_ghat_xhat += gh * xh;
                            dgamma[ci] += g[idx].to_f64() * xh;
                            dbeta[ci] += g[idx].to_f64();
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * hw + p;
                            let xh = (src[idx].to_f64() - mean) * istd;
                            let gh = g[idx].to_f64() * gd[ci].to_f64();
                            let dx = istd
                                * (gh - inv_c * sum_ghat - xh * inv_c * sum_ghat_xhat);
                            da[idx] = E::from_f64(dx);
                        }
                    }
                }
                drop(src);
                drop(gd);
                if a.requires_grad() {
                    a.accumulate_grad(&da);
                }
                if gm.requires_grad() {
                    let dg: Vec<E> = dgamma.iter().map(|&v| E::from_f64(v)).collect();
                    gm.accumulate_grad(&dg);
                }
                if bt.requires_grad() {
                    let db: Vec<E> = dbeta.iter().map(|&v| E::from_f64(v)).collect();
                    bt.accumulate_grad(&db);
                }
            },
        ))
    }
}

/// Stable softmax of one slice into another of the same length.
pub(crate) fn softmax_slice<E: Element>(input: &[E], out: &mut [E]) {
    debug_assert_eq!(input.len(), out.len());
    let mut max = input[0];
    for &v in &input[1..] {
        max = max.max_val(v);
    }
    let mut total = E::zero();
    for (o, &v) in out.iter_mut().zip(input) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    let inv = E::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = Tensor::<f64>::from_vec(vec![0.0], &[1]).sigmoid();
        assert_eq!(t.item(), 0.5);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let t = Tensor::<f64>::from_vec(vec![0.0], &[1]).gelu();
        assert_eq!(t.item(), 0.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        let xs = vec![-3.7, -1.0, 0.3, 2.9, 11.0];
        let t = Tensor::<f64>::from_vec(xs.clone(), &[5]).sigmoid();
        let tn = Tensor::<f64>::from_vec(xs.iter().map(|v| -v).collect(), &[5]).sigmoid();
        for (a, b) in t.to_vec().iter().zip(tn.to_vec()) {
            assert!(close(a + b, 1.0, 1e-15));
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let t = Tensor::<f32>::from_vec(vec![0.0, 0.0], &[2]).softmax_lastdim();
        assert_eq!(t.to_vec(), vec![0.5, 0.5]);
        let big = Tensor::<f32>::from_vec(vec![1000.0, 0.0], &[2]).softmax_lastdim();
        let v = big.to_vec();
        assert!(v[0].is_finite() && v[1].is_finite());
        assert!(close(v[0] as f64, 1.0, 1e-6) && close(v[1] as f64, 0.0, 1e-6));
    }

    #[test]
    fn softmax_ln2_case() {
        // [ln 2, 0] -> [2/3, 1/3]
        let t = Tensor::<f64>::from_vec(vec![2.0f64.ln(), 0.0], &[2]).softmax_lastdim();
        let v = t.to_vec();
        assert!(close(v[0], 2.0 / 3.0, 1e-12));
        assert!(close(v[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn layer_norm_basic_cases() {
        // Constant input -> zeros (eps guards the zero variance).
        let x = Tensor::<f64>::from_vec(vec![5.0; 4], &[1, 4, 1, 1]);
        let gamma = Tensor::from_vec(vec![1.0; 4], &[4]);
        let beta = Tensor::from_vec(vec![0.0; 4], &[4]);
        let y = x.layer_norm_channels(&gamma, &beta, 1e-6).unwrap();
        for v in y.to_vec() {
            assert!(close(v, 0.0, 1e-9));
        }

        // [1, 3] with eps -> 0: mean 2, population std 1 -> [-1, 1].
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[1, 2, 1, 1]);
        let gamma = Tensor::from_vec(vec![1.0; 2], &[2]);
        let beta = Tensor::from_vec(vec![0.0; 2], &[2]);
        let y = x.layer_norm_channels(&gamma, &beta, 1e-14).unwrap();
        let v = y.to_vec();
        assert!(close(v[0], -1.0, 1e-6) && close(v[1], 1.0, 1e-6));

        // gamma = 0, beta = 5 -> all-5 output.
        let gamma = Tensor::from_vec(vec![0.0; 2], &[2]);
        let beta = Tensor::from_vec(vec![5.0; 2], &[2]);
        let y = x.layer_norm_channels(&gamma, &beta, 1e-6).unwrap();
        for v in y.to_vec() {
            assert!(close(v, 5.0, 1e-12));
        }
    }

    #[test]
    fn upsample_nearest_blocks() {
        let t = Tensor::<f32>::from_vec(vec![7.0], &[1, 1, 1, 1])
            .upsample_nearest_2x()
            .unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.to_vec(), vec![7.0; 4]);

        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2])
            .upsample_nearest_2x()
            .unwrap();
        assert_eq!(
            t.to_vec(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_nearest_gradient_is_four() {
        let x = Tensor::<f64>::variable(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let loss = x.upsample_nearest_2x().unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn diff_x_values() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 4.0, 9.0], &[1, 1, 1, 3]);
        let d = x.diff_x().unwrap();
        assert_eq!(d.to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn concat_channels_splits_gradient() {
        let a = Tensor::<f64>::variable(vec![1.0, 2.0], &[1, 1, 1, 2]);
        let b = Tensor::<f64>::variable(vec![3.0, 4.0], &[1, 1, 1, 2]);
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), &[1, 2, 1, 2]);
        let loss = cat.mul_scalar(2.0).sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = x.upsample_bilinear(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = Tensor::<f64>::from_vec(vec![3.5; 6], &[1, 1, 2, 3]);
        let y = x.upsample_bilinear(8, 12).unwrap();
        for v in y.to_vec() {
            assert!(close(v, 3.5, 1e-12));
        }
    }
}
