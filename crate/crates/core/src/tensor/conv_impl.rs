//! 2-d convolution (forward + backward) and the matmul kernels behind it.
//!
//! Convolutions lower to im2col + matmul, with fast paths for 1x1
//! projections and depthwise kernels. All parallel loops write disjoint
//! output regions and keep a fixed per-element accumulation order, so
//! results are bitwise identical regardless of thread count.

use rayon::prelude::*;

use super::{Element, Result, Tensor, TensorError};

/// C = A (m x k) * B (k x n), all row-major.
pub(crate) fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::zero(); m * n];
    let min_rows = ((1 << 13) / n.max(1)).max(1);
    out.par_chunks_mut(n)
        .with_min_len(min_rows)
        .enumerate()
        .for_each(|(i, row)| {
            for kk in 0..k {
                let aik = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        });
    out
}

/// C = A (m x p) * B^T where B is (n x p): rows of both operands are
/// contiguous, so every output element is a single dot product.
pub(crate) fn matmul_bt<E: Element>(a: &[E], b: &[E], m: usize, p: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    let mut out = vec![E::zero(); m * n];
    let min_rows = ((1 << 13) / n.max(1)).max(1);
    out.par_chunks_mut(n)
        .with_min_len(min_rows)
        .enumerate()
        .for_each(|(i, row)| {
            let arow = &a[i * p..(i + 1) * p];
            for (j, o) in row.iter_mut().enumerate() {
                let brow = &b[j * p..(j + 1) * p];
                let mut acc = E::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *o = acc;
            }
        });
    out
}

fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn im2col<E: Element>(src: &[E], g: ConvGeom, cols: &mut [E]) {
    let cin_g = g.cin / g.groups;
    let p = g.oh * g.ow;
    debug_assert_eq!(src.len(), cin_g * g.h * g.w);
    debug_assert_eq!(cols.len(), cin_g * g.kh * g.kw * p);
    for v in cols.iter_mut() {
        *v = E::zero();
    }
    for c in 0..cin_g {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let y = y as usize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x < 0 || x as usize >= g.w {
                            continue;
                        }
                        cols[krow + oy * g.ow + ox] = src[(c * g.h + y) * g.w + x as usize];
                    }
                }
            }
        }
    }
}

fn col2im_add<E: Element>(cols: &[E], g: ConvGeom, dst: &mut [E]) {
    let cin_g = g.cin / g.groups;
    let p = g.oh * g.ow;
    for c in 0..cin_g {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let y = y as usize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x < 0 || x as usize >= g.w {
                            continue;
                        }
                        dst[(c * g.h + y) * g.w + x as usize] += cols[krow + oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<E: Element>(src: &[E], wts: &[E], g: ConvGeom, out: &mut [E]) {
    // groups == cin == cout; one kernel plane per channel.
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    out.par_chunks_mut(plane_out)
        .with_min_len(1)
        .enumerate()
        .for_each(|(nc, dst)| {
            let c = nc % g.cin;
            let s = &src[nc * plane_in..(nc + 1) * plane_in];
            let k = &wts[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = E::zero();
                    for ky in 0..g.kh {
                        let y = (oy * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            if x < 0 || x as usize >= g.w {
                                continue;
                            }
                            acc += s[y as usize * g.w + x as usize] * k[ky * g.kw + kx];
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        });
}

impl<E: Element> Tensor<E> {
    /// 2-d convolution over an (N, Cin, H, W) input with an
    /// (Cout, Cin/groups, kh, kw) weight. Output spatial extent is
    /// (H + 2*pad - kh)/stride + 1.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let (n, cin, h, w) = self.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
        assert!(stride >= 1, "conv2d stride must be >= 1");
        if groups == 0 || cin % groups != 0 {
            return Err(TensorError::GroupsIndivisible { cin, groups });
        }
        if cout % groups != 0 {
            return Err(TensorError::GroupsIndivisible { cin: cout, groups });
        }
        if wcin != cin / groups {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                what: "weight input-channel dim",
                expected: vec![cout, cin / groups, kh, kw],
                got: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    what: "bias",
                    expected: vec![cout],
                    got: b.shape().to_vec(),
                });
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::KernelTooLarge {
                op: "conv2d",
                k: kh,
                k2: kw,
                pad: padding,
                h,
                w,
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            cout,
            kh,
            kw,
            h,
            w,
            oh,
            ow,
            stride,
            pad: padding,
            groups,
        };

        let src = self.data();
        let wts = weight.data();
        let p = oh * ow;
        let mut out = vec![E::zero(); n * cout * p];

        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0 && groups == 1;
        let depthwise = groups == cin && cout == cin && groups > 1;

        if pointwise {
            for ni in 0..n {
                let res = matmul(&wts, &src[ni * cin * p..(ni + 1) * cin * p], cout, cin, p);
                out[ni * cout * p..(ni + 1) * cout * p].copy_from_slice(&res);
            }
        } else if depthwise {
            depthwise_forward(&src, &wts, geom, &mut out);
        } else {
            let cin_g = cin / groups;
            let cout_g = cout / groups;
            let k_dim = cin_g * kh * kw;
            let mut cols = vec![E::zero(); k_dim * p];
            for ni in 0..n {
                for gi in 0..groups {
                    let in_off = (ni * cin + gi * cin_g) * h * w;
                    im2col(&src[in_off..in_off + cin_g * h * w], geom, &mut cols);
                    let w_off = gi * cout_g * k_dim;
                    let res = matmul(&wts[w_off..w_off + cout_g * k_dim], &cols, cout_g, k_dim, p);
                    let out_off = (ni * cout + gi * cout_g) * p;
                    out[out_off..out_off + cout_g * p].copy_from_slice(&res);
                }
            }
        }

        if let Some(b) = bias {
            let bd = b.data();
            for ni in 0..n {
                for co in 0..cout {
                    let bv = bd[co];
                    for v in &mut out[(ni * cout + co) * p..(ni * cout + co + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        drop(src);
        drop(wts);

        let input = self.clone();
        let wt = weight.clone();
        let bs = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, cout, oh, ow], parents, move |o| {
            conv2d_backward(o, &input, &wt, bs.as_ref(), geom, pointwise, depthwise);
        }))
    }
}

fn conv2d_backward<E: Element>(
    out: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    g: ConvGeom,
    pointwise: bool,
    depthwise: bool,
) {
    let grad = out.grad().expect("conv2d backward without output gradient");
    let n = input.shape()[0];
    let p = g.oh * g.ow;
    let src = input.data();
    let wts = weight.data();
    let need_dx = input.requires_grad();
    let need_dw = weight.requires_grad();

    if pointwise {
        if need_dx {
            let wt_t = transpose(&wts, g.cout, g.cin);
            let mut dx = vec![E::zero(); src.len()];
            for ni in 0..n {
                let res = matmul(
                    &wt_t,
                    &grad[ni * g.cout * p..(ni + 1) * g.cout * p],
                    g.cin,
                    g.cout,
                    p,
                );
                dx[ni * g.cin * p..(ni + 1) * g.cin * p].copy_from_slice(&res);
            }
            drop(src);
            input.accumulate_grad(&dx);
        }
        if need_dw {
            let src = input.data();
            let mut dw = vec![E::zero(); wts.len()];
            for ni in 0..n {
                let part = matmul_bt(
                    &grad[ni * g.cout * p..(ni + 1) * g.cout * p],
                    &src[ni * g.cin * p..(ni + 1) * g.cin * p],
                    g.cout,
                    p,
                    g.cin,
                );
                for (d, v) in dw.iter_mut().zip(part) {
                    *d += v;
                }
            }
            drop(src);
            drop(wts);
            weight.accumulate_grad(&dw);
        }
    } else if depthwise {
        let plane_in = g.h * g.w;
        if need_dx {
            let mut dx = vec![E::zero(); n * g.cin * plane_in];
            dx.par_chunks_mut(plane_in)
                .with_min_len(1)
                .enumerate()
                .for_each(|(nc, dst)| {
                    let c = nc % g.cin;
                    let go = &grad[nc * p..(nc + 1) * p];
                    let k = &wts[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let gv = go[oy * g.ow + ox];
                            for ky in 0..g.kh {
                                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                if y < 0 || y as usize >= g.h {
                                    continue;
                                }
                                for kx in 0..g.kw {
                                    let x = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if x < 0 || x as usize >= g.w {
                                        continue;
                                    }
                                    dst[y as usize * g.w + x as usize] += gv * k[ky * g.kw + kx];
                                }
                            }
                        }
                    }
                });
            input.accumulate_grad(&dx);
        }
        if need_dw {
            let kk = g.kh * g.kw;
            let mut dw = vec![E::zero(); g.cin * kk];
            dw.par_chunks_mut(kk)
                .with_min_len(1)
                .enumerate()
                .for_each(|(c, dst)| {
                    for ni in 0..n {
                        let nc = ni * g.cin + c;
                        let go = &grad[nc * p..(nc + 1) * p];
                        let s = &src[nc * plane_in..(nc + 1) * plane_in];
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let gv = go[oy * g.ow + ox];
                                for ky in 0..g.kh {
                                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                    if y < 0 || y as usize >= g.h {
                                        continue;
                                    }
                                    for kx in 0..g.kw {
                                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if x < 0 || x as usize >= g.w {
                                            continue;
                                        }
                                        dst[ky * g.kw + kx] +=
                                            gv * s[y as usize * g.w + x as usize];
                                    }
                                }
                            }
                        }
                    }
                });
            drop(src);
            drop(wts);
            weight.accumulate_grad(&dw);
        }
    } else {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let k_dim = cin_g * g.kh * g.kw;
        let mut cols = vec![E::zero(); k_dim * p];
        let mut dx = if need_dx {
            vec![E::zero(); src.len()]
        } else {
            Vec::new()
        };
        let mut dw = if need_dw {
            vec![E::zero(); wts.len()]
        } else {
            Vec::new()
        };
        // Transposed weight per group, built once, used for every batch item.
        let wt_t: Vec<Vec<E>> = if need_dx {
            (0..g.groups)
                .map(|gi| {
                    transpose(
                        &wts[gi * cout_g * k_dim..(gi + 1) * cout_g * k_dim],
                        cout_g,
                        k_dim,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        for ni in 0..n {
            for gi in 0..g.groups {
                let go_off = (ni * g.cout + gi * cout_g) * p;
                let go = &grad[go_off..go_off + cout_g * p];
                if need_dw {
                    let in_off = (ni * g.cin + gi * cin_g) * g.h * g.w;
                    im2col(&src[in_off..in_off + cin_g * g.h * g.w], g, &mut cols);
                    let part = matmul_bt(go, &cols, cout_g, p, k_dim);
                    let w_off = gi * cout_g * k_dim;
                    for (d, v) in dw[w_off..w_off + cout_g * k_dim].iter_mut().zip(part) {
                        *d += v;
                    }
                }
                if need_dx {
                    let dcols = matmul(&wt_t[gi], go, k_dim, cout_g, p);
                    let in_off = (ni * g.cin + gi * cin_g) * g.h * g.w;
                    col2im_add(&dcols, g, &mut dx[in_off..in_off + cin_g * g.h * g.w]);
                }
            }
        }
        drop(src);
        drop(wts);
        if need_dx {
            input.accumulate_grad(&dx);
        }
        if need_dw {
            weight.accumulate_grad(&dw);
        }
    }

    if let Some(b) = bias {
        if b.requires_grad() {
            let mut db = vec![E::zero(); g.cout];
            for ni in 0..n {
                for co in 0..g.cout {
                    let base = (ni * g.cout + co) * p;
                    let mut acc = E::zero();
                    for &v in &grad[base..base + p] {
                        acc += v;
                    }
                    db[co] += acc;
                }
            }
            b.accumulate_grad(&db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        // Against the B-transposed variant.
        let bt = vec![5.0, 7.0, 6.0, 8.0];
        assert_eq!(matmul_bt(&a, &bt, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_scaling_identity() {
        // 1x1x3x3 ones, 1x1x1x1 weight [2] -> all-2 output.
        let x = Tensor::<f64>::from_vec(vec![1.0; 9], &[1, 1, 3, 3]);
        let w = Tensor::from_vec(vec![2.0], &[1, 1, 1, 1]);
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), vec![2.0; 9]);
    }

    #[test]
    fn conv_hand_sum() {
        // [[1,2],[3,4]] with an all-ones 2x2 kernel -> [[10]].
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = Tensor::from_vec(vec![1.0; 4], &[1, 1, 2, 2]);
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![10.0]);
    }

    #[test]
    fn conv_stride_padding_shape() {
        let x = Tensor::<f32>::zeros(&[2, 3, 8, 10]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 5]);
    }

    #[test]
    fn depthwise_group_separability() {
        // Perturbing channel c' leaves channel c != c' unchanged.
        let base: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut pert = base.clone();
        pert[5] += 10.0; // inside channel 0 of image 0
        let w: Vec<f64> = (0..3 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let wt = Tensor::from_vec(w, &[3, 1, 3, 3]);
        let y0 = Tensor::from_vec(base, &[2, 3, 4, 4])
            .conv2d(&wt, None, 1, 1, 3)
            .unwrap();
        let y1 = Tensor::from_vec(pert, &[2, 3, 4, 4])
            .conv2d(&wt, None, 1, 1, 3)
            .unwrap();
        let plane = 16;
        let a = y0.to_vec();
        let b = y1.to_vec();
        // channel 0 of image 0 differs...
        assert!(a[..plane] != b[..plane]);
        // ...channels 1 and 2 are bitwise identical, as is image 1.
        assert_eq!(a[plane..], b[plane..]);
    }

    #[test]
    fn conv_group_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(matches!(
            x.conv2d(&w, None, 1, 0, 2),
            Err(TensorError::GroupsIndivisible { cin: 3, groups: 2 })
        ));
    }

    #[test]
    fn conv_weight_shape_error_names_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let w = Tensor::zeros(&[2, 3, 1, 1]);
        let err = x.conv2d(&w, None, 1, 0, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("weight input-channel dim"), "{msg}");
    }

    #[test]
    fn grouped_conv_matches_two_separate_convs() {
        // groups=2 on 4 channels equals two independent 2-channel convs.
        let x: Vec<f64> = (0..4 * 5 * 5).map(|i| ((i * 7 % 13) as f64) * 0.1).collect();
        let w: Vec<f64> = (0..4 * 2 * 3 * 3).map(|i| ((i * 5 % 11) as f64) * 0.01).collect();
        let xt = Tensor::from_vec(x.clone(), &[1, 4, 5, 5]);
        let wt = Tensor::from_vec(w.clone(), &[4, 2, 3, 3]);
        let y = xt.conv2d(&wt, None, 1, 1, 2).unwrap();

        let xa = Tensor::from_vec(x[..50].to_vec(), &[1, 2, 5, 5]);
        let xb = Tensor::from_vec(x[50..].to_vec(), &[1, 2, 5, 5]);
        let wa = Tensor::from_vec(w[..36].to_vec(), &[2, 2, 3, 3]);
        let wb = Tensor::from_vec(w[36..].to_vec(), &[2, 2, 3, 3]);
        let ya = xa.conv2d(&wa, None, 1, 1, 1).unwrap();
        let yb = xb.conv2d(&wb, None, 1, 1, 1).unwrap();
        let mut expect = ya.to_vec();
        expect.extend(yb.to_vec());
        let got = y.to_vec();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
