//! 2-D convolution via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

/// Geometry of one convolution applied to a single batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            );
        }
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range for kernel column `kx` when stride is 1.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[cin, h, w]` image into a `[cin*kh*kw, ho*wo]` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.ox_range(kx);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back into an image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.ox_range(kx);
                        let start = (lo + kx).saturating_sub(g.pad);
                        for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in in_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return shape_err(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        );
    }
    Ok((n, cout, ConvGeom::new(cin, h, wd, kh, kw, stride, pad)?))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != cout {
            return shape_err("conv2d", format!("bias has {} entries for {cout} outputs", b.numel()));
        }
    }
    let k = g.cols_rows();
    let p = g.out_pixels();
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for i in 0..n {
        let xi = x.item(i);
        let rhs: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        let oi = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
        matmul(cout, k, p, T::one(), w.data(), false, rhs, false, T::zero(), oi);
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in oi[co * p..(co + 1) * p].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, cout, g) = geometry(x, w, stride, pad)?;
    let k = g.cols_rows();
    let p = g.out_pixels();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); k * p];
    for i in 0..n {
        let dyi = dy.item(i);
        let xi = x.item(i);
        let rhs: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        matmul(cout, p, k, T::one(), dyi, false, rhs, true, T::one(), dw.data_mut());
        for (co, d) in db.data_mut().iter_mut().enumerate() {
            *d += dyi[co * p..(co + 1) * p].iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            let per = g.cin * g.h * g.w;
            let dxi = &mut dx.data_mut()[i * per..(i + 1) * per];
            if g.is_pointwise() {
                matmul(k, cout, p, T::one(), w.data(), true, dyi, false, T::one(), dxi);
            } else {
                matmul(k, cout, p, T::one(), w.data(), true, dyi, false, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxi);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (4, 1, 1), (1, 1, 0), (2, 2, 0)] {
            let x = pseudo(&[2, 3, 7, 6], 0.731);
            let w = pseudo(&[4, 3, k, k], 0.317);
            let got = conv2d_forward(&x, &w, None, s, p).unwrap();
            let want = direct_conv(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (3, 2, 0)] {
            let g = ConvGeom::new(2, 6, 5, k, k, s, p).unwrap();
            let x: Vec<f64> = (0..2 * 6 * 5).map(|i| (i as f64 * 0.3).cos()).collect();
            let c: Vec<f64> = (0..g.cols_rows() * g.out_pixels()).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_err());
    }
}
