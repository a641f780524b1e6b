//! Raw forward/backward loops for convolution and bilinear resizing.

/// Output extent of a k×k convolution with zero padding k/2.
pub fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (size + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        conv_out(self.h, self.k, self.stride)
    }
    pub fn wo(&self) -> usize {
        conv_out(self.w, self.k, self.stride)
    }
}

// Range of output columns whose input column ox*stride + kx - pad lies inside [0, w).
#[inline]
fn valid_range(out: usize, inp: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= inp - 1
    let lim = inp + pad - 1;
    let hi = if lim < kx { 0 } else { ((lim - kx) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], wgt: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.ho(), g.wo());
    let pad = g.k / 2;
    let mut y = vec![0.0; g.n * g.co * ho * wo];
    for n in 0..g.n {
        for co in 0..g.co {
            let yp = &mut y[(n * g.co + co) * ho * wo..(n * g.co + co + 1) * ho * wo];
            for ci in 0..g.ci {
                let xp = &x[(n * g.ci + ci) * g.h * g.w..(n * g.ci + ci + 1) * g.h * g.w];
                let wk = &wgt[(co * g.ci + ci) * g.k * g.k..(co * g.ci + ci + 1) * g.k * g.k];
                for ky in 0..g.k {
                    let (oy0, oy1) = valid_range(ho, g.h, ky, pad, g.stride);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (ox0, ox1) = valid_range(wo, g.w, kx, pad, g.stride);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - pad;
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            let yrow = &mut yp[oy * wo..(oy + 1) * wo];
                            if g.stride == 1 {
                                let off = kx as isize - pad as isize;
                                for ox in ox0..ox1 {
                                    yrow[ox] += wv * xrow[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    yrow[ox] += wv * xrow[ox * g.stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns (grad_x, grad_w).
pub fn conv2d_backward(x: &[f64], wgt: &[f64], gy: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.ho(), g.wo());
    let pad = g.k / 2;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wgt.len()];
    for n in 0..g.n {
        for co in 0..g.co {
            let gyp = &gy[(n * g.co + co) * ho * wo..(n * g.co + co + 1) * ho * wo];
            for ci in 0..g.ci {
                let xoff = (n * g.ci + ci) * g.h * g.w;
                let woff = (co * g.ci + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (oy0, oy1) = valid_range(ho, g.h, ky, pad, g.stride);
                    for kx in 0..g.k {
                        let wv = wgt[woff + ky * g.k + kx];
                        let (ox0, ox1) = valid_range(wo, g.w, kx, pad, g.stride);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - pad;
                            let row = xoff + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - pad;
                                let gv = gyp[oy * wo + ox];
                                acc += gv * x[row + ix];
                                gx[row + ix] += gv * wv;
                            }
                        }
                        gw[woff + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-axis interpolation taps for align-corners=false bilinear resizing.
#[derive(Debug, Clone)]
pub struct Taps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

pub fn bilinear_taps(inp: usize, out: usize) -> Taps {
    let scale = inp as f64 / out as f64;
    let mut t = Taps {
        i0: Vec::with_capacity(out),
        i1: Vec::with_capacity(out),
        w0: Vec::with_capacity(out),
        w1: Vec::with_capacity(out),
    };
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
        let l1 = src - i0 as f64;
        let l1 = if i1 == i0 { 0.0 } else { l1 };
        t.i0.push(i0);
        t.i1.push(i1);
        t.w0.push(1.0 - l1);
        t.w1.push(l1);
    }
    t
}

pub fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (r0, r1) = (ty.i0[oy] * w, ty.i1[oy] * w);
            let (a0, a1) = (ty.w0[oy], ty.w1[oy]);
            for ox in 0..wo {
                let (c0, c1) = (tx.i0[ox], tx.i1[ox]);
                let (b0, b1) = (tx.w0[ox], tx.w1[ox]);
                yp[oy * wo + ox] =
                    a0 * (b0 * xp[r0 + c0] + b1 * xp[r0 + c1]) + a1 * (b0 * xp[r1 + c0] + b1 * xp[r1 + c1]);
            }
        }
    }
    y
}

pub fn resize_backward(gy: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        let yp = &gy[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (r0, r1) = (ty.i0[oy] * w, ty.i1[oy] * w);
            let (a0, a1) = (ty.w0[oy], ty.w1[oy]);
            for ox in 0..wo {
                let g = yp[oy * wo + ox];
                let (c0, c1) = (tx.i0[ox], tx.i1[ox]);
                let (b0, b1) = (tx.w0[ox], tx.w1[ox]);
                gp[r0 + c0] += g * a0 * b0;
                gp[r0 + c1] += g * a0 * b1;
                gp[r1 + c0] += g * a1 * b0;
                gp[r1 + c1] += g * a1 * b1;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    // naive reference with explicit bounds checks
    fn conv_ref(x: &[f64], wgt: &[f64], g: ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.ho(), g.wo());
        let pad = (g.k / 2) as isize;
        let mut y = vec![0.0; g.n * g.co * ho * wo];
        for n in 0..g.n {
            for co in 0..g.co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.ci {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += wgt[((co * g.ci + ci) * g.k + ky) * g.k + kx]
                                        * x[((n * g.ci + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        y[((n * g.co + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(h, w, k, stride) in &[(5, 7, 3, 1), (5, 7, 3, 2), (4, 4, 1, 2), (1, 2, 3, 2), (3, 3, 1, 1)] {
            let g = ConvGeom { n: 2, ci: 3, h, w, co: 2, k, stride };
            let x: Vec<f64> = (0..g.n * g.ci * h * w).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
            let wt: Vec<f64> = (0..g.co * g.ci * k * k).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect();
            assert_eq!(conv2d_forward(&x, &wt, g), conv_ref(&x, &wt, g));
        }
    }

    #[test]
    fn impulse_correlation() {
        // 1×4×4 impulse at (1,2); the output holds the kernel flipped around the impulse
        let mut x = vec![0.0; 16];
        x[4 + 2] = 1.0;
        let wt: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let g = ConvGeom { n: 1, ci: 1, h: 4, w: 4, co: 1, k: 3, stride: 1 };
        let y = conv2d_forward(&x, &wt, g);
        #[rustfmt::skip]
        let expect = [
            0.0, 9.0, 8.0, 7.0,
            0.0, 6.0, 5.0, 4.0,
            0.0, 3.0, 2.0, 1.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y, expect);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = vec![2.5; 2 * 6 * 8];
        let down = resize_forward(&x, 2, 6, 8, 3, 4);
        assert!(down.iter().all(|&v| v == 2.5));
        let up = resize_forward(&down, 2, 3, 4, 6, 8);
        assert!(up.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn resize_half_is_pair_average() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = resize_forward(&x, 1, 4, 4, 2, 2);
        // align-corners=false ×0.5 averages 2×2 blocks
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resize_up_pins_taps() {
        let t = bilinear_taps(2, 4);
        assert_eq!(t.i0, vec![0, 0, 0, 1]);
        assert_eq!(t.w1, vec![0.0, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn resize_adjoint() {
        // <R x, y> == <x, R^T y>
        let x: Vec<f64> = (0..15).map(|v| (v as f64).sin()).collect();
        let gy: Vec<f64> = (0..40).map(|v| (v as f64 * 0.3).cos()).collect();
        let y = resize_forward(&x, 1, 3, 5, 5, 8);
        let gx = resize_backward(&gy, 1, 3, 5, 5, 8);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
