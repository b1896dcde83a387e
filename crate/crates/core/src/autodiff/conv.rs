//! Direct grouped 2-D cross-correlation.
//!
//! Every output element accumulates its products in `(m, p, q)` order, the
//! channel/kernel-row/kernel-column order of the reference loop nest. The
//! spatial loops are innermost only so the valid window can be computed
//! once per kernel tap; that does not change the per-element order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) struct ConvDims {
    pub b: usize,
    pub m: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub m_per_group: usize,
    pub n_per_group: usize,
}

pub fn output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("kernel {kernel} larger than padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn dims(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<ConvDims> {
    let (b, m, h, wd) = x.dims4("conv2d")?;
    let (n, mg, kh, kw) = w.dims4("conv2d")?;
    let g = geom.groups;
    if g == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: "groups must be positive".into(),
        });
    }
    if m % g != 0 {
        return Err(Error::Divisibility {
            what: "input channels",
            value: m,
            divisor: g,
        });
    }
    if n % g != 0 {
        return Err(Error::Divisibility {
            what: "output channels",
            value: n,
            divisor: g,
        });
    }
    if mg != m / g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ho = output_size(h, kh, geom.stride, geom.pad)?;
    let wo = output_size(wd, kw, geom.stride, geom.pad)?;
    Ok(ConvDims {
        b,
        m,
        h,
        w: wd,
        n,
        kh,
        kw,
        ho,
        wo,
        m_per_group: mg,
        n_per_group: n / g,
    })
}

/// Output indices `o` in `[lo, hi)` such that `o * stride + offset` lands in
/// `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub fn forward(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x, w, geom)?;
    let xs = x.data();
    let ws = w.data();
    let mut y = vec![0.0; d.b * d.n * d.ho * d.wo];
    let s = geom.stride;
    for b in 0..d.b {
        for n in 0..d.n {
            let group = n / d.n_per_group;
            let out = &mut y[(b * d.n + n) * d.ho * d.wo..(b * d.n + n + 1) * d.ho * d.wo];
            for mc in 0..d.m_per_group {
                let m = group * d.m_per_group + mc;
                let xplane = &xs[(b * d.m + m) * d.h * d.w..(b * d.m + m + 1) * d.h * d.w];
                for p in 0..d.kh {
                    let oy = p as isize - geom.pad as isize;
                    let (ilo, ihi) = valid_range(d.ho, d.h, s, oy);
                    for q in 0..d.kw {
                        let wv = ws[((n * d.m_per_group + mc) * d.kh + p) * d.kw + q];
                        let ox = q as isize - geom.pad as isize;
                        let (jlo, jhi) = valid_range(d.wo, d.w, s, ox);
                        for i in ilo..ihi {
                            let ih = (i * s) as isize + oy;
                            let xrow = &xplane[ih as usize * d.w..];
                            let orow = &mut out[i * d.wo..(i + 1) * d.wo];
                            for j in jlo..jhi {
                                let iw = ((j * s) as isize + ox) as usize;
                                orow[j] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.b, d.n, d.ho, d.wo], y))
}

/// Gradients with respect to the input and the kernel.
pub fn backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f64],
    geom: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = dims(x, w, geom).expect("validated in forward");
    let xs = x.data();
    let ws = w.data();
    let s = geom.stride;
    let mut dx = need_x.then(|| vec![0.0; xs.len()]);
    let mut dw = need_w.then(|| vec![0.0; ws.len()]);
    for b in 0..d.b {
        for n in 0..d.n {
            let group = n / d.n_per_group;
            let g = &grad[(b * d.n + n) * d.ho * d.wo..(b * d.n + n + 1) * d.ho * d.wo];
            for mc in 0..d.m_per_group {
                let m = group * d.m_per_group + mc;
                let base = (b * d.m + m) * d.h * d.w;
                for p in 0..d.kh {
                    let oy = p as isize - geom.pad as isize;
                    let (ilo, ihi) = valid_range(d.ho, d.h, s, oy);
                    for q in 0..d.kw {
                        let widx = ((n * d.m_per_group + mc) * d.kh + p) * d.kw + q;
                        let wv = ws[widx];
                        let ox = q as isize - geom.pad as isize;
                        let (jlo, jhi) = valid_range(d.wo, d.w, s, ox);
                        let mut acc = 0.0;
                        for i in ilo..ihi {
                            let ih = ((i * s) as isize + oy) as usize;
                            let row = base + ih * d.w;
                            for j in jlo..jhi {
                                let iw = ((j * s) as isize + ox) as usize;
                                let gv = g[i * d.wo + j];
                                if let Some(dx) = dx.as_mut() {
                                    dx[row + iw] += wv * gv;
                                }
                                acc += xs[row + iw] * gv;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..4 {
                    for offset in -3..4 {
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "{out_len} {in_len} {stride} {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(output_size(32, 3, 1, 1).unwrap(), 32);
        assert_eq!(output_size(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(output_size(7, 7, 1, 0).unwrap(), 1);
        assert!(output_size(2, 5, 1, 0).is_err());
    }
}
