//! Parameter-free spatial and channel rearrangements.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel displacement `(dy, dx)`: output `(i, j)` reads input
/// `(i + dy, j + dx)`, zero outside the map.
pub type Offset = (isize, isize);

/// Canonical shift assignment for kernel size `k`.
///
/// Channels are split into `k²` contiguous groups of `⌊M/k²⌋` channels; group
/// `d` takes the `d`-th offset of the `k×k` grid in row-major order. The
/// `M mod k²` leftover channels join the centre (unshifted) group.
pub fn shift_offsets(channels: usize, k: usize) -> Result<Vec<Offset>> {
    if k % 2 == 0 {
        return Err(Error::Domain(format!("shift kernel size must be odd, got {k}")));
    }
    let cells = k * k;
    let per_group = channels / cells;
    let half = (k / 2) as isize;
    Ok((0..channels)
        .map(|c| {
            if per_group == 0 || c >= per_group * cells {
                (0, 0)
            } else {
                let d = c / per_group;
                ((d / k) as isize - half, (d % k) as isize - half)
            }
        })
        .collect())
}

pub fn shift(x: &Tensor, offsets: &[Offset]) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("shift")?;
    if offsets.len() != c {
        return Err(Error::InvalidShape {
            op: "shift",
            detail: format!("{} offsets for {c} channels", offsets.len()),
        });
    }
    let xs = x.data();
    let mut y = vec![0.0; xs.len()];
    for bi in 0..b {
        for (ci, &(dy, dx)) in offsets.iter().enumerate() {
            let base = (bi * c + ci) * h * w;
            for i in 0..h {
                let si = i as isize + dy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + dx;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    y[base + i * w + j] = xs[base + si as usize * w + sj as usize];
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Source channel for each output channel: reshape `(g, C/g)`, transpose,
/// flatten.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Divisibility {
            what: "channels",
            value: channels,
            divisor: groups,
        });
    }
    let per = channels / groups;
    Ok((0..channels).map(|o| (o % groups) * per + o / groups).collect())
}

pub fn permute_channels(x: &[f64], shape: &[usize], src: &[usize]) -> Vec<f64> {
    let (b, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for (o, &s) in src.iter().enumerate() {
            let dst = (bi * c + o) * plane;
            let from = (bi * c + s) * plane;
            y[dst..dst + plane].copy_from_slice(&x[from..from + plane]);
        }
    }
    y
}

pub fn inverse_permutation(src: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; src.len()];
    for (o, &s) in src.iter().enumerate() {
        inv[s] = o;
    }
    inv
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("global_avgpool")?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index of the (first) maximum.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("maxpool2")?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            op: "maxpool2",
            detail: format!("spatial size {h}x{w} is smaller than the 2x2 window"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut y = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                y.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, ho, wo], y), arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_six_by_two() {
        assert_eq!(shuffle_permutation(6, 2).unwrap(), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(shuffle_permutation(6, 1).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(shuffle_permutation(6, 4).is_err());
    }

    #[test]
    fn offsets_row_major_with_center_remainder() {
        let o = shift_offsets(11, 3).unwrap();
        assert_eq!(o[0], (-1, -1));
        assert_eq!(o[1], (-1, 0));
        assert_eq!(o[4], (0, 0));
        assert_eq!(o[8], (1, 1));
        assert_eq!(&o[9..], &[(0, 0), (0, 0)]);
        assert_eq!(shift_offsets(1, 3).unwrap(), vec![(0, 0)]);
        assert!(shift_offsets(9, 4).is_err());
    }
}
