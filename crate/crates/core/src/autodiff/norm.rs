//! Per-channel batch normalization over `(B, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch statistics of one training-mode forward: per-channel mean, and the
/// unbiased variance used for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

pub(crate) struct NormOut {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub stats: BatchStats,
}

pub(crate) struct NormBack {
    pub dx: Option<Vec<f64>>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("batchnorm")?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("batchnorm eps must be positive, got {eps}")));
    }
    Ok((b, c, h * w))
}

fn affine(x: &[f64], b: usize, c: usize, plane: usize, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for k in base..base + plane {
                let h = (x[k] - mean[ci]) * inv_std[ci];
                xhat[k] = h;
                y[k] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (y, xhat)
}

pub(crate) fn train_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<NormOut> {
    let (b, c, plane) = check(x, gamma, beta, eps)?;
    let n = (b * plane) as f64;
    let xs = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            mean[ci] += xs[base..base + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            var[ci] += xs[base..base + plane].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / n).collect();
    let unbiased_var = var
        .iter()
        .map(|v| if n > 1.0 { v / (n - 1.0) } else { 0.0 })
        .collect();
    let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = affine(xs, b, c, plane, &mean, &inv_std, gamma.data(), beta.data());
    Ok(NormOut {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        inv_std,
        stats: BatchStats { mean, unbiased_var },
    })
}

pub(crate) fn eval_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Result<NormOut> {
    let (b, c, plane) = check(x, gamma, beta, eps)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::InvalidShape {
            op: "batchnorm",
            detail: format!("running statistics sized {} for {c} channels", mean.len()),
        });
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = affine(x.data(), b, c, plane, mean, &inv_std, gamma.data(), beta.data());
    Ok(NormOut {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        inv_std,
        stats: BatchStats {
            mean: mean.to_vec(),
            unbiased_var: var.to_vec(),
        },
    })
}

/// With `batch_stats` the mean and variance depend on `x` and the full
/// normalization Jacobian applies; otherwise the map is affine in `x`.
pub(crate) fn backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    batch_stats: bool,
    need_x: bool,
) -> NormBack {
    let (b, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let n = (b * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for k in base..base + plane {
                dbeta[ci] += g[k];
                dgamma[ci] += g[k] * xhat[k];
            }
        }
    }
    let dx = need_x.then(|| {
        let mut dx = vec![0.0; g.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let k0 = gamma[ci] * inv_std[ci];
                for k in base..base + plane {
                    dx[k] = if batch_stats {
                        k0 / n * (n * g[k] - dbeta[ci] - xhat[k] * dgamma[ci])
                    } else {
                        k0 * g[k]
                    };
                }
            }
        }
        dx
    });
    NormBack { dx, dgamma, dbeta }
}
