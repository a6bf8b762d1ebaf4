//! Batch normalization over `(batch,)` or `(batch, h, w)` per feature.
//!
//! Three statistic regimes:
//! - `Train`: batch statistics; running averages are updated (momentum 0.9).
//! - `Frozen`: batch statistics, running averages untouched (forward passes
//!   through networks that the current training phase does not own).
//! - `Eval`: stored running statistics, fully elementwise.

use ndarray::{Array1, Array2, ArrayD, ArrayView1};

use super::Mode;
use crate::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// View an activation tensor as `(features, m)`, copying into the
/// feature-major layout batch norm works in.
fn to_feature_major<R: Real>(x: &ArrayD<R>) -> Array2<R> {
    match x.ndim() {
        2 => {
            let v = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            v.t().as_standard_layout().to_owned()
        }
        4 => {
            let v = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (b, c, h, w) = v.dim();
            let perm = v.permuted_axes([1, 0, 2, 3]);
            perm.as_standard_layout()
                .into_owned()
                .into_shape((c, b * h * w))
                .unwrap()
        }
        other => panic!("batch norm expects rank 2 or 4 input, got rank {other}"),
    }
}

fn from_feature_major<R: Real>(fm: Array2<R>, shape: &[usize]) -> ArrayD<R> {
    match shape.len() {
        2 => fm
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape(shape.to_vec())
            .unwrap()
            .into_dyn(),
        4 => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let a4 = fm.into_shape((c, b, h, w)).unwrap();
            a4.permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .to_owned()
                .into_dyn()
        }
        other => panic!("batch norm expects rank 2 or 4 input, got rank {other}"),
    }
}

pub struct BnCache<R: Real> {
    /// Normalized activations in feature-major layout `(c, m)`.
    xhat: Array2<R>,
    inv_std: Array1<R>,
    input_shape: Vec<usize>,
    batch_stats: bool,
}

pub struct BnForward<R: Real> {
    pub y: ArrayD<R>,
    pub cache: BnCache<R>,
    /// `(new_running_mean, new_running_var)` when mode is `Train`.
    pub stat_update: Option<(Array1<R>, Array1<R>)>,
}

pub fn bn_forward<R: Real>(
    x: &ArrayD<R>,
    gamma: ArrayView1<'_, R>,
    beta: ArrayView1<'_, R>,
    running_mean: ArrayView1<'_, R>,
    running_var: ArrayView1<'_, R>,
    mode: Mode,
) -> BnForward<R> {
    let fm = to_feature_major(x);
    let (c, m) = fm.dim();
    assert_eq!(c, gamma.len(), "feature count mismatch");
    let eps = R::from_f64(BN_EPS);

    let (mean, var) = if mode == Mode::Eval {
        (running_mean.to_owned(), running_var.to_owned())
    } else {
        let mean = Array1::from_iter(fm.rows().into_iter().map(|r| r.sum() / R::from_f64(m as f64)));
        let var = Array1::from_iter(fm.rows().into_iter().zip(mean.iter()).map(|(r, &mu)| {
            r.iter().map(|&v| (v - mu) * (v - mu)).sum::<R>() / R::from_f64(m as f64)
        }));
        (mean, var)
    };

    let inv_std = var.mapv(|v| R::one() / (v + eps).sqrt());
    let mut xhat = fm;
    for ci in 0..c {
        let mu = mean[ci];
        let is = inv_std[ci];
        xhat.row_mut(ci).mapv_inplace(|v| (v - mu) * is);
    }
    let mut y_fm = xhat.clone();
    for ci in 0..c {
        let g = gamma[ci];
        let b = beta[ci];
        y_fm.row_mut(ci).mapv_inplace(|v| g * v + b);
    }
    let y = from_feature_major(y_fm, x.shape());

    let stat_update = if mode == Mode::Train {
        let mom = R::from_f64(BN_MOMENTUM);
        let one_m = R::one() - mom;
        // Running variance tracks the unbiased estimator, as is conventional.
        let bessel = if m > 1 {
            R::from_f64(m as f64 / (m as f64 - 1.0))
        } else {
            R::one()
        };
        let new_mean = running_mean.mapv(|v| v * mom) + mean.mapv(|v| v * one_m);
        let new_var = running_var.mapv(|v| v * mom) + var.mapv(|v| v * bessel * one_m);
        Some((new_mean, new_var))
    } else {
        None
    };

    BnForward {
        y,
        cache: BnCache {
            xhat,
            inv_std,
            input_shape: x.shape().to_vec(),
            batch_stats: mode != Mode::Eval,
        },
        stat_update,
    }
}

pub struct BnGrads<R: Real> {
    pub dx: ArrayD<R>,
    pub dgamma: Option<Array1<R>>,
    pub dbeta: Option<Array1<R>>,
}

pub fn bn_backward<R: Real>(
    cache: &BnCache<R>,
    gamma: ArrayView1<'_, R>,
    dy: &ArrayD<R>,
    param_grads: bool,
) -> BnGrads<R> {
    let dy_fm = to_feature_major(dy);
    let (c, m) = dy_fm.dim();
    let m_r = R::from_f64(m as f64);

    let (dgamma, dbeta) = if param_grads {
        let dgamma = Array1::from_iter(
            dy_fm
                .rows()
                .into_iter()
                .zip(cache.xhat.rows())
                .map(|(dyr, xr)| dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<R>()),
        );
        let dbeta = Array1::from_iter(dy_fm.rows().into_iter().map(|r| r.sum()));
        (Some(dgamma), Some(dbeta))
    } else {
        (None, None)
    };

    let mut dx_fm = Array2::<R>::zeros((c, m));
    if cache.batch_stats {
        // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        for ci in 0..c {
            let g = gamma[ci];
            let is = cache.inv_std[ci];
            let dyr = dy_fm.row(ci);
            let xr = cache.xhat.row(ci);
            let mut sum_dxhat = R::zero();
            let mut sum_dxhat_xhat = R::zero();
            for (&dyv, &xv) in dyr.iter().zip(xr.iter()) {
                let dxhat = dyv * g;
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xv;
            }
            let mut row = dx_fm.row_mut(ci);
            for (j, (&dyv, &xv)) in dyr.iter().zip(xr.iter()).enumerate() {
                let dxhat = dyv * g;
                row[j] = is * (m_r * dxhat - sum_dxhat - xv * sum_dxhat_xhat) / m_r;
            }
        }
    } else {
        // Eval statistics are constants: purely elementwise scaling.
        for ci in 0..c {
            let scale = gamma[ci] * cache.inv_std[ci];
            let dyr = dy_fm.row(ci);
            let mut row = dx_fm.row_mut(ci);
            for (j, &dyv) in dyr.iter().enumerate() {
                row[j] = dyv * scale;
            }
        }
    }

    BnGrads {
        dx: from_feature_major(dx_fm, &cache.input_shape),
        dgamma,
        dbeta,
    }
}
