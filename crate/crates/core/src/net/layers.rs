//! Forward/backward primitives. Each backward takes exactly what its forward
//! saved; nothing here owns parameters.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};
use rand::Rng;

use super::Real;

/// Batch-norm epsilon, also the floor for running variances.
pub const BN_EPS: f64 = 1e-5;

/// Per-channel mean over (T, h, w).
pub fn pool<F: Real>(x: ArrayView4<F>) -> Array1<F> {
    let per_channel = F::from_usize(x.len() / x.len_of(Axis(0)).max(1)).unwrap();
    x.outer_iter()
        .map(|ch| ch.iter().fold(F::zero(), |acc, &v| acc + v) / per_channel)
        .collect()
}

/// Pools an `f32` instance straight into the working precision.
pub fn pool_f32<F: Real>(x: ArrayView4<f32>) -> Array1<F> {
    let n = (x.len() / x.len_of(Axis(0)).max(1)) as f64;
    x.outer_iter()
        .map(|ch| F::from_f64(ch.iter().map(|&v| v as f64).sum::<f64>() / n).unwrap())
        .collect()
}

pub fn pool_backward<F: Real>(grad: ArrayView1<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
    let n = F::from_usize(dims.1 * dims.2 * dims.3).unwrap();
    Array4::from_shape_fn(dims, |(c, _, _, _)| grad[c] / n)
}

/// `x · wᵀ + b` for a batch `x` (B x in) and weight `w` (out x in).
pub fn affine_forward<F: Real>(x: ArrayView2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut out = x.dot(&w.t());
    out += &b;
    out
}

pub struct AffineGrads<F> {
    pub dx: Array2<F>,
    pub dw: Array2<F>,
    pub db: Array1<F>,
}

pub fn affine_backward<F: Real>(x: ArrayView2<F>, w: ArrayView2<F>, dy: ArrayView2<F>) -> AffineGrads<F> {
    AffineGrads {
        dx: dy.dot(&w),
        dw: dy.t().dot(&x),
        db: dy.sum_axis(Axis(0)),
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
    /// Batch mean and biased batch variance; `None` when running stats were used.
    pub batch_stats: Option<(Array1<F>, Array1<F>)>,
}

/// Normalizes with the batch's own statistics (biased variance).
pub fn batchnorm_train<F: Real>(
    z: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
) -> (Array2<F>, BatchNormCache<F>) {
    let eps = F::from_f64(BN_EPS).unwrap();
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &z - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &gamma + beta;
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: Some((mean, var)),
        },
    )
}

pub fn batchnorm_eval<F: Real>(
    z: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    running_mean: ArrayView1<F>,
    running_var: ArrayView1<F>,
) -> (Array2<F>, BatchNormCache<F>) {
    let eps = F::from_f64(BN_EPS).unwrap();
    let inv_std = running_var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = (&z - &running_mean) * &inv_std;
    let y = &xhat * &gamma + beta;
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: None,
        },
    )
}

/// Returns (dz, dgamma, dbeta).
pub fn batchnorm_backward<F: Real>(
    dy: ArrayView2<F>,
    cache: &BatchNormCache<F>,
    gamma: ArrayView1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let dz = if cache.batch_stats.is_some() {
        let b = F::from_usize(dy.nrows()).unwrap();
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dz = dxhat.mapv(|v| v * b);
        dz -= &sum_dxhat;
        dz -= &(&cache.xhat * &sum_dxhat_xhat);
        dz * &cache.inv_std.mapv(|s| s / b)
    } else {
        dxhat * &cache.inv_std
    };
    (dz, dgamma, dbeta)
}

pub fn relu<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `out` is the forward output; the unit was active iff `out > 0`.
pub fn relu_backward<F: Real>(dy: ArrayView2<F>, out: ArrayView2<F>) -> Array2<F> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// Inverted-dropout mask: kept units carry `1 / (1 - p)`, dropped units 0.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), p: f64) -> Array2<F> {
    if p <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 - p;
    let scale = F::from_f64(1.0 / keep).unwrap();
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    })
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
