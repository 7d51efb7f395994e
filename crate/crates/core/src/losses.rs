//! Reconstruction losses with analytic gradients.
//!
//! Each loss returns its value and the gradient with respect to the
//! prediction `ŷ`. Accumulation runs in `f64` regardless of element type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{Scalar, Tensor};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SPARSITY_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Msle,
    Ssim,
    Logcosh,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Mse, LossKind::Msle, LossKind::Ssim, LossKind::Logcosh];

    pub fn id(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Msle => "msle",
            LossKind::Ssim => "ssim",
            LossKind::Logcosh => "logcosh",
        }
    }

    pub fn compute<T: Scalar>(self, y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossResult<T>> {
        match self {
            LossKind::Mse => mse(y, y_hat),
            LossKind::Msle => msle(y, y_hat),
            LossKind::Ssim => ssim_loss(y, y_hat),
            LossKind::Logcosh => logcosh(y, y_hat),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}' (expected mse, msle, ssim or logcosh)")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

fn same_shape<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape(
            "loss",
            format!("target {:?} vs prediction {:?}", y.shape(), y_hat.shape()),
        ));
    }
    if y.is_empty() {
        return Err(Error::invalid("loss over an empty tensor"));
    }
    Ok(())
}

fn elementwise<T: Scalar>(
    y: &Tensor<T>,
    y_hat: &Tensor<T>,
    f: impl Fn(f64, f64) -> (f64, f64),
) -> (f64, Tensor<T>) {
    let mut value = 0.0;
    let grad = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| {
            let (v, g) = f(a.f64(), b.f64());
            value += v;
            T::of(g)
        })
        .collect();
    (value, Tensor::from_vec(y.shape(), grad).expect("same shape"))
}

/// Mean squared error.
pub fn mse<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossResult<T>> {
    same_shape(y, y_hat)?;
    let n = y.len() as f64;
    let (value, grad) = elementwise(y, y_hat, |a, b| ((a - b).powi(2) / n, 2.0 * (b - a) / n));
    Ok(LossResult { value, grad })
}

/// Mean squared logarithmic error; both tensors must be non-negative.
pub fn msle<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossResult<T>> {
    same_shape(y, y_hat)?;
    if let Some(v) = y.data().iter().chain(y_hat.data()).find(|v| !(v.f64() >= 0.0)) {
        return Err(Error::Domain(format!("msle needs non-negative values, got {v:?}")));
    }
    let n = y.len() as f64;
    let (value, grad) = elementwise(y, y_hat, |a, b| {
        let d = b.ln_1p() - a.ln_1p();
        (d * d / n, 2.0 * d / (n * (1.0 + b)))
    });
    Ok(LossResult { value, grad })
}

/// `log(cosh z)` without overflow.
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    if a < 1.0 {
        // cosh z - 1 = 2 sinh^2(z/2), free of cancellation near zero.
        (2.0 * (0.5 * a).sinh().powi(2)).ln_1p()
    } else {
        a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
    }
}

/// Summed log-cosh error.
pub fn logcosh<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossResult<T>> {
    same_shape(y, y_hat)?;
    let (value, grad) = elementwise(y, y_hat, |a, b| (log_cosh(b - a), (b - a).tanh()));
    Ok(LossResult { value, grad })
}

/// `weight * mean(|z|)`.
pub fn sparsity_penalty<T: Scalar>(latent: &Tensor<T>, weight: f64) -> Result<LossResult<T>> {
    if !(weight >= 0.0) {
        return Err(Error::invalid(format!("sparsity weight {weight} must be >= 0")));
    }
    let n = latent.len().max(1) as f64;
    let value: f64 = latent.data().iter().map(|z| z.f64().abs()).sum();
    let step = T::of(weight / n);
    let grad = latent.map(|z| {
        if z > T::zero() {
            step
        } else if z < T::zero() {
            -step
        } else {
            T::zero()
        }
    });
    Ok(LossResult {
        value: weight * value / n,
        grad,
    })
}

/// Normalized 2-D Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

struct SsimMap {
    mean: f64,
    /// d mean / d ŷ for one image.
    grad: Vec<f64>,
}

fn ssim_image(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64], want_grad: bool) -> SsimMap {
    let k = SSIM_WINDOW;
    let (ph, pw) = (h - k + 1, w - k + 1);
    let positions = (ph * pw) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; h * w] } else { Vec::new() };
    for i in 0..ph {
        for j in 0..pw {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wt = win[a * k + b];
                    let idx = (i + a) * w + j + b;
                    let (xv, yv) = (x[idx], y[idx]);
                    mx += wt * xv;
                    my += wt * yv;
                    sxx += wt * xv * xv;
                    syy += wt * yv * yv;
                    sxy += wt * xv * yv;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_my = 2.0 * mx * a2 / (b1 * b2) - s * 2.0 * my / b1;
                let d_vy = -s / b2;
                let d_cxy = 2.0 * a1 / (b1 * b2);
                let alpha = d_my - 2.0 * my * d_vy - mx * d_cxy;
                let beta = 2.0 * d_vy;
                for a in 0..k {
                    for b in 0..k {
                        let idx = (i + a) * w + j + b;
                        grad[idx] += win[a * k + b] * (alpha + beta * y[idx] + d_cxy * x[idx]) / positions;
                    }
                }
            }
        }
    }
    SsimMap {
        mean: total / positions,
        grad,
    }
}

fn image_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::invalid(format!("ssim needs images, got shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    Ok((t.len() / (h * w), h, w))
}

/// Mean SSIM over all images (the trailing two axes; leading axes are
/// treated as independent channels).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let (n, h, w) = image_dims(x)?;
    let win = gaussian_window();
    let xs: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    let ys: Vec<f64> = y.data().iter().map(|v| v.f64()).collect();
    let hw = h * w;
    let total: f64 = (0..n)
        .map(|c| ssim_image(&xs[c * hw..(c + 1) * hw], &ys[c * hw..(c + 1) * hw], h, w, &win, false).mean)
        .sum();
    Ok(total / n as f64)
}

/// `1 - mean SSIM`, averaged over channels.
pub fn ssim_loss<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossResult<T>> {
    same_shape(y, y_hat)?;
    let (n, h, w) = image_dims(y)?;
    let win = gaussian_window();
    let xs: Vec<f64> = y.data().iter().map(|v| v.f64()).collect();
    let ys: Vec<f64> = y_hat.data().iter().map(|v| v.f64()).collect();
    let hw = h * w;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for c in 0..n {
        let m = ssim_image(&xs[c * hw..(c + 1) * hw], &ys[c * hw..(c + 1) * hw], h, w, &win, true);
        total += m.mean;
        grad.extend(m.grad.iter().map(|g| T::of(-g / n as f64)));
    }
    Ok(LossResult {
        value: 1.0 - total / n as f64,
        grad: Tensor::from_vec(y.shape(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn basic_values() {
        let z = t(&[2], vec![0.0, 0.0]);
        let o = t(&[2], vec![1.0, 1.0]);
        assert_eq!(mse(&z, &o).unwrap().value, 1.0);
        let e = t(&[1], vec![std::f64::consts::E - 1.0]);
        let r = msle(&t(&[1], vec![0.0]), &e).unwrap();
        assert!((r.value - 1.0).abs() <= f64::EPSILON);
        let sp = sparsity_penalty(&t(&[3], vec![1.0, -1.0, 2.0]), 0.3).unwrap();
        assert!((sp.value - 0.4).abs() < 1e-15);
        assert_eq!(sparsity_penalty(&t(&[3], vec![1.0, -1.0, 2.0]), 0.0).unwrap().value, 0.0);
    }

    #[test]
    fn zero_at_identity() {
        let x = t(&[1, 12, 12], (0..144).map(|i| (i as f64 * 0.13).sin().abs()).collect());
        for k in LossKind::ALL {
            assert!(k.compute(&x, &x).unwrap().value.abs() < 1e-9, "{k}");
        }
    }

    #[test]
    fn msle_rejects_negative() {
        let a = t(&[2], vec![0.0, -0.1]);
        assert!(matches!(msle(&a, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn logcosh_asymptote_and_taylor() {
        assert!((log_cosh(100.0) - (100.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(log_cosh(1e4).is_finite());
        let z: f64 = 1e-3;
        assert!((log_cosh(z) - z * z / 2.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images() {
        let a = t(&[16, 16], vec![0.0; 256]);
        let b = t(&[16, 16], vec![1.0; 256]);
        let s = ssim(&a, &b).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((s - expected).abs() < 1e-12, "{s}");
        assert!(ssim(&t(&[10, 12], vec![0.0; 120]), &t(&[10, 12], vec![0.0; 120])).is_err());
    }

    #[test]
    fn loss_ids_parse() {
        for k in LossKind::ALL {
            assert_eq!(k.id().parse::<LossKind>().unwrap(), k);
        }
        assert!("l1".parse::<LossKind>().is_err());
    }
}
