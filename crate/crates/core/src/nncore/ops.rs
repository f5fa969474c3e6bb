//! Forward/backward kernels. Matrices are row-major; an affine weight of shape
//! `(in, out)` maps a row vector `x` to `x W + b`. Backward functions
//! accumulate (`+=`) into their gradient outputs.

use crate::error::{Error, Result};

/// Prediction clamp used by [`bce`].
pub const BCE_EPS: f64 = 1e-7;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let out = b.len();
    if x.len() * out != w.len() {
        return Err(Error::Shape(format!(
            "affine: input {} and bias {} do not match weight of {} entries",
            x.len(),
            out,
            w.len()
        )));
    }
    let mut y = b.to_vec();
    affine_into(x, w, &mut y);
    Ok(y)
}

/// `y += x W` without shape checks (callers guarantee shapes).
pub fn affine_into(x: &[f64], w: &[f64], y: &mut [f64]) {
    let out = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (yo, wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
}

/// Gradients of `y = x W + b` given `dy`.
pub fn affine_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let out = dy.len();
    for (dbo, dyo) in db.iter_mut().zip(dy) {
        *dbo += dyo;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * out..(i + 1) * out];
        for (g, dyo) in row.iter_mut().zip(dy) {
            *g += xi * dyo;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            *dxi += dot(&w[i * out..(i + 1) * out], dy);
        }
    }
}

/// Logistic function, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid(v)).collect()
}

/// `dz` from the forward output `y = σ(z)`.
pub fn sigmoid_backward(y: f64, dy: f64) -> f64 {
    dy * y * (1.0 - y)
}

pub fn tanh_backward(y: f64, dy: f64) -> f64 {
    dy * (1.0 - y * y)
}

fn clamp_pred(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy.
pub fn bce(preds: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(preds.len(), targets.len());
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(&p, &r)| {
            let p = clamp_pred(p);
            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// `∂ bce / ∂ pred_i`; zero where the clamp is active.
pub fn bce_backward(preds: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(&p, &r)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                0.0
            } else {
                (-r / p + (1.0 - r) / (1.0 - p)) / n
            }
        })
        .collect()
}

/// BCE of one prediction given its logit, and `∂loss/∂logit` scaled by `weight`.
/// Composes [`sigmoid`], [`bce`] and their backward rules.
pub fn bce_logit(z: f64, target: f64, weight: f64) -> (f64, f64, f64) {
    let p = sigmoid(z);
    let loss = bce(&[p], &[target]) * weight;
    let dp = bce_backward(&[p], &[target])[0] * weight;
    (p, loss, sigmoid_backward(p, dp))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log Σ_{j ≠ exclude} exp(s_j)` with max-shift.
pub fn log_softmax_excluding(scores: &[f64], exclude: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Invalid("log_softmax_excluding needs at least two scores".into()));
    }
    if exclude >= scores.len() {
        return Err(Error::Invalid(format!("exclude index {exclude} out of range")));
    }
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != exclude)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != exclude)
        .map(|(_, &s)| (s - max).exp())
        .sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_examples() {
        let x = [1.0, 2.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(affine(&x, &eye, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(affine(&x, &eye, &[3.0, 3.0]).unwrap(), vec![4.0, 5.0]);
        assert!(affine(&x, &eye, &[0.0; 3]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e^-2) evaluated independently
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((expected - 0.880797).abs() < 1e-6);
        assert!((sigmoid(2.0) - expected).abs() < 1e-15);
        for z in [-700.0, -37.5, -3.0, 0.1, 5.0, 700.0] {
            let s = sigmoid(z);
            assert!(s.is_finite());
            assert!((sigmoid(-z) - (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&[1.0 - BCE_EPS], &[1.0]) < 1e-6);
        assert!(bce(&[1.0], &[1.0]).is_finite());
        let expected = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
        // the rounded hand value 0.289907 is off in the sixth digit; the exact value is 0.2899092
        assert!((expected - 0.289909).abs() < 1e-6);
        assert!((bce(&[0.8, 0.3], &[1.0, 0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_excluding_values() {
        assert_eq!(log_softmax_excluding(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert!((log_softmax_excluding(&[1.0, 0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(log_softmax_excluding(&[1.0], 0).is_err());
        let s = [0.3, -1.2, 4.0, 2.2];
        let c = 17.25;
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let a = log_softmax_excluding(&s, 2).unwrap();
        let b = log_softmax_excluding(&shifted, 2).unwrap();
        assert!((b - a - c).abs() < 1e-12);
        assert!(log_softmax_excluding(&[800.0, 1000.0, 999.0], 0).unwrap().is_finite());
    }
}
