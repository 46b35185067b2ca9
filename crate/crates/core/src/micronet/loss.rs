use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-7;

/// Loss applied to the head output. `bce` and `ce` expect probabilities,
/// the focal variants expect raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
    Ce,
    SigmoidFocal { alpha: f64, gamma: f64 },
    /// `[objectness logit, offset logit]` against `[contains, offset]`.
    SnCombined { lambda: f64, alpha: f64, gamma: f64 },
}

impl LossKind {
    pub fn focal() -> Self {
        LossKind::SigmoidFocal { alpha: 0.25, gamma: 2.0 }
    }

    pub fn sn_combined() -> Self {
        LossKind::SnCombined {
            lambda: 6.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and gradient with respect to `pred`. `mask` only affects
/// `SnCombined`, where it gates the offset term.
pub fn compute_loss(kind: LossKind, pred: &[f64], target: &[f64], mask: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite prediction or target"));
    }
    let n = pred.len() as f64;
    match kind {
        LossKind::Mse => {
            let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
            let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
            Ok((loss, grad))
        }
        LossKind::Bce => {
            check_probs(pred)?;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &t) in pred.iter().zip(target) {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                let g = if pc == p { (-t / p + (1.0 - t) / (1.0 - p)) / n } else { 0.0 };
                grad.push(g);
            }
            Ok((loss / n, grad))
        }
        LossKind::Ce => {
            check_probs(pred)?;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &t) in pred.iter().zip(target) {
                let pc = p.max(PROB_CLAMP);
                loss -= t * pc.ln();
                grad.push(if pc == p { -t / p } else { 0.0 });
            }
            Ok((loss, grad))
        }
        LossKind::SigmoidFocal { alpha, gamma } => {
            check_focal(alpha, gamma)?;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (&z, &t) in pred.iter().zip(target) {
                let (l, g) = focal_term(z, t, alpha, gamma);
                loss += l;
                grad.push(g / n);
            }
            Ok((loss / n, grad))
        }
        LossKind::SnCombined { lambda, alpha, gamma } => {
            check_focal(alpha, gamma)?;
            if pred.len() != 2 {
                return Err(Error::ShapeMismatch("sn_combined needs [objectness, offset]".into()));
            }
            if !(0.0..=1.0).contains(&mask) {
                return Err(Error::arg(format!("mask {mask} outside [0, 1]")));
            }
            let (focal, g0) = focal_term(pred[0], target[0], alpha, gamma);
            let (reg, g1) = if mask == 0.0 {
                (0.0, 0.0)
            } else {
                let s = sigmoid(pred[1]);
                let d = s - target[1];
                (lambda * mask * d * d, lambda * mask * 2.0 * d * s * (1.0 - s))
            };
            Ok((focal + reg, vec![g0, g1]))
        }
    }
}

fn check_probs(pred: &[f64]) -> Result<()> {
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::arg("probability outside [0, 1]"));
    }
    Ok(())
}

fn check_focal(alpha: f64, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || gamma < 0.0 {
        return Err(Error::arg(format!("focal alpha {alpha} gamma {gamma}")));
    }
    Ok(())
}

/// Focal loss of one logit and its derivative.
fn focal_term(z: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let ce = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    let dce = p - t;
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let dp_t = p * (1.0 - p) * (2.0 * t - 1.0);
    let q = 1.0 - p_t;
    let (modulator, dmod) = if gamma == 0.0 {
        (1.0, 0.0)
    } else if q <= 0.0 {
        (0.0, 0.0)
    } else {
        (q.powf(gamma), -gamma * q.powf(gamma - 1.0) * dp_t)
    };
    let a_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    (a_t * ce * modulator, a_t * (dce * modulator + ce * dmod))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(kind: LossKind, pred: &[f64], target: &[f64], mask: f64) -> Vec<f64> {
        let h = 1e-6;
        (0..pred.len())
            .map(|i| {
                let mut a = pred.to_vec();
                let mut b = pred.to_vec();
                a[i] += h;
                b[i] -= h;
                let la = compute_loss(kind, &a, target, mask).unwrap().0;
                let lb = compute_loss(kind, &b, target, mask).unwrap().0;
                (la - lb) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad(kind: LossKind, pred: &[f64], target: &[f64], mask: f64) {
        let (_, g) = compute_loss(kind, pred, target, mask).unwrap();
        for (a, n) in g.iter().zip(numeric(kind, pred, target, mask)) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-5 || (a - n).abs() < 1e-9, "{kind:?}: {a} vs {n}");
        }
    }

    #[test]
    fn bce_at_one_half() {
        let (l, _) = compute_loss(LossKind::Bce, &[0.5], &[1.0], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_probabilities() {
        assert!(compute_loss(LossKind::Bce, &[1.5], &[1.0], 1.0).is_err());
        assert!(compute_loss(LossKind::Ce, &[-0.1, 1.1], &[0.0, 1.0], 1.0).is_err());
        assert!(compute_loss(LossKind::Mse, &[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn focal_without_focusing_is_half_bce() {
        for z in [-4.0, -1.3, 0.0, 0.7, 3.2] {
            for t in [0.0, 1.0] {
                let (f, _) = compute_loss(LossKind::SigmoidFocal { alpha: 0.5, gamma: 0.0 }, &[z], &[t], 1.0).unwrap();
                let (b, _) = compute_loss(LossKind::Bce, &[sigmoid(z)], &[t], 1.0).unwrap();
                assert!((f - 0.5 * b).abs() < 1e-9, "z={z} t={t}: {f} vs {b}");
            }
        }
    }

    #[test]
    fn masked_sn_is_pure_focal() {
        let kind = LossKind::sn_combined();
        let (l, g) = compute_loss(kind, &[0.3, -1.2], &[1.0, 0.8], 0.0).unwrap();
        let (f, gf) = compute_loss(LossKind::focal(), &[0.3], &[1.0], 1.0).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(l, f);
        assert_eq!(g[0], gf[0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert_grad(LossKind::Mse, &[0.2, -1.0, 3.0], &[0.5, 0.0, 2.0], 1.0);
        assert_grad(LossKind::Bce, &[0.2, 0.9], &[1.0, 0.3], 1.0);
        assert_grad(LossKind::Ce, &[0.2, 0.5, 0.3], &[0.0, 1.0, 0.0], 1.0);
        assert_grad(LossKind::focal(), &[-0.4, 2.0], &[1.0, 0.0], 1.0);
        assert_grad(LossKind::SigmoidFocal { alpha: 0.7, gamma: 1.5 }, &[0.9], &[1.0], 1.0);
        assert_grad(LossKind::sn_combined(), &[0.4, -0.6], &[1.0, 0.35], 1.0);
        assert_grad(LossKind::sn_combined(), &[0.4, -0.6], &[0.0, 0.0], 0.0);
    }
}
