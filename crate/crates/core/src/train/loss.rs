use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `-[t·ln σ(ℓ) + (1-t)·ln(1-σ(ℓ))]` without overflow.
fn log_loss(logit: f64, t: f64) -> f64 {
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

fn check(logits: &Tensor, target: &Tensor, visible: &[bool]) -> Result<()> {
    if logits.dims() != target.dims() {
        return shape_err(format!(
            "logits {} and target {} differ",
            logits.dims(),
            target.dims()
        ));
    }
    if visible.len() != logits.channels() {
        return shape_err(format!(
            "{} visibility flags for {} keypoint channels",
            visible.len(),
            logits.channels()
        ));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return invalid(format!("heatmap targets must be 0 or 1, found {v}"));
    }
    Ok(())
}

#[inline]
fn effective_target(target: &Tensor, visible: &[bool], k: usize) -> f64 {
    let c = k / target.dims().plane();
    if visible[c] {
        target.data()[k]
    } else {
        0.0
    }
}

/// Mean per-pixel log-loss over all keypoint channels. Channels of
/// invisible keypoints are scored against all-zero targets.
pub fn heatmap_loss(logits: &Tensor, target: &Tensor, visible: &[bool]) -> Result<f64> {
    check(logits, target, visible)?;
    let n = logits.len() as f64;
    let total: f64 = logits
        .data()
        .iter()
        .enumerate()
        .map(|(k, &l)| log_loss(l, effective_target(target, visible, k)))
        .sum();
    Ok(total / n)
}

/// Loss and its gradient with respect to the logits.
pub fn heatmap_loss_grad(
    logits: &Tensor,
    target: &Tensor,
    visible: &[bool],
) -> Result<(f64, Tensor)> {
    check(logits, target, visible)?;
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros(logits.dims());
    let mut total = 0.0;
    for (k, &l) in logits.data().iter().enumerate() {
        let t = effective_target(target, visible, k);
        total += log_loss(l, t);
        grad.data_mut()[k] = (sigmoid(l) - t) / n;
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn px(v: f64) -> Tensor {
        Tensor::from_vec(Dims::new(1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let l = heatmap_loss(&px(0.0), &px(1.0), &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(heatmap_loss(&px(-20.0), &px(0.0), &[true]).unwrap() < 1e-8);
        assert!((heatmap_loss(&px(-20.0), &px(1.0), &[true]).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn invisible_keypoints_score_against_zero() {
        let l = heatmap_loss(&px(-20.0), &px(1.0), &[false]).unwrap();
        assert!(l < 1e-8);
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        assert!(heatmap_loss(&px(0.0), &px(0.5), &[true]).is_err());
    }

    #[test]
    fn loss_is_nonnegative_and_grad_matches_differences() {
        let logits =
            Tensor::from_vec(Dims::new(2, 1, 3), vec![-3.0, -0.2, 0.0, 0.4, 2.0, 9.0]).unwrap();
        let target =
            Tensor::from_vec(Dims::new(2, 1, 3), vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let vis = [true, false];
        let (l, g) = heatmap_loss_grad(&logits, &target, &vis).unwrap();
        assert!(l > 0.0);
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += 1e-6;
            let mut m = logits.clone();
            m.data_mut()[k] -= 1e-6;
            let fd = (heatmap_loss(&p, &target, &vis).unwrap()
                - heatmap_loss(&m, &target, &vis).unwrap())
                / 2e-6;
            assert!((fd - g.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
