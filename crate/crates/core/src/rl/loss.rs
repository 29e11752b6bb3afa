use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ce,
}

/// Per-step loss averaged over the unmasked steps.
///
/// `pred` is `[B, K, C]`. For `Mse`, `target` has the same shape and the
/// per-step loss is the mean squared error over `C`; for `Ce`, `target` is
/// `[B, K, 1]` class indices and the per-step loss is the negative log
/// likelihood of the target under `softmax(pred)`.
pub fn action_loss<'t>(
    pred: Var<'t>,
    target: &Tensor,
    mask: &Tensor,
    kind: LossKind,
) -> Result<Var<'t>> {
    let tape = pred.tape();
    let ps = pred.shape();
    if ps.len() != 3 || mask.shape() != &ps[..2] {
        return Err(Error::shape("action_loss mask", &ps, mask.shape()));
    }
    let (b, k, c) = (ps[0], ps[1], ps[2]);
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Err(Error::AllMasked);
    }
    let per_step = match kind {
        LossKind::Mse => {
            if target.shape() != ps.as_slice() {
                return Err(Error::shape("action_loss target", target.shape(), &ps));
            }
            let diff = pred.sub(tape.constant(target.clone()))?;
            diff.square().mean(&[2], false)?
        }
        LossKind::Ce => {
            if target.shape() != [b, k, 1] {
                return Err(Error::shape(
                    "action_loss target",
                    target.shape(),
                    &[b, k, 1],
                ));
            }
            let mut one_hot = vec![0.0; b * k * c];
            for (i, &t) in target.data().iter().enumerate() {
                if mask.data()[i] == 0.0 {
                    continue;
                }
                if !(t >= 0.0 && t.fract() == 0.0 && (t as usize) < c) {
                    return Err(Error::invalid(format!("class target {t} outside 0..{c}")));
                }
                one_hot[i * c + t as usize] = 1.0;
            }
            let picked = pred
                .log_softmax()
                .mul(tape.constant(Tensor::from_parts(vec![b, k, c], one_hot)))?;
            picked.sum(&[2], false)?.neg()
        }
    };
    let weights = Tensor::from_parts(vec![b, k], mask.data().iter().map(|m| m / count).collect());
    Ok(per_step.mul(tape.constant(weights))?.sum_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn perfect_prediction_has_zero_mse() {
        let tape = Tape::new();
        let t = Tensor::from_fn(vec![2, 3, 2], |i| i as f64 * 0.1);
        let l = action_loss(
            tape.constant(t.clone()),
            &t,
            &Tensor::ones(vec![2, 3]),
            LossKind::Mse,
        )
        .unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let tape = Tape::new();
        let l = action_loss(
            tape.constant(Tensor::full(vec![2, 4, 5], 0.7)),
            &Tensor::from_fn(vec![2, 4, 1], |i| (i % 5) as f64),
            &Tensor::ones(vec![2, 4]),
            LossKind::Ce,
        )
        .unwrap();
        assert!((l.value().item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_steps_are_excluded() {
        let tape = Tape::new();
        let target = Tensor::zeros(vec![1, 3, 1]);
        let pred = Tensor::new(vec![1, 3, 1], vec![1.0, 1e6, 2.0]).unwrap();
        let mask = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let l = action_loss(tape.constant(pred), &target, &mask, LossKind::Mse).unwrap();
        assert!((l.value().item() - 2.5).abs() < 1e-12);

        let logits = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, -1e3, 1e3]).unwrap();
        let cls = Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap();
        let mask = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let l = action_loss(tape.constant(logits), &cls, &mask, LossKind::Ce).unwrap();
        assert!((l.value().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_masked_fails() {
        let tape = Tape::new();
        let t = Tensor::zeros(vec![1, 2, 1]);
        let r = action_loss(
            tape.constant(t.clone()),
            &t,
            &Tensor::zeros(vec![1, 2]),
            LossKind::Mse,
        );
        assert!(matches!(r, Err(Error::AllMasked)));
    }
}
