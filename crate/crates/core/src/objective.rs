//! Supervised cross-entropy, confidence-thresholded pseudo-label loss, and
//! their weighted combination with the reconstruction term.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{argmax, Logits};

/// `-log softmax(row)[label]`, via log-sum-exp.
pub fn cross_entropy(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    lse - row[label]
}

/// Adds `scale * d CE / d row` into `out`.
fn cross_entropy_grad(row: &[f64], label: usize, scale: f64, out: &mut [f64]) {
    let mut probs = row.to_vec();
    crate::nn::softmax_in_place(&mut probs);
    for (k, (o, p)) in out.iter_mut().zip(&probs).enumerate() {
        let target = if k == label { 1.0 } else { 0.0 };
        *o += scale * (p - target);
    }
}

fn check_labels(logits: &Logits, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.batch {
        return Err(Error::Alignment(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.batch
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.classes) {
        return Err(Error::Label {
            label,
            num_classes: logits.classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy over the labeled batch.
pub fn supervised_loss(logits: &Logits, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    if logits.batch == 0 {
        return Err(Error::Data("empty labeled batch".into()));
    }
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| cross_entropy(logits.row(i), y))
        .sum();
    Ok(sum / logits.batch as f64)
}

/// [`supervised_loss`] and its gradient with respect to the logits.
pub fn supervised_loss_grad(logits: &Logits, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let loss = supervised_loss(logits, labels)?;
    let mut grad = vec![0.0; logits.values.len()];
    let scale = 1.0 / logits.batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        let c = logits.classes;
        cross_entropy_grad(logits.row(i), y, scale, &mut grad[i * c..(i + 1) * c]);
    }
    Ok((loss, grad))
}

/// Hard pseudo label for one unlabeled sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class_index: usize,
    /// `max_k p_k` of the weak-view prediction.
    pub confidence: f64,
    /// `confidence > tau` (strict).
    pub accepted: bool,
}

/// Pseudo labels from weak-view logits: argmax (lowest index on ties) and a
/// strict confidence threshold.
///
/// Callers are expected to produce `weak_logits` in evaluation mode; the
/// labels are constants for the rest of the step.
pub fn make_pseudo_labels(weak_logits: &Logits, tau: f64) -> Vec<PseudoLabel> {
    let probs = weak_logits.probabilities();
    probs
        .chunks_exact(weak_logits.classes)
        .map(|p| {
            let class_index = argmax(p);
            let confidence = p[class_index];
            PseudoLabel {
                class_index,
                confidence,
                accepted: confidence > tau,
            }
        })
        .collect()
}

fn check_pseudo(strong: &Logits, pseudo: &[PseudoLabel]) -> Result<()> {
    if pseudo.len() != strong.batch {
        return Err(Error::Alignment(format!(
            "{} pseudo labels for {} strong-view logit rows",
            pseudo.len(),
            strong.batch
        )));
    }
    if strong.batch == 0 {
        return Err(Error::Data("empty unlabeled batch".into()));
    }
    if let Some(p) = pseudo.iter().find(|p| p.class_index >= strong.classes) {
        return Err(Error::Label {
            label: p.class_index,
            num_classes: strong.classes,
        });
    }
    Ok(())
}

/// Sum of cross-entropies over accepted samples divided by the full
/// unlabeled batch size, and the acceptance rate.
pub fn unsupervised_loss(strong_logits: &Logits, pseudo: &[PseudoLabel]) -> Result<(f64, f64)> {
    check_pseudo(strong_logits, pseudo)?;
    let n = strong_logits.batch as f64;
    let mut sum = 0.0;
    let mut accepted = 0usize;
    for (i, pl) in pseudo.iter().enumerate() {
        if pl.accepted {
            sum += cross_entropy(strong_logits.row(i), pl.class_index);
            accepted += 1;
        }
    }
    Ok((sum / n, accepted as f64 / n))
}

/// [`unsupervised_loss`] and its gradient with respect to the strong logits.
pub fn unsupervised_loss_grad(
    strong_logits: &Logits,
    pseudo: &[PseudoLabel],
) -> Result<(f64, f64, Vec<f64>)> {
    let (loss, rate) = unsupervised_loss(strong_logits, pseudo)?;
    let c = strong_logits.classes;
    let scale = 1.0 / strong_logits.batch as f64;
    let mut grad = vec![0.0; strong_logits.values.len()];
    for (i, pl) in pseudo.iter().enumerate() {
        if pl.accepted {
            cross_entropy_grad(
                strong_logits.row(i),
                pl.class_index,
                scale,
                &mut grad[i * c..(i + 1) * c],
            );
        }
    }
    Ok((loss, rate, grad))
}

/// Unweighted loss terms of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_u: f64,
    pub l_mae: f64,
    pub total: f64,
    pub acceptance_rate: f64,
}

/// `total = (l_s + lambda_u * l_u) + mu_mae * l_mae`, evaluated in exactly
/// that order.
pub fn total_loss(
    l_s: f64,
    l_u: f64,
    l_mae: f64,
    lambda_u: f64,
    mu_mae: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_s", l_s),
        ("l_u", l_u),
        ("l_mae", l_mae),
        ("lambda_u", lambda_u),
        ("mu_mae", mu_mae),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} = {v}")));
        }
    }
    let total = (l_s + lambda_u * l_u) + mu_mae * l_mae;
    Ok(LossBreakdown {
        l_s,
        l_u,
        l_mae,
        total,
        acceptance_rate: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn logits(batch: usize, classes: usize, values: Vec<f64>) -> Logits {
        Logits::new(batch, classes, values).unwrap()
    }

    fn from_probs(p: &[f64]) -> Logits {
        logits(1, p.len(), p.iter().map(|v| libm::log(*v)).collect())
    }

    #[test]
    fn supervised_cases() {
        let l = supervised_loss(&logits(1, 10, vec![0.0; 10]), &[3]).unwrap();
        assert!((l - libm::log(10.0)).abs() < 1e-12);
        let l = supervised_loss(&logits(1, 2, vec![2.0, 0.0]), &[0]).unwrap();
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);
        let l = supervised_loss(&logits(1, 3, vec![500.0, 0.0, -3.0]), &[0]).unwrap();
        assert!((0.0..1e-200).contains(&l));
        assert_eq!(
            supervised_loss(&logits(1, 3, vec![0.0; 3]), &[3]),
            Err(Error::Label {
                label: 3,
                num_classes: 3
            })
        );
    }

    #[test]
    fn pseudo_label_rules() {
        let pl = make_pseudo_labels(&from_probs(&[0.97, 0.01, 0.02]), 0.95)[0];
        assert_eq!(pl.class_index, 0);
        assert!(pl.accepted);
        // Confidence exactly at the threshold is rejected.
        let l = from_probs(&[0.5, 0.25, 0.25]);
        let pl = make_pseudo_labels(&l, 0.5)[0];
        assert_eq!(pl.confidence, 0.5);
        assert!(!pl.accepted);
        let pl = make_pseudo_labels(&logits(1, 2, vec![0.0, 0.0]), 0.4)[0];
        assert_eq!((pl.class_index, pl.accepted), (0, true));
    }

    #[test]
    fn unsupervised_cases() {
        let strong = logits(2, 3, vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]);
        let rejected = [PseudoLabel {
            class_index: 0,
            confidence: 0.2,
            accepted: false,
        }; 2];
        assert_eq!(unsupervised_loss(&strong, &rejected).unwrap(), (0.0, 0.0));

        let mut vals = vec![0.0; 12];
        vals[1] = 1e3;
        let strong = logits(4, 3, vals);
        let mut pseudo = [PseudoLabel {
            class_index: 0,
            confidence: 0.1,
            accepted: false,
        }; 4];
        pseudo[0] = PseudoLabel {
            class_index: 1,
            confidence: 0.99,
            accepted: true,
        };
        let (l, rate) = unsupervised_loss(&strong, &pseudo).unwrap();
        assert!(l < 1e-12);
        assert_eq!(rate, 0.25);

        assert!(matches!(
            unsupervised_loss(&strong, &pseudo[..3]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn composition() {
        let b = total_loss(1.0, 0.5, 0.2, 10.0, 5.0).unwrap();
        assert_eq!(b.total, 7.0);
        assert_eq!(
            total_loss(1.0, 0.5, 0.2, 10.0, 0.0).unwrap().total,
            1.0 + 10.0 * 0.5
        );
        assert_eq!(total_loss(1.25, 0.5, 0.2, 0.0, 0.0).unwrap().total, 1.25);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 1.0, 1.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vals = vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let labels = [2, 0];
        let (_, g) = supervised_loss_grad(&logits(2, 3, vals.clone()), &labels).unwrap();
        let pseudo = [
            PseudoLabel {
                class_index: 1,
                confidence: 0.99,
                accepted: true,
            },
            PseudoLabel {
                class_index: 0,
                confidence: 0.5,
                accepted: false,
            },
        ];
        let (_, _, gu) = unsupervised_loss_grad(&logits(2, 3, vals.clone()), &pseudo).unwrap();
        for i in 0..vals.len() {
            let mut up = vals.clone();
            up[i] += 1e-6;
            let mut dn = vals.clone();
            dn[i] -= 1e-6;
            let num = (supervised_loss(&logits(2, 3, up.clone()), &labels).unwrap()
                - supervised_loss(&logits(2, 3, dn.clone()), &labels).unwrap())
                / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
            let num = (unsupervised_loss(&logits(2, 3, up), &pseudo).unwrap().0
                - unsupervised_loss(&logits(2, 3, dn), &pseudo).unwrap().0)
                / 2e-6;
            assert!((num - gu[i]).abs() < 1e-8);
        }
    }
}
