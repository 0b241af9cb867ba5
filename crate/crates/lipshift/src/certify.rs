//! Certified-robustness verdicts. A prediction is certified at radius `eps`
//! when every competing logit trails the predicted one by more than
//! `eps * K[pred][j]`, where `K` is the pairwise margin Lipschitz constant
//! from the model's [`LipschitzReport`](crate::model::LipschitzReport).

use crate::error::Result;
use crate::model::{LipShiFTModel, LipschitzReport};
use crate::scalar::Scalar;
use crate::data::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    /// Abstention: the margin does not rule out a label flip inside the ball
    /// (ties abstain too).
    Bottom,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub sample: usize,
    pub predicted: usize,
    pub verdict: Verdict,
    /// `min_j (z_pred - z_j - eps * K[pred][j])`; certified iff positive.
    pub slack: f64,
    /// Runner-up class attaining the minimum slack.
    pub limiting: Option<usize>,
}

/// Certifies every sample of a `[N,C,H,W]` batch at radius `eps`.
/// `drop_scaling` selects the `(1 - p_drop)`-discounted backbone constant
/// instead of the undiscounted one.
pub fn certify_batch<S: Scalar>(
    model: &LipShiFTModel<S>,
    report: &LipschitzReport,
    x: &Tensor<S>,
    eps: f64,
    drop_scaling: bool,
) -> Result<Vec<Certificate>> {
    let z = model.forward(x)?;
    let k = report.cert_constants(drop_scaling);
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = z.data()[i * c..(i + 1) * c].iter().map(|v| v.to_f()).collect();
        let mut pred = 0;
        for j in 1..c {
            if row[j] > row[pred] {
                pred = j;
            }
        }
        let mut slack = f64::INFINITY;
        let mut limiting = None;
        for j in 0..c {
            if j == pred {
                continue;
            }
            let s = row[pred] - row[j] - eps * k.data()[pred * c + j];
            if s < slack {
                slack = s;
                limiting = Some(j);
            }
        }
        let verdict = if slack > 0.0 { Verdict::Certified } else { Verdict::Bottom };
        out.push(Certificate { sample: i, predicted: pred, verdict, slack, limiting });
    }
    Ok(out)
}

/// Fraction of samples predicted correctly.
pub fn clean_accuracy<S: Scalar>(model: &LipShiFTModel<S>, ds: &Dataset<S>) -> Result<f64> {
    let preds = model.predict(&ds.images)?;
    let correct = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Verified-robust accuracy: fraction of samples that are both correct and
/// certified at radius `eps`. The Lipschitz report is computed once per call.
pub fn vra<S: Scalar>(
    model: &LipShiFTModel<S>,
    ds: &Dataset<S>,
    eps: f64,
    drop_scaling: bool,
) -> Result<f64> {
    let report = model.lipschitz_report(0)?;
    let certs = certify_batch(model, &report, &ds.images, eps, drop_scaling)?;
    let ok = certs
        .iter()
        .zip(&ds.labels)
        .filter(|(c, &l)| c.predicted == l && c.verdict == Verdict::Certified)
        .count();
    Ok(ok as f64 / ds.len().max(1) as f64)
}
