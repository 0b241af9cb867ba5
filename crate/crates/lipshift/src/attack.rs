//! Empirical robustness: multi-restart projected gradient descent in the l2
//! ball, used to sanity-check certificates (a certified sample must never be
//! flipped by an in-ball attack).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LipShiFTModel;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::DEFAULT_EPS;

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// Standard budget at a given radius: 100 steps of size `2.5 * eps / steps`
    /// with 5 restarts.
    pub fn for_eps(eps: f64) -> Self {
        let steps = 100;
        AttackConfig { eps, steps, step_size: 2.5 * eps / steps as f64, restarts: 5, seed: 0 }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::for_eps(DEFAULT_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub sample: usize,
    pub clean_correct: bool,
    /// The attack found an in-ball point classified differently from the true
    /// label.
    pub success: bool,
    /// Worst margin `min_{j != y} (z_y - z_j)` seen over all restarts
    /// (negative means a successful flip).
    pub final_margin: f64,
}

fn margins<S: Scalar>(z: &Tensor<S>, labels: &[usize]) -> Vec<f64> {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &z.data()[i * c..(i + 1) * c];
            let zy = row[labels[i]].to_f();
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != labels[i])
                .map(|(_, &v)| zy - v.to_f())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Runs the attack on a `[N,C,H,W]` batch with true labels. Every probe point
/// stays inside the l2 ball of radius `eps` (up to 1e-6 float slop) and in the
/// valid pixel range `[0, 1]`.
pub fn pgd_l2<S: Scalar>(
    model: &LipShiFTModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if x.rank() != 4 || x.shape()[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "attack input {:?} with {} labels",
            x.shape(),
            labels.len()
        )));
    }
    if cfg.eps < 0.0 || cfg.steps == 0 || cfg.restarts == 0 {
        return Err(Error::Attack("attack needs eps >= 0, steps >= 1, restarts >= 1".into()));
    }
    let n = x.shape()[0];
    let per = x.numel() / n;
    let clean_z = model.forward(x)?;
    let clean_margin = margins(&clean_z, labels);
    let preds = model.predict(x)?;
    let mut worst = clean_margin.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for restart in 0..cfg.restarts {
        // delta in f64 for stable projection arithmetic
        let mut delta = vec![0.0f64; x.numel()];
        if restart > 0 {
            for i in 0..n {
                let dir: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = cfg.eps * rng.gen::<f64>();
                for j in 0..per {
                    delta[i * per + j] = dir[j] / norm * radius;
                }
            }
        }
        for _ in 0..cfg.steps {
            let adv = perturbed(x, &delta)?;
            let nhwc = ops::nchw_to_nhwc(&adv)?;
            let mut tape = Tape::new();
            let tp = model.stage_params(&mut tape);
            let xv = tape.leaf(nhwc);
            let z = model.forward_t(&mut tape, &tp, xv, false, 0)?;
            let loss = tape.softmax_ce(z, labels)?;
            tape.backward(loss)?;
            let g = ops::nhwc_to_nchw(tape.grad(xv))?;
            for i in 0..n {
                let gs = &g.data()[i * per..(i + 1) * per];
                let norm = gs
                    .iter()
                    .map(|v| v.to_f().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm <= 1e-12 {
                    continue;
                }
                // ascent on the loss, then radial projection back into the ball
                for j in 0..per {
                    delta[i * per + j] += cfg.step_size * gs[j].to_f() / norm;
                }
                let dn = delta[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if dn > cfg.eps {
                    let scale = cfg.eps / dn;
                    for j in 0..per {
                        delta[i * per + j] *= scale;
                    }
                }
            }
        }
        let adv = perturbed(x, &delta)?;
        debug_assert!(in_ball(x, &adv, cfg.eps + 1e-6));
        let z = model.forward(&adv)?;
        for (i, m) in margins(&z, labels).into_iter().enumerate() {
            if m < worst[i] {
                worst[i] = m;
            }
        }
    }

    Ok((0..n)
        .map(|i| AttackResult {
            sample: i,
            clean_correct: preds[i] == labels[i],
            success: worst[i] < 0.0,
            final_margin: worst[i],
        })
        .collect())
}

/// `clip(x + delta, 0, 1)`; clipping each coordinate toward its original
/// value never increases the per-sample l2 distance, so the result stays in
/// the ball whenever `delta` does.
fn perturbed<S: Scalar>(x: &Tensor<S>, delta: &[f64]) -> Result<Tensor<S>> {
    Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
        S::from_f((x.data()[i].to_f() + delta[i]).clamp(0.0, 1.0))
    }))
}

fn in_ball<S: Scalar>(x: &Tensor<S>, adv: &Tensor<S>, limit: f64) -> bool {
    let n = x.shape()[0];
    let per = x.numel() / n;
    (0..n).all(|i| {
        let d: f64 = (0..per)
            .map(|j| (adv.data()[i * per + j].to_f() - x.data()[i * per + j].to_f()).powi(2))
            .sum::<f64>()
            .sqrt();
        d <= limit
    })
}

/// Fraction of samples that are clean-correct and survive the attack.
pub fn empirical_robust_acc<S: Scalar>(
    model: &LipShiFTModel<S>,
    ds: &Dataset<S>,
    cfg: &AttackConfig,
) -> Result<f64> {
    let results = pgd_l2(model, &ds.images, &ds.labels, cfg)?;
    let ok = results.iter().filter(|r| r.clean_correct && !r.success).count();
    Ok(ok as f64 / ds.len().max(1) as f64)
}
