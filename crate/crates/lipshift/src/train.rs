//! Training: the margin loss driven by the model's own Lipschitz bound, the
//! epsilon ramp schedule, a decoupled-weight-decay Adam optimizer with cosine
//! learning-rate decay, and the epoch loop with CSV logging and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use crate::certify;
use crate::data::{batch_plan, random_crop_pad, Dataset};
use crate::error::{Error, Result};
use crate::model::LipShiFTModel;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default certification radius (the common 36/255 benchmark setting).
pub const DEFAULT_EPS: f64 = 36.0 / 255.0;

/// Guard below which a pair constant is treated as zero in the loss.
const K_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Epsilon schedule
// ---------------------------------------------------------------------------

/// Linear ramp of the training radius: zero at the start, the full radius
/// from two-thirds of training onward.
#[derive(Debug, Clone, Copy)]
pub struct EpsSchedule {
    pub eps: f64,
    pub total_epochs: usize,
}

impl EpsSchedule {
    pub fn eps_at_f(&self, t: f64) -> f64 {
        if self.total_epochs == 0 {
            return self.eps;
        }
        (1.5 * t / self.total_epochs as f64).min(1.0) * self.eps
    }

    pub fn eps_at(&self, epoch: usize) -> f64 {
        self.eps_at_f(epoch as f64)
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Margin-aware cross-entropy: each wrong logit is inflated by the largest
/// radius (capped at `eps_t`) that would still keep it below the true logit,
/// scaled by the pair's margin Lipschitz constant:
///
/// `z~_j = z_j + clamp((z_y - z_j) / K[j][y], 0, eps_t) * K[j][y]`
///
/// then ordinary softmax cross-entropy on `z~`. With `eps_t = 0` this is
/// exactly cross-entropy. `k` is the `[classes, classes]` scaled pair-constant
/// node; with `detach_k` its current value is used but no gradient flows into
/// the bound.
pub fn emma_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    k: Var,
    labels: &[usize],
    eps_t: f64,
    detach_k: bool,
) -> Result<Var> {
    let kv = if detach_k {
        let frozen = tape.value(k).clone();
        tape.leaf(frozen)
    } else {
        k
    };
    let kj = tape.gather_cols(kv, labels)?;
    let zy = tape.select_label(z, labels)?;
    let negz = tape.neg(z);
    let diff = tape.badd_col(negz, zy)?;
    let ratio = tape.div_guarded(diff, kj, S::from_f(K_FLOOR))?;
    let epsbar = tape.clamp(ratio, S::zero(), S::from_f(eps_t));
    let bump = tape.mul(epsbar, kj)?;
    let ztilde = tape.add(z, bump)?;
    tape.softmax_ce(ztilde, labels)
}

/// Evaluation-only robustness surrogate: clean cross-entropy plus `lambda`
/// times the cross-entropy of logits inflated by the full radius.
pub fn trades_eval_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    k: Var,
    labels: &[usize],
    eps: f64,
    lambda: f64,
) -> Result<Var> {
    let kj = tape.gather_cols(k, labels)?;
    let bump = tape.scale(kj, S::from_f(eps));
    let zt = tape.add(z, bump)?;
    let ce_clean = tape.softmax_ce(z, labels)?;
    let ce_rob = tape.softmax_ce(zt, labels)?;
    let weighted = tape.scale(ce_rob, S::from_f(lambda));
    tape.add(ce_clean, weighted)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Moment buffers are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(weight_decay: f64, param_sizes: &[usize]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update with learning rate `lr_t`. A non-finite gradient aborts and
    /// names the offending parameter.
    pub fn step<S: Scalar>(
        &mut self,
        lr_t: f64,
        params: Vec<(String, &mut Tensor<S>)>,
        grads: &[Tensor<S>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer has {} slots, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.into_iter().enumerate() {
            if !grads[i].is_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient in parameter `{name}` at optimizer step {}",
                    self.t
                )));
            }
            for (j, slot) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j].to_f();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let w = slot.to_f();
                let step = lr_t * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w);
                *slot = S::from_f(w - step);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to zero over `total` epochs, no warmup.
pub fn cosine_lr(lr: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Target certification radius; the ramp schedule approaches it.
    pub eps: f64,
    pub seed: u64,
    /// Random-crop padding; 0 disables augmentation entirely.
    pub aug_pad: usize,
    /// Fraction of each batch left unaugmented when augmentation is on.
    pub clean_fraction: f64,
    /// Freeze the pair constants inside the loss (no gradient through the
    /// spectral norms).
    pub detach_k: bool,
    /// Use the `(1 - p_drop)`-discounted constant in the reported VRA.
    pub drop_scaling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 5e-4,
            weight_decay: 0.0,
            eps: DEFAULT_EPS,
            seed: 0,
            aug_pad: 0,
            clean_fraction: 0.25,
            detach_k: false,
            drop_scaling: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub eps_train: f64,
    pub loss: f64,
    pub clean_acc: f64,
    pub vra: f64,
    pub backbone_bound: f64,
    pub scaled_bound: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,eps_train,loss,clean_acc,vra,backbone_bound,scaled_bound,lr";

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Runs epochs `start_epoch..cfg.epochs`. When `out_dir` is given, appends to
/// `train_log.csv` (fresh header when starting from scratch) and writes
/// `epoch_<n>.lsft` plus `latest.lsft` checkpoints. Resuming restores
/// parameters only; optimizer moments restart from zero.
pub fn train<S: Scalar>(
    model: &mut LipShiFTModel<S>,
    train_ds: &Dataset<S>,
    eval_ds: &Dataset<S>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<Vec<EpochStats>> {
    if train_ds.num_classes != model.cfg.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model expects {}",
            train_ds.num_classes, model.cfg.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.clean_fraction) {
        return Err(Error::config("clean_fraction", "must be in [0, 1]"));
    }
    if cfg.epochs == 0 || start_epoch >= cfg.epochs {
        return Ok(Vec::new());
    }
    let schedule = EpsSchedule { eps: cfg.eps, total_epochs: cfg.epochs };
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(cfg.weight_decay, &sizes);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let mut f = if start_epoch == 0 {
                let mut f = File::create(&path)?;
                writeln!(f, "{TRAIN_LOG_HEADER}")?;
                f
            } else {
                OpenOptions::new().create(true).append(true).open(&path)?
            };
            f.flush()?;
            Some(f)
        }
        None => None,
    };
    let mut stats = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr_t = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let eps_t = schedule.eps_at(epoch);
        let plan = batch_plan(train_ds.len(), cfg.batch_size.min(train_ds.len()), mix(cfg.seed, epoch as u64))?;
        let mut loss_sum = 0.0;
        for (bi, batch) in plan.iter().enumerate() {
            let (mut x, labels) = train_ds.gather(batch)?;
            if cfg.aug_pad > 0 {
                augment_tail(&mut x, cfg, mix(cfg.seed, (epoch as u64) << 20 | bi as u64))?;
            }
            let nhwc = ops::nchw_to_nhwc(&x)?;
            let mut tape = Tape::new();
            let tp = model.stage_params(&mut tape);
            let xv = tape.leaf(nhwc);
            let z = model.forward_t(
                &mut tape,
                &tp,
                xv,
                true,
                mix(cfg.seed, 0xD0 ^ ((epoch as u64) << 24 | bi as u64)),
            )?;
            let tb = model.bound_t(&mut tape, &tp)?;
            let k_scaled = tape.mul_scalar(tb.pair_constants, tb.scaled)?;
            let loss = emma_loss(&mut tape, z, k_scaled, &labels, eps_t, cfg.detach_k)?;
            loss_sum += tape.value(loss).item().to_f() * labels.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Tensor<S>> =
                tp.vars.iter().map(|&v| tape.grad(v).clone()).collect();
            opt.step(lr_t, model.params_mut(), &grads)?;
        }
        let loss = loss_sum / train_ds.len() as f64;
        let report = model.lipschitz_report(0)?;
        let clean_acc = certify::clean_accuracy(model, eval_ds)?;
        let certs =
            certify::certify_batch(model, &report, &eval_ds.images, cfg.eps, cfg.drop_scaling)?;
        let robust = certs
            .iter()
            .zip(&eval_ds.labels)
            .filter(|(c, &l)| c.predicted == l && c.verdict == certify::Verdict::Certified)
            .count();
        let vra = robust as f64 / eval_ds.len().max(1) as f64;
        let s = EpochStats {
            epoch,
            eps_train: eps_t,
            loss,
            clean_acc,
            vra,
            backbone_bound: report.backbone_bound,
            scaled_bound: report.scaled_bound,
            lr: lr_t,
        };
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                s.epoch, s.eps_train, s.loss, s.clean_acc, s.vra, s.backbone_bound,
                s.scaled_bound, s.lr
            )?;
            f.flush()?;
        }
        if let Some(dir) = out_dir {
            model.save_checkpoint(&dir.join(format!("epoch_{epoch}.lsft")))?;
            model.save_checkpoint(&dir.join("latest.lsft"))?;
        }
        stats.push(s);
    }
    Ok(stats)
}

/// Random-crops all but the leading `clean_fraction` of the batch in place.
fn augment_tail<S: Scalar>(x: &mut Tensor<S>, cfg: &TrainConfig, seed: u64) -> Result<()> {
    let s = x.shape().to_vec();
    let b = s[0];
    let per = s[1] * s[2] * s[3];
    let n_clean = (cfg.clean_fraction * b as f64).round() as usize;
    if n_clean >= b {
        return Ok(());
    }
    let tail = Tensor::new(
        vec![b - n_clean, s[1], s[2], s[3]],
        x.data()[n_clean * per..].to_vec(),
    )?;
    let aug = random_crop_pad(&tail, cfg.aug_pad, seed)?;
    x.data_mut()[n_clean * per..].copy_from_slice(aug.data());
    Ok(())
}

/// Highest-numbered `epoch_<n>.lsft` in a directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name
            .strip_prefix("epoch_")
            .and_then(|rest| rest.strip_suffix(".lsft"))
        {
            if let Ok(n) = num.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| n > *b) {
                    best = Some((n, path));
                }
            }
        }
    }
    Ok(best)
}
