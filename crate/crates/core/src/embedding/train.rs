use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, simclr_loss, ContrastiveKind, Reduction};
use super::mlp::{Dense, EncoderGrad, Mlp, MlpEncoder, MlpGrad};
use crate::data::{select_rows, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_named, derive_seed, rng_from_seed};

/// Optimiser and objective settings for contrastive training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub lambda_ce: f64,
    pub learning_rate: f64,
    /// Cosine annealing ends at this learning rate.
    pub lr_floor: f64,
    pub momentum: f64,
    /// Global gradient norm above which a step is rescaled.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub objective: ContrastiveKind,
    /// Std of the Gaussian jitter that produces the two SimCLR views.
    pub simclr_jitter: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_ce: 0.5,
            learning_rate: 0.05,
            lr_floor: 1e-4,
            momentum: 0.9,
            max_grad_norm: 5.0,
            batch_size: 1000,
            epochs: 50,
            seed: 0,
            reduction: Reduction::Mean,
            objective: ContrastiveKind::SupCon,
            simclr_jitter: 0.05,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.lambda_ce >= 0.0) {
            return Err(Error::Config("lambda_ce must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.learning_rate {
            return Err(Error::Config("need 0 ≤ lr_floor ≤ learning_rate, learning_rate > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        self.lr_floor + 0.5 * (self.learning_rate - self.lr_floor) * (1.0 + (PI * t).cos())
    }
}

/// One line of the training log. Epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub supcon: f64,
    pub ce: f64,
}

/// Writes the log as JSON lines.
pub fn write_log<W: Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchLoss {
    total: f64,
    contrastive: f64,
    ce: f64,
}

fn batch_objective(
    encoder: &MlpEncoder,
    x: &DMatrix<f64>,
    labels: &[usize],
    config: &ContrastiveConfig,
    jitter_seed: u64,
    with_grad: bool,
) -> Result<(BatchLoss, Option<EncoderGrad>)> {
    match config.objective {
        ContrastiveKind::SupCon => {
            let trace = encoder.forward_traced(x)?;
            let out = &trace.out;
            let c = combined_loss(
                &out.projections,
                &out.logits,
                labels,
                config.temperature,
                config.lambda_ce,
                config.reduction,
            )?;
            let grad = with_grad.then(|| encoder.backward(&trace, &c.d_projections, &c.d_logits));
            Ok((
                BatchLoss {
                    total: c.loss,
                    contrastive: c.contrastive,
                    ce: c.ce,
                },
                grad,
            ))
        }
        ContrastiveKind::SimClr => {
            // two jittered views stacked as [x + ε; x + ε']
            let n = x.nrows();
            let mut rng = rng_from_seed(jitter_seed);
            let noise = Normal::new(0.0, config.simclr_jitter.max(0.0))
                .map_err(|e| Error::Config(format!("simclr_jitter: {e}")))?;
            let mut views = DMatrix::zeros(2 * n, x.ncols());
            views.rows_mut(0, n).copy_from(x);
            views.rows_mut(n, n).copy_from(x);
            views.apply(|v| *v += noise.sample(&mut rng));
            let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
            let trace = encoder.forward_traced(&views)?;
            let out = &trace.out;
            let mut con = simclr_loss(&out.projections, config.temperature)?;
            if config.reduction == Reduction::Mean {
                let s = 1.0 / n as f64;
                con.loss *= s;
                con.grad *= s;
            }
            let (ce, d_logits) = if config.lambda_ce > 0.0 {
                let ce = super::loss::ce_loss(&out.logits, &doubled)?;
                (ce.loss, ce.grad * config.lambda_ce)
            } else {
                (0.0, DMatrix::zeros(2 * n, encoder.n_classes()))
            };
            let grad = with_grad.then(|| encoder.backward(&trace, &con.grad, &d_logits));
            Ok((
                BatchLoss {
                    total: con.loss + config.lambda_ce * ce,
                    contrastive: con.loss,
                    ce,
                },
                grad,
            ))
        }
    }
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(batch_size).map(move |s| (s, (s + batch_size).min(n)))
}

fn usable(labels: &[usize], config: &ContrastiveConfig) -> bool {
    if labels.len() < 2 {
        return false;
    }
    match config.objective {
        ContrastiveKind::SimClr => true,
        ContrastiveKind::SupCon => {
            let mut seen = labels.to_vec();
            seen.sort_unstable();
            seen.windows(2).any(|w| w[0] == w[1])
        }
    }
}

/// Mean objective over fixed-order batches of `order`.
fn evaluate(
    encoder: &MlpEncoder,
    data: &LabeledDataset,
    order: &[usize],
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<BatchLoss> {
    let mut acc = BatchLoss::default();
    let mut count = 0usize;
    for (b, (s, e)) in batches(order.len(), config.batch_size).enumerate() {
        let idx = &order[s..e];
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        if !usable(&labels, config) {
            continue;
        }
        let x = select_rows(data.points(), idx);
        let (l, _) = batch_objective(encoder, &x, &labels, config, derive_seed(seed, b as u64), false)?;
        acc.total += l.total;
        acc.contrastive += l.contrastive;
        acc.ce += l.ce;
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("no usable batch in dataset".into()));
    }
    let c = count as f64;
    Ok(BatchLoss {
        total: acc.total / c,
        contrastive: acc.contrastive / c,
        ce: acc.ce / c,
    })
}

pub(crate) fn momentum_step(params: &mut Mlp, velocity: &mut MlpGrad, grad: &MlpGrad, lr: f64, mu: f64) {
    for ((p, v), g) in params.layers.iter_mut().zip(&mut velocity.layers).zip(&grad.layers) {
        step_dense(p, v, g, lr, mu);
    }
}

fn step_dense(p: &mut Dense, v: &mut Dense, g: &Dense, lr: f64, mu: f64) {
    v.weight.zip_apply(&g.weight, |vi, gi| *vi = mu * *vi + gi);
    v.bias.zip_apply(&g.bias, |vi, gi| *vi = mu * *vi + gi);
    p.weight.zip_apply(&v.weight, |pi, vi| *pi -= lr * vi);
    p.bias.zip_apply(&v.bias, |pi, vi| *pi -= lr * vi);
}

/// Mini-batch SGD with momentum on the combined contrastive objective.
///
/// Batches are reshuffled every epoch from the config seed, so runs are
/// bit-reproducible. The returned log starts with an epoch-0 entry for the
/// untrained network.
pub fn train(
    encoder: &MlpEncoder,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &ContrastiveConfig,
) -> Result<(MlpEncoder, Vec<EpochLog>)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for ds in [train_set, val_set] {
        if ds.dim() != encoder.input_dim() {
            return Err(Error::invalid(format!(
                "data dimension {} does not match encoder input {}",
                ds.dim(),
                encoder.input_dim()
            )));
        }
        if ds.n_classes() > encoder.n_classes() {
            return Err(Error::invalid("more classes than classifier outputs"));
        }
    }
    let mut net = encoder.clone();
    if config.epochs == 0 {
        return Ok((net, Vec::new()));
    }
    let mut val_order: Vec<usize> = (0..val_set.len()).collect();
    val_order.shuffle(&mut rng_from_seed(derive_named(config.seed, "val-order")));
    let eval_seed = derive_named(config.seed, "val-jitter");
    let train_order: Vec<usize> = {
        let mut o: Vec<usize> = (0..train_set.len()).collect();
        o.shuffle(&mut rng_from_seed(derive_named(config.seed, "train-eval-order")));
        o
    };

    let initial_train = evaluate(&net, train_set, &train_order, config, eval_seed)?;
    let initial_val = evaluate(&net, val_set, &val_order, config, eval_seed)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        lr: config.lr_at(1),
        train_loss: initial_train.total,
        val_loss: initial_val.total,
        supcon: initial_train.contrastive,
        ce: initial_train.ce,
    }];

    let mut vel = EncoderGrad {
        encoder: MlpGrad::zeros_like(&net.encoder),
        projector: MlpGrad::zeros_like(&net.projector),
        classifier: MlpGrad::zeros_like(&net.classifier),
    };
    let mut shuffle_rng = rng_from_seed(derive_named(config.seed, "shuffle"));
    let jitter_root = derive_named(config.seed, "train-jitter");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut acc = BatchLoss::default();
        let mut count = 0usize;
        for (b, (s, e)) in batches(order.len(), config.batch_size).enumerate() {
            let idx = &order[s..e];
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();
            if !usable(&labels, config) {
                continue;
            }
            let x = select_rows(train_set.points(), idx);
            let step_seed = derive_seed(jitter_root, (epoch as u64) << 32 | b as u64);
            let (l, grad) = batch_objective(&net, &x, &labels, config, step_seed, true)?;
            if !l.total.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: b,
                    loss: l.total,
                });
            }
            let mut grad = grad.expect("training objective yields gradients");
            let norm = (grad.encoder.norm_squared() + grad.projector.norm_squared() + grad.classifier.norm_squared()).sqrt();
            if norm > config.max_grad_norm {
                let factor = config.max_grad_norm / norm;
                grad.encoder.scale(factor);
                grad.projector.scale(factor);
                grad.classifier.scale(factor);
            }
            momentum_step(&mut net.encoder, &mut vel.encoder, &grad.encoder, lr, config.momentum);
            momentum_step(&mut net.projector, &mut vel.projector, &grad.projector, lr, config.momentum);
            momentum_step(&mut net.classifier, &mut vel.classifier, &grad.classifier, lr, config.momentum);
            acc.total += l.total;
            acc.contrastive += l.contrastive;
            acc.ce += l.ce;
            count += 1;
        }
        let c = count.max(1) as f64;
        let val = evaluate(&net, val_set, &val_order, config, eval_seed)?;
        if !val.total.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                batch: count,
                loss: val.total,
            });
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: acc.total / c,
            val_loss: val.total,
            supcon: acc.contrastive / c,
            ce: acc.ce / c,
        });
    }
    Ok((net, log))
}

/// Replaces every point by its embedding `h = f(x)`; labels are kept.
pub fn embed_dataset(encoder: &MlpEncoder, data: &LabeledDataset) -> Result<LabeledDataset> {
    let h = encoder.embed(data.points())?;
    data.with_points(h)
}
