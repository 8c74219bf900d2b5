//! Training: plain stochastic gradient descent under a triangular cyclic
//! learning rate, periodic validation on held-out pairs, best-checkpoint
//! tracking with early stopping, and a tab-separated step log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_network, BackboneConfig};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::eval::{adapt_image, evaluate_pairs, EvalSettings, KeypointSource};
use crate::loss::{pair_loss_on_maps, LossConfig, LossKind};
use crate::matching::PixelLoc;
use crate::synth::{Dataset, Split};
use crate::tensor::{sum_scalars, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub backbone: BackboneConfig,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    /// Image pairs per optimization step.
    pub batch_pairs: usize,
    /// Correspondences sampled (with replacement) per pair per step.
    pub correspondences_per_pair: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_period_steps: usize,
    pub max_steps: usize,
    pub validation_every: usize,
    /// Consecutive validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::new(),
            backbone: BackboneConfig::desk(),
            loss_kind: LossKind::Rr,
            loss: LossConfig::default(),
            batch_pairs: 2,
            correspondences_per_pair: 128,
            base_lr: 1.0e-4,
            max_lr: 1.0e-3,
            cycle_period_steps: 2000,
            max_steps: 3000,
            validation_every: 250,
            patience: 5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return Err(Error::InvalidConfig(
                "learning rates need 0 < base_lr <= max_lr".into(),
            ));
        }
        if self.cycle_period_steps < 2 {
            return Err(Error::InvalidConfig("cycle_period_steps must be >= 2".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.batch_pairs < 1 || self.correspondences_per_pair < 1 {
            return Err(Error::InvalidConfig(
                "batch_pairs and correspondences_per_pair must be >= 1".into(),
            ));
        }
        if self.validation_every < 1 {
            return Err(Error::InvalidConfig("validation_every must be >= 1".into()));
        }
        self.backbone.validate()?;
        self.loss.validate()
    }
}

/// Triangular wave: `base` at phase 0, `max` at phase period/2, linear in
/// between, repeating with `period`.
pub fn cyclic_lr(step: usize, base: f64, max: f64, period: usize) -> f64 {
    let phase = (step % period) as f64;
    let half = period as f64 / 2.0;
    if phase <= half {
        base + (max - base) * phase / half
    } else {
        max - (max - base) * (phase - half) / (period as f64 - half)
    }
}

/// One descent step `p <- p - lr * g` over every parameter; gradients are
/// consumed (the replacement tensors carry none).
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    for tensor in params {
        let grad = tensor.grad().ok_or_else(|| {
            Error::InvalidArgument("sgd_step: parameter is missing its gradient".into())
        })?;
        let data: Vec<f64> = tensor
            .data()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - lr * g)
            .collect();
        *tensor = Tensor::from_vec(data, tensor.shape(), true)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps_completed: usize,
    pub initial_val_pck5: Option<f64>,
    pub best_val_pck5: Option<f64>,
    pub final_loss: Option<f64>,
}

struct PreparedPair {
    source: Tensor,
    target: Tensor,
    points: Vec<(PixelLoc, PixelLoc)>,
}

/// Run the training loop; artifacts land in `out_dir` (best.ckpt,
/// last.ckpt, train.log.tsv).
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let log_path = out_dir.join("train.log.tsv");

    let dataset = Dataset::open(&config.dataset)?;
    let mut net = build_network(&config.backbone)?;

    let prepare = |split: Split| -> Result<Vec<PreparedPair>> {
        let mut out = Vec::new();
        for meta in dataset.split(split) {
            let pair = dataset.load_pair(meta)?;
            if pair.corr.points.is_empty() {
                continue;
            }
            out.push(PreparedPair {
                source: adapt_image(&net, &pair.source)?,
                target: adapt_image(&net, &pair.target)?,
                points: pair.corr.points,
            });
        }
        Ok(out)
    };
    let train_pairs = prepare(Split::Train)?;
    if train_pairs.is_empty() {
        return Err(Error::DataFormat {
            path: config.dataset.clone(),
            message: "train split is empty".into(),
        });
    }
    // validation reuses the evaluation path on raw loaded pairs
    let val_pairs = crate::eval::load_split(&dataset, Split::Val)?;
    let val_settings = EvalSettings {
        keypoints: KeypointSource::default(),
        thresholds: vec![5.0],
        ..EvalSettings::default()
    };
    let validate = |net: &crate::backbone::DescriptorNetwork| -> Result<f64> {
        Ok(evaluate_pairs(net, &val_pairs, &val_settings)?.pck[0].1)
    };

    // the log streams to disk so aborted runs keep their history
    let log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let emit = |log: &mut std::io::BufWriter<std::fs::File>, line: &str| -> Result<()> {
        use std::io::Write;
        writeln!(log, "{}", line).map_err(|e| Error::io(&log_path, e))
    };
    emit(&mut log, "# densedesc training log v1")?;
    emit(&mut log, "# step\tlr\tloss\tval_pck5")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    save_checkpoint(&net, &best_path)?;
    let mut initial_val = None;
    let mut best_val = None;
    if !val_pairs.is_empty() {
        let v = validate(&net)?;
        emit(&mut log, &format!("0\t-\t-\t{}", v))?;
        initial_val = Some(v);
        best_val = Some(v);
    }

    let mut stale_validations = 0usize;
    let mut final_loss = None;
    let mut steps_completed = 0usize;
    for step in 1..=config.max_steps {
        let lr = cyclic_lr(step - 1, config.base_lr, config.max_lr, config.cycle_period_steps);

        let mut batch_terms = Vec::with_capacity(config.batch_pairs);
        for _ in 0..config.batch_pairs {
            let pair = &train_pairs[rng.gen_range(0..train_pairs.len())];
            let sampled: Vec<(PixelLoc, PixelLoc)> = (0..config.correspondences_per_pair)
                .map(|_| pair.points[rng.gen_range(0..pair.points.len())])
                .collect();
            let source_map = net.forward(&pair.source)?;
            let target_map = net.forward(&pair.target)?;
            batch_terms.push(pair_loss_on_maps(
                &source_map,
                &target_map,
                &sampled,
                &config.loss,
                config.loss_kind,
            )?);
        }
        let loss = sum_scalars(&batch_terms)?.scalar_mul(1.0 / batch_terms.len() as f64);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            use std::io::Write;
            let _ = log.flush();
            return Err(Error::Numerical(format!(
                "loss diverged at step {} (value {})",
                step, loss_value
            )));
        }
        loss.backward()?;
        sgd_step(net.parameters_mut().iter_mut().map(|p| &mut p.tensor), lr)?;

        final_loss = Some(loss_value);
        steps_completed = step;
        let mut line = format!("{}\t{}\t{}", step, lr, loss_value);

        if !val_pairs.is_empty() && step % config.validation_every == 0 {
            let v = validate(&net)?;
            let _ = write!(line, "\t{}", v);
            if best_val.map_or(true, |b| v > b) {
                best_val = Some(v);
                save_checkpoint(&net, &best_path)?;
                stale_validations = 0;
            } else {
                stale_validations += 1;
            }
            emit(&mut log, &line)?;
            {
                use std::io::Write;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
            }
            if stale_validations >= config.patience {
                break;
            }
            continue;
        }
        emit(&mut log, &format!("{}\t-", line))?;
    }

    save_checkpoint(&net, &last_path)?;
    {
        use std::io::Write;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path,
        steps_completed,
        initial_val_pck5: initial_val,
        best_val_pck5: best_val,
        final_loss,
    })
}
