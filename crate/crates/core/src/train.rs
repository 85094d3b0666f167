//! Dataset split, mini-batch Adam training and checkpoint files.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::chemdata::DatasetRow;
use crate::eval::{f1_codes, predict_codes};
use crate::invnet::{decode, encode, CheckpointError, InvertibleNet, NetConfig, NetError};
use crate::loss::{samples, total_loss, total_loss_with_grad, LossBreakdown, LossError, LossWeights, Sample};
use crate::numeric::{Adam, NumericError, RngStream};

const SPLIT_KEY: u64 = 1;
const INIT_KEY: u64 = 2;
const VALIDATION_KEY: u64 = 3;
const EPOCH_KEY_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            split_fraction: 0.8,
            seed: 0,
            weights: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split fraction must lie strictly between 0 and 1");
        }
        if self.net.blocks_per_stage == 0 || self.net.hidden_cap == 0 {
            return bad("network needs at least one block per stage and a positive hidden width");
        }
        self.weights.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub f1_val: f64,
    pub loss_y_train: f64,
    pub loss_x_train: f64,
    pub loss_y_val: f64,
    pub loss_x_val: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,f1,loss_y_train,loss_x_train,loss_y_val,loss_x_val";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.f1_val, self.loss_y_train, self.loss_x_train, self.loss_y_val, self.loss_x_val
        )
    }
}

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("non-finite loss or gradient in epoch {epoch}, step {step}; last good parameters retained")]
    NonFinite {
        epoch: usize,
        step: usize,
        last_good: Box<InvertibleNet>,
        logs: Vec<EpochLog>,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {source}")]
    Checkpoint { path: String, source: CheckpointError },
    #[error("{path}: {source}")]
    Incompatible { path: String, source: NetError },
}

impl From<NumericError> for TrainError {
    fn from(e: NumericError) -> Self {
        Self::Loss(LossError::from(e))
    }
}

/// Seeded uniform shuffle; the first `⌈fraction · n⌉` rows train, capped so
/// that both parts are non-empty.
pub fn split_dataset(rows: &[DatasetRow], fraction: f64, seed: u64) -> Result<(Vec<DatasetRow>, Vec<DatasetRow>), TrainError> {
    if rows.len() < 2 {
        return Err(TrainError::TooFewRows {
            needed: 2,
            found: rows.len(),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config("split fraction must lie strictly between 0 and 1".into()));
    }
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(seed).substream(SPLIT_KEY));
    let n_train = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Trained network and one log record per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: InvertibleNet,
    pub logs: Vec<EpochLog>,
}

/// Loss over a whole set in batches, weighted by batch size.
fn evaluate_loss(net: &InvertibleNet, set: &[Sample], config: &TrainConfig, rng: &RngStream) -> Result<LossBreakdown, LossError> {
    let mut acc = LossBreakdown::default();
    for (b, batch) in set.chunks(config.batch_size).enumerate() {
        let l = total_loss(net, batch, &config.weights, &rng.substream(b as u64))?;
        let w = batch.len() as f64 / set.len() as f64;
        acc.total += w * l.total;
        acc.bce += w * l.bce;
        acc.range += w * l.range;
        acc.sparsity += w * l.sparsity;
        acc.forbidden += w * l.forbidden;
        acc.zfree += w * l.zfree;
    }
    Ok(acc)
}

/// Trains from scratch on the training part of a seeded split. `observer`
/// sees each epoch record as soon as it is complete.
pub fn fit(rows: &[DatasetRow], config: &TrainConfig, mut observer: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (train_rows, val_rows) = split_dataset(rows, config.split_fraction, config.seed)?;
    let train = samples(&train_rows);
    let val = samples(&val_rows);
    let root = RngStream::new(config.seed);
    let mut net = InvertibleNet::new(config.net, &mut root.substream(INIT_KEY));
    let adam = Adam::with_lr(config.learning_rate);
    let val_rng = root.substream(VALIDATION_KEY);
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let epoch_rng = root.substream(EPOCH_KEY_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng.substream(0));
        let (mut sum_y, mut sum_x) = (0.0, 0.0);

        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = total_loss_with_grad(&net, &batch, &config.weights, &epoch_rng.substream(1 + step as u64))?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    last_good: Box::new(net),
                    logs,
                });
            }
            for (p, g) in net.parameters_mut().zip(grads.into_tensors()) {
                p.grad = g;
            }
            adam.step(net.parameters_mut())?;
            net.snap_to_f32();
            sum_y += loss.loss_y() * batch.len() as f64;
            sum_x += loss.loss_x(&config.weights) * batch.len() as f64;
        }

        let val_loss = evaluate_loss(&net, &val, config, &val_rng)?;
        let targets: Vec<_> = val.iter().map(|s| s.code.clone()).collect();
        let log = EpochLog {
            epoch,
            f1_val: f1_codes(&predict_codes(&net, &val)?, &targets)?,
            loss_y_train: sum_y / train.len() as f64,
            loss_x_train: sum_x / train.len() as f64,
            loss_y_val: val_loss.loss_y(),
            loss_x_val: val_loss.loss_x(&config.weights),
        };
        observer(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { net, logs })
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(net: &InvertibleNet, path: &Path) -> Result<(), TrainError> {
    let bytes = encode(&net.to_named_arrays()).map_err(|source| TrainError::Checkpoint {
        path: path.display().to_string(),
        source,
    })?;
    write_file_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<InvertibleNet, TrainError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let arrays = decode(&bytes).map_err(|source| TrainError::Checkpoint { path: p.clone(), source })?;
    InvertibleNet::from_named_arrays(&arrays).map_err(|source| TrainError::Incompatible { path: p, source })
}

/// Loads a checkpoint into a net of a known configuration.
pub fn load_checkpoint_into(net: &mut InvertibleNet, path: &Path) -> Result<(), TrainError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let arrays = decode(&bytes).map_err(|source| TrainError::Checkpoint { path: p.clone(), source })?;
    net.load_named_arrays(&arrays).map_err(|source| TrainError::Incompatible { path: p, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemdata::synth_dataset;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            net: NetConfig {
                blocks_per_stage: 1,
                hidden_cap: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_sizes() {
        let rows = synth_dataset(10, 1);
        let (a, b) = split_dataset(&rows, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let rows = synth_dataset(1567, 1);
        let (a, b) = split_dataset(&rows, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (1254, 313));
        let (a, b) = split_dataset(&rows[..2], 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn split_is_seeded_partition() {
        let rows: Vec<_> = synth_dataset(50, 2);
        let (a, b) = split_dataset(&rows, 0.8, 7).unwrap();
        assert_eq!(split_dataset(&rows, 0.8, 7).unwrap(), (a.clone(), b.clone()));
        let mut ids: Vec<u64> = a.iter().chain(&b).map(|r| r.molecule_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (1..=50).collect::<Vec<_>>());
        assert_ne!(split_dataset(&rows, 0.8, 8).unwrap().0, a);
    }

    #[test]
    fn split_rejects_tiny_input() {
        assert!(matches!(split_dataset(&[], 0.8, 0), Err(TrainError::TooFewRows { .. })));
        assert!(split_dataset(&synth_dataset(5, 0), 1.0, 0).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let config = TrainConfig { epochs: 0, ..tiny() };
        assert!(matches!(fit(&synth_dataset(10, 0), &config, |_| {}), Err(TrainError::Config(_))));
    }

    #[test]
    fn one_epoch_logs_one_record() {
        let mut seen = 0;
        let out = fit(&synth_dataset(10, 0), &tiny(), |_| seen += 1).unwrap();
        assert_eq!((out.logs.len(), seen), (1, 1));
        assert_eq!(out.logs[0].epoch, 1);
        assert!(out.logs[0].loss_y_train.is_finite());
    }

    #[test]
    fn nan_weights_abort_before_training() {
        let mut config = tiny();
        config.weights.w_y = f64::NAN;
        assert!(fit(&synth_dataset(10, 0), &config, |_| {}).is_err());
    }

    #[test]
    fn csv_layout() {
        let log = EpochLog {
            epoch: 1,
            f1_val: 0.5,
            loss_y_train: 0.25,
            loss_x_train: 0.125,
            loss_y_val: 1.0,
            loss_x_val: 2.0,
        };
        assert_eq!(epoch_csv(&[log]), format!("{EPOCH_CSV_HEADER}\n1,0.5,0.25,0.125,1,2\n"));
    }
}
