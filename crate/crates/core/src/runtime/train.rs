//! Mini-batch teacher-forced training with Adam, per-epoch validation by
//! greedy-decode CIDEr, early stopping and resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ProcessedSample, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::FeatureStore;
use crate::model::{copy_maps, sample_loss, CopyMaps, Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tape::{Gradients, Graph};

use super::checkpoint::{Checkpoint, Progress};
use super::decode::{DecodeConfig, DecodeMode, ModelCaptioner};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Stop once the eval-mode per-token training loss falls below this.
    pub stop_at_loss: Option<f64>,
    /// Decoding used for validation CIDEr.
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 64,
            adam: AdamConfig::default(),
            patience: 20,
            max_epochs: 100,
            seed: 0,
            eval_every: 1,
            stop_at_loss: None,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("eval_every", self.eval_every),
            ("adam.warmup_steps", self.adam.warmup_steps as usize),
            ("decode.max_len", self.decode.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.adam.base_lr > 0.0) {
            return Err(Error::InvalidArgument("adam.base_lr must be positive".into()));
        }
        if self.decode.mode == DecodeMode::Beam && self.decode.beam == 0 {
            return Err(Error::InvalidArgument("decode.beam must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-token loss of the epoch's training batches.
    pub loss: f64,
    pub val_cider: Option<f64>,
    pub lr: f64,
}

/// SHA-256 over the JSON lines of a log.
pub fn log_hash(log: &[LogRecord]) -> String {
    let mut h = Sha256::new();
    for r in log {
        h.update(serde_json::to_vec(r).expect("log records serialise"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    LossTarget,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
}

/// Deterministic seed for a (master, a, b) triple.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Summed NLL and token count over samples in inference mode.
pub fn teacher_forced_loss(
    model: &Model,
    params: &ParamStore<f32>,
    vocab: &Vocabulary,
    samples: &[ProcessedSample],
    features: &FeatureStore,
) -> Result<(f64, usize)> {
    let parts: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(params);
            let tf = sample_loss(&mut g, model, s, features.get(&s.id)?, &copy_maps(s, vocab))?;
            Ok((g.value(tf.loss).item() as f64, tf.tokens))
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold((0.0, 0), |(l, n), &(a, b)| (l + a, n + b)))
}

pub fn per_token_loss(
    model: &Model,
    params: &ParamStore<f32>,
    vocab: &Vocabulary,
    samples: &[ProcessedSample],
    features: &FeatureStore,
) -> Result<f64> {
    let (l, n) = teacher_forced_loss(model, params, vocab, samples, features)?;
    Ok(l / n.max(1) as f64)
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub progress: Progress,
    pub log: Vec<LogRecord>,
    best: Option<Checkpoint>,
    vocab: &'a Vocabulary,
    train: &'a [ProcessedSample],
    val: &'a [ProcessedSample],
    features: &'a FeatureStore,
    maps: Vec<CopyMaps>,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        vocab: &'a Vocabulary,
        train: &'a [ProcessedSample],
        val: &'a [ProcessedSample],
        features: &'a FeatureStore,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidInput("training and validation sets must be nonempty".into()));
        }
        if config.model.vocab_size != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "model.vocab_size {} differs from the vocabulary ({})",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        features.check_dim(config.model.image_dim)?;
        for s in train.iter().chain(val) {
            features.get(&s.id)?;
            let need = s.article_ids.len().max(s.caption_ids.len()).max(config.decode.max_len + 1);
            if need > config.model.max_positions {
                return Err(Error::InvalidArgument(format!(
                    "sample {} needs {need} positions, model.max_positions is {}",
                    s.id, config.model.max_positions
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = Model::build::<f32, _>(config.model.clone(), &mut rng)?;
        let adam = AdamState::new(config.adam, &params);
        let progress = Progress {
            seed: config.seed,
            ..Progress::default()
        };
        Ok(Trainer {
            maps: train.iter().map(|s| copy_maps(s, vocab)).collect(),
            config,
            model,
            params,
            adam,
            progress,
            log: Vec::new(),
            best: None,
            vocab,
            train,
            val,
            features,
            out_dir: None,
        })
    }

    /// Writes `last.ckpt`, `best.ckpt` and `train_log.jsonl` under `dir`
    /// after every epoch.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    /// Continues from a saved state. `best` is the best checkpoint so far,
    /// when one exists.
    pub fn resume(&mut self, last: Checkpoint, best: Option<Checkpoint>, log: Vec<LogRecord>) -> Result<()> {
        last.check_vocab(self.vocab)?;
        if last.header.model != self.config.model {
            return Err(Error::Checkpoint("checkpoint model configuration differs from the training config".into()));
        }
        let adam = last
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        self.params = last.params;
        self.adam = adam;
        self.adam.config = self.config.adam;
        self.progress = last.header.progress;
        self.best = best;
        self.log = log;
        Ok(())
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let mut ck = Checkpoint::new(
            &self.model,
            self.params.clone(),
            self.vocab,
            self.progress.clone(),
            with_optimizer.then(|| self.adam.clone()),
        );
        ck.header.train_config = serde_json::to_value(&self.config).ok();
        ck
    }

    fn batch_gradients(&self, batch: &[usize]) -> Result<(Gradients<f32>, f64, usize)> {
        let step = self.adam.step + 1;
        let dropout = self.config.model.dropout > 0.0;
        let parts: Vec<(Gradients<f32>, f64, usize)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = &self.train[i];
                let mut g = if dropout {
                    Graph::training(&self.params, derive_seed(self.config.seed, step, j as u64))
                } else {
                    Graph::new(&self.params)
                };
                let tf = sample_loss(&mut g, &self.model, s, self.features.get(&s.id)?, &self.maps[i])?;
                let loss = g.value(tf.loss).item() as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} on sample {} at epoch {}, step {step} (lr {:.3e})",
                        s.id,
                        self.progress.epoch + 1,
                        self.config.adam.learning_rate(step)
                    )));
                }
                Ok((g.backward(tf.loss)?, loss, tf.tokens))
            })
            .collect::<Result<_>>()?;
        let mut total = Gradients::zeros_like(&self.params);
        let (mut loss, mut tokens) = (0.0, 0);
        for (g, l, n) in &parts {
            total.accumulate(g);
            loss += l;
            tokens += n;
        }
        total.scale(1.0 / tokens.max(1) as f32);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at epoch {}, step {step}",
                self.progress.epoch + 1
            )));
        }
        Ok((total, loss, tokens))
    }

    /// Greedy-decodes the validation set and reports metrics after tag cleaning.
    pub fn validate(&self) -> Result<EvalReport> {
        let captioner = ModelCaptioner {
            model: &self.model,
            params: &self.params,
            vocab: self.vocab,
            features: self.features,
            decode: self.config.decode,
        };
        evaluate(&captioner, self.val, &self.config.decode.label(), false)
    }

    /// One pass over the training set; validation when due.
    pub fn run_epoch(&mut self) -> Result<LogRecord> {
        let epoch = self.progress.epoch;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64, u64::MAX)));
        let (mut loss, mut tokens, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(self.config.batch_size) {
            let (grads, l, n) = self.batch_gradients(batch)?;
            lr = self.adam.step(&mut self.params, &grads)?;
            loss += l;
            tokens += n;
        }
        self.progress.epoch += 1;
        self.progress.step = self.adam.step;
        let due = self.progress.epoch % self.config.eval_every == 0 || self.progress.epoch == self.config.max_epochs;
        let val_cider = if due { Some(self.validate()?.cider) } else { None };
        if let Some(c) = val_cider {
            // a tie keeps the later parameters but still counts as no improvement
            match self.progress.best_cider {
                Some(b) if c < b => self.progress.bad_epochs += 1,
                Some(b) if c == b => {
                    self.progress.bad_epochs += 1;
                    self.take_best(c);
                }
                _ => {
                    self.progress.bad_epochs = 0;
                    self.take_best(c);
                }
            }
        }
        let rec = LogRecord {
            epoch: self.progress.epoch,
            step: self.progress.step,
            loss: loss / tokens.max(1) as f64,
            val_cider,
            lr,
        };
        log::info!(
            "epoch {} step {} loss {:.4} val_cider {} lr {:.2e}",
            rec.epoch,
            rec.step,
            rec.loss,
            rec.val_cider.map_or("-".into(), |c| format!("{c:.4}")),
            rec.lr
        );
        self.log.push(rec.clone());
        self.persist()?;
        Ok(rec)
    }

    fn take_best(&mut self, cider: f64) {
        self.progress.best_cider = Some(cider);
        self.progress.best_epoch = Some(self.progress.epoch);
        self.best = Some(self.checkpoint(false));
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        self.checkpoint(true).save(&dir.join("last.ckpt"))?;
        if let Some(b) = &self.best {
            if b.header.progress.best_epoch == Some(self.progress.epoch) {
                b.save(&dir.join("best.ckpt"))?;
            }
        }
        let mut text = String::new();
        for r in &self.log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        let path = dir.join("train_log.jsonl");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn should_stop(&self) -> Result<Option<StopReason>> {
        let p = &self.progress;
        if p.bad_epochs > 0 && p.bad_epochs >= self.config.patience {
            return Ok(Some(StopReason::Patience));
        }
        if let Some(target) = self.config.stop_at_loss {
            let l = per_token_loss(&self.model, &self.params, self.vocab, self.train, self.features)?;
            if l < target {
                return Ok(Some(StopReason::LossTarget));
            }
        }
        if p.epoch >= self.config.max_epochs {
            return Ok(Some(StopReason::MaxEpochs));
        }
        Ok(None)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let stop = loop {
            if let Some(r) = self.should_stop()? {
                break r;
            }
            self.run_epoch()?;
        };
        let last = self.checkpoint(true);
        let best = match self.best.take() {
            Some(b) => b,
            None => {
                // no validation ran (e.g. resumed at the epoch cap)
                self.checkpoint(false)
            }
        };
        Ok(TrainOutcome {
            best,
            last,
            log: self.log,
            stop,
        })
    }
}
