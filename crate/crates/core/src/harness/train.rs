use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::param::apply_updates;
use crate::numerics::{NumericsError, Session};
use crate::scoring::{plcc_loss, plcc_loss_graph, ScoreBatch};

use super::eval::predict;
use super::{AdamW, Checkpoint, Dataset, HarnessError, ModelShapes, RunConfig, Splits};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean training-mode minibatch loss; absent for epoch 0.
    pub batch_loss: Option<f64>,
    /// Eval-mode `1 − PLCC` over the whole training split.
    pub train_loss: f64,
}

/// Minibatches over `indices`; a trailing singleton joins the previous batch
/// so every batch has at least two videos.
pub fn minibatches(indices: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(batch.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Stateful training run: model, optimizer and the run's random stream.
pub struct Trainer<'d> {
    pub checkpoint: Checkpoint,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    data: &'d Dataset,
    splits: Splits,
    rng: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    /// Initializes the model from `cfg.seed` and records the epoch-0 loss.
    pub fn new(cfg: &RunConfig, data: &'d Dataset) -> Result<Self, HarnessError> {
        cfg.validate()?;
        cfg.check_dataset(data)?;
        let splits = data.splits(cfg.seed)?;
        if splits.train.len() < 2 {
            return Err(HarnessError::Data(format!(
                "training split has {} videos; need at least 2",
                splits.train.len()
            )));
        }
        let shapes = ModelShapes {
            dim: data.dim(),
            local_channels: data.local_channels(),
            clip_channels: data.clip_channels(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let checkpoint = Checkpoint::init(cfg, shapes, &mut rng)?;
        Ok(Self {
            checkpoint,
            optimizer: AdamW::new(cfg.optimizer, cfg.lr),
            log: Vec::new(),
            data,
            splits,
            rng,
        })
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Eval-mode loss over the training split.
    pub fn train_loss(&self) -> Result<f64, HarnessError> {
        let rows = predict(&self.checkpoint, self.data, &self.splits.train)?;
        let batch = ScoreBatch::new(rows.iter().map(|r| r.q_pre).collect(), rows.iter().map(|r| r.q_gt).collect())?;
        Ok(plcc_loss(&batch))
    }

    /// The epoch-0 entry, computing it on first use.
    pub fn initial_log(&mut self) -> Result<&EpochLog, HarnessError> {
        if self.log.is_empty() {
            let train_loss = self.train_loss()?;
            self.log.push(EpochLog {
                epoch: 0,
                batch_loss: None,
                train_loss,
            });
        }
        Ok(&self.log[0])
    }

    /// One pass over the shuffled training split.
    pub fn epoch(&mut self) -> Result<&EpochLog, HarnessError> {
        self.initial_log()?;
        let epoch = self.log.len();
        let cfg = self.checkpoint.config.clone();
        let frozen = self.checkpoint.store.num_trainable_scalars() == 0;
        let mut order = self.splits.train.clone();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let batches = minibatches(&order, cfg.batch);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = self.data.batch::<f32>(idx, cfg.num_frames, Some(&mut self.rng))?;
            let diag = |e: NumericsError| HarnessError::NonFiniteLoss {
                epoch,
                batch: bi,
                detail: format!("{e} (videos {})", batch.ids.join(", ")),
            };
            let ckpt = &self.checkpoint;
            let mut s = Session::new(&ckpt.store, true);
            let out = ckpt.model.forward(&mut s, &batch, &self.data.text).map_err(|e| match e {
                HarnessError::Numerics(n) => diag(n),
                other => other,
            })?;
            let loss = plcc_loss_graph(&mut s, out.scores.q_pre, &batch.gt).map_err(diag)?;
            total += s.graph.value(loss).item() as f64;
            if frozen {
                continue;
            }
            let grads = s.backward(loss).map_err(diag)?;
            let updates = s.take_updates();
            drop(s);
            self.optimizer.step(&mut self.checkpoint.store, &grads);
            apply_updates(&mut self.checkpoint.store, updates);
        }
        let train_loss = self.train_loss()?;
        self.log.push(EpochLog {
            epoch,
            batch_loss: Some(total / batches.len() as f64),
            train_loss,
        });
        Ok(self.log.last().unwrap())
    }

    /// Runs the configured number of epochs.
    pub fn run(mut self) -> Result<(Checkpoint, Vec<EpochLog>), HarnessError> {
        self.initial_log()?;
        for _ in 0..self.checkpoint.config.epochs {
            self.epoch()?;
        }
        Ok((self.checkpoint, self.log))
    }
}

/// Trains a model on the training split of `data`.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<(Checkpoint, Vec<EpochLog>), HarnessError> {
    Trainer::new(cfg, data)?.run()
}
