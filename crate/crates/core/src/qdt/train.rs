use rand::seq::SliceRandom;

use super::model::{QdtModel, TokenBatch};
use crate::dataset::{Record, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, Graph, Scalar};
use crate::rng::{derive_seed, derived_rng, stream};

/// Loss and gradient-norm summary of one minibatch update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state, advanced one epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer<F: Scalar = f32> {
    pub model: QdtModel<F>,
    pub adam: Adam<F>,
    pub seed: u64,
    pub epoch: usize,
}

fn check_dataset<F: Scalar>(model: &QdtModel<F>, ds: &TrajectoryDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let h = &ds.header;
    let dims = model.dims;
    if (h.bd_dim, h.obs_dim, h.act_dim) != (dims.bd_dim, dims.obs_dim, dims.act_dim) {
        return Err(Error::invalid(format!(
            "dataset widths (bd {}, obs {}, act {}) do not match the model ({}, {}, {})",
            h.bd_dim, h.obs_dim, h.act_dim, dims.bd_dim, dims.obs_dim, dims.act_dim
        )));
    }
    if h.episode_len > model.config.max_t {
        return Err(Error::invalid(format!(
            "trajectory length {} exceeds max_t = {}",
            h.episode_len, model.config.max_t
        )));
    }
    Ok(())
}

/// Mean squared action error of a minibatch, without dropout or updates.
pub fn batch_loss<F: Scalar>(model: &QdtModel<F>, batch: &TokenBatch<F>) -> Result<f64> {
    let mut g = Graph::new(&model.params, false);
    let pred = model.forward(&mut g, batch, 0)?;
    let loss = g.mse(pred, batch.act.clone())?;
    Ok(g.scalar(loss).to_f64().unwrap_or(f64::NAN))
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: QdtModel<F>, seed: u64) -> Self {
        let lr = model.config.lr;
        Self {
            model,
            adam: Adam::new(lr),
            seed,
            epoch: 0,
        }
    }

    /// One Adam update on a minibatch; dropout masks depend on the seed and
    /// the optimizer step count only.
    pub fn train_step(&mut self, batch: &TokenBatch<F>) -> Result<StepStats> {
        let dropout_seed = derive_seed(self.seed, stream::DROPOUT, self.adam.t);
        let (loss, grads) = {
            let mut g = Graph::new(&self.model.params, true);
            let pred = self.model.forward(&mut g, batch, dropout_seed)?;
            let loss = g.mse(pred, batch.act.clone())?;
            (g.scalar(loss).to_f64().unwrap_or(f64::NAN), g.backward(loss)?)
        };
        let params = &mut self.model.params;
        params.zero_grad();
        params.accumulate(&grads);
        let grad_norm = clip_grad_norm(params, self.model.config.grad_clip);
        self.adam.step(params);
        Ok(StepStats { loss, grad_norm })
    }

    /// Shuffled pass over the dataset in minibatches of whole trajectories;
    /// returns the mean loss weighted by minibatch size.
    pub fn train_epoch(&mut self, ds: &TrajectoryDataset) -> Result<f64> {
        check_dataset(&self.model, ds)?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut derived_rng(self.seed, stream::SHUFFLE, self.epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(self.model.config.batch_size) {
            let records: Vec<&Record> = chunk.iter().map(|&i| &ds.records[i]).collect();
            let batch = TokenBatch::from_records(&records, &ds.header);
            total += self.train_step(&batch)?.loss * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(total / ds.len() as f64)
    }

    /// Dataset-wide loss with dropout off.
    pub fn evaluate_loss(&self, ds: &TrajectoryDataset) -> Result<f64> {
        check_dataset(&self.model, ds)?;
        let mut total = 0.0;
        for chunk in ds.records.chunks(self.model.config.batch_size) {
            let records: Vec<&Record> = chunk.iter().collect();
            let batch = TokenBatch::from_records(&records, &ds.header);
            total += batch_loss(&self.model, &batch)? * chunk.len() as f64;
        }
        Ok(total / ds.len() as f64)
    }
}
