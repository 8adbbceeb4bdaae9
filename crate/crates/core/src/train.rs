//! Mini-batch training of the siamese model.

use crate::checkpoint::Checkpoint;
use crate::dataset::TrainPair;
use crate::error::{Error, Result};
use crate::loss::{batch_loss, View};
use crate::model::SiameseModel;
use crate::optim::{AdamState, AdamW};
use crate::params::{Graph, ParamGrads};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor};

const SHUFFLE_STREAM: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamW,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    /// Epoch interval of periodic checkpoints; 0 disables them.
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamW::default(),
            batch_size: 16,
            epochs: 40,
            seed: 42,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Number of optimizer steps per epoch; a trailing batch of one pair is dropped.
pub fn batches_per_epoch(n: usize, b: usize) -> usize {
    n / b + usize::from(n % b >= 2)
}

fn stack<T: Scalar>(rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.concat())
}

/// Mean batch loss without gradients.
pub fn batch_loss_value<T: Scalar>(model: &SiameseModel<T>, batch: &[&TrainPair<T>]) -> Result<f64> {
    let g: Vec<_> = batch.iter().map(|p| model.embed_tensor(View::Ground, &p.ground)).collect::<Result<_>>()?;
    let a: Vec<_> = batch.iter().map(|p| model.embed_tensor(View::Aerial, &p.aerial)).collect::<Result<_>>()?;
    let mut t = Tape::new();
    let (gv, av) = (t.constant(stack(&g)?), t.constant(stack(&a)?));
    let loss = batch_loss(&mut t, gv, av, model.config().gamma)?;
    Ok(t.value(loss).data()[0].as_f64())
}

/// Mean batch loss and its gradient with respect to every parameter.
///
/// Each image is run on its own tape; the loss is formed on a small tape over
/// the stacked descriptors and its descriptor gradients are pushed back
/// through the image tapes in batch order.
pub fn batch_grads<T: Scalar>(model: &SiameseModel<T>, batch: &[&TrainPair<T>]) -> Result<(f64, ParamGrads<T>)> {
    let store = model.store();
    let mut passes = Vec::with_capacity(2 * batch.len());
    for view in [View::Ground, View::Aerial] {
        for p in batch {
            let input = match view {
                View::Ground => &p.ground,
                View::Aerial => &p.aerial,
            };
            let mut g = Graph::new(store, true);
            let out = model.forward(&mut g, view, input)?;
            let desc = g.value(out.descriptor).data().to_vec();
            passes.push((g, out.descriptor, desc));
        }
    }
    let b = batch.len();
    let descs: Vec<Vec<T>> = passes.iter().map(|p| p.2.clone()).collect();
    let mut t = Tape::new();
    let gv = t.input(stack(&descs[..b])?);
    let av = t.input(stack(&descs[b..])?);
    let loss = batch_loss(&mut t, gv, av, model.config().gamma)?;
    let value = t.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {value}")));
    }
    let mut dg = t.backward(loss)?;
    let seeds = [dg.take(gv), dg.take(av)];
    let mut grads = ParamGrads::empty(store.len());
    for (k, (graph, root, desc)) in passes.into_iter().enumerate() {
        let dim = desc.len();
        let (side, row) = (k / b, k % b);
        let Some(seed) = &seeds[side] else { continue };
        let seed = Tensor::new(&[dim], seed.data()[row * dim..(row + 1) * dim].to_vec())?;
        grads.accumulate(graph.backward_params(root, seed)?);
    }
    Ok((value, grads))
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    model: SiameseModel<T>,
    cfg: TrainConfig,
    state: AdamState<T>,
    epoch: u32,
    rng: SplitMix64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SiameseModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = AdamState::new(model.store());
        let rng = SplitMix64::derive(cfg.seed, &[SHUFFLE_STREAM]);
        Ok(Self {
            model,
            cfg,
            state,
            epoch: 0,
            rng,
        })
    }

    /// Continue from `ckpt`, which must have been written for `model`'s
    /// architecture and a dataset of `n_pairs` pairs.
    pub fn resume(mut model: SiameseModel<T>, cfg: TrainConfig, ckpt: &Checkpoint, n_pairs: usize) -> Result<Self> {
        cfg.validate()?;
        ckpt.restore_params(model.store_mut())?;
        let step = ckpt.epoch as u64 * batches_per_epoch(n_pairs, cfg.batch_size) as u64;
        let state = ckpt.restore_moments(model.store(), step)?;
        Ok(Self {
            model,
            cfg,
            state,
            epoch: ckpt.epoch,
            rng: SplitMix64::from_state(ckpt.rng_state),
        })
    }

    pub fn model(&self) -> &SiameseModel<T> {
        &self.model
    }

    pub fn into_model(self) -> SiameseModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.store(), &self.state, self.epoch, self.rng.state())
    }

    fn check_data(&self, data: &[TrainPair<T>]) -> Result<()> {
        if data.len() < 2 {
            return Err(Error::Usage(format!("training needs at least 2 pairs, got {}", data.len())));
        }
        if self.cfg.batch_size > data.len() {
            return Err(Error::Usage(format!(
                "batch size {} exceeds the {} available pairs",
                self.cfg.batch_size,
                data.len()
            )));
        }
        Ok(())
    }

    /// One optimizer step on `batch`; returns its loss.
    pub fn step(&mut self, batch: &[&TrainPair<T>]) -> Result<f64> {
        let (loss, grads) = batch_grads(&self.model, batch)?;
        self.cfg.optim.step(self.model.store_mut(), &grads, &mut self.state)?;
        Ok(loss)
    }

    /// One pass over a freshly shuffled `data`; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &[TrainPair<T>]) -> Result<f64> {
        self.check_data(data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&TrainPair<T>> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.step(&batch)?;
            count += 1;
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }

    /// Train until `cfg.epochs` epochs are complete. `on_epoch` receives the
    /// trainer after every epoch together with the epoch's mean loss and
    /// whether a periodic checkpoint is due.
    pub fn fit(
        &mut self,
        data: &[TrainPair<T>],
        mut on_epoch: impl FnMut(&Self, f64, bool) -> Result<()>,
    ) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let mut losses = Vec::new();
        while self.epoch < self.cfg.epochs {
            let loss = self.run_epoch(data)?;
            losses.push(loss);
            let every = self.cfg.checkpoint_every;
            on_epoch(self, loss, every > 0 && self.epoch.is_multiple_of(every))?;
        }
        Ok(losses)
    }
}
