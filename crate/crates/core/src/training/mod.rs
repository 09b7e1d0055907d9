//! SGD with momentum, the staged learning-rate schedule, the two-stage
//! driver and checkpoints.

mod checkpoint;
mod presets;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{pk_sample, Dataset, Split};
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{ForwardPass, ModelConfig, ModelParams, StageGroup};
use crate::objective::{stage1_loss, stage2_loss, LossBreakdown, LossConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use presets::{Preset, PresetSpec, SchemaVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    /// The group trained on the full schedule during this stage.
    pub fn primary_group(self) -> StageGroup {
        match self {
            Stage::One => StageGroup::Stage1,
            Stage::Two => StageGroup::Stage2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub base_lr: f64,
    /// The rate is multiplied by this factor every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Fixed rate of the stage-1 groups while stage 2 trains.
    pub frozen_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 60,
            stage2_epochs: 60,
            base_lr: 0.01,
            decay_factor: 0.2,
            decay_every: 50,
            frozen_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 8,
            k: 4,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(config_err!("stage lengths must be at least one epoch"));
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("decay_factor", self.decay_factor),
            ("frozen_lr", self.frozen_lr),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(config_err!("{name} must be positive, got {v}"));
        }
        if self.decay_every == 0 {
            return Err(config_err!("decay_every must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err!(
                "momentum must lie in [0, 1) and weight decay must be non-negative"
            ));
        }
        if self.p < 2 || self.k < 2 {
            return Err(config_err!(
                "batches need P ≥ 2 identities and K ≥ 2 samples each, got P={}, K={}",
                self.p,
                self.k
            ));
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }
}

/// Learning rate of `group` during `epoch` (0-based, counted within the stage).
///
/// The group a stage trains follows `base_lr · decay_factor^⌊epoch/decay_every⌋`.
/// In stage 2 the stage-1 group runs at the fixed `frozen_lr`; in stage 1 the
/// stage-2 group is not trained at all.
pub fn lr_at(cfg: &TrainConfig, epoch: usize, stage: Stage, group: StageGroup) -> f64 {
    let scheduled = cfg.base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32);
    match (stage, group) {
        (Stage::One, StageGroup::Stage1) | (Stage::Two, StageGroup::Stage2) => scheduled,
        (Stage::Two, StageGroup::Stage1) => cfg.frozen_lr,
        (Stage::One, StageGroup::Stage2) => 0.0,
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.fill(0.0);
        }
    }
}

/// `v ← μ·v + grad + wd·param; param ← param − lr·v`.
///
/// Weight decay is skipped for parameters marked `decay: false`. Parameters
/// whose rate is 0 are left untouched, velocity included.
pub fn sgd_step(
    params: &mut ModelParams<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
    lr: impl Fn(StageGroup) -> f64,
) -> Result<()> {
    if grads.len() != params.params.len() || state.velocity.len() != params.params.len() {
        return Err(Error::Internal(format!(
            "{} gradients and {} velocity buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            params.params.len()
        )));
    }
    let mu = state.momentum as f32;
    for ((p, g), v) in params.params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let rate = lr(p.group) as f32;
        if rate == 0.0 {
            continue;
        }
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Internal(format!("missing gradient for active parameter '{}'", p.name)))?;
        let wd = if p.decay { state.weight_decay as f32 } else { 0.0 };
        let data = p.tensor.data_mut();
        if g.len() != data.len() || v.len() != data.len() {
            return Err(Error::Internal(format!("gradient shape mismatch for '{}'", p.name)));
        }
        for ((x, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *x;
            *x -= rate * *vi;
        }
    }
    Ok(())
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    /// Optimizer steps taken in this stage so far.
    pub step: usize,
    /// Rate of the group the stage trains.
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    step: usize,
    stage: u8,
    lr: f64,
    total: f64,
    id: f64,
    tri: f64,
    attri: f64,
}

/// Appends epoch rows as CSV `epoch,step,stage,lr,total,id,tri,attri`.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn append(&mut self, log: &EpochLog) -> Result<()> {
        self.inner
            .serialize(CsvRow {
                epoch: log.epoch,
                step: log.step,
                stage: log.stage.number(),
                lr: log.lr,
                total: log.loss.total,
                id: log.loss.id,
                tri: log.loss.triplet,
                attri: log.loss.attribute,
            })
            .map_err(|e| Error::Internal(format!("writing training log: {e}")))?;
        self.inner
            .flush()
            .map_err(|e| Error::Internal(format!("flushing training log: {e}")))
    }
}

/// Opens `path` for appending, writing the header only into a new file.
pub fn open_log(path: &Path) -> Result<LogWriter<std::fs::File>> {
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let inner = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    Ok(LogWriter { inner })
}

/// Owns the model, optimizer and sampling RNG for a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    /// Stage currently (or last) trained.
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters initialised from `config.seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: OptimizerState::new(&params, config.momentum, config.weight_decay),
            config,
            params,
            stage: Stage::One,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Self {
            config: ckpt.train,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            stage: ckpt.stage,
            epoch: ckpt.epoch,
            step: ckpt.step,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            rng: self.rng_state(),
        }
    }

    /// Whether stage 1 ran to its configured length.
    pub fn stage1_complete(&self) -> bool {
        self.stage == Stage::Two || self.epoch >= self.config.stage1_epochs
    }

    /// Moves to stage 2: the stage counters and momentum buffers restart.
    pub fn begin_stage2(&mut self) -> Result<()> {
        if !self.stage1_complete() {
            return Err(input_err!(
                "stage 2 needs a finished stage-1 model ({} of {} epochs done)",
                self.epoch,
                self.config.stage1_epochs
            ));
        }
        if self.stage == Stage::One {
            self.stage = Stage::Two;
            self.epoch = 0;
            self.step = 0;
            self.optimizer.reset();
        }
        Ok(())
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let c = &self.params.config;
        let m = &dataset.manifest;
        if (m.image_height, m.image_width, m.channels) != (c.image_height, c.image_width, c.in_channels) {
            return Err(config_err!(
                "model expects {}×{}×{} images, dataset has {}×{}×{}",
                c.in_channels,
                c.image_height,
                c.image_width,
                m.channels,
                m.image_height,
                m.image_width
            ));
        }
        if !dataset.schema().same_attributes(&c.schema) {
            return Err(config_err!("dataset attributes differ from the model's"));
        }
        if dataset.num_train_ids() != c.num_train_ids {
            return Err(config_err!(
                "model classifies {} identities, dataset has {} train identities",
                c.num_train_ids,
                dataset.num_train_ids()
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        let train = dataset.manifest.indices_of(Split::Train).len();
        train.div_ceil(self.config.p * self.config.k).max(1)
    }

    /// One optimizer step on a fresh P×K batch at the scheduled rates.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossBreakdown> {
        let rate = |g| lr_at(&self.config, self.epoch, self.stage, g);
        let rates = [rate(StageGroup::Stage1), rate(StageGroup::Stage2)];
        self.train_step_at(dataset, rates)
    }

    /// One optimizer step with explicit `[stage-1, stage-2]` group rates.
    /// Groups at rate 0 get no gradient and do not move.
    pub fn train_step_at(&mut self, dataset: &Dataset, rates: [f64; 2]) -> Result<LossBreakdown> {
        let rate = move |g: StageGroup| match g {
            StageGroup::Stage1 => rates[0],
            StageGroup::Stage2 => rates[1],
        };
        let stage = self.stage;
        let batch = pk_sample(dataset, self.config.p, self.config.k, &mut self.rng)?;
        let loss_cfg = self.config.loss;
        let with_attributes = loss_cfg.lambda > 0.0;
        let (grads, breakdown) = {
            let mut fp = ForwardPass::train(&mut self.params);
            let (loss, breakdown) = match stage {
                Stage::One => {
                    let out = fp.stage1(&batch.images, with_attributes)?;
                    stage1_loss(&mut fp.graph, &out, &batch, &loss_cfg)?
                }
                Stage::Two => {
                    let out = fp.full(&batch.images)?;
                    stage2_loss(&mut fp.graph, &out, &batch, &loss_cfg)?
                }
            };
            if !breakdown.total.is_finite() {
                let culprit = fp
                    .graph
                    .first_non_finite()
                    .unwrap_or_else(|| "no intermediate tensor".to_string());
                return Err(Error::Numerical(format!(
                    "stage {} epoch {} step {}: loss is {}; first non-finite value in {culprit}",
                    stage.number(),
                    self.epoch + 1,
                    self.step + 1,
                    breakdown.total
                )));
            }
            fp.graph.backward(loss)?;
            let grads = fp.param_grads(|g| rate(g) > 0.0)?;
            (grads, breakdown)
        };
        sgd_step(&mut self.params, &grads, &mut self.optimizer, rate)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs one epoch of the current stage.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochLog> {
        self.check_dataset(dataset)?;
        let lr = lr_at(&self.config, self.epoch, self.stage, self.stage.primary_group());
        let steps = self.steps_per_epoch(dataset);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            losses.push(self.train_step(dataset)?);
        }
        self.epoch += 1;
        let log = EpochLog {
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: LossBreakdown::mean(&losses),
        };
        log::info!(
            "stage {} epoch {} lr {:.2e} total {:.4} id {:.4} tri {:.4} attri {:.4}",
            log.stage.number(),
            log.epoch,
            log.lr,
            log.loss.total,
            log.loss.id,
            log.loss.triplet,
            log.loss.attribute
        );
        Ok(log)
    }

    /// Trains the current stage up to its configured length, calling
    /// `on_epoch` after every epoch.
    pub fn train_stage(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs(self.stage) {
            let log = self.run_epoch(dataset)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Stage 1 from the current state.
    pub fn train_stage1(&mut self, dataset: &Dataset) -> Result<Vec<EpochLog>> {
        if self.stage != Stage::One {
            return Err(input_err!("stage 1 is already finished"));
        }
        self.train_stage(dataset, |_, _| Ok(()))
    }

    /// Stage 2, starting it first if stage 1 just finished.
    pub fn train_stage2(&mut self, dataset: &Dataset) -> Result<Vec<EpochLog>> {
        self.begin_stage2()?;
        self.train_stage(dataset, |_, _| Ok(()))
    }
}
