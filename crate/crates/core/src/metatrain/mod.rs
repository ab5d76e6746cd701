//! Two-stage online meta-training over source domains and their augmented
//! counterparts, with evaluation, pretraining and checkpoints.
//!
//! Every iteration draws one task per source domain, takes one optimizer step
//! on their plain episodic loss (stage 1), then encodes the same tasks with
//! the updated encoder up to a randomly chosen layer, augments them there and
//! takes a second step on the loss of the augmented tasks (stage 2).
//!
//! All randomness comes from counter-based streams keyed by the run seed and
//! the iteration number, so the whole run state is the parameters, the Adam
//! moments and the iteration counter.

mod checkpoint;
mod eval;
mod pretrain;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use eval::{evaluate, style_invariance_score, EvalResult, StyleProbe};
pub use pretrain::{pretrain, PretrainConfig};

use crate::augment::{self, AugmentConfig, InterpolationConfig, TaskFeatures, DEFAULT_GAMMA, DEFAULT_STYLE_EPS};
use crate::diffcore::{Optimizer, OptimizerKind, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::model::{self, EncoderConfig, EpisodeInput, HeadConfig, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::worldgen::{Benchmark, EpisodeTask, TaskLayout};

pub const METRICS_SCHEMA: &str = "metrics_v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Tasks per iteration, drawn round-robin over the source domains.
    pub n_tasks_per_iter: usize,
    /// Tasks mixed by interpolation.
    pub m: usize,
    /// Dirichlet concentration, one entry per mixed task.
    pub gamma: Vec<f64>,
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub iterations: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub layer_widths: Vec<usize>,
    pub eligible_layers: Vec<usize>,
    pub head: HeadConfig,
    pub mti: bool,
    pub mtst: bool,
    pub fm_enabled: bool,
    /// Initial value of every FM weight.
    pub fm_init: f64,
    pub stopgrad_stats: bool,
    pub style_eps: f64,
    pub eval_episodes: usize,
    /// Record metrics every this many iterations; 0 records only at the end.
    pub eval_interval: u64,
    /// Probe tasks for the style-invariance score; 0 skips it.
    pub style_probe_tasks: usize,
    pub pretrain: PretrainConfig,
    /// Fill `wall_clock_ms`; off by default so metrics files stay
    /// byte-comparable across runs.
    pub record_timing: bool,
    /// Test hook: transfer every task onto its own style and drop the
    /// interpolated task, so stage 2 sees the stage-1 tasks again.
    pub identity_transfer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            n_tasks_per_iter: 4,
            m: 3,
            gamma: vec![DEFAULT_GAMMA; 3],
            lr: 1e-3,
            optimizer: OptimizerName::Adam,
            iterations: 2000,
            n_way: 5,
            k_shot: 1,
            k_query: 15,
            layer_widths: vec![64; 4],
            eligible_layers: vec![1, 2],
            head: HeadConfig::matching_cosine(),
            mti: true,
            mtst: true,
            fm_enabled: true,
            fm_init: -1.0,
            stopgrad_stats: false,
            style_eps: DEFAULT_STYLE_EPS,
            eval_episodes: 1000,
            eval_interval: 0,
            style_probe_tasks: 100,
            pretrain: PretrainConfig::default(),
            record_timing: false,
            identity_transfer: false,
        }
    }
}

impl TrainConfig {
    /// The plain episodic baseline: no interpolation, transfer or modulation.
    pub fn baseline(self) -> Self {
        TrainConfig {
            mti: false,
            mtst: false,
            fm_enabled: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=self.n_tasks_per_iter).contains(&self.m) {
            return Err(Error::Config(format!(
                "m = {} must lie in [2, n = {}]",
                self.m, self.n_tasks_per_iter
            )));
        }
        if self.gamma.len() != self.m {
            return Err(Error::Config(format!(
                "gamma has {} entries for m = {}",
                self.gamma.len(),
                self.m
            )));
        }
        InterpolationConfig::new(self.gamma.clone())?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be non-negative", self.lr)));
        }
        if self.n_way < 2 || self.k_shot < 1 || self.k_query < 1 {
            return Err(Error::Config("need n_way >= 2, k_shot >= 1, k_query >= 1".into()));
        }
        if !(self.style_eps >= 0.0) {
            return Err(Error::Config("style_eps must be >= 0".into()));
        }
        if self.eval_episodes < 1 {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        self.model_config(1)?;
        Ok(())
    }

    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            n_way: self.n_way,
            k_shot: self.k_shot,
            k_query: self.k_query,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            encoder: EncoderConfig::new(input_dim, self.layer_widths.clone(), self.eligible_layers.clone())?,
            head: self.head.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn augment_config(&self) -> Result<AugmentConfig> {
        Ok(AugmentConfig {
            interpolation: InterpolationConfig::new(self.gamma.clone())?,
            mti: self.mti,
            mtst: self.mtst,
            fm: self.fm_enabled,
            eps: self.style_eps,
            stopgrad_stats: self.stopgrad_stats,
            identity_transfer: self.identity_transfer,
        })
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(self.lr),
            OptimizerName::Sgd => OptimizerKind::Sgd { lr: self.lr },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain_id: usize,
    pub accuracy: f64,
    pub ci_half_width: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: String,
    pub iteration: u64,
    pub l_sd: f64,
    pub l_ad: f64,
    pub target: Vec<DomainMetrics>,
    pub style_invariance: Option<f64>,
    pub wall_clock_ms: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_sd: f64,
    pub l_ad: f64,
    /// Layer augmented in stage 2.
    pub layer: usize,
}

fn stage_error(iteration: u64, stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| {
        if e.is_numeric() {
            Error::TrainingAborted {
                iteration,
                stage,
                detail: e.to_string(),
            }
        } else {
            e
        }
    }
}

fn finite_or_abort(v: f64, iteration: u64, stage: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::TrainingAborted {
            iteration,
            stage,
            detail: format!("loss is {v}"),
        })
    }
}

/// Mean of scalar losses recorded on one tape.
fn mean_loss(tape: &mut Tape, losses: &[crate::diffcore::Var]) -> Result<crate::diffcore::Var> {
    let w = vec![1.0 / losses.len() as f64; losses.len()];
    tape.weighted_sum(losses, &w)
}

/// Paths of the encoder and head parameters.
pub fn base_scope(params: &ParamSet) -> Vec<String> {
    params
        .paths_with_prefix("encoder.")
        .chain(params.paths_with_prefix("head."))
        .cloned()
        .collect()
}

/// Meta-training state for one run.
#[derive(Clone, Debug)]
pub struct Trainer<'b> {
    bench: &'b Benchmark,
    config: TrainConfig,
    model: ModelConfig,
    augment: AugmentConfig,
    params: ParamSet,
    optimizer: Optimizer,
    iteration: u64,
}

impl<'b> Trainer<'b> {
    /// Initializes parameters from the seed and runs pretraining if
    /// configured.
    pub fn new(bench: &'b Benchmark, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        bench.validate()?;
        let model = config.model_config(bench.dim())?;
        let mut params = model::init_params(&model, &mut stream(config.seed, Purpose::Init, 0))?;
        if config.pretrain.epochs > 0 {
            pretrain(&mut params, &model, bench, &config.pretrain, config.seed)?;
        }
        if config.fm_enabled {
            augment::init_fm_params(&mut params, &model.encoder.eligible_widths(), config.fm_init, config.fm_init)?;
        }
        let augment = config.augment_config()?;
        let optimizer = Optimizer::new(config.optimizer_kind());
        Ok(Trainer {
            bench,
            config,
            model,
            augment,
            params,
            optimizer,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// The tasks for iteration `it` (0-based): task `j` comes from source
    /// domain `j mod n_source`.
    pub fn tasks_for(&self, it: u64) -> Result<Vec<EpisodeTask>> {
        let mut rng = stream(self.config.seed, Purpose::TrainTasks, it);
        let sources = &self.bench.source;
        (0..self.config.n_tasks_per_iter)
            .map(|j| self.bench.sample_task(&sources[j % sources.len()], self.config.layout(), &mut rng))
            .collect()
    }

    /// Mean episodic loss of `tasks` under the current parameters, without
    /// touching gradients.
    pub fn source_loss(&self, tasks: &[EpisodeTask]) -> Result<f64> {
        let mut tape = Tape::new();
        let losses = tasks
            .iter()
            .map(|t| model::task_loss(&mut tape, &self.params, &self.model, t))
            .collect::<Result<Vec<_>>>()?;
        let l = mean_loss(&mut tape, &losses)?;
        tape.value(l).item()
    }

    /// One optimizer step on the plain loss of `tasks`; FM weights are left
    /// alone.
    pub fn stage1(&mut self, tasks: &[EpisodeTask]) -> Result<f64> {
        let it = self.iteration;
        let wrap = stage_error(it, "stage1");
        self.params.zero_grad();
        let mut tape = Tape::new();
        let run = |tape: &mut Tape, params: &ParamSet| -> Result<crate::diffcore::Var> {
            let losses = tasks
                .iter()
                .map(|t| model::task_loss(tape, params, &self.model, t))
                .collect::<Result<Vec<_>>>()?;
            mean_loss(tape, &losses)
        };
        let loss = run(&mut tape, &self.params).map_err(wrap)?;
        let l_sd = finite_or_abort(tape.value(loss).item()?, it, "stage1")?;
        tape.backward(loss, &mut self.params).map_err(stage_error(it, "stage1"))?;
        let scope = base_scope(&self.params);
        self.optimizer.step(&mut self.params, &scope)?;
        self.check_params(it, "stage1")?;
        Ok(l_sd)
    }

    /// Records the augmented-task loss at `layer` for a fixed augmentation
    /// draw.
    pub fn augmented_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        tasks: &[EpisodeTask],
        layer: usize,
        rng: &mut impl Rng,
    ) -> Result<crate::diffcore::Var> {
        let mut feats = Vec::with_capacity(tasks.len());
        for t in tasks {
            let x = tape.constant(t.all_rows());
            let h = model::encode_to_layer(tape, params, &self.model.encoder, x, layer)?;
            feats.push(TaskFeatures {
                x: h,
                layout: t.layout(),
                layer,
            });
        }
        let batch = augment::build_augmented_batch(tape, params, &feats, &self.augment, rng)?;
        let losses = batch
            .tasks
            .iter()
            .map(|a| {
                let input = EpisodeInput {
                    x: a.features,
                    layout: a.layout,
                    layer,
                };
                model::episode_loss(tape, params, &self.model, &input)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_loss(tape, &losses)
    }

    /// Layer and augmentation stream for stage 2 of iteration `it`.
    pub fn stage2_draw(&self, it: u64) -> (usize, crate::rng::StreamRng) {
        let mut rng = stream(self.config.seed, Purpose::Augment, it);
        let layers = &self.model.encoder.eligible_layers;
        let layer = layers[rng.random_range(0..layers.len())];
        (layer, rng)
    }

    /// One joint step of encoder, head and the chosen layer's FM weights on
    /// the augmented-task loss.
    pub fn stage2(&mut self, tasks: &[EpisodeTask]) -> Result<(f64, usize)> {
        let it = self.iteration;
        let (layer, mut rng) = self.stage2_draw(it);
        self.params.zero_grad();
        let mut tape = Tape::new();
        let loss = self
            .augmented_loss(&mut tape, &self.params, tasks, layer, &mut rng)
            .map_err(stage_error(it, "stage2"))?;
        let l_ad = finite_or_abort(tape.value(loss).item()?, it, "stage2")?;
        tape.backward(loss, &mut self.params).map_err(stage_error(it, "stage2"))?;
        let mut scope = base_scope(&self.params);
        if self.config.fm_enabled {
            scope.push(augment::fm_alpha_path(layer));
            scope.push(augment::fm_beta_path(layer));
        }
        self.optimizer.step(&mut self.params, &scope)?;
        self.check_params(it, "stage2")?;
        Ok((l_ad, layer))
    }

    fn check_params(&self, iteration: u64, stage: &'static str) -> Result<()> {
        for (path, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(Error::TrainingAborted {
                    iteration,
                    stage,
                    detail: format!("parameter {path} is not finite after the update"),
                });
            }
        }
        Ok(())
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<StepLosses> {
        let tasks = self.tasks_for(self.iteration)?;
        let l_sd = self.stage1(&tasks)?;
        let (l_ad, layer) = self.stage2(&tasks)?;
        self.iteration += 1;
        Ok(StepLosses { l_sd, l_ad, layer })
    }

    /// Accuracy on every target domain plus the style-invariance score.
    pub fn metrics(&self, iteration: u64, losses: StepLosses, wall_clock_ms: Option<f64>) -> Result<MetricsRecord> {
        let target = self
            .bench
            .target
            .iter()
            .map(|d| {
                let r = evaluate(
                    &self.params,
                    &self.model,
                    self.bench,
                    d,
                    self.config.layout(),
                    self.config.eval_episodes,
                    self.config.seed,
                )?;
                Ok(DomainMetrics {
                    domain_id: d.domain_id,
                    accuracy: r.accuracy,
                    ci_half_width: r.ci_half_width,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let style_invariance = if self.config.style_probe_tasks > 0 {
            let probe = StyleProbe {
                n_tasks: self.config.style_probe_tasks,
                seed: self.config.seed,
                identity: false,
            };
            Some(style_invariance_score(&self.params, &self.model, self.bench, self.config.layout(), &probe)?)
        } else {
            None
        };
        Ok(MetricsRecord {
            schema: METRICS_SCHEMA.to_string(),
            iteration,
            l_sd: losses.l_sd,
            l_ad: losses.l_ad,
            target,
            style_invariance,
            wall_clock_ms,
        })
    }

    /// Trains until `config.iterations`, handing each metrics record to
    /// `sink` as it is produced.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let start = Instant::now();
        let total = self.config.iterations;
        while self.iteration < total {
            let losses = self.step()?;
            let done = self.iteration;
            let interval = self.config.eval_interval;
            if done == total || (interval > 0 && done % interval == 0) {
                let ms = self
                    .config
                    .record_timing
                    .then(|| start.elapsed().as_secs_f64() * 1e3);
                let rec = self.metrics(done, losses, ms)?;
                sink(&rec)?;
            }
        }
        Ok(())
    }

    /// Snapshot of the run; gradient buffers are not part of the state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.params.clone();
        params.zero_grad();
        Checkpoint {
            config: self.config.clone(),
            benchmark: self.bench.clone(),
            iteration: self.iteration,
            params,
            optimizer: self.optimizer.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint taken on `bench`.
    pub fn resume(bench: &'b Benchmark, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.benchmark != *bench {
            return Err(Error::Config("checkpoint was taken on a different benchmark".into()));
        }
        ckpt.config.validate()?;
        let model = ckpt.config.model_config(bench.dim())?;
        let augment = ckpt.config.augment_config()?;
        if ckpt.optimizer.kind() != ckpt.config.optimizer_kind() {
            return Err(Error::Config("checkpoint optimizer does not match its config".into()));
        }
        Ok(Trainer {
            bench,
            model,
            augment,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            iteration: ckpt.iteration,
            config: ckpt.config,
        })
    }

    /// Continues a resumed run for more iterations than it was configured
    /// with.
    pub fn extend_to(&mut self, iterations: u64) {
        self.config.iterations = iterations;
    }
}

/// Trains from scratch and collects all metrics records.
pub fn train(bench: &Benchmark, config: TrainConfig) -> Result<(ParamSet, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(bench, config)?;
    let mut records = Vec::new();
    trainer.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.params, records))
}
