//! Task augmentation: Dirichlet mixing weights, multi-task interpolation
//! (MTI), task style statistics and multi-task style transfer (MTST), and
//! feature modulation (FM).
//!
//! Every operator records on a [`Tape`], so the augmented tasks stay
//! differentiable w.r.t. the encoder that produced the layer features and
//! w.r.t. the modulation parameters.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::worldgen::TaskLayout;

/// Concentration used for every mixing component unless configured.
pub const DEFAULT_GAMMA: f64 = 0.2;

/// Variance guard in the style-transfer denominator.
pub const DEFAULT_STYLE_EPS: f64 = 1e-5;

const MAX_DIRICHLET_ATTEMPTS: usize = 100;

/// Dirichlet concentration for mixing `m = gamma.len()` tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationConfig {
    pub gamma: Vec<f64>,
}

impl InterpolationConfig {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        let c = InterpolationConfig { gamma };
        c.validate()?;
        Ok(c)
    }

    pub fn uniform(m: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![gamma; m])
    }

    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() < 2 {
            return Err(Error::Config(format!(
                "interpolation needs m >= 2 tasks, got {}",
                self.gamma.len()
            )));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("Dirichlet concentration {g} is not positive")));
        }
        Ok(())
    }

    /// Checks `2 <= m <= n` for a batch of `n` tasks.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.m() > n {
            return Err(Error::Config(format!(
                "cannot interpolate m = {} of only {n} tasks",
                self.m()
            )));
        }
        Ok(())
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    pub lambda: Vec<f64>,
}

impl MixWeights {
    /// One-hot weights selecting component `k` of `m`.
    pub fn vertex(m: usize, k: usize) -> Self {
        let mut lambda = vec![0.0; m];
        lambda[k] = 1.0;
        MixWeights { lambda }
    }
}

/// One draw from `Gamma(shape, 1)`.
///
/// Marsaglia–Tsang squeeze for `shape >= 1`; below 1 the boost identity
/// `Gamma(a) = Gamma(a + 1) · U^(1/a)`.
pub fn sample_gamma(shape: f64, rng: &mut impl Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `λ ~ Dirichlet(γ)` via normalized independent Gamma draws.
pub fn sample_dirichlet(config: &InterpolationConfig, rng: &mut impl Rng) -> Result<MixWeights> {
    config.validate()?;
    for _ in 0..MAX_DIRICHLET_ATTEMPTS {
        let g: Vec<f64> = config.gamma.iter().map(|&a| sample_gamma(a, rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(MixWeights {
                lambda: g.into_iter().map(|x| x / total).collect(),
            });
        }
    }
    Err(Error::Numeric(format!(
        "all Gamma draws underflowed {MAX_DIRICHLET_ATTEMPTS} times for {:?}",
        config.gamma
    )))
}

/// Layer-`l` features of one task, rows laid out per [`TaskLayout`].
#[derive(Clone, Copy, Debug)]
pub struct TaskFeatures {
    pub x: Var,
    pub layout: TaskLayout,
    pub layer: usize,
}

/// Per-channel mean and variance of a task's layer features.
#[derive(Clone, Copy, Debug)]
pub struct StyleStats {
    pub layer: usize,
    pub mean: Var,
    pub var: Var,
}

impl StyleStats {
    pub fn values<'t>(&self, tape: &'t Tape) -> (&'t Tensor, &'t Tensor) {
        (tape.value(self.mean), tape.value(self.var))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Interpolated,
    Transferred { source: usize },
    Original { source: usize },
}

/// A new task produced by augmentation. Its classes are treated as new, so
/// its labels are fresh episode-local ids in class-major order.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedTask {
    pub features: Var,
    pub layout: TaskLayout,
    pub layer: usize,
    pub kind: TaskKind,
}

impl AugmentedTask {
    pub fn support_labels(&self) -> Vec<usize> {
        self.layout.support_labels()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.layout.query_labels()
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedTaskBatch {
    pub layer: usize,
    pub tasks: Vec<AugmentedTask>,
}

/// Mean and population variance over all rows of a task (support and
/// query together).
pub fn task_style_stats(tape: &mut Tape, x: Var, layer: usize) -> Result<StyleStats> {
    let (mean, var) = tape.moments(x)?;
    Ok(StyleStats { layer, mean, var })
}

/// `X_mix = Σ_j λ_j X_j`, row-aligned through the shared class-major layout.
pub fn mti_interpolate(tape: &mut Tape, tasks: &[TaskFeatures], weights: &MixWeights) -> Result<AugmentedTask> {
    let first = tasks.first().ok_or(Error::EmptyReduction("mti_interpolate"))?;
    if tasks.len() != weights.lambda.len() {
        return Err(Error::Contract(format!(
            "{} tasks but {} mixing weights",
            tasks.len(),
            weights.lambda.len()
        )));
    }
    for t in tasks {
        if t.layout != first.layout || t.layer != first.layer {
            return Err(Error::Contract(format!(
                "cannot interpolate {:?}@{} with {:?}@{}",
                first.layout, first.layer, t.layout, t.layer
            )));
        }
    }
    let xs: Vec<Var> = tasks.iter().map(|t| t.x).collect();
    let features = tape.weighted_sum(&xs, &weights.lambda)?;
    Ok(AugmentedTask {
        features,
        layout: first.layout,
        layer: first.layer,
        kind: TaskKind::Interpolated,
    })
}

/// Re-standardizes `task` from its own statistics to `target`:
/// `(X - μ_j) / sqrt(σ²_j + eps) · sqrt(σ²_mix + eps) + μ_mix`.
pub fn mtst_transfer(
    tape: &mut Tape,
    task: &TaskFeatures,
    own: &StyleStats,
    target: &StyleStats,
    eps: f64,
) -> Result<Var> {
    if own.layer != task.layer || target.layer != task.layer {
        return Err(Error::Contract(format!(
            "style statistics from layers {}/{} applied at layer {}",
            own.layer, target.layer, task.layer
        )));
    }
    let c = tape.value(task.x).dims2()?.1;
    for v in [own.mean, own.var, target.mean, target.var] {
        if tape.shape(v) != [c] {
            return Err(Error::Contract(format!(
                "style statistics of shape {:?} for {c} channels",
                tape.shape(v)
            )));
        }
    }
    let own_sd = tape.add_scalar(own.var, eps)?;
    let own_sd = tape.sqrt(own_sd)?;
    let target_sd = tape.add_scalar(target.var, eps)?;
    let target_sd = tape.sqrt(target_sd)?;
    let ratio = tape.div(target_sd, own_sd)?;
    let centered = tape.sub_row(task.x, own.mean)?;
    let scaled = tape.mul_row(centered, ratio)?;
    tape.add_row(scaled, target.mean)
}

pub fn fm_alpha_path(layer: usize) -> String {
    format!("fm.layer{layer}.w_alpha")
}

pub fn fm_beta_path(layer: usize) -> String {
    format!("fm.layer{layer}.w_beta")
}

/// Adds per-channel FM parameters for each eligible layer.
pub fn init_fm_params(params: &mut ParamSet, layers: &[(usize, usize)], w_alpha: f64, w_beta: f64) -> Result<()> {
    for &(layer, width) in layers {
        params.insert(fm_alpha_path(layer), Tensor::full(&[width], w_alpha))?;
        params.insert(fm_beta_path(layer), Tensor::full(&[width], w_beta))?;
    }
    Ok(())
}

/// Standard-normal noise behind one FM draw. Keeping it separate from the
/// scales makes the draw reparameterized: `α = softplus(W_α) ⊙ ε_α`.
#[derive(Clone, Debug, PartialEq)]
pub struct FmNoise {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FmNoise {
    pub fn sample(width: usize, rng: &mut impl Rng) -> Self {
        let mut draw = || (0..width).map(|_| rng.sample(StandardNormal)).collect();
        FmNoise {
            alpha: draw(),
            beta: draw(),
        }
    }
}

/// Records `α = softplus(W_α) ⊙ ε_α` and `β = softplus(W_β) ⊙ ε_β`.
pub fn fm_scaled(tape: &mut Tape, params: &ParamSet, layer: usize, noise: &FmNoise) -> Result<(Var, Var)> {
    let wa = tape.param(params, &fm_alpha_path(layer))?;
    let wb = tape.param(params, &fm_beta_path(layer))?;
    let sa = tape.softplus(wa)?;
    let sb = tape.softplus(wb)?;
    let ea = tape.constant(Tensor::vector(noise.alpha.clone()));
    let eb = tape.constant(Tensor::vector(noise.beta.clone()));
    Ok((tape.mul(sa, ea)?, tape.mul(sb, eb)?))
}

/// One task-shared draw `α ~ N(0, softplus(W_α)²)`, `β ~ N(0, softplus(W_β)²)`.
pub fn fm_sample(tape: &mut Tape, params: &ParamSet, layer: usize, rng: &mut impl Rng) -> Result<(Var, Var)> {
    let width = params.get(&fm_alpha_path(layer))?.numel();
    let noise = FmNoise::sample(width, rng);
    fm_scaled(tape, params, layer, &noise)
}

/// `X + α ⊙ X + β`, with `α`, `β` broadcast over every row of the task.
pub fn fm_apply(tape: &mut Tape, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let ax = tape.mul_row(x, alpha)?;
    let y = tape.add(x, ax)?;
    tape.add_row(y, beta)
}

/// Which augmentation components are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub interpolation: InterpolationConfig,
    pub mti: bool,
    pub mtst: bool,
    pub fm: bool,
    pub eps: f64,
    /// Detach style statistics before transfer.
    pub stopgrad_stats: bool,
    /// Test hook: transfer every task onto its own statistics and emit no
    /// interpolated task, making the batch the original tasks.
    pub identity_transfer: bool,
}

impl AugmentConfig {
    pub fn full(m: usize, gamma: f64) -> Result<Self> {
        Ok(AugmentConfig {
            interpolation: InterpolationConfig::uniform(m, gamma)?,
            mti: true,
            mtst: true,
            fm: true,
            eps: DEFAULT_STYLE_EPS,
            stopgrad_stats: false,
            identity_transfer: false,
        })
    }
}

/// Every random choice behind one augmented batch, drawn up front so the
/// batch is a deterministic function of the plan and the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Tasks chosen for interpolation, in draw order.
    pub subset: Vec<usize>,
    pub weights: MixWeights,
    /// One FM draw per output task.
    pub fm_noise: Vec<FmNoise>,
}

impl AugmentPlan {
    pub fn sample(config: &AugmentConfig, n: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyReduction("augment plan"));
        }
        let mut plan = AugmentPlan {
            subset: Vec::new(),
            weights: MixWeights { lambda: Vec::new() },
            fm_noise: Vec::new(),
        };
        if (config.mti || config.mtst) && !config.identity_transfer {
            config.interpolation.validate_for(n)?;
            plan.subset = sample(rng, n, config.interpolation.m()).into_vec();
            plan.weights = sample_dirichlet(&config.interpolation, rng)?;
        }
        if config.fm {
            let outputs = Self::output_count(config, n);
            plan.fm_noise = (0..outputs).map(|_| FmNoise::sample(width, rng)).collect();
        }
        Ok(plan)
    }

    /// Number of tasks the batch will contain.
    pub fn output_count(config: &AugmentConfig, n: usize) -> usize {
        if config.identity_transfer {
            return n;
        }
        match (config.mti, config.mtst) {
            (true, true) => n + 1,
            (true, false) => 1,
            (false, _) => n,
        }
    }
}

fn maybe_detach(tape: &mut Tape, s: StyleStats, detach: bool) -> StyleStats {
    if detach {
        StyleStats {
            layer: s.layer,
            mean: tape.detach(s.mean),
            var: tape.detach(s.var),
        }
    } else {
        s
    }
}

/// Applies a sampled plan. With every component on this produces the
/// interpolated task followed by each original task transferred to its
/// style, all feature-modulated with independent draws. Without MTI the
/// interpolated task is still formed for its statistics but left out.
pub fn apply_plan(
    tape: &mut Tape,
    params: &ParamSet,
    tasks: &[TaskFeatures],
    config: &AugmentConfig,
    plan: &AugmentPlan,
) -> Result<AugmentedTaskBatch> {
    let first = tasks.first().ok_or(Error::EmptyReduction("augmented batch"))?;
    let layer = first.layer;
    let mut out: Vec<AugmentedTask> = Vec::new();

    let own_stats = |tape: &mut Tape| -> Result<Vec<StyleStats>> {
        tasks
            .iter()
            .map(|t| task_style_stats(tape, t.x, t.layer).map(|s| maybe_detach(tape, s, config.stopgrad_stats)))
            .collect()
    };

    if config.identity_transfer {
        let stats = own_stats(tape)?;
        for (j, t) in tasks.iter().enumerate() {
            let x = mtst_transfer(tape, t, &stats[j], &stats[j], config.eps)?;
            out.push(AugmentedTask {
                features: x,
                layout: t.layout,
                layer,
                kind: TaskKind::Transferred { source: j },
            });
        }
    } else {
        let mut mix_stats = None;
        if config.mti || config.mtst {
            let chosen: Vec<TaskFeatures> = plan.subset.iter().map(|&i| tasks[i]).collect();
            let mixed = mti_interpolate(tape, &chosen, &plan.weights)?;
            if config.mtst {
                let s = task_style_stats(tape, mixed.features, layer)?;
                mix_stats = Some(maybe_detach(tape, s, config.stopgrad_stats));
            }
            if config.mti {
                out.push(mixed);
            }
        }
        if let Some(target) = mix_stats {
            let stats = own_stats(tape)?;
            for (j, t) in tasks.iter().enumerate() {
                let x = mtst_transfer(tape, t, &stats[j], &target, config.eps)?;
                out.push(AugmentedTask {
                    features: x,
                    layout: t.layout,
                    layer,
                    kind: TaskKind::Transferred { source: j },
                });
            }
        }
        if !config.mti && !config.mtst {
            out.extend(tasks.iter().enumerate().map(|(j, t)| AugmentedTask {
                features: t.x,
                layout: t.layout,
                layer,
                kind: TaskKind::Original { source: j },
            }));
        }
    }

    if config.fm {
        if plan.fm_noise.len() != out.len() {
            return Err(Error::Contract(format!(
                "plan has {} FM draws for {} tasks",
                plan.fm_noise.len(),
                out.len()
            )));
        }
        for (task, noise) in out.iter_mut().zip(&plan.fm_noise) {
            let (alpha, beta) = fm_scaled(tape, params, layer, noise)?;
            task.features = fm_apply(tape, task.features, alpha, beta)?;
        }
    }
    Ok(AugmentedTaskBatch { layer, tasks: out })
}

/// Samples a plan from `rng` and applies it.
pub fn build_augmented_batch(
    tape: &mut Tape,
    params: &ParamSet,
    tasks: &[TaskFeatures],
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedTaskBatch> {
    let first = tasks.first().ok_or(Error::EmptyReduction("augmented batch"))?;
    let width = tape.value(first.x).dims2()?.1;
    let plan = AugmentPlan::sample(config, tasks.len(), width, rng)?;
    apply_plan(tape, params, tasks, config, &plan)
}
