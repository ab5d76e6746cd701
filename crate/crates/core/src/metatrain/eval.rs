use rand::Rng;

use crate::augment::{mtst_transfer, task_style_stats, TaskFeatures};
use crate::diffcore::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::worldgen::{Benchmark, DomainSpec, TaskLayout};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `1.96 · s / sqrt(n)` with the sample standard deviation `s`; zero
    /// for a single episode.
    pub ci_half_width: f64,
    pub episodes: usize,
}

impl EvalResult {
    pub fn from_accuracies(accs: &[f64]) -> Result<Self> {
        let n = accs.len();
        if n == 0 {
            return Err(Error::EmptyReduction("evaluate"));
        }
        let mean = accs.iter().sum::<f64>() / n as f64;
        let ci_half_width = if n > 1 {
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Ok(EvalResult {
            accuracy: mean,
            ci_half_width,
            episodes: n,
        })
    }
}

/// Query accuracy over `n_episodes` tasks from `domain`, without any
/// adaptation. Episode `i` always comes from the same stream, so two models
/// evaluated with one seed see identical episodes.
pub fn evaluate(
    params: &ParamSet,
    model: &ModelConfig,
    bench: &Benchmark,
    domain: &DomainSpec,
    layout: TaskLayout,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let base = (domain.domain_id as u64) << 32;
    let accs = (0..n_episodes as u64)
        .map(|i| {
            let task = bench.sample_task(domain, layout, &mut stream(seed, Purpose::Eval, base | i))?;
            let pred = model::predict(params, model, &task)?;
            let correct = pred.iter().zip(&task.query_y).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / pred.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_accuracies(&accs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleProbe {
    pub n_tasks: usize,
    pub seed: u64,
    /// Transfer every task onto its own statistics.
    pub identity: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between final-layer features of target-domain
/// tasks and of the same tasks style-transferred at the lowest augmentable
/// layer.
///
/// Probe task `k` comes from the first target domain; its transfer target is
/// a uniform mix of its own style and that of a task from source domain
/// `k mod n_source`.
pub fn style_invariance_score(
    params: &ParamSet,
    model: &ModelConfig,
    bench: &Benchmark,
    layout: TaskLayout,
    probe: &StyleProbe,
) -> Result<f64> {
    if probe.n_tasks == 0 {
        return Err(Error::EmptyReduction("style_invariance_score"));
    }
    let target = bench
        .target
        .first()
        .ok_or_else(|| Error::Config("benchmark has no target domain".into()))?;
    let layer = *model
        .encoder
        .eligible_layers
        .iter()
        .min()
        .ok_or_else(|| Error::Config("no eligible layer".into()))?;
    let mut total = 0.0;
    for k in 0..probe.n_tasks {
        let mut rng = stream(probe.seed, Purpose::Probe, k as u64);
        let own = bench.sample_task(target, layout, &mut rng)?;
        let donor_domain = &bench.source[k % bench.source.len()];
        let donor = bench.sample_task(donor_domain, layout, &mut rng)?;
        let lambda: f64 = rng.random();

        let mut tape = Tape::new();
        let x = tape.constant(own.all_rows());
        let h = model::encode_to_layer(&mut tape, params, &model.encoder, x, layer)?;
        let own_stats = task_style_stats(&mut tape, h, layer)?;
        let mix_stats = if probe.identity {
            own_stats
        } else {
            let y = tape.constant(donor.all_rows());
            let g = model::encode_to_layer(&mut tape, params, &model.encoder, y, layer)?;
            let mixed = tape.weighted_sum(&[h, g], &[lambda, 1.0 - lambda])?;
            task_style_stats(&mut tape, mixed, layer)?
        };
        let feats = TaskFeatures {
            x: h,
            layout,
            layer,
        };
        let moved = mtst_transfer(&mut tape, &feats, &own_stats, &mix_stats, crate::augment::DEFAULT_STYLE_EPS)?;
        let f = model::encode_from_layer(&mut tape, params, &model.encoder, h, layer)?;
        let g = model::encode_from_layer(&mut tape, params, &model.encoder, moved, layer)?;
        let width = model.encoder.output_dim();
        let (fa, ga) = (tape.value(f).data(), tape.value(g).data());
        let rows = layout.rows();
        let s: f64 = fa
            .chunks_exact(width)
            .zip(ga.chunks_exact(width))
            .map(|(a, b)| cosine(a, b))
            .sum();
        total += s / rows as f64;
    }
    Ok(total / probe.n_tasks as f64)
}
