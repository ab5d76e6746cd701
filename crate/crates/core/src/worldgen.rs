//! Synthetic multi-domain few-shot benchmark.
//!
//! Every class is a Gaussian cluster in a shared raw content space. A domain
//! sees a subset of the classes through its own parametric style transform
//! `gain ⊙ sign(a)|a|^p + bias + noise`, so two domains showing the same
//! class carry identical semantics and differ only in style.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const BENCHMARK_SCHEMA: &str = "benchmark_v1";

const MAX_REJECTIONS: usize = 1000;
const SIGNATURE_POOL: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_source_domains: usize,
    pub n_target_domains: usize,
    pub classes_per_domain: usize,
    pub dim: usize,
    /// Standard deviation of class centres around the origin.
    pub center_scale: f64,
    pub within_scatter: f64,
    pub noise_scale: f64,
    /// Log-gain half-range of the shared per-domain gain factor.
    pub gain_spread: f64,
    /// Standard deviation of per-channel log-gain jitter.
    pub gain_jitter: f64,
    /// Standard deviation of per-channel bias.
    pub bias_spread: f64,
    pub contrast_range: (f64, f64),
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0,
            n_source_domains: 4,
            n_target_domains: 1,
            classes_per_domain: 16,
            dim: 16,
            center_scale: 1.0,
            within_scatter: 1.0,
            noise_scale: 0.1,
            gain_spread: 0.8,
            gain_jitter: 0.15,
            bias_spread: 1.0,
            contrast_range: (0.6, 1.6),
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_source_domains < 2 {
            return Err(Error::Config(format!(
                "need at least 2 source domains, got {}",
                self.n_source_domains
            )));
        }
        if self.n_target_domains < 1 {
            return Err(Error::Config("need at least 1 target domain".into()));
        }
        if self.classes_per_domain < 2 || self.dim == 0 {
            return Err(Error::Config(
                "classes_per_domain must be >= 2 and dim >= 1".into(),
            ));
        }
        let (lo, hi) = self.contrast_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "contrast_range {:?} must lie within [0.5, 2.0]",
                self.contrast_range
            )));
        }
        if self.within_scatter <= 0.0 || self.noise_scale < 0.0 || self.center_scale <= 0.0 {
            return Err(Error::Config(
                "within_scatter and center_scale must be > 0, noise_scale >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub center: Vec<f64>,
    pub within_scatter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub contrast_exponent: f64,
    pub noise_scale: f64,
    pub class_ids: Vec<usize>,
}

impl DomainSpec {
    /// Applies the style transform to one raw content vector.
    pub fn transform_into(&self, raw: &[f64], noise: &[f64], out: &mut Vec<f64>) {
        let p = self.contrast_exponent;
        for c in 0..raw.len() {
            let a = raw[c];
            let styled = self.gain[c] * a.signum() * a.abs().powf(p);
            out.push(styled + self.bias[c] + self.noise_scale * noise[c]);
        }
    }

    /// Style parameters as one flat vector, for separation checks.
    pub fn style_vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.gain.iter().map(|g| g.ln()).collect();
        v.extend_from_slice(&self.bias);
        v.push(self.contrast_exponent);
        v
    }
}

/// The generated benchmark, serialized as the `benchmark_v1` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub schema: String,
    /// Version of the engine that generated the file.
    #[serde(default)]
    pub engine: String,
    pub spec: BenchmarkSpec,
    pub prototypes: Vec<ClassPrototype>,
    pub source: Vec<DomainSpec>,
    pub target: Vec<DomainSpec>,
}

/// Row layout shared by every task with the same `(N, Ks, Kq)`.
///
/// Rows are the support block followed by the query block; inside each
/// block rows are class-major, shot-minor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLayout {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
}

impl TaskLayout {
    pub fn support_rows(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_rows(&self) -> usize {
        self.n_way * self.k_query
    }

    pub fn rows(&self) -> usize {
        self.support_rows() + self.query_rows()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        class_major_labels(self.n_way, self.k_shot)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        class_major_labels(self.n_way, self.k_query)
    }
}

fn class_major_labels(n_way: usize, per_class: usize) -> Vec<usize> {
    (0..n_way).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub domain_id: usize,
    /// Global class id behind each episode-local label.
    pub class_ids: Vec<usize>,
}

impl EpisodeTask {
    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            n_way: self.n_way,
            k_shot: self.k_shot,
            k_query: self.k_query,
        }
    }

    /// Support rows followed by query rows.
    pub fn all_rows(&self) -> Tensor {
        Tensor::concat_rows(&[&self.support_x, &self.query_x]).expect("validated task")
    }

    /// Checks the episode invariants: shapes, label range, class-major
    /// ordering and distinct underlying classes.
    pub fn validate(&self) -> Result<()> {
        let layout = self.layout();
        let (sr, sd) = self.support_x.dims2()?;
        let (qr, qd) = self.query_x.dims2()?;
        if sr != layout.support_rows() || qr != layout.query_rows() || sd != qd {
            return Err(Error::Contract(format!(
                "task shapes {:?}/{:?} do not match {layout:?}",
                self.support_x.shape(),
                self.query_x.shape()
            )));
        }
        if self.support_y != layout.support_labels() || self.query_y != layout.query_labels() {
            return Err(Error::Contract("labels are not class-major 0..N".into()));
        }
        let mut ids = self.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if self.class_ids.len() != self.n_way || ids.len() != self.n_way {
            return Err(Error::Contract("task classes are not N distinct classes".into()));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Concatenated per-channel mean and variance of the noise-free transform
/// of `pool`.
fn style_signature(domain: &DomainSpec, pool: &[Vec<f64>]) -> Vec<f64> {
    let d = domain.gain.len();
    let zero = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut buf = Vec::with_capacity(d);
    for raw in pool {
        buf.clear();
        domain.transform_into(raw, &zero, &mut buf);
        for c in 0..d {
            sum[c] += buf[c];
            sq[c] += buf[c] * buf[c];
        }
    }
    let n = pool.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| s / n - m * m).collect();
    mean.into_iter().chain(var).collect()
}

fn make_domain(spec: &BenchmarkSpec, domain_id: usize, class_ids: Vec<usize>, rng: &mut impl Rng) -> DomainSpec {
    let shared = rng.random_range(-spec.gain_spread..=spec.gain_spread);
    let gain = (0..spec.dim)
        .map(|_| (shared + spec.gain_jitter * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let bias = normal_vec(rng, spec.dim).into_iter().map(|b| b * spec.bias_spread).collect();
    let (lo, hi) = spec.contrast_range;
    let contrast_exponent = if hi > lo { rng.random_range(lo..hi) } else { lo };
    DomainSpec {
        domain_id,
        gain,
        bias,
        contrast_exponent,
        noise_scale: spec.noise_scale,
        class_ids,
    }
}

/// Builds the benchmark deterministically from `spec.seed`.
///
/// Class centres are rejection-sampled to sit at least `3·within_scatter`
/// apart. Target domains are rejection-sampled until every one of them is
/// farther, in style-moment space, from each source domain than the source
/// domains are from each other on average.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::Benchmark, 0);
    let n_domains = spec.n_source_domains + spec.n_target_domains;
    let n_classes = n_domains * spec.classes_per_domain;
    let min_sep = 3.0 * spec.within_scatter;

    let mut prototypes: Vec<ClassPrototype> = Vec::with_capacity(n_classes);
    for class_id in 0..n_classes {
        let mut placed = None;
        for _ in 0..MAX_REJECTIONS {
            let center: Vec<f64> = normal_vec(&mut rng, spec.dim)
                .into_iter()
                .map(|v| v * spec.center_scale)
                .collect();
            if prototypes.iter().all(|p| l2(&p.center, &center) >= min_sep) {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place class {class_id} {min_sep:.3} away from the others after \
                 {MAX_REJECTIONS} tries; increase dim or center_scale"
            ))
        })?;
        prototypes.push(ClassPrototype {
            class_id,
            center,
            within_scatter: spec.within_scatter,
        });
    }

    let classes_of = |d: usize| (d * spec.classes_per_domain..(d + 1) * spec.classes_per_domain).collect();
    let source: Vec<DomainSpec> = (0..spec.n_source_domains)
        .map(|d| make_domain(spec, d, classes_of(d), &mut rng))
        .collect();

    // Style signatures are moments of every domain's transform applied to
    // one shared pool of raw content, so they differ only through style.
    let pool: Vec<Vec<f64>> = (0..SIGNATURE_POOL)
        .map(|i| {
            let p = &prototypes[i % n_classes];
            p.center
                .iter()
                .map(|c| c + p.within_scatter * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let signature = |d: &DomainSpec| style_signature(d, &pool);
    let styles: Vec<Vec<f64>> = source.iter().map(signature).collect();
    let mut pair_sum = 0.0;
    let mut pairs = 0;
    for i in 0..styles.len() {
        for j in i + 1..styles.len() {
            pair_sum += l2(&styles[i], &styles[j]);
            pairs += 1;
        }
    }
    let required = pair_sum / pairs as f64;

    let mut target = Vec::with_capacity(spec.n_target_domains);
    for t in 0..spec.n_target_domains {
        let d = spec.n_source_domains + t;
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let cand = make_domain(spec, d, classes_of(d), &mut rng);
            let sv = signature(&cand);
            if styles.iter().all(|s| l2(s, &sv) >= required) {
                accepted = Some(cand);
                break;
            }
        }
        target.push(accepted.ok_or_else(|| {
            Error::Generation(format!(
                "target domain {d} could not be separated from the sources after \
                 {MAX_REJECTIONS} tries; increase dim"
            ))
        })?);
    }

    Ok(Benchmark {
        schema: BENCHMARK_SCHEMA.to_string(),
        engine: crate::ENGINE_VERSION.to_string(),
        spec: spec.clone(),
        prototypes,
        source,
        target,
    })
}

impl Benchmark {
    pub fn from_json(text: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != BENCHMARK_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported benchmark schema {:?}",
                self.schema
            )));
        }
        self.spec.validate()?;
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.class_id != i || p.center.len() != self.spec.dim {
                return Err(Error::Config(format!("malformed prototype {i}")));
            }
        }
        for d in self.source.iter().chain(&self.target) {
            if d.gain.len() != self.spec.dim || d.bias.len() != self.spec.dim {
                return Err(Error::Config(format!("domain {} has wrong dimension", d.domain_id)));
            }
            if d.gain.iter().any(|g| *g <= 0.0) {
                return Err(Error::Config(format!("domain {} has a non-positive gain", d.domain_id)));
            }
            if d.class_ids.iter().any(|c| *c >= self.prototypes.len()) {
                return Err(Error::Config(format!("domain {} names unknown classes", d.domain_id)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn domain(&self, id: usize) -> Result<&DomainSpec> {
        self.source
            .iter()
            .chain(&self.target)
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::Config(format!("no domain with id {id}")))
    }

    /// One styled sample of `class_id` seen through `domain`.
    fn draw(&self, domain: &DomainSpec, class_id: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
        let proto = &self.prototypes[class_id];
        let raw: Vec<f64> = proto
            .center
            .iter()
            .map(|c| c + proto.within_scatter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let noise = normal_vec(rng, raw.len());
        domain.transform_into(&raw, &noise, out);
    }

    /// Samples one N-way episode from `domain`.
    pub fn sample_task(
        &self,
        domain: &DomainSpec,
        layout: TaskLayout,
        rng: &mut impl Rng,
    ) -> Result<EpisodeTask> {
        let TaskLayout {
            n_way,
            k_shot,
            k_query,
        } = layout;
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Sampling("n_way and k_shot must be >= 1".into()));
        }
        if n_way > domain.class_ids.len() {
            return Err(Error::Sampling(format!(
                "{n_way}-way task from domain {} with {} classes",
                domain.domain_id,
                domain.class_ids.len()
            )));
        }
        let class_ids: Vec<usize> = sample(rng, domain.class_ids.len(), n_way)
            .into_iter()
            .map(|i| domain.class_ids[i])
            .collect();
        let d = self.dim();
        let mut support = Vec::with_capacity(n_way * k_shot * d);
        let mut query = Vec::with_capacity(n_way * k_query * d);
        for &c in &class_ids {
            for _ in 0..k_shot {
                self.draw(domain, c, rng, &mut support);
            }
            for _ in 0..k_query {
                self.draw(domain, c, rng, &mut query);
            }
        }
        Ok(EpisodeTask {
            support_x: Tensor::new(vec![n_way * k_shot, d], support)?,
            support_y: layout.support_labels(),
            query_x: Tensor::new(vec![n_way * k_query, d], query)?,
            query_y: layout.query_labels(),
            n_way,
            k_shot,
            k_query,
            domain_id: domain.domain_id,
            class_ids,
        })
    }

    /// Pooled labelled samples from every source domain, labels numbered
    /// over all source classes in domain order.
    pub fn pooled_source_batch(&self, per_class: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut label = 0;
        for domain in &self.source {
            for &c in &domain.class_ids {
                for _ in 0..per_class {
                    self.draw(domain, c, rng, &mut data);
                    labels.push(label);
                }
                label += 1;
            }
        }
        let rows = labels.len();
        Ok((Tensor::new(vec![rows, self.dim()], data)?, labels))
    }

    pub fn n_source_classes(&self) -> usize {
        self.source.iter().map(|d| d.class_ids.len()).sum()
    }

    /// Per-channel `(mean, variance)` of `n_probe` styled samples from each
    /// domain, using common random numbers for both.
    fn probe_moments(&self, a: &DomainSpec, b: &DomainSpec, n_probe: usize, seed: u64) -> [(Vec<f64>, Vec<f64>); 2] {
        let d = self.dim();
        let mut rng = rng::stream(seed, Purpose::Probe, 0);
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut sq = [vec![0.0; d], vec![0.0; d]];
        let mut buf = Vec::with_capacity(d);
        for _ in 0..n_probe {
            let u: f64 = rng.random();
            let z = normal_vec(&mut rng, d);
            let noise = normal_vec(&mut rng, d);
            for (k, dom) in [a, b].into_iter().enumerate() {
                let idx = ((u * dom.class_ids.len() as f64) as usize).min(dom.class_ids.len() - 1);
                let proto = &self.prototypes[dom.class_ids[idx]];
                let raw: Vec<f64> = proto
                    .center
                    .iter()
                    .zip(&z)
                    .map(|(c, zi)| c + proto.within_scatter * zi)
                    .collect();
                buf.clear();
                dom.transform_into(&raw, &noise, &mut buf);
                for c in 0..d {
                    sums[k][c] += buf[c];
                    sq[k][c] += buf[c] * buf[c];
                }
            }
        }
        let n = n_probe as f64;
        let finish = |k: usize| {
            let mean: Vec<f64> = sums[k].iter().map(|s| s / n).collect();
            let var = sq[k].iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0)).collect();
            (mean, var)
        };
        [finish(0), finish(1)]
    }

    /// L2 distance between the concatenated per-channel `(mean, variance)`
    /// of the two domains. Both domains see the same raw draws, so the
    /// measure is exactly zero for identical specs.
    pub fn domain_shift_measure(&self, a: &DomainSpec, b: &DomainSpec, n_probe: usize, seed: u64) -> f64 {
        let [(ma, va), (mb, vb)] = self.probe_moments(a, b, n_probe.max(1), seed);
        let mut s = 0.0;
        for c in 0..self.dim() {
            s += (ma[c] - mb[c]).powi(2) + (va[c] - vb[c]).powi(2);
        }
        s.sqrt()
    }
}
