//! Monte-Carlo checks of the closed forms behind the augmentation: Beta and
//! Dirichlet component variances, the concentration sweep, the law of total
//! variance for augmented features and the feature-modulation variance.
//!
//! Every estimate carries a standard error so callers can judge agreement in
//! units of MC noise rather than with fixed tolerances.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{self, build_augmented_batch, sample_dirichlet, AugmentConfig, InterpolationConfig, TaskFeatures, TaskKind};
use crate::diffcore::{softplus, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::worldgen::{Benchmark, EpisodeTask, TaskLayout};

/// Smallest sample count accepted by the suites.
pub const MIN_SAMPLES: usize = 10_000;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive")))
    }
}

/// `Var[λ]` for `λ ~ Beta(α, β)`: `αβ / ((α+β)²(α+β+1))`.
pub fn beta_pair_variance(alpha: f64, beta: f64) -> Result<f64> {
    positive("alpha", alpha)?;
    positive("beta", beta)?;
    let s = alpha + beta;
    Ok(alpha * beta / (s * s * (s + 1.0)))
}

/// `Var[λ_1]` for `λ ~ Dirichlet(γ)`: `γ_1(γ̂−γ_1) / (γ̂²(γ̂+1))`, `γ̂ = Σγ`.
pub fn dirichlet_component_variance(gamma: &[f64]) -> Result<f64> {
    if gamma.len() < 2 {
        return Err(Error::Config("need at least two concentrations".into()));
    }
    for &g in gamma {
        positive("gamma", g)?;
    }
    let total: f64 = gamma.iter().sum();
    let g1 = gamma[0];
    Ok(g1 * (total - g1) / (total * total * (total + 1.0)))
}

/// Sample moments with standard errors for the mean and the variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub n: usize,
    pub mean: f64,
    pub se_mean: f64,
    pub variance: f64,
    /// `sqrt((m4 − m2²)/n)`.
    pub se_variance: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptyReduction("McEstimate"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for x in xs {
            let d = (x - mean) * (x - mean);
            m2 += d;
            m4 += d * d;
        }
        m2 /= n;
        m4 /= n;
        Ok(McEstimate {
            n: xs.len(),
            mean,
            se_mean: (m2 / n).sqrt(),
            variance: m2,
            se_variance: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        })
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(format!("{n} samples is below the minimum of {MIN_SAMPLES}")));
    }
    Ok(())
}

/// `λ_1` of `n` Dirichlet draws.
pub fn mc_dirichlet_component(gamma: &[f64], n: usize, seed: u64) -> Result<McEstimate> {
    let config = InterpolationConfig::new(gamma.to_vec())?;
    let mut rng = stream(seed, Purpose::Theory, 1);
    let xs = (0..n)
        .map(|_| sample_dirichlet(&config, &mut rng).map(|w| w.lambda[0]))
        .collect::<Result<Vec<_>>>()?;
    McEstimate::from_samples(&xs)
}

/// `n` draws from a Beta sampler independent of the Dirichlet route.
pub fn mc_beta(alpha: f64, beta: f64, n: usize, seed: u64) -> Result<McEstimate> {
    let dist = Beta::new(alpha, beta).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = stream(seed, Purpose::Theory, 2);
    let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    McEstimate::from_samples(&xs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    pub name: String,
    pub closed_form: f64,
    pub mc: McEstimate,
    /// `|mc − closed| / se`.
    pub z: f64,
    pub pass: bool,
}

impl VarianceCheck {
    fn new(name: String, closed_form: f64, mc: McEstimate, max_z: f64) -> Self {
        let z = (mc.variance - closed_form).abs() / mc.se_variance.max(f64::MIN_POSITIVE);
        VarianceCheck {
            name,
            closed_form,
            mc,
            z,
            pass: z <= max_z,
        }
    }
}

/// The two values compared by the inequality stated for `γ = 0.2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVersusTriple {
    pub beta_pair: f64,
    pub dirichlet_triple: f64,
    /// Whether `beta_pair <= dirichlet_triple`.
    pub pair_not_larger: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_samples: usize,
    pub checks: Vec<VarianceCheck>,
    /// Dirichlet with two components evaluates to the Beta formula exactly.
    pub reduction_exact: bool,
    pub pair_versus_triple: PairVersusTriple,
}

impl VarianceReport {
    pub fn failures(&self) -> Vec<String> {
        let mut f: Vec<String> = self.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
        if !self.reduction_exact {
            f.push("dirichlet m=2 reduction".into());
        }
        f
    }
}

/// Closed forms against `n` draws each for the Beta pairs (1,1), (0.2,0.2),
/// (0.5,2) and the Dirichlet vectors [0.2]², [0.2]³, [0.2]⁴.
pub fn variance_suite(n: usize, seed: u64) -> Result<VarianceReport> {
    check_samples(n)?;
    let mut checks = Vec::new();
    for (k, (a, b)) in [(1.0, 1.0), (0.2, 0.2), (0.5, 2.0)].into_iter().enumerate() {
        let mc = mc_beta(a, b, n, seed.wrapping_add(k as u64))?;
        checks.push(VarianceCheck::new(format!("beta({a},{b})"), beta_pair_variance(a, b)?, mc, 3.0));
    }
    for m in 2..=4 {
        let gamma = vec![0.2; m];
        let mc = mc_dirichlet_component(&gamma, n, seed.wrapping_add(10 + m as u64))?;
        checks.push(VarianceCheck::new(
            format!("dirichlet([0.2]x{m})"),
            dirichlet_component_variance(&gamma)?,
            mc,
            3.0,
        ));
    }
    let beta_pair = beta_pair_variance(0.2, 0.2)?;
    let dirichlet_triple = dirichlet_component_variance(&[0.2; 3])?;
    Ok(VarianceReport {
        n_samples: n,
        checks,
        reduction_exact: dirichlet_component_variance(&[0.2, 0.2])? == beta_pair,
        pair_versus_triple: PairVersusTriple {
            beta_pair,
            dirichlet_triple,
            pair_not_larger: beta_pair <= dirichlet_triple,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub gamma_grid: Vec<f64>,
    pub m: usize,
    pub n_samples: usize,
    pub e_max_lambda: Vec<f64>,
    pub e_max_se: Vec<f64>,
    pub var_lambda: Vec<f64>,
    pub var_se: Vec<f64>,
    pub closed_form_var: Vec<f64>,
}

impl SweepResult {
    /// Adjacent grid points where an estimate rises by more than `slack`
    /// combined standard errors.
    pub fn monotonicity_violations(&self, slack: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (name, est, se) in [
            ("e_max_lambda", &self.e_max_lambda, &self.e_max_se),
            ("var_lambda", &self.var_lambda, &self.var_se),
        ] {
            for i in 1..est.len() {
                let tol = slack * (se[i - 1].powi(2) + se[i].powi(2)).sqrt();
                if est[i] > est[i - 1] + tol {
                    out.push(format!(
                        "{name} rises from {:.6} at gamma={} to {:.6} at gamma={}",
                        est[i - 1],
                        self.gamma_grid[i - 1],
                        est[i],
                        self.gamma_grid[i]
                    ));
                }
            }
        }
        out
    }

    /// Grid points where the variance estimate misses the closed form by
    /// more than `max_z` standard errors.
    pub fn closed_form_misses(&self, max_z: f64) -> Vec<String> {
        (0..self.gamma_grid.len())
            .filter(|&i| (self.var_lambda[i] - self.closed_form_var[i]).abs() > max_z * self.var_se[i])
            .map(|i| format!("var_lambda at gamma={}", self.gamma_grid[i]))
            .collect()
    }
}

/// `E[max_j λ_j]` and `Var[λ_1]` under `Dirichlet(γ·1_m)` for each `γ`.
pub fn gamma_sweep(grid: &[f64], m: usize, n: usize, seed: u64) -> Result<SweepResult> {
    check_samples(n)?;
    let mut r = SweepResult {
        gamma_grid: grid.to_vec(),
        m,
        n_samples: n,
        e_max_lambda: Vec::new(),
        e_max_se: Vec::new(),
        var_lambda: Vec::new(),
        var_se: Vec::new(),
        closed_form_var: Vec::new(),
    };
    for (k, &g) in grid.iter().enumerate() {
        let config = InterpolationConfig::uniform(m, g)?;
        let mut rng = stream(seed, Purpose::Theory, 100 + k as u64);
        let mut first = Vec::with_capacity(n);
        let mut maxes = Vec::with_capacity(n);
        for _ in 0..n {
            let w = sample_dirichlet(&config, &mut rng)?;
            first.push(w.lambda[0]);
            maxes.push(w.lambda.iter().cloned().fold(0.0, f64::max));
        }
        let mx = McEstimate::from_samples(&maxes)?;
        let l1 = McEstimate::from_samples(&first)?;
        r.e_max_lambda.push(mx.mean);
        r.e_max_se.push(mx.se_mean);
        r.var_lambda.push(l1.variance);
        r.var_se.push(l1.se_variance);
        r.closed_form_var.push(dirichlet_component_variance(&config.gamma)?);
    }
    Ok(r)
}

/// Setup for the covariance decomposition of augmented feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalVarConfig {
    pub layout: TaskLayout,
    /// One task per source domain, round-robin.
    pub n_tasks: usize,
    pub augment: AugmentConfig,
    /// Initial value of both FM weights.
    pub fm_weight: f64,
    /// Draws per estimate.
    pub n_mc: usize,
    pub seed: u64,
}

impl TotalVarConfig {
    pub fn full(n_mc: usize, seed: u64) -> Result<Self> {
        Ok(TotalVarConfig {
            layout: TaskLayout {
                n_way: 2,
                k_shot: 1,
                k_query: 2,
            },
            n_tasks: 4,
            augment: AugmentConfig::full(3, augment::DEFAULT_GAMMA)?,
            fm_weight: -1.0,
            n_mc,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovCheck {
    pub channels: usize,
    /// Row-major `[C, C]` matrices.
    pub total_cov: Vec<f64>,
    pub expected_conditional_cov: Vec<f64>,
    pub cov_of_conditional_mean: Vec<f64>,
    /// Covariance of the un-augmented rows, for reference.
    pub data_cov: Vec<f64>,
    pub residual_frobenius: f64,
    /// Frobenius norm of the per-entry standard errors of the residual.
    pub residual_se: f64,
    pub min_eig_cov_of_mean: f64,
    pub symmetric: bool,
    pub n_mc: usize,
}

impl CovCheck {
    pub fn failures(&self) -> Vec<String> {
        let mut f = Vec::new();
        if !self.symmetric {
            f.push("covariance matrices are not symmetric".into());
        }
        if self.residual_frobenius > 5.0 * self.residual_se {
            f.push(format!(
                "residual {:.3e} exceeds 5 x SE bound {:.3e}",
                self.residual_frobenius, self.residual_se
            ));
        }
        if self.min_eig_cov_of_mean < -1e-8 {
            f.push(format!("Cov(E[X|Z]) has eigenvalue {:.3e}", self.min_eig_cov_of_mean));
        }
        f
    }
}

/// Running sums of outer products around a fixed centre, with second
/// moments of each entry for standard errors.
struct CovAccumulator {
    c: usize,
    n: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl CovAccumulator {
    fn new(c: usize) -> Self {
        CovAccumulator {
            c,
            n: 0,
            sum: vec![0.0; c],
            outer: vec![0.0; c * c],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for a in 0..self.c {
            self.sum[a] += x[a];
            for b in 0..self.c {
                self.outer[a * self.c + b] += x[a] * x[b];
            }
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Population covariance.
    fn cov(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.n as f64;
        let mut out = vec![0.0; self.c * self.c];
        for a in 0..self.c {
            for b in 0..self.c {
                out[a * self.c + b] = self.outer[a * self.c + b] / n - m[a] * m[b];
            }
        }
        out
    }
}

fn min_eigenvalue(m: &[f64], c: usize) -> f64 {
    let sym = DMatrix::from_row_slice(c, c, m);
    let sym = (&sym + sym.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn is_symmetric(m: &[f64], c: usize) -> bool {
    (0..c).all(|a| (0..c).all(|b| (m[a * c + b] - m[b * c + a]).abs() <= 1e-10))
}

/// Draws the augmented rows of every source task for one augmentation
/// draw; index `j * R + r` is row `r` of the task derived from task `j`.
struct AugmentedRows<'a> {
    tasks: &'a [EpisodeTask],
    params: ParamSet,
    config: &'a TotalVarConfig,
}

impl AugmentedRows<'_> {
    fn draw(&self, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let feats: Vec<TaskFeatures> = self
            .tasks
            .iter()
            .map(|t| TaskFeatures {
                x: tape.constant(t.all_rows()),
                layout: t.layout(),
                layer: 1,
            })
            .collect();
        let batch = build_augmented_batch(&mut tape, &self.params, &feats, &self.config.augment, rng)?;
        let r = self.config.layout.rows();
        let mut rows = vec![Vec::new(); self.tasks.len() * r];
        let mut seen = 0;
        for task in &batch.tasks {
            let j = match task.kind {
                TaskKind::Transferred { source } | TaskKind::Original { source } => source,
                TaskKind::Interpolated => continue,
            };
            seen += 1;
            let data = tape.value(task.features).data();
            let c = data.len() / r;
            for (i, row) in data.chunks_exact(c).enumerate() {
                rows[j * r + i] = row.to_vec();
            }
        }
        if seen != self.tasks.len() {
            return Err(Error::Config(
                "the decomposition needs one augmented task per source task".into(),
            ));
        }
        Ok(rows)
    }
}

/// Decomposes the covariance of an augmented feature row `X` given which
/// source row `Z` it came from.
///
/// `Cov(X)` comes from one batch of unconditional draws (random `Z`, fresh
/// augmentation each), `E[Cov(X|Z)] + Cov(E[X|Z])` from an independent batch
/// that draws every `Z` under each augmentation. The two sides are exact
/// equals in expectation, so their difference is pure MC noise.
pub fn total_variance_check(bench: &Benchmark, config: &TotalVarConfig) -> Result<CovCheck> {
    if config.n_mc < 2 {
        return Err(Error::Config("n_mc must be >= 2".into()));
    }
    let mut task_rng = stream(config.seed, Purpose::Theory, 200);
    let tasks = (0..config.n_tasks)
        .map(|j| bench.sample_task(&bench.source[j % bench.source.len()], config.layout, &mut task_rng))
        .collect::<Result<Vec<_>>>()?;
    let c = bench.dim();
    let mut params = ParamSet::new();
    augment::init_fm_params(&mut params, &[(1, c)], config.fm_weight, config.fm_weight)?;
    let source = AugmentedRows {
        tasks: &tasks,
        params,
        config,
    };
    let z_count = config.n_tasks * config.layout.rows();

    // Unconditional batch.
    let mut aug_rng = stream(config.seed, Purpose::Theory, 201);
    let mut z_rng = stream(config.seed, Purpose::Theory, 202);
    let mut xs = Vec::with_capacity(config.n_mc);
    for _ in 0..config.n_mc {
        let rows = source.draw(&mut aug_rng)?;
        xs.push(rows[z_rng.random_range(0..z_count)].clone());
    }
    let mut acc = CovAccumulator::new(c);
    xs.iter().for_each(|x| acc.push(x));
    let total_cov = acc.cov();
    let mu_a = acc.mean();

    // Conditional batch: every Z under each draw.
    let calls = config.n_mc.div_ceil(z_count).max(2);
    let mut aug_rng = stream(config.seed, Purpose::Theory, 203);
    let mut per_z: Vec<CovAccumulator> = (0..z_count).map(|_| CovAccumulator::new(c)).collect();
    let mut draws = Vec::with_capacity(calls);
    for _ in 0..calls {
        let rows = source.draw(&mut aug_rng)?;
        for (z, row) in rows.iter().enumerate() {
            per_z[z].push(row);
        }
        draws.push(rows);
    }
    let mut expected_conditional_cov = vec![0.0; c * c];
    let mut means = CovAccumulator::new(c);
    for z in &per_z {
        for (e, v) in expected_conditional_cov.iter_mut().zip(z.cov()) {
            *e += v / z_count as f64;
        }
        means.push(&z.mean());
    }
    let cov_of_conditional_mean = means.cov();
    let mu_b = means.mean();

    // Per-entry standard errors: iid products in the first batch, per-draw
    // averages in the second.
    let mut var_a = vec![0.0; c * c];
    for x in &xs {
        for a in 0..c {
            for b in 0..c {
                let p = (x[a] - mu_a[a]) * (x[b] - mu_a[b]) - total_cov[a * c + b];
                var_a[a * c + b] += p * p;
            }
        }
    }
    let pooled: Vec<f64> = expected_conditional_cov
        .iter()
        .zip(&cov_of_conditional_mean)
        .map(|(e, m)| e + m)
        .collect();
    let mut var_b = vec![0.0; c * c];
    for rows in &draws {
        for a in 0..c {
            for b in 0..c {
                let u = rows.iter().map(|x| (x[a] - mu_b[a]) * (x[b] - mu_b[b])).sum::<f64>() / z_count as f64;
                let d = u - pooled[a * c + b];
                var_b[a * c + b] += d * d;
            }
        }
    }
    let (na, nb) = (xs.len() as f64, draws.len() as f64);
    let residual_se = var_a
        .iter()
        .zip(&var_b)
        .map(|(va, vb)| va / (na * (na - 1.0)) + vb / (nb * (nb - 1.0)))
        .sum::<f64>()
        .sqrt();
    let residual_frobenius = total_cov
        .iter()
        .zip(&pooled)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        .sqrt();

    let mut data = CovAccumulator::new(c);
    for t in &tasks {
        for row in t.all_rows().data().chunks_exact(c) {
            data.push(row);
        }
    }
    Ok(CovCheck {
        channels: c,
        symmetric: [&total_cov, &expected_conditional_cov, &cov_of_conditional_mean]
            .iter()
            .all(|m| is_symmetric(m, c)),
        min_eig_cov_of_mean: min_eigenvalue(&cov_of_conditional_mean, c),
        data_cov: data.cov(),
        total_cov,
        expected_conditional_cov,
        cov_of_conditional_mean,
        residual_frobenius,
        residual_se,
        n_mc: config.n_mc,
    })
}

/// Residual norms of independent checks at `n_mc` and `4·n_mc`, averaged
/// over `replicates`, and their ratio (≈ 2 when the residual is MC noise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualScaling {
    pub n_small: usize,
    pub n_large: usize,
    pub residual_small: f64,
    pub residual_large: f64,
    pub ratio: f64,
}

pub fn residual_scaling(bench: &Benchmark, base: &TotalVarConfig, replicates: usize) -> Result<ResidualScaling> {
    let run = |n_mc: usize, offset: u64| -> Result<f64> {
        let mut s = 0.0;
        for k in 0..replicates.max(1) as u64 {
            let cfg = TotalVarConfig {
                n_mc,
                seed: base.seed.wrapping_add(offset + k),
                ..base.clone()
            };
            s += total_variance_check(bench, &cfg)?.residual_frobenius;
        }
        Ok(s / replicates.max(1) as f64)
    };
    let small = run(base.n_mc, 1000)?;
    let large = run(4 * base.n_mc, 2000)?;
    Ok(ResidualScaling {
        n_small: base.n_mc,
        n_large: 4 * base.n_mc,
        residual_small: small,
        residual_large: large,
        ratio: small / large,
    })
}

/// `[(μ)² + (σ²)]·softplus(W_α)²`: the variance that modulation by
/// `α ~ N(0, softplus(W_α)²)` adds to a channel with mean `μ` and variance
/// `σ²`.
pub fn regularizer_closed_form(mu: f64, sigma2: f64, w_alpha: f64) -> f64 {
    let s = softplus(w_alpha);
    (mu * mu + sigma2) * s * s
}

/// `W` with `softplus(W) = y`.
pub fn softplus_inverse(y: f64) -> Result<f64> {
    positive("softplus value", y)?;
    Ok(if y > 30.0 { y + (-(-y).exp()).ln_1p() } else { y.exp_m1().ln() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegTraceReport {
    pub mu: f64,
    pub sigma2: f64,
    pub w_alpha: f64,
    pub closed_form: f64,
    pub mc: McEstimate,
    /// `|mc − closed| / max(closed, tiny)`.
    pub rel_gap: f64,
    pub z: f64,
    pub pass: bool,
}

/// Variance of the modulation `x̂ − x = α·x + β` over `n` draws, on one
/// channel with `x ~ N(μ, σ²)` and `β` switched off (`W_β = −40`).
pub fn regularizer_trace(mu: f64, sigma2: f64, w_alpha: f64, n: usize, seed: u64) -> Result<RegTraceReport> {
    check_samples(n)?;
    if !(sigma2 >= 0.0) {
        return Err(Error::Config("sigma2 must be >= 0".into()));
    }
    let mut params = ParamSet::new();
    augment::init_fm_params(&mut params, &[(1, 1)], w_alpha, -40.0)?;
    let xdist = Normal::new(mu, sigma2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut fm_rng = stream(seed, Purpose::Theory, 300);
    let mut x_rng = stream(seed, Purpose::Theory, 301);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = xdist.sample(&mut x_rng);
        let mut tape = Tape::new();
        let (alpha, beta) = augment::fm_sample(&mut tape, &params, 1, &mut fm_rng)?;
        let xv = tape.constant(Tensor::new(vec![1, 1], vec![x])?);
        let modulated = augment::fm_apply(&mut tape, xv, alpha, beta)?;
        ys.push(tape.value(modulated).data()[0] - x);
    }
    let mc = McEstimate::from_samples(&ys)?;
    let closed_form = regularizer_closed_form(mu, sigma2, w_alpha);
    let z = (mc.variance - closed_form).abs() / mc.se_variance.max(f64::MIN_POSITIVE);
    Ok(RegTraceReport {
        mu,
        sigma2,
        w_alpha,
        closed_form,
        mc,
        rel_gap: (mc.variance - closed_form).abs() / closed_form.max(f64::MIN_POSITIVE),
        z,
        pass: z <= 3.0 || (mc.variance - closed_form).abs() < 1e-20,
    })
}
