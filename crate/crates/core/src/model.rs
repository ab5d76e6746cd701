//! Layered MLP encoder with a split forward pass and metric-based heads.
//!
//! Layers are numbered from 1. `encode_to_layer(x, l)` runs layers `1..=l`
//! and `encode_from_layer(h, l)` runs `l+1..=L`, so features can be replaced
//! at any layer boundary before the rest of the network sees them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::worldgen::{EpisodeTask, TaskLayout};

pub const LOG_TAU_PATH: &str = "head.log_tau";

const COSINE_EPS: f64 = 1e-12;

pub fn weight_path(layer: usize) -> String {
    format!("encoder.layer{layer}.weight")
}

pub fn bias_path(layer: usize) -> String {
    format!("encoder.layer{layer}.bias")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    /// Layers after which augmentation may be applied.
    pub eligible_layers: Vec<usize>,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>, eligible_layers: Vec<usize>) -> Result<Self> {
        let c = EncoderConfig {
            input_dim,
            layer_widths,
            eligible_layers,
        };
        c.validate()?;
        Ok(c)
    }

    /// Four layers of width 64, augmentable after layers 1 and 2.
    pub fn default_for(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            layer_widths: vec![64; 4],
            eligible_layers: vec![1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs positive input and layer widths, got {} -> {:?}",
                self.input_dim, self.layer_widths
            )));
        }
        if self.eligible_layers.is_empty() {
            return Err(Error::Config("eligible_layers must not be empty".into()));
        }
        let last = self.depth();
        if let Some(l) = self.eligible_layers.iter().find(|&&l| l == 0 || l >= last) {
            return Err(Error::Config(format!(
                "eligible layer {l} outside 1..={} (the last layer cannot be augmented)",
                last - 1
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layer_widths.len()
    }

    /// Output width of layer `l`; layer 0 is the input.
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layer_widths[l - 1]
        }
    }

    pub fn output_dim(&self) -> usize {
        self.width(self.depth())
    }

    /// `(layer, width)` for each eligible layer.
    pub fn eligible_widths(&self) -> Vec<(usize, usize)> {
        self.eligible_layers.iter().map(|&l| (l, self.width(l))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    MatchingCosine,
    Prototypical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub init_tau: f64,
}

impl HeadConfig {
    pub fn matching_cosine() -> Self {
        HeadConfig {
            kind: HeadKind::MatchingCosine,
            init_tau: 10.0,
        }
    }

    pub fn prototypical() -> Self {
        HeadConfig {
            kind: HeadKind::Prototypical,
            init_tau: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.head.init_tau > 0.0 && self.head.init_tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.head.init_tau)));
        }
        Ok(())
    }
}

/// He-initialized encoder weights, zero biases and the head temperature.
pub fn init_params(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    config.validate()?;
    let enc = &config.encoder;
    let mut p = ParamSet::new();
    for l in 1..=enc.depth() {
        let (fan_in, fan_out) = (enc.width(l - 1), enc.width(l));
        let sd = (2.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        p.insert(weight_path(l), Tensor::new(vec![fan_in, fan_out], w)?)?;
        p.insert(bias_path(l), Tensor::zeros(&[fan_out]))?;
    }
    p.insert(LOG_TAU_PATH, Tensor::vector(vec![config.head.init_tau.ln()]))?;
    Ok(p)
}

fn run_layers(tape: &mut Tape, params: &ParamSet, x: Var, layers: std::ops::RangeInclusive<usize>) -> Result<Var> {
    let mut h = x;
    for l in layers {
        let w = tape.param(params, &weight_path(l))?;
        let b = tape.param(params, &bias_path(l))?;
        let z = tape.affine(h, w, b)?;
        h = tape.relu(z)?;
    }
    Ok(h)
}

/// Layers `1..=l` applied to `x: [B, D]`.
pub fn encode_to_layer(tape: &mut Tape, params: &ParamSet, enc: &EncoderConfig, x: Var, l: usize) -> Result<Var> {
    if l == 0 || l > enc.depth() {
        return Err(Error::Index(format!("layer {l} outside 1..={}", enc.depth())));
    }
    run_layers(tape, params, x, 1..=l)
}

/// Layers `l+1..=L` applied to layer-`l` features; `l = 0` runs the whole
/// encoder and `l = L` is the identity.
pub fn encode_from_layer(tape: &mut Tape, params: &ParamSet, enc: &EncoderConfig, h: Var, l: usize) -> Result<Var> {
    if l > enc.depth() {
        return Err(Error::Index(format!("layer {l} outside 0..={}", enc.depth())));
    }
    let width = tape.value(h).dims2()?.1;
    if width != enc.width(l) {
        return Err(Error::Dimension {
            op: "encode_from_layer",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![enc.width(l)],
        });
    }
    run_layers(tape, params, h, l + 1..=enc.depth())
}

/// `[S, N]` matrix averaging support rows per class.
fn class_average(support_y: &[usize], n_way: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n_way];
    for &y in support_y {
        if y >= n_way {
            return Err(Error::Index(format!("support label {y} out of range for {n_way} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Contract(format!("class {c} has no support shots")));
    }
    let mut a = vec![0.0; support_y.len() * n_way];
    for (s, &y) in support_y.iter().enumerate() {
        a[s * n_way + y] = 1.0 / counts[y] as f64;
    }
    Tensor::new(vec![support_y.len(), n_way], a)
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Query-by-class logits `[Q, N]`.
pub fn head_logits(
    tape: &mut Tape,
    params: &ParamSet,
    kind: HeadKind,
    support: Var,
    support_y: &[usize],
    query: Var,
    n_way: usize,
) -> Result<Var> {
    let avg = class_average(support_y, n_way)?;
    let log_tau = tape.param(params, LOG_TAU_PATH)?;
    let tau = tape.exp(log_tau)?;
    match kind {
        HeadKind::MatchingCosine => {
            let qn = tape.normalize_rows(query, COSINE_EPS)?;
            let sn = tape.normalize_rows(support, COSINE_EPS)?;
            let cos = tape.matmul_bt(qn, sn)?;
            let avg = tape.constant(avg);
            let per_class = tape.matmul(cos, avg)?;
            tape.mul_by_scalar(per_class, tau)
        }
        HeadKind::Prototypical => {
            let avg_t = tape.constant(transpose(&avg)?);
            let centroids = tape.matmul(avg_t, support)?;
            let d = tape.sq_dist(query, centroids)?;
            let neg = tape.scale(d, -1.0)?;
            tape.mul_by_scalar(neg, tau)
        }
    }
}

/// Rows of one task at some layer, in the layout's class-major order with
/// support rows first.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInput {
    pub x: Var,
    pub layout: TaskLayout,
    /// 0 for raw inputs.
    pub layer: usize,
}

fn final_features(tape: &mut Tape, params: &ParamSet, model: &ModelConfig, input: &EpisodeInput) -> Result<Var> {
    let rows = tape.value(input.x).dims2()?.0;
    if rows != input.layout.rows() {
        return Err(Error::Contract(format!(
            "{rows} rows for a task laid out as {:?}",
            input.layout
        )));
    }
    encode_from_layer(tape, params, &model.encoder, input.x, input.layer)
}

fn logits_of(tape: &mut Tape, params: &ParamSet, model: &ModelConfig, input: &EpisodeInput) -> Result<Var> {
    let f = final_features(tape, params, model, input)?;
    let layout = input.layout;
    let s = tape.slice_rows(f, 0, layout.support_rows())?;
    let q = tape.slice_rows(f, layout.support_rows(), layout.query_rows())?;
    head_logits(tape, params, model.head.kind, s, &layout.support_labels(), q, layout.n_way)
}

/// Cross-entropy of the head over the query rows.
pub fn episode_loss(tape: &mut Tape, params: &ParamSet, model: &ModelConfig, input: &EpisodeInput) -> Result<Var> {
    let logits = logits_of(tape, params, model, input)?;
    tape.cross_entropy(logits, &input.layout.query_labels())
}

/// Records a raw task on the tape.
pub fn raw_input(tape: &mut Tape, task: &EpisodeTask) -> EpisodeInput {
    EpisodeInput {
        x: tape.constant(task.all_rows()),
        layout: task.layout(),
        layer: 0,
    }
}

pub fn task_loss(tape: &mut Tape, params: &ParamSet, model: &ModelConfig, task: &EpisodeTask) -> Result<Var> {
    let input = raw_input(tape, task);
    episode_loss(tape, params, model, &input)
}

/// Argmax class per query row; ties go to the lowest class.
pub fn predict(params: &ParamSet, model: &ModelConfig, task: &EpisodeTask) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let input = raw_input(&mut tape, task);
    let logits = logits_of(&mut tape, params, model, &input)?;
    let n = task.n_way;
    Ok(tape
        .value(logits)
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for c in 1..n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Final-layer features of `x`.
pub fn embed(params: &ParamSet, enc: &EncoderConfig, x: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let f = encode_from_layer(&mut tape, params, enc, x, 0)?;
    Ok(tape.value(f).clone())
}
