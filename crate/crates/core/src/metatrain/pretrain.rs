use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Optimizer, OptimizerKind, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::worldgen::Benchmark;

const CLASSIFIER_WEIGHT: &str = "pretrain.classifier.weight";
const CLASSIFIER_BIAS: &str = "pretrain.classifier.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Full-batch passes over the pooled source sample; 0 disables
    /// pretraining.
    pub epochs: usize,
    pub samples_per_class: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 0,
            samples_per_class: 20,
            lr: 1e-3,
        }
    }
}

/// Supervised training of the encoder on all source classes at once through
/// a linear classifier that is thrown away afterwards. Returns the loss
/// before each epoch's update.
pub fn pretrain(
    params: &mut ParamSet,
    model: &ModelConfig,
    bench: &Benchmark,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if config.samples_per_class == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("pretraining needs samples_per_class >= 1 and lr > 0".into()));
    }
    let mut rng = stream(seed, Purpose::Pretrain, 0);
    let (x, labels) = bench.pooled_source_batch(config.samples_per_class, &mut rng)?;
    let width = model.encoder.output_dim();
    let classes = bench.n_source_classes();
    let init = Normal::new(0.0, (1.0 / width as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let w = (0..width * classes).map(|_| init.sample(&mut rng)).collect();

    let mut work = params.clone();
    work.insert(CLASSIFIER_WEIGHT, Tensor::new(vec![width, classes], w)?)?;
    work.insert(CLASSIFIER_BIAS, Tensor::zeros(&[classes]))?;
    let scope: Vec<String> = work
        .paths_with_prefix("encoder.")
        .chain(work.paths_with_prefix("pretrain."))
        .cloned()
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::adam(config.lr));
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        work.zero_grad();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = model::encode_from_layer(&mut tape, &work, &model.encoder, xv, 0)?;
        let cw = tape.param(&work, CLASSIFIER_WEIGHT)?;
        let cb = tape.param(&work, CLASSIFIER_BIAS)?;
        let logits = tape.affine(f, cw, cb)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        losses.push(tape.value(loss).item()?);
        tape.backward(loss, &mut work)?;
        opt.step(&mut work, &scope)?;
    }
    for (path, t) in params.iter_mut() {
        let trained = work.get(path)?;
        t.data_mut().copy_from_slice(trained.data());
    }
    Ok(losses)
}
