use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::ToyDataset;
use super::pool;
use crate::autodiff::{sgd_step, Adam};
use crate::error::{Error, Result};
use crate::network::{save_checkpoint, Model, ModelSpec};
use crate::tensor::{Real, Tensor, GROUP_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    /// Shuffling seed; weights come from the spec's own seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 3e-3,
            batch: 8,
            weight_decay: 0.0,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    pub log: Vec<EpochLog>,
}

fn check_dims(spec: &ModelSpec, data: &ToyDataset) -> Result<()> {
    let [h, w, c] = data.image_dims();
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "dataset has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if data.num_classes > spec.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, spec only {}",
            data.num_classes, spec.num_classes
        )));
    }
    let d = spec.input_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::PadRequired {
            height: h,
            width: w,
            divisor: d,
        });
    }
    Ok(())
}

fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Minibatch training in f64. Per-sample gradients run in parallel and
/// are summed in sample order, so results do not depend on the thread
/// count.
pub fn train_toy(spec: &ModelSpec, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dims(spec, data)?;
    if cfg.batch == 0 {
        return Err(Error::shape("batch size must be positive"));
    }
    let mut model = Model::<f64>::build(spec)?;
    let mut adam = Adam::new(cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let m = &model;
            let results = pool::map(chunk.len(), |k| {
                let i = chunk[k];
                m.sample_grad(&data.image(i)?, data.labels[i])
            });
            let mut total: Option<Vec<Tensor<f64>>> = None;
            for (k, r) in results.into_iter().enumerate() {
                // Overflowing weights surface as non-finite kernel inputs.
                let s = r.map_err(|e| match e {
                    Error::NonFinite(_) | Error::Domain(_) => Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
                if !s.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        loss: s.loss,
                    });
                }
                loss_sum += s.loss;
                if argmax(s.logits.data()) == data.labels[chunk[k]] {
                    correct += 1;
                }
                match &mut total {
                    None => total = Some(s.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&s.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = total.unwrap_or_default();
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let params = model.params_mut().tensors_mut();
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(params, &grads, cfg.lr, cfg.weight_decay)?,
                Optimizer::Adam => adam.step(params, &grads)?,
            }
        }
        let n = data.len().max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: entry.loss,
            });
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// [`train_toy`], then write the checkpoint to `dir/checkpoint` and the
/// epoch log to `dir/metrics.csv`.
pub fn train_toy_to(
    spec: &ModelSpec,
    data: &ToyDataset,
    cfg: &TrainConfig,
    dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let dir = dir.as_ref();
    let out = train_toy(spec, data, cfg)?;
    save_checkpoint(&out.model, dir.join("checkpoint"))?;
    let mut csv = String::from("epoch,loss,accuracy\n");
    for e in &out.log {
        let _ = writeln!(csv, "{},{},{}", e.epoch, e.loss, e.accuracy);
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::from(e).at(&path))?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Accuracy by quarter-turn orientation, over the orientations present.
    pub per_orientation: Vec<Option<f64>>,
    /// Smallest gap between the top two logits.
    pub min_margin: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &ToyDataset) -> Result<Evaluation> {
    let rows = pool::map(data.len(), |i| -> Result<(usize, f64)> {
        let z = model.logits(&data.image(i)?.cast())?;
        let z: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
        let best = argmax(&z);
        let second = z
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != best)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((best, z[best] - second))
    });
    let mut predictions = Vec::with_capacity(data.len());
    let mut min_margin = f64::INFINITY;
    let mut hits = [0usize; GROUP_ORDER];
    let mut seen = [0usize; GROUP_ORDER];
    for (i, r) in rows.into_iter().enumerate() {
        let (p, m) = r.map_err(|e| Error::Evaluation(format!("sample {i}: {e}")))?;
        predictions.push(p);
        min_margin = min_margin.min(m);
        let o = data.orientations[i] % GROUP_ORDER;
        seen[o] += 1;
        if p == data.labels[i] {
            hits[o] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        samples: data.len(),
        correct,
        accuracy: correct as f64 / data.len().max(1) as f64,
        per_orientation: (0..GROUP_ORDER)
            .map(|o| (seen[o] > 0).then(|| hits[o] as f64 / seen[o] as f64))
            .collect(),
        min_margin,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synth_shapes;
    use crate::network::Stage;

    fn spec() -> ModelSpec {
        ModelSpec {
            stages: vec![
                Stage {
                    depth: 1,
                    channels: 2,
                },
                Stage {
                    depth: 1,
                    channels: 4,
                },
            ],
            in_channels: 1,
            hidden_state: 2,
            ..ModelSpec::micro()
        }
    }

    #[test]
    fn zero_rate_keeps_initial_params() {
        let data = synth_shapes(0, 6, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            batch: 3,
            ..TrainConfig::default()
        };
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let out = train_toy(&spec(), &data, &TrainConfig { optimizer: opt, ..cfg }).unwrap();
            let init = Model::<f64>::build(&spec()).unwrap();
            assert!(out.model.params().bit_eq(init.params()));
            assert_eq!(out.log.len(), 2);
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let data = synth_shapes(1, 6, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 4,
            ..TrainConfig::default()
        };
        let a = train_toy(&spec(), &data, &cfg).unwrap();
        let b = train_toy(&spec(), &data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.model.params().bit_eq(b.model.params()));
    }

    #[test]
    fn divergence_names_epoch() {
        let data = synth_shapes(1, 4, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e200,
            batch: 4,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        match train_toy(&spec(), &data, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch <= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
