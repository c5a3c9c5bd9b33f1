//! Class balancing, sampling, the optimizer and the two-phase schedule.

mod adam;
mod sampling;
mod weights;

use std::fmt::{self, Write as _};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, clip_global_norm, AdamConfig, OptimizerState};
pub use sampling::{sample_phase1, sample_phase2, tumor_sequences};
pub use weights::{compute_class_weights, ClassWeights, FrequencyCounter};

use crate::config::{parse_entries, parse_value, Entry};
use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::network::{forward, ModelParams};
use crate::ops::{softmax_ce_backward, softmax_ce_loss, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 3,
            lr_phase1: 1e-4,
            lr_phase2: 1e-6,
            phase1_steps: 300,
            phase2_steps: 100,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: [&str; 9] = [
    "batch_size",
    "lr_phase1",
    "lr_phase2",
    "phase1_steps",
    "phase2_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "clip_norm",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0 && self.lr_phase2 < self.lr_phase1) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_phase2 < lr_phase1, got {} and {}",
                self.lr_phase2, self.lr_phase1
            ));
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
            return bad(format!(
                "invalid Adam constants ({beta1}, {beta2}, {epsilon})"
            ));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad(format!(
                "clip_norm must be finite and nonnegative, got {}",
                self.clip_norm
            ));
        }
        Ok(())
    }

    /// Applies one assignment. Returns `false` for keys this type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, FormatError> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_phase1" => self.lr_phase1 = parse_value(key, value)?,
            "lr_phase2" => self.lr_phase2 = parse_value(key, value)?,
            "phase1_steps" => self.phase1_steps = parse_value(key, value)?,
            "phase2_steps" => self.phase2_steps = parse_value(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam.epsilon = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines in [`TRAIN_KEYS`] order. The seed is owned by the
    /// model configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_phase1 = {:e}", self.lr_phase1);
        let _ = writeln!(s, "lr_phase2 = {:e}", self.lr_phase2);
        let _ = writeln!(s, "phase1_steps = {}", self.phase1_steps);
        let _ = writeln!(s, "phase2_steps = {}", self.phase2_steps);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "adam_epsilon = {:e}", self.adam.epsilon);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, FormatError> {
        let mut cfg = Self::default();
        for Entry { line, key, value } in parse_entries(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(FormatError::Config(format!(
                    "line {line}: unknown key `{key}`"
                )));
            }
        }
        cfg.validate()
            .map_err(|e| FormatError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }
}

/// One training step: `phase=<1|2> step=<n> loss=<float> lr=<float>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub phase: u8,
    /// Global step id, starting at 1 and continuing across phases.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} step={} loss={} lr={:e}",
            self.phase, self.step, self.loss, self.lr
        )
    }
}

impl std::str::FromStr for LogRecord {
    type Err = FormatError;

    fn from_str(s: &str) -> std::result::Result<Self, FormatError> {
        let mut fields = [None; 4];
        for part in s.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| FormatError::Config(format!("bad log field `{part}`")))?;
            let slot = ["phase", "step", "loss", "lr"]
                .iter()
                .position(|&n| n == k)
                .ok_or_else(|| FormatError::Config(format!("unknown log field `{k}`")))?;
            fields[slot] = Some(v);
        }
        let get = |i: usize, k: &str| {
            fields[i].ok_or_else(|| FormatError::Config(format!("missing log field `{k}`")))
        };
        Ok(Self {
            phase: parse_value("phase", get(0, "phase")?)?,
            step: parse_value("step", get(1, "step")?)?,
            loss: parse_value("loss", get(2, "loss")?)?,
            lr: parse_value("lr", get(3, "lr")?)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<LogRecord>,
    /// Weights used in phase 1; `None` when phase 1 is empty.
    pub class_weights: Option<ClassWeights>,
}

struct Batch {
    phase: u8,
    step: usize,
    images: Tensor<f32>,
    labels: Vec<u8>,
}

/// Phase 1 draws tumor-bearing sequences with median-frequency weights at
/// `lr_phase1`; phase 2 draws any sequence with unit weights at
/// `lr_phase2`. Batches are assembled on a helper thread one step ahead.
pub fn run_two_phase<F: FnMut(&LogRecord)>(
    config: &TrainConfig,
    params: &mut ModelParams<f32>,
    dataset: &Dataset,
    mut log: F,
) -> Result<TrainSummary> {
    config.validate()?;
    let k = params.config.class_count;
    let class_weights = if config.phase1_steps > 0 {
        Some(compute_class_weights(&dataset.labels, k)?)
    } else {
        None
    };
    let phase1_weights = class_weights
        .as_ref()
        .map(|w| Tensor::new(&[k], w.alpha.iter().map(|&a| a as f32).collect()))
        .transpose()?;
    let unit = Tensor::<f32>::ones(&[k]);

    let tumor = tumor_sequences(&dataset.sequences);
    let all: Vec<usize> = (0..dataset.sequences.len()).collect();
    let names: Vec<String> = params.learnable().into_iter().map(|(n, _)| n).collect();
    let mut state = OptimizerState::new(
        &params
            .learnable()
            .into_iter()
            .map(|(_, t)| t)
            .collect::<Vec<_>>(),
    );
    let mut records = Vec::with_capacity(config.total_steps());

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(1);
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            for i in 0..config.total_steps() {
                let (phase, pool, why) = if i < config.phase1_steps {
                    (1, &tumor, "no sequence contains tumor")
                } else {
                    (2, &all, "dataset has no sequences")
                };
                let batch =
                    sampling::draw(pool, config.batch_size, &mut rng, why).and_then(|idx| {
                        let (images, labels) = dataset.batch(&idx)?;
                        Ok(Batch {
                            phase,
                            step: i + 1,
                            images,
                            labels,
                        })
                    });
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    return;
                }
            }
        });

        for _ in 0..config.total_steps() {
            let b = rx
                .recv()
                .map_err(|_| Error::InvalidArgument("batch producer stopped".into()))??;
            let (weights, lr) = match b.phase {
                1 => (
                    phase1_weights.as_ref().expect("phase 1 weights"),
                    config.lr_phase1,
                ),
                _ => (&unit, config.lr_phase2),
            };
            let diverged = |loss: f64| Error::Diverged {
                phase: b.phase,
                step: b.step,
                loss,
            };
            let f = match forward(params, &b.images, Mode::Train) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let ce = match softmax_ce_loss(&f.logits, &b.labels, weights) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let loss = ce.loss as f64;
            let grad_logits = softmax_ce_backward(&ce.probs, &b.labels, weights, 1.0)?;
            let mut grads = f.backward(params, &grad_logits)?;
            f.update_running_stats(params);
            {
                let mut g: Vec<&mut Tensor<f32>> =
                    grads.learnable_mut().into_iter().map(|(_, t)| t).collect();
                clip_global_norm(&mut g, config.clip_norm);
            }
            let grads: Vec<(String, &Tensor<f32>)> = grads.learnable();
            let mut p = params.learnable_mut();
            debug_assert!(p.iter().zip(&names).all(|((a, _), b)| a == b));
            adam_update(&mut p, &grads, &mut state, lr, &config.adam)?;
            let rec = LogRecord {
                phase: b.phase,
                step: b.step,
                loss,
                lr,
            };
            log(&rec);
            records.push(rec);
        }
        Ok(())
    })?;

    Ok(TrainSummary {
        records,
        class_weights,
    })
}

/// Unit-weighted cross-entropy over every sequence of `dataset`, eval mode.
pub fn dataset_loss(params: &ModelParams<f32>, dataset: &Dataset) -> Result<f64> {
    let unit = Tensor::<f32>::ones(&[params.config.class_count]);
    let mut total = 0.0;
    for i in 0..dataset.sequences.len() {
        let (images, labels) = dataset.batch(&[i])?;
        let f = forward(params, &images, Mode::Eval)?;
        total += softmax_ce_loss(&f.logits, &labels, &unit)?.loss as f64;
    }
    if dataset.sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(total / dataset.sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gen_synthetic_case;
    use crate::network::{init_params, ModelConfig};

    fn tiny_model() -> ModelParams<f32> {
        init_params(&ModelConfig {
            encoder_channels: vec![2, 3, 4, 4],
            input_height: 16,
            input_width: 16,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_dataset() -> Dataset {
        let cases = (0..2)
            .map(|s| gen_synthetic_case(s, (16, 16, 16)).unwrap())
            .collect();
        Dataset::new(cases, 3, 3).unwrap()
    }

    fn short(p1: usize, p2: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            phase1_steps: p1,
            phase2_steps: p2,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let c = short(4, 2);
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, TrainConfig { seed: 0, ..c });
        let swapped = TrainConfig {
            lr_phase1: 1e-6,
            lr_phase2: 1e-4,
            ..TrainConfig::default()
        };
        assert!(swapped.validate().is_err());
        assert!(TrainConfig::from_text("momentum = 0.9").is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn log_record_round_trip() {
        let r = LogRecord {
            phase: 2,
            step: 17,
            loss: 0.123456789,
            lr: 1e-6,
        };
        let line = r.to_string();
        assert_eq!(line, "phase=2 step=17 loss=0.123456789 lr=1e-6");
        assert_eq!(line.parse::<LogRecord>().unwrap(), r);
        assert!("phase=1 step=2".parse::<LogRecord>().is_err());
    }

    #[test]
    fn log_counts_and_phases() {
        let ds = tiny_dataset();
        let mut p = tiny_model();
        let mut seen = Vec::new();
        let s = run_two_phase(&short(3, 2), &mut p, &ds, |r| seen.push(*r)).unwrap();
        assert_eq!(seen, s.records);
        assert_eq!(
            s.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        assert_eq!(
            s.records.iter().map(|r| r.phase).collect::<Vec<_>>(),
            vec![1, 1, 1, 2, 2]
        );
        assert!(s.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(s.records[0].lr, 1e-3);
        assert_eq!(s.records[4].lr, 1e-4);
    }

    #[test]
    fn phase2_only_uses_unit_weights() {
        let ds = tiny_dataset();
        let mut p = tiny_model();
        let s = run_two_phase(&short(0, 2), &mut p, &ds, |_| {}).unwrap();
        assert!(s.class_weights.is_none());
        assert!(s.records.iter().all(|r| r.phase == 2));
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let ds = tiny_dataset();
        let run = || {
            let mut p = tiny_model();
            let s = run_two_phase(&short(2, 2), &mut p, &ds, |_| {}).unwrap();
            (p, s.records)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
        assert_ne!(pa, tiny_model());
    }

    #[test]
    fn phase1_without_tumor_fails() {
        let (v, l) = gen_synthetic_case(0, (16, 16, 16)).unwrap();
        let empty = crate::volume::LabelVolume::new(l.dims(), vec![0; l.data().len()]).unwrap();
        let ds = Dataset::new(vec![(v, empty)], 3, 3).unwrap();
        let mut p = tiny_model();
        let err = run_two_phase(&short(2, 0), &mut p, &ds, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NoQualifyingSequence(_)), "{err}");
    }

    #[test]
    fn non_finite_input_reports_divergence() {
        let mut ds = tiny_dataset();
        for s in &mut ds.sequences {
            s.images[0] = f32::INFINITY;
        }
        let mut p = tiny_model();
        let err = run_two_phase(&short(2, 1), &mut p, &ds, |_| {}).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Diverged {
                    phase: 1,
                    step: 1,
                    ..
                }
            ),
            "{err}"
        );
    }
}
