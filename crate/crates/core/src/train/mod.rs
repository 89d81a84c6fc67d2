//! Optimization stack and the synthetic training loop.

mod adamax;
mod runfile;
mod schedule;
mod synthetic;

pub use adamax::{adamax_step, AdamaxState};
pub use runfile::RunFile;
pub use schedule::Schedule;
pub use synthetic::{
    gen_synthetic, QueryKind, SyntheticConfig, SyntheticSample, SyntheticTask, COLORS, COUNT_LIST,
    COUNT_WORDS, SHAPES,
};

use crate::error::{Error, Result};
use crate::model::{
    argmax, attention_entropy, forward, BanStackConfig, CounterPlugin, Mode, ModelParams,
};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weight-normalized parameter: direction rows and one gain per output unit.
/// The effective weight is gain[i] * dir[i] / ||dir[i]||.
#[derive(Clone, Debug)]
pub struct WnParam {
    pub dir: Tensor,
    pub gain: Tensor,
}

impl WnParam {
    /// Kaiming-style uniform draw over fan-in; gains start at the direction
    /// row norms so the effective weight equals the draw.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let b = (6.0 / in_dim as f64).sqrt();
        let dir = Tensor::uniform(&[out_dim, in_dim], -b, b, rng);
        let gain = Tensor::vector(
            (0..out_dim)
                .map(|i| {
                    dir.data()[i * in_dim..(i + 1) * in_dim]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        );
        WnParam { dir, gain }
    }

    pub fn apply(&self, tape: &mut Tape) -> Result<Tensor> {
        weight_norm_apply(tape, self)
    }
}

/// Materialize the effective weight of a weight-normalized parameter.
/// Gradients flow to both the direction and the gain.
pub fn weight_norm_apply(tape: &mut Tape, param: &WnParam) -> Result<Tensor> {
    tape.weight_norm(&param.dir, &param.gain)
}

/// Inverted dropout: zero each element with probability `p` during training
/// and scale survivors by 1/(1-p); evaluation is the identity.
pub fn dropout(
    tape: &mut Tape,
    t: &Tensor,
    p: f64,
    rng: &mut dyn RngCore,
    training: bool,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument {
            op: "dropout",
            message: format!("rate must lie in [0, 1), got {p}"),
        });
    }
    if !training || p == 0.0 {
        return Ok(t.clone());
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask = Tensor::from_vec(
        t.shape().to_vec(),
        (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect(),
    )?;
    tape.hadamard(t, &mask)
}

/// Mean binary cross entropy against multi-label targets in [0, 1],
/// computed in the numerically stable logit form.
pub fn bce_loss(tape: &mut Tape, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::InvalidArgument {
            op: "bce_loss",
            message: "targets must lie in [0, 1]".into(),
        });
    }
    tape.bce_with_logits(logits, targets)
}

/// Clip the global 2-norm of a gradient set to `max_norm`, scaling every
/// tensor by max_norm/norm when the norm exceeds it. Returns the pre-clip
/// norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * max_norm / norm;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub clip_norm: f64,
    /// Fixed learning rate instead of the schedule.
    pub lr_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::default(),
            clip_norm: 0.25,
            lr_override: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Mean attention entropy per glimpse over the validation split.
    pub entropies: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub loss: f64,
    pub entropies: Vec<f64>,
}

pub struct TrainReport {
    /// Row 0 is the pre-training evaluation; rows 1..=epochs follow.
    pub metrics: Vec<EpochMetrics>,
    pub final_val_accuracy: f64,
    /// Validation accuracy using only the first n glimpses, for n = 1..=G,
    /// on residual bilinear models.
    pub ablation: Option<Vec<f64>>,
    pub params: ModelParams,
    pub model_config: BanStackConfig,
}

fn one_hot(label: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; n];
    data[label] = 1.0;
    Tensor::vector(data)
}

/// Evaluate accuracy, loss, and per-glimpse attention entropy without
/// dropout, one inference tape per sample.
pub fn evaluate(
    params: &ModelParams,
    config: &BanStackConfig,
    samples: &[SyntheticSample],
    plugin: Option<&dyn CounterPlugin>,
) -> Result<EvalOutcome> {
    let mut correct = 0usize;
    let mut loss_total = 0.0;
    let mut entropies = vec![0.0; config.glimpses];
    for sample in samples {
        let mut tape = Tape::inference();
        let out = forward(
            &mut tape,
            params,
            config,
            &sample.input(),
            plugin,
            &mut Mode::Eval,
            None,
        )?;
        if argmax(out.logits.data()) == sample.label {
            correct += 1;
        }
        let target = one_hot(sample.label, config.answers);
        loss_total += bce_loss(&mut tape, &out.logits, &target)?.item()?;
        for (g, map) in out.maps.iter().enumerate() {
            entropies[g] += attention_entropy(map);
        }
    }
    let n = samples.len() as f64;
    for e in &mut entropies {
        *e /= n;
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / n,
        loss: loss_total / n,
        entropies,
    })
}

/// Shuffled mini-batch training: dropout active, gradients clipped then fed
/// to Adamax with the scheduled rate. Deterministic given (seed, config).
pub fn train_loop(
    model_config: &BanStackConfig,
    task: &SyntheticTask,
    train_config: &TrainConfig,
    plugin: Option<&dyn CounterPlugin>,
) -> Result<TrainReport> {
    let mut config = model_config.clone();
    config.vocab = task.vocab.len();
    config.answers = task.answers.len();
    config.validate()?;
    if config.counter && plugin.is_none() {
        return Err(Error::Config("counter hook enabled but no plugin supplied".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = ModelParams::init(&config, &mut rng)?;
    let mut state = AdamaxState::new(params.entries().iter().map(|(_, t)| *t));

    let mut metrics = Vec::with_capacity(train_config.epochs + 1);
    let initial = evaluate(&params, &config, &task.validation, plugin)?;
    metrics.push(EpochMetrics {
        epoch: 0,
        train_accuracy: f64::NAN,
        train_loss: f64::NAN,
        val_accuracy: initial.accuracy,
        val_loss: initial.loss,
        entropies: initial.entropies,
    });

    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 1..=train_config.epochs {
        let lr = train_config
            .lr_override
            .unwrap_or_else(|| train_config.schedule.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut train_correct = 0usize;
        let mut train_loss = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let mut tape = Tape::new();
            let tracked = params.track(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &task.train[idx];
                let out = forward(
                    &mut tape,
                    &tracked,
                    &config,
                    &sample.input(),
                    plugin,
                    &mut Mode::Train { rng: &mut rng },
                    None,
                )?;
                if argmax(out.logits.data()) == sample.label {
                    train_correct += 1;
                }
                let target = one_hot(sample.label, config.answers);
                losses.push(bce_loss(&mut tape, &out.logits, &target)?);
            }
            let mut total = losses[0].clone();
            for l in &losses[1..] {
                total = tape.add(&total, l)?;
            }
            let batch_loss = tape.scale(&total, 1.0 / batch.len() as f64);
            let loss_value = batch_loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::InvalidArgument {
                    op: "train_loop",
                    message: format!(
                        "diverged: non-finite loss at epoch {epoch} (lr {lr}); \
                         try a lower rate or more noise"
                    ),
                });
            }
            train_loss += loss_value * batch.len() as f64;

            let grads = tape.backward(&batch_loss)?;
            let mut grad_tensors: Vec<Tensor> = tracked
                .entries()
                .iter()
                .map(|(_, t)| grads.of(t))
                .collect::<Result<_>>()?;
            clip_gradients(&mut grad_tensors, train_config.clip_norm);
            let mut slots = params.entries_mut();
            adamax_step(&mut slots, &grad_tensors, &mut state, lr)?;
        }

        let val = evaluate(&params, &config, &task.validation, plugin)?;
        metrics.push(EpochMetrics {
            epoch,
            train_accuracy: train_correct as f64 / task.train.len() as f64,
            train_loss: train_loss / task.train.len() as f64,
            val_accuracy: val.accuracy,
            val_loss: val.loss,
            entropies: val.entropies,
        });
    }

    let final_val_accuracy = metrics.last().map(|m| m.val_accuracy).unwrap_or(0.0);
    let ablation = if config.kind == crate::model::AttentionKind::Bilinear
        && config.integration == crate::model::Integration::Residual
    {
        Some(
            (1..=config.glimpses)
                .map(|n| crate::model::ablate_eval(&params, &config, &task.validation, n))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };

    Ok(TrainReport {
        metrics,
        final_val_accuracy,
        ablation,
        params,
        model_config: config,
    })
}
