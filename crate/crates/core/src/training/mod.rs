//! Gradient computation, optimisation and persistence.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod tape;

use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};
use serde::Serialize;

use crate::dataset::{make_training_pairs, CorruptionConfig, Signal, TrainingPair};
use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig, Objective};
use crate::model::Model;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tape::{GradientTape, Gradients, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub early_stop: bool,
    pub gaussian_std: f64,
    pub segment_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let corruption = CorruptionConfig::default();
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            objective: Objective::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            early_stop: true,
            gaussian_std: corruption.gaussian_std,
            segment_len: corruption.segment_len,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be >= 1".into()));
        }
        self.loss.validate()?;
        self.adam.validate()?;
        self.corruption().validate()
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            gaussian_std: self.gaussian_std,
            segment_len: self.segment_len,
            train_hop: self.segment_len,
            seed: self.seed,
        }
    }
}

/// Handles of the trainable leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub kernels: Var,
    pub dilated_kernels: Var,
    pub frequencies: Var,
    pub phases: Var,
    pub modulators: Var,
}

impl ParamVars {
    pub fn record(tape: &mut GradientTape, model: &Model) -> Self {
        ParamVars {
            kernels: tape.leaf(model.encoder.kernels.clone().into_dyn(), true),
            dilated_kernels: tape.leaf(model.encoder.dilated_kernels.clone().into_dyn(), true),
            frequencies: tape.leaf(model.decoder.frequencies.clone().into_dyn(), true),
            phases: tape.leaf(model.decoder.phases.clone().into_dyn(), true),
            modulators: tape.leaf(model.decoder.modulators.clone().into_dyn(), true),
        }
    }
}

/// Gradients for every trainable tensor of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub kernels: Array2<f64>,
    pub dilated_kernels: Array3<f64>,
    pub frequencies: Array1<f64>,
    pub phases: Array1<f64>,
    pub modulators: Array2<f64>,
}

impl ModelGradients {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGradients {
            kernels: Array2::zeros(model.encoder.kernels.raw_dim()),
            dilated_kernels: Array3::zeros(model.encoder.dilated_kernels.raw_dim()),
            frequencies: Array1::zeros(model.decoder.frequencies.raw_dim()),
            phases: Array1::zeros(model.decoder.phases.raw_dim()),
            modulators: Array2::zeros(model.decoder.modulators.raw_dim()),
        }
    }

    fn from_tape(grads: &mut Gradients, vars: &ParamVars, model: &Model) -> Self {
        let mut take = |v: Var, shape: &[usize]| grads.take_or_zeros(v, shape);
        ModelGradients {
            kernels: take(vars.kernels, model.encoder.kernels.shape())
                .into_dimensionality::<Ix2>()
                .expect("kernel gradient shape"),
            dilated_kernels: take(vars.dilated_kernels, model.encoder.dilated_kernels.shape())
                .into_dimensionality::<Ix3>()
                .expect("dilated kernel gradient shape"),
            frequencies: take(vars.frequencies, model.decoder.frequencies.shape())
                .into_dimensionality::<Ix1>()
                .expect("frequency gradient shape"),
            phases: take(vars.phases, model.decoder.phases.shape())
                .into_dimensionality::<Ix1>()
                .expect("phase gradient shape"),
            modulators: take(vars.modulators, model.decoder.modulators.shape())
                .into_dimensionality::<Ix2>()
                .expect("modulator gradient shape"),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        self.kernels += &other.kernels;
        self.dilated_kernels += &other.dilated_kernels;
        self.frequencies += &other.frequencies;
        self.phases += &other.phases;
        self.modulators += &other.modulators;
    }

    pub fn scale(&mut self, k: f64) {
        self.kernels *= k;
        self.dilated_kernels *= k;
        self.frequencies *= k;
        self.phases *= k;
        self.modulators *= k;
    }

    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.kernels.as_slice().expect("standard layout"),
            self.dilated_kernels.as_slice().expect("standard layout"),
            self.frequencies.as_slice().expect("standard layout"),
            self.phases.as_slice().expect("standard layout"),
            self.modulators.as_slice().expect("standard layout"),
        ]
    }
}

fn parameter_slices(model: &mut Model) -> [&mut [f64]; 5] {
    [
        model.encoder.kernels.as_slice_mut().expect("standard layout"),
        model.encoder.dilated_kernels.as_slice_mut().expect("standard layout"),
        model.decoder.frequencies.as_slice_mut().expect("standard layout"),
        model.decoder.phases.as_slice_mut().expect("standard layout"),
        model.decoder.modulators.as_slice_mut().expect("standard layout"),
    ]
}

pub fn parameter_sizes(model: &Model) -> [usize; 5] {
    [
        model.encoder.kernels.len(),
        model.encoder.dilated_kernels.len(),
        model.decoder.frequencies.len(),
        model.decoder.phases.len(),
        model.decoder.modulators.len(),
    ]
}

/// Records the encoder on `tape` and returns the activation node.
pub fn record_encode(tape: &mut GradientTape, vars: &ParamVars, model: &Model, x: &[f64]) -> Var {
    let signal = tape.signal(x);
    let latent = tape.conv1(signal, vars.kernels, model.encoder.stride);
    let dilated = tape.dilated_conv(latent, vars.dilated_kernels, model.encoder.dilation);
    let pre = tape.add(dilated, latent);
    match model.activation {
        Activation::Relu => tape.relu(pre),
        Activation::Identity => pre,
    }
}

/// Nodes of one recorded training example.
#[derive(Debug, Clone)]
pub struct ItemGraph {
    pub vars: ParamVars,
    pub loss: Var,
    pub neg_snr: Var,
    pub representation: Option<Var>,
    pub decoder_kernels: Var,
    pub saturation: Option<f64>,
}

/// Records `neg-SNR(x_v, D(E(noisy))) + omega * R(E(mixture))` on `tape`.
///
/// For the Sinkhorn objective the plan is solved on the current mixture
/// representation unless `fixed_plan` is given; either way it is a constant for
/// the backward pass. With `omega = 0` the mixture branch is skipped.
pub fn record_item(
    tape: &mut GradientTape,
    model: &Model,
    pair: &TrainingPair,
    loss_cfg: &LossConfig,
    objective: Objective,
    fixed_plan: Option<&Array2<f64>>,
) -> Result<ItemGraph> {
    let vars = ParamVars::record(tape, model);
    let w = tape.modcos_kernels(
        vars.frequencies,
        vars.phases,
        vars.modulators,
        model.decoder.square_freq,
        model.decoder.stride,
    );
    let a_v = record_encode(tape, &vars, model, &pair.noisy_voice);
    let xhat = tape.synthesize(a_v, w, model.decoder.stride, pair.voice.len())?;
    let snr = tape.neg_snr(&pair.voice, xhat, loss_cfg.snr_floor_db)?;
    let mut saturation = None;
    let (loss, representation) = if loss_cfg.omega == 0.0 {
        (snr, None)
    } else {
        let a_m = record_encode(tape, &vars, model, &pair.mixture);
        let rep = match (objective, fixed_plan) {
            (Objective::TotalVariation, _) => tape.total_variation(a_m),
            (Objective::Sinkhorn, Some(plan)) => tape.sinkhorn_with_plan(a_m, plan.clone(), loss_cfg.p),
            (Objective::Sinkhorn, None) => {
                let (rep, plan) = tape.sinkhorn(a_m, loss_cfg)?;
                saturation = Some(plan.saturation);
                rep
            }
        };
        let weighted = tape.scale(rep, loss_cfg.omega);
        (tape.add(snr, weighted), Some(rep))
    };
    Ok(ItemGraph {
        vars,
        loss,
        neg_snr: snr,
        representation,
        decoder_kernels: w,
        saturation,
    })
}

/// Loss breakdown and parameter gradients of a single example.
pub fn item_gradients(
    model: &Model,
    pair: &TrainingPair,
    loss_cfg: &LossConfig,
    objective: Objective,
) -> Result<(LossBreakdown, ModelGradients)> {
    let mut tape = GradientTape::new();
    let graph = record_item(&mut tape, model, pair, loss_cfg, objective, None)?;
    let breakdown = LossBreakdown {
        neg_snr: tape.scalar_value(graph.neg_snr),
        representation: graph.representation.map_or(0.0, |r| tape.scalar_value(r)),
        total: tape.scalar_value(graph.loss),
        saturation: graph.saturation,
    };
    let mut grads = tape.backward(graph.loss)?;
    Ok((breakdown, ModelGradients::from_tape(&mut grads, &graph.vars, model)))
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[TrainingPair],
    loss_cfg: &LossConfig,
    objective: Objective,
) -> Result<(Vec<LossBreakdown>, ModelGradients)> {
    let mut total = ModelGradients::zeros_like(model);
    let mut parts = Vec::with_capacity(batch.len());
    for pair in batch {
        let (b, g) = item_gradients(model, pair, loss_cfg, objective)?;
        total.add_assign(&g);
        parts.push(b);
    }
    total.scale(1.0 / batch.len().max(1) as f64);
    Ok((parts, total))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub neg_snr: f64,
    pub representation: Option<f64>,
    pub total: f64,
    pub saturation: Option<f64>,
}

impl TrainLogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serialises")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Mean neg-SNR over the examples of each completed epoch.
    pub epoch_neg_snr: Vec<f64>,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Trains `model` in place on voice/accompaniment segments.
///
/// Each epoch draws a fresh pairing from `make_training_pairs`. When
/// `early_stop` is set, training ends after the first epoch whose mean neg-SNR
/// is not lower than the previous epoch's.
pub fn train(
    model: &mut Model,
    voice: &[Signal],
    accompaniment: &[Signal],
    cfg: &TrainConfig,
    mut log: impl FnMut(&TrainLogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.validate()?;
    let corruption = cfg.corruption();
    let mut state = AdamState::new(&parameter_sizes(model));
    let mut epoch_neg_snr = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let pairs: Vec<TrainingPair> = make_training_pairs(voice, accompaniment, &corruption, epoch as u64)?.collect();
        let mut per_voice = vec![0.0; voice.len()];
        for batch in pairs.chunks(cfg.batch_size) {
            let (parts, grads) = batch_gradients(model, batch, &cfg.loss, cfg.objective)?;
            for (pair, part) in batch.iter().zip(&parts) {
                per_voice[pair.voice_index] = part.neg_snr;
            }
            state.update(&cfg.adam, &mut parameter_slices(model), &grads.slices())?;
            let n = parts.len() as f64;
            let mean = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
            let saturation = parts
                .iter()
                .filter_map(|p| p.saturation)
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
            log(&TrainLogRecord {
                step: state.step,
                epoch,
                neg_snr: mean(&|p| p.neg_snr),
                representation: (cfg.loss.omega != 0.0).then(|| mean(&|p| p.representation)),
                total: mean(&|p| p.total),
                saturation,
            });
        }
        let epoch_mean = per_voice.iter().sum::<f64>() / per_voice.len() as f64;
        if !epoch_mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} mean neg-SNR")));
        }
        let previous = epoch_neg_snr.last().copied();
        epoch_neg_snr.push(epoch_mean);
        if cfg.early_stop && previous.is_some_and(|p| epoch_mean >= p) {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    Ok(TrainSummary {
        epoch_neg_snr,
        steps: state.step,
        stopped_early,
    })
}
