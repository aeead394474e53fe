//! Central finite-difference checks of every differentiable op on the tape.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{GradientTape, Tensor, Var};
use super::{record_item, ParamVars};
use crate::dataset::TrainingPair;
use crate::error::Result;
use crate::losses::{sinkhorn, LossConfig, Objective};
use crate::model::{Model, ModelConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient returned by `f` with central differences in every input entry.
///
/// `f` maps input tensors to a scalar value and its gradient with respect to each input.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(inputs)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.as_slice().expect("standard layout")[j];
            work[i].as_slice_mut().expect("standard layout")[j] = orig + STEP;
            let plus = f(&work)?.0;
            work[i].as_slice_mut().expect("standard layout")[j] = orig - STEP;
            let minus = f(&work)?.0;
            work[i].as_slice_mut().expect("standard layout")[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].as_slice().expect("standard layout")[j];
            worst = worst.max(relative_error(a, numeric));
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        entries,
        max_rel_error: worst,
    })
}

/// [`check_fn`] for a scalar graph built on a tape from one leaf per input.
pub fn check<F>(name: &str, inputs: &[Tensor], build: F) -> Result<GradCheck>
where
    F: Fn(&mut GradientTape, &[Var]) -> Result<Var>,
{
    check_fn(name, inputs, |values| {
        let mut tape = GradientTape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.raw_dim())))
            .collect();
        Ok((tape.scalar_value(out), g))
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape")
}

/// Values with magnitude in `[lo, hi]` and a random sign, away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    uniform(rng, shape, lo, hi).mapv_into(|v| if rng.random_bool(0.5) { v } else { -v })
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().expect("rank 2")
}

/// Toy architecture for whole-model checks: C=3, L=8, L'=2, T=4.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        components: 3,
        stride: 2,
        kernel_len: 8,
        dilated_len: 2,
        dilation: 2,
        square_freq: true,
    }
}

fn model_from_inputs(base: &Model, v: &[Tensor]) -> Model {
    let mut m = base.clone();
    m.encoder.kernels = to2(&v[0]);
    m.encoder.dilated_kernels = v[1].clone().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
    m.decoder.frequencies = v[2].clone().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    m.decoder.phases = v[3].clone().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    m.decoder.modulators = to2(&v[4]);
    m
}

fn model_loss(
    base: &Model,
    values: &[Tensor],
    pair: &TrainingPair,
    cfg: &LossConfig,
    objective: Objective,
    plan: Option<&Array2<f64>>,
) -> Result<(f64, Vec<Tensor>)> {
    let model = model_from_inputs(base, values);
    let mut tape = GradientTape::new();
    let g = record_item(&mut tape, &model, pair, cfg, objective, plan)?;
    let grads = tape.backward(g.loss)?;
    let ParamVars {
        kernels,
        dilated_kernels,
        frequencies,
        phases,
        modulators,
    } = g.vars;
    let out = [kernels, dilated_kernels, frequencies, phases, modulators]
        .iter()
        .zip(values)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.raw_dim())))
        .collect();
    Ok((tape.scalar_value(g.loss), out))
}

/// Runs every op-level and whole-model check on small random inputs.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv1: N=11, C=3, L=5, S=3 -> T=4
    let x = uniform(&mut rng, &[11], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let r = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(check("conv1", &[x, k], |t, v| {
        let y = t.conv1(v[0], v[1], 3);
        Ok(t.weighted_sum(y, r.clone()))
    })?);

    // dilated conv: C=3, T=6, L'=2, dilation 2
    let h = uniform(&mut rng, &[3, 6], -1.0, 1.0);
    let kp = uniform(&mut rng, &[3, 2, 3], -1.0, 1.0);
    let r = uniform(&mut rng, &[3, 6], -1.0, 1.0);
    out.push(check("dilated_conv", &[h, kp], |t, v| {
        let y = t.dilated_conv(v[0], v[1], 2);
        Ok(t.weighted_sum(y, r.clone()))
    })?);

    // ReLU of the residual sum, inputs chosen so |pre-activation| > 1e-3
    let a = away_from_zero(&mut rng, &[4, 6], 0.01, 1.0);
    let b = a.mapv(|v| v * 0.25);
    let r = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    out.push(check("relu_residual", &[a, b], |t, v| {
        let s = t.add(v[0], v[1]);
        let y = t.relu(s);
        Ok(t.weighted_sum(y, r.clone()))
    })?);

    for square in [true, false] {
        let f = uniform(&mut rng, &[4], 0.01, 0.4);
        let rho = uniform(&mut rng, &[4], -3.0, 3.0);
        let b = uniform(&mut rng, &[4, 16], -1.0, 1.0);
        let r = uniform(&mut rng, &[4, 16], -1.0, 1.0);
        let name = if square { "modcos_kernels_squared" } else { "modcos_kernels_linear" };
        out.push(check(name, &[f, rho, b], |t, v| {
            let w = t.modcos_kernels(v[0], v[1], v[2], square, 1);
            Ok(t.weighted_sum(w, r.clone()))
        })?);
    }

    // synthesize: C=4, T=5, L=7, S=3, full length 19 and a truncated length
    for out_len in [19, 14] {
        let a = uniform(&mut rng, &[4, 5], 0.0, 1.0);
        let w = uniform(&mut rng, &[4, 7], -1.0, 1.0);
        let r = uniform(&mut rng, &[out_len], -1.0, 1.0);
        out.push(check(&format!("synthesize_len{out_len}"), &[a, w], |t, v| {
            let y = t.synthesize(v[0], v[1], 3, out_len)?;
            Ok(t.weighted_sum(y, r.clone()))
        })?);
    }

    let target: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let est = Array1::from(target.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect::<Vec<_>>()).into_dyn();
    out.push(check("neg_snr", &[est], |t, v| t.neg_snr(&target, v[0], -120.0))?);

    let a = uniform(&mut rng, &[4, 6], 0.0, 1.0);
    out.push(check("total_variation", &[a], |t, v| Ok(t.total_variation(v[0])))?);

    for p in [1u32, 2] {
        let a = uniform(&mut rng, &[4, 5], 0.05, 1.0);
        let cfg = LossConfig { p, ..Default::default() };
        let plan = sinkhorn::sinkhorn_loss(&to2(&a), &cfg)?.plan.plan;
        out.push(check(&format!("sinkhorn_fixed_plan_p{p}"), &[a], |t, v| {
            Ok(t.sinkhorn_with_plan(v[0], plan.clone(), p))
        })?);
    }

    out.extend(model_checks(&mut rng)?);
    Ok(out)
}

/// Whole training loss on the toy model for both objectives, every parameter tensor.
fn model_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let cfg = toy_model_config();
    let n = 8; // T = 4 frames at stride 2
    let mut out = Vec::new();
    for (objective, name) in [
        (Objective::TotalVariation, "model_tv"),
        (Objective::Sinkhorn, "model_sinkhorn"),
    ] {
        // Resample until every pre-activation sits clear of the ReLU kink.
        let (model, pair) = loop {
            let mut model = Model::init(&cfg, rng.random())?;
            model.decoder.phases = Array1::from_shape_fn(cfg.components, |_| rng.random_range(-1.0..1.0));
            model.decoder.modulators = Array2::from_shape_fn((cfg.components, cfg.kernel_len), |_| {
                rng.random_range(-1.0..1.0)
            });
            let voice: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let acc: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pair = TrainingPair {
                noisy_voice: voice.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect(),
                mixture: voice.iter().zip(&acc).map(|(a, b)| a + b).collect(),
                voice,
                voice_index: 0,
                accompaniment_index: 0,
            };
            let clear = |x: &[f64]| {
                let rep = crate::encoder::encode(x, &model.encoder, crate::encoder::Activation::Identity);
                rep.activations.iter().all(|v| v.abs() > 1e-3)
            };
            if clear(&pair.noisy_voice) && clear(&pair.mixture) {
                break (model, pair);
            }
        };
        let loss_cfg = LossConfig::default();
        let plan = match objective {
            Objective::Sinkhorn => {
                let a_m = model.encode(&pair.mixture).activations;
                Some(sinkhorn::sinkhorn_loss(&a_m, &loss_cfg)?.plan.plan)
            }
            Objective::TotalVariation => None,
        };
        let inputs: Vec<Tensor> = vec![
            model.encoder.kernels.clone().into_dyn(),
            model.encoder.dilated_kernels.clone().into_dyn(),
            model.decoder.frequencies.clone().into_dyn(),
            model.decoder.phases.clone().into_dyn(),
            model.decoder.modulators.clone().into_dyn(),
        ];
        out.push(check_fn(name, &inputs, |v| {
            model_loss(&model, v, &pair, &loss_cfg, objective, plan.as_ref())
        })?);
    }
    Ok(out)
}
