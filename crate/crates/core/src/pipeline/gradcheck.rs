//! Finite-difference checks of the complete training objectives, spot-checked
//! on randomly chosen parameter entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{
    adapt_graph, AdaptConfig, AdaptGraph, AdaptMode, AdaptState, DiscriminatorConfig, GROUP_D,
    GROUP_DW,
};
use crate::autodiff::gradcheck::{op_suite, relative_error, CaseReport, FD_STEP};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::Result;
use crate::features::{DoaTrack, InputTensor, NUM_BINS};
use crate::tracker::{collate, Batch, CrnnConfig, Example, SstModel, GROUP_E, GROUP_F};

/// Tolerance for whole-model spot checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Parameter entries sampled per role and instance.
pub const SPOT_CHECKS: usize = 6;

fn random_batch(rng: &mut ChaCha8Rng, cfg: &CrnnConfig, lengths: &[usize]) -> Result<Batch> {
    let examples: Vec<Example> = lengths
        .iter()
        .map(|&l| {
            let data = (0..cfg.input_channels * NUM_BINS * l)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let input = InputTensor(Tensor::from_vec(&[cfg.input_channels, NUM_BINS, l], data)?);
            let truth = DoaTrack {
                azimuth: (0..l).map(|_| Some(rng.gen_range(0.0..3.1))).collect(),
                active: (0..l).map(|_| rng.gen_bool(0.8)).collect(),
            };
            Example::new(input, &truth, cfg.time_stride())
        })
        .collect::<Result<_>>()?;
    collate(&examples.iter().collect::<Vec<_>>())
}

#[derive(Clone, Copy)]
enum Role {
    Feature,
    Estimator,
    Domain,
    Weight,
}

fn store(state: &mut AdaptState, role: Role) -> &mut ParamStore {
    match role {
        Role::Feature => &mut state.target.feature.params,
        Role::Estimator => &mut state.target.estimator.params,
        Role::Domain => &mut state.d.params,
        Role::Weight => &mut state.dw.params,
    }
}

/// Value each parameter group descends: `F_t` and `E_t` see
/// `L_SST - lambda * bce` through the reversal, `D` the cross-entropy, `D_w` its own loss.
fn objective(ag: &AdaptGraph, role: Role) -> f64 {
    let g = &ag.graph;
    let bce = ag.domain_bce.map_or(0.0, |v| g.value(v).item());
    match role {
        Role::Feature | Role::Estimator => g.value(ag.l_sst).item() - ag.lambda * bce,
        Role::Domain => bce,
        Role::Weight => ag.l_w.map_or(0.0, |v| g.value(v).item()),
    }
}

fn spot_check(
    state: &AdaptState,
    src: &Batch,
    tgt: &Batch,
    role: Role,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let ag = adapt_graph(state, src, None, Some(tgt))?;
    let grads = ag.graph.backward(ag.total)?;
    let mut probe = state.clone();
    let (group, count) = match role {
        Role::Feature => (GROUP_F, probe.target.feature.params.len()),
        Role::Estimator => (GROUP_E, probe.target.estimator.params.len()),
        Role::Domain => (GROUP_D, probe.d.params.len()),
        Role::Weight => (GROUP_DW, probe.dw.params.len()),
    };
    let grads = grads.group(group, count);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..SPOT_CHECKS {
        let p = rng.gen_range(0..count);
        let i = rng.gen_range(0..store(&mut probe, role).tensors()[p].len());
        analytic.push(grads[p].as_ref().map_or(0.0, |t| t.data()[i]));
        let orig = store(&mut probe, role).tensors()[p].data()[i];
        let mut at = |v: f64| -> Result<f64> {
            store(&mut probe, role).tensors_mut()[p].data_mut()[i] = v;
            Ok(objective(&adapt_graph(&probe, src, None, Some(tgt))?, role))
        };
        let (plus, minus) = (at(orig + FD_STEP)?, at(orig - FD_STEP)?);
        at(orig)?;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Spot checks of the tracking loss and of every part of the adaptation
/// objective on the toy architecture.
pub fn end_to_end_suite(instances: usize) -> Result<Vec<CaseReport>> {
    let cfg = CrnnConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let roles = [
        ("end_to_end_feature_extractor", Role::Feature),
        ("end_to_end_estimator", Role::Estimator),
        ("end_to_end_domain_discriminator", Role::Domain),
        ("end_to_end_weight_discriminator", Role::Weight),
    ];
    let mut worst = [0.0f64; 4];
    for k in 0..instances {
        let model = SstModel::new(&cfg, k as u64, &mut rng)?;
        let stride = cfg.time_stride();
        let src = random_batch(&mut rng, &cfg, &[2 * stride, stride + 1 + k % stride])?;
        let tgt = random_batch(&mut rng, &cfg, &[stride + k % (2 * stride), 2 * stride])?;
        let mut ac = AdaptConfig::new(
            AdaptMode::Iwda,
            rng.gen_range(0.1..1.0),
            DiscriminatorConfig::toy(cfg.gru_hidden),
        );
        ac.warmup_steps = 0;
        ac.seed = k as u64;
        let mut state = AdaptState::new(&model, &ac, 10)?;
        // Mid-schedule, so lambda is neither zero nor saturated.
        state.step = 3;
        for (w, (_, role)) in worst.iter_mut().zip(roles) {
            *w = w.max(spot_check(&state, &src, &tgt, role, &mut rng)?);
        }
    }
    Ok(roles
        .iter()
        .zip(worst)
        .map(|((name, _), w)| CaseReport {
            name: name.to_string(),
            instances,
            worst: w,
            tolerance: END_TO_END_TOLERANCE,
        })
        .collect())
}

/// Every operation plus the end-to-end objectives.
pub fn gradcheck_suite(instances: usize) -> Result<Vec<CaseReport>> {
    let mut out = op_suite(instances)?;
    out.extend(end_to_end_suite(instances)?);
    Ok(out)
}
