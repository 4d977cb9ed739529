//! Adversarial adaptation of the tracker: domain discriminator `D`, weight
//! discriminator `D_w`, importance weights, the weighted adversarial loss and
//! the lambda schedule.

mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{arg_err, config_err, shape_err, Result};

pub use train::{
    adapt_graph, adapt_loop, adapt_step, source_features, AdaptConfig, AdaptGraph, AdaptMode,
    AdaptOutcome, AdaptState, EarlyStopping, RunLogRow, SourceFeatures, StepRecord,
};

pub const GROUP_D: u32 = 2;
pub const GROUP_DW: u32 = 3;

/// Growth constant mapping training progress to the schedule variable.
pub const PROGRESS_GROWTH: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Feature width of the sequences fed in.
    pub input: usize,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
}

impl DiscriminatorConfig {
    pub fn new(input: usize) -> Self {
        DiscriminatorConfig {
            input,
            gru_hidden: 256,
            fc_hidden: 128,
        }
    }

    /// Narrow variant matching the toy tracker.
    pub fn toy(input: usize) -> Self {
        DiscriminatorConfig {
            input,
            gru_hidden: 32,
            fc_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.gru_hidden == 0 || self.fc_hidden == 0 {
            return Err(config_err!(
                "discriminator widths must be positive: {self:?}"
            ));
        }
        Ok(())
    }
}

/// GRU over a feature sequence, final state through a ReLU layer and one sigmoid unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore,
    gru: [ParamId; 3],
    fc: [(ParamId, ParamId); 2],
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (f, h, c) = (cfg.input, cfg.gru_hidden, cfg.fc_hidden);
        let mut params = ParamStore::new();
        let gru = [
            params.add_uniform("gru.w_x", &[3 * h, f], h, rng),
            params.add_uniform("gru.w_h", &[3 * h, h], h, rng),
            params.add_uniform("gru.b", &[3 * h], h, rng),
        ];
        let fc = [
            (
                params.add_uniform("fc0.w", &[c, h], h, rng),
                params.add_uniform("fc0.b", &[c], h, rng),
            ),
            (
                params.add_uniform("fc1.w", &[1, c], c, rng),
                params.add_uniform("fc1.b", &[1], c, rng),
            ),
        ];
        Ok(Discriminator {
            cfg: cfg.clone(),
            params,
            gru,
            fc,
        })
    }

    /// Probabilities `[N, 1]` for sequences `[N, T, F]` with true lengths.
    pub fn forward(
        &self,
        g: &mut Graph,
        seq: Var,
        lengths: &[usize],
        group: Option<u32>,
    ) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.cfg.input {
            return Err(shape_err!(
                "discriminator expects [N, T, {}], got {:?}",
                self.cfg.input,
                s
            ));
        }
        if s[1] == 0 || lengths.contains(&0) {
            return Err(arg_err!("discriminator over an empty sequence"));
        }
        let [wx, wh, b] = self.gru.map(|id| self.params.bind(g, group, id));
        let h = g.gru(seq, wx, wh, b, None, Some(lengths))?;
        let mut h = g.last_step(h, Some(lengths))?;
        for (i, (w, b)) in self.fc.iter().enumerate() {
            let w = self.params.bind(g, group, *w);
            let b = self.params.bind(g, group, *b);
            h = g.linear(h, w, b)?;
            h = if i == 0 { g.relu(h) } else { g.sigmoid(h) };
        }
        Ok(h)
    }

    /// Probabilities for constant features, off any tape.
    pub fn probabilities(&self, features: &Tensor, lengths: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let p = self.forward(&mut g, x, lengths, None)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// Per-sample importance weights of one source batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    /// `1 - D_w(o_s)`.
    pub raw: Vec<f64>,
    /// `raw / mean(raw)`, or all ones when the mean is zero.
    pub normalized: Vec<f64>,
    /// The batch mean was zero and uniform weights were substituted.
    pub fallback: bool,
}

impl ImportanceWeights {
    pub fn uniform(n: usize) -> Self {
        ImportanceWeights {
            raw: vec![1.0; n],
            normalized: vec![1.0; n],
            fallback: false,
        }
    }

    /// Weights from `D_w` source probabilities.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(arg_err!("importance weights of an empty batch"));
        }
        let raw: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if mean <= 0.0 {
            log::warn!(
                "weight discriminator saturated on every source sample; using uniform weights"
            );
            return Ok(ImportanceWeights {
                normalized: vec![1.0; raw.len()],
                raw,
                fallback: true,
            });
        }
        Ok(ImportanceWeights {
            normalized: raw.iter().map(|w| w / mean).collect(),
            raw,
            fallback: false,
        })
    }
}

/// Importance weights of constant source features under `dw`.
pub fn compute_importance_weights(
    dw: &Discriminator,
    features: &Tensor,
    lengths: &[usize],
) -> Result<ImportanceWeights> {
    ImportanceWeights::from_probabilities(&dw.probabilities(features, lengths)?)
}

/// `(1/N) sum [w_n ln D(o_s) + ln(1 - D(o_t))]`.
pub fn da_loss(
    g: &mut Graph,
    source_probs: Var,
    target_probs: Var,
    weights: &[f64],
) -> Result<Var> {
    let bce = domain_bce(g, source_probs, target_probs, weights)?;
    Ok(g.scale(bce, -1.0))
}

/// `-(1/N) sum [w_n ln D(o_s) + ln(1 - D(o_t))]`: what `D` minimizes.
pub fn domain_bce(
    g: &mut Graph,
    source_probs: Var,
    target_probs: Var,
    weights: &[f64],
) -> Result<Var> {
    let n = g.value(source_probs).len();
    if g.value(target_probs).len() != n {
        return Err(shape_err!(
            "{} source and {} target probabilities",
            n,
            g.value(target_probs).len()
        ));
    }
    let s = g.weighted_bce(source_probs, &vec![1.0; n], weights)?;
    let t = g.weighted_bce(target_probs, &vec![0.0; n], &vec![1.0; n])?;
    g.add(s, t)
}

/// `-(1/N) sum [ln D_w(o_s) + ln(1 - D_w(o_t))]`.
pub fn dw_loss(g: &mut Graph, source_probs: Var, target_probs: Var) -> Result<Var> {
    let n = g.value(source_probs).len();
    domain_bce(g, source_probs, target_probs, &vec![1.0; n])
}

/// `2u / (1 + e^-p) - u`.
pub fn lambda_from_progress(u: f64, p: f64) -> f64 {
    2.0 * u / (1.0 + (-p).exp()) - u
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub u: f64,
    pub total_steps: u64,
}

impl LambdaSchedule {
    pub fn progress(&self, step: u64) -> f64 {
        PROGRESS_GROWTH * step as f64 / self.total_steps.max(1) as f64
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, step: u64) -> f64 {
    lambda_from_progress(schedule.u, schedule.progress(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((lambda_from_progress(0.001, 1.0) - 4.6212e-4).abs() < 1e-8);
        assert_eq!(lambda_from_progress(0.3, 0.0), 0.0);
        let w = ImportanceWeights::from_probabilities(&[0.8, 0.4]).unwrap();
        assert!((w.normalized[0] - 0.5).abs() < 1e-12 && (w.normalized[1] - 1.5).abs() < 1e-12);
        let w = ImportanceWeights::from_probabilities(&[1.0, 1.0]).unwrap();
        assert!(w.fallback && w.normalized == vec![1.0, 1.0]);
    }

    #[test]
    fn losses_at_half() {
        let mut g = Graph::new();
        let s = g.input(Tensor::full(&[3, 1], 0.5));
        let t = g.input(Tensor::full(&[3, 1], 0.5));
        let da = da_loss(&mut g, s, t, &[1.0; 3]).unwrap();
        let dw = dw_loss(&mut g, s, t).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(da).item() + 2.0 * ln2).abs() < 1e-12);
        assert!((g.value(dw).item() - 2.0 * ln2).abs() < 1e-12);
    }
}
