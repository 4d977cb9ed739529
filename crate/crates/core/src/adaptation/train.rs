use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    domain_bce, dw_loss, lambda_at, Discriminator, DiscriminatorConfig, ImportanceWeights,
    LambdaSchedule, GROUP_D, GROUP_DW,
};
use crate::autodiff::{AdamState, BatchStats, Graph, Tensor, Var, DEFAULT_LR};
use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::par::Exec;
use crate::tracker::{
    collate, evaluate_set, sst_loss, Batch, Example, ExampleStream, FeatureExtractor, Mode,
    Optimizers, SstModel, GROUP_E, GROUP_F,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Continued source-only training.
    So,
    /// Adversarial alignment with uniform weights.
    Da,
    /// Adversarial alignment with importance weights from `D_w`.
    Iwda,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "so" => Ok(AdaptMode::So),
            "da" => Ok(AdaptMode::Da),
            "iwda" => Ok(AdaptMode::Iwda),
            other => Err(arg_err!(
                "unknown adaptation mode {other:?} (expected so, da or iwda)"
            )),
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptMode::So => "so",
            AdaptMode::Da => "da",
            AdaptMode::Iwda => "iwda",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Upper bound of the adversarial trade-off.
    pub u: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Steps during which importance weights are forced to 1.
    pub warmup_steps: u64,
    pub seed: u64,
    pub disc: DiscriminatorConfig,
    pub exec: Exec,
}

impl AdaptConfig {
    pub fn new(mode: AdaptMode, u: f64, disc: DiscriminatorConfig) -> Self {
        AdaptConfig {
            mode,
            u,
            lr: DEFAULT_LR,
            batch_size: 16,
            epochs: 60,
            patience: 10,
            warmup_steps: 200,
            seed: 0,
            disc,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u >= 0.0 && self.u.is_finite()) {
            return Err(config_err!(
                "u must be finite and nonnegative, got {}",
                self.u
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(config_err!(
                "batch size, epochs and patience must be positive"
            ));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        self.disc.validate()
    }
}

/// Frozen source-extractor output for a batch, `[N, L', H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceFeatures {
    pub seq: Tensor,
    pub lengths: Vec<usize>,
}

impl SourceFeatures {
    fn split(&self) -> Vec<Tensor> {
        let s = self.seq.shape();
        let (t, h) = (s[1], s[2]);
        self.lengths
            .iter()
            .enumerate()
            .map(|(n, &l)| {
                Tensor::from_vec(
                    &[l, h],
                    self.seq.data()[n * t * h..(n * t + l) * h].to_vec(),
                )
                .expect("length")
            })
            .collect()
    }

    fn stack(parts: &[&Tensor]) -> Result<Self> {
        let h = parts
            .first()
            .ok_or_else(|| arg_err!("no features to stack"))?
            .shape()[1];
        let t = parts.iter().map(|p| p.shape()[0]).max().unwrap_or(0);
        let mut data = vec![0.0; parts.len() * t * h];
        for (n, p) in parts.iter().enumerate() {
            data[n * t * h..][..p.len()].copy_from_slice(p.data());
        }
        Ok(SourceFeatures {
            seq: Tensor::from_vec(&[parts.len(), t, h], data)?,
            lengths: parts.iter().map(|p| p.shape()[0]).collect(),
        })
    }
}

/// `F_s(x_s)` with running batch-norm statistics; no tape is kept.
pub fn source_features(fs: &FeatureExtractor, batch: &Batch, exec: Exec) -> Result<SourceFeatures> {
    let mut g = Graph::with_exec(exec);
    let x = g.constant(batch.x.clone());
    let out = fs.forward(&mut g, x, &batch.lengths, None, Mode::Eval)?;
    Ok(SourceFeatures {
        seq: g.value(out.seq).clone(),
        lengths: out.lengths,
    })
}

/// Frozen source extractor, trainable target tracker, both discriminators
/// and their optimizers.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub mode: AdaptMode,
    pub source: FeatureExtractor,
    /// Digest of `source` at construction.
    pub source_digest: String,
    pub target: SstModel,
    pub d: Discriminator,
    pub dw: Discriminator,
    pub opt_model: Optimizers,
    pub opt_d: AdamState,
    pub opt_dw: AdamState,
    pub schedule: LambdaSchedule,
    pub warmup_steps: u64,
    /// Adaptation steps taken.
    pub step: u64,
    pub exec: Exec,
}

impl AdaptState {
    /// Source and target extractors both start from `pretrained`.
    pub fn new(pretrained: &SstModel, cfg: &AdaptConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.disc.input != pretrained.cfg.gru_hidden {
            return Err(config_err!(
                "discriminator input {} does not match feature width {}",
                cfg.disc.input,
                pretrained.cfg.gru_hidden
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = Discriminator::new(&cfg.disc, &mut rng)?;
        let dw = Discriminator::new(&cfg.disc, &mut rng)?;
        let source = pretrained.feature.clone();
        Ok(AdaptState {
            mode: cfg.mode,
            source_digest: source.digest(),
            source,
            target: pretrained.clone(),
            opt_model: Optimizers::new(pretrained, cfg.lr),
            opt_d: AdamState::new(&d.params, cfg.lr),
            opt_dw: AdamState::new(&dw.params, cfg.lr),
            d,
            dw,
            schedule: LambdaSchedule {
                u: cfg.u,
                total_steps,
            },
            warmup_steps: cfg.warmup_steps,
            step: 0,
            exec: cfg.exec,
        })
    }

    pub fn lambda(&self) -> f64 {
        lambda_at(&self.schedule, self.step)
    }
}

/// Losses and weights of one adaptation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Step index before the update.
    pub step: u64,
    pub lambda: f64,
    pub l_sst: f64,
    pub l_da: Option<f64>,
    pub l_w: Option<f64>,
    /// Weights applied to the source term, in batch order.
    pub weights: Option<ImportanceWeights>,
}

/// Tape of one adaptation step before the backward pass.
pub struct AdaptGraph {
    pub graph: Graph,
    /// Step index the tape was built for.
    pub step: u64,
    pub lambda: f64,
    pub l_sst: Var,
    /// Domain cross-entropy `D` minimizes, the negation of `L_DA`.
    pub domain_bce: Option<Var>,
    pub l_w: Option<Var>,
    /// `L_SST + domain_bce + L_W`, with `F_t` seeing `domain_bce` through a
    /// gradient-reversal node scaled by lambda.
    pub total: Var,
    pub weights: Option<ImportanceWeights>,
    pub stats: Vec<Vec<BatchStats>>,
}

/// Builds the step objective for the current state.
pub fn adapt_graph(
    state: &AdaptState,
    source: &Batch,
    source_feats: Option<&SourceFeatures>,
    target: Option<&Batch>,
) -> Result<AdaptGraph> {
    let lambda = state.lambda();
    let mut g = Graph::with_exec(state.exec);
    let xs = g.constant(source.x.clone());
    let (pred, src_out) = state
        .target
        .forward(&mut g, xs, &source.lengths, true, Mode::Train)?;
    let l_sst = sst_loss(&mut g, pred, &source.targets, &source.out_lengths)?;
    let mut total = l_sst;
    let mut stats = vec![src_out.stats];
    let (mut domain, mut l_w, mut weights) = (None, None, None);

    if state.mode != AdaptMode::So {
        let target = target.ok_or_else(|| arg_err!("adversarial modes need a target batch"))?;
        if target.len() != source.len() {
            return Err(shape_err!(
                "source batch of {} against target batch of {}",
                source.len(),
                target.len()
            ));
        }
        let owned;
        let o_s = match source_feats {
            Some(f) => f,
            None => {
                owned = source_features(&state.source, source, state.exec)?;
                &owned
            }
        };
        if o_s.lengths != src_out.lengths {
            return Err(shape_err!(
                "cached source features do not match the source batch"
            ));
        }
        let xt = g.constant(target.x.clone());
        let tgt_out = state.target.feature.forward(
            &mut g,
            xt,
            &target.lengths,
            Some(GROUP_F),
            Mode::Train,
        )?;
        stats.push(tgt_out.stats);
        let os = g.constant(o_s.seq.clone());

        let mut w = ImportanceWeights::uniform(source.len());
        if state.mode == AdaptMode::Iwda {
            let dw_s = state.dw.forward(&mut g, os, &o_s.lengths, Some(GROUP_DW))?;
            let ot = g.detach(tgt_out.seq);
            let dw_t = state
                .dw
                .forward(&mut g, ot, &tgt_out.lengths, Some(GROUP_DW))?;
            if state.step >= state.warmup_steps {
                w = ImportanceWeights::from_probabilities(g.value(dw_s).data())?;
            }
            let lw = dw_loss(&mut g, dw_s, dw_t)?;
            l_w = Some(lw);
            total = g.add(total, lw)?;
        }

        let d_s = state.d.forward(&mut g, os, &o_s.lengths, Some(GROUP_D))?;
        let rev = g.grad_reverse(tgt_out.seq, lambda)?;
        let d_t = state
            .d
            .forward(&mut g, rev, &tgt_out.lengths, Some(GROUP_D))?;
        let bce = domain_bce(&mut g, d_s, d_t, &w.normalized)?;
        domain = Some(bce);
        total = g.add(total, bce)?;
        weights = Some(w);
    }
    Ok(AdaptGraph {
        graph: g,
        step: state.step,
        lambda,
        l_sst,
        domain_bce: domain,
        l_w,
        total,
        weights,
        stats,
    })
}

/// One optimizer step on `L_SST + lambda L_DA + L_W`.
///
/// `D` descends the domain cross-entropy (ascends `L_DA`); the target
/// features reach `D` through a gradient-reversal node scaled by lambda, so
/// `F_t` descends `lambda L_DA` in the same backward pass. `D_w` sees the
/// target features detached.
pub fn adapt_step(
    state: &mut AdaptState,
    source: &Batch,
    source_feats: Option<&SourceFeatures>,
    target: Option<&Batch>,
) -> Result<StepRecord> {
    let ag = adapt_graph(state, source, source_feats, target)?;
    let g = &ag.graph;
    let value = g.value(ag.total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "adaptation loss {value} at step {}",
            state.step
        )));
    }
    let grads = g.backward(ag.total)?;
    let model = &mut state.target;
    let gf = grads.group(GROUP_F, model.feature.params.len());
    let ge = grads.group(GROUP_E, model.estimator.params.len());
    state
        .opt_model
        .feature
        .step(&mut model.feature.params, &gf)?;
    state
        .opt_model
        .estimator
        .step(&mut model.estimator.params, &ge)?;
    if state.mode != AdaptMode::So {
        let gd = grads.group(GROUP_D, state.d.params.len());
        state.opt_d.step(&mut state.d.params, &gd)?;
    }
    if state.mode == AdaptMode::Iwda {
        let gw = grads.group(GROUP_DW, state.dw.params.len());
        state.opt_dw.step(&mut state.dw.params, &gw)?;
    }
    for s in &ag.stats {
        model.feature.update_running(s)?;
    }
    model.step += 1;
    let record = StepRecord {
        step: state.step,
        lambda: ag.lambda,
        l_sst: g.value(ag.l_sst).item(),
        l_da: ag.domain_bce.map(|v| -g.value(v).item()),
        l_w: ag.l_w.map(|v| g.value(v).item()),
        weights: ag.weights,
    };
    state.step += 1;
    Ok(record)
}

/// One row of the adaptation run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: u64,
    pub epoch: u64,
    pub l_sst: f64,
    pub l_da: Option<f64>,
    pub l_w: Option<f64>,
    pub lambda: f64,
    pub w_mean_raw: Option<f64>,
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub val_mae_deg: Option<f64>,
    pub val_acc_pct: Option<f64>,
}

impl RunLogRow {
    fn from_step(rec: &StepRecord, epoch: u64) -> Self {
        let w = rec.weights.as_ref();
        RunLogRow {
            step: rec.step,
            epoch,
            l_sst: rec.l_sst,
            l_da: rec.l_da,
            l_w: rec.l_w,
            lambda: rec.lambda,
            w_mean_raw: w.map(|w| w.raw.iter().sum::<f64>() / w.raw.len() as f64),
            w_min: w.map(|w| w.normalized.iter().copied().fold(f64::INFINITY, f64::min)),
            w_max: w.map(|w| {
                w.normalized
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            }),
            val_mae_deg: None,
            val_acc_pct: None,
        }
    }
}

/// Validation-MAE model selection with patience.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: u64,
    /// Epochs since the last improvement.
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's validation MAE; true when it is a strict improvement.
    pub fn observe(&mut self, epoch: u64, mae: f64) -> bool {
        if mae < self.best {
            self.best = mae;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

pub struct AdaptOutcome {
    /// Target tracker with the lowest validation MAE.
    pub best: SstModel,
    pub best_val_mae: f64,
    pub best_epoch: u64,
    pub epochs_run: u64,
    /// State after the last epoch.
    pub state: AdaptState,
    pub rows: Vec<RunLogRow>,
}

fn shuffled(mut clips: Vec<Arc<Example>>, seed: u64, salt: u64) -> Vec<Arc<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt);
    clips.shuffle(&mut rng);
    clips
}

/// Runs adaptation epochs with validation-MAE selection and early stopping.
///
/// Each step pairs a source batch with a target batch of the same size;
/// partial batches are dropped. `so` mode never requests target clips.
/// `on_step` sees every step with the source clips in batch order.
pub fn adapt_loop(
    pretrained: &SstModel,
    source: &mut dyn ExampleStream,
    target: &mut dyn ExampleStream,
    val: &[Arc<Example>],
    cfg: &AdaptConfig,
    on_row: &mut dyn FnMut(&RunLogRow) -> Result<()>,
    on_step: &mut dyn FnMut(&StepRecord, &[Arc<Example>]),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(arg_err!("adaptation needs a nonempty validation set"));
    }
    let n = cfg.batch_size;
    let mut state: Option<AdaptState> = None;
    // Keyed by allocation; the stored Arc pins the address while cached.
    let mut cache: HashMap<*const Example, (Arc<Example>, Tensor)> = HashMap::new();
    let mut rows = Vec::new();
    let mut best = pretrained.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs as u64 {
        let src = shuffled(source.epoch(epoch as usize)?, cfg.seed, 2 * epoch);
        let tgt = match cfg.mode {
            AdaptMode::So => Vec::new(),
            _ => shuffled(target.epoch(epoch as usize)?, cfg.seed, 2 * epoch + 1),
        };
        let steps = match cfg.mode {
            AdaptMode::So => src.len() / n,
            _ => src.len().min(tgt.len()) / n,
        };
        if steps == 0 {
            return Err(arg_err!(
                "epoch {epoch} has fewer clips than one batch of {n}"
            ));
        }
        let st = match state.as_mut() {
            Some(s) => s,
            None => state.insert(AdaptState::new(
                pretrained,
                cfg,
                (steps * cfg.epochs) as u64,
            )?),
        };
        for k in 0..steps {
            let s_clips = &src[k * n..(k + 1) * n];
            let s_refs: Vec<&Example> = s_clips.iter().map(Arc::as_ref).collect();
            let s_batch = collate(&s_refs)?;
            let (t_batch, feats) = if cfg.mode == AdaptMode::So {
                (None, None)
            } else {
                let t_refs: Vec<&Example> =
                    tgt[k * n..(k + 1) * n].iter().map(Arc::as_ref).collect();
                let missing: Vec<usize> = (0..n)
                    .filter(|&i| !cache.contains_key(&Arc::as_ptr(&s_clips[i])))
                    .collect();
                if !missing.is_empty() {
                    let refs: Vec<&Example> = missing.iter().map(|&i| s_refs[i]).collect();
                    let computed = source_features(&st.source, &collate(&refs)?, cfg.exec)?.split();
                    for (&i, t) in missing.iter().zip(computed) {
                        cache.insert(Arc::as_ptr(&s_clips[i]), (s_clips[i].clone(), t));
                    }
                }
                let parts: Vec<&Tensor> =
                    s_clips.iter().map(|c| &cache[&Arc::as_ptr(c)].1).collect();
                (
                    Some(collate(&t_refs)?),
                    Some(SourceFeatures::stack(&parts)?),
                )
            };
            let rec = adapt_step(st, &s_batch, feats.as_ref(), t_batch.as_ref())?;
            on_step(&rec, s_clips);
            let mut row = RunLogRow::from_step(&rec, epoch);
            if k + 1 == steps {
                let v = evaluate_set(&st.target, val, n, cfg.exec)?;
                row.val_mae_deg = Some(v.pooled.mae_deg);
                row.val_acc_pct = Some(v.pooled.acc_pct);
                if stopper.observe(epoch, v.pooled.mae_deg) {
                    best = st.target.clone();
                }
            }
            on_row(&row)?;
            rows.push(row);
        }
        // A stream that does not keep its clips will not repeat them.
        if src.iter().any(|c| Arc::strong_count(c) <= 2) {
            cache.clear();
        }
        st.target.epoch += 1;
        epochs_run = epoch;
        if st.source.digest() != st.source_digest {
            return Err(Error::Numerical(
                "frozen source extractor changed during adaptation".into(),
            ));
        }
        log::info!(
            "adapt {} epoch {epoch}: best val mae {:.2} deg",
            cfg.mode,
            stopper.best
        );
        if stopper.should_stop() {
            break;
        }
    }
    Ok(AdaptOutcome {
        best,
        best_val_mae: stopper.best,
        best_epoch: stopper.best_epoch,
        epochs_run,
        state: state.expect("at least one epoch ran"),
        rows,
    })
}
