use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{collate, pooled_centers, Batch, Example, ExampleStream};
use super::model::{Mode, SstModel};
use super::{GROUP_E, GROUP_F};
use crate::autodiff::{AdamState, Graph, Tensor, Var, DEFAULT_LR};
use crate::error::{arg_err, Error, Result};
use crate::evaluation::{pooled_metrics, sequence_metrics, SequenceMetrics};
use crate::features::{decode_peak, DoaTrack, InputTensor, LikelihoodMap, VadMask, NUM_DIRECTIONS};
use crate::par::Exec;

/// Squared Frobenius error per sample, averaged over the batch, counting
/// only each sample's valid output frames.
pub fn sst_loss(g: &mut Graph, pred: Var, targets: &Tensor, out_lengths: &[usize]) -> Result<Var> {
    g.squared_error(pred, targets, Some(out_lengths))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            lr: DEFAULT_LR,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Adam states for the feature extractor and the estimator.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub feature: AdamState,
    pub estimator: AdamState,
}

impl Optimizers {
    pub fn new(model: &SstModel, lr: f64) -> Self {
        Optimizers {
            feature: AdamState::new(&model.feature.params, lr),
            estimator: AdamState::new(&model.estimator.params, lr),
        }
    }
}

/// One row of the per-epoch metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub mae_deg: f64,
    pub acc_pct: f64,
    pub wall_s: f64,
}

fn split_maps(values: &[f64], out_lengths: &[usize]) -> Vec<LikelihoodMap> {
    let o_max = out_lengths.iter().copied().max().unwrap_or(0);
    out_lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let start = i * o_max * NUM_DIRECTIONS;
            LikelihoodMap {
                frames: l,
                values: values[start..start + l * NUM_DIRECTIONS].to_vec(),
            }
        })
        .collect()
}

/// Scores a clip, or `None` when it has no active frames.
fn clip_metrics(map: &LikelihoodMap, truth: &DoaTrack) -> Result<Option<SequenceMetrics>> {
    if !truth.active.iter().any(|a| *a) {
        return Ok(None);
    }
    let est = decode_peak(map, &VadMask(truth.active.clone()))?;
    sequence_metrics(&est, truth).map(Some)
}

/// One Adam step on the tracking loss. Returns the loss and the train-mode
/// predictions for each clip.
pub fn train_step(
    model: &mut SstModel,
    opt: &mut Optimizers,
    batch: &Batch,
    exec: Exec,
) -> Result<(f64, Vec<LikelihoodMap>)> {
    let mut g = Graph::with_exec(exec);
    let x = g.constant(batch.x.clone());
    let (pred, feats) = model.forward(&mut g, x, &batch.lengths, true, Mode::Train)?;
    let loss = sst_loss(&mut g, pred, &batch.targets, &batch.out_lengths)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "tracking loss {value} at step {}",
            model.step
        )));
    }
    let grads = g.backward(loss)?;
    let gf = grads.group(GROUP_F, model.feature.params.len());
    let ge = grads.group(GROUP_E, model.estimator.params.len());
    opt.feature.step(&mut model.feature.params, &gf)?;
    opt.estimator.step(&mut model.estimator.params, &ge)?;
    model.feature.update_running(&feats.stats)?;
    model.step += 1;
    Ok((value, split_maps(g.value(pred).data(), &batch.out_lengths)))
}

/// Eval-mode likelihood maps for a set of clips, in order.
pub fn predict(
    model: &SstModel,
    examples: &[Arc<Example>],
    batch_size: usize,
    exec: Exec,
) -> Result<Vec<LikelihoodMap>> {
    Ok(predict_with_loss(model, examples, batch_size, exec)?.0)
}

fn predict_with_loss(
    model: &SstModel,
    examples: &[Arc<Example>],
    batch_size: usize,
    exec: Exec,
) -> Result<(Vec<LikelihoodMap>, f64)> {
    let mut maps = Vec::with_capacity(examples.len());
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().map(Arc::as_ref).collect();
        let batch = collate(&refs)?;
        let mut g = Graph::with_exec(exec);
        let x = g.constant(batch.x.clone());
        let (pred, _) = model.forward(&mut g, x, &batch.lengths, false, Mode::Eval)?;
        let loss = sst_loss(&mut g, pred, &batch.targets, &batch.out_lengths)?;
        total += g.value(loss).item() * chunk.len() as f64;
        maps.extend(split_maps(g.value(pred).data(), &batch.out_lengths));
    }
    Ok((maps, total / examples.len().max(1) as f64))
}

/// Loss and metrics of a model on a labelled set.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// Mean per-clip tracking loss.
    pub loss: f64,
    /// Metrics over the active frames of every clip.
    pub pooled: SequenceMetrics,
    /// Per-clip metrics; `None` for clips without active frames.
    pub per_clip: Vec<Option<SequenceMetrics>>,
}

pub fn evaluate_set(
    model: &SstModel,
    examples: &[Arc<Example>],
    batch_size: usize,
    exec: Exec,
) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(arg_err!("evaluation set is empty"));
    }
    let (maps, loss) = predict_with_loss(model, examples, batch_size, exec)?;
    let per_clip = maps
        .iter()
        .zip(examples)
        .map(|(m, e)| clip_metrics(m, &e.truth))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<SequenceMetrics> = per_clip.iter().flatten().cloned().collect();
    Ok(EvalSummary {
        loss,
        pooled: pooled_metrics(&scored)?,
        per_clip,
    })
}

/// Azimuth track for one clip; `vad` is at the input frame rate and is
/// reduced to the output frames by centre selection.
pub fn infer(model: &SstModel, x: &InputTensor, vad: &VadMask) -> Result<DoaTrack> {
    if vad.len() != x.frames() {
        return Err(arg_err!(
            "activity mask has {} frames, input {}",
            vad.len(),
            x.frames()
        ));
    }
    let centers = pooled_centers(x.frames(), model.cfg.time_stride());
    let pooled = VadMask(centers.iter().map(|&c| vad.0[c]).collect());
    let n = model.cfg.output_frames(x.frames());
    if n == 0 {
        return Err(arg_err!("{} frames leave no output frames", x.frames()));
    }
    let mut g = Graph::new();
    let shape = x.tensor().shape();
    let input = g.constant(
        x.tensor()
            .clone()
            .reshape(&[1, shape[0], shape[1], shape[2]])?,
    );
    let (pred, _) = model.forward(&mut g, input, &[x.frames()], false, Mode::Eval)?;
    let map = LikelihoodMap {
        frames: n,
        values: g.value(pred).data().to_vec(),
    };
    decode_peak(&map, &pooled)
}

pub struct PretrainOutcome {
    /// Lowest validation MAE seen, including the starting model.
    pub best: SstModel,
    pub best_val_mae: f64,
    pub last: SstModel,
    pub optimizers: Optimizers,
    pub records: Vec<EpochRecord>,
}

/// Adam training on the tracking loss with validation-MAE model selection.
/// Epoch numbering and the step counter continue from `model`.
pub fn pretrain(
    mut model: SstModel,
    optimizers: Option<Optimizers>,
    stream: &mut dyn ExampleStream,
    val: &[Arc<Example>],
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(arg_err!("batch size must be positive"));
    }
    let mut opt = optimizers.unwrap_or_else(|| Optimizers::new(&model, cfg.lr));
    let start = Instant::now();
    let mut best_val_mae = evaluate_set(&model, val, cfg.batch_size, cfg.exec)?
        .pooled
        .mae_deg;
    let mut best = model.clone();
    let mut records = Vec::new();
    for _ in 0..cfg.epochs {
        let epoch = model.epoch + 1;
        let mut clips = stream.epoch(epoch as usize)?;
        if clips.is_empty() {
            return Err(arg_err!(
                "training stream produced no clips for epoch {epoch}"
            ));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
        clips.shuffle(&mut rng);
        let (mut loss_sum, mut scored) = (0.0, Vec::new());
        for chunk in clips.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(Arc::as_ref).collect();
            let batch = collate(&refs)?;
            let (loss, maps) = train_step(&mut model, &mut opt, &batch, cfg.exec)?;
            loss_sum += loss * chunk.len() as f64;
            for (m, e) in maps.iter().zip(chunk) {
                scored.extend(clip_metrics(m, &e.truth)?);
            }
        }
        model.epoch = epoch;
        let train = pooled_metrics(&scored)?;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / clips.len() as f64,
            mae_deg: train.mae_deg,
            acc_pct: train.acc_pct,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_record(&rec)?;
        records.push(rec);
        let v = evaluate_set(&model, val, cfg.batch_size, cfg.exec)?;
        let rec = EpochRecord {
            epoch,
            split: "val".into(),
            loss: v.loss,
            mae_deg: v.pooled.mae_deg,
            acc_pct: v.pooled.acc_pct,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_record(&rec)?;
        records.push(rec);
        log::info!("epoch {epoch}: val mae {:.2} deg", v.pooled.mae_deg);
        if v.pooled.mae_deg < best_val_mae {
            best_val_mae = v.pooled.mae_deg;
            best = model.clone();
        }
    }
    Ok(PretrainOutcome {
        best,
        best_val_mae,
        last: model,
        optimizers: opt,
        records,
    })
}
