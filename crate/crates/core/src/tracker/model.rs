use rand::Rng;

use super::{CrnnConfig, GROUP_E, GROUP_F};
use crate::autodiff::norm::BN_MOMENTUM;
use crate::autodiff::{
    BatchStats, Checkpoint, CheckpointHeader, Graph, NormMode, ParamId, ParamStore, Tensor, Var,
};
use crate::error::{arg_err, config_err, shape_err, Result};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds them into the running averages.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, s: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Output of [`FeatureExtractor::forward`].
pub struct FeatureOutput {
    /// GRU hidden sequence `[N, L', H]`, zero past each true length.
    pub seq: Var,
    pub lengths: Vec<usize>,
    /// Train-mode batch statistics, one per batch-norm layer.
    pub stats: Vec<BatchStats>,
}

/// Convolutional blocks followed by a unidirectional GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub cfg: CrnnConfig,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
    convs: Vec<ConvIds>,
    gru: [ParamId; 3],
}

fn conv_names(block: usize) -> [String; 2] {
    [format!("block{block}.a"), format!("block{block}.b")]
}

impl FeatureExtractor {
    pub fn new<R: Rng>(cfg: &CrnnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.conv_channels;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        for block in 0..cfg.blocks() {
            for (j, name) in conv_names(block).into_iter().enumerate() {
                let c_in = if block == 0 && j == 0 {
                    cfg.input_channels
                } else {
                    c
                };
                let fan_in = c_in * 9;
                let w = params.add_uniform(format!("{name}.conv.w"), &[c, c_in, 3, 3], fan_in, rng);
                let b = params.add_uniform(format!("{name}.conv.b"), &[c], fan_in, rng);
                let gamma = params.add(format!("{name}.bn.gamma"), Tensor::full(&[c], 1.0));
                let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[c]));
                convs.push(ConvIds { w, b, gamma, beta });
            }
        }
        let (f, h) = (cfg.gru_input(), cfg.gru_hidden);
        let gru = [
            params.add_uniform("gru.w_x", &[3 * h, f], h, rng),
            params.add_uniform("gru.w_h", &[3 * h, h], h, rng),
            params.add_uniform("gru.b", &[3 * h], h, rng),
        ];
        Ok(FeatureExtractor {
            cfg: cfg.clone(),
            params,
            running: vec![RunningStats::new(c); convs.len()],
            convs,
            gru,
        })
    }

    /// Runs `x: [N, 2M, K, L]` with true frame counts `lengths` to the GRU
    /// sequence. `group` makes the weights trainable on the tape.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        lengths: &[usize],
        group: Option<u32>,
        mode: Mode,
    ) -> Result<FeatureOutput> {
        let xs = g.shape(x).to_vec();
        let cfg = &self.cfg;
        if xs.len() != 4
            || xs[1] != cfg.input_channels
            || xs[2] != cfg.freq_bins
            || lengths.len() != xs[0]
        {
            return Err(shape_err!(
                "feature extractor expects [N, {}, {}, L] with N lengths, got {:?} and {} lengths",
                cfg.input_channels,
                cfg.freq_bins,
                xs,
                lengths.len()
            ));
        }
        if let Some(&bad) = lengths
            .iter()
            .find(|&&l| cfg.output_frames(l) == 0 || l > xs[3])
        {
            return Err(arg_err!(
                "{bad} frames leave no output after time pooling by {} (padded width {})",
                cfg.time_stride(),
                xs[3]
            ));
        }
        let mut h = x;
        let mut lens = lengths.to_vec();
        let mut stats = Vec::new();
        for block in 0..cfg.blocks() {
            for j in 0..2 {
                let idx = 2 * block + j;
                let ids = self.convs[idx];
                let w = self.params.bind(g, group, ids.w);
                let b = self.params.bind(g, group, ids.b);
                let gamma = self.params.bind(g, group, ids.gamma);
                let beta = self.params.bind(g, group, ids.beta);
                let y = g.conv2d(h, w, b)?;
                let norm = match mode {
                    Mode::Train => NormMode::Train,
                    Mode::Eval => NormMode::Eval {
                        mean: &self.running[idx].mean,
                        var: &self.running[idx].var,
                    },
                };
                let (y, s) = g.batch_norm(y, gamma, beta, norm, Some(&lens))?;
                stats.extend(s);
                h = g.relu(y);
            }
            let (kf, kt) = (cfg.freq_pools[block], cfg.time_pools[block]);
            h = g.max_pool2d(h, kf, kt, Some(&lens))?;
            lens.iter_mut().for_each(|l| *l /= kt);
        }
        let seq = g.to_sequence(h)?;
        let [wx, wh, b] = self.gru.map(|id| self.params.bind(g, group, id));
        let seq = g.gru(seq, wx, wh, b, None, Some(&lens))?;
        Ok(FeatureOutput {
            seq,
            lengths: lens,
            stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(shape_err!(
                "{} batch statistics for {} norm layers",
                stats.len(),
                self.running.len()
            ));
        }
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
        Ok(())
    }

    /// Running statistics as named tensors, for checkpoints.
    fn running_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for block in 0..self.cfg.blocks() {
            for (j, name) in conv_names(block).into_iter().enumerate() {
                let r = &self.running[2 * block + j];
                let c = r.mean.len();
                out.push((
                    format!("{name}.bn.running_mean"),
                    Tensor::from_vec(&[c], r.mean.clone()).expect("length"),
                ));
                out.push((
                    format!("{name}.bn.running_var"),
                    Tensor::from_vec(&[c], r.var.clone()).expect("length"),
                ));
            }
        }
        out
    }

    /// Order-sensitive digest of the weights and running statistics.
    pub fn digest(&self) -> String {
        let mut store = self.params.clone();
        for (name, t) in self.running_entries() {
            store.add(name, t);
        }
        store.digest()
    }
}

/// Per-frame Tanh, ReLU and sigmoid layers mapping features to the likelihood grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DoaEstimator {
    pub params: ParamStore,
    layers: [(ParamId, ParamId); 3],
}

impl DoaEstimator {
    pub fn new<R: Rng>(cfg: &CrnnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut fan_in = cfg.gru_hidden;
        let mut layers = Vec::new();
        for (i, &width) in cfg.estimator_widths.iter().enumerate() {
            let w = params.add_uniform(format!("fc{i}.w"), &[width, fan_in], fan_in, rng);
            let b = params.add_uniform(format!("fc{i}.b"), &[width], fan_in, rng);
            layers.push((w, b));
            fan_in = width;
        }
        Ok(DoaEstimator {
            params,
            layers: [layers[0], layers[1], layers[2]],
        })
    }

    /// `[N, L', H]` to `[N, L', 180]`.
    pub fn forward(&self, g: &mut Graph, seq: Var, group: Option<u32>) -> Result<Var> {
        let mut h = seq;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let w = self.params.bind(g, group, *w);
            let b = self.params.bind(g, group, *b);
            h = g.linear(h, w, b)?;
            h = match i {
                0 => g.tanh(h),
                1 => g.relu(h),
                _ => g.sigmoid(h),
            };
        }
        Ok(h)
    }
}

/// Feature extractor and estimator with training counters.
#[derive(Clone, Debug, PartialEq)]
pub struct SstModel {
    pub cfg: CrnnConfig,
    pub feature: FeatureExtractor,
    pub estimator: DoaEstimator,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
}

impl SstModel {
    pub fn new<R: Rng>(cfg: &CrnnConfig, seed: u64, rng: &mut R) -> Result<Self> {
        Ok(SstModel {
            cfg: cfg.clone(),
            feature: FeatureExtractor::new(cfg, rng)?,
            estimator: DoaEstimator::new(cfg, rng)?,
            seed,
            step: 0,
            epoch: 0,
        })
    }

    /// Likelihood predictions `[N, L', 180]` and the per-sample output lengths.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        lengths: &[usize],
        trainable: bool,
        mode: Mode,
    ) -> Result<(Var, FeatureOutput)> {
        let (gf, ge) = if trainable {
            (Some(GROUP_F), Some(GROUP_E))
        } else {
            (None, None)
        };
        let feats = self.feature.forward(g, x, lengths, gf, mode)?;
        let pred = self.estimator.forward(g, feats.seq, ge)?;
        Ok((pred, feats))
    }

    pub fn to_checkpoint(&self, note: &str) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        for (name, t) in self.feature.params.iter() {
            entries.push((format!("F/{name}"), t.clone()));
        }
        for (name, t) in self.feature.running_entries() {
            entries.push((format!("F/{name}"), t));
        }
        for (name, t) in self.estimator.params.iter() {
            entries.push((format!("E/{name}"), t.clone()));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                architecture: serde_json::to_value(&self.cfg)?,
                seed: self.seed,
                step: self.step,
                epoch: self.epoch,
                note: note.to_string(),
            },
            entries,
        })
    }

    /// Rebuilds a model; when `expected` is given the stored architecture must match it.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&CrnnConfig>) -> Result<Self> {
        let cfg: CrnnConfig = serde_json::from_value(ckpt.header.architecture.clone())?;
        if let Some(e) = expected {
            if *e != cfg {
                return Err(config_err!(
                    "checkpoint architecture {cfg:?} does not match {e:?}"
                ));
            }
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = SstModel::new(&cfg, ckpt.header.seed, &mut rng)?;
        model.step = ckpt.header.step;
        model.epoch = ckpt.header.epoch;
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| config_err!("checkpoint lacks {name}"))?;
            if t.shape() != shape {
                return Err(shape_err!(
                    "checkpoint {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                ));
            }
            Ok(t.clone())
        };
        for i in 0..model.feature.params.len() {
            let name = format!("F/{}", model.feature.params.names()[i]);
            let shape = model.feature.params.tensors()[i].shape().to_vec();
            model.feature.params.tensors_mut()[i] = fetch(name, &shape)?;
        }
        for i in 0..model.estimator.params.len() {
            let name = format!("E/{}", model.estimator.params.names()[i]);
            let shape = model.estimator.params.tensors()[i].shape().to_vec();
            model.estimator.params.tensors_mut()[i] = fetch(name, &shape)?;
        }
        let c = cfg.conv_channels;
        for block in 0..cfg.blocks() {
            for (j, name) in conv_names(block).into_iter().enumerate() {
                let r = &mut model.feature.running[2 * block + j];
                r.mean = fetch(format!("F/{name}.bn.running_mean"), &[c])?.into_data();
                r.var = fetch(format!("F/{name}.bn.running_var"), &[c])?.into_data();
            }
        }
        let expected_entries = model.feature.params.len()
            + model.estimator.params.len()
            + 2 * model.feature.running.len();
        if ckpt.entries.len() != expected_entries {
            return Err(config_err!(
                "checkpoint holds {} tensors, the tracker expects {expected_entries}",
                ckpt.entries.len()
            ));
        }
        Ok(model)
    }
}
