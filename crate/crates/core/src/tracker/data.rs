use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::features::{
    encode_likelihood, DoaTrack, InputTensor, LikelihoodMap, VadMask, NUM_DIRECTIONS,
};

/// Centre frame of each pooled group of `stride` frames.
pub fn pooled_centers(frames: usize, stride: usize) -> Vec<usize> {
    (0..frames / stride.max(1))
        .map(|l| stride * l + stride / 2)
        .collect()
}

/// One training or evaluation clip, with labels at the pooled resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: InputTensor,
    /// Likelihood targets over the pooled frames.
    pub target: LikelihoodMap,
    /// Ground truth over the pooled frames; `truth.active` is the pooled VAD.
    pub truth: DoaTrack,
}

impl Example {
    /// Aligns frame-rate ground truth to the model's output frames.
    pub fn new(input: InputTensor, truth: &DoaTrack, stride: usize) -> Result<Self> {
        let frames = input.frames();
        if truth.len() != frames {
            return Err(shape_err!(
                "{} truth frames for a {frames}-frame input",
                truth.len()
            ));
        }
        let centers = pooled_centers(frames, stride);
        if centers.is_empty() {
            return Err(arg_err!(
                "{frames} frames are fewer than the time stride {stride}"
            ));
        }
        let truth = truth.select(&centers);
        Ok(Example {
            target: encode_likelihood(&truth)?,
            input,
            truth,
        })
    }

    pub fn frames(&self) -> usize {
        self.input.frames()
    }

    pub fn out_frames(&self) -> usize {
        self.truth.len()
    }

    pub fn vad(&self) -> VadMask {
        VadMask(self.truth.active.clone())
    }
}

/// Zero-padded minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 2M, K, L_max]`.
    pub x: Tensor,
    pub lengths: Vec<usize>,
    /// `[N, L'_max, 180]`, zero past each clip's output length.
    pub targets: Tensor,
    pub out_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Pads clips to the longest in the batch.
pub fn collate(examples: &[&Example]) -> Result<Batch> {
    let first = examples.first().ok_or_else(|| arg_err!("empty batch"))?;
    let shape = first.input.tensor().shape();
    let (c, k) = (shape[0], shape[1]);
    let l_max = examples.iter().map(|e| e.frames()).max().unwrap_or(0);
    let o_max = examples.iter().map(|e| e.out_frames()).max().unwrap_or(0);
    let n = examples.len();
    let mut x = vec![0.0; n * c * k * l_max];
    let mut targets = vec![0.0; n * o_max * NUM_DIRECTIONS];
    for (i, e) in examples.iter().enumerate() {
        let s = e.input.tensor().shape();
        if s[0] != c || s[1] != k {
            return Err(shape_err!("batch mixes inputs {:?} and {:?}", shape, s));
        }
        let l = s[2];
        let src = e.input.tensor().data();
        for row in 0..c * k {
            let dst = (i * c * k + row) * l_max;
            x[dst..dst + l].copy_from_slice(&src[row * l..(row + 1) * l]);
        }
        let t = &e.target.values;
        let dst = i * o_max * NUM_DIRECTIONS;
        targets[dst..dst + t.len()].copy_from_slice(t);
    }
    Ok(Batch {
        x: Tensor::from_vec(&[n, c, k, l_max], x)?,
        lengths: examples.iter().map(|e| e.frames()).collect(),
        targets: Tensor::from_vec(&[n, o_max, NUM_DIRECTIONS], targets)?,
        out_lengths: examples.iter().map(|e| e.out_frames()).collect(),
    })
}

/// Supplies the training clips for each epoch.
pub trait ExampleStream {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<Arc<Example>>>;
}

/// The same clips every epoch.
pub struct FixedStream(pub Vec<Arc<Example>>);

impl ExampleStream for FixedStream {
    fn epoch(&mut self, _epoch: usize) -> Result<Vec<Arc<Example>>> {
        Ok(self.0.clone())
    }
}
