use std::path::Path;
use std::sync::Arc;

use super::config::RunConfig;
use super::dataset::{
    clip_seed, load_examples, render_clip, write_manifest, write_scene, Domain, SceneRecord,
};
use crate::acoustics::DomainSamplerConfig;
use crate::error::{config_err, Result};
use crate::par::Exec;
use crate::tracker::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::SourceTrain,
        Split::SourceVal,
        Split::TargetTrain,
        Split::TargetVal,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
            Split::TargetTest => "target_test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            _ => Domain::Target,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| config_err!("unknown split {s:?}"))
    }
}

impl RunConfig {
    pub fn sampler(&self, split: Split) -> &DomainSamplerConfig {
        match split {
            Split::SourceTrain | Split::SourceVal => &self.source,
            Split::TargetTrain => &self.target,
            Split::TargetVal => &self.validation,
            Split::TargetTest => &self.test,
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        let s = &self.splits;
        match split {
            Split::SourceTrain => s.source_train,
            Split::SourceVal => s.source_val,
            Split::TargetTrain => s.target_train,
            Split::TargetVal => s.target_val,
            Split::TargetTest => s.target_test,
        }
    }

    pub fn split_seeds(&self, split: Split) -> Vec<u64> {
        (0..self.split_size(split) as u64)
            .map(|i| clip_seed(self.seed, split.name(), i))
            .collect()
    }

    /// Clips of a split, read from `data_dir` when set and rendered otherwise.
    pub fn examples(&self, split: Split, exec: Exec) -> Result<Vec<Arc<Example>>> {
        let stride = self.crnn()?.time_stride();
        match &self.data_dir {
            Some(dir) => Ok(load_examples(&dir.join(split.name()), stride)?
                .into_iter()
                .map(|(_, e)| e)
                .collect()),
            None => super::generate_examples(
                self.sampler(split),
                &self.split_seeds(split),
                stride,
                exec,
            ),
        }
    }
}

/// Renders a split and writes its records and manifest under `dir/<split>`.
pub fn simulate_split(
    cfg: &RunConfig,
    split: Split,
    dir: &Path,
    exec: Exec,
) -> Result<Vec<SceneRecord>> {
    let sampler = cfg.sampler(split);
    let seeds = cfg.split_seeds(split);
    let out = dir.join(split.name());
    std::fs::create_dir_all(&out)?;
    let mut records = Vec::with_capacity(seeds.len());
    // Render in bounded chunks so audio for the whole split is never held at once.
    for chunk in seeds.chunks(64) {
        let clips: Vec<_> = exec
            .map_range(chunk.len(), |i| render_clip(sampler, chunk[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        for clip in &clips {
            let name = format!("{}_{:05}", split.name(), records.len());
            records.push(write_scene(
                &out,
                &name,
                clip,
                split.domain(),
                sampler.coverage_deg,
            )?);
        }
    }
    write_manifest(&out, &records)?;
    Ok(records)
}
