//! Clip synthesis, on-disk scene records and manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{
    default_max_order, generate_diffuse_noise, mix_at_snr, render_moving_source, sample_scene,
    speech_like, DomainSamplerConfig, MultichannelAudio, Scene, DEFAULT_BLOCK_MS,
    DEFAULT_ORDER_CAP, DEFAULT_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::features::{energy_vad, stack_reim, stft, DoaTrack, Framing, DEFAULT_VAD_THRESHOLD};
use crate::par::Exec;
use crate::tracker::{Example, ExampleStream};

/// Which generator a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A rendered recording with frame-rate ground truth.
#[derive(Clone, Debug)]
pub struct RenderedClip {
    pub scene: Scene,
    pub audio: MultichannelAudio,
    /// Azimuth at every STFT frame centre; activity from the dry signal.
    pub truth: DoaTrack,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` in the split named `split` under `base`.
pub fn clip_seed(base: u64, split: &str, index: u64) -> u64 {
    let tag = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    mix_seed(mix_seed(base ^ tag).wrapping_add(index))
}

/// Samples a scene, renders the moving source, adds diffuse noise at the
/// scene SNR and labels every STFT frame.
pub fn render_clip(cfg: &DomainSamplerConfig, seed: u64) -> Result<RenderedClip> {
    let scene = sample_scene(cfg, seed)?;
    let fs = DEFAULT_SAMPLE_RATE;
    let n = scene.trajectory.num_samples();
    let dry = speech_like(n, fs, mix_seed(seed ^ 1));
    let order = default_max_order(&scene.room, DEFAULT_ORDER_CAP);
    let reverberant = render_moving_source(
        &dry.samples,
        &scene.trajectory,
        &scene.room,
        &scene.array,
        DEFAULT_BLOCK_MS,
        order,
    )?;
    let noise = generate_diffuse_noise(&scene.array, n, fs, cfg.noise, mix_seed(seed ^ 2))?;
    let audio = mix_at_snr(&reverberant, &noise, scene.snr_db, &dry.active)?;
    let framing = Framing::default();
    let dry_audio = MultichannelAudio::new(vec![dry.samples], fs)?;
    let vad = energy_vad(&dry_audio, framing, DEFAULT_VAD_THRESHOLD);
    let azimuth = (0..vad.len())
        .map(|l| {
            let p = scene.trajectory.positions[framing.frame_center(l).min(n - 1)];
            Some(
                scene
                    .array
                    .azimuth_of(p)
                    .clamp(0.0, std::f64::consts::PI - 1e-9),
            )
        })
        .collect();
    Ok(RenderedClip {
        truth: DoaTrack {
            azimuth,
            active: vad.0,
        },
        scene,
        audio,
        seed,
    })
}

/// Network input and pooled labels for a clip.
pub fn clip_example(audio: &MultichannelAudio, truth: &DoaTrack, stride: usize) -> Result<Example> {
    Example::new(stack_reim(&stft(audio)?), truth, stride)
}

/// Renders and featurizes the clips with the given seeds, in order.
pub fn generate_examples(
    cfg: &DomainSamplerConfig,
    seeds: &[u64],
    stride: usize,
    exec: Exec,
) -> Result<Vec<Arc<Example>>> {
    exec.map_range(seeds.len(), |i| {
        let clip = render_clip(cfg, seeds[i])?;
        clip_example(&clip.audio, &clip.truth, stride).map(Arc::new)
    })
    .into_iter()
    .collect()
}

/// Fresh clips every epoch, drawn from a sampler config.
pub struct SyntheticStream {
    pub cfg: DomainSamplerConfig,
    pub clips_per_epoch: usize,
    pub stride: usize,
    pub base_seed: u64,
    pub exec: Exec,
}

impl ExampleStream for SyntheticStream {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<Arc<Example>>> {
        let split = format!("epoch{epoch}");
        let seeds: Vec<u64> = (0..self.clips_per_epoch as u64)
            .map(|i| clip_seed(self.base_seed, &split, i))
            .collect();
        generate_examples(&self.cfg, &seeds, self.stride, self.exec)
    }
}

/// Metadata stored next to each WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub name: String,
    pub domain: Domain,
    pub seed: u64,
    pub room_m: [f64; 3],
    pub rt60_s: f64,
    pub snr_db: f64,
    pub coverage_deg: [f64; 2],
    pub duration_s: f64,
    pub array_origin_m: [f64; 3],
}

/// One persisted recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub meta: SceneMeta,
    pub wav: PathBuf,
    pub annotation: PathBuf,
    pub wav_sha256: String,
    pub annotation_sha256: String,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn format_err(what: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        what,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes RIFF float32 audio, channels interleaved.
pub fn write_wav(path: &Path, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for t in 0..audio.num_samples() {
        for ch in &audio.samples {
            w.write_sample(ch[t] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<MultichannelAudio> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let m = spec.channels as usize;
    let mut samples = vec![Vec::with_capacity(r.len() as usize / m.max(1)); m];
    match spec.sample_format {
        hound::SampleFormat::Float => {
            for (i, s) in r.samples::<f32>().enumerate() {
                samples[i % m].push(s? as f64);
            }
        }
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            for (i, s) in r.samples::<i32>().enumerate() {
                samples[i % m].push(s? as f64 / scale);
            }
        }
    }
    MultichannelAudio::new(samples, spec.sample_rate)
}

/// One line per frame: `frame_index azimuth_deg active_flag`.
pub fn write_annotation(path: &Path, truth: &DoaTrack) -> Result<()> {
    let mut out = String::new();
    for l in 0..truth.len() {
        let az = truth.azimuth[l].map_or(f64::NAN, f64::to_degrees);
        out.push_str(&format!("{l} {az:.6} {}\n", u8::from(truth.active[l])));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_annotation(path: &Path) -> Result<DoaTrack> {
    let text = fs::read_to_string(path)?;
    let mut track = DoaTrack {
        azimuth: Vec::new(),
        active: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || format_err("annotation", path, format!("line {}: {line:?}", i + 1));
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
            return Err(bad());
        }
        let deg: f64 = f[1].parse().map_err(|_| bad())?;
        if !deg.is_nan() && !(0.0..180.0).contains(&deg) {
            return Err(format_err(
                "annotation",
                path,
                format!("line {}: azimuth {deg} outside [0, 180)", i + 1),
            ));
        }
        track
            .azimuth
            .push((!deg.is_nan()).then(|| deg.to_radians()));
        track.active.push(match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        });
    }
    Ok(track)
}

/// Persists a clip as `<name>.wav`, `<name>.txt` and `<name>.json` under `dir`.
pub fn write_scene(
    dir: &Path,
    name: &str,
    clip: &RenderedClip,
    domain: Domain,
    coverage_deg: [f64; 2],
) -> Result<SceneRecord> {
    fs::create_dir_all(dir)?;
    let wav = dir.join(format!("{name}.wav"));
    let annotation = dir.join(format!("{name}.txt"));
    write_wav(&wav, &clip.audio)?;
    write_annotation(&annotation, &clip.truth)?;
    let meta = SceneMeta {
        name: name.to_string(),
        domain,
        seed: clip.seed,
        room_m: clip.scene.room.dimensions,
        rt60_s: clip.scene.room.rt60,
        snr_db: clip.scene.snr_db,
        coverage_deg,
        duration_s: clip.scene.duration_s,
        array_origin_m: clip.scene.array.origin,
    };
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(SceneRecord {
        wav_sha256: sha256_file(&wav)?,
        annotation_sha256: sha256_file(&annotation)?,
        meta,
        wav,
        annotation,
    })
}

/// `name wav_sha256 annotation_sha256`, one record per line.
pub fn write_manifest(dir: &Path, records: &[SceneRecord]) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path)?;
    for r in records {
        writeln!(
            f,
            "{} {} {}",
            r.meta.name, r.wav_sha256, r.annotation_sha256
        )?;
    }
    Ok(path)
}

/// Reads a manifest and verifies every checksum.
pub fn read_manifest(dir: &Path) -> Result<Vec<SceneRecord>> {
    let path = dir.join(MANIFEST_NAME);
    let f = fs::File::open(&path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format_err(
                "manifest",
                &path,
                format!("line {}: expected 3 fields", i + 1),
            ));
        }
        let name = f[0];
        let wav = dir.join(format!("{name}.wav"));
        let annotation = dir.join(format!("{name}.txt"));
        let meta_path = dir.join(format!("{name}.json"));
        for (file, expected) in [(&wav, f[1]), (&annotation, f[2])] {
            let got = sha256_file(file)
                .map_err(|e| format_err("scene record", file, format!("{name}: {e}")))?;
            if got != expected {
                return Err(format_err(
                    "scene record",
                    file,
                    format!("{name}: checksum mismatch"),
                ));
            }
        }
        let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| format_err("scene record", &meta_path, format!("{name}: {e}")))?;
        out.push(SceneRecord {
            meta,
            wav,
            annotation,
            wav_sha256: f[1].to_string(),
            annotation_sha256: f[2].to_string(),
        });
    }
    Ok(out)
}

/// Loads every record of a dataset directory as model examples.
pub fn load_examples(dir: &Path, stride: usize) -> Result<Vec<(SceneRecord, Arc<Example>)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|r| {
            let audio = read_wav(&r.wav)?;
            let truth = read_annotation(&r.annotation)?;
            let ex = clip_example(&audio, &truth, stride)
                .map_err(|e| format_err("scene record", &r.wav, format!("{}: {e}", r.meta.name)))?;
            Ok((r, Arc::new(ex)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_across_splits_and_indices() {
        let a = clip_seed(0, "train", 0);
        assert_ne!(a, clip_seed(0, "train", 1));
        assert_ne!(a, clip_seed(0, "test", 0));
        assert_ne!(a, clip_seed(1, "train", 0));
        assert_eq!(a, clip_seed(0, "train", 0));
    }
}
