use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{boxplot_stats, median, BoxplotStats};
use crate::adaptation::{adapt_loop, AdaptConfig, AdaptMode, StepRecord};
use crate::error::{arg_err, Result};
use crate::tracker::{evaluate_set, Example, FixedStream, SstModel};

/// One (mode, u, seed) result on a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: AdaptMode,
    pub u: f64,
    pub seed: u64,
    pub scene: String,
    pub mae_deg: f64,
    pub acc_pct: f64,
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub row: SweepRow,
    /// MAE of every scored test clip.
    pub per_clip_mae: Vec<f64>,
    pub best_epoch: u64,
    pub epochs_run: u64,
    pub best_val_mae: f64,
}

/// Clip sets shared by every run of a sweep.
pub struct SweepData<'a> {
    pub source: &'a [Arc<Example>],
    pub target: &'a [Arc<Example>],
    pub val: &'a [Arc<Example>],
    pub test: &'a [Arc<Example>],
    /// Label written to the `scene` column.
    pub scene: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub modes: Vec<AdaptMode>,
    pub u_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            modes: vec![AdaptMode::Da, AdaptMode::Iwda],
            u_values: super::PAPER_U_VALUES.to_vec(),
            seeds: (0..3).collect(),
        }
    }
}

impl SweepGrid {
    /// Runs in execution order. `so` ignores `u` and runs once per seed with `u = 0`.
    pub fn runs(&self) -> Vec<(AdaptMode, f64, u64)> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            let us: &[f64] = if mode == AdaptMode::So {
                &[0.0]
            } else {
                &self.u_values
            };
            for &u in us {
                for &seed in &self.seeds {
                    out.push((mode, u, seed));
                }
            }
        }
        out
    }
}

/// Adapts `pretrained` once per grid point and scores each result on the test set.
/// `on_step` sees every adaptation step of every run.
pub fn run_u_sweep(
    pretrained: &SstModel,
    data: &SweepData,
    base: &AdaptConfig,
    grid: &SweepGrid,
    on_step: &mut dyn FnMut((AdaptMode, f64, u64), &StepRecord, &[Arc<Example>]),
    on_run: &mut dyn FnMut(&SweepRun) -> Result<()>,
) -> Result<Vec<SweepRun>> {
    if data.test.is_empty() {
        return Err(arg_err!("sweep needs a nonempty test set"));
    }
    let mut out = Vec::new();
    for key @ (mode, u, seed) in grid.runs() {
        let cfg = AdaptConfig {
            mode,
            u,
            seed,
            ..base.clone()
        };
        let outcome = adapt_loop(
            pretrained,
            &mut FixedStream(data.source.to_vec()),
            &mut FixedStream(data.target.to_vec()),
            data.val,
            &cfg,
            &mut |_| Ok(()),
            &mut |rec, clips| on_step(key, rec, clips),
        )?;
        let eval = evaluate_set(&outcome.best, data.test, cfg.batch_size, cfg.exec)?;
        let run = SweepRun {
            row: SweepRow {
                mode,
                u,
                seed,
                scene: data.scene.to_string(),
                mae_deg: eval.pooled.mae_deg,
                acc_pct: eval.pooled.acc_pct,
            },
            per_clip_mae: eval.per_clip.iter().flatten().map(|m| m.mae_deg).collect(),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.epochs_run,
            best_val_mae: outcome.best_val_mae,
        };
        log::info!(
            "sweep {mode} u={u} seed={seed}: test mae {:.2} deg",
            run.row.mae_deg
        );
        on_run(&run)?;
        out.push(run);
    }
    Ok(out)
}

/// Seed medians of one (mode, u) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: AdaptMode,
    pub u: f64,
    pub median_mae_deg: f64,
    pub median_acc_pct: f64,
    pub runs: usize,
}

fn cells<T>(items: &[T], key: impl Fn(&T) -> (AdaptMode, f64)) -> Vec<((AdaptMode, f64), Vec<&T>)> {
    let mut out: Vec<((AdaptMode, f64), Vec<&T>)> = Vec::new();
    for it in items {
        let k = key(it);
        match out
            .iter_mut()
            .find(|(c, _)| c.0 == k.0 && c.1.to_bits() == k.1.to_bits())
        {
            Some((_, v)) => v.push(it),
            None => out.push((k, vec![it])),
        }
    }
    out
}

/// Per-(mode, u) medians across seeds, in first-appearance order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    cells(rows, |r| (r.mode, r.u))
        .into_iter()
        .map(|((mode, u), rs)| {
            let mae: Vec<f64> = rs.iter().map(|r| r.mae_deg).collect();
            let acc: Vec<f64> = rs.iter().map(|r| r.acc_pct).collect();
            SweepSummary {
                mode,
                u,
                median_mae_deg: median(&mae).expect("nonempty cell"),
                median_acc_pct: median(&acc).expect("nonempty cell"),
                runs: rs.len(),
            }
        })
        .collect()
}

/// Distribution of per-clip MAE for one method, pooled over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodBoxplot {
    pub mode: AdaptMode,
    pub u: f64,
    pub stats: BoxplotStats,
}

pub fn sweep_boxplots(runs: &[SweepRun]) -> Result<Vec<MethodBoxplot>> {
    cells(runs, |r| (r.row.mode, r.row.u))
        .into_iter()
        .map(|((mode, u), rs)| {
            let values: Vec<f64> = rs
                .iter()
                .flat_map(|r| r.per_clip_mae.iter().copied())
                .collect();
            Ok(MethodBoxplot {
                mode,
                u,
                stats: boxplot_stats(&values)?,
            })
        })
        .collect()
}

/// Comma-separated rows with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: AdaptMode, u: f64, seed: u64, mae: f64) -> SweepRow {
        SweepRow {
            mode,
            u,
            seed,
            scene: "t".into(),
            mae_deg: mae,
            acc_pct: 100.0 - mae,
        }
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let grid = SweepGrid {
            modes: vec![AdaptMode::Da, AdaptMode::Iwda],
            u_values: vec![0.0001, 0.001, 0.01, 0.05],
            seeds: vec![0, 1, 2],
        };
        assert_eq!(grid.runs().len(), 24);
        let with_so = SweepGrid {
            modes: vec![AdaptMode::So],
            ..grid
        };
        assert_eq!(with_so.runs().len(), 3);
    }

    #[test]
    fn medians_per_cell() {
        let rows = vec![
            row(AdaptMode::Da, 0.01, 0, 3.0),
            row(AdaptMode::Iwda, 0.01, 0, 1.0),
            row(AdaptMode::Da, 0.01, 1, 5.0),
            row(AdaptMode::Da, 0.01, 2, 4.0),
        ];
        let s = summarize_sweep(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(
            (s[0].mode, s[0].median_mae_deg, s[0].runs),
            (AdaptMode::Da, 4.0, 3)
        );
        assert_eq!(s[1].median_mae_deg, 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let rows = vec![
            row(AdaptMode::So, 0.0, 1, 2.5),
            row(AdaptMode::Iwda, 0.001, 2, 1.25),
        ];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("mode,u,seed,scene,mae_deg,acc_pct\n"));
        assert_eq!(read_sweep_csv(&path).unwrap(), rows);
    }
}
