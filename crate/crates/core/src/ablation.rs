//! Loss ablation ladder. Every rung starts from the same warm-up, so the
//! rungs differ only in the joint objective.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::eval::{cross_view_retrieval, extract_all, retrieval};
use crate::nets::archive::ParamArchive;
use crate::nets::ShapeConfig;
use crate::trainer::{LossSet, RunState, TrainConfig};
use crate::world::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    /// `None` evaluates the identity warm-up without joint training.
    pub losses: Option<LossSet>,
}

impl Rung {
    fn new(name: &str, losses: Option<LossSet>) -> Self {
        Rung {
            name: name.to_string(),
            losses,
        }
    }
}

/// The seven rungs, from the warm-up baseline to the full objective.
pub fn ladder() -> Vec<Rung> {
    let none = LossSet::none();
    vec![
        Rung::new("baseline", None),
        Rung::new("+gan", Some(LossSet { gan: true, ..none })),
        Rung::new("+vi_wogan", Some(LossSet { vi_wogan: true, ..none })),
        Rung::new("+vi_wogan+tda", Some(LossSet { vi_wogan: true, tda: true, ..none })),
        Rung::new("+gan+vi", Some(LossSet { gan: true, vi: true, ..none })),
        Rung::new("+vi_prime", Some(LossSet { gan: true, vi: true, vi_prime: true, ..none })),
        Rung::new("+vi_prime2", Some(LossSet::full())),
    ]
}

pub fn find_rung(name: &str) -> Option<Rung> {
    ladder().into_iter().find(|r| r.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub name: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub cross_view_map: f64,
    pub cross_view_rank1: f64,
    /// Cluster count at the last joint epoch.
    pub clusters: Option<usize>,
    pub seconds: f64,
}

/// Snapshots after each warm-up phase.
pub struct WarmStart {
    pub config: TrainConfig,
    pub shapes: ShapeConfig,
    pub dtype: DType,
    pub after_id: ParamArchive,
    pub after_gan: Option<ParamArchive>,
    pub records: Vec<Value>,
    pub seconds: f64,
}

impl WarmStart {
    /// Runs the identity warm-up and, if `with_gan`, the GAN warm-up.
    pub fn run(config: &TrainConfig, shapes: &ShapeConfig, dtype: DType, dataset: &Dataset, with_gan: bool) -> Result<Self> {
        let t = Instant::now();
        let mut state = RunState::new(config.clone(), shapes, dtype)?;
        state.warmup_identity(dataset)?;
        let after_id = state.to_archive()?;
        let after_gan = if with_gan {
            state.warmup_gan(dataset)?;
            Some(state.to_archive()?)
        } else {
            None
        };
        Ok(WarmStart {
            config: config.clone(),
            shapes: shapes.clone(),
            dtype,
            after_id,
            after_gan,
            records: state.log.records,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// A state ready for joint training with `losses`, optionally writing
    /// into `run_dir`.
    pub fn branch(&self, losses: Option<LossSet>, run_dir: Option<&Path>) -> Result<RunState> {
        let mut config = self.config.clone();
        if let Some(l) = losses {
            config.losses = l;
        }
        let needs_gan = losses.is_some_and(|l| l.needs_generation());
        let archive = match (&self.after_gan, needs_gan) {
            (Some(a), true) => a.clone(),
            (None, true) => {
                return Err(crate::Error::State("GAN warm-up was not run for this ladder".into()));
            }
            _ => self.after_id.clone(),
        };
        let mut state = RunState::from_archive(config, &self.shapes, self.dtype, archive)?;
        if let Some(dir) = run_dir {
            state.attach_run_dir(dir)?;
        }
        for r in &self.records {
            state.log.push(r.clone())?;
        }
        Ok(state)
    }
}

/// Retrieval scores for a trained state.
pub fn score(name: &str, state: &RunState, dataset: &Dataset, seconds: f64) -> Result<RungResult> {
    let feats = extract_all(&state.bundle, dataset, 32)?;
    let r = retrieval(&feats, dataset)?;
    let cv = cross_view_retrieval(&feats, dataset)?;
    Ok(RungResult {
        name: name.to_string(),
        seed: state.config.seed,
        map: r.map,
        rank1: r.rank(1),
        cross_view_map: cv.map,
        cross_view_rank1: cv.rank(1),
        clusters: state.labels.as_ref().map(|l| l.num_clusters),
        seconds,
    })
}

/// Trains one rung from `warm` and scores it.
pub fn run_rung(warm: &WarmStart, rung: &Rung, dataset: &Dataset, run_dir: Option<&Path>) -> Result<(RunState, RungResult)> {
    let t = Instant::now();
    let mut state = warm.branch(rung.losses, run_dir)?;
    if rung.losses.is_some() {
        state.joint_train(dataset)?;
    }
    log::info!("rung {} trained in {:.1}s", rung.name, t.elapsed().as_secs_f64());
    let result = score(&rung.name, &state, dataset, t.elapsed().as_secs_f64())?;
    Ok((state, result))
}

/// Runs `rungs` for one seed; rung `r` writes into `<run_dir>/<r.name>`.
pub fn run_ladder(
    config: &TrainConfig,
    shapes: &ShapeConfig,
    dataset: &Dataset,
    rungs: &[Rung],
    run_dir: Option<&Path>,
) -> Result<Vec<RungResult>> {
    let with_gan = rungs.iter().any(|r| r.losses.is_some_and(|l| l.needs_generation()));
    let warm = WarmStart::run(config, shapes, DType::F32, dataset, with_gan)?;
    let mut out = Vec::with_capacity(rungs.len());
    for rung in rungs {
        let dir = run_dir.map(|d| d.join(&rung.name));
        let (_, result) = run_rung(&warm, rung, dataset, dir.as_deref())?;
        out.push(result);
    }
    Ok(out)
}

/// Mean of each rung over seeds, in first-seen rung order.
pub fn mean_by_rung(results: &[RungResult]) -> Vec<RungResult> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&RungResult> = results.iter().filter(|r| r.name == name).collect();
            let n = rows.len() as f64;
            let mean = |f: fn(&RungResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            RungResult {
                name: name.to_string(),
                seed: 0,
                map: mean(|r| r.map),
                rank1: mean(|r| r.rank1),
                cross_view_map: mean(|r| r.cross_view_map),
                cross_view_rank1: mean(|r| r.cross_view_rank1),
                clusters: None,
                seconds: mean(|r| r.seconds),
            }
        })
        .collect()
}

pub fn table(results: &[RungResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>5} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}", "rung", "seed", "mAP", "R1", "xv mAP", "xv R1", "clusters", "seconds");
    for r in results {
        let clusters = r.clusters.map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>8.1}",
            r.name, r.seed, r.map, r.rank1, r.cross_view_map, r.cross_view_rank1, clusters, r.seconds
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_has_seven_valid_rungs() {
        let l = ladder();
        assert_eq!(l.len(), 7);
        assert!(l[0].losses.is_none());
        for r in &l[1..] {
            r.losses.unwrap().validate().unwrap();
        }
        assert_eq!(l[6].losses, Some(LossSet::full()));
        assert!(!l[3].losses.unwrap().needs_generation());
    }

    #[test]
    fn means_group_by_name() {
        let row = |name: &str, seed, map| RungResult {
            name: name.into(),
            seed,
            map,
            rank1: 1.0,
            cross_view_map: 0.0,
            cross_view_rank1: 0.0,
            clusters: Some(3),
            seconds: 1.0,
        };
        let m = mean_by_rung(&[row("a", 1, 0.2), row("b", 1, 0.5), row("a", 2, 0.4)]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].name, "a");
        assert!((m[0].map - 0.3).abs() < 1e-12);
    }
}
