//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::io::SceneRecord;
use super::model::{Detector, SceneStep};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossTerms};
use crate::nn::{update_running_stats, AdamW, Grads};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub epoch: u32,
    pub tau: f64,
    /// Batch mean of the per-scene reports.
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
}

/// Scene order: one seeded permutation per epoch, concatenated.
pub fn batch_indices(n_scenes: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let start = step * batch;
    (start..start + batch)
        .map(|k| {
            let epoch = k / n_scenes;
            let mut order: Vec<usize> = (0..n_scenes).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            order[k % n_scenes]
        })
        .collect()
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut terms = LossTerms::default();
    let mut out = LossReport { terms, total: 0.0, n_fg: 0, n_pos: 0, n_roi: 0 };
    for r in reports {
        terms.sem += r.terms.sem / n;
        terms.vote += r.terms.vote / n;
        terms.cntr += r.terms.cntr / n;
        terms.bbox += r.terms.bbox / n;
        terms.cls += r.terms.cls / n;
        terms.rebox += r.terms.rebox / n;
        out.total += r.total / n;
        out.n_fg += r.n_fg;
        out.n_pos += r.n_pos;
        out.n_roi += r.n_roi;
    }
    out.terms = terms;
    out
}

pub struct Trainer<T: Real> {
    pub detector: Detector<T>,
    pub optimizer: AdamW,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(detector: Detector<T>) -> Self {
        let optimizer = AdamW::new(detector.config.optimizer());
        Self { detector, optimizer, step: 0 }
    }

    pub fn epoch(&self, n_scenes: usize) -> u32 {
        (self.step * self.detector.config.batch_size / n_scenes.max(1)) as u32
    }

    /// One optimizer step over the next batch.
    pub fn train_step(&mut self, scenes: &[SceneRecord]) -> Result<StepReport> {
        if scenes.is_empty() {
            return Err(Error::invalid("training needs at least one scene"));
        }
        let cfg = &self.detector.config;
        let epoch = self.epoch(scenes.len());
        let tau = cfg.tau(epoch);
        let idx = batch_indices(scenes.len(), cfg.batch_size, self.step, cfg.seed);
        let det = &self.detector;
        let steps: Vec<SceneStep<T>> = idx
            .par_iter()
            .map(|&i| det.scene_loss(&scenes[i], tau).map_err(|e| e.in_stage("train")))
            .collect::<Result<_>>()?;
        let mut grads = Grads::empty(det.params.len());
        for s in &steps {
            grads.accumulate(&s.grads);
        }
        grads.scale(T::of(1.0 / steps.len() as f64));
        let grad_norm = grads.clip_global_norm(cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clipped_norm = grads.global_norm();
        let momentum = cfg.norm_momentum;
        let reports: Vec<LossReport> = steps.iter().map(|s| s.report).collect();
        self.optimizer.step(&mut self.detector.params, &grads);
        for s in &steps {
            update_running_stats(&mut self.detector.params, &s.norm_stats, momentum);
        }
        let report = StepReport { step: self.step, epoch, tau, loss: mean_report(&reports), grad_norm, clipped_norm };
        self.step += 1;
        Ok(report)
    }
}

/// Trains a fresh detector for `config.steps` steps, calling `on_step` after each.
pub fn run_toy_train<T: Real>(
    scenes: &[SceneRecord],
    config: &RunConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(Detector<T>, Vec<StepReport>)> {
    for s in scenes {
        s.validate(config.n_class)?;
    }
    let mut trainer = Trainer::new(Detector::<T>::for_scenes(config.clone(), scenes)?);
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let r = trainer.train_step(scenes)?;
        on_step(&r);
        log.push(r);
    }
    Ok((trainer.detector, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, s, 3)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 2, 7, 3), batch_indices(10, 2, 7, 3));
    }
}
