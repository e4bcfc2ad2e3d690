//! Conflict screening: diagonal Fisher scores on new-stage data, measured
//! through the frozen reference model, turned into per-scalar drop
//! probabilities for an inverted-dropout mask over that reference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::rng::Rng;
use crate::tape::Gradients;

pub const FISHER_HEADER: &str = "DRIFTFORGE-FISHER-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub ema_beta: f64,
    pub decay_gamma: f64,
    pub p_max: f64,
    pub epsilon: f64,
    /// Carry the accumulator into the next stage instead of resetting it.
    pub persist_fisher: bool,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            ema_beta: 0.9,
            decay_gamma: 0.9,
            p_max: 0.3,
            epsilon: 1e-8,
            persist_fisher: false,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("ema_beta {} not in [0,1)", self.ema_beta)));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::Config(format!("decay_gamma {} not in (0,1]", self.decay_gamma)));
        }
        if !(0.0..1.0).contains(&self.p_max) {
            return Err(Error::Config(format!("p_max {} not in [0,1)", self.p_max)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-tensor Fisher accumulators mirroring a parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState {
    pub config: ScreeningConfig,
    scores: ParamSet,
}

impl FisherState {
    pub fn new(layout: &ParamSet, config: ScreeningConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            scores: layout.zeros_like(),
        })
    }

    pub fn scores(&self) -> &ParamSet {
        &self.scores
    }

    /// Overwrites the scores with a precomputed, same-layout estimate.
    pub fn replace_scores(&mut self, scores: ParamSet) -> Result<()> {
        if !scores.same_layout(&self.scores) {
            return Err(Error::shape("fisher", "replacement scores do not mirror the parameter layout"));
        }
        if scores.iter().any(|(_, t)| t.data().iter().any(|&v| !(v >= 0.0))) {
            return Err(Error::Invalid("Fisher scores must be non-negative".into()));
        }
        self.scores = scores;
        Ok(())
    }

    /// `F ← βF + (1−β)g²`. Every tracked tensor must be present with a matching shape.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        let beta = self.config.ema_beta;
        for (name, f) in self.scores.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::shape("accumulate_fisher", format!("no gradient for `{name}`")))?;
            if g.shape() != f.shape() {
                return Err(Error::shape(
                    "accumulate_fisher",
                    format!("`{name}`: gradient {:?} vs state {:?}", g.shape(), f.shape()),
                ));
            }
            for (fi, gi) in f.data_mut().iter_mut().zip(g.data()) {
                *fi = beta * *fi + (1.0 - beta) * gi * gi;
            }
        }
        Ok(())
    }

    /// `F ← F + w·g²`, for one-pass estimates that average over batches.
    pub fn add_weighted_square(&mut self, grads: &Gradients, weight: f64) -> Result<()> {
        for (name, f) in self.scores.iter_mut() {
            let g = grads
                .get(name)
                .filter(|g| g.shape() == f.shape())
                .ok_or_else(|| Error::shape("fisher", format!("gradient for `{name}` missing or misshapen")))?;
            for (fi, gi) in f.data_mut().iter_mut().zip(g.data()) {
                *fi += weight * gi * gi;
            }
        }
        Ok(())
    }

    /// `F ← γF`.
    pub fn decay(&mut self) {
        let gamma = self.config.decay_gamma;
        for (_, f) in self.scores.iter_mut() {
            f.data_mut().iter_mut().for_each(|v| *v *= gamma);
        }
    }

    /// Min-max scaled per tensor: `p = (F − min) / (max − min + ε) · p_max`.
    pub fn mask_probabilities(&self) -> ParamSet {
        let (p_max, eps) = (self.config.p_max, self.config.epsilon);
        self.scores
            .iter()
            .map(|(name, f)| {
                let lo = f.data().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let scale = p_max / (hi - lo + eps);
                (name.clone(), f.map(|v| (v - lo) * scale))
            })
            .collect()
    }

    /// Adapts the accumulators to a grown layout; new rows start at zero.
    pub fn resize_to(&mut self, layout: &ParamSet) {
        let mut next = layout.zeros_like();
        for (name, t) in next.iter_mut() {
            if let Some(old) = self.scores.get(name) {
                if old.shape().len() == t.shape().len() && old.shape()[1..] == t.shape()[1..] && old.len() <= t.len() {
                    t.data_mut()[..old.len()].copy_from_slice(old.data());
                }
            }
        }
        self.scores = next;
    }

    pub fn reset(&mut self) {
        self.scores = self.scores.zeros_like();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend(FISHER_HEADER.as_bytes());
        out.push(b'\n');
        out.extend(self.scores.to_bytes());
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, config: ScreeningConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let head = FISHER_HEADER.len() + 1;
        if bytes.len() < head || &bytes[..head - 1] != FISHER_HEADER.as_bytes() {
            return Err(Error::Checkpoint(format!("missing `{FISHER_HEADER}` header")));
        }
        let (scores, used) = ParamSet::from_bytes(&bytes[head..])?;
        if used != bytes.len() - head {
            return Err(Error::Checkpoint("trailing bytes after Fisher records".into()));
        }
        if scores.iter().any(|(_, t)| t.data().iter().any(|&v| v < 0.0)) {
            return Err(Error::Checkpoint("negative Fisher score".into()));
        }
        config.validate()?;
        Ok(Self { config, scores })
    }
}

/// One sampled mask: keep flags (1 kept, 0 dropped) and the probabilities
/// they were drawn from, plus where the RNG stood when sampling began.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub keep: ParamSet,
    pub probabilities: ParamSet,
    pub seed: u64,
    pub counter: u128,
}

/// Masked copy of `reference`: each scalar becomes 0 with probability `p`,
/// otherwise `w / (1 − p)`.
pub fn apply_mask(reference: &ParamSet, probabilities: &ParamSet, rng: &mut Rng) -> Result<(ParamSet, MaskSample)> {
    if !reference.same_layout(probabilities) {
        return Err(Error::shape("apply_mask", "probabilities do not mirror the reference layout"));
    }
    let (seed, counter) = (rng.seed(), rng.counter());
    let mut masked = reference.clone();
    let mut keep = reference.zeros_like();
    for ((name, w), (_, k)) in masked.iter_mut().zip(keep.iter_mut()) {
        let p = probabilities.get(name).expect("same layout");
        for ((wi, ki), &pi) in w.data_mut().iter_mut().zip(k.data_mut()).zip(p.data()) {
            if !(0.0..1.0).contains(&pi) {
                return Err(Error::Invalid(format!("`{name}`: drop probability {pi} outside [0,1)")));
            }
            if rng.uniform() < pi {
                *wi = 0.0;
            } else {
                *wi /= 1.0 - pi;
                *ki = 1.0;
            }
        }
    }
    let sample = MaskSample {
        keep,
        probabilities: probabilities.clone(),
        seed,
        counter,
    };
    Ok((masked, sample))
}

/// The frozen reference model. Masking hands out copies; the stored
/// parameters never change while the reference lives.
#[derive(Debug, Clone)]
pub struct FrozenReference {
    params: ParamSet,
    hash: String,
    active: Option<MaskSample>,
}

impl FrozenReference {
    pub fn new(params: ParamSet) -> Self {
        let hash = params.sha256();
        Self {
            params,
            hash,
            active: None,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Hash taken when the reference was frozen.
    pub fn frozen_hash(&self) -> &str {
        &self.hash
    }

    /// Hash of the parameters as they are now.
    pub fn current_hash(&self) -> String {
        self.params.sha256()
    }

    pub fn is_masked(&self) -> bool {
        self.active.is_some()
    }

    pub fn apply_mask(&mut self, probabilities: &ParamSet, rng: &mut Rng) -> Result<ParamSet> {
        let (masked, sample) = apply_mask(&self.params, probabilities, rng)?;
        self.active = Some(sample);
        Ok(masked)
    }

    /// Ends the current mask; returns the sample that was in effect.
    pub fn restore(&mut self) -> Result<MaskSample> {
        self.active.take().ok_or(Error::RestoreWithoutApply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn layout(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p
    }

    fn grads(values: &[f64]) -> Gradients {
        let mut g = Gradients::default();
        g.insert("w".into(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        g
    }

    fn state_with(values: &[f64], cfg: ScreeningConfig) -> FisherState {
        let mut s = FisherState::new(&layout(values), cfg).unwrap();
        s.scores.get_mut("w").unwrap().data_mut().copy_from_slice(values);
        s
    }

    #[test]
    fn ema_substitution() {
        let mut s = state_with(&[1.0], ScreeningConfig::default());
        s.accumulate(&grads(&[2.0])).unwrap();
        assert!((s.scores.get("w").unwrap().data()[0] - 1.3).abs() < 1e-15);
        s.accumulate(&grads(&[0.0])).unwrap();
        assert!((s.scores.get("w").unwrap().data()[0] - 1.17).abs() < 1e-15);
    }

    #[test]
    fn accumulate_rejects_mismatch() {
        let mut s = state_with(&[1.0, 2.0], ScreeningConfig::default());
        assert!(s.accumulate(&grads(&[1.0])).is_err());
        assert!(s.accumulate(&Gradients::default()).is_err());
    }

    #[test]
    fn probability_substitution() {
        let cfg = ScreeningConfig {
            p_max: 0.2,
            epsilon: 1e-300,
            ..Default::default()
        };
        let p = state_with(&[0.0, 5.0, 10.0], cfg).mask_probabilities();
        let p = p.get("w").unwrap().data();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.1).abs() < 1e-15);
        assert!((p[2] - 0.2).abs() < 1e-15);

        let p = state_with(&[3.0; 4], ScreeningConfig::default()).mask_probabilities();
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masking_branches() {
        let reference = layout(&[4.0; 64]);
        let (masked, _) = apply_mask(&reference, &layout(&[0.0; 64]), &mut Rng::new(0)).unwrap();
        assert_eq!(masked, reference);
        let (masked, sample) = apply_mask(&reference, &layout(&[0.5; 64]), &mut Rng::new(0)).unwrap();
        for (v, k) in masked.get("w").unwrap().data().iter().zip(sample.keep.get("w").unwrap().data()) {
            assert!(*v == 0.0 && *k == 0.0 || *v == 8.0 && *k == 1.0);
        }
        assert!(apply_mask(&reference, &layout(&[1.0; 64]), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn restore_protocol() {
        let mut r = FrozenReference::new(layout(&[1.0, -2.0, 3.0]));
        assert!(matches!(r.restore(), Err(Error::RestoreWithoutApply)));
        let h0 = r.current_hash();
        for seed in 0..2 {
            let masked = r.apply_mask(&layout(&[0.3; 3]), &mut Rng::new(seed)).unwrap();
            assert!(r.is_masked());
            assert_ne!(masked.sha256(), h0);
            r.restore().unwrap();
            assert_eq!(r.current_hash(), h0);
            assert_eq!(r.frozen_hash(), h0);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let s = state_with(&[0.5, 0.25], ScreeningConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage_0.fisher");
        s.save(&path).unwrap();
        assert_eq!(FisherState::load(&path, ScreeningConfig::default()).unwrap(), s);
        std::fs::write(&path, b"junk").unwrap();
        assert!(FisherState::load(&path, ScreeningConfig::default()).is_err());
    }

    #[test]
    fn resize_keeps_old_rows() {
        let mut p = ParamSet::new();
        p.insert("e", Tensor::full(&[2, 3], 1.0));
        let mut s = FisherState::new(&p, ScreeningConfig::default()).unwrap();
        s.scores.get_mut("e").unwrap().data_mut().fill(2.0);
        let mut bigger = ParamSet::new();
        bigger.insert("e", Tensor::zeros(&[4, 3]));
        s.resize_to(&bigger);
        let e = s.scores.get("e").unwrap();
        assert_eq!(e.shape(), &[4, 3]);
        assert_eq!(&e.data()[..6], &[2.0; 6]);
        assert_eq!(&e.data()[6..], &[0.0; 6]);
    }

    #[test]
    fn config_bounds() {
        assert!(ScreeningConfig { p_max: 1.0, ..Default::default() }.validate().is_err());
        assert!(ScreeningConfig { decay_gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(ScreeningConfig { ema_beta: 1.0, ..Default::default() }.validate().is_err());
    }
}
