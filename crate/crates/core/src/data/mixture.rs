//! Mixture weights and batch sampling.
//!
//! Image-bearing sources and text-only sources form two lanes, each with
//! its own normalized weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use super::manifest::{DatasetManifest, PairRecord, SourceKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lane {
    Pairs,
    Text,
}

impl Lane {
    fn admits(self, kind: SourceKind) -> bool {
        match self {
            Lane::Pairs => kind.has_images(),
            Lane::Text => kind == SourceKind::Text,
        }
    }
}

/// Normalized per-source weights; sources outside a lane carry 0 there.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub pairs: Vec<f64>,
    pub text: Vec<f64>,
}

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|w| w / total).collect()
    } else {
        raw
    }
}

impl MixtureSpec {
    /// Declared weights, or record counts for sources that declare none.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let lane_weights = |lane: Lane| {
            normalize(
                manifest
                    .sources
                    .iter()
                    .map(|s| if lane.admits(s.kind) { s.weight.unwrap_or(s.records.len() as f64) } else { 0.0 })
                    .collect(),
            )
        };
        let spec = MixtureSpec { pairs: lane_weights(Lane::Pairs), text: lane_weights(Lane::Text) };
        let has_pairs = manifest.sources.iter().any(|s| s.kind.has_images());
        if has_pairs && spec.pairs.iter().all(|&w| w == 0.0) {
            return Err(Error::Data("every image source has weight 0".into()));
        }
        let has_text = manifest.sources.iter().any(|s| s.kind == SourceKind::Text);
        if has_text && spec.text.iter().all(|&w| w == 0.0) {
            return Err(Error::Data("every text source has weight 0".into()));
        }
        Ok(spec)
    }

    /// Explicit weights for the given lane, normalized here.
    pub fn with_weights(manifest: &DatasetManifest, lane: Lane, weights: &[f64]) -> Result<Self> {
        if weights.len() != manifest.sources.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("one non-negative weight per source is required"));
        }
        let mut spec = Self::from_manifest(manifest).unwrap_or(MixtureSpec {
            pairs: vec![0.0; weights.len()],
            text: vec![0.0; weights.len()],
        });
        let masked: Vec<f64> = manifest
            .sources
            .iter()
            .zip(weights)
            .map(|(s, &w)| if lane.admits(s.kind) { w } else { 0.0 })
            .collect();
        if masked.iter().all(|&w| w == 0.0) {
            return Err(Error::Data("all mixture weights are zero".into()));
        }
        match lane {
            Lane::Pairs => spec.pairs = normalize(masked),
            Lane::Text => spec.text = normalize(masked),
        }
        Ok(spec)
    }

    pub fn lane(&self, lane: Lane) -> &[f64] {
        match lane {
            Lane::Pairs => &self.pairs,
            Lane::Text => &self.text,
        }
    }
}

/// `(source index, record index)` draws: source by weight, then uniform
/// within the source.
pub fn sample_indices(
    manifest: &DatasetManifest,
    mixture: &MixtureSpec,
    lane: Lane,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let weights: Vec<f64> = mixture
        .lane(lane)
        .iter()
        .zip(&manifest.sources)
        .map(|(&w, s)| if s.records.is_empty() { 0.0 } else { w })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::Data("all mixture weights are zero".into()))?;
    Ok((0..batch_size)
        .map(|_| {
            let s = dist.sample(rng);
            (s, rng.random_range(0..manifest.sources[s].records.len()))
        })
        .collect())
}

pub fn sample_batch<'m>(
    manifest: &'m DatasetManifest,
    mixture: &MixtureSpec,
    lane: Lane,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'m PairRecord>> {
    Ok(sample_indices(manifest, mixture, lane, batch_size, rng)?
        .into_iter()
        .map(|(s, r)| &manifest.sources[s].records[r])
        .collect())
}
