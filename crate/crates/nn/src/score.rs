//! Batch scoring of manifests.

use accent_core::frontend::{FeatureMatrix, FrontendConfig};
use accent_core::Manifest;

use crate::model::Classifier;
use crate::trainer::{FeatureSource, ManifestSource};
use crate::NnError;

/// Largest tolerated fraction of records whose audio is missing.
pub const MAX_MISSING_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    /// `(utt_id, log p(bona) - log p(spoof))` in manifest order.
    pub scores: Vec<(String, f64)>,
    pub missing: Vec<String>,
}

/// Score every record with centre-cropped features. Records whose audio is
/// absent are skipped and listed, unless they exceed
/// [`MAX_MISSING_FRACTION`] of the manifest.
pub fn score_manifest(
    model: &Classifier,
    manifest: &Manifest,
    frontend: &FrontendConfig,
    batch_size: usize,
) -> Result<ScoreOutput, NnError> {
    let source = ManifestSource::evaluation(manifest.clone(), frontend);
    let (present, missing): (Vec<usize>, Vec<usize>) =
        (0..source.len()).partition(|&i| source.audio_path(i).exists());
    if missing.len() as f64 > MAX_MISSING_FRACTION * manifest.len() as f64 {
        return Err(NnError::MissingAudio {
            missing: missing.len(),
            total: manifest.len(),
        });
    }
    let mut scores = Vec::with_capacity(present.len());
    for chunk in present.chunks(batch_size.max(1)) {
        let feats: Vec<FeatureMatrix> = chunk
            .iter()
            .map(|&i| source.features(i, 0))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let s = model.scores(&refs)?;
        scores.extend(chunk.iter().zip(s).map(|(&i, v)| (source.id(i).to_string(), v)));
    }
    Ok(ScoreOutput {
        scores,
        missing: missing.iter().map(|&i| source.id(i).to_string()).collect(),
    })
}
