//! Sample selection criterion: informativeness (uncertainty times predicted
//! foreground volume) multiplied by representativeness (kernel density of
//! Wasserstein pair distances over the unlabeled pool).

pub mod density;
pub mod pca;
pub mod uncertainty;
pub mod wasserstein;

use serde::{Deserialize, Serialize};

pub use density::{density, fit_bases, pair_distance, PairDistanceMatrix, ReductionConfig};
pub use pca::{fit_pca, project_sample, PcaBasis};
pub use uncertainty::{
    abundance, criterion, entropy_map, informativeness, select_best, uncertainty_score, UncertaintyMap,
};
pub use wasserstein::{wasserstein_1d, wasserstein_lp_oracle};

use crate::error::{Error, Result};
use crate::model::{FeatureMap, SegModel};

/// Every term of the criterion for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub mu: f64,
    pub abundance: usize,
    pub zeta: f64,
    pub gamma: f64,
    pub s: f64,
}

/// Model-dependent part of the score: `(mu, abundance)`.
pub fn informativeness_terms(model: &SegModel, features: &FeatureMap) -> Result<(f64, usize)> {
    let p = model.predict_proba_features(features)?;
    let mu = uncertainty_score(&entropy_map(&p)?);
    Ok((mu, abundance(&p.argmax())))
}

/// Scores every id in `unlabeled`; `features[id]` are the features of
/// sample `id` and `distances` covers the whole pool.
pub fn score_candidates(
    model: &SegModel,
    features: &[&FeatureMap],
    unlabeled: &[usize],
    distances: &PairDistanceMatrix,
) -> Result<Vec<ScoreRow>> {
    unlabeled
        .iter()
        .map(|&id| {
            let f = *features
                .get(id)
                .ok_or_else(|| Error::precondition(format!("no features for sample {id}")))?;
            let (mu, fg) = informativeness_terms(model, f)?;
            let zeta = informativeness(mu, fg);
            let gamma = density(id, unlabeled, distances)?;
            Ok(ScoreRow {
                sample_id: id,
                mu,
                abundance: fg,
                zeta,
                gamma,
                s: criterion(zeta, gamma),
            })
        })
        .collect()
}
