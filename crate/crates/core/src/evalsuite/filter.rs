//! Threshold filtering of candidate product matches and triple assembly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::table::EmbeddingTable;
use crate::datamodel::Domain;

pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// A sample together with the product it is claimed to show and the
/// model's confidence in that match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub sample_id: String,
    pub product_id: String,
    pub domain: Domain,
    pub score: f64,
}

/// Keeps pairs scoring strictly above `threshold`.
pub fn bootstrap_filter(pairs: &[CandidatePair], threshold: f64) -> Vec<CandidatePair> {
    pairs.iter().filter(|p| p.score > threshold).cloned().collect()
}

/// Sample ids grouped by product and domain (indexed like
/// [`Domain::index`]), keeping only products present in all three domains.
pub fn aggregate_triples(pairs: &[CandidatePair]) -> BTreeMap<String, [BTreeSet<String>; 3]> {
    let mut groups: BTreeMap<String, [BTreeSet<String>; 3]> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.product_id.clone()).or_default()[p.domain.index()].insert(p.sample_id.clone());
    }
    groups.retain(|_, g| g.iter().all(|d| !d.is_empty()));
    groups
}

/// Scores every row against its claimed product: pages score 1, videos and
/// lives score their best cosine similarity to a page of the same product,
/// clamped to [0, 1]. Rows of products without a page score 0.
pub fn match_scores(table: &EmbeddingTable) -> Vec<CandidatePair> {
    let mut pages: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in table.rows_of(Domain::P) {
        pages.entry(table.meta(i).product_id.as_str()).or_default().push(i);
    }
    (0..table.len())
        .map(|i| {
            let m = table.meta(i);
            let score = if m.domain == Domain::P {
                1.0
            } else {
                pages
                    .get(m.product_id.as_str())
                    .map(|rows| rows.iter().map(|&p| table.dot(i, p)).fold(f64::NEG_INFINITY, f64::max))
                    .unwrap_or(0.0)
                    .clamp(0.0, 1.0)
            };
            CandidatePair {
                sample_id: m.sample_id.clone(),
                product_id: m.product_id.clone(),
                domain: m.domain,
                score,
            }
        })
        .collect()
}
