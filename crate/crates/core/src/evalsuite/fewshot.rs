//! One-shot product classification against randomly drawn anchors.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::table::EmbeddingTable;
use crate::datamodel::Domain;
use crate::error::{CopeError, Result};
use crate::seeds::{rng_for, STREAM_ANCHORS};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub anchor_domain: Domain,
    pub query_domain: Domain,
    pub seed: u64,
    pub queries: usize,
    /// Number of candidate products, one anchor each.
    pub products: usize,
    /// Top-1 accuracy of every repeat.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repeats; 0 for a single repeat.
    pub sd: f64,
}

impl FewShotReport {
    pub fn to_table(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        format!(
            "direction   {}->{}\nseed        {}\nqueries     {}\nproducts    {}\naccuracies  {}\nmean        {:.6}\nsd          {:.6}\n",
            self.query_domain,
            self.anchor_domain,
            self.seed,
            self.queries,
            self.products,
            accs.join(" "),
            self.mean,
            self.sd
        )
    }
}

/// Each repeat draws one anchor row per product from `anchor` (seeded by
/// `seed` and the repeat number) and labels every `query` row with the
/// product of its most similar anchor; ties go to the anchor with the
/// smaller sample id. Products that only appear on the anchor side still
/// compete as distractors.
pub fn few_shot_eval(
    table: &EmbeddingTable,
    anchor: Domain,
    query: Domain,
    seed: u64,
    repeats: usize,
) -> Result<FewShotReport> {
    if anchor == query {
        return Err(CopeError::Contract(format!("anchor and query domains are both {anchor}")));
    }
    if repeats == 0 {
        return Err(CopeError::Contract("repeats must be at least 1".into()));
    }
    let queries = table.rows_of(query);
    if queries.is_empty() {
        return Err(CopeError::Contract(format!("no {query} rows to classify")));
    }
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in table.rows_of(anchor) {
        pools.entry(table.meta(i).product_id.as_str()).or_default().push(i);
    }
    let mut missing: Vec<&str> = queries
        .iter()
        .map(|&q| table.meta(q).product_id.as_str())
        .filter(|p| !pools.contains_key(p))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(CopeError::Contract(format!(
            "products without a {anchor} anchor: {}",
            missing.join(", ")
        )));
    }

    let mut accuracies = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = rng_for(seed, &[STREAM_ANCHORS, r as u64]);
        let mut anchors: Vec<usize> = pools.values().map(|rows| rows[rng.gen_range(0..rows.len())]).collect();
        anchors.sort_by(|&a, &b| table.meta(a).sample_id.cmp(&table.meta(b).sample_id));
        let correct = queries
            .iter()
            .filter(|&&q| {
                let mut best = anchors[0];
                let mut best_score = table.dot(q, best);
                for &a in &anchors[1..] {
                    let s = table.dot(q, a);
                    if s > best_score {
                        best = a;
                        best_score = s;
                    }
                }
                table.meta(best).product_id == table.meta(q).product_id
            })
            .count();
        accuracies.push(correct as f64 / queries.len() as f64);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let sd = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(FewShotReport {
        anchor_domain: anchor,
        query_domain: query,
        seed,
        queries: queries.len(),
        products: pools.len(),
        accuracies,
        mean,
        sd,
    })
}
