//! Paired training runs that differ in one setting, compared on held-out
//! retrieval.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::Corpus;
use crate::error::{CopeError, Result};
use crate::evalsuite::{all_directions, export_embeddings, RetrievalReport, RECALL_KS};
use crate::trainer::{train, Sampling, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationGrid {
    /// Classification weight 0 against the configured weight.
    ClsLoss,
    /// Random batches against product-balanced batches.
    Sampling,
}

impl FromStr for AblationGrid {
    type Err = CopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls-loss" => Ok(Self::ClsLoss),
            "sampling" => Ok(Self::Sampling),
            other => Err(CopeError::config("grid", format!("`{other}` is not cls-loss or sampling"))),
        }
    }
}

/// The baseline and treatment configurations, in that order. A
/// classification weight of 0 in `base` is replaced by 1 for the treatment.
pub fn ablation_configs(base: &TrainConfig, grid: AblationGrid) -> [(String, TrainConfig); 2] {
    match grid {
        AblationGrid::ClsLoss => {
            let beta = if base.beta > 0.0 { base.beta } else { 1.0 };
            [
                ("beta=0".into(), TrainConfig { beta: 0.0, ..base.clone() }),
                (format!("beta={beta}"), TrainConfig { beta, ..base.clone() }),
            ]
        }
        AblationGrid::Sampling => [
            ("random".into(), TrainConfig { sampling: Sampling::Random, ..base.clone() }),
            ("balanced".into(), TrainConfig { sampling: Sampling::Balanced, ..base.clone() }),
        ],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub config: TrainConfig,
    pub reports: Vec<RetrievalReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub grid: AblationGrid,
    pub baseline: AblationArm,
    pub treatment: AblationArm,
    /// Directions where the treatment's R@1 is strictly higher.
    pub treatment_wins: usize,
}

impl AblationResult {
    /// Side-by-side R@1 per direction.
    pub fn to_table(&self) -> String {
        let (a, b) = (&self.baseline, &self.treatment);
        let mut s = format!("{:<10} {:>12} {:>12}\n", "direction", a.name, b.name);
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            let (x, y) = (ra.recall[&1], rb.recall[&1]);
            let _ = writeln!(s, "{:<10} {x:>12.4} {y:>12.4}", ra.direction());
        }
        let _ = writeln!(s, "{} wins {} of {}", b.name, self.treatment_wins, b.reports.len());
        s
    }
}

/// Trains one configuration on `train_set` and evaluates the six
/// directions on `test_set`.
pub fn train_and_evaluate(cfg: &TrainConfig, train_set: &Corpus, test_set: &Corpus) -> Result<Vec<RetrievalReport>> {
    let out = train(cfg, train_set, None, None)?;
    let table = export_embeddings(&out.model, test_set)?;
    all_directions(&table, &RECALL_KS)
}

pub fn run_ablation(base: &TrainConfig, grid: AblationGrid, train_set: &Corpus, test_set: &Corpus) -> Result<AblationResult> {
    let [(an, ac), (bn, bc)] = ablation_configs(base, grid);
    let ra = train_and_evaluate(&ac, train_set, test_set)?;
    let rb = train_and_evaluate(&bc, train_set, test_set)?;
    let treatment_wins = ra.iter().zip(&rb).filter(|(a, b)| b.recall[&1] > a.recall[&1]).count();
    Ok(AblationResult {
        grid,
        baseline: AblationArm { name: an, config: ac, reports: ra },
        treatment: AblationArm { name: bn, config: bc, reports: rb },
        treatment_wins,
    })
}
