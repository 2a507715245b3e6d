//! Contrastive and classification objectives.
//!
//! Each function exists twice: a plain evaluator over `f64` slices that
//! follows the textbook formula one query at a time, and a graph builder
//! used for training. Tests hold the two against each other.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::Domain;
use crate::error::{CopeError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const NUM_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// One weight per similarity channel, in [`SimilarityChannel::ALL`] order.
    pub alpha: [f64; NUM_CHANNELS],
    /// Weight of the classification term.
    pub beta: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [1.0; NUM_CHANNELS],
            beta: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(CopeError::config("tau", format!("{} is not a positive temperature", self.tau)));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(CopeError::config("alpha", format!("{a} is not a finite non-negative weight")));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(CopeError::config("beta", format!("{} is not a finite non-negative weight", self.beta)));
        }
        Ok(())
    }
}

/// Which output of a pathway an embedding is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Vision,
    Text,
    Fused,
}

/// A (domain, representation) pair such as the page's fused embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Side {
    pub domain: Domain,
    pub repr: Representation,
}

impl Side {
    pub const fn new(domain: Domain, repr: Representation) -> Self {
        Self { domain, repr }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.repr {
            Representation::Vision => "vis",
            Representation::Text => "txt",
            Representation::Fused => "fus",
        };
        write!(f, "{}_{}", self.domain, r)
    }
}

const PAGE_FUSED: Side = Side::new(Domain::P, Representation::Fused);
const PAGE_VISION: Side = Side::new(Domain::P, Representation::Vision);
const PAGE_TEXT: Side = Side::new(Domain::P, Representation::Text);
const VIDEO: Side = Side::new(Domain::V, Representation::Vision);
const LIVE: Side = Side::new(Domain::L, Representation::Vision);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SimilarityChannel {
    /// Position in [`SimilarityChannel::ALL`], starting at 1.
    pub index: usize,
    pub query: Side,
    pub key: Side,
}

impl SimilarityChannel {
    pub const ALL: [SimilarityChannel; NUM_CHANNELS] = [
        SimilarityChannel { index: 1, query: PAGE_FUSED, key: VIDEO },
        SimilarityChannel { index: 2, query: PAGE_FUSED, key: LIVE },
        SimilarityChannel { index: 3, query: VIDEO, key: LIVE },
        SimilarityChannel { index: 4, query: PAGE_VISION, key: VIDEO },
        SimilarityChannel { index: 5, query: PAGE_TEXT, key: VIDEO },
        SimilarityChannel { index: 6, query: PAGE_VISION, key: LIVE },
        SimilarityChannel { index: 7, query: PAGE_TEXT, key: LIVE },
    ];

    /// Looks a channel up by its two sides, in either order.
    pub fn find(a: Side, b: Side) -> Result<SimilarityChannel> {
        Self::ALL
            .iter()
            .find(|c| (c.query == a && c.key == b) || (c.query == b && c.key == a))
            .copied()
            .ok_or_else(|| CopeError::Contract(format!("no similarity channel pairs {a} with {b}")))
    }

    pub fn name(&self) -> String {
        format!("{}~{}", self.query, self.key)
    }
}

/// Embeddings of one batch, every side `B x d` with row `i` belonging to
/// item `i`, plus optional classifier scores (`B x C`) per domain.
#[derive(Clone, Debug, Default)]
pub struct BatchEmbeddings {
    pub labels: Vec<usize>,
    pub sides: BTreeMap<Side, Tensor>,
    pub scores: Option<[Tensor; 3]>,
}

impl BatchEmbeddings {
    pub fn side(&self, side: Side) -> Result<&Tensor> {
        let t = self
            .sides
            .get(&side)
            .ok_or_else(|| CopeError::Contract(format!("batch has no {side} representation")))?;
        if t.rows() != self.labels.len() {
            return Err(CopeError::Contract(format!(
                "{side} has {} rows for {} labels",
                t.rows(),
                self.labels.len()
            )));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub channels: [f64; NUM_CHANNELS],
    pub cross_domain: f64,
    pub classification: f64,
    pub total: f64,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (normalized(a), normalized(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Contrastive loss of one query against `keys`, averaged over the keys
/// flagged positive. Inputs need not be normalized.
pub fn info_nce(query: &[f64], keys: &[Vec<f64>], positive: &[bool], tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(CopeError::config("tau", format!("{tau} is not a positive temperature")));
    }
    if keys.len() != positive.len() {
        return Err(CopeError::Shape(format!("{} keys, {} positive flags", keys.len(), positive.len())));
    }
    let logits: Vec<f64> = keys.iter().map(|k| cosine(query, k) / tau).collect();
    let lse = log_sum_exp(&logits);
    let pos: Vec<f64> = logits
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(l, _)| lse - l)
        .collect();
    if pos.is_empty() {
        return Err(CopeError::Contract("query has no positive key".into()));
    }
    Ok(pos.iter().sum::<f64>() / pos.len() as f64)
}

fn one_direction(q: &Tensor, k: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let keys = k.to_rows();
    let mut total = 0.0;
    for i in 0..q.rows() {
        let positive: Vec<bool> = labels.iter().map(|&l| l == labels[i]).collect();
        total += info_nce(q.row(i), &keys, &positive, tau)?;
    }
    Ok(total / q.rows() as f64)
}

/// Mean of both directions of one channel; items sharing a label are
/// positives of each other.
pub fn channel_loss(batch: &BatchEmbeddings, channel: SimilarityChannel, tau: f64) -> Result<f64> {
    let q = batch.side(channel.query)?;
    let k = batch.side(channel.key)?;
    if batch.labels.is_empty() {
        return Err(CopeError::Contract("empty batch".into()));
    }
    let fwd = one_direction(q, k, &batch.labels, tau)?;
    let bwd = one_direction(k, q, &batch.labels, tau)?;
    Ok(0.5 * (fwd + bwd))
}

pub fn channel_losses(batch: &BatchEmbeddings, tau: f64) -> Result<[f64; NUM_CHANNELS]> {
    let mut out = [0.0; NUM_CHANNELS];
    for (o, c) in out.iter_mut().zip(SimilarityChannel::ALL) {
        *o = channel_loss(batch, c, tau)?;
    }
    Ok(out)
}

pub fn cross_domain_loss(batch: &BatchEmbeddings, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let ch = channel_losses(batch, weights.tau)?;
    Ok(ch.iter().zip(&weights.alpha).map(|(l, a)| a * l).sum())
}

fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    log_sum_exp(scores) - scores[label]
}

/// Sum of the three per-domain cross-entropies of one item.
pub fn classification_loss(page: &[f64], video: &[f64], live: &[f64], label: usize) -> Result<f64> {
    let c = page.len();
    if video.len() != c || live.len() != c {
        return Err(CopeError::Shape("score vectors differ in length".into()));
    }
    if label >= c {
        return Err(CopeError::Contract(format!("label {label} is not below {c} classes")));
    }
    Ok(cross_entropy(page, label) + cross_entropy(video, label) + cross_entropy(live, label))
}

pub fn total_loss(batch: &BatchEmbeddings, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let channels = channel_losses(batch, weights.tau)?;
    let cross_domain = channels.iter().zip(&weights.alpha).map(|(l, a)| a * l).sum();
    let scores = batch
        .scores
        .as_ref()
        .ok_or_else(|| CopeError::Contract("batch has no classifier scores".into()))?;
    let mut cls = 0.0;
    for (i, &label) in batch.labels.iter().enumerate() {
        cls += classification_loss(scores[0].row(i), scores[1].row(i), scores[2].row(i), label)?;
    }
    let classification = cls / batch.labels.len() as f64;
    Ok(LossBreakdown {
        channels,
        cross_domain,
        classification,
        total: cross_domain + weights.beta * classification,
    })
}

/// Row-normalized multi-positive weights: `pos_ij / (B * npos_i)`.
fn positive_weights(q_labels: &[usize], k_labels: &[usize]) -> Tensor {
    let b = q_labels.len();
    let mut w = Tensor::zeros(b, k_labels.len());
    for (i, &li) in q_labels.iter().enumerate() {
        let n = k_labels.iter().filter(|&&l| l == li).count();
        for (j, &lj) in k_labels.iter().enumerate() {
            if lj == li {
                w.set(i, j, 1.0 / (b * n) as f64);
            }
        }
    }
    w
}

/// Graph form of [`channel_loss`] over raw (unnormalized) `B x d` inputs.
pub fn channel_loss_graph(g: &mut Graph, q: Var, k: Var, labels: &[usize], tau: f64) -> Var {
    let qn = g.l2_normalize_rows(q);
    let kn = g.l2_normalize_rows(k);
    let s = g.matmul_nt(qn, kn);
    let s = g.scale(s, 1.0 / tau);
    let st = g.matmul_nt(kn, qn);
    let st = g.scale(st, 1.0 / tau);
    let w = positive_weights(labels, labels);
    let fwd = g.softmax_xent(s, w.clone());
    let bwd = g.softmax_xent(st, w);
    g.lin_comb(vec![(fwd, 0.5), (bwd, 0.5)])
}

/// Graph form of the batch-averaged classification term; `scores` holds
/// one `B x C` matrix per domain.
pub fn classification_loss_graph(g: &mut Graph, scores: [Var; 3], labels: &[usize]) -> Var {
    let b = labels.len();
    let c = g.value(scores[0]).cols();
    let mut w = Tensor::zeros(b, c);
    for (i, &l) in labels.iter().enumerate() {
        w.set(i, l, 1.0 / b as f64);
    }
    let terms: Vec<(Var, f64)> = scores
        .iter()
        .map(|&s| (g.softmax_xent(s, w.clone()), 1.0))
        .collect();
    g.lin_comb(terms)
}

/// Graph nodes of every term of the objective.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub channels: [Var; NUM_CHANNELS],
    pub cross_domain: Var,
    pub classification: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            channels: self.channels.map(|v| g.value(v).scalar()),
            cross_domain: g.value(self.cross_domain).scalar(),
            classification: g.value(self.classification).scalar(),
            total: g.value(self.total).scalar(),
        }
    }
}

/// Builds the full objective from per-side embedding nodes and per-domain
/// score nodes.
pub fn total_loss_graph(
    g: &mut Graph,
    sides: &BTreeMap<Side, Var>,
    scores: [Var; 3],
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossNodes> {
    weights.validate()?;
    let mut channels = Vec::with_capacity(NUM_CHANNELS);
    for c in SimilarityChannel::ALL {
        let get = |s: Side| {
            sides
                .get(&s)
                .copied()
                .ok_or_else(|| CopeError::Contract(format!("batch has no {s} representation")))
        };
        let (q, k) = (get(c.query)?, get(c.key)?);
        channels.push(channel_loss_graph(g, q, k, labels, weights.tau));
    }
    let cross_domain = g.lin_comb(channels.iter().zip(&weights.alpha).map(|(&v, &a)| (v, a)).collect());
    let classification = classification_loss_graph(g, scores, labels);
    let total = g.lin_comb(vec![(cross_domain, 1.0), (classification, weights.beta)]);
    Ok(LossNodes {
        channels: channels.try_into().expect("seven channels"),
        cross_domain,
        classification,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn random_batch(seed: u64, labels: Vec<usize>, d: usize, classes: usize) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = labels.len();
        let mut sides = BTreeMap::new();
        for s in [PAGE_FUSED, PAGE_VISION, PAGE_TEXT, VIDEO, LIVE] {
            sides.insert(s, random_matrix(&mut rng, b, d));
        }
        let scores = [0, 1, 2].map(|_| random_matrix(&mut rng, b, classes));
        BatchEmbeddings {
            labels,
            sides,
            scores: Some(scores),
        }
    }

    #[test]
    fn channel_table() {
        use Domain::*;
        use Representation::*;
        let expected = [
            ((P, Fused), (V, Vision)),
            ((P, Fused), (L, Vision)),
            ((V, Vision), (L, Vision)),
            ((P, Vision), (V, Vision)),
            ((P, Text), (V, Vision)),
            ((P, Vision), (L, Vision)),
            ((P, Text), (L, Vision)),
        ];
        assert_eq!(SimilarityChannel::ALL.len(), expected.len());
        for (n, (c, (q, k))) in SimilarityChannel::ALL.iter().zip(expected).enumerate() {
            assert_eq!(c.index, n + 1);
            assert_eq!(c.query, Side::new(q.0, q.1));
            assert_eq!(c.key, Side::new(k.0, k.1));
        }
        assert!(matches!(
            SimilarityChannel::find(Side::new(V, Text), Side::new(L, Vision)),
            Err(CopeError::Contract(_))
        ));
        assert_eq!(
            SimilarityChannel::find(Side::new(L, Vision), Side::new(V, Vision)).unwrap().index,
            3
        );
    }

    #[test]
    fn uniform_similarities_give_log_of_key_count() {
        let q = vec![1.0, 0.0];
        for tau in [0.07, 1.0, 3.0] {
            let keys = vec![vec![0.3, 0.7]; 4];
            let l = info_nce(&q, &keys, &[true, false, false, false], tau).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn one_positive_one_negative() {
        let l = info_nce(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[true, false], 1.0).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn info_nce_errors() {
        let keys = vec![vec![1.0, 0.0]];
        assert!(matches!(info_nce(&[1.0, 0.0], &keys, &[false], 1.0), Err(CopeError::Contract(_))));
        assert!(matches!(info_nce(&[1.0, 0.0], &keys, &[true], 0.0), Err(CopeError::Config { .. })));
    }

    #[test]
    fn orthonormal_pairs_channel_value() {
        let e = Tensor::identity(2);
        let mut sides = BTreeMap::new();
        sides.insert(PAGE_FUSED, e.clone());
        sides.insert(VIDEO, e);
        let batch = BatchEmbeddings {
            labels: vec![0, 1],
            sides,
            scores: None,
        };
        let l = channel_loss(&batch, SimilarityChannel::ALL[0], 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!(matches!(
            channel_loss(&batch, SimilarityChannel::ALL[1], 1.0),
            Err(CopeError::Contract(_))
        ));
    }

    #[test]
    fn identical_embeddings_give_log_batch_size() {
        let e = Tensor::from_rows(&vec![vec![0.2, 0.5, -0.1]; 5]).unwrap();
        for labels in [vec![0; 5], vec![0, 1, 2, 3, 4]] {
            let mut sides = BTreeMap::new();
            sides.insert(VIDEO, e.clone());
            sides.insert(LIVE, e.clone());
            let batch = BatchEmbeddings {
                labels,
                sides,
                scores: None,
            };
            let l = channel_loss(&batch, SimilarityChannel::ALL[2], 0.07).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_selects_and_sums() {
        let batch = random_batch(1, vec![0, 1, 2, 3], 6, 4);
        let mut w = LossWeights {
            alpha: [0.0; 7],
            ..LossWeights::default()
        };
        assert_eq!(cross_domain_loss(&batch, &w).unwrap(), 0.0);
        w.alpha[0] = 1.0;
        assert_eq!(
            cross_domain_loss(&batch, &w).unwrap(),
            channel_loss(&batch, SimilarityChannel::ALL[0], w.tau).unwrap()
        );
        let all = cross_domain_loss(&batch, &LossWeights::default()).unwrap();
        let mut sum = 0.0;
        for c in SimilarityChannel::ALL {
            sum += channel_loss(&batch, c, 0.07).unwrap();
        }
        assert!((all - sum).abs() <= 1e-10);
    }

    #[test]
    fn uniform_logits_classification() {
        let u = vec![0.4; 10];
        let l = classification_loss(&u, &u, &u, 3).unwrap();
        assert!((l - 3.0 * 10f64.ln()).abs() < 1e-9);
        assert!(matches!(classification_loss(&u, &u, &u, 10), Err(CopeError::Contract(_))));
    }

    #[test]
    fn classification_decreases_towards_zero() {
        let others = vec![0.1, -0.3, 0.2];
        let mut prev = f64::INFINITY;
        for c in [0.0, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let s = vec![c, others[0], others[1], others[2]];
            let l = classification_loss(&s, &s, &s, 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-11);
    }

    #[test]
    fn breakdown_recombines_and_beta_zero() {
        let batch = random_batch(2, vec![0, 0, 1, 2, 2, 3], 5, 4);
        let w = LossWeights {
            alpha: [0.5, 1.0, 2.0, 0.0, 1.5, 1.0, 0.25],
            beta: 0.7,
            tau: 0.2,
        };
        let b = total_loss(&batch, &w).unwrap();
        let recombined: f64 = b.channels.iter().zip(&w.alpha).map(|(l, a)| a * l).sum::<f64>() + w.beta * b.classification;
        assert!((b.total - recombined).abs() <= 1e-10);
        let z = total_loss(&batch, &LossWeights { beta: 0.0, ..w }).unwrap();
        assert_eq!(z.total, z.cross_domain);
    }

    #[test]
    fn graph_matches_plain_evaluation() {
        let labels = vec![0, 0, 1, 2, 2, 3];
        let batch = random_batch(3, labels.clone(), 5, 4);
        let w = LossWeights {
            alpha: [1.0, 0.5, 2.0, 1.0, 0.3, 1.0, 1.0],
            beta: 0.8,
            tau: 0.1,
        };
        let plain = total_loss(&batch, &w).unwrap();
        let store = crate::params::ParamStore::new();
        let mut g = Graph::new(&store);
        let sides: BTreeMap<Side, Var> = batch.sides.iter().map(|(s, t)| (*s, g.input(t.clone()))).collect();
        let scores = batch.scores.clone().unwrap().map(|t| g.input(t));
        let nodes = total_loss_graph(&mut g, &sides, scores, &labels, &w).unwrap();
        let graph = nodes.breakdown(&g);
        for (a, b) in plain.channels.iter().zip(&graph.channels) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert!((plain.classification - graph.classification).abs() <= 1e-10);
        assert!((plain.total - graph.total).abs() <= 1e-10);
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let labels = vec![0, 1, 1, 2];
        let batch = random_batch(4, labels.clone(), 3, 3);
        let w = LossWeights {
            tau: 0.5,
            ..LossWeights::default()
        };
        let store = crate::params::ParamStore::new();
        let mut g = Graph::new(&store);
        let sides: BTreeMap<Side, Var> =
            batch.sides.iter().map(|(s, t)| (*s, g.input_with_grad(t.clone()))).collect();
        let scores = batch.scores.clone().unwrap().map(|t| g.input_with_grad(t));
        let nodes = total_loss_graph(&mut g, &sides, scores, &labels, &w).unwrap();
        let grads = g.backward(nodes.total);
        let h = 1e-6;
        for (side, var) in &sides {
            let analytic = grads.grad(*var).unwrap();
            for k in 0..analytic.len() {
                let mut up = batch.clone();
                up.sides.get_mut(side).unwrap().data_mut()[k] += h;
                let mut down = batch.clone();
                down.sides.get_mut(side).unwrap().data_mut()[k] -= h;
                let n = (total_loss(&up, &w).unwrap().total - total_loss(&down, &w).unwrap().total) / (2.0 * h);
                let e = crate::testutil::rel_err(analytic.data()[k], n);
                assert!(e <= 1e-5, "{side}[{k}] {e}");
            }
        }
        for (dom, var) in scores.iter().enumerate() {
            let analytic = grads.grad(*var).unwrap();
            for k in 0..analytic.len() {
                let mut up = batch.clone();
                up.scores.as_mut().unwrap()[dom].data_mut()[k] += h;
                let mut down = batch.clone();
                down.scores.as_mut().unwrap()[dom].data_mut()[k] -= h;
                let n = (total_loss(&up, &w).unwrap().total - total_loss(&down, &w).unwrap().total) / (2.0 * h);
                assert!(crate::testutil::rel_err(analytic.data()[k], n) <= 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn info_nce_is_nonnegative_and_scale_invariant(
            seed in 0u64..10_000,
            n in 2usize..8,
            scale in 0.01f64..100.0,
            tau in 0.05f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut pos = vec![false; n];
            pos[rng.gen_range(0..n)] = true;
            let l = info_nce(&q, &keys, &pos, tau).unwrap();
            prop_assert!(l >= 0.0);
            let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
            let mut ks = keys.clone();
            ks[0].iter_mut().for_each(|x| *x *= scale);
            prop_assert!((info_nce(&qs, &ks, &pos, tau).unwrap() - l).abs() < 1e-9);
        }

        #[test]
        fn closer_positive_means_lower_loss(
            seed in 0u64..10_000,
            c1 in -0.99f64..0.99,
            step in 0.001f64..0.5,
        ) {
            // the positive sits at angle acos(c) from the query in the plane
            // spanned by e0 and e1; negatives are fixed
            let c2 = (c1 + step).min(1.0);
            prop_assume!(c2 > c1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let negs: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let at = |c: f64| {
                let mut keys = vec![vec![c, (1.0 - c * c).sqrt(), 0.0]];
                keys.extend(negs.iter().cloned());
                info_nce(&[1.0, 0.0, 0.0], &keys, &[true, false, false, false], 0.3).unwrap()
            };
            prop_assert!(at(c2) < at(c1));
        }

        #[test]
        fn classification_is_shift_invariant(
            seed in 0u64..10_000,
            shift in -50.0f64..50.0,
            label in 0usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = |rng: &mut ChaCha8Rng| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
            let (p, vv, l) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let ps: Vec<f64> = p.iter().map(|x| x + shift).collect();
            let a = classification_loss(&p, &vv, &l, label).unwrap();
            let b = classification_loss(&ps, &vv, &l, label).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
