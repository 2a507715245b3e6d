//! Cross-domain retrieval metrics.
//!
//! Relevance is binary: a gallery item is relevant when it shares the
//! query's product. With `R` relevant items and relevant ranks
//! `r_1 < r_2 < ...` (1-based) in the ranked gallery:
//!
//! - `R@K` = 1 when `r_1 <= K`, else 0
//! - `Prec@K` = |{m : r_m <= K}| / K
//! - `AP@K` = sum over `r_m <= K` of (m / r_m), divided by min(K, R)
//! - `AR@K` (recall at K) = |{m : r_m <= K}| / R
//!
//! Every report value is the mean over scored queries and lies in [0, 1].
//! Queries without any relevant gallery item are left out of the means and
//! counted in `excluded_queries`; when no query can be scored the metrics
//! are all 0. When query and gallery domains coincide, a query never
//! retrieves its own row.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::table::{dot, EmbeddingTable};
use crate::datamodel::Domain;
use crate::error::{CopeError, Result};

/// Cutoffs for `R@K` and `R@mean`.
pub const RECALL_KS: [usize; 5] = [1, 5, 10, 20, 50];
/// Cutoffs for `mAP`, `mAR` and `Prec`.
pub const LIST_KS: [usize; 3] = [10, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub query_domain: Domain,
    pub gallery_domain: Domain,
    /// Scored queries.
    pub queries: usize,
    pub excluded_queries: usize,
    pub gallery_size: usize,
    pub recall: BTreeMap<usize, f64>,
    /// Mean of the `recall` values.
    pub r_mean: f64,
    pub map: BTreeMap<usize, f64>,
    pub mar: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
}

impl RetrievalReport {
    /// `P->V` style label.
    pub fn direction(&self) -> String {
        format!("{}->{}", self.query_domain, self.gallery_domain)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    fn values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (name, m) in [("R", &self.recall), ("mAP", &self.map), ("mAR", &self.mar), ("Prec", &self.precision)] {
            out.extend(m.iter().map(|(k, v)| (format!("{name}@{k}"), *v)));
        }
        out.push(("R@mean".into(), self.r_mean));
        out
    }

    /// Largest difference over all metric fields, or `None` when the two
    /// reports disagree on direction, counts or cutoffs.
    pub fn max_abs_diff(&self, other: &RetrievalReport) -> Option<f64> {
        let same_shape = self.query_domain == other.query_domain
            && self.gallery_domain == other.gallery_domain
            && self.queries == other.queries
            && self.excluded_queries == other.excluded_queries
            && self.gallery_size == other.gallery_size;
        let (a, b) = (self.values(), other.values());
        if !same_shape || a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
            return None;
        }
        Some(a.iter().zip(&b).map(|(x, y)| (x.1 - y.1).abs()).fold(0.0, f64::max))
    }

    /// Plain-text table with the same fields and values as the JSON form.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "direction         {}", self.direction());
        let _ = writeln!(s, "queries           {}", self.queries);
        let _ = writeln!(s, "excluded_queries  {}", self.excluded_queries);
        let _ = writeln!(s, "gallery_size      {}", self.gallery_size);
        for (name, v) in self.values() {
            let _ = writeln!(s, "{name:<17} {v:.6}");
        }
        s
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CopeError::Contract(format!("cutoffs must be non-empty and positive, got {ks:?}")));
    }
    Ok(())
}

/// Query and gallery rows for a direction, failing on empty sides.
fn sides(table: &EmbeddingTable, query: Domain, gallery: Domain) -> Result<(Vec<usize>, Vec<usize>)> {
    let q = table.rows_of(query);
    let g = table.rows_of(gallery);
    if q.is_empty() || g.is_empty() {
        return Err(CopeError::Contract(format!(
            "{query}->{gallery}: {} queries and {} gallery rows",
            q.len(),
            g.len()
        )));
    }
    Ok((q, g))
}

/// Ranking order: higher score first, then ascending sample id.
fn ranks_before(a: (f64, &str), b: (f64, &str)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Gallery row indices ordered by descending cosine similarity to `query`,
/// ties broken by ascending sample id.
pub fn rank_gallery(query: &[f32], gallery: &EmbeddingTable) -> Vec<usize> {
    let scores: Vec<f64> = (0..gallery.len()).map(|i| dot(query, gallery.row(i))).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| gallery.meta(a).sample_id.cmp(&gallery.meta(b).sample_id))
    });
    order
}

#[derive(Default)]
struct Sums {
    queries: usize,
    excluded: usize,
    recall: Vec<f64>,
    map: Vec<f64>,
    mar: Vec<f64>,
    precision: Vec<f64>,
}

impl Sums {
    fn new(ks: usize) -> Self {
        Self {
            recall: vec![0.0; ks],
            map: vec![0.0; LIST_KS.len()],
            mar: vec![0.0; LIST_KS.len()],
            precision: vec![0.0; LIST_KS.len()],
            ..Self::default()
        }
    }

    fn finish(self, query: Domain, gallery: Domain, gallery_size: usize, ks: &[usize]) -> RetrievalReport {
        let n = self.queries.max(1) as f64;
        let mean = |v: &[f64], keys: &[usize]| -> BTreeMap<usize, f64> { keys.iter().zip(v).map(|(&k, s)| (k, s / n)).collect() };
        let recall = mean(&self.recall, ks);
        let r_mean = recall.values().sum::<f64>() / recall.len() as f64;
        RetrievalReport {
            query_domain: query,
            gallery_domain: gallery,
            queries: self.queries,
            excluded_queries: self.excluded,
            gallery_size,
            recall,
            r_mean,
            map: mean(&self.map, &LIST_KS),
            mar: mean(&self.mar, &LIST_KS),
            precision: mean(&self.precision, &LIST_KS),
        }
    }
}

/// Retrieval metrics for one direction. `ks` are the `R@K` cutoffs.
pub fn retrieval_eval(table: &EmbeddingTable, query: Domain, gallery: Domain, ks: &[usize]) -> Result<RetrievalReport> {
    check_ks(ks)?;
    let (queries, items) = sides(table, query, gallery)?;
    let mut sums = Sums::new(ks.len());
    let mut scores = vec![0.0; items.len()];
    for &q in &queries {
        let qm = table.meta(q);
        for (s, &g) in scores.iter_mut().zip(&items) {
            *s = table.dot(q, g);
        }
        let active = |j: usize| items[j] != q;
        let relevant: Vec<usize> = (0..items.len())
            .filter(|&j| active(j) && table.meta(items[j]).product_id == qm.product_id)
            .collect();
        if relevant.is_empty() {
            sums.excluded += 1;
            continue;
        }
        sums.queries += 1;
        // 1-based rank of each relevant item: one plus the items ahead of it
        let mut ranks: Vec<usize> = relevant
            .iter()
            .map(|&j| {
                let key = (scores[j], table.meta(items[j]).sample_id.as_str());
                1 + (0..items.len())
                    .filter(|&i| active(i) && ranks_before((scores[i], table.meta(items[i]).sample_id.as_str()), key))
                    .count()
            })
            .collect();
        ranks.sort_unstable();
        for (s, &k) in sums.recall.iter_mut().zip(ks) {
            if ranks[0] <= k {
                *s += 1.0;
            }
        }
        let total = ranks.len();
        for (i, &k) in LIST_KS.iter().enumerate() {
            let hits = ranks.partition_point(|&r| r <= k);
            let ap: f64 = ranks[..hits].iter().enumerate().map(|(m, &r)| (m + 1) as f64 / r as f64).sum();
            sums.map[i] += ap / k.min(total) as f64;
            sums.mar[i] += hits as f64 / total as f64;
            sums.precision[i] += hits as f64 / k as f64;
        }
    }
    Ok(sums.finish(query, gallery, items.len(), ks))
}

/// The same report computed the slow way: raw cosine similarities, a
/// selection sort of the whole gallery, and a walk down the ranked list.
/// Meant for checking [`retrieval_eval`] on small tables.
pub fn metric_oracle(table: &EmbeddingTable, query: Domain, gallery: Domain, ks: &[usize]) -> Result<RetrievalReport> {
    check_ks(ks)?;
    let (queries, items) = sides(table, query, gallery)?;
    let mut sums = Sums::new(ks.len());
    for &q in &queries {
        let a = table.row(q);
        let mut list: Vec<(f64, String, bool)> = items
            .iter()
            .filter(|&&g| g != q)
            .map(|&g| {
                let b = table.row(g);
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    let (x, y) = (f64::from(*x), f64::from(*y));
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let m = table.meta(g);
                (ab / (aa.sqrt() * bb.sqrt()), m.sample_id.clone(), m.product_id == table.meta(q).product_id)
            })
            .collect();
        for i in 0..list.len() {
            let mut best = i;
            for j in i + 1..list.len() {
                if ranks_before((list[j].0, &list[j].1), (list[best].0, &list[best].1)) {
                    best = j;
                }
            }
            list.swap(i, best);
        }
        let total = list.iter().filter(|e| e.2).count();
        if total == 0 {
            sums.excluded += 1;
            continue;
        }
        sums.queries += 1;
        for (s, &k) in sums.recall.iter_mut().zip(ks) {
            if list.iter().take(k).any(|e| e.2) {
                *s += 1.0;
            }
        }
        for (i, &k) in LIST_KS.iter().enumerate() {
            let (mut hits, mut ap) = (0usize, 0.0);
            for (pos, e) in list.iter().take(k).enumerate() {
                if e.2 {
                    hits += 1;
                    ap += hits as f64 / (pos + 1) as f64;
                }
            }
            sums.map[i] += average_precision(ap, k, total);
            sums.mar[i] += hits as f64 / total as f64;
            sums.precision[i] += hits as f64 / k as f64;
        }
    }
    Ok(sums.finish(query, gallery, items.len(), ks))
}

/// Precision sum normalized by min(K, R). A query with no relevant items
/// contributes 0.
fn average_precision(precision_sum: f64, k: usize, relevant: usize) -> f64 {
    if relevant == 0 {
        0.0
    } else {
        precision_sum / k.min(relevant) as f64
    }
}

/// Reports for all six cross-domain directions.
pub fn all_directions(table: &EmbeddingTable, ks: &[usize]) -> Result<Vec<RetrievalReport>> {
    DIRECTIONS.iter().map(|&(q, g)| retrieval_eval(table, q, g, ks)).collect()
}

/// The six ordered pairs of distinct domains.
pub const DIRECTIONS: [(Domain, Domain); 6] = [
    (Domain::P, Domain::V),
    (Domain::V, Domain::P),
    (Domain::P, Domain::L),
    (Domain::L, Domain::P),
    (Domain::V, Domain::L),
    (Domain::L, Domain::V),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::table::RowMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn meta(id: &str, product: &str, domain: Domain) -> RowMeta {
        RowMeta {
            sample_id: id.into(),
            product_id: product.into(),
            domain,
        }
    }

    fn random_table(seed: u64, rows: usize, dim: usize, products: usize) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domains = [Domain::P, Domain::V, Domain::L];
        let mut data = Vec::new();
        let mut m = Vec::new();
        for i in 0..rows {
            data.push((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let p = rng.gen_range(0..products);
            let d = domains[rng.gen_range(0..3)];
            m.push(meta(&format!("s{i:04}"), &format!("p{p:03}"), d));
        }
        EmbeddingTable::new(dim, &data, m).unwrap()
    }

    /// One-hot-ish table: the query sits on axis 0 and each gallery row's
    /// similarity to it is chosen directly.
    fn table_from_scores(gallery: &[(f64, &str)]) -> EmbeddingTable {
        let mut rows = vec![vec![1.0, 0.0]];
        let mut m = vec![meta("q", "target", Domain::P)];
        for (i, (s, product)) in gallery.iter().enumerate() {
            rows.push(vec![*s, (1.0 - s * s).sqrt()]);
            m.push(meta(&format!("g{i:03}"), product, Domain::V));
        }
        EmbeddingTable::new(2, &rows, m).unwrap()
    }

    #[test]
    fn self_ranks_first() {
        let t = random_table(1, 20, 6, 5);
        let order = rank_gallery(t.row(7), &t);
        assert_eq!(order[0], 7);
    }

    #[test]
    fn identical_rows_order_by_sample_id() {
        let t = EmbeddingTable::new(
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            vec![meta("d", "x", Domain::V), meta("c", "x", Domain::V), meta("b", "x", Domain::V), meta("a", "x", Domain::V)],
        )
        .unwrap();
        assert_eq!(rank_gallery(&[0.0, 1.0], &t), vec![2, 1, 3, 0]);
    }

    #[test]
    fn ranking_matches_full_sort() {
        for seed in 0..10 {
            let t = random_table(seed, 5, 8, 2);
            let q = random_table(seed + 100, 1, 8, 1);
            let mut expect: Vec<(f64, String, usize)> = (0..5)
                .map(|i| {
                    let s: f64 = q.row(0).iter().zip(t.row(i)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                    (-s, t.meta(i).sample_id.clone(), i)
                })
                .collect();
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = expect.into_iter().map(|e| e.2).collect();
            assert_eq!(rank_gallery(q.row(0), &t), expect);
        }
    }

    #[test]
    fn first_relevant_ranks_one_four_eleven() {
        // three queries, each with one relevant item at rank 1, 4 and 11
        let mut rows = Vec::new();
        let mut m = Vec::new();
        for (qi, rank) in [1usize, 4, 11].iter().enumerate() {
            let axis = qi * 2;
            let mut q = vec![0.0; 6];
            q[axis] = 1.0;
            rows.push(q);
            m.push(meta(&format!("q{qi}"), &format!("p{qi}"), Domain::P));
            for pos in 1..=12 {
                let s = 1.0 - pos as f64 * 0.01;
                let mut g = vec![0.0; 6];
                g[axis] = s;
                g[axis + 1] = (1.0 - s * s).sqrt();
                let product = if pos == *rank { format!("p{qi}") } else { format!("other{qi}_{pos}") };
                rows.push(g);
                m.push(meta(&format!("g{qi}_{pos:02}"), &product, Domain::V));
            }
        }
        let t = EmbeddingTable::new(6, &rows, m).unwrap();
        let r = retrieval_eval(&t, Domain::P, Domain::V, &[1, 5, 10, 20]).unwrap();
        // other queries' galleries are orthogonal and rank below
        assert!((r.recall[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[&5] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[&10] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[&20] - 1.0).abs() < 1e-12);
        assert!((r.r_mean - (1.0 / 3.0 + 2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn published_recall_rows_average_to_r_mean() {
        let mean = |v: [f64; 5]| v.iter().sum::<f64>() / 5.0;
        let clip4clip = mean([59.06, 79.31, 86.02, 91.01, 95.03]);
        assert!((clip4clip - 82.086).abs() < 1e-9);
        assert!((clip4clip - 82.08).abs() <= 0.02);
    }

    #[test]
    fn unique_products_against_themselves_score_zero() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let m = (0..5).map(|i| meta(&format!("s{i}"), &format!("p{i}"), Domain::V)).collect();
        let t = EmbeddingTable::new(2, &rows, m).unwrap();
        for report in [
            retrieval_eval(&t, Domain::V, Domain::V, &RECALL_KS).unwrap(),
            metric_oracle(&t, Domain::V, Domain::V, &RECALL_KS).unwrap(),
        ] {
            assert!(report.recall.values().all(|&v| v == 0.0));
            assert_eq!(report.queries, 0);
            assert_eq!(report.excluded_queries, 5);
            assert_eq!(report.gallery_size, 5);
        }
    }

    #[test]
    fn single_relevant_at_top() {
        let t = table_from_scores(&[(0.9, "target"), (0.5, "a"), (0.1, "b")]);
        for r in [
            retrieval_eval(&t, Domain::P, Domain::V, &[1]).unwrap(),
            metric_oracle(&t, Domain::P, Domain::V, &[1]).unwrap(),
        ] {
            assert_eq!(r.recall[&1], 1.0);
            assert!((r.map[&10] - 1.0).abs() < 1e-12);
            assert!((r.precision[&10] - 0.1).abs() < 1e-12);
            assert!((r.mar[&10] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn average_precision_by_hand() {
        // relevant at ranks 2 and 3 of 4: AP = (1/2 + 2/3) / 2
        let t = table_from_scores(&[(0.9, "a"), (0.8, "target"), (0.7, "target"), (0.1, "b")]);
        let r = retrieval_eval(&t, Domain::P, Domain::V, &[1, 2]).unwrap();
        let ap = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((r.map[&10] - ap).abs() < 1e-12);
        assert!((r.precision[&10] - 0.2).abs() < 1e-12);
        assert_eq!(r.recall[&1], 0.0);
        assert_eq!(r.recall[&2], 1.0);
        assert_eq!(average_precision(3.0, 10, 0), 0.0);
    }

    #[test]
    fn empty_sides_and_bad_cutoffs() {
        let t = random_table(3, 10, 4, 3);
        let only_v = t.relabel(|m| RowMeta { domain: Domain::V, ..m.clone() });
        assert!(matches!(retrieval_eval(&only_v, Domain::P, Domain::V, &[1]), Err(CopeError::Contract(_))));
        assert!(matches!(retrieval_eval(&t, Domain::P, Domain::V, &[]), Err(CopeError::Contract(_))));
        assert!(matches!(retrieval_eval(&t, Domain::P, Domain::V, &[0, 1]), Err(CopeError::Contract(_))));
    }

    #[test]
    fn report_json_and_table_agree() {
        let t = random_table(5, 60, 4, 6);
        let r = retrieval_eval(&t, Domain::P, Domain::L, &RECALL_KS).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: RetrievalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let table = r.to_table();
        assert!(table.contains("P->L"));
        for (name, v) in r.values() {
            assert!(table.contains(&format!("{name:<17} {v:.6}")));
        }
    }

    #[test]
    fn six_directions() {
        let t = random_table(8, 90, 4, 5);
        let reports = all_directions(&t, &RECALL_KS).unwrap();
        let names: Vec<String> = reports.iter().map(|r| r.direction()).collect();
        assert_eq!(names, ["P->V", "V->P", "P->L", "L->P", "V->L", "L->V"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn oracle_agrees(seed in 0u64..10_000, rows in 3usize..200, dim in 1usize..64, products in 1usize..30) {
            let t = random_table(seed, rows, dim, products);
            for (q, g) in DIRECTIONS.iter().copied().chain([(Domain::V, Domain::V)]) {
                let (Ok(a), Ok(b)) = (retrieval_eval(&t, q, g, &RECALL_KS), metric_oracle(&t, q, g, &RECALL_KS)) else {
                    continue;
                };
                let diff = a.max_abs_diff(&b);
                prop_assert!(diff.is_some_and(|d| d <= 1e-10), "{q}->{g}: {diff:?}");
            }
        }

        #[test]
        fn recall_is_monotone_and_bounded(seed in 0u64..10_000, rows in 6usize..150, products in 1usize..20) {
            let t = random_table(seed, rows, 5, products);
            for (q, g) in DIRECTIONS {
                let Ok(r) = retrieval_eval(&t, q, g, &RECALL_KS) else { continue };
                let vals: Vec<f64> = r.recall.values().copied().collect();
                prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
                for (_, v) in r.values() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn positive_rescaling_keeps_rankings(seed in 0u64..10_000, scales in prop::collection::vec(0.01f64..100.0, 30)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let m: Vec<RowMeta> = (0..30).map(|i| meta(&format!("s{i:02}"), &format!("p{}", i % 7), Domain::ALL[i % 3])).collect();
            let scaled: Vec<Vec<f64>> = raw.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
            let a = EmbeddingTable::new(6, &raw, m.clone()).unwrap();
            let b = EmbeddingTable::new(6, &scaled, m).unwrap();
            for i in 0..30 {
                prop_assert_eq!(rank_gallery(a.row(i), &a), rank_gallery(b.row(i), &b));
            }
        }

        #[test]
        fn directions_share_one_code_path(seed in 0u64..10_000, rows in 10usize..120) {
            // swapping the P and V labels swaps the P->V and V->P reports
            let t = random_table(seed, rows, 4, 8);
            let swap = |d: Domain| match d {
                Domain::P => Domain::V,
                Domain::V => Domain::P,
                Domain::L => Domain::L,
            };
            let s = t.relabel(|m| RowMeta { domain: swap(m.domain), ..m.clone() });
            for (q, g) in DIRECTIONS {
                let (Ok(a), Ok(b)) = (retrieval_eval(&t, q, g, &RECALL_KS), retrieval_eval(&s, swap(q), swap(g), &RECALL_KS)) else {
                    continue;
                };
                prop_assert_eq!(&a.recall, &b.recall);
                prop_assert_eq!(&a.map, &b.map);
                prop_assert_eq!(a.queries, b.queries);
            }
        }
    }
}
