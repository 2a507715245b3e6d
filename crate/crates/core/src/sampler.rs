//! Training batch construction over complete page/video/live triples.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::datamodel::{Corpus, Domain, ProductEntry};
use crate::error::{CopeError, Result};

/// One training item: corpus positions of a page, a video and a live
/// sample of the same product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleItem {
    pub page: usize,
    pub video: usize,
    pub live: usize,
    pub product_id: String,
    pub class_index: usize,
}

impl TripleItem {
    pub fn sample(&self, domain: Domain) -> usize {
        match domain {
            Domain::P => self.page,
            Domain::V => self.video,
            Domain::L => self.live,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleBatch {
    pub items: Vec<TripleItem>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.class_index).collect()
    }
}

fn check_complete(corpus: &Corpus) -> Result<()> {
    if corpus.products().is_empty() {
        return Err(CopeError::Contract("corpus has no products".into()));
    }
    if !corpus.is_complete_triples() {
        let missing = corpus.incomplete_products();
        return Err(CopeError::Contract(format!(
            "products without all three domains: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// `count` picks from `pool`: distinct while the pool lasts, then cycling
/// through a fresh shuffle.
fn draw_distinct<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(pool.len());
        out.extend(index::sample(rng, pool.len(), take).iter().map(|i| pool[i]));
    }
    out
}

fn item(entry: &ProductEntry, product: &str, class_index: usize, picks: [usize; 3]) -> TripleItem {
    TripleItem {
        page: entry.samples(Domain::P)[picks[0]],
        video: entry.samples(Domain::V)[picks[1]],
        live: entry.samples(Domain::L)[picks[2]],
        product_id: product.to_string(),
        class_index,
    }
}

/// `n` items over products drawn uniformly; products repeat inside a batch
/// only when `n` exceeds the product count.
pub fn sample_batch_random<R: Rng + ?Sized>(corpus: &Corpus, n: usize, rng: &mut R) -> Result<TripleBatch> {
    check_complete(corpus)?;
    if n < 2 {
        return Err(CopeError::Contract(format!("batch size {n} is below 2")));
    }
    let products: Vec<(&String, &ProductEntry)> = corpus.products().iter().collect();
    let all: Vec<usize> = (0..products.len()).collect();
    let items = draw_distinct(&all, n, rng)
        .into_iter()
        .map(|p| {
            let (id, entry) = products[p];
            let picks = Domain::ALL.map(|d| rng.gen_range(0..entry.samples(d).len()));
            item(entry, id, p, picks)
        })
        .collect();
    Ok(TripleBatch { items })
}

/// `p` distinct products with `k` items each. Within a product the `k`
/// items use distinct samples of every domain as far as supply allows.
pub fn sample_batch_balanced<R: Rng + ?Sized>(corpus: &Corpus, p: usize, k: usize, rng: &mut R) -> Result<TripleBatch> {
    check_complete(corpus)?;
    let count = corpus.products().len();
    if p < 2 || k < 1 {
        return Err(CopeError::Contract(format!("need P >= 2 and K >= 1, got P={p} K={k}")));
    }
    if p > count {
        return Err(CopeError::Contract(format!("P={p} exceeds the {count} products available")));
    }
    let products: Vec<(&String, &ProductEntry)> = corpus.products().iter().collect();
    let mut chosen = index::sample(rng, count, p).into_vec();
    chosen.shuffle(rng);
    let mut items = Vec::with_capacity(p * k);
    for c in chosen {
        let (id, entry) = products[c];
        let per_domain = Domain::ALL.map(|d| {
            let pool: Vec<usize> = (0..entry.samples(d).len()).collect();
            draw_distinct(&pool, k, rng)
        });
        for j in 0..k {
            items.push(item(entry, id, c, [per_domain[0][j], per_domain[1][j], per_domain[2][j]]));
        }
    }
    Ok(TripleBatch { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_corpus, DomainCounts, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn corpus(products: usize, per: DomainCounts) -> Corpus {
        generate_synthetic_corpus(&SynthConfig {
            n_products: products,
            per_domain: per,
            frames_video: 1,
            frames_live: 1,
            image_size: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn check_alignment(c: &Corpus, b: &TripleBatch) {
        let classes = c.class_map();
        for it in &b.items {
            for d in Domain::ALL {
                let s = c.sample(it.sample(d));
                assert_eq!(s.domain, d);
                assert_eq!(s.product_id, it.product_id);
            }
            assert_eq!(classes.index_of(&it.product_id), Some(it.class_index));
        }
    }

    #[test]
    fn random_batches_are_seeded() {
        let c = corpus(100, DomainCounts::new(1, 2, 2));
        let a = sample_batch_random(&c, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_batch_random(&c, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        check_alignment(&c, &a);
    }

    #[test]
    fn random_batch_larger_than_catalogue() {
        let c = corpus(3, DomainCounts::new(1, 1, 1));
        let b = sample_batch_random(&c, 7, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 7);
        let mut counts = BTreeMap::new();
        for it in &b.items {
            *counts.entry(it.class_index).or_insert(0) += 1;
        }
        // every product appears before any appears a third time
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|&n| (2..=3).contains(&n)));
    }

    #[test]
    fn random_product_frequency_is_uniform() {
        let products = 20;
        let c = corpus(products, DomainCounts::new(1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0f64; products];
        let batches = 10_000;
        let n = 4;
        for _ in 0..batches {
            for it in sample_batch_random(&c, n, &mut rng).unwrap().items {
                counts[it.class_index] += 1.0;
            }
        }
        let expected = (batches * n) as f64 / products as f64;
        let chi2: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
        // 19 degrees of freedom: mean 19, sd sqrt(38); allow 3 sd
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn balanced_batch_shape() {
        let c = corpus(10, DomainCounts::new(2, 3, 3));
        let b = sample_batch_balanced(&c, 4, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 12);
        let mut counts = BTreeMap::new();
        for it in &b.items {
            *counts.entry(it.class_index).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&n| n == 3));
        check_alignment(&c, &b);

        let one = sample_batch_balanced(&c, 5, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let distinct: std::collections::BTreeSet<_> = one.items.iter().map(|i| i.class_index).collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn balanced_uses_distinct_videos_when_available() {
        let c = corpus(6, DomainCounts::new(1, 3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let b = sample_batch_balanced(&c, 3, 3, &mut rng).unwrap();
            for chunk in b.items.chunks(3) {
                let videos: std::collections::BTreeSet<_> = chunk.iter().map(|i| i.video).collect();
                let lives: std::collections::BTreeSet<_> = chunk.iter().map(|i| i.live).collect();
                assert_eq!(videos.len(), 3);
                assert_eq!(lives.len(), 3);
            }
        }
    }

    #[test]
    fn contract_errors() {
        let c = corpus(3, DomainCounts::new(1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch_balanced(&c, 4, 2, &mut rng), Err(CopeError::Contract(_))));
        assert!(matches!(sample_batch_random(&c, 1, &mut rng), Err(CopeError::Contract(_))));
        let partial: Vec<_> = c.samples().iter().filter(|s| !(s.product_id == "p0001" && s.domain == Domain::L)).cloned().collect();
        let partial = Corpus::from_samples(partial).unwrap();
        match sample_batch_random(&partial, 2, &mut rng) {
            Err(CopeError::Contract(m)) => assert!(m.contains("p0001")),
            other => panic!("{other:?}"),
        }
    }
}
