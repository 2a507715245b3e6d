//! Samples, corpora and their on-disk forms.

mod manifest;
mod patch;
mod synth;
mod tensorfile;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};

pub use manifest::{load_manifest, save_manifest, GENERATOR_SIDECAR};
pub use patch::{patchify, unpatchify};
pub use synth::{generate_synthetic_corpus, DomainCounts, SynthConfig, PAD_TOKEN};
pub use tensorfile::{read_tensor_file, write_tensor_file, RawTensor};

/// Media source of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Product page: one image plus a title.
    P,
    /// Short video.
    V,
    /// Live stream.
    L,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::P, Domain::V, Domain::L];

    pub fn index(self) -> usize {
        match self {
            Domain::P => 0,
            Domain::V => 1,
            Domain::L => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::P => "P",
            Domain::V => "V",
            Domain::L => "L",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = CopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Domain::P),
            "V" => Ok(Domain::V),
            "L" => Ok(Domain::L),
            other => Err(CopeError::config(
                "domain",
                format!("`{other}` is not one of P, V, L"),
            )),
        }
    }
}

/// A `T x H x W x 3` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Frames {
    pub const CHANNELS: usize = 3;

    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(CopeError::Shape(format!("empty clip {t}x{h}x{w}")));
        }
        if data.len() != t * h * w * Self::CHANNELS {
            return Err(CopeError::Shape(format!(
                "{} values do not fill a {t}x{h}x{w}x3 clip",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CopeError::Shape(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { t, h, w, data })
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixels of frame `t`, `H x W x 3` row-major.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w * Self::CHANNELS;
        &self.data[t * n..(t + 1) * n]
    }

    /// At most `n` frames taken at evenly spaced times (frame centres of
    /// `n` equal intervals). Clips that already fit are returned whole.
    pub fn sample_uniform(&self, n: usize) -> Frames {
        if n == 0 || self.t <= n {
            return self.clone();
        }
        let mut data = Vec::with_capacity(n * self.h * self.w * Self::CHANNELS);
        for i in 0..n {
            let t = ((2 * i + 1) * self.t) / (2 * n);
            data.extend_from_slice(self.frame(t));
        }
        Frames {
            t: n,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// Where a sample's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FramesRef {
    /// Re-rendered by the synthetic generator from this seed.
    Seed(u64),
    /// Raw tensor file, relative to the manifest directory.
    Path(String),
}

impl fmt::Display for FramesRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FramesRef::Seed(s) => write!(f, "seed:{s}"),
            FramesRef::Path(p) => f.write_str(p),
        }
    }
}

impl FromStr for FramesRef {
    type Err = CopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("seed:") {
            Some(seed) => seed
                .parse()
                .map(FramesRef::Seed)
                .map_err(|_| CopeError::config("frames_ref", format!("bad seed in `{s}`"))),
            None if s.is_empty() => Err(CopeError::config("frames_ref", "empty reference")),
            None => Ok(FramesRef::Path(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub product_id: String,
    pub category_id: u32,
    pub domain: Domain,
    pub frames: Frames,
    pub frames_ref: FramesRef,
    /// Title tokens; present exactly for product pages.
    pub text_tokens: Option<Vec<u32>>,
    pub gen_seed: Option<u64>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() || self.product_id.is_empty() {
            return Err(CopeError::Integrity("empty sample or product id".into()));
        }
        if self.domain == Domain::P && self.frames.num_frames() != 1 {
            return Err(CopeError::Integrity(format!(
                "product page {} has {} frames, expected 1",
                self.sample_id,
                self.frames.num_frames()
            )));
        }
        if self.text_tokens.is_some() != (self.domain == Domain::P) {
            return Err(CopeError::Integrity(format!(
                "sample {}: text tokens must be present exactly for product pages",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Per-product index into a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductEntry {
    pub category_id: u32,
    /// Sample positions per domain, ordered by sample id.
    pub by_domain: [Vec<usize>; 3],
}

impl ProductEntry {
    pub fn samples(&self, domain: Domain) -> &[usize] {
        &self.by_domain[domain.index()]
    }

    pub fn is_complete(&self) -> bool {
        self.by_domain.iter().all(|d| !d.is_empty())
    }
}

/// A validated collection of samples with product and category indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
    products: BTreeMap<String, ProductEntry>,
    categories: BTreeMap<u32, Vec<String>>,
    generator: Option<SynthConfig>,
}

impl Corpus {
    pub fn from_samples(mut samples: Vec<Sample>) -> Result<Self> {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in samples.windows(2) {
            if pair[0].sample_id == pair[1].sample_id {
                return Err(CopeError::Integrity(format!(
                    "duplicate sample_id `{}`",
                    pair[0].sample_id
                )));
            }
        }
        let mut products: BTreeMap<String, ProductEntry> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            let entry = products
                .entry(s.product_id.clone())
                .or_insert_with(|| ProductEntry {
                    category_id: s.category_id,
                    by_domain: Default::default(),
                });
            if entry.category_id != s.category_id {
                return Err(CopeError::Integrity(format!(
                    "product `{}` appears with categories {} and {}",
                    s.product_id, entry.category_id, s.category_id
                )));
            }
            entry.by_domain[s.domain.index()].push(i);
        }
        let mut categories: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for (pid, entry) in &products {
            categories
                .entry(entry.category_id)
                .or_default()
                .push(pid.clone());
        }
        Ok(Self {
            samples,
            products,
            categories,
            generator: None,
        })
    }

    pub(crate) fn with_generator(mut self, generator: Option<SynthConfig>) -> Self {
        self.generator = generator;
        self
    }

    /// Generator settings when the corpus (or part of it) is synthetic.
    pub fn generator(&self) -> Option<&SynthConfig> {
        self.generator.as_ref()
    }

    /// Samples in ascending `sample_id` order.
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn products(&self) -> &BTreeMap<String, ProductEntry> {
        &self.products
    }

    pub fn product(&self, product_id: &str) -> Option<&ProductEntry> {
        self.products.get(product_id)
    }

    pub fn categories(&self) -> &BTreeMap<u32, Vec<String>> {
        &self.categories
    }

    /// Every product has at least one sample in each of P, V and L.
    pub fn is_complete_triples(&self) -> bool {
        !self.products.is_empty() && self.products.values().all(ProductEntry::is_complete)
    }

    /// Products missing at least one domain.
    pub fn incomplete_products(&self) -> Vec<&str> {
        self.products
            .iter()
            .filter(|(_, e)| !e.is_complete())
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn class_map(&self) -> ClassMap {
        ClassMap::new(self.products.keys().cloned().collect())
    }

    pub fn max_frames(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.frames.num_frames())
            .max()
            .unwrap_or(0)
    }

    /// The samples accepted by `keep`, with the generator settings carried
    /// over.
    pub fn subset(&self, keep: impl Fn(&Sample) -> bool) -> Result<Corpus> {
        let kept = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        Ok(Corpus::from_samples(kept)?.with_generator(self.generator.clone()))
    }

    /// Splits off the last `per_domain` samples (by id) of every product and
    /// domain as a held-out corpus. Products with too few samples in a domain
    /// keep at least one sample on the training side.
    pub fn holdout_split(&self, per_domain: usize) -> Result<(Corpus, Corpus)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in self.products.values() {
            for idx in &entry.by_domain {
                let keep = idx.len().saturating_sub(per_domain).max(1.min(idx.len()));
                for (n, &i) in idx.iter().enumerate() {
                    let s = self.samples[i].clone();
                    if n < keep {
                        train.push(s);
                    } else {
                        test.push(s);
                    }
                }
            }
        }
        Ok((
            Corpus::from_samples(train)?.with_generator(self.generator.clone()),
            Corpus::from_samples(test)?.with_generator(self.generator.clone()),
        ))
    }
}

/// Product id to class index, assigned in lexicographic product order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    products: Vec<String>,
}

impl ClassMap {
    pub fn new(mut products: Vec<String>) -> Self {
        products.sort();
        products.dedup();
        Self { products }
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn index_of(&self, product_id: &str) -> Option<usize> {
        self.products
            .binary_search_by(|p| p.as_str().cmp(product_id))
            .ok()
    }

    pub fn product(&self, index: usize) -> &str {
        &self.products[index]
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }
}
