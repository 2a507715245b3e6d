//! Domain projections, page fusion and the shared classifier.

use serde::{Deserialize, Serialize};

use crate::datamodel::Domain;
use crate::error::{CopeError, Result};
use crate::graph::{AttentionSpec, Graph, Var};
use crate::nn::{Linear, MultiHeadAttention, Scope};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

/// Four independent affine maps: page vision, page text, video vision and
/// live vision.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    page_vision: Linear,
    page_text: Linear,
    video_vision: Linear,
    live_vision: Linear,
}

impl ProjectionSet {
    pub fn new(store: &mut ParamStore, dim: usize, seed: u64) -> Self {
        let mut s = Scope::new(store, "proj", ParamGroup::Other, seed);
        Self {
            page_vision: Linear::new(&mut s.child("page_vision"), dim, dim, Init::Xavier),
            page_text: Linear::new(&mut s.child("page_text"), dim, dim, Init::Xavier),
            video_vision: Linear::new(&mut s.child("video_vision"), dim, dim, Init::Xavier),
            live_vision: Linear::new(&mut s.child("live_vision"), dim, dim, Init::Xavier),
        }
    }

    pub fn map(&self, domain: Domain, modality: Modality) -> Result<&Linear> {
        match (domain, modality) {
            (Domain::P, Modality::Vision) => Ok(&self.page_vision),
            (Domain::P, Modality::Text) => Ok(&self.page_text),
            (Domain::V, Modality::Vision) => Ok(&self.video_vision),
            (Domain::L, Modality::Vision) => Ok(&self.live_vision),
            (d, m) => Err(CopeError::UnsupportedModality {
                domain: d.to_string(),
                modality: m.as_str().to_string(),
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, domain: Domain, modality: Modality) -> Result<Var> {
        Ok(self.map(domain, modality)?.forward(g, x))
    }

    pub fn project(&self, store: &ParamStore, x: &[f64], domain: Domain, modality: Modality) -> Result<Vec<f64>> {
        let map = self.map(domain, modality)?;
        let mut g = Graph::new(store);
        let x = g.input(Tensor::row_vector(x));
        let y = map.forward(&mut g, x);
        Ok(g.value(y).data().to_vec())
    }
}

/// Self-attention over the pair `[vision, text]` with a residual
/// connection, mean of the two tokens, then an affine map.
#[derive(Clone, Debug)]
pub struct FusionHead {
    attn: MultiHeadAttention,
    out: Linear,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, seed: u64) -> Self {
        let mut s = Scope::new(store, "fusion", ParamGroup::Other, seed);
        Self {
            attn: MultiHeadAttention::new(&mut s.child("attn"), dim, heads, true),
            out: Linear::new(&mut s.child("out"), dim, dim, Init::Xavier),
        }
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn output(&self) -> &Linear {
        &self.out
    }

    /// Fuses row `i` of `vision` with row `i` of `text`.
    pub fn forward(&self, g: &mut Graph, vision: Var, text: Var) -> Var {
        let b = g.value(vision).rows();
        assert_eq!(g.value(text).rows(), b);
        let stacked = g.concat_rows(vec![vision, text]);
        let pairs = g.gather_rows(stacked, (0..b).flat_map(|i| [i, b + i]).collect());
        let a = self.attn.forward(g, pairs, AttentionSpec::new(self.attn.heads, vec![2; b]));
        let y = g.add(pairs, a);
        let pooled = g.segment_mean(y, vec![2; b]);
        self.out.forward(g, pooled)
    }

    pub fn fuse(&self, store: &ParamStore, vision: &[f64], text: &[f64]) -> Result<Vec<f64>> {
        if vision.len() != text.len() {
            return Err(CopeError::Shape(format!(
                "vision width {} differs from text width {}",
                vision.len(),
                text.len()
            )));
        }
        let mut g = Graph::new(store);
        let v = g.input(Tensor::row_vector(vision));
        let t = g.input(Tensor::row_vector(text));
        let f = self.forward(&mut g, v, t);
        Ok(g.value(f).data().to_vec())
    }
}

/// `d -> d -> C` MLP shared by all three domains.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    hidden: Linear,
    out: Linear,
    num_classes: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut s = Scope::new(store, "classifier", ParamGroup::Other, seed);
        Self {
            hidden: Linear::new(&mut s.child("hidden"), dim, dim, Init::Xavier),
            out: Linear::new(&mut s.child("out"), dim, num_classes, Init::Xavier),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden(&self) -> &Linear {
        &self.hidden
    }

    pub fn output(&self) -> &Linear {
        &self.out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }

    pub fn classify(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(store);
        let x = g.input(Tensor::row_vector(x));
        let s = self.forward(&mut g, x);
        g.value(s).data().to_vec()
    }
}
