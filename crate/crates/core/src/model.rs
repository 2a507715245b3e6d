//! The full model: shared encoders, domain projections, page fusion and
//! the product classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Domain, Frames, Sample};
use crate::encoders::{TextEncoder, TextEncoderConfig, VisualEncoder, VisualEncoderConfig};
use crate::error::{CopeError, Result};
use crate::graph::{Graph, Var};
use crate::heads::{ClassifierHead, FusionHead, Modality, ProjectionSet};
use crate::losses::{Representation, Side};
use crate::params::ParamStore;
use crate::seeds::{derive_seed, STREAM_INIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.visual.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        if self.text.embed_dim != self.visual.embed_dim {
            return Err(CopeError::config(
                "embed_dim",
                format!(
                    "text width {} differs from visual width {}",
                    self.text.embed_dim, self.visual.embed_dim
                ),
            ));
        }
        if self.num_classes == 0 {
            return Err(CopeError::config("num_classes", "need at least one class"));
        }
        Ok(())
    }

    /// Errors when the corpus frames or titles do not fit this model.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        for s in corpus.samples() {
            if s.frames.height() != self.visual.image_size || s.frames.width() != self.visual.image_size {
                return Err(CopeError::Compatibility(format!(
                    "{} is {}x{}, model expects {}x{}",
                    s.sample_id,
                    s.frames.height(),
                    s.frames.width(),
                    self.visual.image_size,
                    self.visual.image_size
                )));
            }
            if let Some(t) = &s.text_tokens {
                if t.len() > self.text.max_len {
                    return Err(CopeError::Compatibility(format!(
                        "{} has {} title tokens, model holds {}",
                        s.sample_id,
                        t.len(),
                        self.text.max_len
                    )));
                }
                if let Some(&bad) = t.iter().find(|&&x| x as usize >= self.text.vocab_size) {
                    return Err(CopeError::Compatibility(format!(
                        "{} uses token {bad}, vocabulary size is {}",
                        s.sample_id, self.text.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Graph nodes produced for a batch of aligned page/video/live triples.
#[derive(Clone, Debug)]
pub struct TripleOutputs {
    /// Unnormalized `B x d` embeddings for every side used by the losses.
    pub sides: BTreeMap<Side, Var>,
    /// Classifier scores (`B x C`) for pages, videos and lives.
    pub scores: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct CopeModel {
    cfg: ModelConfig,
    store: ParamStore,
    visual: VisualEncoder,
    text: TextEncoder,
    projections: ProjectionSet,
    fusion: FusionHead,
    classifier: ClassifierHead,
}

impl CopeModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seed = derive_seed(seed, &[STREAM_INIT]);
        let d = cfg.embed_dim();
        let mut store = ParamStore::new();
        let visual = VisualEncoder::new(&cfg.visual, &mut store, seed)?;
        let text = TextEncoder::new(&cfg.text, &mut store, seed)?;
        let projections = ProjectionSet::new(&mut store, d, seed);
        let fusion = FusionHead::new(&mut store, d, cfg.visual.n_heads, seed);
        let classifier = ClassifierHead::new(&mut store, d, cfg.num_classes, seed);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            visual,
            text,
            projections,
            fusion,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn visual(&self) -> &VisualEncoder {
        &self.visual
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn projections(&self) -> &ProjectionSet {
        &self.projections
    }

    pub fn fusion(&self) -> &FusionHead {
        &self.fusion
    }

    pub fn classifier(&self) -> &ClassifierHead {
        &self.classifier
    }

    /// Clips longer than the encoder holds are thinned to evenly spaced
    /// frames.
    fn clip_of(&self, s: &Sample) -> Frames {
        s.frames.sample_uniform(self.cfg.visual.max_frames)
    }

    fn tokens_of<'a>(&self, s: &'a Sample) -> Result<&'a [u32]> {
        s.text_tokens
            .as_deref()
            .ok_or_else(|| CopeError::Contract(format!("page {} has no title tokens", s.sample_id)))
    }

    /// Forward pass over aligned triples: row `i` of every output belongs to
    /// `pages[i]`, `videos[i]` and `lives[i]`.
    pub fn forward_triples(
        &self,
        g: &mut Graph,
        pages: &[&Sample],
        videos: &[&Sample],
        lives: &[&Sample],
    ) -> Result<TripleOutputs> {
        let b = pages.len();
        if videos.len() != b || lives.len() != b || b == 0 {
            return Err(CopeError::Contract(format!(
                "triple batch needs equal non-zero counts, got {b}/{}/{}",
                videos.len(),
                lives.len()
            )));
        }
        for (set, dom) in [(pages, Domain::P), (videos, Domain::V), (lives, Domain::L)] {
            if let Some(s) = set.iter().find(|s| s.domain != dom) {
                return Err(CopeError::Contract(format!("{} is not a {dom} sample", s.sample_id)));
            }
        }
        let clips: Vec<Frames> = pages.iter().chain(videos).chain(lives).map(|s| self.clip_of(s)).collect();
        let clip_refs: Vec<&Frames> = clips.iter().collect();
        let vis = self.visual.forward(g, &clip_refs)?;
        let vis_p = g.slice_rows(vis, 0, b);
        let vis_v = g.slice_rows(vis, b, b);
        let vis_l = g.slice_rows(vis, 2 * b, b);
        let tokens = pages.iter().map(|s| self.tokens_of(s)).collect::<Result<Vec<_>>>()?;
        let txt = self.text.forward(g, &tokens)?;

        let e_vis_p = self.projections.forward(g, vis_p, Domain::P, Modality::Vision)?;
        let e_txt_p = self.projections.forward(g, txt, Domain::P, Modality::Text)?;
        let e_v = self.projections.forward(g, vis_v, Domain::V, Modality::Vision)?;
        let e_l = self.projections.forward(g, vis_l, Domain::L, Modality::Vision)?;
        let e_fus = self.fusion.forward(g, e_vis_p, e_txt_p);

        let scores = [e_fus, e_v, e_l].map(|e| self.classifier.forward(g, e));
        let mut sides = BTreeMap::new();
        sides.insert(Side::new(Domain::P, Representation::Fused), e_fus);
        sides.insert(Side::new(Domain::P, Representation::Vision), e_vis_p);
        sides.insert(Side::new(Domain::P, Representation::Text), e_txt_p);
        sides.insert(Side::new(Domain::V, Representation::Vision), e_v);
        sides.insert(Side::new(Domain::L, Representation::Vision), e_l);
        Ok(TripleOutputs { sides, scores })
    }

    /// Final representation of each sample: the fused embedding for pages,
    /// the projected visual embedding otherwise. Rows are not normalized.
    pub fn embed_samples(&self, samples: &[&Sample], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); samples.len()];
        for dom in Domain::ALL {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain == dom).collect();
            for part in idx.chunks(chunk.max(1)) {
                let group: Vec<&Sample> = part.iter().map(|&i| samples[i]).collect();
                let rows = self.embed_domain(&group, dom)?;
                for (&i, r) in part.iter().zip(rows) {
                    out[i] = r;
                }
            }
        }
        Ok(out)
    }

    fn embed_domain(&self, samples: &[&Sample], dom: Domain) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let clips: Vec<Frames> = samples.iter().map(|s| self.clip_of(s)).collect();
        let clip_refs: Vec<&Frames> = clips.iter().collect();
        let vis = self.visual.forward(&mut g, &clip_refs)?;
        let e_vis = self.projections.forward(&mut g, vis, dom, Modality::Vision)?;
        let e = if dom == Domain::P {
            let tokens = samples.iter().map(|s| self.tokens_of(s)).collect::<Result<Vec<_>>>()?;
            let txt = self.text.forward(&mut g, &tokens)?;
            let e_txt = self.projections.forward(&mut g, txt, Domain::P, Modality::Text)?;
            self.fusion.forward(&mut g, e_vis, e_txt)
        } else {
            e_vis
        };
        Ok(g.value(e).to_rows())
    }
}
