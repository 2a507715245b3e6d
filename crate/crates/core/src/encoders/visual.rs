use super::VisualEncoderConfig;
use crate::datamodel::{patchify, Frames};
use crate::error::{CopeError, Result};
use crate::graph::{AttentionSpec, Graph, Var};
use crate::nn::{LayerNorm, Linear, Scope, TransformerLayer};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Class tokens of different frames of one clip attend to each other.
///
/// A frame never attends to itself and the output map has no bias, so a
/// single-frame clip passes through unchanged whatever the weights.
#[derive(Clone, Debug)]
struct TemporalExchange {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: ParamId,
    heads: usize,
}

impl TemporalExchange {
    fn new(scope: &mut Scope<'_>, dim: usize, heads: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut scope.child("norm"), dim),
            query: Linear::new(&mut scope.child("query"), dim, dim, Init::Xavier),
            key: Linear::new(&mut scope.child("key"), dim, dim, Init::Xavier),
            value: Linear::new(&mut scope.child("value"), dim, dim, Init::Xavier),
            output: scope.param("output.weight", dim, dim, Init::Zeros),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, cls: Var, frames_per_clip: &[usize]) -> Var {
        let h = self.norm.forward(g, cls);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, h);
        let v = self.value.forward(g, h);
        let spec = AttentionSpec::new(self.heads, frames_per_clip.to_vec()).excluding_self();
        let a = g.attention(q, k, v, spec);
        let w = g.param(self.output);
        g.matmul(a, w)
    }
}

#[derive(Clone, Debug)]
struct CctBlock {
    exchange: Option<TemporalExchange>,
    spatial: TransformerLayer,
}

/// Row bookkeeping for a batch of clips whose frames are stacked into one
/// token matrix, `M + 1` rows per frame with the class token first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub frames_per_clip: Vec<usize>,
    pub tokens_per_frame: usize,
}

impl FrameLayout {
    pub fn num_frames(&self) -> usize {
        self.frames_per_clip.iter().sum()
    }

    pub fn class_rows(&self) -> Vec<usize> {
        (0..self.num_frames()).map(|f| f * self.tokens_per_frame).collect()
    }

    fn patch_rows(&self) -> Vec<usize> {
        (0..self.num_frames())
            .flat_map(|f| (1..self.tokens_per_frame).map(move |j| f * self.tokens_per_frame + j))
            .collect()
    }
}

/// Patch embedding, `N` CCT blocks, one integration layer over the frame
/// class tokens and mean pooling over time.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    cfg: VisualEncoderConfig,
    patch_embed: Linear,
    class_token: ParamId,
    spatial_pos: ParamId,
    temporal_pos: ParamId,
    blocks: Vec<CctBlock>,
    mit: TransformerLayer,
}

impl VisualEncoder {
    /// Registers the encoder's parameters under `visual.*`.
    pub fn new(cfg: &VisualEncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut s = Scope::new(store, "visual", ParamGroup::VisualEncoder, seed);
        let patch_embed = Linear::new(&mut s.child("patch_embed"), cfg.patch_dim(), d, Init::Xavier);
        let class_token = s.param("class_token", 1, d, Init::Normal(0.02));
        let spatial_pos = s.param("spatial_pos", cfg.num_patches() + 1, d, Init::Normal(0.02));
        let temporal_pos = s.param("temporal_pos", cfg.max_frames, d, Init::Normal(0.02));
        let blocks = (0..cfg.n_cct_blocks)
            .map(|n| {
                let mut b = s.child(&format!("blocks.{n}"));
                CctBlock {
                    exchange: cfg
                        .temporal_exchange
                        .then(|| TemporalExchange::new(&mut b.child("exchange"), d, cfg.n_heads)),
                    spatial: TransformerLayer::new(&mut b.child("spatial"), d, cfg.n_heads, d * cfg.mlp_ratio, false),
                }
            })
            .collect();
        let mit = TransformerLayer::new(&mut s.child("mit"), d, cfg.n_heads, d * cfg.mlp_ratio, true);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            class_token,
            spatial_pos,
            temporal_pos,
            blocks,
            mit,
        })
    }

    pub fn config(&self) -> &VisualEncoderConfig {
        &self.cfg
    }

    pub fn patch_embed(&self) -> &Linear {
        &self.patch_embed
    }

    pub fn class_token(&self) -> ParamId {
        self.class_token
    }

    pub fn spatial_pos(&self) -> ParamId {
        self.spatial_pos
    }

    pub fn temporal_pos(&self) -> ParamId {
        self.temporal_pos
    }

    /// Output weight of block `n`'s temporal exchange, if enabled.
    pub fn exchange_output(&self, n: usize) -> Option<ParamId> {
        self.blocks[n].exchange.as_ref().map(|e| e.output)
    }

    fn check_clip(&self, clip: &Frames) -> Result<()> {
        let t = clip.num_frames();
        if t > self.cfg.max_frames {
            return Err(CopeError::Capacity(format!(
                "clip has {t} frames, encoder holds at most {}",
                self.cfg.max_frames
            )));
        }
        if clip.height() != self.cfg.image_size || clip.width() != self.cfg.image_size {
            return Err(CopeError::Shape(format!(
                "frame is {}x{}, encoder expects {}x{}",
                clip.height(),
                clip.width(),
                self.cfg.image_size,
                self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Stacked patch matrix of every frame of every clip.
    fn patch_matrix(&self, clips: &[&Frames]) -> Result<(Tensor, FrameLayout)> {
        let m = self.cfg.num_patches();
        let pd = self.cfg.patch_dim();
        let mut frames_per_clip = Vec::with_capacity(clips.len());
        let mut data = Vec::new();
        for clip in clips {
            self.check_clip(clip)?;
            frames_per_clip.push(clip.num_frames());
            for t in 0..clip.num_frames() {
                let p = patchify(clip.frame(t), clip.height(), clip.width(), self.cfg.patch_size)?;
                data.extend_from_slice(p.data());
            }
        }
        let frames: usize = frames_per_clip.iter().sum();
        let patches = Tensor::from_vec(frames * m, pd, data)?;
        Ok((
            patches,
            FrameLayout {
                frames_per_clip,
                tokens_per_frame: m + 1,
            },
        ))
    }

    /// Initial token matrix: `[class; patch embeddings] + spatial positions`
    /// for every frame.
    pub fn forward_tokens(&self, g: &mut Graph, clips: &[&Frames]) -> Result<(Var, FrameLayout)> {
        let (patches, layout) = self.patch_matrix(clips)?;
        let patches = g.input(patches);
        let emb = self.patch_embed.forward(g, patches);
        let cls = g.param(self.class_token);
        let spa = g.param(self.spatial_pos);
        let template = g.add_at_rows(spa, cls, vec![0]);
        let tpf = layout.tokens_per_frame;
        let base = g.gather_rows(template, (0..layout.num_frames()).flat_map(|_| 0..tpf).collect());
        let x = g.add_at_rows(base, emb, layout.patch_rows());
        Ok((x, layout))
    }

    pub fn forward_block(&self, g: &mut Graph, x: Var, layout: &FrameLayout, n: usize) -> Var {
        let block = &self.blocks[n];
        let x = match &block.exchange {
            Some(ex) => {
                let rows = layout.class_rows();
                let cls = g.gather_rows(x, rows.clone());
                let msg = ex.forward(g, cls, &layout.frames_per_clip);
                g.add_at_rows(x, msg, rows)
            }
            None => x,
        };
        let segments = vec![layout.tokens_per_frame; layout.num_frames()];
        block.spatial.forward(g, x, segments, None)
    }

    /// Integration layer over per-frame class tokens (`frames x d`) followed
    /// by the per-clip mean. Returns one row per clip.
    pub fn forward_mit(&self, g: &mut Graph, cls: Var, frames_per_clip: &[usize]) -> Var {
        let temp = g.param(self.temporal_pos);
        let idx = frames_per_clip.iter().flat_map(|&t| 0..t).collect();
        let pos = g.gather_rows(temp, idx);
        let x = g.add(cls, pos);
        let y = self.mit.forward(g, x, frames_per_clip.to_vec(), None);
        g.segment_mean(y, frames_per_clip.to_vec())
    }

    /// Clip representations, one row per clip.
    pub fn forward(&self, g: &mut Graph, clips: &[&Frames]) -> Result<Var> {
        let (mut x, layout) = self.forward_tokens(g, clips)?;
        for n in 0..self.blocks.len() {
            x = self.forward_block(g, x, &layout, n);
        }
        let cls = g.gather_rows(x, layout.class_rows());
        Ok(self.forward_mit(g, cls, &layout.frames_per_clip))
    }

    /// Per-frame token matrices `(M + 1) x d` before the first block.
    pub fn embed_frame_tokens(&self, store: &ParamStore, clip: &Frames) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(store);
        let (x, layout) = self.forward_tokens(&mut g, &[clip])?;
        Ok(split_frames(g.value(x), layout.tokens_per_frame))
    }

    /// Applies block `n` to the token matrices of one clip's frames.
    pub fn cct_block(&self, store: &ParamStore, states: &[Tensor], n: usize) -> Result<Vec<Tensor>> {
        let tpf = self.cfg.num_patches() + 1;
        if n >= self.blocks.len() {
            return Err(CopeError::Shape(format!("no block {n}, encoder has {}", self.blocks.len())));
        }
        if let Some(bad) = states.iter().find(|s| s.shape() != (tpf, self.cfg.embed_dim)) {
            return Err(CopeError::Shape(format!(
                "frame state {:?}, expected ({tpf}, {})",
                bad.shape(),
                self.cfg.embed_dim
            )));
        }
        let mut g = Graph::new(store);
        let mut data = Vec::with_capacity(states.len() * tpf * self.cfg.embed_dim);
        for s in states {
            data.extend_from_slice(s.data());
        }
        let x = g.input(Tensor::from_vec(states.len() * tpf, self.cfg.embed_dim, data)?);
        let layout = FrameLayout {
            frames_per_clip: vec![states.len()],
            tokens_per_frame: tpf,
        };
        let y = self.forward_block(&mut g, x, &layout, n);
        Ok(split_frames(g.value(y), tpf))
    }

    /// Clip vector from per-frame class tokens (`T x d`).
    pub fn mit_aggregate(&self, store: &ParamStore, class_tokens: &Tensor) -> Result<Vec<f64>> {
        let t = class_tokens.rows();
        if t == 0 || t > self.cfg.max_frames {
            return Err(CopeError::Capacity(format!(
                "{t} frames, encoder holds 1..={}",
                self.cfg.max_frames
            )));
        }
        if class_tokens.cols() != self.cfg.embed_dim {
            return Err(CopeError::Shape(format!(
                "class tokens have width {}, expected {}",
                class_tokens.cols(),
                self.cfg.embed_dim
            )));
        }
        let mut g = Graph::new(store);
        let x = g.input(class_tokens.clone());
        let z = self.forward_mit(&mut g, x, &[t]);
        Ok(g.value(z).data().to_vec())
    }

    pub fn encode_video(&self, store: &ParamStore, clip: &Frames) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let z = self.forward(&mut g, &[clip])?;
        Ok(g.value(z).data().to_vec())
    }
}

fn split_frames(x: &Tensor, tokens_per_frame: usize) -> Vec<Tensor> {
    let d = x.cols();
    x.data()
        .chunks(tokens_per_frame * d)
        .map(|c| Tensor::from_vec(tokens_per_frame, d, c.to_vec()).expect("whole frames"))
        .collect()
}
