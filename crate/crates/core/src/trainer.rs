//! Optimization loop: sampling, loss, AdamW with per-group learning rates
//! and a warmup-then-cosine schedule.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassMap, Corpus, Domain, Sample};
use crate::encoders::{TextEncoderConfig, VisualEncoderConfig};
use crate::error::{CopeError, Result};
use crate::graph::Graph;
use crate::losses::{total_loss_graph, LossBreakdown, LossWeights, NUM_CHANNELS};
use crate::model::{CopeModel, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::sampler::{sample_batch_balanced, sample_batch_random, TripleBatch};
use crate::seeds::{rng_for, STREAM_SAMPLER};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Balanced,
    Random,
}

/// Everything needed to reproduce a training run. Read from a flat TOML
/// file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Optimizer steps per epoch; 0 derives it from the corpus size.
    pub steps_per_epoch: usize,
    pub lr_text_encoder: f64,
    pub lr_visual_encoder: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub sampling: Sampling,
    /// Products per balanced batch.
    pub p: usize,
    /// Instances per product in a balanced batch. Random batches hold
    /// `p * k` items so both samplers see the same batch size.
    pub k: usize,
    pub alpha: [f64; NUM_CHANNELS],
    pub beta: f64,
    pub tau: f64,
    /// Run the evaluation hook every this many epochs; 0 never.
    pub eval_every: usize,

    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_cct_blocks: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub temporal_exchange: bool,
    pub vocab_size: usize,
    pub text_layers: usize,
    pub max_text_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            warmup_epochs: 2,
            steps_per_epoch: 0,
            lr_text_encoder: 5e-5,
            lr_visual_encoder: 5e-7,
            lr_other: 5e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            sampling: Sampling::Balanced,
            p: 28,
            k: 3,
            alpha: [1.0; NUM_CHANNELS],
            beta: 1.0,
            tau: 0.07,
            eval_every: 0,
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            n_heads: 4,
            n_cct_blocks: 2,
            mlp_ratio: 4,
            max_frames: 8,
            temporal_exchange: true,
            vocab_size: 256,
            text_layers: 3,
            max_text_len: 16,
        }
    }
}

impl TrainConfig {
    /// Small-corpus preset: 20 epochs, `P = 8, K = 3`, four frames per
    /// clip, and encoder learning rates suited to training from scratch.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr_text_encoder: 1e-3,
            lr_visual_encoder: 1e-3,
            lr_other: 2e-3,
            p: 8,
            k: 3,
            max_frames: 4,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CopeError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            visual: VisualEncoderConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                embed_dim: self.embed_dim,
                n_cct_blocks: self.n_cct_blocks,
                n_heads: self.n_heads,
                mlp_ratio: self.mlp_ratio,
                max_frames: self.max_frames,
                temporal_exchange: self.temporal_exchange,
            },
            text: TextEncoderConfig {
                vocab_size: self.vocab_size,
                embed_dim: self.embed_dim,
                n_layers: self.text_layers,
                n_heads: self.n_heads,
                mlp_ratio: self.mlp_ratio,
                max_len: self.max_text_len,
            },
            num_classes,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::TextEncoder => self.lr_text_encoder,
            ParamGroup::VisualEncoder => self.lr_visual_encoder,
            ParamGroup::Other => self.lr_other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CopeError::config("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(CopeError::config(
                "warmup_epochs",
                format!("{} is not below epochs = {}", self.warmup_epochs, self.epochs),
            ));
        }
        for g in ParamGroup::ALL {
            let lr = self.lr(g);
            if !(lr.is_finite() && lr > 0.0) {
                return Err(CopeError::config(format!("lr_{}", g.name()), format!("{lr} is not positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CopeError::config("weight_decay", "must be finite and non-negative"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(CopeError::config("grad_clip", "must be finite and non-negative"));
        }
        if self.p < 2 {
            return Err(CopeError::config("p", "need at least two products per batch"));
        }
        if self.k < 1 {
            return Err(CopeError::config("k", "need at least one instance per product"));
        }
        self.loss_weights().validate()?;
        self.model_config(1).validate()
    }

    /// Checks that the corpus fits the configured model.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        self.model_config(1).check_corpus(corpus)
    }

    /// Steps per epoch: the configured value, or enough batches to cover
    /// the largest domain once.
    pub fn resolved_steps_per_epoch(&self, corpus: &Corpus) -> usize {
        if self.steps_per_epoch > 0 {
            return self.steps_per_epoch;
        }
        let largest = Domain::ALL
            .iter()
            .map(|&d| corpus.samples().iter().filter(|s| s.domain == d).count())
            .max()
            .unwrap_or(0);
        largest.div_ceil(self.batch_size()).max(1)
    }
}

/// Linear warmup to `max_lr` at `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, max_lr: f64) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        return max_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `lr` gives the learning rate of each group. Parameters
    /// without a gradient still receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: &dyn Fn(ParamGroup) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (group, decay) = {
                let p = store.get(id);
                (p.group, p.decay)
            };
            let rate = lr(group);
            let value = store.value_mut(id);
            if decay && self.weight_decay > 0.0 {
                let shrink = 1.0 - rate * self.weight_decay;
                value.data_mut().iter_mut().for_each(|w| *w *= shrink);
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Loss breakdown and parameter gradients for one batch.
pub fn batch_loss(
    model: &CopeModel,
    corpus: &Corpus,
    batch: &TripleBatch,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let pick = |d: Domain| -> Vec<&Sample> { batch.items.iter().map(|it| corpus.sample(it.sample(d))).collect() };
    let (pages, videos, lives) = (pick(Domain::P), pick(Domain::V), pick(Domain::L));
    let mut g = Graph::new(model.store());
    let out = model.forward_triples(&mut g, &pages, &videos, &lives)?;
    let nodes = total_loss_graph(&mut g, &out.sides, out.scores, &batch.labels(), weights)?;
    let breakdown = nodes.breakdown(&g);
    let grads = g.backward(nodes.total).into_param_grads(model.store().len());
    Ok((breakdown, grads))
}

fn first_non_finite(b: &LossBreakdown) -> Option<String> {
    for (i, c) in b.channels.iter().enumerate() {
        if !c.is_finite() {
            return Some(format!("channel_{}", i + 1));
        }
    }
    [
        ("cross_domain", b.cross_domain),
        ("classification", b.classification),
        ("total", b.total),
    ]
    .iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n.to_string())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub cross_domain: f64,
    pub classification: f64,
    pub channels: [f64; NUM_CHANNELS],
    pub grad_norm: f64,
    pub lr: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

pub struct TrainOutcome {
    pub model: CopeModel,
    pub classes: ClassMap,
    pub metrics: Vec<StepMetrics>,
}

/// Called after every `eval_every` epochs with the epoch number and the
/// current model; whatever it returns is attached to that step's metrics.
pub type EvalHook<'a> = dyn FnMut(usize, &CopeModel) -> Result<serde_json::Value> + 'a;

/// Trains from scratch. Each step's metrics are written as one JSON line
/// to `log` when given.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut log: Option<&mut dyn Write>,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    if !corpus.is_complete_triples() || corpus.products().is_empty() {
        return Err(CopeError::Contract(format!(
            "training needs every product in all three domains; incomplete: {}",
            corpus.incomplete_products().join(", ")
        )));
    }
    let classes = corpus.class_map();
    let mut model = CopeModel::new(&cfg.model_config(classes.len()), cfg.seed)?;
    let weights = cfg.loss_weights();
    let mut rng = rng_for(cfg.seed, &[STREAM_SAMPLER]);
    let spe = cfg.resolved_steps_per_epoch(corpus);
    let total = cfg.epochs * spe;
    let warmup = cfg.warmup_epochs * spe;
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut metrics = Vec::with_capacity(total);

    for step in 0..total {
        let batch = match cfg.sampling {
            Sampling::Balanced => sample_batch_balanced(corpus, cfg.p.min(classes.len()), cfg.k, &mut rng)?,
            Sampling::Random => sample_batch_random(corpus, cfg.batch_size(), &mut rng)?,
        };
        let (breakdown, mut grads) = batch_loss(&model, corpus, &batch, &weights)?;
        if let Some(term) = first_non_finite(&breakdown) {
            return Err(CopeError::NonFinite { term, step: step + 1 });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(CopeError::NonFinite {
                term: "gradient".into(),
                step: step + 1,
            });
        }
        let lr_of = |g: ParamGroup| lr_at(step + 1, total, warmup, cfg.lr(g));
        opt.step(model.store_mut(), &grads, &lr_of);

        let epoch = step / spe + 1;
        let mut record = StepMetrics {
            step: step + 1,
            epoch,
            total: breakdown.total,
            cross_domain: breakdown.cross_domain,
            classification: breakdown.classification,
            channels: breakdown.channels,
            grad_norm,
            lr: ParamGroup::ALL.iter().map(|&g| (g.name().to_string(), lr_of(g))).collect(),
            eval: None,
        };
        let epoch_end = (step + 1) % spe == 0;
        if let Some(hook) = eval.as_mut() {
            if cfg.eval_every > 0 && epoch_end && epoch % cfg.eval_every == 0 {
                record.eval = Some(hook(epoch, &model)?);
            }
        }
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &record).map_err(|e| CopeError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        metrics.push(record);
    }
    Ok(TrainOutcome {
        model,
        classes,
        metrics,
    })
}
