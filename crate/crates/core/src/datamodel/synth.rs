//! Synthetic three-domain product corpora.
//!
//! Every product owns a latent appearance: a 4x4 grid of colors blended from
//! its category's palette and its own random palette. A sample renders that
//! grid with domain-dependent framing:
//!
//! * product pages are centered on a light background, one frame;
//! * short videos shift, scale and relight the product per clip and jitter
//!   it per frame over a random background;
//! * live streams do the same more aggressively, and a fraction of their
//!   frames shows an unrelated appearance (the product is off screen).
//!
//! Titles mix product-specific tokens, category tokens and shared stopwords.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Domain, Frames, FramesRef, Sample};
use crate::error::{CopeError, Result};
use crate::seeds::{derive_seed, fnv1a, rng_for, STREAM_DATAGEN};

/// Reserved padding token id; never produced in titles.
pub const PAD_TOKEN: u32 = 0;

const GRID: usize = 4;
const STOPWORDS: u32 = 16;
const TOKENS_PER_PRODUCT: usize = 4;
const TOKENS_PER_CATEGORY: usize = 2;

const SUB_PRODUCT: u64 = 1;
const SUB_CATEGORY: u64 = 2;
const SUB_SAMPLE: u64 = 3;
const SUB_FRAMES: u64 = 4;
const SUB_TEXT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub p: usize,
    pub v: usize,
    pub l: usize,
}

impl DomainCounts {
    pub fn new(p: usize, v: usize, l: usize) -> Self {
        Self { p, v, l }
    }

    pub fn get(&self, domain: Domain) -> usize {
        match domain {
            Domain::P => self.p,
            Domain::V => self.v,
            Domain::L => self.l,
        }
    }

    pub fn total(&self) -> usize {
        self.p + self.v + self.l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_products: usize,
    pub n_categories: usize,
    pub per_domain: DomainCounts,
    pub frames_video: usize,
    pub frames_live: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Scales additive uniform pixel noise, in `[0, 1]`.
    pub noise_level: f64,
    /// Fraction of live-stream frames that do not show the product.
    pub distractor_fraction: f64,
    /// Scales how far video and live framing (placement, size, lighting,
    /// background) strays from the page framing, in `[0, 1]`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_products: 10,
            n_categories: 4,
            per_domain: DomainCounts::new(2, 2, 2),
            frames_video: 8,
            frames_live: 8,
            image_size: 32,
            vocab_size: 256,
            text_len: 12,
            noise_level: 0.1,
            distractor_fraction: 0.25,
            jitter: default_jitter(),
            seed: 0,
        }
    }
}

fn default_jitter() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_products", self.n_products),
            ("n_categories", self.n_categories),
            ("per_domain.p", self.per_domain.p),
            ("per_domain.v", self.per_domain.v),
            ("per_domain.l", self.per_domain.l),
            ("frames_video", self.frames_video),
            ("frames_live", self.frames_live),
            ("image_size", self.image_size),
            ("text_len", self.text_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(CopeError::config(field, "must be at least 1"));
            }
        }
        let min_vocab = (STOPWORDS as usize + 1) * 2;
        if self.vocab_size < min_vocab {
            return Err(CopeError::config(
                "vocab_size",
                format!("must be at least {min_vocab}"),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(CopeError::config("noise_level", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(CopeError::config("jitter", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return Err(CopeError::config(
                "distractor_fraction",
                "must lie in [0, 1)",
            ));
        }
        Ok(())
    }

    pub fn frames_for(&self, domain: Domain) -> usize {
        match domain {
            Domain::P => 1,
            Domain::V => self.frames_video,
            Domain::L => self.frames_live,
        }
    }

    fn product_id(&self, index: usize) -> String {
        let width = self.n_products.saturating_sub(1).to_string().len().max(4);
        format!("p{index:0width$}")
    }
}

/// Builds the corpus described by `cfg`; a pure function of `cfg`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n_products * cfg.per_domain.total());
    for p in 0..cfg.n_products {
        let product_id = cfg.product_id(p);
        let category_id = (p % cfg.n_categories) as u32;
        let vocab = TitleVocabulary::new(cfg, &product_id, category_id);
        for domain in Domain::ALL {
            for instance in 0..cfg.per_domain.get(domain) {
                let seed = derive_seed(
                    cfg.seed,
                    &[
                        STREAM_DATAGEN,
                        SUB_SAMPLE,
                        p as u64,
                        domain.index() as u64,
                        instance as u64,
                    ],
                );
                let frames = render_sample(cfg, &product_id, category_id, domain, seed)?;
                let text_tokens = (domain == Domain::P).then(|| vocab.title(cfg, seed));
                samples.push(Sample {
                    sample_id: format!("{product_id}-{domain}{instance:02}"),
                    product_id: product_id.clone(),
                    category_id,
                    domain,
                    frames,
                    frames_ref: FramesRef::Seed(seed),
                    text_tokens,
                    gen_seed: Some(seed),
                });
            }
        }
    }
    Ok(Corpus::from_samples(samples)?.with_generator(Some(cfg.clone())))
}

type Rgb = [f32; 3];

struct Appearance {
    cells: [Rgb; GRID * GRID],
}

impl Appearance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut cells = [[0.0; 3]; GRID * GRID];
        for c in cells.iter_mut() {
            *c = random_color(rng);
        }
        Self { cells }
    }

    fn of_product(cfg: &SynthConfig, product_id: &str, category_id: u32) -> Self {
        let mut cat_rng = rng_for(
            cfg.seed,
            &[STREAM_DATAGEN, SUB_CATEGORY, u64::from(category_id)],
        );
        let category = Appearance::random(&mut cat_rng);
        let mut rng = rng_for(cfg.seed, &[STREAM_DATAGEN, SUB_PRODUCT, fnv1a(product_id)]);
        let own = Appearance::random(&mut rng);
        let mut cells = [[0.0; 3]; GRID * GRID];
        for (i, c) in cells.iter_mut().enumerate() {
            for ch in 0..3 {
                c[ch] = 0.25 * category.cells[i][ch] + 0.75 * own.cells[i][ch];
            }
        }
        Self { cells }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Placement of the product grid inside one frame.
#[derive(Clone, Copy)]
struct Framing {
    dx: f32,
    dy: f32,
    scale: f32,
    brightness: f32,
    background: Rgb,
}

impl Framing {
    fn jittered(self, shift: f32, scale: f32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: self.dx + rng.gen_range(-shift..=shift),
            dy: self.dy + rng.gen_range(-shift..=shift),
            scale: self.scale * (1.0 + rng.gen_range(-scale..=scale)),
            ..self
        }
    }
}

/// Re-renders the pixels of one sample from its seed.
pub(crate) fn render_sample(
    cfg: &SynthConfig,
    product_id: &str,
    category_id: u32,
    domain: Domain,
    sample_seed: u64,
) -> Result<Frames> {
    let appearance = Appearance::of_product(cfg, product_id, category_id);
    let mut rng = rng_for(sample_seed, &[SUB_FRAMES]);
    let t = cfg.frames_for(domain);
    let size = cfg.image_size;
    let noise = cfg.noise_level as f32 * 0.5;
    let mut data = Vec::with_capacity(t * size * size * 3);

    let page = Framing {
        dx: 0.0,
        dy: 0.0,
        scale: 0.9,
        brightness: 1.0,
        background: [0.5, 0.5, 0.5],
    };
    // (shift, scale range, brightness range, per-frame shift, per-frame scale)
    let spread = match domain {
        Domain::P => None,
        Domain::V => Some((0.15, (0.7, 0.95), (0.75, 1.15), 0.05, 0.03)),
        Domain::L => Some((0.25, (0.55, 0.9), (0.6, 1.1), 0.08, 0.05)),
    };
    let j = cfg.jitter as f32;
    let (base, frame_shift, frame_scale) = match spread {
        None => (page, 0.0, 0.0),
        Some((shift, scale, light, frame_shift, frame_scale)) => {
            let drawn = Framing {
                dx: rng.gen_range(-shift..=shift),
                dy: rng.gen_range(-shift..=shift),
                scale: rng.gen_range(scale.0..=scale.1),
                brightness: rng.gen_range(light.0..=light.1),
                background: scaled(random_color(&mut rng), 0.6),
            };
            let lerp = |a: f32, b: f32| a + j * (b - a);
            let framing = Framing {
                dx: lerp(page.dx, drawn.dx),
                dy: lerp(page.dy, drawn.dy),
                scale: lerp(page.scale, drawn.scale),
                brightness: lerp(page.brightness, drawn.brightness),
                background: [0, 1, 2].map(|c| lerp(page.background[c], drawn.background[c])),
            };
            (framing, frame_shift * j, frame_scale * j)
        }
    };

    let mut distractor = vec![false; t];
    if domain == Domain::L && t > 1 {
        let n = ((cfg.distractor_fraction * t as f64).round() as usize).min(t - 1);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n] {
            distractor[i] = true;
        }
    }

    for is_distractor in distractor {
        let framing = base.jittered(frame_shift, frame_scale, &mut rng);
        if is_distractor {
            let other = Appearance::random(&mut rng);
            render_frame(&other, framing, noise, size, &mut rng, &mut data);
        } else {
            render_frame(&appearance, framing, noise, size, &mut rng, &mut data);
        }
    }
    Frames::new(t, size, size, data)
}

fn scaled(c: Rgb, s: f32) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

fn render_frame(
    appearance: &Appearance,
    framing: Framing,
    noise: f32,
    size: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f32>,
) {
    let inv = 1.0 / size as f32;
    for y in 0..size {
        for x in 0..size {
            let u = (((x as f32 + 0.5) * inv * 2.0 - 1.0) - framing.dx) / framing.scale;
            let v = (((y as f32 + 0.5) * inv * 2.0 - 1.0) - framing.dy) / framing.scale;
            let color = if u.abs() < 1.0 && v.abs() < 1.0 {
                let cx = (((u + 1.0) * 0.5 * GRID as f32) as usize).min(GRID - 1);
                let cy = (((v + 1.0) * 0.5 * GRID as f32) as usize).min(GRID - 1);
                scaled(appearance.cells[cy * GRID + cx], framing.brightness)
            } else {
                framing.background
            };
            for c in color {
                let n = if noise > 0.0 {
                    rng.gen_range(-noise..=noise)
                } else {
                    0.0
                };
                out.push((c + n).clamp(0.0, 1.0));
            }
        }
    }
}

struct TitleVocabulary {
    product: Vec<u32>,
    category: Vec<u32>,
}

impl TitleVocabulary {
    fn new(cfg: &SynthConfig, product_id: &str, category_id: u32) -> Self {
        let lo = STOPWORDS + 1;
        let hi = cfg.vocab_size as u32;
        let mut rng = rng_for(
            cfg.seed,
            &[STREAM_DATAGEN, SUB_PRODUCT, fnv1a(product_id), SUB_TEXT],
        );
        let product = (0..TOKENS_PER_PRODUCT)
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        let mut rng = rng_for(
            cfg.seed,
            &[
                STREAM_DATAGEN,
                SUB_CATEGORY,
                u64::from(category_id),
                SUB_TEXT,
            ],
        );
        let category = (0..TOKENS_PER_CATEGORY)
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Self { product, category }
    }

    fn title(&self, cfg: &SynthConfig, sample_seed: u64) -> Vec<u32> {
        let mut rng = rng_for(sample_seed, &[SUB_TEXT]);
        let len = cfg.text_len - rng.gen_range(0..=cfg.text_len / 4);
        (0..len)
            .map(|_| {
                let r: f64 = rng.gen();
                if r < 0.5 {
                    *self.product.choose(&mut rng).expect("non-empty")
                } else if r < 0.7 {
                    *self.category.choose(&mut rng).expect("non-empty")
                } else {
                    rng.gen_range(1..=STOPWORDS)
                }
            })
            .collect()
    }
}
