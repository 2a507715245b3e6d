use super::TextEncoderConfig;
use crate::datamodel::PAD_TOKEN;
use crate::error::{CopeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Scope, TransformerLayer};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Token and position embeddings, a prepended class token and a stack of
/// pre-norm layers. Pad tokens are never attended to.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    token_embed: ParamId,
    class_token: ParamId,
    positions: ParamId,
    layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    /// Registers the encoder's parameters under `text.*`.
    pub fn new(cfg: &TextEncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut s = Scope::new(store, "text", ParamGroup::TextEncoder, seed);
        let token_embed = s.param("token_embed", cfg.vocab_size, d, Init::Normal(0.02));
        let class_token = s.param("class_token", 1, d, Init::Normal(0.02));
        let positions = s.param("positions", cfg.max_len + 1, d, Init::Normal(0.02));
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(&mut s.child(&format!("layers.{i}")), d, cfg.n_heads, d * cfg.mlp_ratio, false))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            token_embed,
            class_token,
            positions,
            layers,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn token_embed(&self) -> ParamId {
        self.token_embed
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.cfg.max_len {
            return Err(CopeError::Capacity(format!(
                "{} tokens, encoder holds at most {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(CopeError::Vocabulary {
                token: bad,
                vocab_size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Class-token outputs, one row per sequence.
    pub fn forward(&self, g: &mut Graph, seqs: &[&[u32]]) -> Result<Var> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let mut ids = Vec::new();
        let mut token_rows = Vec::new();
        let mut class_rows = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let mut mask = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            class_rows.push(positions.len());
            positions.push(0);
            mask.push(true);
            for (i, &t) in s.iter().enumerate() {
                token_rows.push(positions.len());
                positions.push(i + 1);
                ids.push(t as usize);
                mask.push(t != PAD_TOKEN);
            }
            segments.push(s.len() + 1);
        }
        let pos = g.param(self.positions);
        let mut x = g.gather_rows(pos, positions);
        if !ids.is_empty() {
            let table = g.param(self.token_embed);
            let tok = g.gather_rows(table, ids);
            x = g.add_at_rows(x, tok, token_rows);
        }
        let cls = g.param(self.class_token);
        let cls = g.gather_rows(cls, vec![0; seqs.len()]);
        x = g.add_at_rows(x, cls, class_rows.clone());
        for layer in &self.layers {
            x = layer.forward(g, x, segments.clone(), Some(mask.clone()));
        }
        Ok(g.gather_rows(x, class_rows))
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let h = self.forward(&mut g, &[tokens])?;
        Ok(g.value(h).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_param_grad;

    fn cfg() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 20,
            embed_dim: 8,
            n_layers: 3,
            n_heads: 2,
            mlp_ratio: 2,
            max_len: 10,
        }
    }

    fn build(seed: u64) -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&cfg(), &mut store, seed).unwrap();
        (enc, store)
    }

    #[test]
    fn trailing_padding_is_invisible() {
        let (enc, store) = build(1);
        let a = enc.encode_text(&store, &[3, 7, 9]).unwrap();
        let b = enc.encode_text(&store, &[3, 7, 9, PAD_TOKEN, PAD_TOKEN]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn width_and_determinism() {
        let (enc, store) = build(1);
        for len in 0..=10 {
            let toks: Vec<u32> = (0..len).map(|i| (i % 19 + 1) as u32).collect();
            let h = enc.encode_text(&store, &toks).unwrap();
            assert_eq!(h.len(), 8);
            assert_eq!(h, enc.encode_text(&store, &toks).unwrap());
        }
    }

    #[test]
    fn rejects_unknown_tokens_and_long_input() {
        let (enc, store) = build(1);
        assert!(matches!(
            enc.encode_text(&store, &[1, 20]),
            Err(CopeError::Vocabulary { token: 20, vocab_size: 20 })
        ));
        assert!(matches!(enc.encode_text(&store, &[1; 11]), Err(CopeError::Capacity(_))));
    }

    #[test]
    fn batch_matches_single() {
        let (enc, store) = build(2);
        let seqs: [&[u32]; 3] = [&[1, 2], &[5, 6, 7, 0], &[]];
        let mut g = Graph::new(&store);
        let h = enc.forward(&mut g, &seqs).unwrap();
        let h = g.value(h).clone();
        for (i, s) in seqs.iter().enumerate() {
            let one = enc.encode_text(&store, s).unwrap();
            for (a, b) in h.row(i).iter().zip(&one) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, mut store) = build(3);
        let toks = [4u32, 11, 2, 4, 0];
        let probe = |s: &ParamStore| enc.encode_text(s, &toks).unwrap().iter().sum::<f64>();
        let grads = {
            let mut g = Graph::new(&store);
            let h = enc.forward(&mut g, &[&toks]).unwrap();
            let root = g.sum(h);
            g.backward(root).into_param_grads(store.len())
        };
        // one full token-embedding row, then a sample of everything else
        let row: Vec<usize> = (11 * 8..12 * 8).collect();
        let id = enc.token_embed;
        assert_param_grad(&mut store, id, grads[id.index()].as_ref(), &row, &probe, 1e-5);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.value(id).len();
            let entries: Vec<usize> = (0..n).step_by((n / 4).max(1)).collect();
            assert_param_grad(&mut store, id, grads[id.index()].as_ref(), &entries, &probe, 1e-5);
        }
    }
}
