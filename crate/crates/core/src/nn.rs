//! Layer building blocks shared by the encoders and heads.

use crate::graph::{AttentionSpec, Graph, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Registers parameters under a common name prefix and group.
pub(crate) struct Scope<'a> {
    pub store: &'a mut ParamStore,
    pub prefix: String,
    pub group: ParamGroup,
    pub seed: u64,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str, group: ParamGroup, seed: u64) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            group,
            seed,
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_> {
        Scope {
            store: self.store,
            prefix: format!("{}.{name}", self.prefix),
            group: self.group,
            seed: self.seed,
        }
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.add(
            format!("{}.{name}", self.prefix),
            self.group,
            rows,
            cols,
            init,
            self.seed,
        )
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(scope: &mut Scope<'_>, fan_in: usize, fan_out: usize, init: Init) -> Self {
        Self {
            weight: scope.param("weight", fan_in, fan_out, init),
            bias: scope.param("bias", 1, fan_out, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(scope: &mut Scope<'_>, dim: usize) -> Self {
        Self {
            gamma: scope.param("gamma", 1, dim, Init::Ones),
            beta: scope.param("beta", 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// With `zero_output` the output projection starts at zero, so the
    /// block's residual branch is initially silent.
    pub(crate) fn new(scope: &mut Scope<'_>, dim: usize, heads: usize, zero_output: bool) -> Self {
        let out_init = if zero_output { Init::Zeros } else { Init::Xavier };
        Self {
            query: Linear::new(&mut scope.child("query"), dim, dim, Init::Xavier),
            key: Linear::new(&mut scope.child("key"), dim, dim, Init::Xavier),
            value: Linear::new(&mut scope.child("value"), dim, dim, Init::Xavier),
            output: Linear::new(&mut scope.child("output"), dim, dim, out_init),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, spec: AttentionSpec) -> Var {
        debug_assert_eq!(spec.heads, self.heads);
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let a = g.attention(q, k, v, spec);
        self.output.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub(crate) fn new(scope: &mut Scope<'_>, dim: usize, hidden: usize, zero_output: bool) -> Self {
        let out_init = if zero_output { Init::Zeros } else { Init::Xavier };
        Self {
            fc1: Linear::new(&mut scope.child("fc1"), dim, hidden, Init::Xavier),
            fc2: Linear::new(&mut scope.child("fc2"), hidden, dim, out_init),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer:
/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: FeedForward,
}

impl TransformerLayer {
    pub(crate) fn new(
        scope: &mut Scope<'_>,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        zero_residual: bool,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(&mut scope.child("norm1"), dim),
            attn: MultiHeadAttention::new(&mut scope.child("attn"), dim, heads, zero_residual),
            norm2: LayerNorm::new(&mut scope.child("norm2"), dim),
            mlp: FeedForward::new(&mut scope.child("mlp"), dim, mlp_hidden, zero_residual),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segments: Vec<usize>, key_mask: Option<Vec<bool>>) -> Var {
        let mut spec = AttentionSpec::new(self.attn.heads, segments);
        spec.key_mask = key_mask;
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, spec);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}
