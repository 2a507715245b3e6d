//! Named, grouped model parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seeds::{fnv1a, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextEncoder,
    VisualEncoder,
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::TextEncoder,
        ParamGroup::VisualEncoder,
        ParamGroup::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::VisualEncoder => "visual_encoder",
            ParamGroup::Other => "other",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies: true for parameters named
    /// `*.weight` (linear maps), false for biases, norms, tables and tokens.
    pub decay: bool,
    pub value: Tensor,
}

/// Initialization recipes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Glorot uniform over `rows x cols`.
    Xavier,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Its initial value depends only on `seed` and
    /// `name`, never on which other parameters exist.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        init: Init,
        seed: u64,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let rng = &mut rng_for(seed, &[fnv1a(&name)]);
        let mut value = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => value.data_mut().fill(1.0),
            Init::Normal(std) => {
                for v in value.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = z * std;
                }
            }
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                for v in value.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        let decay = name.ends_with(".weight");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            decay,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
