use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, TabularMode};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with fan-in taken from the first axis.
    FanIn,
    Ones,
    Zeros,
}

/// All learnable tensors, keyed by dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: BTreeMap<String, Tensor>,
}

/// Parameter leaves bound to a tape.
#[derive(Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, n, l, h, k) = (
        config.embed_dim,
        config.num_latents,
        config.latent_dim,
        config.mlp_hidden(),
        config.num_classes,
    );
    let f = config.num_tabular_features;
    let mut out = vec![
        ("embed.token".to_string(), vec![config.vocab_size, d], Init::Normal),
        // A 1 -> D projection of the scalar value, so fan-in is 1.
        ("embed.feature_value".to_string(), vec![f, d], Init::FanIn),
        ("embed.feature_id".to_string(), vec![f, d], Init::Normal),
    ];
    if config.missing_indicator {
        out.push(("embed.missing".to_string(), vec![f, d], Init::Normal));
    }
    out.push(("latent_init".to_string(), vec![n, l], Init::Normal));
    for b in 0..config.distinct_blocks() {
        let p = |s: &str| format!("blocks.{b}.{s}");
        out.extend([
            (p("cross.norm_latent.gamma"), vec![l], Init::Ones),
            (p("cross.norm_latent.beta"), vec![l], Init::Zeros),
            (p("cross.norm_input.gamma"), vec![d], Init::Ones),
            (p("cross.norm_input.beta"), vec![d], Init::Zeros),
            (p("cross.q"), vec![l, d], Init::FanIn),
            (p("cross.k"), vec![d, d], Init::FanIn),
            (p("cross.v"), vec![d, d], Init::FanIn),
            (p("cross.out"), vec![d, l], Init::FanIn),
            (p("cross.out_bias"), vec![l], Init::Zeros),
            (p("self_attn.norm.gamma"), vec![l], Init::Ones),
            (p("self_attn.norm.beta"), vec![l], Init::Zeros),
            (p("self_attn.q"), vec![l, l], Init::FanIn),
            (p("self_attn.k"), vec![l, l], Init::FanIn),
            (p("self_attn.v"), vec![l, l], Init::FanIn),
            (p("self_attn.out"), vec![l, l], Init::FanIn),
            (p("self_attn.out_bias"), vec![l], Init::Zeros),
            (p("mlp.norm.gamma"), vec![l], Init::Ones),
            (p("mlp.norm.beta"), vec![l], Init::Zeros),
            (p("mlp.fc1"), vec![l, h], Init::FanIn),
            (p("mlp.fc1_bias"), vec![h], Init::Zeros),
            (p("mlp.fc2"), vec![h, l], Init::FanIn),
            (p("mlp.fc2_bias"), vec![l], Init::Zeros),
        ]);
    }
    out.push(("head.weight".to_string(), vec![l, k], Init::FanIn));
    out.push(("head.bias".to_string(), vec![k], Init::Zeros));
    out
}

impl ModelWeights {
    /// Seeded initialization; identical `(config, seed)` gives identical weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let mut params = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Normal => (0..len).map(|_| normal.sample(&mut rng)).collect(),
                Init::FanIn => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Ones => vec![1.0; len],
                Init::Zeros => vec![0.0; len],
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { params })
    }

    /// Wraps loaded tensors after checking names and shapes against `config`.
    pub fn from_map(config: &ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(Self { params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Parameters in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&'t self, tape: &mut Tape<'t>) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.param(t)?);
        }
        Ok(BoundParams { vars })
    }

    /// Tensors the optimizer must leave untouched under `config`.
    pub fn frozen(config: &ModelConfig) -> Vec<&'static str> {
        match config.tabular_mode {
            TabularMode::ValueOnly => vec!["embed.feature_value"],
            _ => Vec::new(),
        }
    }

    /// Names of the tensors that only feed the tabular tokens.
    pub fn tabular_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with("embed.feature") || k.as_str() == "embed.missing")
            .cloned()
            .collect()
    }

    pub fn text_param_names(&self) -> Vec<String> {
        vec!["embed.token".to_string()]
    }
}
