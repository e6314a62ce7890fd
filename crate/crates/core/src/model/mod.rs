//! The generative network: layout encoder, per-object structure encoder,
//! transformer over the unordered token set plus a query token, and the
//! chained attribute heads.

mod checkpoint;
mod forward;
mod heads;

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{BatchNll, Example};
pub use heads::{AttributeDistributionSet, AttributePrefix, Conditioner, QueryVector};

use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::scene::{Normalizer, SceneObject};
use crate::tensor::{Real, Tensor};

/// How context objects are presented to the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    /// Unordered set, no positional signal.
    #[default]
    PermutationInvariant,
    /// Objects sorted by descending category frequency, index embeddings added.
    FixedFrequencyOrder,
    /// Random order as in the invariant mode, index embeddings added.
    PermutedWithPositions,
}

impl OrderingMode {
    pub fn uses_positions(self) -> bool {
        self != Self::PermutationInvariant
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PermutationInvariant => "permutation_invariant",
            Self::FixedFrequencyOrder => "fixed_frequency_order",
            Self::PermutedWithPositions => "permuted_with_positions",
        }
    }
}

impl FromStr for OrderingMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Self::PermutationInvariant,
            Self::FixedFrequencyOrder,
            Self::PermutedWithPositions,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| ModelError::Config(format!("unknown ordering mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Object class names; the end symbol is class `category_names.len()`.
    pub category_names: Vec<String>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Logistic mixture components per scalar attribute.
    pub components: usize,
    /// Sinusoid octaves per scalar attribute.
    pub octaves: usize,
    pub floor_resolution: usize,
    /// Output channels of the stride-2 convolutions of the layout encoder.
    pub layout_channels: Vec<usize>,
    /// Hidden widths of the location, orientation and size head MLPs.
    pub head_hidden: Vec<usize>,
    pub ordering_mode: OrderingMode,
    pub max_objects: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            category_names: Vec::new(),
            d_model: 64,
            n_layers: 4,
            n_heads: 8,
            d_ff: 1024,
            components: 10,
            octaves: 32,
            floor_resolution: 64,
            layout_channels: vec![8, 16, 32, 64],
            head_hidden: vec![128, 64],
            ordering_mode: OrderingMode::PermutationInvariant,
            max_objects: 30,
        }
    }
}

impl ModelConfig {
    pub fn with_categories(names: Vec<String>) -> Self {
        Self {
            category_names: names,
            ..Self::default()
        }
    }

    /// Number of object classes `C`, not counting the end symbol.
    pub fn categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn end_symbol(&self) -> usize {
        self.categories()
    }

    /// Width of one sinusoid-encoded scalar.
    pub fn encoding_width(&self) -> usize {
        2 * self.octaves
    }

    /// Width of `[embedding; enc(size); enc(location); enc(orientation)]`.
    pub fn object_feature_width(&self) -> usize {
        self.d_model + 7 * self.encoding_width()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.categories() == 0 {
            return bad("at least one category is required");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ff == 0 || self.components == 0 || self.octaves == 0 {
            return bad("d_ff, components and octaves must be positive");
        }
        if self.floor_resolution == 0 || self.layout_channels.is_empty() || self.layout_channels.contains(&0) {
            return bad("layout encoder needs a positive resolution and channel counts");
        }
        if self.head_hidden.contains(&0) || self.max_objects == 0 {
            return bad("head widths and max_objects must be positive");
        }
        Ok(())
    }
}

/// Model-frame attributes of one object: location in `[-1, 1]` of the room
/// bounds, size scaled by the bounds half range, orientation divided by π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectCode {
    pub category: usize,
    pub location: [f64; 3],
    pub orientation: f64,
    pub size: [f64; 3],
}

/// Smallest half-extent, in meters, a decoded box may have.
pub const MIN_HALF_EXTENT: f64 = 0.01;

impl ObjectCode {
    pub fn encode(o: &SceneObject, n: &Normalizer) -> Self {
        Self {
            category: o.category,
            location: n.location(o.location),
            orientation: n.orientation(o.orientation),
            size: n.size(o.size),
        }
    }

    /// Back to meters. Sizes are clamped to [`MIN_HALF_EXTENT`] and the
    /// angle is wrapped into `[-π, π]`.
    pub fn decode(&self, n: &Normalizer, names: &[String]) -> SceneObject {
        SceneObject {
            category: self.category,
            category_name: names.get(self.category).cloned(),
            size: n.size_inv(self.size).map(|s| s.max(MIN_HALF_EXTENT)),
            location: n.location_inv(self.location),
            orientation: crate::scene::wrap_angle(n.orientation_inv(self.orientation)),
        }
    }

    /// `[size; location; orientation]`, the order of the sinusoid features.
    pub(crate) fn attributes(&self) -> [f64; 7] {
        let (s, t) = (self.size, self.location);
        [s[0], s[1], s[2], t[0], t[1], t[2], self.orientation]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub embed: usize,
    pub object_proj: Linear,
    pub convs: Vec<Linear>,
    pub layout_proj: Linear,
    pub query: usize,
    pub blocks: Vec<Block>,
    pub final_ln: Norm,
    pub head_category: Linear,
    pub head_location: Vec<Linear>,
    pub head_orientation: Vec<Linear>,
    pub head_size: Vec<Linear>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<Spec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.add(format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform(a)),
            b: self.add(format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![width], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![width], Init::Zeros),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: &[usize], output: usize) -> Vec<Linear> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.{i}"), w[0], w[1]))
            .collect()
    }
}

fn layout(config: &ModelConfig) -> (Registry, ParamIds) {
    let d = config.d_model;
    let k = config.components;
    let enc = config.encoding_width();
    let mut r = Registry::default();
    let embed = r.add(
        "embed.category".into(),
        vec![config.categories() + 1, d],
        Init::Uniform(1.0),
    );
    let object_proj = r.linear("object.proj", config.object_feature_width(), d);
    let mut cin = 1;
    let mut convs = Vec::new();
    for (i, &cout) in config.layout_channels.iter().enumerate() {
        let a = 1.0 / ((cin * 9) as f64).sqrt();
        convs.push(Linear {
            w: r.add(format!("layout.conv{i}.w"), vec![cout, cin, 3, 3], Init::Uniform(a)),
            b: r.add(format!("layout.conv{i}.b"), vec![cout], Init::Zeros),
        });
        cin = cout;
    }
    let layout_proj = r.linear("layout.proj", cin, d);
    let query = r.add("query".into(), vec![d], Init::Uniform(1.0));
    let blocks = (0..config.n_layers)
        .map(|l| {
            let p = format!("block{l}");
            Block {
                ln1: r.norm(&format!("{p}.ln1"), d),
                wq: r.linear(&format!("{p}.attn.q"), d, d),
                wk: r.linear(&format!("{p}.attn.k"), d, d),
                wv: r.linear(&format!("{p}.attn.v"), d, d),
                wo: r.linear(&format!("{p}.attn.o"), d, d),
                ln2: r.norm(&format!("{p}.ln2"), d),
                ff1: r.linear(&format!("{p}.ff.0"), d, config.d_ff),
                ff2: r.linear(&format!("{p}.ff.1"), config.d_ff, d),
            }
        })
        .collect();
    let final_ln = r.norm("final_ln", d);
    let head_category = r.linear("head.category", d, config.categories() + 1);
    let hidden = &config.head_hidden;
    let head_location = r.mlp("head.location", 2 * d, hidden, 9 * k);
    let head_orientation = r.mlp("head.orientation", 2 * d + 3 * enc, hidden, 3 * k);
    let head_size = r.mlp("head.size", 2 * d + 4 * enc, hidden, 9 * k);
    let ids = ParamIds {
        embed,
        object_proj,
        convs,
        layout_proj,
        query,
        blocks,
        final_ln,
        head_category,
        head_location,
        head_orientation,
        head_size,
    };
    (r, ids)
}

/// Network parameters plus the configuration that fixes their shapes.
/// Parameter tensors are shared behind `Arc` and never mutated while a
/// forward pass holds them.
#[derive(Clone)]
pub struct Model<S: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor<S>>>,
    ids: ParamIds,
    name_index: HashMap<String, usize>,
    /// Per-category mean count per scene, used to sort contexts in the
    /// fixed-order mode.
    category_frequency: Option<Vec<f64>>,
}

impl<S: Real> std::fmt::Debug for Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<S: Real> Model<S> {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (reg, ids) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(reg.specs.len());
        let mut params = Vec::with_capacity(reg.specs.len());
        for spec in reg.specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Uniform(a) => (0..n).map(|_| S::of(rng.random_range(-a..a))).collect(),
            };
            names.push(spec.name);
            params.push(Arc::new(Tensor::new(spec.shape, data)?));
        }
        Ok(Self::assemble(config, names, params, ids))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, params: Vec<Arc<Tensor<S>>>, ids: ParamIds) -> Self {
        let name_index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            ids,
            name_index,
            category_frequency: None,
        }
    }

    /// Builds a model from named tensors; every expected name must be
    /// present with its configured shape. Unknown names are rejected.
    pub fn from_named(config: ModelConfig, mut tensors: HashMap<String, Tensor<S>>) -> Result<Self, ModelError> {
        config.validate()?;
        let (reg, ids) = layout(&config);
        let mut names = Vec::with_capacity(reg.specs.len());
        let mut params = Vec::with_capacity(reg.specs.len());
        for spec in reg.specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| ModelError::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(spec.name);
            params.push(Arc::new(t));
        }
        if let Some(extra) = tensors.keys().min() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self::assemble(config, names, params, ids))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor<S>>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.name_index.get(name).map(|&i| self.params[i].as_ref())
    }

    /// Mutable access for optimizers; clones a tensor only if a forward
    /// pass still shares it.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.params.iter_mut().map(Arc::make_mut)
    }

    pub fn set_param(&mut self, index: usize, value: Tensor<S>) -> Result<(), ModelError> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| ModelError::MissingParameter(index.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for {}",
                self.names[index]
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn category_frequency(&self) -> Option<&[f64]> {
        self.category_frequency.as_deref()
    }

    pub fn set_category_frequency(&mut self, freq: Option<Vec<f64>>) {
        self.category_frequency = freq;
    }

    /// Same parameters at another float width.
    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
            ids: self.ids.clone(),
            name_index: self.name_index.clone(),
            category_frequency: self.category_frequency.clone(),
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &Graph<S>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf_shared(Arc::clone(p), requires_grad))
                .collect(),
        }
    }

    pub(crate) fn check_category(&self, category: usize) -> Result<(), ModelError> {
        let classes = self.config.categories();
        if category == classes {
            return Err(ModelError::EndSymbol("a context object"));
        }
        if category > classes {
            return Err(ModelError::CategoryOutOfRange { category, classes });
        }
        Ok(())
    }
}

/// Graph handles of every parameter, in [`Model::names`] order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Standard transformer index embedding of position `pos`.
pub fn index_embedding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// `(sin 2^0 πp, cos 2^0 πp, ..., sin 2^(L-1) πp, cos 2^(L-1) πp)`.
pub fn positional_encoding(p: f64, octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * octaves);
    crate::autodiff::push_sinusoid(p, octaves, &mut out);
    out
}
