use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seedenc_tensor::{Scalar, Tape, Tensor, Var};

use super::ModelConfig;
use crate::{Error, Result};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Parameters recorded on a tape, addressed by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams {
            vars: iter.into_iter().collect(),
        }
    }
}

pub const DECODER_PREFIX: &str = "dec.";

fn layer_names(prefix: &str, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
    let mut v = Vec::new();
    for proj in ["q", "k", "v", "o"] {
        v.push((format!("{prefix}.attn.{proj}.w"), vec![d, d]));
        v.push((format!("{prefix}.attn.{proj}.b"), vec![d]));
    }
    v.push((format!("{prefix}.ln1.gamma"), vec![d]));
    v.push((format!("{prefix}.ln1.beta"), vec![d]));
    v.push((format!("{prefix}.ff1.w"), vec![d, f]));
    v.push((format!("{prefix}.ff1.b"), vec![f]));
    v.push((format!("{prefix}.ff2.w"), vec![f, d]));
    v.push((format!("{prefix}.ff2.b"), vec![d]));
    v.push((format!("{prefix}.ln2.gamma"), vec![d]));
    v.push((format!("{prefix}.ln2.beta"), vec![d]));
    v
}

/// Every parameter name and shape for `cfg`, in canonical order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, l) = (cfg.hidden_dim, cfg.vocab_size, cfg.max_seq_len);
    let mut out = vec![
        ("emb.tok".to_string(), vec![v, d]),
        ("emb.pos".to_string(), vec![l, d]),
        ("emb.ln.gamma".to_string(), vec![d]),
        ("emb.ln.beta".to_string(), vec![d]),
    ];
    for i in 0..cfg.num_enc_layers {
        out.extend(layer_names(&format!("enc.{i}"), cfg));
    }
    out.push(("mlm.dense.w".into(), vec![d, d]));
    out.push(("mlm.dense.b".into(), vec![d]));
    out.push(("mlm.ln.gamma".into(), vec![d]));
    out.push(("mlm.ln.beta".into(), vec![d]));
    out.push(("mlm.bias".into(), vec![v]));
    if !cfg.tie_decoder_embeddings {
        out.push(("dec.tok".into(), vec![v, d]));
        out.push(("dec.pos".into(), vec![l, d]));
        out.push(("dec.out.w".into(), vec![d, v]));
    }
    out.push(("dec.emb_ln.gamma".into(), vec![d]));
    out.push(("dec.emb_ln.beta".into(), vec![d]));
    for i in 0..cfg.num_dec_layers {
        out.extend(layer_names(&format!("dec.{i}"), cfg));
    }
    out.push(("dec.out_bias".into(), vec![v]));
    out
}

impl ParamStore<f32> {
    /// Gaussian weights (std `init_std`), zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for (name, shape) in parameter_layout(cfg) {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, cfg.init_std, &mut rng)
            };
            store.insert(name, t);
        }
        Ok(store)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Names from `layout` absent from this store.
    pub fn missing(&self, layout: &[(String, Vec<usize>)]) -> Vec<String> {
        layout
            .iter()
            .filter(|(n, _)| !self.tensors.contains_key(n))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Everything except the decoder-only tensors.
    pub fn encoder_only(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !k.starts_with(DECODER_PREFIX))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (k, v) in &self.tensors {
            vars.insert(k.clone(), tape.param(v)?);
        }
        Ok(BoundParams { vars })
    }

    /// Records tensors as constants (no gradient), for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (k, v) in &self.tensors {
            let t = Tensor::new(v.shape().to_vec(), v.data().to_vec())?;
            vars.insert(k.clone(), tape.constant(t)?);
        }
        Ok(BoundParams { vars })
    }

    /// Adds the gradients of the last backward pass on `tape` into each
    /// tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) {
        for (name, var) in bound.iter() {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), tape.grad(var)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }
}
