use rand::Rng;

use super::{EncoderConfig, EncoderError};
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrite every tensor, keeping names; shapes must match.
    pub fn assign(&mut self, tensors: Vec<Tensor<T>>) -> Result<(), EncoderError> {
        if tensors.len() != self.tensors.len() {
            return Err(EncoderError::Param {
                name: "<all>".into(),
                msg: format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()),
            });
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(EncoderError::Param {
                    name: self.names[i].clone(),
                    msg: format!("shape {:?} does not match {:?}", t.shape(), self.tensors[i].shape()),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Positions of a two-layer perceptron's tensors in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpIndex {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ff: MlpIndex,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamIndex {
    pub gene_embedding: usize,
    pub value_encoder: MlpIndex,
    pub layers: Vec<LayerIndex>,
    pub value_head: MlpIndex,
    pub gepc_query: MlpIndex,
    pub gepc_w: usize,
    pub predictor: MlpIndex,
    pub perturbation_embedding: usize,
    pub perturbation_head: MlpIndex,
    pub perturbation_predictor: MlpIndex,
}

/// Encoder, heads and embedding tables of one network (student or teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub vocab_len: usize,
    pub store: ParamStore<T>,
    pub index: ParamIndex,
}

struct Builder<'r, T, R: ?Sized> {
    store: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.store.push(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn linear_weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn filled(&mut self, name: String, len: usize, v: f64) -> usize {
        self.store.push(name, Tensor::filled(&[len], T::of(v)))
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> MlpIndex {
        MlpIndex {
            w1: self.linear_weight(format!("{prefix}.w1"), d_in, hidden),
            b1: self.filled(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.linear_weight(format!("{prefix}.w2"), hidden, d_out),
            b2: self.filled(format!("{prefix}.b2"), d_out, 0.0),
        }
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Random initialization. Linear weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero, norm gains one. Embedding tables have
    /// standard deviation `init_scale`; the "not perturbed" row is zero.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, vocab_len: usize, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let emb_bound = config.init_scale * 3f64.sqrt();
        let mut b = Builder {
            store: ParamStore::default(),
            rng,
        };
        let gene_embedding = b.uniform("gene_embedding".into(), &[vocab_len, d], emb_bound);
        let value_encoder = b.mlp("value_encoder", 1, config.value_hidden, d);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerIndex {
                    wq: b.linear_weight(format!("{p}.attn.wq"), d, d),
                    wk: b.linear_weight(format!("{p}.attn.wk"), d, d),
                    wv: b.linear_weight(format!("{p}.attn.wv"), d, d),
                    wo: b.linear_weight(format!("{p}.attn.wo"), d, d),
                    bo: b.filled(format!("{p}.attn.bo"), d, 0.0),
                    ln1_gain: b.filled(format!("{p}.norm1.gain"), d, 1.0),
                    ln1_bias: b.filled(format!("{p}.norm1.bias"), d, 0.0),
                    ff: b.mlp(&format!("{p}.ff"), d, config.ff_hidden, d),
                    ln2_gain: b.filled(format!("{p}.norm2.gain"), d, 1.0),
                    ln2_bias: b.filled(format!("{p}.norm2.bias"), d, 0.0),
                }
            })
            .collect();
        let value_head = b.mlp("value_head", d, d, 1);
        let gepc_query = b.mlp("gepc.query", d, config.gepc_hidden, d);
        let gepc_w = b.linear_weight("gepc.w".into(), d, d);
        let predictor = b.mlp("predictor", d, d, d);
        let perturbation_embedding = b.uniform("perturbation_embedding".into(), &[2, d], emb_bound);
        for v in &mut b.store.get_mut(perturbation_embedding).data_mut()[..d] {
            *v = T::zero();
        }
        let perturbation_head = b.mlp("perturbation.value_head", d, d, 1);
        let perturbation_predictor = b.mlp("perturbation.predictor", d, d, d);
        Ok(Self {
            config: config.clone(),
            vocab_len,
            store: b.store,
            index: ParamIndex {
                gene_embedding,
                value_encoder,
                layers,
                value_head,
                gepc_query,
                gepc_w,
                predictor,
                perturbation_embedding,
                perturbation_head,
                perturbation_predictor,
            },
        })
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        self.store.get(i)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        self.store.get_mut(i)
    }
}
