use rand::RngCore;

use super::params::MlpIndex;
use super::{EncoderError, EncoderParams, TokenBatch};
use crate::autodiff::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Dropout source; `None` runs in evaluation mode.
pub type TrainRng<'r> = Option<&'r mut dyn RngCore>;

/// Shorter-lived copy of a dropout source.
pub fn reborrow<'a>(rng: &'a mut TrainRng<'_>) -> TrainRng<'a> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// One network's parameters placed on a graph.
pub struct Net<'p, T> {
    pub params: &'p EncoderParams<T>,
    vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[n_rows * width, d_model]` final hidden states.
    pub hidden: Var,
    /// `[n_rows, d_model]` cls states.
    pub cls: Var,
}

impl<'p, T: Scalar> Net<'p, T> {
    /// Copy every parameter onto `g`, as trainable leaves or constants.
    pub fn bind(g: &mut Graph<T>, params: &'p EncoderParams<T>, trainable: bool) -> Self {
        let vars = params
            .store
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Self { params, vars }
    }

    /// Graph variable of parameter `i`, in store order.
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: TrainRng<'_>) -> Var {
        match rng {
            Some(r) => g.dropout(x, self.params.config.dropout, r),
            None => x,
        }
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: usize, b: usize) -> Result<Var, EncoderError> {
        let h = g.matmul(x, self.var(w))?;
        Ok(g.add_bias(h, self.var(b))?)
    }

    fn mlp(&self, g: &mut Graph<T>, x: Var, m: MlpIndex, mut rng: TrainRng<'_>) -> Result<Var, EncoderError> {
        let h = self.linear(g, x, m.w1, m.b1)?;
        let h = g.gelu(h);
        let h = self.dropout(g, h, reborrow(&mut rng));
        self.linear(g, h, m.w2, m.b2)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, gain: usize, bias: usize) -> Result<Var, EncoderError> {
        let eps = T::of(self.params.config.layer_norm_eps);
        let h = g.layer_norm(x, eps);
        let h = g.mul_bias(h, self.var(gain))?;
        Ok(g.add_bias(h, self.var(bias))?)
    }

    fn gene_slot_mask(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Var {
        let d = self.params.config.d_model;
        let mut data = vec![T::zero(); batch.n_slots() * d];
        for s in batch.gene_slots() {
            data[s * d..(s + 1) * d].fill(T::one());
        }
        g.constant(Tensor::new(vec![batch.n_slots(), d], data).expect("shape"))
    }

    fn gene_lookup(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<Var, EncoderError> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.embedding_lookup(self.var(self.params.index.gene_embedding), &ids)?)
    }

    /// Input embeddings `[n_slots, d_model]`: gene embedding plus value
    /// embedding at gene slots, gene embedding alone at cls and pad slots.
    pub fn embed(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var, EncoderError> {
        let genes = self.gene_lookup(g, &batch.gene_ids)?;
        let vals = Tensor::new(
            vec![batch.n_slots(), 1],
            batch.values.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("shape");
        let vals = g.constant(vals);
        let v = self.mlp(g, vals, self.params.index.value_encoder, None)?;
        let keep = self.gene_slot_mask(g, batch);
        let v = g.mul(v, keep)?;
        Ok(g.add(genes, v)?)
    }

    /// [`Self::embed`] plus the perturbation-token embedding at gene slots.
    /// `pert_tokens` has one entry per slot.
    pub fn embed_perturbed(&self, g: &mut Graph<T>, batch: &TokenBatch, pert_tokens: &[u32]) -> Result<Var, EncoderError> {
        let table = self.var(self.params.index.perturbation_embedding);
        let n = g.value(table).n_rows();
        if let Some(&id) = pert_tokens.iter().find(|&&t| t as usize >= n) {
            return Err(EncoderError::UnknownPerturbation { id, n });
        }
        assert_eq!(pert_tokens.len(), batch.n_slots(), "one perturbation token per slot");
        let x = self.embed(g, batch)?;
        let ids: Vec<usize> = pert_tokens.iter().map(|&t| t as usize).collect();
        let p = g.embedding_lookup(table, &ids)?;
        let keep = self.gene_slot_mask(g, batch);
        let p = g.mul(p, keep)?;
        Ok(g.add(x, p)?)
    }

    /// Run the transformer stack on embeddings `x` under the batch's
    /// structured attention masks.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, batch: &TokenBatch, mut rng: TrainRng<'_>) -> Result<EncoderOutput, EncoderError> {
        let cfg = &self.params.config;
        let w = batch.width();
        let dh = cfg.head_dim();
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let masks: Vec<Var> = batch
            .attention_masks::<T>()
            .into_iter()
            .map(|m| g.constant(m))
            .collect();
        let mut x = x;
        for layer in &self.params.index.layers {
            let q = g.matmul(x, self.var(layer.wq))?;
            let k = g.matmul(x, self.var(layer.wk))?;
            let v = g.matmul(x, self.var(layer.wv))?;
            let mut cells = Vec::with_capacity(batch.n_rows());
            for (r, &mask) in masks.iter().enumerate() {
                let qc = g.slice(q, 0, r * w, (r + 1) * w)?;
                let kc = g.slice(k, 0, r * w, (r + 1) * w)?;
                let kt = g.transpose(kc)?;
                let vc = g.slice(v, 0, r * w, (r + 1) * w)?;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let qh = g.slice(qc, 1, h * dh, (h + 1) * dh)?;
                    let kh = g.slice(kt, 0, h * dh, (h + 1) * dh)?;
                    let vh = g.slice(vc, 1, h * dh, (h + 1) * dh)?;
                    let s = g.matmul(qh, kh)?;
                    let s = g.scale(s, inv_sqrt);
                    let s = g.add(s, mask)?;
                    let p = g.softmax_lastdim(s);
                    heads.push(g.matmul(p, vh)?);
                }
                cells.push(g.concat(&heads, 1)?);
            }
            let attn = g.concat(&cells, 0)?;
            let attn = self.linear(g, attn, layer.wo, layer.bo)?;
            let attn = self.dropout(g, attn, reborrow(&mut rng));
            let res = g.add(x, attn)?;
            x = self.norm(g, res, layer.ln1_gain, layer.ln1_bias)?;
            let ff = self.mlp(g, x, layer.ff, reborrow(&mut rng))?;
            let ff = self.dropout(g, ff, reborrow(&mut rng));
            let res = g.add(x, ff)?;
            x = self.norm(g, res, layer.ln2_gain, layer.ln2_bias)?;
        }
        let cls_rows: Vec<usize> = (0..batch.n_rows()).map(|r| r * w).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        Ok(EncoderOutput { hidden: x, cls })
    }

    /// `embed` followed by `encode`.
    pub fn forward(&self, g: &mut Graph<T>, batch: &TokenBatch, rng: TrainRng<'_>) -> Result<EncoderOutput, EncoderError> {
        let x = self.embed(g, batch)?;
        self.encode(g, x, batch, rng)
    }

    fn scalar_head(&self, g: &mut Graph<T>, hidden: Var, slots: &[usize], m: MlpIndex) -> Result<Var, EncoderError> {
        let h = g.gather_rows(hidden, slots)?;
        let y = self.mlp(g, h, m, None)?;
        Ok(g.reshape(y, vec![slots.len()])?)
    }

    /// Predicted values `[slots.len()]` at flat slot indices, from the
    /// hidden states.
    pub fn predict_values(&self, g: &mut Graph<T>, hidden: Var, slots: &[usize]) -> Result<Var, EncoderError> {
        self.scalar_head(g, hidden, slots, self.params.index.value_head)
    }

    /// Cell-embedding-conditioned predictions `f(y_i)ᵀ W e` at flat slot
    /// indices, where `y_i` is the gene embedding and `e` the slot's cls
    /// state.
    pub fn gepc_predict(&self, g: &mut Graph<T>, batch: &TokenBatch, cls: Var, slots: &[usize]) -> Result<Var, EncoderError> {
        let ids: Vec<u32> = slots.iter().map(|&s| batch.gene_ids[s]).collect();
        let y = self.gene_lookup(g, &ids)?;
        let q = self.mlp(g, y, self.params.index.gepc_query, None)?;
        let wt = g.transpose(self.var(self.params.index.gepc_w))?;
        let we = g.matmul(cls, wt)?;
        let rows: Vec<usize> = slots.iter().map(|&s| s / batch.width()).collect();
        let we = g.gather_rows(we, &rows)?;
        let prod = g.mul(q, we)?;
        Ok(g.row_sum(prod))
    }

    /// Predictor head applied to cls states.
    pub fn predict_embedding(&self, g: &mut Graph<T>, cls: Var, rng: TrainRng<'_>) -> Result<Var, EncoderError> {
        self.mlp(g, cls, self.params.index.predictor, rng)
    }

    /// Expression predictions of the perturbation task at flat slot indices.
    pub fn predict_perturbed_values(&self, g: &mut Graph<T>, hidden: Var, slots: &[usize]) -> Result<Var, EncoderError> {
        self.scalar_head(g, hidden, slots, self.params.index.perturbation_head)
    }

    /// Predictor head of the perturbation task.
    pub fn predict_perturbed_embedding(&self, g: &mut Graph<T>, cls: Var, rng: TrainRng<'_>) -> Result<Var, EncoderError> {
        self.mlp(g, cls, self.params.index.perturbation_predictor, rng)
    }
}
