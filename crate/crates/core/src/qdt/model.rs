use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetHeader, Record};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamSet, Scalar, Tensor, Var};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};

/// Hidden activation of the transformer MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QdtConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub emb_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_t: usize,
    pub epochs: usize,
    /// Evaluate on the goal grid every this many epochs.
    pub eval_every: usize,
    pub grad_clip: f64,
    pub activation: Activation,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for QdtConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            emb_dim: 64,
            dropout: 0.1,
            lr: 7e-4,
            batch_size: 32,
            max_t: 100,
            epochs: 40,
            eval_every: 4,
            grad_clip: 1.0,
            activation: Activation::Relu,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl QdtConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_layers == 0 {
            out.push("n_layers: must be at least 1".to_string());
        }
        if self.n_heads == 0 || self.emb_dim == 0 || self.emb_dim % self.n_heads != 0 {
            out.push(format!(
                "emb_dim: {} must be a positive multiple of n_heads = {}",
                self.emb_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push("dropout: must lie in [0, 1)".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push("lr: must be finite and non-negative".to_string());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be at least 1".to_string());
        }
        if self.max_t == 0 {
            out.push("max_t: must be at least 1".to_string());
        }
        if self.eval_every == 0 {
            out.push("eval_every: must be at least 1".to_string());
        }
        if !(self.grad_clip > 0.0) {
            out.push("grad_clip: must be positive".to_string());
        }
        if self.mlp_ratio == 0 {
            out.push("mlp_ratio: must be at least 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(p.join("; ")))
        }
    }
}

/// Input and output widths, fixed by the environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub bd_dim: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl ModelDims {
    pub fn of(header: &DatasetHeader) -> Self {
        Self {
            bd_dim: header.bd_dim,
            obs_dim: header.obs_dim,
            act_dim: header.act_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub qkv: Dense,
    pub proj: Dense,
    pub ln2: Norm,
    pub fc: Dense,
    pub out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed: [(Dense, Norm); 3],
    pub time: usize,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub head: Dense,
}

/// Metadata stored alongside checkpoint tensors.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: QdtConfig,
    dims: ModelDims,
}

/// The behavior-conditioned causal transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct QdtModel<F: Scalar = f32> {
    pub config: QdtConfig,
    pub dims: ModelDims,
    pub params: ParamSet<F>,
    pub(crate) layout: Layout,
}

/// A minibatch of equal-length trajectories, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<F> {
    pub batch: usize,
    pub len: usize,
    /// `[batch * len x bd_dim]`, the conditioning descriptor at every step.
    pub bd: Vec<F>,
    pub obs: Vec<F>,
    pub act: Vec<F>,
}

impl<F: Scalar> TokenBatch<F> {
    pub fn from_records(records: &[&Record], header: &DatasetHeader) -> Self {
        let t = header.episode_len;
        let cast = |x: &f32| F::from_f32(*x).expect("finite");
        let mut bd = Vec::with_capacity(records.len() * t * header.bd_dim);
        let mut obs = Vec::with_capacity(records.len() * t * header.obs_dim);
        let mut act = Vec::with_capacity(records.len() * t * header.act_dim);
        for r in records {
            for _ in 0..t {
                bd.extend(r.conditioning_bd.iter().map(cast));
            }
            obs.extend(r.observations.iter().map(cast));
            act.extend(r.actions.iter().map(cast));
        }
        Self {
            batch: records.len(),
            len: t,
            bd,
            obs,
            act,
        }
    }
}

fn names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

impl<F: Scalar> QdtModel<F> {
    /// Fresh model: dense weights `N(0, init_std^2)`, biases zero, layer
    /// norms at identity.
    pub fn new(config: QdtConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.emb_dim;
        let hidden = config.mlp_ratio * d;
        let mut rng = rng_from_seed(derive_seed(seed, stream::MODEL_INIT, 0));
        let mut ps = ParamSet::new();
        let std = config.init_std;
        let dense = |ps: &mut ParamSet<F>, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize| -> Result<Dense> {
            let (wn, bn) = names(prefix);
            let w = ps.push(wn, Tensor::normal(vec![fan_in, fan_out], std, rng))?;
            let b = ps.push(bn, Tensor::zeros(vec![fan_out]))?;
            Ok(Dense { w, b })
        };
        let norm = |ps: &mut ParamSet<F>, prefix: &str| -> Result<Norm> {
            let g = ps.push(format!("{prefix}.g"), Tensor::filled(vec![d], F::one()))?;
            let b = ps.push(format!("{prefix}.b"), Tensor::zeros(vec![d]))?;
            Ok(Norm { g, b })
        };
        let mut embed = Vec::with_capacity(3);
        for (name, width) in [("bd", dims.bd_dim), ("obs", dims.obs_dim), ("act", dims.act_dim)] {
            let proj = dense(&mut ps, &mut rng, &format!("embed_{name}"), width, d)?;
            let ln = norm(&mut ps, &format!("embed_{name}.ln"))?;
            embed.push((proj, ln));
        }
        let time = {
            let t = Tensor::normal(vec![config.max_t, d], std, &mut rng);
            ps.push("embed_time", t)?
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                ln1: norm(&mut ps, &format!("{p}.ln1"))?,
                qkv: dense(&mut ps, &mut rng, &format!("{p}.attn.qkv"), d, 3 * d)?,
                proj: dense(&mut ps, &mut rng, &format!("{p}.attn.proj"), d, d)?,
                ln2: norm(&mut ps, &format!("{p}.ln2"))?,
                fc: dense(&mut ps, &mut rng, &format!("{p}.mlp.fc"), d, hidden)?,
                out: dense(&mut ps, &mut rng, &format!("{p}.mlp.proj"), hidden, d)?,
            });
        }
        let ln_f = norm(&mut ps, "ln_f")?;
        let head = dense(&mut ps, &mut rng, "head", d, dims.act_dim)?;
        let embed: [(Dense, Norm); 3] = embed.try_into().expect("three modalities");
        Ok(Self {
            config,
            dims,
            params: ps,
            layout: Layout {
                embed,
                time,
                blocks,
                ln_f,
                head,
            },
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> QdtModel<G> {
        QdtModel {
            config: self.config.clone(),
            dims: self.dims,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.n_values()
    }

    pub fn zero_action_head(&mut self) {
        for id in [self.layout.head.w, self.layout.head.b] {
            self.params.get_mut(id).data.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub(crate) fn dense(&self, g: &mut Graph<'_, F>, x: Var, p: &Dense) -> Result<Var> {
        let (w, b) = (g.param(p.w), g.param(p.b));
        g.linear(x, w, b)
    }

    pub(crate) fn norm(&self, g: &mut Graph<'_, F>, x: Var, p: &Norm) -> Result<Var> {
        let (gamma, beta) = (g.param(p.g), g.param(p.b));
        g.layer_norm(x, gamma, beta)
    }

    /// Token embeddings `[batch * 3 len x d]`: for every step `t` the
    /// descriptor, observation and action tokens, each with `E_t(t)` added.
    pub fn embed(&self, g: &mut Graph<'_, F>, batch: &TokenBatch<F>) -> Result<Var> {
        let (b, t) = (batch.batch, batch.len);
        if t > self.config.max_t {
            return Err(Error::invalid(format!(
                "trajectory length {t} exceeds max_t = {}",
                self.config.max_t
            )));
        }
        let rows = b * t;
        let inputs = [
            (&batch.bd, self.dims.bd_dim),
            (&batch.obs, self.dims.obs_dim),
            (&batch.act, self.dims.act_dim),
        ];
        let steps: Vec<usize> = (0..rows).map(|r| r % t).collect();
        let table = g.param(self.layout.time);
        let time = g.gather(table, steps)?;
        let mut parts = Vec::with_capacity(3);
        for ((data, width), (proj, ln)) in inputs.into_iter().zip(&self.layout.embed) {
            let x = g.input(rows, width, data.clone())?;
            let x = self.dense(g, x, proj)?;
            let x = self.norm(g, x, ln)?;
            parts.push(g.add(x, time)?);
        }
        g.interleave(&parts, b, t)
    }

    /// Runs the transformer stack over token embeddings.
    pub fn transform(&self, g: &mut Graph<'_, F>, tokens: Var, batch: usize, len: usize, dropout_seed: u64) -> Result<Var> {
        let p = self.config.dropout;
        let mut site = 0u64;
        let mut drop = |g: &mut Graph<'_, F>, x: Var| {
            site += 1;
            g.dropout(x, p, derive_seed(dropout_seed, stream::DROPOUT, site))
        };
        let mut x = drop(g, tokens);
        for blk in &self.layout.blocks {
            let h = self.norm(g, x, &blk.ln1)?;
            let qkv = self.dense(g, h, &blk.qkv)?;
            let a = g.causal_attention(qkv, batch, len, self.config.n_heads)?;
            let a = self.dense(g, a, &blk.proj)?;
            let a = drop(g, a);
            x = g.add(x, a)?;
            let h = self.norm(g, x, &blk.ln2)?;
            let h = self.dense(g, h, &blk.fc)?;
            let h = match self.config.activation {
                Activation::Relu => g.relu(h),
                Activation::Gelu => g.gelu(h),
            };
            let h = self.dense(g, h, &blk.out)?;
            let h = drop(g, h);
            x = g.add(x, h)?;
        }
        self.norm(g, x, &self.layout.ln_f)
    }

    /// Action predictions `[batch * len x act_dim]` read at the observation
    /// tokens.
    pub fn forward(&self, g: &mut Graph<'_, F>, batch: &TokenBatch<F>, dropout_seed: u64) -> Result<Var> {
        let (b, t) = (batch.batch, batch.len);
        let tokens = self.embed(g, batch)?;
        let h = self.transform(g, tokens, b, 3 * t, dropout_seed)?;
        let obs_rows: Vec<usize> = (0..b * t).map(|r| 3 * r + 1).collect();
        let h = g.gather(h, obs_rows)?;
        self.dense(g, h, &self.layout.head)
    }

    /// Predictions for a batch, without dropout.
    pub fn predict(&self, batch: &TokenBatch<F>) -> Result<Vec<F>> {
        let mut g = Graph::new(&self.params, false);
        let out = self.forward(&mut g, batch, 0)?;
        Ok(g.value(out).to_vec())
    }

    /// Final hidden state (after the last layer norm) at every token.
    pub fn hidden_states(&self, batch: &TokenBatch<F>) -> Result<Vec<F>> {
        let mut g = Graph::new(&self.params, false);
        let tokens = self.embed(&mut g, batch)?;
        let h = self.transform(&mut g, tokens, batch.batch, 3 * batch.len, 0)?;
        Ok(g.value(h).to_vec())
    }

    /// Token embeddings of one record, `[3T x d]`.
    pub fn tokenize(&self, record: &Record, header: &DatasetHeader) -> Result<Vec<F>> {
        let batch = TokenBatch::from_records(&[record], header);
        let mut g = Graph::new(&self.params, false);
        let tokens = self.embed(&mut g, &batch)?;
        Ok(g.value(tokens).to_vec())
    }
}

impl QdtModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            dims: self.dims,
        };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("plain data"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        let mut model = Self::new(meta.config, meta.dims, 0)?;
        if model.params.names() != ck.params.names() {
            return Err(Error::invalid("checkpoint tensors do not match the model layout"));
        }
        for (id, (_, t)) in ck.params.iter().enumerate() {
            let slot = model.params.get_mut(id);
            if slot.shape != t.shape {
                return Err(Error::invalid(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    ck.params.name(id),
                    t.shape,
                    slot.shape
                )));
            }
            slot.data.clone_from(&t.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::nn::write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::nn::read_checkpoint(path)?)
    }
}
