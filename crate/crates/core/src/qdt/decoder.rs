use super::model::{Activation, QdtModel};
use crate::envs::BatchController;
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Graph, Scalar};

const BD: usize = 0;
const OBS: usize = 1;
const ACT: usize = 2;

/// Autoregressive action generation for a batch of episodes, one token at a
/// time with cached keys and values.
///
/// Produces the same actions as re-running the full causal forward pass over
/// `(bd, o_0, a_0, ..., bd, o_t)` at every step.
pub struct Decoder<'m, F: Scalar = f32> {
    model: &'m QdtModel<F>,
    /// `n x bd_dim`, one conditioning descriptor per sequence.
    goals: Vec<F>,
    n: usize,
    cap: usize,
    pos: usize,
    step: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    pending: Option<Vec<F>>,
}

impl<'m, F: Scalar> Decoder<'m, F> {
    pub fn new(model: &'m QdtModel<F>, goals: &[f64], n: usize) -> Result<Self> {
        let bd_dim = model.dims.bd_dim;
        if goals.len() != n * bd_dim {
            return Err(Error::DimensionMismatch {
                expected: n * bd_dim,
                actual: goals.len(),
            });
        }
        let mut dec = Self {
            model,
            goals: goals.iter().map(|&x| F::lit(x)).collect(),
            n,
            cap: 3 * model.config.max_t,
            pos: 0,
            step: 0,
            keys: Vec::new(),
            values: Vec::new(),
            pending: None,
        };
        dec.reset_cache();
        Ok(dec)
    }

    /// Same goal for all `n` sequences.
    pub fn broadcast(model: &'m QdtModel<F>, goal: &[f64], n: usize) -> Result<Self> {
        let goals: Vec<f64> = (0..n).flat_map(|_| goal.iter().copied()).collect();
        Self::new(model, &goals, n)
    }

    fn reset_cache(&mut self) {
        let d = self.model.config.emb_dim;
        let size = self.n * self.cap * d;
        let layers = self.model.config.n_layers;
        self.keys = vec![vec![F::zero(); size]; layers];
        self.values = vec![vec![F::zero(); size]; layers];
        self.pos = 0;
        self.step = 0;
        self.pending = None;
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Feeds observation `o_t` (after the action chosen at `t - 1`, if any)
    /// and returns the predicted actions `n x act_dim`, unclamped.
    pub fn observe(&mut self, obs: &[F]) -> Result<Vec<F>> {
        if self.step >= self.model.config.max_t {
            return Err(Error::invalid(format!(
                "episode longer than max_t = {}",
                self.model.config.max_t
            )));
        }
        if obs.len() != self.n * self.model.dims.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.model.dims.obs_dim,
                actual: obs.len(),
            });
        }
        if let Some(prev) = self.pending.take() {
            self.push_token(ACT, self.step - 1, prev)?;
        }
        self.push_token(BD, self.step, self.goals.clone())?;
        let hidden = self.push_token(OBS, self.step, obs.to_vec())?;
        let mut g = Graph::new(&self.model.params, false);
        let d = self.model.config.emb_dim;
        let h = g.input(self.n, d, hidden)?;
        let out = self.model.dense(&mut g, h, &self.model.layout.head)?;
        self.step += 1;
        Ok(g.value(out).to_vec())
    }

    /// Records the actions actually taken at the last observed step.
    pub fn commit(&mut self, actions: &[F]) -> Result<()> {
        if self.step == 0 || self.pending.is_some() {
            return Err(Error::invalid("commit must follow exactly one observe"));
        }
        if actions.len() != self.n * self.model.dims.act_dim {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.model.dims.act_dim,
                actual: actions.len(),
            });
        }
        self.pending = Some(actions.to_vec());
        Ok(())
    }

    /// Runs one token per sequence through the stack; returns the final
    /// hidden states `n x d`.
    fn push_token(&mut self, modality: usize, t: usize, input: Vec<F>) -> Result<Vec<F>> {
        let model = self.model;
        let layout = &model.layout;
        let d = model.config.emb_dim;
        let n = self.n;
        let width = input.len() / n;
        let mut g = Graph::new(&model.params, false);
        let (proj, ln) = &layout.embed[modality];
        let x = g.input(n, width, input)?;
        let x = model.dense(&mut g, x, proj)?;
        let x = model.norm(&mut g, x, ln)?;
        let table = g.param(layout.time);
        let time = g.gather(table, vec![t; n])?;
        let mut x = g.add(x, time)?;
        for (l, blk) in layout.blocks.iter().enumerate() {
            let h = model.norm(&mut g, x, &blk.ln1)?;
            let qkv = model.dense(&mut g, h, &blk.qkv)?;
            let attn = self.attend(l, g.value(qkv));
            let a = g.input(n, d, attn)?;
            let a = model.dense(&mut g, a, &blk.proj)?;
            x = g.add(x, a)?;
            let h = model.norm(&mut g, x, &blk.ln2)?;
            let h = model.dense(&mut g, h, &blk.fc)?;
            let h = match model.config.activation {
                Activation::Relu => g.relu(h),
                Activation::Gelu => g.gelu(h),
            };
            let h = model.dense(&mut g, h, &blk.out)?;
            x = g.add(x, h)?;
        }
        let x = model.norm(&mut g, x, &layout.ln_f)?;
        self.pos += 1;
        Ok(g.value(x).to_vec())
    }

    fn attend(&mut self, layer: usize, qkv: &[F]) -> Vec<F> {
        let d = self.model.config.emb_dim;
        let heads = self.model.config.n_heads;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).expect("head width").sqrt();
        let (pos, cap) = (self.pos, self.cap);
        let keys = &mut self.keys[layer];
        let values = &mut self.values[layer];
        let mut out = vec![F::zero(); self.n * d];
        let mut scores = vec![F::zero(); pos + 1];
        for i in 0..self.n {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            let base = i * cap * d;
            keys[base + pos * d..base + (pos + 1) * d].copy_from_slice(&row[d..2 * d]);
            values[base + pos * d..base + (pos + 1) * d].copy_from_slice(&row[2 * d..]);
            for h in 0..heads {
                let q = &row[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[base + j * d + h * dh..][..dh];
                    *s = scale * q.iter().zip(k).map(|(a, b)| *a * *b).sum::<F>();
                }
                softmax_in_place(&mut scores);
                let o = &mut out[i * d + h * dh..][..dh];
                for (j, p) in scores.iter().enumerate() {
                    let v = &values[base + j * d + h * dh..][..dh];
                    o.iter_mut().zip(v).for_each(|(o, v)| *o += *p * *v);
                }
            }
        }
        out
    }
}

impl<F: Scalar> BatchController for Decoder<'_, F> {
    fn obs_dim(&self) -> usize {
        self.model.dims.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.model.dims.act_dim
    }

    fn reset(&mut self, n: usize) {
        assert_eq!(n, self.n, "decoder was built for {} sequences", self.n);
        self.reset_cache();
    }

    fn act_batch(&mut self, obs: &[f64], actions: &mut [f64]) {
        let obs: Vec<F> = obs.iter().map(|&x| F::lit(x)).collect();
        let pred = self.observe(&obs).expect("episode fits the model context");
        let clamped: Vec<F> = pred.iter().map(|&a| a.max(-F::one()).min(F::one())).collect();
        for (dst, a) in actions.iter_mut().zip(&clamped) {
            *dst = a.to_f64().unwrap_or(0.0);
        }
        self.commit(&clamped).expect("one commit per step");
    }
}
