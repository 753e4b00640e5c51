//! MLP policies stored as flat genotypes, and the isoline variation operator.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::Controller;
use crate::error::{Error, Result};
use crate::rng;

/// Paper-scale isoline sigmas.
pub const PAPER_ISO_SIGMA: f64 = 0.005;
pub const PAPER_LINE_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub act_dim: usize,
}

impl Architecture {
    pub fn new(obs_dim: usize, hidden: Vec<usize>, act_dim: usize) -> Self {
        Self {
            obs_dim,
            hidden,
            act_dim,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.obs_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.act_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    fn max_width(&self) -> usize {
        self.hidden
            .iter()
            .copied()
            .chain([self.obs_dim, self.act_dim])
            .max()
            .unwrap_or(0)
    }
}

/// Flat parameter vector of an MLP. Each layer stores its weights as
/// `fan_out x fan_in` row-major, followed by its biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Genotype {
    pub arch: Architecture,
    pub params: Vec<f32>,
}

impl Genotype {
    pub fn from_params(arch: Architecture, params: Vec<f32>) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.n_params(),
                actual: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.n_params();
        Self {
            arch,
            params: vec![0.0; n],
        }
    }

    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init_random(arch: &Architecture, seed: u64) -> Self {
        let mut rng = rng::rng_from_seed(seed);
        let mut params = Vec::with_capacity(arch.n_params());
        for (fan_in, fan_out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound) as f32);
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self {
            arch: arch.clone(),
            params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Forward pass with `tanh` on every layer; the result lies in `(-1, 1)`.
    pub fn forward(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.arch.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.obs_dim,
                actual: obs.len(),
            });
        }
        let mut policy = MlpPolicy::new(self);
        let mut out = vec![0.0; self.arch.act_dim];
        policy.act(obs, &mut out);
        Ok(out)
    }

    pub fn policy(&self) -> MlpPolicy<'_> {
        MlpPolicy::new(self)
    }
}

/// Borrowing controller with preallocated activations.
pub struct MlpPolicy<'a> {
    genotype: &'a Genotype,
    layers: Vec<(usize, usize)>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'a> MlpPolicy<'a> {
    pub fn new(genotype: &'a Genotype) -> Self {
        let w = genotype.arch.max_width();
        Self {
            genotype,
            layers: genotype.arch.layers(),
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

impl Controller for MlpPolicy<'_> {
    fn obs_dim(&self) -> usize {
        self.genotype.arch.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.genotype.arch.act_dim
    }

    fn act(&mut self, obs: &[f64], action: &mut [f64]) {
        let params = &self.genotype.params;
        self.a[..obs.len()].copy_from_slice(obs);
        let mut offset = 0;
        for &(fan_in, fan_out) in &self.layers {
            let weights = &params[offset..offset + fan_in * fan_out];
            let biases = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &self.a[..fan_in];
            for (o, out) in self.b[..fan_out].iter_mut().enumerate() {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut z = biases[o] as f64;
                for (w, x) in row.iter().zip(input) {
                    z += *w as f64 * x;
                }
                *out = z.tanh();
            }
            std::mem::swap(&mut self.a, &mut self.b);
            offset += fan_in * fan_out + fan_out;
        }
        action.copy_from_slice(&self.a[..action.len()]);
    }
}

/// Isoline (iso + line) variation.
///
/// `child = p1 + iso_sigma * eps + line_sigma * lambda * (p2 - p1)` with
/// `eps ~ N(0, I)` per parameter and a scalar `lambda ~ N(0, 1)`.
pub fn isoline_variation(
    p1: &Genotype,
    p2: &Genotype,
    iso_sigma: f64,
    line_sigma: f64,
    seed: u64,
) -> Result<Genotype> {
    if p1.arch != p2.arch {
        return Err(Error::invalid(format!(
            "isoline parents have different architectures: {:?} vs {:?}",
            p1.arch, p2.arch
        )));
    }
    let mut rng = rng::rng_from_seed(seed);
    let lambda: f64 = StandardNormal.sample(&mut rng);
    let params = p1
        .params
        .iter()
        .zip(&p2.params)
        .map(|(&x, &y)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let (x, y) = (x as f64, y as f64);
            (x + iso_sigma * eps + line_sigma * lambda * (y - x)) as f32
        })
        .collect();
    Ok(Genotype {
        arch: p1.arch.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch() -> Architecture {
        Architecture::new(4, vec![8, 8], 2)
    }

    #[test]
    fn parameter_count() {
        assert_eq!(arch().n_params(), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(arch().n_params(), 130);
        assert_eq!(Genotype::init_random(&arch(), 0).n_params(), 130);
        assert!(Genotype::from_params(arch(), vec![0.0; 129]).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = Genotype::init_random(&arch(), 4);
        assert_eq!(a, Genotype::init_random(&arch(), 4));
        assert_ne!(a, Genotype::init_random(&arch(), 5));
        assert!(a.params[32..40].iter().all(|b| *b == 0.0));
        assert!(a.params[..32].iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn init_weight_mean_is_zero() {
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|s| Genotype::init_random(&arch(), s).params[0] as f64)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_genotype_outputs_zero() {
        let g = Genotype::zeros(arch());
        assert_eq!(g.forward(&[1.0, -3.0, 0.5, 9.0]).unwrap(), vec![0.0, 0.0]);
        assert!(g.forward(&[1.0]).is_err());
    }

    /// Reference forward pass written against the layout, not the policy.
    fn oracle_forward(g: &Genotype, obs: &[f64]) -> Vec<f64> {
        let mut x = obs.to_vec();
        let mut off = 0;
        for (fi, fo) in g.arch.layers() {
            let mut y = vec![0.0; fo];
            for o in 0..fo {
                let mut z = g.params[off + fi * fo + o] as f64;
                for i in 0..fi {
                    z += g.params[off + o * fi + i] as f64 * x[i];
                }
                y[o] = z.tanh();
            }
            off += fi * fo + fo;
            x = y;
        }
        x
    }

    #[test]
    fn forward_matches_oracle() {
        let mut r = rng::rng_from_seed(1);
        for s in 0..50 {
            let mut g = Genotype::init_random(&arch(), s);
            for p in g.params.iter_mut() {
                *p += r.random_range(-0.5..0.5f32);
            }
            let obs: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
            let ours = g.forward(&obs).unwrap();
            assert_eq!(ours, g.forward(&obs).unwrap());
            for (a, b) in ours.iter().zip(oracle_forward(&g, &obs)) {
                assert!((a - b).abs() < 1e-12);
                assert!(a.abs() < 1.0);
            }
        }
    }

    #[test]
    fn isoline_zero_sigma_is_identity() {
        let p1 = Genotype::init_random(&arch(), 1);
        let p2 = Genotype::init_random(&arch(), 2);
        assert_eq!(isoline_variation(&p1, &p2, 0.0, 0.0, 9).unwrap(), p1);
        let c = isoline_variation(&p1, &p2, 0.01, 0.1, 9).unwrap();
        assert_eq!(c, isoline_variation(&p1, &p2, 0.01, 0.1, 9).unwrap());
        let other = Genotype::init_random(&Architecture::new(4, vec![3], 2), 0);
        assert!(isoline_variation(&p1, &other, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn isoline_noise_std_matches_iso_sigma() {
        let p = Genotype::init_random(&arch(), 3);
        let n = 10_000;
        let sigma = 0.005;
        let (mut s1, mut s2) = (0.0, 0.0);
        for seed in 0..n {
            let c = isoline_variation(&p, &p, sigma, 0.7, seed).unwrap();
            let d = c.params[7] as f64 - p.params[7] as f64;
            s1 += d;
            s2 += d * d;
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn isoline_child_is_unbiased() {
        let p1 = Genotype::init_random(&arch(), 3);
        let p2 = Genotype::init_random(&arch(), 4);
        let (iso, line) = (0.005, 0.05);
        let n = 10_000;
        let k = 5;
        let diff = p2.params[k] as f64 - p1.params[k] as f64;
        let sd = (iso * iso + line * line * diff * diff).sqrt();
        let mean: f64 = (0..n)
            .map(|s| isoline_variation(&p1, &p2, iso, line, s).unwrap().params[k] as f64)
            .sum::<f64>()
            / n as f64;
        let bound = 4.0 * sd / (n as f64).sqrt();
        assert!((mean - p1.params[k] as f64).abs() < bound);
    }

    proptest! {
        #[test]
        fn actions_stay_in_open_unit_box(seed in 0u64..1000, scale in 0.1f32..20.0, obs in proptest::collection::vec(-100.0..100.0f64, 4)) {
            let mut g = Genotype::init_random(&arch(), seed);
            g.params.iter_mut().for_each(|p| *p *= scale);
            for a in g.forward(&obs).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
