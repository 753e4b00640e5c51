//! Deterministic episodic control tasks.
//!
//! Dynamics, rewards and behavior descriptors are deterministic; the only
//! source of randomness is a Gaussian perturbation of the initial position
//! coordinates, drawn from a generator seeded per episode.
//!
//! * `point-omni`: a planar double integrator. Reward is the negative
//!   action norm, the descriptor is the final `(x, y)` position.
//! * `dutycycle-uni`: a runner with two actuated "feet". A foot is in contact
//!   while its actuator output is positive; forward speed rewards
//!   anti-phase contacts. The descriptor is each foot's contact fraction.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BdSpace, BehaviorDescriptor};
use crate::rng;

/// Integration step shared by both tasks.
pub const DT: f64 = 0.05;
/// Per-component velocity limit.
pub const V_MAX: f64 = 2.0;
/// point-omni: acceleration per unit of action.
pub const THRUST_GAIN: f64 = 4.0;
/// point-omni: converts integrated velocity into BD-space distance, so a
/// full-thrust straight line over 100 steps ends about 12 units out.
pub const POSITION_SCALE: f64 = 1.25;
/// dutycycle-uni: angular rate of the two gait clocks.
pub const GAIT_OMEGA: f64 = 2.0 * PI;

pub const DEFAULT_EPISODE_LEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "point-omni")]
    PointOmni,
    #[serde(rename = "dutycycle-uni")]
    DutyCycleUni,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointOmni => "point-omni",
            EnvKind::DutyCycleUni => "dutycycle-uni",
        }
    }

    pub fn default_init_noise(self) -> f64 {
        match self {
            EnvKind::PointOmni => 0.3,
            EnvKind::DutyCycleUni => 0.05,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-omni" => Ok(EnvKind::PointOmni),
            "dutycycle-uni" => Ok(EnvKind::DutyCycleUni),
            other => Err(Error::invalid(format!(
                "unknown environment `{other}` (expected point-omni or dutycycle-uni)"
            ))),
        }
    }
}

/// A task instance: which dynamics, how long, how noisy the start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub episode_len: usize,
    pub init_noise_sigma: f64,
}

/// Raw simulator state; both tasks use four coordinates.
///
/// point-omni: `(x, y, vx, vy)`; dutycycle-uni: `(x, v, phase1, phase2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State(pub [f64; 4]);

/// A controller mapping observations to actions, possibly with memory.
pub trait Controller {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Called once before each episode.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64], action: &mut [f64]);
}

/// A controller driving several episodes at once; rows of `obs` and
/// `actions` are episodes.
pub trait BatchController {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Called once before the batch starts, with the number of episodes.
    fn reset(&mut self, n: usize);
    fn act_batch(&mut self, obs: &[f64], actions: &mut [f64]);
}

/// One played episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T x obs_dim`, the observation each action was chosen from.
    pub observations: Vec<f64>,
    /// `T x act_dim`, clamped to `[-1, 1]`.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub fitness: f64,
    pub bd: BehaviorDescriptor,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            episode_len: DEFAULT_EPISODE_LEN,
            init_noise_sigma: kind.default_init_noise(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_episode_len(mut self, t: usize) -> Self {
        self.episode_len = t;
        self
    }

    pub fn with_init_noise(mut self, sigma: f64) -> Self {
        self.init_noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(Error::invalid("episode_len must be positive"));
        }
        if !(self.init_noise_sigma >= 0.0 && self.init_noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "init_noise_sigma must be a finite non-negative number, got {}",
                self.init_noise_sigma
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn obs_dim(&self) -> usize {
        4
    }

    pub fn act_dim(&self) -> usize {
        2
    }

    pub fn bd_dim(&self) -> usize {
        2
    }

    pub fn bd_space(&self) -> BdSpace {
        match self.kind {
            EnvKind::PointOmni => BdSpace::cube(2, -15.0, 15.0),
            EnvKind::DutyCycleUni => BdSpace::cube(2, 0.0, 1.0),
        }
        .expect("static bounds are valid")
    }

    /// Shift that makes every achievable fitness non-negative: rewards are
    /// bounded below by `-max ||a||` per step.
    pub fn fitness_offset(&self) -> f64 {
        self.episode_len as f64 * (self.act_dim() as f64).sqrt()
    }

    fn nominal_state(&self) -> State {
        match self.kind {
            EnvKind::PointOmni => State([0.0; 4]),
            EnvKind::DutyCycleUni => State([0.0, 0.0, 0.0, PI]),
        }
    }

    /// Coordinates that receive the initial Gaussian perturbation.
    fn noisy_coords(&self) -> std::ops::Range<usize> {
        match self.kind {
            EnvKind::PointOmni => 0..2,
            EnvKind::DutyCycleUni => 2..4,
        }
    }

    pub fn reset(&self, seed: u64) -> State {
        let mut state = self.nominal_state();
        if self.init_noise_sigma > 0.0 {
            let mut rng = rng::rng_from_seed(seed);
            let normal = Normal::new(0.0, self.init_noise_sigma).expect("sigma is finite");
            for i in self.noisy_coords() {
                state.0[i] += normal.sample(&mut rng);
            }
        }
        state
    }

    pub fn observe(&self, state: &State) -> [f64; 4] {
        state.0
    }

    /// Advances one step with an action already clamped to `[-1, 1]`.
    /// Returns the next state and the step reward.
    pub fn step(&self, state: &State, action: &[f64]) -> (State, f64) {
        let a = [action[0], action[1]];
        let effort = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let s = state.0;
        match self.kind {
            EnvKind::PointOmni => {
                let next = State([
                    s[0] + POSITION_SCALE * s[2] * DT,
                    s[1] + POSITION_SCALE * s[3] * DT,
                    (s[2] + THRUST_GAIN * a[0] * DT).clamp(-V_MAX, V_MAX),
                    (s[3] + THRUST_GAIN * a[1] * DT).clamp(-V_MAX, V_MAX),
                ]);
                (next, -effort)
            }
            EnvKind::DutyCycleUni => {
                let v = forward_speed(a).clamp(-V_MAX, V_MAX);
                let x = s[0] + v * DT;
                let next = State([
                    x,
                    v,
                    wrap_angle(s[2] + GAIT_OMEGA * DT),
                    wrap_angle(s[3] + GAIT_OMEGA * DT),
                ]);
                (next, (x - s[0]) / DT - effort)
            }
        }
    }

    /// Plays exactly `episode_len` steps.
    pub fn rollout(&self, policy: &mut dyn Controller, seed: u64) -> Result<Trajectory> {
        if policy.obs_dim() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim(),
                actual: policy.obs_dim(),
            });
        }
        if policy.act_dim() != self.act_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.act_dim(),
                actual: policy.act_dim(),
            });
        }
        let t_max = self.episode_len;
        let mut observations = Vec::with_capacity(t_max * self.obs_dim());
        let mut actions = Vec::with_capacity(t_max * self.act_dim());
        let mut rewards = Vec::with_capacity(t_max);
        let mut state = self.reset(seed);
        let mut action = [0.0; 2];
        policy.reset();
        for _ in 0..t_max {
            let obs = self.observe(&state);
            policy.act(&obs, &mut action);
            clamp_action(&mut action);
            let (next, reward) = self.step(&state, &action);
            observations.extend_from_slice(&obs);
            actions.extend_from_slice(&action);
            rewards.push(reward);
            state = next;
        }
        let bd = self.final_bd(&state, &actions);
        Ok(Trajectory {
            fitness: rewards.iter().sum(),
            observations,
            actions,
            rewards,
            bd,
            seed,
        })
    }

    /// Plays one episode per seed in lockstep, querying `policy` once per
    /// step for the whole batch. Equivalent to independent [`Self::rollout`]s.
    pub fn rollout_batch(&self, policy: &mut dyn BatchController, seeds: &[u64]) -> Result<Vec<Trajectory>> {
        if policy.obs_dim() != self.obs_dim() || policy.act_dim() != self.act_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim() + self.act_dim(),
                actual: policy.obs_dim() + policy.act_dim(),
            });
        }
        let n = seeds.len();
        let (od, ad, t_max) = (self.obs_dim(), self.act_dim(), self.episode_len);
        let mut states: Vec<State> = seeds.iter().map(|&s| self.reset(s)).collect();
        let mut trajs: Vec<Trajectory> = seeds
            .iter()
            .map(|&seed| Trajectory {
                observations: Vec::with_capacity(t_max * od),
                actions: Vec::with_capacity(t_max * ad),
                rewards: Vec::with_capacity(t_max),
                fitness: 0.0,
                bd: BehaviorDescriptor(Vec::new()),
                seed,
            })
            .collect();
        let mut obs = vec![0.0; n * od];
        let mut actions = vec![0.0; n * ad];
        policy.reset(n);
        for _ in 0..t_max {
            for (o, st) in obs.chunks_exact_mut(od).zip(&states) {
                o.copy_from_slice(&self.observe(st));
            }
            policy.act_batch(&obs, &mut actions);
            for i in 0..n {
                let a = &mut actions[i * ad..(i + 1) * ad];
                clamp_action(a);
                let (next, reward) = self.step(&states[i], a);
                let tr = &mut trajs[i];
                tr.observations.extend_from_slice(&obs[i * od..(i + 1) * od]);
                tr.actions.extend_from_slice(a);
                tr.rewards.push(reward);
                states[i] = next;
            }
        }
        for (tr, st) in trajs.iter_mut().zip(&states) {
            tr.fitness = tr.rewards.iter().sum();
            tr.bd = self.final_bd(st, &tr.actions);
        }
        Ok(trajs)
    }

    fn final_bd(&self, last: &State, actions: &[f64]) -> BehaviorDescriptor {
        match self.kind {
            EnvKind::PointOmni => BehaviorDescriptor(vec![last.0[0], last.0[1]]),
            EnvKind::DutyCycleUni => duty_cycles(actions, self.act_dim()),
        }
    }

    /// Recomputes the descriptor from stored arrays alone.
    pub fn extract_bd(&self, observations: &[f64], actions: &[f64]) -> Result<BehaviorDescriptor> {
        let t = self.episode_len;
        if observations.len() != t * self.obs_dim() || actions.len() != t * self.act_dim() {
            return Err(Error::invalid(format!(
                "trajectory arrays ({} obs, {} act values) do not match T = {t}",
                observations.len(),
                actions.len()
            )));
        }
        Ok(match self.kind {
            EnvKind::PointOmni => {
                // Positions integrate the pre-step velocity, so the final
                // position is one Euler step past the last observation.
                let last = &observations[(t - 1) * 4..t * 4];
                BehaviorDescriptor(vec![
                    last[0] + POSITION_SCALE * last[2] * DT,
                    last[1] + POSITION_SCALE * last[3] * DT,
                ])
            }
            EnvKind::DutyCycleUni => duty_cycles(actions, self.act_dim()),
        })
    }

    /// Recomputes the episode return from stored arrays alone.
    pub fn extract_fitness(&self, observations: &[f64], actions: &[f64]) -> f64 {
        let effort: f64 = actions
            .chunks_exact(self.act_dim())
            .map(|a| a.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum();
        match self.kind {
            EnvKind::PointOmni => -effort,
            EnvKind::DutyCycleUni => {
                let t = self.episode_len;
                let x0 = observations[0];
                let last_a = &actions[(t - 1) * 2..t * 2];
                let x_t = observations[(t - 1) * 4]
                    + forward_speed([last_a[0], last_a[1]]).clamp(-V_MAX, V_MAX) * DT;
                (x_t - x0) / DT - effort
            }
        }
    }
}

pub fn clamp_action(action: &mut [f64]) {
    for a in action {
        *a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
    }
}

/// Forward speed of the runner: non-zero only when exactly one foot pushes
/// while the other lifts, scaled by the mean actuator magnitude.
pub fn forward_speed(a: [f64; 2]) -> f64 {
    0.5 * (sign(a[0]) - sign(a[1])).abs() * 0.5 * (a[0].abs() + a[1].abs())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

fn duty_cycles(actions: &[f64], act_dim: usize) -> BehaviorDescriptor {
    let steps = actions.len() / act_dim;
    let mut contacts = vec![0usize; act_dim];
    for a in actions.chunks_exact(act_dim) {
        for (c, x) in contacts.iter_mut().zip(a) {
            if *x > 0.0 {
                *c += 1;
            }
        }
    }
    BehaviorDescriptor(
        contacts
            .into_iter()
            .map(|c| c as f64 / steps as f64)
            .collect(),
    )
}

/// Open-loop controller returning a fixed action; handy for tests.
#[derive(Clone, Debug)]
pub struct ConstantController(pub Vec<f64>);

impl Controller for ConstantController {
    fn obs_dim(&self) -> usize {
        4
    }

    fn act_dim(&self) -> usize {
        self.0.len()
    }

    fn act(&mut self, _obs: &[f64], action: &mut [f64]) {
        action.copy_from_slice(&self.0);
    }
}
