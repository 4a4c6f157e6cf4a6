//! Toy continuous-control environments that emit decomposed reward vectors.
//!
//! Both environments run fixed-horizon episodes (no early termination) and
//! clip actions internally, so every reward component stays bounded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

pub const DT: f64 = 0.05;
pub const ENV_NAMES: [&str; 2] = [PointMassNav::NAME, Pendulum::NAME];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("action has dimension {found}, environment expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("step called after the episode finished; call reset first")]
    SteppedAfterDone,
    #[error("action contains a non-finite value")]
    NonFiniteAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub field_names: &'static [&'static str],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionVec {
    pub values: Vec<f64>,
}

impl ActionVec {
    pub fn new(values: Vec<f64>) -> Self {
        ActionVec { values }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub components: Vec<f64>,
}

impl RewardVector {
    pub fn total(&self) -> f64 {
        self.components.iter().sum()
    }
}

/// Static description of an environment, including the text handed to the
/// rule-selection prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub reward_names: &'static [&'static str],
    pub obs_names: &'static [&'static str],
    pub action_bound: f64,
    pub horizon: usize,
    pub task_desc: &'static str,
    pub env_desc: &'static str,
    pub reward_desc: &'static str,
    pub default_aux_expr: &'static str,
}

impl EnvSpec {
    /// Number of reward components `K`.
    pub fn k(&self) -> usize {
        self.reward_names.len()
    }

    /// Variables an auxiliary expression may reference.
    pub fn dsl_variables(&self) -> Vec<&'static str> {
        let mut v: Vec<&'static str> = self.obs_names.to_vec();
        v.push("action_norm");
        v.push("step");
        v
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: RewardVector,
    pub done: bool,
}

fn episode_rng(seed: u64, episode_seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&episode_seed.to_le_bytes());
    key[16..24].copy_from_slice(b"envreset");
    ChaCha8Rng::from_seed(key)
}

fn clipped(action: &ActionVec, dim: usize, bound: f64) -> Result<Vec<f64>, EnvError> {
    if action.values.len() != dim {
        return Err(EnvError::DimensionMismatch {
            expected: dim,
            found: action.values.len(),
        });
    }
    if action.values.iter().any(|v| !v.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(action.values.iter().map(|v| v.clamp(-bound, bound)).collect())
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// 2-D point mass pushed toward a goal.
#[derive(Debug, Clone)]
pub struct PointMassNav {
    seed: u64,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    prev_dist: f64,
    steps: usize,
    done: bool,
}

impl PointMassNav {
    pub const NAME: &'static str = "point-mass-nav";
    pub const SPEC: EnvSpec = EnvSpec {
        name: Self::NAME,
        obs_dim: 6,
        act_dim: 2,
        reward_names: &["pos", "progress", "vel_penalty", "energy"],
        obs_names: &["pos_x", "pos_y", "vel_x", "vel_y", "goal_x", "goal_y"],
        action_bound: 1.0,
        horizon: 200,
        task_desc: "A point mass on a plane must reach a randomly placed goal and come to rest there, \
                    spending as little control effort as possible.",
        env_desc: "Planar point mass with linear drag. Observation: [pos_x, pos_y, vel_x, vel_y, goal_x, goal_y]. \
                   Action: 2-D force clipped to [-1, 1]. Semi-implicit Euler with dt = 0.05: \
                   vel += dt*(force - 0.1*vel); pos += dt*vel. Episodes last exactly 200 steps; \
                   start and goal are drawn uniformly from [-1, 1]^2 at least 0.5 apart.",
        reward_desc: "1.pos: exp(-2*d), where d is the distance to the goal; highest when at the goal.\n\
                      2.progress: 10*(d_prev - d); rewards reducing the distance to the goal each step.\n\
                      3.vel_penalty: -0.05*|vel|^2; discourages moving fast.\n\
                      4.energy: -0.01*|force|^2; discourages large control forces.",
        default_aux_expr: "0.5*exp(-10*((pos_x-goal_x)^2 + (pos_y-goal_y)^2)) - 0.01*sqrt(vel_x^2 + vel_y^2)",
    };

    pub fn new(seed: u64) -> Self {
        let mut env = PointMassNav {
            seed,
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            prev_dist: 0.0,
            steps: 0,
            done: false,
        };
        env.reset(0);
        env
    }

    fn dist(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    fn observe(&self) -> Observation {
        Observation {
            values: vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]],
            field_names: Self::SPEC.obs_names,
        }
    }

    pub fn reset(&mut self, episode_seed: u64) -> Observation {
        let mut rng = episode_rng(self.seed, episode_seed);
        loop {
            let start = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            let goal = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            self.pos = start;
            self.goal = goal;
            if self.dist() >= 0.5 {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.prev_dist = self.dist();
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    /// Overwrites the physical state; the step counter is left untouched.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
        self.prev_dist = self.dist();
    }

    pub fn step(&mut self, action: &ActionVec) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::SteppedAfterDone);
        }
        let force = clipped(action, 2, Self::SPEC.action_bound)?;
        for i in 0..2 {
            self.vel[i] += DT * (force[i] - 0.1 * self.vel[i]);
            self.pos[i] += DT * self.vel[i];
        }
        let d = self.dist();
        let speed_sq = self.vel[0] * self.vel[0] + self.vel[1] * self.vel[1];
        let force_sq = force[0] * force[0] + force[1] * force[1];
        let components = vec![
            (-2.0 * d).exp(),
            10.0 * (self.prev_dist - d),
            -0.05 * speed_sq,
            -0.01 * force_sq,
        ];
        self.prev_dist = d;
        self.steps += 1;
        self.done = self.steps >= Self::SPEC.horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward: RewardVector { components },
            done: self.done,
        })
    }
}

/// Torque-controlled pendulum; `theta = 0` is upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    seed: u64,
    pub theta: f64,
    pub theta_dot: f64,
    steps: usize,
    done: bool,
}

impl Pendulum {
    pub const NAME: &'static str = "pendulum-decomposed";
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const SPEC: EnvSpec = EnvSpec {
        name: Self::NAME,
        obs_dim: 3,
        act_dim: 1,
        reward_names: &["angle", "angvel_penalty", "energy"],
        obs_names: &["cos_theta", "sin_theta", "theta_dot"],
        action_bound: 2.0,
        horizon: 200,
        task_desc: "Swing a torque-limited pendulum up and balance it upright while using little torque.",
        env_desc: "Rigid pendulum with g = 10, m = l = 1; theta = 0 is upright. Observation: \
                   [cos_theta, sin_theta, theta_dot]. Action: 1-D torque clipped to [-2, 2]. \
                   Semi-implicit Euler with dt = 0.05, angular speed limited to [-8, 8]. \
                   Episodes last exactly 200 steps from a uniformly random angle.",
        reward_desc: "1.angle: -theta^2 with theta wrapped to [-pi, pi]; zero when upright.\n\
                      2.angvel_penalty: -0.1*theta_dot^2; discourages spinning.\n\
                      3.energy: -0.001*torque^2; discourages large torques.",
        default_aux_expr: "0.5*(cos_theta - 1) - 0.05*abs(theta_dot)*(1 - cos_theta)",
    };

    pub fn new(seed: u64) -> Self {
        let mut env = Pendulum {
            seed,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            done: false,
        };
        env.reset(0);
        env
    }

    fn observe(&self) -> Observation {
        Observation {
            values: vec![self.theta.cos(), self.theta.sin(), self.theta_dot],
            field_names: Self::SPEC.obs_names,
        }
    }

    pub fn reset(&mut self, episode_seed: u64) -> Observation {
        let mut rng = episode_rng(self.seed, episode_seed);
        self.theta = rng.gen_range(-PI..=PI);
        self.theta_dot = rng.gen_range(-1.0..=1.0);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = wrap_angle(theta);
        self.theta_dot = theta_dot;
    }

    pub fn step(&mut self, action: &ActionVec) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::SteppedAfterDone);
        }
        let torque = clipped(action, 1, Self::SPEC.action_bound)?[0];
        let (g, m, l) = (Self::GRAVITY, Self::MASS, Self::LENGTH);
        let accel = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 / (m * l * l) * torque;
        self.theta_dot = (self.theta_dot + accel * DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = wrap_angle(self.theta + self.theta_dot * DT);
        let components = vec![
            -self.theta * self.theta,
            -0.1 * self.theta_dot * self.theta_dot,
            -0.001 * torque * torque,
        ];
        self.steps += 1;
        self.done = self.steps >= Self::SPEC.horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward: RewardVector { components },
            done: self.done,
        })
    }
}

/// Handle to one of the built-in environments.
#[derive(Debug, Clone)]
pub enum Env {
    PointMass(PointMassNav),
    Pendulum(Pendulum),
}

pub fn env_spec(name: &str) -> Result<&'static EnvSpec, EnvError> {
    match name {
        PointMassNav::NAME => Ok(&PointMassNav::SPEC),
        Pendulum::NAME => Ok(&Pendulum::SPEC),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

pub fn make_env(name: &str, seed: u64) -> Result<Env, EnvError> {
    match name {
        PointMassNav::NAME => Ok(Env::PointMass(PointMassNav::new(seed))),
        Pendulum::NAME => Ok(Env::Pendulum(Pendulum::new(seed))),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

impl Env {
    pub fn spec(&self) -> &'static EnvSpec {
        match self {
            Env::PointMass(_) => &PointMassNav::SPEC,
            Env::Pendulum(_) => &Pendulum::SPEC,
        }
    }

    pub fn reset(&mut self, episode_seed: u64) -> Observation {
        match self {
            Env::PointMass(e) => e.reset(episode_seed),
            Env::Pendulum(e) => e.reset(episode_seed),
        }
    }

    pub fn step(&mut self, action: &ActionVec) -> Result<StepResult, EnvError> {
        match self {
            Env::PointMass(e) => e.step(action),
            Env::Pendulum(e) => e.step(action),
        }
    }
}
