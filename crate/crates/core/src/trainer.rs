//! Hybrid PPO: rollout collection, per-branch advantage weighting, clipped
//! policy updates, branch value regression and periodic scheduler ticks.

use std::collections::VecDeque;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{self, ActionVec, Env, EnvError, EnvSpec, RewardVector};
use crate::estimation::{self, BranchStats, EstimationError, RolloutBatch, StatsHistory};
use crate::llm_client::{ChatClient, DEFAULT_MODEL};
use crate::matrix::Matrix;
use crate::nets::{self, Adam, NetError, Parameterized, PolicyParams, ValueParams};
use crate::par;
use crate::reward_dsl::{self, Bindings, EvalError, Expr};
use crate::rules::{self, RuleError, WeightVector, RULE_COUNT, W_BASE, W_RANGE};
use crate::scheduler::{
    DirectSource, LlmOptions, Scheduler, SchedulerError, Selection, SelectionContext, SelectorKind, TranscriptEntry,
};

/// Samples per gradient work unit. Fixed so that the reduction order, and hence
/// every floating-point result, is the same with and without threads.
pub const GRAD_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: u64, detail: String },
    #[error("auxiliary reward at epoch {epoch}, step {step}: {source}")]
    AuxReward {
        epoch: u64,
        step: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("metrics sink: {0}")]
    Sink(String),
}

fn invalid(key: &str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Algorithm variants of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "hd-ppo")]
    HdPpo,
    #[serde(rename = "ahrs")]
    Ahrs,
    #[serde(rename = "ahrs-r")]
    AhrsR,
    #[serde(rename = "ahrs-d")]
    AhrsD,
    #[serde(rename = "ppo-a")]
    PpoA,
    #[serde(rename = "hd-ppo-a")]
    HdPpoA,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::Ppo,
        Algo::HdPpo,
        Algo::Ahrs,
        Algo::AhrsR,
        Algo::AhrsD,
        Algo::PpoA,
        Algo::HdPpoA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Ppo => "ppo",
            Algo::HdPpo => "hd-ppo",
            Algo::Ahrs => "ahrs",
            Algo::AhrsR => "ahrs-r",
            Algo::AhrsD => "ahrs-d",
            Algo::PpoA => "ppo-a",
            Algo::HdPpoA => "hd-ppo-a",
        }
    }

    /// Single summed reward with one value head.
    pub fn is_scalar(self) -> bool {
        matches!(self, Algo::Ppo | Algo::PpoA)
    }

    pub fn is_ahrs_family(self) -> bool {
        matches!(self, Algo::Ahrs | Algo::AhrsR | Algo::AhrsD)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algo `{s}` (expected one of ppo, hd-ppo, ahrs, ahrs-r, ahrs-d, ppo-a, hd-ppo-a)"))
    }
}

/// Selector named in the configuration; resolved against the algo by
/// [`TrainConfig::selector_kind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorChoice {
    Llm,
    Replay,
    Scripted,
    Random,
    Fixed,
}

impl SelectorChoice {
    pub fn name(self) -> &'static str {
        match self {
            SelectorChoice::Llm => "llm",
            SelectorChoice::Replay => "replay",
            SelectorChoice::Scripted => "scripted",
            SelectorChoice::Random => "random",
            SelectorChoice::Fixed => "fixed",
        }
    }
}

impl FromStr for SelectorChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "llm" => Ok(SelectorChoice::Llm),
            "replay" => Ok(SelectorChoice::Replay),
            "scripted" => Ok(SelectorChoice::Scripted),
            "random" => Ok(SelectorChoice::Random),
            "fixed" => Ok(SelectorChoice::Fixed),
            other => Err(format!("unknown selector `{other}` (expected llm, replay, scripted, random or fixed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub enabled: bool,
    /// Empty means the environment's built-in expression.
    pub expr: String,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            enabled: true,
            expr: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: String,
    pub algo: Algo,
    pub seed: u64,
    pub total_epochs: u64,
    pub steps_per_epoch: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub w_base: f64,
    pub schedule_period: u64,
    pub history_len: usize,
    pub selector: SelectorChoice,
    /// Rule for the fixed selector and the hd-ppo variants.
    pub rule: u8,
    /// Sequence for the scripted selector.
    pub script: Vec<u8>,
    /// Empty means `LLM_MODEL` from the environment, else the client default.
    pub llm_model: String,
    pub llm_temperature: f64,
    pub checkpoint_every: u64,
    pub aux: AuxConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: envs::PointMassNav::NAME.to_string(),
            algo: Algo::Ahrs,
            seed: 1,
            total_epochs: 500,
            steps_per_epoch: 2048,
            num_envs: 8,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            update_epochs: 4,
            minibatch_size: 256,
            entropy_coef: 0.0,
            value_coef: 1.0,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            hidden: vec![64, 64],
            init_log_std: 0.0,
            w_base: W_BASE,
            schedule_period: 100,
            history_len: estimation::HISTORY_LEN,
            selector: SelectorChoice::Llm,
            rule: 8,
            script: (1..=RULE_COUNT).collect(),
            llm_model: String::new(),
            llm_temperature: 0.0,
            checkpoint_every: 100,
            aux: AuxConfig::default(),
        }
    }
}

fn check_unit(key: &str, v: f64) -> Result<(), TrainError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} is outside [0, 1]")))
    }
}

fn check_positive(key: &str, v: f64) -> Result<(), TrainError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} must be a positive finite number")))
    }
}

fn check_nonneg(key: &str, v: f64) -> Result<(), TrainError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} must be a non-negative finite number")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        envs::env_spec(&self.env).map_err(|e| invalid("env", e.to_string()))?;
        check_unit("gamma", self.gamma)?;
        check_unit("lambda", self.lambda)?;
        check_positive("clip_eps", self.clip_eps)?;
        check_positive("lr_policy", self.lr_policy)?;
        check_positive("lr_value", self.lr_value)?;
        check_positive("max_grad_norm", self.max_grad_norm)?;
        check_nonneg("entropy_coef", self.entropy_coef)?;
        check_nonneg("value_coef", self.value_coef)?;
        check_nonneg("llm_temperature", self.llm_temperature)?;
        check_positive("w_base", self.w_base)?;
        if !self.init_log_std.is_finite() || !(nets::LOG_STD_MIN..=nets::LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(invalid("init_log_std", "must lie in [-10, 2]"));
        }
        let positive = [
            ("total_epochs", self.total_epochs as usize),
            ("steps_per_epoch", self.steps_per_epoch),
            ("num_envs", self.num_envs),
            ("update_epochs", self.update_epochs),
            ("minibatch_size", self.minibatch_size),
            ("schedule_period", self.schedule_period as usize),
            ("history_len", self.history_len),
            ("checkpoint_every", self.checkpoint_every as usize),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.steps_per_epoch < self.num_envs {
            return Err(invalid("steps_per_epoch", "must be at least num_envs"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(invalid("hidden", "layer widths must be positive"));
        }
        if !(1..=RULE_COUNT).contains(&self.rule) {
            return Err(invalid("rule", format!("{} is outside 1..=8", self.rule)));
        }
        if self.script.is_empty() {
            return Err(invalid("script", "sequence must be non-empty"));
        }
        if let Some(bad) = self.script.iter().find(|r| !(1..=RULE_COUNT).contains(*r)) {
            return Err(invalid("script", format!("rule {bad} is outside 1..=8")));
        }
        self.selector_kind()?;
        self.aux_expr()?;
        Ok(())
    }

    /// Whether the auxiliary reward is part of the reward signal.
    pub fn aux_active(&self) -> bool {
        match self.algo {
            Algo::Ppo | Algo::HdPpo => false,
            Algo::PpoA | Algo::HdPpoA => true,
            Algo::Ahrs | Algo::AhrsR | Algo::AhrsD => self.aux.enabled,
        }
    }

    /// Selector actually driven by the algo, or `None` for the scalar baselines.
    pub fn selector_kind(&self) -> Result<Option<SelectorKind>, TrainError> {
        Ok(match self.algo {
            Algo::Ppo | Algo::PpoA => None,
            Algo::HdPpo | Algo::HdPpoA => Some(SelectorKind::Fixed(self.rule)),
            Algo::AhrsR => Some(SelectorKind::Random),
            Algo::AhrsD => match self.selector {
                SelectorChoice::Llm => Some(SelectorKind::Direct(DirectSource::Llm)),
                SelectorChoice::Replay => Some(SelectorKind::Direct(DirectSource::Replay)),
                other => {
                    return Err(invalid(
                        "selector",
                        format!("ahrs-d needs the llm or replay selector, not {}", other.name()),
                    ))
                }
            },
            Algo::Ahrs => Some(match self.selector {
                SelectorChoice::Llm => SelectorKind::Llm,
                SelectorChoice::Replay => SelectorKind::Replay,
                SelectorChoice::Scripted => SelectorKind::Scripted(self.script.clone()),
                SelectorChoice::Random => SelectorKind::Random,
                SelectorChoice::Fixed => SelectorKind::Fixed(self.rule),
            }),
        })
    }

    /// Parsed auxiliary expression when active; every free variable must be bindable.
    pub fn aux_expr(&self) -> Result<Option<Expr>, TrainError> {
        if !self.aux_active() {
            return Ok(None);
        }
        let spec = envs::env_spec(&self.env).map_err(|e| invalid("env", e.to_string()))?;
        let text = if self.aux.expr.trim().is_empty() {
            spec.default_aux_expr
        } else {
            self.aux.expr.as_str()
        };
        let expr = reward_dsl::parse_expr(text).map_err(|e| invalid("aux.expr", e.to_string()))?;
        let known = spec.dsl_variables();
        if let Some(v) = reward_dsl::free_vars(&expr).into_iter().find(|v| !known.contains(&v.as_str())) {
            return Err(invalid(
                "aux.expr",
                format!("unknown variable `{v}` (available: {})", known.join(", ")),
            ));
        }
        Ok(Some(expr))
    }

    /// Number of value branches.
    pub fn branch_count(&self) -> Result<usize, TrainError> {
        let spec = envs::env_spec(&self.env).map_err(|e| invalid("env", e.to_string()))?;
        Ok(if self.algo.is_scalar() {
            1
        } else {
            spec.k() + usize::from(self.aux_active())
        })
    }

    pub fn llm_options(&self) -> LlmOptions {
        let model = if !self.llm_model.is_empty() {
            self.llm_model.clone()
        } else {
            std::env::var("LLM_MODEL").ok().filter(|m| !m.is_empty()).unwrap_or_else(|| DEFAULT_MODEL.to_string())
        };
        LlmOptions {
            model,
            temperature: self.llm_temperature,
            ..LlmOptions::default()
        }
    }
}

/// Rule that produced the weights in force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActiveRule {
    /// Scalar baseline; no weighting.
    None,
    Rule(u8),
    /// Weights emitted directly by the selector.
    Direct,
}

impl fmt::Display for ActiveRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActiveRule::None => f.write_str("none"),
            ActiveRule::Rule(r) => write!(f, "{r}"),
            ActiveRule::Direct => f.write_str("direct"),
        }
    }
}

impl FromStr for ActiveRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(ActiveRule::None),
            "direct" => Ok(ActiveRule::Direct),
            n => n.parse().map(ActiveRule::Rule).map_err(|_| format!("bad rule id `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub total_return_mean: f64,
    pub total_return_std: f64,
    pub branch_means: Vec<f64>,
    pub branch_vars: Vec<f64>,
    pub rule: ActiveRule,
    pub weights: Vec<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Maps environment reward vectors to the branch layout of a run.
#[derive(Debug, Clone)]
pub struct RewardLayout {
    pub scalar: bool,
    pub aux: Option<Expr>,
    pub spec: &'static EnvSpec,
}

impl RewardLayout {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(RewardLayout {
            scalar: cfg.algo.is_scalar(),
            aux: cfg.aux_expr()?,
            spec: envs::env_spec(&cfg.env)?,
        })
    }

    pub fn branches(&self) -> usize {
        if self.scalar {
            1
        } else {
            self.spec.k() + usize::from(self.aux.is_some())
        }
    }

    /// Evaluates the auxiliary term on the post-step observation.
    pub fn aux_value(&self, obs: &[f64], action_norm: f64, step: usize) -> Result<Option<f64>, EvalError> {
        let Some(expr) = &self.aux else { return Ok(None) };
        let mut b = Bindings::new();
        for (name, v) in self.spec.obs_names.iter().zip(obs) {
            b.set(*name, *v);
        }
        b.set("action_norm", action_norm);
        b.set("step", step as f64);
        reward_dsl::eval_expr(expr, &b).map(Some)
    }

    /// Per-branch reward row: the environment components, then the auxiliary
    /// term, either kept separate or summed into one scalar.
    pub fn row(&self, reward: &RewardVector, aux: Option<f64>) -> Vec<f64> {
        if self.scalar {
            vec![reward.total() + aux.unwrap_or(0.0)]
        } else {
            let mut row = reward.components.clone();
            row.extend(aux);
            row
        }
    }

    /// Names of the branches, for prompts and CSV headers.
    pub fn branch_names(&self) -> Vec<String> {
        if self.scalar {
            return vec!["total".to_string()];
        }
        let mut names: Vec<String> = self.spec.reward_names.iter().map(|s| s.to_string()).collect();
        if self.aux.is_some() {
            names.push("aux".to_string());
        }
        names
    }
}

fn derive_rng(seed: u64, tag: &[u8], index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let n = tag.len().min(16);
    key[16..16 + n].copy_from_slice(&tag[..n]);
    ChaCha8Rng::from_seed(key)
}

/// One environment plus its sampling stream and in-progress episode sums.
#[derive(Debug, Clone)]
pub struct EnvWorker {
    env: Env,
    obs: Vec<f64>,
    noise: ChaCha8Rng,
    next_episode: u64,
    ep_steps: usize,
    ep_branch: Vec<f64>,
    ep_total: f64,
}

impl EnvWorker {
    fn new(name: &str, seed: u64, index: u64, branches: usize) -> Result<Self, TrainError> {
        let env_seed = seed.wrapping_mul(1_000_003).wrapping_add(index);
        let mut env = envs::make_env(name, env_seed)?;
        let obs = env.reset(0).values;
        Ok(EnvWorker {
            env,
            obs,
            noise: derive_rng(seed, b"policy-noise", index),
            next_episode: 1,
            ep_steps: 0,
            ep_branch: vec![0.0; branches],
            ep_total: 0.0,
        })
    }
}

/// One epoch of experience: a segment per environment, in environment order.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub segments: Vec<RolloutBatch>,
    /// Environment-reward totals (auxiliary excluded) of completed episodes, in segment order.
    pub completed_totals: Vec<f64>,
    /// Per-branch sums of in-progress episodes at the end of the rollout.
    pub partial_branch: Matrix,
    pub partial_totals: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.segments.iter().map(RolloutBatch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn completed_branch(&self) -> Matrix {
        let b = self.partial_branch.cols();
        let mut m = Matrix::with_cols(b);
        for s in &self.segments {
            m.extend(&s.episode_returns);
        }
        m
    }

    /// Runs per-branch GAE on every segment and concatenates them.
    pub fn into_train_batch(mut self, gamma: f64, lambda: f64) -> Result<TrainBatch, TrainError> {
        let first = self.segments.first().ok_or_else(|| TrainError::ShapeMismatch("empty rollout".into()))?;
        let (obs_dim, act_dim, b) = (first.obs.cols(), first.actions.cols(), first.branches());
        let mut out = TrainBatch {
            obs: Matrix::with_cols(obs_dim),
            actions: Matrix::with_cols(act_dim),
            logprobs_old: Vec::new(),
            advantages: Matrix::with_cols(b),
            returns: Matrix::with_cols(b),
        };
        for seg in &mut self.segments {
            estimation::compute_gae_per_branch(seg, gamma, lambda)?;
            out.obs.extend(&seg.obs);
            out.actions.extend(&seg.actions);
            out.logprobs_old.extend_from_slice(&seg.logprobs_old);
            out.advantages.extend(seg.advantages.as_ref().expect("filled above"));
            out.returns.extend(seg.returns_target.as_ref().expect("filled above"));
        }
        Ok(out)
    }
}

/// The set of environments stepped by one run.
#[derive(Debug, Clone)]
pub struct RolloutEnvs {
    workers: Vec<EnvWorker>,
    layout: RewardLayout,
}

impl RolloutEnvs {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let layout = RewardLayout::from_config(cfg)?;
        let b = layout.branches();
        let workers = (0..cfg.num_envs as u64)
            .map(|i| EnvWorker::new(&cfg.env, cfg.seed, i, b))
            .collect::<Result<_, _>>()?;
        Ok(RolloutEnvs { workers, layout })
    }

    pub fn layout(&self) -> &RewardLayout {
        &self.layout
    }

    pub fn num_envs(&self) -> usize {
        self.workers.len()
    }
}

fn run_segment(
    w: &mut EnvWorker,
    steps: usize,
    policy: &PolicyParams,
    values: &ValueParams,
    layout: &RewardLayout,
    epoch: u64,
) -> Result<(RolloutBatch, Vec<f64>), TrainError> {
    let spec = layout.spec;
    let b = layout.branches();
    let mut seg = RolloutBatch {
        obs: Matrix::with_cols(spec.obs_dim),
        actions: Matrix::with_cols(spec.act_dim),
        logprobs_old: Vec::with_capacity(steps),
        rewards: Matrix::with_cols(b),
        values: Matrix::with_cols(b),
        dones: Vec::with_capacity(steps),
        advantages: None,
        returns_target: None,
        episode_returns: Matrix::with_cols(b),
    };
    let mut totals = Vec::new();
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    for _ in 0..steps {
        let mu = policy.mean.predict(&w.obs)?;
        let action: Vec<f64> = mu
            .iter()
            .zip(&std)
            .map(|(m, s)| m + s * w.noise.sample::<f64, _>(StandardNormal))
            .collect();
        let logp = nets::gaussian_logprob(&mu, &policy.log_std, &action)?;
        let v = values.forward(&w.obs)?;
        let applied = ActionVec::new(action.iter().map(|a| a.clamp(-spec.action_bound, spec.action_bound)).collect());
        let result = w.env.step(&applied)?;
        w.ep_steps += 1;
        let aux = layout
            .aux_value(&result.obs.values, applied.norm(), w.ep_steps)
            .map_err(|source| TrainError::AuxReward { epoch, step: w.ep_steps, source })?;
        let row = layout.row(&result.reward, aux);

        seg.obs.push_row(&w.obs);
        seg.actions.push_row(&action);
        seg.logprobs_old.push(logp);
        seg.rewards.push_row(&row);
        seg.values.push_row(&v);
        seg.dones.push(result.done);
        for (acc, r) in w.ep_branch.iter_mut().zip(&row) {
            *acc += r;
        }
        w.ep_total += result.reward.total();

        if result.done {
            seg.episode_returns.push_row(&w.ep_branch);
            totals.push(w.ep_total);
            w.ep_branch.iter_mut().for_each(|x| *x = 0.0);
            w.ep_total = 0.0;
            w.ep_steps = 0;
            w.obs = w.env.reset(w.next_episode).values;
            w.next_episode += 1;
        } else {
            w.obs = result.obs.values;
        }
    }
    let bootstrap = values.forward(&w.obs)?;
    seg.values.push_row(&bootstrap);
    Ok((seg, totals))
}

/// Steps every environment for its share of `steps_per_epoch` transitions
/// (the remainder goes to the lowest-indexed environments). Environments run
/// concurrently and are merged in index order.
pub fn collect_rollout(
    envs: &mut RolloutEnvs,
    policy: &PolicyParams,
    values: &ValueParams,
    steps_per_epoch: usize,
    epoch: u64,
) -> Result<Rollout, TrainError> {
    let n = envs.workers.len();
    if values.num_branches() != envs.layout.branches() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} value branches for {} reward branches",
            values.num_branches(),
            envs.layout.branches()
        )));
    }
    let (base, rem) = (steps_per_epoch / n, steps_per_epoch % n);
    let layout = &envs.layout;
    let results = par::map_mut(&mut envs.workers, |i, w| {
        let steps = base + usize::from(i < rem);
        run_segment(w, steps, policy, values, layout, epoch)
    });
    let mut rollout = Rollout {
        segments: Vec::with_capacity(n),
        completed_totals: Vec::new(),
        partial_branch: Matrix::with_cols(layout.branches()),
        partial_totals: Vec::with_capacity(n),
    };
    for r in results {
        let (seg, totals) = r?;
        rollout.segments.push(seg);
        rollout.completed_totals.extend(totals);
    }
    for w in &envs.workers {
        rollout.partial_branch.push_row(&w.ep_branch);
        rollout.partial_totals.push(w.ep_total);
    }
    Ok(rollout)
}

/// Flattened training data for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub logprobs_old: Vec<f64>,
    /// Per-branch advantages, `T x B`.
    pub advantages: Matrix,
    /// Per-branch regression targets, `T x B`.
    pub returns: Matrix,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.logprobs_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs_old.is_empty()
    }
}

/// `combined_t = sum_k w_k * A_{t,k}`.
pub fn combine_advantages(adv: &Matrix, weights: &[f64]) -> Result<Vec<f64>, TrainError> {
    if adv.cols() != weights.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} weights for {} advantage columns",
            weights.len(),
            adv.cols()
        )));
    }
    Ok(adv
        .iter_rows()
        .map(|row| row.iter().zip(weights).map(|(a, w)| w * a).sum())
        .collect())
}

/// Clipped-surrogate terms over a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyTerms {
    /// `-mean(min(rho * A, clip(rho) * A))`.
    pub surrogate_loss: f64,
    pub entropy: f64,
    /// `surrogate_loss - entropy_coef * entropy`, the quantity differentiated.
    pub objective: f64,
    pub clip_fraction: f64,
}

/// Policy objective and its gradient over the samples `idx`.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss_grad(
    policy: &PolicyParams,
    obs: &Matrix,
    actions: &Matrix,
    logp_old: &[f64],
    adv: &[f64],
    idx: &[usize],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(PolicyTerms, PolicyParams), TrainError> {
    let n = idx.len();
    if n == 0 {
        return Err(TrainError::ShapeMismatch("empty minibatch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let parts = par::map_chunks(n, GRAD_CHUNK, |range| -> Result<(f64, usize, PolicyParams), NetError> {
        let mut grad = policy.zeros_like();
        let mut loss = 0.0;
        let mut clipped = 0;
        for &i in &idx[range] {
            let (mu, cache) = policy.mean.forward(obs.row(i))?;
            let lp = nets::gaussian_logprob_grad(&mu, &policy.log_std, actions.row(i))?;
            let ratio = (lp.logp - logp_old[i]).exp();
            let a = adv[i];
            let unclipped = ratio * a;
            let clipped_term = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            loss -= unclipped.min(clipped_term) * inv_n;
            if unclipped <= clipped_term {
                let d_logp = -unclipped * inv_n;
                let up: Vec<f64> = lp.d_mu.iter().map(|g| g * d_logp).collect();
                policy.mean.backward_into(&cache, &up, &mut grad.mean)?;
                for (g, d) in grad.log_std.iter_mut().zip(&lp.d_log_std) {
                    *g += d * d_logp;
                }
            } else {
                clipped += 1;
            }
        }
        Ok((loss, clipped, grad))
    });
    let mut grad = policy.zeros_like();
    let mut surrogate_loss = 0.0;
    let mut clipped = 0;
    for part in parts {
        let (l, c, g) = part?;
        surrogate_loss += l;
        clipped += c;
        grad.add_assign(&g);
    }
    let entropy = nets::gaussian_entropy(&policy.log_std);
    if entropy_coef != 0.0 {
        // d(entropy)/d(log_std_j) = 1
        grad.log_std.iter_mut().for_each(|g| *g -= entropy_coef);
    }
    Ok((
        PolicyTerms {
            surrogate_loss,
            entropy,
            objective: surrogate_loss - entropy_coef * entropy,
            clip_fraction: clipped as f64 * inv_n,
        },
        grad,
    ))
}

/// `value_coef * sum_k mean((V_k - R_k)^2)` and its gradient over the samples `idx`.
pub fn value_loss_grad(
    values: &ValueParams,
    obs: &Matrix,
    returns: &Matrix,
    idx: &[usize],
    value_coef: f64,
) -> Result<(f64, ValueParams), TrainError> {
    let n = idx.len();
    if n == 0 {
        return Err(TrainError::ShapeMismatch("empty minibatch".into()));
    }
    if returns.cols() != values.num_branches() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} return columns for {} value branches",
            returns.cols(),
            values.num_branches()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let parts = par::map_chunks(n, GRAD_CHUNK, |range| -> Result<(f64, ValueParams), NetError> {
        let mut grad = values.zeros_like();
        let mut loss = 0.0;
        for &i in &idx[range] {
            for (k, branch) in values.branches.iter().enumerate() {
                let (v, cache) = branch.forward(obs.row(i))?;
                let diff = v[0] - returns[(i, k)];
                loss += value_coef * diff * diff * inv_n;
                branch.backward_into(&cache, &[2.0 * value_coef * diff * inv_n], &mut grad.branches[k])?;
            }
        }
        Ok((loss, grad))
    });
    let mut grad = values.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add_assign(&g);
    }
    Ok((loss, grad))
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub policy_opt: Adam,
    pub value_opt: Adam,
}

impl Agent {
    pub fn new(policy: PolicyParams, value: ValueParams) -> Self {
        Agent {
            policy_opt: Adam::new(policy.num_params()),
            value_opt: Adam::new(value.num_params()),
            policy,
            value,
        }
    }

    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let spec = envs::env_spec(&cfg.env)?;
        let mut rng = derive_rng(cfg.seed, b"init", 0);
        let mut policy = PolicyParams::init(spec.obs_dim, &cfg.hidden, spec.act_dim, &mut rng);
        policy.log_std.fill(cfg.init_log_std);
        let value = ValueParams::init(spec.obs_dim, &cfg.hidden, cfg.branch_count()?, &mut rng);
        Ok(Agent::new(policy, value))
    }
}

/// Losses averaged over every minibatch of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossRecord {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub minibatches: usize,
}

/// `update_epochs` passes of clipped-surrogate PPO over shuffled minibatches.
/// The advantage fed to the clip is the weighted branch sum. Policy and value
/// gradients are norm-clipped separately.
pub fn ppo_update(
    agent: &mut Agent,
    batch: &TrainBatch,
    weights: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord, TrainError> {
    let adv = combine_advantages(&batch.advantages, weights)?;
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::ShapeMismatch("empty batch".into()));
    }
    let mb = cfg.minibatch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rec = LossRecord::default();
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let (terms, mut pg) = policy_loss_grad(
                &agent.policy,
                &batch.obs,
                &batch.actions,
                &batch.logprobs_old,
                &adv,
                idx,
                cfg.clip_eps,
                cfg.entropy_coef,
            )?;
            let (vloss, mut vg) = value_loss_grad(&agent.value, &batch.obs, &batch.returns, idx, cfg.value_coef)?;
            if !terms.objective.is_finite() || !vloss.is_finite() || !pg.all_finite() || !vg.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: 0,
                    detail: format!("policy objective {}, value loss {vloss}", terms.objective),
                });
            }
            rec.policy_grad_norm += nets::clip_global_norm(&mut pg, cfg.max_grad_norm);
            rec.value_grad_norm += nets::clip_global_norm(&mut vg, cfg.max_grad_norm);
            agent.policy_opt.step(&mut agent.policy, &pg, cfg.lr_policy)?;
            agent.policy.clamp_log_std();
            agent.value_opt.step(&mut agent.value, &vg, cfg.lr_value)?;
            rec.policy_loss += terms.surrogate_loss;
            rec.value_loss += vloss / cfg.value_coef.max(f64::MIN_POSITIVE);
            rec.entropy += terms.entropy;
            rec.clip_fraction += terms.clip_fraction;
            rec.minibatches += 1;
        }
    }
    let m = rec.minibatches as f64;
    rec.policy_loss /= m;
    rec.value_loss /= m;
    rec.entropy /= m;
    rec.clip_fraction /= m;
    rec.policy_grad_norm /= m;
    rec.value_grad_norm /= m;
    Ok(rec)
}

/// Scheduler ticks fire at epoch 1 and at every multiple of `period` before the final epoch.
pub fn is_tick(epoch: u64, period: u64, total_epochs: u64) -> bool {
    epoch == 1 || (epoch % period == 0 && epoch < total_epochs)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Stateful training run; one [`Trainer::step_epoch`] per epoch.
pub struct Trainer {
    cfg: TrainConfig,
    envs: RolloutEnvs,
    agent: Agent,
    scheduler: Option<Scheduler>,
    history: StatsHistory,
    weights: WeightVector,
    rule: ActiveRule,
    update_rng: ChaCha8Rng,
    /// Most recent completed episodes (branch sums, total), newest last.
    recent: VecDeque<(Vec<f64>, f64)>,
    /// Per-branch sums of episodes completed since the previous tick.
    tick_window: Matrix,
    tick_log: Vec<TranscriptEntry>,
    checkpoint_dir: Option<PathBuf>,
    epoch: u64,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("algo", &self.cfg.algo)
            .field("env", &self.cfg.env)
            .field("epoch", &self.epoch)
            .field("rule", &self.rule)
            .finish()
    }
}

impl Trainer {
    /// `client` is required by the llm, replay and direct selectors and ignored otherwise.
    pub fn new(cfg: TrainConfig, client: Option<Box<dyn ChatClient>>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let envs = RolloutEnvs::new(&cfg)?;
        let agent = Agent::init(&cfg)?;
        let b = envs.layout().branches();
        let scheduler = match cfg.selector_kind()? {
            Some(kind) => {
                let client = if kind.needs_client() { client } else { None };
                Some(Scheduler::new(kind, client, cfg.llm_options(), cfg.seed)?)
            }
            None => None,
        };
        let (weights, rule) = if scheduler.is_some() {
            (WeightVector::uniform(b, cfg.w_base + 0.5 * W_RANGE, 0), ActiveRule::Rule(1))
        } else {
            (WeightVector::uniform(b, 1.0, 0), ActiveRule::None)
        };
        Ok(Trainer {
            update_rng: derive_rng(cfg.seed, b"update", 0),
            history: StatsHistory::with_capacity(cfg.history_len),
            recent: VecDeque::with_capacity(cfg.num_envs + 1),
            tick_window: Matrix::with_cols(b),
            tick_log: Vec::new(),
            checkpoint_dir: None,
            epoch: 0,
            cfg,
            envs,
            agent,
            scheduler,
            weights,
            rule,
        })
    }

    /// Writes checkpoints into `dir` every `checkpoint_every` epochs and after the last one.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn layout(&self) -> &RewardLayout {
        self.envs.layout()
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn history(&self) -> &StatsHistory {
        &self.history
    }

    pub fn tick_log(&self) -> &[TranscriptEntry] {
        &self.tick_log
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.total_epochs
    }

    fn reward_desc(&self) -> String {
        let layout = self.envs.layout();
        let mut desc = layout.spec.reward_desc.trim_end().to_string();
        if layout.aux.is_some() {
            let expr = layout.aux.as_ref().map(|e| e.to_string()).unwrap_or_default();
            desc.push_str(&format!("\n{}.aux: auxiliary shaping term {expr}", layout.spec.k() + 1));
        }
        desc
    }

    /// Branch statistics of the epoch: episodes completed in it, else the most
    /// recent completed ones, else the in-progress partial sums.
    fn epoch_window(&mut self, rollout: &Rollout) -> (Matrix, Vec<f64>) {
        let completed = rollout.completed_branch();
        for (row, total) in completed.iter_rows().zip(&rollout.completed_totals) {
            self.recent.push_back((row.to_vec(), *total));
            if self.recent.len() > self.cfg.num_envs {
                self.recent.pop_front();
            }
        }
        if completed.rows() > 0 {
            (completed, rollout.completed_totals.clone())
        } else if !self.recent.is_empty() {
            let rows: Vec<Vec<f64>> = self.recent.iter().map(|(r, _)| r.clone()).collect();
            (Matrix::from_rows(&rows), self.recent.iter().map(|(_, t)| *t).collect())
        } else {
            (rollout.partial_branch.clone(), rollout.partial_totals.clone())
        }
    }

    fn tick(&mut self, stats: &BranchStats) -> Result<(), TrainError> {
        let Some(scheduler) = self.scheduler.as_mut() else {
            return Ok(());
        };
        let spec = self.envs.layout().spec;
        let ctx = SelectionContext {
            task_desc: spec.task_desc.to_string(),
            env_desc: spec.env_desc.to_string(),
            reward_desc: String::new(),
            rules_block: rules::rules_prompt_block(),
            stats: stats.clone(),
            history: self.history.clone(),
            prev_rule: scheduler.prev_rule(),
            prev_weights: scheduler.prev_weights().cloned(),
        };
        let ctx = SelectionContext {
            reward_desc: self.reward_desc(),
            ..ctx
        };
        let scheduler = self.scheduler.as_mut().expect("checked above");
        let (selection, entry) = scheduler.select_rule(&ctx)?;
        self.history.push(stats.clone())?;
        let shift = self.cfg.w_base - W_BASE;
        let (mut weights, rule) = match selection {
            Selection::Rule(r) => (rules::compute_weights(r as i64, stats, &self.history)?, ActiveRule::Rule(r)),
            Selection::Weights(w) => (w, ActiveRule::Direct),
        };
        weights.weights.iter_mut().for_each(|w| *w += shift);
        weights.epoch = stats.epoch;
        scheduler.set_applied_weights(weights.clone());
        log::info!(
            "epoch {}: tick {} selected rule {} -> weights {:?}",
            stats.epoch,
            entry.tick,
            rule,
            weights.weights
        );
        self.tick_log.push(entry);
        self.weights = weights;
        self.rule = rule;
        Ok(())
    }

    fn save_checkpoint(&self) -> Result<(), TrainError> {
        let Some(dir) = &self.checkpoint_dir else { return Ok(()) };
        let last = self.epoch == self.cfg.total_epochs;
        if self.epoch % self.cfg.checkpoint_every == 0 || last {
            std::fs::create_dir_all(dir).map_err(NetError::Io)?;
            let name = if last {
                "checkpoint_final.txt".to_string()
            } else {
                format!("checkpoint_{:06}.txt", self.epoch)
            };
            nets::save_checkpoint(&dir.join(name), &self.agent.policy, &self.agent.value)?;
        }
        Ok(())
    }

    /// Collect, estimate, tick if due, update; returns the epoch's metrics.
    pub fn step_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let epoch = self.epoch + 1;
        let rollout = collect_rollout(
            &mut self.envs,
            &self.agent.policy,
            &self.agent.value,
            self.cfg.steps_per_epoch,
            epoch,
        )?;
        let (window, totals) = self.epoch_window(&rollout);
        let stats = estimation::summarize_branches(&window, epoch)?;
        self.tick_window.extend(&rollout.completed_branch());
        if is_tick(epoch, self.cfg.schedule_period, self.cfg.total_epochs) {
            // no episode finished since the last tick: fall back to the running sums
            let source = if self.tick_window.rows() > 0 {
                &self.tick_window
            } else {
                &rollout.partial_branch
            };
            let tick_stats = estimation::summarize_branches(source, epoch)?;
            self.tick(&tick_stats)?;
            self.tick_window = Matrix::with_cols(self.tick_window.cols());
        }
        let mut batch = rollout.into_train_batch(self.cfg.gamma, self.cfg.lambda)?;
        if self.cfg.normalize_advantages {
            batch.advantages = estimation::normalize_advantages(&batch.advantages);
        }
        let losses = ppo_update(
            &mut self.agent,
            &batch,
            &self.weights.weights,
            &self.cfg,
            &mut self.update_rng,
        )
        .map_err(|e| match e {
            TrainError::NonFiniteLoss { detail, .. } => TrainError::NonFiniteLoss { epoch, detail },
            other => other,
        })?;
        self.epoch = epoch;
        self.save_checkpoint()?;
        let (mean, std) = mean_std(&totals);
        Ok(EpochMetrics {
            epoch,
            total_return_mean: mean,
            total_return_std: std,
            branch_means: stats.means,
            branch_vars: stats.vars,
            rule: self.rule,
            weights: self.weights.weights.clone(),
            policy_loss: losses.policy_loss,
            value_loss: losses.value_loss,
            entropy: losses.entropy,
        })
    }

    /// Runs the remaining epochs, handing each metrics row to `sink` as soon as it exists.
    pub fn run<F>(&mut self, mut sink: F) -> Result<Vec<EpochMetrics>, TrainError>
    where
        F: FnMut(&EpochMetrics) -> Result<(), TrainError>,
    {
        let mut out = Vec::with_capacity((self.cfg.total_epochs - self.epoch) as usize);
        while !self.is_finished() {
            let m = self.step_epoch()?;
            sink(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains without an LLM handle (selectors that need one fail with `MissingLlmHandle`).
pub fn train(cfg: &TrainConfig) -> Result<Vec<EpochMetrics>, TrainError> {
    Trainer::new(cfg.clone(), None)?.run(|_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algo: Algo) -> TrainConfig {
        TrainConfig {
            algo,
            selector: SelectorChoice::Scripted,
            total_epochs: 3,
            steps_per_epoch: 64,
            num_envs: 2,
            minibatch_size: 32,
            update_epochs: 1,
            hidden: vec![8],
            schedule_period: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn combine_examples() {
        let adv = Matrix::from_rows(&[vec![0.3, -0.1], vec![2.0, 1.0], vec![0.0, 0.0]]);
        let ones = combine_advantages(&adv, &[1.0, 1.0]).unwrap();
        assert!((ones[0] - 0.2).abs() < 1e-15);
        let w = combine_advantages(&adv, &[0.5, 1.0]).unwrap();
        assert_eq!(w[1], 2.0);
        assert_eq!(w[2], 0.0);
        assert!(matches!(combine_advantages(&adv, &[1.0]), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn cadence() {
        let ticks: Vec<u64> = (1..=1000).filter(|&e| is_tick(e, 100, 1000)).collect();
        assert_eq!(ticks, vec![1, 100, 200, 300, 400, 500, 600, 700, 800, 900]);
        assert_eq!((1..=5).filter(|&e| is_tick(e, 100, 5)).count(), 1);
    }

    #[test]
    fn rollout_shapes() {
        for (algo, aux, b) in [(Algo::Ahrs, false, 4), (Algo::Ahrs, true, 5), (Algo::Ppo, true, 1), (Algo::PpoA, true, 1)] {
            let mut cfg = tiny(algo);
            cfg.aux.enabled = aux;
            cfg.num_envs = 3;
            cfg.steps_per_epoch = 100;
            let agent = Agent::init(&cfg).unwrap();
            let mut envs = RolloutEnvs::new(&cfg).unwrap();
            let r = collect_rollout(&mut envs, &agent.policy, &agent.value, 100, 1).unwrap();
            assert_eq!(r.len(), 100);
            assert_eq!(r.segments.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![34, 33, 33]);
            assert!(r.segments.iter().all(|s| s.branches() == b && s.values.rows() == s.len() + 1));
        }
    }

    #[test]
    fn scalar_row_is_component_sum() {
        let cfg = tiny(Algo::Ppo);
        let layout = RewardLayout::from_config(&cfg).unwrap();
        let rv = RewardVector { components: vec![0.25, -1.5, 0.125, -0.01] };
        assert!((layout.row(&rv, None)[0] - rv.components.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn resolve_selectors() {
        let mut cfg = tiny(Algo::HdPpo);
        assert_eq!(cfg.selector_kind().unwrap(), Some(SelectorKind::Fixed(8)));
        cfg.algo = Algo::Ppo;
        assert_eq!(cfg.selector_kind().unwrap(), None);
        cfg.algo = Algo::AhrsD;
        assert!(cfg.selector_kind().is_err());
        cfg.selector = SelectorChoice::Replay;
        assert_eq!(cfg.selector_kind().unwrap(), Some(SelectorKind::Direct(DirectSource::Replay)));
    }

    #[test]
    fn bad_aux_expression_rejected() {
        let mut cfg = tiny(Algo::Ahrs);
        cfg.aux.expr = "pos_x + nonsense".into();
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig { key, .. }) if key == "aux.expr"));
        cfg.aux.expr = "1 +".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_keeps_unit_weights() {
        let ms = train(&tiny(Algo::Ppo)).unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms.iter().all(|m| m.rule == ActiveRule::None && m.weights == vec![1.0]));
    }

    #[test]
    fn weights_persist_between_ticks() {
        let mut cfg = tiny(Algo::Ahrs);
        cfg.total_epochs = 5;
        cfg.script = vec![3, 1];
        let ms = train(&cfg).unwrap();
        let rules: Vec<ActiveRule> = ms.iter().map(|m| m.rule).collect();
        assert_eq!(
            rules,
            [3, 1, 1, 3, 3].map(ActiveRule::Rule).to_vec(),
            "ticks at 1, 2, 4"
        );
        assert_eq!(ms[2].weights, ms[1].weights);
        assert!(ms.iter().all(|m| m.weights.iter().all(|w| (0.5..=1.0).contains(w))));
    }
}
