//! Rule selection: prompt construction, response parsing and the pluggable
//! selectors consulted at every scheduler tick.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{BranchStats, StatsHistory};
use crate::llm_client::{CallMeta, ChatClient, ChatOutcome, ChatRequest, ClientError, ResponseFormat};
use crate::numfmt::sig_list;
use crate::rules::{self, WeightVector, RULE_COUNT, W_BASE, W_RANGE};

const RULE: &str = "====================================";
const PROMPT_DIGITS: usize = 6;

pub const SYSTEM_PROMPT: &str = "You help tune the weights of decomposed reward components while a reinforcement learning agent trains.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseChoiceError {
    #[error("no `~[n]~` token in response")]
    NoMatch,
    #[error("rule {0} is outside 1..=8")]
    OutOfRange(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseWeightsError {
    #[error("no `~[w1, ..., wn]~` list of numbers in response")]
    NoMatch,
    #[error("expected {expected} weights, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("weight list contains a non-finite value")]
    NonFiniteValue,
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("selector requires an LLM client (live or replay)")]
    MissingLlmHandle,
    #[error("replay transcript exhausted after {0} record(s)")]
    ReplayExhausted(usize),
    #[error("replay prompt drift at record {index}: stored {stored}, rebuilt {actual}")]
    ReplayPromptDrift {
        index: usize,
        stored: String,
        actual: String,
    },
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error(transparent)]
    Client(ClientError),
    #[error(transparent)]
    Rule(#[from] rules::RuleError),
}

impl From<ClientError> for SchedulerError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::ReplayExhausted(n) => SchedulerError::ReplayExhausted(n),
            ClientError::ReplayPromptDrift { index, stored, actual } => {
                SchedulerError::ReplayPromptDrift { index, stored, actual }
            }
            other => SchedulerError::Client(other),
        }
    }
}

/// Everything the selection prompt is rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionContext {
    pub task_desc: String,
    pub env_desc: String,
    pub reward_desc: String,
    pub rules_block: String,
    pub stats: BranchStats,
    pub history: StatsHistory,
    pub prev_rule: Option<u8>,
    pub prev_weights: Option<WeightVector>,
}

fn tilde_int() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"~\[\s*([+-]?\d+)\s*\]~").expect("valid regex"))
}

fn tilde_list() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"~\[([^\[\]~]*)\]~").expect("valid regex"))
}

/// First `~[n]~` token in `response`, validated against the rule range.
pub fn parse_rule_choice(response: &str) -> Result<u8, ParseChoiceError> {
    let caps = tilde_int().captures(response).ok_or(ParseChoiceError::NoMatch)?;
    let digits = caps[1].trim_start_matches('+');
    match digits.parse::<i64>() {
        Ok(n) if (1..=RULE_COUNT as i64).contains(&n) => Ok(n as u8),
        Ok(n) => Err(ParseChoiceError::OutOfRange(n)),
        // more digits than fit in an i64
        Err(_) => Err(ParseChoiceError::OutOfRange(i64::MAX)),
    }
}

/// First `~[w1, ..., wn]~` list in `response`; values are clamped into `[0.5, 1.0]`.
pub fn parse_direct_weights(response: &str, branch_count: usize) -> Result<WeightVector, ParseWeightsError> {
    let mut found = None;
    for caps in tilde_list().captures_iter(response) {
        let parsed: Result<Vec<f64>, _> = caps[1].split(',').map(|t| t.trim().parse::<f64>()).collect();
        if let Ok(values) = parsed {
            found = Some(values);
            break;
        }
    }
    let values = found.ok_or(ParseWeightsError::NoMatch)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ParseWeightsError::NonFiniteValue);
    }
    if values.len() != branch_count {
        return Err(ParseWeightsError::CountMismatch {
            expected: branch_count,
            found: values.len(),
        });
    }
    Ok(WeightVector {
        weights: values.iter().map(|v| v.clamp(W_BASE, W_BASE + W_RANGE)).collect(),
        rule_id: None,
        epoch: 0,
    })
}

/// Canonical interpretation of a response for transcripts; `Ok(None)` for free text.
pub fn interpret_response(format: ResponseFormat, content: &str) -> Result<Option<String>, String> {
    match format {
        ResponseFormat::RuleChoice => parse_rule_choice(content)
            .map(|n| Some(n.to_string()))
            .map_err(|e| e.to_string()),
        ResponseFormat::DirectWeights { branches } => parse_direct_weights(content, branches)
            .map(|w| Some(sig_list(&w.weights, PROMPT_DIGITS)))
            .map_err(|e| e.to_string()),
        ResponseFormat::Freeform => Ok(None),
    }
}

fn push_section(out: &mut String, title: &str, body: &str) {
    out.push_str(RULE);
    out.push('\n');
    out.push_str(title);
    out.push('\n');
    out.push_str(body.trim_end());
    out.push('\n');
}

fn data_sections(out: &mut String, ctx: &SelectionContext) {
    push_section(
        out,
        "Current Data:",
        &format!(
            "Mean Returns: {}\nVariance Returns: {}",
            sig_list(&ctx.stats.means, PROMPT_DIGITS),
            sig_list(&ctx.stats.vars, PROMPT_DIGITS)
        ),
    );
    let mut hist = String::new();
    if ctx.history.is_empty() {
        hist.push_str("(none yet)");
    }
    for h in ctx.history.iter() {
        hist.push_str(&format!(
            "epoch {}: Mean Returns: {}; Variance Returns: {}\n",
            h.epoch,
            sig_list(&h.means, PROMPT_DIGITS),
            sig_list(&h.vars, PROMPT_DIGITS)
        ));
    }
    push_section(out, "Historical Mean Returns and Variance Returns (oldest first):", &hist);
}

fn header(task_desc: &str, reward_desc: &str) -> String {
    let mut out = String::from(
        "Reward-weighting decision for a reinforcement learning (RL) run.\n",
    );
    push_section(
        &mut out,
        "Task description:",
        &format!(
            "{task_desc}\nReward components (summed into the total reward):\n{reward_desc}\n\
             The weights on these components are revisited periodically during training."
        ),
    );
    push_section(
        &mut out,
        "Algorithm framework:",
        "PPO. Each reward component has a separate value network and advantage; the policy update \
         uses the sum over components of weight_k * advantage_k, with every weight_k in [0.5, 1.0].",
    );
    out
}

fn context_section(ctx: &SelectionContext, direct: bool) -> String {
    match (ctx.prev_rule, &ctx.prev_weights) {
        (None, None) => "Nothing has been chosen yet in this run.".to_string(),
        (rule, weights) => {
            let mut lines = Vec::new();
            if let (Some(r), false) = (rule, direct) {
                lines.push(format!("Rule applied since the last tick: {r}"));
            }
            if let Some(w) = weights {
                lines.push(format!("Weights applied since the last tick: {}", sig_list(&w.weights, PROMPT_DIGITS)));
            }
            lines.join("\n")
        }
    }
}

/// Prompt asking the model to pick one rule from the repository.
pub fn build_selection_prompt(ctx: &SelectionContext) -> String {
    let mut out = header(&ctx.task_desc, &ctx.reward_desc);
    push_section(
        &mut out,
        "Environment description:",
        &format!(
            "{}\nThe data sections list, per component, the mean and the variance of its per-episode sum \
             over recent episodes.",
            ctx.env_desc
        ),
    );
    push_section(
        &mut out,
        "Goal:",
        "Pick the rule whose weights should help the policy most at this point in training. Reason briefly \
         about the numbers and about what each rule would emphasize before answering.",
    );
    push_section(
        &mut out,
        "Proposed rules:",
        &format!(
            "{}Answer with the number of exactly one rule.",
            ctx.rules_block
        ),
    );
    push_section(&mut out, "Additional Context:", &context_section(ctx, false));
    push_section(
        &mut out,
        "Output Format:",
        "Use the tilde symbol (~) at the beginning and end of the output serial number, in the form ~[n]~.\n\
         **Ensure the output is an integer and one of 1, 2, 3, 4, 5, 6, 7 or 8.**\n\
         Example: ~[1]~",
    );
    data_sections(&mut out, ctx);
    out
}

/// Prompt asking the model for weights directly, bypassing the rules.
pub fn build_direct_prompt(ctx: &SelectionContext) -> String {
    let b = ctx.stats.branches();
    let mut out = header(&ctx.task_desc, &ctx.reward_desc);
    push_section(&mut out, "Environment description:", &ctx.env_desc);
    push_section(
        &mut out,
        "Goal:",
        "Assign every component the weight that should help the policy most at this point in training. \
         Reason briefly about the numbers before answering.",
    );
    push_section(&mut out, "Additional Context:", &context_section(ctx, true));
    let example = vec!["0.75"; b].join(", ");
    push_section(
        &mut out,
        "Output Format:",
        &format!(
            "Output exactly {b} comma-separated weights, one per reward component in the order listed, each a \
             number between 0.5 and 1.0, wrapped with tildes as ~[w1, ..., w{b}]~.\nExample: ~[{example}]~"
        ),
    );
    data_sections(&mut out, ctx);
    out
}

/// Offline prompt for generating a rule repository.
pub fn build_repo_prompt(task_desc: &str, env_desc: &str, reward_desc: &str) -> String {
    let mut out = header(task_desc, reward_desc);
    push_section(&mut out, "Environment description:", env_desc);
    push_section(
        &mut out,
        "Goal:",
        "Propose at least six weight generation rules. Each rule maps the per-component mean returns and \
         variance returns to one weight per component; give it as a formula and as a Python function.",
    );
    push_section(
        &mut out,
        "Example rule (HDPG):",
        "score_k = mean_k - previous_mean_k (growth of component k's mean return since the last tick); \
         weights are the min-max normalized scores.",
    );
    push_section(
        &mut out,
        "Notes:",
        "Rules may take one or two constants and may use any normalization across components.",
    );
    out
}

/// Offline prompt for an auxiliary reward written in the expression language.
pub fn build_aux_prompt(task_desc: &str, env_desc: &str, reward_desc: &str, variables: &[&str]) -> String {
    let mut out = String::from(
        "Design an auxiliary reward for the agent below.\n",
    );
    push_section(
        &mut out,
        "Task description and reward components:",
        &format!("{task_desc}\n{env_desc}\nReward components:\n{reward_desc}"),
    );
    push_section(
        &mut out,
        "Requirements:",
        "Propose one auxiliary reward term that makes the task easier to learn. It is appended as an extra \
         component; the existing components stay unchanged.",
    );
    push_section(
        &mut out,
        "Output Requirements:",
        &format!(
            "1. Write the auxiliary reward as a single arithmetic expression, not as code.\n\
             2. Allowed: numbers, + - * / ^ (right-associative; unary minus binds looser than ^), parentheses, \
             and the functions exp, log, tanh, abs, sqrt, min(a,b), max(a,b), clamp(x,lo,hi).\n\
             3. The only variables available are: {}.\n\
             4. Return only the expression, inside a fenced block.",
            variables.join(", ")
        ),
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectSource {
    Llm,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Llm,
    Replay,
    Scripted(Vec<u8>),
    Random,
    Fixed(u8),
    Direct(DirectSource),
}

impl SelectorKind {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        match self {
            SelectorKind::Scripted(seq) if seq.is_empty() => {
                Err(SchedulerError::InvalidSelector("scripted sequence is empty".into()))
            }
            SelectorKind::Scripted(seq) if seq.iter().any(|&r| !(1..=RULE_COUNT).contains(&r)) => {
                Err(SchedulerError::InvalidSelector("scripted ids must lie in 1..=8".into()))
            }
            SelectorKind::Fixed(r) if !(1..=RULE_COUNT).contains(r) => {
                Err(SchedulerError::InvalidSelector(format!("fixed rule {r} outside 1..=8")))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_client(&self) -> bool {
        matches!(self, SelectorKind::Llm | SelectorKind::Replay | SelectorKind::Direct(_))
    }

    pub fn label(&self) -> String {
        match self {
            SelectorKind::Llm => "llm".into(),
            SelectorKind::Replay => "replay".into(),
            SelectorKind::Scripted(_) => "scripted".into(),
            SelectorKind::Random => "random".into(),
            SelectorKind::Fixed(r) => format!("fixed({r})"),
            SelectorKind::Direct(DirectSource::Llm) => "direct(llm)".into(),
            SelectorKind::Direct(DirectSource::Replay) => "direct(replay)".into(),
        }
    }
}

/// Outcome of one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Rule(u8),
    Weights(WeightVector),
}

/// Per-tick log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub epoch: u64,
    pub selector: String,
    pub prompt_hash: Option<String>,
    pub response: Option<ChatOutcome>,
    pub selection: Selection,
    pub fallback: bool,
    pub note: Option<String>,
}

/// Options for LLM-backed requests.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmOptions {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: std::time::Duration,
}

impl Default for LlmOptions {
    fn default() -> Self {
        LlmOptions {
            model: crate::llm_client::DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout: std::time::Duration::from_secs(60),
        }
    }
}

/// Selector state carried across ticks.
pub struct Scheduler {
    kind: SelectorKind,
    client: Option<Box<dyn ChatClient>>,
    options: LlmOptions,
    rng: ChaCha8Rng,
    cursor: usize,
    ticks: u64,
    prev_rule: Option<u8>,
    prev_weights: Option<WeightVector>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler")
            .field("kind", &self.kind)
            .field("has_client", &self.client.is_some())
            .field("ticks", &self.ticks)
            .field("prev_rule", &self.prev_rule)
            .finish()
    }
}

impl Scheduler {
    pub fn new(
        kind: SelectorKind,
        client: Option<Box<dyn ChatClient>>,
        options: LlmOptions,
        seed: u64,
    ) -> Result<Self, SchedulerError> {
        kind.validate()?;
        if kind.needs_client() && client.is_none() {
            return Err(SchedulerError::MissingLlmHandle);
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..17].copy_from_slice(b"scheduler");
        Ok(Scheduler {
            kind,
            client,
            options,
            rng: ChaCha8Rng::from_seed(key),
            cursor: 0,
            ticks: 0,
            prev_rule: None,
            prev_weights: None,
        })
    }

    pub fn kind(&self) -> &SelectorKind {
        &self.kind
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn prev_rule(&self) -> Option<u8> {
        self.prev_rule
    }

    pub fn prev_weights(&self) -> Option<&WeightVector> {
        self.prev_weights.as_ref()
    }

    /// Records the weights actually applied after this tick, for the next prompt.
    pub fn set_applied_weights(&mut self, weights: WeightVector) {
        self.prev_weights = Some(weights);
    }

    fn request(&self, prompt: String, epoch: u64, format: ResponseFormat) -> ChatRequest {
        let mut req = ChatRequest::new(&self.options.model, SYSTEM_PROMPT, prompt);
        req.temperature = self.options.temperature;
        req.max_tokens = self.options.max_tokens;
        req.timeout = self.options.timeout;
        req.with_meta(CallMeta {
            tick: self.ticks + 1,
            epoch,
            format,
        })
    }

    /// Runs one tick. LLM parse or transport failures fall back to the
    /// previous choice (rule 1, or uniform 0.75 weights, at the first tick).
    pub fn select_rule(&mut self, ctx: &SelectionContext) -> Result<(Selection, TranscriptEntry), SchedulerError> {
        let epoch = ctx.stats.epoch;
        let label = self.kind.label();
        let mut entry = TranscriptEntry {
            tick: self.ticks + 1,
            epoch,
            selector: label,
            prompt_hash: None,
            response: None,
            selection: Selection::Rule(1),
            fallback: false,
            note: None,
        };
        let selection = match self.kind.clone() {
            SelectorKind::Fixed(r) => Selection::Rule(r),
            SelectorKind::Scripted(seq) => {
                let r = seq[self.cursor % seq.len()];
                self.cursor += 1;
                Selection::Rule(r)
            }
            SelectorKind::Random => Selection::Rule(self.rng.gen_range(1..=RULE_COUNT)),
            SelectorKind::Llm | SelectorKind::Replay => {
                let req = self.request(build_selection_prompt(ctx), epoch, ResponseFormat::RuleChoice);
                entry.prompt_hash = Some(req.prompt_hash());
                let client = self.client.as_mut().ok_or(SchedulerError::MissingLlmHandle)?;
                let outcome = client.chat(&req)?;
                let parsed = match outcome.content() {
                    Some(text) => parse_rule_choice(text).map_err(|e| e.to_string()),
                    None => Err(format!("transport failure: {outcome:?}")),
                };
                entry.response = Some(outcome);
                match parsed {
                    Ok(r) => Selection::Rule(r),
                    Err(why) => {
                        let r = self.prev_rule.unwrap_or(1);
                        log::warn!("rule selection failed at epoch {epoch} ({why}); keeping rule {r}");
                        entry.fallback = true;
                        entry.note = Some(why);
                        Selection::Rule(r)
                    }
                }
            }
            SelectorKind::Direct(_) => {
                let b = ctx.stats.branches();
                let req = self.request(
                    build_direct_prompt(ctx),
                    epoch,
                    ResponseFormat::DirectWeights { branches: b },
                );
                entry.prompt_hash = Some(req.prompt_hash());
                let client = self.client.as_mut().ok_or(SchedulerError::MissingLlmHandle)?;
                let outcome = client.chat(&req)?;
                let parsed = match outcome.content() {
                    Some(text) => parse_direct_weights(text, b).map_err(|e| e.to_string()),
                    None => Err(format!("transport failure: {outcome:?}")),
                };
                entry.response = Some(outcome);
                match parsed {
                    Ok(mut w) => {
                        w.epoch = epoch;
                        Selection::Weights(w)
                    }
                    Err(why) => {
                        let mut w = self
                            .prev_weights
                            .clone()
                            .filter(|w| w.len() == b)
                            .unwrap_or_else(|| WeightVector::uniform(b, W_BASE + 0.5 * W_RANGE, epoch));
                        w.epoch = epoch;
                        w.rule_id = None;
                        log::warn!("direct weight generation failed at epoch {epoch} ({why}); reusing {:?}", w.weights);
                        entry.fallback = true;
                        entry.note = Some(why);
                        Selection::Weights(w)
                    }
                }
            }
        };
        if let Selection::Rule(r) = selection {
            self.prev_rule = Some(r);
        }
        self.ticks += 1;
        entry.selection = selection.clone();
        Ok((selection, entry))
    }
}
