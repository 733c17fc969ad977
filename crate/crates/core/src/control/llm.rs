use std::collections::VecDeque;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::models::{ModelError, Predictor, RolloutInput};
use crate::types::{
    quantize_control, ControlInput, Sample, ThermalState, Trajectory, HEATER_LEVELS,
};

use super::{ControlError, Controller, Decision, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmVariant {
    /// One request with the bare prompt.
    Simple,
    /// The prompt carries the closest past (state, control, outcome) records.
    History,
    /// Candidate controls are simulated with an assist model and the
    /// backend picks among the outcomes.
    PredictionAssisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmControllerConfig {
    pub variant: LlmVariant,
    /// Sampling temperature passed to the backend.
    pub temperature: f64,
    pub penalty_prompt: bool,
    pub candidate_count: usize,
    /// Steps each candidate is held for when simulated.
    pub sim_steps: usize,
    pub history_neighbors: usize,
    pub model: String,
}

impl Default for LlmControllerConfig {
    fn default() -> Self {
        Self {
            variant: LlmVariant::Simple,
            temperature: 0.0,
            penalty_prompt: false,
            candidate_count: 8,
            sim_steps: 5,
            history_neighbors: 5,
            model: "gpt-4o".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    fn user(cfg: &LlmControllerConfig, system: &str, content: String) -> Self {
        Self {
            model: cfg.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: system.into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content,
                },
            ],
            temperature: cfg.temperature,
        }
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

pub trait ChatBackend: Send {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ControlError>;
}

const SYSTEM: &str = "You control the heater and the fan of a small heated enclosure. \
The heater duty cycle is a number between 0 and 1 in steps of 0.05; the fan is either off (0) or on (1).";

const FORMAT: &str = "Explain your reasoning briefly, then end with one line of the form \
`CONTROLS: heater=<duty between 0 and 1> fan=<0 or 1>`.";

const REMINDER: &str = "Your previous answer could not be read. \
End your answer with exactly one line `CONTROLS: heater=<x> fan=<0|1>`.";

const PENALTY: &str = "Keep the actuation low: reduce the actuation of the heater and the fan whenever the target allows it.";

/// The operator question for one decision instant.
pub fn base_prompt(target: f64, current: f64, ambient: f64, penalty: bool) -> String {
    let mut p = format!(
        "What should the control values heater_duty_cycle and fan_on be set to in order to maintain a temperature of \
         {target:.2} degrees? The temperature now is {current:.2} and the ambient temperature is {ambient:.2} degrees.\n\
         It is important that the temperature in the greenhouse matches the target temperature exactly."
    );
    if penalty {
        p.push('\n');
        p.push_str(PENALTY);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReply {
    pub heater: f64,
    pub fan: f64,
    pub rationale: String,
}

const NUM: &str = r"([-+]?(?:\d+\.?\d*|\.\d+))";

fn controls_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"(?im)^[`*\s]*CONTROLS:\s*heater\s*=\s*{NUM}\s*,?\s*fan\s*=\s*{NUM}.*$"
        ))
        .unwrap()
    })
}

fn loose_heater() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r"(?i)heater(?:_duty(?:_cycle)?)?\s*[=:]\s*{NUM}")).unwrap()
    })
}

fn loose_fan() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?i)fan(?:_on)?\s*[=:]\s*{NUM}")).unwrap())
}

/// Reads the controls out of a backend reply. The `CONTROLS:` line wins;
/// otherwise the first `heater=`/`fan=` style assignments are used.
pub fn parse_reply(text: &str) -> Option<ParsedReply> {
    let (heater, fan, rationale) = if let Some(c) = controls_line().captures(text) {
        let rationale = controls_line().replace_all(text, "").trim().to_string();
        (c[1].parse().ok()?, c[2].parse().ok()?, rationale)
    } else {
        let h = loose_heater().captures(text)?;
        let f = loose_fan().captures(text)?;
        (
            h[1].parse().ok()?,
            f[1].parse().ok()?,
            text.trim().to_string(),
        )
    };
    let heater: f64 = heater;
    let fan: f64 = fan;
    if !heater.is_finite() || !fan.is_finite() {
        return None;
    }
    let rationale = if rationale.is_empty() {
        text.trim().to_string()
    } else {
        rationale
    };
    Some(ParsedReply {
        heater,
        fan,
        rationale,
    })
}

/// Deterministic stand-in for a language model.
#[derive(Debug, Clone)]
pub enum MockBackend {
    /// Replies from a script, in order; an exhausted script is a backend error.
    Scripted(VecDeque<String>),
    /// Reads the numbers out of the prompt and answers with a proportional
    /// rule, the closest past record, or the best simulated candidate,
    /// depending on what the prompt offers.
    Heuristic { gain: f64 },
}

impl MockBackend {
    pub fn scripted<I: IntoIterator<Item = S>, S: Into<String>>(replies: I) -> Self {
        MockBackend::Scripted(replies.into_iter().map(Into::into).collect())
    }

    pub fn heuristic() -> Self {
        MockBackend::Heuristic { gain: 0.01 }
    }
}

fn prompt_number(re: &Regex, text: &str) -> Option<f64> {
    re.captures(text).and_then(|c| c[1].parse().ok())
}

fn heuristic_reply(gain: f64, prompt: &str) -> String {
    static TARGET: OnceLock<Regex> = OnceLock::new();
    static CURRENT: OnceLock<Regex> = OnceLock::new();
    static AMBIENT: OnceLock<Regex> = OnceLock::new();
    static CANDIDATE: OnceLock<Regex> = OnceLock::new();
    static PAST: OnceLock<Regex> = OnceLock::new();
    let target =
        TARGET.get_or_init(|| Regex::new(&format!(r"maintain a temperature of\s+{NUM}")).unwrap());
    let current =
        CURRENT.get_or_init(|| Regex::new(&format!(r"temperature now is\s+{NUM}")).unwrap());
    let ambient =
        AMBIENT.get_or_init(|| Regex::new(&format!(r"ambient temperature is\s+{NUM}")).unwrap());
    let candidate = CANDIDATE.get_or_init(|| {
        Regex::new(&format!(
            r"(?m)^Candidate \d+: heater={NUM} fan={NUM} -> predicted ((?:\s*[-+0-9.eE]+)+)\s*$"
        ))
        .unwrap()
    });
    let past = PAST.get_or_init(|| {
        Regex::new(&format!(
            r"(?m)^Past: temperature {NUM}, ambient {NUM}, heater={NUM} fan={NUM} -> next {NUM}"
        ))
        .unwrap()
    });
    let (Some(t_ref), Some(t), Some(t_amb)) = (
        prompt_number(target, prompt),
        prompt_number(current, prompt),
        prompt_number(ambient, prompt),
    ) else {
        return "I cannot tell the temperatures from the question.".into();
    };
    let penalty = prompt.contains("reduce the actuation");
    let effort = |h: f64, f: f64| if penalty { 0.2 * (h + f) } else { 0.0 };

    let mut best: Option<(f64, f64, f64)> = None;
    for c in candidate.captures_iter(prompt) {
        let (h, f): (f64, f64) = (c[1].parse().unwrap(), c[2].parse().unwrap());
        let path: Vec<f64> = c[3]
            .split_whitespace()
            .filter_map(|v| v.parse().ok())
            .collect();
        if path.is_empty() {
            continue;
        }
        let miss = path.iter().map(|p| (p - t_ref).abs()).sum::<f64>() / path.len() as f64;
        let score = miss + effort(h, f);
        if best.map_or(true, |(_, _, s)| score < s) {
            best = Some((h, f, score));
        }
    }
    if let Some((h, f, _)) = best {
        return format!(
            "The simulated outcomes favour heater {h:.2} with the fan {}.\nCONTROLS: heater={h:.2} fan={f:.0}",
            if f >= 0.5 { "on" } else { "off" }
        );
    }

    let mut nearest: Option<(f64, f64, f64)> = None;
    for c in past.captures_iter(prompt) {
        let v: Vec<f64> = (1..=5).map(|i| c[i].parse().unwrap()).collect();
        let d = (v[0] - t).abs() + (v[4] - t_ref).abs() + 0.5 * (v[1] - t_amb).abs();
        if nearest.map_or(true, |(_, _, s)| d < s) {
            nearest = Some((v[2], v[3], d));
        }
    }
    if let Some((h, f, d)) = nearest {
        if d < 1.0 {
            return format!(
                "A past situation close to this one reached the target with these settings.\nCONTROLS: heater={h:.2} fan={f:.0}"
            );
        }
    }

    let err = t_ref - t;
    let hold = 0.02 * (t_ref - t_amb);
    let g = if penalty { 0.5 * gain } else { gain };
    let heater = (hold + g * err).clamp(0.0, 1.0);
    let fan = if -err > if penalty { 4.0 } else { 3.0 } {
        1
    } else {
        0
    };
    format!(
        "The temperature is {:.2} degrees {} the target, so the heater goes to {heater:.2}{}.\nCONTROLS: heater={heater:.2} fan={fan}",
        err.abs(),
        if err >= 0.0 { "below" } else { "above" },
        if fan == 1 { " and the fan runs to cool down" } else { "" },
    )
}

impl ChatBackend for MockBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ControlError> {
        match self {
            MockBackend::Scripted(q) => q
                .pop_front()
                .ok_or_else(|| ControlError::Backend("mock script exhausted".into())),
            MockBackend::Heuristic { gain } => Ok(heuristic_reply(*gain, req.last_user())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Base URL of an OpenAI-compatible API; `/chat/completions` is appended.
    pub base_url: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_s: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            token_env: "TWINLAB_LLM_TOKEN".into(),
            timeout_s: 30,
        }
    }
}

/// Chat-completion client over HTTP.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, ControlError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| ControlError::Backend(e.to_string()))?;
        let token = std::env::var(&cfg.token_env).ok();
        Ok(Self { cfg, client, token })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ControlError> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let mut rb = self.client.post(url).json(req);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let classify = |e: reqwest::Error, timeout: u64| {
            if e.is_timeout() {
                ControlError::Timeout(timeout)
            } else {
                ControlError::Backend(e.to_string())
            }
        };
        let resp = rb.send().map_err(|e| classify(e, self.cfg.timeout_s))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(ControlError::Backend(format!("HTTP {status}: {body}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| classify(e, self.cfg.timeout_s))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ControlError::Backend("response has no choices".into()))
    }
}

/// One remembered transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub t_inside: f64,
    pub t_ambient: f64,
    pub control: ControlInput,
    pub t_next: f64,
}

/// Append-only record of past transitions with nearest-neighbour lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryStore {
    records: Vec<HistoryRecord>,
}

impl HistoryStore {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let s = traj.samples();
        Self {
            records: s
                .windows(2)
                .map(|w| HistoryRecord {
                    t_inside: w[0].state.t_inside,
                    t_ambient: w[0].state.t_ambient,
                    control: w[0].control,
                    t_next: w[1].state.t_inside,
                })
                .collect(),
        }
    }

    pub fn push(&mut self, r: HistoryRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The `k` records that started closest to `now` and ended closest to
    /// `target`; earlier records win ties.
    pub fn nearest(&self, now: ThermalState, target: f64, k: usize) -> Vec<HistoryRecord> {
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = (r.t_inside - now.t_inside).abs()
                    + (r.t_next - target).abs()
                    + 0.5 * (r.t_ambient - now.t_ambient).abs();
                (d, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| self.records[i])
            .collect()
    }
}

/// Language-model controller.
pub struct LlmController {
    pub cfg: LlmControllerConfig,
    backend: Box<dyn ChatBackend>,
    assist: Option<Box<dyn Predictor>>,
    store: HistoryStore,
    pending: Option<(ThermalState, ControlInput)>,
}

impl LlmController {
    pub fn new(
        cfg: LlmControllerConfig,
        backend: Box<dyn ChatBackend>,
        assist: Option<Box<dyn Predictor>>,
        store: Option<HistoryStore>,
    ) -> Result<Self, ControlError> {
        if cfg.variant == LlmVariant::PredictionAssisted && assist.is_none() {
            return Err(ControlError::Config(
                "llm.variant prediction_assisted requires an assist model".into(),
            ));
        }
        if cfg.variant == LlmVariant::History && store.is_none() {
            return Err(ControlError::Config(
                "llm.variant history requires a history store".into(),
            ));
        }
        if cfg.variant == LlmVariant::PredictionAssisted && cfg.candidate_count < 2 {
            return Err(ControlError::Config(
                "llm.candidate_count must be >= 2".into(),
            ));
        }
        if cfg.variant == LlmVariant::PredictionAssisted && cfg.sim_steps == 0 {
            return Err(ControlError::Config("llm.sim_steps must be >= 1".into()));
        }
        Ok(Self {
            cfg,
            backend,
            assist,
            store: store.unwrap_or_default(),
            pending: None,
        })
    }

    pub fn store(&self) -> &HistoryStore {
        &self.store
    }

    /// Sends `prompt`, retrying once with a format reminder when the reply
    /// cannot be parsed.
    fn ask(&mut self, prompt: String) -> Result<(ControlInput, String), ControlError> {
        let first = ChatRequest::user(&self.cfg, SYSTEM, format!("{prompt}\n{FORMAT}"));
        let reply = self.backend.complete(&first)?;
        if let Some(p) = parse_reply(&reply) {
            return Ok((quantize_control(p.heater, p.fan)?, p.rationale));
        }
        let retry = ChatRequest::user(&self.cfg, SYSTEM, format!("{prompt}\n{FORMAT}\n{REMINDER}"));
        let again = self.backend.complete(&retry)?;
        match parse_reply(&again) {
            Some(p) => Ok((quantize_control(p.heater, p.fan)?, p.rationale)),
            None => Err(ControlError::Parse(again)),
        }
    }

    /// Candidate controls spread around a first proposal, plus the proposal
    /// with the fan flipped.
    fn candidates(&self, proposal: ControlInput) -> Vec<ControlInput> {
        let mut out = vec![proposal];
        let flipped = ControlInput::from_level(proposal.heater_level(), !proposal.fan_on());
        let top = i32::from(HEATER_LEVELS - 1);
        let base = i32::from(proposal.heater_level());
        let mut offset = 1;
        while out.len() < self.cfg.candidate_count.saturating_sub(1) && offset <= top {
            for level in [base - 2 * offset, base + 2 * offset] {
                if (0..=top).contains(&level) && out.len() < self.cfg.candidate_count - 1 {
                    out.push(ControlInput::from_level(level as u8, proposal.fan_on()));
                }
            }
            offset += 1;
        }
        out.push(flipped);
        out.dedup();
        out
    }

    /// Predicted temperatures with `u` held for `sim_steps` steps.
    fn simulate(&self, history: &[Sample], u: ControlInput) -> Result<Vec<f64>, ControlError> {
        let model = self.assist.as_ref().expect("checked at construction");
        let ambient = history.last().map_or(0.0, |s| s.state.t_ambient);
        let plan = vec![
            RolloutInput {
                control: u,
                ambient
            };
            self.cfg.sim_steps
        ];
        Ok(model
            .rollout(history, &plan)?
            .iter()
            .map(|s| s.t_inside)
            .collect())
    }
}

impl Controller for LlmController {
    fn name(&self) -> String {
        let base = match self.cfg.variant {
            LlmVariant::Simple => "LLM",
            LlmVariant::History => "LLM-History",
            LlmVariant::PredictionAssisted => "LLM-Predict",
        };
        if self.cfg.penalty_prompt {
            format!("{base}-P")
        } else {
            base.to_string()
        }
    }

    fn lookback(&self) -> usize {
        self.assist.as_ref().map_or(1, |m| m.lookback().max(1))
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<Decision, ControlError> {
        let now = obs.measured;
        if let Some((s, u)) = self.pending.take() {
            self.store.push(HistoryRecord {
                t_inside: s.t_inside,
                t_ambient: s.t_ambient,
                control: u,
                t_next: now.t_inside,
            });
        }
        let prompt = base_prompt(
            obs.reference,
            now.t_inside,
            now.t_ambient,
            self.cfg.penalty_prompt,
        );
        let (control, rationale) = match self.cfg.variant {
            LlmVariant::Simple => self.ask(prompt)?,
            LlmVariant::History => {
                let mut p = prompt;
                let past = self
                    .store
                    .nearest(now, obs.reference, self.cfg.history_neighbors);
                if !past.is_empty() {
                    p.push_str("\nRecords of similar past situations:");
                    for r in past {
                        p.push_str(&format!(
                            "\nPast: temperature {:.2}, ambient {:.2}, heater={:.2} fan={} -> next {:.2}",
                            r.t_inside,
                            r.t_ambient,
                            r.control.heater_duty(),
                            u8::from(r.control.fan_on()),
                            r.t_next
                        ));
                    }
                }
                self.ask(p)?
            }
            LlmVariant::PredictionAssisted => {
                let (proposal, _) = self.ask(prompt.clone())?;
                let mut p = prompt;
                p.push_str(&format!(
                    "\nSimulated temperatures over the next {} steps for each candidate held constant:",
                    self.cfg.sim_steps
                ));
                for (i, u) in self.candidates(proposal).into_iter().enumerate() {
                    let predicted = match self.simulate(obs.history, u) {
                        Ok(path) => path
                            .iter()
                            .map(|t| format!("{t:.2}"))
                            .collect::<Vec<_>>()
                            .join(" "),
                        Err(ControlError::Model(ModelError::RolloutStep { step, .. })) => {
                            format!("out of the physical range after {} steps", step + 1)
                        }
                        Err(e) => return Err(e),
                    };
                    p.push_str(&format!(
                        "\nCandidate {}: heater={:.2} fan={} -> predicted {predicted}",
                        i + 1,
                        u.heater_duty(),
                        u8::from(u.fan_on()),
                    ));
                }
                p.push_str(
                    "\nPick the candidate whose predicted temperatures stay closest to the target.",
                );
                self.ask(p)?
            }
        };
        self.pending = Some((now, control));
        Ok(Decision {
            control,
            score: None,
            rationale,
        })
    }

    fn reset(&mut self) {
        self.pending = None;
    }
}
