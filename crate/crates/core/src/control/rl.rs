use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{ModelError, Predictor};
use crate::nnet::{Adam, AdamConfig, Checkpoint, DenseNet, Mode, Network};
use crate::plant::{mix_seed, Plant, PlantConfig, PlantError};
use crate::types::{ControlInput, CoreError, Sample, ThermalState, HEATER_LEVELS, T_MAX, T_MIN};

use super::{ControlError, Controller, Decision, Observation};

/// Size of the discrete action grid: every heater level with the fan off, then on.
pub const ACTIONS: usize = 2 * HEATER_LEVELS as usize;

const FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    /// Weight of the squared tracking error.
    pub l2: f64,
    /// Weight of the absolute tracking error.
    pub l1: f64,
    pub l0f: f64,
    pub l0h: f64,
}

impl RewardWeights {
    /// Offline training with actuation penalty.
    pub fn off_p() -> Self {
        Self {
            l2: 0.5,
            l1: 1.0,
            l0f: 0.5,
            l0h: 0.1,
        }
    }

    /// Offline training without actuation penalty.
    pub fn off() -> Self {
        Self {
            l0f: 0.0,
            l0h: 0.0,
            ..Self::off_p()
        }
    }
}

pub fn reward(w: &RewardWeights, x: f64, x_ref: f64, u: ControlInput) -> f64 {
    let e = x - x_ref;
    -w.l2 * e * e - w.l1 * e.abs() - w.l0f * u.fan() - w.l0h * u.heater_duty()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub weights: RewardWeights,
    pub gamma: f64,
    /// Training budget in environment steps.
    pub offline_steps: usize,
    /// Steps of further training on the deployment environment.
    pub online_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the budget over which epsilon decays linearly.
    pub epsilon_fraction: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Environment steps collected before the first update.
    pub warmup: usize,
    pub target_sync: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub episode_steps: usize,
    /// Interval the episode reference is drawn from, °C.
    pub reference_range: (f64, f64),
    /// Steps between reference changes inside an episode.
    pub reference_hold: usize,
    /// Interval the initial inside temperature is drawn from, °C.
    pub initial_range: (f64, f64),
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Evaluations without improvement before training stops.
    pub eval_patience: usize,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::off_p(),
            gamma: 0.99,
            offline_steps: 100_000,
            online_steps: 0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.3,
            replay_capacity: 50_000,
            batch_size: 64,
            warmup: 1_000,
            target_sync: 1_000,
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            episode_steps: 240,
            reference_range: (24.0, 34.0),
            reference_hold: 60,
            initial_range: (23.0, 33.0),
            eval_every: 5_000,
            eval_episodes: 2,
            eval_patience: 5,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let w = &self.weights;
        if [w.l2, w.l1, w.l0f, w.l0h]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(ControlError::Config(
                "rl.weights must be finite and >= 0".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ControlError::Config("rl.gamma must be in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(ControlError::Config(
                "rl.replay_capacity must be >= rl.batch_size >= 1".into(),
            ));
        }
        if self.episode_steps == 0
            || self.reference_hold == 0
            || self.target_sync == 0
            || self.eval_every == 0
        {
            return Err(ControlError::Config(
                "rl.episode_steps, rl.reference_hold, rl.target_sync and rl.eval_every must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
            || !(0.0..=1.0).contains(&self.epsilon_fraction)
        {
            return Err(ControlError::Config(
                "rl.epsilon_* must lie in [0, 1]".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("rl.reference_range", self.reference_range),
            ("rl.initial_range", self.initial_range),
        ] {
            if !(lo <= hi) {
                return Err(ControlError::Config(format!(
                    "{name} must be (low, high) with low <= high"
                )));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(ControlError::Config("rl.learning_rate must be > 0".into()));
        }
        Ok(())
    }

    fn epsilon(&self, step: usize, total: usize) -> f64 {
        let span = (self.epsilon_fraction * total as f64).max(1.0);
        let f = (step as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

/// Network input for a sensor reading and reference.
pub fn features(measured: ThermalState, t_ref: f64) -> [f64; FEATURES] {
    [
        (measured.t_inside - t_ref) / 5.0,
        (measured.t_inside - measured.t_ambient) / 10.0,
        (t_ref - measured.t_ambient) / 10.0,
    ]
}

/// Index of the largest entry; the first one on ties.
pub fn greedy(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Something a DQN agent can act on. `step` returns `None` once the
/// episode can no longer continue (the state left the sanity band).
pub trait Environment {
    fn reset(
        &mut self,
        rng: &mut ChaCha8Rng,
        initial_range: (f64, f64),
    ) -> Result<ThermalState, ControlError>;

    fn step(&mut self, u: ControlInput) -> Result<Option<ThermalState>, ControlError>;
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn left_band(e: &CoreError) -> bool {
    matches!(e, CoreError::OutOfBand(_))
}

/// A predictive model standing in for the enclosure.
pub struct TwinEnv {
    model: Box<dyn Predictor>,
    ambient: f64,
    history: Vec<Sample>,
}

impl TwinEnv {
    pub fn new(model: Box<dyn Predictor>, ambient: f64) -> Self {
        Self {
            model,
            ambient,
            history: Vec::new(),
        }
    }
}

impl Environment for TwinEnv {
    fn reset(
        &mut self,
        rng: &mut ChaCha8Rng,
        initial_range: (f64, f64),
    ) -> Result<ThermalState, ControlError> {
        let s = ThermalState::new(draw(rng, initial_range), self.ambient)?;
        self.history = vec![
            Sample {
                state: s,
                control: ControlInput::OFF,
            };
            self.model.lookback().max(1)
        ];
        Ok(s)
    }

    fn step(&mut self, u: ControlInput) -> Result<Option<ThermalState>, ControlError> {
        let next = match self.model.predict_step(&self.history, u) {
            Ok(s) => s,
            Err(ModelError::Core(e)) if left_band(&e) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let next = ThermalState::new(next.t_inside, self.ambient)?;
        if let Some(last) = self.history.last_mut() {
            last.control = u;
        }
        self.history.remove(0);
        self.history.push(Sample {
            state: next,
            control: ControlInput::OFF,
        });
        Ok(Some(next))
    }
}

/// The simulated enclosure itself, reseeded every episode.
pub struct PlantEnv {
    cfg: PlantConfig,
    plant: Option<Plant>,
    episodes: u64,
}

impl PlantEnv {
    pub fn new(cfg: PlantConfig) -> Self {
        Self {
            cfg,
            plant: None,
            episodes: 0,
        }
    }
}

impl Environment for PlantEnv {
    fn reset(
        &mut self,
        rng: &mut ChaCha8Rng,
        initial_range: (f64, f64),
    ) -> Result<ThermalState, ControlError> {
        let mut cfg = self.cfg;
        cfg.rng_seed = mix_seed(self.cfg.rng_seed, self.episodes);
        self.episodes += 1;
        let mut plant = Plant::new(cfg, draw(rng, initial_range))?;
        let s = plant.sense();
        self.plant = Some(plant);
        Ok(s)
    }

    fn step(&mut self, u: ControlInput) -> Result<Option<ThermalState>, ControlError> {
        let plant = self
            .plant
            .as_mut()
            .ok_or_else(|| ControlError::Config("environment stepped before reset".into()))?;
        match plant.step(u) {
            Ok(_) => Ok(Some(plant.sense())),
            Err(PlantError::Core(e)) | Err(PlantError::AtStep { source: e, .. })
                if left_band(&e) =>
            {
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// The heater duty sets the next temperature directly:
/// `T' = low + duty * (high - low)`. The fan does nothing.
pub struct TrivialEnv {
    pub low: f64,
    pub high: f64,
}

impl TrivialEnv {
    pub fn outcome(&self, u: ControlInput) -> f64 {
        self.low + u.heater_duty() * (self.high - self.low)
    }
}

impl Environment for TrivialEnv {
    fn reset(
        &mut self,
        rng: &mut ChaCha8Rng,
        initial_range: (f64, f64),
    ) -> Result<ThermalState, ControlError> {
        Ok(ThermalState::new(draw(rng, initial_range), self.low)?)
    }

    fn step(&mut self, u: ControlInput) -> Result<Option<ThermalState>, ControlError> {
        Ok(Some(ThermalState::new(self.outcome(u), self.low)?))
    }
}

/// Greedy policy over a Q-network.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    net: DenseNet,
    label: String,
}

impl DqnAgent {
    pub const KIND: &'static str = "dqn";

    pub fn from_network(net: DenseNet, label: &str) -> Result<Self, ControlError> {
        if net.input_width() != FEATURES || net.output_width() != ACTIONS {
            return Err(ControlError::Config(format!(
                "Q-network must map {FEATURES} features to {ACTIONS} actions"
            )));
        }
        Ok(Self {
            net,
            label: label.into(),
        })
    }

    pub fn network(&self) -> &DenseNet {
        &self.net
    }

    pub fn q_values(&self, measured: ThermalState, t_ref: f64) -> Vec<f64> {
        self.net.predict_row(&features(measured, t_ref))
    }

    pub fn act(&self, measured: ThermalState, t_ref: f64) -> ControlInput {
        ControlInput::from_action_index(greedy(&self.q_values(measured, t_ref)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        ck.set_meta("label", self.label.as_str());
        self.net.write_checkpoint(&mut ck, "q");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ControlError> {
        ck.expect_kind(Self::KIND)?;
        let label = ck
            .meta
            .get("label")
            .and_then(|v| v.as_str())
            .unwrap_or("RL")
            .to_string();
        Self::from_network(DenseNet::read_checkpoint(ck, "q")?, &label)
    }
}

impl Controller for DqnAgent {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<Decision, ControlError> {
        let q = self.q_values(obs.measured, obs.reference);
        let a = greedy(&q);
        Ok(Decision {
            control: ControlInput::from_action_index(a),
            score: Some(q[a]),
            rationale: String::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnReport {
    pub steps_run: usize,
    pub episode_returns: Vec<f64>,
    /// `(step, mean greedy return)` at each evaluation.
    pub eval_returns: Vec<(usize, f64)>,
    pub best_eval: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    s: [f64; FEATURES],
    a: usize,
    r: f64,
    s2: [f64; FEATURES],
    done: bool,
}

struct Episodes {
    step_in_episode: usize,
    reference: f64,
    state: ThermalState,
    ret: f64,
}

/// Deep Q-learning against `env`: epsilon-greedy collection into a replay
/// buffer, Huber loss on the taken action, and a target network refreshed
/// every `target_sync` steps. Greedy evaluations at a fixed seed decide the
/// returned weights and stop training once they plateau.
pub fn train_dqn(
    cfg: &RlConfig,
    env: &mut dyn Environment,
    label: &str,
) -> Result<(DqnAgent, DqnReport), ControlError> {
    cfg.validate()?;
    let mut sizes = vec![FEATURES];
    sizes.extend(&cfg.hidden);
    sizes.push(ACTIONS);
    let mut net = DenseNet::new(&sizes, 0.0, cfg.seed);
    let mut target = net.clone();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        net.parameter_count(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut replay: Vec<Transition> = Vec::with_capacity(cfg.replay_capacity.min(1 << 16));
    let mut replay_next = 0usize;

    let total = cfg.offline_steps;
    let mut report = DqnReport {
        steps_run: 0,
        episode_returns: Vec::new(),
        eval_returns: Vec::new(),
        best_eval: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best_params = net.params().to_vec();
    let mut since_best = 0usize;

    let mut ep = start_episode(env, &mut rng, cfg)?;
    for step in 0..total {
        if ep.step_in_episode > 0 && ep.step_in_episode % cfg.reference_hold == 0 {
            ep.reference = draw(&mut rng, cfg.reference_range);
        }
        let s = features(ep.state, ep.reference);
        let a = if rng.gen::<f64>() < cfg.epsilon(step, total) {
            rng.gen_range(0..ACTIONS)
        } else {
            greedy(&net.predict_row(&s))
        };
        let u = ControlInput::from_action_index(a);
        let next = env.step(u)?;
        let (r, s2, done) = match next {
            Some(n) => (
                reward(&cfg.weights, n.t_inside, ep.reference, u),
                features(n, ep.reference),
                false,
            ),
            None => {
                let edge = if ep.state.t_inside > ep.reference {
                    T_MAX
                } else {
                    T_MIN
                };
                (reward(&cfg.weights, edge, ep.reference, u), s, true)
            }
        };
        let tr = Transition { s, a, r, s2, done };
        if replay.len() < cfg.replay_capacity {
            replay.push(tr);
        } else {
            replay[replay_next] = tr;
        }
        replay_next = (replay_next + 1) % cfg.replay_capacity;
        ep.ret += r;
        ep.step_in_episode += 1;
        if let Some(n) = next {
            ep.state = n;
        }
        if done || ep.step_in_episode >= cfg.episode_steps {
            report.episode_returns.push(ep.ret);
            ep = start_episode(env, &mut rng, cfg)?;
        }

        if replay.len() >= cfg.batch_size.max(cfg.warmup) {
            update(cfg, &mut net, &target, &mut adam, &replay, &mut rng, step)?;
        }
        if (step + 1) % cfg.target_sync == 0 {
            target.params_mut().copy_from_slice(net.params());
        }
        report.steps_run = step + 1;
        if (step + 1) % cfg.eval_every == 0 && step + 1 > cfg.warmup {
            let agent = DqnAgent::from_network(net.clone(), label)?;
            let score = evaluate_policy(&agent, env, cfg)?;
            report.eval_returns.push((step + 1, score));
            if score > report.best_eval {
                report.best_eval = score;
                best_params.copy_from_slice(net.params());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.eval_patience {
                    report.stopped_early = true;
                    break;
                }
            }
            // evaluation consumed the environment; start a fresh training episode
            ep = start_episode(env, &mut rng, cfg)?;
        }
    }
    if report.eval_returns.is_empty() {
        best_params.copy_from_slice(net.params());
    }
    net.params_mut().copy_from_slice(&best_params);
    Ok((DqnAgent::from_network(net, label)?, report))
}

fn start_episode(
    env: &mut dyn Environment,
    rng: &mut ChaCha8Rng,
    cfg: &RlConfig,
) -> Result<Episodes, ControlError> {
    let state = env.reset(rng, cfg.initial_range)?;
    Ok(Episodes {
        step_in_episode: 0,
        reference: draw(rng, cfg.reference_range),
        state,
        ret: 0.0,
    })
}

/// Mean greedy return over `cfg.eval_episodes` episodes drawn from a fixed seed.
pub fn evaluate_policy(
    agent: &DqnAgent,
    env: &mut dyn Environment,
    cfg: &RlConfig,
) -> Result<f64, ControlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let mut total = 0.0;
    let episodes = cfg.eval_episodes.max(1);
    for _ in 0..episodes {
        let mut ep = start_episode(env, &mut rng, cfg)?;
        for k in 0..cfg.episode_steps {
            if k > 0 && k % cfg.reference_hold == 0 {
                ep.reference = draw(&mut rng, cfg.reference_range);
            }
            let u = agent.act(ep.state, ep.reference);
            match env.step(u)? {
                Some(n) => {
                    ep.ret += reward(&cfg.weights, n.t_inside, ep.reference, u);
                    ep.state = n;
                }
                None => {
                    ep.ret += reward(&cfg.weights, T_MAX, ep.reference, u)
                        * (cfg.episode_steps - k) as f64;
                    break;
                }
            }
        }
        total += ep.ret;
    }
    Ok(total / episodes as f64)
}

fn update(
    cfg: &RlConfig,
    net: &mut DenseNet,
    target: &DenseNet,
    adam: &mut Adam,
    replay: &[Transition],
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(), ControlError> {
    let b = cfg.batch_size;
    let batch: Vec<&Transition> = (0..b)
        .map(|_| &replay[rng.gen_range(0..replay.len())])
        .collect();
    let x = Array2::from_shape_fn((b, FEATURES), |(i, j)| batch[i].s[j]);
    let x2 = Array2::from_shape_fn((b, FEATURES), |(i, j)| batch[i].s2[j]);
    let next_q = target.forward(x2.view(), Mode::Eval).0;
    let (q, cache) = net.forward(x.view(), Mode::Train(rng));
    let max_abs = q
        .iter()
        .chain(next_q.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max_abs <= cfg.divergence_limit) {
        return Err(ControlError::Diverged {
            step,
            max_abs_q: max_abs,
        });
    }
    let mut grad = Array2::<f64>::zeros((b, ACTIONS));
    for (i, t) in batch.iter().enumerate() {
        let bootstrap = if t.done {
            0.0
        } else {
            cfg.gamma * row_max(next_q.view(), i)
        };
        let err = q[[i, t.a]] - (t.r + bootstrap);
        grad[[i, t.a]] = err.clamp(-1.0, 1.0) / b as f64;
    }
    let g = net.backward(&cache, grad.view());
    adam.step(net.params_mut(), &g);
    Ok(())
}

fn row_max(q: ArrayView2<f64>, i: usize) -> f64 {
    q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
