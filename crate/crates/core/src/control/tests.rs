use std::io::{Read, Write as _};
use std::net::TcpListener;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::llm::base_prompt;
use super::mpc::{minimize_box, Bounds};
use super::rl::{features, greedy};
use super::*;
use crate::models::{ArxFrame, ArxModel, PbmModel, Predictor, RolloutInput};
use crate::nnet::{DenseNet, Network};
use crate::plant::{AmbientProfile, PlantConfig};
use crate::types::{quantize_control, PlantParams};

fn toy_arx() -> ArxModel {
    ArxModel::from_coefficients(vec![0.7, 0.1], vec![2.0, 0.5], vec![-1.5, -0.3])
        .unwrap()
        .with_frame(ArxFrame::AmbientDeviation)
}

fn history_at(temps: &[f64], ambient: f64, controls: &[ControlInput]) -> Vec<Sample> {
    temps
        .iter()
        .enumerate()
        .map(|(i, t)| Sample {
            state: ThermalState::new(*t, ambient).unwrap(),
            control: controls.get(i).copied().unwrap_or(ControlInput::OFF),
        })
        .collect()
}

fn quiet_plant(initial: f64, ambient: f64) -> Plant {
    let mut cfg = PlantConfig::ideal(PlantParams::default());
    cfg.ambient = AmbientProfile::Constant(ambient);
    Plant::new(cfg, initial).unwrap()
}

#[test]
fn stage_cost_matches_hand_arithmetic() {
    let cfg = MpcConfig::penalty();
    let c = cfg.stage_cost(30.0, 28.0, 1.0, 1.0);
    let by_hand = 10.0 * 2.0f64.powi(2) + 1.0 * 1.0 + 1.0 * 1.0;
    assert_eq!(by_hand, 42.0);
    assert!((c - by_hand).abs() < 1e-12);
}

#[test]
fn presets_carry_the_weight_triples() {
    let a = MpcConfig::no_penalty();
    let b = MpcConfig::penalty();
    assert_eq!((a.w_t, a.w_uf, a.w_uh), (10.0, 0.0, 0.0));
    assert_eq!((b.w_t, b.w_uf, b.w_uh), (10.0, 1.0, 1.0));
    assert_eq!(a.horizon, 10);
    assert_eq!(a.rounding, Rounding::Nearest);
}

#[test]
fn invalid_mpc_config_is_rejected() {
    let mut c = MpcConfig::no_penalty();
    c.horizon = 0;
    assert!(matches!(c.validate(), Err(ControlError::Config(_))));
    let mut c = MpcConfig::no_penalty();
    c.w_uh = -1.0;
    let msg = c.validate().unwrap_err().to_string();
    assert!(msg.contains("mpc.w_uh"), "{msg}");
}

#[test]
fn mpc_at_equilibrium_without_effort_weights_stays_off() {
    let model = toy_arx();
    let mut mpc = MpcController::new(MpcConfig::no_penalty(), model).unwrap();
    let h = history_at(&[25.0, 25.0], 25.0, &[]);
    let sol = mpc.plan(&h, 25.0).unwrap();
    assert_eq!(sol.control, ControlInput::OFF);
    assert!(sol.cost.abs() < 1e-12);
}

#[test]
fn mpc_rejects_short_history() {
    let mut mpc = MpcController::new(MpcConfig::no_penalty(), toy_arx()).unwrap();
    let h = history_at(&[25.0], 25.0, &[]);
    assert!(matches!(
        mpc.plan(&h, 26.0),
        Err(ControlError::ShortHistory { got: 1, need: 2 })
    ));
}

/// Horizon-one cost of `u`, evaluated through the model's own one-step predictor.
fn one_step_cost(
    cfg: &MpcConfig,
    model: &ArxModel,
    h: &[Sample],
    t_ref: f64,
    u: ControlInput,
) -> f64 {
    let next = model.predict_step(h, u).unwrap();
    let x = model.frame.state(next);
    let x_ref = model
        .frame
        .state(ThermalState::new(t_ref, next.t_ambient).unwrap());
    cfg.stage_cost(x_ref, x, u.heater_duty(), u.fan())
}

#[test]
fn horizon_one_matches_exhaustive_enumeration() {
    let model = toy_arx();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for weights in [MpcConfig::no_penalty(), MpcConfig::penalty()] {
        let cfg = MpcConfig {
            horizon: 1,
            rounding: Rounding::BestNeighbor,
            ..weights
        };
        for _ in 0..50 {
            let amb = rng.gen_range(15.0..25.0);
            let temps = [
                amb + rng.gen_range(-2.0..8.0),
                amb + rng.gen_range(-2.0..8.0),
            ];
            let prev = ControlInput::from_action_index(rng.gen_range(0..ACTIONS));
            let h = history_at(&temps, amb, &[prev]);
            let t_ref = amb + rng.gen_range(0.0..10.0);
            let mut mpc = MpcController::new(cfg, model.clone()).unwrap();
            let chosen = mpc.plan(&h, t_ref).unwrap();
            let (best_u, best_cost) = ControlInput::all()
                .map(|u| (u, one_step_cost(&cfg, &model, &h, t_ref, u)))
                .fold((ControlInput::OFF, f64::INFINITY), |acc, c| {
                    if c.1 < acc.1 {
                        c
                    } else {
                        acc
                    }
                });
            let chosen_cost = one_step_cost(&cfg, &model, &h, t_ref, chosen.control);
            assert!(
                (chosen_cost - best_cost).abs() <= 1e-9 * (1.0 + best_cost),
                "chose {:?} ({chosen_cost}) but {best_u:?} costs {best_cost}",
                chosen.control
            );
            assert!((chosen.cost - chosen_cost).abs() <= 1e-9 * (1.0 + chosen_cost));
        }
    }
}

#[test]
fn projected_bfgs_finds_box_constrained_quadratic_minimum() {
    // f = (x0 - 2)^2 + 10 (x1 - 0.3)^2 + (x0 - x1)^2 on [0,1]^2
    let f = |x: &[f64]| (x[0] - 2.0).powi(2) + 10.0 * (x[1] - 0.3).powi(2) + (x[0] - x[1]).powi(2);
    let g = |x: &[f64]| {
        vec![
            2.0 * (x[0] - 2.0) + 2.0 * (x[0] - x[1]),
            20.0 * (x[1] - 0.3) - 2.0 * (x[0] - x[1]),
        ]
    };
    let m = minimize_box(&f, &g, &[0.5, 0.5], &Bounds::unit(2), 200, 1e-10);
    assert!(m.converged);
    // x0 sits on its upper bound; x1 solves 22 x1 = 6 + 2
    assert!((m.x[0] - 1.0).abs() < 1e-12);
    assert!((m.x[1] - 8.0 / 22.0).abs() < 1e-8, "{:?}", m.x);
}

#[test]
fn projected_bfgs_respects_fixed_coordinates() {
    let f = |x: &[f64]| x.iter().map(|v| (v - 0.25).powi(2)).sum::<f64>();
    let g = |x: &[f64]| x.iter().map(|v| 2.0 * (v - 0.25)).collect::<Vec<_>>();
    let mut b = Bounds::unit(3);
    b.fix(1, 1.0);
    let m = minimize_box(&f, &g, &[0.0, 0.0, 0.0], &b, 100, 1e-10);
    assert_eq!(m.x[1], 1.0);
    assert!((m.x[0] - 0.25).abs() < 1e-8 && (m.x[2] - 0.25).abs() < 1e-8);
}

#[test]
fn penalty_never_raises_horizon_effort_on_the_same_state() {
    let model = toy_arx();
    let h = history_at(&[20.0, 20.5], 18.0, &[]);
    let a = MpcController::new(MpcConfig::no_penalty(), model.clone())
        .unwrap()
        .plan(&h, 27.0)
        .unwrap();
    let b = MpcController::new(MpcConfig::penalty(), model)
        .unwrap()
        .plan(&h, 27.0)
        .unwrap();
    let effort = |z: &[f64]| z.iter().sum::<f64>();
    assert!(effort(&b.relaxed) <= effort(&a.relaxed) + 1e-9);
}

#[test]
fn reward_matches_hand_arithmetic() {
    let u = quantize_control(0.5, 1.0).unwrap();
    let r = reward(&RewardWeights::off_p(), 30.0, 28.0, u);
    let by_hand = -0.5 * 4.0 - 1.0 * 2.0 - 0.5 * 1.0 - 0.1 * 0.5;
    assert!((by_hand - -4.55f64).abs() < 1e-12);
    assert!((r - by_hand).abs() < 1e-12);
    assert_eq!(
        reward(&RewardWeights::off_p(), 28.0, 28.0, ControlInput::OFF),
        0.0
    );
}

proptest! {
    #[test]
    fn reward_peaks_at_reference_with_everything_off(
        l2 in 0.0..5.0f64, l1 in 0.0..5.0f64, l0f in 0.0..5.0f64, l0h in 0.0..5.0f64, x_ref in 15.0..40.0f64,
    ) {
        let w = RewardWeights { l2, l1, l0f, l0h };
        let top = reward(&w, x_ref, x_ref, ControlInput::OFF);
        prop_assert_eq!(top, 0.0);
        for k in -20..=20 {
            let x = x_ref + 0.25 * f64::from(k);
            for u in ControlInput::all() {
                prop_assert!(reward(&w, x, x_ref, u) <= top);
            }
        }
    }

    #[test]
    fn greedy_ignores_a_constant_shift(q in prop::collection::vec(-100.0..100.0f64, ACTIONS), c in -1e3..1e3f64) {
        let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
        // a shift can merge nearly tied entries in floating point; skip those draws
        let mut sorted = q.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-9 * (1.0 + c.abs()));
        prop_assert_eq!(greedy(&q), greedy(&shifted));
    }
}

#[test]
fn greedy_breaks_ties_towards_the_lowest_index() {
    let mut q = vec![0.0; ACTIONS];
    q[7] = 3.0;
    q[30] = 3.0;
    assert_eq!(greedy(&q), 7);
}

fn planted_agent(winner: usize) -> DqnAgent {
    let mut net = DenseNet::new(&[3, ACTIONS], 0.0, 0);
    let p = net.params_mut();
    for v in p.iter_mut() {
        *v = 0.0;
    }
    // bias of the single layer sits after the weights
    let n = p.len();
    p[n - ACTIONS + winner] = 1.0;
    DqnAgent::from_network(net, "planted").unwrap()
}

#[test]
fn planted_q_maximum_is_the_action_taken() {
    let agent = planted_agent(29);
    let s = ThermalState::new(24.0, 20.0).unwrap();
    assert_eq!(agent.act(s, 28.0), ControlInput::from_action_index(29));
    assert_eq!(agent.act(s, 28.0).action_index(), 29);
    let q = agent.q_values(s, 28.0);
    assert_eq!(greedy(&q), 29);
}

#[test]
fn dqn_checkpoint_round_trips() {
    let agent = planted_agent(5);
    let back = DqnAgent::from_checkpoint(
        &crate::nnet::Checkpoint::from_json(&agent.checkpoint().to_json()).unwrap(),
    )
    .unwrap();
    let s = ThermalState::new(31.0, 22.0).unwrap();
    assert_eq!(agent.q_values(s, 27.0), back.q_values(s, 27.0));
    assert_eq!(back.name(), "planted");
}

#[test]
fn rl_config_rejects_bad_discount() {
    let c = RlConfig {
        gamma: 0.0,
        ..RlConfig::default()
    };
    assert!(c.validate().unwrap_err().to_string().contains("rl.gamma"));
    let c = RlConfig {
        weights: RewardWeights {
            l1: -1.0,
            ..RewardWeights::off()
        },
        ..RlConfig::default()
    };
    assert!(c.validate().is_err());
}

fn trivial_cfg(steps: usize, seed: u64) -> RlConfig {
    RlConfig {
        gamma: 0.9,
        offline_steps: steps,
        warmup: 500,
        target_sync: 250,
        episode_steps: 50,
        reference_hold: 10,
        reference_range: (26.0, 32.0),
        initial_range: (26.0, 32.0),
        eval_every: 2_000,
        eval_episodes: 4,
        eval_patience: 100,
        seed,
        ..RlConfig::default()
    }
}

#[test]
fn dqn_solves_the_trivial_environment() {
    let cfg = trivial_cfg(100_000, 3);
    let mut env = TrivialEnv {
        low: 20.0,
        high: 40.0,
    };
    let (agent, report) = train_dqn(&cfg, &mut env, "trivial").unwrap();
    assert!(!report.episode_returns.is_empty());
    let mut achieved = 0.0;
    let mut optimum = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..=60 {
        let t_ref = 26.0 + 0.1 * f64::from(k);
        let now = ThermalState::new(rng.gen_range(26.0..32.0), env.low).unwrap();
        let u = agent.act(now, t_ref);
        achieved += reward(&cfg.weights, env.outcome(u), t_ref, u);
        optimum += ControlInput::all()
            .map(|v| reward(&cfg.weights, env.outcome(v), t_ref, v))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let gap = (optimum - achieved) / optimum.abs();
    assert!(
        gap <= 0.05,
        "greedy reward {achieved:.3} vs optimum {optimum:.3} (gap {gap:.3})"
    );
}

#[test]
fn dqn_training_is_seed_deterministic() {
    let cfg = trivial_cfg(3_000, 8);
    let run = || {
        let mut env = TrivialEnv {
            low: 20.0,
            high: 40.0,
        };
        train_dqn(&cfg, &mut env, "t").unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a.network().params(), b.network().params());
    let s = ThermalState::new(27.3, 20.0).unwrap();
    assert_eq!(a.act(s, 29.0), a.act(s, 29.0));
}

#[test]
fn divergent_q_values_abort_training() {
    let cfg = RlConfig {
        divergence_limit: 1e-3,
        ..trivial_cfg(2_000, 1)
    };
    let mut env = TrivialEnv {
        low: 20.0,
        high: 40.0,
    };
    assert!(matches!(
        train_dqn(&cfg, &mut env, "t"),
        Err(ControlError::Diverged { .. })
    ));
}

#[test]
fn twin_environment_follows_its_model() {
    let pbm = PbmModel::new(PlantParams::default());
    let mut env = TwinEnv::new(Box::new(pbm), 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s0 = env.reset(&mut rng, (25.0, 25.0)).unwrap();
    assert_eq!(s0.t_inside, 25.0);
    let u = ControlInput::from_level(10, false);
    let next = env.step(u).unwrap().unwrap();
    let direct = pbm
        .predict_step(
            &[Sample {
                state: s0,
                control: u,
            }],
            u,
        )
        .unwrap();
    assert_eq!(next.t_inside, direct.t_inside);
}

#[test]
fn features_are_centred_on_the_reference() {
    let f = features(ThermalState::new(28.0, 20.0).unwrap(), 28.0);
    assert_eq!(f[0], 0.0);
    assert!((f[1] - 0.8).abs() < 1e-12 && (f[2] - 0.8).abs() < 1e-12);
}

#[test]
fn scripted_reply_is_parsed_with_its_rationale() {
    let backend = MockBackend::scripted(["It is a bit cold.\nheater_duty=0.5, fan_on=0"]);
    let mut c = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(backend),
        None,
        None,
    )
    .unwrap();
    let h = history_at(&[25.0], 20.0, &[]);
    let d = c
        .decide(&Observation {
            time: 0.0,
            measured: h[0].state,
            reference: 28.0,
            history: &h,
        })
        .unwrap();
    assert_eq!(d.control, quantize_control(0.5, 0.0).unwrap());
    assert!(d.rationale.contains("a bit cold"));
}

#[test]
fn off_grid_duty_is_quantized() {
    let p = parse_reply("Warming up.\nCONTROLS: heater=0.52 fan=0").unwrap();
    assert_eq!(p.rationale, "Warming up.");
    let u = quantize_control(p.heater, p.fan).unwrap();
    assert_eq!(u.heater_level(), 10);
    assert_eq!(u.heater_duty(), 0.5);
}

#[test]
fn controls_line_wins_over_loose_assignments() {
    let p =
        parse_reply("Earlier I said heater=0.9 fan=1.\n**CONTROLS: heater=0.15 fan=0**").unwrap();
    assert_eq!((p.heater, p.fan), (0.15, 0.0));
    assert!(parse_reply("no numbers here").is_none());
    assert!(parse_reply("heater=0.3 only").is_none());
}

fn one_decision(c: &mut LlmController) -> Result<Decision, ControlError> {
    let h = history_at(&[25.0], 20.0, &[]);
    c.decide(&Observation {
        time: 0.0,
        measured: h[0].state,
        reference: 28.0,
        history: &h,
    })
}

#[test]
fn unreadable_reply_is_retried_once() {
    let backend = MockBackend::scripted(["I would warm it up.", "CONTROLS: heater=0.35 fan=1"]);
    let mut c = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(backend),
        None,
        None,
    )
    .unwrap();
    let d = one_decision(&mut c).unwrap();
    assert_eq!(d.control, ControlInput::from_level(7, true));

    let backend = MockBackend::scripted([
        "I would warm it up.",
        "Still warming.",
        "CONTROLS: heater=1 fan=0",
    ]);
    let mut c = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(backend),
        None,
        None,
    )
    .unwrap();
    match one_decision(&mut c) {
        Err(ControlError::Parse(text)) => assert_eq!(text, "Still warming."),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn retry_prompt_carries_a_format_reminder() {
    struct Recorder(std::sync::Arc<std::sync::Mutex<Vec<String>>>);
    impl ChatBackend for Recorder {
        fn complete(&mut self, req: &ChatRequest) -> Result<String, ControlError> {
            self.0.lock().unwrap().push(req.last_user().to_string());
            Ok("I am not sure.".into())
        }
    }
    let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let cfg = LlmControllerConfig {
        penalty_prompt: true,
        ..LlmControllerConfig::default()
    };
    let mut c = LlmController::new(cfg, Box::new(Recorder(seen.clone())), None, None).unwrap();
    assert!(matches!(one_decision(&mut c), Err(ControlError::Parse(_))));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].starts_with(&base_prompt(28.0, 25.0, 20.0, true)));
    assert!(seen[0].contains("reduce the actuation") && seen[0].contains("CONTROLS: heater="));
    assert!(!seen[0].contains("could not be read"));
    assert!(seen[1].contains("could not be read"));
    assert!(!base_prompt(28.0, 25.5, 20.0, false).contains("reduce the actuation"));
}

#[test]
fn endpoint_timeout_is_not_a_parse_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        if let Ok((mut sock, _)) = listener.accept() {
            let mut buf = [0u8; 1024];
            let _ = sock.read(&mut buf);
            std::thread::sleep(Duration::from_millis(2500));
            let _ =
                sock.write_all(b"HTTP/1.1 500 Internal Server Error\r\ncontent-length: 0\r\n\r\n");
        }
    });
    let backend = HttpBackend::new(HttpBackendConfig {
        base_url: format!("http://{addr}/v1"),
        token_env: "TWINLAB_TEST_NO_SUCH_TOKEN".into(),
        timeout_s: 1,
    })
    .unwrap();
    let mut c = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(backend),
        None,
        None,
    )
    .unwrap();
    let err = one_decision(&mut c).unwrap_err();
    assert!(matches!(err, ControlError::Timeout(1)), "{err:?}");
    server.join().unwrap();
}

#[test]
fn http_backend_reads_the_first_choice() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (mut sock, _) = listener.accept().unwrap();
        let mut req = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            let n = sock.read(&mut buf).unwrap();
            req.extend_from_slice(&buf[..n]);
            let text = String::from_utf8_lossy(&req);
            if let Some(end) = text.find("\r\n\r\n") {
                let len: usize = text
                    .lines()
                    .find_map(|l| {
                        l.to_ascii_lowercase()
                            .strip_prefix("content-length:")
                            .map(|v| v.trim().parse().unwrap())
                    })
                    .unwrap_or(0);
                if req.len() >= end + 4 + len {
                    break;
                }
            }
        }
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"Hold steady.\nCONTROLS: heater=0.2 fan=0"}}]}"#;
        let resp = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
            body.len()
        );
        sock.write_all(resp.as_bytes()).unwrap();
        String::from_utf8(req).unwrap()
    });
    let backend = HttpBackend::new(HttpBackendConfig {
        base_url: format!("http://{addr}/v1/"),
        token_env: "TWINLAB_TEST_NO_SUCH_TOKEN".into(),
        timeout_s: 5,
    })
    .unwrap();
    let mut c = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(backend),
        None,
        None,
    )
    .unwrap();
    let d = one_decision(&mut c).unwrap();
    assert_eq!(d.control, ControlInput::from_level(4, false));
    assert_eq!(d.rationale, "Hold steady.");
    let raw = server.join().unwrap();
    assert!(raw.starts_with("POST /v1/chat/completions"));
    assert!(raw.contains("\"temperature\":0.0") && raw.contains("\"model\":\"gpt-4o\""));
}

#[test]
fn llm_variants_require_their_assistants() {
    let mk = |variant| LlmControllerConfig {
        variant,
        ..LlmControllerConfig::default()
    };
    assert!(LlmController::new(
        mk(LlmVariant::PredictionAssisted),
        Box::new(MockBackend::heuristic()),
        None,
        None
    )
    .is_err());
    assert!(LlmController::new(
        mk(LlmVariant::History),
        Box::new(MockBackend::heuristic()),
        None,
        None
    )
    .is_err());
    let c = LlmController::new(
        LlmControllerConfig {
            penalty_prompt: true,
            ..mk(LlmVariant::History)
        },
        Box::new(MockBackend::heuristic()),
        None,
        Some(HistoryStore::default()),
    )
    .unwrap();
    assert_eq!(c.name(), "LLM-History-P");
}

#[test]
fn history_store_returns_closest_records_first() {
    let mut s = HistoryStore::default();
    for (t, next) in [(20.0, 21.0), (25.0, 26.0), (25.2, 28.0), (30.0, 29.0)] {
        s.push(HistoryRecord {
            t_inside: t,
            t_ambient: 20.0,
            control: ControlInput::OFF,
            t_next: next,
        });
    }
    let got = s.nearest(ThermalState::new(25.0, 20.0).unwrap(), 28.0, 2);
    assert_eq!(got[0].t_inside, 25.2);
    assert_eq!(got[1].t_inside, 25.0);
}

fn staircase_episode(c: &mut dyn Controller, noise: f64) -> Episode {
    let mut cfg = PlantConfig::ideal(PlantParams::default());
    cfg.sensor_noise_sd = noise;
    cfg.rng_seed = 3;
    cfg.ambient = AmbientProfile::Constant(20.0);
    let mut plant = Plant::new(cfg, 24.0).unwrap();
    let r = ReferenceProfile::Staircase {
        levels: vec![24.0, 27.0, 25.0],
        hold_s: 1800.0,
        ramp_s: 300.0,
    };
    run_closed_loop(c, &mut plant, &r, 90)
}

#[test]
fn prediction_assisted_tracks_no_worse_than_simple() {
    let pbm = PbmModel::new(PlantParams::default());
    let mut simple = LlmController::new(
        LlmControllerConfig::default(),
        Box::new(MockBackend::heuristic()),
        None,
        None,
    )
    .unwrap();
    let mut assisted = LlmController::new(
        LlmControllerConfig {
            variant: LlmVariant::PredictionAssisted,
            ..LlmControllerConfig::default()
        },
        Box::new(MockBackend::heuristic()),
        Some(Box::new(pbm)),
        None,
    )
    .unwrap();
    let a = staircase_episode(&mut simple, 0.0);
    let b = staircase_episode(&mut assisted, 0.0);
    assert!(a.aborted.is_none() && b.aborted.is_none());
    assert!(
        b.mae() <= a.mae(),
        "assisted {} vs simple {}",
        b.mae(),
        a.mae()
    );
    assert!(b.rows.iter().all(|r| !r.rationale.is_empty()));
}

#[test]
fn candidate_leaving_the_physical_range_is_skipped() {
    let mut c = LlmController::new(
        LlmControllerConfig {
            variant: LlmVariant::PredictionAssisted,
            ..LlmControllerConfig::default()
        },
        Box::new(MockBackend::heuristic()),
        Some(Box::new(PbmModel::new(PlantParams::default()))),
        None,
    )
    .unwrap();
    let h = history_at(&[70.0], 20.0, &[]);
    let d = c
        .decide(&Observation {
            time: 0.0,
            measured: h[0].state,
            reference: 75.0,
            history: &h,
        })
        .unwrap();
    assert!(!d.rationale.is_empty());
    let plan = vec![
        RolloutInput {
            control: d.control,
            ambient: 20.0
        };
        LlmControllerConfig::default().sim_steps
    ];
    PbmModel::new(PlantParams::default())
        .rollout(&h, &plan)
        .expect("the chosen candidate stays in range");
}

#[test]
fn history_variant_learns_from_its_own_episode() {
    let mut c = LlmController::new(
        LlmControllerConfig {
            variant: LlmVariant::History,
            ..LlmControllerConfig::default()
        },
        Box::new(MockBackend::heuristic()),
        None,
        Some(HistoryStore::default()),
    )
    .unwrap();
    let ep = staircase_episode(&mut c, 0.1);
    assert!(ep.aborted.is_none());
    assert_eq!(c.store().len(), ep.rows.len() - 1);
}

#[test]
fn idle_controller_at_ambient_has_zero_error() {
    let mut plant = quiet_plant(22.0, 22.0);
    let mut c = ConstantController(ControlInput::OFF);
    let ep = run_closed_loop(
        &mut c,
        &mut plant,
        &ReferenceProfile::Constant { value: 22.0 },
        30,
    );
    assert_eq!(ep.rows.len(), 30);
    assert_eq!(ep.mae(), 0.0);
    assert_eq!(ep.true_mae(), 0.0);
    assert_eq!(ep.actuation(), 0.0);
}

struct FailsAt(usize, usize);

impl Controller for FailsAt {
    fn name(&self) -> String {
        "fails".into()
    }

    fn decide(&mut self, _obs: &Observation<'_>) -> Result<Decision, ControlError> {
        self.1 += 1;
        if self.1 > self.0 {
            return Err(ControlError::Backend("boom".into()));
        }
        Ok(Decision {
            control: ControlInput::from_level(3, false),
            score: None,
            rationale: "ok".into(),
        })
    }
}

#[test]
fn controller_failure_keeps_partial_telemetry() {
    let mut plant = quiet_plant(22.0, 20.0);
    let ep = run_closed_loop(
        &mut FailsAt(5, 0),
        &mut plant,
        &ReferenceProfile::Constant { value: 25.0 },
        20,
    );
    assert_eq!(ep.rows.len(), 5);
    assert!(ep.aborted.as_deref().unwrap().contains("step 5"));
}

#[test]
fn closed_loop_is_deterministic_and_csv_is_well_formed() {
    let run = || {
        let mut c = MpcController::new(MpcConfig::no_penalty(), toy_arx()).unwrap();
        staircase_episode(&mut c, 0.25)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let text = a.to_csv_string();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "t",
            "T_ref",
            "T_meas",
            "heater_duty",
            "fan_on",
            "reward_or_cost",
            "rationale"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), a.rows.len());
    for r in rows {
        let duty: f64 = r[3].parse().unwrap();
        assert!(((duty * 20.0).round() - duty * 20.0).abs() < 1e-9 && (0.0..=1.0).contains(&duty));
        assert!(&r[4] == "0" || &r[4] == "1");
    }
}

#[test]
fn controller_sees_readings_not_the_true_state() {
    struct Spy(Vec<f64>);
    impl Controller for Spy {
        fn name(&self) -> String {
            "spy".into()
        }
        fn decide(&mut self, obs: &Observation<'_>) -> Result<Decision, ControlError> {
            self.0.push(obs.measured.t_inside);
            Ok(Decision {
                control: ControlInput::OFF,
                score: None,
                rationale: String::new(),
            })
        }
    }
    let mut spy = Spy(Vec::new());
    let ep = staircase_episode(&mut spy, 0.5);
    assert_eq!(spy.0, ep.rows.iter().map(|r| r.t_meas).collect::<Vec<_>>());
    assert!(spy.0.iter().zip(&ep.true_temps).any(|(m, t)| m != t));
}

#[test]
fn reference_profiles_match_their_definitions() {
    let s = ReferenceProfile::preset("staircase").unwrap();
    assert_eq!(s.at(0.0), 26.0);
    assert_eq!(s.at(3600.0), 26.0);
    assert!((s.at(3900.0) - 27.0).abs() < 1e-12);
    assert_eq!(s.at(4200.0), 28.0);
    assert_eq!(s.at(1e6), 28.0);
    let r = ReferenceProfile::preset("ramp").unwrap();
    assert_eq!(r.at(0.0), 25.0);
    assert_eq!(r.at(1e6), 32.0);
    let sin = ReferenceProfile::preset("sinusoid").unwrap();
    assert!((sin.at(1800.0) - 30.5).abs() < 1e-12);
    assert!(ReferenceProfile::preset("square").is_err());
    let bad = ReferenceProfile::Staircase {
        levels: vec![],
        hold_s: 1.0,
        ramp_s: 0.0,
    };
    assert!(bad.validate().is_err());
    let parsed: ReferenceProfile = toml::from_str("kind = \"constant\"\nvalue = 26.5").unwrap();
    assert_eq!(parsed, ReferenceProfile::Constant { value: 26.5 });
}
