use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use latent_qrl::envs::{CartPole, Environment, StepResult};
use latent_qrl::grad::{check_gradients, Bindings, Graph, Optimizer, ParamSet, Tensor, Var};
use latent_qrl::nets::{ae_loss, AeConfig, CriticConfig, CriticInput, LayerSpec, Activation, Stack};
use latent_qrl::ppo::{
    clip_ratio, collect_rollout, combined_loss, gae, joint_update, minibatch_loss, ppo_loss, train_agent,
    write_update_log, Agent, EpisodeStream, PolicyNet, PpoBatch, PpoHyper, Rollout, Targets, TrainMode, UpdateLog,
    POLICY_PARAM,
};
use latent_qrl::qubit::{QubitPolicyConfig, QubitPolicyOp};
use latent_qrl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qubit_agent(mode: TrainMode, critic_input: CriticInput, detach: bool) -> Agent {
    let ae = AeConfig::small_dense(4).build().unwrap();
    let critic_dim = if critic_input == CriticInput::Raw { 4 } else { 2 };
    let critic = CriticConfig {
        input: critic_input,
        hidden: vec![8],
    }
    .build(critic_dim)
    .unwrap();
    Agent::new(
        Some(ae),
        PolicyNet::Qubit(QubitPolicyConfig::new(2, 2, 2)),
        critic,
        critic_input,
        detach,
        mode,
    )
    .unwrap()
}

/// Classical agent on cart-pole observations whose single linear layer starts
/// at zero, so every action is equally likely until the bias is changed.
fn linear_agent() -> (Agent, ParamSet) {
    let net = Stack::new(
        "policy",
        vec![4],
        vec![LayerSpec::Dense {
            units: 2,
            act: Activation::Linear,
        }],
    )
    .unwrap();
    let critic = CriticConfig {
        input: CriticInput::Raw,
        hidden: vec![4],
    }
    .build(4)
    .unwrap();
    let agent = Agent::new(
        None,
        PolicyNet::Cnn { net, n_actions: 2 },
        critic,
        CriticInput::Raw,
        false,
        TrainMode::Classical,
    )
    .unwrap();
    let mut params = agent.init_params(0);
    for (name, t) in params.iter_mut() {
        if name.starts_with("policy.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    (agent, params)
}

fn cartpole_rollout(agent: &Agent, params: &ParamSet, len: usize, seed: u64) -> Rollout {
    let mut env = CartPole::default();
    let mut stream = EpisodeStream::new(&mut env, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    collect_rollout(agent, params, &mut stream, len, usize::MAX, &mut rng).unwrap()
}

/// Advantage from the defining sum of discounted TD errors, restarted at
/// every episode boundary.
fn gae_oracle(
    r: &[f64],
    v: &[f64],
    nv: &[f64],
    term: &[bool],
    end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if term[t] { 0.0 } else { gamma * nv[t] } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in t..n {
                total += (gamma * lambda).powi((l - t) as i32) * delta[l];
                if end[l] {
                    break;
                }
            }
            total
        })
        .collect()
}

#[test]
fn gae_examples() {
    let r = [1.0, 0.5, -0.25, 2.0];
    let v = [0.3, -0.1, 0.7, 0.2];
    let nv = [-0.1, 0.7, 0.2, 0.9];
    let term = [false; 4];
    let end = [false; 4];
    let (adv, ret) = gae(&r, &v, &nv, &term, &end, 0.9, 0.0).unwrap();
    for t in 0..4 {
        assert_abs_diff_eq!(adv[t], r[t] + 0.9 * nv[t] - v[t], epsilon = 1e-15);
        assert_abs_diff_eq!(ret[t], adv[t] + v[t], epsilon = 1e-15);
    }

    let zeros = [0.0; 4];
    let term = [false, false, false, true];
    let end = [false, false, false, true];
    let (adv, _) = gae(&r, &zeros, &zeros, &term, &end, 1.0, 1.0).unwrap();
    assert_eq!(adv, vec![3.25, 2.25, 1.75, 2.0]);

    assert!(gae(&r, &v[..3], &nv, &term, &end, 0.9, 0.9).is_err());
}

#[test]
fn gae_truncation_bootstraps_without_leaking() {
    // Episode one truncates after step 1, episode two terminates at step 2.
    let r = [1.0, 1.0, 1.0];
    let v = [0.0; 3];
    let nv = [0.0, 10.0, 0.0];
    let term = [false, false, true];
    let end = [false, true, true];
    let (adv, _) = gae(&r, &v, &nv, &term, &end, 0.5, 1.0).unwrap();
    assert_eq!(adv, vec![1.0 + 0.5 * 6.0, 6.0, 1.0]);
}

proptest! {
    #[test]
    fn gae_matches_direct_summation(
        steps in proptest::collection::vec((-2.0f64..2.0, -3.0f64..3.0, -3.0f64..3.0, 0u8..10), 1..=64),
        gamma in 0.01f64..0.999,
        lambda in 0.01f64..0.999,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let nv: Vec<f64> = steps.iter().map(|s| s.2).collect();
        // 0: terminated, 1: truncated, otherwise mid-episode.
        let term: Vec<bool> = steps.iter().map(|s| s.3 == 0).collect();
        let end: Vec<bool> = steps.iter().map(|s| s.3 <= 1).collect();
        let (adv, ret) = gae(&r, &v, &nv, &term, &end, gamma, lambda).unwrap();
        let want = gae_oracle(&r, &v, &nv, &term, &end, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - want[t]).abs() < 1e-12, "t={t}: {} vs {}", adv[t], want[t]);
            prop_assert!((ret[t] - want[t] - v[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn clip_ratio_branches() {
    assert_abs_diff_eq!(clip_ratio(1.3, 0.2), 1.2, epsilon = 1e-15);
    assert_eq!(clip_ratio(1.0, 0.2), 1.0);
    assert_abs_diff_eq!(clip_ratio(0.5, 0.2), 0.8, epsilon = 1e-15);
    assert_eq!(clip_ratio(1.1, 0.2), 1.1);
}

struct Terms {
    clip: f64,
    value: f64,
    entropy: f64,
    reg: f64,
    total: f64,
}

fn eval_ppo(probs: Vec<Vec<f64>>, batch: &PpoBatch<'_>, values: Vec<f64>, hyper: &PpoHyper) -> Terms {
    let k = probs[0].len();
    let b = probs.len();
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![b, k], probs.concat()).unwrap());
    let v = g.constant(Tensor::new(vec![b, 1], values).unwrap());
    let t = ppo_loss(&mut g, p, v, batch, &[], hyper).unwrap();
    let val = |x: Var| g.value(x).item().unwrap();
    Terms {
        clip: val(t.clip),
        value: val(t.value),
        entropy: val(t.entropy),
        reg: val(t.reg),
        total: val(t.total),
    }
}

#[test]
fn ppo_loss_examples() {
    let hyper = PpoHyper::default();
    // Unchanged policy: ratio 1 everywhere.
    let probs = vec![vec![0.3, 0.7], vec![0.6, 0.4], vec![0.5, 0.5]];
    let actions = [1, 0, 1];
    let old: Vec<f64> = [0.7f64, 0.6, 0.5].iter().map(|p| p.ln()).collect();
    let adv = [0.4, -1.5, 2.0];
    let ret = [1.0, 0.0, -1.0];
    let batch = PpoBatch {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let t = eval_ppo(probs.clone(), &batch, vec![0.5, 0.0, -2.0], &hyper);
    assert_abs_diff_eq!(t.clip, adv.iter().sum::<f64>() / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(t.value, (0.25 + 0.0 + 1.0) / 3.0, epsilon = 1e-15);
    assert_eq!(t.reg, 0.0);
    assert_abs_diff_eq!(
        t.total,
        -t.clip - hyper.c_entropy * t.entropy + hyper.c_vf * t.value,
        epsilon = 1e-15
    );

    // Uniform two-action policy.
    let t = eval_ppo(vec![vec![0.5, 0.5]], &PpoBatch { actions: &[0], old_log_probs: &[0.5f64.ln()], advantages: &[1.0], returns: &[0.0] }, vec![0.0], &hyper);
    assert_abs_diff_eq!(t.entropy, std::f64::consts::LN_2, epsilon = 1e-15);

    // Hand-set ratio 1.3 with a positive advantage hits the upper clip.
    let old = [(0.4f64 / 1.3).ln()];
    let batch = PpoBatch {
        actions: &[0],
        old_log_probs: &old,
        advantages: &[1.0],
        returns: &[0.0],
    };
    let t = eval_ppo(vec![vec![0.4, 0.6]], &batch, vec![0.0], &hyper);
    assert_abs_diff_eq!(t.clip, 1.2, epsilon = 1e-12);

    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let v = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let short = PpoBatch {
        actions: &[0, 1],
        old_log_probs: &[0.0],
        advantages: &[0.0],
        returns: &[0.0],
    };
    assert!(ppo_loss(&mut g, p, v, &short, &[], &hyper).is_err());
}

#[test]
fn zero_probability_is_floored() {
    let hyper = PpoHyper::default();
    let batch = PpoBatch {
        actions: &[1],
        old_log_probs: &[-1.0],
        advantages: &[1.0],
        returns: &[0.0],
    };
    let t = eval_ppo(vec![vec![1.0, 0.0]], &batch, vec![0.0], &hyper);
    assert!(t.total.is_finite());
    assert_eq!(t.entropy, 0.0);
}

#[test]
fn combined_loss_examples() {
    let mut g = Graph::new();
    let ppo = g.constant(Tensor::scalar(2.0));
    let ae = g.constant(Tensor::scalar(0.5));
    let l = combined_loss(&mut g, ppo, ae, 1.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 2.5);
    let l = combined_loss(&mut g, ppo, ae, 0.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 2.0);
}

proptest! {
    #[test]
    fn entropy_is_bounded(logits in proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, 2..6), 1..6)) {
        let k = logits.iter().map(|l| l.len()).min().unwrap();
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|l| {
                let e: Vec<f64> = l[..k].iter().map(|v| v.exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect();
        let b = probs.len();
        let actions = vec![0; b];
        let zeros = vec![0.0; b];
        let batch = PpoBatch { actions: &actions, old_log_probs: &zeros, advantages: &zeros, returns: &zeros };
        let t = eval_ppo(probs, &batch, zeros.clone(), &PpoHyper::default());
        prop_assert!(t.entropy >= 0.0);
        prop_assert!(t.entropy <= (k as f64).ln() + 1e-12);
    }
}

fn jitter(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    // A detached critic is a deliberate stop-gradient, which finite
    // differences cannot see; only fully differentiable variants are checked.
    for (critic_input, detach) in [(CriticInput::Latent, false), (CriticInput::Raw, false)] {
        let agent = qubit_agent(TrainMode::Joint, critic_input, detach);
        let mut params = agent.init_params(5);
        let ro = cartpole_rollout(&agent, &params, 4, 3);
        let hyper = PpoHyper::default();
        let targets = Targets::compute(&ro, &hyper).unwrap();
        // Move away from the collection point so ratios differ from one.
        jitter(&mut params, 0.05, 11);
        let idx = [0, 1, 2, 3];
        let report = check_gradients(
            |g: &mut Graph, b: &Bindings| Ok(minibatch_loss(&agent, g, b, &ro, &idx, &targets, &hyper)?.0),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{critic_input:?}/{detach}: {:?}", report.per_param);
        for group in ["encoder", "decoder", "policy", "critic"] {
            assert!(report.per_param.keys().any(|k| k.starts_with(group)), "{group} not checked");
        }
    }
}

fn gradients(agent: &Agent, params: &ParamSet, ro: &Rollout, targets: &Targets, hyper: &PpoHyper) -> BTreeMap<String, Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| true).unwrap();
    let idx: Vec<usize> = (0..ro.len()).collect();
    let (loss, _) = minibatch_loss(agent, &mut g, &b, ro, &idx, targets, hyper).unwrap();
    g.backward(loss).unwrap().into_named()
}

#[test]
fn encoder_gradient_decomposes_into_ppo_and_reconstruction_parts() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, false);
    let params = agent.init_params(8);
    let ro = cartpole_rollout(&agent, &params, 6, 4);
    let hyper = PpoHyper {
        c_ae: 0.7,
        ..PpoHyper::default()
    };
    let targets = Targets::compute(&ro, &hyper).unwrap();
    let full = gradients(&agent, &params, &ro, &targets, &hyper);
    let ppo_only = gradients(&agent, &params, &ro, &targets, &PpoHyper { c_ae: 0.0, ..hyper.clone() });

    let ae = agent.ae.as_ref().unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, |n| n.starts_with("encoder") || n.starts_with("decoder")).unwrap();
    let x = g.constant(Tensor::new(vec![ro.len(), 4], ro.observations.concat()).unwrap());
    let (_, xh) = ae.forward(&mut g, &b, x).unwrap();
    let l = ae_loss(&mut g, x, xh).unwrap();
    let recon = g.backward(l).unwrap().into_named();

    for (name, gf) in &full {
        if !name.starts_with("encoder") {
            continue;
        }
        let gp = &ppo_only[name];
        let ga = &recon[name];
        for i in 0..gf.len() {
            assert_abs_diff_eq!(gf.data()[i], gp.data()[i] + 0.7 * ga.data()[i], epsilon = 1e-12);
        }
        assert!(gp.data().iter().any(|v| *v != 0.0), "{name}: no PPO signal");
    }
}

#[test]
fn unclipped_surrogate_gradient_is_vanilla_policy_gradient() {
    let ae = AeConfig::small_dense(4).build().unwrap();
    let cfg = QubitPolicyConfig::new(2, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ae.init(&mut rng);
    let theta = (0..cfg.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
    params.insert(POLICY_PARAM, Tensor::vector(theta));
    let obs: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let adv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let zeros = vec![0.0; 6];
    let hyper = PpoHyper {
        clip_eps: 1e9,
        c_entropy: 0.0,
        c_reg: 0.0,
        c_vf: 0.0,
        ..PpoHyper::default()
    };

    let probs_of = |g: &mut Graph, b: &Bindings| -> Result<Var> {
        let x = g.constant(Tensor::new(vec![6, 4], obs.clone())?);
        let (z, _) = ae.forward(g, b, x)?;
        let out = g.custom(&[z, b.get(POLICY_PARAM)?], Box::new(QubitPolicyOp::new(cfg.clone())))?;
        let e = g.columns(out, 0, 2)?;
        g.softmax(e)
    };

    // Old log-probabilities taken from the same parameters, so every ratio is one.
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false).unwrap();
    let p = probs_of(&mut g, &b).unwrap();
    let old: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(i, &a)| g.value(p).data()[2 * i + a].ln())
        .collect();

    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| true).unwrap();
    let p = probs_of(&mut g, &b).unwrap();
    let v = g.constant(Tensor::new(vec![6, 1], zeros.clone()).unwrap());
    let batch = PpoBatch {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &zeros,
    };
    let terms = ppo_loss(&mut g, p, v, &batch, &[], &hyper).unwrap();
    let surrogate = g.backward(terms.total).unwrap().into_named();

    // −mean(Â·log π(a|s)).
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| true).unwrap();
    let p = probs_of(&mut g, &b).unwrap();
    let picked = g.gather(p, &actions).unwrap();
    let logp = g.log(picked);
    let a = g.constant(Tensor::vector(adv.clone()));
    let weighted = g.mul(logp, a).unwrap();
    let m = g.mean(weighted).unwrap();
    let loss = g.neg(m);
    let vanilla = g.backward(loss).unwrap().into_named();

    for (name, gs) in &surrogate {
        let gv = &vanilla[name];
        for i in 0..gs.len() {
            assert_abs_diff_eq!(gs.data()[i], gv.data()[i], epsilon = 1e-10);
        }
    }
}

#[test]
fn deterministic_policy_records_zero_log_prob() {
    let (agent, mut params) = linear_agent();
    params.get_mut("policy.0.b").unwrap().data_mut()[0] = 800.0;
    let ro = cartpole_rollout(&agent, &params, 30, 0);
    assert_eq!(ro.len(), 30);
    assert!(ro.actions.iter().all(|&a| a == 0));
    assert!(ro.log_probs.iter().all(|&l| l == 0.0));
}

#[test]
fn rollouts_are_deterministic_and_consistent() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, true);
    let params = agent.init_params(1);
    let a = cartpole_rollout(&agent, &params, 100, 9);
    let b = cartpole_rollout(&agent, &params, 100, 9);
    assert_eq!(a, b);
    assert_ne!(a, cartpole_rollout(&agent, &params, 100, 10));
    assert_eq!(a.len(), 100);
    for field in [a.latents.len(), a.log_probs.len(), a.rewards.len(), a.values.len(), a.next_values.len()] {
        assert_eq!(field, 100);
    }
    for t in 0..99 {
        if !a.episode_end[t] {
            assert_eq!(a.next_values[t], a.values[t + 1]);
        }
        if a.terminated[t] {
            assert!(a.episode_end[t]);
            assert_eq!(a.next_values[t], 0.0);
        }
    }
}

#[test]
fn random_policy_episode_length_matches_monte_carlo() {
    let mut env = CartPole::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut oracle = 0.0;
    for ep in 0..1000 {
        env.reset(ep);
        loop {
            oracle += 1.0;
            if env.step(rng.random_range(0..2)).unwrap().done() {
                break;
            }
        }
    }
    oracle /= 1000.0;

    let (agent, params) = linear_agent();
    let mut env = CartPole::default();
    let mut stream = EpisodeStream::new(&mut env, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    while stream.episodes() < 1000 {
        let ro = collect_rollout(&agent, &params, &mut stream, 64, 1000, &mut rng).unwrap();
        assert!(ro.len() <= 64);
        assert!(ro.log_probs.iter().all(|&l| (l - 0.5f64.ln()).abs() < 1e-15));
    }
    let mean = stream.returns.iter().sum::<f64>() / stream.returns.len() as f64;
    assert!((8.0..=50.0).contains(&mean), "{mean}");
    assert!((mean - oracle).abs() < 3.0, "rollout {mean} vs oracle {oracle}");
}

/// One-step episodes with a fixed observation; action 0 pays 1, action 1 pays 0.
struct Bandit;

const BANDIT_OBS: [f64; 4] = [0.1, -0.2, 0.3, 0.05];

impl Environment for Bandit {
    fn observation_dim(&self) -> usize {
        4
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        BANDIT_OBS.to_vec()
    }
    fn step(&mut self, action: usize) -> Result<StepResult> {
        Ok(StepResult {
            observation: BANDIT_OBS.to_vec(),
            reward: if action == 0 { 1.0 } else { 0.0 },
            terminated: true,
            truncated: false,
            info: BTreeMap::new(),
        })
    }
    fn episode_optimum(&self) -> f64 {
        1.0
    }
    fn mean_optimum(&self) -> f64 {
        1.0
    }
}

fn p_rewarded(agent: &Agent, params: &ParamSet) -> f64 {
    agent.actor(params).unwrap().decide(&BANDIT_OBS).unwrap().probs[0]
}

#[test]
fn bandit_update_raises_rewarded_action_probability() {
    for seed in 0..5 {
        let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, true);
        let mut params = agent.init_params(seed);
        let before = p_rewarded(&agent, &params);
        let mut env = Bandit;
        let mut stream = EpisodeStream::new(&mut env, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyper = PpoHyper {
            rollout_len: 64,
            minibatch: 16,
            epochs: 1,
            ..PpoHyper::default()
        };
        let ro = collect_rollout(&agent, &params, &mut stream, 64, usize::MAX, &mut rng).unwrap();
        let mut opt = Optimizer::adam(1e-2);
        joint_update(&agent, &mut params, &mut opt, &ro, &hyper, 0, &mut rng).unwrap();
        let after = p_rewarded(&agent, &params);
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, false);
    let mut params = agent.init_params(2);
    let start = params.clone();
    let ro = cartpole_rollout(&agent, &params, 32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hyper = PpoHyper {
        minibatch: 8,
        ..PpoHyper::default()
    };
    let log = joint_update(&agent, &mut params, &mut Optimizer::adam(0.0), &ro, &hyper, 0, &mut rng).unwrap();
    assert_eq!(params, start);
    assert!(log.total.is_finite());
}

#[test]
fn ppo_signal_moves_encoder_at_reconstruction_optimum() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, true);
    let mut params = agent.init_params(4);
    // Decoder ignores the latent and outputs the (constant) observation, so
    // the reconstruction loss and its gradient are exactly zero.
    for (name, t) in params.iter_mut() {
        if name.starts_with("decoder") {
            let last_bias = name.ends_with(".b") && t.len() == 4;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if last_bias { BANDIT_OBS[i] } else { 0.0 };
            }
        }
    }
    let ae = agent.ae.as_ref().unwrap();
    let x = Tensor::new(vec![1, 4], BANDIT_OBS.to_vec()).unwrap();
    assert_eq!(ae.reconstruct(&params, &x).unwrap(), x);

    let actor = agent.actor(&params).unwrap();
    let d = actor.decide(&BANDIT_OBS).unwrap();
    let n = 8;
    let ro = Rollout {
        observations: vec![BANDIT_OBS.to_vec(); n],
        latents: vec![d.latent.clone(); n],
        actions: (0..n).map(|i| i % 2).collect(),
        log_probs: (0..n).map(|i| d.probs[i % 2].ln()).collect(),
        rewards: (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect(),
        values: vec![d.value; n],
        next_values: vec![0.0; n],
        terminated: vec![true; n],
        episode_end: vec![true; n],
    };
    drop(actor);
    let start = params.clone();
    let hyper = PpoHyper {
        minibatch: n,
        epochs: 1,
        ..PpoHyper::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let log = joint_update(&agent, &mut params, &mut Optimizer::adam(1e-3), &ro, &hyper, 0, &mut rng).unwrap();
    assert_eq!(log.ae, 0.0);
    assert_ne!(params.subset("encoder"), start.subset("encoder"));
}

#[test]
fn fixed_ae_mode_freezes_autoencoder() {
    let agent = qubit_agent(TrainMode::FixedAe, CriticInput::Latent, false);
    let params = agent.init_params(3);
    let hyper = PpoHyper {
        rollout_len: 64,
        ..PpoHyper::default()
    };
    let out = train_agent(&agent, params.clone(), &mut CartPole::default(), &hyper, 15, 1, |_, _| {}).unwrap();
    assert!(!out.updates.is_empty());
    assert_eq!(out.params.subset("encoder"), params.subset("encoder"));
    assert_eq!(out.params.subset("decoder"), params.subset("decoder"));
    assert_ne!(out.params.get(POLICY_PARAM), params.get(POLICY_PARAM));
}

#[test]
fn joint_without_reconstruction_and_frozen_encoder_matches_fixed_ae() {
    let hyper = PpoHyper {
        c_ae: 0.0,
        rollout_len: 64,
        ..PpoHyper::default()
    };
    let mut frozen = hyper.clone();
    frozen.group_lr.insert("encoder".into(), 0.0);
    frozen.group_lr.insert("decoder".into(), 0.0);
    let joint = qubit_agent(TrainMode::Joint, CriticInput::Latent, true);
    let fixed = qubit_agent(TrainMode::FixedAe, CriticInput::Latent, true);
    let params = joint.init_params(6);
    let a = train_agent(&joint, params.clone(), &mut CartPole::default(), &frozen, 20, 3, |_, _| {}).unwrap();
    let b = train_agent(&fixed, params.clone(), &mut CartPole::default(), &hyper, 20, 3, |_, _| {}).unwrap();
    assert!(a.updates.len() >= 2);
    assert_eq!(a.returns, b.returns);
    assert_eq!(a.params.require(POLICY_PARAM).unwrap(), b.params.require(POLICY_PARAM).unwrap());
    assert_eq!(a.params.subset("encoder"), params.subset("encoder"));
}

#[test]
fn cold_start_training_contract() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Raw, false);
    let params = agent.init_params(10);
    let hyper = PpoHyper {
        rollout_len: 64,
        ..PpoHyper::default()
    };
    let mut seen = 0;
    let run = |seen: &mut usize| {
        train_agent(&agent, params.clone(), &mut CartPole::default(), &hyper, 25, 4, |log: &UpdateLog, returns: &[f64]| {
            assert_eq!(log.update, *seen);
            assert!(!returns.is_empty());
            *seen += 1;
        })
        .unwrap()
    };
    let out = run(&mut seen);
    assert_eq!(out.returns.len(), 25);
    assert_eq!(out.optima, vec![500.0; 25]);
    assert_eq!(seen, out.updates.len());
    assert_ne!(out.params.subset("encoder"), params.subset("encoder"));
    let again = run(&mut 0);
    assert_eq!(
        out.returns.iter().map(|r| r.to_bits()).collect::<Vec<_>>(),
        again.returns.iter().map(|r| r.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(out.params, again.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.csv");
    write_update_log(&path, &out.updates).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "update,clip,value,entropy,ae,reg,total");
    assert_eq!(text.lines().count(), out.updates.len() + 1);
}

#[test]
fn training_rejects_mismatched_environment_and_bad_hyper() {
    let agent = qubit_agent(TrainMode::Joint, CriticInput::Latent, true);
    let params = agent.init_params(0);
    let mut maze = latent_qrl::envs::Maze::default();
    assert!(train_agent(&agent, params.clone(), &mut maze, &PpoHyper::default(), 1, 0, |_, _| {}).is_err());
    let bad = PpoHyper {
        gamma: 1.0,
        ..PpoHyper::default()
    };
    assert!(train_agent(&agent, params, &mut CartPole::default(), &bad, 1, 0, |_, _| {}).is_err());
}
