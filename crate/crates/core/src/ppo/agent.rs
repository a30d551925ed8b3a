use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{combined_loss, gae, normalize, ppo_loss, PpoBatch, PpoHyper, PROB_FLOOR};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::grad::{Graph, Optimizer, ParamSet, Tensor, Var};
use crate::nets::{ae_loss, Autoencoder, CriticInput, Stack};
use crate::photonic::{BoundCircuit, CvCircuit, CvPolicyOp};
use crate::qubit::{run_policy, QubitPolicyConfig, QubitPolicyOp};

/// Flat circuit parameters of quantum policies.
pub const POLICY_PARAM: &str = "policy.theta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Autoencoder, policy and critic updated together.
    Joint,
    /// Autoencoder frozen; only policy and critic train.
    FixedAe,
    /// CNN policy on raw observations, no autoencoder.
    Classical,
}

/// Policy head mapping its input batch to action probabilities.
#[derive(Clone, Debug)]
pub enum PolicyNet {
    Qubit(QubitPolicyConfig),
    Photonic(Arc<CvCircuit>),
    Cnn { net: Stack, n_actions: usize },
}

impl PolicyNet {
    pub fn n_actions(&self) -> usize {
        match self {
            PolicyNet::Qubit(c) => c.n_actions,
            PolicyNet::Photonic(c) => c.config().n_actions,
            PolicyNet::Cnn { n_actions, .. } => *n_actions,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PolicyNet::Qubit(c) => c.param_count(),
            PolicyNet::Photonic(c) => c.param_count(),
            PolicyNet::Cnn { net, .. } => net.param_count(),
        }
    }

    /// Qubit angles uniform in `[−π, π)`. CV interferometer and phase angles
    /// uniform in `[−π, π)`, squeezing/displacement magnitudes and Kerr
    /// strengths uniform in `[−0.1, 0.1)`. CNN layers Glorot-uniform.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        use std::f64::consts::PI;
        let mut p = ParamSet::new();
        match self {
            PolicyNet::Qubit(c) => {
                let theta = (0..c.param_count()).map(|_| rng.random_range(-PI..PI)).collect();
                p.insert(POLICY_PARAM, Tensor::vector(theta));
            }
            PolicyNet::Photonic(c) => {
                let cfg = c.config();
                let pairs = cfg.modes * (cfg.modes - 1) / 2;
                let mut theta = Vec::with_capacity(cfg.param_count());
                for _ in 0..cfg.layers {
                    for _ in 0..2 * pairs {
                        theta.push(rng.random_range(-PI..PI));
                    }
                    for _ in 0..cfg.modes {
                        theta.push(rng.random_range(-0.1..0.1));
                        theta.push(rng.random_range(-PI..PI));
                    }
                    for _ in 0..2 * pairs {
                        theta.push(rng.random_range(-PI..PI));
                    }
                    for _ in 0..cfg.modes {
                        theta.push(rng.random_range(-0.1..0.1));
                        theta.push(rng.random_range(-PI..PI));
                    }
                    for _ in 0..cfg.modes {
                        theta.push(rng.random_range(-0.1..0.1));
                    }
                }
                p.insert(POLICY_PARAM, Tensor::vector(theta));
            }
            PolicyNet::Cnn { net, .. } => p.extend(net.init(rng)),
        }
        p
    }

    fn probs_graph(&self, g: &mut Graph, b: &crate::grad::Bindings, input: Var) -> Result<Var> {
        let readout = match self {
            PolicyNet::Qubit(c) => {
                let out = g.custom(&[input, b.get(POLICY_PARAM)?], Box::new(QubitPolicyOp::new(c.clone())))?;
                g.columns(out, 0, c.n_actions)?
            }
            PolicyNet::Photonic(c) => {
                let out = g.custom(&[input, b.get(POLICY_PARAM)?], Box::new(CvPolicyOp::new(c.clone())))?;
                g.columns(out, 0, c.config().n_actions)?
            }
            PolicyNet::Cnn { net, .. } => net.forward(g, b, input)?,
        };
        g.softmax(readout)
    }
}

/// Encoder, policy and critic of one agent.
#[derive(Clone, Debug)]
pub struct Agent {
    pub ae: Option<Autoencoder>,
    pub policy: PolicyNet,
    pub critic: Stack,
    pub critic_input: CriticInput,
    /// Stop critic gradients from reaching the encoder.
    pub detach_critic: bool,
    pub mode: TrainMode,
}

impl Agent {
    pub fn new(
        ae: Option<Autoencoder>,
        policy: PolicyNet,
        critic: Stack,
        critic_input: CriticInput,
        detach_critic: bool,
        mode: TrainMode,
    ) -> Result<Self> {
        let classical = matches!(policy, PolicyNet::Cnn { .. });
        match (&ae, mode, classical) {
            (None, TrainMode::Classical, true) => {}
            (Some(ae), TrainMode::Joint | TrainMode::FixedAe, false) => {
                let l = ae.latent_dim();
                match &policy {
                    PolicyNet::Qubit(c) => c.validate(l)?,
                    PolicyNet::Photonic(c) => c.config().validate(l)?,
                    PolicyNet::Cnn { .. } => unreachable!(),
                }
            }
            _ => {
                return Err(Error::Config(
                    "classical mode needs a CNN policy and no autoencoder; joint and fixed-ae modes need an autoencoder and a quantum policy".into(),
                ))
            }
        }
        let agent = Agent {
            ae,
            policy,
            critic,
            critic_input,
            detach_critic,
            mode,
        };
        let want = match (critic_input, &agent.ae) {
            (CriticInput::Latent, Some(ae)) => ae.latent_dim(),
            (CriticInput::Latent, None) => {
                return Err(Error::Config("latent critic input needs an autoencoder".into()));
            }
            (CriticInput::Raw, _) => agent.observation_dim(),
        };
        if agent.critic.input_shape() != [want] {
            return Err(Error::Config(format!(
                "critic takes {:?} inputs, agent provides {want}",
                agent.critic.input_shape()
            )));
        }
        Ok(agent)
    }

    pub fn observation_dim(&self) -> usize {
        match (&self.ae, &self.policy) {
            (Some(ae), _) => ae.input_dim(),
            (None, PolicyNet::Cnn { net, .. }) => net.input_shape().iter().product(),
            (None, _) => 0,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.policy.n_actions()
    }

    /// Fresh parameters for every component (cold start).
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        if let Some(ae) = &self.ae {
            p.extend(ae.init(&mut rng));
        }
        p.extend(self.policy.init(&mut rng));
        p.extend(self.critic.init(&mut rng));
        p
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or("");
        !(self.mode == TrainMode::FixedAe && (group == "encoder" || group == "decoder"))
    }

    /// Binds parameters against a rollout's worth of fixed weights.
    pub fn actor<'a>(&'a self, params: &'a ParamSet) -> Result<Actor<'a>> {
        let bound = match &self.policy {
            PolicyNet::Photonic(c) => Some(c.bind(params.require(POLICY_PARAM)?.data())?),
            _ => None,
        };
        Ok(Actor {
            agent: self,
            params,
            bound,
        })
    }
}

/// Policy, value and diagnostics for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub probs: Vec<f64>,
    pub value: f64,
    pub latent: Vec<f64>,
    /// Retained Fock-space probability for photonic policies.
    pub norm: Option<f64>,
}

/// Gradient-free evaluation of an agent with fixed parameters.
pub struct Actor<'a> {
    agent: &'a Agent,
    params: &'a ParamSet,
    bound: Option<BoundCircuit<'a>>,
}

impl Actor<'_> {
    pub fn decide(&self, obs: &[f64]) -> Result<Decision> {
        let x = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
        let latent = match &self.agent.ae {
            Some(ae) => ae.encode(self.params, &x)?.data().to_vec(),
            None => Vec::new(),
        };
        let mut norm = None;
        let probs = match &self.agent.policy {
            PolicyNet::Qubit(c) => {
                let e = run_policy(&latent, self.params.require(POLICY_PARAM)?.data(), c)?;
                crate::qubit::softmax(&e[..c.n_actions])
            }
            PolicyNet::Photonic(c) => {
                let out = self.bound.as_ref().expect("bound at construction").evaluate(&latent)?;
                norm = Some(out.norm);
                crate::qubit::softmax(&out.expectations[..c.config().n_actions])
            }
            PolicyNet::Cnn { net, .. } => crate::qubit::softmax(net.eval(self.params, &x)?.data()),
        };
        let value = self.value_of(&x, &latent)?;
        Ok(Decision {
            probs,
            value,
            latent,
            norm,
        })
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        let x = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
        let latent = match (&self.agent.ae, self.agent.critic_input) {
            (Some(ae), CriticInput::Latent) => ae.encode(self.params, &x)?.data().to_vec(),
            _ => Vec::new(),
        };
        self.value_of(&x, &latent)
    }

    fn value_of(&self, x: &Tensor, latent: &[f64]) -> Result<f64> {
        let input = match self.agent.critic_input {
            CriticInput::Latent => Tensor::new(vec![1, latent.len()], latent.to_vec())?,
            CriticInput::Raw => x.clone(),
        };
        self.agent.critic.eval(self.params, &input)?.item()
    }
}

/// Continuous stream of episodes from one environment, tracking returns.
pub struct EpisodeStream<'e> {
    env: &'e mut dyn Environment,
    seeds: ChaCha8Rng,
    obs: Vec<f64>,
    episode_return: f64,
    episode_warned: bool,
    trunc_tolerance: Option<f64>,
    /// Total reward of every completed episode.
    pub returns: Vec<f64>,
    /// Best achievable return of every completed episode.
    pub optima: Vec<f64>,
    /// Whether any step of each completed episode raised a truncation warning.
    pub truncation_warned: Vec<bool>,
}

impl<'e> EpisodeStream<'e> {
    pub fn new(env: &'e mut dyn Environment, seed: u64) -> Self {
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let obs = env.reset(seeds.random());
        EpisodeStream {
            env,
            seeds,
            obs,
            episode_return: 0.0,
            episode_warned: false,
            trunc_tolerance: None,
            returns: Vec::new(),
            optima: Vec::new(),
            truncation_warned: Vec::new(),
        }
    }

    /// Flags steps whose retained Fock norm falls below `1 − tolerance`.
    pub fn with_truncation_tolerance(mut self, tolerance: f64) -> Self {
        self.trunc_tolerance = Some(tolerance);
        self
    }

    pub fn episodes(&self) -> usize {
        self.returns.len()
    }
}

/// Transitions gathered under fixed parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub observations: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_{t+1})` of the observation that followed each step.
    pub next_values: Vec<f64>,
    pub terminated: Vec<bool>,
    pub episode_end: Vec<bool>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs the agent for up to `length` steps, stopping early once the stream
/// has completed `max_episodes` episodes.
pub fn collect_rollout(
    agent: &Agent,
    params: &ParamSet,
    stream: &mut EpisodeStream<'_>,
    length: usize,
    max_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let actor = agent.actor(params)?;
    let mut ro = Rollout::default();
    let mut pending_next = false;
    while ro.len() < length && stream.episodes() < max_episodes {
        let d = actor.decide(&stream.obs)?;
        if pending_next {
            ro.next_values.push(d.value);
        }
        if let (Some(norm), Some(tol)) = (d.norm, stream.trunc_tolerance) {
            if norm < 1.0 - tol && !stream.episode_warned {
                log::debug!("Fock truncation: retained norm {norm:.6} in episode {}", stream.episodes());
                stream.episode_warned = true;
            }
        }
        let a = sample(&d.probs, rng.random::<f64>());
        let step = stream.env.step(a)?;
        stream.episode_return += step.reward;
        ro.observations.push(std::mem::replace(&mut stream.obs, step.observation.clone()));
        ro.latents.push(d.latent);
        ro.actions.push(a);
        ro.log_probs.push(d.probs[a].max(PROB_FLOOR).ln());
        ro.rewards.push(step.reward);
        ro.values.push(d.value);
        ro.terminated.push(step.terminated);
        ro.episode_end.push(step.done());
        pending_next = !step.done();
        if step.done() {
            ro.next_values
                .push(if step.terminated { 0.0 } else { actor.value(&step.observation)? });
            stream.returns.push(stream.episode_return);
            stream.optima.push(stream.env.episode_optimum());
            stream.truncation_warned.push(stream.episode_warned);
            stream.episode_return = 0.0;
            stream.episode_warned = false;
            stream.obs = stream.env.reset(stream.seeds.random());
        }
    }
    if pending_next {
        ro.next_values.push(actor.value(&stream.obs)?);
    }
    debug_assert_eq!(ro.next_values.len(), ro.len());
    Ok(ro)
}

/// Mean loss components over one update's minibatches.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateLog {
    pub update: usize,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub ae: f64,
    pub reg: f64,
    pub total: f64,
}

/// Advantages and returns aligned with a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Targets {
    /// GAE over the rollout, normalizing advantages if configured.
    pub fn compute(ro: &Rollout, hyper: &PpoHyper) -> Result<Self> {
        let (mut advantages, returns) = gae(
            &ro.rewards,
            &ro.values,
            &ro.next_values,
            &ro.terminated,
            &ro.episode_end,
            hyper.gamma,
            hyper.lambda,
        )?;
        if hyper.normalize_advantages {
            normalize(&mut advantages);
        }
        Ok(Targets { advantages, returns })
    }
}

/// Builds the combined loss for the rollout rows in `idx`. Returns the total
/// loss node and the per-term values `(clip, value, entropy, ae, reg)`.
pub fn minibatch_loss(
    agent: &Agent,
    g: &mut Graph,
    b: &crate::grad::Bindings,
    ro: &Rollout,
    idx: &[usize],
    targets: &Targets,
    hyper: &PpoHyper,
) -> Result<(Var, [f64; 5])> {
    let (adv, ret) = (&targets.advantages, &targets.returns);
    let d = ro.observations[0].len();
    let mut xs = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        xs.extend_from_slice(&ro.observations[i]);
    }
    let x = g.constant(Tensor::new(vec![idx.len(), d], xs)?);
    let (policy_in, latent, recon) = match &agent.ae {
        Some(ae) => {
            let (z, xh) = ae.forward(g, b, x)?;
            let l = ae_loss(g, x, xh)?;
            (z, Some(z), Some(l))
        }
        None => (x, None, None),
    };
    let probs = agent.policy.probs_graph(g, b, policy_in)?;
    let critic_in = match (agent.critic_input, latent) {
        (CriticInput::Latent, Some(z)) if agent.detach_critic => {
            let v = g.value(z).clone();
            g.constant(v)
        }
        (CriticInput::Latent, Some(z)) => z,
        _ => x,
    };
    let values = agent.critic.forward(g, b, critic_in)?;
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let actions: Vec<usize> = idx.iter().map(|&i| ro.actions[i]).collect();
    let (old, a, r) = (pick(&ro.log_probs), pick(adv), pick(ret));
    let reg_params: Vec<Var> = b
        .iter()
        .filter(|(name, _)| agent.is_trainable(name))
        .map(|(_, v)| v)
        .collect();
    let terms = ppo_loss(
        g,
        probs,
        values,
        &PpoBatch {
            actions: &actions,
            old_log_probs: &old,
            advantages: &a,
            returns: &r,
        },
        &reg_params,
        hyper,
    )?;
    let (total, ae_val) = match recon {
        Some(l) if agent.mode == TrainMode::Joint => (combined_loss(g, terms.total, l, hyper.c_ae)?, g.value(l).item()?),
        Some(l) => (terms.total, g.value(l).item()?),
        None => (terms.total, 0.0),
    };
    let val = |v: Var| g.value(v).item();
    Ok((
        total,
        [val(terms.clip)?, val(terms.value)?, val(terms.entropy)?, ae_val, val(terms.reg)?],
    ))
}

/// Several epochs of shuffled minibatch steps on the combined loss; every
/// trainable group moves in the same optimizer step.
pub fn joint_update(
    agent: &Agent,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    ro: &Rollout,
    hyper: &PpoHyper,
    update: usize,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateLog> {
    if ro.is_empty() {
        return Err(Error::contract("joint_update", "empty rollout"));
    }
    let targets = Targets::compute(ro, hyper)?;
    let mut order: Vec<usize> = (0..ro.len()).collect();
    let mut sums = [0.0; 6];
    let mut count = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(hyper.minibatch) {
            let mut g = Graph::new();
            let b = params.bind(&mut g, |n| agent.is_trainable(n))?;
            let (total, parts) = minibatch_loss(agent, &mut g, &b, ro, idx, &targets, hyper)?;
            let tv = g.value(total).item()?;
            if !tv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    update,
                    diagnostics: format!(
                        "clip {}, value {}, entropy {}, ae {}, reg {}",
                        parts[0], parts[1], parts[2], parts[3], parts[4]
                    ),
                });
            }
            let grads = g.backward(total)?;
            opt.step(params, grads.by_name())?;
            for (s, v) in sums.iter_mut().zip(parts.iter().chain([&tv])) {
                *s += v;
            }
            count += 1;
        }
    }
    let m = |i: usize| sums[i] / count as f64;
    Ok(UpdateLog {
        update,
        clip: m(0),
        value: m(1),
        entropy: m(2),
        ae: m(3),
        reg: m(4),
        total: m(5),
    })
}

/// Result of [`train_agent`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Total reward per episode; length equals the episode budget.
    pub returns: Vec<f64>,
    pub optima: Vec<f64>,
    pub truncation_warned: Vec<bool>,
    pub updates: Vec<UpdateLog>,
    pub params: ParamSet,
}

/// Alternates rollouts and joint updates until `episodes` episodes finish.
pub fn train_agent(
    agent: &Agent,
    mut params: ParamSet,
    env: &mut dyn Environment,
    hyper: &PpoHyper,
    episodes: usize,
    seed: u64,
    mut on_update: impl FnMut(&UpdateLog, &[f64]),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if env.n_actions() != agent.n_actions() || env.observation_dim() != agent.observation_dim() {
        return Err(Error::Config(format!(
            "agent expects {} observations and {} actions, environment has {} and {}",
            agent.observation_dim(),
            agent.n_actions(),
            env.observation_dim(),
            env.n_actions()
        )));
    }
    let mut opt = Optimizer::adam(hyper.lr);
    for (group, lr) in &hyper.group_lr {
        opt = opt.with_group_lr(group, *lr);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = EpisodeStream::new(env, rng.random());
    if let PolicyNet::Photonic(c) = &agent.policy {
        stream = stream.with_truncation_tolerance(c.config().trunc_tolerance);
    }
    let mut updates = Vec::new();
    while stream.episodes() < episodes {
        let ro = collect_rollout(agent, &params, &mut stream, hyper.rollout_len, episodes, &mut rng)?;
        if stream.episodes() >= episodes {
            break;
        }
        let log = joint_update(agent, &mut params, &mut opt, &ro, hyper, updates.len(), &mut rng)?;
        on_update(&log, &stream.returns);
        updates.push(log);
    }
    let warned = stream.truncation_warned.iter().filter(|&&w| w).count();
    if warned > 0 {
        log::warn!("Fock truncation warnings in {warned} of {episodes} episodes");
    }
    Ok(TrainOutcome {
        returns: stream.returns,
        optima: stream.optima,
        truncation_warned: stream.truncation_warned,
        updates,
        params,
    })
}

/// One CSV row per update: index, clip, value, entropy, ae, reg, total.
pub fn write_update_log(path: &Path, logs: &[UpdateLog]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "update,clip,value,entropy,ae,reg,total").expect("in-memory write");
    for l in logs {
        writeln!(
            buf,
            "{},{},{},{},{},{},{}",
            l.update, l.clip, l.value, l.entropy, l.ae, l.reg, l.total
        )
        .expect("in-memory write");
    }
    crate::runner::io::write_atomic(path, &buf)
}
