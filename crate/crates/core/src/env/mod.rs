//! The Double Goal problem: a differentiable 2D environment with two
//! slowly moving goals, a scripted multimodal expert, and dataset
//! generation.
//!
//! The agent starts at the origin. The lower goal always has y < 0 and the
//! upper goal y > 0; the expert prefers the lower goal with probability
//! 0.75 and re-draws its target during the first ten steps. Transitions are
//! additive (`pos += action`), which keeps rollouts differentiable.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Array, NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Which goal an expert episode ended up targeting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalSide {
    Lower,
    Upper,
}

/// Episode constants. Defaults follow the Double Goal setup: horizon 30,
/// goal x-offset in [1.8, 2.2], |y| in [0.3, 0.7], total goal travel 0.15,
/// proximity threshold 0.1, lower-goal preference 0.75, and goal
/// re-sampling during the first 10 steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub goal_x: (f64, f64),
    pub goal_y_abs: (f64, f64),
    pub goal_travel: f64,
    pub proximity: f64,
    pub p_lower: f64,
    pub resample_window: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            horizon: 30,
            goal_x: (1.8, 2.2),
            goal_y_abs: (0.3, 0.7),
            goal_travel: 0.15,
            proximity: 0.1,
            p_lower: 0.75,
            resample_window: 10,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.goal_y_abs.0 <= self.goal_travel {
            return Err(Error::invalid(format!(
                "goal |y| lower bound {} must exceed total travel {} or goals could cross y=0",
                self.goal_y_abs.0, self.goal_travel
            )));
        }
        if self.horizon <= self.resample_window {
            return Err(Error::invalid(format!(
                "horizon {} must exceed resample window {}",
                self.horizon, self.resample_window
            )));
        }
        if !(0.0..=1.0).contains(&self.p_lower) {
            return Err(Error::invalid("p_lower outside [0,1]"));
        }
        Ok(())
    }
}

/// Full environment state at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub agent_pos: Vec2,
    pub prev_action: Vec2,
    pub goal_lower: Vec2,
    pub goal_upper: Vec2,
    pub vel_lower: Vec2,
    pub vel_upper: Vec2,
}

impl EnvState {
    /// 8-vector observation: agent position, lower goal, upper goal,
    /// previous action.
    pub fn observe(&self) -> [f64; 8] {
        [
            self.agent_pos.x,
            self.agent_pos.y,
            self.goal_lower.x,
            self.goal_lower.y,
            self.goal_upper.x,
            self.goal_upper.y,
            self.prev_action.x,
            self.prev_action.y,
        ]
    }
}

/// One episode: T+1 observations, T actions, and, for expert data, the
/// final goal choice. `init` keeps the goal scenario so rollouts can replay
/// the same environment noise.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub observations: Vec<[f64; 8]>,
    pub actions: Vec<Vec2>,
    pub expert_goal_choice: Option<GoalSide>,
    pub init: EnvState,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn final_pos(&self) -> Vec2 {
        let o = self.observations[self.observations.len() - 1];
        Vec2::new(o[0], o[1])
    }

    /// Agent position at step t, read back from the stored observations.
    pub fn pos(&self, t: usize) -> Vec2 {
        Vec2::new(self.observations[t][0], self.observations[t][1])
    }
}

/// Sample a fresh episode start. The agent sits at the origin; goal offsets
/// and motion directions are drawn uniformly inside the configured bounds,
/// with speed scaled so the total displacement over the horizon equals
/// `goal_travel`.
pub fn reset(rng: &mut impl Rng, config: &EpisodeConfig) -> EnvState {
    let unif = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| -> f64 {
        lo + (hi - lo) * rng.random::<f64>()
    };
    let lx = unif(rng, config.goal_x);
    let ly = -unif(rng, config.goal_y_abs);
    let ux = unif(rng, config.goal_x);
    let uy = unif(rng, config.goal_y_abs);
    let speed = config.goal_travel / config.horizon as f64;
    let theta_l = rng.random::<f64>() * std::f64::consts::TAU;
    let theta_u = rng.random::<f64>() * std::f64::consts::TAU;
    EnvState {
        t: 0,
        agent_pos: Vec2::default(),
        prev_action: Vec2::default(),
        goal_lower: Vec2::new(lx, ly),
        goal_upper: Vec2::new(ux, uy),
        vel_lower: Vec2::new(theta_l.cos(), theta_l.sin()) * speed,
        vel_upper: Vec2::new(theta_u.cos(), theta_u.sin()) * speed,
    }
}

/// Additive transition: the agent moves by `action`, both goals advance one
/// velocity increment.
pub fn step(state: &EnvState, action: Vec2, config: &EpisodeConfig) -> Result<EnvState> {
    if state.t >= config.horizon {
        return Err(Error::EpisodeOver { t: state.t, horizon: config.horizon });
    }
    Ok(EnvState {
        t: state.t + 1,
        agent_pos: state.agent_pos + action,
        prev_action: action,
        goal_lower: state.goal_lower + state.vel_lower,
        goal_upper: state.goal_upper + state.vel_upper,
        vel_lower: state.vel_lower,
        vel_upper: state.vel_upper,
    })
}

/// Scripted expert step toward `goal`: the heading is skewed toward the
/// x-axis by diag(0.1, 0.05) and the step size shrinks as sqrt of the
/// remaining distance so the expert does not overshoot.
pub fn expert_action(agent_pos: Vec2, goal: Vec2) -> Vec2 {
    let delta = goal - agent_pos;
    let d = Vec2::new(0.1 * delta.x, 0.05 * delta.y);
    let dn = d.norm();
    if dn == 0.0 {
        return Vec2::default();
    }
    d * (0.1 * delta.norm().sqrt() / dn)
}

/// Roll out one expert episode. During the first `resample_window` steps
/// the target is re-drawn from Bernoulli(p_lower) every step; afterwards it
/// stays frozen.
pub fn expert_rollout(rng: &mut impl Rng, config: &EpisodeConfig) -> Trajectory {
    let mut state = reset(rng, config);
    let init = state;
    let mut observations = Vec::with_capacity(config.horizon + 1);
    let mut actions = Vec::with_capacity(config.horizon);
    let mut target = GoalSide::Lower;
    for t in 0..config.horizon {
        if t < config.resample_window {
            target = if rng.random::<f64>() < config.p_lower {
                GoalSide::Lower
            } else {
                GoalSide::Upper
            };
        }
        observations.push(state.observe());
        let goal = match target {
            GoalSide::Lower => state.goal_lower,
            GoalSide::Upper => state.goal_upper,
        };
        let action = expert_action(state.agent_pos, goal);
        actions.push(action);
        state = step(&state, action, config).expect("expert rollout stays within horizon");
    }
    observations.push(state.observe());
    Trajectory { observations, actions, expert_goal_choice: Some(target), init }
}

/// A generated expert dataset plus the information needed to reproduce it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub config: EpisodeConfig,
}

/// Generate `n` independent expert episodes. Pure function of
/// (n, seed, config); episode i draws from its own labelled RNG stream.
pub fn generate_dataset(n: usize, seed: u64, config: &EpisodeConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    config.validate()?;
    let trajectories = (0..n)
        .map(|i| {
            let mut rng = substream(seed, "expert-data", i as u64);
            expert_rollout(&mut rng, config)
        })
        .collect();
    Ok(Dataset { trajectories, seed, config: *config })
}

impl Dataset {
    /// Serialize as the dataset interchange format: a `T=.. n=.. seed=..`
    /// header line followed by CSV rows `episode,t,obs_0..obs_7,act_0,act_1`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "T={} n={} seed={}",
            self.config.horizon,
            self.trajectories.len(),
            self.seed
        );
        for (e, traj) in self.trajectories.iter().enumerate() {
            for t in 0..traj.horizon() {
                let o = traj.observations[t];
                let a = traj.actions[t];
                let _ = write!(out, "{},{}", e, t);
                for v in o {
                    let _ = write!(out, ",{}", v);
                }
                let _ = writeln!(out, ",{},{}", a.x, a.y);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty dataset file"))?;
        let mut horizon = 0usize;
        let mut n = 0usize;
        let mut seed = 0u64;
        for part in header.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad header field `{}`", part)))?;
            match k {
                "T" => horizon = v.parse().map_err(|_| Error::invalid("bad T"))?,
                "n" => n = v.parse().map_err(|_| Error::invalid("bad n"))?,
                "seed" => seed = v.parse().map_err(|_| Error::invalid("bad seed"))?,
                _ => return Err(Error::invalid(format!("unknown header field `{}`", k))),
            }
        }
        if horizon == 0 || n == 0 {
            return Err(Error::invalid("dataset header missing T or n"));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n * horizon);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.parse::<f64>()).collect();
            let vals = vals.map_err(|_| Error::invalid(format!("bad row `{}`", line)))?;
            if vals.len() != 12 {
                return Err(Error::invalid(format!("expected 12 columns, got {}", vals.len())));
            }
            rows.push(vals);
        }
        if rows.len() != n * horizon {
            return Err(Error::invalid(format!(
                "expected {} rows, got {}",
                n * horizon,
                rows.len()
            )));
        }
        let mut trajectories = Vec::with_capacity(n);
        for e in 0..n {
            let ep = &rows[e * horizon..(e + 1) * horizon];
            let mut observations: Vec<[f64; 8]> = Vec::with_capacity(horizon + 1);
            let mut actions = Vec::with_capacity(horizon);
            for (t, row) in ep.iter().enumerate() {
                if row[0] as usize != e || row[1] as usize != t {
                    return Err(Error::invalid(format!(
                        "row index mismatch at episode {} step {}",
                        e, t
                    )));
                }
                let mut o = [0.0; 8];
                o.copy_from_slice(&row[2..10]);
                observations.push(o);
                actions.push(Vec2::new(row[10], row[11]));
            }
            // Goal velocities recovered from the first transition; the final
            // observation is reconstructed through the additive dynamics.
            let o0 = observations[0];
            let o1 = observations.get(1).copied().unwrap_or(o0);
            let vel_lower = Vec2::new(o1[2] - o0[2], o1[3] - o0[3]);
            let vel_upper = Vec2::new(o1[4] - o0[4], o1[5] - o0[5]);
            let init = EnvState {
                t: 0,
                agent_pos: Vec2::new(o0[0], o0[1]),
                prev_action: Vec2::new(o0[6], o0[7]),
                goal_lower: Vec2::new(o0[2], o0[3]),
                goal_upper: Vec2::new(o0[4], o0[5]),
                vel_lower,
                vel_upper,
            };
            let last = observations[horizon - 1];
            let last_act = actions[horizon - 1];
            observations.push([
                last[0] + last_act.x,
                last[1] + last_act.y,
                last[2] + vel_lower.x,
                last[3] + vel_lower.y,
                last[4] + vel_upper.x,
                last[5] + vel_upper.y,
                last_act.x,
                last_act.y,
            ]);
            trajectories.push(Trajectory {
                observations,
                actions,
                expert_goal_choice: None,
                init,
            });
        }
        let config = EpisodeConfig { horizon, ..EpisodeConfig::default() };
        Ok(Dataset { trajectories, seed, config })
    }
}

/// Tape handles produced by a differentiable batched rollout.
pub struct DiffRollout {
    /// Observation node (B, 8) per step, t = 0..T.
    pub obs: Vec<NodeId>,
    /// Action node (B, 2) per step.
    pub actions: Vec<NodeId>,
    /// Agent position node (B, 2) per step, t = 0..T inclusive.
    pub positions: Vec<NodeId>,
}

/// Roll a batch of episodes on the tape. `policy` maps the observation
/// node (B, 8) at step t to an action node (B, 2); gradients flow through
/// the additive dynamics into whatever the policy touches. Any non-finite
/// action aborts with a divergence error naming the step.
pub fn differentiable_rollout<F>(
    tape: &mut Tape,
    inits: &[EnvState],
    config: &EpisodeConfig,
    mut policy: F,
) -> Result<DiffRollout>
where
    F: FnMut(&mut Tape, NodeId, usize) -> Result<NodeId>,
{
    let b = inits.len();
    let horizon = config.horizon;
    let mut pos = tape.constant(Array::matrix(
        b,
        2,
        inits.iter().flat_map(|s| [s.agent_pos.x, s.agent_pos.y]).collect(),
    )?);
    let mut prev_action = tape.constant(Array::matrix(
        b,
        2,
        inits.iter().flat_map(|s| [s.prev_action.x, s.prev_action.y]).collect(),
    )?);
    let mut obs = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut positions = vec![pos];
    // Goals advance by repeated addition, exactly like `step`, so taped
    // rollouts reproduce data observations bit for bit.
    let mut goal_state: Vec<(Vec2, Vec2)> =
        inits.iter().map(|s| (s.goal_lower, s.goal_upper)).collect();
    for t in 0..horizon {
        let goals: Vec<f64> =
            goal_state.iter().flat_map(|(gl, gu)| [gl.x, gl.y, gu.x, gu.y]).collect();
        let goals = tape.constant(Array::matrix(b, 4, goals)?);
        let o = tape.concat_cols(&[pos, goals, prev_action])?;
        obs.push(o);
        let a = policy(tape, o, t)?;
        if tape.value(a).shape() != [b, 2] {
            return Err(Error::ShapeMismatch {
                op: "rollout-policy",
                details: format!("want [{}, 2], got {:?}", b, tape.value(a).shape()),
            });
        }
        if !tape.value(a).all_finite() {
            return Err(Error::Divergence { what: "rollout action".into(), step: t });
        }
        actions.push(a);
        pos = tape.add(pos, a)?;
        positions.push(pos);
        prev_action = a;
        for (i, s) in inits.iter().enumerate() {
            goal_state[i].0 = goal_state[i].0 + s.vel_lower;
            goal_state[i].1 = goal_state[i].1 + s.vel_upper;
        }
    }
    Ok(DiffRollout { obs, actions, positions })
}

/// Value-only batched rollout used for evaluation and discriminator data.
/// `policy` sees the (B, 8) observation matrix for step t and returns the
/// (B, 2) action matrix. Returns one plain trajectory per episode.
pub fn rollout_plain<F>(inits: &[EnvState], config: &EpisodeConfig, mut policy: F) -> Vec<Trajectory>
where
    F: FnMut(&Array, usize) -> Array,
{
    let b = inits.len();
    let horizon = config.horizon;
    let mut states: Vec<EnvState> = inits.to_vec();
    let mut trajs: Vec<Trajectory> = inits
        .iter()
        .map(|s| Trajectory {
            observations: Vec::with_capacity(horizon + 1),
            actions: Vec::with_capacity(horizon),
            expert_goal_choice: None,
            init: *s,
        })
        .collect();
    for t in 0..horizon {
        let mut obs = Array::zeros(vec![b, 2 * 4]);
        for (i, s) in states.iter().enumerate() {
            let o = s.observe();
            obs.data_mut()[i * 8..(i + 1) * 8].copy_from_slice(&o);
            trajs[i].observations.push(o);
        }
        let act = policy(&obs, t);
        debug_assert_eq!(act.shape(), [b, 2]);
        for i in 0..b {
            let a = Vec2::new(act.at(i, 0), act.at(i, 1));
            trajs[i].actions.push(a);
            states[i] = step(&states[i], a, config).expect("plain rollout within horizon");
        }
    }
    for (i, s) in states.iter().enumerate() {
        trajs[i].observations.push(s.observe());
    }
    trajs
}
