//! Exact finite-world analysis of conditional type shift.
//!
//! Builds the two-state traffic-light model, enumerates training and
//! test-time joints, computes entropies, mutual and interaction
//! information, and checks the type-shift theorem, its proof steps and the
//! corollary, all by exhaustive enumeration with f64 probabilities.
//! Information quantities are in bits (log base 2), with 0 log 0 = 0.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;


/// Finite tables for the single-step hierarchical model: data distribution
/// P(s, a), encoder e(g | s, a), policy pi(a | s, g). The prior is always
/// the exact marginal of the encoder under the data.
#[derive(Clone, Debug)]
pub struct DiscreteWorld {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_latents: usize,
    /// P(s, a), indexed s * n_actions + a.
    pub p_data: Vec<f64>,
    /// e(g | s, a), indexed (s * n_actions + a) * n_latents + g.
    pub encoder: Vec<f64>,
    /// pi(a | s, g), indexed (s * n_latents + g) * n_actions + a.
    pub policy: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

impl DiscreteWorld {
    pub fn validate(&self) -> Result<()> {
        let (s, a, g) = (self.n_states, self.n_actions, self.n_latents);
        if self.p_data.len() != s * a || self.encoder.len() != s * a * g || self.policy.len() != s * g * a
        {
            return Err(Error::invalid("table sizes do not match world dimensions"));
        }
        if self.p_data.iter().chain(&self.encoder).chain(&self.policy).any(|&p| p < 0.0) {
            return Err(Error::invalid("negative probability in world tables"));
        }
        let total: f64 = self.p_data.iter().sum();
        if (total - 1.0).abs() > ROW_TOL {
            return Err(Error::invalid(format!("P(s,a) sums to {total}")));
        }
        for sa in 0..s * a {
            let row: f64 = self.encoder[sa * g..(sa + 1) * g].iter().sum();
            if (row - 1.0).abs() > ROW_TOL {
                return Err(Error::invalid(format!("encoder row {sa} sums to {row}")));
            }
        }
        for sg in 0..s * g {
            let row: f64 = self.policy[sg * a..(sg + 1) * a].iter().sum();
            if (row - 1.0).abs() > ROW_TOL {
                return Err(Error::invalid(format!("policy row {sg} sums to {row}")));
            }
        }
        Ok(())
    }

    /// Exact marginal prior p(g) = E_{P(s,a)}[e(g | s, a)].
    pub fn prior(&self) -> Vec<f64> {
        let (s, a, g) = (self.n_states, self.n_actions, self.n_latents);
        let mut p = vec![0.0; g];
        for sa in 0..s * a {
            for gi in 0..g {
                p[gi] += self.p_data[sa] * self.encoder[sa * g + gi];
            }
        }
        p
    }

    /// P(s) marginal of the data.
    pub fn state_marginal(&self) -> Vec<f64> {
        let a = self.n_actions;
        (0..self.n_states).map(|s| self.p_data[s * a..(s + 1) * a].iter().sum()).collect()
    }

    /// Training joint P(s, a, g_e) = P(s, a) e(g | s, a), enumerated.
    pub fn train_joint(&self) -> Joint3 {
        let (s, a, g) = (self.n_states, self.n_actions, self.n_latents);
        let mut p = vec![0.0; s * a * g];
        for si in 0..s {
            for ai in 0..a {
                let sa = si * a + ai;
                for gi in 0..g {
                    p[(si * a + ai) * g + gi] = self.p_data[sa] * self.encoder[sa * g + gi];
                }
            }
        }
        Joint3 { nx: s, ny: a, nz: g, p }
    }

    /// Test joint P(s, a_hat, g_p) = P(s) p(g) pi(a | s, g); the type is
    /// drawn independently of the state by construction.
    pub fn test_joint(&self) -> Joint3 {
        let (s, a, g) = (self.n_states, self.n_actions, self.n_latents);
        let ps = self.state_marginal();
        let pg = self.prior();
        let mut p = vec![0.0; s * a * g];
        for si in 0..s {
            for gi in 0..g {
                for ai in 0..a {
                    p[(si * a + ai) * g + gi] =
                        ps[si] * pg[gi] * self.policy[(si * g + gi) * a + ai];
                }
            }
        }
        Joint3 { nx: s, ny: a, nz: g, p }
    }

    /// Expected probability that the model reproduces the data action:
    /// sum over (s, a, g) of P(s, a) e(g | s, a) pi(a | s, g).
    pub fn reconstruction_prob(&self) -> f64 {
        let (s, a, g) = (self.n_states, self.n_actions, self.n_latents);
        let mut acc = 0.0;
        for si in 0..s {
            for ai in 0..a {
                let sa = si * a + ai;
                for gi in 0..g {
                    acc += self.p_data[sa]
                        * self.encoder[sa * g + gi]
                        * self.policy[(si * g + gi) * a + ai];
                }
            }
        }
        acc
    }
}

/// A joint distribution over three finite variables (X, Y, Z), row-major.
#[derive(Clone, Debug)]
pub struct Joint3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

/// Shannon entropy in bits; rejects negative probabilities.
pub fn entropy_bits(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(Error::invalid(format!("negative probability {v}")));
        }
        if v > 0.0 {
            h -= v * v.log2();
        }
    }
    Ok(h)
}

/// Mutual information in bits of a 2-d joint table.
pub fn mutual_information(joint: &[f64], nx: usize, ny: usize) -> Result<f64> {
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    for x in 0..nx {
        for y in 0..ny {
            px[x] += joint[x * ny + y];
            py[y] += joint[x * ny + y];
        }
    }
    Ok(entropy_bits(&px)? + entropy_bits(&py)? - entropy_bits(joint)?)
}

impl Joint3 {
    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if (self.total() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("joint sums to {}", self.total())));
        }
        if self.p.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("negative probability in joint"));
        }
        Ok(())
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nz + z]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.nx];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[x] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[y] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.nz];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[z] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn marginal_xy(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.nx * self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[x * self.ny + y] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn marginal_xz(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.nx * self.nz];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[x * self.nz + z] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn marginal_yz(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ny * self.nz];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    m[y * self.nz + z] += self.at(x, y, z);
                }
            }
        }
        m
    }

    pub fn h_xyz(&self) -> Result<f64> {
        entropy_bits(&self.p)
    }

    /// H(Y | Z) = H(Y, Z) - H(Z).
    pub fn h_y_given_z(&self) -> Result<f64> {
        Ok(entropy_bits(&self.marginal_yz())? - entropy_bits(&self.marginal_z())?)
    }

    /// H(Y | X) = H(X, Y) - H(X).
    pub fn h_y_given_x(&self) -> Result<f64> {
        Ok(entropy_bits(&self.marginal_xy())? - entropy_bits(&self.marginal_x())?)
    }

    /// H(Y | X, Z) = H(X, Y, Z) - H(X, Z).
    pub fn h_y_given_xz(&self) -> Result<f64> {
        Ok(self.h_xyz()? - entropy_bits(&self.marginal_xz())?)
    }

    pub fn mi_xy(&self) -> Result<f64> {
        mutual_information(&self.marginal_xy(), self.nx, self.ny)
    }

    pub fn mi_xz(&self) -> Result<f64> {
        mutual_information(&self.marginal_xz(), self.nx, self.nz)
    }

    pub fn mi_yz(&self) -> Result<f64> {
        mutual_information(&self.marginal_yz(), self.ny, self.nz)
    }

    /// I(X, Y | Z) = H(X|Z) + H(Y|Z) - H(X,Y|Z).
    pub fn mi_xy_given_z(&self) -> Result<f64> {
        let h_z = entropy_bits(&self.marginal_z())?;
        let h_xz = entropy_bits(&self.marginal_xz())?;
        let h_yz = entropy_bits(&self.marginal_yz())?;
        Ok(h_xz + h_yz - h_z - self.h_xyz()?)
    }

    /// I(X, Z | Y).
    pub fn mi_xz_given_y(&self) -> Result<f64> {
        let h_y = entropy_bits(&self.marginal_y())?;
        let h_xy = entropy_bits(&self.marginal_xy())?;
        let h_yz = entropy_bits(&self.marginal_yz())?;
        Ok(h_xy + h_yz - h_y - self.h_xyz()?)
    }

    /// I(Y, Z | X).
    pub fn mi_yz_given_x(&self) -> Result<f64> {
        let h_x = entropy_bits(&self.marginal_x())?;
        let h_xy = entropy_bits(&self.marginal_xy())?;
        let h_xz = entropy_bits(&self.marginal_xz())?;
        Ok(h_xy + h_xz - h_x - self.h_xyz()?)
    }

    /// Interaction information I(X, Y, Z) = I(X, Y) - I(X, Y | Z);
    /// symmetric in its arguments.
    pub fn interaction(&self) -> Result<f64> {
        Ok(self.mi_xy()? - self.mi_xy_given_z()?)
    }
}

/// Everything `verify_theorem` measures on one world.
#[derive(Clone, Copy, Debug)]
pub struct InfoReport {
    /// H(A | Ge) on the training joint.
    pub h_a_given_ge: f64,
    /// I(S, A) on the training joint.
    pub i_s_a: f64,
    /// I(S, A_hat) on the test joint.
    pub i_s_ahat: f64,
    /// H(A_hat | Gp) on the test joint.
    pub h_ahat_given_gp: f64,
    pub h_a_given_s: f64,
    pub h_ahat_given_s: f64,
    /// I(A, Ge, S): positive when reconstruction leans on state info.
    pub interaction_train: f64,
    /// I(A_hat, Gp, S): weakly negative since Gp is independent of S.
    pub interaction_test: f64,
    /// Joint-entropy variant H(A, Ge) / H(A_hat, Gp), logged alongside the
    /// conditional form used by the preconditions.
    pub h_joint_a_ge: f64,
    pub h_joint_ahat_gp: f64,
    /// H(A | S, Ge) <= 1e-9 and the policy reproduces the data action.
    pub rec_ok: bool,
    /// Precondition 1: H(A | Ge) < I(S, A).
    pub precondition_info: bool,
    /// Precondition 2: H(A | Ge) = H(A_hat | Gp) within 1e-9.
    pub precondition_entropy: bool,
    /// Corollary trigger: H(A | Ge) = 0 within 1e-9.
    pub corollary_applies: bool,
    /// I(S, A_hat) < I(S, A) and H(A_hat | S) > H(A | S).
    pub conclusion_holds: bool,
    /// Corollary conclusion I(S, A_hat) = 0 within 1e-9.
    pub corollary_holds: bool,
}

const TOL: f64 = 1e-9;

impl InfoReport {
    /// Both preconditions hold on a world the theorem speaks about.
    pub fn preconditions_met(&self) -> bool {
        self.rec_ok && self.precondition_info && self.precondition_entropy
    }

    /// The theorem made a claim here and the claim failed.
    pub fn theorem_violated(&self) -> bool {
        self.preconditions_met() && !self.conclusion_holds
    }

    pub fn corollary_violated(&self) -> bool {
        self.rec_ok && self.corollary_applies && !self.corollary_holds
    }
}

/// Evaluate the theorem, its proof steps and the corollary on one world by
/// exact enumeration.
pub fn verify_theorem(world: &DiscreteWorld) -> Result<InfoReport> {
    world.validate()?;
    let train = world.train_joint();
    train.validate()?;
    let test = world.test_joint();
    test.validate()?;

    let h_a_given_ge = train.h_y_given_z()?;
    let i_s_a = train.mi_xy()?;
    let h_a_given_s = train.h_y_given_x()?;
    let h_a_given_s_ge = train.h_y_given_xz()?;
    let i_s_ahat = test.mi_xy()?;
    let h_ahat_given_gp = test.h_y_given_z()?;
    let h_ahat_given_s = test.h_y_given_x()?;
    let interaction_train = train.interaction()?;
    let interaction_test = test.interaction()?;
    let h_joint_a_ge = entropy_bits(&train.marginal_yz())?;
    let h_joint_ahat_gp = entropy_bits(&test.marginal_yz())?;

    let rec_ok = h_a_given_s_ge <= TOL && world.reconstruction_prob() >= 1.0 - TOL;
    let precondition_info = h_a_given_ge < i_s_a - TOL;
    let precondition_entropy = (h_a_given_ge - h_ahat_given_gp).abs() <= TOL;
    let corollary_applies = h_a_given_ge <= TOL;
    let conclusion_holds = i_s_ahat < i_s_a && h_ahat_given_s > h_a_given_s;
    let corollary_holds = i_s_ahat.abs() <= TOL;

    Ok(InfoReport {
        h_a_given_ge,
        i_s_a,
        i_s_ahat,
        h_ahat_given_gp,
        h_a_given_s,
        h_ahat_given_s,
        interaction_train,
        interaction_test,
        h_joint_a_ge,
        h_joint_ahat_gp,
        rec_ok,
        precondition_info,
        precondition_entropy,
        corollary_applies,
        conclusion_holds,
        corollary_holds,
    })
}

/// The two hand-constructed solutions for the traffic-light data of the
/// simplified model. Bernoulli(p) here puts probability p on the second
/// outcome, so the solution-2 prior is B(epsilon) over g = 1.
pub fn build_traffic_world(epsilon: f64, solution: u8) -> Result<DiscreteWorld> {
    if !(0.0..0.5).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 0.5)")));
    }
    let (s, a, g) = (2usize, 2usize, 2usize);
    let mut p_data = vec![0.0; 4];
    for si in 0..2 {
        for ai in 0..2 {
            p_data[si * 2 + ai] = if si == ai { 0.5 * (1.0 - epsilon) } else { 0.5 * epsilon };
        }
    }
    let mut encoder = vec![0.0; 8];
    let mut policy = vec![0.0; 8];
    match solution {
        1 => {
            // type = intended action; policy follows the type, ignores s
            for si in 0..2 {
                for ai in 0..2 {
                    encoder[(si * 2 + ai) * 2 + ai] = 1.0;
                }
                for gi in 0..2 {
                    policy[(si * 2 + gi) * 2 + gi] = 1.0;
                }
            }
        }
        2 => {
            // type = "not paying attention"; policy matches the state when
            // g = 0 and contradicts it when g = 1
            for si in 0..2 {
                for ai in 0..2 {
                    let gi = usize::from(si != ai);
                    encoder[(si * 2 + ai) * 2 + gi] = 1.0;
                }
                policy[(si * 2) * 2 + si] = 1.0;
                policy[(si * 2 + 1) * 2 + (1 - si)] = 1.0;
            }
        }
        other => return Err(Error::invalid(format!("unknown solution {other}"))),
    }
    let world = DiscreteWorld { n_states: s, n_actions: a, n_latents: g, p_data, encoder, policy };
    world.validate()?;
    Ok(world)
}

/// Tallies from a random-world sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct SweepSummary {
    pub n: usize,
    pub rec_failed: usize,
    pub preconditions_met: usize,
    pub conclusion_violations: usize,
    pub corollary_cases: usize,
    pub corollary_violations: usize,
}

/// Sample `n` random worlds whose policies decode the encoder by
/// construction (plus a share of deliberately broken ones) and verify the
/// theorem on each. Deterministic given the seed.
pub fn random_world_sweep(n: usize, seed: u64) -> Result<SweepSummary> {
    if n == 0 {
        return Err(Error::invalid("sweep needs n >= 1"));
    }
    let mut summary = SweepSummary { n, ..Default::default() };
    for i in 0..n {
        let mut rng = substream(seed, "world-sweep", i as u64);
        let world = random_world(&mut rng, i % 3);
        let report = verify_theorem(&world)?;
        if !report.rec_ok {
            summary.rec_failed += 1;
            continue;
        }
        if report.preconditions_met() {
            summary.preconditions_met += 1;
            if !report.conclusion_holds {
                summary.conclusion_violations += 1;
            }
        }
        if report.corollary_applies {
            summary.corollary_cases += 1;
            if !report.corollary_holds {
                summary.corollary_violations += 1;
            }
        }
    }
    Ok(summary)
}

/// Random world construction. Kind 0 encodes the action directly in the
/// type (policy ignores the state), kind 1 uses per-state injective
/// encoders (policy inverts them), kind 2 deliberately conflates actions so
/// reconstruction fails.
fn random_world(rng: &mut impl Rng, kind: usize) -> DiscreteWorld {
    let n_states = rng.random_range(2..=4usize);
    let n_actions = rng.random_range(2..=4usize);
    let n_latents = rng.random_range(n_actions..=5usize);
    let mut p_data = vec![0.0; n_states * n_actions];
    let mut total = 0.0;
    for v in p_data.iter_mut() {
        *v = 0.05 + rng.random::<f64>();
        total += *v;
    }
    for v in p_data.iter_mut() {
        *v /= total;
    }
    let mut encoder = vec![0.0; n_states * n_actions * n_latents];
    let mut policy = vec![0.0; n_states * n_latents * n_actions];
    let perm = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
        p
    };
    match kind {
        0 => {
            // global injection sigma: A -> G
            let sigma: Vec<usize> = perm(rng, n_latents).into_iter().take(n_actions).collect();
            for s in 0..n_states {
                for a in 0..n_actions {
                    encoder[(s * n_actions + a) * n_latents + sigma[a]] = 1.0;
                }
                for g in 0..n_latents {
                    let decoded = sigma.iter().position(|&x| x == g).unwrap_or(0);
                    policy[(s * n_latents + g) * n_actions + decoded] = 1.0;
                }
            }
        }
        1 => {
            // per-state injections sigma_s: A -> G
            let sigmas: Vec<Vec<usize>> = (0..n_states)
                .map(|_| perm(rng, n_latents).into_iter().take(n_actions).collect())
                .collect();
            for s in 0..n_states {
                for a in 0..n_actions {
                    encoder[(s * n_actions + a) * n_latents + sigmas[s][a]] = 1.0;
                }
            }
            for s in 0..n_states {
                for g in 0..n_latents {
                    let decoded = sigmas[s].iter().position(|&x| x == g).unwrap_or_else(|| {
                        // unseen (s, g): decode to the unique globally
                        // consistent action when one exists, else action 0
                        let hits: Vec<usize> = sigmas
                            .iter()
                            .filter_map(|sg| sg.iter().position(|&x| x == g))
                            .collect();
                        if !hits.is_empty() && hits.iter().all(|&h| h == hits[0]) {
                            hits[0]
                        } else {
                            0
                        }
                    });
                    policy[(s * n_latents + g) * n_actions + decoded] = 1.0;
                }
            }
        }
        _ => {
            // conflating encoder: every action maps to type 0
            for s in 0..n_states {
                for a in 0..n_actions {
                    encoder[(s * n_actions + a) * n_latents] = 1.0;
                }
                for g in 0..n_latents {
                    policy[(s * n_latents + g) * n_actions] = 1.0;
                }
            }
        }
    }
    DiscreteWorld { n_states, n_actions, n_latents, p_data, encoder, policy }
}
