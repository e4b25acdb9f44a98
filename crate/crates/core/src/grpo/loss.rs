use super::{entropy_threshold, EntropyGate, GrpoConfig, GrpoError, RewardGroup, Trajectory};
use crate::item::ToyItem;
use crate::policy::{accumulate_weighted_grad, logprob_and_entropy, Policy};

/// k3 estimator of KL(new || ref) for one token, and its derivative with
/// respect to `logp_new`.
fn k3(logp_new: f64, logp_ref: f64) -> (f64, f64) {
    let d = logp_ref - logp_new;
    let e = d.exp();
    (e - d - 1.0, 1.0 - e)
}

/// Token-averaged k3 KL estimate of a trajectory against the reference.
pub fn kl_penalty(traj: &Trajectory) -> Result<f64, GrpoError> {
    let reference = traj
        .logp_ref
        .as_ref()
        .ok_or_else(|| GrpoError::Config("kl penalty needs reference log-probs".into()))?;
    if reference.len() != traj.logp_new.len() || traj.logp_new.is_empty() {
        return Err(GrpoError::Config("reference log-probs do not match trajectory length".into()));
    }
    let total: f64 = traj.logp_new.iter().zip(reference).map(|(&n, &r)| k3(n, r).0).sum();
    Ok(total / traj.logp_new.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    /// Negated objective.
    pub loss: f64,
    /// `d(loss)/d(logp_new[t])`, indexed `[group][trajectory][token]`.
    pub grad_coeff: Vec<Vec<Vec<f64>>>,
    /// Tokens across retained groups, gated or not (the normalizer).
    pub token_count: usize,
    /// Tokens that passed the entropy gate.
    pub gated_in: usize,
}

/// Token-level clipped surrogate with the entropy gate and optional KL term.
///
/// `J = (1 / sum |o|) * sum_i sum_t 1[H >= gate] * (min(r A, clip(r) A) - beta * k3)`
/// over retained groups, with `r = exp(logp_new - logp_old)`. Returns `-J`.
pub fn surrogate_loss(
    groups: &[RewardGroup],
    gate_threshold: f64,
    cfg: &GrpoConfig,
) -> Result<SurrogateOutput, GrpoError> {
    let lo = 1.0 - cfg.eps_low;
    let hi = 1.0 + cfg.eps_high;
    let use_kl = cfg.beta > 0.0;

    let token_count: usize = groups
        .iter()
        .filter(|g| g.retained)
        .flat_map(|g| &g.trajectories)
        .map(Trajectory::len)
        .sum();
    let norm = if token_count > 0 { 1.0 / token_count as f64 } else { 0.0 };

    let mut objective = 0.0;
    let mut gated_in = 0;
    let mut grad_coeff = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let mut per_group = Vec::with_capacity(group.trajectories.len());
        for (ti, traj) in group.trajectories.iter().enumerate() {
            let len = traj.len();
            if !group.retained {
                per_group.push(vec![0.0; len]);
                continue;
            }
            if traj.logp_new.len() != len || traj.logp_old.len() != len || traj.entropy.len() != len {
                return Err(GrpoError::Shape { group: gi, trajectory: ti });
            }
            let reference = if use_kl {
                match &traj.logp_ref {
                    Some(r) if r.len() == len => Some(r),
                    Some(_) => return Err(GrpoError::Shape { group: gi, trajectory: ti }),
                    None => {
                        return Err(GrpoError::Config(
                            "beta > 0 but trajectory carries no reference log-probs".into(),
                        ))
                    }
                }
            } else {
                None
            };
            let adv = group.advantages[ti];
            let mut coeffs = vec![0.0; len];
            for t in 0..len {
                let ratio = (traj.logp_new[t] - traj.logp_old[t]).exp();
                if !ratio.is_finite() {
                    return Err(GrpoError::Numerical { group: gi, trajectory: ti, token: t });
                }
                if traj.entropy[t] < gate_threshold {
                    continue;
                }
                gated_in += 1;
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(lo, hi) * adv;
                let flat = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
                let mut term = unclipped.min(clipped);
                let mut dterm = if flat { 0.0 } else { unclipped };
                if let Some(r) = reference {
                    let (kl, dkl) = k3(traj.logp_new[t], r[t]);
                    term -= cfg.beta * kl;
                    dterm -= cfg.beta * dkl;
                }
                objective += term;
                coeffs[t] = -dterm * norm;
            }
            per_group.push(coeffs);
        }
        grad_coeff.push(per_group);
    }
    let loss = if token_count > 0 { -(objective / token_count as f64) } else { 0.0 };
    Ok(SurrogateOutput {
        loss,
        grad_coeff,
        token_count,
        gated_in,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub gate_threshold: f64,
    pub token_count: usize,
    pub gated_in: usize,
    /// True when a non-trivial gate threshold had to be evaluated.
    pub gate_consulted: bool,
}

/// Re-scores retained groups under `policy`, gates, and evaluates the loss
/// (plus its parameter gradient when `want_grad`). `items[g]` must be the
/// item of `groups[g]`.
pub fn batch_objective<P: Policy>(
    policy: &P,
    items: &[&ToyItem],
    groups: &mut [RewardGroup],
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<BatchObjective, GrpoError> {
    debug_assert_eq!(items.len(), groups.len());
    let mut pooled = Vec::new();
    for (item, group) in items.iter().zip(groups.iter_mut()) {
        if !group.retained {
            continue;
        }
        for traj in &mut group.trajectories {
            let (lp, h) = logprob_and_entropy(policy, item, &traj.tokens)?;
            traj.logp_new = lp;
            traj.entropy = h;
            pooled.extend_from_slice(&traj.entropy);
        }
    }
    let gate_consulted = !matches!(cfg.entropy_gate, EntropyGate::Off);
    let gate_threshold = if pooled.is_empty() {
        f64::NEG_INFINITY
    } else {
        entropy_threshold(&pooled, cfg.entropy_gate)?
    };
    let out = surrogate_loss(groups, gate_threshold, cfg)?;
    let grad = if want_grad {
        let mut grad = vec![0.0; policy.params().len()];
        for ((item, group), coeffs) in items.iter().zip(groups.iter()).zip(&out.grad_coeff) {
            if !group.retained {
                continue;
            }
            for (traj, c) in group.trajectories.iter().zip(coeffs) {
                accumulate_weighted_grad(policy, item, &traj.tokens, c, &mut grad)?;
            }
        }
        Some(grad)
    } else {
        None
    };
    Ok(BatchObjective {
        loss: out.loss,
        grad,
        gate_threshold,
        token_count: out.token_count,
        gated_in: out.gated_in,
        gate_consulted: gate_consulted && !pooled.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::{build_group, Stage};

    fn traj(new: Vec<f64>, old: Vec<f64>, entropy: Vec<f64>) -> Trajectory {
        let n = new.len();
        Trajectory {
            item_id: "i".into(),
            tokens: vec![0; n],
            logp_ref: Some(new.clone()),
            logp_new: new,
            logp_old: old,
            entropy,
            parsed_score: Some(3.0),
        }
    }

    fn group_with(trajs: Vec<Trajectory>, advantages: Vec<f64>) -> RewardGroup {
        RewardGroup {
            item_id: "i".into(),
            rewards: vec![0.0; trajs.len()],
            trajectories: trajs,
            reward_mean: 0.0,
            reward_std: 1.0,
            retained: true,
            advantages,
        }
    }

    fn cfg0() -> GrpoConfig {
        GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        }
        .for_stage(Stage::Stage1)
    }

    #[test]
    fn zero_advantage_contributes_nothing() {
        let g = group_with(vec![traj(vec![-0.1, -2.0], vec![-0.5, -1.0], vec![1.0, 1.0])], vec![0.0]);
        let out = surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_coeff[0][0].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn on_policy_loss_is_mean_advantage() {
        let t1 = traj(vec![-1.0, -0.5, -0.2], vec![-1.0, -0.5, -0.2], vec![1.0; 3]);
        let t2 = traj(vec![-0.3], vec![-0.3], vec![1.0]);
        let g = group_with(vec![t1, t2], vec![0.75, -1.5]);
        let out = surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()).unwrap();
        // J = (3 * 0.75 - 1.5) / 4
        assert!((out.loss + 0.1875).abs() < 1e-15);
        for &c in &out.grad_coeff[0][0] {
            assert!((c + 0.75 / 4.0).abs() < 1e-15);
        }
        assert!((out.grad_coeff[0][1][0] - 1.5 / 4.0).abs() < 1e-15);
        assert_eq!(out.token_count, 4);
        assert_eq!(out.gated_in, 4);
    }

    #[test]
    fn clipped_branch_is_flat() {
        let r = 1.5f64;
        let t = traj(vec![r.ln()], vec![0.0], vec![1.0]);
        let g = group_with(vec![t], vec![1.0]);
        let out = surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()).unwrap();
        assert!((out.loss + 1.2).abs() < 1e-15);
        assert_eq!(out.grad_coeff[0][0][0], 0.0);
        // wrong side of the clip keeps the unclipped gradient
        let t = traj(vec![r.ln()], vec![0.0], vec![1.0]);
        let g = group_with(vec![t], vec![-1.0]);
        let out = surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()).unwrap();
        assert!((out.loss - 1.5).abs() < 1e-12);
        assert!((out.grad_coeff[0][0][0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gated_out_tokens_have_zero_coefficient_but_count_in_normalizer() {
        let t = traj(vec![-0.2, -0.2], vec![-0.2, -0.2], vec![0.1, 2.0]);
        let g = group_with(vec![t], vec![1.0]);
        let out = surrogate_loss(&[g], 1.0, &cfg0()).unwrap();
        assert_eq!(out.grad_coeff[0][0][0], 0.0);
        assert!((out.grad_coeff[0][0][1] + 0.5).abs() < 1e-15);
        assert!((out.loss + 0.5).abs() < 1e-15);
        assert_eq!(out.token_count, 2);
        assert_eq!(out.gated_in, 1);
    }

    #[test]
    fn non_retained_groups_are_excluded() {
        let cfg = GrpoConfig {
            group_size: 2,
            ..GrpoConfig::default()
        };
        let t = || traj(vec![-0.1], vec![-0.3], vec![1.0]);
        let dropped = build_group("i".into(), vec![t(), t()], vec![0.4, 0.4], &cfg).unwrap();
        assert!(!dropped.retained);
        let out = surrogate_loss(&[dropped], f64::NEG_INFINITY, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.token_count, 0);
    }

    #[test]
    fn kl_examples() {
        let mut t = traj(vec![-1.0, -2.0], vec![-1.0, -2.0], vec![1.0; 2]);
        assert_eq!(kl_penalty(&t).unwrap(), 0.0);
        let ln2 = 2f64.ln();
        t.logp_ref = Some(vec![-1.0 + ln2, -2.0 + ln2]);
        // 2 - ln 2 - 1
        assert!((kl_penalty(&t).unwrap() - 0.306_852_819_440_054_7).abs() < 1e-15);
        t.logp_ref = None;
        assert!(matches!(kl_penalty(&t), Err(GrpoError::Config(_))));
    }

    #[test]
    fn missing_reference_with_beta_is_config_error() {
        let mut t = traj(vec![-0.1], vec![-0.1], vec![1.0]);
        t.logp_ref = None;
        let g = group_with(vec![t], vec![1.0]);
        let cfg = GrpoConfig::default().for_stage(Stage::Stage1);
        assert!(matches!(surrogate_loss(&[g.clone()], f64::NEG_INFINITY, &cfg), Err(GrpoError::Config(_))));
        // beta = 0 ignores the reference entirely
        assert!(surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()).is_ok());
    }

    #[test]
    fn divergent_ratio_reports_token() {
        let t = traj(vec![-0.1, 800.0], vec![-0.1, -0.1], vec![1.0; 2]);
        let g = group_with(vec![t], vec![1.0]);
        assert!(matches!(
            surrogate_loss(&[g], f64::NEG_INFINITY, &cfg0()),
            Err(GrpoError::Numerical { group: 0, trajectory: 0, token: 1 })
        ));
    }
}
