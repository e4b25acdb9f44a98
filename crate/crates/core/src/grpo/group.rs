use super::{GrpoConfig, GrpoError, RewardGroup, Trajectory};

/// Standard deviations below this are treated as zero when normalizing.
pub const ADV_STD_FLOOR: f64 = 1e-8;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-pass population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub retained: bool,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Group-relative advantages plus the STD filter decision.
///
/// Filtering happens first: a dropped group gets all-zero advantages and is
/// never normalized.
pub fn compute_group(rewards: &[f64], cfg: &GrpoConfig) -> Result<GroupStats, GrpoError> {
    if rewards.len() != cfg.group_size {
        return Err(GrpoError::GroupSize {
            expected: cfg.group_size,
            got: rewards.len(),
        });
    }
    if let Some((index, &value)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward { index, value });
    }
    let m = mean(rewards);
    let std = population_std(rewards);
    let retained = !cfg.filters() || std > cfg.tau_std;
    let advantages = if !retained {
        vec![0.0; rewards.len()]
    } else if cfg.adv_std_normalize {
        let denom = std.max(ADV_STD_FLOOR);
        rewards.iter().map(|r| (r - m) / denom).collect()
    } else {
        rewards.iter().map(|r| r - m).collect()
    };
    Ok(GroupStats {
        retained,
        mean: m,
        std,
        advantages,
    })
}

pub fn build_group(
    item_id: String,
    trajectories: Vec<Trajectory>,
    rewards: Vec<f64>,
    cfg: &GrpoConfig,
) -> Result<RewardGroup, GrpoError> {
    let stats = compute_group(&rewards, cfg)?;
    Ok(RewardGroup {
        item_id,
        trajectories,
        rewards,
        reward_mean: stats.mean,
        reward_std: stats.std,
        retained: stats.retained,
        advantages: stats.advantages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::Stage;
    use proptest::prelude::*;

    fn cfg(n: usize, stage: Stage) -> GrpoConfig {
        GrpoConfig {
            group_size: n,
            ..GrpoConfig::default()
        }
        .for_stage(stage)
    }

    #[test]
    fn constant_group_is_filtered_in_stage2() {
        let g = compute_group(&[0.5; 4], &cfg(4, Stage::Stage2)).unwrap();
        assert!(!g.retained);
        assert!(g.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn constant_group_is_kept_in_stage1_with_zero_advantages() {
        let g = compute_group(&[0.5; 4], &cfg(4, Stage::Stage1)).unwrap();
        assert!(g.retained);
        assert!(g.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn two_sample_group() {
        // mean 0.5, population std 0.5
        let g = compute_group(&[1.0, 0.0], &cfg(2, Stage::Stage2)).unwrap();
        assert!(g.retained);
        assert_eq!(g.advantages, vec![1.0, -1.0]);
    }

    #[test]
    fn sub_threshold_spread_is_filtered() {
        let rewards = [0.7, 0.7 + 1e-3, 0.7, 0.7 + 1e-3];
        let g = compute_group(&rewards, &cfg(4, Stage::Stage2)).unwrap();
        assert!((g.std - 5e-4).abs() < 1e-12);
        assert!(!g.retained);
    }

    #[test]
    fn unnormalized_mode_only_centers() {
        let c = GrpoConfig {
            adv_std_normalize: false,
            ..cfg(3, Stage::Stage2)
        };
        let g = compute_group(&[0.0, 0.3, 0.9], &c).unwrap();
        let expect = [-0.4, -0.1, 0.5];
        for (a, e) in g.advantages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            compute_group(&[1.0], &cfg(2, Stage::Stage2)),
            Err(GrpoError::GroupSize { expected: 2, got: 1 })
        ));
        assert!(matches!(
            compute_group(&[1.0, f64::NAN], &cfg(2, Stage::Stage2)),
            Err(GrpoError::NonFiniteReward { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn shift_and_scale_invariance(
            rewards in prop::collection::vec(0.0f64..1.0, 8),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let c = cfg(8, Stage::Stage2);
            let base = compute_group(&rewards, &c).unwrap();
            prop_assume!(base.std > 1e-3);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let a = compute_group(&shifted, &c).unwrap();
            let b = compute_group(&scaled, &c).unwrap();
            for i in 0..8 {
                prop_assert!((a.advantages[i] - base.advantages[i]).abs() < 1e-9);
                prop_assert!((b.advantages[i] - base.advantages[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn retained_groups_are_standardized(rewards in prop::collection::vec(0.0f64..1.0, 16)) {
            let g = compute_group(&rewards, &cfg(16, Stage::Stage2)).unwrap();
            prop_assert_eq!(g.retained, population_std(&rewards) > 1e-3);
            if g.retained {
                prop_assert!(mean(&g.advantages).abs() < 1e-10);
                prop_assert!((population_std(&g.advantages) - 1.0).abs() < 1e-8);
            }
        }
    }
}
