use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_objective, build_group, GrpoConfig, GrpoError, RewardGroup, Stage};
use crate::item::ToyItem;
use crate::policy::{logprob_and_entropy, sample, Policy};
use crate::reward::{reward_trajectory, RewardSpec};
use crate::rng;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const ROLLOUT_STREAM: u64 = 0x524f_4c4c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 4.0, momentum: 0.0 }
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        let SgdConfig { lr, momentum } = self.config;
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub reward: RewardSpec,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    /// Reason tokens emitted before the score token.
    pub prefix_len: usize,
    /// Gradient updates per rollout batch; 1 keeps ratios at exactly 1.
    pub updates_per_batch: usize,
    /// Serialize rollouts. Results are identical either way; this only
    /// removes thread scheduling from the picture.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            reward: RewardSpec::default(),
            optimizer: SgdConfig::default(),
            batch_size: 64,
            prefix_len: 6,
            updates_per_batch: 1,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        self.reward.validate()?;
        self.grpo.for_stage(Stage::Stage1).validate()?;
        if self.batch_size == 0 {
            return Err(GrpoError::Config("batch_size must be positive".into()));
        }
        if self.updates_per_batch == 0 {
            return Err(GrpoError::Config("updates_per_batch must be positive".into()));
        }
        let SgdConfig { lr, momentum } = self.optimizer;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(GrpoError::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(GrpoError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 2,
            stage2_epochs: 2,
        }
    }
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.stage1_epochs {
            Stage::Stage1
        } else {
            Stage::Stage2
        }
    }

    fn starts_stage(&self, epoch: usize) -> bool {
        epoch == 0 || epoch == self.stage1_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: Stage,
    pub mean_reward: f64,
    pub retained_fraction: f64,
    pub gated_in_fraction: f64,
    pub mean_entropy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: usize,
    pub mean_reward: f64,
    pub retained_fraction: f64,
    pub gated_in_fraction: f64,
    pub mean_entropy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
    /// Steps whose loss evaluation had to compute a gate threshold.
    pub gate_evaluations: usize,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<P> {
    pub policy: P,
    /// Frozen snapshot taken at the start of the current stage.
    pub reference: P,
    pub optimizer: Sgd,
    pub epochs_done: usize,
    pub global_step: u64,
}

impl<P: Policy> TrainState<P> {
    pub fn new(policy: P, optimizer: SgdConfig) -> Self {
        Self {
            reference: policy.clone(),
            policy,
            optimizer: Sgd::new(optimizer),
            epochs_done: 0,
            global_step: 0,
        }
    }
}

pub trait CheckpointSink<P> {
    fn save(&mut self, state: &TrainState<P>, log: &TrainingLog) -> std::io::Result<()>;
}

pub struct NoCheckpoints;

impl<P> CheckpointSink<P> for NoCheckpoints {
    fn save(&mut self, _: &TrainState<P>, _: &TrainingLog) -> std::io::Result<()> {
        Ok(())
    }
}

fn rollout_group<P: Policy>(
    index: usize,
    item: &ToyItem,
    old: &P,
    reference: &P,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RewardGroup, GrpoError> {
    let n = cfg.grpo.group_size;
    let mut trajectories = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for j in 0..n {
        let mut r = rng::stream(seed, &[index as u64, j as u64]);
        let mut traj = sample(old, item, cfg.prefix_len, &mut r)?;
        if cfg.grpo.beta > 0.0 {
            traj.logp_ref = Some(logprob_and_entropy(reference, item, &traj.tokens)?.0);
        }
        rewards.push(reward_trajectory(&traj, item, &cfg.reward));
        trajectories.push(traj);
    }
    build_group(item.id.clone(), trajectories, rewards, &cfg.grpo)
}

/// One rollout-and-update step. `cfg.grpo` is used as given, so callers pick
/// the stage via [`GrpoConfig::for_stage`]. Returns the report and whether a
/// gate threshold was evaluated.
#[allow(clippy::too_many_arguments)]
pub fn train_step<P: Policy>(
    batch: &[ToyItem],
    policy: &mut P,
    old: &P,
    reference: &P,
    cfg: &TrainConfig,
    step: u64,
    seed: u64,
    optimizer: &mut Sgd,
) -> Result<(StepReport, bool), GrpoError> {
    let mut groups: Vec<RewardGroup> = if cfg.deterministic {
        batch
            .iter()
            .enumerate()
            .map(|(i, item)| rollout_group(i, item, old, reference, cfg, seed))
            .collect::<Result<_, _>>()?
    } else {
        batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| rollout_group(i, item, old, reference, cfg, seed))
            .collect::<Result<_, _>>()?
    };

    let reward_count: usize = groups.iter().map(|g| g.rewards.len()).sum();
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / reward_count as f64;
    let (entropy_sum, token_total) = groups
        .iter()
        .flat_map(|g| &g.trajectories)
        .fold((0.0, 0usize), |(s, n), t| (s + t.entropy.iter().sum::<f64>(), n + t.len()));
    let retained = groups.iter().filter(|g| g.retained).count();

    let mut report = StepReport {
        step,
        stage: cfg.grpo.stage,
        mean_reward,
        retained_fraction: retained as f64 / groups.len() as f64,
        gated_in_fraction: 0.0,
        mean_entropy: entropy_sum / token_total as f64,
        loss: 0.0,
    };
    if retained == 0 {
        return Ok((report, false));
    }

    let items: Vec<&ToyItem> = batch.iter().collect();
    let mut consulted = false;
    for update in 0..cfg.updates_per_batch {
        let obj = batch_objective(policy, &items, &mut groups, &cfg.grpo, true)?;
        consulted |= obj.gate_consulted;
        if update == 0 {
            report.loss = obj.loss;
            report.gated_in_fraction = obj.gated_in as f64 / obj.token_count.max(1) as f64;
        }
        let grad = obj.grad.expect("gradient requested");
        optimizer.step(policy.params_mut(), &grad);
    }
    Ok((report, consulted))
}

fn summarize(epoch: usize, stage: Stage, steps: &[StepReport]) -> EpochReport {
    let n = steps.len().max(1) as f64;
    let avg = |f: fn(&StepReport) -> f64| steps.iter().map(f).sum::<f64>() / n;
    EpochReport {
        epoch,
        stage,
        steps: steps.len(),
        mean_reward: avg(|s| s.mean_reward),
        retained_fraction: avg(|s| s.retained_fraction),
        gated_in_fraction: avg(|s| s.gated_in_fraction),
        mean_entropy: avg(|s| s.mean_entropy),
        loss: avg(|s| s.loss),
    }
}

/// Runs the remaining epochs of `schedule` from `state`.
///
/// Stage 1 epochs use the Gaussian/threshold reward alone; stage 2 epochs add
/// STD filtering and entropy gating. The old policy is refreshed before every
/// rollout batch and the reference is re-snapshotted at each stage start.
/// After each epoch the state is handed to `sink`; if that fails the run
/// stops and `state` still holds the last completed epoch.
pub fn run_training<P: Policy>(
    dataset: &[ToyItem],
    schedule: Schedule,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState<P>,
    log: &mut TrainingLog,
    sink: &mut dyn CheckpointSink<P>,
) -> Result<(), GrpoError> {
    if dataset.is_empty() {
        return Err(GrpoError::Config("training dataset is empty".into()));
    }
    cfg.validate()?;
    for epoch in state.epochs_done..schedule.total() {
        let stage = schedule.stage_of(epoch);
        let stage_cfg = TrainConfig {
            grpo: cfg.grpo.for_stage(stage),
            ..*cfg
        };
        stage_cfg.grpo.validate()?;
        if schedule.starts_stage(epoch) {
            state.reference = state.policy.clone();
        }

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
        let first_step = log.steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ToyItem> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let old = state.policy.clone();
            let step_seed = rng::derive_seed(seed, &[ROLLOUT_STREAM, state.global_step]);
            let (report, consulted) = train_step(
                &batch,
                &mut state.policy,
                &old,
                &state.reference,
                &stage_cfg,
                state.global_step,
                step_seed,
                &mut state.optimizer,
            )?;
            log.gate_evaluations += usize::from(consulted);
            log.steps.push(report);
            state.global_step += 1;
        }
        log.epochs.push(summarize(epoch, stage, &log.steps[first_step..]));
        state.epochs_done = epoch + 1;
        sink.save(state, log)
            .map_err(|source| GrpoError::Checkpoint { epoch, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::item::TaskKind;
    use crate::policy::{PolicyParams, Vocabulary};

    fn items(n: usize) -> Vec<ToyItem> {
        (0..n)
            .map(|i| ToyItem {
                id: format!("it{i}"),
                task: TaskKind::ALL[i % 3],
                features: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()],
                truth: 1.0 + 0.1 * ((i * 7) % 41) as f64,
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            grpo: GrpoConfig {
                group_size: 4,
                ..GrpoConfig::default()
            },
            batch_size: 4,
            prefix_len: 3,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_step_and_momentum() {
        let mut opt = Sgd::new(SgdConfig { lr: 0.5, momentum: 0.5 });
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[1.0, -2.0]);
        assert_eq!(p, vec![0.5, 3.0]);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![0.25, 3.5]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            optimizer: SgdConfig { lr: 0.0, momentum: 0.0 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeded_steps_are_reproducible() {
        let data = items(2);
        let cfg = TrainConfig {
            grpo: small_cfg().grpo.for_stage(Stage::Stage1),
            ..small_cfg()
        };
        let mut r = rng::stream(3, &[]);
        let init = PolicyParams::tabular_random(Vocabulary::default(), 2, 0.3, &mut r);
        let run = |deterministic: bool| {
            let cfg = TrainConfig { deterministic, ..cfg };
            let mut pol = init.clone();
            let mut opt = Sgd::new(cfg.optimizer);
            let (rep, _) = train_step(&data, &mut pol, &init, &init, &cfg, 0, 99, &mut opt).unwrap();
            (rep, pol)
        };
        let (a, pa) = run(true);
        let (b, pb) = run(true);
        let (c, pc) = run(false);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a, c);
        assert_eq!(pa, pb);
        assert_eq!(pa, pc);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let pol = PolicyParams::tabular_zeros(Vocabulary::default(), 2);
        let mut state = TrainState::new(pol, SgdConfig::default());
        let mut log = TrainingLog::default();
        let err = run_training(&[], Schedule::default(), &small_cfg(), 1, &mut state, &mut log, &mut NoCheckpoints);
        assert!(matches!(err, Err(GrpoError::Config(_))));
    }

    #[test]
    fn stage1_only_never_consults_the_gate() {
        let data = items(8);
        let pol = PolicyParams::tabular_zeros(Vocabulary::default(), 2);
        let mut state = TrainState::new(pol, SgdConfig::default());
        let mut log = TrainingLog::default();
        let schedule = Schedule {
            stage1_epochs: 1,
            stage2_epochs: 0,
        };
        run_training(&data, schedule, &small_cfg(), 5, &mut state, &mut log, &mut NoCheckpoints).unwrap();
        assert_eq!(log.gate_evaluations, 0);
        assert_eq!(log.epochs.len(), 1);
        assert!(log.steps.iter().all(|s| s.stage == Stage::Stage1 && s.gated_in_fraction == 1.0));
        assert!(log.steps.iter().all(|s| s.retained_fraction == 1.0));
    }

    #[test]
    fn two_plus_two_schedule_consults_gate_in_stage2_only() {
        let data = items(8);
        let pol = PolicyParams::tabular_zeros(Vocabulary::default(), 2);
        let mut state = TrainState::new(pol, SgdConfig::default());
        let mut log = TrainingLog::default();
        run_training(&data, Schedule::default(), &small_cfg(), 5, &mut state, &mut log, &mut NoCheckpoints).unwrap();
        let stages: Vec<Stage> = log.epochs.iter().map(|e| e.stage).collect();
        assert_eq!(stages, vec![Stage::Stage1, Stage::Stage1, Stage::Stage2, Stage::Stage2]);
        let stage2_steps = log.steps.iter().filter(|s| s.stage == Stage::Stage2 && s.retained_fraction > 0.0).count();
        assert_eq!(log.gate_evaluations, stage2_steps);
        assert!(stage2_steps > 0);
    }

    struct FailingSink;
    impl<P> CheckpointSink<P> for FailingSink {
        fn save(&mut self, _: &TrainState<P>, _: &TrainingLog) -> std::io::Result<()> {
            Err(std::io::Error::other("disk full"))
        }
    }

    #[test]
    fn checkpoint_failure_aborts_with_resumable_state() {
        let data = items(8);
        let cfg = small_cfg();
        let pol = PolicyParams::tabular_zeros(Vocabulary::default(), 2);
        let mut state = TrainState::new(pol.clone(), cfg.optimizer);
        let mut log = TrainingLog::default();
        let err = run_training(&data, Schedule::default(), &cfg, 5, &mut state, &mut log, &mut FailingSink);
        assert!(matches!(err, Err(GrpoError::Checkpoint { epoch: 0, .. })));
        assert_eq!(state.epochs_done, 1);
        // finishing from the preserved state matches an uninterrupted run
        run_training(&data, Schedule::default(), &cfg, 5, &mut state, &mut log, &mut NoCheckpoints).unwrap();
        let mut fresh = TrainState::new(pol, cfg.optimizer);
        let mut fresh_log = TrainingLog::default();
        run_training(&data, Schedule::default(), &cfg, 5, &mut fresh, &mut fresh_log, &mut NoCheckpoints).unwrap();
        assert_eq!(log.steps, fresh_log.steps);
        assert_eq!(state.policy, fresh.policy);
    }
}
