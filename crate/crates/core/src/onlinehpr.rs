//! Reward-free online improvement: roll out, relabel every executed chunk
//! with the state it actually reached, fine-tune only the adapters, clear
//! the buffer, repeat.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::{evaluate, run_episode, EvalOptions};
use crate::msth::target_indices;
use crate::rng;
use crate::simenv::{Action, EnvConfig, Observation};
use crate::tensorcore::{Adam, Tensor, Trainable};
use crate::trainkit::{apply_update, batch_gradients, Batch, Example, ModelBundle, Noise, Objective};

/// One control cycle as recorded during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub o: Observation,
    pub c_p: Tensor,
    /// Executed block, exactly `P_exec` actions.
    pub a: Vec<Action>,
    pub o_prime: Observation,
    /// Whether the episode reached its original goal. Filtering only.
    pub success_flag: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: Vec::with_capacity(capacity),
            capacity,
        }
    }

    /// Adds `tr` unless full; returns whether it was stored.
    pub fn push(&mut self, tr: Transition) -> bool {
        if self.is_full() {
            return false;
        }
        self.items.push(tr);
        true
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [Transition] {
        &mut self.items
    }

    /// Empties the buffer and hands back its contents.
    pub fn drain(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.items)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    All,
    SuccessOnly,
    FailedOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::SuccessOnly => "success_only",
            Strategy::FailedOnly => "failed_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Strategy::All),
            "success_only" => Ok(Strategy::SuccessOnly),
            "failed_only" => Ok(Strategy::FailedOnly),
            _ => Err(Error::Config(format!(
                "unknown strategy {s}; expected all, success_only or failed_only"
            ))),
        }
    }

    pub fn keeps(self, success_flag: bool) -> bool {
        match self {
            Strategy::All => true,
            Strategy::SuccessOnly => success_flag,
            Strategy::FailedOnly => !success_flag,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    /// Buffer threshold `N`.
    pub buffer: usize,
    /// Update epochs over the buffer per round.
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub rank: usize,
    pub strategy: Strategy,
    /// Control cycles before an automatic reset.
    pub max_cycles: usize,
    /// Literal one-step regression loss instead of the flow-matching loss.
    pub regression: bool,
    pub clip: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            buffer: 20,
            epochs: 10,
            minibatch: 10,
            lr: 1e-3,
            rank: 4,
            strategy: Strategy::All,
            max_cycles: 15,
            regression: false,
            clip: 1.0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer == 0 {
            return Err(Error::Config("buffer size N must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("update epochs must be ≥ 1".into()));
        }
        if self.minibatch == 0 || self.rank == 0 || self.max_cycles == 0 {
            return Err(Error::Config("minibatch, rank and max_cycles must be ≥ 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("adapter learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Hindsight example: the reached observation becomes the goal and the
/// executed block becomes the action target. Slots past the block hold the
/// stay action; frames past the block hold `o′`, frames inside it are
/// interpolated between `o` and `o′`.
pub fn relabel(tr: &Transition, bundle: &ModelBundle) -> Result<Example> {
    let ps = &bundle.params;
    let enc = &bundle.wm.encoder;
    let a_max = bundle.spec.a_max;
    let z_cur = enc.encode(ps, &tr.o.image)?;
    let z_goal = enc.encode(ps, &tr.o_prime.image)?;
    let n = tr.a.len();
    // treat the block as a trajectory of n + 1 frames
    let (frames, actions) = target_indices(n + 1, 0, &bundle.schedule);
    let n_frames = frames.len();
    let mut z_rows = Vec::with_capacity(n_frames * z_cur.numel());
    for f in frames {
        let w = f as f64 / n as f64;
        z_rows.extend(z_cur.data().iter().zip(z_goal.data()).map(|(a, b)| (1.0 - w) * a + w * b));
    }
    let carrying = tr.o_prime.proprio.data().get(2).is_some_and(|&c| c > 0.5);
    let stay = Action::stay(carrying).to_vector(a_max);
    let a_rows: Vec<f64> = actions
        .iter()
        .flat_map(|slot| slot.map_or(stay, |k| tr.a[k].to_vector(a_max)))
        .collect();
    let d_z = z_cur.numel();
    let rows = actions.len();
    Ok(Example {
        z_cur: z_cur.into_data(),
        z_goal: z_goal.into_data(),
        proprio: tr.c_p.data().to_vec(),
        z_targets: Tensor::matrix(n_frames, d_z, z_rows)?,
        a_targets: Tensor::matrix(rows, 3, a_rows)?,
    })
}

/// Adapter-only updates on relabeled transitions. Never reads
/// `success_flag`. Returns the mean training loss.
pub fn adapt(bundle: &mut ModelBundle, transitions: &[Transition], cfg: &RoundConfig, seed: u64) -> Result<f64> {
    if bundle.spec.adapter_rank.is_none() {
        return Err(Error::Precondition("online updates need adapters attached".into()));
    }
    if transitions.is_empty() {
        return Err(Error::invalid("no transitions to learn from"));
    }
    let examples = transitions
        .iter()
        .map(|t| relabel(t, bundle))
        .collect::<Result<Vec<_>>>()?;
    let objective = if cfg.regression {
        Objective::Regression
    } else {
        Objective::Action
    };
    let mut opt = Adam::new(cfg.lr);
    let mut total = 0.0;
    let mut count = 0usize;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(rng::derive(seed, epoch as u64));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.minibatch) {
            let batch = Batch::stack(&chunk.iter().map(|&i| &examples[i]).collect::<Vec<_>>())?;
            let noise = Noise::sample(&mut r, &batch);
            let (row, grads) = batch_gradients(bundle, &batch, &noise, objective, Trainable::AdaptersOnly)?;
            if !row.total.is_finite() {
                return Err(Error::Divergence {
                    step: count,
                    what: "non-finite adapter loss".into(),
                });
            }
            total += row.total;
            count += 1;
            apply_update(&mut bundle.params, &mut opt, grads, cfg.clip)?;
        }
    }
    Ok(total / count as f64)
}

/// Metrics of one online round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub rollouts: usize,
    pub successes: usize,
    pub buffer_used: usize,
    /// `NaN` when the round skipped its update.
    pub mean_loss: f64,
    pub eval_success_rate: f64,
    /// Buffer occupancy once the round has finished.
    pub buffer_after: usize,
    pub base_checksum: u64,
}

/// Rolls out until the buffer holds `N` transitions. Episodes are always
/// played to the end so their success flag is known; transitions past the
/// threshold are dropped.
pub fn collect(env: &EnvConfig, bundle: &ModelBundle, cfg: &RoundConfig, seed: u64) -> Result<(ReplayBuffer, usize, usize)> {
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut rollouts = 0;
    let mut successes = 0;
    while !buffer.is_full() {
        let ep = run_episode(env, bundle, rng::derive(seed, rollouts as u64), cfg.max_cycles, false)?;
        rollouts += 1;
        successes += ep.success as usize;
        for tr in ep.transitions {
            if !buffer.push(tr) {
                break;
            }
        }
    }
    Ok((buffer, rollouts, successes))
}

/// One pass of the loop: collect, filter, adapt, clear.
pub fn online_round(
    env: &EnvConfig,
    bundle: &mut ModelBundle,
    cfg: &RoundConfig,
    round: usize,
    seed: u64,
) -> Result<RoundReport> {
    cfg.validate()?;
    let round_seed = rng::derive(seed, round as u64);
    let (mut buffer, rollouts, successes) = collect(env, bundle, cfg, rng::derive_named(round_seed, "collect"))?;
    let kept: Vec<Transition> = buffer
        .drain()
        .into_iter()
        .filter(|t| cfg.strategy.keeps(t.success_flag))
        .collect();
    let mean_loss = if kept.is_empty() {
        f64::NAN
    } else {
        adapt(bundle, &kept, cfg, rng::derive_named(round_seed, "adapt"))?
    };
    Ok(RoundReport {
        round,
        rollouts,
        successes,
        buffer_used: kept.len(),
        mean_loss,
        eval_success_rate: f64::NAN,
        buffer_after: buffer.len(),
        base_checksum: bundle.base_checksum(),
    })
}

/// Alternates rounds and frozen-policy evaluation on fixed seeds. Row 0 is
/// the baseline before any update. `resume_after = k` continues a run whose
/// round-`k` snapshot is `bundle`, skipping the baseline. Adapter snapshots
/// go to `snapshots` when given.
#[allow(clippy::too_many_arguments)]
pub fn run_improvement(
    env: &EnvConfig,
    bundle: &mut ModelBundle,
    rounds: usize,
    eval_episodes: usize,
    cfg: &RoundConfig,
    seed: u64,
    resume_after: usize,
    snapshots: Option<&Path>,
) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    if bundle.spec.adapter_rank.is_none() {
        bundle.attach_adapters(cfg.rank, rng::derive_named(seed, "adapters"))?;
    }
    let eval = EvalOptions {
        episodes: eval_episodes,
        seed: rng::derive_named(seed, "eval"),
        max_cycles: cfg.max_cycles,
        disturb: false,
    };
    let mut curve = Vec::with_capacity(rounds + 1);
    if resume_after == 0 {
        let base = evaluate(env, bundle, &eval)?;
        curve.push(RoundReport {
            round: 0,
            rollouts: 0,
            successes: 0,
            buffer_used: 0,
            mean_loss: f64::NAN,
            eval_success_rate: base.success_rate(),
            buffer_after: 0,
            base_checksum: bundle.base_checksum(),
        });
    }
    for round in resume_after + 1..=rounds {
        let mut rep = online_round(env, bundle, cfg, round, seed)?;
        rep.eval_success_rate = evaluate(env, bundle, &eval)?.success_rate();
        if let Some(dir) = snapshots {
            bundle.save(&dir.join(format!("round{round}.a2gw")))?;
        }
        curve.push(rep);
    }
    Ok(curve)
}

pub fn curve_csv(rows: &[RoundReport], fingerprint: &str) -> String {
    let mut s = String::from("round,rollouts,successes,buffer_used,mean_loss,eval_success_rate\n");
    for r in rows {
        let loss = if r.mean_loss.is_finite() {
            format!("{:.9}", r.mean_loss)
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4}",
            r.round, r.rollouts, r.successes, r.buffer_used, loss, r.eval_success_rate
        );
    }
    let _ = writeln!(s, "# fingerprint: {fingerprint}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msth::MsthParams;
    use crate::trainkit::{generate_demos, train_stage1, BundleSpec, TrainConfig};

    fn bundle() -> (EnvConfig, ModelBundle) {
        let env = EnvConfig::push();
        let mut s = BundleSpec::for_schedule(MsthParams::new(12, 4, 2, 2), env.a_max);
        s.wm.width = 16;
        s.wm.heads = 2;
        s.wm.mlp_hidden = 16;
        s.wm.d_z = 6;
        s.ae.width = 8;
        s.ae.heads = 2;
        s.ae.mlp_hidden = 8;
        s.ae.p_exec = 2;
        let data = generate_demos(&env, 3, 11).unwrap();
        let tc = TrainConfig {
            steps: 2,
            batch: 2,
            ..TrainConfig::default()
        };
        let (b, _) = train_stage1(&data, s, &tc).unwrap();
        (env, b)
    }

    fn small_round() -> RoundConfig {
        RoundConfig {
            buffer: 4,
            epochs: 2,
            minibatch: 2,
            max_cycles: 3,
            ..RoundConfig::default()
        }
    }

    fn transitions(env: &EnvConfig, b: &ModelBundle, n: usize) -> Vec<Transition> {
        collect(env, b, &RoundConfig { buffer: n, ..small_round() }, 5)
            .unwrap()
            .0
            .drain()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::All, Strategy::SuccessOnly, Strategy::FailedOnly] {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        }
        assert!(matches!(Strategy::parse("best"), Err(Error::Config(_))));
        assert!(Strategy::All.keeps(true) && Strategy::All.keeps(false));
        assert!(Strategy::SuccessOnly.keeps(true) && !Strategy::SuccessOnly.keeps(false));
        assert!(!Strategy::FailedOnly.keeps(true) && Strategy::FailedOnly.keeps(false));
    }

    #[test]
    fn buffer_stops_at_capacity_and_drains_empty() {
        let (env, b) = bundle();
        let tr = transitions(&env, &b, 1).remove(0);
        let mut buf = ReplayBuffer::new(2);
        assert!(buf.push(tr.clone()));
        assert!(buf.push(tr.clone()));
        assert!(!buf.push(tr));
        assert!(buf.is_full());
        assert_eq!(buf.drain().len(), 2);
        assert!(buf.is_empty());
    }

    #[test]
    fn relabel_targets_reached_state_and_executed_block() {
        let (env, b) = bundle();
        let tr = transitions(&env, &b, 1).remove(0);
        let ex = relabel(&tr, &b).unwrap();
        let z_goal = b.wm.encoder.encode(&b.params, &tr.o_prime.image).unwrap();
        assert_eq!(ex.z_goal, z_goal.data());
        let last = ex.z_targets.rows() - 1;
        assert_eq!(ex.z_targets.row(last), z_goal.data());
        let a_max = b.spec.a_max;
        for (k, a) in tr.a.iter().enumerate() {
            assert_eq!(ex.a_targets.row(k), a.to_vector(a_max).as_slice());
        }
        let stay = Action::stay(tr.o_prime.proprio.data()[2] > 0.5).to_vector(a_max);
        for k in tr.a.len()..ex.a_targets.rows() {
            assert_eq!(ex.a_targets.row(k), stay.as_slice());
        }
    }

    #[test]
    fn relabel_of_a_standstill_is_constant() {
        let (env, b) = bundle();
        let mut tr = transitions(&env, &b, 1).remove(0);
        tr.o_prime = tr.o.clone();
        tr.a = vec![Action::stay(false); tr.a.len()];
        let ex = relabel(&tr, &b).unwrap();
        for r in 0..ex.z_targets.rows() {
            for (x, z) in ex.z_targets.row(r).iter().zip(&ex.z_cur) {
                assert!((x - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapt_requires_adapters() {
        let (env, mut b) = bundle();
        let trs = transitions(&env, &b, 2);
        assert!(matches!(
            adapt(&mut b, &trs, &small_round(), 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn round_touches_only_adapters_and_ignores_flags() {
        let (env, mut b) = bundle();
        b.attach_adapters(2, 3).unwrap();
        let base = b.base_checksum();
        let adapters = b.adapter_checksum();
        let rep = online_round(&env, &mut b, &small_round(), 1, 9).unwrap();
        assert!(rep.buffer_used <= 4 && rep.mean_loss.is_finite());
        assert_eq!(b.base_checksum(), base);
        assert_ne!(b.adapter_checksum(), adapters);

        let trs = transitions(&env, &b, 3);
        let flipped: Vec<_> = trs
            .iter()
            .cloned()
            .map(|mut t| {
                t.success_flag = !t.success_flag;
                t
            })
            .collect();
        let mut b1 = b.clone();
        let mut b2 = b.clone();
        let l1 = adapt(&mut b1, &trs, &small_round(), 4).unwrap();
        let l2 = adapt(&mut b2, &flipped, &small_round(), 4).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(b1.to_bytes(), b2.to_bytes());
    }

    #[test]
    fn improvement_curve_has_baseline_row_and_snapshots() {
        let (env, mut b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        let curve = run_improvement(&env, &mut b, 2, 2, &small_round(), 1, 0, Some(dir.path())).unwrap();
        assert_eq!(curve.iter().map(|r| r.round).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(dir.path().join("round2.a2gw").exists());
        let csv = curve_csv(&curve, "fp");
        assert!(csv.starts_with("round,rollouts"));
        assert!(csv.ends_with("# fingerprint: fp\n"));
    }
}
