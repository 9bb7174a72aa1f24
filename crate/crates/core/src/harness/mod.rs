//! Rollouts, evaluation, the MSTH ablation and the command-line front end.

mod cli;
mod config;

pub use cli::{run_cli, Cli, Command};
pub use config::{Budget, RunConfig};

use std::fmt::Write as _;

use crate::actex::act;
use crate::error::Result;
use crate::msth::MsthParams;
use crate::onlinehpr::Transition;
use crate::rng;
use crate::simenv::{self, Action, EnvConfig, LengthClass, Variant};
use crate::trainkit::{generate_demos, train_stage1, train_stage2, BundleSpec, ModelBundle, TrainConfig};

/// Result of one closed-loop episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub success: bool,
    pub cycles: usize,
    pub disturbed: bool,
    pub length_class: Option<LengthClass>,
    pub transitions: Vec<Transition>,
}

/// Control cycle at which a disturbance is injected.
pub const DISTURB_CYCLE: usize = 2;

/// Receding-horizon rollout: plan, execute the first `P_exec` actions,
/// re-plan. Stops on success or after `max_cycles`. When success arrives
/// mid-block the rest of the block is recorded as stay actions, which
/// leave the state unchanged.
pub fn run_episode(
    env: &EnvConfig,
    bundle: &ModelBundle,
    seed: u64,
    max_cycles: usize,
    disturb: bool,
) -> Result<EpisodeRecord> {
    let (mut state, goal, _) = simenv::reset(env, seed)?;
    let p_exec = bundle.spec.ae.p_exec;
    let mut transitions = Vec::new();
    let mut cycles = 0;
    let mut disturbed = false;
    let mut done = simenv::success(&state, &goal, env);
    while !done && cycles < max_cycles {
        if disturb && cycles == DISTURB_CYCLE && !disturbed {
            state = simenv::inject_disturbance(&state, env, rng::derive_named(seed, "disturb"));
            disturbed = true;
        }
        let o = simenv::observe(&state, env);
        let out = act(&o, &goal.image, bundle, rng::derive(seed, cycles as u64))?;
        assert_eq!(out.executed.len(), p_exec, "only the proximal prefix is executed");
        let mut block = Vec::with_capacity(p_exec);
        for a in out.executed {
            if done {
                block.push(Action::stay(state.carrying.is_some()));
                continue;
            }
            state = simenv::step(&state, &a, env);
            block.push(a.clipped(env.a_max));
            done = simenv::success(&state, &goal, env);
        }
        cycles += 1;
        transitions.push(Transition {
            c_p: o.proprio.clone(),
            o,
            a: block,
            o_prime: simenv::observe(&state, env),
            success_flag: false,
        });
    }
    let success = simenv::success(&state, &goal, env);
    for t in &mut transitions {
        t.success_flag = success;
    }
    Ok(EpisodeRecord {
        seed,
        success,
        cycles,
        disturbed,
        length_class: goal.length_class,
        transitions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub max_cycles: usize,
    pub disturb: bool,
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    pub seed: u64,
    pub task: &'static str,
    pub variant: &'static str,
    pub length_class: &'static str,
    pub cycles: usize,
    pub success: bool,
    pub disturbed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub reports: Vec<EpisodeReport>,
}

impl EvalSummary {
    pub fn successes(&self) -> usize {
        self.reports.iter().filter(|r| r.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.successes() as f64 / self.reports.len() as f64
    }

    pub fn to_csv(&self, fingerprint: &str) -> String {
        let mut s = String::from("seed,task,variant,length_class,cycles,success,disturbed\n");
        for r in &self.reports {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.seed, r.task, r.variant, r.length_class, r.cycles, r.success as u8, r.disturbed as u8
            );
        }
        let (task, variant) = self
            .reports
            .first()
            .map_or(("", ""), |r| (r.task, r.variant));
        let _ = writeln!(s, "summary,{task},{variant},all,,{:.4},", self.success_rate());
        let _ = writeln!(s, "# fingerprint: {fingerprint}");
        s
    }
}

fn variant_of(env: &EnvConfig) -> Variant {
    if env.ood.any() {
        Variant::Ood
    } else {
        Variant::Id
    }
}

/// Fixed seed block: episode `i` uses `derive(seed, i)`.
pub fn evaluate(env: &EnvConfig, bundle: &ModelBundle, opts: &EvalOptions) -> Result<EvalSummary> {
    let mut reports = Vec::with_capacity(opts.episodes);
    for i in 0..opts.episodes {
        let seed = rng::derive(opts.seed, i as u64);
        let ep = run_episode(env, bundle, seed, opts.max_cycles, opts.disturb)?;
        reports.push(EpisodeReport {
            seed,
            task: env.task.name(),
            variant: variant_of(env).name(),
            length_class: ep.length_class.map_or("any", LengthClass::name),
            cycles: ep.cycles,
            success: ep.success,
            disturbed: ep.disturbed,
        });
    }
    Ok(EvalSummary { reports })
}

/// Stage 1 then stage 2 on freshly generated demonstrations.
pub fn train_offline(cfg: &RunConfig, spec: BundleSpec) -> Result<ModelBundle> {
    let data = generate_demos(&cfg.env, cfg.demos, rng::derive_named(cfg.seed, "demos"))?;
    let s1 = TrainConfig {
        steps: cfg.budget.stage1_steps,
        ..cfg.train.clone()
    };
    let (mut bundle, _) = train_stage1(&data, spec, &s1)?;
    let s2 = TrainConfig {
        steps: cfg.budget.stage2_steps,
        seed: rng::derive_named(cfg.train.seed, "stage2"),
        ..cfg.train.clone()
    };
    train_stage2(&mut bundle, &data, &s2)?;
    Ok(bundle)
}

/// One row of the MSTH comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub policy: &'static str,
    pub variant: &'static str,
    pub length_class: &'static str,
    pub episodes: usize,
    pub successes: usize,
}

impl AblationRow {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

/// The fixed-horizon baseline: same networks and budget, no distal slots.
pub fn fixed_horizon(spec: &BundleSpec) -> BundleSpec {
    let msth = MsthParams::new(spec.msth.horizon, spec.msth.proximal, spec.msth.stride, 0);
    let mut s = spec.clone();
    s.wm.frames = msth.frame_count();
    s.ae.distal = 0;
    s.msth = msth;
    s
}

/// Evaluates a bundle on every length class × variant.
pub fn eval_by_class(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    policy: &'static str,
    episodes: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in [Variant::Id, Variant::Ood] {
        for class in LengthClass::ALL {
            let env = EnvConfig {
                length_class: Some(class),
                ..cfg.env_for(variant)
            };
            let opts = EvalOptions {
                episodes,
                seed: rng::derive_named(cfg.seed, &format!("ablate-{}-{}", variant.name(), class.name())),
                max_cycles: cfg.eval_max_cycles,
                disturb: false,
            };
            let s = evaluate(&env, bundle, &opts)?;
            rows.push(AblationRow {
                policy,
                variant: variant.name(),
                length_class: class.name(),
                episodes,
                successes: s.successes(),
            });
        }
    }
    Ok(rows)
}

/// Trains the MSTH policy and the fixed-horizon baseline with identical
/// data, budget and seeds, then evaluates both per length class.
pub fn ablate_msth(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let msth = train_offline(cfg, cfg.spec.clone())?;
    let base = train_offline(cfg, fixed_horizon(&cfg.spec))?;
    let mut rows = eval_by_class(cfg, &msth, "msth", cfg.eval_episodes)?;
    rows.extend(eval_by_class(cfg, &base, "fixed_horizon", cfg.eval_episodes)?);
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], fingerprint: &str) -> String {
    let mut s = String::from("policy,variant,length_class,episodes,successes,success_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4}",
            r.policy,
            r.variant,
            r.length_class,
            r.episodes,
            r.successes,
            r.success_rate()
        );
    }
    let _ = writeln!(s, "# fingerprint: {fingerprint}");
    s
}
