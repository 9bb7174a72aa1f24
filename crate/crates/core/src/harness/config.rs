//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::msth::MsthParams;
use crate::onlinehpr::{RoundConfig, Strategy};
use crate::simenv::{EnvConfig, LengthClass, OodFlags, Task, Variant};
use crate::trainkit::{BundleSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub variant: Variant,
    /// Flags applied when the variant is OOD.
    pub ood: OodFlags,
    pub spec: BundleSpec,
    pub train: TrainConfig,
    pub budget: Budget,
    pub round: RoundConfig,
    pub seed: u64,
    /// Demonstrations generated for offline training.
    pub demos: usize,
    pub eval_episodes: usize,
    pub eval_max_cycles: usize,
    pub out: Option<PathBuf>,
}

fn cycles_for(env: &EnvConfig, p_exec: usize) -> usize {
    env.t_max.div_ceil(p_exec)
}

impl RunConfig {
    pub fn push() -> Self {
        let env = EnvConfig::push();
        let spec = BundleSpec::for_schedule(MsthParams::new(16, 8, 2, 2), env.a_max);
        RunConfig::around(env, spec, 500)
    }

    pub fn trace() -> Self {
        let env = EnvConfig::trace();
        let spec = BundleSpec::for_schedule(MsthParams::new(48, 8, 2, 3), env.a_max);
        RunConfig::around(env, spec, 600)
    }

    fn around(env: EnvConfig, spec: BundleSpec, demos: usize) -> Self {
        let max_cycles = cycles_for(&env, spec.ae.p_exec);
        RunConfig {
            variant: Variant::Id,
            ood: OodFlags::for_task(env.task),
            train: TrainConfig::default(),
            budget: Budget {
                stage1_steps: 8000,
                stage2_steps: 3000,
            },
            round: RoundConfig {
                max_cycles,
                ..RoundConfig::default()
            },
            seed: 0,
            demos,
            eval_episodes: 50,
            eval_max_cycles: max_cycles,
            out: None,
            env,
            spec,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Push => RunConfig::push(),
            Task::Trace => RunConfig::trace(),
        }
    }

    /// Parses a config file body. `task` picks the defaults; every other
    /// key overrides one field. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => parse_task(v)?,
            None => Task::Push,
        };
        let mut cfg = RunConfig::for_task(task);
        let mut cycles_set = (false, false);
        for (k, v) in &pairs {
            cfg.set(k, v, &mut cycles_set)?;
        }
        cfg.sync();
        if !cycles_set.0 {
            cfg.round.max_cycles = cycles_for(&cfg.env, cfg.spec.ae.p_exec);
        }
        if !cycles_set.1 {
            cfg.eval_max_cycles = cycles_for(&cfg.env, cfg.spec.ae.p_exec);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str, cycles_set: &mut (bool, bool)) -> Result<()> {
        let s = &mut self.spec;
        match k {
            "task" => {}
            "variant" => self.variant = parse_variant(v)?,
            "seed" => self.seed = num(k, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "demos" => self.demos = num(k, v)?,
            "eval.episodes" => self.eval_episodes = num(k, v)?,
            "eval.max_cycles" => {
                self.eval_max_cycles = num(k, v)?;
                cycles_set.1 = true;
            }
            "env.resolution" => self.env.resolution = num(k, v)?,
            "env.a_max" => self.env.a_max = num(k, v)?,
            "env.success_eps" => self.env.success_eps = num(k, v)?,
            "env.contact_radius" => self.env.contact_radius = num(k, v)?,
            "env.blocks" => self.env.blocks = num(k, v)?,
            "env.t_max" => self.env.t_max = num(k, v)?,
            "env.length_class" => self.env.length_class = parse_class(v)?,
            "env.library_seed" => self.env.library_seed = num(k, v)?,
            "env.disturbance" => self.env.disturbance = num(k, v)?,
            "ood.shifted_spawn" => self.ood.shifted_spawn = num(k, v)?,
            "ood.novel_shape" => self.ood.novel_shape = num(k, v)?,
            "ood.distractors" => self.ood.distractors = num(k, v)?,
            "ood.fresh_patterns" => self.ood.fresh_patterns = num(k, v)?,
            "msth.K" => s.msth.horizon = num(k, v)?,
            "msth.P" => s.msth.proximal = num(k, v)?,
            "msth.r" => s.msth.stride = num(k, v)?,
            "msth.M" => s.msth.distal = num(k, v)?,
            "wm.d_z" => s.wm.d_z = num(k, v)?,
            "wm.layers" => s.wm.layers = num(k, v)?,
            "wm.width" => s.wm.width = num(k, v)?,
            "wm.heads" => s.wm.heads = num(k, v)?,
            "wm.steps" => s.wm.steps = num(k, v)?,
            "wm.time_dim" => s.wm.time_dim = num(k, v)?,
            "wm.mlp_hidden" => s.wm.mlp_hidden = num(k, v)?,
            "wm.positional" => s.wm.positional = num(k, v)?,
            "ae.width" => s.ae.width = num(k, v)?,
            "ae.heads" => s.ae.heads = num(k, v)?,
            "ae.steps" => s.ae.steps = num(k, v)?,
            "ae.p_exec" => s.ae.p_exec = num(k, v)?,
            "ae.time_dim" => s.ae.time_dim = num(k, v)?,
            "ae.mlp_hidden" => s.ae.mlp_hidden = num(k, v)?,
            "train.lambda" => self.train.lambda = num(k, v)?,
            "train.batch" => self.train.batch = num(k, v)?,
            "train.lr" => self.train.lr = num(k, v)?,
            "train.clip" => self.train.clip = num(k, v)?,
            "train.lr_floor" => self.train.lr_floor = num(k, v)?,
            "train.seed" => self.train.seed = num(k, v)?,
            "train.stage1_steps" => self.budget.stage1_steps = num(k, v)?,
            "train.stage2_steps" => self.budget.stage2_steps = num(k, v)?,
            "online.buffer" => self.round.buffer = num(k, v)?,
            "online.epochs" => self.round.epochs = num(k, v)?,
            "online.minibatch" => self.round.minibatch = num(k, v)?,
            "online.lr" => self.round.lr = num(k, v)?,
            "online.rank" => self.round.rank = num(k, v)?,
            "online.strategy" => self.round.strategy = Strategy::parse(v)?,
            "online.max_cycles" => {
                self.round.max_cycles = num(k, v)?;
                cycles_set.0 = true;
            }
            "online.regression" => self.round.regression = num(k, v)?,
            "online.clip" => self.round.clip = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    /// Propagates shared values between the sub-configs.
    fn sync(&mut self) {
        self.env = self.env_for(self.variant);
        let s = &mut self.spec;
        s.wm.frames = s.msth.frame_count();
        s.wm.resolution = self.env.resolution;
        s.ae.layers = s.wm.layers;
        s.ae.proximal = s.msth.proximal;
        s.ae.distal = s.msth.distal;
        s.a_max = self.env.a_max;
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.spec.validate()?;
        self.train.validate()?;
        self.round.validate()?;
        if self.env.resolution % 2 != 0 {
            return Err(Error::Config("resolution must be even for the 2× pool".into()));
        }
        if self.demos == 0 {
            return Err(Error::Config("demos must be ≥ 1".into()));
        }
        if self.eval_max_cycles == 0 {
            return Err(Error::Config("eval.max_cycles must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Environment for a variant override.
    pub fn env_for(&self, variant: Variant) -> EnvConfig {
        let mut env = self.env.clone();
        env.ood = match variant {
            Variant::Id => OodFlags::default(),
            Variant::Ood => self.ood.clone(),
        };
        env
    }

    pub fn fingerprint(&self) -> String {
        format!("{}|{}|seed={}", self.env.fingerprint(), self.spec.fingerprint(), self.seed)
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let e = &self.env;
        let s = &self.spec;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(t, "{k} = {v}");
        };
        kv("task", e.task.name().to_string());
        kv("variant", self.variant.name().to_string());
        kv("seed", self.seed.to_string());
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        kv("demos", self.demos.to_string());
        kv("eval.episodes", self.eval_episodes.to_string());
        kv("eval.max_cycles", self.eval_max_cycles.to_string());
        kv("env.resolution", e.resolution.to_string());
        kv("env.a_max", e.a_max.to_string());
        kv("env.success_eps", e.success_eps.to_string());
        kv("env.contact_radius", e.contact_radius.to_string());
        kv("env.blocks", e.blocks.to_string());
        kv("env.t_max", e.t_max.to_string());
        kv("env.length_class", e.length_class.map_or("any", LengthClass::name).to_string());
        kv("env.library_seed", e.library_seed.to_string());
        kv("env.disturbance", e.disturbance.to_string());
        kv("ood.shifted_spawn", self.ood.shifted_spawn.to_string());
        kv("ood.novel_shape", self.ood.novel_shape.to_string());
        kv("ood.distractors", self.ood.distractors.to_string());
        kv("ood.fresh_patterns", self.ood.fresh_patterns.to_string());
        kv("msth.K", s.msth.horizon.to_string());
        kv("msth.P", s.msth.proximal.to_string());
        kv("msth.r", s.msth.stride.to_string());
        kv("msth.M", s.msth.distal.to_string());
        kv("wm.d_z", s.wm.d_z.to_string());
        kv("wm.layers", s.wm.layers.to_string());
        kv("wm.width", s.wm.width.to_string());
        kv("wm.heads", s.wm.heads.to_string());
        kv("wm.steps", s.wm.steps.to_string());
        kv("wm.time_dim", s.wm.time_dim.to_string());
        kv("wm.mlp_hidden", s.wm.mlp_hidden.to_string());
        kv("wm.positional", s.wm.positional.to_string());
        kv("ae.width", s.ae.width.to_string());
        kv("ae.heads", s.ae.heads.to_string());
        kv("ae.steps", s.ae.steps.to_string());
        kv("ae.p_exec", s.ae.p_exec.to_string());
        kv("ae.time_dim", s.ae.time_dim.to_string());
        kv("ae.mlp_hidden", s.ae.mlp_hidden.to_string());
        kv("train.lambda", self.train.lambda.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.clip", self.train.clip.to_string());
        kv("train.lr_floor", self.train.lr_floor.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.stage1_steps", self.budget.stage1_steps.to_string());
        kv("train.stage2_steps", self.budget.stage2_steps.to_string());
        kv("online.buffer", self.round.buffer.to_string());
        kv("online.epochs", self.round.epochs.to_string());
        kv("online.minibatch", self.round.minibatch.to_string());
        kv("online.lr", self.round.lr.to_string());
        kv("online.rank", self.round.rank.to_string());
        kv("online.strategy", self.round.strategy.name().to_string());
        kv("online.max_cycles", self.round.max_cycles.to_string());
        kv("online.regression", self.round.regression.to_string());
        kv("online.clip", self.round.clip.to_string());
        t
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {k} = {v}")))
}

fn parse_task(v: &str) -> Result<Task> {
    match v {
        "push" => Ok(Task::Push),
        "trace" => Ok(Task::Trace),
        _ => Err(Error::Config(format!("unknown task {v}; expected push or trace"))),
    }
}

pub(crate) fn parse_variant(v: &str) -> Result<Variant> {
    match v {
        "id" => Ok(Variant::Id),
        "ood" => Ok(Variant::Ood),
        _ => Err(Error::Config(format!("unknown variant {v}; expected id or ood"))),
    }
}

fn parse_class(v: &str) -> Result<Option<LengthClass>> {
    match v {
        "any" => Ok(None),
        "short" => Ok(Some(LengthClass::Short)),
        "medium" => Ok(Some(LengthClass::Medium)),
        "long" => Ok(Some(LengthClass::Long)),
        _ => Err(Error::Config(format!("unknown length class {v}"))),
    }
}
