//! Datasets, flow-matching losses, the two offline training stages and
//! checkpointing.

mod bundle;
mod data;

pub use bundle::{BundleSpec, ModelBundle, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{generate_demos, Dataset, DATASET_MAGIC, DATASET_VERSION};

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow;
use crate::msth::target_indices;
use crate::rng;
use crate::simenv::{Action, Observation};
use crate::tensorcore::{Adam, Gradients, Graph, ParamSet, Tensor, Trainable, Var};

/// One recorded episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    /// Terminal rendered frame.
    pub goal_image: Tensor,
    pub seed: u64,
    pub env_fingerprint: String,
    pub a_max: f64,
}

impl Trajectory {
    /// Zero motion with the gripper held as in the terminal observation.
    pub fn stay_action(&self) -> Action {
        let carrying = self
            .observations
            .last()
            .is_some_and(|o| o.proprio.data().get(2).is_some_and(|&c| c > 0.5));
        Action::stay(carrying)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the action loss in stage 1.
    pub lambda: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay); 1 keeps it
    /// constant.
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            batch: 16,
            steps: 500,
            lr: 1e-3,
            seed: 0,
            clip: 1.0,
            lr_floor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One supervised sample in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub z_cur: Vec<f64>,
    pub z_goal: Vec<f64>,
    pub proprio: Vec<f64>,
    /// `[F × d_z]` visual targets in schedule order.
    pub z_targets: Tensor,
    /// `[(P+M) × action_dim]` action targets in schedule order.
    pub a_targets: Tensor,
}

/// Stacked examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub z_cur: Tensor,
    pub z_goal: Tensor,
    pub proprio: Tensor,
    pub z1: Tensor,
    pub a1: Tensor,
}

impl Batch {
    pub fn stack(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let rows = |f: &dyn Fn(&Example) -> Vec<f64>| {
            Tensor::from_rows(&examples.iter().map(|e| f(e)).collect::<Vec<_>>())
        };
        Ok(Batch {
            size: examples.len(),
            z_cur: rows(&|e| e.z_cur.clone())?,
            z_goal: rows(&|e| e.z_goal.clone())?,
            proprio: rows(&|e| e.proprio.clone())?,
            z1: Tensor::concat_rows(&examples.iter().map(|e| &e.z_targets).collect::<Vec<_>>())?,
            a1: Tensor::concat_rows(&examples.iter().map(|e| &e.a_targets).collect::<Vec<_>>())?,
        })
    }
}

/// Source noise and flow times for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub z0: Tensor,
    pub t_v: Vec<f64>,
    pub a0: Tensor,
    pub t_a: Vec<f64>,
}

impl Noise {
    pub fn sample(r: &mut ChaCha8Rng, batch: &Batch) -> Self {
        let b = batch.size;
        let z0 = rng::normal_tensor(r, batch.z1.shape());
        let a0 = rng::normal_tensor(r, batch.a1.shape());
        let t_v = (0..b).map(|_| r.random::<f64>()).collect();
        let t_a = (0..b).map(|_| r.random::<f64>()).collect();
        Noise { z0, t_v, a0, t_a }
    }
}

/// Flow time of the world-model pass whose features feed the action expert:
/// the last Euler step of `steps`-step generation.
pub fn feature_time(steps: usize) -> f64 {
    (steps - 1) as f64 / steps as f64
}

/// Visual flow-matching loss: mean of `‖v − (z₁ − z₀)‖²` over batch,
/// frames and dimensions.
pub fn loss_v(g: &mut Graph<'_>, bundle: &ModelBundle, batch: &Batch, noise: &Noise) -> Result<Var> {
    let f = bundle.spec.wm.frames;
    let (zt, target) = flow::interpolate_rows(&noise.z0, &batch.z1, &noise.t_v, f)?;
    let noisy = g.leaf(zt);
    let zc = g.leaf(batch.z_cur.clone());
    let zg = g.leaf(batch.z_goal.clone());
    let pass = bundle.wm.forward(g, noisy, zc, zg, &noise.t_v)?;
    let target = g.leaf(target);
    g.mse(pass.velocity, target)
}

/// World-model features for the action expert, taken at the inference tap
/// time on the linear path toward the true frames.
pub fn tap_features(g: &mut Graph<'_>, bundle: &ModelBundle, batch: &Batch, z0: &Tensor) -> Result<Vec<Var>> {
    let f = bundle.spec.wm.frames;
    let t = feature_time(bundle.spec.wm.steps);
    let ts = vec![t; batch.size];
    let (zt, _) = flow::interpolate_rows(z0, &batch.z1, &ts, f)?;
    let noisy = g.leaf(zt);
    let zc = g.leaf(batch.z_cur.clone());
    let zg = g.leaf(batch.z_goal.clone());
    Ok(bundle.wm.forward(g, noisy, zc, zg, &ts)?.feats)
}

/// Action flow-matching loss: mean of `‖u − (a₁ − a₀)‖²` over batch, rows
/// and action dimensions. Gradients reach the world model through the
/// features.
pub fn loss_a(g: &mut Graph<'_>, bundle: &ModelBundle, batch: &Batch, noise: &Noise) -> Result<Var> {
    let feats = tap_features(g, bundle, batch, &noise.z0)?;
    let rows = bundle.spec.ae.rows();
    let (at, target) = flow::interpolate_rows(&noise.a0, &batch.a1, &noise.t_a, rows)?;
    let noisy = g.leaf(at);
    let p = g.leaf(batch.proprio.clone());
    let u = bundle.ae.forward(g, noisy, &feats, p, &noise.t_a)?;
    let target = g.leaf(target);
    g.mse(u, target)
}

/// One-step regression form `‖a₀ + u(a₀, 0) − a₁‖²`.
pub fn loss_a_regression(g: &mut Graph<'_>, bundle: &ModelBundle, batch: &Batch, noise: &Noise) -> Result<Var> {
    let feats = tap_features(g, bundle, batch, &noise.z0)?;
    let a0 = g.leaf(noise.a0.clone());
    let p = g.leaf(batch.proprio.clone());
    let zeros = vec![0.0; batch.size];
    let u = bundle.ae.forward(g, a0, &feats, p, &zeros)?;
    let pred = g.add(a0, u)?;
    let target = g.leaf(batch.a1.clone());
    g.mse(pred, target)
}

/// `L_v + λ·L_a`.
pub fn stage1_total(l_v: f64, l_a: f64, lambda: f64) -> f64 {
    l_v + lambda * l_a
}

/// One row of a loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_v: f64,
    pub l_a: f64,
    pub total: f64,
}

pub fn trace_csv(rows: &[LossRow], fingerprint: &str) -> String {
    let mut s = String::from("step,L_v,L_a,total\n");
    for r in rows {
        // stage 2 has no visual loss; its column stays empty
        let l_v = if r.l_v.is_finite() { format!("{:.9}", r.l_v) } else { String::new() };
        let _ = writeln!(s, "{},{},{:.9},{:.9}", r.step, l_v, r.l_a, r.total);
    }
    let _ = writeln!(s, "# fingerprint: {fingerprint}");
    s
}

/// Latents of every frame of every trajectory, encoded once by the frozen
/// encoder.
#[derive(Clone, Debug)]
pub struct LatentSet {
    trajs: Vec<LatentTrajectory>,
    index: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct LatentTrajectory {
    z: Vec<Vec<f64>>,
    z_goal: Vec<f64>,
    proprio: Vec<Vec<f64>>,
    actions: Vec<[f64; 3]>,
    stay: [f64; 3],
}

impl LatentSet {
    pub fn build(bundle: &ModelBundle, data: &Dataset) -> Result<Self> {
        let enc = &bundle.wm.encoder;
        let ps = &bundle.params;
        let mut trajs = Vec::with_capacity(data.len());
        let mut index = Vec::new();
        for (ti, t) in data.trajectories.iter().enumerate() {
            let z = t
                .observations
                .iter()
                .map(|o| enc.encode(ps, &o.image).map(Tensor::into_data))
                .collect::<Result<Vec<_>>>()?;
            index.extend((0..t.observations.len()).map(|a| (ti, a)));
            trajs.push(LatentTrajectory {
                z,
                z_goal: enc.encode(ps, &t.goal_image)?.into_data(),
                proprio: t.observations.iter().map(|o| o.proprio.data().to_vec()).collect(),
                actions: t.actions.iter().map(|a| a.to_vector(t.a_max)).collect(),
                stay: t.stay_action().to_vector(t.a_max),
            });
        }
        if index.is_empty() {
            return Err(Error::invalid("dataset has no observations"));
        }
        Ok(LatentSet { trajs, index })
    }

    /// Number of `(trajectory, anchor)` pairs.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn example(&self, bundle: &ModelBundle, i: usize) -> Result<Example> {
        let (ti, anchor) = self.index[i];
        let t = &self.trajs[ti];
        let (frames, actions) = target_indices(t.z.len(), anchor, &bundle.schedule);
        let d_z = t.z_goal.len();
        let z_rows: Vec<f64> = frames.iter().flat_map(|&f| t.z[f].iter().copied()).collect();
        let a_rows: Vec<f64> = actions
            .iter()
            .flat_map(|slot| slot.map_or(t.stay, |k| t.actions[k]))
            .collect();
        Ok(Example {
            z_cur: t.z[anchor].clone(),
            z_goal: t.z_goal.clone(),
            proprio: t.proprio[anchor].clone(),
            z_targets: Tensor::matrix(frames.len(), d_z, z_rows)?,
            a_targets: Tensor::matrix(actions.len(), 3, a_rows)?,
        })
    }
}

/// Which losses a training loop optimises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `L_v + λ·L_a`.
    Joint { lambda: f64 },
    /// `L_a` only.
    Action,
    /// One-step action regression.
    Regression,
}

/// Loss values and gradients for one batch.
pub fn batch_gradients(
    bundle: &ModelBundle,
    batch: &Batch,
    noise: &Noise,
    objective: Objective,
    mode: Trainable,
) -> Result<(LossRow, Gradients)> {
    let mut g = Graph::with_params(&bundle.params, mode);
    let (l_v, l_a, total) = match objective {
        Objective::Joint { lambda } => {
            let lv = loss_v(&mut g, bundle, batch, noise)?;
            let la = loss_a(&mut g, bundle, batch, noise)?;
            let weighted = g.scale(la, lambda);
            let total = g.add(lv, weighted)?;
            (g.value(lv).item(), g.value(la).item(), total)
        }
        Objective::Action => {
            let la = loss_a(&mut g, bundle, batch, noise)?;
            (f64::NAN, g.value(la).item(), la)
        }
        Objective::Regression => {
            let la = loss_a_regression(&mut g, bundle, batch, noise)?;
            (f64::NAN, g.value(la).item(), la)
        }
    };
    let row = LossRow {
        step: 0,
        l_v,
        l_a,
        total: g.value(total).item(),
    };
    let grads = g.backward(total)?.into_params();
    Ok((row, grads))
}

/// Clips, then applies one optimiser step.
pub fn apply_update(params: &mut ParamSet, opt: &mut Adam, mut grads: Gradients, clip: f64) -> Result<()> {
    if clip > 0.0 {
        let n = grads.global_norm();
        if n > clip {
            grads.scale(clip / n);
        }
    }
    opt.step(params, &grads)
}

fn run_stage(
    bundle: &mut ModelBundle,
    set: &LatentSet,
    cfg: &TrainConfig,
    objective: Objective,
    tag: &str,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let base = rng::derive_named(cfg.seed, tag);
    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
        let mut r = rng::stream(rng::derive(base, step as u64));
        let picks: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..set.len())).collect();
        let examples = picks
            .iter()
            .map(|&i| set.example(bundle, i))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::stack(&examples.iter().collect::<Vec<_>>())?;
        let noise = Noise::sample(&mut r, &batch);
        let (mut row, grads) = batch_gradients(bundle, &batch, &noise, objective, Trainable::All)?;
        if !row.total.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("non-finite {tag} loss"),
            });
        }
        row.step = step;
        trace.push(row);
        apply_update(&mut bundle.params, &mut opt, grads, cfg.clip)?;
    }
    Ok(trace)
}

/// Fits the frozen encoder on the demonstration frames, then jointly trains
/// both networks on `L_v + λ·L_a`.
pub fn train_stage1(data: &Dataset, spec: BundleSpec, cfg: &TrainConfig) -> Result<(ModelBundle, Vec<LossRow>)> {
    if data.is_empty() {
        return Err(Error::invalid("stage 1 needs a non-empty dataset"));
    }
    let mut bundle = ModelBundle::new(BundleSpec { stage: 0, ..spec }, cfg.seed)?;
    let images = data
        .trajectories
        .iter()
        .flat_map(|t| t.observations.iter().map(|o| &o.image));
    bundle.wm.encoder.fit(&mut bundle.params, images)?;
    let set = LatentSet::build(&bundle, data)?;
    let trace = run_stage(&mut bundle, &set, cfg, Objective::Joint { lambda: cfg.lambda }, "stage1")?;
    bundle.spec.stage = 1;
    Ok((bundle, trace))
}

/// End-to-end fine-tuning of both networks on `L_a` alone.
pub fn train_stage2(bundle: &mut ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossRow>> {
    if bundle.spec.stage < 1 {
        return Err(Error::Precondition("stage 2 requires a stage-1 bundle".into()));
    }
    if data.is_empty() {
        return Err(Error::invalid("stage 2 needs a non-empty dataset"));
    }
    let set = LatentSet::build(bundle, data)?;
    let trace = run_stage(bundle, &set, cfg, Objective::Action, "stage2")?;
    bundle.spec.stage = 2;
    Ok(trace)
}
