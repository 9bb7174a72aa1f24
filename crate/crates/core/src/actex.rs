//! Action expert: a narrower stack with the same block count as the world
//! model. Block `l` self-attends over `[proprio, action_1 … action_{P+M}]`,
//! cross-attends to the world model's layer-`l` features, then applies an
//! MLP. The velocity is read at the action positions.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow;
use crate::gcwm::LayerFeatures;
use crate::layers::{time_embeddings, Attention, HasLinears, Linear, Mlp, Norm, LN_EPS};
use crate::rng;
use crate::simenv::{Action, Observation, ACTION_DIM, PROPRIO_DIM};
use crate::tensorcore::{Graph, ParamId, ParamKind, ParamSet, Tensor, Trainable, Var};
use crate::trainkit::ModelBundle;

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    /// Must equal the world model's block count.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    /// Dense proximal rows `P`.
    pub proximal: usize,
    /// Distal rows `M`.
    pub distal: usize,
    /// Denoising steps at inference.
    pub steps: usize,
    /// Executed prefix per control cycle.
    pub p_exec: usize,
    pub time_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            layers: 2,
            width: 32,
            heads: 4,
            action_dim: ACTION_DIM,
            proprio_dim: PROPRIO_DIM,
            proximal: 8,
            distal: 2,
            steps: 8,
            p_exec: 4,
            time_dim: 16,
            mlp_hidden: 64,
        }
    }
}

impl AeConfig {
    pub fn rows(&self) -> usize {
        self.proximal + self.distal
    }

    pub fn validate(&self, wm_layers: usize, wm_width: usize) -> Result<()> {
        if self.layers != wm_layers {
            return Err(Error::Config(format!(
                "action expert has {} blocks but world model has {wm_layers}",
                self.layers
            )));
        }
        if self.width >= wm_width {
            return Err(Error::Config(format!(
                "action expert width {} must be below world model width {wm_width}",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "action expert width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.p_exec == 0 || self.p_exec > self.proximal {
            return Err(Error::Config(format!(
                "need 1 ≤ P_exec ≤ P, got P_exec={} P={}",
                self.p_exec, self.proximal
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("action steps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "L{}-w{}-h{}-a{}-c{}-P{}-M{}-N{}-x{}-t{}-m{}",
            self.layers,
            self.width,
            self.heads,
            self.action_dim,
            self.proprio_dim,
            self.proximal,
            self.distal,
            self.steps,
            self.p_exec,
            self.time_dim,
            self.mlp_hidden
        )
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ActionExpert {
    pub cfg: AeConfig,
    proprio_in: Linear,
    action_in: Linear,
    time_in: Linear,
    slots: ParamId,
    blocks: Vec<Block>,
    out_norm: Norm,
    out: Linear,
}

/// Policy output for one control cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// Full `[(P+M) × action_dim]` prediction.
    pub actions: Tensor,
    /// First `P_exec` proximal rows, decoded and clipped.
    pub executed: Vec<Action>,
    /// Distal rows, kept for logging only.
    pub distal: Tensor,
}

impl ActionExpert {
    pub fn new(cfg: AeConfig, wm_width: usize, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let proprio_in = Linear::new(ps, "ae.proprio_in", cfg.proprio_dim, w, true, 1.0, rng);
        let action_in = Linear::new(ps, "ae.action_in", cfg.action_dim, w, true, 1.0, rng);
        let time_in = Linear::new(ps, "ae.time_in", cfg.time_dim, w, true, 1.0, rng);
        let slots = ps.add(
            "ae.slots",
            ParamKind::Base,
            rng::normal_tensor(rng, &[cfg.rows() + 1, w]).scale(0.5),
        );
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                norm1: Norm::new(ps, &format!("ae.b{l}.norm1"), w),
                self_attn: Attention::new(ps, &format!("ae.b{l}.self"), w, w, cfg.heads, rng),
                norm2: Norm::new(ps, &format!("ae.b{l}.norm2"), w),
                cross_attn: Attention::new(ps, &format!("ae.b{l}.cross"), w, wm_width, cfg.heads, rng),
                norm3: Norm::new(ps, &format!("ae.b{l}.norm3"), w),
                mlp: Mlp::new(ps, &format!("ae.b{l}.mlp"), w, cfg.mlp_hidden, rng),
            })
            .collect();
        let out_norm = Norm::new(ps, "ae.out_norm", w);
        let out = Linear::new(ps, "ae.out", w, cfg.action_dim, true, 0.5, rng);
        ActionExpert {
            cfg,
            proprio_in,
            action_in,
            time_in,
            slots,
            blocks,
            out_norm,
            out,
        }
    }

    /// Batched forward pass.
    ///
    /// `noisy: [B·(P+M) × action_dim]`, `feats[l]: [B·F × wm_width]`,
    /// `proprio: [B × proprio_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        noisy: Var,
        feats: &[Var],
        proprio: Var,
        flow_t: &[f64],
    ) -> Result<Var> {
        if feats.len() != self.cfg.layers {
            return Err(Error::Config(format!(
                "got {} feature layers for {} action blocks",
                feats.len(),
                self.cfg.layers
            )));
        }
        if flow_t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("flow time outside [0, 1]"));
        }
        let b = flow_t.len();
        let rows = self.cfg.rows();
        let t = rows + 1;
        if g.value(noisy).rows() != b * rows || g.value(proprio).rows() != b {
            return Err(Error::shape(
                "ae_forward",
                g.value(noisy).shape(),
                &[b * rows, self.cfg.action_dim],
            ));
        }
        let hp = self.proprio_in.forward(g, proprio)?;
        let ha = self.action_in.forward(g, noisy)?;
        let te_in = g.leaf(time_embeddings(flow_t, self.cfg.time_dim));
        let te = self.time_in.forward(g, te_in)?;
        let te = g.gather_rows(te, (0..b).flat_map(|i| std::iter::repeat_n(i, rows)).collect())?;
        let ha = g.add(ha, te)?;
        let all = g.concat_rows(&[hp, ha])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(i).chain((0..rows).map(move |j| b + i * rows + j)))
            .collect();
        let x = g.gather_rows(all, order)?;
        let slots = g.param(self.slots);
        let pos = g.gather_rows(slots, (0..b).flat_map(|_| 0..t).collect())?;
        let mut x = g.add(x, pos)?;
        for (blk, &ctx) in self.blocks.iter().zip(feats) {
            let h = blk.norm1.forward(g, x)?;
            let a = blk.self_attn.forward(g, h, h, b)?;
            x = g.add(x, a)?;
            let h = blk.norm2.forward(g, x)?;
            let ctx = g.layer_norm(ctx, LN_EPS)?;
            let c = blk.cross_attn.forward(g, h, ctx, b)?;
            x = g.add(x, c)?;
            let h = blk.norm3.forward(g, x)?;
            let m = blk.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let action_rows: Vec<usize> = (0..b).flat_map(|i| (1..t).map(move |j| i * t + j)).collect();
        let x = g.gather_rows(x, action_rows)?;
        let h = self.out_norm.forward(g, x)?;
        self.out.forward(g, h)
    }

    /// Single-pass velocity on plain tensors.
    pub fn velocity(
        &self,
        ps: &ParamSet,
        noisy: &Tensor,
        feats: &LayerFeatures,
        proprio: &Tensor,
        flow_t: &[f64],
    ) -> Result<Tensor> {
        let mut g = Graph::with_params(ps, Trainable::Nothing);
        let n = g.leaf(noisy.clone());
        let f: Vec<Var> = feats.layers.iter().map(|l| g.leaf(l.clone())).collect();
        let p = g.leaf(proprio.clone());
        let v = self.forward(&mut g, n, &f, p, flow_t)?;
        Ok(g.value(v).clone())
    }

    /// Euler-integrates actions from seeded noise; `proprio: [B × dim]`.
    pub fn generate(
        &self,
        ps: &ParamSet,
        feats: &LayerFeatures,
        proprio: &Tensor,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor> {
        let b = proprio.rows();
        let mut r = rng::stream(seed);
        let a0 = rng::normal_tensor(&mut r, &[b * self.cfg.rows(), self.cfg.action_dim]);
        flow::euler_integrate(a0, steps, |a, t| self.velocity(ps, a, feats, proprio, &vec![t; b]))
    }

    pub fn slot_param(&self) -> ParamId {
        self.slots
    }
}

impl HasLinears for ActionExpert {
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = vec![&mut self.proprio_in, &mut self.action_in, &mut self.time_in];
        for b in &mut self.blocks {
            v.extend(b.self_attn.linears_mut());
            v.extend(b.cross_attn.linears_mut());
            v.extend(b.mlp.linears_mut());
        }
        v.push(&mut self.out);
        v
    }
}

/// Splits one sample's `[(P+M) × action_dim]` prediction into the executed
/// prefix and the distal tail.
pub fn split_output(actions: Tensor, cfg: &AeConfig, a_max: f64) -> PolicyOutput {
    let executed = (0..cfg.p_exec)
        .map(|i| Action::from_vector(actions.row(i), a_max))
        .collect();
    let distal = if cfg.distal > 0 {
        actions.slice_rows(cfg.proximal, cfg.distal)
    } else {
        Tensor::zeros(&[1, cfg.action_dim])
    };
    PolicyOutput {
        actions,
        executed,
        distal,
    }
}

/// One control cycle: encode, imagine, denoise actions, clip.
pub fn act(obs: &Observation, goal_image: &Tensor, bundle: &ModelBundle, seed: u64) -> Result<PolicyOutput> {
    let ps = &bundle.params;
    let enc = &bundle.wm.encoder;
    let d_z = bundle.spec.wm.d_z;
    let z_cur = enc.encode(ps, &obs.image)?.reshape(vec![1, d_z])?;
    let z_goal = enc.encode(ps, goal_image)?.reshape(vec![1, d_z])?;
    let (_, feats) = bundle.wm.generate(
        ps,
        &z_cur,
        &z_goal,
        bundle.spec.wm.steps,
        rng::derive_named(seed, "wm"),
    )?;
    let proprio = obs.proprio.clone().reshape(vec![1, obs.proprio.numel()])?;
    let actions = bundle.ae.generate(
        ps,
        &feats,
        &proprio,
        bundle.spec.ae.steps,
        rng::derive_named(seed, "ae"),
    )?;
    Ok(split_output(actions, &bundle.spec.ae, bundle.spec.a_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::finite_diff_check_params;

    fn tiny() -> AeConfig {
        AeConfig {
            layers: 2,
            width: 4,
            heads: 2,
            proximal: 3,
            distal: 2,
            steps: 3,
            p_exec: 2,
            time_dim: 4,
            mlp_hidden: 6,
            ..AeConfig::default()
        }
    }

    fn feats(r: &mut ChaCha8Rng, b: usize) -> LayerFeatures {
        LayerFeatures {
            layers: (0..2).map(|_| rng::normal_tensor(r, &[b * 3, 6])).collect(),
        }
    }

    #[test]
    fn output_shape_and_layer_mismatch() {
        let mut r = rng::stream(1);
        let mut ps = ParamSet::new();
        let ae = ActionExpert::new(tiny(), 6, &mut ps, &mut r);
        let f = feats(&mut r, 1);
        let a = rng::normal_tensor(&mut r, &[5, 3]);
        let p = rng::normal_tensor(&mut r, &[1, 3]);
        let v = ae.velocity(&ps, &a, &f, &p, &[0.5]).unwrap();
        assert_eq!(v.shape(), &[5, 3]);
        let short = LayerFeatures {
            layers: vec![f.layers[0].clone()],
        };
        assert!(ae.velocity(&ps, &a, &short, &p, &[0.5]).is_err());
    }

    #[test]
    fn cross_attention_is_live() {
        let mut r = rng::stream(2);
        let mut ps = ParamSet::new();
        let ae = ActionExpert::new(tiny(), 6, &mut ps, &mut r);
        let f = feats(&mut r, 1);
        let zero = LayerFeatures {
            layers: f.layers.iter().map(|l| Tensor::zeros(l.shape())).collect(),
        };
        let a = rng::normal_tensor(&mut r, &[5, 3]);
        let p = rng::normal_tensor(&mut r, &[1, 3]);
        let v1 = ae.velocity(&ps, &a, &f, &p, &[0.5]).unwrap();
        let v0 = ae.velocity(&ps, &a, &zero, &p, &[0.5]).unwrap();
        assert!(v1.distance(&v0) > 1e-6);
    }

    #[test]
    fn block_l_reads_only_layer_l_features() {
        let mut r = rng::stream(3);
        let mut ps = ParamSet::new();
        let ae = ActionExpert::new(
            AeConfig {
                layers: 3,
                ..tiny()
            },
            6,
            &mut ps,
            &mut r,
        );
        let base = LayerFeatures {
            layers: (0..3).map(|_| rng::normal_tensor(&mut r, &[3, 6])).collect(),
        };
        let a = rng::normal_tensor(&mut r, &[5, 3]);
        let p = rng::normal_tensor(&mut r, &[1, 3]);
        for l in 0..3 {
            // gradient probe: only the layer-l feature input should matter for block l
            let mut g = Graph::with_params(&ps, Trainable::Nothing);
            let n = g.leaf(a.clone());
            let fv: Vec<Var> = base.layers.iter().map(|t| g.leaf(t.clone())).collect();
            let pv = g.leaf(p.clone());
            let out = ae.forward(&mut g, n, &fv, pv, &[0.3]).unwrap();
            let loss = g.sum(out);
            let grads = g.backward(loss).unwrap();
            for (k, &fk) in fv.iter().enumerate() {
                let gk = grads.wrt(fk, &base.layers[k]);
                assert!(gk.max_abs() > 0.0, "layer {k} unused");
            }
            // perturbing layer l changes the output; the perturbation reaches
            // block l only, so earlier blocks' activations are untouched
            let mut probe = base.clone();
            probe.layers[l] = Tensor::full(&[3, 6], 1.0);
            let v0 = ae.velocity(&ps, &a, &base, &p, &[0.3]).unwrap();
            let v1 = ae.velocity(&ps, &a, &probe, &p, &[0.3]).unwrap();
            assert!(v0.distance(&v1) > 0.0);
        }
    }

    #[test]
    fn gradients_through_cross_attention_and_proprio() {
        let mut r = rng::stream(4);
        let mut ps = ParamSet::new();
        let ae = ActionExpert::new(tiny(), 6, &mut ps, &mut r);
        let f = feats(&mut r, 2);
        let a = rng::normal_tensor(&mut r, &[10, 3]);
        let p = rng::normal_tensor(&mut r, &[2, 3]);
        let ids: Vec<_> = ps.ids().collect();
        let err = finite_diff_check_params(
            &ps,
            &ids,
            |g| {
                let n = g.leaf(a.clone());
                let fv: Vec<Var> = f.layers.iter().map(|t| g.leaf(t.clone())).collect();
                let pv = g.leaf(p.clone());
                let v = ae.forward(g, n, &fv, pv, &[0.1, 0.8])?;
                Ok(g.mean_square(v))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn generation_is_seeded_and_split_respects_p_exec() {
        let mut r = rng::stream(5);
        let mut ps = ParamSet::new();
        let ae = ActionExpert::new(tiny(), 6, &mut ps, &mut r);
        let f = feats(&mut r, 1);
        let p = rng::normal_tensor(&mut r, &[1, 3]);
        let a = ae.generate(&ps, &f, &p, 3, 9).unwrap();
        assert_eq!(a, ae.generate(&ps, &f, &p, 3, 9).unwrap());
        let out = split_output(a, &ae.cfg, 0.1);
        assert_eq!(out.executed.len(), 2);
        assert_eq!(out.distal.rows(), 2);
        assert!(out.executed.iter().all(|x| x.delta.iter().all(|d| d.abs() <= 0.1)));
    }
}
