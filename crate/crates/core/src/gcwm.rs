//! Goal-conditioned world model.
//!
//! Observations are compressed by a fixed 2× average pool followed by an
//! affine projection fitted to the demonstration frames (principal
//! components, whitened) and then frozen. A transformer over the token
//! sequence `[z_cur, z_goal, frame_1 … frame_F]` predicts the flow-matching
//! velocity of the noisy frame stack; the hidden states at the frame
//! positions after every block are exposed as layer features.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow;
use crate::layers::{time_embeddings, Attention, HasLinears, Linear, Mlp, Norm};
use crate::rng;
use crate::tensorcore::{Graph, ParamId, ParamKind, ParamSet, Tensor, Trainable, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct WmConfig {
    /// Latent size of one encoded frame.
    pub d_z: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Predicted frames `F = P/r + M`.
    pub frames: usize,
    /// Denoising steps at inference.
    pub steps: usize,
    pub time_dim: usize,
    pub mlp_hidden: usize,
    /// Learned slot embeddings for `[current, goal, frame_1..F]`.
    pub positional: bool,
    /// Input image side `G`.
    pub resolution: usize,
}

impl Default for WmConfig {
    fn default() -> Self {
        WmConfig {
            d_z: 32,
            layers: 2,
            width: 48,
            heads: 4,
            frames: 6,
            steps: 4,
            time_dim: 16,
            mlp_hidden: 96,
            positional: true,
            resolution: 16,
        }
    }
}

impl WmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("world model needs at least one block".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "world model width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.resolution % 2 != 0 || self.resolution < 8 {
            return Err(Error::Config("resolution must be even and ≥ 8".into()));
        }
        if self.frames == 0 || self.steps == 0 || self.d_z == 0 {
            return Err(Error::Config("frames, steps and d_z must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        (self.resolution / 2) * (self.resolution / 2)
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "dz{}-L{}-w{}-h{}-F{}-N{}-t{}-m{}-pos{}-G{}",
            self.d_z,
            self.layers,
            self.width,
            self.heads,
            self.frames,
            self.steps,
            self.time_dim,
            self.mlp_hidden,
            self.positional as u8,
            self.resolution
        )
    }
}

/// Fixed 2× average pooling of a `G × G` image to a `(G/2)²` vector.
pub fn avg_pool2(image: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = image.dims2();
    if image.shape().len() != 2 || h != w || h % 2 != 0 {
        return Err(Error::invalid(format!(
            "expected an even square image, got {:?}",
            image.shape()
        )));
    }
    let half = h / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..half {
        for c in 0..half {
            out[r * half + c] = 0.25
                * (image.at(2 * r, 2 * c)
                    + image.at(2 * r, 2 * c + 1)
                    + image.at(2 * r + 1, 2 * c)
                    + image.at(2 * r + 1, 2 * c + 1));
        }
    }
    Ok(out)
}

/// Pool + affine image encoder. Its tensors live in the bundle's parameter
/// set but are never trainable: encoding happens outside the tape.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub weight: ParamId,
    pub bias: ParamId,
    resolution: usize,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, cfg: &WmConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.pooled_dim();
        let w = rng::normal_tensor(rng, &[cfg.d_z, n]).scale(1.0 / (n as f64).sqrt());
        Encoder {
            weight: ps.add("enc.weight", ParamKind::Base, w),
            bias: ps.add("enc.bias", ParamKind::Base, Tensor::zeros(&[cfg.d_z])),
            resolution: cfg.resolution,
        }
    }

    /// Fits the projection to whitened principal components of `images`.
    pub fn fit<'a>(&self, ps: &mut ParamSet, images: impl Iterator<Item = &'a Tensor>) -> Result<()> {
        let pooled: Vec<Vec<f64>> = images.map(avg_pool2).collect::<Result<_>>()?;
        let d_z = ps.get(self.weight).rows();
        let n = (self.resolution / 2).pow(2);
        if pooled.len() < 2 {
            return Err(Error::invalid("encoder fit needs at least two images"));
        }
        let m = pooled.len() as f64;
        let mut mean = vec![0.0; n];
        for p in &pooled {
            for (a, b) in mean.iter_mut().zip(p) {
                *a += b / m;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for p in &pooled {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
            for i in 0..n {
                for j in i..n {
                    cov[(i, j)] += c[i] * c[j] / m;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut w = vec![0.0; d_z * n];
        for (k, &idx) in order.iter().take(d_z).enumerate() {
            let scale = 1.0 / eig.eigenvalues[idx].max(1e-6).sqrt();
            let col = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = (0..n).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                w[k * n + i] = sign * col[i] * scale;
            }
        }
        let w = Tensor::matrix(d_z, n, w)?;
        let mean_t = Tensor::matrix(n, 1, mean)?;
        let bias = w.matmul(&mean_t)?.scale(-1.0).reshape(vec![d_z])?;
        ps.set(self.weight, w)?;
        ps.set(self.bias, bias)?;
        Ok(())
    }

    pub fn encode(&self, ps: &ParamSet, image: &Tensor) -> Result<Tensor> {
        if image.shape() != [self.resolution, self.resolution] {
            return Err(Error::shape(
                "encode",
                image.shape(),
                &[self.resolution, self.resolution],
            ));
        }
        let pooled = avg_pool2(image)?;
        let w = ps.get(self.weight);
        let b = ps.get(self.bias);
        let n = pooled.len();
        let z = (0..w.rows())
            .map(|k| b.data()[k] + w.row(k).iter().zip(&pooled).map(|(a, x)| a * x).sum::<f64>())
            .collect::<Vec<f64>>();
        debug_assert_eq!(w.cols(), n);
        Ok(Tensor::vector(z))
    }

    /// Encodes several images into the rows of one matrix.
    pub fn encode_rows(&self, ps: &ParamSet, images: &[&Tensor]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = images
            .iter()
            .map(|im| self.encode(ps, im).map(Tensor::into_data))
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Hidden states at the frame positions after every block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    /// One `[B·F × width]` tensor per block.
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WmConfig,
    pub encoder: Encoder,
    cond_in: Linear,
    frame_in: Linear,
    time_in: Linear,
    slots: ParamId,
    blocks: Vec<Block>,
    out_norm: Norm,
    out: Linear,
}

/// Graph nodes produced by one world-model pass.
pub struct WmPass {
    /// `[B·F × d_z]` predicted velocity.
    pub velocity: Var,
    /// Per-block `[B·F × width]` features.
    pub feats: Vec<Var>,
}

impl WorldModel {
    pub fn new(cfg: WmConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let encoder = Encoder::new(ps, &cfg, rng);
        let cond_in = Linear::new(ps, "wm.cond_in", cfg.d_z, w, true, 1.0, rng);
        let frame_in = Linear::new(ps, "wm.frame_in", cfg.d_z, w, true, 1.0, rng);
        let time_in = Linear::new(ps, "wm.time_in", cfg.time_dim, w, true, 1.0, rng);
        let slots = ps.add(
            "wm.slots",
            ParamKind::Base,
            rng::normal_tensor(rng, &[cfg.frames + 2, w]).scale(0.5),
        );
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                norm1: Norm::new(ps, &format!("wm.b{l}.norm1"), w),
                attn: Attention::new(ps, &format!("wm.b{l}.attn"), w, w, cfg.heads, rng),
                norm2: Norm::new(ps, &format!("wm.b{l}.norm2"), w),
                mlp: Mlp::new(ps, &format!("wm.b{l}.mlp"), w, cfg.mlp_hidden, rng),
            })
            .collect();
        let out_norm = Norm::new(ps, "wm.out_norm", w);
        let out = Linear::new(ps, "wm.out", w, cfg.d_z, true, 0.5, rng);
        Ok(WorldModel {
            cfg,
            encoder,
            cond_in,
            frame_in,
            time_in,
            slots,
            blocks,
            out_norm,
            out,
        })
    }

    /// Batched forward pass.
    ///
    /// `noisy: [B·F × d_z]`, `z_cur`/`z_goal: [B × d_z]`, one flow time per
    /// sample.
    pub fn forward(&self, g: &mut Graph<'_>, noisy: Var, z_cur: Var, z_goal: Var, flow_t: &[f64]) -> Result<WmPass> {
        let b = flow_t.len();
        let f = self.cfg.frames;
        let t = f + 2;
        if flow_t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("flow time outside [0, 1]"));
        }
        if g.value(noisy).rows() != b * f || g.value(z_cur).rows() != b || g.value(z_goal).rows() != b {
            return Err(Error::shape("wm_forward", g.value(noisy).shape(), &[b * f, self.cfg.d_z]));
        }
        let cond = g.concat_rows(&[z_cur, z_goal])?;
        let hc = self.cond_in.forward(g, cond)?;
        let hn = self.frame_in.forward(g, noisy)?;
        let te_in = g.leaf(time_embeddings(flow_t, self.cfg.time_dim));
        let te = self.time_in.forward(g, te_in)?;
        let te = g.gather_rows(te, (0..b).flat_map(|i| std::iter::repeat_n(i, f)).collect())?;
        let hn = g.add(hn, te)?;
        let all = g.concat_rows(&[hc, hn])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| [i, b + i].into_iter().chain((0..f).map(move |j| 2 * b + i * f + j)))
            .collect();
        let mut x = g.gather_rows(all, order)?;
        if self.cfg.positional {
            let slots = g.param(self.slots);
            let pos = g.gather_rows(slots, (0..b).flat_map(|_| 0..t).collect())?;
            x = g.add(x, pos)?;
        }
        let frame_rows: Vec<usize> = (0..b).flat_map(|i| (2..t).map(move |j| i * t + j)).collect();
        let mut feats = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.norm1.forward(g, x)?;
            let a = blk.attn.forward(g, h, h, b)?;
            x = g.add(x, a)?;
            let h = blk.norm2.forward(g, x)?;
            let m = blk.mlp.forward(g, h)?;
            x = g.add(x, m)?;
            feats.push(g.gather_rows(x, frame_rows.clone())?);
        }
        let last = *feats.last().expect("at least one block");
        let h = self.out_norm.forward(g, last)?;
        let velocity = self.out.forward(g, h)?;
        Ok(WmPass { velocity, feats })
    }

    /// Single-sample forward on plain tensors.
    pub fn velocity(
        &self,
        ps: &ParamSet,
        noisy: &Tensor,
        z_cur: &Tensor,
        z_goal: &Tensor,
        flow_t: f64,
    ) -> Result<(Tensor, LayerFeatures)> {
        let mut g = Graph::with_params(ps, Trainable::Nothing);
        let n = g.leaf(noisy.clone());
        let c = g.leaf(row(z_cur)?);
        let gl = g.leaf(row(z_goal)?);
        let pass = self.forward(&mut g, n, c, gl, &[flow_t])?;
        Ok((
            g.value(pass.velocity).clone(),
            LayerFeatures {
                layers: pass.feats.iter().map(|&v| g.value(v).clone()).collect(),
            },
        ))
    }

    /// Euler-integrates the frame stack from seeded noise for a batch of
    /// `(z_cur, z_goal)` rows; features come from the last forward pass.
    pub fn generate(
        &self,
        ps: &ParamSet,
        z_cur: &Tensor,
        z_goal: &Tensor,
        steps: usize,
        seed: u64,
    ) -> Result<(Tensor, LayerFeatures)> {
        let b = z_cur.rows();
        let mut r = rng::stream(seed);
        let z0 = rng::normal_tensor(&mut r, &[b * self.cfg.frames, self.cfg.d_z]);
        let mut feats = None;
        let frames = flow::euler_integrate(z0, steps, |z, t| {
            let mut g = Graph::with_params(ps, Trainable::Nothing);
            let n = g.leaf(z.clone());
            let c = g.leaf(z_cur.clone());
            let gl = g.leaf(z_goal.clone());
            let pass = self.forward(&mut g, n, c, gl, &vec![t; b])?;
            feats = Some(LayerFeatures {
                layers: pass.feats.iter().map(|&v| g.value(v).clone()).collect(),
            });
            Ok(g.value(pass.velocity).clone())
        })?;
        Ok((frames, feats.expect("at least one Euler step")))
    }

    pub fn slot_param(&self) -> ParamId {
        self.slots
    }
}

fn row(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(vec![1, t.numel()])
}

impl HasLinears for WorldModel {
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = vec![&mut self.cond_in, &mut self.frame_in, &mut self.time_in];
        for b in &mut self.blocks {
            v.extend(b.attn.linears_mut());
            v.extend(b.mlp.linears_mut());
        }
        v.push(&mut self.out);
        v
    }
}
