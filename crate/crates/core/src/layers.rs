//! Shared building blocks for the world model and the action expert.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;
use crate::tensorcore::{AdapterizedWeight, Graph, ParamId, ParamKind, ParamSet, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

/// `y = x · Wᵀ + b` with `W: [d_out × d_in]`, optionally low-rank adapted.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<Adapter>,
    name: String,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = rng::normal_tensor(rng, &[d_out, d_in]).scale(gain / (d_in as f64).sqrt());
        let weight = ps.add(format!("{name}.weight"), ParamKind::Base, w);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), ParamKind::Base, Tensor::zeros(&[d_out])));
        Linear {
            weight,
            bias,
            adapter: None,
            name: name.to_string(),
            d_in,
            d_out,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Registers `down`/`up` factors for this weight (up starts at zero).
    pub fn attach_adapter(&mut self, ps: &mut ParamSet, rank: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let fresh = AdapterizedWeight::init(ps.get(self.weight).clone(), rank, rng)?;
        let down = ps.add(format!("{}.lora_down", self.name), ParamKind::Adapter, fresh.down);
        let up = ps.add(format!("{}.lora_up", self.name), ParamKind::Adapter, fresh.up);
        self.adapter = Some(Adapter {
            down,
            up,
            scale: fresh.scale,
        });
        Ok(())
    }

    /// Re-binds adapter ids after a bundle reload.
    pub fn bind_adapter(&mut self, ps: &ParamSet, rank: usize) -> bool {
        let down = ps.find(&format!("{}.lora_down", self.name));
        let up = ps.find(&format!("{}.lora_up", self.name));
        match (down, up) {
            (Some(down), Some(up)) => {
                self.adapter = Some(Adapter {
                    down,
                    up,
                    scale: 1.0 / rank as f64,
                });
                true
            }
            _ => false,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let base = g.param(self.weight);
        let w = match &self.adapter {
            None => base,
            Some(a) => {
                let (down, up) = (g.param(a.down), g.param(a.up));
                let delta = g.matmul(up, down)?;
                let delta = g.scale(delta, a.scale);
                g.add(base, delta)?
            }
        };
        let y = g.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Norm {
            gain: ps.add(format!("{name}.gain"), ParamKind::Base, Tensor::full(&[width], 1.0)),
            bias: ps.add(format!("{name}.bias"), ParamKind::Base, Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(self.gain);
        let y = g.mul_row(y, gain)?;
        let bias = g.param(self.bias);
        g.add_row(y, bias)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        ctx_width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), width, width, false, 1.0, rng),
            k: Linear::new(ps, &format!("{name}.k"), ctx_width, width, false, 1.0, rng),
            v: Linear::new(ps, &format!("{name}.v"), ctx_width, width, false, 1.0, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, true, 0.5, rng),
            heads,
        }
    }

    /// `x: [groups·T_q × width]`, `ctx: [groups·T_k × ctx_width]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: Var, groups: usize) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, ctx)?;
        let v = self.v.forward(g, ctx)?;
        let a = g.attention_grouped(q, k, v, groups, self.heads)?;
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, hidden, true, 1.0, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, width, true, 0.5, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu_act(h);
        self.fc2.forward(g, h)
    }
}

/// Anything built from [`Linear`] layers that can carry adapters.
pub trait HasLinears {
    fn linears_mut(&mut self) -> Vec<&mut Linear>;

    /// Adds a rank-`rank` adapter to every weight matrix.
    fn attach_adapters(&mut self, ps: &mut ParamSet, rank: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in self.linears_mut() {
            l.attach_adapter(ps, rank, rng)?;
        }
        Ok(())
    }

    /// Re-binds existing adapter tensors by name; true when all were found.
    fn bind_adapters(&mut self, ps: &ParamSet, rank: usize) -> bool {
        self.linears_mut().into_iter().all(|l| l.bind_adapter(ps, rank))
    }
}

impl HasLinears for Attention {
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

impl HasLinears for Mlp {
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.fc1, &mut self.fc2]
    }
}

/// Sinusoidal embedding of a scalar in `[0, 1]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (1000f64).powf(-(i as f64) / half.max(1) as f64);
        let arg = t * 1000.0 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    if out.len() < dim {
        out.push(t);
    }
    out
}

/// One embedding row per scalar.
pub fn time_embeddings(ts: &[f64], dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = ts.iter().map(|&t| time_embedding(t, dim)).collect();
    Tensor::from_rows(&rows).expect("non-empty time batch")
}
