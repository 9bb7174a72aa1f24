//! Model bundles and the checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `A2GW`, `u16` version, `u32`
//! header length, UTF-8 header of `key=value` lines describing the configs,
//! `u32` tensor count, then per tensor: `u32` name length, name, `u32`
//! rank, `u64` extents, `f64` payload.

use std::fs;
use std::path::Path;

use crate::actex::{ActionExpert, AeConfig};
use crate::error::{Error, Result};
use crate::gcwm::{WmConfig, WorldModel};
use crate::layers::HasLinears;
use crate::msth::{compute_schedule, MsthParams, MsthSchedule};
use crate::rng;
use crate::tensorcore::{ParamKind, ParamSet, Tensor};

use super::data::{parse_manifest, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"A2GW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild a bundle's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSpec {
    pub msth: MsthParams,
    pub wm: WmConfig,
    pub ae: AeConfig,
    pub a_max: f64,
    pub adapter_rank: Option<usize>,
    /// 0 = untrained, 1 = after stage 1, 2 = after stage 2.
    pub stage: u8,
}

impl BundleSpec {
    /// Consistent default configs around a schedule.
    pub fn for_schedule(msth: MsthParams, a_max: f64) -> Self {
        let wm = WmConfig {
            frames: msth.frame_count(),
            ..WmConfig::default()
        };
        let ae = AeConfig {
            layers: wm.layers,
            proximal: msth.proximal,
            distal: msth.distal,
            p_exec: AeConfig::default().p_exec.min(msth.proximal),
            ..AeConfig::default()
        };
        BundleSpec {
            msth,
            wm,
            ae,
            a_max,
            adapter_rank: None,
            stage: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.msth.validate()?;
        self.wm.validate()?;
        self.ae.validate(self.wm.layers, self.wm.width)?;
        if self.wm.frames != self.msth.frame_count() {
            return Err(Error::Config(format!(
                "world model predicts {} frames but the schedule has {}",
                self.wm.frames,
                self.msth.frame_count()
            )));
        }
        if self.ae.proximal != self.msth.proximal || self.ae.distal != self.msth.distal {
            return Err(Error::Config(format!(
                "action expert rows P={} M={} disagree with schedule P={} M={}",
                self.ae.proximal, self.ae.distal, self.msth.proximal, self.msth.distal
            )));
        }
        if self.a_max.is_nan() || self.a_max <= 0.0 {
            return Err(Error::Config("a_max must be > 0".into()));
        }
        if self.adapter_rank == Some(0) {
            return Err(Error::Config("adapter rank must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Architecture identity; training stage is not part of it.
    pub fn fingerprint(&self) -> String {
        format!(
            "msth={};wm={};ae={};a_max={};adapters={}",
            self.msth.fingerprint(),
            self.wm.fingerprint(),
            self.ae.fingerprint(),
            self.a_max,
            self.adapter_rank.map_or("none".to_string(), |r| r.to_string())
        )
    }

    fn to_text(&self) -> String {
        let (m, w, a) = (&self.msth, &self.wm, &self.ae);
        format!(
            "fingerprint={}\nstage={}\nK={}\nP={}\nr={}\nM={}\n\
             wm.d_z={}\nwm.layers={}\nwm.width={}\nwm.heads={}\nwm.steps={}\nwm.time_dim={}\n\
             wm.mlp_hidden={}\nwm.positional={}\nwm.resolution={}\n\
             ae.width={}\nae.heads={}\nae.action_dim={}\nae.proprio_dim={}\nae.steps={}\n\
             ae.p_exec={}\nae.time_dim={}\nae.mlp_hidden={}\na_max={}\nadapter_rank={}\n",
            self.fingerprint(),
            self.stage,
            m.horizon,
            m.proximal,
            m.stride,
            m.distal,
            w.d_z,
            w.layers,
            w.width,
            w.heads,
            w.steps,
            w.time_dim,
            w.mlp_hidden,
            w.positional,
            w.resolution,
            a.width,
            a.heads,
            a.action_dim,
            a.proprio_dim,
            a.steps,
            a.p_exec,
            a.time_dim,
            a.mlp_hidden,
            self.a_max,
            self.adapter_rank.unwrap_or(0),
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv = parse_manifest(text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Corrupt {
                    offset: 0,
                    msg: format!("checkpoint header lacks {k}"),
                })
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Corrupt {
                offset: 0,
                msg: format!("bad header value {k}={v}"),
            })
        }
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        let msth = MsthParams::new(n("K")?, n("P")?, n("r")?, n("M")?);
        let wm = WmConfig {
            d_z: n("wm.d_z")?,
            layers: n("wm.layers")?,
            width: n("wm.width")?,
            heads: n("wm.heads")?,
            frames: msth.frame_count(),
            steps: n("wm.steps")?,
            time_dim: n("wm.time_dim")?,
            mlp_hidden: n("wm.mlp_hidden")?,
            positional: num("wm.positional", get("wm.positional")?)?,
            resolution: n("wm.resolution")?,
        };
        let ae = AeConfig {
            layers: wm.layers,
            width: n("ae.width")?,
            heads: n("ae.heads")?,
            action_dim: n("ae.action_dim")?,
            proprio_dim: n("ae.proprio_dim")?,
            proximal: msth.proximal,
            distal: msth.distal,
            steps: n("ae.steps")?,
            p_exec: n("ae.p_exec")?,
            time_dim: n("ae.time_dim")?,
            mlp_hidden: n("ae.mlp_hidden")?,
        };
        let rank = n("adapter_rank")?;
        let spec = BundleSpec {
            msth,
            wm,
            ae,
            a_max: num("a_max", get("a_max")?)?,
            adapter_rank: (rank > 0).then_some(rank),
            stage: num("stage", get("stage")?)?,
        };
        let stored = get("fingerprint")?;
        if stored != spec.fingerprint() {
            return Err(Error::Corrupt {
                offset: 0,
                msg: "checkpoint header fingerprint does not match its fields".into(),
            });
        }
        Ok(spec)
    }
}

/// World model, action expert and their shared parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub schedule: MsthSchedule,
    pub params: ParamSet,
    pub wm: WorldModel,
    pub ae: ActionExpert,
}

impl ModelBundle {
    pub fn new(spec: BundleSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let schedule = compute_schedule(&spec.msth)?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(rng::derive_named(seed, "init"));
        let wm = WorldModel::new(spec.wm.clone(), &mut params, &mut r)?;
        let ae = ActionExpert::new(spec.ae.clone(), spec.wm.width, &mut params, &mut r);
        let rank = spec.adapter_rank;
        let mut bundle = ModelBundle {
            spec: BundleSpec {
                adapter_rank: None,
                ..spec
            },
            schedule,
            params,
            wm,
            ae,
        };
        if let Some(rank) = rank {
            bundle.attach_adapters(rank, seed)?;
        }
        Ok(bundle)
    }

    /// Adds rank-`rank` adapters (up = 0) to every weight matrix of both
    /// networks. The forward pass is unchanged until they are trained.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        if self.spec.adapter_rank.is_some() {
            return Err(Error::Precondition("bundle already carries adapters".into()));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be ≥ 1".into()));
        }
        let mut r = rng::stream(rng::derive_named(seed, "adapters"));
        self.wm.attach_adapters(&mut self.params, rank, &mut r)?;
        self.ae.attach_adapters(&mut self.params, rank, &mut r)?;
        self.spec.adapter_rank = Some(rank);
        Ok(())
    }

    pub fn base_checksum(&self) -> u64 {
        self.params.checksum(Some(ParamKind::Base))
    }

    pub fn adapter_checksum(&self) -> u64 {
        self.params.checksum(Some(ParamKind::Adapter))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.spec.to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id);
            let t = self.params.get(id);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds a bundle from its own header.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt {
                offset: 0,
                msg: "bad magic, not a checkpoint".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let spec = BundleSpec::from_text(&r.text()?)?;
        let mut bundle = ModelBundle::new(spec.clone(), 0)?;
        bundle.spec.stage = spec.stage;
        let count = r.u32()? as usize;
        if count != bundle.params.len() {
            return Err(r.corrupt(format!(
                "{count} tensors stored, architecture has {}",
                bundle.params.len()
            )));
        }
        for _ in 0..count {
            let name = r.text()?;
            let id = bundle
                .params
                .find(&name)
                .ok_or_else(|| r.corrupt(format!("unknown tensor {name}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            if shape != bundle.params.get(id).shape() {
                return Err(r.corrupt(format!("tensor {name} has shape {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            bundle.params.set(id, Tensor::new(shape, data)?)?;
        }
        if !r.at_end() {
            return Err(r.corrupt("trailing bytes after the last tensor"));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelBundle::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the architecture against `expected`.
    pub fn load_expecting(path: &Path, expected: &BundleSpec) -> Result<Self> {
        let b = ModelBundle::load(path)?;
        if b.spec.fingerprint() != expected.fingerprint() {
            return Err(Error::Fingerprint {
                expected: expected.fingerprint(),
                found: b.spec.fingerprint(),
            });
        }
        Ok(b)
    }
}
