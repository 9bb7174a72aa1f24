//! Demonstration datasets and their binary file format.
//!
//! Layout (little-endian): magic `A2G1`, `u16` version, `u32` manifest
//! length, UTF-8 manifest of `key=value` lines, then one record per
//! trajectory: `u64` seed, `u32` observation count, and four
//! length-prefixed `f32` arrays (images, proprio, actions, goal image).
//! Actions are stored as `[dx, dy, grip]` with grip in `{0, 1}`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::simenv::{self, Action, EnvConfig, Observation, PROPRIO_DIM};
use crate::tensorcore::Tensor;

use super::Trajectory;

pub const DATASET_MAGIC: &[u8; 4] = b"A2G1";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env_fingerprint: String,
    pub a_max: f64,
    pub resolution: usize,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Rounds through `f32` so in-memory data equals what a reload yields.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(q)
}

/// Scripted-expert demonstrations, one reset seed per episode.
pub fn generate_demos(cfg: &EnvConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one demonstration"));
    }
    cfg.validate()?;
    let env_fingerprint = cfg.fingerprint();
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let ep_seed = rng::derive(seed, i as u64);
        let (start, goal, _) = simenv::reset(cfg, ep_seed)?;
        let (states, actions) = simenv::expert_rollout(&start, &goal, cfg);
        let observations = states
            .iter()
            .map(|s| {
                let o = simenv::observe(s, cfg);
                Observation {
                    image: quantize(&o.image),
                    proprio: quantize(&o.proprio),
                }
            })
            .collect::<Vec<_>>();
        let actions = actions
            .iter()
            .map(|a| Action {
                delta: [q(a.delta[0]), q(a.delta[1])],
                grip: a.grip,
            })
            .collect();
        let goal_image = observations.last().expect("rollout has a start state").image.clone();
        trajectories.push(Trajectory {
            observations,
            actions,
            goal_image,
            seed: ep_seed,
            env_fingerprint: env_fingerprint.clone(),
            a_max: cfg.a_max,
        });
    }
    Ok(Dataset {
        env_fingerprint,
        a_max: cfg.a_max,
        resolution: cfg.resolution,
        seed,
        trajectories,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: impl ExactSizeIterator<Item = f64>) {
    put_u32(out, vals.len());
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Cursor that reports the byte offset of every failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt {
            offset: at as u64,
            msg: "text is not UTF-8".into(),
        })
    }

    fn f32s(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Corrupt {
                offset: at as u64,
                msg: format!("{what}: length {n}, expected {expected}"),
            });
        }
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }
}

pub(crate) fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Corrupt {
                    offset: 0,
                    msg: format!("manifest line without '=': {l}"),
                })
        })
        .collect()
}

fn manifest_get<'m>(m: &'m [(String, String)], key: &str) -> Result<&'m str> {
    m.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Corrupt {
            offset: 0,
            msg: format!("manifest lacks {key}"),
        })
}

fn manifest_num<T: std::str::FromStr>(m: &[(String, String)], key: &str) -> Result<T> {
    manifest_get(m, key)?.parse().map_err(|_| Error::Corrupt {
        offset: 0,
        msg: format!("manifest value for {key} is not a number"),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let manifest = format!(
            "count={}\nenv={}\na_max={}\nresolution={}\nseed={}\n",
            self.trajectories.len(),
            self.env_fingerprint,
            self.a_max,
            self.resolution,
            self.seed
        );
        put_u32(&mut out, manifest.len());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.trajectories {
            out.extend_from_slice(&t.seed.to_le_bytes());
            put_u32(&mut out, t.observations.len());
            put_f32s(
                &mut out,
                t.observations
                    .iter()
                    .flat_map(|o| o.image.data().iter().copied())
                    .collect::<Vec<_>>()
                    .into_iter(),
            );
            put_f32s(
                &mut out,
                t.observations
                    .iter()
                    .flat_map(|o| o.proprio.data().iter().copied())
                    .collect::<Vec<_>>()
                    .into_iter(),
            );
            put_f32s(
                &mut out,
                t.actions
                    .iter()
                    .flat_map(|a| [a.delta[0], a.delta[1], if a.grip { 1.0 } else { 0.0 }])
                    .collect::<Vec<_>>()
                    .into_iter(),
            );
            put_f32s(&mut out, t.goal_image.data().iter().copied());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Corrupt {
                offset: 0,
                msg: "bad magic, not a dataset file".into(),
            });
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let manifest = parse_manifest(&r.text()?)?;
        let count: usize = manifest_num(&manifest, "count")?;
        let a_max: f64 = manifest_num(&manifest, "a_max")?;
        let resolution: usize = manifest_num(&manifest, "resolution")?;
        let seed: u64 = manifest_num(&manifest, "seed")?;
        let env_fingerprint = manifest_get(&manifest, "env")?.to_string();
        let px = resolution * resolution;
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let t_seed = r.u64()?;
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(r.corrupt("trajectory without observations"));
            }
            let images = r.f32s(n * px, "images")?;
            let proprio = r.f32s(n * PROPRIO_DIM, "proprio")?;
            let actions = r.f32s((n - 1) * 3, "actions")?;
            let goal = r.f32s(px, "goal image")?;
            let observations = (0..n)
                .map(|i| {
                    Ok(Observation {
                        image: Tensor::matrix(resolution, resolution, images[i * px..(i + 1) * px].to_vec())?,
                        proprio: Tensor::vector(proprio[i * PROPRIO_DIM..(i + 1) * PROPRIO_DIM].to_vec()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let actions = actions
                .chunks_exact(3)
                .map(|c| Action {
                    delta: [c[0], c[1]],
                    grip: c[2] > 0.5,
                })
                .collect();
            trajectories.push(Trajectory {
                observations,
                actions,
                goal_image: Tensor::matrix(resolution, resolution, goal)?,
                seed: t_seed,
                env_fingerprint: env_fingerprint.clone(),
                a_max,
            });
        }
        if !r.at_end() {
            return Err(r.corrupt(format!("{} trailing bytes after {count} records", buf.len() - r.pos())));
        }
        Ok(Dataset {
            env_fingerprint,
            a_max,
            resolution,
            seed,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&fs::read(path)?)
    }
}
