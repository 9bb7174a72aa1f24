//! Multi-scale temporal hashing: a dense near-term segment plus a few
//! logarithmically spaced far-term anchors.
//!
//! Given total horizon `K`, proximal horizon `P`, vision stride `r` and `M`
//! distal anchors, the schedule holds
//!
//! * proximal vision offsets `r, 2r, …, P`
//! * proximal action offsets `1, 2, …, P`
//! * distal offsets `d_m = P + ⌊(K − P)/ln(M+1) · ln(m+1)⌋`, `m = 1..M`,
//!   used for both frames and actions.
//!
//! `M = 0` is accepted and yields a fixed-horizon (proximal-only) schedule.

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;
use crate::trainkit::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MsthParams {
    /// Total imagined horizon in timesteps.
    pub horizon: usize,
    /// Proximal horizon in timesteps.
    pub proximal: usize,
    /// Vision sampling stride.
    pub stride: usize,
    /// Number of distal anchors.
    pub distal: usize,
}

impl MsthParams {
    pub fn new(horizon: usize, proximal: usize, stride: usize, distal: usize) -> Self {
        MsthParams {
            horizon,
            proximal,
            stride,
            distal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let MsthParams {
            horizon: k,
            proximal: p,
            stride: r,
            distal: m,
        } = *self;
        if r < 1 {
            return Err(Error::Schedule("stride r must be ≥ 1".into()));
        }
        if p < r {
            return Err(Error::Schedule(format!("need P ≥ r, got P={p}, r={r}")));
        }
        if p % r != 0 {
            return Err(Error::Schedule(format!("r must divide P, got P={p}, r={r}")));
        }
        if k <= p {
            return Err(Error::Schedule(format!("need K > P, got K={k}, P={p}")));
        }
        if k - p < m {
            return Err(Error::Schedule(format!(
                "need K − P ≥ M for distinct distal offsets, got K−P={}, M={m}",
                k - p
            )));
        }
        Ok(())
    }

    /// Latent frames per sample: `P/r + M`.
    pub fn frame_count(&self) -> usize {
        self.proximal / self.stride + self.distal
    }

    /// Action rows per sample: `P + M`.
    pub fn action_count(&self) -> usize {
        self.proximal + self.distal
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "K{}-P{}-r{}-M{}",
            self.horizon, self.proximal, self.stride, self.distal
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsthSchedule {
    pub params: MsthParams,
    pub proximal_vision: Vec<usize>,
    pub distal: Vec<usize>,
    pub proximal_actions: Vec<usize>,
}

impl MsthSchedule {
    /// Frame offsets in target order: proximal vision then distal.
    pub fn vision_offsets(&self) -> Vec<usize> {
        self.proximal_vision.iter().chain(&self.distal).copied().collect()
    }

    /// Action offsets in target order: dense proximal then distal.
    pub fn action_offsets(&self) -> Vec<usize> {
        self.proximal_actions.iter().chain(&self.distal).copied().collect()
    }

    pub fn distal_action_offsets(&self) -> &[usize] {
        &self.distal
    }
}

/// Raw spacing formula evaluated with logarithm base `base`.
pub fn distal_offsets_with_base(p: &MsthParams, base: f64) -> Vec<usize> {
    let m_total = p.distal;
    let span = (p.horizon - p.proximal) as f64;
    let denom = ((m_total + 1) as f64).log(base);
    let mut out: Vec<usize> = (1..=m_total)
        .map(|m| {
            if m == m_total {
                // ln(M+1)/ln(M+1) is exactly one
                return p.horizon;
            }
            let frac = ((m + 1) as f64).log(base) / denom;
            p.proximal + (span * frac + 1e-9).floor() as usize
        })
        .collect();
    // collisions after flooring: bump the later index, then pull back from
    // the horizon so the last anchor stays at K
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1;
        }
    }
    if let Some(last) = out.last_mut() {
        *last = p.horizon;
    }
    for i in (0..out.len().saturating_sub(1)).rev() {
        if out[i] >= out[i + 1] {
            out[i] = out[i + 1] - 1;
        }
    }
    out
}

pub fn compute_schedule(p: &MsthParams) -> Result<MsthSchedule> {
    p.validate()?;
    let distal = distal_offsets_with_base(p, std::f64::consts::E);
    debug_assert!(distal.iter().all(|&d| d > p.proximal && d <= p.horizon));
    Ok(MsthSchedule {
        params: *p,
        proximal_vision: (1..=p.proximal / p.stride).map(|k| k * p.stride).collect(),
        distal,
        proximal_actions: (1..=p.proximal).collect(),
    })
}

/// Training target sliced from one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct MsthTarget {
    /// Images at `anchor + offset`, proximal vision then distal.
    pub visual_targets: Vec<Tensor>,
    /// `[(P+M) × action_dim]`, dense proximal rows then distal rows.
    pub action_targets: Tensor,
    pub anchor_index: usize,
}

/// Frame and action indices a schedule reads from a trajectory of `len`
/// observations at `anchor`. Frame indices past the end clamp to the
/// terminal observation; action slots past the end are `None` (stay).
pub fn target_indices(len: usize, anchor: usize, sched: &MsthSchedule) -> (Vec<usize>, Vec<Option<usize>>) {
    let last = len - 1;
    let frames = sched.vision_offsets().into_iter().map(|o| (anchor + o).min(last)).collect();
    // action at offset o moves frame anchor+o−1 to anchor+o
    let actions = sched
        .action_offsets()
        .into_iter()
        .map(|o| {
            let i = anchor + o - 1;
            (i < last).then_some(i)
        })
        .collect();
    (frames, actions)
}

/// Picks the frames and actions a schedule asks for at `anchor`.
///
/// Frame offsets past the end repeat the terminal observation. Action
/// offsets past the end use the stay action (zero motion, gripper held as
/// in the terminal observation).
pub fn slice_trajectory(traj: &Trajectory, anchor: usize, sched: &MsthSchedule) -> Result<MsthTarget> {
    let len = traj.observations.len();
    if len == 0 {
        return Err(Error::invalid("cannot slice an empty trajectory"));
    }
    if anchor >= len {
        return Err(Error::invalid(format!("anchor {anchor} outside trajectory of {len} frames")));
    }
    let (frames, actions) = target_indices(len, anchor, sched);
    let visual_targets = frames.into_iter().map(|i| traj.observations[i].image.clone()).collect();
    let stay = traj.stay_action().to_vector(traj.a_max);
    let mut rows = Vec::with_capacity(actions.len() * stay.len());
    for slot in actions {
        match slot {
            Some(i) => rows.extend_from_slice(&traj.actions[i].to_vector(traj.a_max)),
            None => rows.extend_from_slice(&stay),
        }
    }
    Ok(MsthTarget {
        visual_targets,
        action_targets: Tensor::matrix(sched.params.action_count(), stay.len(), rows)?,
        anchor_index: anchor,
    })
}
