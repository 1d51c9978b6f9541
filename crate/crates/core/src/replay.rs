//! FIFO experience replay with uniform, combined (CER) and proportional
//! prioritized (PER) batch samplers.
//!
//! Indices handed out by the samplers are positions in the buffer at the time
//! of sampling, 0 being the oldest stored transition.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"OFFPOCRB";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("requested {requested} transitions from a buffer holding {size}")]
    InsufficientData { size: usize, requested: usize },
    #[error("index {index} out of range for buffer of size {size}")]
    InvalidIndex { index: usize, size: usize },
    #[error("priorities are only tracked by the per sampler")]
    NotPrioritized,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Behavioral Gaussian parameters at collection time (stochastic agents).
    pub policy_params: Option<PolicyParams>,
    /// Environment step at which the transition was collected.
    pub birth_step: u64,
}

impl Transition {
    fn validate(&self) -> Result<(), ReplayError> {
        let finite = self.state.iter().chain(&self.action).chain(&self.next_state).all(|x| x.is_finite())
            && self.reward.is_finite();
        if !finite {
            return Err(ReplayError::InvalidTransition("non-finite entry".into()));
        }
        if self.state.len() != self.next_state.len() {
            return Err(ReplayError::InvalidTransition("state and next_state lengths differ".into()));
        }
        if let Some(p) = &self.policy_params {
            if p.mean.len() != self.action.len() || p.std.len() != self.action.len() {
                return Err(ReplayError::InvalidTransition("policy params do not match action dimension".into()));
            }
            if p.mean.iter().any(|m| !m.is_finite()) || p.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(ReplayError::InvalidTransition("policy std must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SamplerKind {
    Uniform,
    Cer,
    Per { alpha: f64, beta: f64, epsilon: f64 },
}

impl SamplerKind {
    pub fn per_default() -> Self {
        SamplerKind::Per { alpha: 0.6, beta: 0.4, epsilon: 1e-6 }
    }
}

/// Positions drawn by a sampler plus PER importance weights (max-normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndices {
    pub indices: Vec<usize>,
    pub is_weights: Option<Vec<f64>>,
}

/// A gathered batch in matrix form, rows in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
    /// Present only when every row carries behavioral parameters.
    pub policy_mean: Option<Array2<f64>>,
    pub policy_std: Option<Array2<f64>>,
    pub birth_steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    sampler: SamplerKind,
    storage: VecDeque<Transition>,
    priorities: VecDeque<f64>,
    max_priority: f64,
    dims: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sampler: SamplerKind) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Config("capacity must be positive".into()));
        }
        if let SamplerKind::Per { alpha, beta, epsilon } = sampler {
            if !(alpha >= 0.0 && beta >= 0.0 && epsilon > 0.0) {
                return Err(ReplayError::Config("per needs alpha >= 0, beta >= 0, epsilon > 0".into()));
            }
        }
        Ok(Self {
            capacity,
            sampler,
            storage: VecDeque::with_capacity(capacity.min(1 << 20)),
            priorities: VecDeque::new(),
            max_priority: 1.0,
            dims: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sampler(&self) -> SamplerKind {
        self.sampler
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn newest(&self) -> Option<&Transition> {
        self.storage.back()
    }

    pub fn priorities(&self) -> Option<Vec<f64>> {
        matches!(self.sampler, SamplerKind::Per { .. }).then(|| self.priorities.iter().copied().collect())
    }

    /// Appends a transition, evicting the oldest one when full.
    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        t.validate()?;
        let dims = (t.state.len(), t.action.len());
        match self.dims {
            Some(d) if d != dims => {
                return Err(ReplayError::InvalidTransition(format!("dimensions {dims:?} differ from buffer {d:?}")))
            }
            _ => self.dims = Some(dims),
        }
        if let Some(last) = self.storage.back() {
            if t.birth_step <= last.birth_step {
                return Err(ReplayError::InvalidTransition(format!(
                    "birth_step {} does not follow {}",
                    t.birth_step, last.birth_step
                )));
            }
        }
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
            if !self.priorities.is_empty() {
                self.priorities.pop_front();
            }
        }
        self.storage.push_back(t);
        if matches!(self.sampler, SamplerKind::Per { .. }) {
            self.priorities.push_back(self.max_priority);
        }
        Ok(())
    }

    /// Removes every transition collected before `cutoff_step`.
    pub fn purge_exploration(&mut self, cutoff_step: u64) {
        let keep_from = self.storage.iter().position(|t| t.birth_step >= cutoff_step).unwrap_or(self.storage.len());
        self.storage.drain(..keep_from);
        if !self.priorities.is_empty() {
            self.priorities.drain(..keep_from);
        }
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<SampleIndices, ReplayError> {
        let n = self.storage.len();
        if batch_size == 0 || batch_size > n {
            return Err(ReplayError::InsufficientData { size: n, requested: batch_size });
        }
        match self.sampler {
            SamplerKind::Uniform => Ok(SampleIndices { indices: index::sample(rng, n, batch_size).into_vec(), is_weights: None }),
            SamplerKind::Cer => {
                let mut indices = Vec::with_capacity(batch_size);
                indices.push(n - 1);
                indices.extend(index::sample(rng, n - 1, batch_size - 1).into_iter());
                Ok(SampleIndices { indices, is_weights: None })
            }
            SamplerKind::Per { alpha, beta, .. } => Ok(self.sample_prioritized(batch_size, alpha, beta, rng)),
        }
    }

    /// Proportional sampling without replacement: successive draws from the
    /// priority distribution, rejecting repeats.
    fn sample_prioritized(&self, batch_size: usize, alpha: f64, beta: f64, rng: &mut impl Rng) -> SampleIndices {
        let weights: Vec<f64> = self.priorities.iter().map(|p| p.powf(alpha)).collect();
        let total: f64 = weights.iter().sum();
        let mut cumsum = cumulative(&weights);
        let mut chosen = HashSet::with_capacity(batch_size);
        let mut indices = Vec::with_capacity(batch_size);
        while indices.len() < batch_size {
            let mut picked = None;
            for _ in 0..32 {
                let i = draw(&cumsum, rng);
                if !chosen.contains(&i) {
                    picked = Some(i);
                    break;
                }
            }
            let i = match picked {
                Some(i) => i,
                None => {
                    // Chosen items hold most of the mass; draw from the rest exactly.
                    let rest: Vec<f64> =
                        weights.iter().enumerate().map(|(k, w)| if chosen.contains(&k) { 0.0 } else { *w }).collect();
                    cumsum = cumulative(&rest);
                    draw(&cumsum, rng)
                }
            };
            chosen.insert(i);
            indices.push(i);
        }
        let n = weights.len() as f64;
        let raw: Vec<f64> = indices.iter().map(|&i| (n * weights[i] / total).powf(-beta)).collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        SampleIndices { indices, is_weights: Some(raw.iter().map(|w| w / max).collect()) }
    }

    /// Sets `priority_i = |td_error_i| + epsilon` for the given positions.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        let SamplerKind::Per { epsilon, .. } = self.sampler else {
            return Err(ReplayError::NotPrioritized);
        };
        if indices.len() != td_errors.len() {
            return Err(ReplayError::Config("indices and td errors differ in length".into()));
        }
        let size = self.storage.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= size) {
            return Err(ReplayError::InvalidIndex { index, size });
        }
        for (&i, d) in indices.iter().zip(td_errors) {
            let p = if d.is_finite() { d.abs() + epsilon } else { self.max_priority };
            self.priorities[i] = p;
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch, ReplayError> {
        let size = self.storage.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= size) {
            return Err(ReplayError::InvalidIndex { index, size });
        }
        let (m, n) = self.dims.ok_or(ReplayError::InsufficientData { size: 0, requested: indices.len() })?;
        let b = indices.len();
        let mut states = Array2::zeros((b, m));
        let mut actions = Array2::zeros((b, n));
        let mut next_states = Array2::zeros((b, m));
        let mut rewards = Array1::zeros(b);
        let mut dones = Array1::zeros(b);
        let with_params = indices.iter().all(|&i| self.storage[i].policy_params.is_some());
        let mut mean = with_params.then(|| Array2::zeros((b, n)));
        let mut std = with_params.then(|| Array2::zeros((b, n)));
        let mut birth_steps = Vec::with_capacity(b);
        for (r, &i) in indices.iter().enumerate() {
            let t = &self.storage[i];
            states.row_mut(r).assign(&ndarray::ArrayView1::from(&t.state));
            actions.row_mut(r).assign(&ndarray::ArrayView1::from(&t.action));
            next_states.row_mut(r).assign(&ndarray::ArrayView1::from(&t.next_state));
            rewards[r] = t.reward;
            dones[r] = if t.done { 1.0 } else { 0.0 };
            if let (Some(mu), Some(sd), Some(p)) = (mean.as_mut(), std.as_mut(), &t.policy_params) {
                mu.row_mut(r).assign(&ndarray::ArrayView1::from(&p.mean));
                sd.row_mut(r).assign(&ndarray::ArrayView1::from(&p.std));
            }
            birth_steps.push(t.birth_step);
        }
        Ok(Batch { states, actions, rewards, next_states, dones, policy_mean: mean, policy_std: std, birth_steps })
    }

    /// Serializes the buffer (see [`ReplayBuffer::from_bytes`] for the layout).
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            capacity: self.capacity,
            sampler: self.sampler,
            dims: self.dims,
            max_priority: self.max_priority,
            count: self.storage.len(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_bits().to_le_bytes());
        for (k, t) in self.storage.iter().enumerate() {
            out.extend_from_slice(&t.birth_step.to_le_bytes());
            out.push(u8::from(t.done) | (u8::from(t.policy_params.is_some()) << 1));
            put(&mut out, t.reward);
            t.state.iter().chain(&t.action).chain(&t.next_state).for_each(|v| put(&mut out, *v));
            if let Some(p) = &t.policy_params {
                p.mean.iter().chain(&p.std).for_each(|v| put(&mut out, *v));
            }
            if let Some(p) = self.priorities.get(k) {
                put(&mut out, *p);
            }
        }
        out
    }

    /// Layout: magic `OFFPOCRB`, u32 version, u64 header length, JSON header
    /// (capacity, sampler, dims, max priority, count), then per transition:
    /// u64 birth step, u8 flags (bit 0 done, bit 1 policy params), f64 reward,
    /// state, action, next state, optional mean and std, and the priority when
    /// the sampler is PER. Little-endian throughout; floats as raw bits.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        let err = |m: &str| ReplayError::Snapshot(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ReplayError> {
            let end = pos.checked_add(n).filter(|e| *e <= bytes.len()).ok_or_else(|| err("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != SNAPSHOT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(ReplayError::Snapshot(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: SnapshotHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        let mut buf = ReplayBuffer::new(header.capacity, header.sampler)?;
        let per = matches!(header.sampler, SamplerKind::Per { .. });
        if header.count > 0 {
            let (m, n) = header.dims.ok_or_else(|| err("missing dimensions"))?;
            for _ in 0..header.count {
                let birth_step = u64::from_le_bytes(take(8)?.try_into().unwrap());
                let flags = take(1)?[0];
                let mut floats = |k: usize| -> Result<Vec<f64>, ReplayError> {
                    Ok(take(8 * k)?.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
                };
                let reward = floats(1)?[0];
                let state = floats(m)?;
                let action = floats(n)?;
                let next_state = floats(m)?;
                let policy_params = if flags & 2 != 0 {
                    Some(PolicyParams { mean: floats(n)?, std: floats(n)? })
                } else {
                    None
                };
                let priority = if per { Some(floats(1)?[0]) } else { None };
                buf.push(Transition { state, action, reward, next_state, done: flags & 1 != 0, policy_params, birth_step })?;
                if let Some(p) = priority {
                    *buf.priorities.back_mut().unwrap() = p;
                }
            }
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        buf.max_priority = header.max_priority;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ReplayError::Snapshot(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let bytes = std::fs::read(path).map_err(|e| ReplayError::Snapshot(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    capacity: usize,
    sampler: SamplerKind,
    dims: Option<(usize, usize)>,
    max_priority: f64,
    count: usize,
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw(cumsum: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cumsum.last().unwrap();
    let u = rng.random::<f64>() * total;
    cumsum.partition_point(|c| *c <= u).min(cumsum.len() - 1)
}
