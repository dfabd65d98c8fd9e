//! Labeled collections of simulated shots.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::GENERATOR_NAME;
use crate::sim::{DeviceConfig, Level, RawShot, TraceSimulator, NUM_LEVELS};

/// Fraction of each state's shots used for training (validation included).
pub const TRAIN_FRACTION: f64 = 0.30;
/// Fraction of the training shots held out for validation.
pub const VAL_FRACTION_OF_TRAIN: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceDataset {
    pub device: DeviceConfig,
    pub states: Vec<Vec<Level>>,
    pub shots_per_state: usize,
    /// Shot `s·shots_per_state + k` is the k-th shot of state `s`.
    pub shots: Vec<RawShot>,
    pub split: Vec<Split>,
}

/// All `levels^n` basis states, qubit 0 as the most significant digit.
pub fn basis_states(n_qubits: usize, levels: usize) -> Vec<Vec<Level>> {
    let total = levels.pow(n_qubits as u32);
    (0..total)
        .map(|mut i| {
            let mut digits = vec![0 as Level; n_qubits];
            for d in digits.iter_mut().rev() {
                *d = (i % levels) as Level;
                i /= levels;
            }
            digits
        })
        .collect()
}

/// The `2^n` computational basis states.
pub fn computational_states(n_qubits: usize) -> Vec<Vec<Level>> {
    basis_states(n_qubits, 2)
}

/// All `3^n` three-level basis states.
pub fn all_states(n_qubits: usize) -> Vec<Vec<Level>> {
    basis_states(n_qubits, NUM_LEVELS)
}

/// Split tag of the `k`-th shot of a state, stratified per state:
/// the first 15% of the training share is validation, the rest of the
/// training share is train, everything after is test.
pub fn split_for(k: usize, shots_per_state: usize) -> Split {
    let n_train = (TRAIN_FRACTION * shots_per_state as f64).round() as usize;
    let n_val = (VAL_FRACTION_OF_TRAIN * n_train as f64).round() as usize;
    if k < n_val {
        Split::Val
    } else if k < n_train {
        Split::Train
    } else {
        Split::Test
    }
}

pub fn generate_dataset(device: &DeviceConfig, states: &[Vec<Level>], shots_per_state: usize) -> Result<TraceDataset> {
    if shots_per_state == 0 {
        return Err(invalid("shots_per_state must be >= 1"));
    }
    if states.is_empty() {
        return Err(invalid("state list is empty"));
    }
    let mut seen = HashSet::new();
    for s in states {
        if !seen.insert(s.as_slice()) {
            return Err(invalid(format!("duplicate state {s:?}")));
        }
    }
    let sim = TraceSimulator::new(device)?;
    let total = states.len() * shots_per_state;
    let shots = (0..total)
        .into_par_iter()
        .map(|i| {
            let prep = &states[i / shots_per_state];
            sim.sample(prep, &mut sim.shot_stream(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let split = (0..total).map(|i| split_for(i % shots_per_state, shots_per_state)).collect();
    Ok(TraceDataset {
        device: device.clone(),
        states: states.to_vec(),
        shots_per_state,
        shots,
        split,
    })
}

impl TraceDataset {
    pub fn n_qubits(&self) -> usize {
        self.device.n_qubits()
    }

    pub fn n_samples(&self) -> usize {
        self.device.n_samples()
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Identifier derived from everything that determines the shots.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(GENERATOR_NAME.as_bytes());
        h.update(serde_json::to_vec(&self.device).expect("device serializes"));
        h.update(serde_json::to_vec(&self.states).expect("states serialize"));
        h.update((self.shots_per_state as u64).to_le_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Ground-truth effective initial level of every shot for one qubit.
    pub fn truth_levels(&self, qubit: usize) -> Vec<Level> {
        self.shots.iter().map(|s| s.truth.qubits[qubit].effective_initial_level).collect()
    }

    /// Prepared level of every shot for one qubit.
    pub fn prep_levels(&self, qubit: usize) -> Vec<Level> {
        self.shots.iter().map(|s| s.prep_label[qubit]).collect()
    }
}
