//! Synthetic frequency-multiplexed dispersive readout.
//!
//! Each qubit's baseband response follows a piecewise ring-up trajectory between
//! level centroids, driven by a relaxation cascade (2→1→0) and at most one
//! excitation event. Responses are mixed by a linear crosstalk matrix, placed on
//! their intermediate-frequency tones, summed onto a single feedline and sampled
//! with white Gaussian noise on both quadratures.
//!
//! Draw order from a shot's stream, which fixes reproducibility:
//! for each qubit in index order: one uniform for prepared-state leakage, the
//! relaxation dwell exponentials, one uniform selecting the excitation, one
//! uniform for its time, then (only if an excitation happened) the dwell
//! exponentials of the post-excitation cascade. After all qubits, one normal per
//! quadrature per sample in the order I\[0\], Q\[0\], I\[1\], Q\[1\], ...

use std::f64::consts::TAU;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Stream;

pub type Level = u8;

/// Number of readout levels handled throughout the toolkit.
pub const NUM_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitConfig {
    pub index: usize,
    /// Intermediate frequency in Hz.
    pub if_freq: f64,
    /// Steady-state baseband response for levels 0, 1, 2.
    pub level_response: [Complex64; NUM_LEVELS],
    /// Resonator ring-up time constant in seconds. Zero means instantaneous steps.
    pub ring_tau: f64,
    /// Lifetime of level 1 in seconds.
    pub t1: f64,
    /// Lifetime of level 2 (decaying to 1) in seconds.
    pub t1_level2: f64,
    pub p_excite_01: f64,
    pub p_excite_02: f64,
    pub p_excite_12: f64,
    /// Probability that a computational preparation is actually leaked to level 2.
    pub p_leak_prep: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub qubits: Vec<QubitConfig>,
    /// Samples per second.
    pub sample_rate: f64,
    /// Readout duration in seconds.
    pub duration: f64,
    /// Gaussian noise standard deviation per quadrature per raw sample.
    pub noise_std: f64,
    /// Row q gives the weights of every qubit's response on qubit q's tone.
    pub crosstalk: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Relaxation constants of the default device, in seconds.
pub const DEFAULT_T1_RANGE: (f64, f64) = (7e-6, 40e-6);

impl DeviceConfig {
    /// Default `n`-qubit device. Only the T1 values depend on `seed`.
    pub fn default_for(n_qubits: usize, seed: u64) -> Self {
        let mut stream = Stream::new(seed, "device", 0);
        let qubits = (0..n_qubits)
            .map(|q| {
                let t1 = stream.uniform_range(DEFAULT_T1_RANGE.0, DEFAULT_T1_RANGE.1);
                let phase = 0.35 * q as f64;
                let level_response = std::array::from_fn(|level| {
                    Complex64::from_polar(1.0, phase + TAU / 4.0 + TAU / 3.0 * level as f64)
                });
                QubitConfig {
                    index: q,
                    if_freq: 50e6 + 30e6 * q as f64,
                    level_response,
                    ring_tau: 60e-9,
                    t1,
                    t1_level2: t1 / 2.0,
                    p_excite_01: 5e-3,
                    p_excite_02: 1e-3,
                    p_excite_12: 5e-3,
                    p_leak_prep: 5e-3,
                }
            })
            .collect();
        let crosstalk = (0..n_qubits)
            .map(|q| {
                (0..n_qubits)
                    .map(|j| match q.abs_diff(j) {
                        0 => 1.0,
                        1 => 0.08,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        DeviceConfig {
            qubits,
            sample_rate: 500e6,
            duration: 1e-6,
            noise_std: 0.25,
            crosstalk,
            seed,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.qubits.len()
    }

    /// Samples per shot, `sample_rate × duration`.
    pub fn n_samples(&self) -> usize {
        (self.sample_rate * self.duration).round() as usize
    }

    /// Shrink one qubit's centroid separation around their mean, emulating a
    /// qubit with poor state distinguishability.
    pub fn with_weak_qubit(mut self, qubit: usize, factor: f64) -> Self {
        if let Some(q) = self.qubits.get_mut(qubit) {
            let mean = q.level_response.iter().sum::<Complex64>() / NUM_LEVELS as f64;
            for c in q.level_response.iter_mut() {
                *c = mean + (*c - mean) * factor;
            }
        }
        self
    }

    /// Set every qubit's level-1 lifetime to `t1` and level-2 lifetime to `t1/2`.
    pub fn with_t1(mut self, t1: f64) -> Self {
        for q in &mut self.qubits {
            q.t1 = t1;
            q.t1_level2 = t1 / 2.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.qubits.len();
        if n == 0 {
            return Err(invalid("device needs at least one qubit"));
        }
        for (name, v) in [
            ("sample_rate", self.sample_rate),
            ("duration", self.duration),
            ("noise_std", self.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.sample_rate <= 0.0 || self.duration <= 0.0 {
            return Err(invalid("sample_rate and duration must be positive"));
        }
        let samples = self.sample_rate * self.duration;
        if samples < 1.0 || (samples - samples.round()).abs() > 1e-6 * samples.max(1.0) {
            return Err(invalid(format!(
                "sample_rate × duration must be a positive integer, got {samples}"
            )));
        }
        if self.crosstalk.len() != n || self.crosstalk.iter().any(|r| r.len() != n) {
            return Err(invalid(format!("crosstalk must be {n}×{n}")));
        }
        for (q, row) in self.crosstalk.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(invalid("crosstalk entries must be finite"));
                }
                if q == j && x != 1.0 {
                    return Err(invalid(format!("crosstalk[{q}][{q}] must be 1.0")));
                }
                if q != j && x.abs() >= 0.2 {
                    return Err(invalid(format!("|crosstalk[{q}][{j}]| must be < 0.2")));
                }
            }
        }
        let nyquist = self.sample_rate / 2.0;
        for (pos, q) in self.qubits.iter().enumerate() {
            if q.index != pos {
                return Err(invalid(format!("qubit at position {pos} has index {}", q.index)));
            }
            q.validate(nyquist)?;
        }
        for a in 0..n {
            for b in a + 1..n {
                if self.qubits[a].if_freq == self.qubits[b].if_freq {
                    return Err(invalid(format!("qubits {a} and {b} share an IF")));
                }
            }
        }
        Ok(())
    }
}

impl QubitConfig {
    fn validate(&self, nyquist: f64) -> Result<()> {
        let q = self.index;
        if !self.if_freq.is_finite() || self.if_freq.abs() >= nyquist {
            return Err(invalid(format!("qubit {q}: IF {} not below Nyquist {nyquist}", self.if_freq)));
        }
        for c in &self.level_response {
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(invalid(format!("qubit {q}: non-finite level response")));
            }
        }
        for a in 0..NUM_LEVELS {
            for b in a + 1..NUM_LEVELS {
                if (self.level_response[a] - self.level_response[b]).norm() <= 0.0 {
                    return Err(invalid(format!("qubit {q}: levels {a} and {b} share a centroid")));
                }
            }
        }
        if !(self.ring_tau.is_finite() && self.ring_tau >= 0.0) {
            return Err(invalid(format!("qubit {q}: ring_tau must be finite and >= 0")));
        }
        for (name, v) in [("t1", self.t1), ("t1_level2", self.t1_level2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("qubit {q}: {name} must be finite and > 0")));
            }
        }
        for (name, p) in [
            ("p_excite_01", self.p_excite_01),
            ("p_excite_02", self.p_excite_02),
            ("p_excite_12", self.p_excite_12),
            ("p_leak_prep", self.p_leak_prep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("qubit {q}: {name} = {p} outside [0, 1]")));
            }
        }
        if self.p_excite_01 + self.p_excite_02 > 1.0 {
            return Err(invalid(format!("qubit {q}: p_excite_01 + p_excite_02 > 1")));
        }
        Ok(())
    }

    fn lifetime(&self, level: Level) -> f64 {
        if level == 2 {
            self.t1_level2
        } else {
            self.t1
        }
    }
}

/// A single level change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    #[serde(rename = "1->0")]
    Relax10,
    #[serde(rename = "2->1")]
    Relax21,
    #[serde(rename = "0->1")]
    Excite01,
    #[serde(rename = "0->2")]
    Excite02,
    #[serde(rename = "1->2")]
    Excite12,
}

impl Transition {
    pub fn from_level(self) -> Level {
        match self {
            Transition::Relax10 | Transition::Excite12 => 1,
            Transition::Relax21 => 2,
            Transition::Excite01 | Transition::Excite02 => 0,
        }
    }

    pub fn to_level(self) -> Level {
        match self {
            Transition::Relax10 => 0,
            Transition::Relax21 | Transition::Excite01 => 1,
            Transition::Excite02 | Transition::Excite12 => 2,
        }
    }

    fn relaxation_from(level: Level) -> Option<Self> {
        match level {
            2 => Some(Transition::Relax21),
            1 => Some(Transition::Relax10),
            _ => None,
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from_level(), self.to_level())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: f64,
    pub transition: Transition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitTruth {
    pub prepared_level: Level,
    pub effective_initial_level: Level,
    pub events: Vec<Event>,
}

impl QubitTruth {
    pub fn final_level(&self) -> Level {
        self.events.last().map_or(self.effective_initial_level, |e| e.transition.to_level())
    }

    pub fn level_at(&self, t: f64) -> Level {
        let mut level = self.effective_initial_level;
        for e in &self.events {
            if e.time_s > t {
                break;
            }
            level = e.transition.to_level();
        }
        level
    }

    pub fn has_transition(&self, tr: Transition) -> bool {
        self.events.iter().any(|e| e.transition == tr)
    }

    /// Leaked at preparation, or excited into level 2 during readout.
    pub fn is_leakage(&self) -> bool {
        self.effective_initial_level == 2 || self.events.iter().any(|e| e.transition.to_level() == 2)
    }

    /// Seconds spent in `level` during a readout window of length `duration`.
    pub fn time_in_level(&self, level: Level, duration: f64) -> f64 {
        let mut current = self.effective_initial_level;
        let mut start = 0.0;
        let mut total = 0.0;
        for e in &self.events {
            let t = e.time_s.min(duration);
            if current == level {
                total += t - start;
            }
            current = e.transition.to_level();
            start = t;
        }
        if current == level {
            total += duration - start;
        }
        total
    }

    /// Event times strictly increasing inside `[0, duration]`, levels chained.
    pub fn is_consistent(&self, duration: f64) -> bool {
        let mut level = self.effective_initial_level;
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.time_s > last && e.time_s >= 0.0 && e.time_s <= duration) {
                return false;
            }
            if e.transition.from_level() != level {
                return false;
            }
            level = e.transition.to_level();
            last = e.time_s;
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub qubits: Vec<QubitTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawShot {
    pub i_samples: Vec<f32>,
    pub q_samples: Vec<f32>,
    pub truth: GroundTruth,
    pub prep_label: Vec<Level>,
}

impl RawShot {
    pub fn len(&self) -> usize {
        self.i_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_samples.is_empty()
    }
}

/// Unit-magnitude carrier `e^{+i·2π·f·t}` for each qubit and sample.
///
/// The phase is reduced modulo one cycle before scaling by 2π so long traces
/// keep full precision.
#[derive(Clone, Debug)]
pub struct Carriers {
    n_samples: usize,
    tones: Vec<Vec<Complex64>>,
}

impl Carriers {
    pub fn new(device: &DeviceConfig) -> Self {
        let n = device.n_samples();
        let tones = device
            .qubits
            .iter()
            .map(|q| carrier(q.if_freq, device.sample_rate, n))
            .collect();
        Carriers { n_samples: n, tones }
    }

    pub fn tone(&self, qubit: usize) -> &[Complex64] {
        &self.tones[qubit]
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
}

pub(crate) fn carrier(if_freq: f64, sample_rate: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let cycles = (if_freq * k as f64 / sample_rate).rem_euclid(1.0);
            Complex64::from_polar(1.0, TAU * cycles)
        })
        .collect()
}

/// Shot generator with precomputed carriers. Immutable and shareable.
#[derive(Clone, Debug)]
pub struct TraceSimulator<'a> {
    device: &'a DeviceConfig,
    carriers: Carriers,
}

impl<'a> TraceSimulator<'a> {
    pub fn new(device: &'a DeviceConfig) -> Result<Self> {
        device.validate()?;
        Ok(TraceSimulator { device, carriers: Carriers::new(device) })
    }

    pub fn device(&self) -> &DeviceConfig {
        self.device
    }

    /// Stream for shot `index`.
    pub fn shot_stream(&self, index: u64) -> Stream {
        Stream::new(self.device.seed, "trace-sim", index)
    }

    pub fn sample(&self, prep: &[Level], stream: &mut Stream) -> Result<RawShot> {
        let dev = self.device;
        let n_q = dev.n_qubits();
        if prep.len() != n_q {
            return Err(invalid(format!(
                "prep vector has {} levels, device has {n_q} qubits",
                prep.len()
            )));
        }
        if let Some(&bad) = prep.iter().find(|&&l| l as usize >= NUM_LEVELS) {
            return Err(invalid(format!("prep level {bad} outside 0..=2")));
        }
        let n = self.carriers.n_samples();
        let dt = 1.0 / dev.sample_rate;

        let truths: Vec<QubitTruth> = dev
            .qubits
            .iter()
            .zip(prep)
            .map(|(q, &p)| draw_truth(q, p, dev.duration, stream))
            .collect();

        let signals: Vec<Vec<Complex64>> = dev
            .qubits
            .iter()
            .zip(&truths)
            .map(|(q, t)| baseband_signal(q, t, n, dt))
            .collect();

        let mut feed = vec![Complex64::new(0.0, 0.0); n];
        for (q, row) in dev.crosstalk.iter().enumerate() {
            let tone = self.carriers.tone(q);
            for (k, out) in feed.iter_mut().enumerate() {
                let mut mixed = Complex64::new(0.0, 0.0);
                for (j, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        mixed += signals[j][k] * w;
                    }
                }
                *out += mixed * tone[k];
            }
        }

        let mut i_samples = Vec::with_capacity(n);
        let mut q_samples = Vec::with_capacity(n);
        for x in &feed {
            let ni = stream.normal() * dev.noise_std;
            let nq = stream.normal() * dev.noise_std;
            i_samples.push((x.re + ni) as f32);
            q_samples.push((x.im + nq) as f32);
        }
        Ok(RawShot {
            i_samples,
            q_samples,
            truth: GroundTruth { qubits: truths },
            prep_label: prep.to_vec(),
        })
    }
}

/// Convenience wrapper building a [`TraceSimulator`] for one shot.
pub fn sample_trace(device: &DeviceConfig, prep: &[Level], stream: &mut Stream) -> Result<RawShot> {
    TraceSimulator::new(device)?.sample(prep, stream)
}

fn relaxation_cascade(q: &QubitConfig, from: Level, start: f64, duration: f64, stream: &mut Stream, events: &mut Vec<Event>) {
    let mut level = from;
    let mut t = start;
    while let Some(tr) = Transition::relaxation_from(level) {
        t += stream.exponential(q.lifetime(level));
        if t >= duration {
            break;
        }
        events.push(Event { time_s: t, transition: tr });
        level = tr.to_level();
    }
}

fn draw_truth(q: &QubitConfig, prep: Level, duration: f64, stream: &mut Stream) -> QubitTruth {
    let leak = stream.uniform() < q.p_leak_prep;
    let initial = if prep < 2 && leak { 2 } else { prep };

    let mut events = Vec::new();
    relaxation_cascade(q, initial, 0.0, duration, stream, &mut events);

    let u = stream.uniform();
    let t_exc = stream.uniform() * duration;
    let truth = QubitTruth { prepared_level: prep, effective_initial_level: initial, events };
    let level = truth.level_at(t_exc);
    let excitation = match level {
        0 if u < q.p_excite_01 => Some(Transition::Excite01),
        0 if u < q.p_excite_01 + q.p_excite_02 => Some(Transition::Excite02),
        1 if u < q.p_excite_12 => Some(Transition::Excite12),
        _ => None,
    };
    let mut truth = truth;
    if let Some(tr) = excitation {
        // t_exc == 0 would coincide with the start of readout; and an event at
        // exactly the same time as an earlier relaxation breaks strict ordering.
        if t_exc > 0.0 && truth.events.iter().all(|e| e.time_s != t_exc) {
            truth.events.retain(|e| e.time_s < t_exc);
            truth.events.push(Event { time_s: t_exc, transition: tr });
            relaxation_cascade(q, tr.to_level(), t_exc, duration, stream, &mut truth.events);
        }
    }
    truth
}

/// Piecewise ring-up trajectory sampled at `k·dt`.
fn baseband_signal(q: &QubitConfig, truth: &QubitTruth, n: usize, dt: f64) -> Vec<Complex64> {
    let mut boundaries: Vec<(f64, Level)> = vec![(0.0, truth.effective_initial_level)];
    boundaries.extend(truth.events.iter().map(|e| (e.time_s, e.transition.to_level())));

    let approach = |start: Complex64, target: Complex64, elapsed: f64| -> Complex64 {
        let frac = if q.ring_tau == 0.0 { 1.0 } else { 1.0 - (-elapsed / q.ring_tau).exp() };
        start + (target - start) * frac
    };

    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    let mut seg_start_value = Complex64::new(0.0, 0.0);
    for k in 0..n {
        let t = k as f64 * dt;
        while seg + 1 < boundaries.len() && boundaries[seg + 1].0 <= t {
            let (t0, level) = boundaries[seg];
            let t1 = boundaries[seg + 1].0;
            seg_start_value = approach(seg_start_value, q.level_response[level as usize], t1 - t0);
            seg += 1;
        }
        let (t0, level) = boundaries[seg];
        out.push(approach(seg_start_value, q.level_response[level as usize], t - t0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_qubit(c0: Complex64) -> DeviceConfig {
        let mut d = DeviceConfig::default_for(1, 3);
        let q = &mut d.qubits[0];
        q.if_freq = 0.0;
        q.ring_tau = 0.0;
        q.level_response[0] = c0;
        q.p_leak_prep = 0.0;
        q.p_excite_01 = 0.0;
        q.p_excite_02 = 0.0;
        q.p_excite_12 = 0.0;
        d.noise_std = 0.0;
        d
    }

    #[test]
    fn noiseless_dc_steady_state() {
        let d = single_qubit(Complex64::new(1.0, 0.0));
        let mut s = Stream::new(1, "t", 0);
        let shot = sample_trace(&d, &[0], &mut s).unwrap();
        assert_eq!(shot.len(), 500);
        assert!(shot.i_samples.iter().all(|&x| x == 1.0));
        assert!(shot.q_samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forced_leakage() {
        let mut d = single_qubit(Complex64::new(1.0, 0.0));
        d.qubits[0].p_leak_prep = 1.0;
        let sim = TraceSimulator::new(&d).unwrap();
        for i in 0..200 {
            let shot = sim.sample(&[0], &mut sim.shot_stream(i)).unwrap();
            assert_eq!(shot.truth.qubits[0].effective_initial_level, 2);
            assert_eq!(shot.truth.qubits[0].prepared_level, 0);
        }
    }

    #[test]
    fn rejects_bad_prep() {
        let d = DeviceConfig::default_for(2, 0);
        let mut s = Stream::new(1, "t", 0);
        assert!(sample_trace(&d, &[0], &mut s).is_err());
        assert!(sample_trace(&d, &[0, 3], &mut s).is_err());
    }

    #[test]
    fn rejects_non_finite_config() {
        let mut d = DeviceConfig::default_for(2, 0);
        d.qubits[1].t1 = f64::NAN;
        assert!(d.validate().is_err());
        let mut d = DeviceConfig::default_for(2, 0);
        d.noise_std = f64::INFINITY;
        assert!(d.validate().is_err());
        let mut d = DeviceConfig::default_for(2, 0);
        d.crosstalk[0][1] = 0.25;
        assert!(d.validate().is_err());
        let mut d = DeviceConfig::default_for(2, 0);
        d.qubits[1].if_freq = d.qubits[0].if_freq;
        assert!(d.validate().is_err());
    }

    #[test]
    fn ring_up_is_continuous_across_a_decay() {
        let mut q = single_qubit(Complex64::new(0.0, 1.0)).qubits[0].clone();
        q.ring_tau = 50e-9;
        let truth = QubitTruth {
            prepared_level: 1,
            effective_initial_level: 1,
            events: vec![Event { time_s: 301e-9, transition: Transition::Relax10 }],
        };
        let sig = baseband_signal(&q, &truth, 500, 2e-9);
        assert_eq!(sig[0], Complex64::new(0.0, 0.0));
        // Jump between consecutive samples stays small around the event.
        for k in 148..155 {
            assert!((sig[k + 1] - sig[k]).norm() < 0.1, "k={k}");
        }
        assert!((sig[499] - q.level_response[0]).norm() < 1e-3);
    }

    #[test]
    fn default_device_is_valid() {
        let d = DeviceConfig::default_for(5, 11);
        d.validate().unwrap();
        assert_eq!(d.n_samples(), 500);
        for q in &d.qubits {
            assert!(q.t1 >= 7e-6 && q.t1 <= 40e-6);
        }
    }
}
