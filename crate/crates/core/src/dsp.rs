//! Demodulation, mean trace values and the matched-filter bank.
//!
//! Every qubit gets nine kernels, stored qubit-major and kind-minor in the
//! order of [`KernelKind::ALL`]:
//!
//! | slot | kind      | class a                    | class b                   |
//! |------|-----------|----------------------------|---------------------------|
//! | 0    | QMF(0\|1) | level 0                    | level 1                   |
//! | 1    | QMF(0\|2) | level 0                    | level 2                   |
//! | 2    | QMF(1\|2) | level 1                    | level 2                   |
//! | 3    | RMF(1→0)  | untagged prepared-1 traces | traces tagged 1→0         |
//! | 4    | RMF(2→0)  | untagged prepared-2 traces | traces tagged 2→0         |
//! | 5    | RMF(2→1)  | untagged prepared-2 traces | traces tagged 2→1         |
//! | 6    | EMF(0→1)  | untagged prepared-0 traces | traces tagged 0→1         |
//! | 7    | EMF(0→2)  | untagged prepared-0 traces | traces tagged 0→2         |
//! | 8    | EMF(1→2)  | untagged prepared-1 traces | traces tagged 1→2         |
//!
//! QMF classes use the level labels; error classes use the prepared level,
//! and a trace is tagged `s→s'` when its MTV lies strictly nearer the level-`s'`
//! centroid than the level-`s` one.
//!
//! Feature `9·q + slot` of a shot is `Re(Σ_t conj(K[t])·z_q[t]) / n_keep`.

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TraceDataset;
use crate::error::{invalid, Error, Result};
use crate::sim::{carrier, DeviceConfig, Level, QubitConfig, RawShot, NUM_LEVELS};

pub const KERNELS_PER_QUBIT: usize = 9;

/// Minimum number of tagged traces for an error kernel to be built.
pub const DEFAULT_MIN_ERROR_TRACES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BasebandTrace {
    pub qubit_index: usize,
    pub samples: Vec<Complex64>,
}

impl BasebandTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Down-convert qubit `qubit`'s tone: `z[t] = (I[t] + i·Q[t])·e^{-i·2π·f·t/fs}`.
pub fn demodulate(shot: &RawShot, qubit: &QubitConfig, sample_rate: f64, n_keep: usize) -> Result<BasebandTrace> {
    if n_keep == 0 || n_keep > shot.len() {
        return Err(invalid(format!("n_keep {n_keep} outside 1..={}", shot.len())));
    }
    let tone = carrier(qubit.if_freq, sample_rate, n_keep);
    Ok(mix_down(shot, qubit.index, &tone))
}

fn mix_down(shot: &RawShot, qubit_index: usize, tone: &[Complex64]) -> BasebandTrace {
    let samples = tone
        .iter()
        .zip(shot.i_samples.iter().zip(&shot.q_samples))
        .map(|(c, (&i, &q))| Complex64::new(i as f64, q as f64) * c.conj())
        .collect();
    BasebandTrace { qubit_index, samples }
}

/// Demodulator with carriers precomputed for a device.
#[derive(Clone, Debug)]
pub struct Demodulator {
    tones: Vec<Vec<Complex64>>,
}

impl Demodulator {
    pub fn new(device: &DeviceConfig) -> Self {
        let n = device.n_samples();
        Demodulator {
            tones: device.qubits.iter().map(|q| carrier(q.if_freq, device.sample_rate, n)).collect(),
        }
    }

    pub fn demodulate(&self, shot: &RawShot, qubit: usize, n_keep: usize) -> Result<BasebandTrace> {
        let tone = self.tones.get(qubit).ok_or_else(|| invalid(format!("no qubit {qubit}")))?;
        if n_keep == 0 || n_keep > shot.len() || n_keep > tone.len() {
            return Err(invalid(format!("n_keep {n_keep} outside 1..={}", shot.len())));
        }
        Ok(mix_down(shot, qubit, &tone[..n_keep]))
    }
}

/// Mean trace value.
pub fn mtv(trace: &BasebandTrace) -> Result<Complex64> {
    if trace.is_empty() {
        return Err(invalid("mean of an empty trace"));
    }
    Ok(trace.samples.iter().sum::<Complex64>() / trace.len() as f64)
}

/// Per-bin mean and total variance (`var(re) + var(im)`, population form).
///
/// Statistics are accumulated on samples shifted by the first trace, so a bin
/// where every trace agrees has exactly zero variance instead of rounding
/// residue (which the ε guard would otherwise amplify into a huge tap).
fn bin_stats(traces: &[&BasebandTrace]) -> (Vec<Complex64>, Vec<f64>) {
    let shift = &traces[0].samples;
    let n = shift.len();
    let count = traces.len() as f64;
    let mut mean = vec![Complex64::new(0.0, 0.0); n];
    for tr in traces {
        for ((m, z), s) in mean.iter_mut().zip(&tr.samples).zip(shift) {
            *m += z - s;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; n];
    for tr in traces {
        for (((v, m), z), s) in var.iter_mut().zip(&mean).zip(&tr.samples).zip(shift) {
            *v += (z - s - m).norm_sqr();
        }
    }
    for ((v, m), s) in var.iter_mut().zip(mean.iter_mut()).zip(shift) {
        *v /= count;
        *m += s;
    }
    (mean, var)
}

/// Matched-filter taps separating class `a` from class `b`:
/// `K[t] = (μ_b − μ_a) / (σ²_b − σ²_a + sign·ε)` with
/// `ε = 1e-12·max|σ²_b − σ²_a|`, and `K[t] = μ_b − μ_a` where the variance
/// difference is exactly zero.
pub fn build_kernel(a: &[&BasebandTrace], b: &[&BasebandTrace]) -> Result<Vec<Complex64>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid(format!(
            "kernel classes need at least 2 traces each, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a[0].len();
    if n == 0 || a.iter().chain(b).any(|t| t.len() != n) {
        return Err(invalid("kernel traces must be non-empty and of equal length"));
    }
    let (mu_a, var_a) = bin_stats(a);
    let (mu_b, var_b) = bin_stats(b);
    let dvar: Vec<f64> = var_b.iter().zip(&var_a).map(|(vb, va)| vb - va).collect();
    let eps = 1e-12 * dvar.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok((0..n)
        .map(|t| {
            let dmu = mu_b[t] - mu_a[t];
            let d = dvar[t];
            if d == 0.0 {
                dmu
            } else {
                dmu / (d + d.signum() * eps)
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "QMF(0|1)")]
    Qmf01,
    #[serde(rename = "QMF(0|2)")]
    Qmf02,
    #[serde(rename = "QMF(1|2)")]
    Qmf12,
    #[serde(rename = "RMF(1->0)")]
    Rmf10,
    #[serde(rename = "RMF(2->0)")]
    Rmf20,
    #[serde(rename = "RMF(2->1)")]
    Rmf21,
    #[serde(rename = "EMF(0->1)")]
    Emf01,
    #[serde(rename = "EMF(0->2)")]
    Emf02,
    #[serde(rename = "EMF(1->2)")]
    Emf12,
}

impl KernelKind {
    pub const ALL: [KernelKind; KERNELS_PER_QUBIT] = [
        KernelKind::Qmf01,
        KernelKind::Qmf02,
        KernelKind::Qmf12,
        KernelKind::Rmf10,
        KernelKind::Rmf20,
        KernelKind::Rmf21,
        KernelKind::Emf01,
        KernelKind::Emf02,
        KernelKind::Emf12,
    ];

    pub fn slot(self) -> usize {
        KernelKind::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Level pair for QMFs, `(from, to)` for error filters.
    pub fn levels(self) -> (Level, Level) {
        match self {
            KernelKind::Qmf01 => (0, 1),
            KernelKind::Qmf02 => (0, 2),
            KernelKind::Qmf12 => (1, 2),
            KernelKind::Rmf10 => (1, 0),
            KernelKind::Rmf20 => (2, 0),
            KernelKind::Rmf21 => (2, 1),
            KernelKind::Emf01 => (0, 1),
            KernelKind::Emf02 => (0, 2),
            KernelKind::Emf12 => (1, 2),
        }
    }

    pub fn is_qmf(self) -> bool {
        self.slot() < 3
    }

    /// The error class an RMF/EMF targets.
    pub fn error_class(self) -> Option<ErrorClass> {
        if self.is_qmf() {
            None
        } else {
            let (s, d) = self.levels();
            ErrorClass::between(s, d)
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.levels();
        match self.slot() {
            0..=2 => write!(f, "QMF({a}|{b})"),
            3..=5 => write!(f, "RMF({a}->{b})"),
            _ => write!(f, "EMF({a}->{b})"),
        }
    }
}

/// A trace prepared in one level whose MTV sits nearer another level's centroid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    Relax10,
    Relax20,
    Relax21,
    Excite01,
    Excite02,
    Excite12,
}

impl ErrorClass {
    pub fn between(from: Level, to: Level) -> Option<Self> {
        Some(match (from, to) {
            (1, 0) => ErrorClass::Relax10,
            (2, 0) => ErrorClass::Relax20,
            (2, 1) => ErrorClass::Relax21,
            (0, 1) => ErrorClass::Excite01,
            (0, 2) => ErrorClass::Excite02,
            (1, 2) => ErrorClass::Excite12,
            _ => return None,
        })
    }

    pub fn from_level(self) -> Level {
        match self {
            ErrorClass::Relax10 | ErrorClass::Excite12 => 1,
            ErrorClass::Relax20 | ErrorClass::Relax21 => 2,
            ErrorClass::Excite01 | ErrorClass::Excite02 => 0,
        }
    }
}

/// Tag each trace whose MTV is strictly nearer another level's centroid than
/// its own label's centroid. Ties between other centroids go to the lower level.
pub fn tag_error_traces(mtvs: &[Complex64], labels: &[Level], centroids: &[Complex64; NUM_LEVELS]) -> Result<Vec<Option<ErrorClass>>> {
    if mtvs.len() != labels.len() {
        return Err(invalid("mtv and label counts differ"));
    }
    if centroids.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(invalid("missing (non-finite) centroid"));
    }
    mtvs.iter()
        .zip(labels)
        .map(|(p, &own)| {
            if own as usize >= NUM_LEVELS {
                return Err(invalid(format!("label {own} outside 0..=2")));
            }
            let own_d = (p - centroids[own as usize]).norm_sqr();
            let mut best: Option<(f64, Level)> = None;
            for (lvl, c) in centroids.iter().enumerate() {
                let lvl = lvl as Level;
                if lvl == own {
                    continue;
                }
                let d = (p - c).norm_sqr();
                if d < own_d && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, lvl));
                }
            }
            Ok(best.and_then(|(_, to)| ErrorClass::between(own, to)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFilterKernel {
    pub qubit_index: usize,
    pub kind: KernelKind,
    /// True when too few traces existed and the taps are all zero.
    pub zero: bool,
    pub taps: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFilterBank {
    pub dataset_id: String,
    pub kernel_length: usize,
    pub sample_rate: f64,
    pub if_freqs: Vec<f64>,
    /// Qubit-major, [`KernelKind::ALL`] order within a qubit.
    pub kernels: Vec<MatchedFilterKernel>,
}

impl MatchedFilterBank {
    pub fn n_qubits(&self) -> usize {
        self.if_freqs.len()
    }

    /// Feature dimension `P = 9n`.
    pub fn feature_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel(&self, qubit: usize, kind: KernelKind) -> &MatchedFilterKernel {
        &self.kernels[qubit * KERNELS_PER_QUBIT + kind.slot()]
    }

    pub fn zero_kernels(&self) -> Vec<(usize, KernelKind)> {
        self.kernels.iter().filter(|k| k.zero).map(|k| (k.qubit_index, k.kind)).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        crate::json::to_vec_sig17(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let bank: MatchedFilterBank = serde_json::from_slice(bytes)?;
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<()> {
        if self.kernels.len() != KERNELS_PER_QUBIT * self.if_freqs.len() {
            return Err(Error::Format("bank must hold exactly 9 kernels per qubit".into()));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if k.qubit_index != i / KERNELS_PER_QUBIT || k.kind != KernelKind::ALL[i % KERNELS_PER_QUBIT] {
                return Err(Error::Format(format!("kernel {i} out of order")));
            }
            if k.taps.len() != self.kernel_length {
                return Err(Error::Format(format!("kernel {i} has {} taps", k.taps.len())));
            }
            if k.taps.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
                return Err(Error::Format(format!("kernel {i} has non-finite taps")));
            }
        }
        Ok(())
    }
}

/// Everything needed to build a bank from one qubit's labeled traces.
pub struct QubitTraining<'a> {
    pub traces: &'a [BasebandTrace],
    /// Level labels (cluster-assigned or ground truth) used for QMFs.
    pub labels: &'a [Level],
    /// Intended (prepared) level, the source level for error tagging.
    pub sources: &'a [Level],
    pub tags: &'a [Option<ErrorClass>],
}

/// The nine kernels of one qubit.
pub fn build_qubit_kernels(qubit: usize, data: &QubitTraining<'_>, kernel_length: usize, min_error_traces: usize) -> Result<Vec<MatchedFilterKernel>> {
    let by_level: Vec<Vec<&BasebandTrace>> = (0..NUM_LEVELS as Level)
        .map(|l| data.traces.iter().zip(data.labels).filter(|(_, &y)| y == l).map(|(t, _)| t).collect())
        .collect();
    let represented = by_level.iter().filter(|v| v.len() >= 2).count();
    if represented < 2 {
        return Err(Error::Data(format!(
            "qubit {qubit}: fewer than 2 levels have at least 2 training traces"
        )));
    }
    let zero = |kind| MatchedFilterKernel {
        qubit_index: qubit,
        kind,
        zero: true,
        taps: vec![Complex64::new(0.0, 0.0); kernel_length],
    };
    KernelKind::ALL
        .iter()
        .map(|&kind| {
            let (class_a, class_b): (Vec<&BasebandTrace>, Vec<&BasebandTrace>) = match kind.error_class() {
                None => {
                    let (a, b) = kind.levels();
                    (by_level[a as usize].clone(), by_level[b as usize].clone())
                }
                Some(err) => {
                    let src = err.from_level();
                    let pick = |want: Option<ErrorClass>| -> Vec<&BasebandTrace> {
                        data.traces
                            .iter()
                            .zip(data.sources.iter().zip(data.tags))
                            .filter(|(_, (&y, &tag))| y == src && tag == want)
                            .map(|(t, _)| t)
                            .collect()
                    };
                    let errs = pick(Some(err));
                    if errs.len() < min_error_traces.max(2) {
                        return Ok(zero(kind));
                    }
                    (pick(None), errs)
                }
            };
            if class_a.len() < 2 || class_b.len() < 2 {
                return Ok(zero(kind));
            }
            let taps = build_kernel(&class_a, &class_b)?;
            let all_zero = taps.iter().all(|t| t.re == 0.0 && t.im == 0.0);
            Ok(MatchedFilterKernel { qubit_index: qubit, kind, zero: all_zero, taps })
        })
        .collect()
}

/// Build the bank from the shots listed in `train`.
///
/// `labels[q][shot]` are the level labels the QMFs separate. Error traces are
/// tagged against each shot's prepared level: a shot prepared in `s` whose
/// MTV lies strictly nearer `centroids[q][s']` than `centroids[q][s]`.
pub fn build_filter_bank(
    ds: &TraceDataset,
    train: &[usize],
    labels: &[Vec<Level>],
    centroids: &[[Complex64; NUM_LEVELS]],
    min_error_traces: usize,
) -> Result<MatchedFilterBank> {
    let n_q = ds.n_qubits();
    if labels.len() != n_q || centroids.len() != n_q {
        return Err(invalid("labels and centroids must be given for every qubit"));
    }
    if labels.iter().any(|l| l.len() != ds.len()) {
        return Err(invalid("labels must cover every shot"));
    }
    let n = ds.n_samples();
    let demod = Demodulator::new(&ds.device);
    let per_qubit = (0..n_q)
        .into_par_iter()
        .map(|q| {
            let traces = train
                .iter()
                .map(|&i| demod.demodulate(&ds.shots[i], q, n))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<Level> = train.iter().map(|&i| labels[q][i]).collect();
            let sources: Vec<Level> = train.iter().map(|&i| ds.shots[i].prep_label[q]).collect();
            let mtvs = traces.iter().map(mtv).collect::<Result<Vec<_>>>()?;
            let tags = tag_error_traces(&mtvs, &sources, &centroids[q])?;
            let data = QubitTraining { traces: &traces, labels: &ys, sources: &sources, tags: &tags };
            build_qubit_kernels(q, &data, n, min_error_traces)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchedFilterBank {
        dataset_id: ds.id(),
        kernel_length: n,
        sample_rate: ds.device.sample_rate,
        if_freqs: ds.device.qubits.iter().map(|q| q.if_freq).collect(),
        kernels: per_qubit.into_iter().flatten().collect(),
    })
}

/// Keep the first `n_keep` taps of every kernel.
pub fn truncate_bank(bank: &MatchedFilterBank, n_keep: usize) -> Result<MatchedFilterBank> {
    if n_keep == 0 || n_keep > bank.kernel_length {
        return Err(invalid(format!("n_keep {n_keep} outside 1..={}", bank.kernel_length)));
    }
    let mut out = bank.clone();
    out.kernel_length = n_keep;
    for k in out.kernels.iter_mut() {
        k.taps.truncate(n_keep);
    }
    Ok(out)
}

/// Applies a bank to raw shots.
///
/// Demodulation and the conjugated dot product are folded into one real
/// weight pair per sample: `Re(conj(K)·(I+iQ)·conj(c)) = Wr·I − Wi·Q` with
/// `W = conj(K·c)`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    n_keep: usize,
    n_qubits: usize,
    wr: Vec<Vec<f64>>,
    wi: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(bank: &MatchedFilterBank, n_keep: usize) -> Result<Self> {
        if n_keep == 0 || n_keep > bank.kernel_length {
            return Err(invalid(format!("n_keep {n_keep} outside 1..={}", bank.kernel_length)));
        }
        let tones: Vec<Vec<Complex64>> = bank.if_freqs.iter().map(|&f| carrier(f, bank.sample_rate, n_keep)).collect();
        let (wr, wi) = bank
            .kernels
            .iter()
            .map(|k| {
                let tone = &tones[k.qubit_index];
                k.taps[..n_keep]
                    .iter()
                    .zip(tone)
                    .map(|(kt, c)| {
                        let w = (kt * c).conj();
                        (w.re, w.im)
                    })
                    .unzip::<f64, f64, Vec<f64>, Vec<f64>>()
            })
            .unzip();
        Ok(FeatureExtractor { n_keep, n_qubits: bank.n_qubits(), wr, wi })
    }

    pub fn n_keep(&self) -> usize {
        self.n_keep
    }

    pub fn feature_dim(&self) -> usize {
        self.wr.len()
    }

    pub fn features(&self, shot: &RawShot) -> Result<Vec<f64>> {
        if shot.prep_label.len() != self.n_qubits || shot.truth.qubits.len() != self.n_qubits {
            return Err(invalid(format!(
                "bank covers {} qubits, shot has {}",
                self.n_qubits,
                shot.prep_label.len()
            )));
        }
        if shot.len() < self.n_keep {
            return Err(invalid(format!("shot has {} samples, need {}", shot.len(), self.n_keep)));
        }
        let i = &shot.i_samples[..self.n_keep];
        let q = &shot.q_samples[..self.n_keep];
        let scale = 1.0 / self.n_keep as f64;
        Ok(self
            .wr
            .iter()
            .zip(&self.wi)
            .map(|(wr, wi)| {
                let mut acc = 0.0;
                for t in 0..self.n_keep {
                    acc += wr[t] * i[t] as f64 - wi[t] * q[t] as f64;
                }
                acc * scale
            })
            .collect())
    }

    /// Features of the listed shots, in order.
    pub fn features_for(&self, ds: &TraceDataset, shots: &[usize]) -> Result<Vec<Vec<f64>>> {
        shots.par_iter().map(|&i| self.features(&ds.shots[i])).collect()
    }
}

pub fn apply_bank(bank: &MatchedFilterBank, shot: &RawShot, n_keep: usize) -> Result<Vec<f64>> {
    FeatureExtractor::new(bank, n_keep)?.features(shot)
}
