//! Fidelities, confusion matrices, leakage metrics, duration sweeps and the
//! parameter-scaling table.

use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TraceDataset;
use crate::dsp::{FeatureExtractor, KernelKind, MatchedFilterBank, KERNELS_PER_QUBIT};
use crate::error::{invalid, Error, Result};
use crate::mlp::{layer_sizes, parameter_count_for, MlpModel};
use crate::sim::{Level, NUM_LEVELS};

/// Parameter count of the monolithic feed-forward reference at n = 5, k = 3.
pub const REFERENCE_FNN_PARAMS: u64 = 686_000;

/// Rows are the reference level, columns the predicted level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_LEVELS]; NUM_LEVELS]);

impl ConfusionMatrix {
    pub fn from_pairs(predicted: &[Level], reference: &[Level]) -> Result<Self> {
        if predicted.len() != reference.len() {
            return Err(invalid("prediction and reference lengths differ"));
        }
        let mut m = [[0u64; NUM_LEVELS]; NUM_LEVELS];
        for (&p, &r) in predicted.iter().zip(reference) {
            if p as usize >= NUM_LEVELS || r as usize >= NUM_LEVELS {
                return Err(invalid("level outside 0..=2"));
            }
            m[r as usize][p as usize] += 1;
        }
        Ok(ConfusionMatrix(m))
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> [u64; NUM_LEVELS] {
        self.0.map(|r| r.iter().sum())
    }
}

/// `trace / sum`.
pub fn fidelity(c: &ConfusionMatrix) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(invalid("fidelity of an all-zero confusion matrix"));
    }
    let diag: u64 = (0..NUM_LEVELS).map(|i| c.0[i][i]).sum();
    Ok(diag as f64 / total as f64)
}

/// `(∏ f_i)^(1/n)`, evaluated in log space.
pub fn geomean_fidelity(f: &[f64]) -> Result<f64> {
    if f.is_empty() {
        return Err(invalid("geometric mean of nothing"));
    }
    if let Some(bad) = f.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(invalid(format!("fidelity {bad} outside (0, 1]")));
    }
    Ok((f.iter().map(|v| v.ln()).sum::<f64>() / f.len() as f64).exp())
}

/// Precision and recall of level 2 as the positive class. An empty
/// denominator gives 1.0 when nothing was wrongly predicted, else 0.0.
pub fn leakage_metrics(predicted: &[Level], reference: &[Level]) -> Result<(f64, f64)> {
    if predicted.len() != reference.len() {
        return Err(invalid("prediction and reference lengths differ"));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &r) in predicted.iter().zip(reference) {
        match (p == 2, r == 2) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: u64, den: u64, wrong: u64| {
        if den == 0 {
            if wrong == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Ok((ratio(tp, tp + fp, fp), ratio(tp, tp + fneg, fp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitScore {
    pub qubit: usize,
    pub fidelity: f64,
    pub confusion: ConfusionMatrix,
    pub leak_precision: f64,
    pub leak_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub qubits: Vec<QubitScore>,
    pub mean_fidelity: f64,
    pub geomean_fidelity: f64,
}

/// Score per-qubit predictions (`predicted[q][shot]`) against reference labels.
pub fn score_method(method: &str, predicted: &[Vec<Level>], reference: &[Vec<Level>]) -> Result<MethodReport> {
    if predicted.len() != reference.len() || predicted.is_empty() {
        return Err(invalid("need predictions and references for the same, non-empty qubit set"));
    }
    let qubits = predicted
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(q, (p, r))| {
            let confusion = ConfusionMatrix::from_pairs(p, r)?;
            let (leak_precision, leak_recall) = leakage_metrics(p, r)?;
            Ok(QubitScore { qubit: q, fidelity: fidelity(&confusion)?, confusion, leak_precision, leak_recall })
        })
        .collect::<Result<Vec<_>>>()?;
    let fids: Vec<f64> = qubits.iter().map(|s| s.fidelity).collect();
    let mean_fidelity = fids.iter().sum::<f64>() / fids.len() as f64;
    // A qubit with zero accuracy makes the geometric mean 0 rather than an error.
    let geomean_fidelity = if fids.contains(&0.0) { 0.0 } else { geomean_fidelity(&fids)? };
    Ok(MethodReport { method: method.to_string(), qubits, mean_fidelity, geomean_fidelity })
}

/// Mean fidelity over the qubits not listed in `exclude`.
pub fn mean_fidelity_excluding(report: &MethodReport, exclude: &[usize]) -> Option<f64> {
    let kept: Vec<f64> = report.qubits.iter().filter(|s| !exclude.contains(&s.qubit)).map(|s| s.fidelity).collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Per-qubit MLP labels (`[qubit][row]`) for feature rows.
pub fn predict_mlp(models: &[MlpModel], features: &[Vec<f64>]) -> Result<Vec<Vec<Level>>> {
    models
        .iter()
        .map(|m| features.iter().map(|f| Ok(m.infer(f)?.label)).collect())
        .collect()
}

/// Baseline that uses only a qubit's own three pairwise QMF outputs: each
/// pair votes by comparing its output to the midpoint of the two class means
/// seen in training; the level with most votes wins (ties to the lower level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmfVote {
    pub qubit_index: usize,
    /// Per pair `(a, b)` in QMF order: `(threshold, +1 if b lies above)`.
    pub pairs: Vec<(f64, f64)>,
}

const QMF_KINDS: [KernelKind; 3] = [KernelKind::Qmf01, KernelKind::Qmf02, KernelKind::Qmf12];

impl QmfVote {
    pub fn fit(qubit_index: usize, features: &[Vec<f64>], labels: &[Level]) -> Result<Self> {
        let pairs = QMF_KINDS
            .iter()
            .map(|&kind| {
                let col = qubit_index * KERNELS_PER_QUBIT + kind.slot();
                let (a, b) = kind.levels();
                let mean = |lvl: Level| -> Result<f64> {
                    let v: Vec<f64> = features.iter().zip(labels).filter(|(_, &l)| l == lvl).map(|(f, _)| f[col]).collect();
                    if v.is_empty() {
                        return Err(Error::Data(format!("qubit {qubit_index}: level {lvl} absent from training labels")));
                    }
                    Ok(v.iter().sum::<f64>() / v.len() as f64)
                };
                let (ma, mb) = (mean(a)?, mean(b)?);
                Ok(((ma + mb) / 2.0, if mb >= ma { 1.0 } else { -1.0 }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QmfVote { qubit_index, pairs })
    }

    pub fn classify(&self, features: &[f64]) -> Level {
        let mut votes = [0u8; NUM_LEVELS];
        for (&kind, &(t, dir)) in QMF_KINDS.iter().zip(&self.pairs) {
            let (a, b) = kind.levels();
            let x = features[self.qubit_index * KERNELS_PER_QUBIT + kind.slot()];
            let winner = if (x - t) * dir > 0.0 { b } else { a };
            votes[winner as usize] += 1;
        }
        let mut best = 0;
        for l in 1..NUM_LEVELS {
            if votes[l] > votes[best] {
                best = l;
            }
        }
        best as Level
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_keep: usize,
    pub duration_ns: f64,
    pub mean_fidelity: f64,
    pub geomean_fidelity: f64,
}

/// MLP evaluation on `shots` at a given trace length, with the bank
/// truncated to `n_keep` taps and the models left untouched.
pub fn evaluate_mlp_at(
    ds: &TraceDataset,
    bank: &MatchedFilterBank,
    models: &[MlpModel],
    shots: &[usize],
    reference: &[Vec<Level>],
    n_keep: usize,
) -> Result<MethodReport> {
    let fx = FeatureExtractor::new(bank, n_keep)?;
    let features = fx.features_for(ds, shots)?;
    score_method("mlp", &predict_mlp(models, &features)?, reference)
}

/// Mean fidelity versus readout length without retraining. `reference[q]`
/// holds the labels of `shots` for qubit `q`.
pub fn duration_sweep(
    ds: &TraceDataset,
    bank: &MatchedFilterBank,
    models: &[MlpModel],
    shots: &[usize],
    reference: &[Vec<Level>],
    n_keep_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if n_keep_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("n_keep list must be strictly ascending"));
    }
    if let Some(&bad) = n_keep_list.iter().find(|&&n| n == 0 || n > bank.kernel_length) {
        return Err(invalid(format!("n_keep {bad} outside 1..={}", bank.kernel_length)));
    }
    n_keep_list
        .par_iter()
        .map(|&n_keep| {
            let r = evaluate_mlp_at(ds, bank, models, shots, reference, n_keep)?;
            Ok(SweepRow {
                n_keep,
                duration_ns: n_keep as f64 / bank.sample_rate * 1e9,
                mean_fidelity: r.mean_fidelity,
                geomean_fidelity: r.geomean_fidelity,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub k: usize,
    /// Feature width `n·3·k(k−1)/2`.
    pub p: usize,
    pub params_per_qubit: u64,
    pub params_total: u64,
    /// `k^n`, exact, as a decimal string.
    pub output_states: String,
    pub reference_params: Option<u64>,
    /// `reference_params / params_total`.
    pub reference_ratio: Option<f64>,
}

pub fn scaling_row(n: usize, k: usize) -> Result<ScalingRow> {
    if n < 1 || k < 2 {
        return Err(invalid(format!("scaling needs n >= 1 and k >= 2, got ({n}, {k})")));
    }
    let p = n * 3 * k * (k - 1) / 2;
    let per = parameter_count_for(&layer_sizes(p, k)) as u64;
    let total = per * n as u64;
    let reference = ((n, k) == (5, 3)).then_some(REFERENCE_FNN_PARAMS);
    Ok(ScalingRow {
        n,
        k,
        p,
        params_per_qubit: per,
        params_total: total,
        output_states: BigUint::from(k).pow(n as u32).to_string(),
        reference_params: reference,
        reference_ratio: reference.map(|r| r as f64 / total as f64),
    })
}

/// Every `(n, k)` combination, n-major.
pub fn scaling_report(n_list: &[usize], k_list: &[usize]) -> Result<Vec<ScalingRow>> {
    n_list.iter().flat_map(|&n| k_list.iter().map(move |&k| scaling_row(n, k))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    /// Where the reference labels came from: "cluster" or "truth".
    pub label_source: String,
    pub n_keep: usize,
    pub n_test_shots: usize,
    pub methods: Vec<MethodReport>,
    /// MLP predictions scored against simulator ground truth (leakage as
    /// the prepared-or-leaked initial level).
    pub mlp_vs_simulator: MethodReport,
    pub exclude_qubits: Vec<usize>,
    /// `1 − mean MLP fidelity` over the non-excluded qubits.
    pub mlp_error_excluding: Option<f64>,
    pub sweep: Vec<SweepRow>,
    pub scaling: Vec<ScalingRow>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Writes `confusion.csv`, `fidelity.csv`, `sweep.csv`, `scaling.csv`
    /// and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let all = self.methods.iter().chain(std::iter::once(&self.mlp_vs_simulator));
        let name = |m: &MethodReport, i: usize| {
            if i == self.methods.len() {
                "mlp_vs_simulator".to_string()
            } else {
                m.method.clone()
            }
        };

        let mut w = csv::Writer::from_path(dir.join("confusion.csv")).map_err(csv_err)?;
        w.write_record(["method", "qubit", "true_level", "pred_0", "pred_1", "pred_2"]).map_err(csv_err)?;
        for (i, m) in all.clone().enumerate() {
            for s in &m.qubits {
                for (lvl, row) in s.confusion.0.iter().enumerate() {
                    w.write_record([
                        name(m, i),
                        s.qubit.to_string(),
                        lvl.to_string(),
                        row[0].to_string(),
                        row[1].to_string(),
                        row[2].to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("fidelity.csv")).map_err(csv_err)?;
        w.write_record(["method", "qubit", "fidelity", "leak_precision", "leak_recall", "n_test"]).map_err(csv_err)?;
        for (i, m) in all.enumerate() {
            for s in &m.qubits {
                w.write_record([
                    name(m, i),
                    s.qubit.to_string(),
                    s.fidelity.to_string(),
                    s.leak_precision.to_string(),
                    s.leak_recall.to_string(),
                    s.confusion.total().to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.write_record([name(m, i), "mean".into(), m.mean_fidelity.to_string(), String::new(), String::new(), String::new()])
                .map_err(csv_err)?;
            w.write_record([name(m, i), "geomean".into(), m.geomean_fidelity.to_string(), String::new(), String::new(), String::new()])
                .map_err(csv_err)?;
        }
        w.flush()?;

        write_sweep_csv(&self.sweep, &dir.join("sweep.csv"))?;
        write_scaling_csv(&self.scaling, &dir.join("scaling.csv"))?;
        fs::write(dir.join("report.json"), crate::json::to_vec_sig17(self)?)?;
        Ok(())
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["n_keep", "duration_ns", "mean_fidelity", "geomean_fidelity"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n_keep.to_string(),
            r.duration_ns.to_string(),
            r.mean_fidelity.to_string(),
            r.geomean_fidelity.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scaling_csv(rows: &[ScalingRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["n", "k", "p", "params_per_qubit", "params_total", "output_states", "reference_params", "reference_ratio"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.k.to_string(),
            r.p.to_string(),
            r.params_per_qubit.to_string(),
            r.params_total.to_string(),
            r.output_states.clone(),
            r.reference_params.map(|v| v.to_string()).unwrap_or_default(),
            r.reference_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fidelity_examples() {
        let diag = ConfusionMatrix([[10, 0, 0], [0, 10, 0], [0, 0, 10]]);
        assert_eq!(fidelity(&diag).unwrap(), 1.0);
        assert!((fidelity(&ConfusionMatrix([[1; 3]; 3])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = ConfusionMatrix([[9, 1, 0], [0, 8, 2], [1, 0, 9]]);
        assert!((fidelity(&c).unwrap() - 26.0 / 30.0).abs() < 1e-15);
        assert!(fidelity(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn leakage_examples() {
        assert_eq!(leakage_metrics(&[2, 0, 1, 2], &[2, 0, 1, 2]).unwrap(), (1.0, 1.0));
        assert_eq!(leakage_metrics(&[0, 1], &[2, 1]).unwrap(), (1.0, 0.0));
        assert_eq!(leakage_metrics(&[2, 2, 0], &[2, 0, 2]).unwrap(), (0.5, 0.5));
        assert!(leakage_metrics(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn geomean_errors_and_identity() {
        assert_eq!(geomean_fidelity(&[1.0; 5]).unwrap(), 1.0);
        assert!(geomean_fidelity(&[0.9, 0.0]).is_err());
        assert!(geomean_fidelity(&[0.9, -0.1]).is_err());
        assert!(geomean_fidelity(&[]).is_err());
    }

    #[test]
    fn scaling_rows() {
        let r = scaling_row(5, 3).unwrap();
        assert_eq!((r.p, r.params_per_qubit, r.params_total), (45, 1301, 6505));
        assert_eq!(r.output_states, "243");
        assert_eq!(scaling_row(1, 2).unwrap().p, 3);
        let big = scaling_row(60, 3).unwrap();
        assert_eq!(big.output_states, "42391158275216203514294433201");
        assert!(scaling_row(0, 3).is_err());
    }
}
