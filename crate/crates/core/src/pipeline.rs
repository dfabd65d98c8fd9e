//! End-to-end runs driven by a JSON configuration.
//!
//! Output directory layout:
//!
//! | file            | content                                               |
//! |-----------------|-------------------------------------------------------|
//! | `dataset.qrt`   | simulated shots (binary container)                    |
//! | `bank.json`     | matched-filter bank                                   |
//! | `model.json`    | model bundle: MLPs, baselines, cluster model, labels  |
//! | `report.json`   | evaluation summary                                    |
//! | `*.csv`         | confusion, fidelity, sweep and scaling tables         |
//! | `FAILED`        | present only when the last pipeline run failed        |

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{assign_labels, spectral_cluster, ClusterModel, ClusterParams, DEFAULT_BANDWIDTH_SCALE, DEFAULT_RESTARTS, DEFAULT_SUBSAMPLE};
use crate::dataset::{all_states, computational_states, generate_dataset, Split, TraceDataset};
use crate::dataset_file::{read_dataset, write_dataset};
use crate::discriminant::{train_discriminant, DiscriminantKind, DiscriminantModel};
use crate::dsp::{build_filter_bank, mtv, Demodulator, FeatureExtractor, MatchedFilterBank, DEFAULT_MIN_ERROR_TRACES};
use crate::error::{Error, Result};
use crate::eval::{
    duration_sweep, evaluate_mlp_at, mean_fidelity_excluding, predict_mlp, scaling_report, score_method, write_sweep_csv, EvalReport,
    QmfVote, SweepRow,
};
use crate::mlp::{train_mlp, MlpModel, TrainConfig, TrainHistory};
use crate::sim::{DeviceConfig, Level, NUM_LEVELS};

pub const BUNDLE_FORMAT: &str = "qutrit-readout-bundle/1";
pub const DATASET_FILE: &str = "dataset.qrt";
pub const BANK_FILE: &str = "bank.json";
pub const BUNDLE_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const FAILED_FILE: &str = "FAILED";

/// Level-1 lifetime of the relaxation testbed, in seconds.
pub const RELAXATION_TESTBED_T1: f64 = 4e-6;

/// Qubit counts and level counts tabulated in the scaling report.
pub const SCALING_N: [usize; 8] = [1, 2, 3, 4, 5, 6, 8, 10];
pub const SCALING_K: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Spectral-cluster assignment (no level-2 calibration needed).
    Cluster,
    /// Simulator ground truth (initial level of each shot).
    Truth,
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Cluster => "cluster",
            LabelSource::Truth => "truth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedStates {
    /// The `2^n` computational basis states.
    Computational,
    /// All `3^n` basis states.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSelector {
    Named(NamedStates),
    Explicit(Vec<Vec<Level>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub subsample: usize,
    pub restarts: usize,
    pub bandwidth_scale: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection { subsample: DEFAULT_SUBSAMPLE, restarts: DEFAULT_RESTARTS, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(0);
        TrainSection { learning_rate: t.learning_rate, batch_size: t.batch_size, max_epochs: t.max_epochs, patience: t.patience }
    }
}

fn default_n_qubits() -> usize {
    5
}
fn default_shots() -> usize {
    500
}
fn default_states() -> StateSelector {
    StateSelector::Named(NamedStates::Computational)
}
fn default_labels() -> LabelSource {
    LabelSource::Cluster
}
fn default_sweep() -> Vec<usize> {
    vec![100, 200, 300, 400, 500]
}
fn default_min_error() -> usize {
    DEFAULT_MIN_ERROR_TRACES
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration. Command-line flags override the matching fields.
///
/// Device precedence: `device` (inline) > `device_path` > the default device
/// for `n_qubits`. The run seed always replaces the device's own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required; every random stream derives from it.
    pub seed: Option<u64>,
    #[serde(default = "default_n_qubits")]
    pub n_qubits: usize,
    #[serde(default)]
    pub device: Option<DeviceConfig>,
    #[serde(default)]
    pub device_path: Option<PathBuf>,
    /// Override every qubit's t1 (seconds); t1_level2 becomes t1/2.
    #[serde(default)]
    pub t1: Option<f64>,
    /// Override the per-sample noise standard deviation.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_shots")]
    pub shots_per_state: usize,
    #[serde(default = "default_states")]
    pub states: StateSelector,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_labels")]
    pub labels: LabelSource,
    /// Trace lengths (samples) for the duration sweep, ascending.
    #[serde(default = "default_sweep")]
    pub sweep: Vec<usize>,
    /// Evaluation length; the full trace when absent.
    #[serde(default)]
    pub n_keep: Option<usize>,
    #[serde(default = "default_min_error")]
    pub min_error_traces: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Existing dataset to use instead of simulating.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Qubits left out of the "error excluding" summary figure.
    #[serde(default)]
    pub exclude_qubits: Vec<usize>,
}

impl RunConfig {
    /// Minimal configuration with defaults everywhere.
    pub fn with_seed(seed: u64) -> Self {
        let mut c: RunConfig = serde_json::from_str("{}").expect("all fields default");
        c.seed = Some(seed);
        c
    }

    /// Short-T1 testbed on which mid-readout relaxation is common: 3 qubits,
    /// all 27 states, t1 = 4 µs, scored against simulator truth.
    pub fn relaxation_testbed(seed: u64) -> Self {
        let mut c = RunConfig::with_seed(seed);
        c.n_qubits = 3;
        c.states = StateSelector::Named(NamedStates::All);
        c.t1 = Some(RELAXATION_TESTBED_T1);
        c.labels = LabelSource::Truth;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Parse a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        if let Some(p) = cfg.device_path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.dataset_path.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("`seed` is required (there is no clock-based default)".into()))
    }

    pub fn resolve_device(&self) -> Result<DeviceConfig> {
        let seed = self.seed()?;
        let mut device = if let Some(d) = &self.device {
            d.clone()
        } else if let Some(p) = &self.device_path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read device {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("device {}: {e}", p.display())))?
        } else {
            if self.n_qubits == 0 {
                return Err(Error::Config("n_qubits must be >= 1".into()));
            }
            DeviceConfig::default_for(self.n_qubits, seed)
        };
        device.seed = seed;
        if let Some(t1) = self.t1 {
            device = device.with_t1(t1);
        }
        if let Some(noise) = self.noise_std {
            device.noise_std = noise;
        }
        device.validate().map_err(|e| Error::Config(format!("device: {e}")))?;
        Ok(device)
    }

    pub fn resolve_states(&self, n_qubits: usize) -> Result<Vec<Vec<Level>>> {
        let states = match &self.states {
            StateSelector::Named(NamedStates::Computational) => computational_states(n_qubits),
            StateSelector::Named(NamedStates::All) => all_states(n_qubits),
            StateSelector::Explicit(list) => list.clone(),
        };
        if states.is_empty() || states.iter().any(|s| s.len() != n_qubits || s.iter().any(|&l| l as usize >= NUM_LEVELS)) {
            return Err(Error::Config(format!("states must be non-empty lists of {n_qubits} levels in 0..=2")));
        }
        Ok(states)
    }

    pub fn cluster_params(&self) -> Result<ClusterParams> {
        Ok(ClusterParams {
            subsample: self.cluster.subsample,
            restarts: self.cluster.restarts,
            bandwidth_scale: self.cluster.bandwidth_scale,
            seed: self.seed()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.seed()?);
        t.learning_rate = self.train.learning_rate;
        t.batch_size = self.train.batch_size;
        t.max_epochs = self.train.max_epochs;
        t.patience = self.train.patience;
        t.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(t)
    }

    /// Check everything that does not need data.
    pub fn validate(&self) -> Result<()> {
        let device = self.resolve_device()?;
        self.resolve_states(device.n_qubits())?;
        self.train_config()?;
        if self.shots_per_state == 0 {
            return Err(Error::Config("shots_per_state must be >= 1".into()));
        }
        if self.cluster.restarts == 0 || self.cluster.subsample < 3 || !(self.cluster.bandwidth_scale > 0.0) {
            return Err(Error::Config("cluster: need restarts >= 1, subsample >= 3, bandwidth_scale > 0".into()));
        }
        let n = device.n_samples();
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) || self.sweep.iter().any(|&k| k == 0 || k > n) {
            return Err(Error::Config(format!("sweep must be strictly ascending within 1..={n}")));
        }
        if let Some(k) = self.n_keep {
            if k == 0 || k > n {
                return Err(Error::Config(format!("n_keep {k} outside 1..={n}")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dataset_file(&self) -> PathBuf {
        self.dataset_path.clone().unwrap_or_else(|| self.out_dir.join(DATASET_FILE))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub path: PathBuf,
    pub n_states: usize,
    pub n_shots: usize,
    pub sha256: String,
    /// False when a matching dataset was already on disk.
    pub generated: bool,
}

/// Dataset for the config: reuse the file on disk when it was generated from
/// the same device, states and shot count; simulate and write it otherwise.
pub fn obtain_dataset(cfg: &RunConfig) -> Result<(TraceDataset, SimulateOutput)> {
    cfg.validate()?;
    let device = cfg.resolve_device()?;
    let states = cfg.resolve_states(device.n_qubits())?;
    let path = cfg.dataset_file();
    if path.exists() {
        let ds = read_dataset(&path)?;
        if ds.device == device && ds.states == states && ds.shots_per_state == cfg.shots_per_state {
            let bytes = fs::read(&path)?;
            let out = SimulateOutput { path, n_states: ds.states.len(), n_shots: ds.len(), sha256: sha256_hex(&bytes), generated: false };
            return Ok((ds, out));
        }
        if cfg.dataset_path.is_some() {
            return Err(Error::Config(format!("dataset {} was generated from a different configuration", path.display())));
        }
    }
    let ds = generate_dataset(&device, &states, cfg.shots_per_state)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&ds, &path)?;
    let bytes = fs::read(&path)?;
    let out = SimulateOutput { path, n_states: ds.states.len(), n_shots: ds.len(), sha256: sha256_hex(&bytes), generated: true };
    Ok((ds, out))
}

pub fn run_simulate(cfg: &RunConfig) -> Result<SimulateOutput> {
    obtain_dataset(cfg).map(|(_, out)| out)
}

/// Everything learned from a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub dataset_id: String,
    pub n_qubits: usize,
    pub kernel_length: usize,
    /// Bank file name, relative to the bundle.
    pub bank_file: String,
    pub bank_sha256: String,
    pub label_source: LabelSource,
    /// Reference label of every dataset shot, one digit string per qubit.
    pub labels: Vec<String>,
    pub cluster: Option<ClusterModel>,
    pub train_config: TrainConfig,
    pub mlps: Vec<MlpModel>,
    pub histories: Vec<TrainHistory>,
    pub qmf_vote: Vec<QmfVote>,
    pub lda: Vec<DiscriminantModel>,
    pub qda: Vec<DiscriminantModel>,
}

fn encode_labels(levels: &[Level]) -> String {
    levels.iter().map(|&l| char::from(b'0' + l)).collect()
}

fn decode_labels(s: &str) -> Result<Vec<Level>> {
    s.bytes()
        .map(|b| match b {
            b'0'..=b'2' => Ok(b - b'0'),
            _ => Err(Error::Format(format!("bad label character {:?}", b as char))),
        })
        .collect()
}

impl ModelBundle {
    pub fn reference_labels(&self) -> Result<Vec<Vec<Level>>> {
        self.labels.iter().map(|s| decode_labels(s)).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        crate::json::to_vec_sig17(self)
    }
}

/// Bundle and the bank it references, with the bank hash verified.
pub fn load_bundle(path: &Path) -> Result<(ModelBundle, MatchedFilterBank)> {
    let bundle: ModelBundle = serde_json::from_slice(&fs::read(path)?)?;
    if bundle.format != BUNDLE_FORMAT {
        return Err(Error::Format(format!("unknown bundle format {:?}", bundle.format)));
    }
    let bank_path = path.parent().unwrap_or(Path::new("")).join(&bundle.bank_file);
    let bytes = fs::read(&bank_path)?;
    let hash = sha256_hex(&bytes);
    if hash != bundle.bank_sha256 {
        return Err(Error::Data(format!(
            "bank {} hash {hash} does not match bundle ({})",
            bank_path.display(),
            bundle.bank_sha256
        )));
    }
    let bank = MatchedFilterBank::from_json(&bytes)?;
    if bank.n_qubits() != bundle.n_qubits || bundle.mlps.len() != bundle.n_qubits {
        return Err(Error::Format("bundle qubit count disagrees with its bank or models".into()));
    }
    Ok((bundle, bank))
}

/// Per-qubit MTVs of every shot at full length.
pub fn dataset_mtvs(ds: &TraceDataset) -> Result<Vec<Vec<Complex64>>> {
    let demod = Demodulator::new(&ds.device);
    let n = ds.n_samples();
    (0..ds.n_qubits())
        .map(|q| ds.shots.par_iter().map(|s| mtv(&demod.demodulate(s, q, n)?)).collect())
        .collect()
}

/// Cluster every qubit's MTVs and name the clusters.
pub fn cluster_dataset(ds: &TraceDataset, mtvs: &[Vec<Complex64>], params: &ClusterParams) -> Result<(ClusterModel, Vec<Vec<Level>>)> {
    let m = params.subsample.min(ds.len());
    let params = ClusterParams { subsample: m, ..params.clone() };
    let per_qubit = (0..ds.n_qubits())
        .into_par_iter()
        .map(|q| {
            let sc = spectral_cluster(&mtvs[q], &params, q as u64)?;
            let prep: Vec<Option<Level>> = ds.shots.iter().map(|s| Some(s.prep_label[q])).collect();
            let model = assign_labels(q, &sc, &mtvs[q], &prep, &params)?;
            let labels = sc.assignments.iter().map(|&c| model.cluster_level[c]).collect();
            Ok((model, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let (qubits, labels) = per_qubit.into_iter().unzip();
    Ok((ClusterModel { qubits }, labels))
}

/// Mean MTV per level over the given shots; NaN for an absent level.
fn class_means(points: &[Complex64], labels: &[Level], shots: &[usize]) -> [Complex64; NUM_LEVELS] {
    std::array::from_fn(|lvl| {
        let sel: Vec<Complex64> = shots.iter().filter(|&&i| labels[i] as usize == lvl).map(|&i| points[i]).collect();
        if sel.is_empty() {
            Complex64::new(f64::NAN, f64::NAN)
        } else {
            sel.iter().sum::<Complex64>() / sel.len() as f64
        }
    })
}

fn pick(levels: &[Level], shots: &[usize]) -> Vec<Level> {
    shots.iter().map(|&i| levels[i]).collect()
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub dataset: SimulateOutput,
    pub bundle: ModelBundle,
    pub bank: MatchedFilterBank,
    pub report: EvalReport,
}

/// Fit labels, bank and models on the training split.
pub fn fit(ds: &TraceDataset, cfg: &RunConfig) -> Result<(ModelBundle, MatchedFilterBank)> {
    let n_q = ds.n_qubits();
    let mtvs = dataset_mtvs(ds).map_err(|e| e.in_stage("demodulate"))?;
    let (cluster, labels) = match cfg.labels {
        LabelSource::Cluster => {
            let (model, labels) = cluster_dataset(ds, &mtvs, &cfg.cluster_params()?).map_err(|e| e.in_stage("cluster"))?;
            (Some(model), labels)
        }
        LabelSource::Truth => (None, (0..n_q).map(|q| ds.truth_levels(q)).collect()),
    };
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let centroids: Vec<[Complex64; NUM_LEVELS]> = match &cluster {
        Some(m) => m.qubits.iter().map(|q| q.level_centroids()).collect(),
        None => (0..n_q).map(|q| class_means(&mtvs[q], &labels[q], &train)).collect(),
    };
    let bank = build_filter_bank(ds, &train, &labels, &centroids, cfg.min_error_traces).map_err(|e| e.in_stage("bank"))?;

    let fx = FeatureExtractor::new(&bank, bank.kernel_length)?;
    let train_x = fx.features_for(ds, &train).map_err(|e| e.in_stage("features"))?;
    let val_x = fx.features_for(ds, &val).map_err(|e| e.in_stage("features"))?;
    let tcfg = cfg.train_config()?;
    let trained = (0..n_q)
        .into_par_iter()
        .map(|q| train_mlp(q, &train_x, &pick(&labels[q], &train), &val_x, &pick(&labels[q], &val), &tcfg))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("train"))?;
    let (mlps, histories): (Vec<_>, Vec<_>) = trained.into_iter().unzip();

    let baselines = (0..n_q)
        .map(|q| {
            let y = pick(&labels[q], &train);
            // A level seen once in training (a lone leaked shot) cannot carry a
            // covariance; the Gaussian baselines leave it out.
            let mut count = [0usize; NUM_LEVELS];
            y.iter().for_each(|&l| count[l as usize] += 1);
            let (pts, y_da): (Vec<Complex64>, Vec<Level>) =
                train.iter().zip(&y).filter(|(_, &l)| count[l as usize] >= 2).map(|(&i, &l)| (mtvs[q][i], l)).unzip();
            Ok((
                QmfVote::fit(q, &train_x, &y)?,
                train_discriminant(DiscriminantKind::Lda, q, &pts, &y_da)?,
                train_discriminant(DiscriminantKind::Qda, q, &pts, &y_da)?,
            ))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("baselines"))?;
    let mut qmf_vote = Vec::new();
    let mut lda = Vec::new();
    let mut qda = Vec::new();
    for (v, l, q) in baselines {
        qmf_vote.push(v);
        lda.push(l);
        qda.push(q);
    }
    let bank_bytes = bank.to_json()?;
    let bundle = ModelBundle {
        format: BUNDLE_FORMAT.into(),
        dataset_id: ds.id(),
        n_qubits: n_q,
        kernel_length: bank.kernel_length,
        bank_file: BANK_FILE.into(),
        bank_sha256: sha256_hex(&bank_bytes),
        label_source: cfg.labels,
        labels: labels.iter().map(|l| encode_labels(l)).collect(),
        cluster,
        train_config: tcfg,
        mlps,
        histories,
        qmf_vote,
        lda,
        qda,
    };
    Ok((bundle, bank))
}

/// Score every method on the test split.
pub fn evaluate(ds: &TraceDataset, bundle: &ModelBundle, bank: &MatchedFilterBank, cfg: &RunConfig) -> Result<EvalReport> {
    let n_q = ds.n_qubits();
    let test = ds.indices(Split::Test);
    let labels = bundle.reference_labels()?;
    let reference: Vec<Vec<Level>> = labels.iter().map(|l| pick(l, &test)).collect();
    let n_keep = cfg.n_keep.unwrap_or(bank.kernel_length);

    let mlp = evaluate_mlp_at(ds, bank, &bundle.mlps, &test, &reference, n_keep)?;
    let fx = FeatureExtractor::new(bank, n_keep)?;
    let test_x = fx.features_for(ds, &test)?;
    let mtvs = dataset_mtvs(ds)?;
    let qmf: Vec<Vec<Level>> = bundle.qmf_vote.iter().map(|m| test_x.iter().map(|f| m.classify(f)).collect()).collect();
    let disc = |models: &[DiscriminantModel]| -> Vec<Vec<Level>> {
        models.iter().enumerate().map(|(q, m)| test.iter().map(|&i| m.classify(mtvs[q][i])).collect()).collect()
    };
    let methods = vec![
        mlp,
        score_method("qmf", &qmf, &reference)?,
        score_method("lda", &disc(&bundle.lda), &reference)?,
        score_method("qda", &disc(&bundle.qda), &reference)?,
    ];
    let truth: Vec<Vec<Level>> = (0..n_q).map(|q| pick(&ds.truth_levels(q), &test)).collect();
    let mlp_vs_simulator = score_method("mlp", &predict_mlp(&bundle.mlps, &test_x)?, &truth)?;
    let sweep = duration_sweep(ds, bank, &bundle.mlps, &test, &reference, &cfg.sweep)?;
    let mlp_error_excluding = mean_fidelity_excluding(&methods[0], &cfg.exclude_qubits).map(|f| 1.0 - f);
    Ok(EvalReport {
        dataset_id: ds.id(),
        label_source: bundle.label_source.name().into(),
        n_keep,
        n_test_shots: test.len(),
        methods,
        mlp_vs_simulator,
        exclude_qubits: cfg.exclude_qubits.clone(),
        mlp_error_excluding,
        sweep,
        scaling: scaling_report(&SCALING_N, &SCALING_K)?,
    })
}

fn write_outputs(out_dir: &Path, bundle: &ModelBundle, bank: &MatchedFilterBank, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(BANK_FILE), bank.to_json()?)?;
    fs::write(out_dir.join(BUNDLE_FILE), bundle.to_json()?)?;
    report.write(out_dir)
}

/// simulate (or reuse) → cluster → bank → train → evaluate → write.
///
/// On failure a `FAILED` file naming the stage is left in the output
/// directory so partial outputs are recognizable.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let failed = cfg.out_dir.join(FAILED_FILE);
    let result = (|| {
        let (ds, dataset) = obtain_dataset(cfg).map_err(|e| e.in_stage("simulate"))?;
        let (bundle, bank) = fit(&ds, cfg)?;
        let report = evaluate(&ds, &bundle, &bank, cfg).map_err(|e| e.in_stage("evaluate"))?;
        write_outputs(&cfg.out_dir, &bundle, &bank, &report).map_err(|e| e.in_stage("write"))?;
        Ok(PipelineOutput { dataset, bundle, bank, report })
    })();
    match &result {
        Ok(_) => {
            if failed.exists() {
                fs::remove_file(&failed)?;
            }
        }
        Err(e) => {
            if fs::create_dir_all(&cfg.out_dir).is_ok() {
                let _ = fs::write(&failed, format!("{e}\n"));
            }
        }
    }
    result
}

/// Refuse a bundle/dataset pair that cannot be evaluated together, naming
/// the mismatched field.
pub fn check_compatible(bundle: &ModelBundle, bank: &MatchedFilterBank, ds: &TraceDataset, n_keep: usize) -> Result<()> {
    if bundle.n_qubits != ds.n_qubits() {
        return Err(Error::Data(format!("qubit count mismatch: bundle has {}, dataset has {}", bundle.n_qubits, ds.n_qubits())));
    }
    if bank.sample_rate != ds.device.sample_rate {
        return Err(Error::Data(format!("sample_rate mismatch: bank {} Hz, dataset {} Hz", bank.sample_rate, ds.device.sample_rate)));
    }
    for (q, (f, qc)) in bank.if_freqs.iter().zip(&ds.device.qubits).enumerate() {
        if *f != qc.if_freq {
            return Err(Error::Data(format!("if_freq mismatch on qubit {q}: bank {f} Hz, dataset {} Hz", qc.if_freq)));
        }
    }
    if n_keep == 0 || n_keep > bank.kernel_length || n_keep > ds.n_samples() {
        return Err(Error::Data(format!(
            "n_keep {n_keep} exceeds kernel_length {} or trace length {}",
            bank.kernel_length,
            ds.n_samples()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotPrediction {
    pub shot: usize,
    pub split: Split,
    pub levels: Vec<Level>,
    pub probs: Vec<[f64; NUM_LEVELS]>,
}

pub fn classify(bundle: &ModelBundle, bank: &MatchedFilterBank, ds: &TraceDataset, n_keep: usize) -> Result<Vec<ShotPrediction>> {
    check_compatible(bundle, bank, ds, n_keep)?;
    let fx = FeatureExtractor::new(bank, n_keep)?;
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let f = fx.features(&ds.shots[i])?;
            let preds = bundle.mlps.iter().map(|m| m.infer(&f)).collect::<Result<Vec<_>>>()?;
            Ok(ShotPrediction {
                shot: i,
                split: ds.split[i],
                levels: preds.iter().map(|p| p.label).collect(),
                probs: preds.iter().map(|p| p.probs).collect(),
            })
        })
        .collect()
}

/// Columns: `shot, split, q{i}_level, q{i}_p0, q{i}_p1, q{i}_p2` for every qubit.
pub fn write_classification_csv(preds: &[ShotPrediction], n_qubits: usize, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["shot".to_string(), "split".to_string()];
    for q in 0..n_qubits {
        header.extend([format!("q{q}_level"), format!("q{q}_p0"), format!("q{q}_p1"), format!("q{q}_p2")]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for p in preds {
        let split = match p.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let mut row = vec![p.shot.to_string(), split.to_string()];
        for (l, pr) in p.levels.iter().zip(&p.probs) {
            row.extend([l.to_string(), pr[0].to_string(), pr[1].to_string(), pr[2].to_string()]);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-run the duration sweep from a stored bundle and dataset.
pub fn run_sweep(bundle_path: &Path, ds: &TraceDataset, n_keep_list: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    let (bundle, bank) = load_bundle(bundle_path)?;
    check_compatible(&bundle, &bank, ds, bank.kernel_length)?;
    if bundle.dataset_id != ds.id() {
        return Err(Error::Data(format!("dataset id mismatch: bundle {}, dataset {}", bundle.dataset_id, ds.id())));
    }
    let test = ds.indices(Split::Test);
    let reference: Vec<Vec<Level>> = bundle.reference_labels()?.iter().map(|l| pick(l, &test)).collect();
    let rows = duration_sweep(ds, &bank, &bundle.mlps, &test, &reference, n_keep_list)?;
    write_sweep_csv(&rows, out)?;
    Ok(rows)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
