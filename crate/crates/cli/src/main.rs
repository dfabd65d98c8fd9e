//! `qrd`: batch driver for the three-level readout pipeline.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qutrit_readout::dataset_file::read_dataset;
use qutrit_readout::eval::EvalReport;
use qutrit_readout::pipeline::{
    classify, load_bundle, load_report, run_pipeline, run_simulate, run_sweep, write_classification_csv, LabelSource, RunConfig, BUNDLE_FILE,
    REPORT_FILE,
};
use qutrit_readout::Result;

#[derive(Parser)]
#[command(name = "qrd", version, about = "Three-level multiplexed qubit readout: simulate, fit, classify, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the dataset described by the config and write it to the output directory.
    Simulate(Common),
    /// Simulate (or reuse) → cluster → build filter bank → train → evaluate → write reports.
    Pipeline(Common),
    /// Label every shot of a dataset with a trained bundle.
    Classify(ClassifyArgs),
    /// Re-run the readout-duration sweep from a trained bundle.
    Sweep(Common),
    /// Print the evaluation summary and rewrite the CSV tables from report.json.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Cluster,
    Truth,
}

/// Flags override the matching config fields.
#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (required here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Trace length (samples) used for evaluation or classification.
    #[arg(long = "n-keep")]
    n_keep: Option<usize>,
    /// Training/reference labels.
    #[arg(long, value_enum)]
    labels: Option<Labels>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    /// Model bundle (default: <out>/model.json).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Dataset to classify (default: the config's dataset).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::from_json("{}")?,
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(k) = self.n_keep {
            cfg.n_keep = Some(k);
        }
        if let Some(l) = self.labels {
            cfg.labels = match l {
                Labels::Cluster => LabelSource::Cluster,
                Labels::Truth => LabelSource::Truth,
            };
        }
        cfg.validate()?;
        if let Some(t) = cfg.threads {
            // Only the first pool configuration in a process takes effect.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        Ok(cfg)
    }
}

fn print_report(r: &EvalReport) {
    println!("dataset {}  labels {}  n_keep {}  test shots {}", r.dataset_id, r.label_source, r.n_keep, r.n_test_shots);
    for m in r.methods.iter().chain(std::iter::once(&r.mlp_vs_simulator)) {
        let name = if std::ptr::eq(m, &r.mlp_vs_simulator) { "mlp/sim" } else { &m.method };
        let per: Vec<String> = m.qubits.iter().map(|s| format!("{:.4}", s.fidelity)).collect();
        println!("{name:>8}  mean {:.4}  geomean {:.4}  per-qubit [{}]", m.mean_fidelity, m.geomean_fidelity, per.join(", "));
    }
    if let Some(e) = r.mlp_error_excluding {
        println!("mlp error excluding qubits {:?}: {e:.4}", r.exclude_qubits);
    }
    for s in &r.sweep {
        println!("sweep n_keep {:>4} ({:>6.0} ns)  mean {:.4}", s.n_keep, s.duration_ns, s.mean_fidelity);
    }
    for s in r.scaling.iter().filter(|s| s.k == 3) {
        println!("scaling n {:>2} k 3  P {:>3}  params {:>7}  k^n {}", s.n, s.p, s.params_total, s.output_states);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.config()?;
            let out = run_simulate(&cfg)?;
            println!(
                "{} {} states × {} shots = {} shots  sha256 {}",
                out.path.display(),
                out.n_states,
                cfg.shots_per_state,
                out.n_shots,
                out.sha256
            );
        }
        Command::Pipeline(c) => {
            let cfg = c.config()?;
            let out = run_pipeline(&cfg)?;
            println!("dataset {} ({} shots, sha256 {})", out.dataset.path.display(), out.dataset.n_shots, out.dataset.sha256);
            if let Some(zero) = Some(out.bank.zero_kernels()).filter(|z| !z.is_empty()) {
                let names: Vec<String> = zero.iter().map(|(q, k)| format!("q{q}:{k}")).collect();
                println!("zero-flagged kernels (too few error traces): {}", names.join(" "));
            }
            print_report(&out.report);
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Classify(a) => {
            let cfg = a.common.config()?;
            let bundle_path = a.bundle.unwrap_or_else(|| cfg.out_dir.join(BUNDLE_FILE));
            let (bundle, bank) = load_bundle(&bundle_path)?;
            let ds = read_dataset(a.dataset.unwrap_or_else(|| cfg.dataset_file()))?;
            let n_keep = cfg.n_keep.unwrap_or(bank.kernel_length);
            let preds = classify(&bundle, &bank, &ds, n_keep)?;
            let path = cfg.out_dir.join(format!("classify_{n_keep}.csv"));
            write_classification_csv(&preds, bundle.n_qubits, &path)?;
            println!("{} shots labelled → {}", preds.len(), path.display());
        }
        Command::Sweep(c) => {
            let cfg = c.config()?;
            let ds = read_dataset(cfg.dataset_file())?;
            let rows = run_sweep(&cfg.out_dir.join(BUNDLE_FILE), &ds, &cfg.sweep, &cfg.out_dir.join("sweep.csv"))?;
            for s in rows {
                println!("n_keep {:>4} ({:>6.0} ns)  mean {:.4}  geomean {:.4}", s.n_keep, s.duration_ns, s.mean_fidelity, s.geomean_fidelity);
            }
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let report = load_report(&cfg.out_dir.join(REPORT_FILE))?;
            report.write(&cfg.out_dir)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
