//! Command-line front end: matrices in, spectral estimates and study results out.
//!
//! Matrix CSV convention: rows are variables (p of them), columns are
//! observations (n), matching the p×n data layout throughout the library.
//! All JSON output carries `"schema": "spikelab/v1"`. Exit codes: 0 success,
//! 1 usage error, 2 data or estimation failure.

mod io;
mod model_spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use model_spec::{ModelSpec, SCHEMA};
use spikelab::covariance::spectral_summary;
use spikelab::datagen::sigma_x_spikes;
use spikelab::inference::{
    default_dn, estimate_num_groups, score_against_truth, t_statistic_with_summary,
    t_tau_with_summary, ClusterScore, LabelMetrics,
};
use spikelab::montecarlo::{presets, run_study, ExperimentConfig, Record, StudyResult};
use spikelab::spectrum::{lsd_density, Aspect, Regime};
use spikelab::spikes::{
    classify_spikes, cluster_alphas, cluster_sum_variance, projection_data, SpikeKind, SpikeReport,
};

#[derive(Parser)]
#[command(
    name = "spikelab",
    version,
    about = "Spectral statistics for renormalized sample covariance matrices from multi-population data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the number of subgroups from the renormalized spectrum.
    EstimateGroups {
        /// CSV matrix, rows = variables, columns = observations.
        matrix: PathBuf,
        /// Threshold offset above the bulk edge; default 1/(log n)².
        #[arg(long)]
        dn: Option<f64>,
        /// Skip the first CSV line.
        #[arg(long)]
        header: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a candidate clustering against the spectrum (and truth, if given).
    EvalClustering {
        matrix: PathBuf,
        /// Integer labels, one per observation.
        labels: PathBuf,
        /// True labels; adds accuracy/recall/precision and the analytic composite.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        header: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict spike positions and fluctuation variances for a model.
    PredictSpikes {
        /// Model description (JSON).
        model: PathBuf,
        /// Sample size the prediction is for.
        #[arg(long)]
        n: usize,
        /// Optional dimension cross-check against the model file.
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a simulation study from a JSON config or a named preset.
    Simulate {
        /// Study config JSON (a full config or {"preset": name, ...}).
        study: Option<PathBuf>,
        /// Named preset; an unknown name lists the available ones.
        #[arg(long, conflicts_with = "study")]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Write the result JSON here; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// With `csv`, also write per-replicate records next to the JSON.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Evaluate the limiting spectral density on a grid; emits CSV.
    Lsd {
        model: PathBuf,
        /// Aspect ratio: "inf" or a positive number.
        #[arg(long, default_value = "inf")]
        aspect: String,
        /// Grid as lo:hi:step.
        #[arg(long, default_value = "-2.5:2.5:0.01", allow_hyphen_values = true)]
        grid: String,
        /// Height above the real axis for the density inversion.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::EstimateGroups {
            matrix,
            dn,
            header,
            out,
        } => estimate_groups(&matrix, dn, header, out.as_deref()),
        Command::EvalClustering {
            matrix,
            labels,
            truth,
            header,
            out,
        } => eval_clustering(&matrix, &labels, truth.as_deref(), header, out.as_deref()),
        Command::PredictSpikes { model, n, p, out } => predict_spikes(&model, n, p, out.as_deref()),
        Command::Simulate {
            study,
            preset,
            seed,
            replicates,
            out,
            format,
        } => simulate(
            study.as_deref(),
            preset.as_deref(),
            seed,
            replicates,
            out.as_deref(),
            format,
        ),
        Command::Lsd {
            model,
            aspect,
            grid,
            eps,
            out,
        } => lsd(&model, &aspect, &grid, eps, out.as_deref()),
    }
}

#[derive(Serialize)]
struct GroupsReport {
    schema: &'static str,
    tau_hat: usize,
    d_n: f64,
    a_hat: f64,
    b_hat: f64,
    n: usize,
    p: usize,
    eigenvalues_head: Vec<f64>,
}

fn estimate_groups(
    matrix: &std::path::Path,
    dn: Option<f64>,
    header: bool,
    out: Option<&std::path::Path>,
) -> Result<(), String> {
    let x = io::read_matrix(matrix, header)?;
    let summary = spectral_summary(&x).map_err(|e| e.to_string())?;
    let d_n = dn.unwrap_or_else(|| default_dn(summary.n));
    let tau_hat = estimate_num_groups(&summary, d_n);
    let head = summary.eigenvalues.iter().take(10).cloned().collect();
    let report = GroupsReport {
        schema: SCHEMA,
        tau_hat,
        d_n,
        a_hat: summary.a_hat,
        b_hat: summary.b_hat,
        n: summary.n,
        p: summary.p,
        eigenvalues_head: head,
    };
    io::emit(out, &serde_json::to_string_pretty(&report).unwrap())
}

#[derive(Serialize)]
struct ClusteringReport {
    schema: &'static str,
    #[serde(flatten)]
    score: ClusterScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<LabelMetrics>,
}

fn eval_clustering(
    matrix: &std::path::Path,
    labels_path: &std::path::Path,
    truth: Option<&std::path::Path>,
    header: bool,
    out: Option<&std::path::Path>,
) -> Result<(), String> {
    let x = io::read_matrix(matrix, header)?;
    let labels = io::read_labels(labels_path)?;
    if labels.len() != x.ncols() {
        return Err(format!(
            "parse error: {} labels for {} observations",
            labels.len(),
            x.ncols()
        ));
    }
    let summary = spectral_summary(&x).map_err(|e| e.to_string())?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let score = if distinct.len() == 2 {
        t_statistic_with_summary(&x, &labels, &summary)
    } else {
        t_tau_with_summary(&x, &labels, &summary)
    };
    let score = score.map_err(|e| match e {
        spikelab::Error::BelowEdge { .. } => {
            "no usable spike: the top eigenvalue does not clear the bulk edge".to_string()
        }
        other => other.to_string(),
    })?;
    let (score, metrics) = match truth {
        Some(path) => {
            let t = io::read_labels(path)?;
            let (s, m) = score_against_truth(score, &t, &labels).map_err(|e| e.to_string())?;
            (s, Some(m))
        }
        None => (score, None),
    };
    let report = ClusteringReport {
        schema: SCHEMA,
        score,
        metrics,
    };
    io::emit(out, &serde_json::to_string_pretty(&report).unwrap())
}

#[derive(Serialize)]
struct SpikePrediction {
    schema: &'static str,
    n: usize,
    p: usize,
    alphas: Vec<f64>,
    #[serde(flatten)]
    report: SpikeReport,
    /// Variance of the cluster-sum fluctuation per cluster, where available.
    cluster_sum_variances: Vec<Option<f64>>,
}

fn predict_spikes(
    model_path: &std::path::Path,
    n: usize,
    p_check: Option<usize>,
    out: Option<&std::path::Path>,
) -> Result<(), String> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| format!("cannot read {}: {e}", model_path.display()))?;
    let spec = ModelSpec::parse(&text)?;
    let model = spec.build(Some(n))?;
    let p = model.dim();
    if let Some(expected) = p_check {
        if expected != p {
            return Err(format!("model dimension {p} does not match --p {expected}"));
        }
    }
    let alphas = sigma_x_spikes(&model, n, p).map_err(|e| e.to_string())?;
    let (values, multiplicities) = cluster_alphas(&alphas, 1e-8);
    let h = model.sigma0().spectrum().map_err(|e| e.to_string())?;
    let regime = Regime::from_spectrum(&h, Aspect::Finite(p as f64 / n as f64));
    let report =
        classify_spikes(&values, &multiplicities, &h, &regime).map_err(|e| e.to_string())?;
    let v4 = model.noise().kurtosis();
    let variances: Vec<Option<f64>> = report
        .clusters
        .iter()
        .map(|c| {
            if c.kind != SpikeKind::Distant {
                return None;
            }
            let pd = projection_data(&model, n, p, c.alpha).ok()?;
            cluster_sum_variance(&pd, c.multiplicity, c.phi_prime?, v4).ok()
        })
        .collect();
    let prediction = SpikePrediction {
        schema: SCHEMA,
        n,
        p,
        alphas,
        report,
        cluster_sum_variances: variances,
    };
    io::emit(out, &serde_json::to_string_pretty(&prediction).unwrap())
}

#[derive(serde::Deserialize)]
struct PresetFile {
    preset: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    replicates: Option<usize>,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    schema: &'static str,
    #[serde(flatten)]
    result: &'a StudyResult,
}

fn simulate(
    study: Option<&std::path::Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    replicates: Option<usize>,
    out: Option<&std::path::Path>,
    format: Format,
) -> Result<(), String> {
    let mut config: ExperimentConfig = match (study, preset) {
        (None, Some(name)) => {
            presets::preset(name, seed.unwrap_or(0)).map_err(|e| e.to_string())?
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            if let Ok(file) = serde_json::from_str::<PresetFile>(&text) {
                let mut cfg = presets::preset(&file.preset, file.seed.unwrap_or(0))
                    .map_err(|e| e.to_string())?;
                if let Some(r) = file.replicates {
                    cfg.replicates = r;
                }
                cfg
            } else {
                serde_json::from_str(&text).map_err(|e| format!("study schema error: {e}"))?
            }
        }
        _ => return Err("provide exactly one of a study file or --preset".into()),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(r) = replicates {
        config.replicates = r;
    }
    let result = run_study(&config).map_err(|e| e.to_string())?;
    eprintln!(
        "study complete: {} replicates, {} failures",
        result.records.len(),
        result.failures.len()
    );
    let report = SimulateReport {
        schema: SCHEMA,
        result: &result,
    };
    io::emit(out, &serde_json::to_string_pretty(&report).unwrap())?;
    if matches!(format, Format::Csv) {
        let path = out
            .ok_or("--format csv needs --out to place the records file")?
            .with_extension("records.csv");
        std::fs::write(&path, records_csv(&result))
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        eprintln!("records written to {}", path.display());
    }
    Ok(())
}

fn records_csv(result: &StudyResult) -> String {
    let mut lines = Vec::new();
    match result.records.first() {
        Some(Record::SpikeClt {
            deltas, top_eigs, ..
        }) => {
            let mut head: Vec<String> = vec!["replicate".into()];
            head.extend((1..=deltas.len()).map(|j| format!("delta_{j}")));
            head.extend((1..=deltas.len()).map(|j| format!("delta_hat_{j}")));
            head.extend((1..=top_eigs.len()).map(|j| format!("oracle_eig_{j}")));
            head.extend((1..=top_eigs.len()).map(|j| format!("eig_{j}")));
            head.push("b_hat".into());
            lines.push(head.join(","));
            for (rep, r) in result.records.iter().enumerate() {
                if let Record::SpikeClt {
                    deltas,
                    delta_hats,
                    top_eigs_oracle,
                    top_eigs,
                    b_hat,
                } = r
                {
                    let mut row = vec![rep.to_string()];
                    row.extend(deltas.iter().map(|v| v.to_string()));
                    row.extend(delta_hats.iter().map(|v| v.to_string()));
                    row.extend(top_eigs_oracle.iter().map(|v| v.to_string()));
                    row.extend(top_eigs.iter().map(|v| v.to_string()));
                    row.push(b_hat.to_string());
                    lines.push(row.join(","));
                }
            }
        }
        Some(Record::GroupCount { .. }) => {
            lines.push("replicate,tau_hat".into());
            for (rep, r) in result.records.iter().enumerate() {
                if let Record::GroupCount { tau_hat } = r {
                    lines.push(format!("{rep},{tau_hat}"));
                }
            }
        }
        Some(Record::ClusterScore { .. }) => {
            lines.push("replicate,t,acc,rec,t0".into());
            for (rep, r) in result.records.iter().enumerate() {
                if let Record::ClusterScore { t, acc, rec, t0 } = r {
                    lines.push(format!("{rep},{t},{acc},{rec},{t0}"));
                }
            }
        }
        Some(Record::Sesquilinear { forms, .. }) => {
            let dim = (forms.len() as f64).sqrt() as usize;
            let mut head: Vec<String> = vec!["replicate".into()];
            for j in 0..dim {
                for i in 0..dim {
                    head.push(format!("form_{i}_{j}"));
                }
            }
            for j in 0..dim {
                for i in 0..dim {
                    head.push(format!("scaled_{i}_{j}"));
                }
            }
            lines.push(head.join(","));
            for (rep, r) in result.records.iter().enumerate() {
                if let Record::Sesquilinear { forms, scaled } = r {
                    let mut row = vec![rep.to_string()];
                    row.extend(forms.iter().map(|v| v.to_string()));
                    row.extend(scaled.iter().map(|v| v.to_string()));
                    lines.push(row.join(","));
                }
            }
        }
        Some(Record::LsdFit { .. }) => {
            lines.push("replicate,ks".into());
            for (rep, r) in result.records.iter().enumerate() {
                if let Record::LsdFit { ks } = r {
                    lines.push(format!("{rep},{ks}"));
                }
            }
        }
        None => {}
    }
    lines.join("\n") + "\n"
}

fn lsd(
    model_path: &std::path::Path,
    aspect: &str,
    grid: &str,
    eps: f64,
    out: Option<&std::path::Path>,
) -> Result<(), String> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| format!("cannot read {}: {e}", model_path.display()))?;
    let spec = ModelSpec::parse(&text)?;
    // Only the covariance spectrum matters here; the mean scale is irrelevant,
    // so fall back to a nominal sample size if the spec demands one.
    let model = spec.build(None).or_else(|_| spec.build(Some(100)))?;
    let aspect = match aspect {
        "inf" | "infinity" => Aspect::Infinite,
        v => Aspect::Finite(
            v.parse::<f64>()
                .map_err(|_| format!("bad aspect {v:?}: use 'inf' or a number"))?,
        ),
    };
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("bad grid {grid:?}: use lo:hi:step"));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| format!("bad grid start {:?}", parts[0]))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| format!("bad grid end {:?}", parts[1]))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|_| format!("bad grid step {:?}", parts[2]))?;
    if step <= 0.0 || hi < lo {
        return Err(format!("bad grid {grid:?}"));
    }
    let mut points = Vec::new();
    let mut x = lo;
    while x <= hi + 1e-12 {
        points.push(x);
        x += step;
    }
    let h = model.sigma0().spectrum().map_err(|e| e.to_string())?;
    let regime = Regime::from_spectrum(&h, aspect);
    let density = lsd_density(&h, &regime, &points, eps);
    let mut csv = String::from("x,density\n");
    for (x, d) in points.iter().zip(&density) {
        match d {
            Some(v) => csv.push_str(&format!("{x},{v}\n")),
            None => csv.push_str(&format!("{x},\n")),
        }
    }
    io::emit(out, csv.trim_end())
}
