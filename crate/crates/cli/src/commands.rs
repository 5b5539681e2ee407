//! The subcommands, each a pure function of (config, input files, seeds).

use crate::config::{ExperimentConfig, CONFIG_SCHEMA_VERSION};
use crate::io::{ensure_dir, fmt, read_json, write_json, DatasetFiles, DatasetSidecar, Table};
use crate::report;
use anyhow::{bail, ensure, Context, Result};
use scoregeom::checkpoint;
use scoregeom::diffusion::{sample_paths, SamplePath, VpDensityField};
use scoregeom::field::ScoreField;
use scoregeom::geometry::{batch_analyze, AnalysisOptions, AnalysisReport, TimeSummary};
use scoregeom::linalg::DenseMatrix;
use scoregeom::rng;
use scoregeom::scoremodel::{MlpScoreNet, ScoreCheckpoint, Trainer};
use scoregeom::vae::{mode, train_vae, vae_dimensionality, VaeCheckpoint, VaeModel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCORE_CHECKPOINT: &str = "score_checkpoint.json";
pub const VAE_CHECKPOINT: &str = "vae_checkpoint.json";
pub const LOSS_CSV: &str = "loss_history.csv";
pub const VAE_LOSS_CSV: &str = "vae_loss_history.csv";
pub const VAE_DIM_CSV: &str = "vae_dimensionality.csv";
pub const VAE_SUMMARY: &str = "vae_summary.json";
pub const SAMPLES_JSON: &str = "samples.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const SPECTRA_CSV: &str = "spectra.csv";
pub const INVERSE_SPECTRUM_CSV: &str = "inverse_spectrum.csv";
pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const DIMENSIONALITY_CSV: &str = "dimensionality.csv";
pub const OVERLAP_CSV: &str = "overlap.csv";
pub const SUMMARY_JSON: &str = "summary.json";

const SAMPLES_KIND: &str = "sample_paths";
const LOSS_SMOOTHING_WINDOW: usize = 50;

/// Where the score field comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldSource {
    /// the exact VP-marginal score of the configured density
    Analytic,
    Checkpoint(PathBuf),
}

impl FieldSource {
    pub fn label(&self) -> &'static str {
        match self {
            FieldSource::Analytic => "analytic",
            FieldSource::Checkpoint(_) => "checkpoint",
        }
    }

    pub fn resolve(analytic: bool, checkpoint: Option<PathBuf>, out: &Path) -> Self {
        if analytic {
            FieldSource::Analytic
        } else {
            FieldSource::Checkpoint(checkpoint.unwrap_or_else(|| out.join(SCORE_CHECKPOINT)))
        }
    }

    pub fn load(&self, config: &ExperimentConfig) -> Result<Box<dyn ScoreField + Send>> {
        Ok(match self {
            FieldSource::Analytic => Box::new(VpDensityField::new(&config.density, config.schedule)?),
            FieldSource::Checkpoint(path) => {
                let ckpt = ScoreCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                ensure!(
                    ckpt.net.dim() == config.dim(),
                    "checkpoint is for d = {}, config has d = {}",
                    ckpt.net.dim(),
                    config.dim()
                );
                Box::new(ckpt.net)
            }
        })
    }
}

fn generate_data(config: &ExperimentConfig) -> Result<DenseMatrix> {
    let density = config.density.prepare()?;
    let mut rng = rng::stream(config.seeds.data, 0);
    Ok(density.sample(config.data.n_samples, 1.0, config.data.noise_std, &mut rng))
}

fn sidecar(config: &ExperimentConfig) -> DatasetSidecar {
    DatasetSidecar {
        schema_version: CONFIG_SCHEMA_VERSION,
        n_samples: config.data.n_samples,
        dim: config.dim(),
        noise_std: config.data.noise_std,
        seed: config.seeds.data,
        density: config.density.clone(),
    }
}

/// Draws `data.n_samples` rows from the configured density and writes
/// `dataset.csv` plus its JSON sidecar.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<DatasetFiles> {
    config.validate()?;
    ensure_dir(out)?;
    let data = generate_data(config)?;
    let files = DatasetFiles::in_dir(out);
    files.write(&data, &sidecar(config))?;
    Ok(files)
}

/// Reads the dataset in `out`, generating it first when absent. A dataset
/// written for a different config is an error rather than silently reused.
pub fn load_dataset(config: &ExperimentConfig, out: &Path) -> Result<DenseMatrix> {
    let files = DatasetFiles::in_dir(out);
    if !files.exists() {
        cmd_gen_data(config, out)?;
    }
    let (data, found) = files.read()?;
    if found != sidecar(config) {
        bail!(
            "{} was generated from a different density, size or seed; rerun gen-data",
            files.csv.display()
        );
    }
    Ok(data)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// stop after this many total steps instead of `train.steps`
    pub until: Option<usize>,
}

pub fn cmd_train_score(config: &ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<ScoreCheckpoint> {
    config.validate()?;
    ensure_dir(out)?;
    let data = load_dataset(config, out)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let state = ScoreCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ensure!(
                state.config == config.train,
                "checkpoint was trained with a different train config"
            );
            ensure!(state.net.spec() == &config.model, "checkpoint has a different model spec");
            Trainer::resume(state, &data)?
        }
        None => {
            let net = MlpScoreNet::new(config.dim(), config.model.clone(), config.schedule, config.seeds.model_init)?;
            Trainer::new(net, &data, config.train.clone())?
        }
    };
    let target = opts.until.unwrap_or(config.train.steps).min(config.train.steps);
    trainer.run_until(target)?;
    let ckpt = trainer.into_checkpoint();
    ckpt.save(&out.join(SCORE_CHECKPOINT))?;
    loss_table(&ckpt.loss_history, "dsm_loss").write(&out.join(LOSS_CSV))?;
    Ok(ckpt)
}

/// Trailing moving average over `window` steps.
pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc = 0.0;
    for (i, v) in history.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= history[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn loss_table(history: &[f64], name: &str) -> Table {
    let smooth_name = format!("{name}_smoothed_{LOSS_SMOOTHING_WINDOW}");
    let mut t = Table::new(&["step", name, &smooth_name]);
    for (k, (v, s)) in history.iter().zip(smoothed(history, LOSS_SMOOTHING_WINDOW)).enumerate() {
        t.push(vec![k.to_string(), fmt(*v), fmt(s)]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSummary {
    pub schema_version: u32,
    pub threshold: f64,
    pub n_heldout: usize,
    pub mode: usize,
    /// `histogram[k]` counts held-out points with `k` active latents
    pub histogram: Vec<usize>,
    pub final_loss: f64,
}

/// Trains the VAE on the dataset and counts active latents on fresh
/// held-out draws from the same density.
pub fn cmd_train_vae(config: &ExperimentConfig, out: &Path) -> Result<VaeSummary> {
    config.validate()?;
    ensure_dir(out)?;
    let data = load_dataset(config, out)?;
    let model = VaeModel::new(config.dim(), &config.vae.spec, config.seeds.vae_init)?;
    let ckpt = train_vae(model, &data, &config.vae.train)?;
    ckpt.save(&out.join(VAE_CHECKPOINT))?;
    loss_table(&ckpt.loss_history, "negative_elbo").write(&out.join(VAE_LOSS_CSV))?;

    let density = config.density.prepare()?;
    let mut rng = rng::stream(config.seeds.data, 1);
    let heldout = density.sample(config.data.n_heldout, 1.0, config.data.noise_std, &mut rng);
    let mut t = Table::new(&["point", "active_latents", "threshold_var"]);
    let mut dims = Vec::with_capacity(heldout.rows());
    for r in 0..heldout.rows() {
        let k = vae_dimensionality(&ckpt.model, heldout.row(r), config.analysis.threshold)?;
        t.push(vec![r.to_string(), k.to_string(), fmt(config.analysis.threshold)]);
        dims.push(k);
    }
    t.write(&out.join(VAE_DIM_CSV))?;
    let mut histogram = vec![0; ckpt.model.latent_dim() + 1];
    dims.iter().for_each(|&k| histogram[k] += 1);
    let summary = VaeSummary {
        schema_version: CONFIG_SCHEMA_VERSION,
        threshold: config.analysis.threshold,
        n_heldout: dims.len(),
        mode: mode(&dims).expect("at least one held-out point"),
        histogram,
        final_loss: *ckpt.loss_history.last().unwrap_or(&f64::NAN),
    };
    write_json(&out.join(VAE_SUMMARY), &summary)?;
    Ok(summary)
}

pub fn load_vae(path: &Path) -> Result<VaeCheckpoint> {
    VaeCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Runs the reverse sampler for `sampling.n_paths` paths and writes
/// `samples.json` and `samples.csv`.
pub fn cmd_sample(config: &ExperimentConfig, out: &Path, source: &FieldSource) -> Result<Vec<SamplePath>> {
    config.validate()?;
    ensure_dir(out)?;
    let field = source.load(config)?;
    let s = &config.sampling;
    let paths = sample_paths(&field, &config.schedule, s.n_paths, s.n_steps, &s.snapshot_times, config.seeds.sampling)?;
    checkpoint::save(&out.join(SAMPLES_JSON), SAMPLES_KIND, &paths)?;
    let d = config.dim();
    let mut header: Vec<String> = ["path", "seed", "requested_t", "t"].iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|j| format!("x{j}")));
    let mut t = Table::with_header(header);
    for (i, p) in paths.iter().enumerate() {
        for snap in &p.snapshots {
            let mut row = vec![i.to_string(), p.seed.to_string(), fmt(snap.requested_t), fmt(snap.t)];
            row.extend(snap.x.iter().map(|&v| fmt(v)));
            t.push(row);
        }
    }
    t.write(&out.join(SAMPLES_CSV))?;
    Ok(paths)
}

pub fn load_samples(path: &Path) -> Result<Vec<SamplePath>> {
    checkpoint::load(path, SAMPLES_KIND).with_context(|| format!("loading {}", path.display()))
}

/// Summary written to `summary.json`; the input to `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    pub source: String,
    pub dim: usize,
    pub kappa: f64,
    pub n_max: usize,
    pub summaries: Vec<TimeSummary>,
}

impl SummaryFile {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        ensure!(
            s.schema_version == CONFIG_SCHEMA_VERSION,
            "summary schema version {} is not supported",
            s.schema_version
        );
        Ok(s)
    }
}

/// Analyzes `samples.json` in `out` (sampling first when it is absent) and
/// writes the CSV tables, `summary.json` and the SVG figures.
pub fn cmd_analyze(config: &ExperimentConfig, out: &Path, source: &FieldSource) -> Result<AnalysisReport> {
    config.validate()?;
    ensure_dir(out)?;
    let samples_path = out.join(SAMPLES_JSON);
    let paths = if samples_path.exists() {
        load_samples(&samples_path)?
    } else {
        cmd_sample(config, out, source)?
    };
    let field = source.load(config)?;
    analyze_paths(config, out, &field, &paths, source.label())
}

pub fn analyze_paths(
    config: &ExperimentConfig,
    out: &Path,
    field: &dyn ScoreField,
    paths: &[SamplePath],
    source: &str,
) -> Result<AnalysisReport> {
    ensure!(!paths.is_empty(), "invalid input: no sample paths to analyze");
    let options = AnalysisOptions {
        kappa: config.analysis.kappa,
        n_max: config.analysis.n_max,
    };
    let report = batch_analyze(field, &config.schedule, paths, &options)?;
    write_report_tables(&report, out)?;
    let summary = SummaryFile {
        schema_version: CONFIG_SCHEMA_VERSION,
        source: source.to_string(),
        dim: report.dim,
        kappa: report.options.kappa,
        n_max: report.n_max,
        summaries: report.summaries.clone(),
    };
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    report::write_figures(&summary, out)?;
    Ok(report)
}

fn write_report_tables(report: &AnalysisReport, out: &Path) -> Result<()> {
    let mut spectra = Table::new(&[
        "sample",
        "requested_t",
        "t",
        "sigma_std",
        "rank_asc",
        "singular_value",
        "inverse_singular_value_var",
        "noise_floor_var",
        "alignment_cos",
        "sym_eigenvalue_asc",
    ]);
    let mut dims = Table::new(&["sample", "requested_t", "t", "sigma_std", "kappa", "dim_estimate"]);
    for (summary, samples) in report.summaries.iter().zip(&report.samples) {
        for s in samples {
            let a = &s.analysis;
            let inv = a.inverse_singular_values();
            for r in 0..a.dim() {
                spectra.push(vec![
                    s.path_index.to_string(),
                    fmt(summary.requested_t),
                    fmt(a.t),
                    fmt(a.noise_std),
                    (r + 1).to_string(),
                    fmt(a.svd.singular_values[r]),
                    fmt(inv[r]),
                    fmt(a.noise_std * a.noise_std),
                    fmt(a.alignment[r]),
                    fmt(a.eig.eigenvalues[r]),
                ]);
            }
            dims.push(vec![
                s.path_index.to_string(),
                fmt(summary.requested_t),
                fmt(a.t),
                fmt(a.noise_std),
                fmt(report.options.kappa),
                a.dim_estimate.to_string(),
            ]);
        }
    }
    spectra.write(&out.join(SPECTRA_CSV))?;
    dims.write(&out.join(DIMENSIONALITY_CSV))?;

    let mut inverse = Table::new(&[
        "requested_t",
        "t",
        "sigma_std",
        "rank_asc",
        "mean_inverse_singular_value_var",
        "q25_var",
        "median_var",
        "q75_var",
        "noise_floor_var",
    ]);
    let mut align = Table::new(&[
        "requested_t",
        "t",
        "sigma_std",
        "rank_asc",
        "mean_cos",
        "mean_abs_cos",
        "q25_cos",
        "median_cos",
        "q75_cos",
    ]);
    let mut overlap = Table::new(&[
        "requested_t",
        "t",
        "sigma_std",
        "n",
        "phi_uv",
        "phi_uw",
        "phi_vw",
        "random_baseline",
        "mean_nontrivial_rank",
    ]);
    for s in &report.summaries {
        let head = || vec![fmt(s.requested_t), fmt(s.t), fmt(s.noise_std)];
        for r in 0..report.dim {
            let q = &s.inverse_singular_quartiles[r];
            let mut row = head();
            row.extend([
                (r + 1).to_string(),
                fmt(s.inverse_singular_mean[r]),
                fmt(q.q25),
                fmt(q.median),
                fmt(q.q75),
                fmt(s.noise_floor),
            ]);
            inverse.push(row);
            let q = &s.alignment_quartiles[r];
            let mut row = head();
            row.extend([
                (r + 1).to_string(),
                fmt(s.alignment_mean[r]),
                fmt(s.abs_alignment_mean[r]),
                fmt(q.q25),
                fmt(q.median),
                fmt(q.q75),
            ]);
            align.push(row);
        }
        for n in 0..s.overlap_uv.len() {
            let mut row = head();
            row.extend([
                (n + 1).to_string(),
                fmt(s.overlap_uv[n]),
                fmt(s.overlap_uw[n]),
                fmt(s.overlap_vw[n]),
                fmt(s.random_baseline[n]),
                fmt(s.mean_nontrivial_rank),
            ]);
            overlap.push(row);
        }
    }
    inverse.write(&out.join(INVERSE_SPECTRUM_CSV))?;
    align.write(&out.join(ALIGNMENT_CSV))?;
    overlap.write(&out.join(OVERLAP_CSV))?;
    Ok(())
}

/// Re-renders the SVG figures from `summary.json`.
pub fn cmd_report(out: &Path) -> Result<Vec<PathBuf>> {
    let summary = SummaryFile::load(&out.join(SUMMARY_JSON))?;
    report::write_figures(&summary, out)
}

/// Output directory: `--out`, else the config's `output_dir`, else `out`.
pub fn output_dir(flag: Option<PathBuf>, config: Option<&ExperimentConfig>) -> PathBuf {
    flag.or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn write_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    std::fs::write(out.join("config.json"), config.to_json()? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_a_trailing_mean() {
        let s = smoothed(&[4.0, 2.0, 6.0, 0.0], 2);
        assert_eq!(s, vec![4.0, 3.0, 4.0, 3.0]);
    }
}
