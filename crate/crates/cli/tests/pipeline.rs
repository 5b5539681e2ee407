use scoregeom::densities::{DensitySpec, RingParams};
use scoregeom::linalg::{sym_eig, DenseMatrix};
use scoregeom_cli::commands::{self, FieldSource, TrainOptions};
use scoregeom_cli::io::{read_matrix, DatasetFiles};
use scoregeom_cli::ExperimentConfig;
use std::fs;
use std::path::Path;
use std::process::Command;

fn small_rank3() -> ExperimentConfig {
    let mut c = ExperimentConfig::rank3(5).unwrap();
    c.data.n_samples = 512;
    c.data.n_heldout = 32;
    c.model.hidden = vec![16];
    c.train.steps = 40;
    c.train.batch_size = 32;
    c.train.optimizer = scoregeom::nn::OptimizerConfig::adam(1e-3);
    c.sampling.n_paths = 12;
    c.sampling.n_steps = 200;
    c.vae.train.steps = 20;
    c.vae.spec.hidden = vec![8];
    c.vae.spec.latent_dim = 4;
    c
}

fn ring_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::with_density(DensitySpec::Ring(RingParams {
        n_components: 16,
        radius: 2.0,
        thickness: 0.05,
        dim: 3,
        sector_fibres: vec![vec![0.1]],
    }));
    c.data.n_samples = 300;
    c
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = ring_config();
    let files = commands::cmd_gen_data(&c, &dir.path().join("a")).unwrap();
    let data = commands::load_dataset(&c, &dir.path().join("a")).unwrap();
    assert_eq!((data.rows(), data.cols()), (300, 3));
    let again = read_matrix(&files.csv).unwrap();
    let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&again), bits(&data));

    let other = commands::cmd_gen_data(&c, &dir.path().join("b")).unwrap();
    assert_eq!(read(&files.csv), read(&other.csv));
    assert_eq!(read(&files.sidecar), read(&other.sidecar));
}

#[test]
fn rank3_sample_covariance_matches_the_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::rank3(6).unwrap();
    c.data.n_samples = 10_000;
    c.data.noise_std = 0.1;
    commands::cmd_gen_data(&c, dir.path()).unwrap();
    let x = commands::load_dataset(&c, dir.path()).unwrap();
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let cov = DenseMatrix::from_fn(d, d, |a, b| {
        (0..n).map(|i| (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b])).sum::<f64>() / (n - 1) as f64
    });
    let mut eig = sym_eig(&cov).unwrap().eigenvalues;
    eig.sort_by(|a, b| b.total_cmp(a));
    let s2 = 0.01;
    let want = [4.0 + s2, 1.0 + s2, 0.5 + s2, s2, s2, s2];
    for (got, want) in eig.iter().zip(want) {
        assert!((got - want).abs() < 0.1 * want, "{got} vs {want}");
    }
}

#[test]
fn stale_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = ring_config();
    commands::cmd_gen_data(&c, dir.path()).unwrap();
    let mut other = c.clone();
    other.reseed(5);
    assert!(commands::load_dataset(&other, dir.path()).is_err());
}

#[test]
fn zero_steps_keeps_the_initial_network() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_rank3();
    c.train.steps = 0;
    let ckpt = commands::cmd_train_score(&c, dir.path(), &TrainOptions::default()).unwrap();
    let init = scoregeom::scoremodel::MlpScoreNet::new(5, c.model.clone(), c.schedule, c.seeds.model_init).unwrap();
    assert_eq!(ckpt.net, init);
    assert!(ckpt.loss_history.is_empty());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    let full = commands::cmd_train_score(&c, &dir.path().join("full"), &TrainOptions::default()).unwrap();

    let part = dir.path().join("part");
    let half = TrainOptions {
        resume: None,
        until: Some(15),
    };
    let first = commands::cmd_train_score(&c, &part, &half).unwrap();
    assert_eq!(first.step(), 15);
    let resume = TrainOptions {
        resume: Some(part.join(commands::SCORE_CHECKPOINT)),
        until: None,
    };
    let resumed = commands::cmd_train_score(&c, &part, &resume).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(
        read(&part.join(commands::LOSS_CSV)),
        read(&dir.path().join("full").join(commands::LOSS_CSV))
    );
}

#[test]
fn smoothed_loss_decreases_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_rank3();
    c.train.steps = 600;
    c.train.batch_size = 64;
    commands::cmd_train_score(&c, dir.path(), &TrainOptions::default()).unwrap();
    let text = fs::read_to_string(dir.path().join(commands::LOSS_CSV)).unwrap();
    let smooth: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(smooth.len(), 600);
    // compare non-overlapping window means
    let checkpoints: Vec<f64> = (1..6).map(|k| smooth[k * 100 - 1]).collect();
    assert!(checkpoints.first() > checkpoints.last(), "{checkpoints:?}");
    assert!(smooth[599] < 0.8 * smooth[49], "{} vs {}", smooth[599], smooth[49]);
}

#[test]
fn analytic_analysis_writes_expected_tables() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    let report = commands::cmd_analyze(&c, dir.path(), &FieldSource::Analytic).unwrap();
    assert_eq!(report.summaries.len(), 5);

    let dims = fs::read_to_string(dir.path().join(commands::DIMENSIONALITY_CSV)).unwrap();
    let mut lines = dims.lines();
    assert_eq!(lines.next(), Some("sample,requested_t,t,sigma_std,kappa,dim_estimate"));
    let at_small: Vec<&str> = lines.filter(|l| l.split(',').nth(1) == Some("0.01")).collect();
    assert_eq!(at_small.len(), 12);
    assert!(at_small.iter().all(|l| l.ends_with(",3")));

    let overlap = fs::read_to_string(dir.path().join(commands::OVERLAP_CSV)).unwrap();
    let mut rows = 0;
    for l in overlap.lines().skip(1) {
        let phi: f64 = l.split(',').nth(4).unwrap().parse().unwrap();
        assert!((phi - 1.0).abs() < 1e-8);
        rows += 1;
    }
    assert_eq!(rows, 5 * 5);

    let spectra = fs::read_to_string(dir.path().join(commands::SPECTRA_CSV)).unwrap();
    assert!(spectra.starts_with("sample,requested_t,t,sigma_std,rank_asc,singular_value,"));
    assert_eq!(spectra.lines().count(), 1 + 12 * 5 * 5);
    for name in ["dimensionality.svg", "inverse_spectrum.svg", "alignment.svg", "overlap_uv.svg"] {
        assert!(fs::read_to_string(dir.path().join(name)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn rerunning_produces_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        commands::cmd_train_score(&c, &out, &TrainOptions::default()).unwrap();
        let src = FieldSource::Checkpoint(out.join(commands::SCORE_CHECKPOINT));
        commands::cmd_analyze(&c, &out, &src).unwrap();
        commands::cmd_train_vae(&c, &out).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 15);
    for name in names {
        assert_eq!(read(&a.join(&name)), read(&b.join(&name)), "{name:?} differs");
    }
}

#[test]
fn report_rebuilds_figures_from_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    commands::cmd_analyze(&c, dir.path(), &FieldSource::Analytic).unwrap();
    let before = read(&dir.path().join("overlap_vw.svg"));
    fs::remove_file(dir.path().join("overlap_vw.svg")).unwrap();
    let written = commands::cmd_report(dir.path()).unwrap();
    assert_eq!(written.len(), 6);
    assert_eq!(read(&dir.path().join("overlap_vw.svg")), before);
}

#[test]
fn empty_sample_list_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    let field = scoregeom::diffusion::VpDensityField::new(&c.density, c.schedule).unwrap();
    let err = commands::analyze_paths(&c, dir.path(), &field, &[], "analytic").unwrap_err();
    assert!(format!("{err}").contains("invalid input"), "{err}");
}

#[test]
fn schema_version_mismatch_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    commands::cmd_sample(&c, dir.path(), &FieldSource::Analytic).unwrap();
    let p = dir.path().join(commands::SAMPLES_JSON);
    let text = fs::read_to_string(&p).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 7", 1);
    fs::write(&p, text).unwrap();
    let err = commands::cmd_analyze(&c, dir.path(), &FieldSource::Analytic).unwrap_err();
    assert!(format!("{err:#}").contains("schema version 7"), "{err:#}");

    let mut ckpt_dir = dir.path().join("ckpt");
    commands::cmd_train_score(&c, &ckpt_dir, &TrainOptions::default()).unwrap();
    ckpt_dir.push(commands::SCORE_CHECKPOINT);
    let text = fs::read_to_string(&ckpt_dir).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    fs::write(&ckpt_dir, text).unwrap();
    assert!(FieldSource::Checkpoint(ckpt_dir).load(&c).is_err());
}

#[test]
fn vae_command_writes_counts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_rank3();
    let s = commands::cmd_train_vae(&c, dir.path()).unwrap();
    assert_eq!(s.n_heldout, 32);
    assert_eq!(s.histogram.iter().sum::<usize>(), 32);
    let csv = fs::read_to_string(dir.path().join(commands::VAE_DIM_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 33);
    assert!(DatasetFiles::in_dir(dir.path()).exists());
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scoregeom"))
}

#[test]
fn binary_runs_the_pipeline_and_honours_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, small_rank3().to_json().unwrap()).unwrap();
    for (sub, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = dir.path().join(sub);
        let status = binary()
            .args(["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
        let status = binary()
            .args(["analyze", "--analytic", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let p = |s: &str, f: &str| read(&dir.path().join(s).join(f));
    assert_eq!(p("a", "dataset.csv"), p("b", "dataset.csv"));
    assert_ne!(p("a", "dataset.csv"), p("c", "dataset.csv"));
    assert_eq!(p("a", "spectra.csv"), p("b", "spectra.csv"));
    assert_ne!(p("a", "samples.csv"), p("c", "samples.csv"));
}

#[test]
fn binary_rejects_bad_config_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let text = small_rank3().to_json().unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
    fs::write(&cfg, text).unwrap();
    let out = binary().args(["gen-data", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema version 9"));

    fs::write(&cfg, small_rank3().to_json().unwrap()).unwrap();
    let out = binary()
        .args(["sample", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_detects_the_injected_fault() {
    let ok = binary().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{text}");
    assert!(text.contains("0 failed"));

    let bad = binary().args(["selftest", "--inject-fault", "skew-trace"]).output().unwrap();
    let text = String::from_utf8_lossy(&bad.stdout);
    assert_eq!(bad.status.code(), Some(1));
    let failing: Vec<&str> = text.lines().filter(|l| l.contains("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{text}");
    assert!(failing[0].starts_with("trace_equivalence"));
}
