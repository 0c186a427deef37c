use std::path::{Path, PathBuf};
use std::process::Command;

use pdespline::basis::{BasisSpec1D, TensorBasis};
use pdespline::sim::{diffusion_solution, MetricsTable};
use pdespline_cli::config::{config_hash, effective_toml, parse_config, parse_config_str, Command as Cmd};
use pdespline_cli::error::{EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL};
use pdespline_cli::surface::export_surface;
use pdespline_cli::{run, RunOptions};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdespline"))
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SMALL_FIT: &str = r#"
command = "fit"
seed = 3

[basis]
dims = [{ lo = -3.0, hi = 3.0, n_basis = 12 }, { lo = 0.0, hi = 1.0, n_basis = 7 }]

[pde]
theta = ["theta1", "theta2"]

[[pde.terms]]
multiplier = 1
deriv = [1, 0]

[[pde.terms]]
multiplier = "theta1"
deriv = [0, 1]

[[pde.terms]]
multiplier = "theta2"
deriv = [0, 0]

[[conditions]]
label = "initial"
face = { dim = 2, side = "lo" }
target = "1/(1 + x1^2)"

[estimator]
theta0 = [1.0, 1.0]

[io]
input = "DATA"
"#;

fn small_fit(dir: &Path, extra: &str) -> PathBuf {
    let data = configs_dir().join("diffusion_data.csv");
    let text = SMALL_FIT.replace("DATA", &data.display().to_string()) + extra;
    let path = dir.join("fit.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn shipped_diffusion_config_has_the_study_defaults() {
    let cfg = parse_config(&configs_dir().join("diffusion.toml")).unwrap().config;
    assert_eq!(cfg.command, Cmd::Fit);
    let dims = &cfg.basis.as_ref().unwrap().dims;
    assert_eq!(dims[0].n_basis, Some(28));
    assert_eq!(dims[1].n_basis, Some(13));
    assert_eq!(cfg.estimator.theta0, Some(vec![1.0, 1.0]));

    let study = parse_config(&configs_dir().join("diffusion_study.toml")).unwrap().config;
    let s = study.study.unwrap();
    assert_eq!(s.n_basis, vec![28, 13]);
    assert_eq!(s.theta0, vec![1.0, 1.0]);
    assert_eq!(s.grid, vec![50, 50]);
}

#[test]
fn effective_config_round_trips() {
    for name in ["diffusion.toml", "diffusion_study.toml", "bs_synthetic.toml"] {
        let cfg = parse_config(&configs_dir().join(name)).unwrap().config;
        let text = effective_toml(&cfg).unwrap();
        let again = parse_config_str(&text).unwrap();
        assert_eq!(cfg, again, "{name}");
        assert_eq!(config_hash(&cfg).unwrap(), config_hash(&again).unwrap());
    }
}

#[test]
fn undeclared_theta_is_named() {
    let text = SMALL_FIT.replace("multiplier = \"theta2\"", "multiplier = \"2*theta3\"");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("pde.terms[2]"), "{err}");
    assert!(err.contains("theta3"), "{err}");
}

#[test]
fn missing_seed_is_an_error() {
    let text = SMALL_FIT.replace("seed = 3", "");
    let err = parse_config_str(&text).unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn unknown_keys_are_all_listed() {
    let text = SMALL_FIT.replace("[estimator]", "[estimator]\nthetta0 = 1\nlevle = 0.9")
        + "\n[surface]\npoints = [3, 3]\nspacing = 2\n";
    let err = parse_config_str(&text).unwrap_err().to_string();
    for key in ["estimator.thetta0", "estimator.levle", "surface.spacing"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn sections_foreign_to_the_command_are_rejected() {
    let text = SMALL_FIT.to_string() + "\n[study]\nreplicates = 2\n";
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("study"), "{err}");
}

#[test]
fn fit_is_byte_identical_under_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_fit(tmp.path(), "\n[estimator.freq]\nbootstrap = 4\n");
    let cfg = parse_config(&cfg_path).unwrap();
    let mut outs = vec![];
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let report = run(
            &cfg,
            &RunOptions {
                output_dir: Some(dir.clone()),
                verbose: false,
            },
        )
        .unwrap();
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        outs.push(std::fs::read(dir.join("estimates.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let text = String::from_utf8(outs[0].clone()).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.contains("parameter,estimate,lo,hi,method"));
    assert!(text.lines().any(|l| l.starts_with("theta1,") && !l.contains(",NA,")));
}

#[test]
fn every_output_carries_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(&small_fit(tmp.path(), "")).unwrap();
    let report = run(
        &cfg,
        &RunOptions {
            output_dir: Some(tmp.path().join("out")),
            verbose: false,
        },
    )
    .unwrap();
    let hash = config_hash(&cfg.config).unwrap();
    let want = format!("# config_hash={hash} seed=3");
    assert!(report.files.len() >= 4);
    for f in &report.files {
        let first = std::fs::read_to_string(f).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, want, "{}", f.display());
    }
}

#[test]
fn simulate_writes_the_documented_metrics_table() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("sim.toml");
    std::fs::write(
        &path,
        "command = \"simulate\"\nseed = 5\n[study]\nreplicates = 2\nn_basis = [12, 7]\ngrid = [30, 20]\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .args(["--config", path.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, MetricsTable::HEADER);
    assert_eq!(data_rows(&out.join("metrics.csv")).len(), 3);
}

#[test]
fn calibrate_recovers_synthetic_sigma() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs_dir().join("bs_synthetic.toml"))
        .unwrap()
        .replace("bootstrap = 1000", "bootstrap = 20");
    let path = tmp.path().join("bs.toml");
    std::fs::write(&path, text).unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .args(["--config", path.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let rows = data_rows(&out.join("estimates.csv"));
    let sigma: f64 = rows.iter().find(|r| r[0] == "sigma").unwrap()[1].parse().unwrap();
    assert!((sigma - 0.1).abs() < 0.005, "sigma = {sigma}");
    assert!(out.join("surface.csv").exists());
    assert!(out.join("quotes.csv").exists());
}

#[test]
fn fitted_surface_matches_the_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = configs_dir().join("diffusion.toml");
    let out = tmp.path().join("out");
    let status = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let rows = data_rows(&out.join("surface.csv"));
    assert_eq!(rows.len(), 61 * 21);
    let mut worst: f64 = 0.0;
    for r in &rows {
        let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
        let u = diffusion_solution(v[0], v[1], &[0.5, 1.5]).unwrap();
        worst = worst.max((v[2] - u).abs());
    }
    assert!(worst < 0.05, "max abs difference {worst}");
}

fn tiny_basis() -> TensorBasis {
    TensorBasis::new(vec![
        BasisSpec1D::equidistant(0.0, 1.0, 3, 6).unwrap(),
        BasisSpec1D::equidistant(-1.0, 2.0, 2, 5).unwrap(),
    ])
    .unwrap()
}

#[test]
fn constant_coefficients_give_a_constant_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let basis = tiny_basis();
    let c = vec![2.5; basis.n_coef()];
    let axes = vec![vec![0.0, 0.3, 1.0], vec![-1.0, 0.5, 2.0]];
    let path = tmp.path().join("s.csv");
    let names = vec!["a".to_string(), "b".to_string()];
    let n = export_surface(&c, &basis, &axes, &names, "u", &path, &[]).unwrap();
    assert_eq!(n, 9);
    let rows = data_rows(&path);
    for r in &rows {
        let u: f64 = r[2].parse().unwrap();
        assert!((u - 2.5).abs() < 1e-12);
    }
    // dimension 1 varies fastest
    assert_eq!(rows[1][0], "0.3");
    assert_eq!(rows[1][1], "-1");
}

#[test]
fn two_by_two_grid_gives_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let basis = tiny_basis();
    let c: Vec<f64> = (0..basis.n_coef()).map(|i| i as f64).collect();
    let path = tmp.path().join("s.csv");
    let names = vec!["a".to_string(), "b".to_string()];
    export_surface(&c, &basis, &[vec![0.0, 1.0], vec![0.0, 1.0]], &names, "u", &path, &[]).unwrap();
    assert_eq!(data_rows(&path).len(), 4);
}

#[test]
fn out_of_domain_surface_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let basis = tiny_basis();
    let c = vec![1.0; basis.n_coef()];
    let names = vec!["a".to_string(), "b".to_string()];
    let err = export_surface(
        &c,
        &basis,
        &[vec![0.0, 1.5], vec![0.0]],
        &names,
        "u",
        &tmp.path().join("s.csv"),
        &[],
    )
    .unwrap_err();
    assert!(err.to_string().contains("outside"), "{err}");
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "command = \"fit\"\nseed = 1\ncolour = 3\n").unwrap();
    let s = bin().args(["--config", bad.to_str().unwrap()]).output().unwrap().status;
    assert_eq!(s.code(), Some(EXIT_CONFIG));

    let missing = tmp.path().join("nope.toml");
    let s = bin().args(["--config", missing.to_str().unwrap()]).output().unwrap().status;
    assert_eq!(s.code(), Some(EXIT_IO));

    let text = SMALL_FIT.replace("DATA", &tmp.path().join("absent.csv").display().to_string());
    let no_data = tmp.path().join("nodata.toml");
    std::fs::write(&no_data, text).unwrap();
    let s = bin()
        .args(["--config", no_data.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(s.code(), Some(EXIT_IO));

    let capped = small_fit(tmp.path(), "\n[estimator.freq]\nmax_iter = 1\n");
    let s = bin()
        .args(["--config", capped.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(s.code(), Some(EXIT_NUMERICAL));
}

#[test]
fn bayes_fit_requires_theta_priors() {
    let text = SMALL_FIT.replace("[estimator]", "[estimator]\nmethod = \"bayes\"");
    let err = parse_config_str(&text).unwrap_err().to_string();
    assert!(err.contains("estimator.priors.theta"), "{err}");
}
