use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caic_cli::config::ExperimentGrid;
use caic_cli::data::write_observations;
use caic_core::model::{Family, Link, ModelSpec, ParameterVector};
use caic_core::simulation::{draw_random_effects, relative_bias, simulate_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn caic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caic"))
        .args(args)
        .env_remove("CAIC_THREADS")
        .output()
        .unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_GRID: &str = r#"
[model]
family = "gaussian"
n_years = 5

[grid]
rows = [{ replicates = 2, dispersion = 0.5, delta = 0.4 }, { replicates = 2, dispersion = 1.0, delta = 0.4 }]

[monte_carlo]
n_out = 6
n_inner = 20
seed = 11
methods = [1, 2]
"#;

fn data_rows(csv_text: &str) -> Vec<csv::StringRecord> {
    let body: String = csv_text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    csv::Reader::from_reader(body.as_bytes()).records().map(|r| r.unwrap()).collect()
}

#[test]
fn smoke_row_has_finite_relative_biases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.json");
    let out = caic(&["run-grid", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("rb_table.csv")).unwrap();
    assert!(text.starts_with("# generated"), "timestamp line expected by default");
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    for col in [4, 6] {
        let v: f64 = rows[0][col].parse().unwrap();
        assert!(v.is_finite());
    }
    assert!(dir.path().join("rb_table.md").exists());
    let ndjson = std::fs::read_to_string(dir.path().join("replicates.ndjson")).unwrap();
    assert_eq!(ndjson.lines().count(), 8);
    for l in ndjson.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["row"], 0);
    }
}

#[test]
fn csv_header_and_recomputable_relative_bias() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", SMALL_GRID);
    let out_dir = dir.path().join("out");
    let out = caic(&["run-grid", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--no-timestamp"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("rb_table.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with(
        "n_ta,dispersion_name,dispersion_value,delta,rb_method2,rb_method2_se,rb_method1,rb_method1_se,n_converged,n_discarded,bc_true,bc_true_se"
    ));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(&r[1], "sigma_e");
        let bc_true: f64 = r[10].parse().unwrap();
        for (rb_col, est_col) in [(4, 12), (6, 13)] {
            let rb: f64 = r[rb_col].parse().unwrap();
            let est: f64 = r[est_col].parse().unwrap();
            assert_eq!(rb, relative_bias(est, bc_true).unwrap());
        }
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", SMALL_GRID);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("out{threads}"));
        let out = caic(&["run-grid", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", threads, "--no-timestamp"]);
        assert!(out.status.success());
        outputs.push((
            std::fs::read(out_dir.join("rb_table.csv")).unwrap(),
            std::fs::read(out_dir.join("replicates.ndjson")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_flag_changes_results_and_env_sets_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", SMALL_GRID);
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_caic"))
            .args(["run-grid", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--no-timestamp", "--seed", seed])
            .env("CAIC_THREADS", "2")
            .output()
            .unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("on 2 threads"));
        std::fs::read(out_dir.join("rb_table.csv")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", &SMALL_GRID.replace(
        "rows = [{ replicates = 2, dispersion = 0.5, delta = 0.4 }, { replicates = 2, dispersion = 1.0, delta = 0.4 }]",
        "rows = []",
    ));
    let out = caic(&["run-grid", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty grid"));
}

#[test]
fn parse_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", &SMALL_GRID.replace("n_out = 6", "n_out = -6"));
    let out = caic(&["run-grid", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line") && err.contains("n_out"), "{err}");
}

#[test]
fn table_layout_config_has_24_rows() {
    let g = ExperimentGrid::load(&configs().join("gaussian_table.toml")).unwrap();
    assert_eq!(g.rows.len(), 24);
    assert!(g.configs.iter().all(|c| c.spec.n_years == 50 && c.spec.n_ages == 6));
    for name in ["gaussian_desk.toml", "gamma_desk.toml", "negbin_desk.toml", "tweedie_desk.toml"] {
        ExperimentGrid::load(&configs().join(name)).unwrap();
    }
}

fn simulated_file(dir: &Path, family: Family, link: Link, dispersion: f64) -> PathBuf {
    let spec = ModelSpec::new(family, link, 8, 3, 3).unwrap();
    let theta = ParameterVector::from_natural(vec![0.5, 1.0, 1.5], 1.0, 0.4, 0.8, dispersion).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let psi = draw_random_effects(&spec, &theta, &mut rng);
    let data = simulate_dataset(&spec, &theta, &psi, &mut rng).unwrap();
    let p = dir.join(format!("{family:?}.csv"));
    write_observations(std::fs::File::create(&p).unwrap(), &data).unwrap();
    p
}

#[test]
fn gaussian_fit_prints_both_methods_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_file(dir.path(), Family::Gaussian, Link::Identity, 0.5);
    let spec = write(dir.path(), "spec.toml", "[model]\nfamily = \"gaussian\"\n");
    let json = dir.path().join("fit.json");
    let out = caic(&["fit", data.to_str().unwrap(), spec.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for key in ["-2 l_c", "p_c", "trace", "cAIC method 2", "cAIC method 1"] {
        assert!(stdout.contains(key), "{key} missing:\n{stdout}");
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["report"]["p_c"], 3 + 3);
    assert_eq!(v["report"]["q"], 8 + 24);
    assert!(v["report"]["caic_method1"].as_f64().unwrap().is_finite());
}

#[test]
fn negbin_fit_reports_method2_only_with_notice() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_file(dir.path(), Family::NegBin, Link::Log, 0.2);
    let spec = write(dir.path(), "spec.toml", "[model]\nfamily = \"negbin\"\n");
    let out = caic(&["fit", data.to_str().unwrap(), spec.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("cAIC method 2"));
    assert!(!stdout.contains("cAIC method 1"));
    assert!(stdout.contains("method 1 omitted"));
}

#[test]
fn gamma_fit_with_shipped_spec() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_file(dir.path(), Family::Gamma, Link::Log, 3.0);
    let spec = configs().join("fit_gamma.toml");
    let out = caic(&["fit", data.to_str().unwrap(), spec.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("cAIC method 1"));
}

#[test]
fn malformed_data_row_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", "t,a,y\n1,1,0.3\n1,2,abc\n");
    let spec = write(dir.path(), "spec.toml", "[model]\nfamily = \"gaussian\"\n");
    let out = caic(&["fit", data.to_str().unwrap(), spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
