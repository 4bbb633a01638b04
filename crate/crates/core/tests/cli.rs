//! End-to-end CLI behavior: file outputs, exit codes, provenance guards,
//! and checkpoint resume.

use std::path::{Path, PathBuf};
use std::process::Command;

fn favar_bin() -> &'static str {
    env!("CARGO_BIN_EXE_favar")
}

fn run_favar(args: &[&str]) -> std::process::Output {
    Command::new(favar_bin())
        .args(args)
        .output()
        .expect("failed to launch favar")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(out_dir: &str, n_draws: usize, n_burn: usize, extra: &str) -> String {
    format!(
        r#"
seed = 33
output_dir = "{out_dir}"
identification = "proxy"

[data]
panel = "{out_dir}/synthetic_panel.csv"

[defaults]
regional_transform = "none"

[dims]
s = 1
q = 2
h_max = 72

[chain]
n_draws = {n_draws}
n_burn = {n_burn}
thin = 1

[synthetic]
r = 10
t = 120
k = 2

[[series]]
name = "AGG_01"
kind = "aggregate"
policy_indicator = true

[[series]]
name = "AGG_02"
kind = "aggregate"

[[series]]
name = "PROXY"
kind = "proxy"
{extra}
"#
    )
}

fn sha256(path: &Path) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap()).into()
}

#[test]
fn simulate_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.toml",
        &format!(
            "seed = 5\noutput_dir = \"a\"\n[data]\npanel = \"a/synthetic_panel.csv\"\n\
             [dims]\ns = 1\nq = 2\n[synthetic]\nr = 30\nt = 300\nk = 2\n"
        ),
    );
    let out = run_favar(&["simulate", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let panel_a = dir.path().join("a/synthetic_panel.csv");

    // 300 rows, 33 data columns (30 regional + 2 aggregates + proxy).
    let text = std::fs::read_to_string(&panel_a).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 301);
    assert_eq!(rows[0].split(',').count(), 34); // period + 33 series
    assert!(text.contains("config_hash="));
    assert!(text.contains("seed=5"));

    // Same seed, second run: identical bytes.
    let out = run_favar(&["simulate", "-c", cfg.to_str().unwrap(), "--output-dir", "b"]);
    assert!(out.status.success());
    // output-dir override changes the hash comment, so compare data rows only.
    let text_b = std::fs::read_to_string(dir.path().join("b/synthetic_panel.csv")).unwrap();
    let data_a: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    let data_b: Vec<&str> = text_b.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data_a, data_b);

    // Identical invocation reproduces the file bit for bit.
    let out = run_favar(&["simulate", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(sha256(&panel_a), sha256(&dir.path().join("a/synthetic_panel.csv")));

    // Ground-truth sidecar reloads into a valid parameter state.
    let sidecar: favar::cli::TruthSidecar = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a/synthetic_truth.json")).unwrap(),
    )
    .unwrap();
    sidecar.params().check_invariants().unwrap();
}

#[test]
fn schema_error_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "seed = 1\noutput_dir = \"out\"\nunknown_key = true\n[data]\npanel = \"p.csv\"\n",
    );
    let out = run_favar(&["estimate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists(), "no partial outputs on config error");
}

#[test]
fn missing_panel_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        "seed = 1\noutput_dir = \"out\"\n[defaults]\nregional_transform = \"none\"\n[data]\npanel = \"nope.csv\"\n",
    );
    let out = run_favar(&["estimate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn estimate_irf_dic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &small_config("out", 260, 60, ""));
    let cfg_s = cfg.to_str().unwrap();

    let out = run_favar(&["simulate", "-c", cfg_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_favar(&["estimate", "-c", cfg_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/run_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["chain"]["n_draws"], 260);
    assert_eq!(summary["dims"]["lag_order"], 2);
    assert_eq!(summary["hyperparams"]["vartheta_a"], 0.1);
    assert_eq!(summary["dims"]["n_regions"], 10);

    // IRF with the default horizon.
    let out = run_favar(&["irf", "-c", cfg_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let macro_table = std::fs::read_to_string(dir.path().join("out/irf_macro.csv")).unwrap();
    let mut policy_h0 = None;
    let mut max_h = 0usize;
    for line in macro_table.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let h: usize = f[1].parse().unwrap();
        if f[0] == "AGG_01" {
            max_h = max_h.max(h);
            if h == 0 {
                policy_h0 = Some(f[3].to_string());
            }
        }
    }
    assert_eq!(policy_h0.as_deref(), Some("-0.25"), "policy impact median printed exactly");
    assert_eq!(max_h, 72, "default horizon is 72 months");
    assert!(dir.path().join("out/irf_regional.csv").exists());
    assert!(dir.path().join("out/cumulative_regional.csv").exists());

    let irf_summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/irf_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(irf_summary["n_excluded"], 0);

    // DIC on the single chain.
    let chain = dir.path().join("out/chain.bin");
    let out = run_favar(&["dic", "-c", cfg_s, chain.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("out/dic_comparison.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("chain,")));
}

#[test]
fn sign_identification_reports_acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\n[sign_restrictions]\nmax_tries = 200\nrules = [ { series = \"AGG_01\", sign = \"-\" }, { series = \"AGG_02\", sign = \"+\" } ]\n";
    let cfg = write_config(dir.path(), "run.toml", &small_config("out", 220, 20, extra));
    let cfg_s = cfg.to_str().unwrap();
    assert!(run_favar(&["simulate", "-c", cfg_s]).status.success());
    assert!(run_favar(&["estimate", "-c", cfg_s]).status.success());

    // Flip to sign identification for the IRF stage.
    let body = small_config("out", 220, 20, extra).replace(
        "identification = \"proxy\"",
        "identification = \"sign\"",
    );
    let cfg2 = write_config(dir.path(), "run_sign.toml", &body);
    let out = run_favar(&["irf", "-c", cfg2.to_str().unwrap(), "--chain",
        dir.path().join("out/chain.bin").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let irf_summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/irf_summary.json")).unwrap(),
    )
    .unwrap();
    assert!(irf_summary["acceptance_rate"].is_number());
    assert!(irf_summary["n_excluded"].is_number());
}

#[test]
fn dic_refuses_mismatched_data_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &small_config("out", 160, 30, ""));
    let cfg_s = cfg.to_str().unwrap();
    assert!(run_favar(&["simulate", "-c", cfg_s]).status.success());
    assert!(run_favar(&["estimate", "-c", cfg_s]).status.success());

    // Perturb the panel after estimation.
    let panel = dir.path().join("out/synthetic_panel.csv");
    let mut text = std::fs::read_to_string(&panel).unwrap();
    text.push_str("# tampered\n");
    std::fs::write(&panel, text).unwrap();

    let chain = dir.path().join("out/chain.bin");
    let out = run_favar(&["dic", "-c", cfg_s, chain.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn interrupted_estimate_resumes_to_identical_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.toml",
        &small_config("out", 80, 20, "").replace("thin = 1", "thin = 1\ncheckpoint_every = 15"),
    );
    let cfg_s = cfg.to_str().unwrap();
    assert!(run_favar(&["simulate", "-c", cfg_s]).status.success());

    // Uninterrupted reference run in a second directory.
    let out = run_favar(&["estimate", "-c", cfg_s, "--output-dir", "ref"]);
    assert!(out.status.success());
    // The panel lives under out/, referenced by the config; re-simulate for
    // the reference directory is unnecessary since data.panel is explicit.

    // Interrupted run: stop after 33 iterations, then resume.
    let out = run_favar(&["estimate", "-c", cfg_s, "--stop-after", "33"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/checkpoint.bin").exists());
    assert!(!dir.path().join("out/chain.bin").exists());
    let ckpt = dir.path().join("out/checkpoint.bin");
    let out = run_favar(&["estimate", "-c", cfg_s, "--resume", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let a = favar::chainio::load_chain(&dir.path().join("out/chain.bin")).unwrap();
    let b = favar::chainio::load_chain(&dir.path().join("ref/chain.bin")).unwrap();
    assert_eq!(a.output.draws.len(), b.output.draws.len());
    for (x, y) in a.output.draws.iter().zip(b.output.draws.iter()) {
        assert_eq!(x, y, "resumed chain must be bitwise identical");
    }
}

#[test]
fn dry_run_emits_reference_summary() {
    // Mirrors the full-scale defaults: Q=2, 20,000/10,000, all shrinkage
    // hyperparameters at their standard values.
    let root = env!("CARGO_MANIFEST_DIR");
    let cfg = PathBuf::from(root).join("../../configs/paper_defaults.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = run_favar(&[
        "estimate",
        "-c",
        cfg.to_str().unwrap(),
        "--dry-run",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["dims"]["lag_order"], 2);
    assert_eq!(summary["chain"]["n_draws"], 20000);
    assert_eq!(summary["chain"]["n_burn"], 10000);
    assert_eq!(summary["hyperparams"]["vartheta_a"], 0.1);
    assert_eq!(summary["hyperparams"]["nu"], 9.0);
    assert_eq!(summary["dims"]["n_regions"], 417);
}
