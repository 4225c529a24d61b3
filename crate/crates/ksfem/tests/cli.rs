use std::fs;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use ksfem::{parse_config, parse_config_str, CliError};
use ksfem_core::adapt::SolverMode;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn ksfem() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ksfem"));
    c.env("RUST_LOG", "warn").stdout(Stdio::null()).stderr(Stdio::null());
    for var in ["KSFEM_MODE", "KSFEM_LEVELS", "KSFEM_WORKERS", "KSFEM_SEED", "KSFEM_OUT"] {
        c.env_remove(var);
    }
    c
}

fn config_error(text: &str) -> (usize, String) {
    match parse_config_str(text, "t", "t.cfg") {
        Err(CliError::Config { line, msg, .. }) => (line, msg),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn shipped_configurations_parse() {
    let he = parse_config(config_path("helium.cfg")).unwrap();
    assert_eq!(he.system.n_orbitals, 1);
    assert_eq!(he.driver.reference_energy, Some(-2.90372));
    assert_eq!(he.driver.mode, SolverMode::Augmented);

    let ch4 = parse_config(config_path("methane.cfg")).unwrap();
    assert_eq!(ch4.system.atoms.len(), 5);
    assert_eq!(ch4.system.nuclear_charge(), 10.0);
    assert_eq!(ch4.system.n_orbitals, 5);

    let c6h6 = parse_config(config_path("benzene.cfg")).unwrap();
    assert_eq!(c6h6.system.atoms.len(), 12);
    assert_eq!(c6h6.system.nuclear_charge(), 42.0);
    assert_eq!(c6h6.system.n_orbitals, 21);

    let h = parse_config(config_path("hydrogen.cfg")).unwrap();
    assert_eq!((h.system.n_orbitals, h.system.occupation), (1, 1.0));
    assert!(h.driver.scf.independent_electrons);

    let hli = parse_config(config_path("hli.cfg")).unwrap();
    assert_eq!(hli.system.n_orbitals, 2);
}

#[test]
fn overrides_and_hash() {
    let text = "box = -5 5\nseed = 7\nepsilon = 0.01\nk_max = 2\ninner_forcing = 0\n[atoms]\nHe 0 0 0 2\n";
    let mut cfg = parse_config_str(text, "stem", "t.cfg").unwrap();
    assert_eq!(cfg.name, "stem");
    assert_eq!(cfg.driver.scf.seed, 7);
    assert_eq!(cfg.driver.augmented.inner.seed, 7);
    assert_eq!(cfg.driver.adapt.epsilon, 0.01);
    assert_eq!(cfg.driver.augmented.inner_forcing, 0.0);
    assert_eq!(cfg.driver.adapt.k_asm, 2);
    cfg.set_levels(1);
    assert_eq!((cfg.driver.adapt.k_max, cfg.driver.adapt.k_asm), (1, 1));
    assert_eq!(cfg.config_hash.len(), 64);
    let other = parse_config_str(&text.replace("seed = 7", "seed = 8"), "stem", "t.cfg").unwrap();
    assert_ne!(cfg.config_hash, other.config_hash);
}

#[test]
fn malformed_configurations_are_rejected() {
    let (_, msg) = config_error("box = -5 5\n[atoms]\n");
    assert!(msg.contains("atoms"), "{msg}");
    let (line, msg) = config_error("box = -5 5\ncolour = red\n[atoms]\nHe 0 0 0 2\n");
    assert_eq!(line, 2);
    assert!(msg.contains("colour"), "{msg}");
    let (_, msg) = config_error("box = -5 5\n[atoms]\nHe 7 0 0 2\n");
    assert!(msg.contains("outside"), "{msg}");
    let (line, _) = config_error("box = -5 5\nbox = -6 6\n[atoms]\nHe 0 0 0 2\n");
    assert_eq!(line, 2);
    let (_, msg) = config_error("[atoms]\nHe 0 0 0 2\n");
    assert!(msg.contains("box"), "{msg}");
    let (line, _) = config_error("box = -5 5\n[atoms]\nHe 0 0 2\n");
    assert_eq!(line, 3);
    let (_, msg) = config_error("box = -5 5\n[atoms]\nH 0 0 0 1\n");
    assert!(msg.contains("orbitals"), "{msg}");
    config_error("box = -5 5\nmode = fast\n[atoms]\nHe 0 0 0 2\n");
    config_error("box = -5 5\nh_min = 2\nh_max = 1\n[atoms]\nHe 0 0 0 2\n");
    config_error("box = -5 5\nk_asm = 6\nk_max = 3\n[atoms]\nHe 0 0 0 2\n");
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = ksfem().args(["run", "no-such-file.cfg"]).status().unwrap();
    assert_eq!(missing.code(), Some(2));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "box = -5 5\nspin = up\n[atoms]\nHe 0 0 0 2\n").unwrap();
    assert_eq!(ksfem().arg("run").arg(&bad).status().unwrap().code(), Some(2));

    // Output directory below a regular file cannot be created.
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let status = ksfem()
        .arg("run")
        .arg(config_path("hydrogen.cfg"))
        .arg("--out")
        .arg(blocker.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    let usage = ksfem().arg("frobnicate").status().unwrap();
    assert_ne!(usage.code(), Some(0));
}

/// `levels.csv` without the wall-time column.
fn levels_without_timing(dir: &std::path::Path) -> Vec<String> {
    fs::read_to_string(dir.join("levels.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn runs_are_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let status = ksfem()
            .arg("run")
            .arg(config_path("helium.cfg"))
            .args(["--mode", "direct", "--levels", "1", "--seed", "3"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        outs.push(out);
    }
    let rows = levels_without_timing(&outs[0]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows, levels_without_timing(&outs[1]));
    for f in [
        "final.mesh",
        "rho.sol",
        "psi_1.sol",
        "fields.vtk",
        "summary.txt",
        "manifest.txt",
        "level0_scf.csv",
        "level1_scf.csv",
    ] {
        assert!(outs[0].join(f).is_file(), "{f} missing");
    }
    for f in ["final.mesh", "rho.sol", "psi_1.sol"] {
        assert_eq!(
            fs::read(outs[0].join(f)).unwrap(),
            fs::read(outs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }
    let manifest = fs::read_to_string(outs[0].join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 3") && manifest.contains("status = ok") && manifest.contains("mode = direct"));
    let mesh = ksfem_core::medit::read_mesh(outs[0].join("final.mesh")).unwrap();
    mesh.validate().unwrap();
    let vtk = fs::read_to_string(outs[0].join("fields.vtk")).unwrap();
    assert!(vtk.contains(&format!("POINT_DATA {}", mesh.num_nodes())));
}

#[test]
fn uniform_mode_keeps_structured_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let status = ksfem()
        .arg("run")
        .arg(config_path("hydrogen.cfg"))
        .args(["--levels", "1"])
        .arg("--out")
        .arg(dir.path())
        .env("KSFEM_MODE", "uniform")
        .status()
        .unwrap();
    assert!(status.success());
    let mesh = ksfem_core::medit::read_mesh(dir.path().join("final.mesh")).unwrap();
    let n = parse_config(config_path("hydrogen.cfg")).unwrap().driver.adapt.cells(1);
    assert_eq!(mesh.num_tets(), 6 * n * n * n);
    let structured = ksfem_core::mesh::build_box_mesh(mesh.domain, n).unwrap();
    for (a, b) in mesh.nodes.iter().zip(&structured.nodes) {
        assert!(ksfem_core::mesh::distance(a, b) < 1e-9);
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("mode = uniform"));
}
