use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ksfem_core::adapt::{adaptive_driver, write_level_csv, DriverOutcome, LevelRecord, LevelState, SolverLog};
use ksfem_core::augmented::write_augmented_log;
use ksfem_core::fem::DofMap;
use ksfem_core::medit::{write_mesh, write_sol, SolData};
use ksfem_core::mesh::Mesh;
use ksfem_core::scf::write_scf_log;

use crate::config::RunConfig;
use crate::CliError;

/// What a completed run produced.
#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub levels: Vec<LevelRecord>,
    pub final_energy: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Maps a write failure from the core crate onto the output error class.
fn written(path: &Path, r: ksfem_core::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        ksfem_core::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Solver(other),
    })
}

/// Runs the adaptive pipeline and writes every output into `out_dir`.
///
/// Outputs of completed levels are written even when a later level fails; the
/// failure is then returned.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    log::info!(
        "{}: {} atoms, {} orbitals, mode {}",
        config.name,
        config.system.atoms.len(),
        config.system.n_orbitals,
        config.driver.mode.name()
    );
    let outcome = adaptive_driver(&config.system, &config.driver);
    write_outputs(config, out_dir, &outcome)?;
    let final_energy = outcome.levels.last().map(|r| r.energy);
    match outcome.error {
        Some(e) => Err(CliError::Solver(e)),
        None => Ok(RunReport {
            out_dir: out_dir.to_path_buf(),
            levels: outcome.levels,
            final_energy,
        }),
    }
}

fn write_outputs(config: &RunConfig, dir: &Path, outcome: &DriverOutcome) -> Result<(), CliError> {
    let levels = dir.join("levels.csv");
    written(&levels, write_level_csv(&levels, &outcome.levels))?;
    for r in &outcome.levels {
        match &r.log {
            SolverLog::Scf(rows) => {
                let p = dir.join(format!("level{}_scf.csv", r.level));
                written(&p, write_scf_log(&p, rows))?;
            }
            SolverLog::Augmented(rows) => {
                let p = dir.join(format!("level{}_augmented.csv", r.level));
                written(&p, write_augmented_log(&p, rows))?;
            }
        }
    }
    if let Some(state) = &outcome.state {
        write_fields(dir, state)?;
    }
    let summary = dir.join("summary.txt");
    fs::write(&summary, summary_text(config, outcome)).map_err(io_err(&summary))?;
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, manifest_text(config, outcome)).map_err(io_err(&manifest))?;
    Ok(())
}

fn write_fields(dir: &Path, state: &LevelState) -> Result<(), CliError> {
    let mesh_path = dir.join("final.mesh");
    written(&mesh_path, write_mesh(&state.mesh, &mesh_path))?;
    let rho_path = dir.join("rho.sol");
    written(&rho_path, write_sol(&SolData::Scalar(state.density.clone()), &rho_path))?;
    let dofs = DofMap::new(&state.mesh);
    let mut orbitals = Vec::with_capacity(state.waves.len());
    for k in 0..state.waves.len() {
        let nodal = dofs.lift(state.waves.coeffs.column(k).as_slice());
        let p = dir.join(format!("psi_{}.sol", k + 1));
        written(&p, write_sol(&SolData::Scalar(nodal.clone()), &p))?;
        orbitals.push((format!("psi_{}", k + 1), nodal));
    }
    let mut fields: Vec<(&str, &[f64])> = vec![("rho", &state.density)];
    fields.extend(orbitals.iter().map(|(n, v)| (n.as_str(), v.as_slice())));
    let vtk = dir.join("fields.vtk");
    fs::write(&vtk, vtk_text(&state.mesh, &fields)).map_err(io_err(&vtk))?;
    Ok(())
}

/// Legacy ASCII VTK unstructured grid with nodal scalar fields.
pub fn vtk_text(mesh: &Mesh, fields: &[(&str, &[f64])]) -> String {
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\nksfem fields\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.num_nodes());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{:e} {:e} {:e}", p[0], p[1], p[2]);
    }
    let _ = writeln!(s, "CELLS {} {}", mesh.num_tets(), 5 * mesh.num_tets());
    for t in &mesh.tets {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.num_tets());
    for _ in 0..mesh.num_tets() {
        s.push_str("10\n");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.num_nodes());
    for (name, values) in fields {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for v in values.iter() {
            let _ = writeln!(s, "{v:e}");
        }
    }
    s
}

fn summary_text(config: &RunConfig, outcome: &DriverOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "system = {}", config.name);
    let _ = writeln!(s, "mode = {}", config.driver.mode.name());
    let _ = writeln!(s, "levels = {}", outcome.levels.len());
    if let Some(r) = outcome.levels.last() {
        let t = &r.terms;
        let _ = writeln!(s, "elements = {}", r.elements);
        let _ = writeln!(s, "nodes = {}", r.nodes);
        let _ = writeln!(s, "total_energy = {:.6}", r.energy);
        let _ = writeln!(s, "band_energy = {:.6}", t.band);
        let _ = writeln!(s, "hartree_energy = {:.6}", t.hartree);
        let _ = writeln!(s, "xc_potential_energy = {:.6}", t.xc_potential);
        let _ = writeln!(s, "exchange_energy = {:.6}", t.exchange);
        let _ = writeln!(s, "correlation_energy = {:.6}", t.correlation);
        let _ = writeln!(s, "nuclear_repulsion = {:.6}", t.nuclear);
        let eig: Vec<String> = r.eigenvalues.iter().map(|l| format!("{l:.6}")).collect();
        let _ = writeln!(s, "eigenvalues = {}", eig.join(" "));
        if let Some(e_ref) = config.driver.reference_energy {
            let _ = writeln!(s, "reference_energy = {e_ref:.6}");
            let _ = writeln!(s, "abs_error = {:.6}", (r.energy - e_ref).abs());
        }
        let _ = writeln!(s, "converged = {}", r.converged);
    }
    if let Some(e) = &outcome.error {
        let _ = writeln!(s, "error = {e}");
    }
    s
}

fn manifest_text(config: &RunConfig, outcome: &DriverOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_sha256 = {}", config.config_hash);
    let _ = writeln!(s, "ksfem_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "ksfem_core_version = {}", ksfem_core::VERSION);
    let _ = writeln!(s, "seed = {}", config.seed);
    let _ = writeln!(s, "mode = {}", config.driver.mode.name());
    let _ = writeln!(s, "k_max = {}", config.driver.adapt.k_max);
    let _ = writeln!(s, "workers = {}", rayon::current_num_threads());
    let _ = writeln!(s, "levels_completed = {}", outcome.levels.len());
    let _ = writeln!(s, "status = {}", if outcome.error.is_some() { "failed" } else { "ok" });
    s
}
