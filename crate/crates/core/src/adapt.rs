//! Hessian-based metrics, fixed-connectivity mesh moving, and the level
//! driver that alternates solving and adapting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augmented::{augmented_solve, coarse_mesh_for, AugmentedConfig, AugmentedLogRow};
use crate::eigensolve::b_orthonormalize;
use crate::locate::{interpolate_with, Locator};
use crate::medit::{read_mesh, read_sol, write_mesh, write_sol, SolData};
use crate::mesh::{build_box_mesh, dot, norm, sub, tet_volume, Mesh};
use crate::potentials::{EnergyTerms, MolecularSystem};
use crate::scf::{scf_solve, Discretization, ScfConfig, ScfLogRow, WaveSet};
use crate::{Error, Point, Result};

/// Symmetric 3×3 tensor stored as `(m11, m12, m22, m13, m23, m33)`.
pub type SymTensor = [f64; 6];

/// Interpolation constant for linear elements in three dimensions.
pub const C_D: f64 = 9.0 / 32.0;

pub fn sym_to_matrix(t: &SymTensor) -> Matrix3<f64> {
    Matrix3::new(t[0], t[1], t[3], t[1], t[2], t[4], t[3], t[4], t[5])
}

pub fn matrix_to_sym(m: &Matrix3<f64>) -> SymTensor {
    [
        m[(0, 0)],
        0.5 * (m[(0, 1)] + m[(1, 0)]),
        m[(1, 1)],
        0.5 * (m[(0, 2)] + m[(2, 0)]),
        0.5 * (m[(1, 2)] + m[(2, 1)]),
        m[(2, 2)],
    ]
}

/// `eᵀ M e`
pub fn quadratic_form(t: &SymTensor, e: &Point) -> f64 {
    t[0] * e[0] * e[0]
        + t[2] * e[1] * e[1]
        + t[5] * e[2] * e[2]
        + 2.0 * (t[1] * e[0] * e[1] + t[3] * e[0] * e[2] + t[4] * e[1] * e[2])
}

/// Nodal gradients as lumped-mass averages of element gradients.
pub fn recover_gradient(mesh: &Mesh, u: &[f64]) -> Vec<Point> {
    assert_eq!(u.len(), mesh.num_nodes());
    let (off, list) = mesh.node_tets();
    (0..mesh.num_nodes())
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 3];
            let mut w = 0.0;
            for &t in &list[off[i]..off[i + 1]] {
                let p = mesh.tet_points(t);
                let v = mesh.volume(t);
                let Some(grads) = crate::fem::barycentric_gradients(&p) else {
                    continue;
                };
                let tet = &mesh.tets[t];
                for a in 0..4 {
                    for d in 0..3 {
                        g[d] += v * u[tet[a]] * grads[a][d];
                    }
                }
                w += v;
            }
            if w > 0.0 {
                g.map(|x| x / w)
            } else {
                g
            }
        })
        .collect()
}

/// Nodal Hessians by recovering the gradient twice and symmetrising.
pub fn recover_hessian(mesh: &Mesh, u: &[f64]) -> Vec<SymTensor> {
    let g = recover_gradient(mesh, u);
    let comps: Vec<Vec<Point>> = (0..3)
        .map(|d| {
            let gd: Vec<f64> = g.iter().map(|x| x[d]).collect();
            recover_gradient(mesh, &gd)
        })
        .collect();
    (0..mesh.num_nodes())
        .map(|i| {
            let h = |a: usize, b: usize| 0.5 * (comps[a][i][b] + comps[b][i][a]);
            [h(0, 0), h(0, 1), h(1, 1), h(0, 2), h(1, 2), h(2, 2)]
        })
        .collect()
}

/// Per-node metric tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub tensors: Vec<SymTensor>,
}

impl MetricField {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_spd(&self) -> bool {
        self.tensors.iter().all(|t| {
            let e = SymmetricEigen::new(sym_to_matrix(t));
            e.eigenvalues.iter().all(|&l| l > 0.0 && l.is_finite())
        })
    }

    pub fn write_sol(&self, path: impl AsRef<Path>) -> Result<()> {
        write_sol(&SolData::Tensor(self.tensors.clone()), path)
    }

    pub fn read_sol(path: impl AsRef<Path>, expected_nodes: usize) -> Result<Self> {
        match read_sol(path.as_ref(), expected_nodes)? {
            SolData::Tensor(tensors) => Ok(Self { tensors }),
            SolData::Scalar(_) => Err(Error::Format {
                path: path.as_ref().to_path_buf(),
                line: 0,
                msg: "expected a symmetric tensor field".into(),
            }),
        }
    }

    /// Linear interpolation at a barycentric point of a tet of `mesh`.
    fn at(&self, mesh: &Mesh, tet: usize, bary: &[f64; 4]) -> SymTensor {
        let mut out = [0.0; 6];
        for (a, &l) in mesh.tets[tet].iter().zip(bary) {
            for k in 0..6 {
                out[k] += l * self.tensors[*a][k];
            }
        }
        out
    }
}

/// Metric `R Λ̃ Rᵀ` with `λ̃ = clamp(C_d |λ| / ε, 1/h_max², 1/h_min²)`.
pub fn metric_from_hessian(hessians: &[SymTensor], cfg: &AdaptConfig) -> MetricField {
    let lo = 1.0 / (cfg.h_max * cfg.h_max);
    let hi = 1.0 / (cfg.h_min * cfg.h_min);
    let tensors = hessians
        .par_iter()
        .map(|h| {
            let e = SymmetricEigen::new(sym_to_matrix(h));
            let lam = e.eigenvalues.map(|l| {
                let v = C_D * l.abs() / cfg.epsilon;
                if v.is_finite() {
                    v.clamp(lo, hi)
                } else {
                    hi
                }
            });
            let r = e.eigenvectors;
            matrix_to_sym(&(r * Matrix3::from_diagonal(&lam) * r.transpose()))
        })
        .collect();
    MetricField { tensors }
}

/// Relocates interior nodes of `mesh` using a metric that lives on the same
/// mesh's initial node positions.
pub fn move_mesh(mesh: &Mesh, metric: &MetricField, sweeps: usize) -> Result<Mesh> {
    move_mesh_with(mesh, mesh, metric, sweeps, 0)
}

/// Gauss-Seidel relocation of the interior nodes of `mesh` towards the
/// weighted average of their neighbours, with edge weights `sqrt(êᵀ M̄ ê)`
/// and the metric read off `source` at the nodes' current positions.
pub fn move_mesh_with(mesh: &Mesh, source: &Mesh, metric: &MetricField, sweeps: usize, seed: u64) -> Result<Mesh> {
    if metric.len() != source.num_nodes() {
        return Err(Error::Dimension(format!(
            "metric has {} tensors, source mesh has {} nodes",
            metric.len(),
            source.num_nodes()
        )));
    }
    let loc = Locator::new(source);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mesh.clone();
    let locs = loc.locate_all(&out.nodes, seed);
    let mut hint: Vec<usize> = locs.iter().map(|l| l.tet).collect();
    let mut m_at: Vec<SymTensor> = locs.iter().map(|l| metric.at(source, l.tet, &l.bary)).collect();
    let (nptr, nbrs) = mesh.node_neighbors();
    let (tptr, tlist) = mesh.node_tets();

    for _ in 0..sweeps {
        let mut moved = 0usize;
        for i in 0..out.num_nodes() {
            if out.boundary[i] {
                continue;
            }
            let xi = out.nodes[i];
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for &j in &nbrs[nptr[i]..nptr[i + 1]] {
                let e = sub(&out.nodes[j], &xi);
                let len = norm(&e);
                if len == 0.0 {
                    continue;
                }
                let unit = e.map(|x| x / len);
                let mut mbar = [0.0; 6];
                for k in 0..6 {
                    mbar[k] = 0.5 * (m_at[i][k] + m_at[j][k]);
                }
                let w = quadratic_form(&mbar, &unit).max(0.0).sqrt();
                for d in 0..3 {
                    acc[d] += w * out.nodes[j][d];
                }
                wsum += w;
            }
            if wsum <= 0.0 {
                continue;
            }
            let step = [acc[0] / wsum - xi[0], acc[1] / wsum - xi[1], acc[2] / wsum - xi[2]];
            if dot(&step, &step) == 0.0 {
                continue;
            }
            let incident = &tlist[tptr[i]..tptr[i + 1]];
            let mut s = 1.0;
            for _ in 0..=MAX_HALVINGS {
                let cand = [xi[0] + s * step[0], xi[1] + s * step[1], xi[2] + s * step[2]];
                if incident.iter().all(|&t| acceptable(&out, t, i, &cand)) {
                    out.nodes[i] = cand;
                    let l = loc.walk(&cand, hint[i], &mut rng);
                    hint[i] = l.tet;
                    m_at[i] = metric.at(source, l.tet, &l.bary);
                    moved += 1;
                    break;
                }
                s *= 0.5;
            }
        }
        if moved == 0 {
            break;
        }
    }
    out.validate()?;
    Ok(out)
}

const MAX_HALVINGS: usize = 10;

/// A tet may shrink to this fraction of its volume in one move.
const SHRINK_FLOOR: f64 = 0.1;

fn acceptable(mesh: &Mesh, t: usize, node: usize, cand: &Point) -> bool {
    let tet = mesh.tets[t];
    let p = tet.map(|v| if v == node { *cand } else { mesh.nodes[v] });
    let v = tet_volume(&p[0], &p[1], &p[2], &p[3]);
    v > 0.0 && v >= SHRINK_FLOOR * mesh.volume(t)
}

/// Metric edge lengths `sqrt(eᵀ M̄ e)` over all edges, with the metric given
/// on the same mesh.
pub fn metric_edge_lengths(mesh: &Mesh, metric: &MetricField) -> Vec<f64> {
    mesh.edges()
        .iter()
        .map(|&(a, b)| {
            let e = sub(&mesh.nodes[b], &mesh.nodes[a]);
            let mut mbar = [0.0; 6];
            for k in 0..6 {
                mbar[k] = 0.5 * (metric.tensors[a][k] + metric.tensors[b][k]);
            }
            quadratic_form(&mbar, &e).max(0.0).sqrt()
        })
        .collect()
}

/// Field whose Hessian drives the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveFunction {
    SqrtDensity,
    Density,
    /// Sum of the absolute Hessians of all orbitals.
    Orbitals,
}

impl std::str::FromStr for AdaptiveFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt-density" => Ok(AdaptiveFunction::SqrtDensity),
            "density" => Ok(AdaptiveFunction::Density),
            "orbitals" => Ok(AdaptiveFunction::Orbitals),
            _ => Err(Error::InvalidInput(format!(
                "unknown adaptive function '{s}' (sqrt-density, density, orbitals)"
            ))),
        }
    }
}

/// Which solver runs on which level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Direct SCF on every level.
    Direct,
    /// Direct SCF up to the warm-up count, augmented subspace afterwards.
    Augmented,
    /// Uniform meshes with direct SCF and no metric or moving step.
    Uniform,
}

impl SolverMode {
    pub fn name(&self) -> &'static str {
        match self {
            SolverMode::Direct => "direct",
            SolverMode::Augmented => "augmented",
            SolverMode::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SolverMode::Direct),
            "augmented" => Ok(SolverMode::Augmented),
            "uniform" => Ok(SolverMode::Uniform),
            _ => Err(Error::InvalidInput(format!(
                "unknown mode '{s}' (direct, augmented, uniform)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    /// Interpolation-error target.
    pub epsilon: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Levels `0..=k_asm` use direct SCF in augmented mode.
    pub k_asm: usize,
    /// Last level index.
    pub k_max: usize,
    /// Stop when `|ΔE/E|` between consecutive levels drops below this.
    pub tol: f64,
    pub function: AdaptiveFunction,
    /// Cells per axis on level 0.
    pub initial_cells: usize,
    /// Growth factor of the cells per axis between levels.
    pub growth: f64,
    /// Upper bound on cells per axis.
    pub max_cells: usize,
    pub sweeps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            h_min: 0.05,
            h_max: 5.0,
            k_asm: 4,
            k_max: 5,
            tol: 1e-3,
            function: AdaptiveFunction::SqrtDensity,
            initial_cells: 10,
            growth: 1.26,
            max_cells: 40,
            sweeps: 40,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.h_min > 0.0
            && self.h_min < self.h_max
            && self.k_asm <= self.k_max
            && self.tol >= 0.0
            && self.initial_cells >= 2
            && self.growth >= 1.0
            && self.max_cells >= self.initial_cells;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid adaptive configuration {self:?}")))
        }
    }

    /// Cells per axis on level `k`, rounded to even so the box centre stays a
    /// node.
    pub fn cells(&self, k: usize) -> usize {
        let n = 2 * (0.5 * self.initial_cells as f64 * self.growth.powi(k as i32)).round() as usize;
        n.clamp(self.initial_cells, self.max_cells)
    }
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub adapt: AdaptConfig,
    pub mode: SolverMode,
    pub scf: ScfConfig,
    pub augmented: AugmentedConfig,
    /// Energy used for the error column.
    pub reference_energy: Option<f64>,
    /// Writes `level<k>.mesh` and `level<k>.sol` (metric) here on every
    /// adapted level.
    pub metric_dir: Option<PathBuf>,
    /// Takes `level<k>.mesh` from here instead of moving, when present.
    pub remesh_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            mode: SolverMode::Augmented,
            scf: ScfConfig::default(),
            augmented: AugmentedConfig::default(),
            reference_energy: None,
            metric_dir: None,
            remesh_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SolverLog {
    Scf(Vec<ScfLogRow>),
    Augmented(Vec<AugmentedLogRow>),
}

#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub level: usize,
    pub elements: usize,
    pub nodes: usize,
    pub energy: f64,
    pub terms: EnergyTerms,
    pub eigenvalues: Vec<f64>,
    pub error: Option<f64>,
    pub solver: &'static str,
    /// Discretisation setup plus solve, seconds.
    pub wall: f64,
    pub converged: bool,
    /// Relative change of `∫ρ` caused by the transfer onto this level.
    pub transfer_charge_drift: f64,
    pub log: SolverLog,
}

/// Final fields of the last completed level.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub mesh: Arc<Mesh>,
    pub waves: WaveSet,
    pub density: Vec<f64>,
}

#[derive(Debug)]
pub struct DriverOutcome {
    pub levels: Vec<LevelRecord>,
    pub state: Option<LevelState>,
    /// Failure that ended the run early, if any.
    pub error: Option<Error>,
}

/// Alternates solving on the current mesh and building the next one.
pub fn adaptive_driver(system: &MolecularSystem, cfg: &DriverConfig) -> DriverOutcome {
    let mut out = DriverOutcome {
        levels: Vec::new(),
        state: None,
        error: None,
    };
    if let Err(e) = cfg
        .adapt
        .validate()
        .and_then(|_| cfg.scf.validate())
        .and_then(|_| cfg.augmented.inner.validate())
    {
        out.error = Some(e);
        return out;
    }
    if let Err(e) = run_levels(system, cfg, &mut out) {
        log::error!("adaptive run stopped after {} levels: {e}", out.levels.len());
        out.error = Some(e);
    }
    out
}

fn run_levels(system: &MolecularSystem, cfg: &DriverConfig, out: &mut DriverOutcome) -> Result<()> {
    let a = &cfg.adapt;
    let mut mesh = Arc::new(build_box_mesh(system.domain, a.cells(0))?);
    let mut init: Option<DMatrix<f64>> = None;
    let mut drift = 0.0;
    let last = a.k_max;
    for k in 0..=last {
        let use_augmented = cfg.mode == SolverMode::Augmented && k > a.k_asm && init.is_some();
        let t0 = Instant::now();
        let mut disc = Discretization::new(mesh.clone(), system)?;
        let (waves, density, terms, converged, log) = if use_augmented {
            let coarse = coarse_mesh_for(&mesh, cfg.augmented.coarse_cells)?;
            let r = augmented_solve(coarse, &mut disc, system, init.as_ref().unwrap(), &cfg.augmented)?;
            (r.waves, r.density, r.energy, r.converged, SolverLog::Augmented(r.log))
        } else {
            let r = scf_solve(&mut disc, system, init.as_ref(), &cfg.scf)?;
            (r.waves, r.density, r.energy, r.converged, SolverLog::Scf(r.log))
        };
        let wall = t0.elapsed().as_secs_f64();
        let energy = terms.total();
        log::info!(
            "level {k}: {} elements, E = {energy:.6}, {} in {wall:.3} s",
            mesh.num_tets(),
            if use_augmented { "augmented" } else { "scf" }
        );
        let previous = out.levels.last().map(|r| r.energy);
        out.levels.push(LevelRecord {
            level: k,
            elements: mesh.num_tets(),
            nodes: mesh.num_nodes(),
            energy,
            terms,
            eigenvalues: waves.eigenvalues.clone(),
            error: cfg.reference_energy.map(|r| (energy - r).abs()),
            solver: if use_augmented { "augmented" } else { "scf" },
            wall,
            converged,
            transfer_charge_drift: drift,
            log,
        });
        out.state = Some(LevelState {
            mesh: mesh.clone(),
            waves: waves.clone(),
            density: density.clone(),
        });
        if let Some(p) = previous {
            if ((energy - p) / energy).abs() < a.tol {
                log::info!("relative energy change below {} after level {k}", a.tol);
                break;
            }
        }
        if k == last {
            break;
        }
        let next = next_mesh(system, cfg, k, &mesh, &disc, &waves, &density)?;
        let (coeffs, d) = transfer(system, &disc, &waves, &density, &next, cfg.seed ^ k as u64)?;
        drift = d;
        init = Some(coeffs);
        mesh = next;
    }
    Ok(())
}

/// Adaptive function values at the nodes of `disc`'s mesh, or their
/// summed absolute Hessians for orbitals.
fn driving_hessian(
    system: &MolecularSystem,
    function: AdaptiveFunction,
    disc: &Discretization,
    waves: &WaveSet,
    density: &[f64],
) -> Vec<SymTensor> {
    let mesh = disc.mesh();
    match function {
        AdaptiveFunction::SqrtDensity => {
            let u: Vec<f64> = density.iter().map(|r| r.max(0.0).sqrt()).collect();
            recover_hessian(mesh, &u)
        }
        AdaptiveFunction::Density => recover_hessian(mesh, density),
        AdaptiveFunction::Orbitals => {
            let mut acc = vec![[0.0; 6]; mesh.num_nodes()];
            for k in 0..system.n_orbitals.min(waves.len()) {
                let h = recover_hessian(mesh, &waves.nodal(&disc.asm, k));
                for (a, t) in acc.iter_mut().zip(&h) {
                    let e = SymmetricEigen::new(sym_to_matrix(t));
                    let abs = e.eigenvectors
                        * Matrix3::from_diagonal(&e.eigenvalues.map(f64::abs))
                        * e.eigenvectors.transpose();
                    let s = matrix_to_sym(&abs);
                    for c in 0..6 {
                        a[c] += s[c];
                    }
                }
            }
            acc
        }
    }
}

fn next_mesh(
    system: &MolecularSystem,
    cfg: &DriverConfig,
    k: usize,
    mesh: &Arc<Mesh>,
    disc: &Discretization,
    waves: &WaveSet,
    density: &[f64],
) -> Result<Arc<Mesh>> {
    let a = &cfg.adapt;
    let n = a.cells(k + 1);
    if cfg.mode == SolverMode::Uniform {
        return Ok(Arc::new(build_box_mesh(system.domain, n)?));
    }
    if let Some(dir) = &cfg.remesh_dir {
        let path = dir.join(format!("level{}.mesh", k + 1));
        if path.exists() {
            log::info!("level {}: using external mesh {}", k + 1, path.display());
            return Ok(Arc::new(read_mesh(&path)?));
        }
    }
    let metric = metric_from_hessian(&driving_hessian(system, a.function, disc, waves, density), a);
    if let Some(dir) = &cfg.metric_dir {
        std::fs::create_dir_all(dir)?;
        write_mesh(mesh, dir.join(format!("level{k}.mesh")))?;
        metric.write_sol(dir.join(format!("level{k}.sol")))?;
    }
    let start = match mesh.resample_structured([n; 3]) {
        Ok(m) => m,
        Err(_) => build_box_mesh(system.domain, n)?,
    };
    Ok(Arc::new(move_mesh_with(
        &start,
        mesh,
        &metric,
        a.sweeps,
        cfg.seed ^ (k as u64) << 8,
    )?))
}

/// Interpolates orbitals onto `target`, re-orthonormalises them there and
/// reports the relative change of the total charge.
fn transfer(
    system: &MolecularSystem,
    disc: &Discretization,
    waves: &WaveSet,
    density: &[f64],
    target: &Arc<Mesh>,
    seed: u64,
) -> Result<(DMatrix<f64>, f64)> {
    let loc = Locator::new(disc.mesh());
    let locs = loc.locate_all(&target.nodes, seed);
    let next = Discretization::new(target.clone(), system)?;
    let mut coeffs = DMatrix::zeros(next.num_free(), waves.len());
    for k in 0..waves.len() {
        let v = interpolate_with(disc.mesh(), &locs, &waves.nodal(&disc.asm, k)).values;
        coeffs.set_column(k, &DVector::from_vec(next.asm.dofs.restrict(&v)));
    }
    let coeffs = b_orthonormalize(&coeffs, &next.mass)?;
    let before = disc.integral(density);
    let moved = interpolate_with(disc.mesh(), &locs, density).values;
    let drift = if before > 0.0 {
        (next.integral(&moved) - before) / before
    } else {
        0.0
    };
    if drift.abs() > 0.01 {
        log::warn!("density transfer changed the charge by {:.2}%", 100.0 * drift);
    }
    Ok((coeffs, drift))
}

/// Per-level table: level, elements, E, |E − E_ref|, solver, wall seconds.
pub fn write_level_csv(path: impl AsRef<Path>, rows: &[LevelRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "level,elements,energy,abs_error,solver,wall_s")?;
    for r in rows {
        let err = r.error.map(|e| format!("{e:.6}")).unwrap_or_default();
        writeln!(
            f,
            "{},{},{:.6},{},{},{:.3}",
            r.level, r.elements, r.energy, err, r.solver, r.wall
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::BoxDomain;

    fn cfg(eps: f64, h_min: f64, h_max: f64) -> AdaptConfig {
        AdaptConfig {
            epsilon: eps,
            h_min,
            h_max,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn zero_hessian_gives_lower_clamp() {
        let m = metric_from_hessian(&[[0.0; 6]], &cfg(0.1, 0.05, 5.0));
        let t = m.tensors[0];
        assert!((t[0] - 0.04).abs() < 1e-15 && (t[2] - 0.04).abs() < 1e-15 && (t[5] - 0.04).abs() < 1e-15);
        assert_eq!([t[1], t[3], t[4]], [0.0; 3]);
    }

    #[test]
    fn huge_curvature_pinned_to_upper_clamp() {
        let m = metric_from_hessian(&[[1e30, 0.0, 1e30, 0.0, 0.0, 1e30]], &cfg(0.1, 0.05, 5.0));
        assert!((m.tensors[0][0] - 400.0).abs() < 1e-9);
    }

    #[test]
    fn identity_hessian_at_cd_is_identity() {
        let m = metric_from_hessian(&[[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]], &cfg(C_D, 0.01, 1.0));
        let t = m.tensors[0];
        for (a, b) in t.iter().zip([1.0, 0.0, 1.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_schedule() {
        let a = AdaptConfig::default();
        let cells: Vec<usize> = (0..=6).map(|k| a.cells(k)).collect();
        assert_eq!(cells[0], 10);
        assert!(cells.windows(2).all(|w| w[1] > w[0]));
        assert!(cells[5] >= 30);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("uniform".parse::<SolverMode>().unwrap(), SolverMode::Uniform);
        assert!("fast".parse::<SolverMode>().is_err());
    }

    #[test]
    fn uniform_metric_is_fixed_point() {
        let m = build_box_mesh(BoxDomain::cube(1.0).unwrap(), 6).unwrap();
        let metric = MetricField {
            tensors: vec![[3.0, 0.0, 3.0, 0.0, 0.0, 3.0]; m.num_nodes()],
        };
        let moved = move_mesh(&m, &metric, 5).unwrap();
        for (a, b) in m.nodes.iter().zip(&moved.nodes) {
            assert!(crate::mesh::distance(a, b) < 1e-10);
        }
    }
}
