//! Augmented subspace solver: shifted linear solves on the fine mesh plus a
//! small Kohn-Sham eigenproblem on `S_H + span{Ψ̂}`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::eigensolve::{b_orthonormalize, dense_generalized};
use crate::fem::DofMap;
use crate::locate::Locator;
use crate::mesh::Mesh;
use crate::potentials::{nonlinear_block, total_energy, EnergyTerms, MolecularSystem};
use crate::scf::{density_from_waves, normalize_density, Discretization, ScfConfig, WaveSet};
use crate::sparse::{pcg, CgOptions, CgStats, CsrMatrix, Preconditioner};
use crate::{Error, Result};

/// Shift `8 M Σ Z²` bounding the nuclear attraction.
pub fn default_shift(system: &MolecularSystem) -> f64 {
    let m = system.atoms.len() as f64;
    8.0 * m * system.atoms.iter().map(|a| a.charge * a.charge).sum::<f64>()
}

const KEEP_COLUMN_WEIGHT: f64 = 0.05;

/// Greedy pivoted Cholesky: indices of the columns of an SPD-ish Gram matrix
/// that stay numerically independent of the earlier ones.
fn independent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let n = gram.ncols();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut kept = Vec::with_capacity(n);
    for j in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| gram[(i, j)]).collect();
        for (k, _) in kept.iter().enumerate() {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                for i in j..n {
                    col[i] -= l[(i, k)] * ljk;
                }
            }
        }
        let pivot = col[j];
        if pivot <= INDEPENDENCE_TOL * gram[(j, j)] || pivot <= 0.0 {
            continue;
        }
        let d = pivot.sqrt();
        let k = kept.len();
        for i in j..n {
            l[(i, k)] = col[i] / d;
        }
        kept.push(j);
    }
    kept
}

const INDEPENDENCE_TOL: f64 = 1e-8;

/// Sparse nodal interpolation from coarse free nodes to fine free nodes.
#[derive(Debug, Clone)]
pub struct Prolongation {
    pub n_fine: usize,
    pub n_coarse: usize,
    rows: Vec<[(u32, f64); 4]>,
    /// Coarse free-dof index of each retained column.
    pub kept: Vec<usize>,
    /// Fine nodes whose location had to be clamped into the coarse mesh.
    pub clamped: usize,
}

impl Prolongation {
    pub fn new(coarse: &Mesh, coarse_dofs: &DofMap, fine: &Mesh, fine_dofs: &DofMap, seed: u64) -> Self {
        let loc = Locator::new(coarse);
        let pts: Vec<_> = fine_dofs.free.iter().map(|&i| fine.nodes[i]).collect();
        let locs = loc.locate_all(&pts, seed);
        let mut clamped = 0;
        let mut rows: Vec<[(u32, f64); 4]> = locs
            .iter()
            .map(|l| {
                clamped += l.clamped as usize;
                let tet = &coarse.tets[l.tet];
                let bary = crate::locate::clean_bary(l.bary);
                let mut r = [(u32::MAX, 0.0); 4];
                for a in 0..4 {
                    if let Some(j) = coarse_dofs.index[tet[a]] {
                        r[a] = (j as u32, bary[a]);
                    }
                }
                r
            })
            .collect();
        // Coarse hats that see no fine node (or only their far tails) would make
        // the projected mass matrix singular, so those columns are dropped.
        let mut peak = vec![0.0f64; coarse_dofs.num_free()];
        for r in &rows {
            for &(j, w) in r {
                if j != u32::MAX {
                    peak[j as usize] = peak[j as usize].max(w);
                }
            }
        }
        let mut remap = vec![u32::MAX; peak.len()];
        let mut kept = Vec::new();
        for (j, &p) in peak.iter().enumerate() {
            if p >= KEEP_COLUMN_WEIGHT {
                remap[j] = kept.len() as u32;
                kept.push(j);
            }
        }
        let n_coarse = kept.len() as u32;
        for r in rows.iter_mut() {
            for e in r.iter_mut() {
                if e.0 != u32::MAX {
                    e.0 = remap[e.0 as usize];
                    if e.0 == u32::MAX {
                        e.1 = 0.0;
                    }
                }
            }
        }
        if (n_coarse as usize) < peak.len() {
            log::debug!(
                "dropped {} coarse columns without fine support",
                peak.len() - n_coarse as usize
            );
        }
        Self {
            n_fine: fine_dofs.num_free(),
            n_coarse: n_coarse as usize,
            rows,
            kept,
            clamped,
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn retain(&mut self, columns: &[usize]) {
        let mut remap = vec![u32::MAX; self.n_coarse];
        for (new, &old) in columns.iter().enumerate() {
            remap[old] = new as u32;
        }
        for r in self.rows.iter_mut() {
            for e in r.iter_mut() {
                if e.0 != u32::MAX {
                    e.0 = remap[e.0 as usize];
                    if e.0 == u32::MAX {
                        e.1 = 0.0;
                    }
                }
            }
        }
        self.kept = columns.iter().map(|&c| self.kept[c]).collect();
        self.n_coarse = columns.len();
    }

    fn entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[i]
            .iter()
            .filter(|e| e.0 != u32::MAX && e.1 != 0.0)
            .map(|e| (e.0 as usize, e.1))
    }

    /// `I u_H`
    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(u.nrows(), self.n_coarse);
        let mut out = DMatrix::zeros(self.n_fine, u.ncols());
        for i in 0..self.n_fine {
            for (j, w) in self.entries(i) {
                for k in 0..u.ncols() {
                    out[(i, k)] += w * u[(j, k)];
                }
            }
        }
        out
    }

    /// `Iᵀ y`
    pub fn apply_transpose(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.n_fine);
        let mut out = DMatrix::zeros(self.n_coarse, y.ncols());
        for i in 0..self.n_fine {
            for (j, w) in self.entries(i) {
                for k in 0..y.ncols() {
                    out[(j, k)] += w * y[(i, k)];
                }
            }
        }
        out
    }

    /// Dense `Iᵀ A I`.
    pub fn project(&self, a: &CsrMatrix) -> DMatrix<f64> {
        assert_eq!(a.n(), self.n_fine);
        let nc = self.n_coarse;
        let mut out = DMatrix::zeros(nc, nc);
        let mut ai: Vec<f64> = vec![0.0; nc];
        let mut seen = vec![false; nc];
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..self.n_fine {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                for (c, w) in self.entries(j) {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    ai[c] += v * w;
                }
            }
            for (r, wr) in self.entries(i) {
                for &c in &touched {
                    out[(r, c)] += wr * ai[c];
                }
            }
            for &c in &touched {
                ai[c] = 0.0;
                seen[c] = false;
            }
            touched.clear();
        }
        (&out + out.transpose()) * 0.5
    }
}

/// Fine-space `[I, Ψ̂]`-projected matrices for one outer iteration.
#[derive(Debug, Clone)]
pub struct AugmentedSpace {
    pub coarse: Arc<Mesh>,
    pub coarse_dofs: DofMap,
    pub interp: Prolongation,
    /// `Iᵀ A^L I` with `A^L = ½K + V_ext`.
    linear_h: DMatrix<f64>,
    /// `Iᵀ M I`.
    mass_h: DMatrix<f64>,
    psi_hat: DMatrix<f64>,
    linear_b: DMatrix<f64>,
    linear_beta: DMatrix<f64>,
    mass_c: DMatrix<f64>,
    mass_gamma: DMatrix<f64>,
}

impl AugmentedSpace {
    pub fn new(coarse: Arc<Mesh>, disc: &Discretization, seed: u64) -> Result<Self> {
        let coarse_dofs = DofMap::new(&coarse);
        if coarse_dofs.num_free() == 0 {
            return Err(Error::InvalidInput("coarse mesh has no interior nodes".into()));
        }
        let interp = Prolongation::new(&coarse, &coarse_dofs, disc.mesh(), &disc.asm.dofs, seed);
        if interp.clamped > 0 {
            log::warn!("{} fine nodes clamped into the coarse mesh", interp.clamped);
        }
        let mut interp = interp;
        let mut mass_h = interp.project(&disc.mass);
        let independent = independent_columns(&mass_h);
        if independent.len() < mass_h.ncols() {
            log::debug!(
                "dropped {} linearly dependent coarse columns",
                mass_h.ncols() - independent.len()
            );
            interp.retain(&independent);
            mass_h = mass_h.select_rows(&independent).select_columns(&independent);
        }
        let linear = disc.hamiltonian(None)?;
        Ok(Self {
            linear_h: interp.project(&linear),
            mass_h,
            coarse,
            coarse_dofs,
            interp,
            psi_hat: DMatrix::zeros(disc.num_free(), 0),
            linear_b: DMatrix::zeros(0, 0),
            linear_beta: DMatrix::zeros(0, 0),
            mass_c: DMatrix::zeros(0, 0),
            mass_gamma: DMatrix::zeros(0, 0),
        })
    }

    pub fn n_coarse(&self) -> usize {
        self.interp.n_coarse
    }

    pub fn dim(&self) -> usize {
        self.n_coarse() + self.psi_hat.ncols()
    }

    pub fn psi_hat(&self) -> &DMatrix<f64> {
        &self.psi_hat
    }

    /// Fixes the fine-space block and refreshes the blocks that depend on it.
    pub fn set_psi_hat(&mut self, disc: &Discretization, psi_hat: DMatrix<f64>) -> Result<()> {
        if psi_hat.nrows() != disc.num_free() {
            return Err(Error::Dimension(format!(
                "Ψ̂ has {} rows, expected {}",
                psi_hat.nrows(),
                disc.num_free()
            )));
        }
        let linear = disc.hamiltonian(None)?;
        let a_psi = linear.mul_dense(&psi_hat);
        let m_psi = disc.mass.mul_dense(&psi_hat);
        self.linear_b = self.interp.apply_transpose(&a_psi);
        let lb = psi_hat.transpose() * a_psi;
        self.linear_beta = (&lb + lb.transpose()) * 0.5;
        self.mass_c = self.interp.apply_transpose(&m_psi);
        let mg = psi_hat.transpose() * m_psi;
        self.mass_gamma = (&mg + mg.transpose()) * 0.5;
        self.psi_hat = psi_hat;
        Ok(())
    }

    fn assemble(h: &DMatrix<f64>, b: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let nh = h.nrows();
        let n = beta.nrows();
        let mut f = DMatrix::zeros(nh + n, nh + n);
        f.view_mut((0, 0), (nh, nh)).copy_from(h);
        f.view_mut((0, nh), (nh, n)).copy_from(b);
        f.view_mut((nh, 0), (n, nh)).copy_from(&b.transpose());
        f.view_mut((nh, nh), (n, n)).copy_from(beta);
        f
    }

    /// Projected mass matrix `F_B`.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        Self::assemble(&self.mass_h, &self.mass_c, &self.mass_gamma)
    }

    /// Projected `A^L + nonlinear`.
    pub fn stiffness_matrix(&self, nonlinear: Option<&CsrMatrix>) -> DMatrix<f64> {
        let mut f = Self::assemble(&self.linear_h, &self.linear_b, &self.linear_beta);
        if let Some(nl) = nonlinear {
            f += self.project_general(nl);
        }
        f
    }

    /// `[I, Ψ̂]ᵀ A [I, Ψ̂]` for any fine free-node matrix.
    pub fn project_general(&self, a: &CsrMatrix) -> DMatrix<f64> {
        let a_psi = a.mul_dense(&self.psi_hat);
        let b = self.interp.apply_transpose(&a_psi);
        let beta = self.psi_hat.transpose() * a_psi;
        Self::assemble(&self.interp.project(a), &b, &((&beta + beta.transpose()) * 0.5))
    }

    /// Fine coefficients `I u_H + Ψ̂ α` of augmented vectors.
    pub fn lift(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let nh = self.n_coarse();
        let n = self.psi_hat.ncols();
        let mut out = self.interp.apply(&u.rows(0, nh).into_owned());
        out += &self.psi_hat * u.rows(nh, n);
        out
    }
}

/// `(F_A, F_B)` for an arbitrary fine operator `a`.
pub fn build_augmented_matrices(
    aspace: &AugmentedSpace,
    a: &CsrMatrix,
    mass: &CsrMatrix,
) -> (DMatrix<f64>, DMatrix<f64>) {
    (aspace.project_general(a), aspace.project_general(mass))
}

/// Solves `(H + μM) ψ̂ᵢ = (λᵢ + μ) M ψᵢ` column by column, starting from `ψᵢ`.
pub fn solve_shifted_bvps(
    shifted: &CsrMatrix,
    eigenvalues: &[f64],
    psi: &DMatrix<f64>,
    mass: &CsrMatrix,
    mu: f64,
    cg: &CgOptions,
) -> Result<(DMatrix<f64>, Vec<CgStats>)> {
    if psi.ncols() != eigenvalues.len() {
        return Err(Error::Dimension(format!(
            "{} orbitals, {} eigenvalues",
            psi.ncols(),
            eigenvalues.len()
        )));
    }
    let cols: Vec<Result<(Vec<f64>, CgStats)>> = (0..psi.ncols())
        .into_par_iter()
        .map(|k| {
            let x0 = psi.column(k);
            let rhs: Vec<f64> = mass
                .mul_vec(x0.as_slice())
                .iter()
                .map(|v| (eigenvalues[k] + mu) * v)
                .collect();
            let mut x = x0.iter().copied().collect::<Vec<_>>();
            let st = pcg(shifted, &rhs, &mut x, cg)?;
            Ok((x, st))
        })
        .collect();
    let mut out = DMatrix::zeros(psi.nrows(), psi.ncols());
    let mut stats = Vec::with_capacity(psi.ncols());
    for (k, c) in cols.into_iter().enumerate() {
        let (x, st) = c?;
        out.set_column(k, &nalgebra::DVector::from_vec(x));
        stats.push(st);
    }
    Ok((out, stats))
}

/// How the shift of the linear solves is chosen for one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftRule {
    /// [`default_shift`], `8 M ΣZ²`.
    Nuclear,
    Fixed(f64),
    /// `max(−λ₁, 0) + margin`, with `λ₁` the lowest Rayleigh quotient of the
    /// starting orbitals. The margin doubles if a linear solve meets an
    /// indefinite operator.
    AboveLowest(f64),
}

impl Default for ShiftRule {
    fn default() -> Self {
        ShiftRule::AboveLowest(1.0)
    }
}

impl ShiftRule {
    pub fn resolve(&self, system: &MolecularSystem, lowest: f64) -> f64 {
        match *self {
            ShiftRule::Nuclear => default_shift(system),
            ShiftRule::Fixed(mu) => mu,
            ShiftRule::AboveLowest(margin) => (-lowest).max(0.0) + margin,
        }
    }
}

impl std::str::FromStr for ShiftRule {
    type Err = Error;

    /// `nuclear`, `above-lowest[:margin]` or a number.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidInput(format!(
                "invalid shift '{s}' (nuclear, above-lowest[:margin] or a number)"
            ))
        };
        match s.split_once(':') {
            _ if s == "nuclear" => Ok(ShiftRule::Nuclear),
            _ if s == "above-lowest" => Ok(ShiftRule::default()),
            Some(("above-lowest", m)) => match m.parse::<f64>() {
                Ok(v) if v > 0.0 => Ok(ShiftRule::AboveLowest(v)),
                _ => Err(bad()),
            },
            _ => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(ShiftRule::Fixed(v)),
                _ => Err(bad()),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedConfig {
    pub max_outer: usize,
    /// Outer stop on `‖ρ^{(ℓ+1)} − ρ^{(ℓ)}‖₀`.
    pub tol: f64,
    /// Inner nonlinear iteration; its `tol` applies to the inner density
    /// residual.
    pub inner: ScfConfig,
    /// Each outer step relaxes the inner tolerance to this fraction of the
    /// previous outer density change; zero keeps `inner.tol` throughout.
    pub inner_forcing: f64,
    pub shift: ShiftRule,
    /// Cells per axis of the coarse mesh.
    pub coarse_cells: usize,
    pub cg: CgOptions,
    pub seed: u64,
}

impl Default for AugmentedConfig {
    fn default() -> Self {
        Self {
            max_outer: 30,
            tol: 2e-4,
            inner: ScfConfig {
                tol: 5e-5,
                ..ScfConfig::default()
            },
            inner_forcing: 0.1,
            shift: ShiftRule::default(),
            coarse_cells: 8,
            cg: CgOptions {
                tol: 1e-8,
                max_iter: 10_000,
                precond: Preconditioner::Jacobi,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLogRow {
    pub outer: usize,
    pub energy: f64,
    pub density_change: f64,
    /// Largest eigen-residual of the input orbitals under their own potential.
    pub max_residual: f64,
    pub cg_iterations: usize,
    pub inner_iterations: usize,
    pub wall_ms: f64,
}

pub fn write_augmented_log(path: impl AsRef<Path>, rows: &[AugmentedLogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "outer,energy,density_change,max_residual,cg_iterations,inner_iterations,wall_ms"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6e},{:.6e},{},{},{:.3}",
            r.outer, r.energy, r.density_change, r.max_residual, r.cg_iterations, r.inner_iterations, r.wall_ms
        )?;
    }
    Ok(())
}

/// Result of the inner nonlinear solve in the augmented space.
#[derive(Debug, Clone)]
pub struct SmallKsResult {
    pub eigenvalues: Vec<f64>,
    /// Lifted fine free-node orbitals.
    pub psi: DMatrix<f64>,
    pub density: Vec<f64>,
    pub energy: EnergyTerms,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Inner self-consistent iteration on the augmented space starting from the
/// density `rho0`.
pub fn solve_small_ks(
    aspace: &AugmentedSpace,
    disc: &mut Discretization,
    system: &MolecularSystem,
    rho0: &[f64],
    cfg: &ScfConfig,
) -> Result<SmallKsResult> {
    let n = system.n_orbitals;
    let charge = system.electrons();
    let fb = aspace.mass_matrix();
    let mut mixer = cfg.mixer(disc)?;
    let mut rho_in = rho0.to_vec();
    let mut last: Option<SmallKsResult> = None;
    for it in 1..=cfg.max_iter {
        let (fa, v_har) = if cfg.independent_electrons {
            (aspace.stiffness_matrix(None), vec![0.0; rho_in.len()])
        } else {
            let v_har = disc.hartree.solve(&disc.asm, &rho_in)?;
            let nl = nonlinear_block(&disc.asm, &v_har, &rho_in)?;
            (aspace.stiffness_matrix(Some(&nl)), v_har)
        };
        let (vals, u) = dense_generalized(&fa, &fb)?;
        let eig: Vec<f64> = vals.iter().take(n).copied().collect();
        let psi = aspace.lift(&u.columns(0, n).into_owned());
        let mut rho_out = density_from_waves(&disc.asm, &psi, system.occupation);
        normalize_density(disc, &mut rho_out, charge);
        let diff: Vec<f64> = rho_out.iter().zip(&rho_in).map(|(a, b)| a - b).collect();
        let residual = disc.l2_norm(&diff);
        let converged = cfg.independent_electrons || residual < cfg.tol;
        // Only the returned state needs its energy.
        let energy = if cfg.independent_electrons {
            EnergyTerms {
                band: system.occupation * eig.iter().sum::<f64>(),
                nuclear: disc.nuclear_repulsion,
                ..Default::default()
            }
        } else if converged || it == cfg.max_iter {
            total_energy(
                &disc.asm,
                system.occupation,
                &eig,
                &rho_in,
                &v_har,
                disc.nuclear_repulsion,
            )
        } else {
            EnergyTerms::default()
        };
        let state = SmallKsResult {
            eigenvalues: eig,
            psi,
            density: rho_out,
            energy,
            iterations: it,
            converged,
            residual,
        };
        if converged {
            return Ok(state);
        }
        let (mut next, _) = mixer.mix(&rho_in, &state.density);
        normalize_density(disc, &mut next, charge);
        rho_in = next;
        last = Some(state);
    }
    let s = last.expect("at least one iteration");
    log::debug!("inner augmented iteration stopped at residual {:.3e}", s.residual);
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct AugmentedResult {
    pub waves: WaveSet,
    pub density: Vec<f64>,
    pub energy: EnergyTerms,
    pub log: Vec<AugmentedLogRow>,
    pub converged: bool,
    /// Shift used by the linear solves.
    pub shift: f64,
}

impl AugmentedResult {
    pub fn total_energy(&self) -> f64 {
        self.energy.total()
    }
}

/// Free-node orbitals plus the nonlinear block and Hartree potential of their
/// density, with eigen-residuals and Rayleigh quotients under it.
struct Frozen {
    hamiltonian: CsrMatrix,
    rayleigh: Vec<f64>,
    max_residual: f64,
}

fn freeze(disc: &mut Discretization, psi: &DMatrix<f64>, rho: &[f64], linear: bool) -> Result<Frozen> {
    let h = if linear {
        disc.hamiltonian(None)?
    } else {
        let v_har = disc.hartree.solve(&disc.asm, rho)?;
        let nl = nonlinear_block(&disc.asm, &v_har, rho)?;
        disc.hamiltonian(Some(&nl))?
    };
    let hp = h.mul_dense(psi);
    let mp = disc.mass.mul_dense(psi);
    let mut rayleigh = Vec::with_capacity(psi.ncols());
    let mut max_residual = 0.0f64;
    for k in 0..psi.ncols() {
        let q = psi.column(k).dot(&hp.column(k)) / psi.column(k).dot(&mp.column(k));
        let r = hp.column(k) - mp.column(k) * q;
        max_residual = max_residual.max(r.norm() / mp.column(k).norm());
        rayleigh.push(q);
    }
    Ok(Frozen {
        hamiltonian: h,
        rayleigh,
        max_residual,
    })
}

/// Outer augmented subspace iteration on `disc`'s mesh with the given
/// coarse mesh, starting from free-node orbitals `init`.
pub fn augmented_solve(
    coarse: Arc<Mesh>,
    disc: &mut Discretization,
    system: &MolecularSystem,
    init: &DMatrix<f64>,
    cfg: &AugmentedConfig,
) -> Result<AugmentedResult> {
    cfg.inner.validate()?;
    if !(cfg.inner_forcing >= 0.0 && cfg.inner_forcing.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "inner forcing {} must be finite and nonnegative",
            cfg.inner_forcing
        )));
    }
    let n = system.n_orbitals;
    if init.nrows() != disc.num_free() || init.ncols() < n {
        return Err(Error::Dimension(format!(
            "initial orbitals are {}x{}, expected {}x{n}",
            init.nrows(),
            init.ncols(),
            disc.num_free()
        )));
    }
    let linear = cfg.inner.independent_electrons;
    let mut aspace = AugmentedSpace::new(coarse, disc, cfg.seed)?;
    let mut psi = b_orthonormalize(&init.columns(0, n).into_owned(), &disc.mass)?;
    let mut rho = density_from_waves(&disc.asm, &psi, system.occupation);
    normalize_density(disc, &mut rho, system.electrons());

    let mut log = Vec::new();
    let mut best: Option<AugmentedResult> = None;
    let mut converged = false;
    let mut frozen = freeze(disc, &psi, &rho, linear)?;
    let mut eigenvalues = frozen.rayleigh.clone();
    let lowest = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let mut inner_cfg = cfg.inner.clone();
    let mut last_change = f64::INFINITY;
    let mut rule = cfg.shift;
    let mut mu = rule.resolve(system, lowest);
    log::info!("shift {mu:.4} (nuclear formula {:.1})", default_shift(system));
    for outer in 1..=cfg.max_outer {
        let t0 = Instant::now();
        let (psi_hat, stats) = loop {
            let mut shifted = frozen.hamiltonian.clone();
            shifted.add_scaled(mu, &disc.mass)?;
            match solve_shifted_bvps(&shifted, &eigenvalues, &psi, &disc.mass, mu, &cfg.cg) {
                Err(Error::NotPositiveDefinite(msg)) => match rule {
                    ShiftRule::AboveLowest(margin) => {
                        rule = ShiftRule::AboveLowest(2.0 * margin);
                        mu = rule.resolve(system, lowest);
                        log::warn!("shifted operator indefinite ({msg}), raising shift to {mu:.4}");
                    }
                    _ => return Err(Error::NotPositiveDefinite(msg)),
                },
                other => break other?,
            }
        };
        let psi_hat = orthonormalize_with_noise(psi_hat, &disc.mass, cfg.seed + outer as u64)?;
        aspace.set_psi_hat(disc, psi_hat)?;
        inner_cfg.tol = cfg.inner.tol.max(cfg.inner_forcing * last_change);
        let small = solve_small_ks(&aspace, disc, system, &rho, &inner_cfg)?;
        let diff: Vec<f64> = small.density.iter().zip(&rho).map(|(a, b)| a - b).collect();
        let change = disc.l2_norm(&diff);
        let input_residual = frozen.max_residual;
        last_change = change;

        psi = small.psi;
        rho = small.density;
        eigenvalues = small.eigenvalues.clone();
        frozen = freeze(disc, &psi, &rho, linear)?;
        log.push(AugmentedLogRow {
            outer,
            energy: small.energy.total(),
            density_change: change,
            max_residual: input_residual,
            cg_iterations: stats.iter().map(|s| s.iterations).sum(),
            inner_iterations: small.iterations,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!(
            "augmented {outer}: E = {:.8}, |drho| = {change:.3e}, inner {} its, cg {:?}",
            small.energy.total(),
            small.iterations,
            stats.iter().map(|s| s.iterations).collect::<Vec<_>>()
        );
        let state = AugmentedResult {
            waves: WaveSet {
                mesh: disc.mesh().clone(),
                coeffs: psi.clone(),
                eigenvalues: eigenvalues.clone(),
            },
            density: rho.clone(),
            energy: small.energy,
            log: Vec::new(),
            converged: false,
            shift: mu,
        };
        if change < cfg.tol || (linear && change < cfg.tol.min(1e-10)) {
            converged = true;
            best = Some(state);
            break;
        }
        best = Some(state);
    }
    let mut out = best.expect("at least one outer iteration");
    out.log = log;
    out.converged = converged;
    if !converged {
        log::warn!("augmented iteration did not reach tolerance {:e}", cfg.tol);
    }
    Ok(out)
}

fn orthonormalize_with_noise(mut u: DMatrix<f64>, mass: &CsrMatrix, seed: u64) -> Result<DMatrix<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..u.ncols() + 1 {
        match b_orthonormalize(&u, mass) {
            Ok(q) => return Ok(q),
            Err(Error::RankDeficient { column }) => {
                log::warn!("shifted solution {column} is dependent, perturbing");
                let scale = u.column(column).amax().max(1e-300) * 1e-8;
                for i in 0..u.nrows() {
                    u[(i, column)] += scale * (rng.random::<f64>() - 0.5);
                }
            }
            Err(e) => return Err(e),
        }
    }
    b_orthonormalize(&u, mass)
}

/// Coarse mesh for the augmented space: the structured resample of `fine`.
pub fn coarse_mesh_for(fine: &Mesh, cells: usize) -> Result<Arc<Mesh>> {
    let coarse = fine
        .resample_structured([cells; 3])
        .or_else(|_| crate::mesh::build_box_mesh(fine.domain, cells))?;
    Ok(Arc::new(coarse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::BoxDomain;
    use crate::potentials::Atom;

    #[test]
    fn shift_formula() {
        let d = BoxDomain::cube(10.0).unwrap();
        let he = MolecularSystem::neutral(vec![Atom::new("He", [0.0; 3], 2.0)], d).unwrap();
        assert_eq!(default_shift(&he), 32.0);
        let hli = MolecularSystem::neutral(
            vec![
                Atom::new("Li", [-1.0075, 0.0, 0.0], 3.0),
                Atom::new("H", [2.0075, 0.0, 0.0], 1.0),
            ],
            d,
        )
        .unwrap();
        assert_eq!(default_shift(&hli), 160.0);
    }
}
