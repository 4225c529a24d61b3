//! Direct self-consistent field iteration with Anderson mixing.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eigensolve::{b_orthonormalize, solve_lowest, EigenOptions};
use crate::fem::Assembler;
use crate::mesh::Mesh;
use crate::potentials::{
    external_block, nonlinear_block, nuclear_repulsion, total_energy, EnergyTerms, HartreeSolver, MolecularSystem,
};
use crate::sparse::{dot, CsrMatrix};
use crate::{Error, Result};

/// Everything on one mesh that does not depend on the density.
#[derive(Debug)]
pub struct Discretization {
    pub asm: Assembler,
    /// Free-node stiffness.
    pub stiffness: CsrMatrix,
    /// Free-node mass.
    pub mass: CsrMatrix,
    /// All-node mass, used for densities.
    pub mass_full: CsrMatrix,
    /// Free-node `∫ V_ext φᵢφⱼ`.
    pub external: CsrMatrix,
    pub hartree: HartreeSolver,
    pub nuclear_repulsion: f64,
}

impl Discretization {
    pub fn new(mesh: Arc<Mesh>, system: &MolecularSystem) -> Result<Self> {
        let asm = Assembler::new(mesh)?;
        let stiffness = asm.stiffness();
        let mass = asm.mass();
        let mass_full = asm.mass_full();
        let external = external_block(&asm, system)?;
        let hartree = HartreeSolver::new(&asm);
        Ok(Self {
            stiffness,
            mass,
            mass_full,
            external,
            hartree,
            nuclear_repulsion: nuclear_repulsion(system)?,
            asm,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.asm.mesh
    }

    pub fn num_free(&self) -> usize {
        self.asm.num_free()
    }

    /// `½K + V_ext (+ nonlinear)` over free nodes.
    pub fn hamiltonian(&self, nonlinear: Option<&CsrMatrix>) -> Result<CsrMatrix> {
        let mut h = self.stiffness.scaled(0.5);
        h.add_scaled(1.0, &self.external)?;
        if let Some(nl) = nonlinear {
            h.add_scaled(1.0, nl)?;
        }
        Ok(h)
    }

    /// `∫ f` for a nodal field `f`.
    pub fn integral(&self, f: &[f64]) -> f64 {
        self.mass_full.mul_vec(f).iter().sum()
    }

    /// `L²` norm of a nodal field.
    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        self.mass_full.bilinear(f, f).max(0.0).sqrt()
    }
}

/// B-orthonormal orbitals over the free nodes of one mesh.
#[derive(Debug, Clone)]
pub struct WaveSet {
    pub mesh: Arc<Mesh>,
    /// One column per orbital, free-node coefficients.
    pub coeffs: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl WaveSet {
    pub fn len(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.ncols() == 0
    }

    /// Orbital `k` over all nodes (zero on the boundary).
    pub fn nodal(&self, asm: &Assembler, k: usize) -> Vec<f64> {
        asm.dofs.lift(self.coeffs.column(k).as_slice())
    }
}

/// `ρ = f_occ Σ ψ²` at the nodes.
pub fn density_from_waves(asm: &Assembler, coeffs: &DMatrix<f64>, occupation: f64) -> Vec<f64> {
    let mut rho = vec![0.0; asm.dofs.num_nodes()];
    for k in 0..coeffs.ncols() {
        for (&node, &c) in asm.dofs.free.iter().zip(coeffs.column(k).iter()) {
            rho[node] += occupation * c * c;
        }
    }
    rho
}

/// Clamps negatives and rescales to the given charge.
pub fn normalize_density(disc: &Discretization, rho: &mut [f64], charge: f64) {
    for r in rho.iter_mut() {
        *r = r.max(0.0);
    }
    let q = disc.integral(rho);
    if q > 0.0 {
        let s = charge / q;
        rho.iter_mut().for_each(|r| *r *= s);
    }
}

#[derive(Debug, Clone)]
pub enum InnerProduct {
    /// Mass-matrix weighted `L²`.
    Mass(CsrMatrix),
    /// Plain coefficient dot product.
    Plain,
}

impl InnerProduct {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            InnerProduct::Mass(m) => m.bilinear(a, b),
            InnerProduct::Plain => dot(a, b),
        }
    }
}

/// Outcome of one mixing step.
#[derive(Debug, Clone, PartialEq)]
pub struct MixStep {
    /// Coefficients of the stored pairs, oldest first, the current one last.
    pub alphas: Vec<f64>,
    pub fallback: bool,
}

/// Anderson mixing over a sliding window of `depth` iterates.
#[derive(Debug, Clone)]
pub struct AndersonMixer {
    pub depth: usize,
    pub beta: f64,
    inner: InnerProduct,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl AndersonMixer {
    pub fn new(depth: usize, beta: f64, inner: InnerProduct) -> Result<Self> {
        if depth == 0 || !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "mixing needs depth ≥ 1 and β in (0,1], got {depth}, {beta}"
            )));
        }
        Ok(Self {
            depth,
            beta,
            inner,
            history: VecDeque::new(),
        })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Next input density from the current input/output pair.
    pub fn mix(&mut self, rho_in: &[f64], rho_out: &[f64]) -> (Vec<f64>, MixStep) {
        let beta = self.beta;
        let f_m: Vec<f64> = rho_out.iter().zip(rho_in).map(|(o, i)| o - i).collect();
        let simple = |s: &mut Self| {
            let next = rho_in
                .iter()
                .zip(rho_out)
                .map(|(i, o)| beta * o + (1.0 - beta) * i)
                .collect();
            s.push(rho_in, &f_m);
            next
        };
        let k = self.history.len();
        if k == 0 {
            let next = simple(self);
            return (
                next,
                MixStep {
                    alphas: vec![1.0],
                    fallback: false,
                },
            );
        }

        let diffs: Vec<Vec<f64>> = self
            .history
            .iter()
            .map(|(_, f_j)| f_m.iter().zip(f_j).map(|(a, b)| a - b).collect())
            .collect();
        let mut g = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for j in 0..k {
            for l in j..k {
                let v = self.inner.eval(&diffs[j], &diffs[l]);
                g[(j, l)] = v;
                g[(l, j)] = v;
            }
            rhs[j] = self.inner.eval(&diffs[j], &f_m);
        }
        let scale = (0..k).map(|j| g[(j, j)]).fold(0.0f64, f64::max);
        let solved = if scale > 0.0 {
            g.clone().cholesky().and_then(|c| {
                let l = c.l();
                let dmin = l.diagonal().iter().fold(f64::INFINITY, |m, &x| m.min(x));
                (dmin * dmin > 1e-12 * scale).then(|| c.solve(&rhs))
            })
        } else {
            None
        };
        let Some(alpha) = solved.filter(|a| a.iter().all(|x| x.is_finite())) else {
            log::debug!("singular Anderson system, falling back to simple mixing");
            let next = simple(self);
            return (
                next,
                MixStep {
                    alphas: vec![1.0],
                    fallback: true,
                },
            );
        };

        let n = rho_in.len();
        let mut tin = rho_in.to_vec();
        let mut tout = rho_out.to_vec();
        for (j, (r_j, f_j)) in self.history.iter().enumerate() {
            let a = alpha[j];
            for i in 0..n {
                let out_j = r_j[i] + f_j[i];
                tin[i] += a * (r_j[i] - rho_in[i]);
                tout[i] += a * (out_j - rho_out[i]);
            }
        }
        let next = tin
            .iter()
            .zip(&tout)
            .map(|(i, o)| beta * o + (1.0 - beta) * i)
            .collect();
        let mut alphas: Vec<f64> = alpha.iter().copied().collect();
        alphas.push(1.0 - alpha.sum());
        self.push(rho_in, &f_m);
        (
            next,
            MixStep {
                alphas,
                fallback: false,
            },
        )
    }

    fn push(&mut self, rho_in: &[f64], f: &[f64]) {
        if self.depth == 1 {
            return;
        }
        self.history.push_back((rho_in.to_vec(), f.to_vec()));
        while self.history.len() > self.depth - 1 {
            self.history.pop_front();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScfConfig {
    pub max_iter: usize,
    /// Stop when `‖ρ_out − ρ_in‖₀` falls below this.
    pub tol: f64,
    pub depth: usize,
    pub beta: f64,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
    /// Mix with plain vector dot products instead of the mass inner product.
    pub plain_mixing: bool,
    /// Drop Hartree and exchange-correlation terms.
    pub independent_electrons: bool,
    pub seed: u64,
}

impl Default for ScfConfig {
    fn default() -> Self {
        Self {
            max_iter: 60,
            tol: 2e-4,
            depth: 5,
            beta: 0.7,
            eig_tol: 1e-6,
            eig_max_iter: 1000,
            plain_mixing: false,
            independent_electrons: false,
            seed: 0,
        }
    }
}

impl ScfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0
            || !(self.tol > 0.0)
            || self.depth == 0
            || !(self.beta > 0.0 && self.beta <= 1.0)
            || !(self.eig_tol > 0.0)
        {
            return Err(Error::InvalidInput(format!("invalid SCF configuration {self:?}")));
        }
        Ok(())
    }

    pub fn mixer(&self, disc: &Discretization) -> Result<AndersonMixer> {
        let inner = if self.plain_mixing {
            InnerProduct::Plain
        } else {
            InnerProduct::Mass(disc.mass_full.clone())
        };
        AndersonMixer::new(self.depth, self.beta, inner)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScfLogRow {
    pub iter: usize,
    pub energy: f64,
    pub residual: f64,
    pub eigenvalues: Vec<f64>,
    pub wall_ms: f64,
}

pub fn write_scf_log(path: impl AsRef<Path>, rows: &[ScfLogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = rows.first().map_or(0, |r| r.eigenvalues.len());
    write!(f, "iter,energy,density_residual")?;
    for k in 1..=n {
        write!(f, ",lambda_{k}")?;
    }
    writeln!(f, ",wall_ms")?;
    for r in rows {
        write!(f, "{},{:.6},{:.6e}", r.iter, r.energy, r.residual)?;
        for l in &r.eigenvalues {
            write!(f, ",{l:.6}")?;
        }
        writeln!(f, ",{:.3}", r.wall_ms)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScfResult {
    pub waves: WaveSet,
    pub density: Vec<f64>,
    pub energy: EnergyTerms,
    pub log: Vec<ScfLogRow>,
    pub converged: bool,
    pub eigen_iterations: usize,
}

impl ScfResult {
    pub fn total_energy(&self) -> f64 {
        self.energy.total()
    }
}

/// Atom-centred Gaussians (`s`, then `p`, then wider `s`), followed by
/// random vectors, as free-node columns. Not orthonormalized.
pub fn gaussian_guess(asm: &Assembler, system: &MolecularSystem, count: usize, seed: u64) -> DMatrix<f64> {
    let mut atoms: Vec<_> = system.atoms.iter().collect();
    atoms.sort_by(|a, b| b.charge.total_cmp(&a.charge));
    let nodes = &asm.mesh.nodes;
    let free = &asm.dofs.free;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut shapes: Vec<(usize, usize, f64)> = Vec::new();
    for a in 0..atoms.len() {
        shapes.push((a, 0, 1.0));
    }
    for d in 1..=3 {
        for a in 0..atoms.len() {
            shapes.push((a, d, 1.0));
        }
    }
    for a in 0..atoms.len() {
        shapes.push((a, 0, 2.0));
    }
    for &(a, kind, width) in shapes.iter().take(count) {
        let r0 = atoms[a].position;
        cols.push(
            free.iter()
                .map(|&i| {
                    let p = nodes[i];
                    let d = [p[0] - r0[0], p[1] - r0[1], p[2] - r0[2]];
                    let g = (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (width * width)).exp();
                    if kind == 0 {
                        g
                    } else {
                        d[kind - 1] * g
                    }
                })
                .collect(),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while cols.len() < count {
        cols.push((0..free.len()).map(|_| rng.random::<f64>() - 0.5).collect());
    }
    DMatrix::from_fn(free.len(), count, |i, j| cols[j][i])
}

/// B-orthonormal initial orbitals; dependent Gaussian columns are replaced
/// by random ones.
pub fn initial_waves(disc: &Discretization, system: &MolecularSystem, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut u = gaussian_guess(&disc.asm, system, count, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    loop {
        match b_orthonormalize(&u, &disc.mass) {
            Ok(q) => return Ok(q),
            Err(Error::RankDeficient { column }) => {
                log::debug!("initial guess column {column} is dependent, replacing with noise");
                for i in 0..u.nrows() {
                    u[(i, column)] = rng.random::<f64>() - 0.5;
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Direct SCF on one mesh. `init` holds free-node starting orbitals.
pub fn scf_solve(
    disc: &mut Discretization,
    system: &MolecularSystem,
    init: Option<&DMatrix<f64>>,
    cfg: &ScfConfig,
) -> Result<ScfResult> {
    cfg.validate()?;
    let n = system.n_orbitals;
    if n >= disc.num_free() {
        return Err(Error::InvalidInput(format!(
            "{n} orbitals on a mesh with {} free nodes",
            disc.num_free()
        )));
    }
    let charge = system.electrons();
    let mut x = match init {
        Some(u) if u.ncols() >= n && u.nrows() == disc.num_free() => b_orthonormalize(u, &disc.mass)?,
        Some(u) if u.nrows() != disc.num_free() => {
            return Err(Error::Dimension(format!(
                "initial orbitals have {} rows, expected {}",
                u.nrows(),
                disc.num_free()
            )))
        }
        _ => initial_waves(disc, system, n, cfg.seed)?,
    };
    let mut rho_in = density_from_waves(&disc.asm, &x.columns(0, n).into_owned(), system.occupation);
    normalize_density(disc, &mut rho_in, charge);

    let mut mixer = cfg.mixer(disc)?;
    let eig_opts = EigenOptions {
        tol: cfg.eig_tol,
        max_iter: cfg.eig_max_iter,
        seed: cfg.seed,
        guard: None,
    };
    let mut log = Vec::new();
    let mut eigen_iterations = 0;
    let mut best: Option<ScfResult> = None;
    for it in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let (h, v_har) = if cfg.independent_electrons {
            (disc.hamiltonian(None)?, vec![0.0; rho_in.len()])
        } else {
            let v_har = disc.hartree.solve(&disc.asm, &rho_in)?;
            let nl = nonlinear_block(&disc.asm, &v_har, &rho_in)?;
            (disc.hamiltonian(Some(&nl))?, v_har)
        };
        let eig = solve_lowest(&h, &disc.mass, n, &eig_opts, Some(&x))?;
        eigen_iterations += eig.iterations;
        x = eig.vectors.clone();
        let mut rho_out = density_from_waves(&disc.asm, &x, system.occupation);
        normalize_density(disc, &mut rho_out, charge);

        let energy = if cfg.independent_electrons {
            EnergyTerms {
                band: system.occupation * eig.values.iter().sum::<f64>(),
                nuclear: disc.nuclear_repulsion,
                ..Default::default()
            }
        } else {
            total_energy(
                &disc.asm,
                system.occupation,
                &eig.values,
                &rho_in,
                &v_har,
                disc.nuclear_repulsion,
            )
        };
        let diff: Vec<f64> = rho_out.iter().zip(&rho_in).map(|(a, b)| a - b).collect();
        let residual = disc.l2_norm(&diff);
        log.push(ScfLogRow {
            iter: it,
            energy: energy.total(),
            residual,
            eigenvalues: eig.values.clone(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!(
            "scf {it}: E = {:.8}, |drho| = {residual:.3e}, eig iters {}",
            energy.total(),
            eig.iterations
        );

        let converged = cfg.independent_electrons || residual < cfg.tol;
        let state = ScfResult {
            waves: WaveSet {
                mesh: disc.mesh().clone(),
                coeffs: x.clone(),
                eigenvalues: eig.values.clone(),
            },
            density: rho_out.clone(),
            energy,
            log: Vec::new(),
            converged,
            eigen_iterations,
        };
        if converged {
            return Ok(ScfResult { log, ..state });
        }
        if best
            .as_ref()
            .is_none_or(|b| b.log.last().is_none_or(|r| residual < r.residual))
        {
            let mut s = state;
            s.log = vec![log.last().unwrap().clone()];
            best = Some(s);
        }
        let (mut next, _) = mixer.mix(&rho_in, &rho_out);
        normalize_density(disc, &mut next, charge);
        rho_in = next;
    }
    log::warn!("SCF did not converge in {} iterations", cfg.max_iter);
    let mut b = best.expect("at least one iteration");
    b.log = log;
    b.converged = false;
    b.eigen_iterations = eigen_iterations;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_history_is_simple_mixing() {
        let mut m = AndersonMixer::new(5, 0.7, InnerProduct::Plain).unwrap();
        let (next, step) = m.mix(&[1.0, 2.0], &[3.0, 0.0]);
        assert_eq!(next, vec![0.7 * 3.0 + (1.0 - 0.7) * 1.0, 0.7 * 0.0 + (1.0 - 0.7) * 2.0]);
        assert_eq!(step.alphas, vec![1.0]);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let mut m = AndersonMixer::new(3, 0.7, InnerProduct::Plain).unwrap();
        let r = vec![0.5, 0.25, 1.0];
        m.mix(&[0.4, 0.3, 0.9], &[0.45, 0.2, 1.1]);
        let (next, _) = m.mix(&r, &r);
        for (a, b) in next.iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_mixer_rejected() {
        assert!(AndersonMixer::new(0, 0.5, InnerProduct::Plain).is_err());
        assert!(AndersonMixer::new(2, 1.5, InnerProduct::Plain).is_err());
    }
}
