//! Nuclear, Hartree and LDA exchange-correlation potentials and energies.

use rayon::prelude::*;
use std::f64::consts::PI;

use crate::fem::Assembler;
use crate::mesh::{distance, BoxDomain};
use crate::sparse::{pcg, CgOptions, CgStats, CsrMatrix, Preconditioner};
use crate::{Error, Point, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub symbol: String,
    pub position: Point,
    pub charge: f64,
}

impl Atom {
    pub fn new(symbol: impl Into<String>, position: Point, charge: f64) -> Self {
        Self {
            symbol: symbol.into(),
            position,
            charge,
        }
    }
}

/// Nuclei, orbital count and occupation in a box.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularSystem {
    pub atoms: Vec<Atom>,
    pub n_orbitals: usize,
    /// Electrons per orbital.
    pub occupation: f64,
    pub domain: BoxDomain,
}

impl MolecularSystem {
    pub fn new(atoms: Vec<Atom>, n_orbitals: usize, occupation: f64, domain: BoxDomain) -> Result<Self> {
        if n_orbitals == 0 {
            return Err(Error::InvalidInput("at least one orbital is required".into()));
        }
        if !(occupation > 0.0) {
            return Err(Error::InvalidInput(format!(
                "occupation must be positive, got {occupation}"
            )));
        }
        for a in &atoms {
            if !(a.charge > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "atom {} has non-positive charge {}",
                    a.symbol, a.charge
                )));
            }
            if !domain.contains_strictly(&a.position, 0.0) {
                return Err(Error::InvalidInput(format!(
                    "atom {} at {:?} is not strictly inside the box",
                    a.symbol, a.position
                )));
            }
        }
        Ok(Self {
            atoms,
            n_orbitals,
            occupation,
            domain,
        })
    }

    /// Spin-paired closed shell: `Σ Z / 2` doubly occupied orbitals.
    pub fn neutral(atoms: Vec<Atom>, domain: BoxDomain) -> Result<Self> {
        let z: f64 = atoms.iter().map(|a| a.charge).sum();
        let n = (z / 2.0).round() as usize;
        if (2.0 * n as f64 - z).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "total charge {z} is not an even number of electrons"
            )));
        }
        Self::new(atoms, n, 2.0, domain)
    }

    pub fn electrons(&self) -> f64 {
        self.occupation * self.n_orbitals as f64
    }

    pub fn nuclear_charge(&self) -> f64 {
        self.atoms.iter().map(|a| a.charge).sum()
    }
}

/// `−Σ Z_k / |x − R_k|`; `−∞` exactly at a nucleus.
pub fn v_ext(system: &MolecularSystem, x: &Point) -> f64 {
    system
        .atoms
        .iter()
        .map(|a| {
            let r = distance(x, &a.position);
            if r == 0.0 {
                f64::NEG_INFINITY
            } else {
                -a.charge / r
            }
        })
        .sum()
}

pub fn nuclear_repulsion(system: &MolecularSystem) -> Result<f64> {
    let mut e = 0.0;
    for (k, a) in system.atoms.iter().enumerate() {
        for b in &system.atoms[k + 1..] {
            let r = distance(&a.position, &b.position);
            if r == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "nuclei {} and {} coincide",
                    a.symbol, b.symbol
                )));
            }
            e += a.charge * b.charge / r;
        }
    }
    Ok(e)
}

fn check_density(rho: f64) -> Result<()> {
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::InvalidInput(format!(
            "density must be finite and non-negative, got {rho}"
        )));
    }
    Ok(())
}

/// LDA exchange potential `−(3ρ/π)^{1/3}`.
pub fn exchange_potential(rho: f64) -> Result<f64> {
    check_density(rho)?;
    Ok(vx(rho))
}

/// Exchange energy per electron `−¾(3ρ/π)^{1/3}`.
pub fn exchange_energy_density(rho: f64) -> Result<f64> {
    check_density(rho)?;
    Ok(0.75 * vx(rho))
}

/// Perdew-Zunger correlation potential.
pub fn correlation_potential(rho: f64) -> Result<f64> {
    check_density(rho)?;
    Ok(vc(rho))
}

/// Perdew-Zunger correlation energy per electron.
pub fn correlation_energy_density(rho: f64) -> Result<f64> {
    check_density(rho)?;
    Ok(ec(rho))
}

fn vx(rho: f64) -> f64 {
    -(3.0 * rho / PI).cbrt()
}

const PZ_A: f64 = 0.0311;
const PZ_B: f64 = -0.048;
const PZ_C: f64 = 0.0020;
const PZ_D: f64 = -0.0116;
const PZ_GAMMA: f64 = -0.1423;
const PZ_BETA1: f64 = 1.0529;
const PZ_BETA2: f64 = 0.3334;

pub fn wigner_seitz_radius(rho: f64) -> f64 {
    (3.0 / (4.0 * PI * rho)).cbrt()
}

fn ec(rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    pz(wigner_seitz_radius(rho)).0
}

fn vc(rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    pz(wigner_seitz_radius(rho)).1
}

/// Correlation energy per electron and potential at radius `rs`.
fn pz(rs: f64) -> (f64, f64) {
    if rs < 1.0 {
        let l = rs.ln();
        (
            PZ_A * l + PZ_B + PZ_C * rs * l + PZ_D * rs,
            PZ_A * l + (PZ_B - PZ_A / 3.0) + 2.0 / 3.0 * PZ_C * rs * l + (2.0 * PZ_D - PZ_C) * rs / 3.0,
        )
    } else {
        let sq = rs.sqrt();
        let den = 1.0 + PZ_BETA1 * sq + PZ_BETA2 * rs;
        let e = PZ_GAMMA / den;
        (
            e,
            e * (1.0 + 7.0 / 6.0 * PZ_BETA1 * sq + 4.0 / 3.0 * PZ_BETA2 * rs) / den,
        )
    }
}

/// Exchange plus correlation potential of a density value, clamping
/// negatives to zero.
pub fn vxc(rho: f64) -> f64 {
    let r = rho.max(0.0);
    vx(r) + vc(r)
}

/// Exchange and correlation energies `(E_x, E_c)` of a nodal density.
pub fn xc_energy(asm: &Assembler, rho: &[f64]) -> (f64, f64) {
    let [ex, ec_] = asm.integrate_array(|t, l, _| {
        let r = asm.eval(t, l, rho).max(0.0);
        [r * 0.75 * vx(r), r * ec(r)]
    });
    (ex, ec_)
}

/// Charge, centroid and second moments of a density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multipole {
    pub charge: f64,
    pub center: Point,
    pub dipole: Point,
    /// `∫ρ dᵢdⱼ` about the centroid.
    pub second: [[f64; 3]; 3],
}

impl Multipole {
    pub fn from_density(asm: &Assembler, rho: &[f64]) -> Self {
        let [q, mx, my, mz] = asm.integrate_array(|t, l, x| {
            let r = asm.eval(t, l, rho).max(0.0);
            [r, r * x[0], r * x[1], r * x[2]]
        });
        let center = if q > 0.0 {
            [mx / q, my / q, mz / q]
        } else {
            asm.mesh.domain.center()
        };
        let m = asm.integrate_array(|t, l, x| {
            let r = asm.eval(t, l, rho).max(0.0);
            let d = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
            [
                r * d[0],
                r * d[1],
                r * d[2],
                r * d[0] * d[0],
                r * d[0] * d[1],
                r * d[0] * d[2],
                r * d[1] * d[1],
                r * d[1] * d[2],
                r * d[2] * d[2],
            ]
        });
        let second = [[m[3], m[4], m[5]], [m[4], m[6], m[7]], [m[5], m[7], m[8]]];
        Self {
            charge: q,
            center,
            dipole: [m[0], m[1], m[2]],
            second,
        }
    }

    /// Monopole, dipole and quadrupole far-field potential at `x`.
    pub fn potential(&self, x: &Point) -> f64 {
        if self.charge == 0.0 {
            return 0.0;
        }
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let r = r2.sqrt();
        let r3 = r2 * r;
        let r5 = r3 * r2;
        let mut v = self.charge / r;
        for i in 0..3 {
            v += self.dipole[i] * d[i] / r3;
        }
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { r2 } else { 0.0 };
                quad += self.second[i][j] * (3.0 * d[i] * d[j] - delta);
            }
        }
        v + 0.5 * quad / r5
    }
}

/// Far-field Hartree potential of `rho` at `x`.
pub fn multipole_boundary(asm: &Assembler, rho: &[f64], x: &Point) -> f64 {
    Multipole::from_density(asm, rho).potential(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HartreeBoundary {
    #[default]
    Multipole,
    /// Homogeneous Dirichlet data, for testing.
    Zero,
}

/// Poisson solver `−ΔV = 4πρ` reusing matrices and the previous solution
/// across calls on one mesh.
#[derive(Debug)]
pub struct HartreeSolver {
    stiffness_full: CsrMatrix,
    stiffness: CsrMatrix,
    mass_full: CsrMatrix,
    pub boundary: HartreeBoundary,
    pub cg: CgOptions,
    guess: Option<Vec<f64>>,
    pub last_stats: Option<CgStats>,
}

impl HartreeSolver {
    pub fn new(asm: &Assembler) -> Self {
        let stiffness_full = asm.stiffness_full();
        let stiffness = asm.dofs.reduce(&stiffness_full);
        Self {
            stiffness_full,
            stiffness,
            mass_full: asm.mass_full(),
            boundary: HartreeBoundary::Multipole,
            cg: CgOptions {
                tol: 1e-8,
                max_iter: 20_000,
                precond: Preconditioner::SymmetricGaussSeidel,
            },
            guess: None,
            last_stats: None,
        }
    }

    /// Nodal Hartree potential over all nodes.
    pub fn solve(&mut self, asm: &Assembler, rho: &[f64]) -> Result<Vec<f64>> {
        let dofs = &asm.dofs;
        let mut full = vec![0.0; dofs.num_nodes()];
        if self.boundary == HartreeBoundary::Multipole {
            let mp = Multipole::from_density(asm, rho);
            for (i, p) in asm.mesh.nodes.iter().enumerate() {
                if asm.mesh.boundary[i] {
                    full[i] = mp.potential(p);
                }
            }
        }
        let clamped: Vec<f64> = rho.iter().map(|r| 4.0 * PI * r.max(0.0)).collect();
        let load = dofs.restrict(&self.mass_full.mul_vec(&clamped));
        let coupling = dofs.boundary_coupling(&self.stiffness_full, &full);
        let rhs: Vec<f64> = load.iter().zip(&coupling).map(|(a, b)| a - b).collect();
        let mut x = match self.guess.take() {
            Some(g) if g.len() == rhs.len() => g,
            _ => vec![0.0; rhs.len()],
        };
        let stats = pcg(&self.stiffness, &rhs, &mut x, &self.cg)?;
        self.last_stats = Some(stats);
        for (&i, &v) in dofs.free.iter().zip(&x) {
            full[i] = v;
        }
        self.guess = Some(x);
        Ok(full)
    }
}

/// One-shot Hartree solve with multipole boundary data.
pub fn solve_hartree(asm: &Assembler, rho: &[f64]) -> Result<Vec<f64>> {
    HartreeSolver::new(asm).solve(asm, rho)
}

/// `∫ V_ext φᵢφⱼ` over free nodes.
pub fn external_block(asm: &Assembler, system: &MolecularSystem) -> Result<CsrMatrix> {
    asm.weighted_mass(&|_, _, x| v_ext(system, x))
}

/// `∫ (V_Har + V_xc(ρ)) φᵢφⱼ` over free nodes, with the potential taken as
/// its nodal interpolant.
pub fn nonlinear_block(asm: &Assembler, v_har: &[f64], rho: &[f64]) -> Result<CsrMatrix> {
    let w: Vec<f64> = v_har.par_iter().zip(rho).map(|(&v, &r)| v + vxc(r)).collect();
    asm.nodal_weighted_mass(&w)
}

/// Contributions to the total energy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTerms {
    /// Occupation-weighted eigenvalue sum.
    pub band: f64,
    /// `∫ ½ V_Har ρ`.
    pub hartree: f64,
    /// `∫ V_xc ρ`.
    pub xc_potential: f64,
    pub exchange: f64,
    pub correlation: f64,
    pub nuclear: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.band - self.hartree - self.xc_potential + self.exchange + self.correlation + self.nuclear
    }
}

/// Energy terms for eigenvalues obtained with the potentials of `rho`.
pub fn total_energy(
    asm: &Assembler,
    occupation: f64,
    eigenvalues: &[f64],
    rho: &[f64],
    v_har: &[f64],
    e_nn: f64,
) -> EnergyTerms {
    // The potential enters the Hamiltonian as a nodal interpolant, so the
    // double-counting term uses the same interpolant.
    let v_xc: Vec<f64> = rho.par_iter().map(|&r| vxc(r)).collect();
    let [h, p, ex, ec_] = asm.integrate_array(|t, l, _| {
        let r = asm.eval(t, l, rho).max(0.0);
        let x = vx(r);
        let c = if r > 0.0 { pz(wigner_seitz_radius(r)).0 } else { 0.0 };
        [
            0.5 * asm.eval(t, l, v_har) * r,
            asm.eval(t, l, &v_xc) * r,
            0.75 * x * r,
            c * r,
        ]
    });
    EnergyTerms {
        band: occupation * eigenvalues.iter().sum::<f64>(),
        hartree: h,
        xc_potential: p,
        exchange: ex,
        correlation: ec_,
        nuclear: e_nn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn he() -> MolecularSystem {
        MolecularSystem::neutral(vec![Atom::new("He", [0.0; 3], 2.0)], BoxDomain::cube(10.0).unwrap()).unwrap()
    }

    #[test]
    fn external_potential_values() {
        assert_eq!(v_ext(&he(), &[1.0, 0.0, 0.0]), -2.0);
        let empty = MolecularSystem::new(vec![], 1, 2.0, BoxDomain::cube(1.0).unwrap()).unwrap();
        assert_eq!(v_ext(&empty, &[0.3, 0.1, 0.0]), 0.0);
        assert_eq!(v_ext(&he(), &[0.0; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn exchange_identities() {
        assert!((exchange_potential(PI / 3.0).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(exchange_potential(0.0).unwrap(), 0.0);
        assert!((exchange_potential(8.0 * PI / 3.0).unwrap() + 2.0).abs() < 1e-14);
        assert!(exchange_potential(-1.0).is_err());
        assert!(correlation_potential(-1e-3).is_err());
        assert_eq!(correlation_potential(0.0).unwrap(), 0.0);
    }

    #[test]
    fn repulsion() {
        let d = BoxDomain::cube(5.0).unwrap();
        let one = MolecularSystem::new(vec![Atom::new("H", [0.0; 3], 1.0)], 1, 1.0, d).unwrap();
        assert_eq!(nuclear_repulsion(&one).unwrap(), 0.0);
        let two = MolecularSystem::new(
            vec![Atom::new("H", [0.0; 3], 1.0), Atom::new("H", [1.0, 0.0, 0.0], 1.0)],
            1,
            2.0,
            d,
        )
        .unwrap();
        assert_eq!(nuclear_repulsion(&two).unwrap(), 1.0);
        let same = MolecularSystem::new(
            vec![Atom::new("H", [0.0; 3], 1.0), Atom::new("H", [0.0; 3], 1.0)],
            1,
            2.0,
            d,
        )
        .unwrap();
        assert!(nuclear_repulsion(&same).is_err());
    }

    #[test]
    fn atoms_must_be_inside() {
        let d = BoxDomain::cube(1.0).unwrap();
        assert!(MolecularSystem::new(vec![Atom::new("H", [1.0, 0.0, 0.0], 1.0)], 1, 1.0, d).is_err());
        assert!(MolecularSystem::new(vec![Atom::new("H", [0.0; 3], -1.0)], 1, 1.0, d).is_err());
    }

    #[test]
    fn degenerate_energy_formula() {
        let e = EnergyTerms {
            band: -0.7,
            ..Default::default()
        };
        assert_eq!(e.total(), -0.7);
    }
}
