//! P1 finite element assembly on tetrahedral meshes.

use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::mesh::Mesh;
use crate::sparse::{CsrMatrix, Pattern};
use crate::{Error, Point, Result};

const MIN_VOLUME: f64 = 1e-14;
const NONE: u32 = u32::MAX;

/// Quadrature rule on the reference tetrahedron in barycentric coordinates,
/// weights normalised to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn centroid() -> Self {
        Self {
            points: vec![[0.25; 4]],
            weights: vec![1.0],
            degree: 1,
        }
    }

    pub fn degree2() -> Self {
        let a = 0.585_410_196_624_968_5;
        let b = 0.138_196_601_125_010_5;
        Self {
            points: perms_one(a, b),
            weights: vec![0.25; 4],
            degree: 2,
        }
    }

    /// Keast's 11-point rule, exact for quartics.
    pub fn degree4() -> Self {
        let s = (5.0f64 / 14.0).sqrt();
        let (a, b) = ((1.0 + s) / 4.0, (1.0 - s) / 4.0);
        let mut points = vec![[0.25; 4]];
        let mut weights = vec![-148.0 / 1875.0];
        for p in perms_one(11.0 / 14.0, 1.0 / 14.0) {
            points.push(p);
            weights.push(343.0 / 7500.0);
        }
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            let mut p = [b; 4];
            p[i] = a;
            p[j] = a;
            points.push(p);
            weights.push(56.0 / 375.0);
        }
        Self {
            points,
            weights,
            degree: 4,
        }
    }

    pub fn of_degree(d: usize) -> Result<Self> {
        match d {
            0 | 1 => Ok(Self::centroid()),
            2 => Ok(Self::degree2()),
            3 | 4 => Ok(Self::degree4()),
            _ => Err(Error::InvalidInput(format!("no quadrature rule of degree {d}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn perms_one(a: f64, b: f64) -> Vec<[f64; 4]> {
    (0..4)
        .map(|i| {
            let mut p = [b; 4];
            p[i] = a;
            p
        })
        .collect()
}

/// Gradients of the four barycentric coordinates of a tetrahedron.
pub fn barycentric_gradients(p: &[Point; 4]) -> Option<[Point; 4]> {
    let mut j = Matrix3::zeros();
    for c in 0..3 {
        for r in 0..3 {
            j[(r, c)] = p[c + 1][r] - p[0][r];
        }
    }
    let inv = j.try_inverse()?;
    let mut g = [[0.0; 3]; 4];
    for i in 0..3 {
        for d in 0..3 {
            g[i + 1][d] = inv[(i, d)];
            g[0][d] -= inv[(i, d)];
        }
    }
    Some(g)
}

/// Mapping between mesh nodes and free (non-Dirichlet) unknowns.
#[derive(Debug, Clone)]
pub struct DofMap {
    /// Node index of each free unknown.
    pub free: Vec<usize>,
    /// Free index of each node, `None` on the boundary.
    pub index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        let mut free = Vec::new();
        let index = mesh
            .boundary
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                (!b).then(|| {
                    free.push(i);
                    free.len() - 1
                })
            })
            .collect();
        Self { free, index }
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.index.len()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        assert_eq!(full.len(), self.num_nodes());
        self.free.iter().map(|&i| full[i]).collect()
    }

    /// Extends free values by zero on the boundary.
    pub fn lift(&self, reduced: &[f64]) -> Vec<f64> {
        assert_eq!(reduced.len(), self.num_free());
        let mut full = vec![0.0; self.num_nodes()];
        for (&i, &v) in self.free.iter().zip(reduced) {
            full[i] = v;
        }
        full
    }

    /// Free-by-free block of a matrix over all nodes.
    pub fn reduce(&self, a: &CsrMatrix) -> CsrMatrix {
        let rows: Vec<Vec<usize>> = self
            .free
            .iter()
            .map(|&i| a.pattern.row(i).iter().filter_map(|&j| self.index[j]).collect())
            .collect();
        let pattern = Arc::new(Pattern::from_rows(&rows));
        let mut vals = Vec::with_capacity(pattern.nnz());
        for &i in &self.free {
            let (c, v) = a.row(i);
            vals.extend(
                c.iter()
                    .zip(v)
                    .filter(|(&j, _)| self.index[j].is_some())
                    .map(|(_, &x)| x),
            );
        }
        CsrMatrix { pattern, vals }
    }

    /// `A_fb w_b`: coupling of free rows to boundary values of `w_full`.
    pub fn boundary_coupling(&self, a: &CsrMatrix, w_full: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| {
                let (c, v) = a.row(i);
                c.iter()
                    .zip(v)
                    .filter(|(&j, _)| self.index[j].is_none())
                    .map(|(&j, &x)| x * w_full[j])
                    .sum()
            })
            .collect()
    }
}

/// Element-wise coefficient evaluated at quadrature points:
/// `(element, barycentric point, physical point) -> value`.
pub type Coefficient<'a> = dyn Fn(usize, &[f64; 4], &Point) -> f64 + Sync + 'a;

/// Precomputed geometry and scatter tables for P1 assembly on one mesh.
#[derive(Debug)]
pub struct Assembler {
    pub mesh: Arc<Mesh>,
    pub dofs: DofMap,
    pub rule: QuadratureRule,
    grads: Vec<[Point; 4]>,
    volumes: Vec<f64>,
    full_pattern: Arc<Pattern>,
    free_pattern: Arc<Pattern>,
    full_slots: Vec<[u32; 16]>,
    free_slots: Vec<[u32; 16]>,
}

impl Assembler {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self> {
        Self::with_rule(mesh, QuadratureRule::degree4())
    }

    pub fn with_rule(mesh: Arc<Mesh>, rule: QuadratureRule) -> Result<Self> {
        let geo: Vec<(f64, Option<[Point; 4]>)> = (0..mesh.num_tets())
            .into_par_iter()
            .map(|t| {
                let p = mesh.tet_points(t);
                (mesh.volume(t), barycentric_gradients(&p))
            })
            .collect();
        let mut grads = Vec::with_capacity(geo.len());
        let mut volumes = Vec::with_capacity(geo.len());
        for (t, (v, g)) in geo.into_iter().enumerate() {
            match g {
                Some(g) if v >= MIN_VOLUME => {
                    grads.push(g);
                    volumes.push(v);
                }
                _ => return Err(Error::DegenerateElement { element: t, volume: v }),
            }
        }

        let dofs = DofMap::new(&mesh);
        let (nptr, nbrs) = mesh.node_neighbors();
        let full_rows: Vec<Vec<usize>> = (0..mesh.num_nodes())
            .map(|i| {
                let mut r: Vec<usize> = nbrs[nptr[i]..nptr[i + 1]].to_vec();
                r.push(i);
                r.sort_unstable();
                r
            })
            .collect();
        let free_rows: Vec<Vec<usize>> = dofs
            .free
            .iter()
            .map(|&i| full_rows[i].iter().filter_map(|&j| dofs.index[j]).collect())
            .collect();
        let full_pattern = Arc::new(Pattern::from_rows(&full_rows));
        let free_pattern = Arc::new(Pattern::from_rows(&free_rows));

        let (full_slots, free_slots): (Vec<[u32; 16]>, Vec<[u32; 16]>) = mesh
            .tets
            .par_iter()
            .map(|tet| {
                let mut fs = [NONE; 16];
                let mut rs = [NONE; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        fs[4 * a + b] = full_pattern.slot(tet[a], tet[b]).expect("stencil") as u32;
                        if let (Some(i), Some(j)) = (dofs.index[tet[a]], dofs.index[tet[b]]) {
                            rs[4 * a + b] = free_pattern.slot(i, j).expect("stencil") as u32;
                        }
                    }
                }
                (fs, rs)
            })
            .unzip();

        Ok(Self {
            mesh,
            dofs,
            rule,
            grads,
            volumes,
            full_pattern,
            free_pattern,
            full_slots,
            free_slots,
        })
    }

    pub fn num_free(&self) -> usize {
        self.dofs.num_free()
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn gradients(&self, t: usize) -> &[Point; 4] {
        &self.grads[t]
    }

    pub fn free_pattern(&self) -> &Arc<Pattern> {
        &self.free_pattern
    }

    pub fn full_pattern(&self) -> &Arc<Pattern> {
        &self.full_pattern
    }

    fn scatter(&self, elems: Vec<[f64; 16]>, reduced: bool) -> CsrMatrix {
        let (pattern, slots) = if reduced {
            (&self.free_pattern, &self.free_slots)
        } else {
            (&self.full_pattern, &self.full_slots)
        };
        let mut m = CsrMatrix::zeros(pattern.clone());
        for (e, s) in elems.iter().zip(slots) {
            for k in 0..16 {
                if s[k] != NONE {
                    m.vals[s[k] as usize] += e[k];
                }
            }
        }
        m
    }

    fn stiffness_elems(&self) -> Vec<[f64; 16]> {
        self.grads
            .par_iter()
            .zip(&self.volumes)
            .map(|(g, &v)| {
                let mut e = [0.0; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        e[4 * a + b] = v * crate::mesh::dot(&g[a], &g[b]);
                    }
                }
                e
            })
            .collect()
    }

    fn mass_elems(&self) -> Vec<[f64; 16]> {
        self.volumes
            .par_iter()
            .map(|&v| {
                let mut e = [v / 20.0; 16];
                for a in 0..4 {
                    e[5 * a] = v / 10.0;
                }
                e
            })
            .collect()
    }

    fn weighted_elems(&self, w: &Coefficient) -> Result<Vec<[f64; 16]>> {
        let mesh = &self.mesh;
        (0..mesh.num_tets())
            .into_par_iter()
            .map(|t| {
                let p = mesh.tet_points(t);
                let v = self.volumes[t];
                let mut e = [0.0; 16];
                for (l, &wq) in self.rule.points.iter().zip(&self.rule.weights) {
                    let x = bary_point(&p, l);
                    let c = w(t, l, &x);
                    if !c.is_finite() {
                        return Err(Error::NonFiniteCoefficient {
                            element: t,
                            point: x,
                            value: c,
                        });
                    }
                    let s = v * wq * c;
                    for a in 0..4 {
                        for b in a..4 {
                            e[4 * a + b] += s * l[a] * l[b];
                        }
                    }
                }
                for a in 0..4 {
                    for b in 0..a {
                        e[4 * a + b] = e[4 * b + a];
                    }
                }
                Ok(e)
            })
            .collect()
    }

    /// `∫ ∇φᵢ·∇φⱼ` over all nodes.
    pub fn stiffness_full(&self) -> CsrMatrix {
        self.scatter(self.stiffness_elems(), false)
    }

    /// `∫ φᵢφⱼ` over all nodes.
    pub fn mass_full(&self) -> CsrMatrix {
        self.scatter(self.mass_elems(), false)
    }

    pub fn weighted_mass_full(&self, w: &Coefficient) -> Result<CsrMatrix> {
        Ok(self.scatter(self.weighted_elems(w)?, false))
    }

    /// Stiffness restricted to free nodes.
    pub fn stiffness(&self) -> CsrMatrix {
        self.scatter(self.stiffness_elems(), true)
    }

    /// Mass restricted to free nodes.
    pub fn mass(&self) -> CsrMatrix {
        self.scatter(self.mass_elems(), true)
    }

    /// `∫ w φᵢφⱼ` restricted to free nodes.
    pub fn weighted_mass(&self, w: &Coefficient) -> Result<CsrMatrix> {
        Ok(self.scatter(self.weighted_elems(w)?, true))
    }

    /// `∫ w φᵢφⱼ` restricted to free nodes for a piecewise-linear `w` given by
    /// nodal values; integrated exactly.
    pub fn nodal_weighted_mass(&self, w: &[f64]) -> Result<CsrMatrix> {
        assert_eq!(w.len(), self.mesh.num_nodes());
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            let t = self.mesh.tets.iter().position(|t| t.contains(&i)).unwrap_or(0);
            return Err(Error::NonFiniteCoefficient {
                element: t,
                point: self.mesh.nodes[i],
                value: w[i],
            });
        }
        let elems = self
            .mesh
            .tets
            .par_iter()
            .zip(&self.volumes)
            .map(|(tet, &v)| {
                let c = tet.map(|i| w[i]);
                let sum: f64 = c.iter().sum();
                let mut e = [0.0; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        e[4 * a + b] = if a == b {
                            v / 60.0 * (2.0 * c[a] + sum)
                        } else {
                            v / 120.0 * (c[a] + c[b] + sum)
                        };
                    }
                }
                e
            })
            .collect();
        Ok(self.scatter(elems, true))
    }

    /// Value of a nodal field at a barycentric point of element `t`.
    pub fn eval(&self, t: usize, l: &[f64; 4], values: &[f64]) -> f64 {
        let tet = &self.mesh.tets[t];
        (0..4).map(|a| l[a] * values[tet[a]]).sum()
    }

    /// Quadrature of a vector-valued integrand over the whole mesh.
    pub fn integrate_array<const K: usize, F>(&self, f: F) -> [f64; K]
    where
        F: Fn(usize, &[f64; 4], &Point) -> [f64; K] + Sync,
    {
        let mesh = &self.mesh;
        // Fixed chunks keep the summation order independent of thread count.
        const CHUNK: usize = 2048;
        let n = mesh.num_tets();
        let parts: Vec<[f64; K]> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = [0.0; K];
                for t in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let p = mesh.tet_points(t);
                    let v = self.volumes[t];
                    for (l, &wq) in self.rule.points.iter().zip(&self.rule.weights) {
                        let x = bary_point(&p, l);
                        let r = f(t, l, &x);
                        for k in 0..K {
                            acc[k] += v * wq * r[k];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = [0.0; K];
        for p in parts {
            for k in 0..K {
                total[k] += p[k];
            }
        }
        total
    }

    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(usize, &[f64; 4], &Point) -> f64 + Sync,
    {
        self.integrate_array(|t, l, x| [f(t, l, x)])[0]
    }
}

pub fn bary_point(p: &[Point; 4], l: &[f64; 4]) -> Point {
    let mut x = [0.0; 3];
    for a in 0..4 {
        for d in 0..3 {
            x[d] += l[a] * p[a][d];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxDomain};

    fn unit(n: usize) -> Arc<Mesh> {
        Arc::new(build_box_mesh(BoxDomain::new([0.0; 3], [1.0; 3]).unwrap(), n).unwrap())
    }

    #[test]
    fn reference_tet_stiffness() {
        let m = Mesh::from_parts(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            BoxDomain::new([0.0; 3], [1.0; 3]).unwrap(),
        );
        // a single tet does not cover its bounding box
        assert!(m.is_err());
        let p = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let g = barycentric_gradients(&p).unwrap();
        let v = 1.0 / 6.0;
        let k00: f64 = v * crate::mesh::dot(&g[0], &g[0]);
        assert!((k00 - 0.5).abs() < 1e-15);
        assert!((v * crate::mesh::dot(&g[0], &g[1]) + 1.0 / 6.0).abs() < 1e-15);
        assert!((v * crate::mesh::dot(&g[1], &g[2])).abs() < 1e-15);
    }

    #[test]
    fn stiffness_rows_sum_to_zero() {
        let asm = Assembler::new(unit(3)).unwrap();
        let k = asm.stiffness_full();
        for i in 0..k.n() {
            let s: f64 = k.row(i).1.iter().sum();
            assert!(s.abs() < 1e-12);
        }
        assert!(k.asymmetry() < 1e-14);
    }

    #[test]
    fn mass_sums_to_volume() {
        let asm = Assembler::new(unit(3)).unwrap();
        let total: f64 = asm.mass_full().vals.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_mass_reduces_to_mass() {
        let asm = Assembler::new(unit(2)).unwrap();
        let m = asm.mass_full();
        let w = asm.weighted_mass_full(&|_, _, _| 2.5).unwrap();
        for (a, b) in m.vals.iter().zip(&w.vals) {
            assert!((2.5 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_coefficient_reported() {
        let asm = Assembler::new(unit(1)).unwrap();
        let r = asm.weighted_mass(&|t, _, _| if t == 3 { f64::NAN } else { 1.0 });
        assert!(matches!(r, Err(Error::NonFiniteCoefficient { element: 3, .. })));
    }

    #[test]
    fn nodal_weighted_mass_matches_quadrature() {
        let asm = Assembler::new(unit(4)).unwrap();
        let w: Vec<f64> = asm
            .mesh
            .nodes
            .iter()
            .map(|p| 1.0 + p[0] - 2.0 * p[1] + 0.5 * p[2])
            .collect();
        let exact = asm.nodal_weighted_mass(&w).unwrap();
        let quad = asm.weighted_mass(&|t, l, _| asm.eval(t, l, &w)).unwrap();
        for (a, b) in exact.vals.iter().zip(&quad.vals) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dirichlet_counts() {
        let asm = Assembler::new(unit(2)).unwrap();
        assert_eq!(asm.num_free(), 1);
        let k = asm.stiffness();
        assert_eq!(k.n(), 1);
        let red = asm.dofs.reduce(&asm.stiffness_full());
        assert_eq!(red.vals, k.vals);
    }
}
