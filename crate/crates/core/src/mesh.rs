//! Tetrahedral meshes of axis-aligned boxes.

use crate::{Error, Point, Result};

/// Axis-aligned computational domain in bohr.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDomain {
    pub lo: Point,
    pub hi: Point,
}

impl BoxDomain {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        for d in 0..3 {
            if !(hi[d] - lo[d] > 0.0) || !lo[d].is_finite() || !hi[d].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "degenerate box along axis {d}: [{}, {}]",
                    lo[d], hi[d]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube `(-half, half)^3`.
    pub fn cube(half: f64) -> Result<Self> {
        Self::new([-half; 3], [half; 3])
    }

    pub fn extent(&self) -> Point {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn center(&self) -> Point {
        [
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
            0.5 * (self.lo[2] + self.hi[2]),
        ]
    }

    pub fn max_extent(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        (0..3).all(|d| p[d] >= self.lo[d] - tol && p[d] <= self.hi[d] + tol)
    }

    /// Strictly inside, at least `margin` away from every face.
    pub fn contains_strictly(&self, p: &Point, margin: f64) -> bool {
        (0..3).all(|d| p[d] > self.lo[d] + margin && p[d] < self.hi[d] - margin)
    }

    pub fn clamp(&self, p: &Point) -> Point {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
            p[2].clamp(self.lo[2], self.hi[2]),
        ]
    }

    pub fn on_surface(&self, p: &Point, tol: f64) -> bool {
        self.contains(p, tol) && (0..3).any(|d| (p[d] - self.lo[d]).abs() <= tol || (p[d] - self.hi[d]).abs() <= tol)
    }
}

/// Conforming tetrahedral mesh of a [`BoxDomain`].
///
/// `grid` records the logical `(nx, ny, nz)` cell counts when the mesh was
/// produced from a structured box mesh and only its node positions have been
/// changed since; node `(i, j, k)` is then stored at `i + (nx+1)(j + (ny+1)k)`.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub tets: Vec<[usize; 4]>,
    pub boundary: Vec<bool>,
    pub domain: BoxDomain,
    pub grid: Option<[usize; 3]>,
}

/// Kuhn decomposition of the unit cube: the six tetrahedra along the main
/// diagonal, one per permutation of the axes. Corners are numbered by bits
/// `x + 2y + 4z`.
const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn kuhn_tets() -> [[usize; 4]; 6] {
    let mut out = [[0usize; 4]; 6];
    for (t, perm) in KUHN_PERMUTATIONS.iter().enumerate() {
        let a = 1usize << perm[0];
        let b = a | (1usize << perm[1]);
        let mut tet = [0, a, b, 7];
        let corner = |c: usize| -> Point { [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64] };
        let v = tet_volume(&corner(tet[0]), &corner(tet[1]), &corner(tet[2]), &corner(tet[3]));
        if v < 0.0 {
            tet.swap(1, 2);
        }
        out[t] = tet;
    }
    out
}

/// Signed volume of the tetrahedron `(p0, p1, p2, p3)`.
pub fn tet_volume(p0: &Point, p1: &Point, p2: &Point, p3: &Point) -> f64 {
    let a = sub(p1, p0);
    let b = sub(p2, p0);
    let c = sub(p3, p0);
    dot(&a, &cross(&b, &c)) / 6.0
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn distance(a: &Point, b: &Point) -> f64 {
    norm(&sub(a, b))
}

/// Uniform box mesh with `n` cells per axis, each cube split into six
/// tetrahedra.
pub fn build_box_mesh(domain: BoxDomain, n: usize) -> Result<Mesh> {
    build_box_mesh_dims(domain, [n, n, n])
}

pub fn build_box_mesh_dims(domain: BoxDomain, dims: [usize; 3]) -> Result<Mesh> {
    BoxDomain::new(domain.lo, domain.hi)?;
    if dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "box mesh needs at least one cell per axis, got {dims:?}"
        )));
    }
    let [nx, ny, nz] = dims;
    let ext = domain.extent();
    let coord = |d: usize, i: usize, n: usize| -> f64 {
        if i == n {
            domain.hi[d]
        } else {
            domain.lo[d] + ext[d] * (i as f64) / (n as f64)
        }
    };

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    let mut boundary = Vec::with_capacity(nodes.capacity());
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([coord(0, i, nx), coord(1, j, ny), coord(2, k, nz)]);
                boundary.push(i == 0 || i == nx || j == 0 || j == ny || k == 0 || k == nz);
            }
        }
    }

    let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let local = kuhn_tets();
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |c: usize| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for lt in &local {
                    tets.push([corner(lt[0]), corner(lt[1]), corner(lt[2]), corner(lt[3])]);
                }
            }
        }
    }

    Ok(Mesh {
        nodes,
        tets,
        boundary,
        domain,
        grid: Some(dims),
    })
}

impl Mesh {
    /// Builds a mesh from raw arrays, tagging every node on the box surface
    /// as a boundary node and snapping it exactly onto the surface.
    pub fn from_parts(mut nodes: Vec<Point>, tets: Vec<[usize; 4]>, domain: BoxDomain) -> Result<Self> {
        let tol = 1e-9 * domain.max_extent();
        let mut boundary = vec![false; nodes.len()];
        for (p, b) in nodes.iter_mut().zip(boundary.iter_mut()) {
            if !domain.contains(p, tol) {
                return Err(Error::Mesh(format!("node {p:?} lies outside the domain")));
            }
            for d in 0..3 {
                if (p[d] - domain.lo[d]).abs() <= tol {
                    p[d] = domain.lo[d];
                    *b = true;
                } else if (p[d] - domain.hi[d]).abs() <= tol {
                    p[d] = domain.hi[d];
                    *b = true;
                }
            }
        }
        let mesh = Mesh {
            nodes,
            tets,
            boundary,
            domain,
            grid: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn num_boundary(&self) -> usize {
        self.boundary.iter().filter(|&&b| b).count()
    }

    pub fn tet_points(&self, t: usize) -> [Point; 4] {
        let tet = &self.tets[t];
        [
            self.nodes[tet[0]],
            self.nodes[tet[1]],
            self.nodes[tet[2]],
            self.nodes[tet[3]],
        ]
    }

    pub fn volume(&self, t: usize) -> f64 {
        let p = self.tet_points(t);
        tet_volume(&p[0], &p[1], &p[2], &p[3])
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.volume(t)).sum()
    }

    pub fn min_volume(&self) -> f64 {
        (0..self.tets.len())
            .map(|t| self.volume(t))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn centroid(&self, t: usize) -> Point {
        let p = self.tet_points(t);
        let mut c = [0.0; 3];
        for q in &p {
            for d in 0..3 {
                c[d] += 0.25 * q[d];
            }
        }
        c
    }

    /// Checks index ranges, positive volumes, boundary tags and volume
    /// conservation.
    pub fn validate(&self) -> Result<()> {
        if self.boundary.len() != self.nodes.len() {
            return Err(Error::Mesh("boundary tag count differs from node count".into()));
        }
        let n = self.nodes.len();
        for (t, tet) in self.tets.iter().enumerate() {
            if let Some(&bad) = tet.iter().find(|&&v| v >= n) {
                return Err(Error::Mesh(format!("tet {t} references node {bad} of {n}")));
            }
            let v = self.volume(t);
            if !(v > 0.0) {
                return Err(Error::DegenerateElement { element: t, volume: v });
            }
        }
        let tol = 1e-12 * self.domain.max_extent().max(1.0);
        for (i, p) in self.nodes.iter().enumerate() {
            if self.boundary[i] && !self.domain.on_surface(p, tol) {
                return Err(Error::Mesh(format!(
                    "boundary node {i} at {p:?} is off the box surface"
                )));
            }
        }
        let vol = self.total_volume();
        let box_vol = self.domain.volume();
        if ((vol - box_vol) / box_vol).abs() > 1e-10 {
            return Err(Error::Mesh(format!(
                "tets cover volume {vol} but the box has {box_vol}"
            )));
        }
        Ok(())
    }

    /// Incident tetrahedra of every node in CSR layout `(offsets, tets)`.
    pub fn node_tets(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.nodes.len();
        let mut counts = vec![0usize; n + 1];
        for tet in &self.tets {
            for &v in tet {
                counts[v + 1] += 1;
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; counts[n]];
        for (t, tet) in self.tets.iter().enumerate() {
            for &v in tet {
                list[fill[v]] = t;
                fill[v] += 1;
            }
        }
        (counts, list)
    }

    /// Sorted, deduplicated neighbours of every node in CSR layout.
    pub fn node_neighbors(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.nodes.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for tet in &self.tets {
            for &a in tet {
                for &b in tet {
                    if a != b {
                        adj[a].push(b);
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut list = Vec::new();
        offsets.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            list.extend_from_slice(&row);
            offsets.push(list.len());
        }
        (offsets, list)
    }

    /// Unique undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let (off, nb) = self.node_neighbors();
        let mut out = Vec::with_capacity(nb.len() / 2);
        for a in 0..self.nodes.len() {
            for &b in &nb[off[a]..off[a + 1]] {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges()
            .iter()
            .map(|&(a, b)| distance(&self.nodes[a], &self.nodes[b]))
            .fold(0.0, f64::max)
    }

    /// Evaluates the piecewise-linear map from the logical grid to physical
    /// space at a logical point `xi` given in cell units (`0..=n` per axis).
    fn structured_map(&self, xi: [f64; 3]) -> Option<Point> {
        let dims = self.grid?;
        let mut cell = [0usize; 3];
        let mut f = [0.0; 3];
        for d in 0..3 {
            let x = xi[d].clamp(0.0, dims[d] as f64);
            let c = (x.floor() as usize).min(dims[d] - 1);
            cell[d] = c;
            f[d] = x - c as f64;
        }
        // Kuhn tet containing f: order the fractional coordinates descending.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| f[b].partial_cmp(&f[a]).unwrap_or(std::cmp::Ordering::Equal));
        let corners = [0usize, 1 << order[0], (1 << order[0]) | (1 << order[1]), 7];
        let lam = [
            1.0 - f[order[0]],
            f[order[0]] - f[order[1]],
            f[order[1]] - f[order[2]],
            f[order[2]],
        ];
        let [nx, ny, _] = dims;
        let mut p = [0.0; 3];
        for (c, l) in corners.iter().zip(lam) {
            let i = cell[0] + (c & 1);
            let j = cell[1] + ((c >> 1) & 1);
            let k = cell[2] + ((c >> 2) & 1);
            let node = &self.nodes[i + (nx + 1) * (j + (ny + 1) * k)];
            for d in 0..3 {
                p[d] += l * node[d];
            }
        }
        Some(p)
    }

    /// Structured mesh with `dims` cells whose nodes are placed by the
    /// logical-to-physical map of this (structured, possibly moved) mesh.
    ///
    /// Boundary nodes stay on their box faces because the map preserves the
    /// faces. Fails if the source is not structured or the resampled mesh is
    /// tangled.
    pub fn resample_structured(&self, dims: [usize; 3]) -> Result<Mesh> {
        let src = self
            .grid
            .ok_or_else(|| Error::Mesh("resampling requires a structured source mesh".into()))?;
        let mut out = build_box_mesh_dims(self.domain, dims)?;
        for k in 0..=dims[2] {
            for j in 0..=dims[1] {
                for i in 0..=dims[0] {
                    let idx = i + (dims[0] + 1) * (j + (dims[1] + 1) * k);
                    let logical = [i, j, k];
                    let mut xi = [0.0; 3];
                    for d in 0..3 {
                        xi[d] = logical[d] as f64 * src[d] as f64 / dims[d] as f64;
                    }
                    let p = self.structured_map(xi).unwrap();
                    let q = &mut out.nodes[idx];
                    for d in 0..3 {
                        // Face coordinates stay exact.
                        if logical[d] != 0 && logical[d] != dims[d] {
                            q[d] = p[d].clamp(self.domain.lo[d], self.domain.hi[d]);
                        }
                    }
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoxDomain {
        BoxDomain::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn single_cube_split() {
        let m = build_box_mesh(unit(), 1).unwrap();
        assert_eq!(m.num_nodes(), 8);
        assert_eq!(m.num_tets(), 6);
        assert!((m.total_volume() - 1.0).abs() < 1e-15);
        for t in 0..6 {
            assert!((m.volume(t) - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn counts_for_large_box() {
        let m = build_box_mesh(BoxDomain::cube(10.0).unwrap(), 16).unwrap();
        assert_eq!(m.num_nodes(), 4913);
        assert_eq!(m.num_tets(), 24576);
        m.validate().unwrap();
    }

    #[test]
    fn boundary_tagging() {
        let m = build_box_mesh(unit(), 2).unwrap();
        assert_eq!(m.num_nodes(), 27);
        assert_eq!(m.num_boundary(), 26);
        for (p, &b) in m.nodes.iter().zip(&m.boundary) {
            let on = p.iter().any(|&c| c == 0.0 || c == 1.0);
            assert_eq!(on, b);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoxDomain::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(build_box_mesh(unit(), 0).is_err());
    }

    #[test]
    fn conforming_faces() {
        // Every interior face is shared by exactly two tets.
        let m = build_box_mesh(unit(), 3).unwrap();
        let mut faces = std::collections::HashMap::new();
        for tet in &m.tets {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| tet[i]).collect();
                f.sort_unstable();
                *faces.entry(f).or_insert(0) += 1;
            }
        }
        assert!(faces.values().all(|&c| c == 1 || c == 2));
        let boundary_faces = faces.values().filter(|&&c| c == 1).count();
        assert_eq!(boundary_faces, 6 * 2 * 9);
    }

    #[test]
    fn resample_identity_map() {
        let m = build_box_mesh(BoxDomain::cube(2.0).unwrap(), 4).unwrap();
        let r = m.resample_structured([6, 6, 6]).unwrap();
        let direct = build_box_mesh(BoxDomain::cube(2.0).unwrap(), 6).unwrap();
        for (a, b) in r.nodes.iter().zip(&direct.nodes) {
            assert!(distance(a, b) < 1e-12);
        }
    }
}
