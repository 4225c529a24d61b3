//! Point location on tetrahedral meshes and P1 transfer between nonnested
//! meshes.
//!
//! Location follows the classical FreeFEM strategy: an octree over the mesh
//! vertices gives a nearby vertex, then a walk across faces (towards the most
//! negative barycentric coordinate) reaches the containing tetrahedron.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::mesh::{dot, sub, tet_volume, Mesh};
use crate::{Error, Point, Result};

const LEAF_CAPACITY: usize = 8;
const MAX_DEPTH: usize = 48;
const NONE: u32 = u32::MAX;
const INSIDE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Cell {
    lo: Point,
    hi: Point,
    children: [u32; 8],
    // Leaf payload as a range into `Octree::items`; empty for internal cells.
    start: u32,
    len: u32,
}

/// Octree over a point set with at most eight points per terminal cell.
#[derive(Debug, Clone)]
pub struct Octree {
    cells: Vec<Cell>,
    items: Vec<u32>,
}

impl Octree {
    pub fn new(points: &[Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let mut tree = Octree {
            cells: Vec::new(),
            items: Vec::with_capacity(points.len()),
        };
        if points.is_empty() {
            return tree;
        }
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        tree.build(points, &mut idx, lo, hi, 0);
        tree
    }

    fn build(&mut self, points: &[Point], idx: &mut [u32], lo: Point, hi: Point, depth: usize) -> u32 {
        let id = self.cells.len() as u32;
        self.cells.push(Cell {
            lo,
            hi,
            children: [NONE; 8],
            start: 0,
            len: 0,
        });
        if idx.len() <= LEAF_CAPACITY || depth >= MAX_DEPTH {
            let start = self.items.len() as u32;
            self.items.extend_from_slice(idx);
            let cell = &mut self.cells[id as usize];
            cell.start = start;
            cell.len = idx.len() as u32;
            return id;
        }
        let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let octant = |p: &Point| -> usize {
            (p[0] >= mid[0]) as usize | (((p[1] >= mid[1]) as usize) << 1) | (((p[2] >= mid[2]) as usize) << 2)
        };
        idx.sort_unstable_by_key(|&i| octant(&points[i as usize]));
        let mut begin = 0;
        for o in 0..8 {
            let mut end = begin;
            while end < idx.len() && octant(&points[idx[end] as usize]) == o {
                end += 1;
            }
            if end > begin {
                let mut clo = lo;
                let mut chi = hi;
                for d in 0..3 {
                    if (o >> d) & 1 == 1 {
                        clo[d] = mid[d];
                    } else {
                        chi[d] = mid[d];
                    }
                }
                let child = self.build(points, &mut idx[begin..end], clo, chi, depth + 1);
                self.cells[id as usize].children[o] = child;
            }
            begin = end;
        }
        id
    }

    /// Points stored in the terminal cell reached by descending towards `q`.
    /// When the octant containing `q` is empty the closest non-empty sibling
    /// is followed instead.
    pub fn terminal_cell(&self, q: &Point) -> &[u32] {
        if self.cells.is_empty() {
            return &[];
        }
        let mut c = 0usize;
        loop {
            let cell = &self.cells[c];
            if cell.len > 0 || cell.children.iter().all(|&ch| ch == NONE) {
                return &self.items[cell.start as usize..(cell.start + cell.len) as usize];
            }
            let mid = [
                0.5 * (cell.lo[0] + cell.hi[0]),
                0.5 * (cell.lo[1] + cell.hi[1]),
                0.5 * (cell.lo[2] + cell.hi[2]),
            ];
            let o = (q[0] >= mid[0]) as usize | (((q[1] >= mid[1]) as usize) << 1) | (((q[2] >= mid[2]) as usize) << 2);
            c = if cell.children[o] != NONE {
                cell.children[o] as usize
            } else {
                let mut best = NONE;
                let mut best_d = f64::INFINITY;
                for &ch in cell.children.iter().filter(|&&ch| ch != NONE) {
                    let b = &self.cells[ch as usize];
                    let d = box_distance2(q, &b.lo, &b.hi);
                    if d < best_d {
                        best_d = d;
                        best = ch;
                    }
                }
                best as usize
            };
        }
    }

    /// Sizes of all terminal cells, for invariant checks.
    pub fn leaf_sizes(&self) -> Vec<usize> {
        self.cells
            .iter()
            .filter(|c| c.len > 0)
            .map(|c| c.len as usize)
            .collect()
    }

    pub fn leaf_items(&self) -> impl Iterator<Item = &[u32]> {
        self.cells
            .iter()
            .filter(|c| c.len > 0)
            .map(|c| &self.items[c.start as usize..(c.start + c.len) as usize])
    }
}

fn box_distance2(q: &Point, lo: &Point, hi: &Point) -> f64 {
    let mut s = 0.0;
    for d in 0..3 {
        let e = if q[d] < lo[d] {
            lo[d] - q[d]
        } else if q[d] > hi[d] {
            q[d] - hi[d]
        } else {
            0.0
        };
        s += e * e;
    }
    s
}

/// Barycentric coordinates of `q` in the tetrahedron `p`.
pub fn barycentric(p: &[Point; 4], q: &Point) -> [f64; 4] {
    let vol = tet_volume(&p[0], &p[1], &p[2], &p[3]);
    let l1 = tet_volume(&p[0], q, &p[2], &p[3]) / vol;
    let l2 = tet_volume(&p[0], &p[1], q, &p[3]) / vol;
    let l3 = tet_volume(&p[0], &p[1], &p[2], q) / vol;
    [1.0 - l1 - l2 - l3, l1, l2, l3]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub tet: usize,
    pub bary: [f64; 4],
    /// The query was outside the domain (beyond tolerance) or the walk failed
    /// and the nearest tetrahedron was used instead.
    pub clamped: bool,
}

/// Octree plus mesh adjacency needed by [`Locator::locate`]. Immutable after
/// construction.
#[derive(Debug, Clone)]
pub struct Locator<'m> {
    pub mesh: &'m Mesh,
    pub octree: Octree,
    node_tet_offsets: Vec<usize>,
    node_tet_list: Vec<usize>,
    /// `neighbors[t][i]` is the tet across the face opposite local vertex `i`.
    neighbors: Vec<[u32; 4]>,
}

impl<'m> Locator<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let octree = Octree::new(&mesh.nodes);
        let (node_tet_offsets, node_tet_list) = mesh.node_tets();
        let neighbors = face_neighbors(mesh, &node_tet_offsets, &node_tet_list);
        Self {
            mesh,
            octree,
            node_tet_offsets,
            node_tet_list,
            neighbors,
        }
    }

    pub fn incident_tets(&self, node: usize) -> &[usize] {
        &self.node_tet_list[self.node_tet_offsets[node]..self.node_tet_offsets[node + 1]]
    }

    pub fn neighbor(&self, tet: usize, face: usize) -> Option<usize> {
        let n = self.neighbors[tet][face];
        (n != NONE).then_some(n as usize)
    }

    fn nearest_node(&self, q: &Point) -> usize {
        let cands = self.octree.terminal_cell(q);
        let mut best = cands[0] as usize;
        let mut best_d = f64::INFINITY;
        for &c in cands {
            let d = sub(&self.mesh.nodes[c as usize], q);
            let d2 = dot(&d, &d);
            if d2 < best_d {
                best_d = d2;
                best = c as usize;
            }
        }
        best
    }

    /// Locates `q`, starting the walk from the octree's nearest vertex.
    pub fn locate<R: Rng>(&self, q: &Point, rng: &mut R) -> Location {
        let domain = &self.mesh.domain;
        let qc = domain.clamp(q);
        let outside = !domain.contains(q, 1e-10);
        let start_node = self.nearest_node(&qc);
        let start = self.incident_tets(start_node)[0];
        let mut loc = self.walk(&qc, start, rng);
        loc.clamped |= outside;
        loc
    }

    /// Walks from `start` to the tetrahedron containing `q`.
    pub fn walk<R: Rng>(&self, q: &Point, start: usize, rng: &mut R) -> Location {
        let mesh = self.mesh;
        let mut t = start;
        let max_steps = 2 * mesh.num_tets();
        for _ in 0..max_steps {
            let bary = barycentric(&mesh.tet_points(t), q);
            let mut negative = [0usize; 4];
            let mut nneg = 0;
            for (i, &l) in bary.iter().enumerate() {
                if l < -INSIDE_TOL {
                    negative[nneg] = i;
                    nneg += 1;
                }
            }
            if nneg == 0 {
                return Location {
                    tet: t,
                    bary: clean_bary(bary),
                    clamped: false,
                };
            }
            let face = if nneg == 1 {
                negative[0]
            } else {
                negative[rng.random_range(0..nneg)]
            };
            match self.neighbor(t, face) {
                Some(next) => t = next,
                None => {
                    // Across the domain boundary: try another negative face
                    // that leads inward, otherwise give up on walking.
                    match negative[..nneg].iter().filter_map(|&f| self.neighbor(t, f)).next() {
                        Some(next) => t = next,
                        None => break,
                    }
                }
            }
        }
        self.exhaustive(q)
    }

    /// Scans every tetrahedron; used when the walk cannot terminate.
    pub fn exhaustive(&self, q: &Point) -> Location {
        let mesh = self.mesh;
        let mut best = 0;
        let mut best_min = f64::NEG_INFINITY;
        let mut best_bary = [0.0; 4];
        for t in 0..mesh.num_tets() {
            let b = barycentric(&mesh.tet_points(t), q);
            let m = b.iter().cloned().fold(f64::INFINITY, f64::min);
            if m > best_min {
                best_min = m;
                best = t;
                best_bary = b;
            }
        }
        Location {
            tet: best,
            bary: clean_bary(best_bary),
            clamped: best_min < -1e-10,
        }
    }

    pub fn locate_all(&self, points: &[Point], seed: u64) -> Vec<Location> {
        const CHUNK: usize = 4096;
        points
            .par_chunks(CHUNK)
            .enumerate()
            .flat_map_iter(|(c, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                chunk.iter().map(|q| self.locate(q, &mut rng)).collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Removes round-off negatives and renormalises so the weights sum to one.
pub fn clean_bary(mut b: [f64; 4]) -> [f64; 4] {
    for l in &mut b {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let s: f64 = b.iter().sum();
    for l in &mut b {
        *l /= s;
    }
    b
}

fn face_neighbors(mesh: &Mesh, offsets: &[usize], list: &[usize]) -> Vec<[u32; 4]> {
    mesh.tets
        .par_iter()
        .enumerate()
        .map(|(t, tet)| {
            let mut nb = [NONE; 4];
            for (skip, slot) in nb.iter_mut().enumerate() {
                let face: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| tet[i]).collect();
                let pivot = face[0];
                for &cand in &list[offsets[pivot]..offsets[pivot + 1]] {
                    if cand != t {
                        let ct = &mesh.tets[cand];
                        if face.iter().all(|v| ct.contains(v)) {
                            *slot = cand as u32;
                            break;
                        }
                    }
                }
            }
            nb
        })
        .collect()
}

/// Result of transferring a nodal field to another mesh.
#[derive(Debug, Clone)]
pub struct Interpolated {
    pub values: Vec<f64>,
    pub clamped: usize,
}

/// Evaluates the P1 field `values` (on the locator's mesh) at every node of
/// `target`.
pub fn interpolate_field(source: &Locator, values: &[f64], target: &Mesh, seed: u64) -> Result<Interpolated> {
    if values.len() != source.mesh.num_nodes() {
        return Err(Error::Dimension(format!(
            "field has {} values, source mesh has {} nodes",
            values.len(),
            source.mesh.num_nodes()
        )));
    }
    let locs = source.locate_all(&target.nodes, seed);
    Ok(interpolate_with(source.mesh, &locs, values))
}

/// Applies precomputed locations to a nodal field.
pub fn interpolate_with(source: &Mesh, locs: &[Location], values: &[f64]) -> Interpolated {
    let mut clamped = 0;
    let out = locs
        .iter()
        .map(|loc| {
            if loc.clamped {
                clamped += 1;
            }
            let tet = &source.tets[loc.tet];
            (0..4).map(|i| loc.bary[i] * values[tet[i]]).sum()
        })
        .collect();
    if clamped > 0 {
        log::warn!("interpolation clamped {clamped} target nodes to the nearest element");
    }
    Interpolated { values: out, clamped }
}
