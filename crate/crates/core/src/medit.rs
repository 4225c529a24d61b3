//! Medit ASCII `.mesh` and `.sol` files (1-based indices).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::mesh::{BoxDomain, Mesh};
use crate::{Error, Point, Result};

struct Tokens<'a> {
    path: &'a Path,
    toks: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let mut toks = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            toks.extend(line.split_whitespace().map(|t| (ln + 1, t)));
        }
        Self { path, toks, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        let line = self
            .toks
            .get(self.pos.min(self.toks.len().saturating_sub(1)))
            .map(|t| t.0)
            .unwrap_or(0);
        Error::Format {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.toks.get(self.pos).map(|t| t.1);
        self.pos += 1;
        t
    }

    fn word(&mut self, what: &str) -> Result<&'a str> {
        self.next()
            .ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }

    fn float(&mut self) -> Result<f64> {
        let t = self.word("a number")?;
        t.parse::<f64>().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a number, found '{t}'"))
        })
    }

    fn uint(&mut self) -> Result<usize> {
        let t = self.word("an integer")?;
        t.parse::<usize>().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a non-negative integer, found '{t}'"))
        })
    }

    fn int(&mut self) -> Result<i64> {
        let t = self.word("an integer")?;
        t.parse::<i64>().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected an integer, found '{t}'"))
        })
    }

    fn header(&mut self) -> Result<()> {
        match self.word("MeshVersionFormatted")? {
            "MeshVersionFormatted" => {
                let v = self.uint()?;
                if v != 1 && v != 2 {
                    return Err(self.err(format!("unsupported MeshVersionFormatted {v}")));
                }
            }
            other => return Err(self.err(format!("expected MeshVersionFormatted, found '{other}'"))),
        }
        match self.word("Dimension")? {
            "Dimension" => {
                let d = self.uint()?;
                if d != 3 {
                    return Err(self.err(format!("only Dimension 3 is supported, found {d}")));
                }
            }
            other => return Err(self.err(format!("expected Dimension, found '{other}'"))),
        }
        Ok(())
    }
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut tk = Tokens::new(path, &text);
    tk.header()?;

    let mut nodes: Vec<Point> = Vec::new();
    let mut tets: Vec<[usize; 4]> = Vec::new();
    let mut seen_vertices = false;
    loop {
        let kw = tk.word("a section keyword or End")?;
        match kw {
            "End" => break,
            "Vertices" => {
                let n = tk.uint()?;
                nodes.reserve(n);
                for _ in 0..n {
                    let p = [tk.float()?, tk.float()?, tk.float()?];
                    tk.int()?;
                    nodes.push(p);
                }
                seen_vertices = true;
            }
            "Tetrahedra" | "Triangles" | "Edges" => {
                let arity = match kw {
                    "Tetrahedra" => 4,
                    "Triangles" => 3,
                    _ => 2,
                };
                if !seen_vertices {
                    return Err(tk.err(format!("{kw} section before Vertices")));
                }
                let n = tk.uint()?;
                for _ in 0..n {
                    let mut ids = [0usize; 4];
                    for slot in ids.iter_mut().take(arity) {
                        let i = tk.uint()?;
                        if i == 0 || i > nodes.len() {
                            tk.pos -= 1;
                            return Err(tk.err(format!("vertex index {i} out of range 1..={}", nodes.len())));
                        }
                        *slot = i - 1;
                    }
                    tk.int()?;
                    if arity == 4 {
                        tets.push(ids);
                    }
                }
            }
            "Corners" | "RequiredVertices" | "Ridges" => {
                let n = tk.uint()?;
                for _ in 0..n {
                    tk.uint()?;
                }
            }
            other => {
                tk.pos -= 1;
                return Err(tk.err(format!("malformed section header '{other}'")));
            }
        }
    }
    if nodes.is_empty() || tets.is_empty() {
        return Err(tk.err("mesh needs Vertices and Tetrahedra"));
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &nodes {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let domain = BoxDomain::new(lo, hi)?;
    Mesh::from_parts(nodes, tets, domain)
}

/// Faces belonging to exactly one tetrahedron, oriented outward.
pub fn boundary_faces(mesh: &Mesh) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
    for tet in &mesh.tets {
        // Faces opposite each vertex, ordered so the normal points away from it.
        let faces = [
            [tet[1], tet[2], tet[3]],
            [tet[0], tet[3], tet[2]],
            [tet[0], tet[1], tet[3]],
            [tet[0], tet[2], tet[1]],
        ];
        for f in faces {
            let mut key = f;
            key.sort_unstable();
            count.entry(key).or_insert((0, f)).0 += 1;
        }
    }
    let mut out: Vec<[usize; 3]> = count.into_values().filter(|(c, _)| *c == 1).map(|(_, f)| f).collect();
    out.sort_unstable();
    out
}

pub fn write_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::with_capacity(64 * (mesh.num_nodes() + mesh.num_tets()));
    s.push_str("MeshVersionFormatted 2\nDimension 3\n\nVertices\n");
    let _ = writeln!(s, "{}", mesh.num_nodes());
    for (p, &b) in mesh.nodes.iter().zip(&mesh.boundary) {
        let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], b as u8);
    }
    s.push_str("\nTetrahedra\n");
    let _ = writeln!(s, "{}", mesh.num_tets());
    for t in &mesh.tets {
        let _ = writeln!(s, "{} {} {} {} 0", t[0] + 1, t[1] + 1, t[2] + 1, t[3] + 1);
    }
    let faces = boundary_faces(mesh);
    s.push_str("\nTriangles\n");
    let _ = writeln!(s, "{}", faces.len());
    for f in &faces {
        let _ = writeln!(s, "{} {} {} 1", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s.push_str("\nEnd\n");
    fs::write(path, s)?;
    Ok(())
}

/// Nodal solution stored in a `.sol` file.
#[derive(Debug, Clone, PartialEq)]
pub enum SolData {
    Scalar(Vec<f64>),
    /// Symmetric tensors in Medit order `(m11, m12, m22, m13, m23, m33)`.
    Tensor(Vec<[f64; 6]>),
}

impl SolData {
    pub fn len(&self) -> usize {
        match self {
            SolData::Scalar(v) => v.len(),
            SolData::Tensor(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_sol(data: &SolData, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    s.push_str("MeshVersionFormatted 2\nDimension 3\n\nSolAtVertices\n");
    let _ = writeln!(s, "{}", data.len());
    match data {
        SolData::Scalar(v) => {
            s.push_str("1 1\n\n");
            for x in v {
                let _ = writeln!(s, "{x}");
            }
        }
        SolData::Tensor(v) => {
            s.push_str("1 3\n\n");
            for m in v {
                let _ = writeln!(s, "{} {} {} {} {} {}", m[0], m[1], m[2], m[3], m[4], m[5]);
            }
        }
    }
    s.push_str("\nEnd\n");
    fs::write(path, s)?;
    Ok(())
}

/// Reads a `.sol` file holding one scalar or symmetric-tensor field and checks
/// its length against `expected_nodes`.
pub fn read_sol(path: impl AsRef<Path>, expected_nodes: usize) -> Result<SolData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut tk = Tokens::new(path, &text);
    tk.header()?;
    let mut out = None;
    loop {
        match tk.word("SolAtVertices or End")? {
            "End" => break,
            "SolAtVertices" => {
                let n = tk.uint()?;
                if n != expected_nodes {
                    return Err(tk.err(format!("solution has {n} vertices but the mesh has {expected_nodes}")));
                }
                let nfields = tk.uint()?;
                if nfields != 1 {
                    return Err(tk.err(format!("expected exactly one field, found {nfields}")));
                }
                out = Some(match tk.uint()? {
                    1 => SolData::Scalar((0..n).map(|_| tk.float()).collect::<Result<_>>()?),
                    3 => {
                        let mut v = Vec::with_capacity(n);
                        for _ in 0..n {
                            v.push([
                                tk.float()?,
                                tk.float()?,
                                tk.float()?,
                                tk.float()?,
                                tk.float()?,
                                tk.float()?,
                            ]);
                        }
                        SolData::Tensor(v)
                    }
                    k => return Err(tk.err(format!("unsupported solution type {k}"))),
                });
            }
            other => {
                tk.pos -= 1;
                return Err(tk.err(format!("malformed section header '{other}'")));
            }
        }
    }
    out.ok_or_else(|| tk.err("no SolAtVertices section"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    #[test]
    fn mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.mesh");
        let mut m = build_box_mesh(BoxDomain::new([0.0; 3], [1.0; 3]).unwrap(), 2).unwrap();
        m.nodes[13][0] += 0.123456789012345;
        write_mesh(&m, &path).unwrap();
        let r = read_mesh(&path).unwrap();
        assert_eq!(r.num_nodes(), m.num_nodes());
        assert_eq!(r.tets, m.tets);
        assert_eq!(r.boundary, m.boundary);
        for (a, b) in r.nodes.iter().zip(&m.nodes) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 1e-12 * b[d].abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_cell_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.mesh");
        let m = build_box_mesh(BoxDomain::new([0.0; 3], [1.0; 3]).unwrap(), 1).unwrap();
        write_mesh(&m, &path).unwrap();
        let r = read_mesh(&path).unwrap();
        assert_eq!((r.num_nodes(), r.num_tets()), (8, 6));
        assert_eq!(boundary_faces(&m).len(), 12);
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn zero_index_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "bad.mesh",
            "MeshVersionFormatted 2\nDimension 3\nVertices\n4\n0 0 0 0\n1 0 0 0\n0 1 0 0\n0 0 1 0\nTetrahedra\n1\n0 2 3 4 0\nEnd\n",
        );
        let err = read_mesh(&p).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn dimension_two_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "flat.mesh",
            "MeshVersionFormatted 2\nDimension 2\nVertices\n0\nEnd\n",
        );
        let err = read_mesh(&p).unwrap_err().to_string();
        assert!(err.contains("Dimension 3"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "odd.mesh", "MeshVersionFormatted 2\nDimension 3\nVerts\n0\nEnd\n");
        assert!(read_mesh(&p).is_err());
    }

    #[test]
    fn identity_metric_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("id.sol");
        write_sol(&SolData::Tensor(vec![[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]; 8]), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| *l == "1 0 1 0 0 1").count(), 8);
        assert!(read_sol(&p, 8).is_ok());
        assert!(read_sol(&p, 9).is_err());
    }
}
