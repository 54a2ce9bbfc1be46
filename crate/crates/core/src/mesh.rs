//! Triangle meshes with per-vertex view-cluster provenance, plus ASCII OBJ
//! and PLY import/export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// Source view cluster (azimuth in degrees) of every vertex.
    pub provenance: Vec<i32>,
    pub fiducial_vertices: Option<[usize; 7]>,
}

impl HeadMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>, cluster: i32) -> Self {
        let provenance = vec![cluster; vertices.len()];
        Self {
            vertices,
            faces,
            provenance,
            fiducial_vertices: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.provenance.len() != n {
            return Err(Error::InvalidMesh(format!(
                "{} vertices but {} provenance entries",
                n,
                self.provenance.len()
            )));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!("face {i} index out of range")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {i} is degenerate")));
            }
        }
        if let Some(fid) = &self.fiducial_vertices {
            if fid.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh("fiducial vertex out of range".into()));
            }
        }
        if self.vertices.iter().any(|v| !v.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        Ok(())
    }

    /// Number of vertices per source cluster.
    pub fn provenance_histogram(&self) -> BTreeMap<i32, usize> {
        let mut h = BTreeMap::new();
        for &p in &self.provenance {
            *h.entry(p).or_insert(0) += 1;
        }
        h
    }

    /// Signed enclosed volume; positive when faces wind outward.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (
                    self.vertices[f[0]].coords,
                    self.vertices[f[1]].coords,
                    self.vertices[f[2]].coords,
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Flip all faces if the winding encloses negative volume.
    pub fn orient_outward(&mut self) {
        if self.signed_volume() < 0.0 {
            for f in &mut self.faces {
                f.swap(1, 2);
            }
        }
    }

    /// Area-weighted vertex normals following the face winding.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let (a, b, c) = (
                self.vertices[f[0]],
                self.vertices[f[1]],
                self.vertices[f[2]],
            );
            let n = (b - a).cross(&(c - a));
            for &v in f {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect()
    }

    /// Drop faces with repeated indices and vertices no face references.
    pub fn compact(&self) -> HeadMesh {
        let faces: Vec<[usize; 3]> = self
            .faces
            .iter()
            .copied()
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
        let mut used = vec![false; self.vertices.len()];
        for f in &faces {
            for &v in f {
                used[v] = true;
            }
        }
        if let Some(fid) = &self.fiducial_vertices {
            for &v in fid {
                used[v] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut out = HeadMesh::default();
        for (i, keep) in used.iter().enumerate() {
            if *keep {
                remap[i] = out.vertices.len();
                out.vertices.push(self.vertices[i]);
                out.provenance.push(self.provenance[i]);
            }
        }
        out.faces = faces
            .iter()
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .collect();
        out.fiducial_vertices = self.fiducial_vertices.map(|fid| fid.map(|v| remap[v]));
        out
    }

    /// Undirected edges, each listed once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        s.push_str("comment provenance is the source view cluster azimuth in degrees\n");
        if let Some(fid) = &self.fiducial_vertices {
            let list: Vec<String> = fid.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "comment fiducials {}", list.join(" "));
        }
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property double x\nproperty double y\nproperty double z\nproperty int provenance\n");
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (v, p) in self.vertices.iter().zip(&self.provenance) {
            let _ = writeln!(s, "{} {} {} {}", v.x, v.y, v.z, p);
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn parse_obj(text: &str) -> Result<HeadMesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad_line("obj", lineno, e))?;
                    if c.len() != 3 {
                        return Err(bad_line("obj", lineno, "vertex needs 3 coordinates"));
                    }
                    vertices.push(Point3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|e| bad_line("obj", lineno, e))?;
                            let n = vertices.len() as i64;
                            let resolved = if i < 0 { n + i } else { i - 1 };
                            if resolved < 0 || resolved >= n {
                                return Err(bad_line("obj", lineno, "face index out of range"));
                            }
                            Ok(resolved as usize)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad_line("obj", lineno, "face needs 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let mesh = HeadMesh::new(vertices, faces, 0);
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn parse_ply(text: &str) -> Result<HeadMesh> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(Error::InvalidMesh("missing ply magic".into()));
        }
        let mut n_vertices = 0usize;
        let mut n_faces = 0usize;
        let mut vertex_props: Vec<String> = Vec::new();
        let mut current = "";
        let mut fiducials = None;
        let mut element_order = Vec::new();
        for line in lines.by_ref() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(Error::InvalidMesh(format!("unsupported ply format {fmt}")))
                }
                ["comment", "fiducials", rest @ ..] => {
                    let idx: Vec<usize> = rest.iter().filter_map(|t| t.parse().ok()).collect();
                    if let Ok(arr) = <[usize; 7]>::try_from(idx) {
                        fiducials = Some(arr);
                    }
                }
                ["element", "vertex", n] => {
                    n_vertices = n.parse().map_err(|_| Error::InvalidMesh("bad vertex count".into()))?;
                    current = "vertex";
                    element_order.push("vertex");
                }
                ["element", "face", n] => {
                    n_faces = n.parse().map_err(|_| Error::InvalidMesh("bad face count".into()))?;
                    current = "face";
                    element_order.push("face");
                }
                ["element", ..] => {
                    current = "other";
                }
                ["property", "list", ..] => {}
                ["property", _, name] if current == "vertex" => vertex_props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        if element_order.first() == Some(&"face") {
            return Err(Error::InvalidMesh("faces before vertices are not supported".into()));
        }
        let col = |name: &str| vertex_props.iter().position(|p| p == name);
        let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::InvalidMesh("ply vertices need x, y, z".into())),
        };
        let pi = col("provenance");
        let mut vertices = Vec::with_capacity(n_vertices);
        let mut provenance = Vec::with_capacity(n_vertices);
        let mut body = lines.filter(|l| !l.trim().is_empty());
        for i in 0..n_vertices {
            let line = body
                .next()
                .ok_or_else(|| Error::InvalidMesh("truncated vertex list".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad_line("ply", i, e))?;
            if vals.len() < vertex_props.len() {
                return Err(bad_line("ply", i, "short vertex row"));
            }
            vertices.push(Point3::new(vals[xi], vals[yi], vals[zi]));
            provenance.push(pi.map(|p| vals[p] as i32).unwrap_or(0));
        }
        let mut faces = Vec::with_capacity(n_faces);
        for i in 0..n_faces {
            let line = body
                .next()
                .ok_or_else(|| Error::InvalidMesh("truncated face list".into()))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad_line("ply", i, e))?;
            let count = *vals.first().ok_or_else(|| bad_line("ply", i, "empty face"))?;
            if count < 3 || vals.len() < count + 1 {
                return Err(bad_line("ply", i, "malformed face"));
            }
            for k in 2..count {
                faces.push([vals[1], vals[k], vals[k + 1]]);
            }
        }
        let mesh = HeadMesh {
            vertices,
            faces,
            provenance,
            fiducial_vertices: fiducials,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Load an OBJ or PLY file, chosen by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<HeadMesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => Self::parse_obj(&text),
            Some("ply") => Self::parse_ply(&text),
            _ => Err(Error::InvalidMesh(format!(
                "unknown mesh extension: {}",
                path.display()
            ))),
        }
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ply())?;
        Ok(())
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }
}

fn bad_line(kind: &str, line: usize, what: impl std::fmt::Display) -> Error {
    Error::InvalidMesh(format!("{kind} line {}: {what}", line + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> HeadMesh {
        HeadMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            0,
        )
    }

    #[test]
    fn tetra_is_outward() {
        let m = tetra();
        assert!((m.signed_volume() - 1.0 / 6.0).abs() < 1e-12);
        let mut flipped = m.clone();
        for f in &mut flipped.faces {
            f.swap(0, 1);
        }
        flipped.orient_outward();
        assert!(flipped.signed_volume() > 0.0);
    }

    #[test]
    fn ply_round_trip_keeps_provenance() {
        let mut m = tetra();
        m.provenance = vec![0, 30, -60, 90];
        m.fiducial_vertices = Some([0, 1, 2, 3, 0, 1, 2]);
        let back = HeadMesh::parse_ply(&m.to_ply()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn obj_quads_are_fanned() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let m = HeadMesh::parse_obj(text).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(HeadMesh::parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn validate_rejects_degenerate_faces() {
        let mut m = tetra();
        m.faces.push([1, 1, 2]);
        assert!(m.validate().is_err());
        assert!(m.compact().validate().is_ok());
    }
}
