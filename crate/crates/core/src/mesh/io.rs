//! Mesh files.
//!
//! PLY is binary little-endian with `double x, y, z` vertices and a
//! `list uchar int vertex_indices` face element. OBJ holds `v x y z` lines
//! with shortest round-trip decimals and 1-based `f a b c` lines.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    /// Picks the format from a `.ply` or `.obj` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(MeshFormat::Ply),
            Some("obj") => Ok(MeshFormat::Obj),
            _ => Err(Error::InvalidInput(format!(
                "cannot infer mesh format of {}; use .ply or .obj",
                path.display()
            ))),
        }
    }
}

pub fn write_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let mut buf = Vec::new();
    match format {
        MeshFormat::Ply => {
            write!(
                buf,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
                 property double x\nproperty double y\nproperty double z\n\
                 element face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.faces.len()
            )
            .unwrap();
            for v in &mesh.vertices {
                for c in v.iter() {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
            for t in &mesh.faces {
                buf.push(3);
                for i in t {
                    let i = i32::try_from(*i).map_err(|_| Error::InvalidInput("mesh too large for PLY".into()))?;
                    buf.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                writeln!(buf, "v {} {} {}", v.x, v.y, v.z).unwrap();
            }
            for t in &mesh.faces {
                writeln!(buf, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mesh = match format {
        MeshFormat::Ply => read_ply(&mut r, path)?,
        MeshFormat::Obj => read_obj(r, path)?,
    };
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

fn read_ply(r: &mut impl BufRead, path: &Path) -> Result<TriangleMesh> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("PLY header not terminated"));
        }
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    let expect = |i: usize, s: &str| header.get(i).map(String::as_str) == Some(s);
    if !expect(0, "ply") || !expect(1, "format binary_little_endian 1.0") {
        return Err(bad("expected a binary little-endian PLY"));
    }
    let count = |prefix: &str| -> Result<usize> {
        header
            .iter()
            .find_map(|l| l.strip_prefix(prefix))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad(&format!("missing '{prefix}'")))
    };
    let nv = count("element vertex ")?;
    let nf = count("element face ")?;
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        if !expect(3 + i, &format!("property double {axis}")) {
            return Err(bad("vertex properties must be double x y z"));
        }
    }
    if !expect(7, "property list uchar int vertex_indices") {
        return Err(bad("faces must be 'list uchar int vertex_indices'"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != nv * 24 + nf * 13 {
        return Err(bad("PLY body length does not match the header"));
    }
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let vertices = (0..nv)
        .map(|v| Vector3::new(f64_at(24 * v), f64_at(24 * v + 8), f64_at(24 * v + 16)))
        .collect();
    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let o = nv * 24 + f * 13;
        if body[o] != 3 {
            return Err(bad("only triangle faces are supported"));
        }
        let idx = |k: usize| i32::from_le_bytes(body[o + 1 + 4 * k..o + 5 + 4 * k].try_into().unwrap());
        let t = [idx(0), idx(1), idx(2)];
        if t.iter().any(|i| *i < 0) {
            return Err(bad("negative face index"));
        }
        faces.push(t.map(|i| i as usize));
    }
    Ok(TriangleMesh { vertices, faces })
}

fn read_obj(r: impl BufRead, path: &Path) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = || Error::format(path, format!("line {}: cannot parse '{line}'", n + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                if c.len() != 3 {
                    return Err(bad());
                }
                mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| tok.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(bad());
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}
