use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::tables::TRI_TABLE;
use super::{ScalarField, TriangleMesh};

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Iso-surface `field = iso` with linear edge interpolation. Densities above
/// `iso` are inside; faces wind counter-clockwise seen from outside.
/// Vertices are shared between cells, so closed surfaces come out watertight.
/// An `iso` outside the field's range gives an empty mesh.
pub fn marching_cubes(field: &ScalarField, iso: f64) -> TriangleMesh {
    let (lo, hi) = field.range();
    if !(iso >= lo && iso < hi) {
        return TriangleMesh::default();
    }
    let [nx, ny, nz] = field.res;
    let edge_id = |i: usize, j: usize, k: usize, axis: usize| ((k * ny + j) * nx + i) * 3 + axis;

    // triangles as global lattice-edge ids, slab by slab in z order
    let slabs: Vec<Vec<[usize; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut case = 0usize;
                    for (c, o) in CORNERS.iter().enumerate() {
                        if field.get(i + o[0], j + o[1], k + o[2]) <= iso {
                            case |= 1 << c;
                        }
                    }
                    let row = &TRI_TABLE[case];
                    for t in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                        let ids = [t[0], t[1], t[2]].map(|e| {
                            let [a, b] = EDGES[e as usize].map(|c| CORNERS[c]);
                            let axis = (0..3).find(|d| a[*d] != b[*d]).unwrap();
                            let base = if a[axis] < b[axis] { a } else { b };
                            edge_id(i + base[0], j + base[1], k + base[2], axis)
                        });
                        tris.push(ids);
                    }
                }
            }
            tris
        })
        .collect();

    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(slabs.iter().map(Vec::len).sum());
    for tri in slabs.into_iter().flatten() {
        let face = tri.map(|id| {
            *index.entry(id).or_insert_with(|| {
                vertices.push(edge_point(field, id, iso));
                vertices.len() - 1
            })
        });
        faces.push(face);
    }
    TriangleMesh { vertices, faces }
}

fn edge_point(field: &ScalarField, id: usize, iso: f64) -> Vector3<f64> {
    let [nx, ny, _] = field.res;
    let axis = id % 3;
    let n = id / 3;
    let (i, j, k) = (n % nx, (n / nx) % ny, n / (nx * ny));
    let mut o = [i, j, k];
    o[axis] += 1;
    let (v0, v1) = (field.get(i, j, k), field.get(o[0], o[1], o[2]));
    let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
    let p0 = field.node(i, j, k);
    let p1 = field.node(o[0], o[1], o[2]);
    p0 + (p1 - p0) * t
}
