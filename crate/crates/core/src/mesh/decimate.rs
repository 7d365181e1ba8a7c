use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::TriangleMesh;

#[derive(Debug)]
struct Candidate {
    cost: f64,
    u: usize,
    v: usize,
    version: (u64, u64),
    target: Vector3<f64>,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // min-heap on cost, ties broken by vertex ids
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.u.cmp(&self.u))
            .then_with(|| other.v.cmp(&self.v))
    }
}

struct State {
    verts: Vec<Vector3<f64>>,
    quadrics: Vec<Matrix4<f64>>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    vert_alive: Vec<bool>,
    version: Vec<u64>,
    boundary: Vec<bool>,
}

impl State {
    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        self.vert_faces[v]
            .iter()
            .flat_map(|f| self.faces[*f])
            .filter(|w| *w != v)
            .collect()
    }

    fn candidate(&self, u: usize, v: usize) -> Candidate {
        let q = self.quadrics[u] + self.quadrics[v];
        let cost = |p: &Vector3<f64>| {
            let h = Vector4::new(p.x, p.y, p.z, 1.0);
            (h.transpose() * q * h)[0].max(0.0)
        };
        let a: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
        let b = -Vector3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
        let mut options = vec![self.verts[u], self.verts[v], (self.verts[u] + self.verts[v]) / 2.0];
        if a.determinant().abs() > 1e-12 {
            if let Some(p) = a.lu().solve(&b) {
                if p.iter().all(|c| c.is_finite()) {
                    options.insert(0, p);
                }
            }
        }
        let (target, c) = options
            .into_iter()
            .map(|p| (p, cost(&p)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        let (u, v) = (u.min(v), u.max(v));
        Candidate {
            cost: c,
            u,
            v,
            version: (self.version[u], self.version[v]),
            target,
        }
    }

    /// Collapsing `v` into `u` at `p` keeps the surface a manifold with the
    /// same topology and flips no face.
    fn legal(&self, u: usize, v: usize, p: &Vector3<f64>) -> bool {
        if self.boundary[u] || self.boundary[v] {
            return false;
        }
        let shared = self.vert_faces[u].intersection(&self.vert_faces[v]).count();
        let common = self.neighbors(u).intersection(&self.neighbors(v)).count();
        if shared != 2 || common != 2 {
            return false;
        }
        let mut triples = HashSet::new();
        for (w, other) in [(u, v), (v, u)] {
            for f in &self.vert_faces[w] {
                let t = self.faces[*f];
                if t.contains(&other) {
                    continue;
                }
                let before = normal(&t.map(|i| self.verts[i]));
                let moved = t.map(|i| if i == u || i == v { *p } else { self.verts[i] });
                let after = normal(&moved);
                if after.norm() < 1e-14 || before.dot(&after) <= 0.0 {
                    return false;
                }
                let mut key = t.map(|i| if i == v { u } else { i });
                key.sort_unstable();
                if !triples.insert(key) {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, u: usize, v: usize, p: Vector3<f64>) -> usize {
        let mut removed = 0;
        for f in std::mem::take(&mut self.vert_faces[v]) {
            if self.faces[f].contains(&u) {
                self.face_alive[f] = false;
                removed += 1;
                for w in self.faces[f] {
                    self.vert_faces[w].remove(&f);
                }
            } else {
                for w in self.faces[f].iter_mut() {
                    if *w == v {
                        *w = u;
                    }
                }
                self.vert_faces[u].insert(f);
            }
        }
        self.verts[u] = p;
        self.quadrics[u] = self.quadrics[u] + self.quadrics[v];
        self.vert_alive[v] = false;
        self.version[u] += 1;
        removed
    }
}

fn normal(t: &[Vector3<f64>; 3]) -> Vector3<f64> {
    (t[1] - t[0]).cross(&(t[2] - t[0]))
}

/// Quadric-error edge collapse until at most `target_faces` remain or no
/// legal collapse is left. Boundary vertices are never moved; collapses that
/// would break the manifold, change topology or flip a face are skipped.
/// Returns the input unchanged when it already fits.
pub fn decimate(mesh: &TriangleMesh, target_faces: usize) -> TriangleMesh {
    if mesh.faces.len() <= target_faces {
        return mesh.clone();
    }
    let n = mesh.vertices.len();
    let mut quadrics = vec![Matrix4::zeros(); n];
    let mut vert_faces = vec![BTreeSet::new(); n];
    for (f, t) in mesh.faces.iter().enumerate() {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        let nrm = (b - a).cross(&(c - a));
        if nrm.norm() > 0.0 {
            let nrm = nrm.normalize();
            let plane = Vector4::new(nrm.x, nrm.y, nrm.z, -nrm.dot(&a));
            let k = plane * plane.transpose();
            for i in t {
                quadrics[*i] += k;
            }
        }
        for i in t {
            vert_faces[*i].insert(f);
        }
    }
    let mut boundary = vec![false; n];
    for ((a, b), c) in mesh.edge_counts() {
        if c != 2 {
            boundary[a] = true;
            boundary[b] = true;
        }
    }
    let mut st = State {
        verts: mesh.vertices.clone(),
        quadrics,
        faces: mesh.faces.clone(),
        face_alive: vec![true; mesh.faces.len()],
        vert_faces,
        vert_alive: vec![true; n],
        version: vec![0; n],
        boundary,
    };

    let mut heap = BinaryHeap::new();
    let mut edges: Vec<(usize, usize)> = mesh.edge_counts().into_keys().collect();
    edges.sort_unstable();
    for (a, b) in edges {
        heap.push(st.candidate(a, b));
    }

    let mut faces_left = mesh.faces.len();
    while faces_left > target_faces {
        let Some(c) = heap.pop() else { break };
        let (u, v) = (c.u, c.v);
        if !st.vert_alive[u] || !st.vert_alive[v] || c.version != (st.version[u], st.version[v]) {
            continue;
        }
        if !st.legal(u, v, &c.target) {
            continue;
        }
        faces_left -= st.collapse(u, v, c.target);
        for w in st.neighbors(u) {
            heap.push(st.candidate(u, w));
        }
    }

    let faces = st
        .faces
        .iter()
        .zip(&st.face_alive)
        .filter(|(_, alive)| **alive)
        .map(|(t, _)| *t)
        .collect();
    let mut out = TriangleMesh {
        vertices: st.verts,
        faces,
    };
    out.compact();
    out
}
