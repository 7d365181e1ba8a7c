//! Mesh extraction from a Gaussian cloud: opacity field sampling, marching
//! cubes, Laplacian smoothing, quadric decimation and PLY/OBJ output.

mod decimate;
mod io;
mod marching;
mod tables;

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::Aabb;

pub use decimate::decimate;
pub use io::{read_mesh, write_mesh, MeshFormat};
pub use marching::marching_cubes;

/// Default iso level and opacity prefilter threshold.
pub const DEFAULT_ISO: f64 = 0.3;

/// Densities on a regular lattice whose corner nodes sit on the bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    /// Node count per axis.
    pub res: [usize; 3],
    pub bounds: Aabb,
    /// Index `(k * ny + j) * nx + i` for node `(i, j, k)`.
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(res: [usize; 3], bounds: Aabb, values: Vec<f64>) -> Result<Self> {
        if res.iter().any(|r| *r < 2) {
            return Err(Error::InvalidInput("field resolution must be >= 2 per axis".into()));
        }
        if values.len() != res[0] * res[1] * res[2] {
            return Err(Error::ShapeMismatch(format!(
                "field {res:?} needs {} values, got {}",
                res[0] * res[1] * res[2],
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("field values must be finite and >= 0".into()));
        }
        Ok(ScalarField { res, bounds, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(res: [usize; 3], bounds: Aabb, f: impl Fn(&Vector3<f64>) -> f64 + Sync) -> Result<Self> {
        let probe = ScalarField {
            res,
            bounds,
            values: Vec::new(),
        };
        if res.iter().any(|r| *r < 2) {
            return Err(Error::InvalidInput("field resolution must be >= 2 per axis".into()));
        }
        let values = (0..res[0] * res[1] * res[2])
            .into_par_iter()
            .map(|n| {
                let i = n % res[0];
                let j = (n / res[0]) % res[1];
                let k = n / (res[0] * res[1]);
                f(&probe.node(i, j, k))
            })
            .collect();
        ScalarField::new(res, bounds, values)
    }

    pub fn spacing(&self) -> Vector3<f64> {
        let s = self.bounds.size();
        Vector3::new(
            s.x / (self.res[0] - 1) as f64,
            s.y / (self.res[1] - 1) as f64,
            s.z / (self.res[2] - 1) as f64,
        )
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let h = self.spacing();
        Vector3::new(
            self.bounds.min[0] + i as f64 * h.x,
            self.bounds.min[1] + j as f64 * h.y,
            self.bounds.min[2] + k as f64 * h.z,
        )
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.res[1] + j) * self.res[0] + i]
    }

    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }
}

/// `sum_i alpha_i exp(-d_i^2 / 2)` with `d_i` the Mahalanobis distance to
/// Gaussian `i`, truncated at `d_i = 3`.
pub fn opacity_field(cloud: &GaussianCloud, bounds: &Aabb, res: [usize; 3]) -> Result<ScalarField> {
    opacity_field_with(cloud, bounds, res, 0.0)
}

/// Like [`opacity_field`], skipping Gaussians with opacity below `min_opacity`.
pub fn opacity_field_with(
    cloud: &GaussianCloud,
    bounds: &Aabb,
    res: [usize; 3],
    min_opacity: f64,
) -> Result<ScalarField> {
    cloud.validate()?;
    let mut field = ScalarField::new(res, *bounds, vec![0.0; res[0] * res[1] * res[2]])?;
    let h = field.spacing();
    let lo = Vector3::from(bounds.min);

    struct Kernel {
        mu: Vector3<f64>,
        inv: nalgebra::Matrix3<f64>,
        alpha: f64,
        lo: [usize; 3],
        hi: [usize; 3],
    }
    let mut kernels = Vec::new();
    for g in 0..cloud.len() {
        let alpha = cloud.opacity(g);
        if alpha < min_opacity || alpha <= 0.0 {
            continue;
        }
        let cov = cloud.covariance(g);
        let Some(inv) = cov.try_inverse() else {
            continue;
        };
        let mu = cloud.position(g);
        let mut lo_i = [0; 3];
        let mut hi_i = [0; 3];
        let mut inside = true;
        for a in 0..3 {
            let r = 3.0 * cov[(a, a)].sqrt();
            let a0 = ((mu[a] - r - lo[a]) / h[a]).ceil().max(0.0);
            let a1 = ((mu[a] + r - lo[a]) / h[a]).floor().min((res[a] - 1) as f64);
            if a1 < a0 {
                inside = false;
                break;
            }
            lo_i[a] = a0 as usize;
            hi_i[a] = a1 as usize;
        }
        if inside {
            kernels.push(Kernel {
                mu,
                inv,
                alpha,
                lo: lo_i,
                hi: hi_i,
            });
        }
    }

    let slice = res[0] * res[1];
    field.values.par_chunks_mut(slice).enumerate().for_each(|(k, out)| {
        let z = lo.z + k as f64 * h.z;
        for g in kernels.iter().filter(|g| (g.lo[2]..=g.hi[2]).contains(&k)) {
            for j in g.lo[1]..=g.hi[1] {
                for i in g.lo[0]..=g.hi[0] {
                    let d = Vector3::new(lo.x + i as f64 * h.x, lo.y + j as f64 * h.y, z) - g.mu;
                    let m = d.dot(&(g.inv * d));
                    if m <= 9.0 {
                        out[j * res[0] + i] += g.alpha * (-0.5 * m).exp();
                    }
                }
            }
        }
    });
    Ok(field)
}

/// Box around every Gaussian's 3-sigma ellipsoid.
pub fn cloud_bounds(cloud: &GaussianCloud) -> Result<Aabb> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot bound an empty cloud".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in 0..cloud.len() {
        let mu = cloud.position(g);
        let cov = cloud.covariance(g);
        for a in 0..3 {
            let r = 3.0 * cov[(a, a)].sqrt();
            lo[a] = lo[a].min(mu[a] - r);
            hi[a] = hi[a].max(mu[a] + r);
        }
    }
    Aabb::new(lo, hi)
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let m = TriangleMesh { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (f, t) in self.faces.iter().enumerate() {
            if t.iter().any(|v| *v >= self.vertices.len()) {
                return Err(Error::InvalidInput(format!("face {f} indexes past the vertex list")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("face {f} repeats a vertex")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("mesh vertices must be finite".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Number of faces using each undirected edge.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.faces {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_counts().values().all(|c| *c == 2)
    }

    /// `V - E + F` over the vertices referenced by faces.
    pub fn euler_characteristic(&self) -> i64 {
        let used: BTreeSet<usize> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Number of edge-connected face groups.
    pub fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.faces {
            for e in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[e]));
                parent[a.max(b)] = a.min(b);
            }
        }
        let roots: BTreeSet<usize> = self.faces.iter().map(|t| find(&mut parent, t[0])).collect();
        roots.len()
    }

    /// Enclosed volume; positive when faces wind counter-clockwise seen
    /// from outside.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounding_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = self.vertices[0];
        let mut hi = lo;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }

    /// Sorted, deduplicated neighbor lists.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.vertices.len()];
        for t in &self.faces {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Drops vertices no face references.
    pub fn compact(&mut self) {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        for t in &mut self.faces {
            for v in t.iter_mut() {
                if map[*v] == usize::MAX {
                    map[*v] = verts.len();
                    verts.push(self.vertices[*v]);
                }
                *v = map[*v];
            }
        }
        self.vertices = verts;
    }
}

/// Umbrella-weight Laplacian smoothing: each iteration moves every vertex
/// by `factor * (neighbor mean - vertex)`. Isolated vertices stay put.
pub fn laplacian_smooth(mesh: &TriangleMesh, iterations: usize, factor: f64) -> TriangleMesh {
    let nbrs = mesh.vertex_neighbors();
    let mut out = mesh.clone();
    for _ in 0..iterations {
        let prev = out.vertices.clone();
        for (v, n) in nbrs.iter().enumerate() {
            if n.is_empty() {
                continue;
            }
            let mean = n.iter().map(|u| prev[*u]).sum::<Vector3<f64>>() / n.len() as f64;
            out.vertices[v] = prev[v] + factor * (mean - prev[v]);
        }
    }
    out
}

/// Subdivided icosahedron on the unit sphere, `20 * 4^subdivisions` faces,
/// outward winding.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vector3::from(*v).normalize())
    .collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vector3<f64>>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a] + vs[b]) / 2.0).normalize());
                vs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh { vertices, faces }
}

/// Closest point on triangle `abc` to `p`.
fn closest_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn point_mesh_distance(p: &Vector3<f64>, mesh: &TriangleMesh, spheres: &[(Vector3<f64>, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for (t, (c, r)) in mesh.faces.iter().zip(spheres) {
        if (p - c).norm() - r >= best {
            continue;
        }
        let [a, b, cc] = t.map(|i| mesh.vertices[i]);
        best = best.min((p - closest_on_triangle(p, &a, &b, &cc)).norm());
    }
    best
}

fn samples(mesh: &TriangleMesh) -> Vec<Vector3<f64>> {
    let mut s = mesh.vertices.clone();
    for t in &mesh.faces {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        s.push((a + b + c) / 3.0);
        s.extend([(a + b) / 2.0, (b + c) / 2.0, (c + a) / 2.0]);
    }
    s
}

/// Symmetric Hausdorff distance estimated from vertices, face centroids and
/// edge midpoints of each mesh against the exact surface of the other.
pub fn hausdorff(a: &TriangleMesh, b: &TriangleMesh) -> f64 {
    let one_sided = |x: &TriangleMesh, y: &TriangleMesh| {
        let spheres: Vec<_> = y
            .faces
            .iter()
            .map(|t| {
                let [p, q, r] = t.map(|i| y.vertices[i]);
                let c = (p + q + r) / 3.0;
                (c, (p - c).norm().max((q - c).norm()).max((r - c).norm()))
            })
            .collect();
        samples(x)
            .par_iter()
            .map(|p| point_mesh_distance(p, y, &spheres))
            .reduce(|| 0.0, f64::max)
    };
    one_sided(a, b).max(one_sided(b, a))
}

/// Mesh extraction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Lattice nodes per axis.
    pub resolution: usize,
    pub iso: f64,
    /// Drop Gaussians with opacity below `iso` before sampling the field.
    pub prefilter: bool,
    pub smooth_iterations: usize,
    pub smooth_factor: f64,
    pub target_faces: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            resolution: 128,
            iso: DEFAULT_ISO,
            prefilter: false,
            smooth_iterations: 5,
            smooth_factor: 0.5,
            target_faces: 100_000,
        }
    }
}

/// Field sampling, iso-surface, smoothing and decimation in sequence.
pub fn extract_mesh(cloud: &GaussianCloud, bounds: &Aabb, cfg: &MeshConfig) -> Result<TriangleMesh> {
    let res = [cfg.resolution; 3];
    let floor = if cfg.prefilter { cfg.iso } else { 0.0 };
    let field = opacity_field_with(cloud, bounds, res, floor)?;
    let mesh = marching_cubes(&field, cfg.iso);
    let mesh = laplacian_smooth(&mesh, cfg.smooth_iterations, cfg.smooth_factor);
    Ok(decimate(&mesh, cfg.target_faces))
}

#[cfg(test)]
mod tests;
