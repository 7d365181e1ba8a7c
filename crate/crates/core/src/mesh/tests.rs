use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::gaussians::{logit, Gaussian};
use crate::geometry::{LogScale, Rotation};

fn cloud_of(gs: &[(Vector3<f64>, f64, f64)]) -> GaussianCloud {
    let mut c = GaussianCloud::new(0).unwrap();
    for (mu, sigma, alpha) in gs {
        c.push(Gaussian {
            position: *mu,
            rotation: Rotation::IDENTITY,
            log_scale: LogScale([sigma.ln(); 3]),
            opacity_logit: logit(*alpha),
            sh: vec![0.0; 3],
        })
        .unwrap();
    }
    c
}

fn sphere_field(res: usize, r: f64) -> ScalarField {
    // linear falloff crossing the iso level exactly at radius r
    ScalarField::from_fn([res; 3], Aabb::cube(1.0), |p| (DEFAULT_ISO + r - p.norm()).max(0.0)).unwrap()
}

fn mean_radius(m: &TriangleMesh) -> f64 {
    m.vertices.iter().map(|v| v.norm()).sum::<f64>() / m.vertices.len() as f64
}

fn radius_error(m: &TriangleMesh, r: f64) -> (f64, f64) {
    let errs: Vec<f64> = m.vertices.iter().map(|v| (v.norm() - r).abs()).collect();
    (
        errs.iter().sum::<f64>() / errs.len() as f64,
        errs.iter().copied().fold(0.0, f64::max),
    )
}

#[test]
fn field_of_single_gaussian() {
    let empty = opacity_field(&GaussianCloud::new(0).unwrap(), &Aabb::cube(1.0), [5; 3]).unwrap();
    assert!(empty.values.iter().all(|v| *v == 0.0));

    // nodes at multiples of 0.25; sigma 0.25 puts a node at 1 sigma
    let c = cloud_of(&[(Vector3::zeros(), 0.25, 0.8)]);
    let f = opacity_field(&c, &Aabb::cube(1.0), [9; 3]).unwrap();
    assert!((f.get(4, 4, 4) - 0.8).abs() < 1e-9);
    assert!((f.get(5, 4, 4) - 0.8 * (-0.5f64).exp()).abs() < 1e-6);
    assert!((f.get(4, 6, 4) - 0.8 * (-2.0f64).exp()).abs() < 1e-6);
    // 4 sigma lies past the truncation radius
    assert_eq!(f.get(8, 4, 4), 0.0);

    let filtered = opacity_field_with(&c, &Aabb::cube(1.0), [9; 3], 0.9).unwrap();
    assert!(filtered.values.iter().all(|v| *v == 0.0));
}

#[test]
fn field_validation() {
    assert!(ScalarField::new([1, 2, 2], Aabb::cube(1.0), vec![0.0; 4]).is_err());
    assert!(ScalarField::new([2, 2, 2], Aabb::cube(1.0), vec![0.0; 7]).is_err());
    assert!(ScalarField::new([2, 2, 2], Aabb::cube(1.0), vec![-1.0; 8]).is_err());
}

#[test]
fn empty_iso_surfaces() {
    let zero = ScalarField::new([4; 3], Aabb::cube(1.0), vec![0.0; 64]).unwrap();
    assert!(marching_cubes(&zero, DEFAULT_ISO).is_empty());
    let f = sphere_field(16, 0.5);
    assert!(marching_cubes(&f, 10.0).is_empty());
}

#[test]
fn sphere_iso_surface() {
    let f = sphere_field(64, 0.6);
    let m = marching_cubes(&f, DEFAULT_ISO);
    m.validate().unwrap();
    assert!(m.is_watertight());
    assert_eq!(m.euler_characteristic(), 2);
    assert_eq!(m.components(), 1);
    let h = f.spacing().x;
    let (mean, max) = radius_error(&m, 0.6);
    assert!(max <= 1.5 * h, "max {max} vs h {h}");
    assert!(mean < 0.1 * h, "mean {mean}");
    // outward winding encloses positive volume close to the ball's
    let vol = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
    assert!((m.signed_volume() - vol).abs() < 0.02 * vol, "{}", m.signed_volume());
}

#[test]
fn sphere_error_shrinks_with_resolution() {
    let coarse = radius_error(&marching_cubes(&sphere_field(32, 0.6), DEFAULT_ISO), 0.6);
    let fine = radius_error(&marching_cubes(&sphere_field(64, 0.6), DEFAULT_ISO), 0.6);
    assert!(fine.1 < coarse.1, "{coarse:?} -> {fine:?}");
    assert!(fine.0 < coarse.0, "{coarse:?} -> {fine:?}");
}

#[test]
fn separate_blobs_stay_separate() {
    let f = ScalarField::from_fn([40; 3], Aabb::cube(1.0), |p| {
        let a = (p - Vector3::new(-0.45, 0.0, 0.0)).norm();
        let b = (p - Vector3::new(0.45, 0.0, 0.0)).norm();
        (DEFAULT_ISO + 0.3 - a.min(b)).max(0.0)
    })
    .unwrap();
    let m = marching_cubes(&f, DEFAULT_ISO);
    assert!(m.is_watertight());
    assert_eq!(m.components(), 2);
    assert_eq!(m.euler_characteristic(), 4);
    let s = laplacian_smooth(&m, 5, 0.5);
    assert_eq!(s.components(), 2);
    let d = decimate(&s, m.faces.len() / 4);
    assert!(d.is_watertight());
    assert_eq!(d.components(), 2);
    assert_eq!(d.euler_characteristic(), 4);
}

#[test]
fn gaussian_blob_meshes() {
    let c = cloud_of(&[(Vector3::zeros(), 0.3, 0.9)]);
    let cfg = MeshConfig {
        resolution: 32,
        target_faces: 500,
        ..Default::default()
    };
    let m = extract_mesh(&c, &Aabb::cube(1.0), &cfg).unwrap();
    assert!(m.is_watertight());
    assert!(m.faces.len() <= 500);
    // 0.9 exp(-r^2 / (2 0.09)) = 0.3
    let r = (2.0 * 0.09 * 3f64.ln()).sqrt();
    assert!((mean_radius(&m) - r).abs() < 0.05, "{} vs {r}", mean_radius(&m));
    let prefiltered = extract_mesh(&cloud_of(&[(Vector3::zeros(), 0.3, 0.2)]), &Aabb::cube(1.0), &MeshConfig {
        prefilter: true,
        ..cfg
    })
    .unwrap();
    assert!(prefiltered.is_empty());
}

#[test]
fn smoothing_shrinks_sphere() {
    let m = marching_cubes(&sphere_field(32, 0.6), DEFAULT_ISO);
    assert_eq!(laplacian_smooth(&m, 0, 0.5), m);
    let mut prev = mean_radius(&m);
    let mut cur = m.clone();
    for _ in 0..5 {
        cur = laplacian_smooth(&cur, 1, 0.5);
        let r = mean_radius(&cur);
        assert!(r < prev, "{r} !< {prev}");
        prev = r;
    }
    assert_eq!(cur.faces, m.faces);
    assert_eq!(laplacian_smooth(&m, 5, 0.5), cur);
}

#[test]
fn smoothing_keeps_flat_grid_planar() {
    let n = 6;
    let mut vertices = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let jitter = ((i * 7 + j * 3) % 5) as f64 * 0.03;
            vertices.push(Vector3::new(i as f64 + jitter, j as f64 - jitter, 2.0));
        }
    }
    let mut faces = Vec::new();
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            faces.push([a, a + 1, a + n + 1]);
            faces.push([a, a + n + 1, a + n]);
        }
    }
    let m = TriangleMesh::new(vertices, faces).unwrap();
    let s = laplacian_smooth(&m, 5, 0.5);
    assert!(s.vertices.iter().all(|v| (v.z - 2.0).abs() < 1e-9));
}

#[test]
fn icosphere_is_closed() {
    let s = icosphere(3);
    assert_eq!(s.faces.len(), 1280);
    assert!(s.is_watertight());
    assert_eq!(s.euler_characteristic(), 2);
    assert!(s.signed_volume() > 0.0);
}

#[test]
fn decimation_of_icosphere() {
    let s = icosphere(5);
    assert_eq!(s.faces.len(), 20_480);
    assert_eq!(decimate(&s, 20_480), s);
    let d = decimate(&s, 5_000);
    d.validate().unwrap();
    assert!(d.faces.len() <= 5_000 && d.faces.len() > 4_000, "{}", d.faces.len());
    assert!(d.is_watertight());
    assert_eq!(d.euler_characteristic(), 2);
    assert_eq!(d.components(), 1);
    let h = hausdorff(&s, &d);
    assert!(h <= 0.02 * s.bounding_diagonal(), "hausdorff {h}");
    assert!(d.signed_volume() > 0.0);
}

#[test]
fn decimation_keeps_open_boundary() {
    let n = 8;
    let mut vertices = Vec::new();
    for j in 0..n {
        for i in 0..n {
            vertices.push(Vector3::new(i as f64, j as f64, 0.0));
        }
    }
    let mut faces = Vec::new();
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            faces.push([a, a + 1, a + n + 1]);
            faces.push([a, a + n + 1, a + n]);
        }
    }
    let m = TriangleMesh::new(vertices, faces).unwrap();
    let d = decimate(&m, 10);
    let boundary = |m: &TriangleMesh| m.edge_counts().values().filter(|c| **c == 1).count();
    assert!(d.faces.len() < m.faces.len());
    assert_eq!(boundary(&d), boundary(&m));
    assert!(d.vertices.iter().all(|v| v.z.abs() < 1e-9));
}

#[test]
fn closest_point_cases() {
    let (a, b, c) = (Vector3::zeros(), Vector3::x(), Vector3::y());
    let q = |p: Vector3<f64>| closest_on_triangle(&p, &a, &b, &c);
    assert!((q(Vector3::new(0.2, 0.2, 1.0)) - Vector3::new(0.2, 0.2, 0.0)).norm() < 1e-12);
    assert_eq!(q(Vector3::new(-1.0, -1.0, 0.0)), a);
    assert_eq!(q(Vector3::new(0.5, -1.0, 0.0)), Vector3::new(0.5, 0.0, 0.0));
    assert!((q(Vector3::new(1.0, 1.0, 0.0)) - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
}

#[test]
fn mesh_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = marching_cubes(&sphere_field(12, 0.5), DEFAULT_ISO);
    for fmt in [MeshFormat::Ply, MeshFormat::Obj] {
        let p = dir.path().join(format!("m.{fmt:?}").to_lowercase());
        assert_eq!(MeshFormat::from_path(&p).unwrap(), fmt);
        write_mesh(&m, &p, fmt).unwrap();
        let back = read_mesh(&p, fmt).unwrap();
        assert_eq!(back.faces, m.faces);
        for (x, y) in back.vertices.iter().zip(&m.vertices) {
            assert!((x - y).norm() < 1e-12);
        }
        write_mesh(&TriangleMesh::default(), &p, fmt).unwrap();
        assert!(read_mesh(&p, fmt).unwrap().is_empty());
    }
    assert!(MeshFormat::from_path(Path::new("a.stl")).is_err());
}

#[test]
fn obj_uses_one_based_indices() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.obj");
    let m = TriangleMesh::new(vec![Vector3::zeros(), Vector3::x(), Vector3::new(0.0, 0.5, 0.25)], vec![[0, 1, 2]]).unwrap();
    write_mesh(&m, &p, MeshFormat::Obj).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "v 0 0 0\nv 1 0 0\nv 0 0.5 0.25\nf 1 2 3\n");
    std::fs::write(&p, "v 0 0 0\nf 0 1 2\n").unwrap();
    assert!(read_mesh(&p, MeshFormat::Obj).is_err());
}

use std::path::Path;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_closed_fields_give_watertight_meshes(
        inner in proptest::collection::vec(0.0..1.0f64, 27),
        iso in 0.05..0.95f64,
    ) {
        // a zero border guarantees the surface closes inside the bounds
        let mut values = vec![0.0; 125];
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    values[((k + 1) * 5 + j + 1) * 5 + i + 1] = inner[(k * 3 + j) * 3 + i];
                }
            }
        }
        let f = ScalarField::new([5; 3], Aabb::cube(1.0), values).unwrap();
        let m = marching_cubes(&f, iso);
        m.validate().unwrap();
        if !m.is_empty() {
            prop_assert!(m.is_watertight());
            let s = laplacian_smooth(&m, 3, 0.5);
            prop_assert_eq!(s.components(), m.components());
        }
    }

    #[test]
    fn smoothing_stays_in_the_bounding_box(subdiv in 0usize..3, factor in 0.0..1.0f64, it in 0usize..6) {
        let m = icosphere(subdiv);
        let s = laplacian_smooth(&m, it, factor);
        for v in &s.vertices {
            prop_assert!(v.iter().all(|c| c.abs() <= 1.0 + 1e-12));
        }
        prop_assert_eq!(&s.faces, &m.faces);
    }

    #[test]
    fn decimation_never_increases_faces(target in 0usize..400) {
        let m = icosphere(2);
        let d = decimate(&m, target);
        prop_assert!(d.faces.len() <= m.faces.len());
        prop_assert!(d.is_watertight());
        prop_assert_eq!(d.components(), 1);
        prop_assert_eq!(d.euler_characteristic(), 2);
    }
}
