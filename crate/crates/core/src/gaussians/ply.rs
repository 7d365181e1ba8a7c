//! Binary little-endian PLY storage for Gaussian clouds.
//!
//! Properties, in order: `x y z rot_0..rot_3 scale_0..scale_2 opacity
//! f_dc_0..f_dc_2 f_rest_0..`. Scales are log standard deviations, opacity is
//! a logit, `f_rest_{c * (B - 1) + (k - 1)}` holds SH coefficient `k` of
//! channel `c`. The loader accepts `float` or `double` properties in any
//! order and ignores properties it does not know (such as normals).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{coeff_count, GaussianCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PlyScalar {
    Float,
    #[default]
    Double,
}

impl PlyScalar {
    fn name(self) -> &'static str {
        match self {
            PlyScalar::Float => "float",
            PlyScalar::Double => "double",
        }
    }
}

fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    let rest = 3 * (coeff_count(degree) - 1);
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names
}

/// Values for Gaussian `i` in property order.
fn row(cloud: &GaussianCloud, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&cloud.positions[3 * i..3 * i + 3]);
    out.extend_from_slice(&cloud.rotations[4 * i..4 * i + 4]);
    out.extend_from_slice(&cloud.log_scales[3 * i..3 * i + 3]);
    out.push(cloud.opacity_logits[i]);
    let b = coeff_count(cloud.sh_degree);
    let sh = cloud.sh_coeffs(i);
    for c in 0..3 {
        out.push(sh[c]);
    }
    for c in 0..3 {
        for k in 1..b {
            out.push(sh[k * 3 + c]);
        }
    }
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    save_ply_with(cloud, path, PlyScalar::Double)
}

pub fn save_ply_with(cloud: &GaussianCloud, path: impl AsRef<Path>, scalar: PlyScalar) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let names = property_names(cloud.sh_degree);
    let mut buf = Vec::new();
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    )
    .unwrap();
    for n in &names {
        writeln!(buf, "property {} {n}", scalar.name()).unwrap();
    }
    buf.extend_from_slice(b"end_header\n");
    let mut vals = Vec::with_capacity(names.len());
    for i in 0..cloud.len() {
        row(cloud, i, &mut vals);
        for v in &vals {
            match scalar {
                PlyScalar::Float => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                PlyScalar::Double => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |m: &str| Error::format(path, m);

    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| fmt("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fmt("header is not UTF-8"))?;
    let body = &bytes[header_end + marker.len()..];

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(fmt("missing ply magic"));
    }
    let mut count = None;
    let mut props: Vec<(String, usize)> = Vec::new(); // name, byte width
    let mut in_vertex = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(fmt(&format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| fmt("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                let width = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    other => return Err(fmt(&format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), width));
            }
            ["property", ..] => {}
            _ => return Err(fmt(&format!("unrecognized header line '{line}'"))),
        }
    }
    let n = count.ok_or_else(|| fmt("no vertex element"))?;

    let rest = props.iter().filter(|(p, _)| p.starts_with("f_rest_")).count();
    if rest % 3 != 0 {
        return Err(fmt("f_rest count not divisible by 3"));
    }
    let b = rest / 3 + 1;
    let degree = (0..=3)
        .find(|d| coeff_count(*d) == b)
        .ok_or_else(|| fmt(&format!("{rest} f_rest properties match no SH degree")))?;
    let wanted = property_names(degree);
    let mut offsets = Vec::with_capacity(wanted.len());
    let stride: usize = props.iter().map(|p| p.1).sum();
    for w in &wanted {
        let mut off = 0;
        let mut found = None;
        for (name, width) in &props {
            if name == w {
                found = Some((off, *width));
                break;
            }
            off += width;
        }
        offsets.push(found.ok_or_else(|| fmt(&format!("missing property {w}")))?);
    }
    if body.len() < n * stride {
        return Err(fmt("truncated vertex data"));
    }

    let mut cloud = GaussianCloud::new(degree)?;
    let nb = coeff_count(degree);
    let mut vals = vec![0.0; wanted.len()];
    for i in 0..n {
        let rec = &body[i * stride..(i + 1) * stride];
        for (v, &(off, width)) in vals.iter_mut().zip(&offsets) {
            *v = if width == 4 {
                f32::from_le_bytes(rec[off..off + 4].try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(rec[off..off + 8].try_into().unwrap())
            };
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(fmt(&format!("non-finite value in vertex {i}")));
        }
        cloud.positions.extend_from_slice(&vals[0..3]);
        cloud.rotations.extend_from_slice(&vals[3..7]);
        cloud.log_scales.extend_from_slice(&vals[7..10]);
        cloud.opacity_logits.push(vals[10]);
        let mut sh = vec![0.0; 3 * nb];
        for c in 0..3 {
            sh[c] = vals[11 + c];
            for k in 1..nb {
                sh[k * 3 + c] = vals[14 + c * (nb - 1) + (k - 1)];
            }
        }
        cloud.sh.extend_from_slice(&sh);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian;
    use crate::geometry::{LogScale, Rotation};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn cloud_from(vals: &[f64], n: usize, degree: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new(degree).unwrap();
        let mut it = vals.iter().cycle().copied();
        let mut next = move || it.next().unwrap();
        for _ in 0..n {
            c.push(Gaussian {
                position: Vector3::new(next(), next(), next()),
                rotation: Rotation::new(1.0 + next().abs(), next(), next(), next()),
                log_scale: LogScale([next(), next(), next()]),
                opacity_logit: next(),
                sh: (0..3 * coeff_count(degree)).map(|_| next()).collect(),
            })
            .unwrap();
        }
        c
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip(vals in proptest::collection::vec(-5.0..5.0f64, 1..64), n in 0usize..20, degree in 0usize..4) {
            let cloud = cloud_from(&vals, n, degree);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.ply");
            save_ply(&cloud, &p).unwrap();
            prop_assert_eq!(&load_ply(&p).unwrap(), &cloud);

            save_ply_with(&cloud, &p, PlyScalar::Float).unwrap();
            let back = load_ply(&p).unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            for (a, b) in back.positions.iter().chain(&back.sh).zip(cloud.positions.iter().chain(&cloud.sh)) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn byte_stable_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = cloud_from(&[0.1, -0.7, 2.0, 0.33], 7, 1);
        let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        save_ply(&cloud, &a).unwrap();
        save_ply(&cloud, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let empty = GaussianCloud::new(0).unwrap();
        save_ply(&empty, &a).unwrap();
        let back = load_ply(&a).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn missing_opacity_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        let mut header = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for name in property_names(0).iter().filter(|n| *n != "opacity") {
            header.push_str(&format!("property float {name}\n"));
        }
        header.push_str("end_header\n");
        let mut bytes = header.into_bytes();
        bytes.extend(std::iter::repeat(0u8).take(4 * 13));
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_ply(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_header_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        fs::write(&p, b"plx\nend_header\n").unwrap();
        assert!(load_ply(&p).is_err());

        let mut cloud = cloud_from(&[0.5], 1, 0);
        let good = dir.path().join("good.ply");
        save_ply(&cloud, &good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(load_ply(&p).is_err());

        cloud.opacity_logits[0] = f64::INFINITY;
        assert!(save_ply(&cloud, &p).is_err());
    }
}
