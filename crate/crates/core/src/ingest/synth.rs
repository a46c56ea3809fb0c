//! Synthetic source corpora and encoders for every supported input format.
//!
//! The generators produce organized scans (points emitted in grid order over
//! simple CAD-like surfaces, or ring-by-ring lidar sweeps) so neighbouring
//! points are spatially close, like real scanner or mesh-sampled data.

use std::f32::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParsedCloud;

const NOISE: f32 = 2e-3;

fn grid_side(n: usize, faces: usize) -> usize {
    ((n as f64 / faces as f64).sqrt().ceil() as usize).max(2)
}

/// An organized surface scan of one of four shape families, with unit normals.
/// `class` picks the family and proportions, `variant` perturbs the size.
pub fn shape_cloud(class: usize, variant: u64, n: usize) -> ParsedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64((class as u64) << 32 | variant);
    let scale = 0.6 + 0.1 * (class / 4) as f32 + rng.random_range(0.0..0.3f32);
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    match class % 4 {
        0 => {
            // box: six faces, each a g x g grid
            let g = grid_side(n, 6);
            let h = [scale, scale * 0.7, scale * 0.4];
            for axis in 0..3 {
                for sign in [-1.0f32, 1.0] {
                    for i in 0..g {
                        for j in 0..g {
                            let u = -1.0 + 2.0 * i as f32 / (g - 1) as f32;
                            let v = -1.0 + 2.0 * j as f32 / (g - 1) as f32;
                            let mut p = [0.0; 3];
                            let mut q = [0.0; 3];
                            p[axis] = sign * h[axis];
                            p[(axis + 1) % 3] = u * h[(axis + 1) % 3];
                            p[(axis + 2) % 3] = v * h[(axis + 2) % 3];
                            q[axis] = sign;
                            pts.push(p);
                            nrm.push(q);
                        }
                    }
                }
            }
        }
        1 => {
            // cylinder side plus two caps
            let g = grid_side(n, 2);
            let r = scale * 0.5;
            for i in 0..g {
                let a = TAU * i as f32 / g as f32;
                for j in 0..g {
                    let z = scale * (-1.0 + 2.0 * j as f32 / (g - 1) as f32);
                    pts.push([r * a.cos(), r * a.sin(), z]);
                    nrm.push([a.cos(), a.sin(), 0.0]);
                }
            }
            for sign in [-1.0f32, 1.0] {
                for i in 0..g {
                    let rr = r * i as f32 / (g - 1) as f32;
                    for j in 0..g / 2 {
                        let a = TAU * j as f32 / (g / 2) as f32;
                        pts.push([rr * a.cos(), rr * a.sin(), sign * scale]);
                        nrm.push([0.0, 0.0, sign]);
                    }
                }
            }
        }
        2 => {
            // latitude/longitude sphere
            let g = grid_side(n, 1);
            for i in 0..g {
                let theta = std::f32::consts::PI * (i as f32 + 0.5) / g as f32;
                for j in 0..g {
                    let phi = TAU * j as f32 / g as f32;
                    let q = [
                        theta.sin() * phi.cos(),
                        theta.sin() * phi.sin(),
                        theta.cos(),
                    ];
                    pts.push(q.map(|c| c * scale));
                    nrm.push(q);
                }
            }
        }
        _ => {
            // flat table top on four square legs
            let g = grid_side(n, 2);
            for i in 0..g {
                for j in 0..g {
                    let u = -1.0 + 2.0 * i as f32 / (g - 1) as f32;
                    let v = -1.0 + 2.0 * j as f32 / (g - 1) as f32;
                    pts.push([u * scale, v * scale * 0.6, scale * 0.5]);
                    nrm.push([0.0, 0.0, 1.0]);
                }
            }
            for leg in 0..4 {
                let cx = if leg % 2 == 0 { -0.9 } else { 0.9 } * scale;
                let cy = if leg / 2 == 0 { -0.5 } else { 0.5 } * scale;
                for i in 0..g {
                    for j in 0..g / 4 {
                        let z = scale * (0.5 - i as f32 / (g - 1) as f32);
                        let side = j % 4;
                        let q = [
                            [1.0, 0.0, 0.0],
                            [-1.0, 0.0, 0.0],
                            [0.0, 1.0, 0.0],
                            [0.0, -1.0, 0.0],
                        ][side];
                        pts.push([cx + 0.05 * scale * q[0], cy + 0.05 * scale * q[1], z]);
                        nrm.push(q);
                    }
                }
            }
        }
    }
    // scanner noise along the surface normal
    for (p, q) in pts.iter_mut().zip(&nrm) {
        let e = rng.random_range(-NOISE..NOISE) * scale;
        for k in 0..3 {
            p[k] += e * q[k];
        }
    }
    let mut cloud = ParsedCloud {
        points: pts,
        normals: Some(nrm),
        ..Default::default()
    };
    cloud.resize_points(n);
    cloud
}

/// A ring-by-ring lidar sweep of a ground plane and a wavy wall.
pub fn lidar_scan(seed: u64, rings: usize, azimuths: usize) -> ParsedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wall_dist = 8.0 + rng.random_range(0.0..4.0f64);
    let wobble = rng.random_range(1.0..3.0f64);
    let mut points = Vec::with_capacity(rings * azimuths);
    let mut intensity = Vec::with_capacity(rings * azimuths);
    for ring in 0..rings {
        let pitch = -0.4 + 0.5 * ring as f64 / rings as f64;
        for a in 0..azimuths {
            let yaw = a as f64 / azimuths as f64 * std::f64::consts::TAU;
            let wall = wall_dist + wobble * (3.0 * yaw).sin();
            let ground = pitch < -0.05 && -1.7 / pitch.sin() < wall;
            let range = if ground { -1.7 / pitch.sin() } else { wall };
            points.push([
                (range * pitch.cos() * yaw.cos()) as f32,
                (range * pitch.cos() * yaw.sin()) as f32,
                (range * pitch.sin()) as f32,
            ]);
            let i = if ground {
                0.25
            } else {
                ((0.5 + 0.3 * (2.0 * yaw).sin()) * 100.0).round() / 100.0
            };
            intensity.push(i as f32);
        }
    }
    ParsedCloud {
        points,
        intensity: Some(intensity),
        ..Default::default()
    }
}

/// Comma-separated `x,y,z[,nx,ny,nz]` lines.
pub fn to_xyz_text(cloud: &ParsedCloud, decimals: usize) -> String {
    let mut out = String::with_capacity(cloud.len() * 60);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{:.d$},{:.d$},{:.d$}", p[0], p[1], p[2], d = decimals);
        if let Some(n) = &cloud.normals {
            let _ = write!(
                out,
                ",{:.d$},{:.d$},{:.d$}",
                n[i][0],
                n[i][1],
                n[i][2],
                d = decimals
            );
        }
        out.push('\n');
    }
    out
}

/// KITTI velodyne layout: little-endian `x y z intensity` float32 records.
pub fn to_kitti_bin(cloud: &ParsedCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for f in [p[0], p[1], p[2], it] {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

/// PLY with `x y z` plus normals and colors when present.
pub fn to_ply(cloud: &ParsedCloud, binary: bool) -> Vec<u8> {
    let mut head = format!(
        "ply\nformat {} 1.0\ncomment synthetic\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        if binary { "binary_little_endian" } else { "ascii" },
        cloud.len()
    );
    if cloud.normals.is_some() {
        head.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if cloud.colors.is_some() {
        head.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    let color = |c: f32| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    for i in 0..cloud.len() {
        let mut floats = cloud.points[i].to_vec();
        if let Some(n) = &cloud.normals {
            floats.extend_from_slice(&n[i]);
        }
        let rgb = cloud.colors.as_ref().map(|c| c[i].map(color));
        if binary {
            for f in floats {
                out.extend_from_slice(&f.to_le_bytes());
            }
            if let Some(rgb) = rgb {
                out.extend_from_slice(&rgb);
            }
        } else {
            let mut line: Vec<String> = floats.iter().map(|f| format!("{f:?}")).collect();
            if let Some(rgb) = rgb {
                line.extend(rgb.iter().map(|c| c.to_string()));
            }
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    out
}

/// Wavefront OBJ with `v` and, when present, `vn` lines.
pub fn to_obj(cloud: &ParsedCloud) -> String {
    let mut out = String::from("# synthetic\no cloud\n");
    for p in &cloud.points {
        let _ = writeln!(out, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    if let Some(n) = &cloud.normals {
        for q in n {
            let _ = writeln!(out, "vn {:?} {:?} {:?}", q[0], q[1], q[2]);
        }
    }
    out
}

/// NPY v1.0 array of shape (N, 3) or (N, 6) when normals are present.
pub fn to_npy(cloud: &ParsedCloud, float64: bool) -> Vec<u8> {
    let cols = if cloud.normals.is_some() { 6 } else { 3 };
    let descr = if float64 { "<f8" } else { "<f4" };
    let mut dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {cols}), }}",
        cloud.len()
    );
    while (10 + dict.len() + 1) % 64 != 0 {
        dict.push(' ');
    }
    dict.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for i in 0..cloud.len() {
        let mut row = cloud.points[i].to_vec();
        if let Some(n) = &cloud.normals {
            row.extend_from_slice(&n[i]);
        }
        for f in row {
            if float64 {
                out.extend_from_slice(&(f as f64).to_le_bytes());
            } else {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    out
}

/// Writes `<class>/<class>_NNNN.txt` files until at least `target_bytes` are on disk.
/// Returns the number of bytes written.
pub fn write_xyz_corpus(
    dir: &Path,
    classes: &[&str],
    points: usize,
    target_bytes: u64,
) -> io::Result<u64> {
    let mut total = 0;
    let mut variant = 0u64;
    while total < target_bytes {
        for (c, name) in classes.iter().enumerate() {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            let text = to_xyz_text(&shape_cloud(c, variant, points), 6);
            fs::write(sub.join(format!("{name}_{variant:04}.txt")), &text)?;
            total += text.len() as u64;
        }
        variant += 1;
    }
    Ok(total)
}

/// Writes `NNNNNN.bin` lidar sweeps until at least `target_bytes` are on disk.
pub fn write_kitti_corpus(
    dir: &Path,
    rings: usize,
    azimuths: usize,
    target_bytes: u64,
) -> io::Result<u64> {
    fs::create_dir_all(dir)?;
    let mut total = 0;
    let mut i = 0u64;
    while total < target_bytes {
        let bytes = to_kitti_bin(&lidar_scan(i, rings, azimuths));
        fs::write(dir.join(format!("{i:06}.bin")), &bytes)?;
        total += bytes.len() as u64;
        i += 1;
    }
    Ok(total)
}
