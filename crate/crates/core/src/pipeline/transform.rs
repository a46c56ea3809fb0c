use std::f32::consts::TAU;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{f32s_from_le, f32s_to_le, Sample, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("sample has no usable `{0}` field")]
    MissingField(String),
    #[error("cloud has no points")]
    EmptyCloud,
}

/// A per-sample transform and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Center on the centroid and scale the farthest point to unit distance.
    Normalize,
    Translate {
        #[serde(default = "defaults::translate")]
        range: f32,
    },
    Jitter {
        #[serde(default = "defaults::sigma")]
        sigma: f32,
        #[serde(default = "defaults::clip")]
        clip: f32,
    },
    /// Rotation about z; a fixed `angle` replaces the random draw.
    Rotate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angle: Option<f32>,
    },
    RandomScale {
        #[serde(default = "defaults::scale_lo")]
        low: f32,
        #[serde(default = "defaults::scale_hi")]
        high: f32,
    },
    /// Mirror x with probability `p`.
    FlipYz {
        #[serde(default = "defaults::half")]
        p: f64,
    },
    ColorAugment {
        #[serde(default = "defaults::color")]
        delta: f32,
    },
    RandomCrop {
        #[serde(default = "defaults::crop")]
        min_fraction: f32,
    },
    Downsample {
        num_points: usize,
    },
    /// Fixed amount of CPU work, calibrated to roughly `micros`.
    Busy {
        micros: u64,
    },
    /// Injected latency.
    Sleep {
        micros: u64,
    },
}

mod defaults {
    pub fn translate() -> f32 {
        0.2
    }
    pub fn sigma() -> f32 {
        0.01
    }
    pub fn clip() -> f32 {
        0.05
    }
    pub fn scale_lo() -> f32 {
        0.8
    }
    pub fn scale_hi() -> f32 {
        1.25
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn color() -> f32 {
        0.1
    }
    pub fn crop() -> f32 {
        0.7
    }
}

/// Sample fields the transforms read and write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldNames {
    pub points: String,
    pub normals: String,
    pub colors: String,
    pub intensity: String,
}

impl Default for FieldNames {
    fn default() -> Self {
        Self {
            points: "data".into(),
            normals: "normal".into(),
            colors: "color".into(),
            intensity: "intensity".into(),
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key of an op id.
pub fn op_key(op_id: &str) -> u64 {
    op_id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of the generator used for one (epoch, sample, op) application.
pub fn sample_seed(base_seed: u64, epoch: u32, sample_index: u64, op_id: &str) -> u64 {
    mix(mix(mix(mix(base_seed) ^ epoch as u64) ^ sample_index) ^ op_key(op_id))
}

fn read_triples(sample: &Sample, name: &str) -> Option<Vec<[f32; 3]>> {
    match sample.get(name) {
        Some(Value::Bytes(b)) if b.len() % 12 == 0 => Some(
            f32s_from_le(b)
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        ),
        _ => None,
    }
}

fn write_triples(sample: &mut Sample, name: &str, v: &[[f32; 3]]) {
    sample.insert(name, Value::Bytes(f32s_to_le(v.as_flattened())));
}

/// Keeps rows `keep` of every per-point field.
fn select_rows(sample: &mut Sample, fields: &FieldNames, n: usize, keep: &[usize]) {
    for (name, width) in [
        (&fields.points, 12),
        (&fields.normals, 12),
        (&fields.colors, 12),
        (&fields.intensity, 4),
    ] {
        if let Some(Value::Bytes(b)) = sample.get(name) {
            if b.len() == n * width {
                let out: Vec<u8> = keep
                    .iter()
                    .flat_map(|&i| b[i * width..(i + 1) * width].iter().copied())
                    .collect();
                sample.insert(name.clone(), Value::Bytes(out));
            }
        }
    }
}

fn busy_iterations_per_micro() -> f64 {
    static RATE: OnceLock<f64> = OnceLock::new();
    *RATE.get_or_init(|| {
        let iters = 2_000_000u64;
        let start = Instant::now();
        std::hint::black_box(spin(iters));
        iters as f64 / start.elapsed().as_secs_f64().max(1e-9) / 1e6
    })
}

fn spin(iters: u64) -> u64 {
    let mut x = 0x2545_f491_4f6c_dd1du64;
    for _ in 0..iters {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x = std::hint::black_box(x);
    }
    x
}

/// Calibrates the busy-work loop; later `Busy` steps reuse the rate.
pub fn calibrate_busy_work() {
    busy_iterations_per_micro();
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Normalize => "normalize",
            Self::Translate { .. } => "translate",
            Self::Jitter { .. } => "jitter",
            Self::Rotate { .. } => "rotate",
            Self::RandomScale { .. } => "random_scale",
            Self::FlipYz { .. } => "flip_yz",
            Self::ColorAugment { .. } => "color_augment",
            Self::RandomCrop { .. } => "random_crop",
            Self::Downsample { .. } => "downsample",
            Self::Busy { .. } => "busy",
            Self::Sleep { .. } => "sleep",
        }
    }
}

/// Applies one transform with a generator seeded from `seed`.
pub fn apply_map(
    t: &Transform,
    fields: &FieldNames,
    mut sample: Sample,
    seed: u64,
) -> Result<Sample, TransformError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let missing = |name: &str| TransformError::MissingField(name.to_owned());
    match t {
        Transform::Busy { micros } => {
            std::hint::black_box(spin((*micros as f64 * busy_iterations_per_micro()) as u64));
            return Ok(sample);
        }
        Transform::Sleep { micros } => {
            std::thread::sleep(Duration::from_micros(*micros));
            return Ok(sample);
        }
        Transform::ColorAugment { delta } => {
            let mut c =
                read_triples(&sample, &fields.colors).ok_or_else(|| missing(&fields.colors))?;
            let shift: [f32; 3] = std::array::from_fn(|_| rng.random_range(-*delta..=*delta));
            for p in &mut c {
                for k in 0..3 {
                    p[k] = (p[k] + shift[k]).clamp(0.0, 1.0);
                }
            }
            write_triples(&mut sample, &fields.colors, &c);
            return Ok(sample);
        }
        _ => {}
    }
    let mut pts = read_triples(&sample, &fields.points).ok_or_else(|| missing(&fields.points))?;
    if pts.is_empty() {
        return Err(TransformError::EmptyCloud);
    }
    let n = pts.len();
    let mut normals = read_triples(&sample, &fields.normals).filter(|v| v.len() == n);
    match t {
        Transform::Normalize => {
            let mut c = [0f64; 3];
            for p in &pts {
                for k in 0..3 {
                    c[k] += p[k] as f64;
                }
            }
            c = c.map(|v| v / n as f64);
            let centered: Vec<[f64; 3]> = pts
                .iter()
                .map(|p| std::array::from_fn(|k| p[k] as f64 - c[k]))
                .collect();
            let s = centered
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            for (p, q) in pts.iter_mut().zip(&centered) {
                *p = if s > 0.0 {
                    q.map(|v| (v / s) as f32)
                } else {
                    [0.0; 3]
                };
            }
        }
        Transform::Translate { range } => {
            let d: [f32; 3] = std::array::from_fn(|_| rng.random_range(-*range..=*range));
            for p in &mut pts {
                for k in 0..3 {
                    p[k] += d[k];
                }
            }
        }
        Transform::Jitter { sigma, clip } => {
            let dist = Normal::new(0.0f32, *sigma).map_err(|_| missing("sigma"))?;
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v += dist.sample(&mut rng).clamp(-*clip, *clip);
                }
            }
        }
        Transform::Rotate { angle } => {
            let theta = angle.unwrap_or_else(|| rng.random_range(0.0..TAU));
            let (s, c) = theta.sin_cos();
            let rot = |p: &mut [f32; 3]| *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            pts.iter_mut().for_each(rot);
            if let Some(nv) = &mut normals {
                nv.iter_mut().for_each(rot);
            }
        }
        Transform::RandomScale { low, high } => {
            let s = rng.random_range(*low..=*high);
            for p in &mut pts {
                *p = p.map(|v| v * s);
            }
        }
        Transform::FlipYz { p } => {
            if rng.random_bool(*p) {
                pts.iter_mut().for_each(|q| q[0] = -q[0]);
                if let Some(nv) = &mut normals {
                    nv.iter_mut().for_each(|q| q[0] = -q[0]);
                }
            }
        }
        Transform::RandomCrop { min_fraction } => {
            let mut lo = [f32::INFINITY; 3];
            let mut hi = [f32::NEG_INFINITY; 3];
            for p in &pts {
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let f = rng.random_range(*min_fraction..=1.0);
            let mut blo = [0f32; 3];
            let mut bhi = [0f32; 3];
            for k in 0..3 {
                let extent = hi[k] - lo[k];
                let size = extent * f;
                blo[k] = lo[k] + rng.random_range(0.0..=1.0f32) * (extent - size);
                bhi[k] = blo[k] + size;
            }
            let keep: Vec<usize> = (0..n)
                .filter(|&i| (0..3).all(|k| pts[i][k] >= blo[k] && pts[i][k] <= bhi[k]))
                .collect();
            if !keep.is_empty() && keep.len() < n {
                select_rows(&mut sample, fields, n, &keep);
            }
            return Ok(sample);
        }
        Transform::Downsample { num_points } => {
            let mut keep: Vec<usize> = if n >= *num_points {
                index::sample(&mut rng, n, *num_points).into_vec()
            } else {
                (0..*num_points).map(|_| rng.random_range(0..n)).collect()
            };
            keep.sort_unstable();
            select_rows(&mut sample, fields, n, &keep);
            return Ok(sample);
        }
        Transform::Busy { .. } | Transform::Sleep { .. } | Transform::ColorAugment { .. } => {
            unreachable!()
        }
    }
    write_triples(&mut sample, &fields.points, &pts);
    if let Some(nv) = normals {
        write_triples(&mut sample, &fields.normals, &nv);
    }
    Ok(sample)
}
