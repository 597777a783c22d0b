//! Quantized point clouds for streaming, and synthetic clouds sampled from
//! the scene's primitive geometry.
//!
//! Coordinates are stored as 16-bit cell indices against a bounding box:
//! the box is split into 2^16 cells per axis and a point decodes to the
//! center of its cell, so the reconstruction error is at most half a cell
//! (`extent / 2^17`) on every axis.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::scene::{SceneObject, SceneState, Shape, TABLE_Z};

/// Cells per axis.
pub const CELLS: f64 = 65536.0;

/// Fixed seed for the sampling jitter, so equal scenes give equal clouds.
const SAMPLING_SEED: u64 = 0x5eed_c10d;
/// Share of the budget spent on the table when objects are present.
const TABLE_SHARE: f64 = 0.25;
const TABLE_RGB: [u8; 3] = [150, 140, 120];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedPoint {
    pub xyz: [u16; 3],
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudChunk {
    pub frame_id: u32,
    pub bounds: Aabb,
    pub points: Vec<QuantizedPoint>,
}

/// Index of the cell containing `v` on an axis spanning `[lo, hi]`.
pub fn quantize_axis(v: f64, lo: f64, hi: f64) -> u16 {
    let extent = hi - lo;
    if !(extent > 0.0) || v.is_nan() {
        return 0;
    }
    let cell = ((v - lo) / extent * CELLS).floor();
    cell.clamp(0.0, CELLS - 1.0) as u16
}

pub fn dequantize_axis(q: u16, lo: f64, hi: f64) -> f64 {
    lo + (q as f64 + 0.5) * (hi - lo) / CELLS
}

impl PointCloudChunk {
    pub fn new(frame_id: u32, bounds: Aabb) -> Self {
        Self {
            frame_id,
            bounds,
            points: Vec::new(),
        }
    }

    pub fn count(&self) -> u32 {
        self.points.len() as u32
    }

    /// Adds a point; coordinates outside the bounds are clamped to the edge cell.
    pub fn push(&mut self, p: &Vector3<f64>, rgb: [u8; 3]) {
        let b = &self.bounds;
        self.points.push(QuantizedPoint {
            xyz: [
                quantize_axis(p.x, b.min[0], b.max[0]),
                quantize_axis(p.y, b.min[1], b.max[1]),
                quantize_axis(p.z, b.min[2], b.max[2]),
            ],
            rgb,
        });
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let b = &self.bounds;
        let q = self.points[i].xyz;
        Vector3::new(
            dequantize_axis(q[0], b.min[0], b.max[0]),
            dequantize_axis(q[1], b.min[1], b.max[1]),
            dequantize_axis(q[2], b.min[2], b.max[2]),
        )
    }
}

/// A flat patch sampled as `origin + u·edge_u + v·edge_v`, `u, v ∈ [0, 1)`.
struct Patch {
    origin: Vector3<f64>,
    edge_u: Vector3<f64>,
    edge_v: Vector3<f64>,
    /// Wrap the patch around the z axis as a cylinder side of this radius.
    cylinder: Option<(Vector3<f64>, f64, f64)>,
}

impl Patch {
    fn area(&self) -> f64 {
        match self.cylinder {
            Some((_, r, h)) => std::f64::consts::TAU * r * h,
            None => self.edge_u.cross(&self.edge_v).norm(),
        }
    }

    fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        match self.cylinder {
            Some((base, r, h)) => {
                let a = u * std::f64::consts::TAU;
                base + Vector3::new(r * a.cos(), r * a.sin(), v * h)
            }
            None => self.origin + self.edge_u * u + self.edge_v * v,
        }
    }
}

fn object_patches(o: &SceneObject) -> Vec<Patch> {
    let rect = |origin: Vector3<f64>, eu: Vector3<f64>, ev: Vector3<f64>| Patch {
        origin,
        edge_u: eu,
        edge_v: ev,
        cylinder: None,
    };
    match o.shape {
        Shape::Cuboid { half_extents: h } => {
            let (x, y, z) = (Vector3::x() * 2.0 * h[0], Vector3::y() * 2.0 * h[1], Vector3::z() * 2.0 * h[2]);
            let c = -Vector3::new(h[0], h[1], h[2]);
            vec![
                rect(c, x, y),
                rect(c + z, x, y),
                rect(c, x, z),
                rect(c + y, x, z),
                rect(c, y, z),
                rect(c + x, y, z),
            ]
        }
        Shape::Cylinder { radius, half_height } => {
            let d = Vector3::new(-radius, -radius, 0.0);
            let (x, y) = (Vector3::x() * 2.0 * radius, Vector3::y() * 2.0 * radius);
            vec![
                Patch {
                    origin: Vector3::zeros(),
                    edge_u: Vector3::zeros(),
                    edge_v: Vector3::zeros(),
                    cylinder: Some((Vector3::new(0.0, 0.0, -half_height), radius, 2.0 * half_height)),
                },
                rect(d + Vector3::z() * half_height, x, y),
                rect(d - Vector3::z() * half_height, x, y),
            ]
        }
    }
}

/// Splits `total` across weights by largest remainder; ties go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified samples on one patch group: stratum `k` of `n` along u, jittered.
fn sample_patches(
    patches: &[Patch],
    n: usize,
    rng: &mut ChaCha8Rng,
    mut emit: impl FnMut(Vector3<f64>),
) {
    let weights: Vec<f64> = patches.iter().map(Patch::area).collect();
    let counts = apportion(n, &weights);
    for (patch, &k) in patches.iter().zip(&counts) {
        for i in 0..k {
            let u = (i as f64 + rng.random::<f64>()) / k as f64;
            let v = rng.random::<f64>();
            emit(patch.point(u, v));
        }
    }
}

/// Samples at most `budget` colored surface points from the table and objects.
///
/// An empty scene yields table points only. Sampling uses a fixed seed, so
/// identical scenes yield identical chunks.
pub fn synth_point_cloud(scene: &SceneState, budget: usize, frame_id: u32, bounds: Aabb) -> PointCloudChunk {
    assert!(budget > 0, "point budget must be positive");
    let mut chunk = PointCloudChunk::new(frame_id, bounds);
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLING_SEED);

    let objects: Vec<(&SceneObject, Vec<Patch>, f64)> = scene
        .objects
        .iter()
        .map(|o| {
            let patches = object_patches(o);
            let area = patches.iter().map(Patch::area).sum();
            (o, patches, area)
        })
        .collect();

    let table_n = if objects.is_empty() {
        budget
    } else {
        ((budget as f64 * TABLE_SHARE).round() as usize).clamp(usize::from(budget == 1), budget)
    };
    let object_n = budget - table_n;

    let table = Patch {
        origin: Vector3::new(bounds.min[0], bounds.min[1], TABLE_Z),
        edge_u: Vector3::x() * (bounds.max[0] - bounds.min[0]),
        edge_v: Vector3::y() * (bounds.max[1] - bounds.min[1]),
        cylinder: None,
    };
    sample_patches(std::slice::from_ref(&table), table_n, &mut rng, |p| chunk.push(&p, TABLE_RGB));

    let weights: Vec<f64> = objects.iter().map(|(_, _, a)| *a).collect();
    for ((obj, patches, _), n) in objects.iter().zip(apportion(object_n, &weights)) {
        let rgb = obj.rgb();
        sample_patches(patches, n, &mut rng, |p| {
            let world = obj.pose.transform_point(&p);
            chunk.push(&world, rgb);
        });
    }
    chunk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{GoalKind, GoalSpec};
    use proptest::prelude::*;

    fn bounds() -> Aabb {
        Aabb::new([0.15, -0.55, 0.0], [0.85, 0.55, 0.75])
    }

    fn empty() -> SceneState {
        SceneState {
            objects: vec![],
            lid_angle: 0.0,
            seed: 0,
            goal: GoalSpec {
                kind: GoalKind::ReceiptList,
                entries: vec![],
            },
            grasp: None,
        }
    }

    #[test]
    fn empty_scene_is_table_only() {
        let c = synth_point_cloud(&empty(), 500, 3, bounds());
        assert_eq!(c.count(), 500);
        assert!(c.points.iter().all(|p| p.rgb == TABLE_RGB));
        for i in 0..c.points.len() {
            assert!((c.position(i).z - TABLE_Z).abs() <= 0.75 / CELLS);
        }
    }

    #[test]
    fn budget_of_one() {
        assert_eq!(synth_point_cloud(&empty(), 1, 0, bounds()).count(), 1);
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(0, &[1.0]), vec![0]);
        assert_eq!(apportion(7, &[0.0, 2.0]), vec![0, 7]);
    }

    proptest! {
        #[test]
        fn quantization_error_within_half_cell(
            x in 0.15f64..=0.85, y in -0.55f64..=0.55, z in 0.0f64..=0.75
        ) {
            let b = bounds();
            let mut c = PointCloudChunk::new(0, b);
            let p = Vector3::new(x, y, z);
            c.push(&p, [0, 0, 0]);
            let d = c.position(0);
            let e = b.extent();
            for i in 0..3 {
                prop_assert!((d[i] - p[i]).abs() <= e[i] / (2.0 * CELLS) * (1.0 + 1e-12));
            }
        }
    }
}
