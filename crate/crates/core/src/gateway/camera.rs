//! Camera-follow target and the end-effector pointing beam.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose3;
use crate::scene::TABLE_Z;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraHint {
    pub follow_target: [f64; 3],
    pub beam_origin: [f64; 3],
    /// Unit vector along the tool axis.
    pub beam_direction: [f64; 3],
    /// Where the beam meets the table plane; `None` when it points away from the table.
    pub beam_hit: Option<[f64; 3]>,
}

impl CameraHint {
    pub fn from_ee(ee: &Pose3) -> Self {
        let o = ee.position;
        let d = ee.rotate(&nalgebra::Vector3::z()).normalize();
        let beam_hit = (d.z < -1e-9 && o.z >= TABLE_Z).then(|| {
            let s = (TABLE_Z - o.z) / d.z;
            [o.x + s * d.x, o.y + s * d.y, TABLE_Z]
        });
        Self {
            follow_target: [o.x, o.y, o.z],
            beam_origin: [o.x, o.y, o.z],
            beam_direction: [d.x, d.y, d.z],
            beam_hit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ik::downward;
    use nalgebra::Vector3;

    #[test]
    fn downward_beam_hits_below_the_tool() {
        let ee = Pose3::new(Vector3::new(0.4, 0.1, 0.3), downward(0.7));
        let h = CameraHint::from_ee(&ee);
        let hit = h.beam_hit.unwrap();
        assert_eq!(hit[2], TABLE_Z);
        assert!((hit[0] - 0.4).abs() < 1e-12 && (hit[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn upward_beam_has_no_hit() {
        let ee = Pose3::new(Vector3::new(0.4, 0.1, 0.3), nalgebra::UnitQuaternion::identity());
        assert_eq!(CameraHint::from_ee(&ee).beam_hit, None);
    }
}
