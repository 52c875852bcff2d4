//! Adapter for users who hold Human3.6M-derived arrays.
//!
//! No dataset code or files ship with this crate. The expected mapping from a
//! typical preprocessed export is:
//!
//! | source field                          | pose-v1 field | conversion                              |
//! |---------------------------------------|---------------|-----------------------------------------|
//! | 2D keypoints, pixels, `[J, 2]`        | `in`          | `x / w · 2 − 1`, `y / w · 2 − h / w`    |
//! | 3D joints, camera frame, metres       | `out`         | `· 1000`, minus the root joint          |
//! | action name (e.g. `"Walking 1"`)      | `action`      | text before the first space             |
//! | subject id (e.g. `"S9"`)              | `subject`     | copied                                  |
//!
//! The 2D normalization keeps the aspect ratio, so only `x` spans exactly
//! `[-1, 1]`. Joint order must follow [`crate::skeleton::H36M_JOINTS`].

use super::PoseSample;
use crate::error::{Error, Result};

/// Image size of the camera that produced the 2D keypoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

pub fn normalize_pixels(p: [f64; 2], size: ImageSize) -> [f64; 2] {
    [p[0] / size.width * 2.0 - 1.0, p[1] / size.width * 2.0 - size.height / size.width]
}

/// Converts one frame into a [`PoseSample`].
pub fn h36m_frame(
    keypoints_px: &[[f64; 2]],
    joints_m: &[[f64; 3]],
    size: ImageSize,
    root: usize,
    action: Option<&str>,
    subject: Option<&str>,
) -> Result<PoseSample> {
    if keypoints_px.len() != joints_m.len() || root >= joints_m.len() {
        return Err(Error::Validation(format!(
            "frame has {} 2D and {} 3D joints (root {root})",
            keypoints_px.len(),
            joints_m.len()
        )));
    }
    if !(size.width > 0.0 && size.height > 0.0) {
        return Err(Error::Validation("image size must be positive".into()));
    }
    let r = joints_m[root];
    Ok(PoseSample {
        input2d: keypoints_px.iter().map(|&p| normalize_pixels(p, size)).collect(),
        target3d: joints_m
            .iter()
            .map(|p| [(p[0] - r[0]) * 1000.0, (p[1] - r[1]) * 1000.0, (p[2] - r[2]) * 1000.0])
            .collect(),
        action: action.map(|a| a.split(' ').next().unwrap_or(a).to_string()),
        subject: subject.map(str::to_string),
    })
}
