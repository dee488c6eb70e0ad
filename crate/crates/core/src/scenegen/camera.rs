use super::types::{CameraModel, Instance3D};

/// Pinhole projection result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<(f64, f64)> {
        match self {
            Projection::Pixel { u, v } => Some((u, v)),
            Projection::BehindCamera => None,
        }
    }
}

pub fn to_camera_frame(p: [f64; 3], cam: &CameraModel) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let r = &cam.pose[i];
        *o = r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + r[3];
    }
    out
}

/// World point to pixel coordinates; points with `z ≤ 0` in the camera
/// frame are behind the camera.
pub fn project_point(p: [f64; 3], cam: &CameraModel) -> Projection {
    let [x, y, z] = to_camera_frame(p, cam);
    if z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Pixel {
        u: cam.fx * x / z + cam.cx,
        v: cam.fy * y / z + cam.cy,
    }
}

fn in_frame(u: f64, v: f64, cam: &CameraModel) -> bool {
    u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64
}

/// Image-side statistics of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UvStats {
    /// Mean in-frame pixel position divided by (width, height); `None` when
    /// nothing is visible.
    pub mean_uv: Option<[f64; 2]>,
    pub visible: usize,
}

/// Indices of points that land inside the image with positive depth.
pub fn visible_points(points: &[[f64; 3]], cam: &CameraModel) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| match project_point(p, cam) {
            Projection::Pixel { u, v } if in_frame(u, v, cam) => Some(i),
            _ => None,
        })
        .collect()
}

pub fn instance_uv_stats(inst: &Instance3D, cam: &CameraModel) -> UvStats {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for &p in &inst.points {
        if let Projection::Pixel { u, v } = project_point(p, cam) {
            if in_frame(u, v, cam) {
                su += u;
                sv += v;
                n += 1;
            }
        }
    }
    let mean_uv = (n > 0).then(|| [su / n as f64 / cam.width as f64, sv / n as f64 / cam.height as f64]);
    UvStats { mean_uv, visible: n }
}
