use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static object classes found along the synthetic streets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Category {
    Building,
    Pole,
    TrafficLight,
    Fence,
    Garage,
    Tree,
    Lamp,
    TrashBin,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Building,
        Category::Pole,
        Category::TrafficLight,
        Category::Fence,
        Category::Garage,
        Category::Tree,
        Category::Lamp,
        Category::TrashBin,
    ];

    /// Words used for this class in hint sentences.
    pub fn phrase(self) -> &'static str {
        match self {
            Category::Building => "building",
            Category::Pole => "pole",
            Category::TrafficLight => "traffic light",
            Category::Fence => "fence",
            Category::Garage => "garage",
            Category::Tree => "tree",
            Category::Lamp => "lamp",
            Category::TrashBin => "trash bin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One 3D object instance: a point set with a single color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Instance3D {
    pub instance_id: u64,
    pub category: Category,
    pub points: Vec<[f64; 3]>,
    #[serde(rename = "colorRGB")]
    pub color_rgb: [f64; 3],
}

/// Pinhole camera: rigid world→camera pose plus intrinsics.
///
/// Camera axes: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    /// Row-major 4×4 world→camera transform.
    pub pose: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Camera at `eye` looking horizontally along `heading` (radians, world
    /// z up).
    pub fn looking_along(eye: [f64; 3], heading: f64, intrinsics: Intrinsics) -> Self {
        let (s, c) = heading.sin_cos();
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let forward = [c, s, 0.0];
        let rot = [right, down, forward];
        let mut pose = [[0.0; 4]; 4];
        for (i, r) in rot.iter().enumerate() {
            pose[i][..3].copy_from_slice(r);
            pose[i][3] = -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]);
        }
        pose[3][3] = 1.0;
        CameraModel {
            pose,
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
        }
    }

    pub fn identity(intrinsics: Intrinsics) -> Self {
        let mut pose = [[0.0; 4]; 4];
        for (i, row) in pose.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraModel {
            pose,
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
        }
    }

    /// Rotation orthonormal with det +1 (±1e-9), positive focal lengths.
    pub fn validate(&self) -> Result<()> {
        let r = |i: usize, j: usize| self.pose[i][j];
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r(i, k) * r(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::Contract("camera rotation is not orthonormal".into()));
                }
            }
        }
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("camera rotation det {det}")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Contract("camera intrinsics".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    /// Half-resolution street camera, roughly 104° horizontal field of view.
    fn default() -> Self {
        Intrinsics {
            fx: 276.0,
            fy: 276.0,
            cx: 352.0,
            cy: 94.0,
            width: 704,
            height: 188,
        }
    }
}

/// An instance as observed from one scene: its 3D points plus image-side
/// statistics and the derived text hint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InstanceRecord {
    pub instance3d: Instance3D,
    #[serde(rename = "meanUV")]
    pub mean_uv: [f64; 2],
    pub pixel_count: u32,
    pub hint: String,
    pub stub_text_vec: Vec<f64>,
    pub stub_image_vec: Vec<f64>,
}

/// Aligned text / image / point observations of one geo-tagged location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SceneTriplet {
    pub scene_id: u64,
    pub location: [f64; 2],
    pub camera_model: CameraModel,
    pub instances: Vec<InstanceRecord>,
    pub split: Split,
}

impl SceneTriplet {
    pub fn hints(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|r| r.hint.as_str())
    }

    /// Record-level invariants that hold for any valid dataset line.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.instances.is_empty() {
            return Err("scene has no instances".into());
        }
        for (i, r) in self.instances.iter().enumerate() {
            if r.hint.trim().is_empty() {
                return Err(format!("instance {i}: empty hint"));
            }
            if r.mean_uv.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("instance {i}: meanUV outside [0,1]²"));
            }
            if r.instance3d.points.is_empty() {
                return Err(format!("instance {i}: no points"));
            }
            if r.instance3d.color_rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("instance {i}: color outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// Synthetic world parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_scenes: usize,
    /// Side of the square world, meters.
    pub area_extent: f64,
    pub instances_per_scene_range: (usize, usize),
    pub submap_radius: f64,
    pub seed: u64,
    pub split_fractions: (f64, f64, f64),
    pub min_separation: f64,
    /// Mean distance between consecutive scenes along the trajectory.
    pub trajectory_step: f64,
    /// Stand-in for the minimum valid-pixel rule on rasterized masks.
    pub min_visible_points: usize,
    /// Dimension of the frozen text / image stub embeddings.
    pub stub_dim: usize,
    /// Consecutive scenes that share a split region.
    pub split_block: usize,
    pub camera_height: f64,
    pub intrinsics: Intrinsics,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_scenes: 704,
            area_extent: 2000.0,
            instances_per_scene_range: (6, 12),
            submap_radius: 40.0,
            seed: 42,
            split_fractions: (512.0 / 704.0, 64.0 / 704.0, 128.0 / 704.0),
            min_separation: 1.0,
            trajectory_step: 4.0,
            min_visible_points: 5,
            stub_dim: 32,
            split_block: 16,
            camera_height: 1.7,
            intrinsics: Intrinsics::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("splitFractions must be in [0,1] and sum to 1".into()));
        }
        if !(self.submap_radius > 0.0) {
            return Err(Error::Config("submapRadius must be positive".into()));
        }
        let (lo, hi) = self.instances_per_scene_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config("instancesPerSceneRange".into()));
        }
        if !(self.min_separation >= 0.0) || !(self.trajectory_step > 0.0) || !(self.area_extent > 0.0) {
            return Err(Error::Config("distances must be positive".into()));
        }
        if self.stub_dim == 0 || self.split_block == 0 {
            return Err(Error::Config("stubDim and splitBlock must be positive".into()));
        }
        Ok(())
    }

    /// Scene counts per split: rounded train/val, remainder to test.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.num_scenes as f64;
        let train = (self.split_fractions.0 * n).round() as usize;
        let val = ((self.split_fractions.1 * n).round() as usize).min(self.num_scenes - train);
        (train, val, self.num_scenes - train - val)
    }
}
