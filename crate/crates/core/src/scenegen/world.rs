//! Synthetic street world: a serpentine drive through a square area with
//! static objects on both sides of the road, observed by a forward camera
//! at every scene location.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::camera::{instance_uv_stats, visible_points};
use super::text::{image_tokens, make_hint, stub_embed, tokenize, EmbedSpace};
use super::types::{CameraModel, Category, Instance3D, InstanceRecord, SceneTriplet, Split, WorldConfig};
use crate::error::{Error, Result};
use crate::numcore::Parallelism;

/// Extra trajectory positions generated beyond `num_scenes` to absorb
/// scenes dropped by the instance-count filter.
const SPARE_FRACTION: f64 = 0.15;
/// Largest object footprint radius; bounds the per-scene object search.
const MAX_OBJECT_REACH: f64 = 20.0;

#[derive(Debug, Clone)]
struct WorldObject {
    id: u64,
    category: Category,
    base: [f64; 2],
    points: Vec<[f64; 3]>,
    color: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Pose2 {
    pos: [f64; 2],
    heading: f64,
}

/// Generates `cfg.num_scenes` scenes. Pure function of the config.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<SceneTriplet>> {
    generate_world_with(cfg, Parallelism::default())
}

pub fn generate_world_with(cfg: &WorldConfig, par: Parallelism) -> Result<Vec<SceneTriplet>> {
    cfg.validate()?;
    if cfg.num_scenes == 0 {
        return Ok(Vec::new());
    }
    if cfg.trajectory_step * 0.8 < cfg.min_separation {
        return Err(Error::Config("trajectoryStep too small for minSeparation".into()));
    }
    let sep2 = cfg.min_separation * cfg.min_separation;
    if cfg.num_scenes as f64 * sep2 > cfg.area_extent * cfg.area_extent {
        return Err(Error::Generation(format!(
            "{} scenes cannot be {} m apart inside {} m²",
            cfg.num_scenes,
            cfg.min_separation,
            cfg.area_extent * cfg.area_extent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wanted = cfg.num_scenes + (cfg.num_scenes as f64 * SPARE_FRACTION).ceil() as usize + 8;
    let trajectory = trajectory(cfg, wanted, &mut rng)?;
    let objects = object_pool(&trajectory, &mut rng);

    let candidates = crate::par::map_ordered(par, &trajectory, |i, pose| observe(cfg, &objects, *pose, i as u64));
    let mut scenes = Vec::with_capacity(cfg.num_scenes);
    for c in candidates {
        if let Some(s) = c? {
            scenes.push(s);
            if scenes.len() == cfg.num_scenes {
                break;
            }
        }
    }
    if scenes.len() < cfg.num_scenes {
        return Err(Error::Generation(format!(
            "only {} of {} locations have at least {} visible instances",
            scenes.len(),
            cfg.num_scenes,
            cfg.instances_per_scene_range.0
        )));
    }
    for (i, s) in scenes.iter_mut().enumerate() {
        s.scene_id = i as u64;
    }
    assign_splits(cfg, &mut scenes);
    check_separation(cfg, &scenes)?;
    Ok(scenes)
}

/// Serpentine rows with a gentle lateral wiggle; consecutive rows are far
/// enough apart that their submaps never overlap.
fn trajectory(cfg: &WorldConfig, wanted: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Pose2>> {
    let margin = cfg.submap_radius + MAX_OBJECT_REACH;
    let row_gap = (2.5 * cfg.submap_radius).max(100.0);
    let (lo, hi) = (margin, cfg.area_extent - margin);
    if hi <= lo {
        return Err(Error::Generation("area too small for one street".into()));
    }
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(wanted + 1);
    let mut y = lo;
    let mut forward = true;
    'rows: loop {
        if y > hi {
            break;
        }
        let mut s = 0.0;
        while s <= hi - lo {
            let x = if forward { lo + s } else { hi - s };
            let wiggle = 3.0 * ((x / 60.0) + phase + y).sin();
            pts.push([x, y + wiggle]);
            if pts.len() > wanted {
                break 'rows;
            }
            s += cfg.trajectory_step * rng.random_range(0.8..1.2);
        }
        // Connector leg to the next row.
        let x = if forward { hi } else { lo };
        let mut t = cfg.trajectory_step;
        while t < row_gap - 0.8 * cfg.trajectory_step {
            pts.push([x, y + t]);
            if pts.len() > wanted {
                break 'rows;
            }
            t += cfg.trajectory_step * rng.random_range(0.8..1.2);
        }
        y += row_gap;
        forward = !forward;
    }
    if pts.len() <= wanted {
        return Err(Error::Generation(format!(
            "infeasible packing: {} m square holds {} of {} locations",
            cfg.area_extent,
            pts.len(),
            wanted
        )));
    }
    let poses = (0..wanted)
        .map(|i| {
            let (a, b) = (pts[i], pts[i + 1]);
            Pose2 {
                pos: a,
                heading: (b[1] - a[1]).atan2(b[0] - a[0]),
            }
        })
        .collect();
    Ok(poses)
}

fn object_pool(traj: &[Pose2], rng: &mut ChaCha8Rng) -> Vec<WorldObject> {
    // Road polyline, extended at both ends so the first and last scenes
    // still see a populated street.
    let mut road: Vec<[f64; 2]> = Vec::with_capacity(traj.len() + 2);
    let first = traj[0];
    let last = traj[traj.len() - 1];
    road.push([
        first.pos[0] - 50.0 * first.heading.cos(),
        first.pos[1] - 50.0 * first.heading.sin(),
    ]);
    road.extend(traj.iter().map(|p| p.pos));
    road.push([
        last.pos[0] + 60.0 * last.heading.cos(),
        last.pos[1] + 60.0 * last.heading.sin(),
    ]);

    let mut objects = Vec::new();
    let mut carry = 0.0;
    for w in road.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let normal = [-dir[1], dir[0]];
        let mut s = carry;
        while s < len {
            let category = sample_category(rng);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * lateral_offset(category, rng);
            let base = [
                a[0] + dir[0] * s + normal[0] * lateral,
                a[1] + dir[1] * s + normal[1] * lateral,
            ];
            let road_yaw = dir[1].atan2(dir[0]);
            let id = objects.len() as u64;
            objects.push(make_object(id, category, base, road_yaw, rng));
            s += rng.random_range(2.5..6.5);
        }
        carry = s - len;
    }
    objects
}

fn sample_category(rng: &mut ChaCha8Rng) -> Category {
    const WEIGHTS: [(Category, f64); 8] = [
        (Category::Building, 0.20),
        (Category::Pole, 0.15),
        (Category::TrafficLight, 0.08),
        (Category::Fence, 0.12),
        (Category::Garage, 0.08),
        (Category::Tree, 0.17),
        (Category::Lamp, 0.12),
        (Category::TrashBin, 0.08),
    ];
    let mut x: f64 = rng.random_range(0.0..1.0);
    for (c, w) in WEIGHTS {
        if x < w {
            return c;
        }
        x -= w;
    }
    Category::TrashBin
}

fn lateral_offset(category: Category, rng: &mut ChaCha8Rng) -> f64 {
    match category {
        Category::Building => rng.random_range(11.0..16.0),
        Category::Garage => rng.random_range(8.0..12.0),
        Category::Fence => rng.random_range(4.5..6.5),
        Category::Tree => rng.random_range(4.0..8.0),
        _ => rng.random_range(3.0..5.0),
    }
}

fn palette(category: Category) -> &'static [&'static str] {
    match category {
        Category::Building => &["gray", "white", "brown", "red", "yellow"],
        Category::Pole => &["gray", "black", "white"],
        Category::TrafficLight => &["black", "yellow", "gray"],
        Category::Fence => &["brown", "gray", "green", "white"],
        Category::Garage => &["white", "gray", "red", "blue"],
        Category::Tree => &["green", "brown"],
        Category::Lamp => &["black", "gray", "white"],
        Category::TrashBin => &["green", "blue", "black", "gray"],
    }
}

fn make_object(id: u64, category: Category, base: [f64; 2], road_yaw: f64, rng: &mut ChaCha8Rng) -> WorldObject {
    let names = palette(category);
    let name = names[rng.random_range(0..names.len())];
    let anchor = super::text::COLOR_ANCHORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .expect("palette uses anchor names");
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let color = anchor.map(|c| (c + noise.sample(rng)).clamp(0.0, 1.0));

    let mut local: Vec<[f64; 3]> = Vec::new();
    let yaw = match category {
        Category::Building | Category::Fence | Category::Garage => road_yaw,
        _ => rng.random_range(0.0..std::f64::consts::TAU),
    };
    match category {
        Category::Building => {
            let (w, d, h) = (
                rng.random_range(6.0..12.0),
                rng.random_range(5.0..9.0),
                rng.random_range(6.0..14.0),
            );
            let n = rng.random_range(64..=96);
            box_surface(rng, w, d, h, 0.0, n, &mut local);
        }
        Category::Garage => {
            let (w, d, h) = (
                rng.random_range(5.0..6.5),
                rng.random_range(3.0..4.0),
                rng.random_range(2.4..3.0),
            );
            let n = rng.random_range(40..=64);
            box_surface(rng, w, d, h, 0.0, n, &mut local);
        }
        Category::Fence => {
            let (w, h) = (rng.random_range(4.0..8.0), rng.random_range(1.0..1.5));
            let n = rng.random_range(32..=48);
            box_surface(rng, w, 0.1, h, 0.0, n, &mut local);
        }
        Category::Tree => {
            let trunk = rng.random_range(2.0..3.0);
            let crown = rng.random_range(1.5..3.0);
            let n = rng.random_range(48..=72);
            cylinder(rng, 0.2, 0.0, trunk, n / 4, &mut local);
            sphere(rng, crown, [0.0, 0.0, trunk + crown], n - n / 4, &mut local);
        }
        Category::Pole => {
            let h = rng.random_range(4.0..8.0);
            let n = rng.random_range(16..=24);
            let r = rng.random_range(0.1..0.15);
            cylinder(rng, r, 0.0, h, n, &mut local);
        }
        Category::Lamp => {
            let h = rng.random_range(5.0..7.0);
            let n = rng.random_range(20..=32);
            cylinder(rng, 0.12, 0.0, h, n * 2 / 3, &mut local);
            sphere(rng, 0.35, [0.6, 0.0, h], n - n * 2 / 3, &mut local);
        }
        Category::TrafficLight => {
            let h = rng.random_range(3.0..4.0);
            let n = rng.random_range(20..=32);
            cylinder(rng, 0.1, 0.0, h, n / 2, &mut local);
            box_surface(rng, 0.3, 0.3, 0.9, h, n - n / 2, &mut local);
        }
        Category::TrashBin => {
            let (w, d, h) = (
                rng.random_range(0.5..0.7),
                rng.random_range(0.5..0.7),
                rng.random_range(0.9..1.1),
            );
            let n = rng.random_range(16..=24);
            box_surface(rng, w, d, h, 0.0, n, &mut local);
        }
    }
    let (s, c) = yaw.sin_cos();
    let points = local
        .into_iter()
        .map(|[x, y, z]| [base[0] + c * x - s * y, base[1] + s * x + c * y, z])
        .collect();
    WorldObject {
        id,
        category,
        base,
        points,
        color,
    }
}

/// Side faces and top of an axis-aligned box centered on the origin in x/y,
/// spanning `z0..z0+h`.
fn box_surface(rng: &mut ChaCha8Rng, w: f64, d: f64, h: f64, z0: f64, n: usize, out: &mut Vec<[f64; 3]>) {
    let areas = [w * h, w * h, d * h, d * h, w * d];
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let a = rng.random_range(-0.5..0.5);
        let b = rng.random_range(0.0..1.0);
        let p = match face {
            0 => [a * w, -d / 2.0, z0 + b * h],
            1 => [a * w, d / 2.0, z0 + b * h],
            2 => [-w / 2.0, a * d, z0 + b * h],
            3 => [w / 2.0, a * d, z0 + b * h],
            _ => [a * w, (b - 0.5) * d, z0 + h],
        };
        out.push(p);
    }
}

fn cylinder(rng: &mut ChaCha8Rng, r: f64, z0: f64, h: f64, n: usize, out: &mut Vec<[f64; 3]>) {
    for _ in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        out.push([r * t.cos(), r * t.sin(), z0 + rng.random_range(0.0..h)]);
    }
}

fn sphere(rng: &mut ChaCha8Rng, r: f64, center: [f64; 3], n: usize, out: &mut Vec<[f64; 3]>) {
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    for _ in 0..n {
        let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
        out.push([
            center[0] + r * v[0] / len,
            center[1] + r * v[1] / len,
            (center[2] + r * v[2] / len).max(0.0),
        ]);
    }
}

/// Observes the world from one trajectory pose. `None` when fewer than the
/// minimum number of instances are visible.
fn observe(cfg: &WorldConfig, objects: &[WorldObject], pose: Pose2, index: u64) -> Result<Option<SceneTriplet>> {
    let eye = [pose.pos[0], pose.pos[1], cfg.camera_height];
    let cam = CameraModel::looking_along(eye, pose.heading, cfg.intrinsics);
    let r2 = cfg.submap_radius * cfg.submap_radius;
    let reach = cfg.submap_radius + MAX_OBJECT_REACH;
    let mut visible: Vec<Instance3D> = Vec::new();
    for obj in objects {
        let dx = obj.base[0] - pose.pos[0];
        let dy = obj.base[1] - pose.pos[1];
        if dx * dx + dy * dy > reach * reach {
            continue;
        }
        let in_radius: Vec<[f64; 3]> = obj
            .points
            .iter()
            .copied()
            .filter(|p| (p[0] - pose.pos[0]).powi(2) + (p[1] - pose.pos[1]).powi(2) <= r2)
            .collect();
        let seen = visible_points(&in_radius, &cam);
        if seen.len() < cfg.min_visible_points.max(1) {
            continue;
        }
        visible.push(Instance3D {
            instance_id: obj.id,
            category: obj.category,
            points: seen.into_iter().map(|i| in_radius[i]).collect(),
            color_rgb: obj.color,
        });
    }
    let (lo, hi) = cfg.instances_per_scene_range;
    if visible.len() < lo {
        return Ok(None);
    }
    if visible.len() > hi {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index + 1);
        let mut keep = sample(&mut rng, visible.len(), hi).into_vec();
        keep.sort_unstable();
        visible = keep.into_iter().map(|i| visible[i].clone()).collect();
    }
    let mut instances = Vec::with_capacity(visible.len());
    for inst in visible {
        let stats = instance_uv_stats(&inst, &cam);
        let mean_uv = stats
            .mean_uv
            .ok_or_else(|| Error::Generation("visible instance without uv".into()))?;
        let hint = make_hint(inst.color_rgb, inst.category, mean_uv)?;
        let stub_text_vec = stub_embed(&tokenize(&hint), EmbedSpace::TextSpace, cfg.stub_dim)?;
        let stub_image_vec = stub_embed(
            &image_tokens(inst.color_rgb, inst.category),
            EmbedSpace::ImageSpace,
            cfg.stub_dim,
        )?;
        instances.push(InstanceRecord {
            instance3d: inst,
            mean_uv,
            pixel_count: stats.visible as u32,
            hint,
            stub_text_vec,
            stub_image_vec,
        });
    }
    Ok(Some(SceneTriplet {
        scene_id: index,
        location: pose.pos,
        camera_model: cam,
        instances,
        split: Split::Train,
    }))
}

/// Splits follow contiguous trajectory blocks; each block goes to the split
/// furthest behind its quota, so the regions of different splits are
/// disjoint stretches of road.
fn assign_splits(cfg: &WorldConfig, scenes: &mut [SceneTriplet]) {
    let (train, val, test) = cfg.split_counts();
    let targets = [(Split::Train, train), (Split::Val, val), (Split::Test, test)];
    let mut assigned = [0usize; 3];
    let mut i = 0;
    while i < scenes.len() {
        let pick = (0..3)
            .filter(|&s| assigned[s] < targets[s].1)
            .max_by(|&a, &b| {
                let fa = assigned[a] as f64 / targets[a].1 as f64;
                let fb = assigned[b] as f64 / targets[b].1 as f64;
                fb.total_cmp(&fa).then(b.cmp(&a))
            })
            .expect("split quotas cover every scene");
        let n = cfg
            .split_block
            .min(targets[pick].1 - assigned[pick])
            .min(scenes.len() - i);
        for s in &mut scenes[i..i + n] {
            s.split = targets[pick].0;
        }
        assigned[pick] += n;
        i += n;
    }
}

fn check_separation(cfg: &WorldConfig, scenes: &[SceneTriplet]) -> Result<()> {
    let sep2 = cfg.min_separation * cfg.min_separation;
    for (i, a) in scenes.iter().enumerate() {
        for b in &scenes[i + 1..] {
            let d2 = (a.location[0] - b.location[0]).powi(2) + (a.location[1] - b.location[1]).powi(2);
            if d2 < sep2 {
                return Err(Error::Generation(format!(
                    "scenes {} and {} closer than {} m",
                    a.scene_id, b.scene_id, cfg.min_separation
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> WorldConfig {
        WorldConfig {
            num_scenes: n,
            seed,
            area_extent: 600.0,
            split_fractions: (0.6, 0.2, 0.2),
            split_block: 4,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_world(&small(10, 1)).unwrap();
        let b = generate_world(&small(10, 1)).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&small(10, 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_invariants() {
        let scenes = generate_world(&small(40, 3)).unwrap();
        assert_eq!(scenes.len(), 40);
        for s in &scenes {
            assert!((6..=12).contains(&s.instances.len()));
            s.check().unwrap();
            s.camera_model.validate().unwrap();
            for r in &s.instances {
                assert!(r.pixel_count as usize >= 5);
                assert_eq!(r.pixel_count as usize, r.instance3d.points.len());
                assert!(r.instance3d.points.len() <= 256);
            }
        }
        for (i, a) in scenes.iter().enumerate() {
            for b in &scenes[i + 1..] {
                let d = ((a.location[0] - b.location[0]).powi(2) + (a.location[1] - b.location[1]).powi(2)).sqrt();
                assert!(d >= 1.0);
            }
        }
    }

    #[test]
    fn neighbours_share_instances() {
        let scenes = generate_world(&small(20, 4)).unwrap();
        let shared = scenes.windows(2).filter(|w| {
            w[0].instances.iter().any(|a| {
                w[1].instances
                    .iter()
                    .any(|b| a.instance3d.instance_id == b.instance3d.instance_id)
            })
        });
        assert!(shared.count() >= 15);
    }

    #[test]
    fn splits_are_contiguous_blocks() {
        let cfg = small(40, 5);
        let scenes = generate_world(&cfg).unwrap();
        let count = |s: Split| scenes.iter().filter(|x| x.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (24, 8, 8));
        // Every split region is a union of whole blocks of four.
        for block in scenes.chunks(4) {
            assert!(block.iter().all(|s| s.split == block[0].split));
        }
    }

    #[test]
    fn infeasible_configs() {
        let cfg = WorldConfig {
            num_scenes: 5000,
            area_extent: 300.0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Generation(_))));
        let cfg = WorldConfig {
            split_fractions: (0.5, 0.5, 0.5),
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_world() {
        let cfg = WorldConfig {
            num_scenes: 0,
            ..WorldConfig::default()
        };
        assert!(generate_world(&cfg).unwrap().is_empty());
    }
}
