//! Instance-level branches: text (TXIB), image (IMIB) and point cloud
//! (PCIB) blocks mapping one observed object to a unit-norm descriptor.
//!
//! Every encoder works on a batch: rows of the returned node are the
//! descriptors of the inputs, in order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::layers::init_mlp3;
use crate::numcore::{mlp3_forward, Activation, Graph, Matrix, NodeId, ParamStore};
use crate::scenegen::text::{strip_position, stub_embed, tokenize, EmbedSpace};
use crate::scenegen::InstanceRecord;

pub const TEXT_PREFIX: &str = "txib.";
pub const IMAGE_PREFIX: &str = "imib.";
pub const POINT_PREFIX: &str = "pcib.";

/// A hint sentence and its frozen embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInstanceInput {
    pub hint: String,
    pub embedding: Vec<f64>,
}

impl TextInstanceInput {
    pub fn new(hint: &str, stub_dim: usize) -> Result<Self> {
        let tokens = tokenize(hint);
        if tokens.is_empty() {
            return Err(Error::Contract("empty hint".into()));
        }
        Ok(TextInstanceInput {
            hint: hint.to_string(),
            embedding: stub_embed(&tokens, EmbedSpace::TextSpace, stub_dim)?,
        })
    }

    /// Uses the stored embedding unless the position phrase is dropped.
    pub fn from_record(rec: &InstanceRecord, with_position: bool, stub_dim: usize) -> Result<Self> {
        if with_position && rec.stub_text_vec.len() == stub_dim {
            return Ok(TextInstanceInput {
                hint: rec.hint.clone(),
                embedding: rec.stub_text_vec.clone(),
            });
        }
        let hint = if with_position {
            &rec.hint
        } else {
            strip_position(&rec.hint)
        };
        Self::new(hint, stub_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInstanceInput {
    pub stub_semantic: Vec<f64>,
    pub mean_rgb: [f64; 3],
    pub normalized_pixel_count: f64,
    pub mean_uv: [f64; 2],
}

impl ImageInstanceInput {
    pub fn from_record(rec: &InstanceRecord, count_norm: f64) -> Self {
        ImageInstanceInput {
            stub_semantic: rec.stub_image_vec.clone(),
            mean_rgb: rec.instance3d.color_rgb,
            normalized_pixel_count: (rec.pixel_count as f64 / count_norm).min(1.0),
            mean_uv: rec.mean_uv,
        }
    }

    fn check(&self) -> Result<()> {
        let finite = self
            .stub_semantic
            .iter()
            .chain(&self.mean_rgb)
            .chain(&self.mean_uv)
            .all(|v| v.is_finite())
            && self.normalized_pixel_count.is_finite();
        if !finite {
            return Err(Error::Numeric("image instance input".into()));
        }
        if !(0.0..=1.0).contains(&self.normalized_pixel_count) {
            return Err(Error::Contract("normalized pixel count outside [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointInstanceInput {
    /// Points in the scene-local frame.
    pub points: Vec<[f64; 3]>,
    pub mean_rgb: [f64; 3],
    pub normalized_point_count: f64,
    pub mean_uv: [f64; 2],
}

impl PointInstanceInput {
    pub fn from_record(rec: &InstanceRecord, origin: [f64; 2], count_norm: f64) -> Self {
        let points = rec
            .instance3d
            .points
            .iter()
            .map(|p| [p[0] - origin[0], p[1] - origin[1], p[2]])
            .collect::<Vec<_>>();
        PointInstanceInput {
            normalized_point_count: (points.len() as f64 / count_norm).min(1.0),
            points,
            mean_rgb: rec.instance3d.color_rgb,
            mean_uv: rec.mean_uv,
        }
    }
}

/// D-dimensional unit-norm instance descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDescriptor {
    pub vec: Vec<f64>,
}

fn rows_to_const<const N: usize>(g: &mut Graph, rows: impl Iterator<Item = [f64; N]>) -> Result<NodeId> {
    let rows: Vec<[f64; N]> = rows.collect();
    Ok(g.constant(Matrix::from_rows(&rows)?))
}

pub fn init_text_block<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.dim;
    init_mlp3(store, "txib.mlp", [cfg.stub_dim, d, d, d], rng)
}

pub fn init_image_block<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.dim;
    init_mlp3(store, "imib.sem", [cfg.stub_dim, d, d, d], rng)?;
    init_mlp3(store, "imib.color", [3, d, d, d], rng)?;
    init_mlp3(store, "imib.num", [1, d, d, d], rng)?;
    if cfg.use_uv {
        init_mlp3(store, "imib.uv", [2, d, d, d], rng)?;
    }
    init_mlp3(store, "imib.fuse", [cfg.fused_width(), d, d, d], rng)
}

pub fn init_point_block<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.dim;
    init_mlp3(store, "pcib.point", [3, d, d, d], rng)?;
    init_mlp3(store, "pcib.color", [3, d, d, d], rng)?;
    init_mlp3(store, "pcib.num", [1, d, d, d], rng)?;
    if cfg.use_uv {
        init_mlp3(store, "pcib.uv", [2, d, d, d], rng)?;
    }
    init_mlp3(store, "pcib.proj", [cfg.fused_width(), d, d, d], rng)
}

/// Frozen text embedding → three-layer MLP → L2 normalization.
pub fn encode_text_batch(g: &mut Graph, store: &ParamStore, inputs: &[TextInstanceInput]) -> Result<NodeId> {
    let rows: Vec<&[f64]> = inputs.iter().map(|t| t.embedding.as_slice()).collect();
    let x = g.constant(Matrix::from_rows(&rows)?);
    let h = mlp3_forward(g, x, "txib.mlp", store, Activation::Relu)?;
    g.l2_normalize_rows(h)
}

/// Semantic, color, count and (optionally) UV embeddings, concatenated and
/// fused by a three-layer MLP, then L2-normalized.
pub fn encode_image_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    inputs: &[ImageInstanceInput],
) -> Result<NodeId> {
    for i in inputs {
        i.check()?;
    }
    let sem_rows: Vec<&[f64]> = inputs.iter().map(|t| t.stub_semantic.as_slice()).collect();
    let sem = g.constant(Matrix::from_rows(&sem_rows)?);
    let rgb = rows_to_const(g, inputs.iter().map(|t| t.mean_rgb))?;
    let num = rows_to_const(g, inputs.iter().map(|t| [t.normalized_pixel_count]))?;
    let mut parts = vec![
        mlp3_forward(g, sem, "imib.sem", store, Activation::Relu)?,
        mlp3_forward(g, rgb, "imib.color", store, Activation::Relu)?,
        mlp3_forward(g, num, "imib.num", store, Activation::Relu)?,
    ];
    if cfg.use_uv {
        let uv = rows_to_const(g, inputs.iter().map(|t| t.mean_uv))?;
        parts.push(mlp3_forward(g, uv, "imib.uv", store, Activation::Relu)?);
    }
    let cat = g.concat_cols(&parts)?;
    let out = mlp3_forward(g, cat, "imib.fuse", store, Activation::Relu)?;
    g.l2_normalize_rows(out)
}

/// Centroid from an exact fixed-point sum (2⁻⁶⁴ resolution), so it depends
/// only on the point multiset and is unchanged when every point is repeated.
fn exact_centroid(points: &[[f64; 3]]) -> [f64; 3] {
    const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64
    let mut sum = [0i128; 3];
    for p in points {
        for k in 0..3 {
            sum[k] += (p[k] * SCALE).round() as i128;
        }
    }
    sum.map(|s| (s as f64 / SCALE) / points.len() as f64)
}

/// Centered per-point MLP followed by a coordinate-wise max per set.
pub fn point_semantic_batch(g: &mut Graph, store: &ParamStore, sets: &[&[[f64; 3]]]) -> Result<NodeId> {
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut data = Vec::with_capacity(total * 3);
    let mut segments = Vec::with_capacity(sets.len());
    let mut row = 0;
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Contract(format!("point set {i} is empty")));
        }
        let c = exact_centroid(set);
        for p in set.iter() {
            data.extend((0..3).map(|k| p[k] - c[k]));
        }
        segments.push((row..row + set.len()).collect::<Vec<_>>());
        row += set.len();
    }
    let x = g.constant(Matrix::from_vec(total, 3, data)?);
    let h = mlp3_forward(g, x, "pcib.point", store, Activation::Relu)?;
    g.segment_max(h, &segments)
}

/// Set feature ⊕ color ⊕ count ⊕ UV embeddings → projection MLP → L2 norm.
pub fn encode_point_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    inputs: &[PointInstanceInput],
) -> Result<NodeId> {
    let sets: Vec<&[[f64; 3]]> = inputs.iter().map(|p| p.points.as_slice()).collect();
    let sem = point_semantic_batch(g, store, &sets)?;
    let rgb = rows_to_const(g, inputs.iter().map(|t| t.mean_rgb))?;
    let num = rows_to_const(g, inputs.iter().map(|t| [t.normalized_point_count]))?;
    let mut parts = vec![
        sem,
        mlp3_forward(g, rgb, "pcib.color", store, Activation::Relu)?,
        mlp3_forward(g, num, "pcib.num", store, Activation::Relu)?,
    ];
    if cfg.use_uv {
        let uv = rows_to_const(g, inputs.iter().map(|t| t.mean_uv))?;
        parts.push(mlp3_forward(g, uv, "pcib.uv", store, Activation::Relu)?);
    }
    let cat = g.concat_cols(&parts)?;
    let out = mlp3_forward(g, cat, "pcib.proj", store, Activation::Relu)?;
    g.l2_normalize_rows(out)
}

fn single(g: Graph, node: NodeId) -> InstanceDescriptor {
    InstanceDescriptor {
        vec: g.value(node).row(0).to_vec(),
    }
}

pub fn encode_text_instance(input: &TextInstanceInput, store: &ParamStore) -> Result<InstanceDescriptor> {
    if input.hint.trim().is_empty() {
        return Err(Error::Contract("empty hint".into()));
    }
    let mut g = Graph::new();
    let n = encode_text_batch(&mut g, store, std::slice::from_ref(input))?;
    Ok(single(g, n))
}

pub fn encode_image_instance(
    input: &ImageInstanceInput,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<InstanceDescriptor> {
    let mut g = Graph::new();
    let n = encode_image_batch(&mut g, store, cfg, std::slice::from_ref(input))?;
    Ok(single(g, n))
}

pub fn point_semantic_encode(points: &[[f64; 3]], store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let n = point_semantic_batch(&mut g, store, &[points])?;
    Ok(g.value(n).row(0).to_vec())
}

pub fn encode_point_instance(
    input: &PointInstanceInput,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<InstanceDescriptor> {
    let mut g = Graph::new();
    let n = encode_point_batch(&mut g, store, cfg, std::slice::from_ref(input))?;
    Ok(single(g, n))
}
