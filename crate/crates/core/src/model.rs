//! Model layout: hyper-parameters, parameter initialization per branch, and
//! the scene → descriptor pipeline shared by training and retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{
    encode_image_batch, encode_point_batch, encode_text_batch, init_image_block, init_point_block, init_text_block,
    ImageInstanceInput, PointInstanceInput, TextInstanceInput,
};
use crate::numcore::{Graph, NodeId, ParamStore};
use crate::scene::{init_sap, scene_descriptor_batch};
use crate::scenegen::SceneTriplet;

/// Instance slots per scene; scenes with fewer instances are padded.
pub const MAX_SLOTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Modality {
    Text,
    Image,
    Point,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Point];

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Image => 'I',
            Modality::Point => 'P',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Point => "point",
        }
    }

    /// Parameter prefix of the instance-level block.
    pub fn block_prefix(self) -> &'static str {
        match self {
            Modality::Text => crate::instance::TEXT_PREFIX,
            Modality::Image => crate::instance::IMAGE_PREFIX,
            Modality::Point => crate::instance::POINT_PREFIX,
        }
    }
}

/// How instance descriptors are aggregated into a scene descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Pooling {
    /// Attention stack followed by learned softmax-weighted sum.
    #[default]
    Sap,
    /// Attention stack followed by a masked coordinate-wise max.
    Max,
}

/// Attention depth per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SapDepth {
    pub text: usize,
    pub image: usize,
    pub point: usize,
}

impl Default for SapDepth {
    fn default() -> Self {
        SapDepth {
            text: 1,
            image: 2,
            point: 2,
        }
    }
}

impl SapDepth {
    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Point => self.point,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Descriptor width D.
    pub dim: usize,
    /// Width of the frozen stub embeddings.
    pub stub_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub sap_depth: SapDepth,
    pub pooling: Pooling,
    /// UV encoders in the image / point blocks and position phrases in hints.
    pub use_uv: bool,
    /// Divisor turning pixel / point counts into [0, 1] features.
    pub count_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            stub_dim: 32,
            heads: 4,
            ffn_hidden: 128,
            sap_depth: SapDepth::default(),
            pooling: Pooling::Sap,
            use_uv: true,
            count_norm: 256.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.stub_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.count_norm > 0.0) {
            return Err(Error::Config("countNorm must be positive".into()));
        }
        Ok(())
    }

    /// Input width of the fusion / projection MLP.
    pub fn fused_width(&self) -> usize {
        self.dim * if self.use_uv { 4 } else { 3 }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh weights for one instance-level block.
pub fn init_block(store: &mut ParamStore, cfg: &ModelConfig, m: Modality, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, 1 + m as u64);
    match m {
        Modality::Text => init_text_block(store, cfg, &mut rng),
        Modality::Image => init_image_block(store, cfg, &mut rng),
        Modality::Point => init_point_block(store, cfg, &mut rng),
    }
}

/// Fresh SAP weights for one modality.
pub fn init_sap_block(store: &mut ParamStore, cfg: &ModelConfig, m: Modality, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, 11 + m as u64);
    init_sap(store, cfg, m, &mut rng)
}

/// Every parameter of the three-branch scene model.
pub fn init_scene_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for m in Modality::ALL {
        init_block(&mut store, cfg, m, seed)?;
        init_sap_block(&mut store, cfg, m, seed)?;
    }
    Ok(store)
}

/// Instance indices used for each scene's text modality.
pub type HintSelection = Vec<Vec<usize>>;

/// Instance descriptors of one modality for a batch of scenes, scattered
/// into `B·MAX_SLOTS` padded rows. Returns the node and the slot mask.
pub fn instance_slots(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    scenes: &[&SceneTriplet],
    modality: Modality,
    hints: Option<&HintSelection>,
) -> Result<(NodeId, Vec<bool>)> {
    let mut targets = Vec::new();
    let mut mask = vec![false; scenes.len() * MAX_SLOTS];
    let mut per_scene: Vec<Vec<usize>> = Vec::with_capacity(scenes.len());
    for (b, s) in scenes.iter().enumerate() {
        let idx: Vec<usize> = match (modality, hints) {
            (Modality::Text, Some(sel)) => sel
                .get(b)
                .cloned()
                .ok_or_else(|| Error::Contract("hint selection shorter than batch".into()))?,
            _ => (0..s.instances.len()).collect(),
        };
        if idx.is_empty() {
            return Err(Error::EmptyScene);
        }
        if idx.len() > MAX_SLOTS {
            return Err(Error::Contract(format!(
                "scene {} has {} instances, more than {MAX_SLOTS} slots",
                s.scene_id,
                idx.len()
            )));
        }
        for slot in 0..idx.len() {
            targets.push(b * MAX_SLOTS + slot);
            mask[b * MAX_SLOTS + slot] = true;
        }
        per_scene.push(idx);
    }
    let records = scenes
        .iter()
        .zip(&per_scene)
        .flat_map(|(s, idx)| idx.iter().map(move |&i| (*s, &s.instances[i])));
    let desc = match modality {
        Modality::Text => {
            let inputs = records
                .map(|(_, r)| TextInstanceInput::from_record(r, cfg.use_uv, cfg.stub_dim))
                .collect::<Result<Vec<_>>>()?;
            encode_text_batch(g, store, &inputs)?
        }
        Modality::Image => {
            let inputs: Vec<_> = records
                .map(|(_, r)| ImageInstanceInput::from_record(r, cfg.count_norm))
                .collect();
            encode_image_batch(g, store, cfg, &inputs)?
        }
        Modality::Point => {
            let inputs: Vec<_> = records
                .map(|(s, r)| PointInstanceInput::from_record(r, s.location, cfg.count_norm))
                .collect();
            encode_point_batch(g, store, cfg, &inputs)?
        }
    };
    let padded = g.scatter_rows(desc, &targets, scenes.len() * MAX_SLOTS)?;
    Ok((padded, mask))
}

/// Scene descriptors (`B × D`, unit rows) of one modality.
pub fn embed_scenes(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    scenes: &[&SceneTriplet],
    modality: Modality,
    hints: Option<&HintSelection>,
) -> Result<NodeId> {
    let (slots, mask) = instance_slots(g, store, cfg, scenes, modality, hints)?;
    scene_descriptor_batch(g, store, cfg, modality, slots, &mask, MAX_SLOTS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            dim: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn depth_per_modality() {
        let d = SapDepth::default();
        assert_eq!(
            (d.of(Modality::Text), d.of(Modality::Image), d.of(Modality::Point)),
            (1, 2, 2)
        );
    }

    #[test]
    fn scene_model_has_every_block() {
        let cfg = ModelConfig {
            dim: 8,
            stub_dim: 4,
            ffn_hidden: 8,
            ..ModelConfig::default()
        };
        let s = init_scene_model(&cfg, 0).unwrap();
        for prefix in ["txib.", "imib.", "pcib.", "sap.text.", "sap.image.", "sap.point."] {
            assert!(s.paths().any(|p| p.starts_with(prefix)), "{prefix}");
        }
        assert!(s.contains("sap.text.layer0.q.w"));
        assert!(!s.contains("sap.text.layer1.q.w"));
        assert!(s.contains("sap.point.layer1.q.w"));
        // Same seed, same weights.
        assert_eq!(s, init_scene_model(&cfg, 0).unwrap());
    }
}
