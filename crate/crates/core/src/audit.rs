//! Finite-difference audit of every trainable graph of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instance::{
    encode_image_batch, encode_point_batch, encode_text_batch, ImageInstanceInput, PointInstanceInput,
    TextInstanceInput,
};
use crate::model::{init_block, init_scene_model, Modality, ModelConfig, MAX_SLOTS};
use crate::numcore::{grad_check, GradCheckOptions, GradCheckReport, Graph, Matrix, NodeId, ParamStore};
use crate::scene::{init_sap, scene_descriptor_batch};
use crate::scenegen::SceneTriplet;
use crate::train::{scene_loss, select_text_hints, TrainConfig};

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub graph: String,
    pub report: GradCheckReport,
}

/// `Σ y ⊙ R` for a fixed random `R`.
fn probe(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let (rows, cols) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let r = g.constant(r);
    let s = g.group_scores(y, r, 1, 1, 1.0)?;
    Ok(g.sum(s))
}

/// Biases start at zero, which can put ReLU inputs exactly on the kink.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (path, p) in store.iter_mut() {
        if path.ends_with(".b") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
}

/// Checks each instance block, each pooling stack and the full scene loss
/// on the first two scenes (three instances each).
pub fn gradient_audit(scenes: &[SceneTriplet], train: &TrainConfig, seed: u64) -> Result<Vec<AuditEntry>> {
    if scenes.len() < 2 {
        return Err(Error::Data("gradient audit needs two scenes".into()));
    }
    let cfg: &ModelConfig = &train.model;
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let recs: Vec<_> = scenes[0].instances.iter().take(3).collect();
    let origin = scenes[0].location;

    for (i, m) in Modality::ALL.into_iter().enumerate() {
        let mut store = ParamStore::new();
        init_block(&mut store, cfg, m, seed + i as u64)?;
        jitter(&mut store, seed + 100 + i as u64);
        let report = match m {
            Modality::Text => {
                let inputs = recs
                    .iter()
                    .map(|r| TextInstanceInput::from_record(r, cfg.use_uv, cfg.stub_dim))
                    .collect::<Result<Vec<_>>>()?;
                grad_check(&store, seed, opts, |g, s| {
                    let y = encode_text_batch(g, s, &inputs)?;
                    probe(g, y, seed)
                })?
            }
            Modality::Image => {
                let inputs: Vec<_> = recs
                    .iter()
                    .map(|r| ImageInstanceInput::from_record(r, cfg.count_norm))
                    .collect();
                grad_check(&store, seed, opts, |g, s| {
                    let y = encode_image_batch(g, s, cfg, &inputs)?;
                    probe(g, y, seed)
                })?
            }
            Modality::Point => {
                let inputs: Vec<_> = recs
                    .iter()
                    .map(|r| PointInstanceInput::from_record(r, origin, cfg.count_norm))
                    .collect();
                grad_check(&store, seed, opts, |g, s| {
                    let y = encode_point_batch(g, s, cfg, &inputs)?;
                    probe(g, y, seed)
                })?
            }
        };
        out.push(AuditEntry {
            graph: format!("{} instance block", m.name()),
            report,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in Modality::ALL {
        let mut store = ParamStore::new();
        init_sap(&mut store, cfg, m, &mut rng)?;
        jitter(&mut store, seed + 200);
        let mut x = Matrix::zeros(2 * MAX_SLOTS, cfg.dim);
        let mut mask = vec![false; 2 * MAX_SLOTS];
        for (slot, keep) in mask.iter_mut().enumerate().filter(|(s, _)| s % MAX_SLOTS < 3) {
            *keep = true;
            for v in x.row_mut(slot) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let report = grad_check(&store, seed, opts, |g, s| {
            let xi = g.constant(x.clone());
            let y = scene_descriptor_batch(g, s, cfg, m, xi, &mask, MAX_SLOTS)?;
            probe(g, y, seed)
        })?;
        out.push(AuditEntry {
            graph: format!("{} pooling stack", m.name()),
            report,
        });
    }

    let small: Vec<SceneTriplet> = scenes[..2]
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.instances.truncate(3);
            s
        })
        .collect();
    let refs: Vec<&SceneTriplet> = small.iter().collect();
    let hints: Vec<Vec<usize>> = refs.iter().map(|s| select_text_hints(s, 3, seed)).collect();
    let mut store = init_scene_model(cfg, seed)?;
    jitter(&mut store, seed + 300);
    let report = grad_check(&store, seed, opts, |g, s| scene_loss(g, s, train, &refs, &hints))?;
    out.push(AuditEntry {
        graph: "scene loss".into(),
        report,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_world, WorldConfig};

    #[test]
    fn audit_passes_on_a_small_model() {
        let world = WorldConfig {
            num_scenes: 4,
            area_extent: 300.0,
            split_fractions: (1.0, 0.0, 0.0),
            split_block: 4,
            ..WorldConfig::default()
        };
        let scenes = generate_world(&world).unwrap();
        let train = TrainConfig {
            model: ModelConfig {
                dim: 8,
                ffn_hidden: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let entries = gradient_audit(&scenes, &train, 1).unwrap();
        assert_eq!(entries.len(), 7);
        for e in &entries {
            assert!(e.report.max_error() < 1e-4, "{}: {:?}", e.graph, e.report.worst());
        }
    }
}
