//! Self-attention based pooling: instance descriptors of one modality are
//! mixed by a stack of attention blocks, scored by a small MLP and summed
//! with softmax weights into one unit-norm scene descriptor.
//!
//! Batched functions take `B` scenes padded to `group_len` slots each
//! (`B·group_len × D`) together with a slot mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig, Pooling};
use crate::numcore::layers::{init_mhsa, init_mlp3};
use crate::numcore::{mhsa_block_forward, mlp3_forward, Activation, Graph, Matrix, NodeId, ParamStore};

pub fn sap_prefix(m: Modality) -> String {
    format!("sap.{}", m.name())
}

/// Padded instance descriptors of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstanceSet {
    /// `slots × D`; masked rows are zero.
    pub descriptors: Matrix,
    pub mask: Vec<bool>,
    pub modality: Modality,
}

impl SceneInstanceSet {
    /// Pads `rows` with zero rows up to `slots`.
    pub fn from_rows(rows: &[Vec<f64>], slots: usize, modality: Modality) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyScene);
        }
        if rows.len() > slots {
            return Err(Error::Contract(format!(
                "{} instances exceed {slots} slots",
                rows.len()
            )));
        }
        let d = rows[0].len();
        let mut descriptors = Matrix::zeros(slots, d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Dimension("ragged instance descriptors".into()));
            }
            descriptors.row_mut(i).copy_from_slice(r);
        }
        let mask = (0..slots).map(|i| i < rows.len()).collect();
        Ok(SceneInstanceSet {
            descriptors,
            mask,
            modality,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.mask.len() != self.descriptors.rows() {
            return Err(Error::Dimension("mask length differs from slot count".into()));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::EmptyScene);
        }
        for (r, &m) in self.mask.iter().enumerate() {
            if !m && self.descriptors.row(r).iter().any(|&v| v != 0.0) {
                return Err(Error::Contract(format!("masked slot {r} is not zero")));
            }
        }
        Ok(())
    }
}

/// A scene embedded in one modality, tagged with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneDescriptor {
    pub vec: Vec<f64>,
    pub scene_id: u64,
    pub location: [f64; 2],
}

/// Attention stack and pooling MLP (`D → D → D → 1`) for one modality.
pub fn init_sap<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, m: Modality, rng: &mut R) -> Result<()> {
    let prefix = sap_prefix(m);
    for layer in 0..cfg.sap_depth.of(m) {
        init_mhsa(store, &format!("{prefix}.layer{layer}"), cfg.dim, cfg.ffn_hidden, rng)?;
    }
    init_mlp3(store, &format!("{prefix}.pool"), [cfg.dim, cfg.dim, cfg.dim, 1], rng)
}

pub fn sap_attention_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    m: Modality,
    x: NodeId,
    mask: &[bool],
    group_len: usize,
) -> Result<NodeId> {
    let prefix = sap_prefix(m);
    let mut t = g.mask_rows(x, mask)?;
    for layer in 0..cfg.sap_depth.of(m) {
        t = mhsa_block_forward(
            g,
            t,
            mask,
            &format!("{prefix}.layer{layer}"),
            store,
            cfg.heads,
            group_len,
        )?;
    }
    Ok(t)
}

/// Softmax weights over the slots of every scene (`B × group_len`).
pub fn sap_weights_batch(
    g: &mut Graph,
    store: &ParamStore,
    m: Modality,
    t: NodeId,
    mask: &[bool],
    group_len: usize,
) -> Result<NodeId> {
    let rows = g.shape(t).0;
    if group_len == 0 || !rows.is_multiple_of(group_len) || mask.len() != rows {
        return Err(Error::Dimension("slot mask / group layout".into()));
    }
    let logits = mlp3_forward(g, t, &format!("{}.pool", sap_prefix(m)), store, Activation::Relu)?;
    let logits = g.reshape(logits, rows / group_len, group_len)?;
    g.masked_softmax_rows(logits, mask)
}

/// `Σ_i W_i T_i` per scene, L2-normalized.
pub fn sap_pool_batch(g: &mut Graph, t: NodeId, w: NodeId, group_len: usize) -> Result<NodeId> {
    let pooled = g.group_apply(w, t, 1, group_len)?;
    g.l2_normalize_rows(pooled)
}

/// Coordinate-wise max over the unmasked slots of each scene, L2-normalized.
pub fn max_pool_batch(g: &mut Graph, t: NodeId, mask: &[bool], group_len: usize) -> Result<NodeId> {
    let segments: Vec<Vec<usize>> = mask
        .chunks(group_len)
        .enumerate()
        .map(|(b, grp)| {
            grp.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(j, _)| b * group_len + j)
                .collect()
        })
        .collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyScene);
    }
    let pooled = g.segment_max(t, &segments)?;
    g.l2_normalize_rows(pooled)
}

/// Scene descriptors (`B × D`) from padded instance descriptors.
pub fn scene_descriptor_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    m: Modality,
    x: NodeId,
    mask: &[bool],
    group_len: usize,
) -> Result<NodeId> {
    let t = sap_attention_batch(g, store, cfg, m, x, mask, group_len)?;
    match cfg.pooling {
        Pooling::Sap => {
            let w = sap_weights_batch(g, store, m, t, mask, group_len)?;
            sap_pool_batch(g, t, w, group_len)
        }
        Pooling::Max => max_pool_batch(g, t, mask, group_len),
    }
}

/// Attention features of one padded set.
pub fn sap_attention(set: &SceneInstanceSet, store: &ParamStore, cfg: &ModelConfig) -> Result<Matrix> {
    set.check()?;
    let mut g = Graph::new();
    let x = g.constant(set.descriptors.clone());
    let t = sap_attention_batch(&mut g, store, cfg, set.modality, x, &set.mask, set.mask.len())?;
    Ok(g.value(t).clone())
}

/// Pooling weights of one set; masked slots get exactly zero.
pub fn sap_weights(t: &Matrix, mask: &[bool], store: &ParamStore, m: Modality) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let w = sap_weights_batch(&mut g, store, m, x, mask, mask.len())?;
    Ok(g.value(w).data().to_vec())
}

pub fn sap_pool(t: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != t.rows() {
        return Err(Error::Dimension("one weight per slot".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let w = g.constant(Matrix::row_vector(weights));
    let f = sap_pool_batch(&mut g, x, w, t.rows())?;
    Ok(g.value(f).data().to_vec())
}

pub fn scene_descriptor(set: &SceneInstanceSet, store: &ParamStore, cfg: &ModelConfig) -> Result<Vec<f64>> {
    set.check()?;
    let mut g = Graph::new();
    let x = g.constant(set.descriptors.clone());
    let f = scene_descriptor_batch(&mut g, store, cfg, set.modality, x, &set.mask, set.mask.len())?;
    Ok(g.value(f).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{l2_norm, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: Modality) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig {
            dim: 8,
            ffn_hidden: 16,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        init_sap(&mut store, &cfg, m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, store)
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = l2_norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    #[test]
    fn depth_follows_modality() {
        let (_, text) = setup(Modality::Text);
        let (_, point) = setup(Modality::Point);
        assert!(!text.contains("sap.text.layer1.q.w"));
        assert!(point.contains("sap.point.layer1.q.w"));
        assert_eq!(text.get("sap.text.pool.l2.w").unwrap().shape(), (8, 1));
    }

    #[test]
    fn weights_sum_to_one_and_mask_is_zero() {
        let (cfg, store) = setup(Modality::Image);
        let set = SceneInstanceSet::from_rows(&unit_rows(5, 8, 1), 12, Modality::Image).unwrap();
        let t = sap_attention(&set, &store, &cfg).unwrap();
        for r in 5..12 {
            assert!(t.row(r).iter().all(|&v| v == 0.0));
        }
        let w = sap_weights(&t, &set.mask, &store, Modality::Image).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w[5..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_get_equal_weights() {
        let (_, store) = setup(Modality::Text);
        let row = unit_rows(1, 8, 2).remove(0);
        let t = Matrix::from_rows(&[row.clone(), row.clone(), row, vec![0.0; 8]]).unwrap();
        let w = sap_weights(&t, &[true, true, true, false], &store, Modality::Text).unwrap();
        for v in &w[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_match_independent_softmax() {
        let (cfg, store) = setup(Modality::Point);
        let set = SceneInstanceSet::from_rows(&unit_rows(7, 8, 3), 12, Modality::Point).unwrap();
        let t = sap_attention(&set, &store, &cfg).unwrap();
        let w = sap_weights(&t, &set.mask, &store, Modality::Point).unwrap();
        // Oracle: hand-rolled MLP and softmax on plain vectors.
        let layer = |x: &[f64], l: usize, relu: bool| -> Vec<f64> {
            let wm = store.get(&format!("sap.point.pool.l{l}.w")).unwrap();
            let b = store.get(&format!("sap.point.pool.l{l}.b")).unwrap();
            (0..wm.cols())
                .map(|c| {
                    let s = b.get(0, c) + (0..wm.rows()).map(|r| x[r] * wm.get(r, c)).sum::<f64>();
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let logits: Vec<f64> = (0..7)
            .map(|r| layer(&layer(&layer(t.row(r), 0, true), 1, true), 2, false)[0])
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for r in 0..7 {
            assert!((w[r] - (logits[r] - mx).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_examples() {
        let t = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        let f = sap_pool(&t, &[1.0, 0.0]).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);

        let t = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let f = sap_pool(&t, &[0.5, 0.5]).unwrap();
        let n = (0.25f64 + 1.0).sqrt();
        assert!((f[0] - 0.5 / n).abs() < 1e-15 && (f[1] - 1.0 / n).abs() < 1e-15);

        let z = Matrix::zeros(2, 2);
        assert!(matches!(sap_pool(&z, &[0.5, 0.5]), Err(Error::DegenerateScene)));
    }

    #[test]
    fn single_instance_closed_form() {
        // One unmasked slot attends only to itself: T = r + FFN(r) with
        // r = x + o(v(x)), and the descriptor is T normalized.
        let (cfg, store) = setup(Modality::Text);
        let x = unit_rows(1, 8, 4).remove(0);
        let lin = |v: &[f64], p: &str| -> Vec<f64> {
            let w = store.get(&format!("{p}.w")).unwrap();
            let b = store.get(&format!("{p}.b")).unwrap();
            (0..w.cols())
                .map(|c| b.get(0, c) + (0..w.rows()).map(|r| v[r] * w.get(r, c)).sum::<f64>())
                .collect()
        };
        let v = lin(&x, "sap.text.layer0.v");
        let o = lin(&v, "sap.text.layer0.o");
        let r: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h: Vec<f64> = lin(&r, "sap.text.layer0.ffn.l0")
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let ffn = lin(&h, "sap.text.layer0.ffn.l1");
        let t: Vec<f64> = r.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        let n = l2_norm(&t);

        let set = SceneInstanceSet::from_rows(&[x], 12, Modality::Text).unwrap();
        let att = sap_attention(&set, &store, &cfg).unwrap();
        for c in 0..8 {
            assert!((att.get(0, c) - t[c]).abs() < 1e-12);
        }
        let f = scene_descriptor(&set, &store, &cfg).unwrap();
        for c in 0..8 {
            assert!((f[c] - t[c] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn order_and_slot_invariance() {
        for pooling in [Pooling::Sap, Pooling::Max] {
            let (mut cfg, store) = setup(Modality::Image);
            cfg.pooling = pooling;
            let rows = unit_rows(6, 8, 5);
            let a = scene_descriptor(
                &SceneInstanceSet::from_rows(&rows, 12, Modality::Image).unwrap(),
                &store,
                &cfg,
            )
            .unwrap();
            let mut shuffled = rows.clone();
            shuffled.reverse();
            shuffled.swap(0, 3);
            let b = scene_descriptor(
                &SceneInstanceSet::from_rows(&shuffled, 12, Modality::Image).unwrap(),
                &store,
                &cfg,
            )
            .unwrap();
            // Same rows in scattered slots.
            let mut descriptors = Matrix::zeros(12, 8);
            let mut mask = vec![false; 12];
            for (i, r) in rows.iter().enumerate() {
                descriptors.row_mut(2 * i).copy_from_slice(r);
                mask[2 * i] = true;
            }
            let c = scene_descriptor(
                &SceneInstanceSet {
                    descriptors,
                    mask,
                    modality: Modality::Image,
                },
                &store,
                &cfg,
            )
            .unwrap();
            for i in 0..8 {
                assert!((a[i] - b[i]).abs() < 1e-9);
                assert!((a[i] - c[i]).abs() < 1e-9);
            }
            assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_and_dirty_sets_rejected() {
        let (cfg, store) = setup(Modality::Text);
        let set = SceneInstanceSet {
            descriptors: Matrix::zeros(12, 8),
            mask: vec![false; 12],
            modality: Modality::Text,
        };
        assert!(matches!(scene_descriptor(&set, &store, &cfg), Err(Error::EmptyScene)));
        let mut dirty = SceneInstanceSet::from_rows(&unit_rows(2, 8, 6), 12, Modality::Text).unwrap();
        dirty.descriptors.set(11, 0, 1.0);
        assert!(matches!(
            scene_descriptor(&dirty, &store, &cfg),
            Err(Error::Contract(_))
        ));
    }
}
