//! Symmetric InfoNCE over in-batch negatives, on plain matrices (used by
//! tests and reporting) and recorded on a [`Graph`] (used for training).

use crate::error::{Error, Result};
use crate::numcore::{Graph, Matrix, NodeId};

fn check_pair(a: &Matrix, b: &Matrix, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "pair shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

fn neg_log_softmax_at(row: &[f64], i: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    lse - row[i]
}

/// Loss of positive pair `i`, both retrieval directions.
pub fn info_nce_symmetric(i: usize, a: &Matrix, b: &Matrix, tau: f64) -> Result<f64> {
    check_pair(a, b, tau)?;
    if i >= a.rows() {
        return Err(Error::Contract(format!("index {i} outside batch of {}", a.rows())));
    }
    let n = a.rows();
    let ab: Vec<f64> = (0..n).map(|j| crate::numcore::dot(a.row(i), b.row(j)) / tau).collect();
    let ba: Vec<f64> = (0..n).map(|j| crate::numcore::dot(b.row(i), a.row(j)) / tau).collect();
    Ok(neg_log_softmax_at(&ab, i) + neg_log_softmax_at(&ba, i))
}

/// Mean of [`info_nce_symmetric`] over the batch.
pub fn batch_contrastive(a: &Matrix, b: &Matrix, tau: f64) -> Result<f64> {
    check_pair(a, b, tau)?;
    let mut total = 0.0;
    for i in 0..a.rows() {
        total += info_nce_symmetric(i, a, b, tau)?;
    }
    Ok(total / a.rows() as f64)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
    }
    Ok(())
}

/// `α·L_IT + (1−α)·L_IP`.
pub fn combined_scene_loss(l_it: f64, l_ip: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(l_it);
    }
    if alpha == 0.0 {
        return Ok(l_ip);
    }
    Ok(alpha * l_it + (1.0 - alpha) * l_ip)
}

/// Batch-mean symmetric InfoNCE recorded on the graph (`1 × 1` node).
pub fn batch_contrastive_node(g: &mut Graph, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (n, _) = g.shape(a);
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension("contrastive pair shapes differ".into()));
    }
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let logits = g.matmul_t(a, b, false, true)?;
    let logits = g.scale(logits, 1.0 / tau);
    let rows = g.log_softmax_rows(logits);
    let d_ab = g.diag(rows)?;
    let logits_t = g.transpose(logits);
    let cols = g.log_softmax_rows(logits_t);
    let d_ba = g.diag(cols)?;
    let both = g.add(d_ab, d_ba)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// `α·L_IT + (1−α)·L_IP` on the graph. With α at 0 or 1 the unused term
/// is left out of the graph entirely so its branch gets no gradient.
pub fn combined_scene_loss_node(
    g: &mut Graph,
    l_it: Option<NodeId>,
    l_ip: Option<NodeId>,
    alpha: f64,
) -> Result<NodeId> {
    check_alpha(alpha)?;
    let missing = || Error::Contract("combined loss term missing".into());
    if alpha == 1.0 {
        return l_it.ok_or_else(missing);
    }
    if alpha == 0.0 {
        return l_ip.ok_or_else(missing);
    }
    let it = g.scale(l_it.ok_or_else(missing)?, alpha);
    let ip = g.scale(l_ip.ok_or_else(missing)?, 1.0 - alpha);
    g.add(it, ip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let a = m(&[[0.6, 0.8]]);
        let b = m(&[[1.0, 0.0]]);
        assert_eq!(info_nce_symmetric(0, &a, &b, 0.1).unwrap(), 0.0);
        assert_eq!(batch_contrastive(&a, &b, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_two_by_two() {
        let e = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce_symmetric(0, &e, &e, 1.0).unwrap() - want).abs() < 1e-10);
        assert!((batch_contrastive(&e, &e, 1.0).unwrap() - want).abs() < 1e-10);
        assert!((want - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn duplicate_rows_still_cost() {
        // Both rows equal: every logit is 1/τ, so each direction costs ln 2.
        let a = m(&[[1.0, 0.0], [1.0, 0.0]]);
        let l = batch_contrastive(&a, &a, 0.1).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn swap_symmetry() {
        let a = m(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]);
        let b = m(&[[0.8, 0.6], [0.0, 1.0], [-1.0, 0.0]]);
        for i in 0..3 {
            let x = info_nce_symmetric(i, &a, &b, 0.1).unwrap();
            let y = info_nce_symmetric(i, &b, &a, 0.1).unwrap();
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let a = m(&[[1.0, 0.0]]);
        assert!(matches!(batch_contrastive(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(info_nce_symmetric(1, &a, &a, 0.1), Err(Error::Contract(_))));
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(
            batch_contrastive(&empty, &empty, 0.1),
            Err(Error::Contract(_))
        ));
        assert!(matches!(combined_scene_loss(1.0, 1.0, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn combination() {
        assert!((combined_scene_loss(1.0, 2.0, 0.3).unwrap() - 1.7).abs() < 1e-15);
        assert_eq!(combined_scene_loss(1.25, 9.0, 1.0).unwrap(), 1.25);
        assert_eq!(combined_scene_loss(1.25, 9.0, 0.0).unwrap(), 9.0);
    }

    #[test]
    fn graph_matches_plain() {
        let a = m(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]);
        let b = m(&[[0.8, 0.6], [0.0, 1.0], [-1.0, 0.0]]);
        let mut g = Graph::new();
        let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = batch_contrastive_node(&mut g, na, nb, 0.1).unwrap();
        let want = batch_contrastive(&a, &b, 0.1).unwrap();
        assert!((g.scalar(l).unwrap() - want).abs() < 1e-12);
        let c = combined_scene_loss_node(&mut g, Some(l), Some(l), 0.3).unwrap();
        assert!((g.scalar(c).unwrap() - want).abs() < 1e-12);
    }
}
