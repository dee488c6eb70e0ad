//! Building blocks recorded on a [`Graph`]: dense layers, three-layer MLPs,
//! masked softmax and the residual multi-head self-attention block.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Activation between the layers of an MLP. None after the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Masked, max-shifted softmax. Masked entries are exactly zero.
pub fn softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Dimension("softmax mask length".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyScene);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// `y = x·W + b` with `W` at `<path>.w` and `b` at `<path>.b`.
pub fn linear_forward(g: &mut Graph, x: NodeId, path: &str, store: &ParamStore) -> Result<NodeId> {
    let w = g.param(store, &format!("{path}.w"))?;
    let b = g.param(store, &format!("{path}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// linear → act → linear → act → linear, layers at `<prefix>.l0..l2`.
pub fn mlp3_forward(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    store: &ParamStore,
    activation: Activation,
) -> Result<NodeId> {
    let mut h = x;
    for layer in 0..3 {
        h = linear_forward(g, h, &format!("{prefix}.l{layer}"), store)?;
        if layer < 2 && activation == Activation::Relu {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn init_mlp3<R: Rng>(store: &mut ParamStore, prefix: &str, dims: [usize; 4], rng: &mut R) -> Result<()> {
    for layer in 0..3 {
        store.add_linear(&format!("{prefix}.l{layer}"), dims[layer], dims[layer + 1], rng)?;
    }
    Ok(())
}

/// Parameters of one attention block: q/k/v/o projections and a two-layer
/// feed-forward network of width `ffn_hidden`.
pub fn init_mhsa<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    ffn_hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        store.add_linear(&format!("{prefix}.{proj}"), dim, dim, rng)?;
    }
    store.add_linear(&format!("{prefix}.ffn.l0"), dim, ffn_hidden, rng)?;
    store.add_linear(&format!("{prefix}.ffn.l1"), ffn_hidden, dim, rng)
}

/// Residual self-attention block over groups of `group_len` rows.
///
/// `x` stacks `B` groups (`B·group_len × D`); attention never crosses a
/// group. Rows with `mask == false` are excluded as keys and their output
/// rows are zero. Computes `T = (X + MHSA(X)) + FFN(X + MHSA(X))`.
pub fn mhsa_block_forward(
    g: &mut Graph,
    x: NodeId,
    mask: &[bool],
    prefix: &str,
    store: &ParamStore,
    heads: usize,
    group_len: usize,
) -> Result<NodeId> {
    let (rows, dim) = g.shape(x);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
    }
    if mask.len() != rows || group_len == 0 || rows % group_len != 0 {
        return Err(Error::Dimension(format!(
            "mask of {} for {rows} rows in groups of {group_len}",
            mask.len()
        )));
    }
    for group in mask.chunks(group_len) {
        if !group.iter().any(|&m| m) {
            return Err(Error::EmptyScene);
        }
    }
    let key_mask: Vec<bool> = (0..rows)
        .flat_map(|r| {
            let base = (r / group_len) * group_len;
            mask[base..base + group_len].iter().copied()
        })
        .collect();

    let q = linear_forward(g, x, &format!("{prefix}.q"), store)?;
    let k = linear_forward(g, x, &format!("{prefix}.k"), store)?;
    let v = linear_forward(g, x, &format!("{prefix}.v"), store)?;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.col_slice(q, h * dh, dh)?,
                g.col_slice(k, h * dh, dh)?,
                g.col_slice(v, h * dh, dh)?,
            )
        };
        let scores = g.group_scores(qh, kh, group_len, group_len, scale)?;
        let attn = g.masked_softmax_rows(scores, &key_mask)?;
        head_out.push(g.group_apply(attn, vh, group_len, group_len)?);
    }
    let merged = if heads == 1 {
        head_out[0]
    } else {
        g.concat_cols(&head_out)?
    };
    let attended = linear_forward(g, merged, &format!("{prefix}.o"), store)?;
    let resid = g.add(x, attended)?;
    let hidden = linear_forward(g, resid, &format!("{prefix}.ffn.l0"), store)?;
    let hidden = g.relu(hidden);
    let ffn = linear_forward(g, hidden, &format!("{prefix}.ffn.l1"), store)?;
    let out = g.add(resid, ffn)?;
    g.mask_rows(out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let all = [true; 3];
        let s = softmax(&[1.0, 1.0, 1.0], &all).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = softmax(&[0.0, 2f64.ln()], &[true, true]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15 && (s[1] - 2.0 / 3.0).abs() < 1e-15);

        let s = softmax(&[1000.0, 1000.0], &[true, true]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_masking() {
        let s = softmax(&[5.0, 1.0, 3.0], &[false, true, true]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] + s[2] - 1.0).abs() < 1e-15);
        assert!(matches!(softmax(&[1.0], &[false]), Err(Error::EmptyScene)));
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        store.insert("id.w", Matrix::identity(2)).unwrap();
        store.insert("id.b", Matrix::zeros(1, 2)).unwrap();
        store
            .insert("lin.w", Matrix::from_rows(&[[2.0], [3.0]]).unwrap())
            .unwrap();
        store.insert("lin.b", Matrix::row_vector(&[1.0])).unwrap();

        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[1.0, 2.0]));
        let y = linear_forward(&mut g, x, "id", &store).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Matrix::row_vector(&[1.0, 1.0]));
        let y = linear_forward(&mut g, x, "lin", &store).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_errors() {
        let mut store = ParamStore::new();
        store.insert("lin.w", Matrix::zeros(3, 1)).unwrap();
        store.insert("lin.b", Matrix::zeros(1, 1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(1, 2));
        assert!(matches!(
            linear_forward(&mut g, x, "lin", &store),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            linear_forward(&mut g, x, "other", &store),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn mlp_zero_and_identity() {
        let mut store = ParamStore::new();
        for l in 0..3 {
            store.insert(format!("z.l{l}.w"), Matrix::zeros(2, 2)).unwrap();
            store.insert(format!("z.l{l}.b"), Matrix::zeros(1, 2)).unwrap();
            store.insert(format!("i.l{l}.w"), Matrix::identity(2)).unwrap();
            store.insert(format!("i.l{l}.b"), Matrix::zeros(1, 2)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[0.3, 1.7]));
        let z = mlp3_forward(&mut g, x, "z", &store, Activation::Relu).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
        let i = mlp3_forward(&mut g, x, "i", &store, Activation::Relu).unwrap();
        assert_eq!(g.value(i).data(), &[0.3, 1.7]);
    }

    #[test]
    fn mhsa_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_mhsa(&mut store, "a", 6, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(2, 6));
        assert!(matches!(
            mhsa_block_forward(&mut g, x, &[true, true], "a", &store, 4, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mhsa_block_forward(&mut g, x, &[false, false], "a", &store, 2, 2),
            Err(Error::EmptyScene)
        ));
    }
}
