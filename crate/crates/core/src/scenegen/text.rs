//! Hint sentences and the frozen stub embedders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::Category;
use crate::error::{Error, Result};

/// Named color anchors (CSS values) used to verbalize instance colors.
pub const COLOR_ANCHORS: [(&str, [f64; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 128.0 / 255.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("gray", [128.0 / 255.0, 128.0 / 255.0, 128.0 / 255.0]),
    ("brown", [165.0 / 255.0, 42.0 / 255.0, 42.0 / 255.0]),
];

/// Nearest anchor by Euclidean RGB distance; ties go to the earlier anchor.
pub fn color_name(rgb: [f64; 3]) -> &'static str {
    let d2 = |a: [f64; 3]| (0..3).map(|i| (a[i] - rgb[i]).powi(2)).sum::<f64>();
    let mut best = 0;
    for i in 1..COLOR_ANCHORS.len() {
        if d2(COLOR_ANCHORS[i].1) < d2(COLOR_ANCHORS[best].1) {
            best = i;
        }
    }
    COLOR_ANCHORS[best].0
}

/// Six image regions: `top`/`bottom` split at v = 0.5, and u-bands
/// `[0, 0.4)` left, `[0.4, 0.6)` center, `[0.6, 1]` right.
pub fn region_label(u: f64, v: f64) -> Result<&'static str> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::Contract(format!("uv ({u}, {v}) outside [0,1]²")));
    }
    let top = v < 0.5;
    Ok(match (top, u) {
        (true, u) if u < 0.4 => "top left",
        (true, u) if u < 0.6 => "top center",
        (true, _) => "top right",
        (false, u) if u < 0.4 => "bottom left",
        (false, u) if u < 0.6 => "bottom center",
        (false, _) => "bottom right",
    })
}

const POSITION_MARKER: &str = " is at the ";

/// `"the <color> <category> is at the <region>"`.
pub fn make_hint(color: [f64; 3], category: Category, mean_uv: [f64; 2]) -> Result<String> {
    let region = region_label(mean_uv[0], mean_uv[1])?;
    Ok(format!(
        "the {} {}{POSITION_MARKER}{region}",
        color_name(color),
        category.phrase()
    ))
}

/// Drops the position phrase from a hint.
pub fn strip_position(hint: &str) -> &str {
    hint.split(POSITION_MARKER).next().unwrap_or(hint)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Tokens describing what a frozen image encoder sees in an instance crop.
pub fn image_tokens(color: [f64; 3], category: Category) -> Vec<String> {
    let mut t = vec![color_name(color).to_string()];
    t.extend(tokenize(category.phrase()));
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EmbedSpace {
    TextSpace,
    ImageSpace,
}

impl EmbedSpace {
    fn salt(self) -> &'static [u8] {
        match self {
            EmbedSpace::TextSpace => b"stub/text",
            EmbedSpace::ImageSpace => b"stub/image",
        }
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fixed unit vector for one token in one space.
pub fn token_vector(token: &str, space: EmbedSpace, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[space.salt(), token.as_bytes()]));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = crate::numcore::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Frozen surrogate encoder: mean of per-token pseudo-random unit vectors.
pub fn stub_embed<S: AsRef<str>>(tokens: &[S], space: EmbedSpace, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || tokens.is_empty() {
        return Err(Error::Contract("stub_embed needs tokens and dim > 0".into()));
    }
    // Canonical order makes the sum independent of token order bit-for-bit.
    let mut sorted: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    let mut out = vec![0.0; dim];
    for t in sorted {
        for (o, x) in out.iter_mut().zip(token_vector(t, space, dim)) {
            *o += x;
        }
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}
