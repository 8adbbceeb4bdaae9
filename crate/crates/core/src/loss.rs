//! Soft-margin triplet loss and exhaustive in-batch mining.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub const DEFAULT_GAMMA: f64 = 10.0;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 + exp(gamma * (d_pos - d_neg)))`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    softplus(gamma * (d_pos - d_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Ground,
    Aerial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor_view: View,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Every (anchor, its match, another item's match) triple, ground anchors first.
pub fn mine_exhaustive(b: usize) -> TripletBatch {
    let mut triplets = Vec::with_capacity(2 * b * b.saturating_sub(1));
    for anchor_view in [View::Ground, View::Aerial] {
        for i in 0..b {
            for j in (0..b).filter(|&j| j != i) {
                triplets.push(Triplet {
                    anchor_view,
                    anchor: i,
                    positive: i,
                    negative: j,
                });
            }
        }
    }
    TripletBatch { triplets }
}

/// Mean triplet loss over all mined triplets of `ground: [b, n]` against `aerial: [b, n]`.
pub fn batch_loss<T: Scalar>(t: &mut Tape<T>, ground: Var, aerial: Var, gamma: f64) -> Result<Var> {
    let [b, n] = t.value(ground).dims2("batch_loss")?;
    if t.shape(aerial) != [b, n] {
        return Err(Error::shape("batch_loss", &[b, n], t.shape(aerial)));
    }
    if b < 2 {
        return Err(Error::Usage(format!("batch loss needs at least 2 pairs, got {b}")));
    }
    // dist[i, j] = |ground_i - aerial_j|
    let dist = t.pairwise_l2(ground, aerial)?;
    let mined = mine_exhaustive(b);
    let (pos, neg): (Vec<usize>, Vec<usize>) = mined
        .triplets
        .iter()
        .map(|tr| match tr.anchor_view {
            View::Ground => (tr.anchor * b + tr.positive, tr.anchor * b + tr.negative),
            View::Aerial => (tr.positive * b + tr.anchor, tr.negative * b + tr.anchor),
        })
        .unzip();
    let dp = t.gather(dist, &pos)?;
    let dn = t.gather(dist, &neg)?;
    let margin = t.sub(dp, dn)?;
    let scaled = t.scale(margin, T::from_f64(gamma));
    let per = t.softplus(scaled);
    Ok(t.mean(per))
}
