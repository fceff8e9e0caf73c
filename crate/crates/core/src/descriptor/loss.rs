//! Bounded triplet loss and end-to-end gradients.
//!
//! The loss on one triplet with positive distance d_p and negative distance
//! d_n is
//!
//! ```text
//! E = max(0, 1 - d_n / (margin + d_p))
//! ```
//!
//! which stays in [0, 1] and is exactly zero once d_n >= d_p + margin. In
//! the active region the partials are dE/dd_p = d_n / (margin + d_p)^2 and
//! dE/dd_n = -1 / (margin + d_p); at the kink the flat branch is taken, so
//! inactive triplets contribute exactly zero gradient. Distances shorter
//! than `UNIT_GUARD` have no defined direction and contribute a zero unit
//! vector instead.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward_trace, DescriptorVector, GradientSet, TowerWeights};
use super::DescriptorError;

const UNIT_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(DescriptorError::BadMargin { margin: self.margin });
        }
        Ok(())
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Plain L2 distance between two descriptors of equal length.
pub fn pair_distance(a: &DescriptorVector, b: &DescriptorVector) -> Result<f64, DescriptorError> {
    if a.len() != b.len() {
        return Err(DescriptorError::LengthMismatch { a: a.len(), b: b.len() });
    }
    Ok(l2(a.as_slice(), b.as_slice()))
}

/// The scalar loss given both distances. Distances must be finite and
/// nonnegative; the margin must be positive.
pub fn triplet_loss(d_p: f64, d_n: f64, cfg: &LossConfig) -> Result<f64, DescriptorError> {
    cfg.validate()?;
    if !(d_p.is_finite() && d_n.is_finite()) {
        return Err(DescriptorError::NonFinite { context: "triplet distances".into() });
    }
    if d_p < 0.0 || d_n < 0.0 {
        return Err(DescriptorError::NegativeDistance { d_p, d_n });
    }
    Ok((1.0 - d_n / (cfg.margin + d_p)).max(0.0))
}

/// Loss and weight gradients for one triplet.
#[derive(Debug)]
pub struct TripletGradients {
    pub loss: f64,
    pub d_p: f64,
    pub d_n: f64,
    /// False when the triplet sits in the flat region; gradients are then
    /// exactly zero.
    pub active: bool,
    pub grads: GradientSet,
}

/// Run all three towers through the shared weights, compute the loss and
/// backpropagate it into a single gradient set.
pub fn loss_gradients(
    w: &TowerWeights,
    anchor: &Array3<f64>,
    positive: &Array3<f64>,
    negative: &Array3<f64>,
    cfg: &LossConfig,
) -> Result<TripletGradients, DescriptorError> {
    cfg.validate()?;
    let ta = forward_trace(w, anchor)?;
    let tp = forward_trace(w, positive)?;
    let tn = forward_trace(w, negative)?;
    for (trace, role) in [(&ta, "anchor"), (&tp, "positive"), (&tn, "negative")] {
        if !trace.descriptor.iter().all(|x| x.is_finite()) {
            return Err(DescriptorError::NonFinite {
                context: format!("{role} descriptor"),
            });
        }
    }
    let d_p = l2(&ta.descriptor, &tp.descriptor);
    let d_n = l2(&ta.descriptor, &tn.descriptor);
    let m = cfg.margin;
    let raw = 1.0 - d_n / (m + d_p);
    let loss = raw.max(0.0);
    let active = raw > 0.0;
    let mut grads = GradientSet::zeros_like(w);
    if active {
        let de_dp = d_n / ((m + d_p) * (m + d_p));
        let de_dn = -1.0 / (m + d_p);
        let dim = ta.descriptor.len();
        let mut ga = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        for i in 0..dim {
            let u_ap = if d_p > UNIT_GUARD {
                (ta.descriptor[i] - tp.descriptor[i]) / d_p
            } else {
                0.0
            };
            let u_an = if d_n > UNIT_GUARD {
                (ta.descriptor[i] - tn.descriptor[i]) / d_n
            } else {
                0.0
            };
            ga[i] = de_dp * u_ap + de_dn * u_an;
            gp[i] = -de_dp * u_ap;
            gn[i] = -de_dn * u_an;
        }
        backward(w, &ta, &ga, &mut grads);
        backward(w, &tp, &gp, &mut grads);
        backward(w, &tn, &gn, &mut grads);
    }
    Ok(TripletGradients { loss, d_p, d_n, active, grads })
}

/// Forward-only loss for one triplet, used for validation passes.
pub fn triplet_loss_value(
    w: &TowerWeights,
    anchor: &Array3<f64>,
    positive: &Array3<f64>,
    negative: &Array3<f64>,
    cfg: &LossConfig,
) -> Result<f64, DescriptorError> {
    let a = super::net::forward(w, anchor)?;
    let p = super::net::forward(w, positive)?;
    let n = super::net::forward(w, negative)?;
    triplet_loss(pair_distance(&a, &p)?, pair_distance(&a, &n)?, cfg)
}
