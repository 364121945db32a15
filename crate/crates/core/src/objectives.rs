//! Energies and losses: the order-violation energy and its margin loss, the
//! L1 CBOW loss, join/meet lattice penalties, the joint combination, and the
//! bilinear baseline.
//!
//! Convention used everywhere: energy arguments are `(child, parent)` and the
//! more general concept should end up coordinatewise smaller, so the energy
//! penalizes coordinates where the parent exceeds the child. Values are
//! accumulated in `f64`; gradients are returned as `f32` vectors aligned with
//! the inputs.
//!
//! Subgradient choices at kinks are fixed so training is reproducible: an
//! exactly-zero hinge slack deactivates the hinge, an L1 tie contributes
//! zero, and a pointwise max/min tie is attributed to the first argument.

use rand::Rng;

use crate::embedding::GradientMap;
use crate::error::{Error, Result};

fn check_dim(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Order-violation energy `sum_i max(0, parent_i - child_i)^2`. Zero exactly
/// when the child dominates the parent coordinatewise.
pub fn order_energy(child: &[f32], parent: &[f32]) -> Result<f64> {
    check_dim(child, parent)?;
    let mut total = 0.0f64;
    for (&c, &p) in child.iter().zip(parent) {
        let r = (p as f64 - c as f64).max(0.0);
        total += r * r;
    }
    Ok(total)
}

/// `max(0, parent_i - child_i)` per coordinate, as f64.
fn order_residual(child: &[f32], parent: &[f32]) -> Vec<f64> {
    child
        .iter()
        .zip(parent)
        .map(|(&c, &p)| (p as f64 - c as f64).max(0.0))
        .collect()
}

/// L1 distance `sum_i |a_i - b_i|`.
pub fn l1_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dim(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum())
}

/// Gradients of the order margin loss with respect to its four inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderMarginGrads {
    pub pos_child: Vec<f32>,
    pub pos_parent: Vec<f32>,
    pub neg_child: Vec<f32>,
    pub neg_parent: Vec<f32>,
}

/// A hinge value plus gradients, present only while the hinge is active.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderMarginLoss {
    pub value: f64,
    pub grads: Option<OrderMarginGrads>,
}

/// Margin ranking loss `max(0, m + d(pos) - d(neg))` over order energies.
/// The gradient is `None` exactly when the hinge is inactive, i.e. the
/// negative pair is worse than the positive by at least the margin.
pub fn order_margin_loss(
    pos_child: &[f32],
    pos_parent: &[f32],
    neg_child: &[f32],
    neg_parent: &[f32],
    margin: f64,
) -> Result<OrderMarginLoss> {
    check_dim(pos_child, pos_parent)?;
    check_dim(neg_child, neg_parent)?;
    check_dim(pos_child, neg_child)?;
    let d_pos = order_energy(pos_child, pos_parent)?;
    let d_neg = order_energy(neg_child, neg_parent)?;
    let slack = margin + d_pos - d_neg;
    if slack <= 0.0 {
        return Ok(OrderMarginLoss {
            value: 0.0,
            grads: None,
        });
    }
    let r_pos = order_residual(pos_child, pos_parent);
    let r_neg = order_residual(neg_child, neg_parent);
    let grads = OrderMarginGrads {
        pos_child: r_pos.iter().map(|&r| (-2.0 * r) as f32).collect(),
        pos_parent: r_pos.iter().map(|&r| (2.0 * r) as f32).collect(),
        neg_child: r_neg.iter().map(|&r| (2.0 * r) as f32).collect(),
        neg_parent: r_neg.iter().map(|&r| (-2.0 * r) as f32).collect(),
    };
    Ok(OrderMarginLoss {
        value: slack,
        grads: Some(grads),
    })
}

/// Gradients of the CBOW loss w.r.t. target and (averaged) context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CbowGrads {
    pub target: Vec<f32>,
    pub context: Vec<f32>,
    pub neg_target: Vec<f32>,
    pub neg_context: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbowLoss {
    pub value: f64,
    pub grads: Option<CbowGrads>,
}

/// Text loss `max(0, m + |t - c|_1 - |t' - c'|_1)` where `c` is the averaged
/// context. Subgradients flow through the sign of each coordinate
/// difference; a tied coordinate contributes zero.
pub fn cbow_l1_loss(
    target: &[f32],
    context_avg: &[f32],
    neg_target: &[f32],
    neg_context_avg: &[f32],
    margin: f64,
) -> Result<CbowLoss> {
    check_dim(target, context_avg)?;
    check_dim(neg_target, neg_context_avg)?;
    check_dim(target, neg_target)?;
    let d_pos = l1_distance(target, context_avg)?;
    let d_neg = l1_distance(neg_target, neg_context_avg)?;
    let slack = margin + d_pos - d_neg;
    if slack <= 0.0 {
        return Ok(CbowLoss {
            value: 0.0,
            grads: None,
        });
    }
    let sign = |a: f32, b: f32| -> f32 {
        match a.partial_cmp(&b) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        }
    };
    let pos_sign: Vec<f32> = target
        .iter()
        .zip(context_avg)
        .map(|(&t, &c)| sign(t, c))
        .collect();
    let neg_sign: Vec<f32> = neg_target
        .iter()
        .zip(neg_context_avg)
        .map(|(&t, &c)| sign(t, c))
        .collect();
    let grads = CbowGrads {
        target: pos_sign.clone(),
        context: pos_sign.iter().map(|s| -s).collect(),
        neg_target: neg_sign.iter().map(|s| -s).collect(),
        neg_context: neg_sign,
    };
    Ok(CbowLoss {
        value: slack,
        grads: Some(grads),
    })
}

/// Gradients of a join or meet penalty w.r.t. the pair and the witness.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessGrads {
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
    pub witness: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyLoss {
    pub value: f64,
    pub grads: Option<WitnessGrads>,
}

/// Penalty `sum_i max(0, max(w1_i, w2_i) - wc_i)^2` asking the common child
/// `wc` to dominate the pointwise join of the pair. Gradient on a tied
/// coordinate of the join goes to `w1`.
pub fn join_penalty(w1: &[f32], w2: &[f32], wc: &[f32]) -> Result<PenaltyLoss> {
    check_dim(w1, w2)?;
    check_dim(w1, wc)?;
    let mut value = 0.0f64;
    let mut g1 = vec![0.0f32; w1.len()];
    let mut g2 = vec![0.0f32; w1.len()];
    let mut gw = vec![0.0f32; w1.len()];
    for i in 0..w1.len() {
        let join = w1[i].max(w2[i]) as f64;
        let r = (join - wc[i] as f64).max(0.0);
        if r > 0.0 {
            value += r * r;
            let g = (2.0 * r) as f32;
            if w1[i] >= w2[i] {
                g1[i] = g;
            } else {
                g2[i] = g;
            }
            gw[i] = -g;
        }
    }
    if value == 0.0 {
        return Ok(PenaltyLoss {
            value: 0.0,
            grads: None,
        });
    }
    Ok(PenaltyLoss {
        value,
        grads: Some(WitnessGrads {
            w1: g1,
            w2: g2,
            witness: gw,
        }),
    })
}

/// Penalty `sum_i max(0, wp_i - min(w1_i, w2_i))^2` asking the common parent
/// `wp` to sit below the pointwise meet of the pair.
pub fn meet_penalty(w1: &[f32], w2: &[f32], wp: &[f32]) -> Result<PenaltyLoss> {
    check_dim(w1, w2)?;
    check_dim(w1, wp)?;
    let mut value = 0.0f64;
    let mut g1 = vec![0.0f32; w1.len()];
    let mut g2 = vec![0.0f32; w1.len()];
    let mut gw = vec![0.0f32; w1.len()];
    for i in 0..w1.len() {
        let meet = w1[i].min(w2[i]) as f64;
        let r = (wp[i] as f64 - meet).max(0.0);
        if r > 0.0 {
            value += r * r;
            let g = (2.0 * r) as f32;
            if w1[i] <= w2[i] {
                g1[i] = -g;
            } else {
                g2[i] = -g;
            }
            gw[i] = g;
        }
    }
    if value == 0.0 {
        return Ok(PenaltyLoss {
            value: 0.0,
            grads: None,
        });
    }
    Ok(PenaltyLoss {
        value,
        grads: Some(WitnessGrads {
            w1: g1,
            w2: g2,
            witness: gw,
        }),
    })
}

/// Gradients for the margin variants of the lattice losses, which compare
/// the true witness against a corrupted one.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessMarginGrads {
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
    pub witness: Vec<f32>,
    pub neg_witness: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WitnessMarginLoss {
    pub value: f64,
    pub grads: Option<WitnessMarginGrads>,
}

/// Negative-sampled variant of [`join_penalty`]:
/// `max(0, m + d_c(w1,w2,wc) - d_c(w1,w2,wc_neg))`. The pair vectors appear
/// in both distance terms, so their gradients combine both contributions.
pub fn join_margin_loss(
    w1: &[f32],
    w2: &[f32],
    wc: &[f32],
    wc_neg: &[f32],
    margin: f64,
) -> Result<WitnessMarginLoss> {
    let pos = join_penalty(w1, w2, wc)?;
    let neg = join_penalty(w1, w2, wc_neg)?;
    witness_margin(pos, neg, margin)
}

/// Negative-sampled variant of [`meet_penalty`], same shape as
/// [`join_margin_loss`].
pub fn meet_margin_loss(
    w1: &[f32],
    w2: &[f32],
    wp: &[f32],
    wp_neg: &[f32],
    margin: f64,
) -> Result<WitnessMarginLoss> {
    let pos = meet_penalty(w1, w2, wp)?;
    let neg = meet_penalty(w1, w2, wp_neg)?;
    witness_margin(pos, neg, margin)
}

fn witness_margin(pos: PenaltyLoss, neg: PenaltyLoss, margin: f64) -> Result<WitnessMarginLoss> {
    let slack = margin + pos.value - neg.value;
    if slack <= 0.0 {
        return Ok(WitnessMarginLoss {
            value: 0.0,
            grads: None,
        });
    }
    let dim = pos
        .grads
        .as_ref()
        .or(neg.grads.as_ref())
        .map(|g| g.w1.len());
    let Some(dim) = dim else {
        // Both penalties are exactly zero: flat region, zero gradient, but
        // the hinge is active at the margin floor.
        return Ok(WitnessMarginLoss {
            value: slack,
            grads: None,
        });
    };
    let zero = || vec![0.0f32; dim];
    let mut grads = WitnessMarginGrads {
        w1: zero(),
        w2: zero(),
        witness: zero(),
        neg_witness: zero(),
    };
    if let Some(g) = pos.grads {
        for i in 0..dim {
            grads.w1[i] += g.w1[i];
            grads.w2[i] += g.w2[i];
            grads.witness[i] += g.witness[i];
        }
    }
    if let Some(g) = neg.grads {
        for i in 0..dim {
            grads.w1[i] -= g.w1[i];
            grads.w2[i] -= g.w2[i];
            grads.neg_witness[i] -= g.witness[i];
        }
    }
    Ok(WitnessMarginLoss {
        value: slack,
        grads: Some(grads),
    })
}

/// A loss value with its gradients already mapped onto parameter rows.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: GradientMap,
}

impl LossValue {
    pub fn zero(dim: usize) -> Self {
        LossValue {
            value: 0.0,
            grads: GradientMap::new(dim),
        }
    }
}

/// Weighted combination `alpha1 * order + alpha2 * cbow` of two loss terms,
/// applied to both values and gradient maps. A zero weight drops its term
/// entirely, so `joint_loss(o, c, 1, 0)` reproduces `o` exactly.
pub fn joint_loss(order: &LossValue, cbow: &LossValue, alpha1: f64, alpha2: f64) -> LossValue {
    let dim = if order.grads.dim() != 0 {
        order.grads.dim()
    } else {
        cbow.grads.dim()
    };
    let mut out = LossValue::zero(dim);
    if alpha1 != 0.0 {
        out.value += alpha1 * order.value;
        out.grads.merge_scaled(&order.grads, alpha1 as f32);
    }
    if alpha2 != 0.0 {
        out.value += alpha2 * cbow.value;
        out.grads.merge_scaled(&cbow.grads, alpha2 as f32);
    }
    out
}

/// Square matrix for the bilinear baseline score `x . (W y)`, stored
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearParams {
    dim: usize,
    w: Vec<f32>,
}

impl BilinearParams {
    /// Identity plus uniform noise from `[-noise, noise)`.
    pub fn near_identity<R: Rng>(dim: usize, noise: f32, rng: &mut R) -> Self {
        let mut w = vec![0.0f32; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let eye = if i == j { 1.0 } else { 0.0 };
                w[i * dim + j] = eye + (rng.gen::<f32>() * 2.0 - 1.0) * noise;
            }
        }
        BilinearParams { dim, w }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0f32; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        BilinearParams { dim, w }
    }

    pub fn from_data(dim: usize, w: Vec<f32>) -> Result<Self> {
        if w.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                left: w.len(),
                right: dim * dim,
            });
        }
        Ok(BilinearParams { dim, w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.w
    }

    pub fn row(&self, i: u32) -> &[f32] {
        let start = i as usize * self.dim;
        &self.w[start..start + self.dim]
    }

    pub fn row_mut(&mut self, i: u32) -> &mut [f32] {
        let start = i as usize * self.dim;
        &mut self.w[start..start + self.dim]
    }

    /// `W y`.
    pub fn matvec(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: y.len(),
                right: self.dim,
            });
        }
        Ok((0..self.dim)
            .map(|i| {
                self.row(i as u32)
                    .iter()
                    .zip(y)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// `W^T x`.
    pub fn matvec_transpose(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: self.dim,
            });
        }
        let mut out = vec![0.0f64; self.dim];
        for (i, &xv) in x.iter().enumerate() {
            let xi = xv as f64;
            for (o, &w) in out.iter_mut().zip(self.row(i as u32)) {
                *o += xi * w as f64;
            }
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }
}

/// Bilinear compatibility score `x . (W y)`; higher means more Is-A-like.
pub fn bilinear_score(x: &[f32], y: &[f32], params: &BilinearParams) -> Result<f64> {
    check_dim(x, y)?;
    if x.len() != params.dim {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: params.dim,
        });
    }
    let mut total = 0.0f64;
    for (i, &xv) in x.iter().enumerate() {
        let mut row_dot = 0.0f64;
        for (&w, &yv) in params.row(i as u32).iter().zip(y) {
            row_dot += w as f64 * yv as f64;
        }
        total += xv as f64 * row_dot;
    }
    Ok(total)
}

/// Gradients of the bilinear margin loss; `w` holds per-row gradients of the
/// matrix, keyed by row index.
#[derive(Debug, Clone)]
pub struct BilinearGrads {
    pub pos_child: Vec<f32>,
    pub pos_parent: Vec<f32>,
    pub neg_child: Vec<f32>,
    pub neg_parent: Vec<f32>,
    pub w: GradientMap,
}

#[derive(Debug, Clone)]
pub struct BilinearLoss {
    pub value: f64,
    pub grads: Option<BilinearGrads>,
}

/// Margin ranking loss for the baseline: `max(0, m - s(pos) + s(neg))`, the
/// mirror of the order loss since higher bilinear score means positive.
pub fn bilinear_margin_loss(
    pos_child: &[f32],
    pos_parent: &[f32],
    neg_child: &[f32],
    neg_parent: &[f32],
    params: &BilinearParams,
    margin: f64,
) -> Result<BilinearLoss> {
    let s_pos = bilinear_score(pos_child, pos_parent, params)?;
    let s_neg = bilinear_score(neg_child, neg_parent, params)?;
    let slack = margin - s_pos + s_neg;
    if slack <= 0.0 {
        return Ok(BilinearLoss {
            value: 0.0,
            grads: None,
        });
    }
    let dim = params.dim;
    let mut w_grads = GradientMap::new(dim);
    for i in 0..dim {
        let mut row = vec![0.0f32; dim];
        for j in 0..dim {
            row[j] = -pos_child[i] * pos_parent[j] + neg_child[i] * neg_parent[j];
        }
        w_grads.add(i as u32, &row);
    }
    let neg_of = |v: Vec<f32>| -> Vec<f32> { v.into_iter().map(|x| -x).collect() };
    let grads = BilinearGrads {
        pos_child: neg_of(params.matvec(pos_parent)?),
        pos_parent: neg_of(params.matvec_transpose(pos_child)?),
        neg_child: params.matvec(neg_parent)?,
        neg_parent: params.matvec_transpose(neg_child)?,
        w: w_grads,
    };
    Ok(BilinearLoss {
        value: slack,
        grads: Some(grads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_energy_zero_iff_child_dominates() {
        assert_eq!(order_energy(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(order_energy(&[1.5, 0.5], &[1.5, 0.5]).unwrap(), 0.0);
        // One violated coordinate of size 1, one satisfied.
        assert_eq!(order_energy(&[1.0, 3.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            order_energy(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn order_energy_transitive_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z: Vec<f32> = (0..4).map(|_| rng.gen::<f32>()).collect();
            let y: Vec<f32> = z.iter().map(|&v| v + rng.gen::<f32>()).collect();
            let x: Vec<f32> = y.iter().map(|&v| v + rng.gen::<f32>()).collect();
            assert_eq!(order_energy(&x, &y).unwrap(), 0.0);
            assert_eq!(order_energy(&y, &z).unwrap(), 0.0);
            assert_eq!(order_energy(&x, &z).unwrap(), 0.0);
        }
    }

    #[test]
    fn order_margin_hinge_activates_and_deactivates() {
        // d_pos = 0, d_neg = 2m: inactive, no gradients.
        let loss =
            order_margin_loss(&[2.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grads.is_none());

        // d_pos = d_neg = 0: the loss sits at the margin floor.
        let loss =
            order_margin_loss(&[2.0, 2.0], &[1.0, 1.0], &[3.0, 3.0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(loss.value, 1.0);

        // Active hinge with a violated positive: gradients pull the child up
        // and the parent down.
        let loss =
            order_margin_loss(&[0.0, 0.0], &[1.0, 0.0], &[5.0, 5.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(loss.value, 1.5);
        let g = loss.grads.unwrap();
        assert_eq!(g.pos_child, vec![-2.0, 0.0]);
        assert_eq!(g.pos_parent, vec![2.0, 0.0]);
        assert_eq!(g.neg_child, vec![0.0, 0.0]);
        assert_eq!(g.neg_parent, vec![0.0, 0.0]);
    }

    #[test]
    fn order_energy_is_permutation_invariant() {
        let x = [0.3f32, 1.7, 0.9, 2.4];
        let y = [1.1f32, 0.2, 1.5, 0.8];
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<f32> = perm.iter().map(|&i| x[i]).collect();
        let yp: Vec<f32> = perm.iter().map(|&i| y[i]).collect();
        assert_abs_diff_eq!(
            order_energy(&x, &y).unwrap(),
            order_energy(&xp, &yp).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cbow_loss_margin_floor_and_inactive_cases() {
        let v = [0.5f32, 0.25, 1.0];
        // Identical positive pair, far-apart negative: inactive.
        let loss = cbow_l1_loss(&v, &v, &[2.0, 0.25, 1.0], &[0.0, 0.25, 0.5], 1.0).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grads.is_none());
        // Everything identical: margin floor.
        let loss = cbow_l1_loss(&v, &v, &v, &v, 1.0).unwrap();
        assert_eq!(loss.value, 1.0);
    }

    #[test]
    fn cbow_subgradients_are_coordinate_signs() {
        let loss = cbow_l1_loss(
            &[1.0, 0.0, 0.5],
            &[0.0, 1.0, 0.5],
            &[1.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0],
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(loss.value, 2.1, epsilon = 1e-9);
        let g = loss.grads.unwrap();
        // Tied coordinates (index 2 of pos, all of neg) contribute zero.
        assert_eq!(g.target, vec![1.0, -1.0, 0.0]);
        assert_eq!(g.context, vec![-1.0, 1.0, 0.0]);
        assert_eq!(g.neg_target, vec![0.0, 0.0, 0.0]);
        assert_eq!(g.neg_context, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn join_penalty_examples() {
        assert_eq!(
            join_penalty(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0])
                .unwrap()
                .value,
            0.0
        );
        let loss = join_penalty(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(loss.value, 2.0);
        let g = loss.grads.unwrap();
        assert_eq!(g.w1, vec![2.0, 0.0]);
        assert_eq!(g.w2, vec![0.0, 2.0]);
        assert_eq!(g.witness, vec![-2.0, -2.0]);
        // Dominating witness: zero penalty.
        assert_eq!(
            join_penalty(&[1.0, 0.0], &[0.0, 1.0], &[1.5, 1.25])
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn meet_penalty_examples() {
        assert_eq!(
            meet_penalty(&[1.0, 2.0], &[2.0, 1.0], &[1.0, 1.0])
                .unwrap()
                .value,
            0.0
        );
        let loss = meet_penalty(&[1.0, 2.0], &[2.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(loss.value, 2.0);
        let g = loss.grads.unwrap();
        assert_eq!(g.w1, vec![-2.0, 0.0]);
        assert_eq!(g.w2, vec![0.0, -2.0]);
        assert_eq!(g.witness, vec![2.0, 2.0]);
        // The zero vector is below everything.
        assert_eq!(
            meet_penalty(&[1.0, 2.0], &[2.0, 1.0], &[0.0, 0.0])
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn join_and_meet_of_exact_witnesses_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w1: Vec<f32> = (0..6).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
            let w2: Vec<f32> = (0..6).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
            let join: Vec<f32> = w1.iter().zip(&w2).map(|(&a, &b)| a.max(b)).collect();
            let meet: Vec<f32> = w1.iter().zip(&w2).map(|(&a, &b)| a.min(b)).collect();
            assert_eq!(join_penalty(&w1, &w2, &join).unwrap().value, 0.0);
            assert_eq!(meet_penalty(&w1, &w2, &meet).unwrap().value, 0.0);
        }
    }

    #[test]
    fn witness_margin_combines_both_distance_terms() {
        let w1 = [1.0f32, 0.0];
        let w2 = [0.0f32, 1.0];
        // True witness violates by 2, corrupted witness dominates (d = 0):
        // slack = m + 2 - 0.
        let loss = join_margin_loss(&w1, &w2, &[0.0, 0.0], &[2.0, 2.0], 0.5).unwrap();
        assert_abs_diff_eq!(loss.value, 2.5, epsilon = 1e-9);
        let g = loss.grads.unwrap();
        assert_eq!(g.witness, vec![-2.0, -2.0]);
        assert_eq!(g.neg_witness, vec![0.0, 0.0]);
        // Pair gradients only see the positive term here.
        assert_eq!(g.w1, vec![2.0, 0.0]);
        assert_eq!(g.w2, vec![0.0, 2.0]);
    }

    #[test]
    fn joint_loss_weights_values_and_gradients() {
        let mut order = LossValue::zero(2);
        order.value = 1.0;
        order.grads.add(0, &[1.0, 0.0]);
        let mut cbow = LossValue::zero(2);
        cbow.value = 3.0;
        cbow.grads.add(0, &[0.0, 2.0]);
        cbow.grads.add(4, &[1.0, 1.0]);

        let joint = joint_loss(&order, &cbow, 2.0, 0.5);
        assert_abs_diff_eq!(joint.value, 3.5, epsilon = 1e-12);
        assert_eq!(joint.grads.get(0).unwrap(), &[2.0, 1.0]);
        assert_eq!(joint.grads.get(4).unwrap(), &[0.5, 0.5]);

        // A zero text weight reproduces the order term exactly.
        let only_order = joint_loss(&order, &cbow, 1.0, 0.0);
        assert_eq!(only_order.value, order.value);
        assert_eq!(only_order.grads.len(), 1);
        assert_eq!(
            only_order.grads.get(0).unwrap(),
            order.grads.get(0).unwrap()
        );

        // Margin-floor additivity.
        let m1 = LossValue {
            value: 1.0,
            grads: GradientMap::new(2),
        };
        let m2 = LossValue {
            value: 1.0,
            grads: GradientMap::new(2),
        };
        assert_eq!(joint_loss(&m1, &m2, 1.0, 1.0).value, 2.0);
    }

    #[test]
    fn bilinear_score_identity_and_zero_forms() {
        let eye = BilinearParams::identity(3);
        let e1 = [1.0f32, 0.0, 0.0];
        assert_eq!(bilinear_score(&e1, &e1, &eye).unwrap(), 1.0);
        let zero = BilinearParams::from_data(3, vec![0.0; 9]).unwrap();
        assert_eq!(bilinear_score(&[0.3, 0.4, 0.5], &e1, &zero).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_score_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let dim = 7;
            let w: Vec<f32> = (0..dim * dim).map(|_| rng.gen::<f32>() - 0.5).collect();
            let x: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect();
            let y: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect();
            let params = BilinearParams::from_data(dim, w.clone()).unwrap();
            let mut naive = 0.0f64;
            for i in 0..dim {
                for j in 0..dim {
                    naive += x[i] as f64 * w[i * dim + j] as f64 * y[j] as f64;
                }
            }
            assert_abs_diff_eq!(
                bilinear_score(&x, &y, &params).unwrap(),
                naive,
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn bilinear_margin_loss_gradient_signs() {
        let eye = BilinearParams::identity(2);
        // s_pos = 0, s_neg = 1 with margin 1: slack 2.
        let loss = bilinear_margin_loss(
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 0.0],
            &eye,
            1.0,
        )
        .unwrap();
        assert_eq!(loss.value, 2.0);
        let g = loss.grads.unwrap();
        assert_eq!(g.pos_child, vec![-1.0, -0.0]);
        assert_eq!(g.neg_child, vec![1.0, 0.0]);
        // dL/dW = -pos_child pos_parent^T + neg_child neg_parent^T; the
        // positive outer product is zero here.
        assert_eq!(g.w.get(0).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.w.get(1).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn inactive_bilinear_hinge_has_no_gradients() {
        let eye = BilinearParams::identity(2);
        let loss = bilinear_margin_loss(
            &[3.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 0.0],
            &eye,
            1.0,
        )
        .unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grads.is_none());
    }
}
