//! Siamese pair loss on descriptor L2 distance.
//!
//! For a pair of patches with descriptors `D(x1)`, `D(x2)` at distance `d`,
//! the hinge embedding loss is `d` for matching pairs and `max(0, m - d)`
//! for non-matching pairs, with margin `m`. Gradients are accumulated
//! independently for both descriptors and applied jointly to the weights,
//! which the two branches share.

use crate::error::{Error, Result};
use crate::network::{Gradients, NetworkState};
use crate::tensor::{l2_distance_slice, Element, Tensor};

/// Margin configuration for the pair loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossConfig {
    pub margin: f64,
}

impl Default for PairLossConfig {
    fn default() -> Self {
        PairLossConfig { margin: 1.0 }
    }
}

impl PairLossConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if !(margin > 0.0) {
            return Err(Error::invalid(format!(
                "margin must be positive, got {margin}"
            )));
        }
        Ok(PairLossConfig { margin })
    }
}

/// `delta * d + (1 - delta) * max(0, m - d)` where `delta` is 1 for a
/// matching pair and 0 otherwise.
pub fn pair_loss(d: f64, matching: bool, cfg: &PairLossConfig) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::invalid(format!(
            "distance must be non-negative, got {d}"
        )));
    }
    Ok(if matching { d } else { (cfg.margin - d).max(0.0) })
}

/// Gradient of the pair loss with respect to the first descriptor.
///
/// For matching pairs this is `(D1 - D2) / d`; for non-matching pairs with
/// an active hinge (`d < m`) the sign flips; an inactive hinge contributes
/// nothing. At `d == 0` the L2 norm is not differentiable and the gradient
/// is defined as the zero vector (`None`). The gradient with respect to
/// the second descriptor is the negation.
pub fn descriptor_gradient<E: Element>(
    d1: &Tensor<E>,
    d2: &Tensor<E>,
    matching: bool,
    cfg: &PairLossConfig,
) -> Result<Option<Tensor<E>>> {
    if d1.shape() != d2.shape() {
        return Err(Error::shape(format!(
            "descriptor shapes differ: {:?} vs {:?}",
            d1.shape(),
            d2.shape()
        )));
    }
    let d = l2_distance_slice(d1.data(), d2.data());
    if d == 0.0 {
        return Ok(None);
    }
    let sign = if matching {
        1.0
    } else if d < cfg.margin {
        -1.0
    } else {
        return Ok(None);
    };
    let scale = sign / d;
    let data: Vec<E> = d1
        .data()
        .iter()
        .zip(d2.data())
        .map(|(&a, &b)| E::from_f64(scale * (a.to_f64() - b.to_f64())))
        .collect();
    Ok(Some(Tensor::from_vec(d1.shape(), data)?))
}

/// Result of a full siamese forward/backward on one pair.
pub struct PairBackward<E: Element> {
    pub loss: f64,
    pub distance: f64,
    /// Branch gradients summed into one shared-weight buffer; `None` when
    /// the pair contributes no gradient (inactive hinge or coincident
    /// descriptors).
    pub gradients: Option<Gradients<E>>,
}

/// Forward-propagates both patches, evaluates the pair loss, and
/// backpropagates through both branches, summing into one shared gradient
/// buffer (first branch, then second).
pub fn pair_backward<E: Element>(
    state: &NetworkState<E>,
    x1: &Tensor<E>,
    x2: &Tensor<E>,
    matching: bool,
    cfg: &PairLossConfig,
) -> Result<PairBackward<E>> {
    let (desc1, trace1) = state.forward_traced(x1)?;
    let (desc2, trace2) = state.forward_traced(x2)?;
    let distance = l2_distance_slice(desc1.data(), desc2.data());
    let loss = pair_loss(distance, matching, cfg)?;

    let gradients = match descriptor_gradient(&desc1, &desc2, matching, cfg)? {
        None => None,
        Some(g1) => {
            let g2 = g1.map(|v| -v);
            let mut grads = state.backward(&trace1, &g1)?;
            grads.add(&state.backward(&trace2, &g2)?);
            Some(grads)
        }
    };
    Ok(PairBackward {
        loss,
        distance,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchName, NetworkSpec, NetworkState};
    use crate::rng::Rng;

    fn cfg(m: f64) -> PairLossConfig {
        PairLossConfig { margin: m }
    }

    #[test]
    fn matching_loss_is_distance() {
        assert_eq!(pair_loss(0.37, true, &cfg(1.0)).unwrap(), 0.37);
    }

    #[test]
    fn non_matching_beyond_margin_is_zero() {
        assert_eq!(pair_loss(1.4, false, &cfg(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn non_matching_inside_margin() {
        let l = pair_loss(0.3, false, &cfg(1.0)).unwrap();
        assert!((l - 0.7).abs() < 1e-15);
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(pair_loss(-0.1, true, &cfg(1.0)).is_err());
    }

    #[test]
    fn non_positive_margin_rejected() {
        assert!(PairLossConfig::new(0.0).is_err());
        assert!(PairLossConfig::new(-1.0).is_err());
    }

    #[test]
    fn identical_patches_matching_pair_is_flat_minimum() {
        let spec = NetworkSpec::named(ArchName::Cnn3);
        let state: NetworkState<f32> = NetworkState::build(&spec, 8).unwrap();
        let mut rng = Rng::new(9);
        let x = Tensor::random_uniform(&[1, 64, 64], -1.0, 1.0, &mut rng).unwrap();
        let out = pair_backward(&state, &x, &x, true, &cfg(1.0)).unwrap();
        assert_eq!(out.distance, 0.0);
        assert_eq!(out.loss, 0.0);
        assert!(out.gradients.is_none());
    }

    #[test]
    fn inactive_hinge_has_zero_gradients() {
        let d1: Tensor<f64> = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let d2: Tensor<f64> = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        // Distance 5 with margin 1: hinge inactive.
        let g = descriptor_gradient(&d1, &d2, false, &cfg(1.0)).unwrap();
        assert!(g.is_none());
    }

    #[test]
    fn matching_gradient_is_unit_direction() {
        let d1: Tensor<f64> = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let d2: Tensor<f64> = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let g = descriptor_gradient(&d1, &d2, true, &cfg(10.0))
            .unwrap()
            .unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn swapping_branches_preserves_loss_and_shared_gradients() {
        let spec = NetworkSpec::named(ArchName::Cnn2aNn1);
        let state: NetworkState<f64> = NetworkState::build(&spec, 17).unwrap();
        let mut rng = Rng::new(18);
        let a = Tensor::random_uniform(&[1, 64, 64], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::random_uniform(&[1, 64, 64], -1.0, 1.0, &mut rng).unwrap();
        for matching in [true, false] {
            let ab = pair_backward(&state, &a, &b, matching, &cfg(50.0)).unwrap();
            let ba = pair_backward(&state, &b, &a, matching, &cfg(50.0)).unwrap();
            assert_eq!(ab.loss, ba.loss);
            let (ga, gb) = (ab.gradients.unwrap(), ba.gradients.unwrap());
            for (x, y) in ga.blocks.iter().zip(&gb.blocks) {
                for (&u, &v) in x.data().iter().zip(y.data()) {
                    assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn loss_monotonicity_in_distance() {
        let c = cfg(1.0);
        let mut prev_p = -1.0;
        let mut prev_n = f64::INFINITY;
        for i in 0..50 {
            let d = i as f64 * 0.05;
            let lp = pair_loss(d, true, &c).unwrap();
            let ln = pair_loss(d, false, &c).unwrap();
            assert!(lp >= 0.0 && ln >= 0.0);
            assert!(lp > prev_p);
            assert!(ln <= prev_n);
            prev_p = lp;
            prev_n = ln;
        }
    }
}
