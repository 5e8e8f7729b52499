//! Unlearning direction strategies.
//!
//! The round loop in [`crate::engine`] is shared; strategies differ in
//! which loss the departing client trains under, how the server turns
//! the collected gradients into an update direction, and whether the
//! post-training stage projects gradients off the unlearned
//! displacement. Retraining has no direction strategy; the engine
//! handles it as a separate flow.

use crate::config::Algorithm;
use crate::error::{Error, Result};
use crate::linalg::{self, GradientMatrix, OsdOutcome, RowspaceProjector, TOL_NULL_REL, TOL_RANK_REL};
use crate::nn::Loss;
use crate::{cast, widen, Float};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Result of a strategy's direction computation for one round.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyDirection<F> {
    /// Apply `model += lr * direction`.
    Step { direction: Vec<F>, flags: Vec<String> },
    /// No usable direction this round; the engine skips it.
    Degenerate { reason: String },
}

/// Server-side policy for one unlearning algorithm.
pub trait DirectionStrategy<F: Float> {
    /// Loss the departing client trains under during unlearning.
    fn target_loss(&self) -> Loss;

    /// Update direction from the target's gradient and the remaining
    /// clients' stacked gradients. `rng` is consumed only by stochastic
    /// strategies, but is always advanced identically by the engine.
    fn direction(
        &self,
        g_u: &[F],
        remaining: &GradientMatrix<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<StrategyDirection<F>>;

    /// Whether post-training projects remaining gradients onto the
    /// plane orthogonal to the displacement from the origin model.
    fn projects_posttrain(&self) -> bool {
        true
    }
}

/// The full method: steepest descent on the unlearning loss restricted
/// to the null space of the remaining clients' gradients. Optionally
/// skips the post-training projection (the projection-free ablation).
#[derive(Debug, Clone, Copy)]
pub struct OrthogonalSteepest {
    pub project_posttrain: bool,
}

impl Default for OrthogonalSteepest {
    fn default() -> Self {
        Self { project_posttrain: true }
    }
}

impl<F: Float> DirectionStrategy<F> for OrthogonalSteepest {
    fn target_loss(&self) -> Loss {
        Loss::Uce
    }

    fn direction(
        &self,
        g_u: &[F],
        remaining: &GradientMatrix<F>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StrategyDirection<F>> {
        match linalg::osd_direction(remaining, g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL))? {
            OsdOutcome::Direction(d) => Ok(StrategyDirection::Step { direction: d, flags: vec![] }),
            OsdOutcome::Degenerate { residual_rel } => Ok(StrategyDirection::Degenerate {
                reason: format!(
                    "target gradient lies in the remaining clients' span \
                     (null-space residual {:.3e} of the gradient norm)",
                    widen(residual_rel)
                ),
            }),
        }
    }

    fn projects_posttrain(&self) -> bool {
        self.project_posttrain
    }
}

/// Gradient ascent on the target's plain cross-entropy. The gradient
/// norm explodes as the target's predictions collapse, so the step is
/// capped at `clip_factor` times the median remaining-client gradient
/// norm and the clip is flagged rather than hidden.
#[derive(Debug, Clone, Copy)]
pub struct GradientAscentCe {
    pub clip_factor: f64,
}

impl Default for GradientAscentCe {
    fn default() -> Self {
        Self { clip_factor: 1e3 }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("gradient norms are finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl<F: Float> DirectionStrategy<F> for GradientAscentCe {
    fn target_loss(&self) -> Loss {
        Loss::Ce
    }

    fn direction(
        &self,
        g_u: &[F],
        remaining: &GradientMatrix<F>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StrategyDirection<F>> {
        if remaining.dim() != g_u.len() {
            return Err(Error::Config(format!(
                "target gradient has {} coordinates, remaining gradients have {}",
                g_u.len(),
                remaining.dim()
            )));
        }
        let gu_norm = widen(linalg::norm(g_u));
        if gu_norm == 0.0 {
            return Ok(StrategyDirection::Degenerate {
                reason: "target gradient is zero".into(),
            });
        }
        let cap = self.clip_factor
            * median(remaining.rows().iter().map(|g| widen(linalg::norm(g))).collect());
        if gu_norm > cap && cap > 0.0 {
            let d = linalg::scale(g_u, cast(cap / gu_norm));
            return Ok(StrategyDirection::Step { direction: d, flags: vec!["clipped".into()] });
        }
        Ok(StrategyDirection::Step { direction: g_u.to_vec(), flags: vec![] })
    }
}

/// Steps along the negated raw gradient of the unlearning loss,
/// ignoring the remaining clients entirely.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegatedGradient;

impl<F: Float> DirectionStrategy<F> for NegatedGradient {
    fn target_loss(&self) -> Loss {
        Loss::Uce
    }

    fn direction(
        &self,
        g_u: &[F],
        remaining: &GradientMatrix<F>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StrategyDirection<F>> {
        if remaining.dim() != g_u.len() {
            return Err(Error::Config(format!(
                "target gradient has {} coordinates, remaining gradients have {}",
                g_u.len(),
                remaining.dim()
            )));
        }
        if linalg::norm(g_u) == F::zero() {
            return Ok(StrategyDirection::Degenerate {
                reason: "target gradient is zero".into(),
            });
        }
        Ok(StrategyDirection::Step {
            direction: linalg::scale(g_u, -F::one()),
            flags: vec![],
        })
    }
}

const RANDOM_NULL_MAX_ATTEMPTS: usize = 50;

/// Samples a direction uniformly on the sphere of radius `‖g_u‖`
/// inside the null space of the remaining gradients, keeping only
/// draws that descend the unlearning loss (`d·g_u < 0`; a draw with
/// positive alignment is negated). Gives up after a bounded number of
/// attempts when the null space is trivial or every draw lands
/// orthogonal to the target gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomNullDescent;

impl<F: Float> DirectionStrategy<F> for RandomNullDescent {
    fn target_loss(&self) -> Loss {
        Loss::Uce
    }

    fn direction(
        &self,
        g_u: &[F],
        remaining: &GradientMatrix<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<StrategyDirection<F>> {
        if remaining.dim() != g_u.len() {
            return Err(Error::Config(format!(
                "target gradient has {} coordinates, remaining gradients have {}",
                g_u.len(),
                remaining.dim()
            )));
        }
        let gu_norm = linalg::norm(g_u);
        if gu_norm == F::zero() {
            return Ok(StrategyDirection::Degenerate {
                reason: "target gradient is zero".into(),
            });
        }
        let projector = RowspaceProjector::new(remaining, cast(TOL_RANK_REL))?;
        let dim = remaining.dim();
        for _ in 0..RANDOM_NULL_MAX_ATTEMPTS {
            let z: Vec<F> = (0..dim)
                .map(|_| cast::<F>(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let z_norm = linalg::norm(&z);
            if z_norm == F::zero() {
                continue;
            }
            let null = projector.nullspace_component(&z);
            let null_norm = linalg::norm(&null);
            if widen(null_norm) <= TOL_NULL_REL * widen(z_norm) {
                continue;
            }
            let mut d = linalg::scale(&null, gu_norm / null_norm);
            let alignment = linalg::dot(&d, g_u);
            if alignment > F::zero() {
                d = linalg::scale(&d, -F::one());
            } else if alignment == F::zero() {
                continue;
            }
            return Ok(StrategyDirection::Step { direction: d, flags: vec![] });
        }
        Ok(StrategyDirection::Degenerate {
            reason: format!(
                "no descending null-space direction found in {RANDOM_NULL_MAX_ATTEMPTS} draws"
            ),
        })
    }
}

/// Maps a configured algorithm to its strategy. `Retraining` has none.
pub fn strategy_for<F: Float>(algorithm: Algorithm) -> Option<Box<dyn DirectionStrategy<F>>> {
    match algorithm {
        Algorithm::Fedosd => Some(Box::new(OrthogonalSteepest::default())),
        Algorithm::NoProjection => Some(Box::new(OrthogonalSteepest { project_posttrain: false })),
        Algorithm::GradientAscent => Some(Box::new(GradientAscentCe::default())),
        Algorithm::NegatedGradient => Some(Box::new(NegatedGradient)),
        Algorithm::RandomNull => Some(Box::new(RandomNullDescent)),
        Algorithm::Retraining => None,
    }
}
