//! White-box pre-image attack on protected templates.
//!
//! The attacker holds a target template `Z_T`, every model weight, the noise
//! schedule, and (in the strongest threat model) the user key, so the
//! protection map is a deterministic differentiable function they can
//! evaluate. The attack runs projected gradient ascent on
//! `cos(Z_T, protect(Z'))` with the candidate constrained to an L2 ball,
//! Adam-style adaptive steps, and seeded restarts. It sees only the target,
//! the oracle closure, and its own configuration; raw embeddings and meshes
//! are not reachable through this interface.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::neural::autodiff::{Tape, Var};
use crate::neural::Adam;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("all {0} restarts aborted on non-finite objectives")]
    AllRestartsFailed(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// L2 radius of the candidate ball.
    pub radius: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { iterations: 500, step_size: 0.01, radius: 1.0, restarts: 4, seed: 0xa77ac4 }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.radius <= 0.0 {
            return Err(AttackError::InvalidConfig("radius must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(AttackError::InvalidConfig("restarts must be positive".into()));
        }
        Ok(())
    }
}

/// Differentiable protection oracle: maps a candidate pre-image node to its
/// protected template node on the same tape.
pub trait ProtectionOracle {
    fn apply(&self, tape: &mut Tape, candidate: Var) -> Var;
}

impl<F> ProtectionOracle for F
where
    F: Fn(&mut Tape, Var) -> Var,
{
    fn apply(&self, tape: &mut Tape, candidate: Var) -> Var {
        self(tape, candidate)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub best_similarity: f64,
    pub best_preimage: Vec<f64>,
    /// Restarts that aborted on non-finite objectives.
    pub aborted_restarts: usize,
}

fn project_to_ball(z: &mut [f64], radius: f64) {
    let n = crate::linalg::norm(z);
    if n > radius {
        let s = radius / n;
        for x in z.iter_mut() {
            *x *= s;
        }
    }
}

/// Run the constrained similarity attack against one target. `dim` is the
/// pre-image dimension the oracle expects. Deterministic for a fixed config.
pub fn csa_attack(
    target: &[f64],
    oracle: &dyn ProtectionOracle,
    dim: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    let mut best_similarity = f64::NEG_INFINITY;
    let mut best_preimage = vec![0.0; dim];
    let mut aborted = 0usize;

    for restart in 0..config.restarts {
        let mut rng =
            SplitMix64::new(derive_seed(config.seed, "csa-restart", &[restart as u64]));
        // Uniform-in-ball init: random direction, radius ~ rho * U^(1/d).
        let mut z = rng.normal_vec(dim);
        let norm = crate::linalg::norm(&z);
        let r = config.radius * rng.next_f64().powf(1.0 / dim as f64);
        for x in z.iter_mut() {
            *x *= r / norm;
        }

        let mut opt = Adam::new(config.step_size, &[(dim, 1)]);
        let mut failed = false;

        for iter in 0..=config.iterations {
            let mut tape = Tape::new();
            let candidate = tape.leaf(Mat::col_vec(z.clone()));
            let protected = oracle.apply(&mut tape, candidate);
            let target_node = tape.constant(Mat::col_vec(target.to_vec()));
            let similarity = tape.cosine(target_node, protected);
            let s = tape.scalar(similarity);
            if !s.is_finite() {
                failed = true;
                break;
            }
            if s > best_similarity {
                best_similarity = s;
                best_preimage = z.clone();
            }
            if iter == config.iterations {
                break;
            }
            // Ascent: feed Adam the negated gradient.
            let grads = tape.backward(similarity);
            let g = Tape::grad_of(&grads, candidate)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(dim, 1));
            let neg = g.scale(-1.0);
            let mut z_mat = Mat::col_vec(z.clone());
            opt.step(&mut [&mut z_mat], std::slice::from_ref(&neg));
            z = z_mat.data().to_vec();
            project_to_ball(&mut z, config.radius);
        }
        if failed {
            aborted += 1;
        }
    }

    if aborted == config.restarts {
        return Err(AttackError::AllRestartsFailed(aborted));
    }
    Ok(AttackOutcome { best_similarity, best_preimage, aborted_restarts: aborted })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SarEntry {
    pub label: String,
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub per_target_best: Vec<f64>,
    pub sar: Vec<SarEntry>,
}

/// Successful attack rate: the fraction of targets whose best similarity
/// exceeds each threshold (strict, matching the verification rule).
pub fn sar_report(best_similarities: &[f64], thresholds: &[(String, f64)]) -> AttackReport {
    let n = best_similarities.len().max(1) as f64;
    let sar = thresholds
        .iter()
        .map(|(label, threshold)| SarEntry {
            label: label.clone(),
            threshold: *threshold,
            rate: best_similarities.iter().filter(|&&s| s > *threshold).count() as f64 / n,
        })
        .collect();
    AttackReport { per_target_best: best_similarities.to_vec(), sar }
}
