//! Training loop for the drift network `phi`. The GCN is frozen; gradients
//! reach `phi` only through the diffusion chain.

use serde::{Deserialize, Serialize};

use super::*;
use crate::neural::{Adam, Embedding};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectTrainConfig {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub subjects_per_batch: usize,
    pub scans_per_subject: usize,
    pub init_seed: u64,
    pub batch_seed: u64,
}

impl Default for ProtectTrainConfig {
    fn default() -> Self {
        Self {
            t: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 128,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            epochs: 80,
            subjects_per_batch: 4,
            scans_per_subject: 2,
            init_seed: 0xd1ff_05e,
            batch_seed: 0xba7c_4,
        }
    }
}

/// One diffusion input in a training batch.
pub struct BatchItemSpec<'a> {
    pub subject: usize,
    pub z: &'a [f64],
    pub key: &'a KeyMaterial,
}

/// Build the composite objective on the tape for a batch of items, mirroring
/// [`loss_total`]. Pair terms are symmetric, so each unordered pair is built
/// once; the mask-class means are unchanged.
pub fn batch_loss_tape(
    tape: &mut Tape,
    phi: &PhiNetwork,
    vars: &PhiWeightVars,
    items: &[BatchItemSpec<'_>],
    schedule: &NoiseSchedule,
    w: &LossWeights,
) -> Var {
    let protected: Vec<Var> = items
        .iter()
        .map(|item| {
            let z0 = tape.constant(Mat::col_vec(item.z.to_vec()));
            diffuse_tape(tape, phi, vars, z0, item.key, schedule)
        })
        .collect();

    let mut disc_gen = Vec::new();
    let mut disc_imp = Vec::new();
    let mut disc_diff = Vec::new();
    let mut contr_gen = Vec::new();
    let mut contr_imp = Vec::new();
    let mut contr_other = Vec::new();
    let mut unlink = Vec::new();
    let mut same_subject_pairs = 0usize;

    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let s_prot = tape.cosine(protected[i], protected[j]);
            let class = mask_class(
                items[i].subject,
                items[i].key.key_id(),
                items[j].subject,
                items[j].key.key_id(),
            );
            if items[i].subject == items[j].subject {
                same_subject_pairs += 1;
            }
            match class {
                MaskClass::Genuine => {
                    let s_orig = crate::linalg::cosine(items[i].z, items[j].z);
                    // (S_orig - S_prot)^2
                    let neg = tape.scale(s_prot, -1.0);
                    let diff = tape.add_scalar(neg, s_orig);
                    disc_gen.push(tape.mul(diff, diff));
                    // 1 - S_prot
                    let neg2 = tape.scale(s_prot, -1.0);
                    contr_gen.push(tape.add_scalar(neg2, 1.0));
                }
                MaskClass::Impostor => {
                    disc_imp.push(tape.mul(s_prot, s_prot));
                    let shifted = tape.add_scalar(s_prot, -w.margin);
                    contr_imp.push(tape.relu(shifted));
                }
                MaskClass::CrossKey => {
                    disc_diff.push(tape.mul(s_prot, s_prot));
                    let shifted = tape.add_scalar(s_prot, -w.margin);
                    contr_other.push(tape.relu(shifted));
                    unlink.push(tape.abs(s_prot));
                }
                MaskClass::Mismatch => {
                    let shifted = tape.add_scalar(s_prot, -w.margin);
                    contr_other.push(tape.relu(shifted));
                }
            }
        }
    }

    let mut total: Option<Var> = None;
    let add_term = |tape: &mut Tape, total: &mut Option<Var>, term: Option<Var>, weight: f64| {
        let Some(term) = term else { return };
        let weighted = tape.scale(term, weight);
        *total = Some(match *total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    };

    let gen_mean = tape.mean_scalars(&disc_gen);
    add_term(tape, &mut total, gen_mean, 1.0);
    let imp_mean = tape.mean_scalars(&disc_imp);
    add_term(tape, &mut total, imp_mean, w.lambda_imp);
    let diff_mean = tape.mean_scalars(&disc_diff);
    add_term(tape, &mut total, diff_mean, w.lambda_diff);
    let cgen_mean = tape.mean_scalars(&contr_gen);
    add_term(tape, &mut total, cgen_mean, 1.0);
    let cimp_mean = tape.mean_scalars(&contr_imp);
    add_term(tape, &mut total, cimp_mean, w.beta_imp);
    let cother_mean = tape.mean_scalars(&contr_other);
    add_term(tape, &mut total, cother_mean, w.beta_other);
    let unlink_mean = tape.mean_scalars(&unlink);
    add_term(tape, &mut total, unlink_mean, w.lambda_u);
    // Key diversity: cross-key |cos| averaged over all same-subject pairs
    // (same-key pairs are structural zeros in the case expression).
    if !unlink.is_empty() && same_subject_pairs > 0 {
        let sum = unlink
            .iter()
            .skip(1)
            .fold(unlink[0], |acc, &v| tape.add(acc, v));
        let diverse = tape.scale(sum, 1.0 / same_subject_pairs as f64);
        add_term(tape, &mut total, Some(diverse), w.lambda_d);
    }

    total.unwrap_or_else(|| tape.constant(Mat::zeros(1, 1)))
}

/// Train `phi` on frozen embeddings. Per batch, two fresh keys are sampled
/// and every selected scan is diffused under both, which populates all four
/// mask classes. Deterministic for fixed seeds.
pub fn train_protect(
    embeddings: &[Embedding],
    cfg: &ProtectTrainConfig,
) -> Result<(PhiNetwork, Vec<f64>), ProtectError> {
    let mut by_subject: std::collections::BTreeMap<&str, Vec<&Embedding>> =
        std::collections::BTreeMap::new();
    for e in embeddings {
        by_subject.entry(&e.subject_id).or_default().push(e);
    }
    if by_subject.len() < 2 {
        return Err(ProtectError::TooFewSubjects(by_subject.len()));
    }
    let subjects: Vec<Vec<&Embedding>> = by_subject.into_values().collect();
    let d = embeddings[0].z.len();

    let schedule = NoiseSchedule::linear(cfg.t, cfg.beta_start, cfg.beta_end)?;
    let mut phi = PhiNetwork::new(d, cfg.hidden, derive_seed(cfg.init_seed, "phi-init", &[]));
    let mut opt = Adam::new(cfg.learning_rate, &phi.param_shapes());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng =
            SplitMix64::new(derive_seed(cfg.batch_seed, "protect-epoch", &[epoch as u64]));
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.subjects_per_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let key_a = KeyMaterial::from_seed(rng.next_u64());
            let key_b = KeyMaterial::from_seed(rng.next_u64());
            debug_assert_ne!(key_a, key_b);

            let mut items: Vec<BatchItemSpec<'_>> = Vec::new();
            for &si in chunk {
                let scans = &subjects[si];
                let mut idx: Vec<usize> = (0..scans.len()).collect();
                rng.shuffle(&mut idx);
                for &scan in idx.iter().take(cfg.scans_per_subject.min(scans.len())) {
                    for key in [&key_a, &key_b] {
                        items.push(BatchItemSpec { subject: si, z: &scans[scan].z, key });
                    }
                }
            }

            let mut tape = Tape::new();
            let vars = phi.vars(&mut tape);
            let loss = batch_loss_tape(&mut tape, &phi, &vars, &items, &schedule, &cfg.weights);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(ProtectError::Diverged { epoch, loss: loss_val });
            }
            epoch_loss += loss_val;
            batches += 1;

            let grads = tape.backward(loss);
            let grad_mats: Vec<Mat> = vars
                .all()
                .iter()
                .map(|&v| {
                    Tape::grad_of(&grads, v).cloned().unwrap_or_else(|| {
                        Mat::zeros(tape.value(v).rows(), tape.value(v).cols())
                    })
                })
                .collect();
            let mut params = phi.params_mut();
            opt.step(&mut params, &grad_mats);
        }
        history.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok((phi, history))
}
