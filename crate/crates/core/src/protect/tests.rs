use super::train::{batch_loss_tape, BatchItemSpec};
use super::*;
use crate::linalg::{cosine, pearson};
use crate::neural::autodiff::{max_relative_error, numeric_gradient, Tape};
use crate::neural::Embedding;
use crate::rng::SplitMix64;

fn unit_vec(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut v = rng.normal_vec(d);
    let n = crate::linalg::norm(&v);
    for x in v.iter_mut() {
        *x /= n;
    }
    v
}

#[test]
fn key_embed_is_deterministic_and_bounded() {
    let key = KeyMaterial::from_seed(7);
    let a = key_embed(&key);
    let b = key_embed(&key);
    assert_eq!(a, b);
    assert_eq!(a.len(), KEY_EMBED_DIM);
    assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn all_zero_key_is_fine() {
    let key = KeyMaterial::from_bytes([0u8; 16]);
    let e = key_embed(&key);
    assert!(e.iter().all(|x| x.is_finite()));
    let eps = keyed_noise(&key, 1, 16);
    assert!(eps.iter().all(|x| x.is_finite()));
}

#[test]
fn key_embed_single_bit_avalanche() {
    let mut cos_abs_sum = 0.0;
    for i in 0..100u64 {
        let base = KeyMaterial::from_seed(1000 + i);
        let mut flipped_bytes = [0u8; 16];
        // Reconstruct bytes through the embed path: flip one bit of the key.
        let mut rng = SplitMix64::new(1000 + i);
        flipped_bytes[..8].copy_from_slice(&rng.next_u64().to_le_bytes());
        flipped_bytes[8..].copy_from_slice(&rng.next_u64().to_le_bytes());
        let bit = (i % 128) as usize;
        flipped_bytes[bit / 8] ^= 1 << (bit % 8);
        let flipped = KeyMaterial::from_bytes(flipped_bytes);

        let c = cosine(&key_embed(&base), &key_embed(&flipped));
        assert!(c.abs() < 0.9, "pair {i}: |cos| = {}", c.abs());
        cos_abs_sum += c.abs();
    }
    let mean = cos_abs_sum / 100.0;
    assert!(mean < 0.2, "mean |cos| = {mean}");
}

#[test]
fn keyed_noise_is_deterministic_per_step() {
    let key = KeyMaterial::from_seed(3);
    assert_eq!(keyed_noise(&key, 5, 64), keyed_noise(&key, 5, 64));
    assert_ne!(keyed_noise(&key, 5, 64), keyed_noise(&key, 6, 64));
    let other = KeyMaterial::from_seed(4);
    assert_ne!(keyed_noise(&key, 5, 64), keyed_noise(&other, 5, 64));
}

#[test]
fn keyed_noise_moments() {
    let key = KeyMaterial::from_seed(11);
    let d = 64;
    let mut all = Vec::with_capacity(100_000);
    let mut t = 1;
    while all.len() < 100_000 {
        all.extend(keyed_noise(&key, t, d));
        t += 1;
    }
    all.truncate(100_000);
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.03, "var {var}");
}

#[test]
fn keyed_noise_steps_uncorrelated() {
    let key = KeyMaterial::from_seed(13);
    let d = 64;
    let mut rho_sum = 0.0;
    let mut rng = SplitMix64::new(99);
    for _ in 0..100 {
        let t1 = 1 + rng.next_index(500);
        let mut t2 = 1 + rng.next_index(500);
        while t2 == t1 {
            t2 = 1 + rng.next_index(500);
        }
        rho_sum += pearson(&keyed_noise(&key, t1, d), &keyed_noise(&key, t2, d));
    }
    let mean_rho = rho_sum / 100.0;
    assert!(mean_rho.abs() < 0.05, "mean correlation {mean_rho}");
}

#[test]
fn schedule_validation() {
    assert!(NoiseSchedule::linear(50, 1e-4, 0.02).is_ok());
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
    assert_eq!(s.beta(1), 0.1);
    assert_eq!(s.beta(3), 0.3);
    // Relaxed constructor allows the identity limit.
    assert!(NoiseSchedule::from_betas(vec![0.0, 0.0]).is_ok());
    assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
}

#[test]
fn zero_beta_zero_phi_is_identity() {
    let d = 16;
    let z = unit_vec(21, d);
    let key = KeyMaterial::from_seed(5);
    let schedule = NoiseSchedule::from_betas(vec![0.0; 7]).unwrap();
    let phi = PhiNetwork::zero(d, 8);
    let out = diffuse(&z, &key, &schedule, &phi).unwrap();
    assert_eq!(out, z);
}

#[test]
fn single_step_hand_check() {
    let d = 8;
    let z = unit_vec(22, d);
    let key = KeyMaterial::from_seed(6);
    let c: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.3).collect();
    let schedule = NoiseSchedule::from_betas(vec![0.5]).unwrap();
    let phi = PhiNetwork::constant(d, 8, &c);

    let out = diffuse(&z, &key, &schedule, &phi).unwrap();
    let eps = keyed_noise(&key, 1, d);
    for i in 0..d {
        let expected = 0.5f64.sqrt() * z[i] + 0.5f64.sqrt() * eps[i] + 0.5 * c[i];
        assert!((out[i] - expected).abs() <= 1e-12, "{} vs {expected}", out[i]);
    }
}

#[test]
fn diffuse_is_deterministic_and_key_sensitive() {
    let d = 32;
    let z = unit_vec(23, d);
    let schedule = NoiseSchedule::default_linear(25).unwrap();
    let phi = PhiNetwork::new(d, 16, 9);
    let k1 = KeyMaterial::from_seed(100);
    let k2 = KeyMaterial::from_seed(101);

    let a1 = diffuse(&z, &k1, &schedule, &phi).unwrap();
    let a2 = diffuse(&z, &k1, &schedule, &phi).unwrap();
    assert_eq!(a1, a2, "same key must be bit-stable");

    let b = diffuse(&z, &k2, &schedule, &phi).unwrap();
    let max_diff = a1.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff > 1e-6, "different keys must yield different templates");
}

#[test]
fn diffuse_tape_matches_plain() {
    let d = 12;
    let z = unit_vec(24, d);
    let schedule = NoiseSchedule::default_linear(10).unwrap();
    let phi = PhiNetwork::new(d, 8, 10);
    let key = KeyMaterial::from_seed(42);

    let plain = diffuse(&z, &key, &schedule, &phi).unwrap();
    let mut tape = Tape::new();
    let vars = phi.vars(&mut tape);
    let z0 = tape.constant(Mat::col_vec(z));
    let out = diffuse_tape(&mut tape, &phi, &vars, z0, &key, &schedule);
    for (a, b) in plain.iter().zip(tape.value(out).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mask_classes_partition_pairs() {
    let subjects = [0usize, 0, 0, 1];
    let keys = [10u64, 20, 10, 10];
    let mut counts = [0usize; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i == j {
                continue;
            }
            counts[mask_class(subjects[i], keys[i], subjects[j], keys[j]) as usize] += 1;
        }
    }
    assert_eq!(counts.iter().sum::<usize>(), 12);
    assert_eq!(counts, [2, 4, 4, 2]);
}

fn item(subject: usize, key_id: u64, z: Vec<f64>, z_t: Vec<f64>) -> ProtectedItem {
    ProtectedItem { subject, key_id, z, z_t }
}

#[test]
fn discriminability_examples() {
    let w = LossWeights::default();
    // Identity protection, genuine-only batch: first term 0.
    let z1 = unit_vec(31, 8);
    let z2 = unit_vec(32, 8);
    let items = vec![
        item(0, 1, z1.clone(), z1.clone()),
        item(0, 1, z2.clone(), z2.clone()),
    ];
    assert!(loss_discriminability(&items, &w).abs() < 1e-12);

    // One impostor pair, orthogonal protected templates: term 0.
    let items = vec![
        item(0, 1, z1.clone(), vec![1.0, 0.0]),
        item(1, 1, z2.clone(), vec![0.0, 1.0]),
    ];
    assert!(loss_discriminability(&items, &w).abs() < 1e-12);

    // One impostor pair with cos = 0.5 and lambda_imp = 1: term 0.25.
    let sqrt3 = 3.0f64.sqrt();
    let items = vec![
        item(0, 1, z1, vec![1.0, 0.0]),
        item(1, 1, z2, vec![0.5, sqrt3 / 2.0]),
    ];
    let got = loss_discriminability(&items, &w);
    assert!((got - 0.25).abs() < 1e-12, "{got}");
}

#[test]
fn contrastive_protected_examples() {
    let w = LossWeights::default();
    let z = unit_vec(33, 4);
    // Genuine pair with identical templates: S = 1, term 0.
    let items = vec![
        item(0, 1, z.clone(), vec![0.3, 0.4, 0.0, 0.0]),
        item(0, 1, z.clone(), vec![0.3, 0.4, 0.0, 0.0]),
    ];
    assert!(loss_contrastive_protected(&items, &w).abs() < 1e-12);

    // Impostor at the margin: hinge 0.
    let m = w.margin;
    let at_margin = vec![m, (1.0 - m * m).sqrt(), 0.0, 0.0];
    let items = vec![
        item(0, 1, z.clone(), vec![1.0, 0.0, 0.0, 0.0]),
        item(1, 1, z.clone(), at_margin),
    ];
    assert!(loss_contrastive_protected(&items, &w).abs() < 1e-12);

    // Impostor 0.3 above the margin, beta_imp = 1: term 0.3.
    let s = m + 0.3;
    let above = vec![s, (1.0 - s * s).sqrt(), 0.0, 0.0];
    let items = vec![
        item(0, 1, z.clone(), vec![1.0, 0.0, 0.0, 0.0]),
        item(1, 1, z, above),
    ];
    let got = loss_contrastive_protected(&items, &w);
    assert!((got - 0.3).abs() < 1e-12, "{got}");
}

#[test]
fn unlinkability_and_diversity_examples() {
    let a = vec![0.6, 0.8];
    assert!((loss_unlinkability(&a, &a) - 1.0).abs() < 1e-12);
    assert!(loss_unlinkability(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
    // cos = -0.4 -> 0.4
    let b = vec![-0.4, (1.0f64 - 0.16).sqrt()];
    let got = loss_unlinkability(&[1.0, 0.0], &b);
    assert!((got - 0.4).abs() < 1e-12, "{got}");

    let k1 = KeyMaterial::from_seed(1);
    let k2 = KeyMaterial::from_seed(2);
    assert_eq!(loss_key_diversity(&a, &a, &k1, &k1), 0.0);
    assert!(loss_key_diversity(&[1.0, 0.0], &[0.0, 1.0], &k1, &k2).abs() < 1e-12);
    let c = vec![0.7, (1.0f64 - 0.49).sqrt()];
    let got = loss_key_diversity(&[1.0, 0.0], &c, &k1, &k2);
    assert!((got - 0.7).abs() < 1e-12, "{got}");
}

#[test]
fn total_loss_zeroing() {
    // Orthogonal impostor templates, identity genuine protection: all terms 0.
    let z1 = vec![1.0, 0.0];
    let z2 = vec![0.0, 1.0];
    let items = vec![item(0, 1, z1.clone(), z1), item(1, 1, z2.clone(), z2)];
    // Impostor cos(z_t) = 0 and no genuine/crosskey pairs.
    assert!(loss_total(&items, &LossWeights::default()).abs() < 1e-12);

    // lambda_u = lambda_d = 0 reduces the total to disc + contr.
    let mut rng = SplitMix64::new(55);
    let items: Vec<ProtectedItem> = (0..4)
        .map(|i| {
            item(
                i % 2,
                if i < 2 { 7 } else { 8 },
                unit_vec(60 + i as u64, 6),
                rng.normal_vec(6),
            )
        })
        .collect();
    let mut w = LossWeights::default();
    w.lambda_u = 0.0;
    w.lambda_d = 0.0;
    let total = loss_total(&items, &w);
    let expected = loss_discriminability(&items, &w) + loss_contrastive_protected(&items, &w);
    assert!((total - expected).abs() < 1e-12);
}

#[test]
fn empty_masks_are_safe() {
    let w = LossWeights::default();
    // Single-class batches stay finite.
    let only_genuine = vec![
        item(0, 1, unit_vec(70, 4), unit_vec(71, 4)),
        item(0, 1, unit_vec(72, 4), unit_vec(73, 4)),
    ];
    assert!(loss_total(&only_genuine, &w).is_finite());
    let only_mismatch = vec![
        item(0, 1, unit_vec(74, 4), unit_vec(75, 4)),
        item(1, 2, unit_vec(76, 4), unit_vec(77, 4)),
    ];
    assert!(loss_total(&only_mismatch, &w).is_finite());
}

#[test]
fn tape_loss_matches_plain_loss() {
    let d = 6;
    let phi = PhiNetwork::new(d, 8, 77);
    let schedule = NoiseSchedule::default_linear(5).unwrap();
    let w = LossWeights::default();
    let keys = [KeyMaterial::from_seed(201), KeyMaterial::from_seed(202)];
    let zs: Vec<Vec<f64>> = (0..4).map(|i| unit_vec(80 + i, d)).collect();

    let mut specs = Vec::new();
    let mut plain_items = Vec::new();
    for (i, z) in zs.iter().enumerate() {
        for key in &keys {
            specs.push(BatchItemSpec { subject: i / 2, z, key });
            plain_items.push(ProtectedItem {
                subject: i / 2,
                key_id: key.key_id(),
                z: z.clone(),
                z_t: diffuse(z, key, &schedule, &phi).unwrap(),
            });
        }
    }
    let mut tape = Tape::new();
    let vars = phi.vars(&mut tape);
    let loss = batch_loss_tape(&mut tape, &phi, &vars, &specs, &schedule, &w);
    let plain = loss_total(&plain_items, &w);
    assert!(
        (tape.scalar(loss) - plain).abs() < 1e-10,
        "tape {} vs plain {plain}",
        tape.scalar(loss)
    );
}

#[test]
fn gradcheck_total_loss_through_diffusion() {
    let d = 4;
    let phi = PhiNetwork::new(d, 5, 31);
    let schedule = NoiseSchedule::default_linear(3).unwrap();
    let w = LossWeights::default();
    let keys = [KeyMaterial::from_seed(301), KeyMaterial::from_seed(302)];
    let zs: Vec<Vec<f64>> = (0..4).map(|i| unit_vec(90 + i, d)).collect();
    let specs: Vec<(usize, usize, usize)> = (0..4)
        .flat_map(|i| [(i / 2, i, 0), (i / 2, i, 1)])
        .collect();

    let params = [
        phi.w1.clone(),
        phi.b1.clone(),
        phi.w2.clone(),
        phi.b2.clone(),
        phi.w3.clone(),
        phi.b3.clone(),
    ];
    let rebuild = |ps: &[Mat]| PhiNetwork {
        d,
        key_dim: KEY_EMBED_DIM,
        hidden: 5,
        w1: ps[0].clone(),
        b1: ps[1].clone(),
        w2: ps[2].clone(),
        b2: ps[3].clone(),
        w3: ps[4].clone(),
        b3: ps[5].clone(),
    };
    let run = |ps: &[Mat]| -> (Tape, PhiWeightVars, super::super::neural::autodiff::Var) {
        let net = rebuild(ps);
        let mut tape = Tape::new();
        let vars = net.vars(&mut tape);
        let items: Vec<BatchItemSpec<'_>> = specs
            .iter()
            .map(|&(subject, zi, ki)| BatchItemSpec {
                subject,
                z: &zs[zi],
                key: &keys[ki],
            })
            .collect();
        let loss = batch_loss_tape(&mut tape, &net, &vars, &items, &schedule, &w);
        (tape, vars, loss)
    };

    let (tape, vars, loss) = run(&params);
    let grads = tape.backward(loss);
    let mut eval = |ps: &[Mat]| {
        let (t, _, l) = run(ps);
        t.scalar(l)
    };
    for (i, v) in vars.all().iter().enumerate() {
        let analytic = Tape::grad_of(&grads, *v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(params[i].rows(), params[i].cols()));
        let numeric = numeric_gradient(&mut eval, &params, i, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "phi param {i}: relative error {err}");
    }
}

#[test]
fn phi_checkpoint_roundtrip_byte_exact() {
    let phi = PhiNetwork::new(16, 24, 8);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("phi1.ckpt");
    let p2 = dir.path().join("phi2.ckpt");
    save_phi(&phi, &p1).unwrap();
    let loaded = load_phi(&p1).unwrap();
    assert_eq!(loaded, phi);
    save_phi(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn template_json_roundtrip_is_exact() {
    let t = ProtectedTemplate {
        version: TEMPLATE_VERSION,
        k: 10,
        t: 50,
        d: 4,
        key_id: "00ff00ff00ff00ff".into(),
        z_t: vec![0.12345678901234567, -3.9e-12, 1.0 / 3.0, -2.5],
    };
    let s = t.to_json().unwrap();
    let back = ProtectedTemplate::from_json(&s).unwrap();
    assert_eq!(t, back);
}

fn toy_embeddings(subjects: usize, scans: usize, d: usize) -> Vec<Embedding> {
    let mut out = Vec::new();
    for s in 0..subjects {
        let center = unit_vec(500 + s as u64, d);
        for c in 0..scans {
            let mut z = center.clone();
            let noise = unit_vec(900 + (s * scans + c) as u64, d);
            for (zi, ni) in z.iter_mut().zip(&noise) {
                *zi += 0.05 * ni;
            }
            let n = crate::linalg::norm(&z);
            for zi in z.iter_mut() {
                *zi /= n;
            }
            out.push(Embedding {
                z,
                subject_id: format!("s{s:03}"),
                scan_id: format!("{c:02}"),
            });
        }
    }
    out
}

fn unlinkability_on(embeddings: &[Embedding], phi: &PhiNetwork, t: usize) -> f64 {
    let schedule = NoiseSchedule::default_linear(t).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for (i, e) in embeddings.iter().enumerate() {
        let k1 = KeyMaterial::from_seed(7000 + i as u64);
        let k2 = KeyMaterial::from_seed(8000 + i as u64);
        let t1 = diffuse(&e.z, &k1, &schedule, phi).unwrap();
        let t2 = diffuse(&e.z, &k2, &schedule, phi).unwrap();
        sum += loss_unlinkability(&t1, &t2);
        count += 1;
    }
    sum / count as f64
}

#[test]
fn training_reduces_unlinkability() {
    let embeddings = toy_embeddings(4, 4, 8);
    let cfg = ProtectTrainConfig {
        t: 5,
        hidden: 16,
        epochs: 60,
        subjects_per_batch: 4,
        scans_per_subject: 2,
        ..ProtectTrainConfig::default()
    };
    let untrained = PhiNetwork::new(8, 16, crate::rng::derive_seed(cfg.init_seed, "phi-init", &[]));
    let (trained, history) = train_protect(&embeddings, &cfg).unwrap();
    assert_eq!(history.len(), 60);
    let before = unlinkability_on(&embeddings, &untrained, cfg.t);
    let after = unlinkability_on(&embeddings, &trained, cfg.t);
    assert!(
        after < before,
        "unlinkability did not improve: {after} vs {before}"
    );
}

#[test]
fn zero_epochs_still_yields_valid_templates() {
    let embeddings = toy_embeddings(2, 2, 8);
    let cfg = ProtectTrainConfig { t: 5, hidden: 16, epochs: 0, ..ProtectTrainConfig::default() };
    let (phi, history) = train_protect(&embeddings, &cfg).unwrap();
    assert!(history.is_empty());
    let key = KeyMaterial::from_seed(1);
    let schedule = NoiseSchedule::default_linear(cfg.t).unwrap();
    let template =
        protect_embedding(&embeddings[0].z, &key, &schedule, &phi, 10).unwrap();
    assert!(template.z_t.iter().all(|x| x.is_finite()));
    assert_eq!(template.d, 8);
}

#[test]
fn protect_training_is_deterministic() {
    let embeddings = toy_embeddings(3, 3, 8);
    let cfg = ProtectTrainConfig {
        t: 4,
        hidden: 12,
        epochs: 5,
        subjects_per_batch: 3,
        ..ProtectTrainConfig::default()
    };
    let (p1, h1) = train_protect(&embeddings, &cfg).unwrap();
    let (p2, h2) = train_protect(&embeddings, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn too_few_subjects_rejected() {
    let embeddings = toy_embeddings(1, 4, 8);
    let cfg = ProtectTrainConfig::default();
    assert!(matches!(
        train_protect(&embeddings, &cfg),
        Err(ProtectError::TooFewSubjects(1))
    ));
}
