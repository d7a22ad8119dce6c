use super::autodiff::{max_relative_error, numeric_gradient, Tape};
use super::*;
use crate::linalg::Mat;
use crate::mesh::Pair;
use crate::rng::SplitMix64;

fn random_mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

/// Gradient-check a scalar-valued tape program against central differences.
fn check_gradients(
    build: impl Fn(&mut Tape, &[super::autodiff::Var]) -> super::autodiff::Var,
    params: &[Mat],
    tol: f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let mut eval = |ps: &[Mat]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<_> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let l = build(&mut t, &vs);
        t.scalar(l)
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = Tape::grad_of(&grads, *var)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(params[i].rows(), params[i].cols()));
        let numeric = numeric_gradient(&mut eval, params, i, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "param {i}: relative error {err}");
    }
}

#[test]
fn gradcheck_elementwise_chain() {
    let mut rng = SplitMix64::new(1);
    let a = random_mat(3, 2, &mut rng);
    let b = random_mat(3, 2, &mut rng);
    check_gradients(
        |t, vs| {
            let prod = t.mul(vs[0], vs[1]);
            let sum = t.add(prod, vs[0]);
            let diff = t.sub(sum, vs[1]);
            let scaled = t.scale(diff, 0.7);
            let shifted = t.add_scalar(scaled, 0.3);
            let activated = t.tanh(shifted);
            t.sum(activated)
        },
        &[a, b],
        1e-4,
    );
}

#[test]
fn gradcheck_matmul_relu_meanrows() {
    let mut rng = SplitMix64::new(2);
    let a = random_mat(4, 3, &mut rng);
    let b = random_mat(3, 5, &mut rng);
    check_gradients(
        |t, vs| {
            let prod = t.matmul(vs[0], vs[1]);
            let act = t.relu(prod);
            let pooled = t.mean_rows(act);
            t.sum(pooled)
        },
        &[a, b],
        1e-4,
    );
}

#[test]
fn gradcheck_normalize_dot_abs() {
    let mut rng = SplitMix64::new(3);
    let a = random_mat(6, 1, &mut rng);
    let b = random_mat(6, 1, &mut rng);
    check_gradients(
        |t, vs| {
            let c = t.cosine(vs[0], vs[1]);
            t.abs(c)
        },
        &[a, b],
        1e-4,
    );
}

#[test]
fn gradcheck_div_concat() {
    let mut rng = SplitMix64::new(4);
    let a = random_mat(3, 1, &mut rng);
    let b = random_mat(2, 1, &mut rng);
    check_gradients(
        |t, vs| {
            let joined = t.concat_rows(vs[0], vs[1]);
            let s = t.sum(joined);
            let d = t.dot(vs[0], vs[0]);
            let shifted = t.add_scalar(d, 1.5);
            t.div(s, shifted)
        },
        &[a, b],
        1e-4,
    );
}

#[test]
fn gradcheck_gcn_contrastive_batch() {
    // A 3-pair batch through the full GCN forward and contrastive loss.
    let cfg = GcnConfig {
        k: 5,
        n_features: 4,
        hidden: 6,
        out_dim: 8,
        ..GcnConfig::default()
    };
    let model = GcnModel::new(cfg);
    let mut rng = SplitMix64::new(5);
    let feats: Vec<Mat> = (0..4).map(|_| random_mat(5, 4, &mut rng)).collect();
    let pairs = [
        Pair { a: 0, b: 1, genuine: true },
        Pair { a: 1, b: 2, genuine: false },
        Pair { a: 2, b: 3, genuine: false },
    ];

    let params: Vec<Mat> = model
        .layer_weights
        .iter()
        .cloned()
        .chain(std::iter::once(model.w_out.clone()))
        .collect();
    let build = |t: &mut Tape, vs: &[super::autodiff::Var]| {
        let weights = GcnWeightVars { layers: vs[..vs.len() - 1].to_vec(), out: vs[vs.len() - 1] };
        let mut losses = Vec::new();
        for pair in &pairs {
            let za = model.forward_tape(t, &weights, &feats[pair.a]);
            let zb = model.forward_tape(t, &weights, &feats[pair.b]);
            let s = t.dot(za, zb);
            losses.push(super::pair_loss_tape(t, s, pair.genuine, 0.5));
        }
        t.mean_scalars(&losses).unwrap()
    };
    check_gradients(build, &params, 1e-4);
}

#[test]
fn forward_is_unit_norm_and_pure() {
    let model = GcnModel::new(GcnConfig::default());
    let mut rng = SplitMix64::new(6);
    let f = random_mat(10, 10, &mut rng);
    let z1 = model.forward(&f).unwrap();
    let z2 = model.forward(&f).unwrap();
    assert_eq!(z1, z2);
    assert!((crate::linalg::norm(&z1) - 1.0).abs() < 1e-9);
}

#[test]
fn zero_input_falls_back_to_e1() {
    let model = GcnModel::new(GcnConfig::default());
    let z = model.forward(&Mat::zeros(10, 10)).unwrap();
    assert_eq!(z[0], 1.0);
    assert!(z[1..].iter().all(|&x| x == 0.0));
}

#[test]
fn forward_rejects_wrong_shape() {
    let model = GcnModel::new(GcnConfig::default());
    assert!(matches!(
        model.forward(&Mat::zeros(9, 10)),
        Err(NeuralError::ShapeMismatch { .. })
    ));
}

#[test]
fn tape_forward_matches_plain_forward() {
    let model = GcnModel::new(GcnConfig::default());
    let mut rng = SplitMix64::new(7);
    let f = random_mat(10, 10, &mut rng);
    let plain = model.forward(&f).unwrap();
    let mut tape = Tape::new();
    let weights = model.weights_as_vars(&mut tape);
    let z = model.forward_tape(&mut tape, &weights, &f);
    for (a, b) in plain.iter().zip(tape.value(z).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn contrastive_loss_examples() {
    // Perfect match pair: zero loss.
    assert_eq!(contrastive_pair_loss(1.0, true, 0.5), 0.0);
    // Mismatch at the margin boundary: hinge exactly zero.
    let m = 0.5;
    let s = 1.0 - m;
    assert_eq!(contrastive_pair_loss(s, false, m), 0.0);
    // Mismatch with S = 1: max(0, 0.5 - 0) = 0.5.
    assert_eq!(contrastive_pair_loss(1.0, false, 0.5), 0.5);
    assert!(matches!(contrastive_loss(&[], 0.5), Err(NeuralError::EmptyBatch)));
}

/// Tiny two-subject synthetic feature set: per-subject template plus
/// per-scan perturbation.
fn toy_features(cfg: &GcnConfig, subjects: usize, scans: usize) -> (Vec<Mat>, Vec<Pair>) {
    let mut rng = SplitMix64::new(42);
    let templates: Vec<Mat> =
        (0..subjects).map(|_| random_mat(cfg.k, cfg.n_features, &mut rng)).collect();
    let mut feats = Vec::new();
    for t in &templates {
        for _ in 0..scans {
            let noise = random_mat(cfg.k, cfg.n_features, &mut rng).scale(0.1);
            feats.push(t.add(&noise));
        }
    }
    let mut pairs = Vec::new();
    for s in 0..subjects {
        for i in 0..scans {
            for j in 0..scans {
                if i != j {
                    pairs.push(Pair { a: s * scans + i, b: s * scans + j, genuine: true });
                    let other = (s + 1) % subjects;
                    pairs.push(Pair {
                        a: s * scans + i,
                        b: other * scans + (i + j) % scans,
                        genuine: false,
                    });
                }
            }
        }
    }
    (feats, pairs)
}

#[test]
fn training_separates_toy_subjects() {
    let cfg = GcnConfig { epochs: 50, k: 6, n_features: 5, hidden: 12, out_dim: 16, ..GcnConfig::default() };
    let (feats, pairs) = toy_features(&cfg, 2, 4);
    let mut model = GcnModel::new(cfg);
    let history = train_gcn(&mut model, &feats, &pairs, None).unwrap();
    assert_eq!(history.len(), 50);

    let zs: Vec<Vec<f64>> = feats.iter().map(|f| model.forward(f).unwrap()).collect();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for p in &pairs {
        let s = crate::linalg::dot(&zs[p.a], &zs[p.b]);
        if p.genuine {
            intra.push(s);
        } else {
            inter.push(s);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&intra) > mean(&inter),
        "intra {} <= inter {}",
        mean(&intra),
        mean(&inter)
    );

    // Smoothed loss is non-increasing over 10-epoch windows.
    let windows: Vec<f64> =
        history.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "window means increased: {pair:?}");
    }
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let cfg = GcnConfig {
        epochs: 3,
        learning_rate: 0.0,
        k: 6,
        n_features: 5,
        hidden: 8,
        out_dim: 8,
        ..GcnConfig::default()
    };
    let (feats, pairs) = toy_features(&cfg, 2, 2);
    let mut model = GcnModel::new(cfg);
    let before = model.layer_weights.clone();
    let w_out_before = model.w_out.clone();
    train_gcn(&mut model, &feats, &pairs, None).unwrap();
    assert_eq!(model.layer_weights, before);
    assert_eq!(model.w_out, w_out_before);
}

#[test]
fn training_is_deterministic() {
    let cfg = GcnConfig { epochs: 8, k: 6, n_features: 5, hidden: 8, out_dim: 8, ..GcnConfig::default() };
    let (feats, pairs) = toy_features(&cfg, 2, 3);
    let mut m1 = GcnModel::new(cfg.clone());
    let mut m2 = GcnModel::new(cfg);
    let h1 = train_gcn(&mut m1, &feats, &pairs, None).unwrap();
    let h2 = train_gcn(&mut m2, &feats, &pairs, None).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1.layer_weights, m2.layer_weights);
    assert_eq!(m1.w_out, m2.w_out);
}

#[test]
fn checkpoint_roundtrip_is_byte_exact() {
    let cfg = GcnConfig::default();
    let model = GcnModel::new(cfg.clone());
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("gcn1.ckpt");
    let p2 = dir.path().join("gcn2.ckpt");
    save_gcn(&model, &p1).unwrap();
    let loaded = load_gcn(&p1, cfg).unwrap();
    save_gcn(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let model = GcnModel::new(GcnConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gcn.ckpt");
    save_gcn(&model, &p).unwrap();
    let bad = GcnConfig { k: 20, ..GcnConfig::default() };
    assert!(matches!(load_gcn(&p, bad), Err(NeuralError::BadCheckpoint(_))));
}
