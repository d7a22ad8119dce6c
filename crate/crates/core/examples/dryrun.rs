//! Scratch driver: run the full pipeline at acceptance scale and print the
//! numbers the acceptance criteria care about.

use std::time::Instant;

use specface_core::attack::AttackConfig;
use specface_core::pipeline::*;

fn main() {
    let cfg = PipelineConfig::default();
    println!("config hash: {}", cfg.config_hash());

    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("specface-dryrun");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = gen_synth_stage(&cfg, &dir).unwrap();
    println!("[{:6.1?}] corpus: {} scans", t0.elapsed(), manifest.scans.len());

    let (_, meshes) = load_corpus(&cfg, &dir).unwrap();
    let features = extract_stage(&cfg, &manifest, &meshes, None).unwrap();
    println!("[{:6.1?}] extracted", t0.elapsed());

    let split = manifest.split.clone();
    let (gcn, gcn_history) = train_gcn_stage(&cfg, &features, &split).unwrap();
    println!(
        "[{:6.1?}] gcn trained: loss {:.4} -> {:.4}",
        t0.elapsed(),
        gcn_history.first().unwrap(),
        gcn_history.last().unwrap()
    );

    let embeddings = embeddings_stage(&cfg, &features, Some(&gcn)).unwrap();
    let (phi, phi_history) = train_protect_stage(&cfg, &embeddings, &split).unwrap();
    println!(
        "[{:6.1?}] phi trained: loss {:.4} -> {:.4}",
        t0.elapsed(),
        phi_history.first().unwrap(),
        phi_history.last().unwrap()
    );

    let report = eval_stage(&cfg, &features, &split, Some(&gcn), &phi).unwrap();
    println!("[{:6.1?}] eval done", t0.elapsed());
    println!(
        "unprotected: EER {:.4} theta {:.3} F1 {:.4} gen_mean {:.3} imp_mean {:.3}",
        report.unprotected.eer,
        report.unprotected.best_threshold,
        report.unprotected.f1,
        report.unprotected.genuine_mean,
        report.unprotected.impostor_mean
    );
    println!(
        "protected:   EER {:.4} theta {:.3} F1 {:.4} gen_mean {:.3} imp_mean {:.3}",
        report.protected.eer,
        report.protected.best_threshold,
        report.protected.f1,
        report.protected.genuine_mean,
        report.protected.impostor_mean
    );
    println!(
        "gap unprot {:.4}  prot {:.4}",
        report.unprotected.distances.gap, report.protected.distances.gap
    );
    println!(
        "cross-key |cos| {:?}  |corr| {:?}",
        report.cross_key_abs_cosine, report.cross_key_abs_correlation
    );
    println!("correlation: {:?}", report.correlation);
    for (t, e) in &report.entropy_by_t {
        println!(
            "entropy T={t}: H(Z) {:.3} H(Z_T) {:.3} MI {:.4} loss {:.3} pres {:.3}",
            e.h_z, e.h_zt, e.mi, e.info_loss, e.info_preservation
        );
    }

    // Ablation pipeline.
    let abl_cfg = PipelineConfig { use_gcn: false, ..cfg.clone() };
    let abl_features = FeatureFile { config_hash: abl_cfg.config_hash(), ..features.clone() };
    let abl_embeddings = embeddings_stage(&abl_cfg, &abl_features, None).unwrap();
    let (abl_phi, _) = train_protect_stage(&abl_cfg, &abl_embeddings, &split).unwrap();
    let abl_report = eval_stage(&abl_cfg, &abl_features, &split, None, &abl_phi).unwrap();
    println!(
        "[{:6.1?}] ablation: unprot F1 {:.4} prot EER {:.4} prot F1 {:.4} (full prot F1 {:.4})",
        t0.elapsed(),
        abl_report.unprotected.f1,
        abl_report.protected.eer,
        abl_report.protected.f1,
        report.protected.f1
    );

    // Attack at reduced iteration count first to gauge cost.
    let attack_cfg = AttackConfig { iterations: 500, restarts: 4, ..AttackConfig::default() };
    let ta = Instant::now();
    let attack = attack_stage(
        &cfg,
        &phi,
        &embeddings,
        &split,
        &attack_cfg,
        report.protected.best_threshold,
    )
    .unwrap();
    println!(
        "[{:6.1?}] attack over {} targets in {:?}: sanity {:.4}",
        t0.elapsed(),
        attack.targets,
        ta.elapsed(),
        attack.sanity_identity_similarity
    );
    for entry in &attack.report.sar {
        println!("  {} (theta {:.3}): {:.3}", entry.label, entry.threshold, entry.rate);
    }
    let best = &attack.report.per_target_best;
    println!(
        "  best sims: min {:.3} max {:.3}",
        best.iter().copied().fold(f64::INFINITY, f64::min),
        best.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    );

    let bench = bench_stage(&cfg, &dir, Some(&gcn), &phi, 10).unwrap();
    println!(
        "bench ms/example: prep {:.3} extract {:.3} infer {:.3}",
        bench.data_prep_ms_per_example,
        bench.feature_extraction_ms_per_example,
        bench.inference_ms_per_example
    );
    println!("total {:?}", t0.elapsed());
}
