//! Stage orchestration: one config drives corpus generation, feature
//! extraction, both training stages, template production, evaluation, the
//! pre-image attack, and timing. Every file artifact embeds the producing
//! config hash and consuming stages refuse mismatched inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{csa_attack, sar_report, AttackConfig, AttackError, AttackReport};
use crate::eval::{
    self, accuracy_metrics, entropy_mi_report, key_correlation_matrix,
    mean_abs_cross_key_correlation, EvalError, EvalReport, ScoreSet, TradeoffParams,
};
use crate::geometry::{self, DESCRIPTOR_COLUMNS, DESCRIPTOR_COUNT};
use crate::linalg::Mat;
use crate::mesh::{
    self, generate_corpus, load_mesh, normalize_mesh, write_obj, CorpusSpec, DatasetSplit, Mesh,
    MeshError, MeshFormat, Pair, ScanRef,
};
use crate::neural::autodiff::Tape;
use crate::neural::{load_gcn, save_gcn, train_gcn, Embedding, GcnConfig, GcnModel, NeuralError};
use crate::protect::{
    diffuse, diffuse_tape, load_phi, save_phi, train_protect, KeyMaterial, LossWeights,
    NoiseSchedule, PhiNetwork, ProtectError, ProtectTrainConfig, ProtectedTemplate,
    TEMPLATE_VERSION,
};
use crate::rng::derive_seed;
use crate::spectral::{
    build_graph, graph_content_hash, normalized_laplacian, read_basis_cache, smallest_eigenpairs,
    write_basis_cache, SpectralBasis, SpectralError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Protect(#[from] ProtectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("config mismatch: artifact built with {artifact}, current config is {current}")]
    ConfigMismatch { artifact: String, current: String },
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Output locations; excluded from the config hash so moving artifacts does
/// not invalidate them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelinePaths {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Spectral truncation.
    pub k: usize,
    /// Diffusion steps.
    pub t: usize,
    /// Embedding dimension.
    pub d: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Contrastive margin shared by both training stages.
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub corpus: CorpusSpec,
    /// Ablation toggle: `false` replaces the GCN with mean-pooled spectral
    /// coefficients.
    pub use_gcn: bool,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub gcn_epochs: usize,
    pub gcn_learning_rate: f64,
    pub gcn_batch_size: usize,
    pub phi_hidden: usize,
    pub protect_epochs: usize,
    pub protect_learning_rate: f64,
    pub protect_subjects_per_batch: usize,
    pub protect_scans_per_subject: usize,
    /// Diffusion depths measured by the entropy analysis.
    pub entropy_t_values: Vec<usize>,
    pub tradeoff: TradeoffParams,
    pub k_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    /// Extraction worker threads (0 = all available cores).
    pub workers: usize,
    pub paths: PipelinePaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            t: 50,
            d: 64,
            beta_start: 1e-4,
            beta_end: 0.02,
            margin: 0.5,
            loss_weights: LossWeights::default(),
            seed: 0x5face,
            corpus: CorpusSpec::default(),
            use_gcn: true,
            gcn_layers: 2,
            gcn_hidden: 32,
            gcn_epochs: 150,
            gcn_learning_rate: 1e-3,
            gcn_batch_size: 32,
            phi_hidden: 128,
            protect_epochs: 80,
            protect_learning_rate: 1e-3,
            protect_subjects_per_batch: 4,
            protect_scans_per_subject: 2,
            entropy_t_values: vec![25, 50, 75],
            tradeoff: TradeoffParams::default(),
            k_grid: vec![10, 20, 25],
            t_grid: vec![25, 50, 75],
            workers: 0,
            paths: PipelinePaths::default(),
        }
    }
}

impl PipelineConfig {
    /// Hash of the semantic fields (paths excluded).
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.paths = PipelinePaths::default();
        let json = serde_json::to_string(&semantic).expect("config serializes");
        let mut h = Sha256::new();
        h.update(b"specface-config-v1");
        h.update(json.as_bytes());
        crate::spectral::hex(&h.finalize()[..16])
    }

    pub fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            k: self.k,
            n_features: DESCRIPTOR_COUNT,
            layers: self.gcn_layers,
            hidden: self.gcn_hidden,
            out_dim: self.d,
            margin: self.margin,
            learning_rate: self.gcn_learning_rate,
            batch_size: self.gcn_batch_size,
            epochs: self.gcn_epochs,
            init_seed: derive_seed(self.seed, "gcn-init-root", &[]),
            shuffle_seed: derive_seed(self.seed, "gcn-shuffle-root", &[]),
        }
    }

    pub fn protect_config(&self) -> ProtectTrainConfig {
        let mut weights = self.loss_weights.clone();
        weights.margin = self.margin;
        ProtectTrainConfig {
            t: self.t,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            hidden: self.phi_hidden,
            weights,
            learning_rate: self.protect_learning_rate,
            epochs: self.protect_epochs,
            subjects_per_batch: self.protect_subjects_per_batch,
            scans_per_subject: self.protect_scans_per_subject,
            init_seed: derive_seed(self.seed, "phi-init-root", &[]),
            batch_seed: derive_seed(self.seed, "phi-batch-root", &[]),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ProtectError> {
        NoiseSchedule::linear(self.t, self.beta_start, self.beta_end)
    }

    pub fn split(&self, subjects: &[String]) -> DatasetSplit {
        DatasetSplit::from_subjects(subjects, derive_seed(self.seed, "split-root", &[]))
    }

    fn check_hash(&self, artifact_hash: &str, what: &str) -> Result<(), PipelineError> {
        let current = self.config_hash();
        if artifact_hash != current {
            return Err(PipelineError::ConfigMismatch {
                artifact: format!("{what} ({artifact_hash})"),
                current,
            });
        }
        Ok(())
    }
}

/// Deterministic per-subject key; `variant` distinguishes enrollment
/// generations (renewability) and analysis keys.
pub fn subject_key(cfg: &PipelineConfig, subject_id: &str, variant: u64) -> KeyMaterial {
    KeyMaterial::from_seed(derive_seed(
        derive_seed(cfg.seed, "subject-key-root", &[variant]),
        subject_id,
        &[],
    ))
}

// ---------------------------------------------------------------------------
// Corpus stage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScan {
    pub subject_id: String,
    pub scan_id: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub config_hash: String,
    pub spec: CorpusSpec,
    pub scans: Vec<ManifestScan>,
    pub split: DatasetSplit,
}

/// Generate the synthetic corpus into `dir`: one OBJ per scan plus
/// `manifest.json`.
pub fn gen_synth_stage(cfg: &PipelineConfig, dir: &Path) -> Result<CorpusManifest, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let meshes = generate_corpus(&cfg.corpus)?;
    let mut scans = Vec::with_capacity(meshes.len());
    for mesh in &meshes {
        let name = format!("s{}_{}.obj", &mesh.subject_id[1..], mesh.scan_id);
        write_obj(mesh, &dir.join(&name))?;
        scans.push(ManifestScan {
            subject_id: mesh.subject_id.clone(),
            scan_id: mesh.scan_id.clone(),
            path: name,
        });
    }
    let subjects: Vec<String> =
        (0..cfg.corpus.subject_count).map(|s| cfg.corpus.subject_label(s)).collect();
    let manifest = CorpusManifest {
        version: 1,
        config_hash: cfg.config_hash(),
        spec: cfg.corpus.clone(),
        scans,
        split: cfg.split(&subjects),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest, PipelineError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| PipelineError::Artifact(format!("manifest.json: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_corpus(
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<(CorpusManifest, Vec<Mesh>), PipelineError> {
    let manifest = load_manifest(dir)?;
    cfg.check_hash(&manifest.config_hash, "corpus manifest")?;
    let mut meshes = Vec::with_capacity(manifest.scans.len());
    for scan in &manifest.scans {
        let mesh = load_mesh(&dir.join(&scan.path), MeshFormat::Obj)?
            .with_labels(&scan.subject_id, &scan.scan_id);
        meshes.push(mesh);
    }
    Ok((manifest, meshes))
}

// ---------------------------------------------------------------------------
// Feature extraction stage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub subject_id: String,
    pub scan_id: String,
    /// `K x n`, row-major rows.
    pub f_low: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureFile {
    pub version: u32,
    pub config_hash: String,
    pub k: usize,
    pub n: usize,
    pub columns: Vec<String>,
    pub entries: Vec<FeatureEntry>,
}

impl FeatureFile {
    pub fn matrices(&self) -> Vec<Mat> {
        self.entries
            .iter()
            .map(|e| {
                Mat::from_vec(self.k, self.n, e.f_low.iter().flatten().copied().collect())
            })
            .collect()
    }

    pub fn scan_refs(&self) -> Vec<ScanRef> {
        self.entries
            .iter()
            .map(|e| ScanRef { subject_id: e.subject_id.clone(), scan_id: e.scan_id.clone() })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read(cfg: &PipelineConfig, path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
        let file: FeatureFile = serde_json::from_str(&text)?;
        cfg.check_hash(&file.config_hash, "feature file")?;
        Ok(file)
    }
}

/// Truncated spectral coefficients of one preprocessed mesh, reusing a
/// previously computed basis for its connectivity if available.
pub fn extract_features_single(
    cfg: &PipelineConfig,
    mesh: &Mesh,
    basis_memo: Option<&mut BTreeMap<String, SpectralBasis>>,
    cache_dir: Option<&Path>,
) -> Result<Mat, PipelineError> {
    let hash = graph_content_hash(mesh);
    let compute = || -> Result<SpectralBasis, PipelineError> {
        if let Some(dir) = cache_dir {
            let path = dir.join(format!("{hash}.basis"));
            if path.exists() {
                if let Ok(basis) = read_basis_cache(&path) {
                    if basis.k() == cfg.k && basis.vertex_count() == mesh.vertices.len() {
                        return Ok(basis);
                    }
                }
            }
        }
        let graph = build_graph(mesh)?;
        let lap = normalized_laplacian(&graph);
        let basis = smallest_eigenpairs(&lap, cfg.k)?;
        if let Some(dir) = cache_dir {
            std::fs::create_dir_all(dir)?;
            write_basis_cache(&dir.join(format!("{hash}.basis")), &basis)?;
        }
        Ok(basis)
    };

    let descriptors = geometry::assemble_descriptors(mesh)?;
    match basis_memo {
        Some(memo) => {
            if !memo.contains_key(&hash) {
                let basis = compute()?;
                memo.insert(hash.clone(), basis);
            }
            Ok(crate::spectral::gft(&memo[&hash], &descriptors.f)?)
        }
        None => {
            let basis = compute()?;
            Ok(crate::spectral::gft(&basis, &descriptors.f)?)
        }
    }
}

/// Preprocess (normalize) and extract every corpus scan. Meshes sharing a
/// topology share one eigendecomposition. Extraction runs on a small worker
/// pool; results are ordered by scan index regardless of worker count.
pub fn extract_stage(
    cfg: &PipelineConfig,
    manifest: &CorpusManifest,
    meshes: &[Mesh],
    cache_dir: Option<&Path>,
) -> Result<FeatureFile, PipelineError> {
    let mut basis_memo: BTreeMap<String, SpectralBasis> = BTreeMap::new();
    let mut normalized = Vec::with_capacity(meshes.len());
    for mesh in meshes {
        normalized.push(normalize_mesh(mesh)?);
    }
    // One basis per distinct topology (the synthetic corpus shares one).
    for mesh in &normalized {
        let hash = graph_content_hash(mesh);
        if !basis_memo.contains_key(&hash) {
            let _ = extract_features_single(cfg, mesh, Some(&mut basis_memo), cache_dir)?;
        }
    }

    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.workers
    };
    let results: Vec<Result<Mat, PipelineError>> = if workers <= 1 {
        normalized
            .iter()
            .map(|m| {
                let descriptors = geometry::assemble_descriptors(m)?;
                let basis = &basis_memo[&graph_content_hash(m)];
                Ok(crate::spectral::gft(basis, &descriptors.f)?)
            })
            .collect()
    } else {
        let mut slots: Vec<Option<Result<Mat, PipelineError>>> =
            (0..normalized.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots_mutex = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= normalized.len() {
                        break;
                    }
                    let mesh = &normalized[i];
                    let result = geometry::assemble_descriptors(mesh)
                        .map_err(PipelineError::from)
                        .and_then(|d| {
                            let basis = &basis_memo[&graph_content_hash(mesh)];
                            Ok(crate::spectral::gft(basis, &d.f)?)
                        });
                    slots_mutex.lock().expect("slot lock")[i] = Some(result);
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };

    let mut entries = Vec::with_capacity(meshes.len());
    for (scan, result) in manifest.scans.iter().zip(results) {
        let f_low = result?;
        entries.push(FeatureEntry {
            subject_id: scan.subject_id.clone(),
            scan_id: scan.scan_id.clone(),
            f_low: (0..f_low.rows()).map(|r| f_low.row(r).to_vec()).collect(),
        });
    }
    Ok(FeatureFile {
        version: 1,
        config_hash: cfg.config_hash(),
        k: cfg.k,
        n: DESCRIPTOR_COUNT,
        columns: DESCRIPTOR_COLUMNS.iter().map(|s| s.to_string()).collect(),
        entries,
    })
}

// ---------------------------------------------------------------------------
// Embeddings

/// Ablation embedding: flatten `F_low` row-major and adaptively mean-pool it
/// to `d` buckets, then L2-normalize.
pub fn pooled_embedding(f_low: &Mat, d: usize) -> Vec<f64> {
    let flat = f_low.data();
    let n = flat.len();
    let mut out = vec![0.0; d];
    for (i, slot) in out.iter_mut().enumerate() {
        let lo = (i * n / d).min(n.saturating_sub(1));
        let hi = (((i + 1) * n).div_ceil(d)).clamp(lo + 1, n);
        let span = &flat[lo..hi];
        *slot = span.iter().sum::<f64>() / span.len() as f64;
    }
    let norm = crate::linalg::norm(&out);
    if norm < 1e-300 {
        out[0] = 1.0;
        return out;
    }
    for x in out.iter_mut() {
        *x /= norm;
    }
    out
}

/// Per-scan embeddings, through the GCN or the pooled ablation path.
pub fn embeddings_stage(
    cfg: &PipelineConfig,
    features: &FeatureFile,
    gcn: Option<&GcnModel>,
) -> Result<Vec<Embedding>, PipelineError> {
    let mats = features.matrices();
    let mut out = Vec::with_capacity(mats.len());
    for (entry, f_low) in features.entries.iter().zip(&mats) {
        let z = match gcn {
            Some(model) => model.forward(f_low)?,
            None => pooled_embedding(f_low, cfg.d),
        };
        out.push(Embedding {
            z,
            subject_id: entry.subject_id.clone(),
            scan_id: entry.scan_id.clone(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training stages

pub fn split_pairs(
    cfg: &PipelineConfig,
    features: &FeatureFile,
    split: &DatasetSplit,
    which: &str,
) -> Result<Vec<Pair>, PipelineError> {
    let scans = features.scan_refs();
    let subjects = match which {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => return Err(PipelineError::Artifact(format!("unknown split '{other}'"))),
    };
    Ok(mesh::make_pairs(&scans, subjects, derive_seed(cfg.seed, "pairs-root", &[]))?)
}

pub fn train_gcn_stage(
    cfg: &PipelineConfig,
    features: &FeatureFile,
    split: &DatasetSplit,
) -> Result<(GcnModel, Vec<f64>), PipelineError> {
    let pairs = split_pairs(cfg, features, split, "train")?;
    let mats = features.matrices();
    let mut model = GcnModel::new(cfg.gcn_config());
    let history = train_gcn(&mut model, &mats, &pairs, None)?;
    Ok((model, history))
}

pub fn train_protect_stage(
    cfg: &PipelineConfig,
    embeddings: &[Embedding],
    split: &DatasetSplit,
) -> Result<(PhiNetwork, Vec<f64>), PipelineError> {
    let train_set: Vec<Embedding> = embeddings
        .iter()
        .filter(|e| split.train.contains(&e.subject_id))
        .cloned()
        .collect();
    Ok(train_protect(&train_set, &cfg.protect_config())?)
}

/// Sidecar metadata written next to binary checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
}

pub fn save_gcn_with_meta(
    cfg: &PipelineConfig,
    model: &GcnModel,
    path: &Path,
) -> Result<(), PipelineError> {
    save_gcn(model, path)?;
    let meta = CheckpointMeta { config_hash: cfg.config_hash() };
    std::fs::write(meta_path(path), serde_json::to_string(&meta)?)?;
    Ok(())
}

pub fn load_gcn_with_meta(cfg: &PipelineConfig, path: &Path) -> Result<GcnModel, PipelineError> {
    check_meta(cfg, path)?;
    Ok(load_gcn(path, cfg.gcn_config())?)
}

pub fn save_phi_with_meta(
    cfg: &PipelineConfig,
    phi: &PhiNetwork,
    path: &Path,
) -> Result<(), PipelineError> {
    save_phi(phi, path)?;
    let meta = CheckpointMeta { config_hash: cfg.config_hash() };
    std::fs::write(meta_path(path), serde_json::to_string(&meta)?)?;
    Ok(())
}

pub fn load_phi_with_meta(cfg: &PipelineConfig, path: &Path) -> Result<PhiNetwork, PipelineError> {
    check_meta(cfg, path)?;
    Ok(load_phi(path)?)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    PathBuf::from(os)
}

fn check_meta(cfg: &PipelineConfig, path: &Path) -> Result<(), PipelineError> {
    let meta_file = meta_path(path);
    let text = std::fs::read_to_string(&meta_file)
        .map_err(|e| PipelineError::Artifact(format!("{}: {e}", meta_file.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    cfg.check_hash(&meta.config_hash, "checkpoint")
}

// ---------------------------------------------------------------------------
// Template production

/// Protect one embedding under a subject enrollment key.
pub fn make_template(
    cfg: &PipelineConfig,
    phi: &PhiNetwork,
    embedding: &Embedding,
    key: &KeyMaterial,
) -> Result<ProtectedTemplate, PipelineError> {
    let schedule = cfg.schedule()?;
    Ok(crate::protect::protect_embedding(&embedding.z, key, &schedule, phi, cfg.k)?)
}

/// Write templates for a set of scans under their subjects' enrollment keys:
/// `t_<subject>_<scan>__<key_id>.json` plus `templates.meta.json`.
pub fn templates_stage(
    cfg: &PipelineConfig,
    phi: &PhiNetwork,
    embeddings: &[Embedding],
    dir: &Path,
    key_variant: u64,
) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let key = subject_key(cfg, &e.subject_id, key_variant);
        let template = make_template(cfg, phi, e, &key)?;
        let path =
            dir.join(format!("t_{}_{}__{}.json", e.subject_id, e.scan_id, template.key_id));
        template.write_json(&path)?;
        paths.push(path);
    }
    std::fs::write(
        dir.join("templates.meta.json"),
        serde_json::to_string(&CheckpointMeta { config_hash: cfg.config_hash() })?,
    )?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Evaluation stage

/// Protected-domain scores under the stolen-token model: both sides of a
/// pair are diffused with the claimed identity's enrollment key, so genuine
/// and impostor comparisons are both same-key.
pub fn protected_scores(
    cfg: &PipelineConfig,
    phi: &PhiNetwork,
    embeddings: &[Embedding],
    pairs: &[Pair],
) -> Result<ScoreSet, PipelineError> {
    let schedule = cfg.schedule()?;
    let mut cache: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    let mut scores = ScoreSet::default();
    for pair in pairs {
        let key = subject_key(cfg, &embeddings[pair.a].subject_id, 0);
        let key_id = key.key_id();
        for idx in [pair.a, pair.b] {
            if !cache.contains_key(&(idx, key_id)) {
                let z_t = diffuse(&embeddings[idx].z, &key, &schedule, phi)?;
                cache.insert((idx, key_id), z_t);
            }
        }
        let s =
            crate::linalg::cosine(&cache[&(pair.a, key_id)], &cache[&(pair.b, key_id)]);
        if pair.genuine {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }
    Ok(scores)
}

pub fn unprotected_scores(embeddings: &[Embedding], pairs: &[Pair]) -> ScoreSet {
    let mut scores = ScoreSet::default();
    for pair in pairs {
        let s = crate::linalg::cosine(&embeddings[pair.a].z, &embeddings[pair.b].z);
        if pair.genuine {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }
    scores
}

/// Full evaluation: accuracy before/after protection on held-out test pairs,
/// cross-key correlation conditions, and the entropy/MI analysis at each
/// configured diffusion depth.
pub fn eval_stage(
    cfg: &PipelineConfig,
    features: &FeatureFile,
    split: &DatasetSplit,
    gcn: Option<&GcnModel>,
    phi: &PhiNetwork,
) -> Result<EvalReport, PipelineError> {
    let embeddings = embeddings_stage(cfg, features, gcn)?;
    let pairs = split_pairs(cfg, features, split, "test")?;

    let unprotected = accuracy_metrics(&unprotected_scores(&embeddings, &pairs))?;
    let protected = accuracy_metrics(&protected_scores(cfg, phi, &embeddings, &pairs)?)?;

    // Correlation analysis: every test scan under two shared analysis keys.
    let schedule = cfg.schedule()?;
    let key_a = KeyMaterial::from_seed(derive_seed(cfg.seed, "analysis-key", &[0]));
    let key_b = KeyMaterial::from_seed(derive_seed(cfg.seed, "analysis-key", &[1]));
    let mut subject_index: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &embeddings {
        let next = subject_index.len();
        subject_index.entry(&e.subject_id).or_insert(next);
    }
    let mut condition_templates: Vec<(usize, u64, Vec<f64>)> = Vec::new();
    let mut cross_key_cos = Vec::new();
    for e in embeddings.iter().filter(|e| split.test.contains(&e.subject_id)) {
        let si = subject_index[e.subject_id.as_str()];
        let ta = diffuse(&e.z, &key_a, &schedule, phi)?;
        let tb = diffuse(&e.z, &key_b, &schedule, phi)?;
        cross_key_cos.push(crate::linalg::cosine(&ta, &tb).abs());
        condition_templates.push((si, key_a.key_id(), ta));
        condition_templates.push((si, key_b.key_id(), tb));
    }
    let correlation = key_correlation_matrix(&condition_templates);
    let cross_key_abs_correlation = mean_abs_cross_key_correlation(&condition_templates);
    let cross_key_abs_cosine = if cross_key_cos.is_empty() {
        None
    } else {
        Some(cross_key_cos.iter().sum::<f64>() / cross_key_cos.len() as f64)
    };

    // Entropy/MI over the full corpus with one fresh key per template.
    let mut entropy_by_t = Vec::new();
    let z_set: Vec<Vec<f64>> = embeddings.iter().map(|e| e.z.clone()).collect();
    for &t in &cfg.entropy_t_values {
        let schedule_t = NoiseSchedule::linear(t, cfg.beta_start, cfg.beta_end)?;
        let mut zt_set = Vec::with_capacity(embeddings.len());
        for (i, e) in embeddings.iter().enumerate() {
            let key = KeyMaterial::from_seed(derive_seed(cfg.seed, "entropy-key", &[i as u64]));
            zt_set.push(diffuse(&e.z, &key, &schedule_t, phi)?);
        }
        entropy_by_t.push((t, entropy_mi_report(&z_set, &zt_set)?));
    }

    Ok(EvalReport {
        config_hash: cfg.config_hash(),
        k: cfg.k,
        t: cfg.t,
        d: cfg.d,
        test_subjects: split.test.len(),
        pair_count: pairs.len(),
        unprotected,
        protected,
        correlation,
        cross_key_abs_correlation,
        cross_key_abs_cosine,
        entropy_by_t,
    })
}

pub fn write_eval_artifacts(report: &EvalReport, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("roc_unprotected.csv"), eval::roc_csv(&report.unprotected.roc))?;
    std::fs::write(dir.join("roc_protected.csv"), eval::roc_csv(&report.protected.roc))?;
    std::fs::write(dir.join("pr_unprotected.csv"), eval::pr_csv(&report.unprotected.pr))?;
    std::fs::write(dir.join("pr_protected.csv"), eval::pr_csv(&report.protected.pr))?;
    std::fs::write(
        dir.join("distances_unprotected.csv"),
        eval::distance_csv(&report.unprotected.distances),
    )?;
    std::fs::write(
        dir.join("distances_protected.csv"),
        eval::distance_csv(&report.protected.distances),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Attack stage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStageReport {
    pub config_hash: String,
    pub targets: usize,
    pub sanity_identity_similarity: f64,
    pub report: AttackReport,
}

/// White-box CSA attack against the test-split templates. The attacker gets
/// the subject's enrollment key (strongest threat model), the trained
/// networks, and the schedule. `theta_best` feeds the SAR_best threshold.
pub fn attack_stage(
    cfg: &PipelineConfig,
    phi: &PhiNetwork,
    embeddings: &[Embedding],
    split: &DatasetSplit,
    attack_cfg: &AttackConfig,
    theta_best: f64,
) -> Result<AttackStageReport, PipelineError> {
    let schedule = cfg.schedule()?;

    // Sanity: the optimizer must solve the convex identity-oracle case.
    let sanity_target: Vec<f64> = {
        let mut rng = crate::rng::SplitMix64::new(derive_seed(cfg.seed, "attack-sanity", &[]));
        let v = rng.normal_vec(cfg.d);
        let n = crate::linalg::norm(&v);
        v.iter().map(|x| x / n).collect()
    };
    let identity = |_tape: &mut Tape, candidate: crate::neural::autodiff::Var| candidate;
    let sanity = csa_attack(
        &sanity_target,
        &identity,
        cfg.d,
        &AttackConfig { iterations: attack_cfg.iterations.min(100), ..attack_cfg.clone() },
    )?;

    let targets: Vec<&Embedding> =
        embeddings.iter().filter(|e| split.test.contains(&e.subject_id)).collect();
    let mut best = Vec::with_capacity(targets.len());
    for (i, e) in targets.iter().enumerate() {
        let key = subject_key(cfg, &e.subject_id, 0);
        let target = diffuse(&e.z, &key, &schedule, phi)?;
        let oracle = |tape: &mut Tape, candidate: crate::neural::autodiff::Var| {
            let vars = phi.vars(tape);
            diffuse_tape(tape, phi, &vars, candidate, &key, &schedule)
        };
        let per_target = AttackConfig {
            seed: derive_seed(attack_cfg.seed, "attack-target", &[i as u64]),
            ..attack_cfg.clone()
        };
        let outcome = csa_attack(&target, &oracle, cfg.d, &per_target)?;
        best.push(outcome.best_similarity);
    }

    let thresholds = vec![
        ("sar_50".to_string(), 0.5),
        ("sar_75".to_string(), 0.75),
        ("sar_best".to_string(), theta_best),
    ];
    Ok(AttackStageReport {
        config_hash: cfg.config_hash(),
        targets: best.len(),
        sanity_identity_similarity: sanity.best_similarity,
        report: sar_report(&best, &thresholds),
    })
}

// ---------------------------------------------------------------------------
// Bench stage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub examples: usize,
    pub data_prep_ms_per_example: f64,
    pub feature_extraction_ms_per_example: f64,
    pub inference_ms_per_example: f64,
}

/// Per-example wall time of the three pipeline stages: data preparation
/// (load + normalize), feature extraction (descriptors + eigendecomposition
/// + transform, no basis reuse), and inference (embedding + diffusion +
/// match).
pub fn bench_stage(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    gcn: Option<&GcnModel>,
    phi: &PhiNetwork,
    examples: usize,
) -> Result<BenchReport, PipelineError> {
    let manifest = load_manifest(corpus_dir)?;
    cfg.check_hash(&manifest.config_hash, "corpus manifest")?;
    let count = examples.min(manifest.scans.len()).max(1);
    let scans = &manifest.scans[..count];

    let prep_start = Instant::now();
    let mut meshes = Vec::with_capacity(count);
    for scan in scans {
        let mesh = load_mesh(&corpus_dir.join(&scan.path), MeshFormat::Obj)?
            .with_labels(&scan.subject_id, &scan.scan_id);
        meshes.push(normalize_mesh(&mesh)?);
    }
    let prep_ms = prep_start.elapsed().as_secs_f64() * 1e3;

    let extract_start = Instant::now();
    let mut features = Vec::with_capacity(count);
    for mesh in &meshes {
        features.push(extract_features_single(cfg, mesh, None, None)?);
    }
    let extract_ms = extract_start.elapsed().as_secs_f64() * 1e3;

    let schedule = cfg.schedule()?;
    let enrolled: Vec<(Vec<f64>, KeyMaterial)> = meshes
        .iter()
        .zip(&features)
        .map(|(mesh, f_low)| {
            let z = match gcn {
                Some(m) => m.forward(f_low)?,
                None => pooled_embedding(f_low, cfg.d),
            };
            let key = subject_key(cfg, &mesh.subject_id, 0);
            let z_t = diffuse(&z, &key, &schedule, phi)?;
            Ok::<_, PipelineError>((z_t, key))
        })
        .collect::<Result<_, _>>()?;

    let infer_start = Instant::now();
    for (f_low, (enrolled_zt, key)) in features.iter().zip(&enrolled) {
        let z = match gcn {
            Some(m) => m.forward(f_low)?,
            None => pooled_embedding(f_low, cfg.d),
        };
        let z_t = diffuse(&z, key, &schedule, phi)?;
        let _ = crate::eval::match_templates(&z_t, enrolled_zt, 0.9)?;
    }
    let infer_ms = infer_start.elapsed().as_secs_f64() * 1e3;

    Ok(BenchReport {
        config_hash: cfg.config_hash(),
        examples: count,
        data_prep_ms_per_example: prep_ms / count as f64,
        feature_extraction_ms_per_example: extract_ms / count as f64,
        inference_ms_per_example: infer_ms / count as f64,
    })
}

// ---------------------------------------------------------------------------
// Client-side enrollment path (mesh file -> template)

/// Full client-side computation for one user-supplied mesh file: load, crop,
/// normalize, extract, embed, protect. Only the returned template ever
/// leaves the client.
pub fn template_from_mesh_file(
    cfg: &PipelineConfig,
    mesh_path: &Path,
    gcn: Option<&GcnModel>,
    phi: &PhiNetwork,
    key: &KeyMaterial,
) -> Result<ProtectedTemplate, PipelineError> {
    let format = MeshFormat::from_path(mesh_path)
        .ok_or_else(|| PipelineError::Artifact("unknown mesh extension".into()))?;
    let raw = load_mesh(mesh_path, format)?;
    let cropped = crate::mesh::crop_face_region(&raw)?;
    let mesh = normalize_mesh(&cropped)?;
    let f_low = extract_features_single(cfg, &mesh, None, None)?;
    let z = match gcn {
        Some(m) => m.forward(&f_low)?,
        None => pooled_embedding(&f_low, cfg.d),
    };
    let embedding = Embedding { z, subject_id: String::new(), scan_id: String::new() };
    make_template(cfg, phi, &embedding, key)
}

pub const TEMPLATE_FILE_VERSION: u32 = TEMPLATE_VERSION;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            corpus: CorpusSpec {
                subject_count: 4,
                scans_per_subject: 3,
                vertex_count: 162,
                master_seed: 7,
                ..CorpusSpec::default()
            },
            k: 6,
            d: 16,
            t: 5,
            gcn_hidden: 12,
            gcn_epochs: 10,
            phi_hidden: 16,
            protect_epochs: 3,
            workers: 1,
            entropy_t_values: vec![3, 5],
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_hash_ignores_paths_only() {
        let a = tiny_config();
        let mut b = a.clone();
        b.paths.out_dir = Some(PathBuf::from("/somewhere/else"));
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.k = 7;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn corpus_roundtrip_and_hash_check() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_synth_stage(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.scans.len(), 12);

        let (loaded, meshes) = load_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(loaded.scans.len(), 12);
        assert_eq!(meshes.len(), 12);
        assert_eq!(meshes[0].vertices.len(), 162);

        let other = PipelineConfig { k: 9, ..tiny_config() };
        assert!(matches!(
            load_corpus(&other, dir.path()),
            Err(PipelineError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn extract_produces_expected_shapes_and_roundtrip() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_synth_stage(&cfg, dir.path()).unwrap();
        let (_, meshes) = load_corpus(&cfg, dir.path()).unwrap();
        let features = extract_stage(&cfg, &manifest, &meshes, None).unwrap();
        assert_eq!(features.entries.len(), 12);
        assert_eq!(features.entries[0].f_low.len(), cfg.k);
        assert_eq!(features.entries[0].f_low[0].len(), DESCRIPTOR_COUNT);

        let path = dir.path().join("features.json");
        features.write(&path).unwrap();
        let back = FeatureFile::read(&cfg, &path).unwrap();
        assert_eq!(back.entries.len(), 12);
        let bad_cfg = PipelineConfig { t: 9, ..tiny_config() };
        assert!(matches!(
            FeatureFile::read(&bad_cfg, &path),
            Err(PipelineError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn extraction_is_worker_count_invariant() {
        let mut cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_synth_stage(&cfg, dir.path()).unwrap();
        let (_, meshes) = load_corpus(&cfg, dir.path()).unwrap();
        cfg.workers = 1;
        let serial = extract_stage(&cfg, &manifest, &meshes, None).unwrap();
        cfg.workers = 4;
        let parallel = extract_stage(&cfg, &manifest, &meshes, None).unwrap();
        for (a, b) in serial.entries.iter().zip(&parallel.entries) {
            assert_eq!(a.f_low, b.f_low);
        }
    }

    #[test]
    fn pooled_embedding_is_unit_norm() {
        let f = Mat::from_fn(6, 10, |r, c| (r * 10 + c) as f64 * 0.01 - 0.3);
        let z = pooled_embedding(&f, 16);
        assert_eq!(z.len(), 16);
        assert!((crate::linalg::norm(&z) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn basis_cache_dir_is_reused() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        gen_synth_stage(&cfg, dir.path()).unwrap();
        let (manifest, meshes) = load_corpus(&cfg, dir.path()).unwrap();
        let cache = dir.path().join("cache");
        let a = extract_stage(&cfg, &manifest, &meshes, Some(&cache)).unwrap();
        let cached_files = std::fs::read_dir(&cache).unwrap().count();
        assert_eq!(cached_files, 1, "one shared topology, one cache entry");
        let b = extract_stage(&cfg, &manifest, &meshes, Some(&cache)).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.f_low, y.f_low);
        }
    }
}
