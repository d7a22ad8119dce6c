//! Triangle mesh representation, preprocessing, and the synthetic corpus.

mod io;
mod pairs;
mod synth;

pub use io::{load_mesh, write_obj, MeshFormat};
pub use pairs::{make_pairs, DatasetSplit, Pair, ScanRef};
pub use synth::{generate_corpus, icosphere, CorpusSpec, SUPPORTED_VERTEX_COUNTS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} references vertex index {index}, valid range is 1..={vertex_count}")]
    IndexOutOfRange { face: usize, index: i64, vertex_count: usize },
    #[error("face {face} is degenerate: {indices:?}")]
    DegenerateFace { face: usize, indices: [u32; 3] },
    #[error("mesh graph is disconnected: {components} components")]
    Disconnected { components: usize },
    #[error("mesh has zero spatial extent")]
    ZeroExtent,
    #[error("vertex {vertex} has no incident face")]
    IsolatedVertex { vertex: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("split needs at least 2 subjects to form mismatch pairs, got {0}")]
    TooFewSubjects(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A triangular face mesh carrying its identity labels.
///
/// Vertices are unitless positions; faces index into the vertex list. The
/// undirected edge graph derived from the faces must be connected after
/// preprocessing.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub subject_id: String,
    pub scan_id: String,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mesh =
            Self { vertices, faces, subject_id: String::new(), scan_id: String::new() };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_labels(mut self, subject_id: &str, scan_id: &str) -> Self {
        self.subject_id = subject_id.to_string();
        self.scan_id = scan_id.to_string();
        self
    }

    /// Check face index bounds and non-degeneracy.
    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &ix in f {
                if ix as usize >= n {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index: i64::from(ix) + 1,
                        vertex_count: n,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace { face: fi, indices: *f });
            }
        }
        Ok(())
    }

    /// Undirected edge list derived from face co-occurrence, sorted and
    /// deduplicated.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        let inv = 1.0 / self.vertices.len() as f64;
        [c[0] * inv, c[1] * inv, c[2] * inv]
    }
}

/// Center the mesh at the origin and scale the farthest vertex to unit norm.
/// Topology is untouched. Idempotent within 1e-9.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let c = mesh.centroid();
    let mut out = mesh.clone();
    let mut max_norm: f64 = 0.0;
    for v in out.vertices.iter_mut() {
        for k in 0..3 {
            v[k] -= c[k];
        }
        max_norm = max_norm.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
    }
    if max_norm < 1e-12 {
        return Err(MeshError::ZeroExtent);
    }
    let inv = 1.0 / max_norm;
    for v in out.vertices.iter_mut() {
        for k in 0..3 {
            v[k] *= inv;
        }
    }
    Ok(out)
}

/// Radius-based facial crop for loaded meshes: keep vertices within
/// `1.2 x` the median distance from the centroid, then retain the largest
/// connected component. Synthetic corpus meshes are already face-only, so the
/// pipeline skips this for them.
pub fn crop_face_region(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let c = mesh.centroid();
    let mut dists: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| {
            let d = [v[0] - c[0], v[1] - c[1], v[2] - c[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let limit = 1.2 * median;
    let keep: Vec<bool> = dists.drain(..).map(|d| d <= limit).collect();
    let cropped = retain_vertices(mesh, &keep);
    largest_component(&cropped)
}

/// Restrict a mesh to the flagged vertices; faces touching a dropped vertex
/// are removed and the rest reindexed.
fn retain_vertices(mesh: &Mesh, keep: &[bool]) -> Mesh {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        if keep[i] {
            remap[i] = vertices.len() as u32;
            vertices.push(*v);
        }
    }
    let faces = mesh
        .faces
        .iter()
        .filter(|f| f.iter().all(|&ix| keep[ix as usize]))
        .map(|f| [remap[f[0] as usize], remap[f[1] as usize], remap[f[2] as usize]])
        .collect();
    Mesh { vertices, faces, subject_id: mesh.subject_id.clone(), scan_id: mesh.scan_id.clone() }
}

/// Keep only the largest connected component of the face-derived graph.
fn largest_component(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let n = mesh.vertices.len();
    if n == 0 {
        return Err(MeshError::ZeroExtent);
    }
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (a, b) in mesh.edges() {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    let mut sizes = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = count;
        let mut size = 0usize;
        while let Some(v) = stack.pop() {
            size += 1;
            for &w in &adj[v] {
                if comp[w as usize] == usize::MAX {
                    comp[w as usize] = count;
                    stack.push(w as usize);
                }
            }
        }
        sizes.push(size);
        count += 1;
    }
    if count == 1 {
        return Ok(mesh.clone());
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by_key(|(i, &s)| (s, std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
        .unwrap();
    let keep: Vec<bool> = comp.iter().map(|&c| c == best).collect();
    Ok(retain_vertices(mesh, &keep))
}
