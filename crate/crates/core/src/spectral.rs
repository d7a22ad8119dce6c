//! Mesh graph spectra: normalized Laplacian, smallest-K eigendecomposition,
//! and the truncated graph Fourier transform.
//!
//! The normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}` of a connected
//! graph has spectrum in `[0, 2]` with a single zero eigenvalue whose
//! eigenvector is proportional to `D^{1/2} 1`. Projecting per-vertex signals
//! onto the K lowest-frequency eigenvectors keeps global shape and discards
//! fine detail.
//!
//! Eigenvectors are only defined up to sign (and rotation inside degenerate
//! eigenspaces). To make downstream features reproducible, every eigenvector
//! is flipped so that its largest-magnitude entry is positive, ties broken by
//! lowest index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Mat;
use crate::mesh::Mesh;
use crate::rng::SplitMix64;

/// Meshes up to this many vertices use the dense symmetric solver; larger
/// ones go through Lanczos.
pub const DENSE_EIGEN_LIMIT: usize = 2000;

/// Residual bound `|L u - lambda u|` enforced on every returned eigenpair.
pub const RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("graph is disconnected: {components} components")]
    Disconnected { components: usize },
    #[error("vertex {0} has degree zero")]
    ZeroDegree(usize),
    #[error("requested {k} eigenpairs from a graph with {n} vertices")]
    DimensionBound { k: usize, n: usize },
    #[error("eigensolver did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("basis cache: {0}")]
    BadCache(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Undirected vertex adjacency derived from mesh faces, stored as sorted
/// neighbor lists.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    neighbors: Vec<Vec<u32>>,
}

impl MeshGraph {
    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[v]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Build the undirected graph whose edges are vertex pairs co-occurring in a
/// face. Errors if the graph is disconnected or any vertex is isolated.
pub fn build_graph(mesh: &Mesh) -> Result<MeshGraph, SpectralError> {
    let n = mesh.vertices.len();
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (a, b) in mesh.edges() {
        neighbors[a as usize].push(b);
        neighbors[b as usize].push(a);
    }
    for (v, ns) in neighbors.iter_mut().enumerate() {
        ns.sort_unstable();
        ns.dedup();
        if ns.is_empty() {
            return Err(SpectralError::ZeroDegree(v));
        }
    }
    let components = count_components(&neighbors);
    if components != 1 {
        return Err(SpectralError::Disconnected { components });
    }
    Ok(MeshGraph { neighbors })
}

fn count_components(neighbors: &[Vec<u32>]) -> usize {
    let n = neighbors.len();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &w in &neighbors[v] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    stack.push(w as usize);
                }
            }
        }
    }
    components
}

/// Sparse symmetric matrix in per-row coordinate form.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl SparseSym {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.rows[r]
            .iter()
            .find(|(col, _)| *col as usize == c)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }

    /// `y = self * x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(c, v) in row {
                acc = v.mul_add(x[c as usize], acc);
            }
            y[r] = acc;
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c as usize)] = v;
            }
        }
        m
    }
}

/// Normalized Laplacian `I - D^{-1/2} A D^{-1/2}`. Diagonal entries are 1;
/// the entry for edge (i, j) is `-1/sqrt(d_i d_j)`.
pub fn normalized_laplacian(graph: &MeshGraph) -> SparseSym {
    let n = graph.vertex_count();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let di = graph.degree(i) as f64;
        let mut row = Vec::with_capacity(graph.degree(i) + 1);
        let mut placed_diag = false;
        for &j in graph.neighbors(i) {
            let dj = graph.degree(j as usize) as f64;
            if !placed_diag && j as usize > i {
                row.push((i as u32, 1.0));
                placed_diag = true;
            }
            row.push((j, -1.0 / (di * dj).sqrt()));
        }
        if !placed_diag {
            row.push((i as u32, 1.0));
        }
        rows.push(row);
    }
    SparseSym { n, rows }
}

/// The K lowest-frequency eigenpairs of a normalized Laplacian.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// Ascending eigenvalues in `[0, 2]`.
    pub eigenvalues: Vec<f64>,
    /// `|V| x K`, orthonormal columns, sign-fixed.
    pub eigenvectors: Mat,
}

impl SpectralBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.eigenvectors.rows()
    }
}

/// Smallest-K eigenpairs of `lap`. Dense solve below [`DENSE_EIGEN_LIMIT`]
/// vertices, Lanczos with full reorthogonalization above. Every returned
/// pair satisfies the [`RESIDUAL_TOL`] residual bound.
pub fn smallest_eigenpairs(lap: &SparseSym, k: usize) -> Result<SpectralBasis, SpectralError> {
    let n = lap.dim();
    if k > n || k == 0 {
        return Err(SpectralError::DimensionBound { k, n });
    }
    let mut basis = if n <= DENSE_EIGEN_LIMIT {
        dense_smallest(lap, k)
    } else {
        lanczos_smallest(lap, k, 1e-8, 50 * k)?
    };
    apply_sign_convention(&mut basis.eigenvectors);
    verify_residuals(lap, &basis)?;
    Ok(basis)
}

fn dense_smallest(lap: &SparseSym, k: usize) -> SpectralBasis {
    let dense = lap.to_dense();
    let eig = nalgebra::SymmetricEigen::new(dense);
    let n = lap.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = Mat::from_fn(n, k, |r, c| eig.eigenvectors[(r, order[c])]);
    SpectralBasis { eigenvalues, eigenvectors }
}

/// Lanczos iteration with full (two-pass classical Gram-Schmidt)
/// reorthogonalization on the spectrally flipped operator `2I - L`, so the
/// smallest eigenvalues of `L` converge first. Public mainly so tests can
/// compare it against the dense path on small graphs.
pub fn lanczos_smallest(
    lap: &SparseSym,
    k: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralBasis, SpectralError> {
    let n = lap.dim();
    let m_cap = max_iter.min(n);
    let mut rng = SplitMix64::new(0x5eed_1a9c_705e_c7a1);

    // Lanczos vectors for the flipped operator B = 2I - L.
    let mut vecs: Vec<Vec<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    let mut v = normalized_random(&mut rng, n);
    vecs.push(v.clone());
    let mut lv = vec![0.0; n];

    for step in 0..m_cap {
        lap.matvec(&v, &mut lv);
        // w = B v = 2v - Lv
        let mut w: Vec<f64> = v.iter().zip(&lv).map(|(&vi, &li)| 2.0 * vi - li).collect();
        let alpha = crate::linalg::dot(&w, &v);
        alphas.push(alpha);
        // Full reorthogonalization, applied twice.
        for _ in 0..2 {
            for q in &vecs {
                let proj = crate::linalg::dot(&w, q);
                for (wi, &qi) in w.iter_mut().zip(q) {
                    *wi -= proj * qi;
                }
            }
        }
        let beta = crate::linalg::norm(&w);

        // Convergence test on the current tridiagonal Ritz pairs.
        if alphas.len() >= k && (step % k == k - 1 || step == m_cap - 1 || beta < 1e-14) {
            if let Some(basis) = ritz_extract(lap, &vecs, &alphas, &betas, beta, k, tol) {
                return Ok(basis);
            }
        }

        if beta < 1e-14 {
            // Invariant subspace found; restart with a fresh direction.
            let mut fresh = normalized_random(&mut rng, n);
            for q in &vecs {
                let proj = crate::linalg::dot(&fresh, q);
                for (fi, &qi) in fresh.iter_mut().zip(q) {
                    *fi -= proj * qi;
                }
            }
            let nrm = crate::linalg::norm(&fresh);
            if nrm < 1e-12 {
                break;
            }
            for f in fresh.iter_mut() {
                *f /= nrm;
            }
            betas.push(0.0);
            v = fresh;
        } else {
            betas.push(beta);
            for wi in w.iter_mut() {
                *wi /= beta;
            }
            v = w;
        }
        vecs.push(v.clone());
    }

    // Last chance with everything accumulated.
    if let Some(basis) = ritz_extract(lap, &vecs, &alphas, &betas, 0.0, k, tol) {
        return Ok(basis);
    }
    Err(SpectralError::NonConvergence { iterations: m_cap })
}

/// Solve the projected tridiagonal problem and accept if the top-k Ritz pairs
/// of the flipped operator meet the residual bound.
fn ritz_extract(
    lap: &SparseSym,
    vecs: &[Vec<f64>],
    alphas: &[f64],
    betas: &[f64],
    trailing_beta: f64,
    k: usize,
    tol: f64,
) -> Option<SpectralBasis> {
    let m = alphas.len();
    if m < k {
        return None;
    }
    let mut tri = nalgebra::DMatrix::zeros(m, m);
    for i in 0..m {
        tri[(i, i)] = alphas[i];
        if i + 1 < m {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(tri);
    // Largest Ritz values of B correspond to the smallest eigenvalues of L.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let n = lap.dim();
    for &i in order.iter().take(k) {
        // Standard Lanczos residual estimate: |beta_m * s_{m,i}|.
        let est = trailing_beta * eig.eigenvectors[(m - 1, i)];
        if est.abs() > tol {
            return None;
        }
    }

    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenvectors = Mat::zeros(n, k);
    for (col, &i) in order.iter().take(k).enumerate() {
        eigenvalues.push(2.0 - eig.eigenvalues[i]);
        let mut u = vec![0.0; n];
        for (j, q) in vecs.iter().take(m).enumerate() {
            let s = eig.eigenvectors[(j, i)];
            for (ui, &qi) in u.iter_mut().zip(q) {
                *ui = s.mul_add(qi, *ui);
            }
        }
        let nrm = crate::linalg::norm(&u);
        for (r, ui) in u.iter().enumerate() {
            eigenvectors.set(r, col, ui / nrm);
        }
    }
    // Ascending in L's spectrum.
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]));
    let sorted_vals: Vec<f64> = idx.iter().map(|&i| eigenvalues[i]).collect();
    let sorted_vecs = Mat::from_fn(n, k, |r, c| eigenvectors.get(r, idx[c]));
    Some(SpectralBasis { eigenvalues: sorted_vals, eigenvectors: sorted_vecs })
}

fn normalized_random(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
    let nrm = crate::linalg::norm(&v);
    for x in v.iter_mut() {
        *x /= nrm;
    }
    v
}

/// Flip each column so its largest-magnitude entry is positive; ties broken
/// by lowest index.
fn apply_sign_convention(u: &mut Mat) {
    let (n, k) = u.shape();
    for c in 0..k {
        let mut best_row = 0;
        let mut best_mag = f64::NEG_INFINITY;
        for r in 0..n {
            let mag = u.get(r, c).abs();
            if mag > best_mag {
                best_mag = mag;
                best_row = r;
            }
        }
        if u.get(best_row, c) < 0.0 {
            for r in 0..n {
                u.set(r, c, -u.get(r, c));
            }
        }
    }
}

fn verify_residuals(lap: &SparseSym, basis: &SpectralBasis) -> Result<(), SpectralError> {
    let n = lap.dim();
    let mut lu = vec![0.0; n];
    for (c, &lambda) in basis.eigenvalues.iter().enumerate() {
        let u = basis.eigenvectors.col(c);
        lap.matvec(&u, &mut lu);
        let mut res = 0.0f64;
        for (li, ui) in lu.iter().zip(&u) {
            let d = li - lambda * ui;
            res += d * d;
        }
        if res.sqrt() > RESIDUAL_TOL {
            return Err(SpectralError::NonConvergence { iterations: 0 });
        }
    }
    Ok(())
}

/// Truncated graph Fourier transform `F_low = U^T f` (`K x n`).
pub fn gft(basis: &SpectralBasis, f: &Mat) -> Result<Mat, SpectralError> {
    if f.rows() != basis.vertex_count() {
        return Err(SpectralError::ShapeMismatch {
            expected: format!("{} signal rows", basis.vertex_count()),
            got: format!("{}", f.rows()),
        });
    }
    Ok(basis.eigenvectors.transpose_matmul(f))
}

/// Inverse of the truncated transform: `f_hat = U F_low`. At `K = |V|` this
/// reconstructs the signal exactly; for smaller K the error is the energy in
/// the discarded frequencies, non-increasing in K.
pub fn lowpass_reconstruct(basis: &SpectralBasis, f_low: &Mat) -> Result<Mat, SpectralError> {
    if f_low.rows() != basis.k() {
        return Err(SpectralError::ShapeMismatch {
            expected: format!("{} coefficient rows", basis.k()),
            got: format!("{}", f_low.rows()),
        });
    }
    Ok(basis.eigenvectors.matmul(f_low))
}

/// Hash of the graph-defining mesh content (vertex count + face indices).
/// The Laplacian basis depends only on connectivity, so this is the cache
/// key for [`write_basis_cache`].
pub fn graph_content_hash(mesh: &Mesh) -> String {
    let mut h = Sha256::new();
    h.update(b"specface-graph-v1");
    h.update((mesh.vertices.len() as u64).to_le_bytes());
    for f in &mesh.faces {
        for ix in f {
            h.update(ix.to_le_bytes());
        }
    }
    hex(&h.finalize()[..16])
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const BASIS_MAGIC: &[u8; 8] = b"SFBASIS\0";
const BASIS_VERSION: u32 = 1;

/// Binary basis cache: magic, version, |V|, K, eigenvalues, then
/// eigenvectors column-major, all little-endian f64.
pub fn write_basis_cache(path: &Path, basis: &SpectralBasis) -> Result<(), SpectralError> {
    let n = basis.vertex_count() as u64;
    let k = basis.k() as u64;
    let mut buf = Vec::with_capacity(24 + 8 * (basis.k() + basis.eigenvectors.len()));
    buf.extend_from_slice(BASIS_MAGIC);
    buf.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&k.to_le_bytes());
    for v in &basis.eigenvalues {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in 0..basis.k() {
        for r in 0..basis.vertex_count() {
            buf.extend_from_slice(&basis.eigenvectors.get(r, c).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_basis_cache(path: &Path) -> Result<SpectralBasis, SpectralError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[..8] != BASIS_MAGIC {
        return Err(SpectralError::BadCache("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != BASIS_VERSION {
        return Err(SpectralError::BadCache(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let expected = 28 + 8 * (k + n * k);
    if bytes.len() != expected {
        return Err(SpectralError::BadCache(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut off = 28;
    let mut read_f64 = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let eigenvalues: Vec<f64> = (0..k).map(|_| read_f64()).collect();
    let mut eigenvectors = Mat::zeros(n, k);
    for c in 0..k {
        for r in 0..n {
            eigenvectors.set(r, c, read_f64());
        }
    }
    Ok(SpectralBasis { eigenvalues, eigenvectors })
}
