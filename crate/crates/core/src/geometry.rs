//! Per-vertex geometric descriptors: the `|V| x 10` signal matrix fed into
//! the graph Fourier transform.
//!
//! Columns, in order: x, y, z, nx, ny, nz, mean dihedral angle, Gaussian
//! curvature, mean curvature, mixed Voronoi vertex area. The scalar columns
//! (7-10) are standardized per mesh to zero mean / unit variance so spectral
//! coefficients stay comparable across meshes; coordinates and normals are
//! left raw since the mesh itself is scale-normalized.

use std::io::Write;
use std::path::Path;

use crate::linalg::Mat;
use crate::mesh::{Mesh, MeshError};

pub const DESCRIPTOR_COLUMNS: [&str; 10] = [
    "x",
    "y",
    "z",
    "nx",
    "ny",
    "nz",
    "mean_dihedral",
    "gaussian_curv",
    "mean_curv",
    "vertex_area",
];

pub const DESCRIPTOR_COUNT: usize = 10;

/// The assembled per-vertex descriptor matrix.
#[derive(Debug, Clone)]
pub struct DescriptorMatrix {
    /// `|V| x 10`, scalar columns standardized.
    pub f: Mat,
}

impl DescriptorMatrix {
    /// Debug CSV dump with the fixed column header.
    pub fn write_csv(&self, path: &Path) -> Result<(), MeshError> {
        let mut out = String::new();
        out.push_str(&DESCRIPTOR_COLUMNS.join(","));
        out.push('\n');
        for r in 0..self.f.rows() {
            let row: Vec<String> = self.f.row(r).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Unnormalized face normal (cross product of two edges); its length is
/// twice the face area.
fn face_cross(mesh: &Mesh, f: [u32; 3]) -> [f64; 3] {
    let a = mesh.vertices[f[0] as usize];
    let b = mesh.vertices[f[1] as usize];
    let c = mesh.vertices[f[2] as usize];
    cross(sub3(b, a), sub3(c, a))
}

/// Area-weighted average of incident face normals, unit-normalized.
pub fn vertex_normals(mesh: &Mesh) -> Result<Mat, MeshError> {
    let n = mesh.vertices.len();
    let mut acc = vec![[0.0f64; 3]; n];
    for f in &mesh.faces {
        let fc = face_cross(mesh, *f);
        // fc is already area-weighted.
        for &ix in f {
            for k in 0..3 {
                acc[ix as usize][k] += fc[k];
            }
        }
    }
    let mut out = Mat::zeros(n, 3);
    for (v, a) in acc.iter().enumerate() {
        let len = norm3(*a);
        if len < 1e-300 {
            return Err(MeshError::IsolatedVertex { vertex: v });
        }
        for k in 0..3 {
            out.set(v, k, a[k] / len);
        }
    }
    Ok(out)
}

/// Per-vertex mean over incident interior edges of the angle between the two
/// adjacent face normals, in `[0, pi]`. Vertices with no interior incident
/// edge get 0.
pub fn dihedral_angles(mesh: &Mesh) -> Vec<f64> {
    let n = mesh.vertices.len();
    // Map each undirected edge to its incident faces.
    let mut edge_faces: std::collections::BTreeMap<(u32, u32), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let normals: Vec<[f64; 3]> = mesh
        .faces
        .iter()
        .map(|f| {
            let fc = face_cross(mesh, *f);
            let len = norm3(fc).max(1e-300);
            [fc[0] / len, fc[1] / len, fc[2] / len]
        })
        .collect();

    let mut sum = vec![0.0f64; n];
    let mut count = vec![0usize; n];
    for ((a, b), faces) in &edge_faces {
        if faces.len() != 2 {
            continue;
        }
        let cosang = dot3(normals[faces[0]], normals[faces[1]]).clamp(-1.0, 1.0);
        let angle = cosang.acos();
        for v in [*a, *b] {
            sum[v as usize] += angle;
            count[v as usize] += 1;
        }
    }
    (0..n).map(|v| if count[v] > 0 { sum[v] / count[v] as f64 } else { 0.0 }).collect()
}

/// Meyer-style mixed Voronoi areas: Voronoi piece for non-obtuse triangles,
/// T/2 at the obtuse corner and T/4 elsewhere as the clamped fallback.
pub fn vertex_areas(mesh: &Mesh) -> Vec<f64> {
    let n = mesh.vertices.len();
    let mut area = vec![0.0f64; n];
    for f in &mesh.faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let p = [mesh.vertices[idx[0]], mesh.vertices[idx[1]], mesh.vertices[idx[2]]];
        let tri_area = norm3(face_cross(mesh, *f)) / 2.0;
        if tri_area < 1e-300 {
            continue;
        }
        // Corner cotangents.
        let mut cot = [0.0f64; 3];
        let mut obtuse_at = None;
        for c in 0..3 {
            let u = sub3(p[(c + 1) % 3], p[c]);
            let v = sub3(p[(c + 2) % 3], p[c]);
            let d = dot3(u, v);
            cot[c] = d / norm3(cross(u, v)).max(1e-300);
            if d < 0.0 {
                obtuse_at = Some(c);
            }
        }
        match obtuse_at {
            None => {
                // Voronoi split: each corner gets 1/8 (|opposite edges|^2 * cot).
                for c in 0..3 {
                    let e1 = sub3(p[(c + 1) % 3], p[c]);
                    let e2 = sub3(p[(c + 2) % 3], p[c]);
                    let piece = (dot3(e1, e1) * cot[(c + 2) % 3]
                        + dot3(e2, e2) * cot[(c + 1) % 3])
                        / 8.0;
                    area[idx[c]] += piece;
                }
            }
            Some(o) => {
                for c in 0..3 {
                    area[idx[c]] += if c == o { tri_area / 2.0 } else { tri_area / 4.0 };
                }
            }
        }
    }
    area
}

/// Angle deficit `2 pi - sum(incident angles)` per vertex. The discrete
/// Gauss-Bonnet theorem makes these sum to `4 pi` on closed genus-0 meshes.
pub fn angle_deficits(mesh: &Mesh) -> Vec<f64> {
    let n = mesh.vertices.len();
    let mut sum = vec![0.0f64; n];
    for f in &mesh.faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let p = [mesh.vertices[idx[0]], mesh.vertices[idx[1]], mesh.vertices[idx[2]]];
        for c in 0..3 {
            let u = sub3(p[(c + 1) % 3], p[c]);
            let v = sub3(p[(c + 2) % 3], p[c]);
            let cosang =
                (dot3(u, v) / (norm3(u) * norm3(v)).max(1e-300)).clamp(-1.0, 1.0);
            sum[idx[c]] += cosang.acos();
        }
    }
    sum.iter().map(|s| 2.0 * std::f64::consts::PI - s).collect()
}

/// Angle deficit divided by mixed vertex area.
pub fn gaussian_curvature(mesh: &Mesh) -> Vec<f64> {
    let deficits = angle_deficits(mesh);
    let areas = vertex_areas(mesh);
    deficits
        .iter()
        .zip(&areas)
        .map(|(d, a)| if *a > 1e-300 { d / a } else { 0.0 })
        .collect()
}

/// Mean curvature magnitude from the cotangent Laplacian:
/// `|sum (cot a + cot b)(p_i - p_j)| / (4 A_mixed)`.
pub fn mean_curvature(mesh: &Mesh) -> Vec<f64> {
    let n = mesh.vertices.len();
    let mut lap = vec![[0.0f64; 3]; n];
    for f in &mesh.faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let p = [mesh.vertices[idx[0]], mesh.vertices[idx[1]], mesh.vertices[idx[2]]];
        // The corner opposite each edge contributes its cotangent.
        for c in 0..3 {
            let i = (c + 1) % 3;
            let j = (c + 2) % 3;
            let u = sub3(p[i], p[c]);
            let v = sub3(p[j], p[c]);
            let cot = dot3(u, v) / norm3(cross(u, v)).max(1e-300);
            let diff = sub3(p[i], p[j]);
            for k in 0..3 {
                lap[idx[i]][k] += cot * diff[k];
                lap[idx[j]][k] -= cot * diff[k];
            }
        }
    }
    let areas = vertex_areas(mesh);
    (0..n)
        .map(|v| if areas[v] > 1e-300 { norm3(lap[v]) / (4.0 * areas[v]) } else { 0.0 })
        .collect()
}

/// Raw (un-standardized) descriptor matrix.
pub fn raw_descriptors(mesh: &Mesh) -> Result<Mat, MeshError> {
    let n = mesh.vertices.len();
    let normals = vertex_normals(mesh)?;
    let dihedrals = dihedral_angles(mesh);
    let gauss = gaussian_curvature(mesh);
    let mean_c = mean_curvature(mesh);
    let areas = vertex_areas(mesh);
    let mut f = Mat::zeros(n, DESCRIPTOR_COUNT);
    for v in 0..n {
        let p = mesh.vertices[v];
        f.set(v, 0, p[0]);
        f.set(v, 1, p[1]);
        f.set(v, 2, p[2]);
        f.set(v, 3, normals.get(v, 0));
        f.set(v, 4, normals.get(v, 1));
        f.set(v, 5, normals.get(v, 2));
        f.set(v, 6, dihedrals[v]);
        f.set(v, 7, gauss[v]);
        f.set(v, 8, mean_c[v]);
        f.set(v, 9, areas[v]);
    }
    Ok(f)
}

/// Assemble the final descriptor matrix: raw columns with the four scalar
/// columns standardized to zero mean / unit variance over the mesh.
pub fn assemble_descriptors(mesh: &Mesh) -> Result<DescriptorMatrix, MeshError> {
    let mut f = raw_descriptors(mesh)?;
    let n = f.rows();
    for c in 6..DESCRIPTOR_COUNT {
        let mut mean = 0.0;
        for r in 0..n {
            mean += f.get(r, c);
        }
        mean /= n as f64;
        let mut var = 0.0;
        for r in 0..n {
            let d = f.get(r, c) - mean;
            var += d * d;
        }
        var /= n as f64;
        let std = var.sqrt();
        for r in 0..n {
            let v = if std > 1e-12 { (f.get(r, c) - mean) / std } else { 0.0 };
            f.set(r, c, v);
        }
    }
    Ok(DescriptorMatrix { f })
}
