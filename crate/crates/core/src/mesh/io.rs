//! ASCII OBJ and ASCII PLY readers plus an OBJ writer.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces coordinates bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Mesh, MeshError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(Self::Obj),
            "ply" => Some(Self::Ply),
            _ => None,
        }
    }
}

/// Load a mesh from an ASCII OBJ or PLY file. The result is validated but
/// not normalized.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<Mesh, MeshError> {
    let text = fs::read_to_string(path)?;
    let mesh = match format {
        MeshFormat::Obj => parse_obj(&text)?,
        MeshFormat::Ply => parse_ply(&text)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

fn parse_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse { line, message: message.into() }
}

fn parse_obj(text: &str) -> Result<Mesh, MeshError> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for slot in v.iter_mut() {
                    let tok = parts
                        .next()
                        .ok_or_else(|| parse_err(line_no, "vertex line needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad coordinate '{tok}'")))?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("face must be a triangle, got {} indices", idx.len()),
                    ));
                }
                let mut f = [0u32; 3];
                for (slot, tok) in f.iter_mut().zip(&idx) {
                    // OBJ faces may carry texture/normal refs: "v/t/n".
                    let head = tok.split('/').next().unwrap_or("");
                    let one_based: i64 = head
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad face index '{tok}'")))?;
                    if one_based < 1 || one_based as usize > vertices.len() {
                        return Err(MeshError::IndexOutOfRange {
                            face: faces.len(),
                            index: one_based,
                            vertex_count: vertices.len(),
                        });
                    }
                    *slot = (one_based - 1) as u32;
                }
                faces.push(f);
            }
            // vn/vt/o/g/s/usemtl/mtllib are legal but irrelevant here.
            _ => {}
        }
    }
    Ok(Mesh { vertices, faces, subject_id: String::new(), scan_id: String::new() })
}

fn parse_ply(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if first.trim() != "ply" {
        return Err(parse_err(1, "missing 'ply' magic"));
    }

    let mut vertex_count: Option<usize> = None;
    let mut face_count: Option<usize> = None;
    let mut vertex_props = 0usize;
    let mut in_vertex_element = false;
    let mut header_end = 0usize;

    for (ln, raw) in lines.by_ref() {
        let line = raw.trim();
        let line_no = ln + 1;
        if line == "end_header" {
            header_end = line_no;
            break;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_err(line_no, format!("unsupported format '{other}'")))
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                vertex_count =
                    Some(n.parse().map_err(|_| parse_err(line_no, "bad vertex count"))?);
                in_vertex_element = true;
            }
            ["element", "face", n] => {
                face_count = Some(n.parse().map_err(|_| parse_err(line_no, "bad face count"))?);
                in_vertex_element = false;
            }
            ["element", ..] => {
                in_vertex_element = false;
            }
            ["property", "list", ..] => {}
            ["property", ..] => {
                if in_vertex_element {
                    vertex_props += 1;
                }
            }
            [] => {}
            _ => return Err(parse_err(line_no, format!("unrecognized header line '{line}'"))),
        }
    }
    if header_end == 0 {
        return Err(parse_err(1, "header never terminated with end_header"));
    }
    let vertex_count = vertex_count.ok_or_else(|| parse_err(header_end, "no vertex element"))?;
    let face_count = face_count.ok_or_else(|| parse_err(header_end, "no face element"))?;
    if vertex_props < 3 {
        return Err(parse_err(header_end, "vertex element needs at least x y z properties"));
    }

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..vertex_count {
        let (ln, raw) =
            lines.next().ok_or_else(|| parse_err(header_end, "truncated vertex data"))?;
        let line_no = ln + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(line_no, "vertex line needs 3 coordinates"));
        }
        let mut v = [0.0; 3];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot =
                tok.parse().map_err(|_| parse_err(line_no, format!("bad coordinate '{tok}'")))?;
        }
        vertices.push(v);
    }
    for fi in 0..face_count {
        let (ln, raw) =
            lines.next().ok_or_else(|| parse_err(header_end, "truncated face data"))?;
        let line_no = ln + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            return Err(parse_err(line_no, "empty face line"));
        }
        let count: usize =
            toks[0].parse().map_err(|_| parse_err(line_no, "bad face list count"))?;
        if count != 3 || toks.len() != 4 {
            return Err(parse_err(line_no, "face must be a triangle"));
        }
        let mut f = [0u32; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..]) {
            let ix: i64 =
                tok.parse().map_err(|_| parse_err(line_no, format!("bad face index '{tok}'")))?;
            if ix < 0 || ix as usize >= vertices.len() {
                return Err(MeshError::IndexOutOfRange {
                    face: fi,
                    index: ix,
                    vertex_count: vertices.len(),
                });
            }
            *slot = ix as u32;
        }
        faces.push(f);
    }
    Ok(Mesh { vertices, faces, subject_id: String::new(), scan_id: String::new() })
}

/// Write a mesh as ASCII OBJ (v/f lines, 1-based indices).
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    let mut buf = String::with_capacity(mesh.vertices.len() * 32);
    for v in &mesh.vertices {
        buf.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        buf.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(buf.as_bytes())?;
    Ok(())
}
