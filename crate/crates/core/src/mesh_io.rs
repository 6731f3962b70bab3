//! Wavefront OBJ export and a matching parser for round-trip checks.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn obj_string(vertices: &Array2<f64>, faces: &[[usize; 3]]) -> Result<String> {
    if vertices.ncols() != 3 {
        return Err(Error::contract("vertices must be (m,3)"));
    }
    let m = vertices.nrows();
    let mut out = String::new();
    for i in 0..m {
        writeln!(
            out,
            "v {:.6} {:.6} {:.6}",
            vertices[[i, 0]],
            vertices[[i, 1]],
            vertices[[i, 2]]
        )
        .expect("string write");
    }
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v >= m) {
            return Err(Error::contract(format!(
                "face {fi} references vertex out of range ({f:?}, mesh has {m})"
            )));
        }
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    Ok(out)
}

pub fn export_obj(path: &Path, vertices: &Array2<f64>, faces: &[[usize; 3]]) -> Result<()> {
    let text = obj_string(vertices, faces)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse the subset we emit: `v x y z` and pure triangle `f` lines with
/// optional `/`-suffixed attribute references. Comments and any other
/// directives are skipped.
pub fn parse_obj(text: &str) -> Result<(Array2<f64>, Vec<[usize; 3]>)> {
    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for slot in xyz.iter_mut() {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| Error::format(format!("line {}: short vertex", ln + 1)))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| Error::format(format!("line {}: bad coordinate {tok}", ln + 1)))?;
                }
                if tokens.next().is_some() {
                    return Err(Error::format(format!("line {}: extra vertex fields", ln + 1)));
                }
                verts.push(xyz);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let v: usize = first
                        .parse()
                        .map_err(|_| Error::format(format!("line {}: bad face index {tok}", ln + 1)))?;
                    if v == 0 {
                        return Err(Error::format(format!(
                            "line {}: face indices are one-based",
                            ln + 1
                        )));
                    }
                    idx.push(v - 1);
                }
                if idx.len() != 3 {
                    return Err(Error::format(format!(
                        "line {}: only triangles are supported, got {} vertices",
                        ln + 1,
                        idx.len()
                    )));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let mut arr = Array2::zeros((verts.len(), 3));
    for (i, v) in verts.iter().enumerate() {
        for c in 0..3 {
            arr[[i, c]] = v[c];
        }
    }
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v >= verts.len()) {
            return Err(Error::format(format!(
                "face {fi} references vertex {} of {}",
                f.iter().max().unwrap(),
                verts.len()
            )));
        }
    }
    Ok((arr, faces))
}

pub fn load_obj(path: &Path) -> Result<(Array2<f64>, Vec<[usize; 3]>)> {
    parse_obj(&std::fs::read_to_string(path)?)
}
