//! Adapter container directories.
//!
//! ```text
//! adapter/
//!   manifest.json        {"rank", "alpha", "layers": [{layer_id, d_in, d_out, a_file, b_file}]}
//!   layer_000_a.bin      little-endian f32, row-major, r x d_in
//!   layer_000_b.bin      little-endian f32, row-major, d_out x r
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, LayerFactors};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub layer_id: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub a_file: String,
    pub b_file: String,
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {rows}x{cols} f32 matrix, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load an adapter directory, validating every matrix against the manifest.
pub fn load_adapter(dir: &Path) -> Result<Adapter> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let a = read_matrix(&dir.join(&l.a_file), manifest.rank, l.d_in)?;
            let b = read_matrix(&dir.join(&l.b_file), l.d_out, manifest.rank)?;
            LayerFactors::new(l.layer_id, a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Adapter::new(layers, manifest.rank, manifest.alpha)
}

/// Write an adapter directory. Values are narrowed to `f32`.
pub fn save_adapter(adapter: &Adapter, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(adapter.layers().len());
    for l in adapter.layers() {
        let a_file = format!("layer_{:03}_a.bin", l.layer_id);
        let b_file = format!("layer_{:03}_b.bin", l.layer_id);
        write_matrix(&dir.join(&a_file), &l.a_matrix)?;
        write_matrix(&dir.join(&b_file), &l.b_matrix)?;
        layers.push(ManifestLayer {
            layer_id: l.layer_id,
            d_in: l.d_in(),
            d_out: l.d_out(),
            a_file,
            b_file,
        });
    }
    let manifest = Manifest {
        rank: adapter.rank(),
        alpha: adapter.scale(),
        layers,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
