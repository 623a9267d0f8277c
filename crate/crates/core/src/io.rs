//! On-disk formats.
//!
//! Arrays are raw little-endian `f64` files (`<stem>.bin`) described by a JSON
//! sidecar (`<stem>.json`). Every JSON document carries a [`Provenance`]
//! block with the tool version and the SHA-256 of the run configuration.
//! All writes go to a temporary file in the target directory that is then
//! renamed over the destination.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::BasisBundle;
use crate::error::{FodError, Result};
use crate::signal::{ResponseFunction, ShellDesign};
use crate::sphere::{build_hemisphere, Direction, GridProvenance, ShBasis, SphericalGrid};

pub const TOOL_NAME: &str = "fodkit";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Who wrote a file and from which configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// Hex SHA-256 of the canonical JSON form of the run configuration.
    pub config_sha256: String,
}

impl Provenance {
    pub fn for_config<C: Serialize>(config: &C) -> Result<Self> {
        Ok(Provenance {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            config_sha256: config_hash(config)?,
        })
    }
}

/// Hex SHA-256 of `serde_json::to_vec(config)`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| FodError::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| FodError::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(FodError::io(path, e));
    }
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = fs::read(path).map_err(|e| FodError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| FodError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// A JSON document wrapped with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<M> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: M,
}

/// Sidecar describing a raw `f64` array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySidecar<M> {
    pub provenance: Provenance,
    /// File name of the payload, relative to the sidecar.
    pub data_file: String,
    pub dtype: String,
    pub byte_order: String,
    /// Row-major shape of the payload.
    pub shape: Vec<usize>,
    pub meta: M,
}

fn array_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f64(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
            .collect(),
    )
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the sidecar path.
pub fn write_array<M: Serialize>(
    dir: &Path,
    stem: &str,
    shape: &[usize],
    values: &[f64],
    provenance: &Provenance,
    meta: &M,
) -> Result<PathBuf> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(FodError::validation(format!(
            "array {stem}: shape {shape:?} needs {expected} values, got {}",
            values.len()
        )));
    }
    let (json, bin) = array_paths(dir, stem);
    write_atomic(&bin, &f64_to_le_bytes(values))?;
    let sidecar = ArraySidecar {
        provenance: provenance.clone(),
        data_file: format!("{stem}.bin"),
        dtype: "f64".into(),
        byte_order: "little".into(),
        shape: shape.to_vec(),
        meta,
    };
    write_json(&json, &sidecar)?;
    Ok(json)
}

/// Reads an array written by [`write_array`] given the sidecar path.
pub fn read_array<M: DeserializeOwned>(sidecar: &Path) -> Result<(ArraySidecar<M>, Vec<f64>)> {
    let meta: ArraySidecar<M> = read_json(sidecar)?;
    let bad = |reason: String| FodError::Format {
        path: sidecar.display().to_string(),
        reason,
    };
    if meta.dtype != "f64" || meta.byte_order != "little" {
        return Err(bad(format!("unsupported element type {} / {}", meta.dtype, meta.byte_order)));
    }
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let bin = dir.join(&meta.data_file);
    let bytes = fs::read(&bin).map_err(|e| FodError::io(&bin, e))?;
    let values = le_bytes_to_f64(&bytes).ok_or_else(|| bad("payload length is not a multiple of 8".into()))?;
    let expected: usize = meta.shape.iter().product();
    if values.len() != expected {
        return Err(bad(format!("shape {:?} needs {expected} values, payload has {}", meta.shape, values.len())));
    }
    Ok((meta, values))
}

/// Flattens per-voxel vectors (voxel-major) into one buffer.
pub fn flatten(rows: &[DVector<f64>]) -> (Vec<usize>, Vec<f64>) {
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows {
        out.extend(r.iter().copied());
    }
    (vec![rows.len(), width], out)
}

/// Inverse of [`flatten`] for a two-dimensional shape.
pub fn unflatten(shape: &[usize], values: &[f64]) -> Result<Vec<DVector<f64>>> {
    if shape.len() != 2 || shape[0] * shape[1] != values.len() {
        return Err(FodError::validation(format!("expected a 2-d array shape, got {shape:?}")));
    }
    if shape[1] == 0 {
        return Ok(vec![DVector::zeros(0); shape[0]]);
    }
    Ok(values.chunks_exact(shape[1]).map(DVector::from_column_slice).collect())
}

const BUNDLE_MAGIC: &[u8; 8] = b"FODKBNDL";
const BUNDLE_VERSION: u32 = 1;

/// Header of the basis bundle container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub l_max: usize,
    pub j_max: usize,
    pub dense_grid: GridProvenance,
    pub shells: Vec<BundleShell>,
    /// Matrices in payload order with their shapes.
    pub matrices: Vec<(String, [usize; 2])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleShell {
    pub response: ResponseFunction,
    pub gradients: Vec<Direction<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Serializes a bundle: magic, version (u32 LE), header length (u64 LE), JSON
/// header, then row-major `f64` matrices (`C`, dense grid points, `Phi~`,
/// and the response diagonal of each shell).
pub fn encode_bundle(bundle: &BasisBundle<f64>) -> Result<Vec<u8>> {
    let points = DMatrix::from_fn(bundle.dense_grid.len(), 3, |i, j| bundle.dense_grid.points[i].to_array()[j]);
    let mut mats: Vec<(String, DMatrix<f64>)> = vec![
        ("C".into(), bundle.c.clone()),
        ("dense_points".into(), points),
        ("dense_sh".into(), bundle.dense_sh.clone()),
    ];
    for (k, s) in bundle.shells.iter().enumerate() {
        mats.push((format!("r_diag_{k}"), DMatrix::from_column_slice(1, s.r_diag.len(), s.r_diag.as_slice())));
    }
    let header = BundleHeader {
        l_max: bundle.sh.l_max(),
        j_max: bundle.j_max,
        dense_grid: bundle.dense_grid.provenance,
        shells: bundle
            .shells
            .iter()
            .map(|s| BundleShell {
                response: s.response,
                gradients: s.gradients.clone(),
            })
            .collect(),
        matrices: mats.iter().map(|(n, m)| (n.clone(), [m.nrows(), m.ncols()])).collect(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for (_, m) in &mats {
        out.extend_from_slice(&f64_to_le_bytes(&row_major(m)));
    }
    Ok(out)
}

/// Rebuilds a bundle from [`encode_bundle`] output.
pub fn decode_bundle(bytes: &[u8]) -> Result<BasisBundle<f64>> {
    let bad = |reason: &str| FodError::Format {
        path: "<bundle>".into(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != BUNDLE_MAGIC {
        return Err(bad("not a basis bundle"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != BUNDLE_VERSION {
        return Err(bad(&format!("unsupported bundle version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: BundleHeader = serde_json::from_slice(body)?;
    let mut offset = 20 + hlen;
    let mut mats = std::collections::HashMap::new();
    for (name, [r, c]) in &header.matrices {
        let n = r * c * 8;
        let chunk = bytes.get(offset..offset + n).ok_or_else(|| bad("truncated payload"))?;
        let vals = le_bytes_to_f64(chunk).ok_or_else(|| bad("bad payload"))?;
        mats.insert(name.clone(), DMatrix::from_row_slice(*r, *c, &vals));
        offset += n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let take = |name: &str| mats.get(name).cloned().ok_or_else(|| bad(&format!("missing matrix {name}")));
    let sh = ShBasis::new(header.l_max)?;
    let c = take("C")?;
    let dense_sh = take("dense_sh")?;
    let pts = take("dense_points")?;
    let points = (0..pts.nrows())
        .map(|i| Direction::new(pts[(i, 0)], pts[(i, 1)], pts[(i, 2)]))
        .collect::<Result<Vec<_>>>()?;
    let dense_grid = match header.dense_grid {
        GridProvenance::Icosphere { subdiv, hemisphere: true } => {
            let g: SphericalGrid<f64> = build_hemisphere(subdiv);
            if g.points != points {
                return Err(bad("dense grid points do not match their provenance"));
            }
            g
        }
        _ => SphericalGrid::custom(points)?,
    };
    if c.nrows() != sh.len() || dense_sh.ncols() != sh.len() || dense_sh.nrows() != dense_grid.len() {
        return Err(bad("matrix shapes are inconsistent with the header"));
    }
    let mut shells = Vec::with_capacity(header.shells.len());
    for (k, s) in header.shells.iter().enumerate() {
        let r = take(&format!("r_diag_{k}"))?;
        let r_diag = DVector::from_row_slice(r.as_slice());
        let phi = sh.eval_matrix(&s.gradients)?;
        let mut sh_design = phi.clone();
        for (j, mut col) in sh_design.column_iter_mut().enumerate() {
            col *= r_diag[j];
        }
        let design = &sh_design * &c;
        shells.push(ShellDesign {
            response: s.response,
            gradients: s.gradients.clone(),
            phi,
            r_diag,
            sh_design,
            design,
        });
    }
    let dense_frame = &dense_sh * &c;
    Ok(BasisBundle {
        sh,
        j_max: header.j_max,
        c,
        dense_grid,
        dense_sh,
        dense_frame,
        shells,
    })
}

pub fn write_bundle(path: &Path, bundle: &BasisBundle<f64>) -> Result<()> {
    write_atomic(path, &encode_bundle(bundle)?)
}

pub fn read_bundle(path: &Path) -> Result<BasisBundle<f64>> {
    let bytes = fs::read(path).map_err(|e| FodError::io(path, e))?;
    decode_bundle(&bytes).map_err(|e| match e {
        FodError::Format { reason, .. } => FodError::Format {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::gradient_scheme;

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Provenance::for_config(&("cfg", 1)).unwrap();
        let rows = vec![DVector::from_vec(vec![1.0, -2.5]), DVector::from_vec(vec![f64::MIN_POSITIVE, 3.0])];
        let (shape, vals) = flatten(&rows);
        let side = write_array(dir.path(), "a", &shape, &vals, &p, &serde_json::json!({"k": 1})).unwrap();
        let (meta, back) = read_array::<serde_json::Value>(&side).unwrap();
        assert_eq!(meta.shape, vec![2, 2]);
        assert_eq!(meta.provenance, p);
        assert_eq!(unflatten(&meta.shape, &back).unwrap(), rows);
        let raw = fs::read(dir.path().join("a.bin")).unwrap();
        assert_eq!(&raw[..8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Provenance::for_config(&1).unwrap();
        assert!(write_array(dir.path(), "a", &[3], &[1.0], &p, &()).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn bundle_round_trip() {
        let rf = ResponseFunction::with_ratio(1000.0, 1e-3, 10.0, true).unwrap();
        let g = gradient_scheme(21).unwrap().points;
        let b = BasisBundle::<f64>::new(4, 1, vec![(rf, g)]).unwrap();
        let bytes = encode_bundle(&b).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back.c, b.c);
        assert_eq!(back.dense_sh, b.dense_sh);
        assert_eq!(back.dense_grid.neighbors, b.dense_grid.neighbors);
        assert!((&back.shells[0].design - &b.shells[0].design).amax() < 1e-14);
        let mut broken = bytes.clone();
        broken.pop();
        assert!(decode_bundle(&broken).is_err());
        assert!(decode_bundle(b"nonsense").is_err());
    }
}
