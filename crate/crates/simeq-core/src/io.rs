//! File formats: ASCII XYZ and PLY point clouds, JSON transform records,
//! checkpoint directories (parameter blob + manifest + model config), XYZ
//! dataset directories, and JSON/JSONL/CSV report writers. All writes go
//! through a temp-file rename, so readers never observe partial files.

use crate::geometry::{GeometryError, Mat3, PointCloud, Sim3Transform};
use crate::model::{AnyModel, ModelConfig, ModelKind};
use crate::params::BlobManifest;
use crate::toy::DatasetPair;
use crate::Real;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed point row {row:?}")]
    BadRow {
        path: PathBuf,
        line: usize,
        row: String,
    },
    #[error("{path}: not a supported PLY file: {reason}")]
    BadPly { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Params(#[from] crate::params::ParamError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: empty point cloud")]
    Empty { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write bytes then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn fmt_coord<F: Real>(x: F) -> String {
    // shortest representation that round-trips the f64 value
    format!("{}", x.to_f64().unwrap())
}

// --- XYZ -------------------------------------------------------------------

pub fn write_xyz<F: Real>(path: &Path, pc: &PointCloud<F>) -> Result<(), IoError> {
    let mut out = String::with_capacity(pc.len() * 24);
    for p in &pc.points {
        out.push_str(&fmt_coord(p[0]));
        out.push(' ');
        out.push_str(&fmt_coord(p[1]));
        out.push(' ');
        out.push_str(&fmt_coord(p[2]));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_xyz<F: Real>(path: &Path) -> Result<PointCloud<F>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut it = trimmed.split_ascii_whitespace();
        let mut coord = [F::zero(); 3];
        for slot in coord.iter_mut() {
            let tok = it.next().ok_or_else(|| IoError::BadRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                row: line.to_string(),
            })?;
            *slot = tok
                .parse::<f64>()
                .map(F::from_f64_lossy)
                .map_err(|_| IoError::BadRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    row: line.to_string(),
                })?;
        }
        if it.next().is_some() {
            return Err(IoError::BadRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                row: line.to_string(),
            });
        }
        points.push(coord);
    }
    if points.is_empty() {
        return Err(IoError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(PointCloud::new(points))
}

// --- PLY (ASCII, vertex-only) ------------------------------------------------

pub fn write_ply<F: Real>(path: &Path, pc: &PointCloud<F>) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", pc.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in &pc.points {
        out.push_str(&fmt_coord(p[0]));
        out.push(' ');
        out.push_str(&fmt_coord(p[1]));
        out.push(' ');
        out.push_str(&fmt_coord(p[2]));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_ply<F: Real>(path: &Path) -> Result<PointCloud<F>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: &str| IoError::BadPly {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(bad("missing ply magic")),
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut body_start = 0usize;
    for (i, line) in &mut lines {
        let l = line.trim();
        if l == "end_header" {
            body_start = i + 1;
            break;
        } else if l.starts_with("format") {
            if l != "format ascii 1.0" {
                return Err(bad("only ascii 1.0 is supported"));
            }
        } else if l.starts_with("element") {
            let mut it = l.split_ascii_whitespace();
            let (_, kind, n) = (it.next(), it.next(), it.next());
            if kind != Some("vertex") {
                return Err(bad("only vertex elements are supported"));
            }
            if count.is_some() {
                return Err(bad("multiple elements"));
            }
            count = Some(
                n.and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad vertex count"))?,
            );
        } else if l.starts_with("property") {
            let mut it = l.split_ascii_whitespace();
            let (_, ty, name) = (it.next(), it.next(), it.next());
            if !matches!(ty, Some("float") | Some("double") | Some("float32") | Some("float64")) {
                return Err(bad("non-float vertex property"));
            }
            props.push(name.unwrap_or("").to_string());
        } else if l.starts_with("comment") || l.is_empty() {
            continue;
        } else {
            return Err(bad("unexpected header line"));
        }
    }
    if body_start == 0 {
        return Err(bad("missing end_header"));
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let (xi, yi, zi) = (
        props.iter().position(|p| p == "x").ok_or_else(|| bad("no x property"))?,
        props.iter().position(|p| p == "y").ok_or_else(|| bad("no y property"))?,
        props.iter().position(|p| p == "z").ok_or_else(|| bad("no z property"))?,
    );
    let mut points = Vec::with_capacity(count);
    for (lineno, line) in text.lines().enumerate().skip(body_start) {
        let l = line.trim();
        if l.is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split_ascii_whitespace().collect();
        if cols.len() != props.len() {
            return Err(IoError::BadRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                row: line.to_string(),
            });
        }
        let parse = |i: usize| -> Result<F, IoError> {
            cols[i]
                .parse::<f64>()
                .map(F::from_f64_lossy)
                .map_err(|_| IoError::BadRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    row: line.to_string(),
                })
        };
        points.push([parse(xi)?, parse(yi)?, parse(zi)?]);
        if points.len() == count {
            break;
        }
    }
    if points.len() != count {
        return Err(bad("fewer rows than the declared vertex count"));
    }
    Ok(PointCloud::new(points))
}

/// Read either format, by extension (`.ply` or anything else as XYZ).
pub fn read_cloud<F: Real>(path: &Path) -> Result<PointCloud<F>, IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        _ => read_xyz(path),
    }
}

// --- transforms ---------------------------------------------------------------

/// 13-number JSON record of a similarity transform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scale: f64,
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl TransformRecord {
    pub fn from_transform<F: Real>(g: &Sim3Transform<F>) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = g.rotation[r][c].to_f64().unwrap();
            }
        }
        Self {
            scale: g.scale.to_f64().unwrap(),
            rotation,
            translation: [
                g.translation[0].to_f64().unwrap(),
                g.translation[1].to_f64().unwrap(),
                g.translation[2].to_f64().unwrap(),
            ],
        }
    }

    pub fn to_transform<F: Real>(&self) -> Result<Sim3Transform<F>, GeometryError> {
        let mut rotation: Mat3<F> = [[F::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r][c] = F::from_f64_lossy(self.rotation[r * 3 + c]);
            }
        }
        Sim3Transform::new(
            F::from_f64_lossy(self.scale),
            rotation,
            [
                F::from_f64_lossy(self.translation[0]),
                F::from_f64_lossy(self.translation[1]),
                F::from_f64_lossy(self.translation[2]),
            ],
        )
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut line = serde_json::to_string(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    line.push('\n');
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

// --- checkpoints ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
}

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Write `params.bin`, `manifest.json` and `model.json` under `dir`.
pub fn save_checkpoint<F: Real>(dir: &Path, model: &AnyModel<F>) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (blob, manifest) = model.params().to_blob();
    atomic_write(&dir.join("params.bin"), &blob)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(
        &dir.join("model.json"),
        &CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA,
            kind: model.kind(),
            config: model.config().clone(),
        },
    )?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<AnyModel<F>, IoError> {
    let meta: CheckpointMeta = read_json(&dir.join("model.json"))?;
    let manifest: BlobManifest = read_json(&dir.join("manifest.json"))?;
    let blob = fs::read(dir.join("params.bin")).map_err(io_err(&dir.join("params.bin")))?;
    let mut model = AnyModel::build(meta.kind, meta.config)?;
    model.params_mut().load_blob(&blob, &manifest)?;
    Ok(model)
}

// --- datasets --------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub count: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub seed: u64,
}

fn pair_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("pair_{i:05}_partial.xyz")),
        dir.join(format!("pair_{i:05}_gt.xyz")),
    )
}

pub fn save_dataset<F: Real>(
    dir: &Path,
    pairs: &[DatasetPair<F>],
    seed: u64,
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, pair) in pairs.iter().enumerate() {
        let (p, g) = pair_paths(dir, i);
        write_xyz(&p, &pair.partial)?;
        write_xyz(&g, &pair.gt)?;
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetManifest {
            schema_version: 1,
            count: pairs.len(),
            n_in: pairs.first().map(|p| p.partial.len()).unwrap_or(0),
            n_out: pairs.first().map(|p| p.gt.len()).unwrap_or(0),
            seed,
        },
    )
}

pub fn load_dataset<F: Real>(dir: &Path) -> Result<Vec<DatasetPair<F>>, IoError> {
    let manifest: DatasetManifest = read_json(&dir.join("dataset.json"))?;
    let mut pairs = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let (p, g) = pair_paths(dir, i);
        pairs.push(DatasetPair {
            partial: read_xyz(&p)?,
            gt: read_xyz(&g)?,
        });
    }
    Ok(pairs)
}

/// Per-sample metric rows as CSV.
pub fn write_metrics_csv(path: &Path, rows: &[crate::metrics::SampleMetrics]) -> Result<(), IoError> {
    let mut out = String::from("sample,cd_l1_x1000,f1_at_1pct,fidelity,mmd\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            r.cd_l1_x1000,
            r.f1_at_1pct,
            r.fidelity.map(|v| v.to_string()).unwrap_or_default(),
            r.mmd.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Audit plot data (transform magnitude against error) as CSV.
pub fn write_audit_csv(path: &Path, rows: &[crate::audit::TrialRow]) -> Result<(), IoError> {
    let mut out = String::from("trial,scale,translation_norm,error\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i, r.scale, r.translation_norm, r.error));
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_transform, TransformDistribution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("simeq-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        r.gen_range(-1.0..1.0),
                        r.gen_range(-1e3..1e3),
                        r.gen_range(-1e-6..1e-6),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn xyz_round_trip_is_lossless() {
        let dir = tmpdir("xyz");
        let pc = random_cloud(64, 1);
        let path = dir.join("cloud.xyz");
        write_xyz(&path, &pc).unwrap();
        let back = read_xyz::<f64>(&path).unwrap();
        assert_eq!(pc.points, back.points);
    }

    #[test]
    fn xyz_rejects_malformed_rows() {
        let dir = tmpdir("badxyz");
        let path = dir.join("bad.xyz");
        fs::write(&path, "1 2 3\n4 five 6\n").unwrap();
        assert!(matches!(read_xyz::<f64>(&path), Err(IoError::BadRow { line: 2, .. })));
    }

    #[test]
    fn ply_round_trip_is_lossless() {
        let dir = tmpdir("ply");
        let pc = random_cloud(32, 2);
        let path = dir.join("cloud.ply");
        write_ply(&path, &pc).unwrap();
        let back = read_ply::<f64>(&path).unwrap();
        assert_eq!(pc.points, back.points);
    }

    #[test]
    fn ply_rejects_non_vertex_elements() {
        let dir = tmpdir("badply");
        let path = dir.join("bad.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement face 1\nproperty float x\nend_header\n0 0 0\n",
        )
        .unwrap();
        assert!(matches!(read_ply::<f64>(&path), Err(IoError::BadPly { .. })));
    }

    #[test]
    fn transform_record_round_trip() {
        let g = sample_transform::<f64>(&TransformDistribution::sim3(3), 4);
        let rec = TransformRecord::from_transform(&g);
        let back = rec.to_transform::<f64>().unwrap();
        assert!((back.scale - g.scale).abs() < 1e-15);
        assert_eq!(back.translation, g.translation);
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let dir = tmpdir("ckpt");
        let model = AnyModel::Equivariant(
            crate::model::CompletionModel::<f64>::new(crate::model::ModelConfig::tiny()).unwrap(),
        );
        save_checkpoint(&dir, &model).unwrap();
        let loaded = load_checkpoint::<f64>(&dir).unwrap();
        assert_eq!(model.params().to_blob().0, loaded.params().to_blob().0);
        assert_eq!(model.config(), loaded.config());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tmpdir("data");
        let cfg = crate::toy::ToyDatasetConfig {
            schema_version: 1,
            shapes: crate::toy::default_shapes(),
            n_in: 32,
            n_out: 64,
        };
        let pairs = crate::toy::generate_toy_dataset::<f64>(&cfg, 5, 9).unwrap();
        save_dataset(&dir, &pairs, 9).unwrap();
        let back = load_dataset::<f64>(&dir).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.partial.points, b.partial.points);
            assert_eq!(a.gt.points, b.gt.points);
        }
    }
}
