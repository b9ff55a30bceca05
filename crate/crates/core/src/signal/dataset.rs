//! JSON manifest + raw-tensor files, and the per-subject window cache.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Label, Recording, Window};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: String,
    /// Raw tensor of shape `(C, T)`, relative to the manifest's directory.
    pub file: String,
    pub sample_rate_hz: u32,
    pub channel_names: Vec<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Loads every subject listed in a manifest and validates it.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<Recording>> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_reader(open(manifest_path)?)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.subjects.is_empty() {
        log::warn!("manifest {} lists no subjects", manifest_path.display());
    }
    manifest
        .subjects
        .iter()
        .map(|entry| load_subject(root, entry))
        .collect()
}

fn load_subject(root: &Path, entry: &SubjectEntry) -> Result<Recording> {
    let fail = |msg: String| Error::Subject {
        subject: entry.id.clone(),
        msg,
    };
    let label = Label::parse(&entry.label)
        .ok_or_else(|| fail(format!("unknown label '{}'", entry.label)))?;
    let path = root.join(&entry.file);
    let (_, tensor) = read_tensor(&mut open(&path).map_err(|e| fail(e.to_string()))?)
        .map_err(|e| fail(e.to_string()))?
        .ok_or_else(|| fail(format!("{} holds no tensor", path.display())))?;
    let shape = tensor.shape().to_vec();
    if shape.len() != 2 || shape[0] != entry.channel_names.len() {
        return Err(fail(format!(
            "file {} has shape {shape:?} but {} channels are declared",
            entry.file,
            entry.channel_names.len()
        )));
    }
    let t = shape[1];
    let channels = tensor
        .data()
        .chunks(t.max(1))
        .take(shape[0])
        .map(<[f32]>::to_vec)
        .collect();
    Recording::new(
        entry.id.clone(),
        label,
        entry.sample_rate_hz,
        entry.channel_names.clone(),
        channels,
    )
}

/// Writes recordings as `<id>.f32` tensors plus `manifest.json` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, recordings: &[Recording]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for rec in recordings {
        let file = format!("{}.f32", rec.subject_id);
        let path = dir.join(&file);
        let data: Vec<f32> = rec.channels.concat();
        let t = Tensor::new([rec.n_channels(), rec.len()], data)?;
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        write_tensor(&mut w, &rec.subject_id, &t).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.subjects.push(SubjectEntry {
            id: rec.subject_id.clone(),
            label: rec.label.to_string(),
            file,
            sample_rate_hz: rec.sample_rate_hz,
            channel_names: rec.channel_names.clone(),
        });
    }
    let path = dir.join("manifest.json");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    subject_id: String,
    label: Label,
    window_indices: Vec<usize>,
}

/// Stores one subject's windows as a single `(n_windows, C, L)` tensor at
/// `<dir>/<id>.windows` with labels in `<dir>/<id>.windows.json`.
pub fn write_window_cache(dir: impl AsRef<Path>, windows: &[Window]) -> Result<()> {
    let dir = dir.as_ref();
    let first = windows
        .first()
        .ok_or_else(|| Error::invalid("write_window_cache", "no windows"))?;
    if windows.iter().any(|w| w.subject_id != first.subject_id) {
        return Err(Error::invalid(
            "write_window_cache",
            "windows from several subjects",
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stacked = Tensor::stack(
        &windows
            .iter()
            .map(|w| w.samples.clone())
            .collect::<Vec<_>>(),
    )?;
    let path = dir.join(format!("{}.windows", first.subject_id));
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    write_tensor(&mut w, &first.subject_id, &stacked).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let side = CacheSidecar {
        subject_id: first.subject_id.clone(),
        label: first.label,
        window_indices: windows.iter().map(|w| w.window_index).collect(),
    };
    let side_path = dir.join(format!("{}.windows.json", first.subject_id));
    serde_json::to_writer(
        File::create(&side_path).map_err(|e| Error::io(&side_path, e))?,
        &side,
    )?;
    Ok(())
}

pub fn read_window_cache(dir: impl AsRef<Path>, subject_id: &str) -> Result<Vec<Window>> {
    let dir = dir.as_ref();
    let side_path = dir.join(format!("{subject_id}.windows.json"));
    let side: CacheSidecar = serde_json::from_reader(open(&side_path)?)?;
    let path = dir.join(format!("{subject_id}.windows"));
    let (_, stacked) = read_tensor(&mut open(&path)?)?.ok_or_else(|| Error::Format {
        path: path.clone(),
        msg: "empty cache".into(),
    })?;
    if stacked.ndim() != 3 || stacked.shape()[0] != side.window_indices.len() {
        return Err(Error::Format {
            path,
            msg: format!("shape {:?} does not match sidecar", stacked.shape()),
        });
    }
    Ok(side
        .window_indices
        .iter()
        .enumerate()
        .map(|(i, &wi)| Window {
            subject_id: side.subject_id.clone(),
            label: side.label,
            window_index: wi,
            samples: stacked.index_first(i),
        })
        .collect())
}

/// Name of the subject index written next to the window caches.
pub const WINDOW_INDEX: &str = "windows.json";

/// Caches every subject's windows under `dir` and lists the subjects, in
/// first-appearance order, in [`WINDOW_INDEX`].
pub fn write_window_dir(dir: impl AsRef<Path>, windows: &[Window]) -> Result<()> {
    let dir = dir.as_ref();
    let mut order: Vec<&str> = Vec::new();
    for w in windows {
        if !order.contains(&w.subject_id.as_str()) {
            order.push(&w.subject_id);
        }
    }
    for id in &order {
        let own: Vec<Window> = windows
            .iter()
            .filter(|w| w.subject_id == *id)
            .cloned()
            .collect();
        write_window_cache(dir, &own)?;
    }
    let path = dir.join(WINDOW_INDEX);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    serde_json::to_writer_pretty(
        File::create(&path).map_err(|e| Error::io(&path, e))?,
        &order,
    )?;
    Ok(())
}

/// Windows of a directory holding either [`WINDOW_INDEX`] (preprocessed
/// caches, returned as stored) or `manifest.json` (raw recordings, run
/// through `cfg`).
pub fn load_windows(dir: impl AsRef<Path>, cfg: &super::PreprocessConfig) -> Result<Vec<Window>> {
    let dir = dir.as_ref();
    let index = dir.join(WINDOW_INDEX);
    if index.exists() {
        let order: Vec<String> = serde_json::from_reader(open(&index)?)?;
        let mut out = Vec::new();
        for id in order {
            out.extend(read_window_cache(dir, &id)?);
        }
        return Ok(out);
    }
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: format!("neither {WINDOW_INDEX} nor manifest.json found"),
        });
    }
    let mut out = Vec::new();
    for rec in load_dataset(&manifest)? {
        let ws = super::preprocess(&rec, cfg)?;
        if ws.is_empty() {
            log::warn!("subject {} yields no windows", rec.subject_id);
        }
        out.extend(ws);
    }
    Ok(out)
}
