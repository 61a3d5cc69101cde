//! On-disk slide archives.
//!
//! A cohort directory holds `cohort.toml` (ordered slide ids) and one
//! directory per slide:
//!
//! - `manifest.toml`: format version, slide id, lattice dims, anchor model,
//!   record fields and the model registry.
//! - `tissue.u8`: one byte per cell, 1 for tissue.
//! - `labels.u8`: one byte per cell, the archetype id or 255 (synthetic only).
//! - `model_<k>.bin`: `u32` row count `n`, `n` little-endian `u32` cell
//!   indices in ascending order, then `n * embed_dim` row-major `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AstraError, Result};
use crate::grid::{Archetype, Category, EmbeddingPlane, ModelRegistry, ModelSpec, SlideGrid, SlideRecord};

pub const FORMAT_VERSION: u32 = 1;
const NO_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordFields {
    classification_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cancer_type: Option<String>,
    anatomic_site: String,
    prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    model_id: usize,
    name: String,
    native_tile_px: u32,
    embed_dim: usize,
    file: String,
    cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    slide_id: String,
    width: usize,
    height: usize,
    anchor_model: usize,
    has_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    record: Option<RecordFields>,
    models: Vec<ModelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CohortIndex {
    format_version: u32,
    slides: Vec<String>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> AstraError {
    AstraError::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn check_slide_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(AstraError::invalid(format!("slide id {id:?} is not a safe directory name")))
    }
}

/// Writes `grid` into `dir`, creating it if needed.
pub fn write_slide(dir: &Path, grid: &SlideGrid, registry: &ModelRegistry) -> Result<()> {
    check_slide_id(&grid.slide_id)?;
    grid.validate()?;
    if registry.len() != grid.num_models() {
        return Err(AstraError::invalid(format!(
            "registry has {} models, slide {} has {}",
            registry.len(),
            grid.slide_id,
            grid.num_models()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut models = Vec::with_capacity(registry.len());
    for (spec, plane) in registry.models.iter().zip(&grid.planes) {
        if spec.embed_dim != plane.dim {
            return Err(AstraError::DimensionMismatch { model_id: spec.model_id, expected: spec.embed_dim, found: plane.dim });
        }
        let file = format!("model_{}.bin", spec.model_id);
        let cells: Vec<usize> = plane.cells().collect();
        let mut bytes = Vec::with_capacity(4 + cells.len() * (4 + 4 * plane.dim));
        bytes.extend_from_slice(&(cells.len() as u32).to_le_bytes());
        for &c in &cells {
            bytes.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for &c in &cells {
            for v in plane.get(c).expect("listed cell") {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;
        models.push(ModelEntry {
            model_id: spec.model_id,
            name: spec.name.clone(),
            native_tile_px: spec.native_tile_px,
            embed_dim: spec.embed_dim,
            file,
            cells: cells.len(),
        });
    }
    fs::write(dir.join("tissue.u8"), grid.tissue_valid.iter().map(|&t| t as u8).collect::<Vec<u8>>())?;
    if let Some(labels) = &grid.planted_labels {
        fs::write(dir.join("labels.u8"), labels.iter().map(|l| l.map_or(NO_LABEL, |a| a as u8)).collect::<Vec<u8>>())?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        slide_id: grid.slide_id.clone(),
        width: grid.width,
        height: grid.height,
        anchor_model: grid.anchor_model,
        has_labels: grid.planted_labels.is_some(),
        record: grid.record.as_ref().map(|r| RecordFields {
            classification_category: r.classification_category.as_str().to_string(),
            cancer_type: r.cancer_type.clone(),
            anatomic_site: r.anatomic_site.clone(),
            prompt: r.prompt.clone(),
        }),
        models,
    };
    let text = toml::to_string(&manifest).map_err(|e| AstraError::invalid(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_plane(path: &Path, dim: usize, num_cells: usize, expected_rows: usize) -> Result<EmbeddingPlane> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(format_err(path, "truncated header"));
    }
    let n = read_u32(&bytes, 0) as usize;
    if n != expected_rows {
        return Err(format_err(path, format!("{n} rows, manifest says {expected_rows}")));
    }
    let want = 4 + n * 4 + n * dim * 4;
    if bytes.len() != want {
        return Err(format_err(path, format!("{} bytes, expected {want}", bytes.len())));
    }
    let mut plane = EmbeddingPlane::empty(dim, num_cells);
    let data = &bytes[4 + n * 4..];
    let mut row = vec![0f32; dim];
    let mut prev: Option<usize> = None;
    for i in 0..n {
        let cell = read_u32(&bytes, 4 + i * 4) as usize;
        if cell >= num_cells || prev.is_some_and(|p| p >= cell) {
            return Err(format_err(path, format!("cell index table entry {i} ({cell}) out of range or out of order")));
        }
        prev = Some(cell);
        for (j, v) in row.iter_mut().enumerate() {
            let at = (i * dim + j) * 4;
            *v = f32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes"));
        }
        plane.insert(cell, &row);
    }
    Ok(plane)
}

/// Reads a slide directory written by [`write_slide`].
pub fn read_slide(dir: &Path) -> Result<(SlideGrid, ModelRegistry)> {
    let mpath = dir.join("manifest.toml");
    let text = fs::read_to_string(&mpath)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| format_err(&mpath, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(format_err(&mpath, format!("unsupported format version {}", m.format_version)));
    }
    let num_cells = m.width * m.height;
    let tpath = dir.join("tissue.u8");
    let tissue = fs::read(&tpath)?;
    if tissue.len() != num_cells || tissue.iter().any(|&b| b > 1) {
        return Err(format_err(&tpath, "tissue map does not match the lattice"));
    }
    let planted_labels = if m.has_labels {
        let lpath = dir.join("labels.u8");
        let bytes = fs::read(&lpath)?;
        if bytes.len() != num_cells {
            return Err(format_err(&lpath, "label map does not match the lattice"));
        }
        let labels = bytes
            .iter()
            .map(|&b| match b {
                NO_LABEL => Ok(None),
                v => Archetype::from_u8(v).map(Some).ok_or_else(|| format_err(&lpath, format!("unknown archetype {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    let record = match &m.record {
        Some(r) => {
            let rec = SlideRecord::new(Category::parse(&r.classification_category)?, r.cancer_type.as_deref(), &r.anatomic_site)?;
            if rec.prompt != r.prompt {
                return Err(format_err(&mpath, "stored prompt differs from the rendered record"));
            }
            Some(rec)
        }
        None => None,
    };
    let mut models = Vec::with_capacity(m.models.len());
    let mut planes = Vec::with_capacity(m.models.len());
    for (k, e) in m.models.iter().enumerate() {
        if e.model_id != k {
            return Err(format_err(&mpath, format!("model entries out of order at {k}")));
        }
        let file = Path::new(&e.file);
        if file.components().count() != 1 {
            return Err(format_err(&mpath, format!("model file {:?} escapes the slide directory", e.file)));
        }
        planes.push(read_plane(&dir.join(file), e.embed_dim, num_cells, e.cells)?);
        models.push(ModelSpec { model_id: e.model_id, name: e.name.clone(), native_tile_px: e.native_tile_px, embed_dim: e.embed_dim });
    }
    let grid = SlideGrid {
        slide_id: m.slide_id,
        width: m.width,
        height: m.height,
        anchor_model: m.anchor_model,
        tissue_valid: tissue.iter().map(|&b| b == 1).collect(),
        planes,
        planted_labels,
        record,
    };
    grid.validate().map_err(|e| format_err(dir, e.to_string()))?;
    Ok((grid, ModelRegistry { models }))
}

/// Incremental cohort writer; the index is written by [`CohortWriter::finish`].
pub struct CohortWriter {
    root: PathBuf,
    registry: ModelRegistry,
    ids: Vec<String>,
}

impl CohortWriter {
    pub fn create(root: &Path, registry: &ModelRegistry) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(CohortWriter { root: root.to_path_buf(), registry: registry.clone(), ids: Vec::new() })
    }

    pub fn push(&mut self, grid: &SlideGrid) -> Result<()> {
        if self.ids.contains(&grid.slide_id) {
            return Err(AstraError::invalid(format!("duplicate slide id {}", grid.slide_id)));
        }
        check_slide_id(&grid.slide_id)?;
        write_slide(&self.root.join(&grid.slide_id), grid, &self.registry)?;
        self.ids.push(grid.slide_id.clone());
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<String>> {
        let index = CohortIndex { format_version: FORMAT_VERSION, slides: self.ids };
        let text = toml::to_string(&index).map_err(|e| AstraError::invalid(e.to_string()))?;
        fs::write(self.root.join("cohort.toml"), text)?;
        Ok(index.slides)
    }
}

/// Writes every slide plus the cohort index under `root`.
pub fn write_cohort(root: &Path, grids: &[SlideGrid], registry: &ModelRegistry) -> Result<()> {
    let mut w = CohortWriter::create(root, registry)?;
    for g in grids {
        w.push(g)?;
    }
    w.finish().map(|_| ())
}

/// Ordered slide ids of a cohort directory.
pub fn cohort_ids(root: &Path) -> Result<Vec<String>> {
    let path = root.join("cohort.toml");
    let text = fs::read_to_string(&path).map_err(|e| format_err(&path, e.to_string()))?;
    let index: CohortIndex = toml::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if index.format_version != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported format version {}", index.format_version)));
    }
    for id in &index.slides {
        check_slide_id(id).map_err(|e| format_err(&path, e.to_string()))?;
    }
    Ok(index.slides)
}

/// Lazily reads the slides of a cohort in index order.
pub fn cohort_slides(root: &Path) -> Result<impl Iterator<Item = Result<SlideGrid>> + '_> {
    let ids = cohort_ids(root)?;
    Ok(ids.into_iter().map(move |id| read_slide(&root.join(&id)).map(|(g, _)| g)))
}

/// Reads a whole cohort into memory.
pub fn read_cohort(root: &Path) -> Result<Vec<SlideGrid>> {
    cohort_slides(root)?.collect()
}
