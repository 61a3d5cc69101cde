//! Shared spatial grid: aligns heterogeneous per-model tile embeddings onto one
//! integer lattice with a fixed pixel stride.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AstraError, Result};
use crate::text::build_prompt;

pub const NO_SLOT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: usize,
    pub name: String,
    pub native_tile_px: u32,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub models: Vec<ModelSpec>,
}

impl Default for ModelRegistry {
    /// Four simulated foundation models with their native tile sizes and widths.
    fn default() -> Self {
        let spec = |model_id, name: &str, native_tile_px, embed_dim| ModelSpec {
            model_id,
            name: name.to_string(),
            native_tile_px,
            embed_dim,
        };
        ModelRegistry {
            models: vec![
                spec(0, "uni_v2", 256, 1536),
                spec(1, "gigapath", 256, 1536),
                spec(2, "conch_v1_5", 512, 768),
                spec(3, "virchow2", 224, 2560),
            ],
        }
    }
}

impl ModelRegistry {
    /// Index of the model used to decide tissue validity by default.
    pub const DEFAULT_ANCHOR: usize = 2;

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.embed_dim).collect()
    }

    pub fn get(&self, model_id: usize) -> Result<&ModelSpec> {
        self.models
            .get(model_id)
            .ok_or_else(|| AstraError::invalid(format!("unknown model id {model_id} (registry has {})", self.models.len())))
    }

    pub fn validate(&self, stride_px: u32) -> Result<()> {
        if self.models.is_empty() {
            return Err(AstraError::invalid("model registry is empty"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.model_id != i {
                return Err(AstraError::invalid(format!("model {} listed at position {i}", m.model_id)));
            }
            if m.embed_dim == 0 {
                return Err(AstraError::invalid(format!("model {i} has zero embedding width")));
            }
            if m.native_tile_px == 0 || m.native_tile_px > stride_px {
                return Err(AstraError::invalid(format!(
                    "model {i} tile size {} incompatible with stride {stride_px}",
                    m.native_tile_px
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub stride_px: u32,
    pub magnification_tag: String,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { stride_px: 512, magnification_tag: "20x".to_string() }
    }
}

impl GridSpec {
    #[inline]
    pub fn cell_of(&self, x_px: u32, y_px: u32) -> (usize, usize) {
        ((x_px / self.stride_px) as usize, (y_px / self.stride_px) as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Malignant,
    NormalAdjacent,
    Benign,
    Normal,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Malignant, Category::NormalAdjacent, Category::Benign, Category::Normal];

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn needs_cancer_type(self) -> bool {
        matches!(self, Category::Malignant | Category::Benign)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Malignant => "malignant",
            Category::NormalAdjacent => "normal_adjacent",
            Category::Benign => "benign",
            Category::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| AstraError::invalid(format!("unknown classification category {s:?}")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured annotation fields of one slide plus the rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub classification_category: Category,
    pub cancer_type: Option<String>,
    pub anatomic_site: String,
    pub prompt: String,
}

impl SlideRecord {
    pub fn new(category: Category, cancer_type: Option<&str>, anatomic_site: &str) -> Result<SlideRecord> {
        let mut record = SlideRecord {
            classification_category: category,
            cancer_type: cancer_type.map(str::to_string),
            anatomic_site: anatomic_site.to_string(),
            prompt: String::new(),
        };
        record.prompt = build_prompt(&record)?;
        Ok(record)
    }
}

/// Planted region label of a tissue cell in a synthetic slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Archetype {
    TumorSolid = 0,
    TumorGlandular = 1,
    BenignEpithelium = 2,
    Stroma = 3,
    Immune = 4,
    Necrosis = 5,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::TumorSolid,
        Archetype::TumorGlandular,
        Archetype::BenignEpithelium,
        Archetype::Stroma,
        Archetype::Immune,
        Archetype::Necrosis,
    ];

    pub fn is_tumor(self) -> bool {
        matches!(self, Archetype::TumorSolid | Archetype::TumorGlandular)
    }

    pub fn from_u8(v: u8) -> Option<Archetype> {
        Archetype::ALL.get(v as usize).copied()
    }
}

/// Embeddings of one model over the lattice; `slots[cell]` indexes into `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPlane {
    pub dim: usize,
    slots: Vec<u32>,
    data: Vec<f32>,
}

impl EmbeddingPlane {
    pub fn empty(dim: usize, cells: usize) -> Self {
        EmbeddingPlane { dim, slots: vec![NO_SLOT; cells], data: Vec::new() }
    }

    pub fn insert(&mut self, cell: usize, v: &[f32]) {
        debug_assert_eq!(v.len(), self.dim);
        if self.slots[cell] != NO_SLOT {
            let s = self.slots[cell] as usize;
            self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(v);
            return;
        }
        self.slots[cell] = (self.data.len() / self.dim.max(1)) as u32;
        self.data.extend_from_slice(v);
    }

    #[inline]
    pub fn get(&self, cell: usize) -> Option<&[f32]> {
        match self.slots.get(cell) {
            Some(&s) if s != NO_SLOT => {
                let s = s as usize;
                Some(&self.data[s * self.dim..(s + 1) * self.dim])
            }
            _ => None,
        }
    }

    pub fn has(&self, cell: usize) -> bool {
        self.slots.get(cell).is_some_and(|&s| s != NO_SLOT)
    }

    /// Cells holding an embedding, in lattice order.
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter(|(_, &s)| s != NO_SLOT).map(|(c, _)| c)
    }

    pub fn count(&self) -> usize {
        self.slots.iter().filter(|&&s| s != NO_SLOT).count()
    }

    /// Removes the embedding at `cell` (used to simulate missing model coverage).
    pub fn remove(&mut self, cell: usize) {
        self.slots[cell] = NO_SLOT;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideGrid {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    pub anchor_model: usize,
    pub tissue_valid: Vec<bool>,
    pub planes: Vec<EmbeddingPlane>,
    pub planted_labels: Option<Vec<Option<Archetype>>>,
    pub record: Option<SlideRecord>,
}

impl SlideGrid {
    #[inline]
    pub fn cell(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn col_row(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn is_tissue(&self, col: usize, row: usize) -> bool {
        col < self.width && row < self.height && self.tissue_valid[self.cell(col, row)]
    }

    pub fn tissue_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.tissue_valid.iter().enumerate().filter(|(_, &v)| v).map(|(c, _)| c)
    }

    pub fn tissue_count(&self) -> usize {
        self.tissue_valid.iter().filter(|&&v| v).count()
    }

    pub fn num_models(&self) -> usize {
        self.planes.len()
    }

    pub fn embedding(&self, model_id: usize, cell: usize) -> Option<&[f32]> {
        self.planes.get(model_id).and_then(|p| p.get(cell))
    }

    pub fn label(&self, cell: usize) -> Option<Archetype> {
        self.planted_labels.as_ref().and_then(|l| l[cell])
    }

    /// Planted tumor mask over the lattice (false everywhere when unlabeled).
    pub fn tumor_mask(&self) -> Vec<bool> {
        (0..self.num_cells()).map(|c| self.label(c).is_some_and(Archetype::is_tumor)).collect()
    }

    /// Checks the structural invariants of the grid.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if self.tissue_valid.len() != n {
            return Err(AstraError::Shape(format!("tissue map has {} cells, lattice {n}", self.tissue_valid.len())));
        }
        let anchor = self
            .planes
            .get(self.anchor_model)
            .ok_or_else(|| AstraError::invalid(format!("anchor model {} missing", self.anchor_model)))?;
        for c in 0..n {
            if self.tissue_valid[c] && !anchor.has(c) {
                return Err(AstraError::invalid(format!("tissue cell {c} lacks an anchor embedding")));
            }
        }
        if let Some(labels) = &self.planted_labels {
            if labels.len() != n {
                return Err(AstraError::Shape("label map size".into()));
            }
            for c in 0..n {
                if labels[c].is_some() != self.tissue_valid[c] {
                    return Err(AstraError::invalid(format!("planted label coverage differs from tissue at cell {c}")));
                }
            }
        }
        Ok(())
    }
}

/// One tile embedding as produced by a foundation model at its native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTile {
    pub model_id: usize,
    pub x_px: u32,
    pub y_px: u32,
    pub vector: Vec<f32>,
}

/// Axis-aligned block of cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellRect {
    pub col: usize,
    pub row: usize,
    pub width: usize,
    pub height: usize,
}

impl CellRect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Aligns raw tiles onto the shared lattice, average-pooling sub-stride tiles.
///
/// Tiles are assigned to the cell containing their top-left corner. A cell is
/// tissue-valid iff the anchor model contributed at least one tile there; other
/// models' embeddings are kept only on valid cells.
pub fn build_shared_grid(
    raw_tiles: &[RawTile],
    registry: &ModelRegistry,
    grid: &GridSpec,
    anchor_model: usize,
) -> Result<SlideGrid> {
    registry.validate(grid.stride_px)?;
    registry.get(anchor_model)?;
    for t in raw_tiles {
        let spec = registry.get(t.model_id)?;
        if t.vector.len() != spec.embed_dim {
            return Err(AstraError::DimensionMismatch {
                model_id: t.model_id,
                expected: spec.embed_dim,
                found: t.vector.len(),
            });
        }
    }
    let (mut width, mut height) = (0, 0);
    for t in raw_tiles {
        let (c, r) = grid.cell_of(t.x_px, t.y_px);
        width = width.max(c + 1);
        height = height.max(r + 1);
    }
    let cells = width * height;
    let m = registry.len();
    let mut sums: Vec<Vec<Option<(Vec<f64>, u32)>>> = (0..m).map(|_| vec![None; cells]).collect();
    for t in raw_tiles {
        let (c, r) = grid.cell_of(t.x_px, t.y_px);
        let slot = &mut sums[t.model_id][r * width + c];
        let (acc, n) = slot.get_or_insert_with(|| (vec![0.0; t.vector.len()], 0));
        for (a, &v) in acc.iter_mut().zip(&t.vector) {
            *a += v as f64;
        }
        *n += 1;
    }
    let tissue_valid: Vec<bool> = sums[anchor_model].iter().map(Option::is_some).collect();
    let mut planes = Vec::with_capacity(m);
    for (k, per_cell) in sums.iter().enumerate() {
        let mut plane = EmbeddingPlane::empty(registry.models[k].embed_dim, cells);
        for (cell, slot) in per_cell.iter().enumerate() {
            if let (Some((acc, n)), true) = (slot, tissue_valid[cell]) {
                let v: Vec<f32> = acc.iter().map(|&a| (a / *n as f64) as f32).collect();
                plane.insert(cell, &v);
            }
        }
        planes.push(plane);
    }
    Ok(SlideGrid {
        slide_id: String::new(),
        width,
        height,
        anchor_model,
        tissue_valid,
        planes,
        planted_labels: None,
        record: None,
    })
}

/// Fraction of tissue-valid cells inside `window`.
pub fn tissue_coverage(grid: &SlideGrid, window: CellRect) -> Result<f64> {
    if window.col + window.width > grid.width || window.row + window.height > grid.height {
        return Err(AstraError::invalid(format!(
            "window {window:?} exceeds lattice {}x{}",
            grid.width, grid.height
        )));
    }
    if window.area() == 0 {
        return Ok(0.0);
    }
    let mut valid = 0usize;
    for r in window.row..window.row + window.height {
        for c in window.col..window.col + window.width {
            valid += grid.tissue_valid[grid.cell(c, r)] as usize;
        }
    }
    Ok(valid as f64 / window.area() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(model_id: usize, x: u32, y: u32, v: Vec<f32>) -> RawTile {
        RawTile { model_id, x_px: x, y_px: y, vector: v }
    }

    fn small_registry() -> ModelRegistry {
        let spec = |i, px, d| ModelSpec { model_id: i, name: format!("m{i}"), native_tile_px: px, embed_dim: d };
        ModelRegistry { models: vec![spec(0, 256, 3), spec(1, 512, 2)] }
    }

    #[test]
    fn sub_stride_tiles_are_average_pooled() {
        let reg = small_registry();
        let tiles = vec![
            tile(1, 0, 0, vec![1.0, 1.0]),
            tile(0, 0, 0, vec![1.0, 2.0, 3.0]),
            tile(0, 256, 0, vec![3.0, 4.0, 5.0]),
        ];
        let g = build_shared_grid(&tiles, &reg, &GridSpec::default(), 1).unwrap();
        assert_eq!((g.width, g.height), (1, 1));
        assert_eq!(g.embedding(0, 0).unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn anchor_tile_lands_on_floor_divided_cell() {
        let reg = small_registry();
        let g = build_shared_grid(&[tile(1, 512, 1024, vec![0.5, 0.5])], &reg, &GridSpec::default(), 1).unwrap();
        assert_eq!((g.width, g.height), (2, 3));
        let valid: Vec<usize> = g.tissue_cells().collect();
        assert_eq!(valid, vec![g.cell(1, 2)]);
    }

    #[test]
    fn paper_registry_yields_four_parallel_vectors_per_cell() {
        let reg = ModelRegistry::default();
        let mut tiles = Vec::new();
        for (k, spec) in reg.models.iter().enumerate() {
            let px = spec.native_tile_px;
            let mut y = 0;
            while y < 1024 {
                let mut x = 0;
                while x < 1024 {
                    // 224-px tiles straddle cells; corner assignment keeps them on the lattice
                    if x / 512 < 2 && y / 512 < 2 {
                        tiles.push(tile(k, x, y, vec![k as f32 + 1.0; spec.embed_dim]));
                    }
                    x += px;
                }
                y += px;
            }
        }
        let g = build_shared_grid(&tiles, &reg, &GridSpec::default(), ModelRegistry::DEFAULT_ANCHOR).unwrap();
        assert_eq!((g.width, g.height), (2, 2));
        for cell in g.tissue_cells() {
            let dims: Vec<usize> = (0..4).map(|k| g.embedding(k, cell).unwrap().len()).collect();
            assert_eq!(dims, vec![1536, 1536, 768, 2560]);
        }
        assert_eq!(g.tissue_count(), 4);
    }

    #[test]
    fn dimension_mismatch_names_model() {
        let reg = small_registry();
        let err = build_shared_grid(&[tile(0, 0, 0, vec![1.0])], &reg, &GridSpec::default(), 1).unwrap_err();
        assert!(matches!(err, AstraError::DimensionMismatch { model_id: 0, expected: 3, found: 1 }));
    }

    #[test]
    fn empty_input_gives_empty_grid() {
        let g = build_shared_grid(&[], &small_registry(), &GridSpec::default(), 1).unwrap();
        assert_eq!((g.width, g.height), (0, 0));
        assert_eq!(g.tissue_count(), 0);
    }

    #[test]
    fn pooling_is_idempotent_on_aligned_tiles() {
        let reg = small_registry();
        let tiles = vec![
            tile(1, 0, 0, vec![0.1, 0.2]),
            tile(0, 0, 0, vec![0.3, 0.7, 0.9]),
            tile(0, 256, 256, vec![0.5, -0.1, 0.25]),
        ];
        let g = build_shared_grid(&tiles, &reg, &GridSpec::default(), 1).unwrap();
        let again: Vec<RawTile> = (0..2)
            .flat_map(|k| {
                let g = &g;
                g.planes[k].cells().map(move |c| {
                    let (col, row) = g.col_row(c);
                    tile(k, col as u32 * 512, row as u32 * 512, g.embedding(k, c).unwrap().to_vec())
                })
            })
            .collect();
        let g2 = build_shared_grid(&again, &reg, &GridSpec::default(), 1).unwrap();
        assert_eq!(g.planes, g2.planes);
    }

    fn grid_with_tissue(w: usize, h: usize, valid: &[(usize, usize)]) -> SlideGrid {
        let mut tissue = vec![false; w * h];
        for &(c, r) in valid {
            tissue[r * w + c] = true;
        }
        SlideGrid {
            slide_id: "t".into(),
            width: w,
            height: h,
            anchor_model: 0,
            tissue_valid: tissue,
            planes: vec![],
            planted_labels: None,
            record: None,
        }
    }

    #[test]
    fn coverage_counts_valid_cells() {
        let all: Vec<(usize, usize)> = (0..16).flat_map(|r| (0..16).map(move |c| (c, r))).collect();
        let rect = CellRect { col: 0, row: 0, width: 16, height: 16 };
        assert_eq!(tissue_coverage(&grid_with_tissue(16, 16, &all), rect).unwrap(), 1.0);
        assert_eq!(tissue_coverage(&grid_with_tissue(16, 16, &[]), rect).unwrap(), 0.0);
        let some: Vec<(usize, usize)> = all.iter().copied().take(141).collect();
        let cov = tissue_coverage(&grid_with_tissue(16, 16, &some), rect).unwrap();
        assert!((cov - 141.0 / 256.0).abs() < 1e-12);
        assert!(cov >= 0.55);
        let oob = CellRect { col: 1, row: 0, width: 16, height: 16 };
        assert!(tissue_coverage(&grid_with_tissue(16, 16, &all), oob).is_err());
    }

    #[test]
    fn coverage_is_monotone_in_added_tissue() {
        let rect = CellRect { col: 2, row: 2, width: 16, height: 16 };
        let mut cells = Vec::new();
        let mut last = 0.0;
        for i in 0..400usize {
            cells.push((i * 7 % 20, i * 13 % 20));
            let cov = tissue_coverage(&grid_with_tissue(20, 20, &cells), rect).unwrap();
            assert!(cov >= last);
            last = cov;
        }
    }
}
