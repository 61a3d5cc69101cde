//! Tissue-gated crop windows, asymmetric masking and input-model selection.

use rand::seq::index;
use rand::Rng;

use crate::error::{AstraError, Result};
use crate::grid::{tissue_coverage, CellRect, SlideGrid};

pub const WINDOW: usize = 16;
pub const WINDOW_CELLS: usize = WINDOW * WINDOW;
pub const VISIBLE: usize = 64;
pub const MASKED: usize = WINDOW_CELLS - VISIBLE;
pub const COVERAGE_GATE: f64 = 0.55;
pub const DEFAULT_MAX_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CropWindow {
    pub slide_id: String,
    /// (col, row) of the top-left cell.
    pub origin: (usize, usize),
    /// Local indices `row * 16 + col` of tissue cells, ascending.
    pub valid_positions: Vec<usize>,
    pub coverage: f64,
    /// True when no draw passed the gate and the best window was kept.
    pub fallback: bool,
    pub draws: usize,
}

impl CropWindow {
    pub fn rect(&self) -> CellRect {
        CellRect { col: self.origin.0, row: self.origin.1, width: WINDOW, height: WINDOW }
    }

    /// Grid cell index of a local window position.
    pub fn cell(&self, grid: &SlideGrid, local: usize) -> usize {
        grid.cell(self.origin.0 + local % WINDOW, self.origin.1 + local / WINDOW)
    }
}

/// Local (col, row) of a window position.
pub fn local_xy(local: usize) -> (usize, usize) {
    (local % WINDOW, local / WINDOW)
}

fn window_at(grid: &SlideGrid, col: usize, row: usize) -> Result<CropWindow> {
    let rect = CellRect { col, row, width: WINDOW, height: WINDOW };
    let coverage = tissue_coverage(grid, rect)?;
    let valid_positions =
        (0..WINDOW_CELLS).filter(|&p| grid.is_tissue(col + p % WINDOW, row + p / WINDOW)).collect();
    Ok(CropWindow { slide_id: grid.slide_id.clone(), origin: (col, row), valid_positions, coverage, fallback: false, draws: 0 })
}

/// Draws uniform window origins until one reaches the coverage gate; after
/// `max_tries` failures returns the best window seen (earliest on ties).
pub fn sample_window(grid: &SlideGrid, rng: &mut impl Rng, max_tries: usize) -> Result<CropWindow> {
    if grid.width < WINDOW || grid.height < WINDOW {
        return Err(AstraError::invalid(format!(
            "slide {} is {}x{} cells, smaller than a {WINDOW}x{WINDOW} window",
            grid.slide_id, grid.width, grid.height
        )));
    }
    if max_tries == 0 {
        return Err(AstraError::invalid("max_tries must be at least 1"));
    }
    let mut best: Option<CropWindow> = None;
    for draw in 1..=max_tries {
        let col = rng.random_range(0..=grid.width - WINDOW);
        let row = rng.random_range(0..=grid.height - WINDOW);
        let mut w = window_at(grid, col, row)?;
        w.draws = draw;
        if w.coverage >= COVERAGE_GATE {
            return Ok(w);
        }
        if best.as_ref().is_none_or(|b| w.coverage > b.coverage) {
            best = Some(w);
        }
    }
    let mut w = best.expect("at least one draw");
    w.fallback = true;
    w.draws = max_tries;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    /// Ascending local indices revealed to the encoder.
    pub visible: Vec<usize>,
    /// Ascending local indices to reconstruct.
    pub masked: Vec<usize>,
    /// Per visible entry: true when the position is background filler.
    pub filler: Vec<bool>,
}

/// Reveals 64 positions, drawn from tissue first, and masks the other 192.
pub fn apply_mask(window: &CropWindow, rng: &mut impl Rng) -> Result<MaskDraw> {
    let valid = &window.valid_positions;
    if valid.is_empty() {
        return Err(AstraError::invalid(format!("window at {:?} has no tissue", window.origin)));
    }
    let mut is_valid = [false; WINDOW_CELLS];
    valid.iter().for_each(|&p| is_valid[p] = true);
    let mut visible: Vec<usize> = if valid.len() >= VISIBLE {
        index::sample(rng, valid.len(), VISIBLE).into_iter().map(|i| valid[i]).collect()
    } else {
        let invalid: Vec<usize> = (0..WINDOW_CELLS).filter(|&p| !is_valid[p]).collect();
        let extra = index::sample(rng, invalid.len(), VISIBLE - valid.len()).into_iter().map(|i| invalid[i]);
        valid.iter().copied().chain(extra).collect()
    };
    visible.sort_unstable();
    let mut shown = [false; WINDOW_CELLS];
    visible.iter().for_each(|&p| shown[p] = true);
    let masked = (0..WINDOW_CELLS).filter(|&p| !shown[p]).collect();
    let filler = visible.iter().map(|&p| !is_valid[p]).collect();
    Ok(MaskDraw { visible, masked, filler })
}

/// Uniform model id in `[0, m)`.
pub fn select_input_model(rng: &mut impl Rng, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(AstraError::invalid("no models registered"));
    }
    Ok(rng.random_range(0..m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelTargets {
    pub model_id: usize,
    pub dim: usize,
    /// Masked local positions holding an embedding for this model (M_k).
    pub positions: Vec<usize>,
    /// Row-major `positions.len() x dim`.
    pub vectors: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropBatch {
    pub window: CropWindow,
    pub input_model: usize,
    pub input_dim: usize,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    /// Per visible entry: no embedding under the input model, zero-filled.
    pub filler: Vec<bool>,
    /// Row-major `64 x input_dim`.
    pub visible_embeddings: Vec<f32>,
    pub targets: Vec<ModelTargets>,
}

impl CropBatch {
    pub fn target(&self, model_id: usize) -> &ModelTargets {
        &self.targets[model_id]
    }
}

/// Composes window sampling, model selection and masking, then gathers the
/// visible inputs and every model's masked targets.
pub fn make_crop_batch(grid: &SlideGrid, rng: &mut impl Rng, max_tries: usize) -> Result<CropBatch> {
    let window = sample_window(grid, rng, max_tries)?;
    let input_model = select_input_model(rng, grid.num_models())?;
    let mask = apply_mask(&window, rng)?;
    let input_dim = grid.planes[input_model].dim;
    let mut visible_embeddings = vec![0.0f32; VISIBLE * input_dim];
    let mut filler = mask.filler.clone();
    for (slot, &p) in mask.visible.iter().enumerate() {
        match grid.embedding(input_model, window.cell(grid, p)) {
            Some(v) if !filler[slot] => visible_embeddings[slot * input_dim..(slot + 1) * input_dim].copy_from_slice(v),
            _ => filler[slot] = true,
        }
    }
    let targets = (0..grid.num_models())
        .map(|k| {
            let dim = grid.planes[k].dim;
            let mut positions = Vec::with_capacity(mask.masked.len());
            let mut vectors = Vec::with_capacity(mask.masked.len() * dim);
            for &p in &mask.masked {
                if let Some(v) = grid.embedding(k, window.cell(grid, p)) {
                    positions.push(p);
                    vectors.extend_from_slice(v);
                }
            }
            ModelTargets { model_id: k, dim, positions, vectors }
        })
        .collect();
    Ok(CropBatch {
        window,
        input_model,
        input_dim,
        visible_idx: mask.visible,
        masked_idx: mask.masked,
        filler,
        visible_embeddings,
        targets,
    })
}
