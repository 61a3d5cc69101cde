//! Binary PPM (P6) rendering of localization heatmaps and expert maps, plus
//! the tab-separated sidecar tables that accompany them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{AstraError, Result};
use crate::eval::LocalizationResult;
use crate::grid::{Archetype, SlideGrid};
use crate::routing::{ExpertMap, Exemplar};

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [255, 255, 255];
pub const TISSUE: Rgb = [200, 200, 200];
pub const MASK: Rgb = [40, 40, 40];
pub const CONTOUR: Rgb = [0, 200, 0];
pub const SEPARATOR: Rgb = [255, 255, 255];

/// Indexed expert colours; experts beyond the palette wrap around.
pub const EXPERT_PALETTE: [Rgb; 4] = [[228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163]];

pub const ARCHETYPE_PALETTE: [Rgb; 6] =
    [[165, 0, 38], [244, 109, 67], [116, 173, 209], [253, 224, 144], [49, 54, 149], [120, 120, 120]];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Image { width, height, pixels: fill.repeat(width * height) }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Blue (s = -1) through white (s = 0) to red (s = 1); clamps outside [-1, 1].
pub fn similarity_color(s: f64) -> Rgb {
    let s = if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) };
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if s < 0.0 {
        let v = fade(-s);
        [v, v, 255]
    } else {
        let v = fade(s);
        [255, v, v]
    }
}

pub fn expert_color(e: usize) -> Rgb {
    EXPERT_PALETTE[e % EXPERT_PALETTE.len()]
}

/// Draws `scale`-pixel cells for a `w x h` lattice at horizontal offset `x0`.
fn paint_cells(img: &mut Image, x0: usize, w: usize, h: usize, scale: usize, color: impl Fn(usize) -> Option<Rgb>) {
    for row in 0..h {
        for col in 0..w {
            if let Some(c) = color(row * w + col) {
                img.fill_rect(x0 + col * scale, row * scale, scale, scale, c);
            }
        }
    }
}

/// Outlines the region `inside` with one-pixel edges wherever a cell borders
/// a cell outside the region or the lattice edge.
fn paint_contour(img: &mut Image, x0: usize, w: usize, h: usize, scale: usize, inside: &[bool]) {
    let at = |col: isize, row: isize| {
        col >= 0 && row >= 0 && (col as usize) < w && (row as usize) < h && inside[row as usize * w + col as usize]
    };
    for row in 0..h {
        for col in 0..w {
            if !inside[row * w + col] {
                continue;
            }
            let (c, r) = (col as isize, row as isize);
            let (px, py) = (x0 + col * scale, row * scale);
            if !at(c, r - 1) {
                img.fill_rect(px, py, scale, 1, CONTOUR);
            }
            if !at(c, r + 1) {
                img.fill_rect(px, py + scale - 1, scale, 1, CONTOUR);
            }
            if !at(c - 1, r) {
                img.fill_rect(px, py, 1, scale, CONTOUR);
            }
            if !at(c + 1, r) {
                img.fill_rect(px + scale - 1, py, 1, scale, CONTOUR);
            }
        }
    }
}

/// Three panels side by side: planted regions with the reference contour,
/// the similarity heatmap, and the thresholded mask with the reference contour.
pub fn localization_figure(grid: &SlideGrid, result: &LocalizationResult, scale: usize) -> Result<Image> {
    let (w, h) = (grid.width, grid.height);
    if scale == 0 || result.mask.len() != w * h || result.cells.len() != result.similarity.len() {
        return Err(AstraError::Shape(format!("localization result does not fit a {w}x{h} lattice at scale {scale}")));
    }
    let gap = scale.max(2);
    let panel = w * scale;
    let mut img = Image::new(3 * panel + 2 * gap, h * scale, SEPARATOR);
    let reference = grid.tumor_mask();
    let mut sim = vec![None; w * h];
    for (&c, &s) in result.cells.iter().zip(&result.similarity) {
        sim[c] = Some(s);
    }
    let bg = |c: usize| if grid.tissue_valid[c] { None } else { Some(BACKGROUND) };
    paint_cells(&mut img, 0, w, h, scale, |c| {
        bg(c).or_else(|| Some(grid.label(c).map_or(TISSUE, |a| ARCHETYPE_PALETTE[a as usize])))
    });
    paint_contour(&mut img, 0, w, h, scale, &reference);
    let x1 = panel + gap;
    paint_cells(&mut img, x1, w, h, scale, |c| bg(c).or_else(|| Some(sim[c].map_or(TISSUE, similarity_color))));
    let x2 = 2 * (panel + gap);
    paint_cells(&mut img, x2, w, h, scale, |c| bg(c).or(Some(if result.mask[c] { MASK } else { TISSUE })));
    paint_contour(&mut img, x2, w, h, scale, &reference);
    Ok(img)
}

/// Smoothed expert map over the lattice with a legend strip underneath:
/// one swatch per expert, left to right in expert order.
pub fn expert_map_image(map: &ExpertMap, scale: usize) -> Result<Image> {
    let (w, h) = (map.width, map.height);
    if scale == 0 || map.cells.len() != map.smoothed.len() || map.cells.iter().any(|&c| c >= w * h) {
        return Err(AstraError::Shape(format!("expert map does not fit a {w}x{h} lattice at scale {scale}")));
    }
    let swatch = 3 * scale.max(2);
    let legend_w = map.num_experts * (swatch + scale.max(2));
    let width = (w * scale).max(legend_w);
    let mut img = Image::new(width, h * scale + scale.max(2) + swatch, BACKGROUND);
    let mut ids = vec![None; w * h];
    for (&c, &e) in map.cells.iter().zip(&map.smoothed) {
        ids[c] = Some(e);
    }
    paint_cells(&mut img, 0, w, h, scale, |c| ids[c].map(expert_color));
    let y = h * scale + scale.max(2);
    for e in 0..map.num_experts {
        img.fill_rect(e * (swatch + scale.max(2)), y, swatch, swatch, expert_color(e));
    }
    Ok(img)
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// `expert<TAB>color` rows matching the legend swatches.
pub fn legend_table(num_experts: usize) -> String {
    let mut s = String::from("expert\tcolor\n");
    for e in 0..num_experts {
        let _ = writeln!(s, "{e}\t{}", hex(expert_color(e)));
    }
    s
}

/// One row per exemplar tile, grouped by expert and ranked by probability.
pub fn exemplar_table(per_expert: &[Vec<Exemplar>]) -> String {
    let mut s = String::from("expert\trank\tslide_id\tcell\tcol\trow\tprob\tmargin\n");
    for (e, list) in per_expert.iter().enumerate() {
        for (rank, x) in list.iter().enumerate() {
            let _ = writeln!(s, "{e}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}", rank + 1, x.slide_id, x.cell, x.col, x.row, x.prob, x.margin);
        }
    }
    s
}

/// Archetype colour key for the first heatmap panel.
pub fn archetype_legend() -> String {
    let mut s = String::from("archetype\tcolor\n");
    for a in Archetype::ALL {
        let _ = writeln!(s, "{a:?}\t{}", hex(ARCHETYPE_PALETTE[a as usize]));
    }
    s
}
