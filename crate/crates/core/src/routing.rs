//! Expert partition maps and per-expert exemplar tiles from the final MoE block.

use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::SlideGrid;
use crate::model::{contextualize_slide, Network};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMap {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    pub num_experts: usize,
    /// Tissue cells in ascending order; the vectors below are parallel to it.
    pub cells: Vec<usize>,
    pub raw: Vec<usize>,
    pub smoothed: Vec<usize>,
    /// Router probability of the top-1 expert.
    pub prob: Vec<f64>,
    /// Top-1 probability minus the runner-up's.
    pub margin: Vec<f64>,
}

/// Top-1 index (ties to the lowest) and its margin over the runner-up.
pub fn top1_margin(probs: &[f64]) -> (usize, f64) {
    let best = crate::eval::argmax(probs);
    let runner = probs.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, &p)| p).fold(f64::NEG_INFINITY, f64::max);
    let margin = if runner.is_finite() { probs[best] - runner } else { probs[best] };
    (best, margin)
}

/// 3x3 majority vote over tissue neighbours (the centre included). When the
/// top count is shared by several experts the centre keeps its raw id.
pub fn smooth_majority(width: usize, height: usize, raw: &[Option<usize>], num_experts: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; raw.len()];
    let mut counts = vec![0usize; num_experts];
    for r in 0..height {
        for c in 0..width {
            let Some(centre) = raw[r * width + c] else { continue };
            counts.iter_mut().for_each(|x| *x = 0);
            for nr in r.saturating_sub(1)..=(r + 1).min(height - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(width - 1) {
                    if let Some(e) = raw[nr * width + nc] {
                        counts[e] += 1;
                    }
                }
            }
            let top = *counts.iter().max().expect("at least one expert");
            let winners: Vec<usize> = (0..num_experts).filter(|&e| counts[e] == top).collect();
            out[r * width + c] = Some(if winners.len() == 1 { winners[0] } else { centre });
        }
    }
    out
}

/// Final-block routing over every tissue cell, raw and smoothed.
pub fn expert_map<T: Real>(grid: &SlideGrid, net: &Network, store: &ParamStore<T>, input_model: usize) -> Result<ExpertMap> {
    let ctx = contextualize_slide(net, store, grid, input_model)?;
    let e = ctx.final_probs.cols();
    if e == 0 || ctx.final_probs.rows() != ctx.cells.len() {
        return Err(AstraError::Missing("routing records from the final MoE block".into()));
    }
    let mut per_cell: Vec<Option<(usize, f64, f64)>> = vec![None; grid.num_cells()];
    for (row, &cell) in ctx.cells.iter().enumerate() {
        let probs: Vec<f64> = ctx.final_probs.row(row).iter().map(|p| p.f64()).collect();
        let (top, margin) = top1_margin(&probs);
        per_cell[cell] = Some((top, probs[top], margin));
    }
    let raw_grid: Vec<Option<usize>> = per_cell.iter().map(|x| x.map(|t| t.0)).collect();
    let smooth_grid = smooth_majority(grid.width, grid.height, &raw_grid, e);
    let cells: Vec<usize> = (0..grid.num_cells()).filter(|&c| per_cell[c].is_some()).collect();
    Ok(ExpertMap {
        slide_id: grid.slide_id.clone(),
        width: grid.width,
        height: grid.height,
        num_experts: e,
        raw: cells.iter().map(|&c| per_cell[c].unwrap().0).collect(),
        smoothed: cells.iter().map(|&c| smooth_grid[c].unwrap()).collect(),
        prob: cells.iter().map(|&c| per_cell[c].unwrap().1).collect(),
        margin: cells.iter().map(|&c| per_cell[c].unwrap().2).collect(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub slide_id: String,
    pub cell: usize,
    pub col: usize,
    pub row: usize,
    pub prob: f64,
    pub margin: f64,
}

/// Per expert, up to `m` cells routed to it with the highest top-1
/// probability among those whose margin exceeds `margin_floor`. Equal
/// probabilities keep map order, then cell order.
pub fn top_tiles_per_expert(maps: &[ExpertMap], m: usize, margin_floor: f64) -> Vec<Vec<Exemplar>> {
    let e = maps.iter().map(|x| x.num_experts).max().unwrap_or(0);
    let mut out: Vec<Vec<Exemplar>> = vec![Vec::new(); e];
    for map in maps {
        for (i, &cell) in map.cells.iter().enumerate() {
            if map.margin[i] > margin_floor {
                out[map.raw[i]].push(Exemplar {
                    slide_id: map.slide_id.clone(),
                    cell,
                    col: cell % map.width,
                    row: cell / map.width,
                    prob: map.prob[i],
                    margin: map.margin[i],
                });
            }
        }
    }
    for list in &mut out {
        list.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        list.truncate(m);
    }
    out
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AstraError::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |x| x + 1);
    let kb = b.iter().max().map_or(0, |x| x + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |k: u64| (k * k.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margins() {
        assert_eq!(top1_margin(&[0.9, 0.1, 0.0, 0.0]).0, 0);
        assert!((top1_margin(&[0.9, 0.1, 0.0, 0.0]).1 - 0.8).abs() < 1e-12);
        assert_eq!(top1_margin(&[0.5, 0.5, 0.0, 0.0]), (0, 0.0));
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let raw = vec![Some(2); 25];
        let s = smooth_majority(5, 5, &raw, 4);
        assert_eq!(s, raw);
        assert_eq!(smooth_majority(5, 5, &s, 4), s);
    }

    fn vote_oracle(w: usize, h: usize, raw: &[Option<usize>], e: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; raw.len()];
        for i in 0..raw.len() {
            let Some(centre) = raw[i] else { continue };
            let (c, r) = ((i % w) as i64, (i / w) as i64);
            let mut votes = vec![0; e];
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    let (nc, nr) = (c + dc, r + dr);
                    if nc >= 0 && nr >= 0 && (nc as usize) < w && (nr as usize) < h {
                        if let Some(x) = raw[nr as usize * w + nc as usize] {
                            votes[x] += 1;
                        }
                    }
                }
            }
            let best = *votes.iter().max().unwrap();
            let n_best = votes.iter().filter(|&&v| v == best).count();
            out[i] = Some(if n_best > 1 { centre } else { votes.iter().position(|&v| v == best).unwrap() });
        }
        out
    }

    #[test]
    fn checkerboard_matches_vote_oracle() {
        let (w, h) = (7, 6);
        let raw: Vec<Option<usize>> = (0..w * h).map(|i| Some(((i % w) + (i / w)) % 2)).collect();
        let s = smooth_majority(w, h, &raw, 2);
        assert_eq!(s, vote_oracle(w, h, &raw, 2));
        // interior cells see 5 of their own parity out of 9 and keep it
        assert_eq!(s[w + 1], raw[w + 1]);
        let mut iso = vec![Some(0); 25];
        iso[12] = Some(3);
        iso[3] = None;
        let s = smooth_majority(5, 5, &iso, 4);
        assert_eq!(s[12], Some(0));
        assert_eq!(s[3], None);
        assert_eq!(s, vote_oracle(5, 5, &iso, 4));
    }

    #[test]
    fn random_maps_match_vote_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let raw: Vec<Option<usize>> =
                (0..80).map(|_| if rng.random::<f64>() < 0.2 { None } else { Some(rng.random_range(0..4)) }).collect();
            assert_eq!(smooth_majority(10, 8, &raw, 4), vote_oracle(10, 8, &raw, 4));
        }
    }

    fn map(id: &str, raw: Vec<usize>, prob: Vec<f64>, margin: Vec<f64>) -> ExpertMap {
        let n = raw.len();
        ExpertMap {
            slide_id: id.into(),
            width: 4,
            height: n.div_ceil(4),
            num_experts: 3,
            cells: (0..n).collect(),
            smoothed: raw.clone(),
            raw,
            prob,
            margin,
        }
    }

    #[test]
    fn exemplars_match_full_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<ExpertMap> = (0..5)
            .map(|k| {
                let raw = (0..16).map(|_| rng.random_range(0..3)).collect();
                let prob: Vec<f64> = (0..16).map(|_| rng.random_range(0.34..1.0)).collect();
                let margin = prob.iter().map(|p| p * rng.random::<f64>()).collect();
                map(&format!("s{k}"), raw, prob, margin)
            })
            .collect();
        let got = top_tiles_per_expert(&maps, 4, 0.2);
        for e in 0..3 {
            let mut all: Vec<(f64, String, usize)> = Vec::new();
            for m in &maps {
                for i in 0..16 {
                    if m.raw[i] == e && m.margin[i] > 0.2 {
                        all.push((m.prob[i], m.slide_id.clone(), i));
                    }
                }
            }
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            all.truncate(4);
            let want: Vec<(f64, String, usize)> = all;
            let have: Vec<(f64, String, usize)> = got[e].iter().map(|x| (x.prob, x.slide_id.clone(), x.cell)).collect();
            assert_eq!(have, want);
            assert!(got[e].iter().all(|x| x.margin >= 0.2));
        }
    }

    #[test]
    fn low_margin_cells_excluded() {
        let m = map("s", vec![0, 1], vec![0.9, 0.5], vec![0.8, 0.0]);
        let got = top_tiles_per_expert(&[m], 8, 0.2);
        assert_eq!(got[0].len(), 1);
        assert!(got[1].is_empty());
        assert!(got[2].is_empty());
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 0.5714285714285715).abs() < 1e-12);
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }
}
