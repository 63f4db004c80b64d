use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use super::{TrainError, TrainedModel};
use crate::dataio::Dataset;
use crate::roi_context::{build_context_set, extract, CropWindow, Image};
use crate::scalar::Scalar;

/// Side of exported heatmaps and overlays.
pub const HEATMAP_SIDE: usize = 256;

/// Head-averaged attention (`heads × grid²`) as a `side × side` gray image:
/// bilinear upsampling of the patch grid, then min-max normalization to
/// `[0, 1]`. A constant map becomes a flat 0.5.
pub fn attention_heatmap<T: Scalar>(weights: &Array2<T>, grid: usize, side: usize) -> Image<f64> {
    assert_eq!(weights.ncols(), grid * grid, "attention width must equal the patch count");
    let mean = weights.mapv(|v| v.to_f64_lossy()).mean_axis(Axis(0)).expect("at least one head");
    let cells = Image::<f64>::from_fn(grid, grid, |x, y, _| mean[y * grid + x]);
    let g = grid as f64;
    let up = extract(&cells, &CropWindow { cx: g / 2.0, cy: g / 2.0, side: g }, side).expect("window inside grid");
    let vals: Vec<f64> = up.data().iter().step_by(3).copied().collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    Image::from_fn(side, side, |x, y, _| if span > 1e-12 { (vals[y * side + x] - lo) / span } else { 0.5 })
}

/// 50% blend of a gray heatmap over a color crop of the same size.
pub fn overlay(crop: &Image<f64>, heat: &Image<f64>) -> Image<f64> {
    assert_eq!((crop.width(), crop.height()), (heat.width(), heat.height()));
    let data = crop.data().iter().zip(heat.data()).map(|(c, h)| 0.5 * c + 0.5 * h).collect();
    Image::new(crop.width(), crop.height(), data)
}

/// Writes `{id}_{c3|c5|full}_attn.png` for every context scale of every id.
pub fn export_attention<T: Scalar>(tm: &TrainedModel<T>, ds: &Dataset, ids: &[i64], out_dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    tm.check_dataset(ds)?;
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let grid = tm.model.config().encoder.grid();
    let mut written = Vec::new();
    for &id in ids {
        let ann = ds.annotation(id).ok_or(TrainError::UnknownId(id))?;
        let pred = tm.model.forward(&tm.inputs(ds, ann)?)?;
        let img = ds.load_image::<f64>(ann.image_id)?;
        let crops = build_context_set(&img, &ann.bbox, &tm.model.config().scales, HEATMAP_SIDE).map_err(|source| TrainError::Crop { id, source })?;
        for ((scale, weights), (_, crop)) in pred.attention.maps.iter().zip(&crops.contexts) {
            let heat = attention_heatmap(weights, grid, HEATMAP_SIDE);
            let path = out_dir.join(format!("{id}_{}_attn.png", scale.tag()));
            overlay(crop, &heat).save_png(&path).map_err(|e| TrainError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_give_flat_mid_gray() {
        let w = Array2::<f64>::from_elem((4, 16), 1.0 / 16.0);
        let h = attention_heatmap(&w, 4, 32);
        assert!(h.data().iter().all(|&v| v == 0.5));
        let crop = Image::filled(32, 32, [0.2, 0.4, 0.6]);
        let o = overlay(&crop, &h);
        assert!((o.get(5, 7, 0) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn one_hot_patch_lights_its_cell() {
        let grid = 4;
        let side = 64;
        let cell = side / grid;
        let mut w = Array2::<f64>::zeros((2, grid * grid));
        let (px, py) = (2, 1);
        w.column_mut(py * grid + px).fill(1.0);
        let h = attention_heatmap(&w, grid, side);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for y in 0..side {
            for x in 0..side {
                let v = h.get(x, y, 0);
                if v > best {
                    best = v;
                    at = (x, y);
                }
                let far = (x / cell).abs_diff(px) > 1 || (y / cell).abs_diff(py) > 1;
                if far {
                    assert_eq!(v, 0.0, "pixel ({x}, {y}) outside the neighborhood");
                }
            }
        }
        assert_eq!(best, 1.0);
        assert_eq!((at.0 / cell, at.1 / cell), (px, py));
    }
}
