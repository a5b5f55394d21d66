//! Weight heatmap: the resized canvas with one translucent red overlay per
//! tile, opacity scaled affinely from min(w) -> 0.1 to max(w) -> 0.7.

use gswa_core::imaging::ImageTensor;
use gswa_core::tiler::{reassemble, TileBatch};
use gswa_core::WeightVector;

const ALPHA_MIN: f32 = 0.1;
const ALPHA_MAX: f32 = 0.7;
const OVERLAY_RGB: [f32; 3] = [1.0, 0.0, 0.0];

/// Per-tile opacities; a flat weight vector maps to the mid opacity.
pub fn tile_opacities(weights: &WeightVector, tiles: usize) -> Vec<f32> {
    let w = &weights.values()[..tiles];
    let min = w.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = w.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if (max - min) < 1e-12 {
        return vec![(ALPHA_MIN + ALPHA_MAX) / 2.0; tiles];
    }
    w.iter()
        .map(|&v| ALPHA_MIN + (v - min) / (max - min) * (ALPHA_MAX - ALPHA_MIN))
        .collect()
}

/// Renders the canvas-size heatmap (dimensions equal the resized canvas).
pub fn render(batch: &TileBatch, weights: &WeightVector) -> ImageTensor {
    let canvas = reassemble(batch);
    let alphas = tile_opacities(weights, batch.tiles.len());
    let mut data = canvas.data().to_vec();
    let width = canvas.width();
    for (rect, &alpha) in batch.plan.tiles.iter().zip(&alphas) {
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                let i = (y as usize * width + x as usize) * 3;
                for c in 0..3 {
                    data[i + c] = (1.0 - alpha) * data[i + c] + alpha * OVERLAY_RGB[c];
                }
            }
        }
    }
    ImageTensor::new(canvas.height(), canvas.width(), data).expect("blend keeps values in [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_weights_use_mid_opacity() {
        let w = WeightVector::new(vec![0.25, 0.25, 0.25, 0.25]);
        let a = tile_opacities(&w, 3);
        assert_eq!(a, vec![0.4, 0.4, 0.4]);
    }

    #[test]
    fn opacity_endpoints_hit_bounds() {
        let w = WeightVector::new(vec![0.1, 0.5, 0.4]);
        let a = tile_opacities(&w, 2);
        assert_eq!(a[0], 0.1);
        assert_eq!(a[1], 0.7);
    }

    #[test]
    fn heatmap_matches_canvas_dimensions() {
        let img = ImageTensor::constant(60, 80, [0.2, 0.2, 0.2]).unwrap();
        let batch = gswa_core::tiler::crop(&img, 16, 1, 8).unwrap();
        let w = WeightVector::new(vec![1.0 / 7.0; 7]);
        let map = render(&batch, &w);
        assert_eq!(map.width() as u32, batch.plan.canvas[0]);
        assert_eq!(map.height() as u32, batch.plan.canvas[1]);
    }
}
