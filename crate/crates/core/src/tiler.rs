//! Dynamic cropping: pick the predefined grid ratio closest to the input
//! aspect, resize onto that canvas, cut fixed-size tiles row-major, and
//! append a whole-image thumbnail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// The chosen grid, its pixel canvas, and the tile rectangles in row-major
/// order (`tile index = row * cols + col`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    /// (cols, rows)
    pub ratio: [u32; 2],
    /// (width, height) = (cols * tile_size, rows * tile_size)
    pub canvas: [u32; 2],
    pub tiles: Vec<TileRect>,
    #[serde(rename = "thumbnail")]
    pub include_thumbnail: bool,
}

impl CropPlan {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// (row, col) of a tile index under row-major ordering.
    pub fn grid_position(&self, index: usize) -> (u32, u32) {
        let cols = self.ratio[0];
        (index as u32 / cols, index as u32 % cols)
    }
}

/// The cut tiles (plan order) plus the thumbnail when the plan includes one.
#[derive(Debug, Clone)]
pub struct TileBatch {
    pub tiles: Vec<ImageTensor>,
    pub thumbnail: Option<ImageTensor>,
    pub plan: CropPlan,
}

impl TileBatch {
    /// Tiles followed by the thumbnail: the sub-image blocks every later
    /// stage sees, global image last.
    pub fn images(&self) -> impl Iterator<Item = &ImageTensor> {
        self.tiles.iter().chain(self.thumbnail.iter())
    }

    pub fn image_count(&self) -> usize {
        self.tiles.len() + usize::from(self.thumbnail.is_some())
    }
}

/// All integer grids (cols, rows) with `min_tiles <= cols*rows <= max_tiles`,
/// deduplicated and sorted by (tile count, cols).
pub fn candidate_ratios(min_tiles: usize, max_tiles: usize) -> Result<Vec<(u32, u32)>> {
    if min_tiles < 1 || min_tiles > max_tiles {
        return Err(Error::Config(format!(
            "invalid tile bounds {min_tiles}..={max_tiles}"
        )));
    }
    let mut out = Vec::new();
    for cols in 1..=max_tiles {
        for rows in 1..=max_tiles {
            let n = cols * rows;
            if n >= min_tiles && n <= max_tiles {
                out.push((cols as u32, rows as u32));
            }
        }
    }
    out.sort_by_key(|&(c, r)| (c * r, c));
    out.dedup();
    Ok(out)
}

/// Returns the candidate minimizing |W/H - cols/rows|, scanning in the
/// canonical candidate order. On an exact tie the later (larger) grid wins
/// only when the image area exceeds half that grid's canvas area.
pub fn match_ratio(image: &ImageTensor, candidates: &[(u32, u32)], tile_size: usize) -> (u32, u32) {
    let aspect = image.width() as f64 / image.height() as f64;
    let area = (image.width() * image.height()) as f64;
    let mut best = candidates[0];
    let mut best_diff = f64::INFINITY;
    for &(cols, rows) in candidates {
        let diff = (aspect - cols as f64 / rows as f64).abs();
        if diff < best_diff {
            best_diff = diff;
            best = (cols, rows);
        } else if diff == best_diff {
            let canvas_area =
                (cols as usize * tile_size) as f64 * (rows as usize * tile_size) as f64;
            if area > 0.5 * canvas_area {
                best = (cols, rows);
            }
        }
    }
    best
}

/// Resizes the image onto the matched grid canvas, cuts row-major
/// tile_size x tile_size tiles, and appends the whole-image thumbnail.
/// With a single tile the thumbnail is omitted (it would duplicate it).
pub fn crop(
    image: &ImageTensor,
    tile_size: usize,
    min_tiles: usize,
    max_tiles: usize,
) -> Result<TileBatch> {
    if tile_size == 0 || tile_size % 2 != 0 {
        return Err(Error::Config(format!(
            "tile size {tile_size} must be positive and even"
        )));
    }
    let candidates = candidate_ratios(min_tiles, max_tiles)?;
    let (cols, rows) = match_ratio(image, &candidates, tile_size);
    let canvas_w = cols as usize * tile_size;
    let canvas_h = rows as usize * tile_size;
    let canvas = image.resize_bilinear(canvas_h, canvas_w);

    let mut tiles = Vec::with_capacity((cols * rows) as usize);
    let mut rects = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows as usize {
        for col in 0..cols as usize {
            let x = col * tile_size;
            let y = row * tile_size;
            rects.push(TileRect {
                x: x as u32,
                y: y as u32,
                w: tile_size as u32,
                h: tile_size as u32,
            });
            tiles.push(canvas.crop_rect(x, y, tile_size, tile_size));
        }
    }
    let include_thumbnail = tiles.len() > 1;
    let thumbnail = include_thumbnail.then(|| image.resize_bilinear(tile_size, tile_size));

    Ok(TileBatch {
        tiles,
        thumbnail,
        plan: CropPlan {
            ratio: [cols, rows],
            canvas: [canvas_w as u32, canvas_h as u32],
            tiles: rects,
            include_thumbnail,
        },
    })
}

/// Stitches tiles back onto the canvas in row-major order (test oracle for
/// the exact-partition invariant).
pub fn reassemble(batch: &TileBatch) -> ImageTensor {
    let [w, h] = batch.plan.canvas;
    let cols = batch.plan.ratio[0] as usize;
    let s = batch.plan.tiles[0].w as usize;
    let mut data = vec![0.0f32; (w * h) as usize * crate::imaging::CHANNELS];
    for (i, tile) in batch.tiles.iter().enumerate() {
        let row = i / cols;
        let col = i % cols;
        for ty in 0..s {
            let dst_row = row * s + ty;
            let dst_start = (dst_row * w as usize + col * s) * crate::imaging::CHANNELS;
            let src_start = ty * s * crate::imaging::CHANNELS;
            data[dst_start..dst_start + s * crate::imaging::CHANNELS]
                .copy_from_slice(&tile.data()[src_start..src_start + s * crate::imaging::CHANNELS]);
        }
    }
    ImageTensor::new(h as usize, w as usize, data).expect("canvas dimensions are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x| {
            [
                y as f32 / h as f32,
                x as f32 / w as f32,
                ((x ^ y) % 16) as f32 / 16.0,
            ]
        })
        .unwrap()
    }

    #[test]
    fn single_candidate() {
        assert_eq!(candidate_ratios(1, 1).unwrap(), vec![(1, 1)]);
    }

    #[test]
    fn candidates_up_to_two() {
        assert_eq!(
            candidate_ratios(1, 2).unwrap(),
            vec![(1, 1), (1, 2), (2, 1)]
        );
    }

    #[test]
    fn candidates_up_to_eight() {
        let c = candidate_ratios(1, 8).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.contains(&(3, 2)));
        assert!(c.contains(&(2, 3)));
        assert!(!c.contains(&(3, 3)));
    }

    #[test]
    fn candidates_reject_bad_bounds() {
        assert!(candidate_ratios(0, 4).is_err());
        assert!(candidate_ratios(5, 4).is_err());
    }

    #[test]
    fn square_matches_unit_grid() {
        let img = gradient_image(448, 448);
        let c = candidate_ratios(1, 8).unwrap();
        assert_eq!(match_ratio(&img, &c, 448), (1, 1));
    }

    #[test]
    fn landscape_matches_three_by_two() {
        let img = gradient_image(600, 800);
        let c = candidate_ratios(1, 8).unwrap();
        assert_eq!(match_ratio(&img, &c, 448), (3, 2));
    }

    #[test]
    fn wide_strip_matches_four_by_one() {
        let img = gradient_image(448, 2000);
        let c = candidate_ratios(1, 8).unwrap();
        assert_eq!(match_ratio(&img, &c, 448), (4, 1));
    }

    #[test]
    fn tie_prefers_more_tiles_only_for_large_images() {
        let c = candidate_ratios(1, 8).unwrap();
        // 448x448 ties (1,1) against (2,2); area below half the 896x896 canvas.
        assert_eq!(match_ratio(&gradient_image(448, 448), &c, 448), (1, 1));
        // 896x896 has the same tie but enough area to take the finer grid.
        assert_eq!(match_ratio(&gradient_image(896, 896), &c, 448), (2, 2));
    }

    #[test]
    fn crop_square_yields_single_tile_without_thumbnail() {
        let img = gradient_image(448, 448);
        let batch = crop(&img, 448, 1, 8).unwrap();
        assert_eq!(batch.plan.ratio, [1, 1]);
        assert_eq!(batch.tiles.len(), 1);
        assert!(batch.thumbnail.is_none());
        assert!(!batch.plan.include_thumbnail);
        assert_eq!(batch.image_count(), 1);
    }

    #[test]
    fn crop_landscape_yields_six_tiles_plus_thumbnail() {
        let img = gradient_image(600, 800);
        let batch = crop(&img, 448, 1, 8).unwrap();
        assert_eq!(batch.plan.ratio, [3, 2]);
        assert_eq!(batch.plan.canvas, [1344, 896]);
        assert_eq!(batch.tiles.len(), 6);
        assert!(batch.thumbnail.is_some());
        assert_eq!(batch.image_count(), 7);
    }

    #[test]
    fn constant_image_tiles_are_identical() {
        let img = ImageTensor::constant(448, 896, [0.25, 0.5, 0.75]).unwrap();
        let batch = crop(&img, 448, 1, 8).unwrap();
        assert_eq!(batch.plan.ratio, [2, 1]);
        assert_eq!(batch.tiles.len(), 2);
        assert_eq!(batch.tiles[0], batch.tiles[1]);
        // each tile equals the corresponding resized half (constant color)
        let half = ImageTensor::constant(448, 448, [0.25, 0.5, 0.75]).unwrap();
        assert_eq!(batch.tiles[0], half);
    }

    #[test]
    fn reassembly_is_bitwise_exact() {
        let img = gradient_image(731, 977);
        let batch = crop(&img, 64, 1, 8).unwrap();
        let canvas =
            img.resize_bilinear(batch.plan.canvas[1] as usize, batch.plan.canvas[0] as usize);
        assert_eq!(reassemble(&batch), canvas);
    }

    #[test]
    fn crop_rejects_odd_tile_size() {
        let img = gradient_image(64, 64);
        assert!(crop(&img, 63, 1, 8).is_err());
    }

    #[test]
    fn plan_serializes_with_expected_keys() {
        let img = gradient_image(600, 800);
        let batch = crop(&img, 448, 1, 8).unwrap();
        let json = serde_json::to_string(&batch.plan).unwrap();
        for key in [
            "\"ratio\"",
            "\"canvas\"",
            "\"tiles\"",
            "\"thumbnail\"",
            "\"x\"",
            "\"y\"",
            "\"w\"",
            "\"h\"",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }
}
