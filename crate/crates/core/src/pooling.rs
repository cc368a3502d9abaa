//! Feature-map resizing to the probe grid and average pooling.

use crate::error::{Error, Result};

/// Probe grid side length.
pub const PROBE_GRID: usize = 7;

/// Channel-major (`C x H x W`, C-order) feature map as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

/// Double-precision `C x H x W` map; the pooling input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Source coordinate and blend weight for output index `i` under the
/// half-pixel (align-corners = false) convention.
fn source_index(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let t = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, t)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize to `out_h x out_w`, half-pixel centers, edge-clamped.
pub fn resize(fm: &FeatureMap, out_h: usize, out_w: usize) -> FeatureGrid {
    let src = fm.to_grid();
    if fm.height == out_h && fm.width == out_w {
        return src;
    }
    let rows: Vec<_> = (0..out_h).map(|y| source_index(y, fm.height, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_index(x, fm.width, out_w)).collect();
    let mut data = Vec::with_capacity(fm.channels * out_h * out_w);
    for c in 0..fm.channels {
        for &(y0, y1, ty) in &rows {
            for &(x0, x1, tx) in &cols {
                let top = lerp(src.at(c, y0, x0), src.at(c, y0, x1), tx);
                let bottom = lerp(src.at(c, y1, x0), src.at(c, y1, x1), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    FeatureGrid { channels: fm.channels, height: out_h, width: out_w, data }
}

/// Resize to the 7x7 probe grid.
pub fn resize_to_grid(fm: &FeatureMap) -> FeatureGrid {
    resize(fm, PROBE_GRID, PROBE_GRID)
}

/// Per-channel mean over every cell.
pub fn global_pool(grid: &FeatureGrid) -> Vec<f64> {
    let n = (grid.height * grid.width) as f64;
    (0..grid.channels).map(|c| grid.channel(c).iter().sum::<f64>() / n).collect()
}

/// Grid cells selected by a pixel-space box: every cell whose center lies in
/// the rescaled box, or the cell holding the box center when none does.
/// Cells are returned in row-major order.
pub fn roi_cells(grid_h: usize, grid_w: usize, bbox: [f64; 4], image_size: (u32, u32)) -> Result<Vec<(usize, usize)>> {
    let [x1, y1, x2, y2] = bbox;
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    if !(iw > 0.0 && ih > 0.0) {
        return Err(Error::InvalidInput(format!("image size {}x{} is empty", image_size.0, image_size.1)));
    }
    if !bbox.iter().all(|v| v.is_finite()) || !(x2 > x1 && y2 > y1) {
        return Err(Error::InvalidInput(format!("degenerate bounding box {bbox:?}")));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > iw || y2 > ih {
        return Err(Error::InvalidInput(format!(
            "bounding box {bbox:?} outside image {}x{}",
            image_size.0, image_size.1
        )));
    }
    let sx = grid_w as f64 / iw;
    let sy = grid_h as f64 / ih;
    let (gx1, gx2, gy1, gy2) = (x1 * sx, x2 * sx, y1 * sy, y2 * sy);
    let mut cells = Vec::new();
    for y in 0..grid_h {
        let cy = y as f64 + 0.5;
        if cy < gy1 || cy >= gy2 {
            continue;
        }
        for x in 0..grid_w {
            let cx = x as f64 + 0.5;
            if cx >= gx1 && cx < gx2 {
                cells.push((y, x));
            }
        }
    }
    if cells.is_empty() {
        let cx = ((gx1 + gx2) * 0.5).floor().clamp(0.0, (grid_w - 1) as f64) as usize;
        let cy = ((gy1 + gy2) * 0.5).floor().clamp(0.0, (grid_h - 1) as f64) as usize;
        cells.push((cy, cx));
    }
    Ok(cells)
}

/// Average of the grid cells selected by `bbox` (pixel coordinates of an
/// image of `image_size = (width, height)`).
pub fn roi_pool(grid: &FeatureGrid, bbox: [f64; 4], image_size: (u32, u32)) -> Result<Vec<f64>> {
    let cells = roi_cells(grid.height, grid.width, bbox, image_size)?;
    let n = cells.len() as f64;
    Ok((0..grid.channels)
        .map(|c| {
            let ch = grid.channel(c);
            cells.iter().map(|(y, x)| ch[y * grid.width + x]).sum::<f64>() / n
        })
        .collect())
}

/// Pooled vectors for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    /// One vector per object slot; `None` for invisible objects.
    pub objects: Vec<Option<Vec<f64>>>,
    pub global: Vec<f64>,
}

/// Resize to the probe grid, then RoI-pool each visible object and
/// global-pool the whole map.
pub fn pool_frame(
    fm: &FeatureMap,
    bboxes: &[[f64; 4]],
    visible: &[bool],
    image_size: (u32, u32),
) -> Result<PooledFeatures> {
    let grid = resize_to_grid(fm);
    let objects = bboxes
        .iter()
        .zip(visible)
        .map(|(b, v)| if *v { roi_pool(&grid, *b, image_size).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledFeatures { objects, global: global_pool(&grid) })
}
