//! Height-augmented HOG descriptor.
//!
//! Gradients come from central differences (one-sided at the border), are
//! binned by signed orientation with hard assignment, and summed per
//! non-overlapping square cell. Each cell histogram is L2-normalized. A
//! window descriptor concatenates its cells in row-major order and, for the
//! height-augmented variant, appends an L1-normalized histogram of the
//! window's heights.
//!
//! Cells are computed once per frame ([`precompute_frame_cells`]) and shared
//! by every window that overlaps them; window origins are restricted to the
//! cell lattice so that sharing is exact.

use std::f64::consts::{FRAC_PI_2, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::HeightField;
use crate::error::{Error, Result};

/// Cell histograms with a norm below this are left as zero vectors.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMethod {
    /// HOG followed by the height histogram.
    Hahog,
    /// Plain HOG, no height histogram.
    Hog,
}

impl std::str::FromStr for FeatureMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hahog" => Ok(FeatureMethod::Hahog),
            "hog" => Ok(FeatureMethod::Hog),
            other => Err(Error::Config(format!("unknown feature method {other:?}"))),
        }
    }
}

impl std::fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMethod::Hahog => "hahog",
            FeatureMethod::Hog => "hog",
        })
    }
}

/// Everything needed to turn a height field into window descriptors. Stored
/// inside model files so a model always carries the features it was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub cell_size: usize,
    pub n_bins: usize,
    pub window_cells: usize,
    pub stride_cells: usize,
    pub n_height_bins: usize,
    pub h_max_mm: f64,
    pub method: FeatureMethod,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            cell_size: 6,
            n_bins: 8,
            window_cells: 11,
            stride_cells: 1,
            n_height_bins: 16,
            h_max_mm: 2200.0,
            method: FeatureMethod::Hahog,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        validate_cells(self.cell_size, self.n_bins)?;
        self.window_spec().validate()?;
        if self.n_height_bins == 0 {
            return Err(Error::Config("n_height_bins must be at least 1".into()));
        }
        if !(self.h_max_mm.is_finite() && self.h_max_mm > 0.0) {
            return Err(Error::Config("h_max_mm must be positive".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            window_cells: self.window_cells,
            stride_cells: self.stride_cells,
        }
    }

    pub fn height_bins(&self) -> HeightBins {
        HeightBins {
            count: self.n_height_bins,
            h_max_mm: self.h_max_mm,
        }
    }

    /// Window side in pixels.
    pub fn window_px(&self) -> usize {
        self.window_cells * self.cell_size
    }

    pub fn stride_px(&self) -> usize {
        self.stride_cells * self.cell_size
    }

    pub fn hog_len(&self) -> usize {
        self.window_cells * self.window_cells * self.n_bins
    }

    /// Length of the height part; zero for plain HOG.
    pub fn height_len(&self) -> usize {
        match self.method {
            FeatureMethod::Hahog => self.n_height_bins,
            FeatureMethod::Hog => 0,
        }
    }

    pub fn descriptor_len(&self) -> usize {
        self.hog_len() + self.height_len()
    }

    pub fn with_method(mut self, method: FeatureMethod) -> Self {
        self.method = method;
        self
    }
}

fn validate_cells(cell_size: usize, n_bins: usize) -> Result<()> {
    if n_bins < 4 || n_bins % 4 != 0 {
        return Err(Error::Config(format!(
            "n_bins must be a positive multiple of 4, got {n_bins}"
        )));
    }
    if cell_size < 2 {
        return Err(Error::Config(format!("cell_size must be at least 2, got {cell_size}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_cells: usize,
    pub stride_cells: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_cells == 0 || self.stride_cells == 0 {
            return Err(Error::Config(format!(
                "window and stride must be at least one cell, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightBins {
    pub count: usize,
    pub h_max_mm: f64,
}

impl HeightBins {
    #[inline]
    pub fn bin(&self, h: f32) -> usize {
        let b = (h as f64 / self.h_max_mm * self.count as f64).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.count - 1)
        }
    }
}

/// Pixel rectangle, `x`/`y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub gr: Vec<f64>,
    /// Orientation in `[0, 2π)`.
    pub gphi: Vec<f64>,
}

/// Magnitude and orientation in `[0, 2π)`; the zero vector maps to `(0, 0)`.
#[inline]
pub fn to_polar(gx: f64, gy: f64) -> (f64, f64) {
    if gx == 0.0 && gy == 0.0 {
        return (0.0, 0.0);
    }
    let r = gx.hypot(gy);
    let mut phi = gy.atan2(gx);
    if phi < 0.0 {
        phi += TAU;
    }
    if phi >= TAU {
        phi = 0.0;
    }
    (r, phi)
}

/// Orientation bin of `(gx, gy)` with `n_bins` equal sectors over `[0, 2π)`.
///
/// The quadrant is resolved from signs alone and the vector is rotated into
/// the first quadrant with exact swaps and negations before the angle is
/// taken, so a quarter turn of the input shifts the bin by exactly
/// `n_bins / 4`.
#[inline]
pub fn orientation_bin(gx: f64, gy: f64, n_bins: usize) -> usize {
    let (quadrant, cx, cy) = if gx > 0.0 && gy >= 0.0 {
        (0, gx, gy)
    } else if gx <= 0.0 && gy > 0.0 {
        (1, gy, -gx)
    } else if gx < 0.0 && gy <= 0.0 {
        (2, -gx, -gy)
    } else if gx >= 0.0 && gy < 0.0 {
        (3, -gy, gx)
    } else {
        return 0;
    };
    let per_quadrant = n_bins / 4;
    let sub = if per_quadrant == 2 {
        // the only interior boundary is the diagonal
        usize::from(cy >= cx)
    } else {
        let width = TAU / n_bins as f64;
        let a = cy.atan2(cx).min(FRAC_PI_2);
        ((a / width).floor() as usize).min(per_quadrant - 1)
    };
    quadrant * per_quadrant + sub
}

/// Per-pixel gradient of the height field. Pixels whose stencil (itself and
/// the neighbours the difference reads) touches an invalid pixel get a zero
/// gradient.
pub fn compute_gradient(field: &HeightField) -> Result<GradientField> {
    let (w, h) = (field.width, field.height);
    if w < 3 || h < 3 {
        return Err(Error::Dimension(format!(
            "gradient needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let n = w * h;
    let mut g = GradientField {
        width: w,
        height: h,
        gx: vec![0.0; n],
        gy: vec![0.0; n],
        gr: vec![0.0; n],
        gphi: vec![0.0; n],
    };
    let hv = &field.h;
    let valid = &field.valid;
    for y in 0..h {
        let (ya, yb, ydiv) = stencil(y, h);
        for x in 0..w {
            let i = y * w + x;
            let (xa, xb, xdiv) = stencil(x, w);
            let touched = valid[i]
                && valid[y * w + xa]
                && valid[y * w + xb]
                && valid[ya * w + x]
                && valid[yb * w + x];
            if !touched {
                continue;
            }
            let gx = (hv[y * w + xb] as f64 - hv[y * w + xa] as f64) / xdiv;
            let gy = (hv[yb * w + x] as f64 - hv[ya * w + x] as f64) / ydiv;
            let (r, phi) = to_polar(gx, gy);
            g.gx[i] = gx;
            g.gy[i] = gy;
            g.gr[i] = r;
            g.gphi[i] = phi;
        }
    }
    Ok(g)
}

/// `(lower, upper, divisor)` for the difference along one axis.
#[inline]
fn stencil(i: usize, len: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == len - 1 {
        (len - 2, len - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    }
}

/// Normalized orientation histograms of every full cell of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: usize,
    pub n_bins: usize,
    /// `cells_x * cells_y * n_bins` values, cells in row-major order.
    pub histograms: Vec<f64>,
}

impl CellGrid {
    #[inline]
    pub fn cell(&self, cx: usize, cy: usize) -> &[f64] {
        let start = (cy * self.cells_x + cx) * self.n_bins;
        &self.histograms[start..start + self.n_bins]
    }

    /// Number of window origins along x and y for `spec`.
    pub fn window_counts(&self, spec: WindowSpec) -> (usize, usize) {
        let count = |cells: usize| {
            if cells < spec.window_cells {
                0
            } else {
                (cells - spec.window_cells) / spec.stride_cells + 1
            }
        };
        (count(self.cells_x), count(self.cells_y))
    }

    /// All window origins (in cells) in row-major order.
    pub fn window_origins(&self, spec: WindowSpec) -> Vec<(usize, usize)> {
        let (nx, ny) = self.window_counts(spec);
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push((i * spec.stride_cells, j * spec.stride_cells));
            }
        }
        out
    }
}

pub fn cell_histograms(grad: &GradientField, cell_size: usize, n_bins: usize) -> Result<CellGrid> {
    validate_cells(cell_size, n_bins)?;
    let cells_x = grad.width / cell_size;
    let cells_y = grad.height / cell_size;
    let mut histograms = vec![0.0; cells_x * cells_y * n_bins];
    if cells_x > 0 {
        histograms
            .par_chunks_mut(cells_x * n_bins)
            .enumerate()
            .for_each(|(cy, row)| {
                for (cx, hist) in row.chunks_exact_mut(n_bins).enumerate() {
                    for py in cy * cell_size..(cy + 1) * cell_size {
                        for px in cx * cell_size..(cx + 1) * cell_size {
                            let i = py * grad.width + px;
                            let r = grad.gr[i];
                            if r > 0.0 {
                                hist[orientation_bin(grad.gx[i], grad.gy[i], n_bins)] += r;
                            }
                        }
                    }
                    normalize_l2(hist);
                }
            });
    }
    Ok(CellGrid {
        cells_x,
        cells_y,
        cell_size,
        n_bins,
        histograms,
    })
}

fn normalize_l2(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPSILON {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn check_window(grid: &CellGrid, origin: (usize, usize), spec: WindowSpec) -> Result<()> {
    spec.validate()?;
    if origin.0 + spec.window_cells > grid.cells_x || origin.1 + spec.window_cells > grid.cells_y {
        return Err(Error::Bounds(format!(
            "window of {} cells at {:?} exceeds {}x{} cell grid",
            spec.window_cells, origin, grid.cells_x, grid.cells_y
        )));
    }
    Ok(())
}

/// HOG of one window: its cell histograms concatenated in row-major order.
pub fn window_descriptor(grid: &CellGrid, origin: (usize, usize), spec: WindowSpec) -> Result<Vec<f64>> {
    check_window(grid, origin, spec)?;
    let mut out = Vec::with_capacity(spec.window_cells * spec.window_cells * grid.n_bins);
    for wy in 0..spec.window_cells {
        for wx in 0..spec.window_cells {
            out.extend_from_slice(grid.cell(origin.0 + wx, origin.1 + wy));
        }
    }
    Ok(out)
}

/// L1-normalized histogram of valid heights inside `rect`; the zero vector
/// when the rectangle holds no valid pixel.
pub fn height_histogram(field: &HeightField, rect: PixelRect, bins: HeightBins) -> Result<Vec<f64>> {
    if rect.x + rect.w > field.width || rect.y + rect.h > field.height {
        return Err(Error::Bounds(format!(
            "height window {rect:?} exceeds {}x{}",
            field.width, field.height
        )));
    }
    let mut counts = vec![0u64; bins.count];
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            if field.is_valid(x, y) {
                counts[bins.bin(field.at(x, y))] += 1;
            }
        }
    }
    Ok(normalize_counts(&counts))
}

fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// HOG of the window concatenated with the height histogram of its pixel
/// footprint.
pub fn hahog(
    grid: &CellGrid,
    field: &HeightField,
    origin: (usize, usize),
    spec: WindowSpec,
    bins: HeightBins,
) -> Result<FeatureVector> {
    let mut values = window_descriptor(grid, origin, spec)?;
    let side = spec.window_cells * grid.cell_size;
    let rect = PixelRect {
        x: origin.0 * grid.cell_size,
        y: origin.1 * grid.cell_size,
        w: side,
        h: side,
    };
    values.extend(height_histogram(field, rect, bins)?);
    Ok(FeatureVector { values })
}

/// Cell histograms for a whole frame; fails if not even one window fits.
pub fn precompute_frame_cells(field: &HeightField, cfg: &FeatureConfig) -> Result<CellGrid> {
    cfg.validate()?;
    let side = cfg.window_px();
    if field.width < side || field.height < side {
        return Err(Error::Dimension(format!(
            "frame {}x{} smaller than one {side}px window",
            field.width, field.height
        )));
    }
    let grad = compute_gradient(field)?;
    cell_histograms(&grad, cfg.cell_size, cfg.n_bins)
}

/// Shared per-frame state for scoring every window: the cell grid plus
/// per-cell height-bin counts, so each window's height histogram is a sum of
/// cell counts instead of a pixel scan.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub config: FeatureConfig,
    pub grid: CellGrid,
    height_counts: Vec<u32>,
}

impl FrameFeatures {
    pub fn new(field: &HeightField, cfg: &FeatureConfig) -> Result<Self> {
        let grid = precompute_frame_cells(field, cfg)?;
        let bins = cfg.height_bins();
        let nb = bins.count;
        let cs = cfg.cell_size;
        let mut height_counts = vec![0u32; grid.cells_x * grid.cells_y * nb];
        if grid.cells_x > 0 {
            height_counts
                .par_chunks_mut(grid.cells_x * nb)
                .enumerate()
                .for_each(|(cy, row)| {
                    for (cx, counts) in row.chunks_exact_mut(nb).enumerate() {
                        for y in cy * cs..(cy + 1) * cs {
                            for x in cx * cs..(cx + 1) * cs {
                                if field.is_valid(x, y) {
                                    counts[bins.bin(field.at(x, y))] += 1;
                                }
                            }
                        }
                    }
                });
        }
        Ok(FrameFeatures {
            config: *cfg,
            grid,
            height_counts,
        })
    }

    pub fn window_origins(&self) -> Vec<(usize, usize)> {
        self.grid.window_origins(self.config.window_spec())
    }

    pub fn window_counts(&self) -> (usize, usize) {
        self.grid.window_counts(self.config.window_spec())
    }

    /// Writes the descriptor of the window at `origin` (in cells) into `out`,
    /// which must hold exactly `config.descriptor_len()` values.
    pub fn write_descriptor<T: Copy>(&self, origin: (usize, usize), out: &mut [T])
    where
        f64: IntoLossy<T>,
    {
        let cfg = &self.config;
        debug_assert_eq!(out.len(), cfg.descriptor_len());
        let wc = cfg.window_cells;
        let nb = cfg.n_bins;
        let mut k = 0;
        for wy in 0..wc {
            for wx in 0..wc {
                for &v in self.grid.cell(origin.0 + wx, origin.1 + wy) {
                    out[k] = v.into_lossy();
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, wc * wc * nb);
        if cfg.method == FeatureMethod::Hahog {
            let hb = cfg.n_height_bins;
            let mut counts = [0u64; 64];
            let mut counts_vec;
            let counts: &mut [u64] = if hb <= 64 {
                &mut counts[..hb]
            } else {
                counts_vec = vec![0u64; hb];
                &mut counts_vec
            };
            for wy in 0..wc {
                let row = (origin.1 + wy) * self.grid.cells_x;
                for wx in 0..wc {
                    let start = (row + origin.0 + wx) * hb;
                    for (c, &n) in counts.iter_mut().zip(&self.height_counts[start..start + hb]) {
                        *c += n as u64;
                    }
                }
            }
            let total: u64 = counts.iter().sum();
            for (slot, &c) in out[k..].iter_mut().zip(counts.iter()) {
                let v = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                *slot = v.into_lossy();
            }
        }
    }

    pub fn descriptor(&self, origin: (usize, usize)) -> Result<FeatureVector> {
        check_window(&self.grid, origin, self.config.window_spec())?;
        let mut values = vec![0.0f64; self.config.descriptor_len()];
        self.write_descriptor(origin, &mut values);
        Ok(FeatureVector { values })
    }

    /// Center pixel of the window at `origin`.
    pub fn window_center(&self, origin: (usize, usize)) -> (usize, usize) {
        window_center(&self.config, origin)
    }
}

pub fn window_center(cfg: &FeatureConfig, origin: (usize, usize)) -> (usize, usize) {
    let half = cfg.window_px() / 2;
    (origin.0 * cfg.cell_size + half, origin.1 * cfg.cell_size + half)
}

/// Narrowing conversion used when writing descriptors as `f32` for inference.
pub trait IntoLossy<T> {
    fn into_lossy(self) -> T;
}

impl IntoLossy<f64> for f64 {
    #[inline]
    fn into_lossy(self) -> f64 {
        self
    }
}

impl IntoLossy<f32> for f64 {
    #[inline]
    fn into_lossy(self) -> f32 {
        self as f32
    }
}

/// Descriptor of a stand-alone patch exactly one window in size, gradients
/// taken on the patch itself. This is how stored training samples are
/// featurized.
pub fn patch_descriptor(patch: &HeightField, cfg: &FeatureConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    let side = cfg.window_px();
    if patch.width != side || patch.height != side {
        return Err(Error::Dimension(format!(
            "patch is {}x{}, window is {side}x{side}",
            patch.width, patch.height
        )));
    }
    let feats = FrameFeatures::new(patch, cfg)?;
    feats.descriptor((0, 0))
}

/// Index permutation and bin shift mapping the descriptor of a patch to the
/// descriptor of the same patch turned by [`HeightField::rot90`].
///
/// Returns `perm` with `rotated[i] == original[perm[i]]` for the HOG part.
pub fn rot90_permutation(cfg: &FeatureConfig) -> Vec<usize> {
    let wc = cfg.window_cells;
    let nb = cfg.n_bins;
    let shift = nb / 4;
    let mut perm = Vec::with_capacity(wc * wc * nb);
    for y in 0..wc {
        for x in 0..wc {
            // out(x, y) = in(wc - 1 - y, x); gradients turn by -90 degrees
            let (sx, sy) = (wc - 1 - y, x);
            for b in 0..nb {
                let src_bin = (b + shift) % nb;
                perm.push((sy * wc + sx) * nb + src_bin);
            }
        }
    }
    perm
}
