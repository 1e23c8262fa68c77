//! Slow, direct reference implementations for cross-checking the detector.
//!
//! Nothing here shares code with the `hahog` crate: every routine is written
//! from its definition on plain slices, favouring obviousness over speed.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::TAU;

/// Height raster with a validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub heights: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Raster {
    fn h(&self, x: usize, y: usize) -> f64 {
        self.heights[y * self.width + x] as f64
    }

    fn ok(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Sub-raster starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        let mut heights = Vec::new();
        let mut valid = Vec::new();
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                heights.push(self.heights[y * self.width + x]);
                valid.push(self.valid[y * self.width + x]);
            }
        }
        Raster {
            width: w,
            height: h,
            heights,
            valid,
        }
    }
}

/// Gradient at one pixel: central difference inside, forward/backward
/// difference on the first/last row or column, zero if any pixel read
/// (including the center) is invalid.
pub fn pixel_gradient(r: &Raster, x: usize, y: usize) -> (f64, f64) {
    let (xl, xr, dx) = if x == 0 {
        (0, 1, 1.0)
    } else if x == r.width - 1 {
        (x - 1, x, 1.0)
    } else {
        (x - 1, x + 1, 2.0)
    };
    let (yu, yd, dy) = if y == 0 {
        (0, 1, 1.0)
    } else if y == r.height - 1 {
        (y - 1, y, 1.0)
    } else {
        (y - 1, y + 1, 2.0)
    };
    let reads = [(x, y), (xl, y), (xr, y), (x, yu), (x, yd)];
    if reads.iter().any(|&(a, b)| !r.ok(a, b)) {
        return (0.0, 0.0);
    }
    ((r.h(xr, y) - r.h(xl, y)) / dx, (r.h(x, yd) - r.h(x, yu)) / dy)
}

/// Sector of the angle of `(gx, gy)` among `n` equal sectors of `[0, 2π)`.
pub fn angle_bin(gx: f64, gy: f64, n: usize) -> usize {
    let mut a = gy.atan2(gx);
    if a < 0.0 {
        a += TAU;
    }
    ((a / (TAU / n as f64)).floor() as usize) % n
}

/// HOG of the `cells x cells` window whose top-left pixel is `(x0, y0)`,
/// with gradients taken on the whole raster.
pub fn window_hog(r: &Raster, x0: usize, y0: usize, cells: usize, cell_size: usize, n_bins: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for cy in 0..cells {
        for cx in 0..cells {
            let mut hist = vec![0.0; n_bins];
            for py in 0..cell_size {
                for px in 0..cell_size {
                    let (x, y) = (x0 + cx * cell_size + px, y0 + cy * cell_size + py);
                    let (gx, gy) = pixel_gradient(r, x, y);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag > 0.0 {
                        hist[angle_bin(gx, gy, n_bins)] += mag;
                    }
                }
            }
            let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                for v in &mut hist {
                    *v /= norm;
                }
            } else {
                hist.iter_mut().for_each(|v| *v = 0.0);
            }
            out.extend(hist);
        }
    }
    out
}

/// Height histogram of a square window: fraction of valid pixels per bin,
/// bin `floor(h / h_max * n)` clamped into range.
pub fn height_hist(r: &Raster, x0: usize, y0: usize, side: usize, n: usize, h_max: f64) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    let mut total = 0usize;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            if r.ok(x, y) {
                let b = (r.h(x, y) / h_max * n as f64).floor().max(0.0) as usize;
                counts[b.min(n - 1)] += 1;
                total += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Dense layer as nested rows: `weights[o][i]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Rectifier hidden layers, logistic output.
pub fn mlp_forward(layers: &[DenseLayer], x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let mut next = Vec::new();
        for (row, b) in layer.weights.iter().zip(&layer.biases) {
            let mut z = *b;
            for (w, v) in row.iter().zip(&a) {
                z += w * v;
            }
            next.push(if l + 1 == layers.len() { 1.0 / (1.0 + (-z).exp()) } else { z.max(0.0) });
        }
        a = next;
    }
    a[0]
}

/// Candidate for suppression: `(x, y, score)`.
pub type Cand = (i32, i32, f64);

fn d2(a: (i32, i32), b: (i32, i32)) -> f64 {
    let (dx, dy) = ((a.0 - b.0) as f64, (a.1 - b.1) as f64);
    dx * dx + dy * dy
}

/// `true` when `a` ranks below `b`: lower score, or equal score and later
/// in `(y, x)` order.
fn weaker(a: Cand, b: Cand) -> bool {
    a.2 < b.2 || (a.2 == b.2 && (a.1, a.0) > (b.1, b.0))
}

/// Every set of survivors reachable by repeatedly picking any pair closer
/// than `radius` and discarding its weaker member until no such pair is
/// left.
pub fn nms_outcomes(cands: &[Cand], radius: f64) -> BTreeSet<Vec<usize>> {
    let r2 = radius * radius;
    let mut outcomes = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(0..cands.len()).collect::<Vec<usize>>()];
    while let Some(alive) = stack.pop() {
        if !seen.insert(alive.clone()) {
            continue;
        }
        let mut terminal = true;
        for (ai, &i) in alive.iter().enumerate() {
            for &j in &alive[ai + 1..] {
                if d2((cands[i].0, cands[i].1), (cands[j].0, cands[j].1)) < r2 {
                    terminal = false;
                    let drop = if weaker(cands[i], cands[j]) { i } else { j };
                    stack.push(alive.iter().copied().filter(|&k| k != drop).collect());
                }
            }
        }
        if terminal {
            outcomes.insert(alive);
        }
    }
    outcomes
}

/// Clusters under complete linkage, recomputed from scratch after every
/// merge. Clusters are index lists named by their smallest index; ties in
/// distance go to the lexicographically smallest pair of names.
pub fn complete_linkage_brute(points: &[(i32, i32)], cutoff: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut far = 0.0f64;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        far = far.max(d2(points[i], points[j]));
                    }
                }
                let key = (far, clusters[a][0], clusters[b][0]);
                if best.is_none_or(|bk| {
                    key.0 < bk.0 || (key.0 == bk.0 && (key.1, key.2) < (clusters[bk.1][0], clusters[bk.2][0]))
                }) {
                    best = Some((far, a, b));
                }
            }
        }
        match best {
            Some((far, a, b)) if far <= cutoff * cutoff => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
                clusters.sort_by_key(|c| c[0]);
            }
            _ => break,
        }
    }
    clusters
}

/// Largest number of disjoint (detection, annotation) pairs closer than
/// `radius`, over every possible assignment.
pub fn max_assignment(dets: &[(i32, i32)], anns: &[(i32, i32)], radius: f64) -> usize {
    fn go(d: usize, used: u64, dets: &[(i32, i32)], anns: &[(i32, i32)], r2: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, used, dets, anns, r2);
        for (a, &p) in anns.iter().enumerate() {
            if used & (1 << a) == 0 && d2(dets[d], p) <= r2 {
                best = best.max(1 + go(d + 1, used | (1 << a), dets, anns, r2));
            }
        }
        best
    }
    assert!(anns.len() <= 64);
    go(0, 0, dets, anns, radius * radius)
}

/// Distance from each point to its nearest other point, by scanning all
/// pairs.
pub fn nearest_neighbour_distances(points: &[(i32, i32)]) -> Vec<Option<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut best: Option<f64> = None;
            for (j, &q) in points.iter().enumerate() {
                if i != j {
                    let d = d2(p, q).sqrt();
                    best = Some(best.map_or(d, |b| b.min(d)));
                }
            }
            best
        })
        .collect()
}

/// Voronoi cell of `sites[i]` inside the axis-aligned box, built by
/// clipping the box with the bisector half-plane of every other site.
pub fn voronoi_cell(sites: &[(f64, f64)], i: usize, bbox: (f64, f64, f64, f64)) -> Vec<(f64, f64)> {
    let (x0, y0, x1, y1) = bbox;
    let mut poly = vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)];
    let s = sites[i];
    for (j, &t) in sites.iter().enumerate() {
        if j == i || t == s {
            continue;
        }
        // keep points p with (p - m) . (t - s) <= 0, m the midpoint
        let n = (t.0 - s.0, t.1 - s.1);
        let m = ((t.0 + s.0) / 2.0, (t.1 + s.1) / 2.0);
        let side = |p: (f64, f64)| (p.0 - m.0) * n.0 + (p.1 - m.1) * n.1;
        let mut out = Vec::new();
        for k in 0..poly.len() {
            let (p, q) = (poly[k], poly[(k + 1) % poly.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp <= 0.0 {
                out.push(p);
            }
            if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
        poly = out;
        if poly.is_empty() {
            break;
        }
    }
    poly
}

/// Signed distance of `p` inside a convex counter-clockwise (in the
/// y-down frame, clockwise on screen) polygon: the smallest distance to an
/// edge, negative when outside.
pub fn inside_margin(poly: &[(f64, f64)], p: (f64, f64)) -> f64 {
    if poly.len() < 3 {
        return f64::NEG_INFINITY;
    }
    let mut orient = 0.0;
    for k in 0..poly.len() {
        let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
        orient += a.0 * b.1 - b.0 * a.1;
    }
    let sign = orient.signum();
    let mut margin = f64::INFINITY;
    for k in 0..poly.len() {
        let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let len = (ex * ex + ey * ey).sqrt();
        if len == 0.0 {
            continue;
        }
        let cross = ex * (p.1 - a.1) - ey * (p.0 - a.0);
        margin = margin.min(sign * cross / len);
    }
    margin
}

/// Index of the Voronoi cell holding `p` at least `eps` from every cell
/// edge, or `None` when `p` is that close to a boundary.
pub fn voronoi_owner(sites: &[(f64, f64)], p: (f64, f64), bbox: (f64, f64, f64, f64), eps: f64) -> Option<usize> {
    let owners: Vec<usize> = (0..sites.len())
        .filter(|&i| inside_margin(&voronoi_cell(sites, i, bbox), p) > eps)
        .collect();
    (owners.len() == 1).then(|| owners[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_bins() {
        assert_eq!(angle_bin(1.0, 0.0, 8), 0);
        assert_eq!(angle_bin(0.0, 1.0, 8), 2);
        assert_eq!(angle_bin(-1.0, 0.0, 8), 4);
        assert_eq!(angle_bin(1.0, -1e-9, 8), 7);
    }

    #[test]
    fn nms_chain_has_one_outcome() {
        let c = [(0, 0, 0.99), (30, 0, 0.95), (60, 0, 0.94)];
        let o = nms_outcomes(&c, 40.0);
        // dropping B first keeps A and C; dropping C first (pair B-C) then
        // B (pair A-B) leaves A alone
        assert!(o.contains(&vec![0, 2]));
        assert!(o.contains(&vec![0]));
    }

    #[test]
    fn linkage_basics() {
        assert_eq!(complete_linkage_brute(&[(0, 0), (6, 0), (12, 0)], 10.0), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn voronoi_two_sites() {
        let sites = [(0.0, 0.0), (10.0, 0.0)];
        let bbox = (-20.0, -20.0, 30.0, 20.0);
        assert_eq!(voronoi_owner(&sites, (2.0, 3.0), bbox, 1e-9), Some(0));
        assert_eq!(voronoi_owner(&sites, (8.0, -3.0), bbox, 1e-9), Some(1));
        assert_eq!(voronoi_owner(&sites, (5.0, 1.0), bbox, 1e-9), None);
    }

    #[test]
    fn assignment() {
        assert_eq!(max_assignment(&[(10, 0)], &[(0, 0), (21, 0)], 30.0), 1);
        assert_eq!(max_assignment(&[(0, 0), (20, 0)], &[(10, 0), (30, 0)], 10.0), 2);
    }
}
