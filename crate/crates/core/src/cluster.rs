//! Height-threshold foreground extraction and complete-linkage clustering,
//! the baseline the window classifier is compared against.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{HeightField, Point};
use crate::detector::Candidate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub h_min_mm: f32,
    pub linkage_cutoff_px: f64,
    pub subsample_step: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            h_min_mm: 1000.0,
            linkage_cutoff_px: 60.0,
            subsample_step: 3,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_min_mm > 0.0) || !(self.linkage_cutoff_px > 0.0) || self.subsample_step == 0 {
            return Err(Error::Config(format!("invalid cluster config {self:?}")));
        }
        Ok(())
    }
}

/// Valid pixels at or above `h_min` on every `step`-th row and column, in
/// row-major order.
pub fn foreground(field: &HeightField, h_min: f32, step: usize) -> Vec<Point> {
    let step = step.max(1);
    let mut pts = Vec::new();
    for y in (0..field.height).step_by(step) {
        for x in (0..field.width).step_by(step) {
            if field.is_valid(x, y) && field.at(x, y) >= h_min {
                pts.push(Point::new(x as i32, y as i32));
            }
        }
    }
    pts
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups of point indices connected by steps of at most `cutoff`. No
/// complete-linkage merge can cross two groups, so each is clustered alone.
fn linkage_components(points: &[Point], cutoff2: u32) -> Vec<Vec<usize>> {
    let cell = (f64::from(cutoff2).sqrt().ceil() as i32).max(1);
    let mut buckets: HashMap<(i32, i32), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry((p.x.div_euclid(cell), p.y.div_euclid(cell))).or_default().push(i);
    }
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, p) in points.iter().enumerate() {
        let (bx, by) = (p.x.div_euclid(cell), p.y.div_euclid(cell));
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(b) = buckets.get(&(bx + dx, by + dy)) {
                    for &j in b {
                        if j > i && p.dist2(points[j]) <= i64::from(cutoff2) {
                            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                            if ri != rj {
                                parent[ri.max(rj)] = ri.min(rj);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        let g = *slot.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Complete linkage on one group. `idx` is ascending; returns clusters as
/// lists of indices into `points`, each led by its smallest index.
fn cluster_group(points: &[Point], idx: &[usize], cutoff2: u32) -> Vec<Vec<usize>> {
    let n = idx.len();
    if n == 1 {
        return vec![idx.to_vec()];
    }
    let mut dist = vec![0u32; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let d = points[idx[a]].dist2(points[idx[b]]) as u32;
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    let mut active = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|a| vec![a]).collect();
    // nearest active partner above each row: (distance, column)
    let mut nearest: Vec<Option<(u32, usize)>> = vec![None; n];
    let rescan = |a: usize, dist: &[u32], active: &[bool]| -> Option<(u32, usize)> {
        let mut best: Option<(u32, usize)> = None;
        for b in a + 1..n {
            if active[b] && best.is_none_or(|(d, _)| dist[a * n + b] < d) {
                best = Some((dist[a * n + b], b));
            }
        }
        best
    };
    for a in 0..n {
        nearest[a] = rescan(a, &dist, &active);
    }
    loop {
        let mut best: Option<(u32, usize, usize)> = None;
        for a in 0..n {
            if !active[a] {
                continue;
            }
            if let Some((d, b)) = nearest[a] {
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > cutoff2 {
            break;
        }
        for k in 0..n {
            if active[k] && k != a && k != b {
                let m = dist[a * n + k].max(dist[b * n + k]);
                dist[a * n + k] = m;
                dist[k * n + a] = m;
            }
        }
        active[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        for k in 0..n {
            if active[k] && (k == a || matches!(nearest[k], Some((_, j)) if j == a || j == b)) {
                nearest[k] = rescan(k, &dist, &active);
            }
        }
    }
    (0..n)
        .filter(|&a| active[a])
        .map(|a| {
            let mut m: Vec<usize> = members[a].iter().map(|&l| idx[l]).collect();
            m.sort_unstable();
            m
        })
        .collect()
}

/// Agglomerative clustering under complete linkage: the closest pair of
/// clusters (largest point distance between them) is merged until that
/// distance exceeds `cutoff`. Ties go to the pair with the lowest indices,
/// a cluster taking the index of its first point. Clusters are returned in
/// order of their first point.
pub fn complete_linkage(points: &[Point], cutoff: f64) -> Vec<Vec<Point>> {
    if points.is_empty() {
        return Vec::new();
    }
    let cutoff2 = (cutoff * cutoff).floor().min(u32::MAX as f64) as u32;
    let groups = linkage_components(points, cutoff2);
    let mut clusters: Vec<Vec<usize>> = groups
        .par_iter()
        .flat_map_iter(|g| cluster_group(points, g, cutoff2))
        .collect();
    clusters.sort_unstable_by_key(|c| c[0]);
    clusters
        .into_iter()
        .map(|c| c.into_iter().map(|i| points[i]).collect())
        .collect()
}

/// Rounded centroid of each cluster, scored 1.
pub fn cluster_detections(clusters: &[Vec<Point>]) -> Vec<Candidate> {
    clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let n = c.len() as f64;
            let sx: f64 = c.iter().map(|p| f64::from(p.x)).sum();
            let sy: f64 = c.iter().map(|p| f64::from(p.y)).sum();
            Candidate {
                x: (sx / n).round() as i32,
                y: (sy / n).round() as i32,
                alpha: 1.0,
            }
        })
        .collect()
}

/// Foreground extraction, clustering and centroids on one height field.
pub fn detect_clusters(field: &HeightField, cfg: &ClusterConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let pts = foreground(field, cfg.h_min_mm, cfg.subsample_step);
    Ok(cluster_detections(&complete_linkage(&pts, cfg.linkage_cutoff_px)))
}
