//! Matching detections to ground truth and scoring by crowd density.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth::{Calibration, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub match_radius_mm: f64,
    /// Density bin edges in pedestrians per square meter.
    pub bin_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_radius_mm: 300.0,
            bin_edges: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_radius_mm > 0.0) {
            return Err(Error::Config("match radius must be positive".into()));
        }
        let e = &self.bin_edges;
        if e.len() < 2 || e.iter().any(|v| !v.is_finite() || *v < 0.0) || e.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("bin edges {e:?} must be non-negative and strictly increasing")));
        }
        Ok(())
    }
}

/// Outcome of matching one frame. Indices refer to the detection and
/// annotation lists passed to [`match_detections`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection, annotation)` pairs.
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Index of the annotation nearest to `p`, lowest index on ties.
pub fn nearest_annotation(p: Point, annotations: &[Point]) -> Option<usize> {
    annotations
        .iter()
        .enumerate()
        .min_by_key(|&(i, a)| (a.dist2(p), i))
        .map(|(i, _)| i)
}

/// Each detection may only match the annotation whose Voronoi cell it lies
/// in (its nearest annotation). Eligible pairs within `match_radius_mm` are
/// accepted greedily by `(distance, annotation, detection)`, one detection
/// per annotation.
pub fn match_detections(detections: &[Point], annotations: &[Point], match_radius_mm: f64, calib: &Calibration) -> MatchResult {
    let radius_px = calib.mm_to_px(match_radius_mm);
    let r2 = radius_px * radius_px;
    let mut pairs: Vec<(i64, usize, usize)> = detections
        .iter()
        .enumerate()
        .filter_map(|(d, &p)| {
            let a = nearest_annotation(p, annotations)?;
            let d2 = annotations[a].dist2(p);
            ((d2 as f64) <= r2).then_some((d2, a, d))
        })
        .collect();
    pairs.sort_unstable();
    let mut det_used = vec![false; detections.len()];
    let mut ann_used = vec![false; annotations.len()];
    let mut out = MatchResult::default();
    for (_, a, d) in pairs {
        if !ann_used[a] {
            ann_used[a] = true;
            det_used[d] = true;
            out.tp.push((d, a));
        }
    }
    out.tp.sort_unstable();
    out.fp = (0..detections.len()).filter(|&d| !det_used[d]).collect();
    out.fn_ = (0..annotations.len()).filter(|&a| !ann_used[a]).collect();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub position: Point,
    /// Distance to the nearest other annotation, meters.
    pub r_nn_m: f64,
    /// Pedestrians per square meter, `1 / (pi r^2)`.
    pub rho: f64,
}

pub fn rho_from_rnn(r_nn_m: f64) -> f64 {
    1.0 / (PI * r_nn_m * r_nn_m)
}

pub fn rnn_from_rho(rho: f64) -> f64 {
    if rho <= 0.0 {
        f64::INFINITY
    } else {
        (1.0 / (PI * rho)).sqrt()
    }
}

/// Nearest-neighbour density of every annotation, aligned with the input.
/// An annotation without neighbours gets `None`.
pub fn nn_density(annotations: &[Point], calib: &Calibration) -> Vec<Option<DensityRecord>> {
    annotations
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d2 = annotations
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| q.dist2(p))
                .min()?;
            let r_nn_m = (d2 as f64).sqrt() * calib.scale_mm_per_px / 1000.0;
            Some(DensityRecord {
                position: p,
                r_nn_m,
                rho: rho_from_rnn(r_nn_m),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl BinCounts {
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Harmonic mean of precision and recall; `Some(0)` when both are zero.
    pub fn fscore(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
    }

    pub fn add(&mut self, o: &BinCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub edges: Vec<f64>,
    pub bins: Vec<BinCounts>,
}

impl BinReport {
    pub fn empty(edges: &[f64]) -> Self {
        BinReport {
            edges: edges.to_vec(),
            bins: vec![BinCounts::default(); edges.len() - 1],
        }
    }

    /// Adds another report's counts; edges must agree.
    pub fn merge(&mut self, other: &BinReport) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::Config("cannot merge reports with different bin edges".into()));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.add(b);
        }
        Ok(())
    }

    pub fn total(&self) -> BinCounts {
        let mut t = BinCounts::default();
        for b in &self.bins {
            t.add(b);
        }
        t
    }

    /// Counts of all bins whose range lies within `(lo, hi]`.
    pub fn range(&self, lo: f64, hi: f64) -> BinCounts {
        let mut t = BinCounts::default();
        for (i, b) in self.bins.iter().enumerate() {
            if self.edges[i] >= lo && self.edges[i + 1] <= hi {
                t.add(b);
            }
        }
        t
    }
}

/// Bin holding density `rho`: the first bin is closed, the others are
/// `(lo, hi]`. Densities past the last edge fall into the last bin and
/// missing densities into the first.
pub fn bin_index(rho: Option<f64>, edges: &[f64]) -> usize {
    let n = edges.len() - 1;
    let Some(rho) = rho else { return 0 };
    if rho <= edges[1] {
        return 0;
    }
    (1..n).find(|&i| rho <= edges[i + 1]).unwrap_or(n - 1)
}

/// Assigns every TP, FP and FN the density of its nearest annotation and
/// counts them per bin. False positives in frames without annotations go
/// to the first bin.
pub fn bin_and_score(
    result: &MatchResult,
    detections: &[Point],
    annotations: &[Point],
    densities: &[Option<DensityRecord>],
    edges: &[f64],
) -> BinReport {
    let mut report = BinReport::empty(edges);
    let rho_of = |a: usize| densities[a].map(|d| d.rho);
    for &(_, a) in &result.tp {
        report.bins[bin_index(rho_of(a), edges)].tp += 1;
    }
    for &a in &result.fn_ {
        report.bins[bin_index(rho_of(a), edges)].fn_ += 1;
    }
    for &d in &result.fp {
        let rho = nearest_annotation(detections[d], annotations).and_then(rho_of);
        report.bins[bin_index(rho, edges)].fp += 1;
    }
    report
}

/// Match, density and binning for one frame.
pub fn evaluate_frame(detections: &[Point], annotations: &[Point], calib: &Calibration, cfg: &EvalConfig) -> (MatchResult, BinReport) {
    let m = match_detections(detections, annotations, cfg.match_radius_mm, calib);
    let dens = nn_density(annotations, calib);
    let r = bin_and_score(&m, detections, annotations, &dens, &cfg.bin_edges);
    (m, r)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_edge(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// CSV with one row per (bin, method). Counts are aggregated before the
/// ratios are taken; undefined ratios are left empty.
pub fn report_csv(reports: &[(String, BinReport)], cfg: &EvalConfig) -> String {
    let mut s = String::new();
    writeln!(s, "# match_radius_mm={}", cfg.match_radius_mm).unwrap();
    s.push_str("bin_lo_rho,bin_hi_rho,bin_lo_rnn_m,bin_hi_rnn_m,tp,fp,fn,precision,recall,fscore,method\n");
    for (method, r) in reports {
        for (i, b) in r.bins.iter().enumerate() {
            let (lo, hi) = (r.edges[i], r.edges[i + 1]);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                fmt_edge(lo),
                fmt_edge(hi),
                fmt_edge(rnn_from_rho(hi)),
                fmt_edge(rnn_from_rho(lo)),
                b.tp,
                b.fp,
                b.fn_,
                fmt_opt(b.precision()),
                fmt_opt(b.recall()),
                fmt_opt(b.fscore()),
                method
            )
            .unwrap();
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: String,
    /// Bin midpoints in r_nn meters, left to right as plotted.
    pub rnn_mid_m: Vec<Option<f64>>,
    pub rho_lo: Vec<f64>,
    pub rho_hi: Vec<f64>,
    pub fscore: Vec<Option<f64>>,
    pub counts: Vec<BinCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub match_radius_mm: f64,
    pub series: Vec<PlotSeries>,
}

pub fn plot_data(reports: &[(String, BinReport)], cfg: &EvalConfig) -> PlotData {
    PlotData {
        match_radius_mm: cfg.match_radius_mm,
        series: reports
            .iter()
            .map(|(method, r)| {
                let n = r.bins.len();
                let mid = |i: usize| {
                    let (a, b) = (rnn_from_rho(r.edges[i + 1]), rnn_from_rho(r.edges[i]));
                    b.is_finite().then(|| (a + b) / 2.0)
                };
                PlotSeries {
                    method: method.clone(),
                    rnn_mid_m: (0..n).map(mid).collect(),
                    rho_lo: r.edges[..n].to_vec(),
                    rho_hi: r.edges[1..].to_vec(),
                    fscore: r.bins.iter().map(BinCounts::fscore).collect(),
                    counts: r.bins.clone(),
                }
            })
            .collect(),
    }
}

/// Writes the CSV to `csv_path` and plot data as JSON to `plot_path`.
pub fn write_report(csv_path: &Path, plot_path: &Path, reports: &[(String, BinReport)], cfg: &EvalConfig) -> Result<()> {
    fs::write(csv_path, report_csv(reports, cfg)).map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(&plot_data(reports, cfg)).map_err(|e| Error::json(plot_path, e))?;
    fs::write(plot_path, json).map_err(|e| Error::io(plot_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: i32, y: i32) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn exact_hit() {
        let m = match_detections(&[p(5, 5)], &[p(5, 5)], 300.0, &Calibration::default());
        assert_eq!(m.tp, vec![(0, 0)]);
        assert!(m.fp.is_empty() && m.fn_.is_empty());
    }

    #[test]
    fn no_detections() {
        let m = match_detections(&[], &[p(0, 0), p(50, 0), p(0, 50)], 300.0, &Calibration::default());
        assert_eq!(m.fn_, vec![0, 1, 2]);
    }

    #[test]
    fn one_detection_cannot_serve_two() {
        let m = match_detections(&[p(10, 0)], &[p(0, 0), p(21, 0)], 300.0, &Calibration::default());
        assert_eq!(m.tp, vec![(0, 0)]);
        assert_eq!(m.fn_, vec![1]);
    }

    #[test]
    fn outside_radius_is_fp() {
        let m = match_detections(&[p(31, 0)], &[p(0, 0)], 300.0, &Calibration::default());
        assert_eq!((m.tp.len(), m.fp.len(), m.fn_.len()), (0, 1, 1));
        let m = match_detections(&[p(30, 0)], &[p(0, 0)], 300.0, &Calibration::default());
        assert_eq!(m.tp.len(), 1);
    }

    #[test]
    fn density_examples() {
        let d = nn_density(&[p(0, 0), p(100, 0)], &Calibration::default());
        for r in d.iter().flatten() {
            assert!((r.rho - 1.0 / PI).abs() < 1e-12);
        }
        assert!((rho_from_rnn(0.3989) - 2.0).abs() < 1e-3);
        assert_eq!(nn_density(&[p(1, 1)], &Calibration::default()), vec![None]);
    }

    #[test]
    fn bin_boundaries() {
        let e = EvalConfig::default().bin_edges;
        assert_eq!(bin_index(Some(0.0), &e), 0);
        assert_eq!(bin_index(Some(0.5), &e), 0);
        assert_eq!(bin_index(Some(0.50001), &e), 1);
        assert_eq!(bin_index(Some(4.0), &e), 6);
        assert_eq!(bin_index(Some(9.0), &e), 6);
        assert_eq!(bin_index(None, &e), 0);
    }

    #[test]
    fn scores() {
        let b = BinCounts { tp: 1, fp: 0, fn_: 0 };
        assert_eq!((b.precision(), b.recall(), b.fscore()), (Some(1.0), Some(1.0), Some(1.0)));
        let b = BinCounts { tp: 1, fp: 1, fn_: 0 };
        assert_eq!(b.precision(), Some(0.5));
        assert!((b.fscore().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let b = BinCounts { tp: 0, fp: 0, fn_: 2 };
        assert_eq!((b.precision(), b.fscore()), (None, None));
    }

    #[test]
    fn aggregation_counts_not_scores() {
        let edges = [0.0, 10.0];
        let mut a = BinReport::empty(&edges);
        a.bins[0].tp = 1;
        let mut b = BinReport::empty(&edges);
        b.bins[0].fp = 1;
        a.merge(&b).unwrap();
        assert_eq!(a.bins[0].precision(), Some(0.5));
    }

    #[test]
    fn csv_layout() {
        let cfg = EvalConfig {
            bin_edges: vec![0.0, 1.0, 2.0],
            ..EvalConfig::default()
        };
        let mut r = BinReport::empty(&cfg.bin_edges);
        r.bins[0].tp = 2;
        r.bins[1].fn_ = 1;
        let csv = report_csv(&[("hahog".into(), r)], &cfg);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# match_radius_mm=300");
        assert!(lines[2].starts_with("0.000000,1.000000,0.564190,inf,2,0,0,1.000000,1.000000,1.000000,hahog"));
        assert!(lines[3].ends_with(",0,0,1,,0.000000,,hahog"));
    }
}
