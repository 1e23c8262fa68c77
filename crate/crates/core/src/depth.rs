//! Depth frames, calibration and the height-above-floor view used by every
//! downstream stage.
//!
//! Rasters are binary 16-bit PGM (`P5`, maxval 65535, big-endian samples)
//! holding depth in millimeters, `0` marking dropout pixels. Calibration and
//! the frame id live in a JSON sidecar next to the raster (`<stem>.json`) so
//! the raster itself stays viewable in ordinary image tools.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth value reserved for pixels without a measurement.
pub const INVALID_DEPTH: u16 = 0;

/// Integer pixel position. Serialized as a two-element `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Point { x, y }
    }

    pub fn dist2(self, other: Point) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.dist2(other) as f64).sqrt()
    }
}

impl From<[i32; 2]> for Point {
    fn from([x, y]: [i32; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [i32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Raw sensor frame: row-major depth in millimeters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<u16>,
    pub frame_id: String,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, depth: Vec<u16>, frame_id: impl Into<String>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Dimension(format!(
                "depth buffer has {} samples, expected {}x{}",
                depth.len(),
                width,
                height
            )));
        }
        Ok(DepthFrame {
            width,
            height,
            depth,
            frame_id: frame_id.into(),
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.depth[y * self.width + x]
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Height of the camera above the floor.
    pub sensor_height_mm: f64,
    /// Ground-sample distance on the head plane.
    pub scale_mm_per_px: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            sensor_height_mm: 3000.0,
            scale_mm_per_px: 10.0,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sensor_height_mm) || !ok(self.scale_mm_per_px) {
            return Err(Error::Config(format!(
                "calibration values must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn px_to_mm(&self, px: f64) -> f64 {
        px * self.scale_mm_per_px
    }

    pub fn mm_to_px(&self, mm: f64) -> f64 {
        mm / self.scale_mm_per_px
    }
}

/// Height above the floor in millimeters, with a validity mask. Invalid
/// pixels store `0.0` and must be skipped through `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub width: usize,
    pub height: usize,
    pub h: Vec<f32>,
    pub valid: Vec<bool>,
}

impl HeightField {
    pub fn new(width: usize, height: usize, h: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if h.len() != width * height || valid.len() != width * height {
            return Err(Error::Dimension(format!(
                "height field buffers ({}, {}) do not match {}x{}",
                h.len(),
                valid.len(),
                width,
                height
            )));
        }
        Ok(HeightField {
            width,
            height,
            h,
            valid,
        })
    }

    /// A fully valid field at constant height.
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        HeightField {
            width,
            height,
            h: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f32>) -> Self {
        let mut h = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => {
                        h.push(v);
                        valid.push(true);
                    }
                    None => {
                        h.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        HeightField {
            width,
            height,
            h,
            valid,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.h[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Copy of the `w`x`h` rectangle starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<HeightField> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Bounds(format!(
                "crop {w}x{h} at ({x0}, {y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut hv = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            hv.extend_from_slice(&self.h[row + x0..row + x0 + w]);
            valid.extend_from_slice(&self.valid[row + x0..row + x0 + w]);
        }
        Ok(HeightField {
            width: w,
            height: h,
            h: hv,
            valid,
        })
    }

    /// Quarter turn: `out(x, y) = in(W - 1 - y, x)`. Gradients transform as
    /// `(gx, gy) -> (gy, -gx)`.
    pub fn rot90(&self) -> HeightField {
        let (w, h) = (self.width, self.height);
        // output is h wide, w tall
        let mut out = HeightField {
            width: h,
            height: w,
            h: vec![0.0; w * h],
            valid: vec![false; w * h],
        };
        for y in 0..w {
            for x in 0..h {
                let sx = w - 1 - y;
                let sy = x;
                let src = sy * w + sx;
                let dst = y * h + x;
                out.h[dst] = self.h[src];
                out.valid[dst] = self.valid[src];
            }
        }
        out
    }

    pub fn rotated(&self, quarter_turns: usize) -> HeightField {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            out = out.rot90();
        }
        out
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Converts sensor depth to height above the floor. Depths beyond the floor
/// plane clamp to zero height.
pub fn to_height_field(frame: &DepthFrame, calib: &Calibration) -> HeightField {
    let sensor = calib.sensor_height_mm;
    let mut h = Vec::with_capacity(frame.depth.len());
    let mut valid = Vec::with_capacity(frame.depth.len());
    for &d in &frame.depth {
        if d == INVALID_DEPTH {
            h.push(0.0);
            valid.push(false);
        } else {
            h.push((sensor - d as f64).clamp(0.0, sensor) as f32);
            valid.push(true);
        }
    }
    HeightField {
        width: frame.width,
        height: frame.height,
        h,
        valid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub frame_id: String,
    pub sensor_height_mm: f64,
    pub scale_mm_per_px: f64,
}

impl Sidecar {
    pub fn calibration(&self) -> Calibration {
        Calibration {
            sensor_height_mm: self.sensor_height_mm,
            scale_mm_per_px: self.scale_mm_per_px,
        }
    }
}

pub fn sidecar_path(raster: &Path) -> PathBuf {
    raster.with_extension("json")
}

/// Raster bytes for `frame`: the fixed ASCII header followed by big-endian samples.
pub fn encode_pgm(frame: &DepthFrame) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", frame.width, frame.height);
    let mut out = Vec::with_capacity(header.len() + 2 * frame.depth.len());
    out.extend_from_slice(header.as_bytes());
    for &d in &frame.depth {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

/// Parses a 16-bit `P5` raster. Returns `(width, height, samples)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut next_token = || -> Option<&[u8]> {
        // whitespace and '#' comments between tokens, as netpbm allows
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };

    if next_token() != Some(b"P5".as_slice()) {
        return Err(malformed("missing P5 magic"));
    }
    let mut number = |name: &str| -> Result<usize> {
        let tok = next_token().ok_or_else(|| malformed(&format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| malformed(&format!("bad {name}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 65535 {
        return Err(malformed("maxval must be 65535"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        if width * height == 0 && pos == bytes.len() {
            return Ok((width, height, Vec::new()));
        }
        return Err(malformed("missing separator after maxval"));
    }
    let payload = &bytes[pos + 1..];
    let expected = width * height * 2;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, samples))
}

pub fn load_sidecar(raster: &Path) -> Result<Sidecar> {
    let path = sidecar_path(raster);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingSidecar(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Reads a raster and its sidecar's frame id. Use [`load_calibration`] for
/// the calibration half of the sidecar.
pub fn load_frame(path: &Path) -> Result<DepthFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, depth) = decode_pgm(&bytes, path)?;
    let sidecar = load_sidecar(path)?;
    DepthFrame::new(width, height, depth, sidecar.frame_id)
}

pub fn load_calibration(path: &Path) -> Result<Calibration> {
    let calib = load_sidecar(path)?.calibration();
    calib.validate()?;
    Ok(calib)
}

pub fn load_frame_with_calibration(path: &Path) -> Result<(DepthFrame, Calibration)> {
    let frame = load_frame(path)?;
    let calib = load_calibration(path)?;
    Ok((frame, calib))
}

/// Writes the raster and its sidecar.
pub fn save_frame(frame: &DepthFrame, calib: &Calibration, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        frame_id: frame.frame_id.clone(),
        sensor_height_mm: calib.sensor_height_mm,
        scale_mm_per_px: calib.scale_mm_per_px,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

/// Hand-annotated (or generated) head positions of one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub frame_id: String,
    pub points: Vec<Point>,
}

impl AnnotationSet {
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if p.x < 0 || p.y < 0 || p.x as usize >= width || p.y as usize >= height {
                return Err(Error::Bounds(format!(
                    "annotation ({}, {}) outside {width}x{height} frame {}",
                    p.x, p.y, self.frame_id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines file, one record per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationSet>> {
    read_jsonl(path)
}

pub fn write_annotations(path: &Path, sets: &[AnnotationSet]) -> Result<()> {
    write_jsonl(path, sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn loads_literal_raster() {
        let dir = tmp();
        let path = dir.path().join("f.pgm");
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        for v in [0u16, 1200, 3000, 65535] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&path, bytes).unwrap();
        fs::write(
            dir.path().join("f.json"),
            r#"{"frame_id":"a","sensor_height_mm":3000,"scale_mm_per_px":10}"#,
        )
        .unwrap();
        let frame = load_frame(&path).unwrap();
        assert_eq!(frame.depth, vec![0, 1200, 3000, 65535]);
        assert_eq!(frame.at(0, 0), INVALID_DEPTH);
        assert_eq!(frame.frame_id, "a");
        let calib = load_calibration(&path).unwrap();
        assert_eq!(calib.sensor_height_mm, 3000.0);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tmp();
        let path = dir.path().join("t.pgm");
        let mut bytes = b"P5\n3 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0u8; 10]);
        fs::write(&path, bytes).unwrap();
        fs::write(
            dir.path().join("t.json"),
            r#"{"frame_id":"t","sensor_height_mm":3000,"scale_mm_per_px":10}"#,
        )
        .unwrap();
        match load_frame(&path) {
            Err(Error::TruncatedPayload { expected, found, .. }) => {
                assert_eq!(expected, 12);
                assert_eq!(found, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_and_sidecar_errors_are_distinct() {
        let dir = tmp();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P2\n1 1\n65535\n\0\0").unwrap();
        assert!(matches!(load_frame(&path), Err(Error::MalformedHeader { .. })));

        let frame = DepthFrame::new(1, 1, vec![5], "x").unwrap();
        fs::write(&path, encode_pgm(&frame)).unwrap();
        assert!(matches!(load_frame(&path), Err(Error::MissingSidecar(_))));
    }

    #[test]
    fn all_zero_frame_reloads_invalid() {
        let dir = tmp();
        let path = dir.path().join("z.pgm");
        let frame = DepthFrame::new(4, 3, vec![0; 12], "z").unwrap();
        save_frame(&frame, &Calibration::default(), &path).unwrap();
        let back = load_frame(&path).unwrap();
        let hf = to_height_field(&back, &Calibration::default());
        assert_eq!(hf.valid_count(), 0);
    }

    #[test]
    fn full_sensor_payload_size() {
        let frame = DepthFrame::new(512, 424, vec![1000; 512 * 424], "k").unwrap();
        let bytes = encode_pgm(&frame);
        let header = b"P5\n512 424\n65535\n".len();
        assert_eq!(bytes.len(), header + 2 * 512 * 424);
    }

    #[test]
    fn height_conversion_rules() {
        let frame = DepthFrame::new(3, 1, vec![1200, 0, 3500], "h").unwrap();
        let calib = Calibration {
            sensor_height_mm: 3000.0,
            scale_mm_per_px: 10.0,
        };
        let hf = to_height_field(&frame, &calib);
        assert_eq!(hf.h[0], 1800.0);
        assert!(!hf.valid[1]);
        assert!(hf.valid[2]);
        assert_eq!(hf.h[2], 0.0);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let hf = HeightField::from_fn(5, 3, |x, y| (x != 2 || y != 1).then_some((x * 10 + y) as f32));
        let r = hf.rot90();
        assert_eq!((r.width, r.height), (3, 5));
        // out(x, y) = in(W - 1 - y, x)
        assert_eq!(r.at(1, 0), hf.at(4, 1));
        assert_eq!(hf.rotated(4), hf);
    }

    #[test]
    fn annotation_jsonl_roundtrip() {
        let dir = tmp();
        let path = dir.path().join("a.jsonl");
        let sets = vec![
            AnnotationSet {
                frame_id: "f0".into(),
                points: vec![Point::new(1, 2), Point::new(30, 4)],
            },
            AnnotationSet {
                frame_id: "f1".into(),
                points: vec![],
            },
        ];
        write_annotations(&path, &sets).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"frame_id":"f0","points":[[1,2],[30,4]]}"#));
        assert_eq!(read_annotations(&path).unwrap(), sets);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn save_load_roundtrip(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let depth: Vec<u16> = (0..w * h).map(|_| rng.random()).collect();
            let frame = DepthFrame::new(w, h, depth, format!("p{seed}")).unwrap();
            let dir = tmp();
            let path = dir.path().join("p.pgm");
            save_frame(&frame, &Calibration::default(), &path).unwrap();
            prop_assert_eq!(load_frame(&path).unwrap(), frame);
        }

        #[test]
        fn height_field_bounds(depth in proptest::collection::vec(any::<u16>(), 1..200), sensor in 500.0f64..5000.0) {
            let n = depth.len();
            let frame = DepthFrame::new(n, 1, depth.clone(), "b").unwrap();
            let calib = Calibration { sensor_height_mm: sensor, scale_mm_per_px: 10.0 };
            let hf = to_height_field(&frame, &calib);
            for i in 0..n {
                prop_assert_eq!(hf.valid[i], depth[i] != 0);
                if hf.valid[i] {
                    prop_assert!(hf.h[i] >= 0.0 && hf.h[i] as f64 <= sensor + 1e-3);
                }
            }
        }
    }
}
