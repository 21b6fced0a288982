//! Raw capture parsing, range normalization, and dynamic feature extraction.
//!
//! A capture is a multivariate time series of pen samples: coordinates,
//! pressure, cumulative timestamp, and a tri-state stroke flag (1 = stroke
//! start, 0 = continuation, 2 = stroke end). This module validates the stroke
//! grammar, maps coordinates and pressure into fixed ranges, derives the
//! twelve per-point writing functions (velocities, tangent angle, curvature,
//! accelerations), and assembles the final node-feature matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Division/log guard used throughout feature extraction.
pub const EPS: f64 = 1e-8;

/// One pen sample: position, pressure, cumulative time, stroke state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    pub p: f64,
    /// Seconds since the first sample.
    pub t: f64,
    /// Stroke state: 1 start, 0 continue, 2 end.
    pub f: u8,
}

/// A capture in raw device units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignature {
    pub points: Vec<SamplePoint>,
}

/// A capture with x, y in `[-1, 1]` and p in `[0, 1]`; time and stroke
/// structure untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSignature {
    pub points: Vec<SamplePoint>,
}

/// Per-point feature matrix with channel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// L x d_f, row per sample.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
}

/// Which log-curvature formula to emit.
///
/// `TangentAngle` is the literal `log(v / theta)` form; `AngularRate` is the
/// conventional `log(v / theta_dot)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoVariant {
    #[default]
    TangentAngle,
    AngularRate,
}

/// Names of the twelve extracted channels, in emission order.
pub const TIME_FUNCTION_NAMES: [&str; 12] = [
    "p", "dx", "dy", "v", "theta", "cos_theta", "sin_theta", "dv", "dtheta", "rho", "ac", "an",
];

impl RawSignature {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flags(&self) -> Vec<u8> {
        self.points.iter().map(|p| p.f).collect()
    }

    /// Checks length, timestamp monotonicity, and the stroke grammar.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidSignature(format!(
                "need at least 2 points, got {}",
                self.points.len()
            )));
        }
        if self.points[0].t != 0.0 {
            return Err(Error::InvalidSignature(format!(
                "first timestamp must be 0, got {}",
                self.points[0].t
            )));
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if w[1].t < w[0].t {
                return Err(Error::InvalidSignature(format!(
                    "timestamps decrease at index {}: {} -> {}",
                    i + 1,
                    w[0].t,
                    w[1].t
                )));
            }
        }
        stroke_spans(&self.flags())?;
        Ok(())
    }
}

impl NormalizedSignature {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flags(&self) -> Vec<u8> {
        self.points.iter().map(|p| p.f).collect()
    }

    /// L x 2 matrix of normalized pen coordinates.
    pub fn coords(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.points.len(), 2));
        for (i, pt) in self.points.iter().enumerate() {
            m[[i, 0]] = pt.x;
            m[[i, 1]] = pt.y;
        }
        m
    }
}

/// Splits a flag sequence into inclusive `(start, end)` stroke spans.
///
/// The grammar is `(1 0* 2)+`: every stroke opens with 1 and closes with 2,
/// so each stroke covers at least two samples.
pub fn stroke_spans(flags: &[u8]) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, open) {
            (1, None) => open = Some(i),
            (1, Some(_)) => {
                return Err(Error::InvalidSignature(format!(
                    "stroke start at index {i} inside an open stroke"
                )))
            }
            (0, Some(_)) => {}
            (2, Some(s)) => {
                spans.push((s, i));
                open = None;
            }
            (0, None) | (2, None) => {
                return Err(Error::InvalidSignature(format!(
                    "flag {f} at index {i} outside any stroke"
                )))
            }
            (other, _) => {
                return Err(Error::InvalidSignature(format!(
                    "flag value {other} at index {i} not in {{0,1,2}}"
                )))
            }
        }
    }
    if let Some(s) = open {
        return Err(Error::InvalidSignature(format!(
            "stroke opened at index {s} never closes"
        )));
    }
    if spans.is_empty() {
        return Err(Error::InvalidSignature("no strokes present".into()));
    }
    Ok(spans)
}

/// Min-max normalization of coordinates and pressure.
///
/// x and y share a single scale (half the larger side of the bounding box) so
/// the aspect ratio survives; pressure maps to `[0, 1]`. Channels with zero
/// range map to 0.
pub fn normalize_signature(raw: &RawSignature) -> Result<NormalizedSignature> {
    raw.validate()?;
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut pmin, mut pmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for pt in &raw.points {
        xmin = xmin.min(pt.x);
        xmax = xmax.max(pt.x);
        ymin = ymin.min(pt.y);
        ymax = ymax.max(pt.y);
        pmin = pmin.min(pt.p);
        pmax = pmax.max(pt.p);
    }
    let cx = 0.5 * (xmin + xmax);
    let cy = 0.5 * (ymin + ymax);
    let scale = 0.5 * f64::max(xmax - xmin, ymax - ymin);
    let prange = pmax - pmin;

    let points = raw
        .points
        .iter()
        .map(|pt| SamplePoint {
            x: if scale > 0.0 { (pt.x - cx) / scale } else { 0.0 },
            y: if scale > 0.0 { (pt.y - cy) / scale } else { 0.0 },
            p: if prange > 0.0 { (pt.p - pmin) / prange } else { 0.0 },
            t: pt.t,
            f: pt.f,
        })
        .collect();
    Ok(NormalizedSignature { points })
}

/// Timestamp-aware finite difference along one stroke: central in the
/// interior, one-sided at the stroke endpoints.
fn stroke_derivative(values: &[f64], times: &[f64], out: &mut [f64]) {
    let n = values.len();
    debug_assert!(n >= 2);
    out[0] = (values[1] - values[0]) / (times[1] - times[0]);
    out[n - 1] = (values[n - 1] - values[n - 2]) / (times[n - 1] - times[n - 2]);
    for i in 1..n - 1 {
        out[i] = (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1]);
    }
}

/// Extracts the twelve writing functions per point, using the literal
/// log-curvature form. Output is not yet centralized.
pub fn extract_time_functions(sig: &NormalizedSignature) -> Result<FeatureSequence> {
    extract_time_functions_with(sig, RhoVariant::TangentAngle)
}

/// Extraction with a selectable log-curvature formula.
///
/// Derivatives never cross stroke boundaries. The tangent angle carries its
/// previous value through zero-motion samples (0 at a stroke start), and is
/// unwrapped per stroke before differencing.
pub fn extract_time_functions_with(
    sig: &NormalizedSignature,
    rho_variant: RhoVariant,
) -> Result<FeatureSequence> {
    let flags = sig.flags();
    let spans = stroke_spans(&flags)?;
    let n = sig.points.len();

    // Corrupt capture check: equal consecutive timestamps inside a stroke.
    for &(s, e) in &spans {
        for i in s..e {
            if sig.points[i + 1].t == sig.points[i].t {
                return Err(Error::InvalidSignature(format!(
                    "repeated timestamp {} at index {} within a stroke",
                    sig.points[i].t,
                    i + 1
                )));
            }
        }
    }

    let mut values = Array2::zeros((n, 12));
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut theta = vec![0.0; n];
    let mut unwrapped = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut dtheta = vec![0.0; n];

    for &(s, e) in &spans {
        let xs: Vec<f64> = sig.points[s..=e].iter().map(|p| p.x).collect();
        let ys: Vec<f64> = sig.points[s..=e].iter().map(|p| p.y).collect();
        let ts: Vec<f64> = sig.points[s..=e].iter().map(|p| p.t).collect();
        stroke_derivative(&xs, &ts, &mut dx[s..=e]);
        stroke_derivative(&ys, &ts, &mut dy[s..=e]);
        for i in s..=e {
            v[i] = (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
        }
        let mut prev = 0.0;
        for i in s..=e {
            if dx[i] == 0.0 && dy[i] == 0.0 {
                theta[i] = prev;
            } else {
                theta[i] = dy[i].atan2(dx[i]);
                prev = theta[i];
            }
        }
        unwrapped[s] = theta[s];
        for i in s + 1..=e {
            let mut d = theta[i] - theta[i - 1];
            d -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            unwrapped[i] = unwrapped[i - 1] + d;
        }
        let ts2 = ts;
        stroke_derivative(&v[s..=e].to_vec(), &ts2, &mut dv[s..=e]);
        stroke_derivative(&unwrapped[s..=e].to_vec(), &ts2, &mut dtheta[s..=e]);
    }

    for i in 0..n {
        let rho_den = match rho_variant {
            RhoVariant::TangentAngle => theta[i].abs(),
            RhoVariant::AngularRate => dtheta[i].abs(),
        };
        let rho = ((v[i] + EPS) / (rho_den + EPS)).ln();
        let ac = v[i] * dtheta[i].abs();
        let an = (dv[i] * dv[i] + ac * ac).sqrt();
        values[[i, 0]] = sig.points[i].p;
        values[[i, 1]] = dx[i];
        values[[i, 2]] = dy[i];
        values[[i, 3]] = v[i];
        values[[i, 4]] = theta[i];
        values[[i, 5]] = theta[i].cos();
        values[[i, 6]] = theta[i].sin();
        values[[i, 7]] = dv[i];
        values[[i, 8]] = dtheta[i];
        values[[i, 9]] = rho;
        values[[i, 10]] = ac;
        values[[i, 11]] = an;
    }

    Ok(FeatureSequence {
        values,
        channel_names: TIME_FUNCTION_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Subtracts each channel's per-signature mean.
pub fn centralize(fs: &FeatureSequence) -> FeatureSequence {
    let n = fs.values.nrows() as f64;
    let mut values = fs.values.clone();
    for mut col in values.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|x| x - mean);
    }
    FeatureSequence {
        values,
        channel_names: fs.channel_names.clone(),
    }
}

/// Concatenates normalized x, y, p and the per-point time increment with the
/// twelve centralized functions into the 16-channel node-feature matrix.
///
/// The increment channel is 0 at stroke starts so no interval spans a pen
/// lift. `fs` is expected to already be centralized.
pub fn assemble_input(sig: &NormalizedSignature, fs: &FeatureSequence) -> Result<FeatureSequence> {
    let n = sig.points.len();
    if fs.values.nrows() != n {
        return Err(Error::InvalidSignature(format!(
            "length mismatch: signature has {n} points, features have {}",
            fs.values.nrows()
        )));
    }
    let d = 4 + fs.values.ncols();
    let mut values = Array2::zeros((n, d));
    for i in 0..n {
        let pt = &sig.points[i];
        values[[i, 0]] = pt.x;
        values[[i, 1]] = pt.y;
        values[[i, 2]] = pt.p;
        values[[i, 3]] = if pt.f == 1 || i == 0 {
            0.0
        } else {
            pt.t - sig.points[i - 1].t
        };
        for c in 0..fs.values.ncols() {
            values[[i, 4 + c]] = fs.values[[i, c]];
        }
    }
    let mut channel_names = vec!["x".into(), "y".into(), "p".into(), "dt".into()];
    channel_names.extend(fs.channel_names.iter().map(|c| format!("{c}_c")));
    Ok(FeatureSequence {
        values,
        channel_names,
    })
}

/// Reads the on-disk capture format: UTF-8 CSV, header `t,x,y,p,s`.
pub fn read_signature_csv(path: &Path) -> Result<RawSignature> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "t,x,y,p,s")) => {}
        Some((_, other)) => {
            return Err(Error::SignatureParse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header `t,x,y,p,s`, got `{other}`"),
            })
        }
        None => {
            return Err(Error::SignatureParse {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::SignatureParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |ix: usize, name: &str| -> Result<f64> {
            fields[ix].parse::<f64>().map_err(|_| Error::SignatureParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad {name} value `{}`", fields[ix]),
            })
        };
        let t = num(0, "t")?;
        let x = num(1, "x")?;
        let y = num(2, "y")?;
        let p = num(3, "p")?;
        let f: u8 = match fields[4] {
            "0" => 0,
            "1" => 1,
            "2" => 2,
            other => {
                return Err(Error::SignatureParse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("stroke state `{other}` not in {{0,1,2}}"),
                })
            }
        };
        points.push(SamplePoint { x, y, p, t, f });
    }
    Ok(RawSignature { points })
}

/// Writes the capture format. Floats use the shortest round-trip form, so a
/// write/read cycle is bit-exact.
pub fn write_signature_csv(path: &Path, sig: &RawSignature) -> Result<()> {
    let mut out = String::with_capacity(sig.points.len() * 32 + 16);
    out.push_str("t,x,y,p,s\n");
    for pt in &sig.points {
        let _ = writeln!(out, "{},{},{},{},{}", pt.t, pt.x, pt.y, pt.p, pt.f);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, p: f64, t: f64, f: u8) -> SamplePoint {
        SamplePoint { x, y, p, t, f }
    }

    fn single_stroke(xy: &[(f64, f64)], dt: f64) -> RawSignature {
        let n = xy.len();
        let points = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let f = if i == 0 {
                    1
                } else if i == n - 1 {
                    2
                } else {
                    0
                };
                pt(x, y, 0.5, i as f64 * dt, f)
            })
            .collect();
        RawSignature { points }
    }

    #[test]
    fn square_fills_unit_box_preserving_aspect() {
        let raw = single_stroke(&[(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)], 1.0);
        let norm = normalize_signature(&raw).unwrap();
        let expect = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        for (p, &(ex, ey)) in norm.points.iter().zip(&expect) {
            assert_eq!(p.x, ex);
            assert_eq!(p.y, ey);
        }
    }

    #[test]
    fn flat_rectangle_keeps_aspect_ratio() {
        let raw = single_stroke(&[(0.0, 0.0), (100.0, 50.0)], 1.0);
        let norm = normalize_signature(&raw).unwrap();
        assert_eq!(norm.points[0].x, -1.0);
        assert_eq!(norm.points[1].x, 1.0);
        assert_eq!(norm.points[0].y, -0.5);
        assert_eq!(norm.points[1].y, 0.5);
    }

    #[test]
    fn degenerate_ranges_map_to_zero() {
        let points = vec![pt(5.0, 7.0, 0.3, 0.0, 1), pt(5.0, 7.0, 0.3, 1.0, 2)];
        let norm = normalize_signature(&RawSignature { points }).unwrap();
        for p in &norm.points {
            assert_eq!(p.x, 0.0);
            assert_eq!(p.y, 0.0);
            assert_eq!(p.p, 0.0);
        }
    }

    #[test]
    fn normalization_is_scale_and_shift_invariant() {
        // Power-of-two scale and exactly representable offsets keep every
        // intermediate float exact, so outputs must match bit for bit.
        let raw = single_stroke(&[(0.0, 0.0), (3.0, 1.0), (7.0, 5.0), (2.0, 6.0)], 0.5);
        let moved = RawSignature {
            points: raw
                .points
                .iter()
                .map(|p| SamplePoint {
                    x: 4.0 * p.x + 16.0,
                    y: 4.0 * p.y - 8.0,
                    ..*p
                })
                .collect(),
        };
        let a = normalize_signature(&raw).unwrap();
        let b = normalize_signature(&moved).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.x.to_bits(), pb.x.to_bits());
            assert_eq!(pa.y.to_bits(), pb.y.to_bits());
            assert_eq!(pa.p.to_bits(), pb.p.to_bits());
        }
    }

    #[test]
    fn grammar_violations_are_rejected() {
        let bad_flags: &[&[u8]] = &[
            &[0, 2],          // starts mid-stroke
            &[2, 1],          // closes before opening
            &[1, 0],          // never closes
            &[1, 2, 2],       // double close
            &[1, 1, 2],       // double open
            &[1, 0, 2, 0, 2], // reopen without start
        ];
        for flags in bad_flags {
            let points: Vec<SamplePoint> = flags
                .iter()
                .enumerate()
                .map(|(i, &f)| pt(i as f64, 0.0, 0.5, i as f64, f))
                .collect();
            assert!(
                RawSignature { points }.validate().is_err(),
                "flags {flags:?} should be rejected"
            );
        }
    }

    #[test]
    fn short_and_misstamped_captures_are_rejected() {
        let one = RawSignature {
            points: vec![pt(0.0, 0.0, 0.5, 0.0, 1)],
        };
        assert!(one.validate().is_err());

        let late_start = RawSignature {
            points: vec![pt(0.0, 0.0, 0.5, 1.0, 1), pt(1.0, 0.0, 0.5, 2.0, 2)],
        };
        assert!(late_start.validate().is_err());

        let decreasing = RawSignature {
            points: vec![
                pt(0.0, 0.0, 0.5, 0.0, 1),
                pt(1.0, 0.0, 0.5, 2.0, 0),
                pt(2.0, 0.0, 0.5, 1.0, 2),
            ],
        };
        assert!(decreasing.validate().is_err());
    }

    #[test]
    fn two_point_stroke_is_valid() {
        let raw = single_stroke(&[(0.0, 0.0), (1.0, 1.0)], 1.0);
        assert!(raw.validate().is_ok());
    }

    #[test]
    fn zero_motion_stroke_features() {
        let points = (0..5)
            .map(|i| {
                let f = if i == 0 {
                    1
                } else if i == 4 {
                    2
                } else {
                    0
                };
                pt(0.25, -0.5, 0.7, i as f64, f)
            })
            .collect();
        let sig = NormalizedSignature { points };
        let fs = extract_time_functions(&sig).unwrap();
        for i in 0..5 {
            assert_eq!(fs.values[[i, 3]], 0.0, "v");
            assert_eq!(fs.values[[i, 7]], 0.0, "dv");
            assert_eq!(fs.values[[i, 10]], 0.0, "ac");
            assert_eq!(fs.values[[i, 11]], 0.0, "an");
            assert_eq!(fs.values[[i, 4]], 0.0, "theta carried as 0");
            assert_eq!(fs.values[[i, 5]], 1.0, "cos theta");
            assert_eq!(fs.values[[i, 6]], 0.0, "sin theta");
        }
    }

    #[test]
    fn constant_velocity_line_features() {
        let points = (0..6)
            .map(|i| {
                let f = if i == 0 {
                    1
                } else if i == 5 {
                    2
                } else {
                    0
                };
                pt(i as f64 * 0.1, 0.0, 0.5, i as f64, f)
            })
            .collect();
        let sig = NormalizedSignature { points };
        let fs = extract_time_functions(&sig).unwrap();
        for i in 1..5 {
            assert!((fs.values[[i, 1]] - 0.1).abs() < 1e-15, "dx");
            assert_eq!(fs.values[[i, 2]], 0.0, "dy");
            assert!((fs.values[[i, 3]] - 0.1).abs() < 1e-15, "v");
            assert_eq!(fs.values[[i, 4]], 0.0, "theta");
            assert!(fs.values[[i, 7]].abs() < 1e-15, "dv");
            assert_eq!(fs.values[[i, 8]], 0.0, "dtheta");
            assert_eq!(fs.values[[i, 10]], 0.0, "ac");
            assert!(fs.values[[i, 11]].abs() < 1e-15, "an");
        }
    }

    /// Independent finite-difference oracle for one stroke: recomputes every
    /// channel straight from the definitions over the same timestamps.
    fn oracle_channels(xs: &[f64], ys: &[f64], ts: &[f64]) -> Vec<[f64; 12]> {
        let n = xs.len();
        let fd = |vals: &[f64], i: usize| -> f64 {
            if i == 0 {
                (vals[1] - vals[0]) / (ts[1] - ts[0])
            } else if i == n - 1 {
                (vals[n - 1] - vals[n - 2]) / (ts[n - 1] - ts[n - 2])
            } else {
                (vals[i + 1] - vals[i - 1]) / (ts[i + 1] - ts[i - 1])
            }
        };
        let dx: Vec<f64> = (0..n).map(|i| fd(xs, i)).collect();
        let dy: Vec<f64> = (0..n).map(|i| fd(ys, i)).collect();
        let v: Vec<f64> = (0..n).map(|i| dx[i].hypot(dy[i])).collect();
        let mut th = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            th[i] = if dx[i] == 0.0 && dy[i] == 0.0 {
                prev
            } else {
                dy[i].atan2(dx[i])
            };
            prev = th[i];
        }
        let mut un = vec![th[0]; n];
        for i in 1..n {
            let mut d = th[i] - th[i - 1];
            while d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            while d < -std::f64::consts::PI {
                d += std::f64::consts::TAU;
            }
            un[i] = un[i - 1] + d;
        }
        let dv: Vec<f64> = (0..n).map(|i| fd(&v, i)).collect();
        let dth: Vec<f64> = (0..n).map(|i| fd(&un, i)).collect();
        (0..n)
            .map(|i| {
                let rho = ((v[i] + EPS) / (th[i].abs() + EPS)).ln();
                let ac = v[i] * dth[i].abs();
                let an = (dv[i] * dv[i] + ac * ac).sqrt();
                [
                    0.5, dx[i], dy[i], v[i], th[i], th[i].cos(), th[i].sin(), dv[i], dth[i], rho,
                    ac, an,
                ]
            })
            .collect()
    }

    #[test]
    fn quarter_circle_matches_finite_difference_oracle() {
        let n = 5;
        let xy: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / (n - 1) as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let points: Vec<SamplePoint> = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let f = if i == 0 {
                    1
                } else if i == n - 1 {
                    2
                } else {
                    0
                };
                pt(x, y, 0.5, i as f64 * 0.25, f)
            })
            .collect();
        let sig = NormalizedSignature { points };
        let fs = extract_time_functions(&sig).unwrap();
        let xs: Vec<f64> = xy.iter().map(|q| q.0).collect();
        let ys: Vec<f64> = xy.iter().map(|q| q.1).collect();
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.25).collect();
        let want = oracle_channels(&xs, &ys, &ts);
        for i in 0..n {
            for c in 0..12 {
                assert!(
                    (fs.values[[i, c]] - want[i][c]).abs() < 1e-9,
                    "point {i} channel {} differs: {} vs {}",
                    TIME_FUNCTION_NAMES[c],
                    fs.values[[i, c]],
                    want[i][c]
                );
            }
        }
    }

    #[test]
    fn repeated_timestamp_within_stroke_is_rejected() {
        let points = vec![
            pt(0.0, 0.0, 0.5, 0.0, 1),
            pt(1.0, 0.0, 0.5, 1.0, 0),
            pt(2.0, 0.0, 0.5, 1.0, 2),
        ];
        let err = extract_time_functions(&NormalizedSignature { points }).unwrap_err();
        assert!(err.to_string().contains("repeated timestamp"));
    }

    #[test]
    fn timestamp_plateau_across_pen_lift_is_fine() {
        let points = vec![
            pt(0.0, 0.0, 0.5, 0.0, 1),
            pt(1.0, 0.0, 0.5, 1.0, 2),
            pt(2.0, 0.0, 0.5, 1.0, 1),
            pt(3.0, 0.0, 0.5, 2.0, 2),
        ];
        assert!(extract_time_functions(&NormalizedSignature { points }).is_ok());
    }

    #[test]
    fn centralize_subtracts_channel_means() {
        let fs = FeatureSequence {
            values: ndarray::arr2(&[[1.0], [2.0], [3.0]]),
            channel_names: vec!["v".into()],
        };
        let c = centralize(&fs);
        assert_eq!(c.values, ndarray::arr2(&[[-1.0], [0.0], [1.0]]));
        // idempotent on already-centered channels
        let cc = centralize(&c);
        assert_eq!(c.values, cc.values);
    }

    #[test]
    fn centralized_random_matrix_has_tiny_column_means() {
        let mut rng = crate::rng::stream(42);
        let values =
            Array2::from_shape_fn((4, 12), |_| crate::rng::uniform(&mut rng, -5.0, 5.0));
        let fs = FeatureSequence {
            values,
            channel_names: (0..12).map(|i| format!("c{i}")).collect(),
        };
        let c = centralize(&fs);
        for col in c.values.columns() {
            assert!((col.sum() / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_concatenates_raw_and_centralized_channels() {
        let raw = single_stroke(&[(0.0, 0.0), (50.0, 0.0), (100.0, 100.0), (0.0, 75.0)], 0.5);
        let sig = normalize_signature(&raw).unwrap();
        let fs = centralize(&extract_time_functions(&sig).unwrap());
        let full = assemble_input(&sig, &fs).unwrap();
        assert_eq!(full.values.ncols(), 16);
        assert_eq!(full.channel_names.len(), 16);
        for (i, ptn) in sig.points.iter().enumerate() {
            assert_eq!(full.values[[i, 0]].to_bits(), ptn.x.to_bits());
            assert_eq!(full.values[[i, 1]].to_bits(), ptn.y.to_bits());
            assert_eq!(full.values[[i, 2]].to_bits(), ptn.p.to_bits());
        }
        assert_eq!(full.values[[0, 3]], 0.0, "dt zero at stroke start");
        assert_eq!(full.values[[1, 3]], 0.5);
    }

    #[test]
    fn assemble_rejects_length_mismatch() {
        let raw = single_stroke(&[(0.0, 0.0), (1.0, 0.0), (2.0, 1.0)], 1.0);
        let sig = normalize_signature(&raw).unwrap();
        let fs = FeatureSequence {
            values: Array2::zeros((2, 12)),
            channel_names: (0..12).map(|i| format!("c{i}")).collect(),
        };
        assert!(assemble_input(&sig, &fs).is_err());
    }

    #[test]
    fn zero_motion_signature_assembles_to_zero_function_channels() {
        let points = (0..4)
            .map(|i| {
                let f = if i == 0 {
                    1
                } else if i == 3 {
                    2
                } else {
                    0
                };
                pt(10.0, 20.0, 0.5, i as f64, f)
            })
            .collect();
        let raw = RawSignature { points };
        let sig = normalize_signature(&raw).unwrap();
        let fs = centralize(&extract_time_functions(&sig).unwrap());
        let full = assemble_input(&sig, &fs).unwrap();
        for i in 0..4 {
            for c in 4..16 {
                assert_eq!(full.values[[i, c]], 0.0, "row {i} col {c}");
            }
        }
    }

    #[test]
    fn stroke_boundary_isolation() {
        let base = vec![
            pt(0.0, 0.0, 0.2, 0.0, 1),
            pt(0.3, 0.1, 0.4, 0.1, 0),
            pt(0.5, 0.4, 0.5, 0.2, 2),
            pt(0.7, 0.5, 0.6, 0.4, 1),
            pt(0.9, 0.8, 0.7, 0.5, 0),
            pt(1.0, 1.0, 0.8, 0.6, 2),
        ];
        let sig_a = NormalizedSignature {
            points: base.clone(),
        };
        let mut moved = base;
        moved[4].x = -0.4;
        moved[4].y = 0.9;
        let sig_b = NormalizedSignature { points: moved };
        let fa = extract_time_functions(&sig_a).unwrap();
        let fb = extract_time_functions(&sig_b).unwrap();
        // Derivative channels of the first stroke (rows 0..=2) are untouched
        // by edits inside the second stroke.
        for i in 0..3 {
            for c in 1..12 {
                assert_eq!(
                    fa.values[[i, c]].to_bits(),
                    fb.values[[i, c]].to_bits(),
                    "row {i} channel {c} leaked across the pen lift"
                );
            }
        }
    }

    #[test]
    fn rho_variant_switches_denominator() {
        let raw = single_stroke(&[(0.0, 0.0), (1.0, 1.0), (2.0, 3.0), (4.0, 4.0)], 0.5);
        let sig = normalize_signature(&raw).unwrap();
        let lit = extract_time_functions_with(&sig, RhoVariant::TangentAngle).unwrap();
        let conv = extract_time_functions_with(&sig, RhoVariant::AngularRate).unwrap();
        for i in 0..4 {
            let v = lit.values[[i, 3]];
            let th = lit.values[[i, 4]];
            let dth = lit.values[[i, 8]];
            assert!((lit.values[[i, 9]] - ((v + EPS) / (th.abs() + EPS)).ln()).abs() < 1e-15);
            assert!((conv.values[[i, 9]] - ((v + EPS) / (dth.abs() + EPS)).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn no_nan_or_inf_on_random_valid_inputs() {
        for seed in 0..100u64 {
            let mut rng = crate::rng::stream(seed);
            let n_strokes = 1 + crate::rng::index(&mut rng, 3);
            let mut points = Vec::new();
            let mut t = 0.0;
            for _ in 0..n_strokes {
                let len = 2 + crate::rng::index(&mut rng, 6);
                for i in 0..len {
                    let f = if i == 0 {
                        1
                    } else if i == len - 1 {
                        2
                    } else {
                        0
                    };
                    // Occasionally repeat a position to exercise zero motion.
                    let stall = crate::rng::unit_f64(&mut rng) < 0.3 && !points.is_empty();
                    let (x, y) = if stall && i > 0 {
                        let prev: &SamplePoint = points.last().unwrap();
                        (prev.x, prev.y)
                    } else {
                        (
                            crate::rng::uniform(&mut rng, -1.0, 1.0),
                            crate::rng::uniform(&mut rng, -1.0, 1.0),
                        )
                    };
                    let first = points.is_empty();
                    points.push(pt(
                        x,
                        y,
                        crate::rng::unit_f64(&mut rng),
                        if first { 0.0 } else { t },
                        f,
                    ));
                    t += 0.01 + crate::rng::unit_f64(&mut rng) * 0.05;
                }
                t += 0.1;
            }
            let sig = NormalizedSignature { points };
            let fs = extract_time_functions(&sig).unwrap();
            assert!(
                fs.values.iter().all(|v| v.is_finite()),
                "seed {seed} produced a non-finite feature"
            );
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.csv");
        let raw = single_stroke(&[(0.1, 0.2), (3.5, -1.25), (7.0, 2.625)], 0.01);
        write_signature_csv(&path, &raw).unwrap();
        let back = read_signature_csv(&path).unwrap();
        assert_eq!(raw, back);
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();

        let bad_header = dir.path().join("h.csv");
        fs::write(&bad_header, "time,x,y,p,s\n0,0,0,0,1\n").unwrap();
        let err = read_signature_csv(&bad_header).unwrap_err().to_string();
        assert!(err.contains("h.csv:1"), "{err}");

        let bad_state = dir.path().join("s.csv");
        fs::write(&bad_state, "t,x,y,p,s\n0,0,0,0,1\n0.1,1,1,0.5,3\n").unwrap();
        let err = read_signature_csv(&bad_state).unwrap_err().to_string();
        assert!(err.contains("s.csv:3") && err.contains("3"), "{err}");

        let bad_float = dir.path().join("f.csv");
        fs::write(&bad_float, "t,x,y,p,s\n0,zero,0,0,1\n").unwrap();
        let err = read_signature_csv(&bad_float).unwrap_err().to_string();
        assert!(err.contains("f.csv:2") && err.contains("zero"), "{err}");

        let missing = dir.path().join("nope.csv");
        let err = read_signature_csv(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.csv"), "{err}");
    }
}
