//! Serialization and rendering of backtest reports: CSV table, plain-text
//! summary, accuracy heat grid and accuracy-vs-step curves.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{GaitError, Result};
use crate::eval::{EvalReport, MetricEntry, AVERAGE, SOURCE, TARGET};

pub const CSV_HEADER: [&str; 5] = ["step", "test_set", "condition", "rank1", "mAP"];

pub fn write_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in &report.entries {
        w.serialize(e).map_err(csv_err)?;
    }
    if report.entries.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    w.flush().map_err(|e| GaitError::Data(format!("cannot write report: {e}")))
}

pub fn read_csv<R: Read>(input: R) -> Result<EvalReport> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(GaitError::Data(format!("unexpected report header {header:?}")));
    }
    let entries = r.deserialize::<MetricEntry>().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok(EvalReport { entries, ..EvalReport::default() })
}

fn csv_err(e: csv::Error) -> GaitError {
    GaitError::Data(format!("malformed report: {e}"))
}

pub fn save_csv(report: &EvalReport, path: &Path) -> Result<()> {
    write_csv(report, std::fs::File::create(path).map_err(|e| GaitError::io(path, e))?)
}

pub fn load_csv(path: &Path) -> Result<EvalReport> {
    read_csv(std::fs::File::open(path).map_err(|e| GaitError::io(path, e))?)
}

/// Plain-text summary: the rank-1 matrix followed by the aggregates.
pub fn summary(report: &EvalReport) -> String {
    let (steps, sets, matrix) = report.accuracy_matrix();
    let mut s = String::new();
    let _ = write!(s, "{:>6}", "step");
    for t in &sets {
        let _ = write!(s, " {t:>10}");
    }
    for a in [SOURCE, TARGET, AVERAGE] {
        let _ = write!(s, " {a:>10}");
    }
    s.push('\n');
    for (step, row) in steps.iter().zip(&matrix) {
        let _ = write!(s, "{step:>6}");
        let aggregates = [report.source(*step), report.target(*step), report.average(*step)];
        for v in row.iter().chain(&aggregates) {
            match v {
                Some(v) => {
                    let _ = write!(s, " {v:>10.2}");
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    for (step, keys) in &report.flagged {
        let _ = writeln!(s, "step {step}: {} probe(s) without a gallery match: {}", keys.len(), keys.join(", "));
    }
    s
}

const CELL: u32 = 32;
const GAP: Rgb<u8> = Rgb([48, 48, 48]);
const MISSING: Rgb<u8> = Rgb([128, 128, 128]);

/// Dark blue at 0% through yellow at 100%.
fn ramp(pct: f64) -> Rgb<u8> {
    let t = (pct / 100.0).clamp(0.0, 1.0);
    Rgb([(255.0 * t) as u8, (40.0 + 180.0 * t) as u8, (140.0 * (1.0 - t)) as u8])
}

/// Rank-1 matrix as a heat grid, one cell per (step, test set), steps
/// down and test sets across. Unevaluated cells are grey.
pub fn heat_grid(report: &EvalReport) -> RgbImage {
    let (steps, sets, matrix) = report.accuracy_matrix();
    let (cols, rows) = (sets.len().max(1) as u32, steps.len().max(1) as u32);
    let mut img = RgbImage::from_pixel(cols * CELL + 1, rows * CELL + 1, GAP);
    for (r, row) in matrix.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let color = v.map_or(MISSING, ramp);
            for y in 1..CELL {
                for x in 1..CELL {
                    img.put_pixel(c as u32 * CELL + x, r as u32 * CELL + y, color);
                }
            }
        }
    }
    img
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 12;
const SERIES: [(&str, Rgb<u8>); 3] = [(SOURCE, Rgb([200, 40, 40])), (TARGET, Rgb([40, 90, 200])), (AVERAGE, Rgb([40, 150, 60]))];

/// Source (red), target (blue) and average (green) rank-1 against step on a
/// 0–100 axis, with faint gridlines every 20 points.
pub fn accuracy_curves(report: &EvalReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W + 2 * MARGIN, PLOT_H + 2 * MARGIN, Rgb([255, 255, 255]));
    let steps = report.steps();
    let span = (steps.len().max(2) - 1) as f64;
    let to_px = |i: usize, v: f64| {
        let x = MARGIN as f64 + PLOT_W as f64 * i as f64 / span;
        let y = MARGIN as f64 + PLOT_H as f64 * (1.0 - v.clamp(0.0, 100.0) / 100.0);
        (x, y)
    };
    for k in 0..=5 {
        let y = MARGIN + PLOT_H * k / 5;
        let shade = if k == 5 { Rgb([0, 0, 0]) } else { Rgb([225, 225, 225]) };
        for x in MARGIN..=MARGIN + PLOT_W {
            img.put_pixel(x, y, shade);
        }
    }
    for y in MARGIN..=MARGIN + PLOT_H {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    for (name, color) in SERIES {
        let pts: Vec<(f64, f64)> =
            steps.iter().enumerate().filter_map(|(i, &s)| report.rank1(s, name).map(|v| to_px(i, v))).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &pts {
            dot(&mut img, x, y, color);
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        put(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), color);
    }
}

fn dot(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx as f64, y + dy as f64, color);
        }
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| GaitError::Data(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ALL;

    fn sample() -> EvalReport {
        let mut r = EvalReport::default();
        let mut push = |step, set: &str, cond: &str, rank1, map| {
            r.entries.push(MetricEntry { step, test_set: set.into(), condition: cond.into(), rank1, map })
        };
        push(1, "domain0", ALL, 70.0, 61.234567890123);
        push(1, "domain0", "NM", 70.0, 61.234567890123);
        push(1, SOURCE, ALL, 70.0, 61.234567890123);
        push(2, "domain0", ALL, 1.0 / 3.0 * 100.0, 0.1 + 0.2);
        push(2, "domain1", ALL, 100.0, 100.0);
        push(2, SOURCE, ALL, 1.0 / 3.0 * 100.0, 0.1 + 0.2);
        r
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,test_set,condition,rank1,mAP\n"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn empty_report_keeps_header() {
        let mut buf = Vec::new();
        write_csv(&EvalReport::default(), &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), EvalReport::default());
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_csv("step,test_set,condition,rank1,mAP\nx,d,ALL,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn heat_grid_shape_and_missing_cells() {
        let img = heat_grid(&sample());
        assert_eq!(img.dimensions(), (2 * CELL + 1, 2 * CELL + 1));
        assert_eq!(*img.get_pixel(CELL + 5, 5), MISSING);
        assert_eq!(*img.get_pixel(CELL + 5, CELL + 5), ramp(100.0));
        assert_eq!(*img.get_pixel(0, 0), GAP);
    }

    #[test]
    fn summary_lists_every_step() {
        let s = summary(&sample());
        assert_eq!(s.lines().count(), 3);
        assert!(s.contains("33.33"));
    }

    #[test]
    fn curves_render() {
        let img = accuracy_curves(&sample());
        assert_eq!(img.dimensions(), (PLOT_W + 2 * MARGIN, PLOT_H + 2 * MARGIN));
        // source at 70% on the first step
        let (x, y) = (MARGIN, MARGIN + (PLOT_H as f64 * 0.3).round() as u32);
        assert_eq!(*img.get_pixel(x + 1, y), SERIES[0].1);
    }
}
