//! CSV tables and unlabelled PNG line plots for analysis outputs. Plots carry
//! no text; the matching CSV holds the numbers and a `#`-prefixed header
//! describes the protocol.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::{AblationTable, SubsetReport};
use crate::error::{Error, Result};

/// Write `rows` under `header`, preceded by `# `-prefixed comment lines.
pub fn write_csv(path: &Path, comments: &[String], header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a table written by [`write_csv`], skipping comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let bad = |e: csv::Error| Error::corrupt(path, e.to_string());
    let header = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()).map_err(bad))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// `class_id, subset, rank, id, similarity` for every report.
pub fn subset_rows(reports: &[SubsetReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["class_id", "subset", "rank", "id", "similarity"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for r in reports {
        for (subset, ids) in [("most", &r.most_k), ("least", &r.least_k)] {
            for (rank, id) in ids.iter().enumerate() {
                rows.push(vec![
                    r.class_id.to_string(),
                    subset.to_string(),
                    rank.to_string(),
                    id.clone(),
                    format!("{:.9}", r.similarity[id]),
                ]);
            }
        }
    }
    (header, rows)
}

/// Long-form ablation table, one line per `(ratio, seed)`.
pub fn ablation_rows(table: &AblationTable) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["ratio", "seed", "final_denoise", "final_align", "frechet", "diversity"]
        .map(String::from)
        .to_vec();
    let rows = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.ratio.to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.final_denoise),
                format!("{:.6}", r.final_align),
                format!("{:.6}", r.frechet),
                format!("{:.6}", r.diversity),
            ]
        })
        .collect();
    (header, rows)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Line plot of each series (x ascending) on shared axes, colours in order.
pub fn plot_series(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let (w, h, m) = (480u32, 320u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let axis = Rgb([0, 0, 0]);
    let (right, bottom) = (w as i64 - m, h as i64 - m);
    line(&mut img, (m, bottom), (right, bottom), axis);
    line(&mut img, (m, m), (m, bottom), axis);
    if !pts.is_empty() {
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
        };
        let (xl, xh) = span(|p| p.0);
        let (yl, yh) = span(|p| p.1);
        let px = |x: f64| m + ((x - xl) / (xh - xl) * (right - m) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - yl) / (yh - yl) * (bottom - m) as f64).round() as i64;
        for (i, s) in series.iter().enumerate() {
            let c = Rgb(PALETTE[i % PALETTE.len()]);
            let s: Vec<(i64, i64)> = s
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| (px(x), py(y)))
                .collect();
            for pair in s.windows(2) {
                line(&mut img, pair[0], pair[1], c);
            }
            for &(x, y) in &s {
                for d in -2..=2 {
                    line(&mut img, (x + d, y - 2), (x + d, y + 2), c);
                }
            }
        }
    }
    Ok(img.save(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let header = vec!["a".to_string(), "b".to_string()];
        let rows = vec![vec!["1".to_string(), "x,y".to_string()]];
        write_csv(&p, &["protocol: test".into()], &header, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), (header, rows));
    }

    #[test]
    fn plot_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        plot_series(&p, &[vec![(0.1, 1.0), (0.2, 3.0), (0.3, 2.0)], vec![(0.1, 0.5)]]).unwrap();
        plot_series(&dir.path().join("empty.png"), &[]).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (480, 320));
    }
}
