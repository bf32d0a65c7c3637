//! CSV and SVG output of Pd surfaces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Channel, Detector, Preprocessing};
use crate::error::{HarnessError, Result};
use crate::montecarlo::{FalseAlarms, PdPoint, PdSurface};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
    All,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    detector: String,
    preprocessing: String,
    snr_db: f64,
    doppler_bin: usize,
    pd: f64,
    ci: f64,
    trials: u64,
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::io(path, source),
        _ => HarnessError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg)),
    }
}

/// Long-format CSV: one row per channel and grid point.
pub fn surfaces_to_csv(surfaces: &[PdSurface]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in surfaces {
        for p in &s.points {
            w.serialize(Row {
                detector: s.channel.detector.label().into(),
                preprocessing: s.channel.preprocessing.label().into(),
                snr_db: p.snr_db,
                doppler_bin: p.doppler_bin,
                pd: p.pd(),
                ci: p.ci(),
                trials: p.trials,
            })
            .expect("in-memory CSV");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 CSV")
}

/// Parses [`surfaces_to_csv`] output back into surfaces, in file order.
pub fn surfaces_from_csv(text: &str) -> std::result::Result<Vec<PdSurface>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out: Vec<PdSurface> = Vec::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| format!("row {}: {e}", i + 1))?;
        let detector: Detector = row.detector.parse().map_err(|e: HarnessError| e.to_string())?;
        let preprocessing: Preprocessing = row.preprocessing.parse().map_err(|e: HarnessError| e.to_string())?;
        let channel = Channel::new(detector, preprocessing);
        if !(0.0..=1.0).contains(&row.pd) || row.trials == 0 {
            return Err(format!("row {}: invalid pd {} over {} trials", i + 1, row.pd, row.trials));
        }
        let point = PdPoint {
            snr_db: row.snr_db,
            doppler_bin: row.doppler_bin,
            detections: (row.pd * row.trials as f64).round() as u64,
            trials: row.trials,
        };
        match out.iter_mut().find(|s| s.channel == channel) {
            Some(s) => s.points.push(point),
            None => out.push(PdSurface {
                channel,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

pub fn write_surfaces_csv(surfaces: &[PdSurface], path: &Path) -> Result<()> {
    std::fs::write(path, surfaces_to_csv(surfaces)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_surfaces_csv(path: &Path) -> Result<Vec<PdSurface>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    surfaces_from_csv(&text)
        .map_err(|msg| HarnessError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg)))
}

/// Held-out false-alarm audit as CSV.
pub fn write_false_alarms_csv(rows: &[FalseAlarms], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct FaRow<'a> {
        detector: &'a str,
        preprocessing: &'a str,
        doppler_bin: usize,
        pfa: f64,
        alarms: u64,
        trials: u64,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(FaRow {
            detector: r.channel.detector.label(),
            preprocessing: r.channel.preprocessing.label(),
            doppler_bin: r.doppler_bin,
            pfa: r.rate(),
            alarms: r.alarms,
            trials: r.trials,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Piecewise-linear viridis approximation.
fn colormap(v: f64) -> String {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.00, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.50, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.00, [253.0, 231.0, 37.0]),
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let i = STOPS.iter().rposition(|s| s.0 <= v).unwrap_or(0).min(STOPS.len() - 2);
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let t = (v - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|k| (a.1[k] + t * (b.1[k] - a.1[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

/// Pd heatmap with Doppler bins across and SNR upward.
pub fn heatmap_svg(surface: &PdSurface) -> String {
    let snrs = surface.snr_grid();
    let bins = surface.bins();
    let (cw, ch) = (24.0, 12.0);
    let (left, top, bottom, right) = (60.0, 30.0, 40.0, 70.0);
    let width = left + cw * bins.len() as f64 + right;
    let height = top + ch * snrs.len() as f64 + bottom;
    let mut out = String::new();
    svg_open(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">P_d: {}</text>"#,
        left + cw * bins.len() as f64 / 2.0,
        surface.channel
    );
    for p in &surface.points {
        let xi = bins.iter().position(|&b| b == p.doppler_bin).expect("listed bin");
        let yi = snrs.iter().position(|&s| s == p.snr_db).expect("listed SNR");
        let x = left + cw * xi as f64;
        let y = top + ch * (snrs.len() - 1 - yi) as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}"><title>{} dB, bin {}: {:.4}</title></rect>"#,
            colormap(p.pd()),
            p.snr_db,
            p.doppler_bin,
            p.pd()
        );
    }
    let base = top + ch * snrs.len() as f64;
    for (xi, b) in bins.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{b}</text>"#,
            left + cw * (xi as f64 + 0.5),
            base + 14.0
        );
    }
    let step = snrs.len().div_ceil(12).max(1);
    for (yi, s) in snrs.iter().enumerate().step_by(step) {
        let y = top + ch * (snrs.len() - 1 - yi) as f64 + ch * 0.75;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{s}</text>"#, left - 6.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Doppler bin</text>"#,
        left + cw * bins.len() as f64 / 2.0,
        base + 32.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">SNR (dB)</text>"#,
        top + ch * snrs.len() as f64 / 2.0,
        top + ch * snrs.len() as f64 / 2.0
    );
    let bar_x = left + cw * bins.len() as f64 + 20.0;
    let bar_h = ch * snrs.len() as f64;
    for k in 0..20 {
        let v0 = k as f64 / 20.0;
        let y = top + bar_h * (1.0 - (k + 1) as f64 / 20.0);
        let _ = writeln!(
            out,
            r#"<rect x="{bar_x:.1}" y="{y:.1}" width="12" height="{:.2}" fill="{}"/>"#,
            bar_h / 20.0,
            colormap(v0 + 0.025)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">1</text>"#, bar_x + 16.0, top + 8.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">0</text>"#, bar_x + 16.0, top + bar_h);
    out.push_str("</svg>\n");
    out
}

/// Pd against SNR at one Doppler bin, one polyline per surface.
pub fn curves_svg(surfaces: &[PdSurface], doppler_bin: usize) -> String {
    let curves: Vec<(Channel, Vec<PdPoint>)> = surfaces
        .iter()
        .map(|s| (s.channel, s.curve(doppler_bin)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let (pw, ph) = (420.0, 260.0);
    let (left, top) = (50.0, 30.0);
    let width = left + pw + 150.0;
    let height = top + ph + 45.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, c) in &curves {
        for p in c {
            lo = lo.min(p.snr_db);
            hi = hi.max(p.snr_db);
        }
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let x_of = |s: f64| left + pw * (s - lo) / (hi - lo);
    let y_of = |pd: f64| top + ph * (1.0 - pd);
    let mut out = String::new();
    svg_open(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">P_d vs SNR, Doppler bin {doppler_bin}</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            left + pw
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for k in 0..=5 {
        let s = lo + (hi - lo) * k as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{s:.1}</text>"#,
            x_of(s),
            top + ph + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">SNR (dB)</text>"#,
        left + pw / 2.0,
        top + ph + 34.0
    );
    for (i, (channel, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.snr_db), y_of(p.pd())))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{channel}</text>"#, lx + 22.0, ly + 4.0);
    }
    out.push_str("</svg>\n");
    out
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `surfaces.csv`, one heatmap per surface and one curve plot per
/// Doppler bin into `dir`. Returns the files in write order.
pub fn emit_report(surfaces: &[PdSurface], dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    if surfaces.is_empty() {
        return Err(HarnessError::config("no surfaces to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::All) {
        write(dir.join("surfaces.csv"), &surfaces_to_csv(surfaces), &mut written)?;
    }
    if matches!(format, ReportFormat::Svg | ReportFormat::All) {
        for s in surfaces {
            write(dir.join(format!("pd_{}.svg", s.channel.slug())), &heatmap_svg(s), &mut written)?;
        }
        let mut bins: Vec<usize> = surfaces.iter().flat_map(PdSurface::bins).collect();
        bins.sort_unstable();
        bins.dedup();
        for b in bins {
            write(dir.join(format!("pd_snr_bin{b:02}.svg")), &curves_svg(surfaces, b), &mut written)?;
        }
    }
    Ok(written)
}
