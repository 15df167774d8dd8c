//! Minimal SVG trace and autocorrelation plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bsem_core::diagnostics::autocorr;
use bsem_core::sampler::DrawStore;
use bsem_core::Result;

use crate::PlotWhat;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const MAX_LAG: usize = 50;
const COLORS: [&str; 6] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];
/// Trace plots keep at most this many points per chain.
const MAX_POINTS: usize = 2000;

fn frame(title: &str, xlab: &str, lo: f64, hi: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        PAD / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlab}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#,
        PAD - 4.0,
        PAD + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#,
        PAD - 4.0,
        H - PAD + 4.0
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str) -> String {
    let pts: Vec<String> = points.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
        pts.join(" ")
    ) + "\n"
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - PAD - (v - lo) / span * (H - 2.0 * PAD)
}

fn trace_svg(draws: &DrawStore, k: usize) -> String {
    let chains: Vec<Vec<f64>> = (0..draws.n_chains()).map(|c| draws.param(c, k)).collect();
    let lo = chains
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = chains
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = draws.n_iter.max(2);
    let step = n.div_ceil(MAX_POINTS);
    let mut s = frame(&draws.names[k], "iteration", lo, hi);
    for (c, x) in chains.iter().enumerate() {
        let pts = x.iter().enumerate().step_by(step).map(|(i, v)| {
            (
                PAD + i as f64 / (n - 1) as f64 * (W - 2.0 * PAD),
                scale(*v, lo, hi),
            )
        });
        s.push_str(&polyline(pts, COLORS[c % COLORS.len()]));
    }
    s.push_str("</svg>\n");
    s
}

fn autocorr_svg(draws: &DrawStore, k: usize) -> String {
    let (lo, hi) = (-1.0, 1.0);
    let mut s = frame(&draws.names[k], "lag", lo, hi);
    let zero = scale(0.0, lo, hi);
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{zero}" x2="{}" y2="{zero}" stroke="#999"/>"##,
        W - PAD
    );
    for c in 0..draws.n_chains() {
        let ac = autocorr(&draws.param(c, k), MAX_LAG);
        let pts = ac.iter().enumerate().map(|(lag, r)| {
            (
                PAD + lag as f64 / MAX_LAG as f64 * (W - 2.0 * PAD),
                scale(*r, lo, hi),
            )
        });
        s.push_str(&polyline(pts, COLORS[c % COLORS.len()]));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per parameter index and returns the paths.
pub fn write_plots(
    draws: &DrawStore,
    idx: &[usize],
    what: PlotWhat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(idx.len());
    for &k in idx {
        let (tag, svg) = match what {
            PlotWhat::Trace => ("trace", trace_svg(draws, k)),
            PlotWhat::Autocorr => ("autocorr", autocorr_svg(draws, k)),
        };
        let path = dir.join(format!("{tag}_{}.svg", k + 1));
        std::fs::write(&path, svg)?;
        out.push(path);
    }
    Ok(out)
}
