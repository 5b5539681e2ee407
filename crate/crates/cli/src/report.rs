//! SVG figures rendered from `summary.json`.

use crate::commands::SummaryFile;
use crate::svg::{LineChart, Series};
use anyhow::{Context, Result};
use std::path::{Path, PathBuf};

pub const DIMENSIONALITY_SVG: &str = "dimensionality.svg";
pub const INVERSE_SPECTRUM_SVG: &str = "inverse_spectrum.svg";
pub const ALIGNMENT_SVG: &str = "alignment.svg";
pub const OVERLAP_SVGS: [(&str, &str); 3] = [
    ("overlap_uv.svg", "u, v"),
    ("overlap_uw.svg", "u, w"),
    ("overlap_vw.svg", "v, w"),
];

fn t_label(t: f64, sigma: f64) -> String {
    format!("t={t} (σ={sigma:.3})")
}

pub fn dimensionality_chart(s: &SummaryFile) -> LineChart {
    let mut c = LineChart::new("Estimated local dimensionality", "noise std σ", "dimension (mean, IQR bars)").log_x();
    let mut rows: Vec<_> = s.summaries.iter().collect();
    rows.sort_by(|a, b| a.noise_std.total_cmp(&b.noise_std));
    let points = rows.iter().map(|r| (r.noise_std, r.dim_mean)).collect();
    let bars = rows.iter().map(|r| (r.dim_quartiles.q25, r.dim_quartiles.q75)).collect();
    c.push(Series::line("mean r_t", points).with_bars(bars));
    let medians = rows.iter().map(|r| (r.noise_std, r.dim_quartiles.median)).collect();
    c.push(Series::line("median r_t", medians).dashed());
    c
}

pub fn inverse_spectrum_chart(s: &SummaryFile) -> LineChart {
    let mut c = LineChart::new("Inverse singular values", "rank (ascending singular value)", "1/s (variance)").log_y();
    for r in &s.summaries {
        let pts = r
            .inverse_singular_mean
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64, v))
            .collect();
        c.push(Series::line(t_label(r.t, r.noise_std), pts));
    }
    for r in &s.summaries {
        let floor = vec![(1.0, r.noise_floor), (s.dim as f64, r.noise_floor)];
        c.push(Series::line(format!("σ² at t={}", r.t), floor).dashed());
    }
    c
}

pub fn alignment_chart(s: &SummaryFile) -> LineChart {
    let mut c = LineChart::new("Singular vector alignment", "rank (ascending singular value)", "mean u_i · v_i");
    for r in &s.summaries {
        let pts = r.alignment_mean.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        c.push(Series::line(t_label(r.t, r.noise_std), pts));
    }
    c
}

pub fn overlap_chart(s: &SummaryFile, pair: usize) -> LineChart {
    let (_, label) = OVERLAP_SVGS[pair];
    let mut c = LineChart::new(format!("Subspace overlap Φ_n ({label})"), "n", "mean overlap");
    for r in &s.summaries {
        let values = match pair {
            0 => &r.overlap_uv,
            1 => &r.overlap_uw,
            _ => &r.overlap_vw,
        };
        let pts = values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        c.push(Series::line(t_label(r.t, r.noise_std), pts));
    }
    if let Some(r) = s.summaries.first() {
        let pts = r.random_baseline.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        c.push(Series::line("random n/d", pts).dashed());
    }
    c
}

pub fn write_figures(s: &SummaryFile, out: &Path) -> Result<Vec<PathBuf>> {
    let mut charts = vec![
        (DIMENSIONALITY_SVG, dimensionality_chart(s)),
        (INVERSE_SPECTRUM_SVG, inverse_spectrum_chart(s)),
        (ALIGNMENT_SVG, alignment_chart(s)),
    ];
    for (k, (name, _)) in OVERLAP_SVGS.iter().enumerate() {
        charts.push((name, overlap_chart(s, k)));
    }
    let mut written = Vec::new();
    for (name, chart) in charts {
        let path = out.join(name);
        std::fs::write(&path, chart.render()).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
