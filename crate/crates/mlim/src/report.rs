//! Probe curves and ablation tables as CSV, probe curves as SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mlim_core::eval::{AblationRow, Asymmetry, ProbeCurve};

use crate::error::{AppError, AppResult};

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Columns `mask_prob, mean, std, n` in sweep order.
pub fn curve_csv(curve: &ProbeCurve) -> String {
    csv_string(
        &["mask_prob", "mean", "std", "n"],
        curve.points.iter().map(|p| vec![p.mask_prob.to_string(), p.mean.to_string(), p.std.to_string(), p.n.to_string()]),
    )
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    csv_string(
        &["variant", "seeds", "pr_auc", "kind"],
        rows.iter().map(|r| {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let kind = if r.median { "median" } else { "seed" };
            vec![r.name.clone(), seeds.join(" "), r.pr_auc.to_string(), kind.into()]
        }),
    )
}

pub fn asymmetry_csv(a: &Asymmetry) -> String {
    csv_string(
        &["metric", "value"],
        [
            vec!["recon_relative_degradation_random_text".into(), a.recon_random_text.to_string()],
            vec!["mlm_relative_degradation_random_image".into(), a.mlm_random_image.to_string()],
        ],
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained line chart of mean loss (with ±std bars) against mask
/// probability.
pub fn curve_svg(curve: &ProbeCurve) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 36.0, 44.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let y_max = curve.points.iter().map(|p| p.mean + p.std).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let x = |v: f64| left + v * pw;
    let y = |v: f64| top + ph - (v / y_max).clamp(0.0, 1.0) * ph;
    let title = format!("{} loss, {}", curve.task.label().to_uppercase(), curve.condition.label().replace('_', " "));

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(&title));
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = left,
        t = top,
        b = top + ph,
        r = left + pw
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            top + ph + 16.0
        );
        let yv = y_max * v;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, left - 6.0, y(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">mask probability</text>"#, left + pw / 2.0, h - 8.0);
    let pts: Vec<String> = curve.points.iter().map(|p| format!("{:.2},{:.2}", x(p.mask_prob), y(p.mean))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
    for p in &curve.points {
        let cx = x(p.mask_prob);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="steelblue" stroke-opacity="0.5"/>"#,
            y((p.mean - p.std).max(0.0)),
            y(p.mean + p.std)
        );
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, y(p.mean));
    }
    s.push_str("</svg>\n");
    s
}

pub fn curve_stem(curve: &ProbeCurve) -> String {
    format!("probe_{}_{}", curve.task.label(), curve.condition.label())
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> AppResult<()> {
    fs::write(&path, contents).map_err(|e| AppError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `probe_<task>_<condition>.csv|svg` per curve, `ablation.csv` and
/// the asymmetry table when available. Returns the files written.
pub fn emit_report(
    curves: &[ProbeCurve],
    rows: &[AblationRow],
    asymmetry: Option<&Asymmetry>,
    out_dir: &Path,
) -> AppResult<Vec<PathBuf>> {
    if curves.is_empty() && rows.is_empty() {
        return Err(AppError::Config("nothing to report: no probe curves and no ablation rows".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let mut written = Vec::new();
    for c in curves {
        let stem = curve_stem(c);
        write(out_dir.join(format!("{stem}.csv")), &curve_csv(c), &mut written)?;
        write(out_dir.join(format!("{stem}.svg")), &curve_svg(c), &mut written)?;
    }
    if !rows.is_empty() {
        write(out_dir.join("ablation.csv"), &ablation_csv(rows), &mut written)?;
    }
    if let Some(a) = asymmetry {
        write(out_dir.join("probe_asymmetry.csv"), &asymmetry_csv(a), &mut written)?;
    }
    Ok(written)
}
