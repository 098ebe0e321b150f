//! Static log–log plots of defect series as SVG.

use crate::report::Series;
use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

pub fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Points with positive values on log–log axes, excluded points hollow, and
/// the fitted line through the geometric mean of the fitted points.
pub fn loglog_svg(s: &Series) -> String {
    let pts: Vec<(f64, f64, bool)> =
        s.t.iter()
            .zip(&s.values)
            .enumerate()
            .filter(|(_, (t, v))| **t > 0.0 && **v > 0.0)
            .map(|(k, (t, v))| (t.log10(), v.log10(), s.excluded.get(k).copied().unwrap_or(false)))
            .collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#, H - PAD, W - PAD);
    let _ =
        writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">log10 t</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">log10 defect</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ =
        writeln!(out, r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, escape(&s.name));
    for (x, y) in [(x0, y0), (x1, y1)] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">{:.2}</text>"#, sx(x), H - PAD + 14.0, x);
        let _ = writeln!(out, r#"<text x="4" y="{:.1}" font-size="10">{:.2}</text>"#, sy(y), y);
    }
    if let Some(e) = s.fitted_exponent {
        let fit: Vec<&(f64, f64, bool)> = pts.iter().filter(|p| !p.2).collect();
        if !fit.is_empty() {
            let n = fit.len() as f64;
            let (mx, my) = (fit.iter().map(|p| p.0).sum::<f64>() / n, fit.iter().map(|p| p.1).sum::<f64>() / n);
            let line = |x: f64| my + e * (x - mx);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue" stroke-dasharray="4 3"/>"#,
                sx(x0),
                sy(line(x0)),
                sx(x1),
                sy(line(x1))
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="36" font-size="11" text-anchor="middle" fill="steelblue">slope {e:.3}</text>"#,
                W / 2.0
            );
        }
    }
    for (x, y, ex) in &pts {
        let fill = if *ex { "white" } else { "black" };
        let _ =
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{fill}" stroke="black"/>"#, sx(*x), sy(*y));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
