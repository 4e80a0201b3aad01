//! Attention heat maps (HTML, text) and line plots (SVG).
//!
//! Output is plain string formatting with fixed precision, so identical
//! inputs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AfaError, Result};

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn check_row(tokens: &[String], a: &[f64]) -> Result<f64> {
    if tokens.len() != a.len() {
        return Err(AfaError::contract(format!(
            "{} tokens but {} attention weights",
            tokens.len(),
            a.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AfaError::Input(
            "attention weights must be finite and non-negative".into(),
        ));
    }
    Ok(a.iter().cloned().fold(0.0, f64::max))
}

fn shade(a: f64, max: f64) -> f64 {
    if max > 0.0 {
        a / max
    } else {
        0.0
    }
}

/// XHTML page with one span per token, shaded by `a_i / max(a)`.
pub fn attention_html(tokens: &[String], a: &[f64], prediction: &str, label: &str) -> Result<String> {
    let max = check_row(tokens, a)?;
    let mut s = String::new();
    s.push_str("<!DOCTYPE html>\n<html xmlns=\"http://www.w3.org/1999/xhtml\">\n<head>\n");
    s.push_str("<meta charset=\"utf-8\"/>\n<title>attention</title>\n<style>\n");
    s.push_str("body { font-family: sans-serif; }\n");
    s.push_str(".tok { padding: 2px 3px; margin: 1px; display: inline-block; }\n");
    s.push_str("</style>\n</head>\n<body>\n");
    let _ = writeln!(
        s,
        "<p>predicted: <b>{}</b> gold: <b>{}</b></p>",
        escape(prediction),
        escape(label)
    );
    s.push_str("<p>\n");
    for (t, &w) in tokens.iter().zip(a) {
        let _ = writeln!(
            s,
            "<span class=\"tok\" title=\"{w:.6}\" style=\"background-color: rgba(200, 30, 30, {:.4})\">{}</span>",
            shade(w, max),
            escape(t)
        );
    }
    s.push_str("</p>\n</body>\n</html>\n");
    Ok(s)
}

pub fn render_attention_html(
    tokens: &[String],
    a: &[f64],
    prediction: &str,
    label: &str,
    out_path: &Path,
) -> Result<()> {
    fs::write(out_path, attention_html(tokens, a, prediction, label)?)?;
    Ok(())
}

/// One `token<TAB>weight<TAB>bar` line per token, bar length proportional to `a_i / max(a)`.
pub fn attention_text(tokens: &[String], a: &[f64], prediction: &str, label: &str) -> Result<String> {
    let max = check_row(tokens, a)?;
    let mut s = format!("predicted: {prediction}\tgold: {label}\n");
    for (t, &w) in tokens.iter().zip(a) {
        let bar = "#".repeat((shade(w, max) * 20.0).round() as usize);
        let _ = writeln!(s, "{t}\t{w:.4}\t{bar}");
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Half-widths of a band around each point.
    pub ci: Option<Vec<f64>>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
            ci: None,
        }
    }

    pub fn with_ci(mut self, half_widths: Vec<f64>) -> Self {
        self.ci = Some(half_widths);
        self
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;

fn validate(series: &[Series]) -> Result<()> {
    if series.is_empty() {
        return Err(AfaError::Input("no series to plot".into()));
    }
    for s in series {
        if s.points.is_empty() {
            return Err(AfaError::Input(format!("series {:?} is empty", s.name)));
        }
        if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(AfaError::Input(format!("series {:?} has non-finite points", s.name)));
        }
        if s.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(AfaError::Input(format!(
                "series {:?}: x must be strictly increasing",
                s.name
            )));
        }
        if let Some(ci) = &s.ci {
            if ci.len() != s.points.len() || ci.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(AfaError::Input(format!("series {:?}: bad CI half-widths", s.name)));
            }
        }
    }
    Ok(())
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// SVG 1.1 line plot with axes, a legend and optional CI bands.
pub fn curve_svg(series: &[Series], x_label: &str, y_label: &str) -> Result<String> {
    validate(series)?;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| {
        let ci = s.ci.clone().unwrap_or_else(|| vec![0.0; s.points.len()]);
        s.points
            .iter()
            .zip(ci)
            .flat_map(|(p, c)| [p.1 - c, p.1 + c])
            .collect::<Vec<_>>()
    }));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    // axes
    let (bx, by) = (LEFT, TOP + ph);
    let _ = writeln!(
        s,
        "<line x1=\"{bx:.2}\" y1=\"{by:.2}\" x2=\"{:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>",
        LEFT + pw
    );
    let _ = writeln!(
        s,
        "<line x1=\"{bx:.2}\" y1=\"{TOP:.2}\" x2=\"{bx:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xv:.2}</text>",
            px(xv),
            by + 14.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{yv:.3}</text>",
            LEFT - 4.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        LEFT + pw / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some(ci) = &ser.ci {
            let upper = ser.points.iter().zip(ci).map(|(p, c)| (p.0, p.1 + c));
            let lower = ser.points.iter().zip(ci).rev().map(|(p, c)| (p.0, p.1 - c));
            let pts: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>",
                pts.join(" ")
            );
        }
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                px(x),
                py(y)
            );
        }
        let ly = TOP + 10.0 + 16.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 18.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            lx + 22.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_curve_svg(series: &[Series], x_label: &str, y_label: &str, out_path: &Path) -> Result<()> {
    fs::write(out_path, curve_svg(series, x_label, y_label)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn opacities(html: &str) -> Vec<String> {
        html.match_indices("rgba(200, 30, 30, ")
            .map(|(i, m)| html[i + m.len()..i + m.len() + 6].to_string())
            .collect()
    }

    #[test]
    fn uniform_attention_shades_equally() {
        let html = attention_html(&toks(&["a", "b", "c"]), &[1.0 / 3.0; 3], "0", "0").unwrap();
        assert_eq!(opacities(&html), vec!["1.0000"; 3]);
    }

    #[test]
    fn one_hot_shades_one_token() {
        let html = attention_html(&toks(&["a", "b", "c"]), &[0.0, 1.0, 0.0], "1", "0").unwrap();
        assert_eq!(opacities(&html), vec!["0.0000", "1.0000", "0.0000"]);
        assert!(html.contains("predicted: <b>1</b> gold: <b>0</b>"));
    }

    #[test]
    fn tokens_are_escaped() {
        let html = attention_html(&toks(&["<b>&"]), &[1.0], "x", "y").unwrap();
        assert!(html.contains("&lt;b&gt;&amp;"));
    }

    #[test]
    fn html_rejects_length_mismatch() {
        assert!(matches!(
            attention_html(&toks(&["a"]), &[0.5, 0.5], "0", "0"),
            Err(AfaError::Contract(_))
        ));
    }

    #[test]
    fn text_report_bars() {
        let t = attention_text(&toks(&["a", "b"]), &[0.8, 0.2], "1", "1").unwrap();
        assert_eq!(
            t,
            "predicted: 1\tgold: 1\na\t0.8000\t####################\nb\t0.2000\t#####\n"
        );
    }

    #[test]
    fn svg_rejects_bad_series() {
        assert!(curve_svg(&[], "x", "y").is_err());
        assert!(curve_svg(&[Series::new("s", vec![])], "x", "y").is_err());
        assert!(curve_svg(&[Series::new("s", vec![(1.0, 0.0), (1.0, 1.0)])], "x", "y").is_err());
    }

    #[test]
    fn svg_has_band_and_legend() {
        let s = Series::new("afa", vec![(0.0, 0.9), (1.0, 0.6)]).with_ci(vec![0.01, 0.02]);
        let svg = curve_svg(&[s, Series::new("base", vec![(0.0, 0.9), (1.0, 0.8)])], "N", "acc").unwrap();
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">afa</text>") && svg.contains(">base</text>"));
    }
}
