//! Minimal SVG rendering of the exported CSV files.
//!
//! Three shapes are recognised: a `bin_lo,bin_hi,count` histogram, a
//! headerless numeric matrix (drawn as a heatmap), and any table with a
//! header whose first column is x and remaining numeric columns are series.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    Lines {
        x_label: String,
        series: Vec<(String, Vec<(f64, f64)>)>,
    },
    Bars(Vec<(f64, f64, f64)>),
    Heatmap(Vec<Vec<f64>>),
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Classifies a CSV document.
pub fn figure_from_csv(text: &str) -> Result<Figure, String> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let rows: Vec<Vec<String>> = rd
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let first = rows.first().ok_or("empty CSV")?;
    let numeric = |r: &Vec<String>| r.iter().map(|s| parse_num(s)).collect::<Option<Vec<f64>>>();

    if let Some(row0) = numeric(first) {
        let mut m = vec![row0];
        for r in &rows[1..] {
            m.push(numeric(r).ok_or("non-numeric cell in matrix")?);
        }
        if m.iter().any(|r| r.len() != m[0].len()) {
            return Err("ragged matrix".into());
        }
        return Ok(Figure::Heatmap(m));
    }

    let body: Vec<Vec<f64>> = rows[1..]
        .iter()
        .map(|r| numeric(r).ok_or_else(|| format!("non-numeric row {r:?}")))
        .collect::<Result<_, _>>()?;
    if first.len() < 2 || body.iter().any(|r| r.len() != first.len()) {
        return Err("need at least two columns of equal length".into());
    }
    if first[..3.min(first.len())] == ["bin_lo", "bin_hi", "count"] {
        return Ok(Figure::Bars(body.iter().map(|r| (r[0], r[1], r[2])).collect()));
    }
    let series = (1..first.len())
        .map(|j| (first[j].clone(), body.iter().map(|r| (r[0], r[j])).collect()))
        .collect();
    Ok(Figure::Lines {
        x_label: first[0].clone(),
        series,
    })
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, f: &Frame, title: &str, x_label: &str) {
    let _ = write!(
        out,
        r##"<rect x="{m}" y="{m}" width="{w}" height="{h}" fill="none" stroke="#333"/>"##,
        m = MARGIN,
        w = W - 2.0 * MARGIN,
        h = H - 2.0 * MARGIN
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 15.0,
        escape(x_label)
    );
    for (v, x, y, anchor) in [
        (f.x.0, f.px(f.x.0), H - MARGIN + 15.0, "middle"),
        (f.x.1, f.px(f.x.1), H - MARGIN + 15.0, "middle"),
        (f.y.0, MARGIN - 5.0, f.py(f.y.0), "end"),
        (f.y.1, MARGIN - 5.0, f.py(f.y.1), "end"),
    ] {
        let _ = write!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="10">{v:.3}</text>"#
        );
    }
}

fn heat_colour(t: f64) -> String {
    // blue -> white -> red
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (s, s, 1.0)
    } else {
        let s = (1.0 - t) / 0.5;
        (1.0, s, s)
    };
    format!("rgb({},{},{})", (r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

pub fn render(fig: &Figure, title: &str) -> String {
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}"><rect width="100%" height="100%" fill="white"/>"#
    );
    match fig {
        Figure::Lines { x_label, series } => {
            let frame = Frame {
                x: bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
                y: bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1))),
            };
            axes(&mut out, &frame, title, x_label);
            for (i, (name, pts)) in series.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                let path: Vec<String> = pts
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
                    .collect();
                let _ = write!(
                    out,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
                let _ = write!(
                    out,
                    r#"<text x="{}" y="{}" fill="{colour}" font-size="12">{}</text>"#,
                    W - MARGIN + 5.0,
                    MARGIN + 15.0 * (i as f64 + 1.0),
                    escape(name)
                );
            }
        }
        Figure::Bars(bins) => {
            let frame = Frame {
                x: bounds(bins.iter().flat_map(|b| [b.0, b.1])),
                y: (0.0, bins.iter().map(|b| b.2).fold(1.0, f64::max)),
            };
            axes(&mut out, &frame, title, "value");
            for &(lo, hi, c) in bins {
                let (x0, x1) = (frame.px(lo), frame.px(hi));
                let y = frame.py(c);
                let _ = write!(
                    out,
                    r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
                    (x1 - x0).max(0.5),
                    H - MARGIN - y
                );
            }
        }
        Figure::Heatmap(m) => {
            let (lo, hi) = bounds(m.iter().flatten().copied());
            let n_rows = m.len() as f64;
            let n_cols = m.first().map_or(1, Vec::len) as f64;
            let cw = (W - 2.0 * MARGIN) / n_cols;
            let ch = (H - 2.0 * MARGIN) / n_rows;
            let _ = write!(
                out,
                r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
                W / 2.0,
                escape(title)
            );
            for (i, row) in m.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let _ = write!(
                        out,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        MARGIN + j as f64 * cw,
                        MARGIN + i as f64 * ch,
                        cw + 0.05,
                        ch + 0.05,
                        heat_colour((v - lo) / (hi - lo))
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
