//! Self-contained SVG rendering of a tracking-availability sweep.

use std::collections::BTreeMap;
use std::fmt::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct PlotError(String);

type Result<T> = std::result::Result<T, PlotError>;

macro_rules! bail {
    ($($t:tt)*) => {
        return Err(PlotError(format!($($t)*)))
    };
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
pub const MARGIN: f64 = 0.05;

pub const REQUIRED: [&str; 6] = ["n", "model", "min_ade_6", "min_fde_6", "mr_6", "travel"];

/// One `n` of the sweep with both models' displacement errors.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub n: f64,
    pub himap_ade: f64,
    pub himap_fde: f64,
    pub baseline_ade: f64,
    pub baseline_fde: f64,
    pub travel: f64,
}

pub fn parse_sweep(text: &str) -> Result<Vec<SweepPoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        bail!("sweep CSV is empty");
    };
    let header: Vec<&str> = first.split(',').map(str::trim).collect();
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| !header.contains(c)).collect();
    if !missing.is_empty() {
        bail!("sweep CSV lacks columns: {}", missing.join(", "));
    }
    let col = |name: &str| header.iter().position(|h| *h == name).expect("checked above");
    let (n_i, m_i, a_i, f_i, t_i) = (col("n"), col("model"), col("min_ade_6"), col("min_fde_6"), col("travel"));
    let mut by_n: BTreeMap<u64, (Option<(f64, f64)>, Option<(f64, f64)>, f64)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            bail!("sweep CSV row {} has {} cells, expected {}", i + 2, cells.len(), header.len());
        }
        let num = |j: usize| -> Result<f64> {
            cells[j]
                .parse()
                .map_err(|_| PlotError(format!("row {}: `{}` is not a number", i + 2, cells[j])))
        };
        let n: u64 = cells[n_i].parse().map_err(|_| PlotError(format!("row {}: bad n `{}`", i + 2, cells[n_i])))?;
        let entry = by_n.entry(n).or_insert((None, None, 0.0));
        entry.2 = num(t_i)?;
        let pair = Some((num(a_i)?, num(f_i)?));
        match cells[m_i] {
            "himap" => entry.0 = pair,
            "baseline" => entry.1 = pair,
            other => bail!("row {}: unknown model `{other}`", i + 2),
        }
    }
    if by_n.is_empty() {
        bail!("sweep CSV has no rows");
    }
    by_n.into_iter()
        .map(|(n, (h, b, travel))| {
            let (Some(h), Some(b)) = (h, b) else {
                bail!("n = {n} lacks a himap or baseline row");
            };
            Ok(SweepPoint {
                n: n as f64,
                himap_ade: h.0,
                himap_fde: h.1,
                baseline_ade: b.0,
                baseline_fde: b.1,
                travel,
            })
        })
        .collect()
}

pub fn companion_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("n,himap_min_ade_6,himap_min_fde_6,baseline_min_ade_6,baseline_min_fde_6,travel\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.n, p.himap_ade, p.himap_fde, p.baseline_ade, p.baseline_fde, p.travel
        );
    }
    out
}

/// `[lo, hi]` widened by `MARGIN` of the span on both sides; a degenerate
/// span widens by `MARGIN` of the magnitude (or 1).
pub fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let pad = if span > 0.0 { span * MARGIN } else { lo.abs().max(1.0) * MARGIN };
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn polyline(&self, pts: &[(f64, f64)]) -> String {
        pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect::<Vec<_>>().join(" ")
    }
}

pub fn render(points: &[SweepPoint]) -> String {
    let xs = points.iter().map(|p| p.n);
    let ys = points
        .iter()
        .flat_map(|p| [p.himap_ade, p.himap_fde, p.baseline_ade, p.baseline_fde, p.travel]);
    let f = Frame {
        x: padded_range(xs),
        y: padded_range(ys),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g id="plot" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
        f.x.0, f.x.1, f.y.0, f.y.1
    );
    // axes and ticks
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(s, r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" stroke="black" fill="none"/>"#);
    for i in 0..=5 {
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 5.0;
        let py = f.py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
    }
    for p in points {
        let px = f.px(p.n);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 5.0,
            y1 + 20.0,
            p.n
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">identified history steps n</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">metres</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let (first, last) = (points[0].n, points[points.len() - 1].n);
    let series: [(&str, &str, bool, fn(&SweepPoint) -> f64); 5] = [
        ("baseline minADE6", "#1f77b4", false, |p| p.baseline_ade),
        ("baseline minFDE6", "#d62728", false, |p| p.baseline_fde),
        ("himap minADE6", "#1f77b4", true, |p| p.himap_ade),
        ("himap minFDE6", "#d62728", true, |p| p.himap_fde),
        ("travel", "#2ca02c", false, |p| p.travel),
    ];
    for (i, (name, color, dashed, get)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = if *dashed {
            vec![(first, get(&points[0])), (last, get(&points[0]))]
        } else {
            points.iter().map(|p| (p.n, get(p))).collect()
        };
        let dash = if *dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            f.polyline(&pts)
        );
        if !*dashed {
            for &(x, y) in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(x), f.py(y));
            }
        }
        let ly = TOP + 4.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{name}</text>"#,
            x1 - 150.0,
            x1 - 125.0,
            x1 - 120.0,
            ly + 4.0
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}
