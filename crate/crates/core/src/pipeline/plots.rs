//! Self-contained SVG figures written without a plotting dependency.

use std::fmt::Write as _;

use super::report::RunReport;
use crate::metrics::{bland_altman, linear_fit, Severity};
use crate::types::EventKind;

const W: f64 = 480.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    w: f64,
    h: f64,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Self {
            body: String::new(),
            w,
            h,
        }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" style="{style}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            w.max(0.0),
            h.max(0.0)
        );
    }

    fn circle(&mut self, x: f64, y: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{fill}"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, size: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="{size}">{}</text>"#,
            escape(s)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.w,
            h = self.h
        )
    }
}

/// Linear data-to-pixel mapping for one plot frame.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: &[f64], ys: &[f64], square: bool) -> Self {
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                return (0.0, 1.0);
            }
            let pad = ((hi - lo) * 0.08).max(0.5);
            (lo - pad, hi + pad)
        };
        let (mut x0, mut x1) = span(xs);
        let (mut y0, mut y1) = span(ys);
        if square {
            x0 = x0.min(y0).min(0.0);
            y0 = x0;
            x1 = x1.max(y1);
            y1 = x1;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        svg.text(W / 2.0, 22.0, "middle", 15.0, title);
        svg.line(LEFT, H - BOTTOM, W - RIGHT, H - BOTTOM, "stroke:black");
        svg.line(LEFT, TOP, LEFT, H - BOTTOM, "stroke:black");
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            let (px, py) = (self.px(xv), self.py(yv));
            svg.line(px, H - BOTTOM, px, H - BOTTOM + 5.0, "stroke:black");
            svg.text(px, H - BOTTOM + 18.0, "middle", 11.0, &format!("{xv:.1}"));
            svg.line(LEFT - 5.0, py, LEFT, py, "stroke:black");
            svg.text(LEFT - 8.0, py + 4.0, "end", 11.0, &format!("{yv:.1}"));
        }
        svg.text(W / 2.0, H - 10.0, "middle", 12.0, xlabel);
        let _ = writeln!(
            svg.body,
            r#"<text x="16" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.2})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }

    /// Line `y = a·x + b` clipped to the frame's x range.
    fn affine(&self, svg: &mut Svg, a: f64, b: f64, style: &str) {
        svg.line(self.px(self.x0), self.py(a * self.x0 + b), self.px(self.x1), self.py(a * self.x1 + b), style);
    }
}

/// Estimate against reference with identity and least-squares lines.
pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, truth: &[f64], est: &[f64]) -> String {
    let mut svg = Svg::new(W, H);
    let f = Frame::new(truth, est, true);
    f.axes(&mut svg, title, xlabel, ylabel);
    f.affine(&mut svg, 1.0, 0.0, "stroke:gray;stroke-dasharray:4 3");
    if let Ok(Some((a, b))) = linear_fit(truth, est) {
        f.affine(&mut svg, a, b, "stroke:crimson");
    }
    for (&x, &y) in truth.iter().zip(est) {
        svg.circle(f.px(x), f.py(y), "steelblue");
    }
    svg.finish()
}

/// Difference against mean with bias and ±1.96 SD lines.
pub fn bland_altman_svg(title: &str, truth: &[f64], est: &[f64]) -> String {
    let means: Vec<f64> = truth.iter().zip(est).map(|(t, e)| (t + e) / 2.0).collect();
    let diffs: Vec<f64> = truth.iter().zip(est).map(|(t, e)| e - t).collect();
    let ba = bland_altman(est, truth).ok();
    let mut ys = diffs.clone();
    if let Some(b) = ba {
        ys.extend([b.loa_low, b.loa_high]);
    }
    let mut svg = Svg::new(W, H);
    let f = Frame::new(&means, &ys, false);
    f.axes(&mut svg, title, "mean of estimate and reference", "estimate − reference");
    if let Some(b) = ba {
        f.affine(&mut svg, 0.0, b.mean_diff, "stroke:crimson");
        f.affine(&mut svg, 0.0, b.loa_low, "stroke:gray;stroke-dasharray:4 3");
        f.affine(&mut svg, 0.0, b.loa_high, "stroke:gray;stroke-dasharray:4 3");
    }
    for (&x, &y) in means.iter().zip(&diffs) {
        svg.circle(f.px(x), f.py(y), "steelblue");
    }
    svg.finish()
}

/// Severity confusion matrix as a shaded table (rows = reference).
pub fn confusion_svg(title: &str, m: &[[usize; 4]; 4]) -> String {
    let cell = 70.0;
    let (x0, y0) = (130.0, 80.0);
    let mut svg = Svg::new(x0 + 4.0 * cell + 30.0, y0 + 4.0 * cell + 50.0);
    svg.text((x0 + 4.0 * cell + 30.0) / 2.0, 22.0, "middle", 15.0, title);
    svg.text(x0 + 2.0 * cell, 50.0, "middle", 12.0, "estimated");
    let max = m.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (r, row) in m.iter().enumerate() {
        let label = Severity::ALL[r].as_str();
        svg.text(x0 - 8.0, y0 + (r as f64 + 0.55) * cell, "end", 12.0, &format!("ref {label}"));
        svg.text(x0 + (r as f64 + 0.5) * cell, y0 - 8.0, "middle", 12.0, label);
        for (c, &n) in row.iter().enumerate() {
            let shade = 255 - (n as f64 / max * 200.0).round() as u8;
            let (x, y) = (x0 + c as f64 * cell, y0 + r as f64 * cell);
            svg.rect(x, y, cell - 2.0, cell - 2.0, &format!("rgb({shade},{shade},255)"));
            svg.text(x + cell / 2.0, y + cell / 2.0 + 5.0, "middle", 14.0, &n.to_string());
        }
    }
    svg.finish()
}

fn kind_colour(k: EventKind) -> &'static str {
    match k {
        EventKind::CA => "#1b9e77",
        EventKind::OA => "#d95f02",
        EventKind::MA => "#7570b3",
        EventKind::HP => "#e7298a",
    }
}

/// Reference events (top strip) and fused detections (bottom strip) over
/// the night.
pub fn timeline_svg(report: &RunReport, subject: usize) -> String {
    let s = &report.subjects[subject];
    let w = 900.0;
    let mut svg = Svg::new(w, 150.0);
    let (x0, x1) = (90.0, w - 20.0);
    let px = |t: f64| x0 + t / s.duration.max(1.0) * (x1 - x0);
    svg.text(w / 2.0, 20.0, "middle", 14.0, &format!("{}: reference vs detected events", s.id));
    svg.text(x0 - 8.0, 55.0, "end", 12.0, "reference");
    svg.text(x0 - 8.0, 95.0, "end", 12.0, "detected");
    svg.rect(x0, 40.0, x1 - x0, 22.0, "#f2f2f2");
    svg.rect(x0, 80.0, x1 - x0, 22.0, "#f2f2f2");
    for e in &s.truth {
        svg.rect(px(e.t_start), 40.0, px(e.t_end) - px(e.t_start), 22.0, kind_colour(e.kind));
    }
    for f in &s.fused {
        let d = &f.segment;
        svg.rect(px(d.t_start), 80.0, px(d.t_end) - px(d.t_start), 22.0, kind_colour(d.kind));
    }
    let hours = (s.duration / 3600.0).ceil() as usize;
    for h in 0..=hours {
        let t = (h as f64 * 3600.0).min(s.duration);
        svg.line(px(t), 104.0, px(t), 110.0, "stroke:black");
        svg.text(px(t), 124.0, "middle", 11.0, &format!("{h} h"));
    }
    for (i, k) in EventKind::ALL.iter().enumerate() {
        let x = x0 + i as f64 * 70.0;
        svg.rect(x, 132.0, 10.0, 10.0, kind_colour(*k));
        svg.text(x + 14.0, 141.0, "start", 11.0, k.as_str());
    }
    svg.finish()
}

/// Every figure for a report as `(file name, svg text)`.
pub fn all_plots(report: &RunReport) -> Vec<(String, String)> {
    let pairs = |f: &dyn Fn(&super::SubjectResult) -> Option<(f64, f64)>| -> (Vec<f64>, Vec<f64>) {
        report.subjects.iter().filter_map(f).unzip()
    };
    let (ahi_t, ahi_e) = pairs(&|s| s.est_ahi.map(|r| (s.true_ahi.ahi, r.ahi)));
    let (tst_t, tst_e) = pairs(&|s| Some((s.true_tst, s.est_tst)));
    let mut out = vec![
        (
            "ahi_scatter.svg".to_string(),
            scatter_svg("AHI", "reference AHI (events/h)", "estimated AHI (events/h)", &ahi_t, &ahi_e),
        ),
        ("ahi_bland_altman.svg".to_string(), bland_altman_svg("AHI agreement", &ahi_t, &ahi_e)),
        (
            "tst_scatter.svg".to_string(),
            scatter_svg("Total sleep time", "reference TST (h)", "estimated TST (h)", &tst_t, &tst_e),
        ),
    ];
    if let Some(d) = &report.pooled.diagnostics {
        out.push(("severity_confusion.svg".to_string(), confusion_svg("OSA severity", &d.severity_confusion)));
    }
    for (i, s) in report.subjects.iter().enumerate() {
        out.push((format!("timeline_{}.svg", s.id), timeline_svg(report, i)));
    }
    out
}
