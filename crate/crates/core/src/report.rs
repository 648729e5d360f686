//! Minimal SVG figures. Every figure embeds the CSV it was drawn from, so
//! the picture and its data can be diffed and checked against each other.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

const DATA_OPEN: &str = "<metadata id=\"data\"><![CDATA[\n";
const DATA_CLOSE: &str = "]]></metadata>";

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub enum Chart {
    Lines(Vec<Series>),
    Scatter(Vec<Series>),
    Bars(Vec<(String, f64)>),
}

pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub chart: Chart,
}

/// The CSV embedded in an SVG produced by [`Figure::to_svg`].
pub fn embedded_csv(svg: &str) -> Option<&str> {
    let start = svg.find(DATA_OPEN)? + DATA_OPEN.len();
    let end = start + svg[start..].find(DATA_CLOSE)?;
    Some(&svg[start..end])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0.min(0.0), y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

impl Figure {
    pub fn to_svg(&self, csv: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">"
        );
        let _ = writeln!(s, "<title>{}</title>", escape(&self.title));
        let _ = writeln!(s, "{DATA_OPEN}{csv}{DATA_CLOSE}");
        let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            WIDTH / 2.0,
            escape(&self.title)
        );
        match &self.chart {
            Chart::Lines(series) | Chart::Scatter(series) => {
                let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
                self.axes(&mut s, &frame);
                let scatter = matches!(self.chart, Chart::Scatter(_));
                for (k, ser) in series.iter().enumerate() {
                    let color = PALETTE[k % PALETTE.len()];
                    if scatter {
                        for &(x, y) in &ser.points {
                            let _ = writeln!(
                                s,
                                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"{color}\" fill-opacity=\"0.4\"/>",
                                frame.px(x),
                                frame.py(y)
                            );
                        }
                    } else {
                        let pts: Vec<String> = ser
                            .points
                            .iter()
                            .map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y)))
                            .collect();
                        let _ = writeln!(
                            s,
                            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                            pts.join(" ")
                        );
                    }
                    let _ = writeln!(
                        s,
                        "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
                        WIDTH - MARGIN + 4.0 - 90.0,
                        MARGIN + 14.0 * k as f64,
                        escape(&ser.name)
                    );
                }
            }
            Chart::Bars(bars) => {
                let pts: Vec<(f64, f64)> = bars.iter().enumerate().map(|(i, b)| (i as f64, b.1)).collect();
                let mut frame = Frame::fit(pts.iter());
                frame.x0 = -0.5;
                frame.x1 = bars.len() as f64 - 0.5;
                self.axes(&mut s, &frame);
                let w = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64 * 0.6;
                for (i, (name, v)) in bars.iter().enumerate() {
                    let (x, y, base) = (frame.px(i as f64), frame.py(*v), frame.py(0.0));
                    let _ = writeln!(
                        s,
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                        x - w / 2.0,
                        y.min(base),
                        (base - y).abs(),
                        PALETTE[i % PALETTE.len()]
                    );
                    let _ = writeln!(
                        s,
                        "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                        HEIGHT - MARGIN + 14.0,
                        escape(name)
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    fn axes(&self, s: &mut String, f: &Frame) {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(s, "<path d=\"M{l},{t} L{l},{b} L{r},{b}\" stroke=\"black\" fill=\"none\"/>");
        for k in 0..=4 {
            let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
            let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", f.px(fx), b + 28.0, tick(fx));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", l - 4.0, f.py(fy) + 4.0, tick(fy));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            WIDTH / 2.0,
            HEIGHT - 8.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_data_round_trips() {
        let csv = "x,y\n1,2\n3,4\n";
        let fig = Figure {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            chart: Chart::Lines(vec![Series {
                name: "s".into(),
                points: vec![(1.0, 2.0), (3.0, 4.0)],
            }]),
        };
        let svg = fig.to_svg(csv);
        assert_eq!(embedded_csv(&svg), Some(csv));
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        for chart in [Chart::Scatter(vec![]), Chart::Bars(vec![("only".into(), 0.0)])] {
            let fig = Figure {
                title: "t".into(),
                x_label: String::new(),
                y_label: String::new(),
                chart,
            };
            let svg = fig.to_svg("h\n");
            assert!(svg.ends_with("</svg>\n") && !svg.contains("NaN"));
        }
    }
}
