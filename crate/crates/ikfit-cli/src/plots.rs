//! Minimal SVG bar charts: one bar per labelled value with a ±std whisker.

/// One bar of a chart.
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

const WIDTH_PER_BAR: f64 = 110.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PLOT_HEIGHT: f64 = 260.0;

/// Renders bars with error whiskers to a standalone SVG document.
pub fn bar_chart(title: &str, unit: &str, bars: &[Bar]) -> String {
    let plot_w = WIDTH_PER_BAR * bars.len().max(1) as f64;
    let width = MARGIN_LEFT + plot_w + MARGIN_RIGHT;
    let height = MARGIN_TOP + PLOT_HEIGHT + MARGIN_BOTTOM;
    let max_val = bars
        .iter()
        .map(|b| b.mean + b.std)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let y = |v: f64| MARGIN_TOP + PLOT_HEIGHT * (1.0 - (v / max_val).clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        width / 2.0,
        escape(title)
    ));

    // Axes and four horizontal gridlines with tick labels.
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + PLOT_HEIGHT;
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{}\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        MARGIN_TOP
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        x0 + plot_w
    ));
    for i in 0..=4 {
        let v = max_val * i as f64 / 4.0;
        let yy = y(v);
        if i > 0 {
            svg.push_str(&format!(
                "  <line x1=\"{x0}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#ddd\"/>\n",
                x0 + plot_w
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>\n",
            x0 - 6.0,
            yy + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_TOP + PLOT_HEIGHT / 2.0,
        MARGIN_TOP + PLOT_HEIGHT / 2.0,
        escape(unit)
    ));

    for (i, bar) in bars.iter().enumerate() {
        let cx = x0 + WIDTH_PER_BAR * (i as f64 + 0.5);
        let bw = WIDTH_PER_BAR * 0.55;
        let top = y(bar.mean);
        svg.push_str(&format!(
            "  <rect x=\"{}\" y=\"{top}\" width=\"{bw}\" height=\"{}\" fill=\"#4878a8\"/>\n",
            cx - bw / 2.0,
            y0 - top
        ));
        if bar.std > 0.0 {
            let hi = y(bar.mean + bar.std);
            let lo = y((bar.mean - bar.std).max(0.0));
            svg.push_str(&format!(
                "  <line x1=\"{cx}\" y1=\"{hi}\" x2=\"{cx}\" y2=\"{lo}\" stroke=\"black\"/>\n"
            ));
            for yy in [hi, lo] {
                svg.push_str(&format!(
                    "  <line x1=\"{}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"black\"/>\n",
                    cx - 8.0,
                    cx + 8.0
                ));
            }
        }
        svg.push_str(&format!(
            "  <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 18.0,
            escape(&bar.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
