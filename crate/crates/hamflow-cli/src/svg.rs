//! Dependency-free SVG scatter plots. Output is deterministic: no
//! timestamps, fixed float formatting, one `<g>` element per time slice.

use ndarray::Array2;

const WIDTH: f64 = 660.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// Linear interpolation between a cold and a hot color.
fn gradient_color(frac: f64) -> String {
    let lerp = |a: f64, b: f64| (a + (b - a) * frac).round() as u8;
    // Blue (#2563eb) at t = 0 to red (#dc2626) at the sweep end.
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(0x25 as f64, 0xdc as f64),
        lerp(0x63 as f64, 0x26 as f64),
        lerp(0xeb as f64, 0x26 as f64)
    )
}

/// Scatter of the transported batch at each recorded sweep time, one group
/// per time slice, color-graded from early (blue) to late (red). Points are
/// the first momentum/position pair; higher-dimensional batches project
/// onto those two coordinates.
pub fn sweep_scatter(groups: &[(f64, Array2<f64>)], horizon: f64) -> String {
    let mut svg = String::with_capacity(1 << 16);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"22\" font-size=\"14\">transported batch over integration time \
         (T = {horizon:.2})</text>\n",
        MARGIN_L
    ));

    if groups.is_empty() {
        svg.push_str("  <text x=\"200\" y=\"250\">no non-diverged states to plot</text>\n");
        svg.push_str("</svg>\n");
        return svg;
    }

    // Data bounds over every group, padded so edge points stay visible.
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, m) in groups {
        for j in 0..m.ncols() {
            x0 = x0.min(m[[0, j]]);
            x1 = x1.max(m[[0, j]]);
            y0 = y0.min(m[[1, j]]);
            y1 = y1.max(m[[1, j]]);
        }
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.08 * span;
        *hi += 0.08 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * plot_h;

    svg.push_str(&format!(
        "  <rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#444\"/>\n"
    ));
    // Corner labels instead of full tick machinery.
    svg.push_str(&format!(
        "  <text x=\"{MARGIN_L}\" y=\"{:.1}\">p0 = {x0:.2}</text>\n",
        HEIGHT - 16.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">p0 = {x1:.2}</text>\n",
        WIDTH - MARGIN_R,
        HEIGHT - 16.0
    ));
    svg.push_str(&format!(
        "  <text x=\"6\" y=\"{:.1}\">q0 = {y0:.2}</text>\n",
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!("  <text x=\"6\" y=\"{:.1}\">q0 = {y1:.2}</text>\n", MARGIN_T + 10.0));

    let denom = (groups.len() - 1).max(1) as f64;
    for (k, (t_frac, m)) in groups.iter().enumerate() {
        let color = gradient_color(k as f64 / denom);
        svg.push_str(&format!(
            "  <g id=\"t_{t_frac:.3}\" fill=\"{color}\" fill-opacity=\"0.55\">\n"
        ));
        for j in 0..m.ncols() {
            svg.push_str(&format!(
                "    <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\"/>\n",
                sx(m[[0, j]]),
                sy(m[[1, j]])
            ));
        }
        svg.push_str("  </g>\n");
    }

    // Legend: first and last time tick.
    let first = groups.first().expect("non-empty").0;
    let last = groups.last().expect("non-empty").0;
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">t = {first:.2} T</text>\n",
        WIDTH - 150.0,
        MARGIN_T + 16.0,
        gradient_color(0.0)
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">t = {last:.2} T</text>\n",
        WIDTH - 150.0,
        MARGIN_T + 32.0,
        gradient_color(1.0)
    ));
    svg.push_str("</svg>\n");
    svg
}
