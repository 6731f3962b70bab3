//! Minimal SVG line plot over one CSV column. The plot is a convenience
//! view; numeric artifacts never depend on it.

use mlt_core::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

pub fn svg_line_plot(csv_text: &str, column: &str) -> Result<String> {
    let mut lines = csv_text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty CSV"))?
        .trim();
    let col = header
        .split(',')
        .position(|name| name == column)
        .ok_or_else(|| Error::format(format!("CSV has no column named {column:?} (header: {header})")))?;
    let mut ys = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let raw = fields
            .get(col)
            .ok_or_else(|| Error::format(format!("row {}: only {} fields", i + 2, fields.len())))?;
        let y: f64 = raw
            .parse()
            .map_err(|_| Error::format(format!("row {}: {raw:?} is not a number", i + 2)))?;
        ys.push(y);
    }
    if ys.is_empty() {
        return Err(Error::format("CSV has a header but no data rows"));
    }

    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inner_w = WIDTH - 2.0 * MARGIN;
    let inner_h = HEIGHT - 2.0 * MARGIN;
    let step_x = if ys.len() > 1 {
        inner_w / (ys.len() - 1) as f64
    } else {
        0.0
    };
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let px = MARGIN + step_x * i as f64;
            let py = MARGIN + inner_h * (1.0 - (y - lo) / span);
            format!("{px:.2},{py:.2}")
        })
        .collect();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN
    ));
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"12\">{lo:.6}</text>\n",
        x = 4.0,
        y = HEIGHT - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"12\">{hi:.6}</text>\n",
        x = 4.0,
        y = MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"12\">{column} over {n} rows</text>\n",
        x = MARGIN,
        y = MARGIN / 2.0,
        n = ys.len()
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_requested_column() {
        let csv = "step,total\n0,10.0\n1,5.0\n2,2.5\n";
        let svg = svg_line_plot(csv, "total").unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("total over 3 rows"));
    }

    #[test]
    fn unknown_column_is_an_error() {
        let err = svg_line_plot("a,b\n1,2\n", "c").unwrap_err();
        assert!(err.to_string().contains("no column named"));
        assert!(svg_line_plot("a,b\n", "a").is_err());
        assert!(svg_line_plot("a,b\n1,x\n", "b").is_err());
    }
}
