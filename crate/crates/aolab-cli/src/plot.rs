//! CSV readers for the tool's two output schemas and a hand-rolled SVG
//! chart.
//!
//! The chart is plain scatter/line rendering: one polyline per series (only
//! when it has at least two points) plus circle markers, axes with ticks,
//! and a legend. Circles are used for nothing but data markers, so "how many
//! points made it onto the chart" is countable from the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use aolab::eval::FRONTIER_HEADER;
use aolab::train::METRIC_HEADER;

use crate::error::{CliError, CliResult};

#[derive(Debug)]
pub struct Series {
    pub label: String,
    /// Points in drawing order (sorted by x).
    pub points: Vec<(f64, f64)>,
}

pub struct ChartSpec {
    pub title: String,
    pub x_label: &'static str,
    pub y_label: &'static str,
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    name: &str,
    raw: &str,
) -> CliResult<T> {
    raw.parse().map_err(|_| {
        CliError::data(format!(
            "{} line {}: bad {} value '{}'",
            path.display(),
            line_no,
            name,
            raw
        ))
    })
}

fn split_row<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    n_fields: usize,
) -> CliResult<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != n_fields {
        return Err(CliError::data(format!(
            "{} line {}: expected {} fields, found {}",
            path.display(),
            line_no,
            n_fields,
            fields.len()
        )));
    }
    Ok(fields)
}

fn read_csv(path: &Path, header: &str) -> CliResult<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {}", path.display(), e)))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == header => {}
        Some((_, first)) => {
            return Err(CliError::data(format!(
                "{}: header '{}' does not match '{}'",
                path.display(),
                first,
                header
            )))
        }
        None => return Err(CliError::data(format!("{} is empty", path.display()))),
    }
    let rows: Vec<(usize, String)> = lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    if rows.is_empty() {
        return Err(CliError::data(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(rows)
}

/// One series per method: coherence (y) against diversity (x).
pub fn frontier_series(paths: &[impl AsRef<Path>]) -> CliResult<Vec<Series>> {
    let mut by_method: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for path in paths {
        let path = path.as_ref();
        for (line_no, line) in read_csv(path, FRONTIER_HEADER)? {
            let f = split_row(path, line_no, &line, 8)?;
            let _seq_len: usize = parse_field(path, line_no, "seq_len", f[1])?;
            let _temperature: f64 = parse_field(path, line_no, "temperature", f[2])?;
            let coherence: f64 = parse_field(path, line_no, "coherence", f[3])?;
            let diversity: f64 = parse_field(path, line_no, "diversity", f[4])?;
            let _n_samples: usize = parse_field(path, line_no, "n_samples", f[5])?;
            let _steps: usize = parse_field(path, line_no, "sampler_steps", f[6])?;
            let _seed: u64 = parse_field(path, line_no, "seed", f[7])?;
            by_method
                .entry(f[0].to_string())
                .or_default()
                .push((diversity, coherence));
        }
    }
    Ok(series_from_groups(by_method))
}

/// One series per (objective, seq_len): nats/token (y) against step (x).
/// Validation rows are plotted when a series has them; otherwise its train
/// rows stand in.
pub fn nll_series(paths: &[impl AsRef<Path>]) -> CliResult<Vec<Series>> {
    type Key = (String, usize);
    let mut valid: BTreeMap<Key, Vec<(f64, f64)>> = BTreeMap::new();
    let mut train: BTreeMap<Key, Vec<(f64, f64)>> = BTreeMap::new();
    for path in paths {
        let path = path.as_ref();
        for (line_no, line) in read_csv(path, METRIC_HEADER)? {
            let f = split_row(path, line_no, &line, 6)?;
            let step: u64 = parse_field(path, line_no, "step", f[0])?;
            let seq_len: usize = parse_field(path, line_no, "seq_len", f[3])?;
            let nats: f64 = parse_field(path, line_no, "nats_per_token", f[4])?;
            let _wall: f64 = parse_field(path, line_no, "wallclock_s", f[5])?;
            let key = (f[2].to_string(), seq_len);
            let point = (step as f64, nats);
            match f[1] {
                "valid" => valid.entry(key).or_default().push(point),
                "train" => train.entry(key).or_default().push(point),
                other => {
                    return Err(CliError::data(format!(
                        "{} line {}: unknown split '{}'",
                        path.display(),
                        line_no,
                        other
                    )))
                }
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (key, points) in train {
        if !valid.contains_key(&key) {
            groups.insert(format!("{} seq={}", key.0, key.1), points);
        }
    }
    for (key, points) in valid {
        groups.insert(format!("{} seq={}", key.0, key.1), points);
    }
    Ok(series_from_groups(groups))
}

fn series_from_groups(groups: BTreeMap<String, Vec<(f64, f64)>>) -> Vec<Series> {
    groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            Series { label, points }
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const TOP: f64 = 42.0;
const RIGHT: f64 = WIDTH - 176.0;
const BOTTOM: f64 = HEIGHT - 56.0;

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            other => out.push(other),
        }
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.3}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Data range with a margin so markers never sit on the frame; a flat range
/// widens to a unit window around its value.
fn padded(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

pub fn render_chart(series: &[Series], spec: &ChartSpec) -> String {
    let (x0, x1) = padded(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = padded(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (RIGHT - LEFT);
    let sy = |y: f64| BOTTOM - (y - y0) / (y1 - y0) * (BOTTOM - TOP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">",
        WIDTH, HEIGHT
    );
    let _ = writeln!(
        svg,
        "  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>",
        WIDTH, HEIGHT
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        escape(&spec.title)
    );

    // frame and ticks
    let _ = writeln!(
        svg,
        "  <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333333\"/>\n  <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333333\"/>",
        l = LEFT,
        r = RIGHT,
        t = TOP,
        b = BOTTOM
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let px = sx(fx);
        let _ = writeln!(
            svg,
            "  <line x1=\"{x:.2}\" y1=\"{b}\" x2=\"{x:.2}\" y2=\"{b2}\" stroke=\"#333333\"/>\n  <text x=\"{x:.2}\" y=\"{ty}\" text-anchor=\"middle\">{v}</text>",
            x = px,
            b = BOTTOM,
            b2 = BOTTOM + 5.0,
            ty = BOTTOM + 19.0,
            v = fmt_tick(fx)
        );
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(fy);
        let _ = writeln!(
            svg,
            "  <line x1=\"{l2}\" y1=\"{y:.2}\" x2=\"{l}\" y2=\"{y:.2}\" stroke=\"#333333\"/>\n  <text x=\"{tx}\" y=\"{y2:.2}\" text-anchor=\"end\">{v}</text>",
            l = LEFT,
            l2 = LEFT - 5.0,
            tx = LEFT - 9.0,
            y = py,
            y2 = py + 4.0,
            v = fmt_tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(spec.x_label)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"18\" y=\"{mid}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {mid})\">{label}</text>",
        mid = (TOP + BOTTOM) / 2.0,
        label = escape(spec.y_label)
    );

    // series: polyline + markers, legend entry per series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() >= 2 {
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                "  <polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
                coords.join(" "),
                color
            );
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\"/>",
                sx(x),
                sy(y),
                color
            );
        }
        let ly = TOP + 10.0 + i as f64 * 20.0;
        let _ = writeln!(
            svg,
            "  <rect x=\"{x}\" y=\"{y:.2}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n  <text x=\"{tx}\" y=\"{ty:.2}\">{label}</text>",
            x = RIGHT + 14.0,
            y = ly - 2.0,
            tx = RIGHT + 34.0,
            ty = ly + 4.0,
            color = color,
            label = escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn frontier_rows_group_by_method_sorted_by_diversity() {
        let f = csv_file(
            "method,seq_len,temperature,coherence,diversity,n_samples,sampler_steps,seed\n\
             drope,64,1.000000,0.500000,0.900000,4,64,0\n\
             drope,64,0.500000,0.800000,0.200000,4,64,0\n\
             mdlm,64,1.000000,0.300000,0.700000,4,16,0\n",
        );
        let series = frontier_series(&[f.path()]).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].label, "drope");
        assert_eq!(series[0].points, vec![(0.2, 0.8), (0.9, 0.5)]);
        assert_eq!(series[1].label, "mdlm");
    }

    #[test]
    fn nll_rows_prefer_validation_over_train() {
        let f = csv_file(
            "step,split,objective,seq_len,nats_per_token,wallclock_s\n\
             1,train,drope,32,3.100000,0.010\n\
             2,train,drope,32,3.000000,0.020\n\
             2,valid,drope,32,3.050000,0.030\n\
             1,train,mdlm,32,3.200000,0.010\n",
        );
        let series = nll_series(&[f.path()]).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].label, "drope seq=32");
        assert_eq!(series[0].points, vec![(2.0, 3.05)]);
        // no validation rows for the second run, so its train curve stands in
        assert_eq!(series[1].label, "mdlm seq=32");
        assert_eq!(series[1].points, vec![(1.0, 3.2)]);
    }

    #[test]
    fn header_mismatch_and_bad_fields_are_validation_errors() {
        let bad_header = csv_file("method,temp\ndrope,1.0\n");
        assert_eq!(
            frontier_series(&[bad_header.path()]).unwrap_err().exit_code(),
            2
        );
        let bad_field = csv_file(
            "method,seq_len,temperature,coherence,diversity,n_samples,sampler_steps,seed\n\
             drope,64,warm,0.5,0.5,4,64,0\n",
        );
        let err = frontier_series(&[bad_field.path()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 2"), "{}", err);
        let empty = csv_file("method,seq_len,temperature,coherence,diversity,n_samples,sampler_steps,seed\n");
        assert_eq!(frontier_series(&[empty.path()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn single_point_renders_one_marker_and_no_polyline() {
        let series = vec![Series {
            label: "drope".into(),
            points: vec![(0.5, 0.5)],
        }];
        let spec = ChartSpec {
            title: "frontier".into(),
            x_label: "diversity",
            y_label: "coherence",
        };
        let svg = render_chart(&series, &spec);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
        assert!(svg.contains(">drope</text>"));
    }

    #[test]
    fn labels_are_xml_escaped() {
        let series = vec![Series {
            label: "a<b&\"c\"".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }];
        let spec = ChartSpec {
            title: "t".into(),
            x_label: "x",
            y_label: "y",
        };
        let svg = render_chart(&series, &spec);
        assert!(svg.contains("a&lt;b&amp;&quot;c&quot;"));
        assert!(!svg.contains("a<b"));
    }

    #[test]
    fn tick_labels_trim_trailing_zeros() {
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(1500.0), "1500");
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(-0.125), "-0.125");
    }
}
