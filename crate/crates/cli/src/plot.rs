//! KM step plots as plain SVG: one polyline per group, censoring ticks.

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 4] = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
}

/// Rows grouped by the `group` column, groups in first-appearance order.
pub fn parse(text: &str) -> Result<Vec<(String, Vec<Row>)>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["time", "survival", "at_risk", "group"] {
        bail!("expected header time,survival,at_risk,group");
    }
    let mut groups: Vec<(String, Vec<Row>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let row = Row {
            time: rec[0].parse().with_context(|| format!("line {line}: time"))?,
            survival: rec[1].parse().with_context(|| format!("line {line}: survival"))?,
            at_risk: rec[2].parse().with_context(|| format!("line {line}: at_risk"))?,
        };
        if !(0.0..=1.0).contains(&row.survival) || row.time < 0.0 {
            bail!("line {line}: survival must lie in [0, 1] and time be >= 0");
        }
        match groups.iter_mut().find(|(g, _)| g == &rec[3]) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((rec[3].to_string(), vec![row])),
        }
    }
    Ok(groups)
}

/// Censored count at each row, recovered from the drop in the at-risk set
/// minus the deaths implied by the survival step.
pub fn censored(rows: &[Row]) -> Vec<usize> {
    let mut prev_s = 1.0;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let leaving = match rows.get(i + 1) {
                Some(next) => r.at_risk.saturating_sub(next.at_risk),
                None => r.at_risk,
            };
            let deaths = if prev_s > 0.0 {
                (r.at_risk as f64 * (1.0 - r.survival / prev_s)).round() as usize
            } else {
                0
            };
            prev_s = r.survival;
            leaving.saturating_sub(deaths)
        })
        .collect()
}

fn nice_step(max: f64) -> f64 {
    let raw = max / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

pub fn render(csv_text: &str) -> Result<String> {
    let groups = parse(csv_text)?;
    if groups.is_empty() {
        bail!("KM CSV has no rows");
    }
    let t_max = groups
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.time))
        .fold(0.0, f64::max)
        .max(1.0);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |t: f64| LEFT + t / t_max * pw;
    let y = |s: f64| TOP + (1.0 - s) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!(
        "<path d=\"M{LEFT},{TOP} V{:.1} H{:.1}\" fill=\"none\" stroke=\"#000\"/>\n",
        TOP + ph,
        LEFT + pw
    ));
    let step = nice_step(t_max);
    let mut t = 0.0;
    while t <= t_max + 1e-9 {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>\n",
            x(t),
            TOP + ph + 16.0
        ));
        t += step;
    }
    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{s}</text>\n",
            LEFT - 6.0,
            y(s) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Time (months)</text>\n",
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "<text transform=\"translate(14,{:.1}) rotate(-90)\" text-anchor=\"middle\">Survival probability</text>\n",
        TOP + ph / 2.0
    ));

    for (gi, (name, rows)) in groups.iter().enumerate() {
        let color = COLORS[gi % COLORS.len()];
        let mut pts = vec![(x(0.0), y(1.0))];
        let mut prev = 1.0;
        for r in rows {
            pts.push((x(r.time), y(prev)));
            pts.push((x(r.time), y(r.survival)));
            prev = r.survival;
        }
        let points: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        svg.push_str(&format!(
            "<polyline class=\"km\" data-group=\"{name}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        for (r, c) in rows.iter().zip(censored(rows)) {
            if c > 0 {
                let (cx, cy) = (x(r.time), y(r.survival));
                svg.push_str(&format!(
                    "<line class=\"censor\" x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>\n",
                    cy - 4.0,
                    cy + 4.0
                ));
            }
        }
        let ly = TOP + 12.0 + 16.0 * gi as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"1.5\"/><text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n",
            LEFT + pw + 12.0,
            LEFT + pw + 32.0,
            LEFT + pw + 38.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
