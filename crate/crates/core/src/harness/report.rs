use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::record::{mean_present, ResultsRecord};
use crate::error::{Error, Result};

/// Header of the mean column and label of the trailing chart group.
pub const MEAN_LABEL: &str = "μ";

const GAMES: [(&str, &str); 22] = [
    ("Asteroids", "As"),
    ("Berzerk", "Bz"),
    ("Bowling", "Bw"),
    ("Boxing", "Bx"),
    ("Breakout", "Br"),
    ("DemonAttack", "Da"),
    ("Freeway", "Fw"),
    ("Frostbite", "Fb"),
    ("Hero", "He"),
    ("MontezumaRevenge", "Mr"),
    ("MsPacman", "Mp"),
    ("Pitfall", "Pf"),
    ("Pong", "Pg"),
    ("PrivateEye", "Pe"),
    ("Qbert", "Qb"),
    ("Riverraid", "Rr"),
    ("Seaquest", "Sq"),
    ("SpaceInvaders", "Si"),
    ("Tennis", "Tn"),
    ("Venture", "Vt"),
    ("VideoPinball", "Vp"),
    ("YarsRevenge", "Yr"),
];

/// Short chart label of an Atari game. Matching ignores case, spaces,
/// apostrophes and a `NoFrameskip-v4` style suffix.
pub fn game_abbreviation(name: &str) -> Option<&'static str> {
    let base = name.split(['-', '_']).next().unwrap_or(name);
    let base = base.strip_suffix("NoFrameskip").unwrap_or(base);
    let norm: String = base
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    GAMES
        .iter()
        .find(|(g, _)| {
            let g = g.to_lowercase();
            g == norm || (g == "montezumarevenge" && norm == "montezumasrevenge")
        })
        .map(|(_, a)| *a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub variant: String,
    /// One entry per table category; `None` when the record lacks it.
    pub values: Vec<Option<f64>>,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub categories: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// An externally supplied bar (for example a published reference number).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceBar {
    pub label: String,
    pub config: String,
    pub f1: f64,
}

/// Reads `label,config,f1` rows.
pub fn read_reference_csv(path: &Path) -> Result<Vec<ReferenceBar>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// One row per record; categories in first-seen order.
pub fn build_report(records: &[ResultsRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::invalid("a report needs at least one record"));
    }
    let mut categories: Vec<String> = Vec::new();
    for r in records {
        for c in &r.categories {
            if !categories.contains(&c.name) {
                categories.push(c.name.clone());
            }
        }
    }
    let rows = records
        .iter()
        .map(|r| {
            let values: Vec<Option<f64>> = categories.iter().map(|c| r.f1(c)).collect();
            ReportRow {
                label: r.label.clone(),
                variant: r.variant.clone(),
                mu: mean_present(values.iter().copied()),
                values,
            }
        })
        .collect();
    Ok(ReportTable { categories, rows })
}

pub fn report_csv(table: &ReportTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["label".to_string(), "config".to_string()];
    header.extend(table.categories.iter().cloned());
    header.push(MEAN_LABEL.to_string());
    w.write_record(&header).map_err(err)?;
    for row in &table.rows {
        let mut rec = vec![row.label.clone(), row.variant.clone()];
        rec.extend(row.values.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        rec.push(row.mu.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

/// Grouped bar chart: one group per dataset label (abbreviated when it is a
/// known game), one bar per configuration showing its mean F1, and a
/// trailing μ group averaging each configuration over labels. Every bar
/// carries its exact value in `data-value`; heights are `value × 300`.
pub fn report_svg(table: &ReportTable, references: &[ReferenceBar]) -> String {
    let mut labels: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    let mut points: Vec<(String, String, f64)> = Vec::new();
    for r in &table.rows {
        points.push((r.label.clone(), r.variant.clone(), r.mu));
    }
    for r in references {
        points.push((r.label.clone(), r.config.clone(), r.f1));
    }
    for (l, s, _) in &points {
        if !labels.contains(l) {
            labels.push(l.clone());
        }
        if !series.contains(s) {
            series.push(s.clone());
        }
    }
    let value = |l: &str, s: &str| points.iter().find(|(pl, ps, _)| pl == l && ps == s).map(|p| p.2);

    let plot_h = 300.0;
    let (bar_w, gap, left, top) = (18.0, 24.0, 50.0, 20.0);
    let group_w = series.len() as f64 * bar_w + gap;
    let groups = labels.len() + 1;
    let width = left + groups as f64 * group_w + 20.0;
    let legend_h = 18.0 * series.len() as f64;
    let height = top + plot_h + 40.0 + legend_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let base = top + plot_h;
    let _ = writeln!(svg, r#"  <line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, width - 20.0);
    let _ = writeln!(svg, r#"  <line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - v * plot_h;
        let _ = writeln!(svg, r#"  <text x="{}" y="{}" text-anchor="end">{v}</text>"#, left - 4.0, y + 4.0);
    }
    let draw_group = |svg: &mut String, gi: usize, name: &str, values: Vec<Option<f64>>| {
        let gx = left + gap / 2.0 + gi as f64 * group_w;
        for (si, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let h = v * plot_h;
                let _ = writeln!(
                    svg,
                    r#"  <rect class="bar" data-group="{}" data-series="{}" data-value="{v}" x="{}" y="{}" width="{bar_w}" height="{h}" fill="{}"/>"#,
                    escape(name),
                    escape(&series[si]),
                    gx + si as f64 * bar_w,
                    base - h,
                    PALETTE[si % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"  <text class="group-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + series.len() as f64 * bar_w / 2.0,
            base + 14.0,
            escape(name)
        );
    };
    for (gi, l) in labels.iter().enumerate() {
        let shown = game_abbreviation(l).unwrap_or(l);
        draw_group(&mut svg, gi, shown, series.iter().map(|s| value(l, s)).collect());
    }
    let means = series.iter().map(|s| {
        let present: Vec<Option<f64>> = labels.iter().map(|l| value(l, s)).collect();
        present.iter().any(Option::is_some).then(|| mean_present(present))
    });
    draw_group(&mut svg, labels.len(), MEAN_LABEL, means.collect());
    for (si, s) in series.iter().enumerate() {
        let y = base + 32.0 + si as f64 * 18.0;
        let _ = writeln!(svg, r#"  <rect x="{left}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[si % PALETTE.len()]);
        let _ = writeln!(svg, r#"  <text x="{}" y="{y}">{}</text>"#, left + 14.0, escape(s));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.csv` and `report.svg` into `out_dir`.
pub fn render_report(records: &[ResultsRecord], references: &[ReferenceBar], out_dir: &Path) -> Result<ReportTable> {
    let table = build_report(records)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(&table)?).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = out_dir.join("report.svg");
    std::fs::write(&svg_path, report_svg(&table, references)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::record::tests::record;

    #[test]
    fn abbreviations() {
        assert_eq!(game_abbreviation("Pong"), Some("Pg"));
        assert_eq!(game_abbreviation("PongNoFrameskip-v4"), Some("Pg"));
        assert_eq!(game_abbreviation("Montezuma's Revenge"), Some("Mr"));
        assert_eq!(game_abbreviation("space invaders"), Some("Si"));
        assert_eq!(game_abbreviation("synth"), None);
    }

    #[test]
    fn table_shape_and_mu() {
        let recs = vec![
            record("FI", &[("a", 0.1), ("b", 0.2), ("c", 0.3), ("d", 0.4)]),
            record("FI+2x2", &[("a", 0.5), ("b", 0.6), ("c", 0.7), ("d", 0.9)]),
            record("FI+FI", &[("a", 1.0 / 3.0), ("b", 0.25), ("c", 0.0), ("d", 1.0)]),
        ];
        let t = build_report(&recs).unwrap();
        let csv = report_csv(&t).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        for (line, rec) in lines[1..].iter().zip(&recs) {
            let cells: Vec<f64> = line.split(',').skip(2).map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells.len(), 5);
            let mean = cells[..4].iter().sum::<f64>() / 4.0;
            assert!((cells[4] - mean).abs() < 1e-12);
            assert_eq!(cells[4], rec.mean_f1);
        }
    }

    #[test]
    fn empty_report_rejected() {
        assert!(build_report(&[]).is_err());
    }
}
