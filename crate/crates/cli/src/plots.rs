//! Deterministic SVG charts of the recorded per-round metrics.
//!
//! Three charts are rendered from a results directory: attack success
//! rate, mean remaining accuracy, and parameter distance to the origin
//! model. Each run contributes one polyline, colored by algorithm, and
//! stage transitions are marked with dashed vertical lines. Rendering
//! is fully deterministic: directory traversal is sorted and every
//! coordinate is formatted with fixed precision, so identical inputs
//! produce byte-identical files.

use fedosd_core::error::{Error, Result};
use fedosd_core::metrics::{read_records_csv, RoundRecord};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// One run's curve: the records of `<algorithm>/<seed>/records.csv`.
struct Series {
    algorithm: String,
    seed: String,
    records: Vec<RoundRecord>,
}

struct ChartSpec {
    file: &'static str,
    title: &'static str,
    /// Fixed [0, 1] value axis; otherwise autoscaled from the data.
    unit_range: bool,
    value: fn(&RoundRecord) -> f64,
}

const CHARTS: [ChartSpec; 3] = [
    ChartSpec {
        file: "asr.svg",
        title: "attack success rate",
        unit_range: true,
        value: |r| r.asr,
    },
    ChartSpec {
        file: "racc.svg",
        title: "remaining accuracy (mean)",
        unit_range: true,
        value: |r| r.r_acc_mean,
    },
    ChartSpec {
        file: "dist.svg",
        title: "distance to origin",
        unit_range: false,
        value: |r| r.dist_origin,
    },
];

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 62.0;
const RIGHT: f64 = 784.0;
const TOP: f64 = 42.0;
const BOTTOM: f64 = 428.0;

fn color_for(algorithm: &str) -> &'static str {
    match algorithm {
        "fedosd" => "#1f77b4",
        "gradient_ascent" => "#d62728",
        "negated_gradient" => "#ff7f0e",
        "random_null" => "#9467bd",
        "no_projection" => "#2ca02c",
        "retraining" => "#8c564b",
        _ => "#7f7f7f",
    }
}

/// Renders the three charts into `dir` from every
/// `<algorithm>/<seed>/records.csv` beneath it. Returns the chart paths.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let series = discover(dir)?;
    if series.is_empty() {
        return Err(Error::Ingestion(format!(
            "no records under {}: expected <algorithm>/<seed>/records.csv",
            dir.display()
        )));
    }
    let mut written = Vec::with_capacity(CHARTS.len());
    for chart in &CHARTS {
        let svg = render_chart(&series, chart);
        let path = dir.join(chart.file);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn subdirs_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn dir_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn discover(dir: &Path) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    for algo_dir in subdirs_sorted(dir)? {
        let mut seed_dirs = subdirs_sorted(&algo_dir)?;
        // Seeds sort numerically where possible so "10" follows "2".
        seed_dirs.sort_by_key(|p| {
            let name = dir_name(p);
            (name.parse::<u64>().unwrap_or(u64::MAX), name)
        });
        for seed_dir in seed_dirs {
            let csv = seed_dir.join("records.csv");
            if csv.is_file() {
                series.push(Series {
                    algorithm: dir_name(&algo_dir),
                    seed: dir_name(&seed_dir),
                    records: read_records_csv(&csv)?,
                });
            }
        }
    }
    Ok(series)
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn render_chart(series: &[Series], chart: &ChartSpec) -> String {
    let mut min_round = usize::MAX;
    let mut max_round = 0usize;
    let mut max_value = f64::NEG_INFINITY;
    // First round of each stage after the first marks a transition.
    let mut transitions: BTreeSet<usize> = BTreeSet::new();
    for s in series {
        for (i, r) in s.records.iter().enumerate() {
            min_round = min_round.min(r.round);
            max_round = max_round.max(r.round);
            let v = (chart.value)(r);
            if v.is_finite() {
                max_value = max_value.max(v);
            }
            if i > 0 && r.stage != s.records[i - 1].stage {
                transitions.insert(r.round);
            }
        }
    }
    if min_round > max_round {
        min_round = 0;
        max_round = 1;
    }
    if max_round == min_round {
        max_round += 1;
    }
    let (y_min, y_max) = if chart.unit_range {
        (0.0, 1.0)
    } else if max_value > 0.0 {
        (0.0, max_value * 1.05)
    } else {
        (0.0, 1.0)
    };
    let x_of = |round: usize| {
        LEFT + (round - min_round) as f64 / (max_round - min_round) as f64 * (RIGHT - LEFT)
    };
    let y_of = |v: f64| BOTTOM - (v - y_min) / (y_max - y_min) * (BOTTOM - TOP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" font-size=\"15\" fill=\"#222222\">{}</text>",
        fmt2(LEFT),
        chart.title
    );

    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333333\"/>\n\
         <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333333\"/>\n",
        l = fmt2(LEFT),
        r = fmt2(RIGHT),
        t = fmt2(TOP),
        b = fmt2(BOTTOM),
    );

    // Value-axis ticks and grid.
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = fmt2(y_of(v));
        let _ = write!(
            svg,
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{lx}\" y=\"{ty}\" text-anchor=\"end\" fill=\"#333333\">{v}</text>\n",
            l = fmt2(LEFT),
            r = fmt2(RIGHT),
            lx = fmt2(LEFT - 6.0),
            ty = fmt2(y_of(v) + 4.0),
            v = format_tick(v),
        );
    }

    // Round-axis ticks.
    let mut round_ticks: Vec<usize> = (0..=4)
        .map(|i| min_round + (max_round - min_round) * i / 4)
        .collect();
    round_ticks.dedup();
    for round in round_ticks {
        let x = fmt2(x_of(round));
        let _ = write!(
            svg,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"#333333\"/>\n\
             <text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\" fill=\"#333333\">{round}</text>\n",
            b = fmt2(BOTTOM),
            b2 = fmt2(BOTTOM + 5.0),
            ty = fmt2(BOTTOM + 18.0),
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" fill=\"#333333\">round</text>",
        x = fmt2((LEFT + RIGHT) / 2.0),
        y = fmt2(BOTTOM + 36.0),
    );

    // Stage transitions.
    for round in &transitions {
        let x = fmt2(x_of(*round));
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{t}\" x2=\"{x}\" y2=\"{b}\" stroke=\"#888888\" \
             stroke-dasharray=\"4,3\"/>",
            t = fmt2(TOP),
            b = fmt2(BOTTOM),
        );
    }

    // One polyline per run; non-finite values are dropped.
    for s in series {
        let mut points = String::new();
        for r in &s.records {
            let v = (chart.value)(r);
            if !v.is_finite() {
                continue;
            }
            if !points.is_empty() {
                points.push(' ');
            }
            let _ = write!(points, "{},{}", fmt2(x_of(r.round)), fmt2(y_of(v)));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color_for(&s.algorithm),
            points,
        );
    }

    // Legend: one entry per algorithm, annotated with its seeds.
    let mut legend: Vec<(String, Vec<String>)> = Vec::new();
    for s in series {
        match legend.iter_mut().find(|(a, _)| *a == s.algorithm) {
            Some((_, seeds)) => seeds.push(s.seed.clone()),
            None => legend.push((s.algorithm.clone(), vec![s.seed.clone()])),
        }
    }
    for (i, (algorithm, seeds)) in legend.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let label = if seeds.len() == 1 {
            algorithm.clone()
        } else {
            format!("{} (seeds {})", algorithm, seeds.join(", "))
        };
        let _ = write!(
            svg,
            "<line x1=\"{x1}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{c}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" fill=\"#333333\">{label}</text>\n",
            x1 = fmt2(LEFT + 10.0),
            x2 = fmt2(LEFT + 30.0),
            ly = fmt2(y),
            c = color_for(algorithm),
            tx = fmt2(LEFT + 36.0),
            ty = fmt2(y + 4.0),
        );
    }

    svg.push_str("</svg>\n");
    svg
}

/// Tick labels stay compact across scales: plain fixed precision in a
/// readable range, scientific notation outside it.
fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.2e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedosd_core::metrics::{write_records_csv, Stage};

    fn record(round: usize, stage: Stage, asr: f64, dist: f64) -> RoundRecord {
        RoundRecord {
            round,
            stage,
            asr,
            r_acc_mean: 0.9,
            r_acc_std: 0.01,
            r_acc_worst: 0.85,
            r_acc_best: 0.95,
            dist_origin: dist,
            nc: 0,
            target_uce_loss: 0.1,
            mean_remaining_ce_loss: 0.2,
            lr: 0.5,
            flags: Vec::new(),
        }
    }

    fn seed_run(dir: &Path, algorithm: &str, seed: &str, records: &[RoundRecord]) {
        let run = dir.join(algorithm).join(seed);
        fs::create_dir_all(&run).unwrap();
        write_records_csv(records, &run.join("records.csv")).unwrap();
    }

    fn sample_records() -> Vec<RoundRecord> {
        vec![
            record(1, Stage::Pretrain, 0.2, 0.0),
            record(2, Stage::Pretrain, 0.9, 0.0),
            record(3, Stage::Unlearn, 0.4, 1.5),
            record(4, Stage::Posttrain, 0.1, 1.2),
        ]
    }

    #[test]
    fn emits_three_charts_with_curves_and_stage_marks() {
        let dir = tempfile::tempdir().unwrap();
        seed_run(dir.path(), "fedosd", "0", &sample_records());
        seed_run(dir.path(), "negated_gradient", "0", &sample_records());
        let written = emit_plots(dir.path()).unwrap();
        assert_eq!(written.len(), 3);
        let asr = fs::read_to_string(dir.path().join("asr.svg")).unwrap();
        assert_eq!(asr.matches("<polyline").count(), 2);
        assert!(asr.contains("#1f77b4"));
        assert!(asr.contains("#ff7f0e"));
        // Two stage changes at rounds 3 and 4.
        assert_eq!(asr.matches("stroke-dasharray").count(), 2);
        assert!(asr.contains("attack success rate"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        seed_run(dir.path(), "fedosd", "0", &sample_records());
        emit_plots(dir.path()).unwrap();
        let first = fs::read(dir.path().join("dist.svg")).unwrap();
        emit_plots(dir.path()).unwrap();
        let second = fs::read(dir.path().join("dist.svg")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn distance_chart_autoscales_to_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = sample_records();
        records[3].dist_origin = 40.0;
        seed_run(dir.path(), "fedosd", "0", &records);
        emit_plots(dir.path()).unwrap();
        let dist = fs::read_to_string(dir.path().join("dist.svg")).unwrap();
        assert!(dist.contains(">42.00<"), "top tick should be 1.05 * max");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plots(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }
}
