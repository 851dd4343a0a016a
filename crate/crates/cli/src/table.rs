//! Plain-text tables in the layout of the result and ablation tables.

use mifuse_core::train::{MeanStd, MetricSummary, Report, RunStatus};

const COLUMNS: [(&str, &str); 5] = [
    ("accuracy", "Accuracy"),
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("specificity", "Specificity"),
    ("f1", "F1"),
];

fn cell(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.std)
}

/// Renders rows of `(label, summary, note)` with aligned columns. Rows
/// without a summary show their note in place of the metrics.
pub fn summary_table(first: &str, rows: &[(String, Option<MetricSummary>, String)]) -> String {
    let mut grid: Vec<Vec<String>> = vec![std::iter::once(first.to_string())
        .chain(COLUMNS.iter().map(|(_, h)| h.to_string()))
        .chain(std::iter::once(String::new()))
        .collect()];
    for (label, summary, note) in rows {
        let mut line = vec![label.clone()];
        match summary {
            Some(s) => line.extend(
                COLUMNS
                    .iter()
                    .map(|(k, _)| cell(s.get(k).expect("known metric"))),
            ),
            None => line.extend(COLUMNS.iter().map(|_| "-".to_string())),
        }
        line.push(note.clone());
        grid.push(line);
    }
    render(&grid)
}

/// Per-run lines followed by the mean ± std row of a report.
pub fn report_table(report: &Report) -> String {
    let mut grid: Vec<Vec<String>> = vec![["Run", "Seed", "Epochs", "Best"]
        .iter()
        .map(|s| s.to_string())
        .chain(COLUMNS.iter().map(|(_, h)| h.to_string()))
        .collect()];
    for r in &report.per_run {
        let mut line = vec![r.run.to_string(), r.seed.to_string()];
        let split = r.test.as_ref().or(r.val.as_ref());
        match (r.status, split) {
            (RunStatus::Ok, Some(s)) => {
                line.push(r.epochs.unwrap_or(0).to_string());
                line.push(r.best_epoch.unwrap_or(0).to_string());
                let v = &s.metrics;
                line.extend(
                    [v.accuracy, v.precision, v.recall, v.specificity, v.f1]
                        .map(|x| format!("{x:.2}")),
                );
            }
            _ => {
                line.extend(["-".to_string(), "-".to_string()]);
                line.push(format!("failed: {}", r.error.as_deref().unwrap_or("")));
            }
        }
        grid.push(line);
    }
    if let Some(s) = report.headline() {
        let mut line = vec![
            "mean".to_string(),
            String::new(),
            String::new(),
            String::new(),
        ];
        line.extend(
            COLUMNS
                .iter()
                .map(|(k, _)| cell(s.get(k).expect("known metric"))),
        );
        grid.push(line);
    }
    render(&grid)
}

fn render(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            grid.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in grid {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(mean: f64) -> MeanStd {
        MeanStd { mean, std: 1.5 }
    }

    #[test]
    fn columns_align() {
        let s = MetricSummary {
            accuracy: ms(85.42),
            precision: ms(84.0),
            recall: ms(87.5),
            f1: ms(85.71),
            specificity: ms(83.33),
        };
        let t = summary_table(
            "λ",
            [("0".into(), Some(s.clone())), ("0.25".into(), None)]
                .map(|(l, s)| (l, s, String::new()))
                .as_ref(),
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("λ"));
        assert!(lines[1].contains("85.42 ± 1.50"));
        let col = |l: &str, pat: &str| l[..l.find(pat).unwrap()].chars().count();
        assert_eq!(col(lines[0], "Precision"), col(lines[1], "84.00"));
        assert_eq!(col(lines[0], "Accuracy"), col(lines[1], "85.42"));
        assert_eq!(col(lines[0], "Accuracy"), col(lines[2], "-"));
    }
}
