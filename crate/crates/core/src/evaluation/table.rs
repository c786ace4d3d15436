use std::fmt::Write;

use super::EvalReport;

/// Plain-text table: one block per IoU threshold, methods as rows, classes
/// and the overall MAP as columns, values in percent.
pub fn render_table(methods: &[(String, &EvalReport)], class_names: &[String]) -> String {
    let mut out = String::new();
    let Some((_, first)) = methods.first() else {
        return out;
    };

    let label_width = methods
        .iter()
        .map(|(m, _)| m.len())
        .chain(std::iter::once(8))
        .max()
        .unwrap_or(8);

    for (ti, thr) in first.thresholds.iter().enumerate() {
        let headers: Vec<String> = thr
            .classes
            .iter()
            .map(|c| {
                class_names
                    .get(c.class_id as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", c.class_id))
            })
            .chain(std::iter::once("TOTAL".to_string()))
            .collect();
        let widths: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();

        let _ = write!(out, "{:<label_width$}", format!("IoU {}", thr.iou_threshold));
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, " | {h:>w$}");
        }
        out.push('\n');
        let rule_len = label_width + widths.iter().map(|w| w + 3).sum::<usize>();
        out.push_str(&"-".repeat(rule_len));
        out.push('\n');

        for (name, report) in methods {
            let Some(t) = report.thresholds.get(ti) else { continue };
            let _ = write!(out, "{name:<label_width$}");
            for (c, w) in thr.classes.iter().zip(&widths) {
                let ap = t
                    .classes
                    .iter()
                    .find(|x| x.class_id == c.class_id)
                    .map(|x| x.ap)
                    .unwrap_or(0.0);
                let _ = write!(out, " | {:>w$.2}", ap * 100.0);
            }
            let _ = write!(out, " | {:>w$.2}", t.map * 100.0, w = widths[widths.len() - 1]);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{ClassAp, ThresholdReport};

    #[test]
    fn layout() {
        let r = EvalReport {
            thresholds: vec![ThresholdReport {
                iou_threshold: 0.5,
                classes: vec![ClassAp {
                    class_id: 0,
                    class_name: None,
                    ap: 0.8008,
                    num_ground_truth: 1,
                    num_detections: 1,
                }],
                map: 0.8008,
            }],
            num_detections: 1,
            num_ground_truth: 1,
        };
        let t = render_table(&[("Ensemble".into(), &r)], &["person".into()]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "IoU 0.5  | person |  TOTAL");
        assert_eq!(lines[2], "Ensemble |  80.08 |  80.08");
    }
}
