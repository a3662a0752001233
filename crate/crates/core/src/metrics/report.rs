//! Plain-text and SVG renderings of a ranked result.

use super::RankedResult;

/// Fixed-width table: one row per policy in predicted order, followed by
/// the accuracy metrics when true returns are known.
pub fn ranked_result_table(result: &RankedResult) -> String {
    let id_width = result
        .policy_ids
        .iter()
        .map(|id| id.len())
        .max()
        .unwrap_or(0)
        .max("policy".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5}  {:<id_width$}  {:>14}  {:>14}\n",
        "rank", "policy", "mean_score", "true_return"
    ));
    for (pos, &i) in result.ranking.iter().enumerate() {
        let truth = match &result.true_returns {
            Some(v) => format!("{:>14.6}", v[i]),
            None => format!("{:>14}", "-"),
        };
        out.push_str(&format!(
            "{:>5}  {:<id_width$}  {:>14.6}  {}\n",
            pos + 1,
            result.policy_ids[i],
            result.mean_scores[i],
            truth
        ));
    }
    if let Some(s) = result.spearman {
        out.push_str(&format!("\nspearman  {s:.6}\n"));
    }
    for entry in &result.regret_at_k {
        out.push_str(&format!("regret@{}  {:.6}\n", entry.k, entry.value));
    }
    out
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PLOT_LEFT: f64 = 64.0;
const PLOT_TOP: f64 = 48.0;
const PLOT_W: f64 = 400.0;
const PLOT_H: f64 = 312.0;

/// Self-contained SVG report. With true returns it scatters predicted
/// rank against true rank around the ideal diagonal; without them it
/// plots the score of each policy by predicted rank.
pub fn render_rank_report_svg(result: &RankedResult) -> String {
    let n = result.policy_ids.len();
    let mut svg = String::new();
    svg.push_str(concat!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"420\" ",
        "viewBox=\"0 0 520 420\" font-family=\"sans-serif\" font-size=\"12\">\n",
        "<rect width=\"520\" height=\"420\" fill=\"#ffffff\"/>\n",
    ));

    let mut title = String::from("policy ranking");
    if let Some(s) = result.spearman {
        title.push_str(&format!(" (spearman {s:.3}"));
        for entry in &result.regret_at_k {
            title.push_str(&format!(", regret@{} {:.3}", entry.k, entry.value));
        }
        title.push(')');
    }
    svg.push_str(&format!(
        "<text x=\"260\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        escape(&title)
    ));
    svg.push_str(&format!(
        "<rect x=\"{PLOT_LEFT}\" y=\"{PLOT_TOP}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         fill=\"none\" stroke=\"#444444\"/>\n"
    ));

    // Rank 1 is drawn at the low end of each axis.
    let span = (n.max(2) - 1) as f64;
    let x_of = |rank: usize| PLOT_LEFT + (rank - 1) as f64 / span * PLOT_W;
    let y_of = |rank: usize| PLOT_TOP + PLOT_H - (rank - 1) as f64 / span * PLOT_H;

    match &result.true_returns {
        Some(truth) => {
            let mut true_order: Vec<usize> = (0..n).collect();
            true_order.sort_by(|&i, &j| truth[j].total_cmp(&truth[i]));
            let mut true_rank = vec![0usize; n];
            for (pos, &i) in true_order.iter().enumerate() {
                true_rank[i] = pos + 1;
            }
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbbbbb\" \
                 stroke-dasharray=\"4 3\"/>\n",
                x_of(1),
                y_of(1),
                x_of(n.max(2)),
                y_of(n.max(2))
            ));
            for (pos, &i) in result.ranking.iter().enumerate() {
                svg.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#4682b4\">\
                     <title>{}</title></circle>\n",
                    x_of(true_rank[i]),
                    y_of(pos + 1),
                    escape(&result.policy_ids[i])
                ));
            }
            svg.push_str(&axis_labels("true rank", "predicted rank", n));
        }
        None => {
            let lo = result
                .mean_scores
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let hi = result
                .mean_scores
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { hi - lo } else { 1.0 };
            for (pos, &i) in result.ranking.iter().enumerate() {
                let y = PLOT_TOP + PLOT_H - (result.mean_scores[i] - lo) / range * PLOT_H;
                svg.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"#4682b4\">\
                     <title>{}</title></circle>\n",
                    x_of(pos + 1),
                    escape(&result.policy_ids[i])
                ));
            }
            svg.push_str(&axis_labels("predicted rank", "mean score", n));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn axis_labels(x_name: &str, y_name: &str, n: usize) -> String {
    let mut out = format!(
        "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\">{}</text>\n",
        PLOT_LEFT + PLOT_W / 2.0,
        PLOT_TOP + PLOT_H + 36.0,
        escape(x_name)
    );
    out.push_str(&format!(
        "<text x=\"18\" y=\"{:.0}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.0})\">{}</text>\n",
        PLOT_TOP + PLOT_H / 2.0,
        PLOT_TOP + PLOT_H / 2.0,
        escape(y_name)
    ));
    for (rank, anchor) in [(1usize, "1"), (n.max(1), &n.to_string()[..])] {
        let x = PLOT_LEFT + (rank - 1) as f64 / (n.max(2) - 1) as f64 * PLOT_W;
        out.push_str(&format!(
            "<text x=\"{x:.0}\" y=\"{:.0}\" text-anchor=\"middle\">{anchor}</text>\n",
            PLOT_TOP + PLOT_H + 16.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RankedResult;

    fn sample() -> RankedResult {
        RankedResult::new(
            vec!["pi-a".into(), "pi-b".into(), "pi-c".into()],
            vec![0.2, 1.5, -0.3],
            Some(vec![4.0, 9.0, 1.0]),
            &[1],
        )
        .unwrap()
    }

    #[test]
    fn table_lists_policies_in_predicted_order() {
        let table = ranked_result_table(&sample());
        let rows: Vec<&str> = table.lines().collect();
        assert!(rows[0].contains("mean_score"));
        assert!(rows[1].contains("pi-b"));
        assert!(rows[2].contains("pi-a"));
        assert!(rows[3].contains("pi-c"));
        assert!(table.contains("spearman  1.000000"));
        assert!(table.contains("regret@1  0.000000"));
    }

    #[test]
    fn table_marks_unknown_returns() {
        let r = RankedResult::new(
            vec!["solo".into()],
            vec![0.5],
            None,
            &[],
        )
        .unwrap();
        let table = ranked_result_table(&r);
        assert!(table.contains('-'));
        assert!(!table.contains("spearman"));
    }

    #[test]
    fn svg_report_has_one_marker_per_policy() {
        let svg = render_rank_report_svg(&sample());
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("spearman 1.000"));
    }

    #[test]
    fn svg_report_without_truth_plots_scores() {
        let r = RankedResult::new(
            vec!["a&b".into(), "c<d".into()],
            vec![1.0, 2.0],
            None,
            &[],
        )
        .unwrap();
        let svg = render_rank_report_svg(&r);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a&amp;b"));
        assert!(svg.contains("c&lt;d"));
        assert!(!svg.contains("spearman"));
    }
}
