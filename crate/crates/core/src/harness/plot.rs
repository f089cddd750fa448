use std::fmt::Write as _;

use super::EvalReport;

/// `video_id,q_pre,q_gt` rows with a header.
pub fn scores_csv(report: &EvalReport) -> String {
    let mut out = String::from("video_id,q_pre,q_gt\n");
    for r in &report.scores {
        let id = if r.video_id.contains([',', '"', '\n']) {
            format!("\"{}\"", r.video_id.replace('"', "\"\""))
        } else {
            r.video_id.clone()
        };
        let _ = writeln!(out, "{id},{},{}", r.q_pre, r.q_gt);
    }
    out
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Scatter of prediction against MOS, with the fitted logistic curve when present.
pub fn scatter_svg(report: &EvalReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let (x0, x1) = bounds(report.scores.iter().map(|r| r.q_pre));
    let (y0, y1) = bounds(report.scores.iter().map(|r| r.q_gt));
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted quality</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">MOS</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{M}" y="20">{} ({}) SROCC {:.4} PLCC {:.4}</text>"#,
        escape(&report.dataset),
        escape(&report.split),
        report.srocc,
        report.plcc
    );
    for r in &report.scores {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue" fill-opacity="0.7"/>"#,
            px(r.q_pre),
            py(r.q_gt)
        );
    }
    if let Some(fit) = &report.logistic {
        let pts: Vec<String> = fit
            .curve(x0, x1, 100)
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y.clamp(y0, y1))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ScoreRow;

    fn report() -> EvalReport {
        EvalReport {
            dataset: "a<b".into(),
            split: "test".into(),
            n: 2,
            srocc: 1.0,
            plcc: 1.0,
            logistic: None,
            logistic_error: Some("too few".into()),
            scores: vec![
                ScoreRow {
                    video_id: "v,1".into(),
                    q_pre: 0.2,
                    q_gt: 0.3,
                    s_pos: 0.0,
                    s_neg: 0.0,
                },
                ScoreRow {
                    video_id: "v2".into(),
                    q_pre: 0.8,
                    q_gt: 0.7,
                    s_pos: 0.0,
                    s_neg: 0.0,
                },
            ],
            fingerprint: String::new(),
        }
    }

    #[test]
    fn csv_quotes_ids() {
        let csv = scores_csv(&report());
        assert_eq!(csv.lines().collect::<Vec<_>>(), ["video_id,q_pre,q_gt", "\"v,1\",0.2,0.3", "v2,0.8,0.7"]);
    }

    #[test]
    fn svg_has_one_marker_per_video() {
        let svg = scatter_svg(&report());
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("polyline"));
    }
}
