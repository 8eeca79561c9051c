//! CSV and SVG emission for training histories, evaluations, and experiments.
//!
//! Every emitter is a pure `data -> String` function so outputs are
//! byte-stable across reruns: floats are written with Rust's shortest
//! round-trip `Display`, rows follow input order, and nothing consults
//! clocks or locales. Plots are small self-contained SVG line charts.

use crate::error::{Error, Result};
use crate::eval::{EvalReport, MaskRow, OKS_THRESHOLDS};
use crate::lcim::HistoryRow;
use crate::pose::model::StepRow;
use std::fmt::Write as _;

/// Adapter training history: one row per epoch.
pub fn lcim_history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,total,l_mse,l_freq,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.total, r.l_mse, r.l_freq, r.lr);
    }
    out
}

/// Pose training history: one row per optimizer step.
pub fn pose_history_csv(rows: &[StepRow]) -> String {
    let mut out = String::from("step,L_total,L_h,L_c,L_k,matched_count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.total, r.l_h, r.l_c, r.l_k, r.matched
        );
    }
    out
}

/// Per-threshold AP/AR table.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,ap,ar\n");
    for (t, ap, ar) in &report.per_threshold {
        let _ = writeln!(out, "{t},{ap},{ar}");
    }
    out
}

/// Headline numbers as a JSON object.
pub fn eval_summary_json(report: &EvalReport) -> String {
    serde_json::json!({
        "ap_mean": report.ap_mean,
        "ap_50": report.ap_50,
        "ap_75": report.ap_75,
        "ar_mean": report.ar_mean,
        "ar_50": report.ar_50,
        "ar_75": report.ar_75,
        "num_images": report.num_images,
        "num_gts": report.num_gts,
        "num_preds": report.num_preds,
    })
    .to_string()
}

/// Raw masking-experiment trials.
pub fn mask_trials_csv(rows: &[MaskRow]) -> String {
    let mut out = String::from("k,trial,ap_mean\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.k, r.trial, r.ap_mean);
    }
    out
}

/// Two mean-AP curves over masking level, gated fusion vs residual fusion.
pub fn mask_curves_csv(ks: &[usize], gated: &[f64], residual: &[f64]) -> Result<String> {
    if gated.len() != ks.len() || residual.len() != ks.len() {
        return Err(Error::dim_mismatch(
            "mask_curves_csv",
            format!("{0}/{0} curve points", ks.len()),
            format!("{}/{}", gated.len(), residual.len()),
        ));
    }
    let mut out = String::from("k,ap_gated,ap_residual\n");
    for (i, k) in ks.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", k, gated[i], residual[i]);
    }
    Ok(out)
}

/// Mean AP as a function of training-set size.
pub fn scaling_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("train_size,ap_mean\n");
    for (n, ap) in rows {
        let _ = writeln!(out, "{n},{ap}");
    }
    out
}

/// One spectral-loss-weight sweep point: reconstruction similarity of the
/// synthesized images plus downstream detection quality.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ap_mean: f64,
}

/// Spectral-loss-weight sweep table.
pub fn lambda_csv(rows: &[LambdaRow]) -> String {
    let mut out = String::from("lambda,psnr,ssim,ap_mean\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.lambda, r.psnr, r.ssim, r.ap_mean);
    }
    out
}

/// Sanity check that a report covers the standard threshold grid.
pub fn has_standard_thresholds(report: &EvalReport) -> bool {
    report.per_threshold.len() == OKS_THRESHOLDS.len()
        && report
            .per_threshold
            .iter()
            .zip(OKS_THRESHOLDS.iter())
            .all(|((t, _, _), want)| (t - want).abs() < 1e-12)
}

/// A named polyline for [`line_plot_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Series {
        Series { name: name.to_string(), points }
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn axis_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Render series as a fixed-size SVG line chart with axes, ticks, and a
/// legend. Output depends only on the inputs.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        SVG_W / 2.0,
        xml_escape(title)
    );

    let (px0, px1) = (MARGIN_L, SVG_W - MARGIN_R);
    let (py0, py1) = (SVG_H - MARGIN_B, MARGIN_T);
    if !pts.is_empty() {
        let (xlo, xhi) = axis_range(
            pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        );
        let (ylo, yhi) = axis_range(
            pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        );
        let sx = |x: f64| px0 + (x - xlo) / (xhi - xlo) * (px1 - px0);
        let sy = |y: f64| py0 - (y - ylo) / (yhi - ylo) * (py0 - py1);

        for i in 0..5 {
            let f = i as f64 / 4.0;
            let xv = xlo + f * (xhi - xlo);
            let yv = ylo + f * (yhi - ylo);
            let (tx, ty) = (sx(xv), sy(yv));
            let _ = writeln!(
                svg,
                "<line x1=\"{tx}\" y1=\"{py0}\" x2=\"{tx}\" y2=\"{}\" stroke=\"#000\"/>",
                py0 + 4.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{tx}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                py0 + 18.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{ty}\" x2=\"{px0}\" y2=\"{ty}\" stroke=\"#000\"/>",
                px0 - 4.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                px0 - 8.0,
                ty + 4.0,
                fmt_tick(yv)
            );
        }

        for (i, s) in series.iter().enumerate() {
            if s.points.is_empty() {
                continue;
            }
            let color = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                coords.join(" ")
            );
            let ly = py1 + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                px1 - 150.0,
                px1 - 126.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\">{}</text>",
                px1 - 120.0,
                ly + 4.0,
                xml_escape(&s.name)
            );
        }
    }

    let _ = writeln!(
        svg,
        "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py0}\" stroke=\"#000\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px0}\" y2=\"{py1}\" stroke=\"#000\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (px0 + px1) / 2.0,
        SVG_H - 14.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0,
        xml_escape(y_label)
    );
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Loss-history plot for pose training.
pub fn pose_history_svg(rows: &[StepRow]) -> String {
    let pick = |f: fn(&StepRow) -> f64| {
        rows.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>()
    };
    line_plot_svg(
        "pose training loss",
        "step",
        "loss",
        &[
            Series::new("total", pick(|r| r.total)),
            Series::new("box", pick(|r| r.l_h)),
            Series::new("class", pick(|r| r.l_c)),
            Series::new("keypoint", pick(|r| r.l_k)),
        ],
    )
}

/// Loss-history plot for adapter training.
pub fn lcim_history_svg(rows: &[HistoryRow]) -> String {
    let pick = |f: fn(&HistoryRow) -> f64| {
        rows.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>()
    };
    line_plot_svg(
        "adapter training loss",
        "epoch",
        "loss",
        &[
            Series::new("total", pick(|r| r.total)),
            Series::new("mse", pick(|r| r.l_mse)),
            Series::new("spectral", pick(|r| r.l_freq)),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> EvalReport {
        EvalReport {
            ap_mean: 0.5,
            ap_50: 0.75,
            ap_75: 0.5,
            ar_mean: 0.6,
            ar_50: 0.8,
            ar_75: 0.6,
            per_threshold: vec![(0.5, 0.75, 0.8), (0.75, 0.5, 0.6)],
            num_images: 3,
            num_gts: 5,
            num_preds: 6,
        }
    }

    #[test]
    fn csv_headers_and_rows_are_exact() {
        let pose = pose_history_csv(&[StepRow {
            step: 0,
            total: 1.5,
            l_h: 0.5,
            l_c: 0.25,
            l_k: 0.75,
            matched: 2,
        }]);
        assert_eq!(pose, "step,L_total,L_h,L_c,L_k,matched_count\n0,1.5,0.5,0.25,0.75,2\n");

        let lcim = lcim_history_csv(&[HistoryRow {
            epoch: 1,
            total: 0.1,
            l_mse: 0.09,
            l_freq: 0.01,
            lr: 0.0004,
        }]);
        assert_eq!(lcim, "epoch,total,l_mse,l_freq,lr\n1,0.1,0.09,0.01,0.0004\n");

        let eval = eval_csv(&sample_report());
        assert_eq!(eval, "threshold,ap,ar\n0.5,0.75,0.8\n0.75,0.5,0.6\n");

        let mask = mask_trials_csv(&[MaskRow { k: 2, trial: 0, ap_mean: 0.4 }]);
        assert_eq!(mask, "k,trial,ap_mean\n2,0,0.4\n");

        let curves = mask_curves_csv(&[0, 2], &[0.6, 0.5], &[0.55, 0.4]).unwrap();
        assert_eq!(curves, "k,ap_gated,ap_residual\n0,0.6,0.55\n2,0.5,0.4\n");

        let scale = scaling_csv(&[(50, 0.3), (100, 0.42)]);
        assert_eq!(scale, "train_size,ap_mean\n50,0.3\n100,0.42\n");

        let lam = lambda_csv(&[LambdaRow { lambda: 0.0004, psnr: 21.5, ssim: 0.8, ap_mean: 0.5 }]);
        assert_eq!(lam, "lambda,psnr,ssim,ap_mean\n0.0004,21.5,0.8,0.5\n");
    }

    #[test]
    fn floats_round_trip_through_csv_text() {
        let rows = [StepRow {
            step: 7,
            total: 0.1 + 0.2,
            l_h: 1.0 / 3.0,
            l_c: 1e-17,
            l_k: 12345.6789,
            matched: 1,
        }];
        let csv = pose_history_csv(&rows);
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1].parse::<f64>().unwrap(), rows[0].total);
        assert_eq!(fields[2].parse::<f64>().unwrap(), rows[0].l_h);
        assert_eq!(fields[3].parse::<f64>().unwrap(), rows[0].l_c);
        assert_eq!(fields[4].parse::<f64>().unwrap(), rows[0].l_k);
    }

    #[test]
    fn summary_json_holds_headline_numbers() {
        let text = eval_summary_json(&sample_report());
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["ap_mean"].as_f64().unwrap(), 0.5);
        assert_eq!(v["ar_50"].as_f64().unwrap(), 0.8);
        assert_eq!(v["num_preds"].as_u64().unwrap(), 6);
    }

    #[test]
    fn mask_curve_lengths_must_agree() {
        assert!(mask_curves_csv(&[0, 2], &[0.5], &[0.4, 0.3]).is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series_and_labels() {
        let svg = line_plot_svg(
            "demo <plot>",
            "x axis",
            "y axis",
            &[
                Series::new("a", vec![(0.0, 1.0), (1.0, 2.0)]),
                Series::new("b", vec![(0.0, 2.0), (1.0, 0.5)]),
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("demo &lt;plot&gt;"));
        assert!(svg.contains("x axis") && svg.contains("y axis"));
        assert!(svg.starts_with("<svg ") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn svg_is_deterministic_and_finite_for_flat_series() {
        let s = [Series::new("flat", vec![(0.0, 3.0), (1.0, 3.0), (2.0, 3.0)])];
        let a = line_plot_svg("t", "x", "y", &s);
        let b = line_plot_svg("t", "x", "y", &s);
        assert_eq!(a, b);
        assert!(!a.contains("NaN") && !a.contains("inf"));
    }

    #[test]
    fn empty_series_still_render_frame() {
        let svg = line_plot_svg("empty", "x", "y", &[]);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(svg.contains("empty"));
    }

    #[test]
    fn history_plots_cover_all_components() {
        let svg = pose_history_svg(&[
            StepRow { step: 0, total: 2.0, l_h: 1.0, l_c: 0.5, l_k: 0.5, matched: 1 },
            StepRow { step: 1, total: 1.0, l_h: 0.5, l_c: 0.25, l_k: 0.25, matched: 1 },
        ]);
        for name in ["total", "box", "class", "keypoint"] {
            assert!(svg.contains(name), "{name} missing");
        }
        let svg = lcim_history_svg(&[HistoryRow {
            epoch: 0,
            total: 1.0,
            l_mse: 0.9,
            l_freq: 0.1,
            lr: 4e-4,
        }]);
        for name in ["total", "mse", "spectral"] {
            assert!(svg.contains(name), "{name} missing");
        }
    }

    #[test]
    fn threshold_grid_check_matches_constant() {
        let mut report = sample_report();
        assert!(!has_standard_thresholds(&report));
        report.per_threshold = OKS_THRESHOLDS.iter().map(|&t| (t, 0.0, 0.0)).collect();
        assert!(has_standard_thresholds(&report));
    }
}
