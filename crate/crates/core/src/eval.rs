//! Checkpoint evaluation, single-image inference and report plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::resize;
use crate::data::{write_depth, write_mask, write_soft, SceneSample};
use crate::error::{PopError, Result};
use crate::grid::{BinaryMask, DepthMap, RgbImage, SoftMask};
use crate::metrics::{evaluate_pairs, MetricOptions, MetricsReport};
use crate::networks::SIZE_MULTIPLE;
use crate::separation::hard_separation;
use crate::train::{predict, Prediction, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Score the ground-truth masks against themselves instead of running the model.
    pub identity: bool,
    /// Also score the hard pseudo-semantics `S_s > 0.5`.
    pub with_separation: bool,
    pub metrics: MetricOptions,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            identity: false,
            with_separation: false,
            metrics: MetricOptions::default(),
            batch_size: 8,
        }
    }
}

fn model_input(sample: &SceneSample, resolution: usize) -> SceneSample {
    let (h, w) = sample.shape();
    if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 {
        sample.clone()
    } else {
        resize(sample, resolution, resolution)
    }
}

/// Metrics of the semantic prediction over `samples`.
pub fn evaluate(
    cfg: &TrainConfig,
    state: &mut TrainState,
    samples: &[SceneSample],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if opts.identity {
        let items = samples.iter().map(|s| {
            let p = SoftMask::new(s.mask.to_real()).expect("binary mask is a soft mask");
            (s.stem.clone(), p, s.mask.clone())
        });
        return Ok(evaluate_pairs(items, &opts.metrics));
    }
    let inputs: Vec<SceneSample> = samples.iter().map(|s| model_input(s, cfg.resolution)).collect();
    let preds = predict(&mut state.net, &inputs, cfg.hyper.sigma, opts.batch_size)?;
    let semantic = preds
        .iter()
        .zip(&inputs)
        .map(|(p, s)| Ok((s.stem.clone(), SoftMask::new(p.s_tilde.clone())?, s.mask.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_pairs(semantic, &opts.metrics);
    if opts.with_separation {
        let hard = preds
            .iter()
            .zip(&inputs)
            .map(|(p, s)| {
                let m = hard_separation(&SoftMask::new(p.s_s.clone())?, 0.5)?;
                Ok((s.stem.clone(), SoftMask::new(m.to_real())?, s.mask.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        report.separation = Some(Box::new(evaluate_pairs(hard, &opts.metrics)));
    }
    Ok(report)
}

pub const INFER_OUTPUTS: [&str; 5] = ["d_po.png", "d_c.png", "s_tilde.png", "s_s.png", "mask.png"];

/// Run both networks on one image and write the five output maps.
pub fn infer(
    cfg: &TrainConfig,
    state: &mut TrainState,
    rgb: &RgbImage,
    depth: &DepthMap,
    out_dir: &Path,
) -> Result<(Prediction, Vec<PathBuf>)> {
    let (h, w) = rgb.shape();
    let sample = SceneSample {
        stem: "input".into(),
        rgb: rgb.clone(),
        depth: depth.clone(),
        mask: BinaryMask::from_fn(h, w, |_, _| false),
        surface: None,
    };
    sample.validate().map_err(|e| PopError::Data(e.to_string()))?;
    let input = model_input(&sample, cfg.resolution);
    let pred = predict(&mut state.net, std::slice::from_ref(&input), cfg.hyper.sigma, 1)?
        .pop()
        .expect("one prediction");
    fs::create_dir_all(out_dir).map_err(|e| PopError::io(out_dir, e))?;
    let paths: Vec<PathBuf> = INFER_OUTPUTS.iter().map(|n| out_dir.join(n)).collect();
    write_depth(&paths[0], &pred.d_po)?;
    write_depth(&paths[1], &pred.d_c)?;
    write_soft(&paths[2], &pred.s_tilde)?;
    write_soft(&paths[3], &pred.s_s)?;
    write_mask(&paths[4], &hard_separation(&SoftMask::new(pred.s_s.clone())?, 0.5)?)?;
    Ok((pred, paths))
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// SVG with one polyline per report across the four mean metrics. Deterministic bytes.
pub fn plot_reports(reports: &[(String, MetricsReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(PopError::Config("plot needs at least one report".into()));
    }
    let labels = ["M", "Fm", "Sm", "Em"];
    let x_at = |i: usize| MARGIN + i as f64 * (PLOT_W - 2.0 * MARGIN) / (labels.len() - 1) as f64;
    let y_at = |v: f64| PLOT_H - MARGIN - v * (PLOT_H - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, PLOT_W - MARGIN, y_at(0.0), y_at(1.0));
    let _ = writeln!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"##,
            x0 - 6.0,
            y + 4.0
        );
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{l}</text>"#,
            x_at(i),
            y0 + 20.0
        );
    }
    for (k, (name, report)) in reports.iter().enumerate() {
        let mean = report
            .mean
            .ok_or_else(|| PopError::Data(format!("report {name} has no scored images")))?;
        let values = [mean.mae, mean.max_f, mean.s_measure, mean.max_e];
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x_at(i), y_at(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{}</text>"#,
            x1 - 120.0,
            MARGIN + 16.0 * k as f64,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ImageMetrics, MetricValues};

    fn report(v: f64) -> MetricsReport {
        let values = MetricValues {
            mae: 1.0 - v,
            max_f: v,
            s_measure: v,
            max_e: v,
        };
        MetricsReport::from_parts(vec![ImageMetrics { stem: "a".into(), values }], vec![])
    }

    #[test]
    fn plot_is_deterministic_with_one_series_per_report() {
        let one = plot_reports(&[("run".into(), report(0.8))]).unwrap();
        assert_eq!(one.matches("<polyline").count(), 1);
        assert_eq!(one, plot_reports(&[("run".into(), report(0.8))]).unwrap());
        let two = plot_reports(&[("a".into(), report(0.8)), ("b<".into(), report(0.6))]).unwrap();
        assert_eq!(two.matches("<polyline").count(), 2);
        assert!(two.contains("b&lt;"));
        assert!(plot_reports(&[]).is_err());
    }
}
