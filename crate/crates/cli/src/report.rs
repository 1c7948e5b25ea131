//! SVG line charts from the metrics stream.

use std::collections::BTreeMap;

use anyhow::Context;
use plotters::prelude::*;

use crate::store::{MetricLine, RunDir};
use crate::Missing;

type Series = Vec<(f64, f64)>;

fn line_chart(path: &std::path::Path, title: &str, x_label: &str, y_label: &str, series: &BTreeMap<String, Series>) -> anyhow::Result<()> {
    let points = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Mean of each metric over consecutive windows of `width` updates.
fn smoothed(lines: &[&MetricLine], metric: &str, width: usize) -> Series {
    let vals: Vec<(f64, f64)> = lines
        .iter()
        .filter_map(|l| l.metrics.get(metric).map(|v| (l.step as f64, *v)))
        .filter(|(_, v)| v.is_finite())
        .collect();
    vals.chunks(width.max(1))
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

/// Writes `charts/loss-<phase>.svg` for every training phase,
/// `charts/bleu-iteration.svg` and, after an ablation,
/// `charts/bleu-mono-size.svg`. Each chart is registered in the manifest.
pub fn write_charts(dir: &mut RunDir) -> anyhow::Result<()> {
    let lines = dir.read_metrics()?;
    if lines.is_empty() {
        return Err(Missing("metrics.jsonl (run a training command first)".into()).into());
    }
    std::fs::create_dir_all(dir.path("charts"))?;
    let mut written = Vec::new();

    let mut phases: BTreeMap<&str, Vec<&MetricLine>> = BTreeMap::new();
    for l in &lines {
        if l.metrics.contains_key("loss.generator") {
            phases.entry(l.run.as_str()).or_default().push(l);
        }
    }
    for (phase, ls) in &phases {
        let width = (ls.len() / 100).max(1);
        let mut series = BTreeMap::new();
        for m in ["loss.translation", "loss.denoising", "loss.backtranslation", "loss.adv", "loss.critic"] {
            let s = smoothed(ls, m, width);
            if !s.is_empty() {
                series.insert(m.trim_start_matches("loss.").to_string(), s);
            }
        }
        if series.is_empty() {
            continue;
        }
        let rel = format!("charts/loss-{}.svg", phase.replace('/', "-"));
        line_chart(&dir.path(&rel), &format!("losses: {phase}"), "update", "loss", &series)?;
        written.push(rel);
    }

    let mut bleu: BTreeMap<String, Series> = BTreeMap::new();
    for l in &lines {
        if let (Some(b), "en2lrl" | "lrl2en") = (l.metrics.get("bleu.dev"), l.run.as_str()) {
            bleu.entry(l.run.clone()).or_default().push((l.step as f64, *b));
        }
    }
    if !bleu.is_empty() {
        for s in bleu.values_mut() {
            // A re-run may log an iteration twice; keep the latest value.
            let mut last: BTreeMap<i64, f64> = BTreeMap::new();
            for &(k, b) in s.iter() {
                last.insert(k as i64, b);
            }
            *s = last.into_iter().map(|(k, b)| (k as f64, b)).collect();
        }
        let rel = "charts/bleu-iteration.svg".to_string();
        line_chart(&dir.path(&rel), "dev BLEU by iteration", "iteration", "BLEU", &bleu)?;
        written.push(rel);
    }

    let ablation: Series = lines
        .iter()
        .filter(|l| l.run == "ablation")
        .filter_map(|l| Some((l.metrics.get("size")?.log10(), *l.metrics.get("bleu")?)))
        .collect();
    if !ablation.is_empty() {
        let rel = "charts/bleu-mono-size.svg".to_string();
        let series = BTreeMap::from([("en2lrl test".to_string(), ablation)]);
        line_chart(&dir.path(&rel), "BLEU by LRL monolingual size", "log10(sentences)", "BLEU", &series)?;
        written.push(rel);
    }

    for rel in written {
        let bytes = std::fs::read(dir.path(&rel))?;
        let name = rel.trim_end_matches(".svg").to_string();
        dir.put(&name, &rel, &bytes)?;
    }
    Ok(())
}
