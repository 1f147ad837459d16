//! Static SVG line plots built only from CSV records.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use issc_core::datamodel::ExperimentRecord;

use crate::config::Axis;
use crate::sweep::{axis_value, Entry};

/// `(x, mean mIoU over repeats)` per entry label, sorted by x.
pub type Series = BTreeMap<String, Vec<(f64, f64)>>;

pub fn series(records: &[ExperimentRecord], axis: Axis) -> Series {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in records {
        let x = axis_value(axis, r);
        let slot = acc.entry(Entry::of(r).label()).or_default().entry(ordered_bits(x)).or_insert((x, 0.0, 0));
        slot.1 += r.miou;
        slot.2 += 1;
    }
    acc.into_iter()
        .map(|(k, pts)| (k, pts.into_values().map(|(x, s, n)| (x, s / n as f64)).collect()))
        .collect()
}

/// Bit pattern whose unsigned order matches the float order.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

pub fn plot_sweep(records: &[ExperimentRecord], axis: Axis, path: &Path) -> anyhow::Result<Series> {
    let s = series(records, axis);
    draw(&s, axis.label(), path)?;
    Ok(s)
}

fn draw(s: &Series, x_label: &str, path: &Path) -> anyhow::Result<()> {
    let xs = s.values().flatten().map(|p| p.0);
    let (mut lo, mut hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 1.0, hi + 1.0);
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc("mIoU").draw().map_err(plot_err)?;
    for (i, (name, pts)) in s.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e}")
}

/// Largest `|y[i] - y[i-1]|` between adjacent points, with its index `i`.
pub fn largest_adjacent_change(points: &[(f64, f64)]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for i in 1..points.len() {
        let d = (points[i].1 - points[i - 1].1).abs();
        if d > best.0 {
            best = (d, i);
        }
    }
    best
}
