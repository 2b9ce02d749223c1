//! Summary tables and a static bar chart from one or more evaluation reports.

use std::fmt::Write as _;

use crate::metrics::{Agreement, EvalReport};

/// One labelled evaluation to summarise.
pub struct Run<'a> {
    pub label: String,
    pub report: &'a EvalReport,
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Dice grid: one row per run.
pub fn dice_csv(runs: &[Run]) -> String {
    let mut out = String::from("run,samples,dice_region,dice_vessel,dice_fovea,fovea_mae_x_px,fovea_mae_y_px\n");
    for r in runs {
        let a = &r.report.aggregate;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            r.label, a.samples, a.dice_region, a.dice_vessel, a.dice_fovea, fmt(a.fovea_mae_x_px), fmt(a.fovea_mae_y_px)
        );
    }
    out
}

/// Pearson and MAE grid: one row per run and measurement.
pub fn agreement_csv(runs: &[Run]) -> String {
    let mut out = String::from("run,measurement,n,pearson,mae\n");
    for r in runs {
        let a = &r.report.aggregate;
        let rows: [(&str, &Agreement); 3] = [("area_mm2", &a.area), ("thickness_um", &a.thickness), ("cvi", &a.cvi)];
        for (name, g) in rows {
            let _ = writeln!(out, "{},{name},{},{},{}", r.label, g.n, fmt(g.pearson), fmt(g.mae));
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const COLORS: [&str; 6] = ["#4878a8", "#e08a3c", "#5aa469", "#c44e52", "#8172b2", "#937860"];

/// Grouped bars of the three Dice scores and three Pearson correlations.
pub fn bar_chart_svg(runs: &[Run]) -> String {
    let metrics: [(&str, fn(&EvalReport) -> Option<f64>); 6] = [
        ("Dice region", |r| Some(r.aggregate.dice_region)),
        ("Dice vessel", |r| Some(r.aggregate.dice_vessel)),
        ("Dice fovea", |r| Some(r.aggregate.dice_fovea)),
        ("r area", |r| r.aggregate.area.pearson),
        ("r thickness", |r| r.aggregate.thickness.pearson),
        ("r CVI", |r| r.aggregate.cvi.pearson),
    ];
    let (left, top, plot_h, group_w, bar_w) = (50.0, 20.0, 240.0, 110.0, 80.0 / runs.len().max(1) as f64);
    let width = left + group_w * metrics.len() as f64 + 20.0;
    let height = top + plot_h + 50.0 + 18.0 * runs.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, width - 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for (m, (name, get)) in metrics.iter().enumerate() {
        let x0 = left + group_w * m as f64 + 15.0;
        for (k, run) in runs.iter().enumerate() {
            let Some(v) = get(run.report) else { continue };
            let v = v.clamp(0.0, 1.0);
            let h = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                x0 + bar_w * k as f64,
                top + plot_h - h,
                bar_w - 2.0,
                COLORS[k % COLORS.len()],
                escape(&run.label)
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{name}</text>"#, x0 + 40.0, top + plot_h + 16.0);
    }
    for (k, run) in runs.iter().enumerate() {
        let y = top + plot_h + 40.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{left}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, COLORS[k % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, left + 18.0, escape(&run.label));
    }
    s.push_str("</svg>\n");
    s
}
