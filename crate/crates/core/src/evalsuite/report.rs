use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{RotationReport, TokenEquivReport};
use crate::error::{Error, Result};
use crate::format::sig9;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Write `rotation.csv`, `summary.json` and `radar.svg` into `out_dir`.
pub fn emit_reports(report: &RotationReport, out_dir: &Path, model_id: &str, seed: u64) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("angle_deg,accuracy,n_correct,n_total\n");
    for ((a, acc), c) in report.angles.iter().zip(&report.per_angle_acc).zip(&report.n_correct) {
        writeln!(csv, "{a},{},{c},{}", sig9(*acc), report.n_total).expect("string write");
    }
    write(&out_dir.join("rotation.csv"), &csv)?;

    let angles: Vec<String> = report.angles.iter().map(|a| a.to_string()).collect();
    let summary = format!(
        "{{\n  \"model_id\": {},\n  \"seed\": {seed},\n  \"orig_acc\": {},\n  \"rot_mean\": {},\n  \"rot_std\": {},\n  \"n_total\": {},\n  \"angles\": [{}]\n}}\n",
        json_str(model_id),
        sig9(report.orig_acc),
        sig9(report.mean),
        sig9(report.std),
        report.n_total,
        angles.join(", ")
    );
    write(&out_dir.join("summary.json"), &summary)?;
    write_radar_svg(&[(model_id, report)], &out_dir.join("radar.svg"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Radar chart of accuracy (percent) per angle, one closed polygon per series.
/// The radial axis runs from five points under the lowest accuracy to 100.
pub fn write_radar_svg(series: &[(&str, &RotationReport)], path: &Path) -> Result<()> {
    let Some((_, first)) = series.first() else {
        return Err(Error::Argument("radar chart needs at least one series".into()));
    };
    let lowest = series
        .iter()
        .flat_map(|(_, r)| r.per_angle_acc.iter())
        .fold(f64::INFINITY, |m, &a| m.min(a * 100.0));
    let lo = (lowest - 5.0).floor().max(0.0);
    let hi = 100.0;
    let (cx, cy, radius) = (260.0, 250.0, 180.0);
    let polar = |deg: f64, pct: f64| {
        let r = radius * ((pct - lo) / (hi - lo)).clamp(0.0, 1.0);
        let th = deg.to_radians();
        (cx + r * th.sin(), cy - r * th.cos())
    };

    let mut s = String::new();
    s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"540\" viewBox=\"0 0 520 540\" font-family=\"sans-serif\" font-size=\"11\">\n");
    s.push_str("<rect width=\"520\" height=\"540\" fill=\"white\"/>\n");
    for i in 1..=4 {
        let pct = lo + (hi - lo) * i as f64 / 4.0;
        let r = radius * i as f64 / 4.0;
        writeln!(
            s,
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{r:.2}\" fill=\"none\" stroke=\"#cccccc\"/>"
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#666666\">{pct:.1}</text>",
            cx + 3.0,
            cy - r - 2.0
        )
        .unwrap();
    }
    for &a in &first.angles {
        let (x, y) = polar(a as f64, hi);
        writeln!(
            s,
            "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{x:.2}\" y2=\"{y:.2}\" stroke=\"#e0e0e0\"/>"
        )
        .unwrap();
        let (lx, ly) = polar(a as f64, hi + (hi - lo) * 0.08);
        writeln!(
            s,
            "<text x=\"{lx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{a}</text>",
            ly + 4.0
        )
        .unwrap();
    }
    for (i, (name, r)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = r
            .angles
            .iter()
            .zip(&r.per_angle_acc)
            .map(|(&a, &acc)| {
                let (x, y) = polar(a as f64, acc * 100.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            s,
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.12\" stroke=\"{color}\" stroke-width=\"2\"/>",
            points.join(" ")
        )
        .unwrap();
        let ly = 500.0 + 16.0 * i as f64;
        writeln!(
            s,
            "<rect x=\"20\" y=\"{:.0}\" width=\"12\" height=\"12\" fill=\"{color}\"/>",
            ly - 10.0
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"38\" y=\"{ly:.0}\">{} {:.2} &#177; {:.2}</text>",
            xml_escape(name),
            r.mean * 100.0,
            r.std * 100.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    write(path, &s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// `image_id,rotation,token_index,cosine`, one row per token per rotation.
pub fn write_tokens_csv(report: &TokenEquivReport, path: &Path) -> Result<()> {
    let mut s = String::from("image_id,rotation,token_index,cosine\n");
    for img in 0..report.n_images {
        for (rot, cos) in report.rotations.iter().zip(&report.cosines) {
            for tok in 0..report.n_tokens {
                writeln!(s, "{img},{rot},{tok},{}", sig9(cos[img * report.n_tokens + tok])).unwrap();
            }
        }
    }
    write(path, &s)
}

pub fn write_token_summary_json(report: &TokenEquivReport, model_id: &str, path: &Path) -> Result<()> {
    let rows: Vec<String> = report
        .summaries
        .iter()
        .map(|r| {
            format!(
                "    {{\"rotation\": {}, \"median\": {}, \"mean\": {}, \"min\": {}, \"frac_ge_099\": {}}}",
                r.rotation,
                sig9(r.median),
                sig9(r.mean),
                sig9(r.min),
                sig9(r.frac_ge_099)
            )
        })
        .collect();
    let text = format!(
        "{{\n  \"model_id\": {},\n  \"n_images\": {},\n  \"n_tokens\": {},\n  \"rotations\": [\n{}\n  ]\n}}\n",
        json_str(model_id),
        report.n_images,
        report.n_tokens,
        rows.join(",\n")
    );
    write(path, &text)
}
