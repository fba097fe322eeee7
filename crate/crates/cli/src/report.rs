//! Static report artifacts: SVG charts plus `summary.txt`.

use std::fmt::Write as _;
use std::path::Path;

use framesel::eval::{EvalReport, SweepReport};
use framesel::selection::SelectionReport;
use framesel::store::read_records;
use framesel::training::LossReport;
use framesel::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const MAX_STRIPS: usize = 40;

pub fn write_report(
    evals: &[std::path::PathBuf],
    sweep: Option<&Path>,
    selections: Option<&Path>,
    train_log: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    if evals.is_empty() && sweep.is_none() && selections.is_none() && train_log.is_none() {
        return Err(Error::config("report needs at least one of --eval, --sweep, --selections, --train-log"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = String::new();
    let put = |name: &str, svg: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))
    };

    if !evals.is_empty() {
        let mut reports: Vec<EvalReport> = Vec::new();
        for p in evals {
            reports.extend(read_records::<EvalReport>(p)?.1);
        }
        writeln!(summary, "evaluation").unwrap();
        for r in &reports {
            write!(
                summary,
                "  {:<10} {:<10} k={:<3} n={:<4} tasks={:<5} hit={:.4} recall={:.4}",
                r.scorer,
                format!("{:?}", r.policy),
                r.k,
                r.n,
                r.tasks,
                r.hit_rate,
                r.recall
            )
            .unwrap();
            if let Some(a) = r.modeled_accuracy {
                write!(summary, " accuracy={a:.4}").unwrap();
            }
            summary.push('\n');
        }
        let bars: Vec<(String, f64)> = reports
            .iter()
            .map(|r| (format!("{} {:?} k={}", r.scorer, r.policy, r.k), r.hit_rate))
            .collect();
        put("eval.svg", bar_chart("Hit rate", &bars))?;
    }

    if let Some(p) = sweep {
        let (_, sweeps) = read_records::<SweepReport>(p)?;
        writeln!(summary, "pool-size sweep").unwrap();
        let mut series = Vec::new();
        for s in &sweeps {
            for r in &s.reports {
                writeln!(summary, "  {:<10} n={:<4} k={} hit={:.4}", r.scorer, r.n, r.k, r.hit_rate).unwrap();
            }
            writeln!(summary, "  violations={:.4} skipped={:?}", s.violation_fraction, s.skipped).unwrap();
            series.push(s.reports.iter().map(|r| (r.n as f64, r.hit_rate)).collect::<Vec<_>>());
        }
        put("sweep.svg", line_chart("Hit rate vs candidate pool", "n", &series, Some((0.0, 1.0))))?;
    }

    if let Some(p) = train_log {
        let (_, losses) = read_records::<LossReport>(p)?;
        let pts: Vec<(f64, f64)> = losses.iter().enumerate().map(|(i, l)| (i as f64, l.loss)).collect();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            writeln!(
                summary,
                "training\n  steps={} first_loss={:.4} last_loss={:.4}",
                losses.len(),
                first.loss,
                last.loss
            )
            .unwrap();
        }
        put("loss.svg", line_chart("Training loss", "step", &[pts], None))?;
    }

    if let Some(p) = selections {
        let (_, sels) = read_records::<SelectionReport>(p)?;
        writeln!(summary, "selections\n  count={}", sels.len()).unwrap();
        put("selections.svg", selection_strips(&sels))?;
    }

    let p = out_dir.join("summary.txt");
    std::fs::write(&p, summary).map_err(|e| Error::io(&p, e))
}

fn svg_open(title: &str, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = svg_open(title, H);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let plot_h = H - 2.0 * PAD - 40.0;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * plot_h;
        let x = PAD + i as f64 * slot + slot * 0.15;
        let y = PAD + plot_h - h;
        writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>",
            slot * 0.7
        )
        .unwrap();
        writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>", x + slot * 0.35, y - 4.0).unwrap();
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-30 {0:.1} {1:.1})\">{}</text>",
            x + slot * 0.35,
            PAD + plot_h + 14.0,
            escape(label)
        )
        .unwrap();
    }
    axes(&mut s, PAD + plot_h);
    s.push_str("</svg>\n");
    s
}

fn axes(s: &mut String, bottom: f64) {
    writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{bottom}\" stroke=\"black\"/>").unwrap();
    writeln!(s, "<line x1=\"{PAD}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>", W - PAD).unwrap();
}

fn line_chart(title: &str, xlabel: &str, series: &[Vec<(f64, f64)>], yrange: Option<(f64, f64)>) -> String {
    let mut s = svg_open(title, H);
    let all: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| all.iter().map(pick).fold(init, f);
    let (x0, x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (y0, y1) = yrange.unwrap_or((fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let bottom = H - PAD;
    let px = |x: f64| PAD + (x - x0) / span(x0, x1) * (W - 2.0 * PAD);
    let py = |y: f64| bottom - (y - y0) / span(y0, y1) * (H - 2.0 * PAD);
    for pts in series {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"#c04e3a\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" ")).unwrap();
        if pts.len() <= 32 {
            for &(x, y) in pts {
                writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#c04e3a\"/>", px(x), py(y)).unwrap();
                writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x}</text>", px(x), bottom + 14.0).unwrap();
            }
        }
    }
    if all.is_empty() {
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", W / 2.0, H / 2.0).unwrap();
    } else {
        writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y1:.3}</text>", PAD - 4.0, PAD + 4.0).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{bottom:.1}\" text-anchor=\"end\">{y0:.3}</text>", PAD - 4.0).unwrap();
    }
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 8.0, escape(xlabel)).unwrap();
    axes(&mut s, bottom);
    s.push_str("</svg>\n");
    s
}

/// One row per question; selected candidates are filled.
fn selection_strips(sels: &[SelectionReport]) -> String {
    let rows = &sels[..sels.len().min(MAX_STRIPS)];
    let n = rows.iter().flat_map(|r| r.selected.iter()).max().map_or(1, |m| m + 1);
    let row_h = 12.0;
    let height = PAD + rows.len() as f64 * row_h + 24.0;
    let mut s = svg_open("Selected candidate frames", height);
    let cell = (W - PAD - 160.0) / n as f64;
    for (i, r) in rows.iter().enumerate() {
        let y = PAD + i as f64 * row_h;
        writeln!(s, "<text x=\"150\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", y + 9.0, escape(&r.question_id)).unwrap();
        writeln!(
            s,
            "<rect x=\"160\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#eeeeee\"/>",
            cell * n as f64,
            row_h - 2.0
        )
        .unwrap();
        for &j in &r.selected {
            writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#2f7d4f\"/>",
                160.0 + j as f64 * cell,
                cell.max(1.0),
                row_h - 2.0
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
