use std::path::{Path, PathBuf};

use serde::Deserialize;
use waypoint_core::grid::Environment;
use waypoint_core::scenario::{parse_visits_csv, GoalOutcome, TracePoint};
use waypoint_core::trainer::EpisodeMetrics;

use crate::args::PlotArgs;
use crate::failure::Failure;
use crate::svg::{heat, Svg};

const CELL: f64 = 18.0;
const MARGIN: f64 = 24.0;
const GAP: f64 = 24.0;

pub fn run(a: PlotArgs) -> Result<(), Failure> {
    let env = a.layout.as_deref().map(Environment::resolve).transpose()?;
    if a.input.is_dir() {
        return plot_run_dir(&a.input, a.output.as_deref(), env.as_ref(), a.window);
    }
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", a.input.display())))?;
    let svg = render_file(&a.input, &text, env.as_ref(), a.window)?;
    let out = a.output.unwrap_or_else(|| a.input.with_extension("svg"));
    std::fs::write(&out, svg)?;
    println!("{}", out.display());
    Ok(())
}

/// Dispatches on content: heatmap CSV, shaping CSV, trace JSON or metrics
/// JSON lines.
pub fn render_file(path: &Path, text: &str, env: Option<&Environment>, window: usize) -> Result<String, Failure> {
    let first = text.lines().next().unwrap_or("");
    if first.starts_with("stage,y") {
        let (w, h, grids) = parse_visits_csv(text)?;
        return Ok(heatmap(w, h, &grids, env));
    }
    if first.starts_with("scenario,") {
        return shaping_bars(text);
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        return success_curve(text, window);
    }
    if first.trim_start().starts_with('{') {
        let trace: TraceFile = serde_json::from_str(text)
            .map_err(|e| Failure::usage(format!("{} is not a trace file: {e}", path.display())))?;
        return Ok(trace_plot(&trace, env));
    }
    Err(Failure::usage(format!("{}: unrecognized plot input", path.display())))
}

fn plot_run_dir(dir: &Path, out: Option<&Path>, env: Option<&Environment>, window: usize) -> Result<(), Failure> {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
    std::fs::create_dir_all(&out)?;
    let mut wrote: Vec<PathBuf> = Vec::new();
    for (input, output) in [("visits.csv", "heatmap.svg"), ("metrics.jsonl", "success.svg")] {
        let p = dir.join(input);
        if p.is_file() {
            let text = std::fs::read_to_string(&p)?;
            let svg = render_file(&p, &text, env, window)?;
            let target = out.join(output);
            std::fs::write(&target, svg)?;
            wrote.push(target);
        }
    }
    if wrote.is_empty() {
        return Err(Failure::usage(format!("{} holds no visits.csv or metrics.jsonl", dir.display())));
    }
    for p in wrote {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Deserialize)]
struct TraceFile {
    name: String,
    width: i32,
    height: i32,
    success: bool,
    total_steps: usize,
    trace: Vec<TracePoint>,
    reached: Vec<GoalOutcome>,
}

fn panel_origin(stage: usize, w: i32) -> f64 {
    MARGIN + (stage - 1) as f64 * (w as f64 * CELL + GAP)
}

fn draw_layout(svg: &mut Svg, env: Option<&Environment>, stage: usize, ox: f64, oy: f64) {
    let Some(env) = env else { return };
    if stage > env.stage_count() {
        return;
    }
    let l = env.layout(stage);
    for p in l.walls() {
        svg.rect(ox + p.x as f64 * CELL, oy + p.y as f64 * CELL, CELL, CELL, "#222222", None);
    }
    let mark = |svg: &mut Svg, p: waypoint_core::grid::GridPos, color: &str| {
        svg.rect(ox + p.x as f64 * CELL + 2.0, oy + p.y as f64 * CELL + 2.0, CELL - 4.0, CELL - 4.0, "none", Some(color));
    };
    mark(svg, l.target(), "#2e7d32");
    if let Some(b) = l.bonus() {
        mark(svg, b, "#f9a825");
    }
    if let Some(p) = l.penalty() {
        mark(svg, p, "#6a1b9a");
    }
}

fn heatmap(w: i32, h: i32, grids: &[Vec<f64>], env: Option<&Environment>) -> String {
    let stages = grids.len();
    let width = 2.0 * MARGIN + stages as f64 * w as f64 * CELL + (stages - 1) as f64 * GAP;
    let height = 2.0 * MARGIN + h as f64 * CELL + 16.0;
    let mut svg = Svg::new(width, height);
    for (i, grid) in grids.iter().enumerate() {
        let stage = i + 1;
        let (ox, oy) = (panel_origin(stage, w), MARGIN + 16.0);
        let top = grid.iter().cloned().fold(0.0f64, f64::max);
        for y in 0..h {
            for x in 0..w {
                let v = grid[(y * w + x) as usize];
                let fill = if v <= 0.0 {
                    "#f2f2f2".to_string()
                } else {
                    heat(v.ln_1p() / top.ln_1p())
                };
                svg.rect(ox + x as f64 * CELL, oy + y as f64 * CELL, CELL, CELL, &fill, None);
            }
        }
        draw_layout(&mut svg, env, stage, ox, oy);
        let label = if stages > 1 { format!("stage {stage}, max {top}") } else { format!("max {top}") };
        svg.text(ox, MARGIN + 4.0, 12.0, "start", &label);
    }
    svg.finish()
}

fn trace_plot(t: &TraceFile, env: Option<&Environment>) -> String {
    let stages = t.trace.iter().map(|p| p.stage).max().unwrap_or(1).max(1);
    let (w, h) = (t.width, t.height);
    let width = 2.0 * MARGIN + stages as f64 * w as f64 * CELL + (stages - 1) as f64 * GAP;
    let height = 2.0 * MARGIN + h as f64 * CELL + 16.0;
    let mut svg = Svg::new(width, height);
    let oy = MARGIN + 16.0;
    let centre = |ox: f64, x: i32, y: i32| (ox + (x as f64 + 0.5) * CELL, oy + (y as f64 + 0.5) * CELL);
    for stage in 1..=stages {
        let ox = panel_origin(stage, w);
        for i in 0..=w {
            let x = ox + i as f64 * CELL;
            svg.line(x, oy, x, oy + h as f64 * CELL, "#dddddd", 0.5);
        }
        for j in 0..=h {
            let y = oy + j as f64 * CELL;
            svg.line(ox, y, ox + w as f64 * CELL, y, "#dddddd", 0.5);
        }
        draw_layout(&mut svg, env, stage, ox, oy);
        let pts: Vec<(f64, f64)> = t
            .trace
            .iter()
            .filter(|p| p.stage == stage)
            .map(|p| centre(ox, p.x, p.y))
            .collect();
        svg.polyline(&pts, "#1565c0", 2.0);
        if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
            svg.circle(a.0, a.1, 4.0, "#1565c0", "#ffffff");
            svg.rect(b.0 - 4.0, b.1 - 4.0, 8.0, 8.0, "#0d47a1", None);
        }
        for o in t.reached.iter().filter(|o| o.stage == stage) {
            let (cx, cy) = centre(ox, o.goal.x, o.goal.y);
            let color = if o.reached() { "#2e7d32" } else { "#c62828" };
            svg.circle(cx, cy, 6.0, "none", color);
        }
    }
    let status = if t.success { "success" } else { "failed" };
    svg.text(MARGIN, MARGIN + 4.0, 12.0, "start", &format!("{}: {status}, {} steps", t.name, t.total_steps));
    svg.finish()
}

fn shaping_bars(text: &str) -> Result<String, Failure> {
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64, Failure> {
            cells
                .get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Failure::usage(format!("shaping table row {}: malformed", n + 1)))
        };
        rows.push((cells[0].to_string(), parse(1)?, parse(2)?));
    }
    if rows.is_empty() {
        return Err(Failure::usage("shaping table has no rows"));
    }
    let label_w = 140.0;
    let bar_h = 8.0;
    let row_h = 2.0 * bar_h + 8.0;
    let plot_w = 420.0;
    let top = rows.iter().map(|r| r.1.max(r.2)).fold(1.0f64, f64::max);
    let width = label_w + plot_w + 2.0 * MARGIN + 60.0;
    let height = 2.0 * MARGIN + 24.0 + rows.len() as f64 * row_h;
    let mut svg = Svg::new(width, height);
    svg.text(MARGIN, MARGIN, 12.0, "start", "mean steps per scenario: shaped (blue), unshaped (grey)");
    for (i, (name, shaped, unshaped)) in rows.iter().enumerate() {
        let y = MARGIN + 16.0 + i as f64 * row_h;
        svg.text(MARGIN + label_w - 6.0, y + bar_h + 3.0, 10.0, "end", name);
        let x0 = MARGIN + label_w;
        svg.rect(x0, y, plot_w * shaped / top, bar_h, "#1565c0", None);
        svg.rect(x0, y + bar_h, plot_w * unshaped / top, bar_h, "#9e9e9e", None);
        svg.text(x0 + plot_w * shaped.max(*unshaped) / top + 4.0, y + bar_h + 3.0, 9.0, "start", &format!("{shaped:.0} / {unshaped:.0}"));
    }
    Ok(svg.finish())
}

fn success_curve(text: &str, window: usize) -> Result<String, Failure> {
    if window == 0 {
        return Err(Failure::usage("--window must be positive"));
    }
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: EpisodeMetrics = serde_json::from_str(line)
            .map_err(|e| Failure::usage(format!("metrics line {}: {e}", n + 1)))?;
        flags.push(m.success);
    }
    if flags.is_empty() {
        return Err(Failure::usage("metrics file is empty"));
    }
    let points: Vec<(usize, f64)> = flags
        .chunks(window)
        .enumerate()
        .map(|(i, c)| (i * window + c.len(), c.iter().filter(|s| **s).count() as f64 / c.len() as f64))
        .collect();
    let (pw, ph) = (480.0, 240.0);
    let mut svg = Svg::new(pw + 2.0 * MARGIN + 30.0, ph + 2.0 * MARGIN + 20.0);
    let ox = MARGIN + 30.0;
    let oy = MARGIN;
    svg.line(ox, oy, ox, oy + ph, "#000000", 1.0);
    svg.line(ox, oy + ph, ox + pw, oy + ph, "#000000", 1.0);
    for tick in [0.0, 0.5, 1.0] {
        let y = oy + ph * (1.0 - tick);
        svg.line(ox - 4.0, y, ox, y, "#000000", 1.0);
        svg.text(ox - 6.0, y + 4.0, 10.0, "end", &format!("{tick:.1}"));
    }
    let total = flags.len() as f64;
    let pts: Vec<(f64, f64)> = points
        .iter()
        .map(|(e, r)| (ox + pw * *e as f64 / total, oy + ph * (1.0 - r)))
        .collect();
    svg.polyline(&pts, "#1565c0", 2.0);
    svg.text(ox + pw / 2.0, oy + ph + 28.0, 11.0, "middle", &format!("episodes ({} total), success per {window}", flags.len()));
    Ok(svg.finish())
}
