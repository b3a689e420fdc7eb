//! Metrics, the constant-velocity baseline, observation-length sweeps,
//! ablations and the latency harness.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{Sample, CURRENT_T, OBS_STEPS, PRED_STEPS};
use crate::dataset::{build_instances, Instance};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Point, Selection};
use crate::model::{init_model, Hyperparams, Model};
use crate::scalar::Scalar;
use crate::training::{Stage, TrainConfig, Trainer};

/// Shortest observation length in a sweep.
pub const MIN_OBSERVED: usize = 2;
const EVAL_BATCH: usize = 64;

fn check_pairs(op: &'static str, pred: &[Vec<Point>], gt: &[Vec<Point>]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::validation(format!("{op} needs at least one agent")));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(op, &[pred.len()], &[gt.len()]));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::shape(op, &[p.len(), 2], &[g.len(), 2]));
        }
    }
    Ok(())
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean error over all agents and timesteps.
pub fn ade(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> Result<f64> {
    check_pairs("ade", pred, gt)?;
    let steps = pred[0].len();
    if pred.iter().any(|p| p.len() != steps) {
        return Err(Error::validation(
            "ade needs equal horizons for every agent",
        ));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.iter().zip(g).map(|(&a, &b)| dist(a, b)).sum::<f64>())
        .sum();
    Ok(total / (pred.len() * steps) as f64)
}

/// Mean Euclidean error at the final timestep.
pub fn fde(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> Result<f64> {
    check_pairs("fde", pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| dist(*p.last().expect("non-empty"), *g.last().expect("non-empty")))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Extrapolates the latest one-step displacement of `history` (timestep,
/// position pairs, oldest first) for `horizon` steps after t = 9.
pub fn cvm_predict(history: &[(i64, Point)], horizon: usize) -> Result<Vec<Point>> {
    let &(t_last, last) = history
        .last()
        .ok_or_else(|| Error::validation("constant-velocity model needs an observation"))?;
    let step = match history.len() {
        1 => [0.0, 0.0],
        n => {
            let (t_prev, prev) = history[n - 2];
            let gap = (t_last - t_prev) as f64;
            [(last[0] - prev[0]) / gap, (last[1] - prev[1]) / gap]
        }
    };
    Ok((1..=horizon as i64)
        .map(|k| {
            let n = (CURRENT_T + k - t_last) as f64;
            [last[0] + step[0] * n, last[1] + step[1] * n]
        })
        .collect())
}

/// Anything that maps instances to 60-step focal-frame trajectories.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, batch: &[&Instance]) -> Result<Vec<Vec<Point>>>;
}

/// Constant-velocity baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn name(&self) -> String {
        "cvm".into()
    }

    fn predict(&self, batch: &[&Instance]) -> Result<Vec<Vec<Point>>> {
        batch
            .iter()
            .map(|i| cvm_predict(&i.history, PRED_STEPS))
            .collect()
    }
}

impl<T: Scalar> Predictor for Model<T> {
    fn name(&self) -> String {
        "snapshot".into()
    }

    fn predict(&self, batch: &[&Instance]) -> Result<Vec<Vec<Point>>> {
        let inputs: Vec<_> = batch.iter().map(|i| (&i.social, &i.map)).collect();
        Ok(self
            .predict_batch(&inputs)?
            .into_iter()
            .map(|p| p.full)
            .collect())
    }
}

/// Predictions for every instance, in order. Batches run on the current
/// rayon pool.
pub fn predict_all(predictor: &dyn Predictor, instances: &[Instance]) -> Result<Vec<Vec<Point>>> {
    let refs: Vec<&Instance> = instances.iter().collect();
    let chunks: Vec<Vec<Vec<Point>>> = refs
        .par_chunks(EVAL_BATCH)
        .map(|c| predictor.predict(c))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observed {
    Steps(usize),
    /// Ten steps, plus the sweep over 2..=10.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub observed_steps: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub predictor: String,
    pub observed_steps: usize,
    pub ade: f64,
    pub fde: f64,
    pub n_agents: usize,
    /// Empty unless the evaluation ran with [`Observed::Full`].
    pub sweep: Vec<SweepEntry>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `observed_steps,ade,fde` rows of the sweep.
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("observed_steps,ade,fde\n");
        for e in &self.sweep {
            let _ = writeln!(out, "{},{},{}", e.observed_steps, e.ade, e.fde);
        }
        out
    }
}

fn score(predictor: &dyn Predictor, instances: &[Instance], steps: usize) -> Result<SweepEntry> {
    let truncated: Vec<Instance> = instances
        .iter()
        .map(|i| i.truncated(steps))
        .collect::<Result<_>>()?;
    let pred = predict_all(predictor, &truncated)?;
    let gt: Vec<Vec<Point>> = instances.iter().map(|i| i.target.clone()).collect();
    Ok(SweepEntry {
        observed_steps: steps,
        ade: ade(&pred, &gt)?,
        fde: fde(&pred, &gt)?,
    })
}

pub fn evaluate(
    predictor: &dyn Predictor,
    instances: &[Instance],
    observed: Observed,
) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(Error::validation("evaluation needs at least one instance"));
    }
    let (main, sweep) = match observed {
        Observed::Steps(k) => {
            if !(MIN_OBSERVED..=OBS_STEPS).contains(&k) {
                return Err(Error::validation(format!(
                    "observed steps {k} outside {MIN_OBSERVED}..={OBS_STEPS}"
                )));
            }
            (score(predictor, instances, k)?, Vec::new())
        }
        Observed::Full => {
            let sweep = (MIN_OBSERVED..=OBS_STEPS)
                .map(|k| score(predictor, instances, k))
                .collect::<Result<Vec<_>>>()?;
            (*sweep.last().expect("non-empty sweep"), sweep)
        }
    };
    Ok(MetricReport {
        predictor: predictor.name(),
        observed_steps: main.observed_steps,
        ade: main.ade,
        fde: main.fde,
        n_agents: instances.len(),
        sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub map_rows: usize,
    pub selection: Selection,
}

/// Parses `maps=0,50,100,200;selection=l2,risk,none` into the cross product.
/// Either key may be omitted, defaulting to 100 map rows or L2.
pub fn parse_grid(spec: &str) -> Result<Vec<AblationCell>> {
    let mut maps = vec![crate::features::MAP_ROWS];
    let mut selections = vec![Selection::L2];
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("grid entry `{part}` is not key=values")))?;
        let values = values.split(',').map(str::trim);
        match key.trim() {
            "maps" | "map_rows" => {
                maps = values
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::validation(format!("bad map row count `{v}`")))
                    })
                    .collect::<Result<_>>()?
            }
            "selection" | "agents" => selections = values.map(str::parse).collect::<Result<_>>()?,
            other => return Err(Error::validation(format!("unknown grid key `{other}`"))),
        }
    }
    if maps.is_empty() || selections.is_empty() {
        return Err(Error::validation("ablation grid is empty"));
    }
    Ok(maps
        .iter()
        .flat_map(|&m| {
            selections.iter().map(move |&s| AblationCell {
                map_rows: m,
                selection: s,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: MetricReport,
}

/// Trains one stage-1 model per cell and evaluates it on `eval` with full
/// histories.
pub fn run_ablation(
    grid: &[AblationCell],
    train: &[Sample],
    val: &[Sample],
    eval: &[Sample],
    hyper: &Hyperparams,
    features: &FeatureConfig,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&cell| {
            let fc = FeatureConfig {
                map_rows: cell.map_rows,
                selection: cell.selection,
                ..*features
            };
            let h = Hyperparams {
                map_rows: cell.map_rows,
                ..hyper.clone()
            };
            let train_i = build_instances(train, &fc)?;
            let val_i = build_instances(val, &fc)?;
            let eval_i = build_instances(eval, &fc)?;
            let model = init_model::<f32>(&h, config.seed)?;
            let mut trainer = Trainer::new(model, &train_i, &val_i, config.clone(), Stage::One)?;
            trainer.run()?;
            let report = evaluate(trainer.best_model(), &eval_i, Observed::Steps(OBS_STEPS))?;
            Ok(AblationRow { cell, report })
        })
        .collect()
}

/// `map_vectors,agent_selection,ade,fde,n_agents` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("map_vectors,agent_selection,ade,fde,n_agents\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.cell.map_rows,
            r.cell.selection.name(),
            r.report.ade,
            r.report.fde,
            r.report.n_agents
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub batch_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub per_agent_ms: f64,
    pub per_agent_std_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub threads: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub entries: Vec<LatencyEntry>,
    /// Peak resident set size in KiB, where the platform reports it.
    pub peak_rss_kib: Option<u64>,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_size,mean_ms,std_ms,per_agent_ms,per_agent_std_ms\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.batch_size, e.mean_ms, e.std_ms, e.per_agent_ms, e.per_agent_std_ms
            );
        }
        out
    }
}

fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock time of batched prediction on precomputed features. Batches are
/// filled by cycling through `pool`.
pub fn latency_bench<T: Scalar>(
    model: &Model<T>,
    pool: &[Instance],
    batch_sizes: &[usize],
    warmup: usize,
    repetitions: usize,
) -> Result<LatencyReport> {
    if pool.is_empty() {
        return Err(Error::validation(
            "latency benchmark needs at least one instance",
        ));
    }
    if repetitions == 0 {
        return Err(Error::validation("repetitions must be at least 1"));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::validation("batch sizes must be at least 1"));
    }
    if batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("batch sizes must be strictly increasing"));
    }
    let inputs: Vec<Vec<_>> = batch_sizes
        .iter()
        .map(|&b| {
            pool.iter()
                .cycle()
                .take(b)
                .map(|i| (&i.social, &i.map))
                .collect()
        })
        .collect();
    for input in &inputs {
        for _ in 0..warmup {
            model.predict_batch(input)?;
        }
    }
    // Repetitions are interleaved across batch sizes so drift hits all alike.
    let mut times = vec![Vec::with_capacity(repetitions); batch_sizes.len()];
    for _ in 0..repetitions {
        for (input, t) in inputs.iter().zip(&mut times) {
            let start = Instant::now();
            let out = model.predict_batch(input)?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    let entries = batch_sizes
        .iter()
        .zip(&times)
        .map(|(&b, t)| {
            let (mean, std) = mean_std(t);
            LatencyEntry {
                batch_size: b,
                mean_ms: mean,
                std_ms: std,
                per_agent_ms: mean / b as f64,
                per_agent_std_ms: std / b as f64,
            }
        })
        .collect();
    Ok(LatencyReport {
        threads: rayon::current_num_threads(),
        warmup,
        repetitions,
        entries,
        peak_rss_kib: peak_rss_kib(),
    })
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Line chart of ADE against observed timesteps, one line per series.
pub fn sweep_svg(series: &[(String, Vec<SweepEntry>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let y_max = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|e| e.ade))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.1;
    let x_of = |k: usize| left + pw * (k - MIN_OBSERVED) as f64 / (OBS_STEPS - MIN_OBSERVED) as f64;
    let y_of = |v: f64| top + ph * (1.0 - v / y_max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#,
        b = top + ph,
        r = left + pw
    );
    for k in MIN_OBSERVED..=OBS_STEPS {
        let x = x_of(k);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{y1:.1}" stroke="black"/><text x="{x:.1}" y="{ty:.1}" text-anchor="middle">{k}</text>"#,
            y0 = top + ph,
            y1 = top + ph + 5.0,
            ty = top + ph + 20.0
        );
    }
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{v:.2}</text>"##,
            x0 = left,
            x1 = left + pw,
            tx = left - 8.0,
            ty = y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle">observed timesteps</text>"#,
        x = left + pw / 2.0,
        y = h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y:.1}" text-anchor="middle" transform="rotate(-90 16 {y:.1})">ADE [m]</text>"#,
        y = top + ph / 2.0
    );
    for (i, (name, entries)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = entries
            .iter()
            .filter(|e| e.ade.is_finite())
            .map(|e| format!("{:.1},{:.1}", x_of(e.observed_steps), y_of(e.ade)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{x2:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{tx:.1}" y="{ty:.1}">{}</text>"#,
            escape(name),
            x2 = lx + 20.0,
            tx = lx + 26.0,
            ty = ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests;
