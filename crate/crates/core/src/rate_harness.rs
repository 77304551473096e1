//! Empirical rate validation: gradient-norm proxies, log-log slope fits,
//! multi-seed sweeps over schedule grids, and SVG plots of run logs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cost::CostCounter;
use crate::error::{Error, Result};
use crate::hypergradient::{inexact_hypergradient, HypergradConfig};
use crate::optimizers::{run, training_loss, LogRow, RunConfig, RunLog, RunStatus};
use crate::problems::ProblemInstance;
use crate::regularizers::{Regularizer, ThetaParams};
use crate::schedules::Schedule;
use crate::vecops;

pub const SUMMARY_HEADER: &str = "p,q,eps0,alpha0,seed,final_loss,best_psnr,slope,r2,total_cost";

/// Full-batch hypergradient norm and training loss at tight accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyEval {
    pub grad_norm: f64,
    pub loss: f64,
}

pub fn proxy_eval(
    train: &[ProblemInstance],
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    tight_eps: f64,
    cfg: &HypergradConfig,
    cost: &CostCounter,
) -> Result<ProxyEval> {
    let ones = vec![1.0; train.len()];
    let r = inexact_hypergradient(train, &ones, reg, theta, tight_eps, cfg, None, cost)?;
    Ok(ProxyEval { grad_norm: vecops::norm(&r.z), loss: r.batch_loss })
}

/// `||grad f(theta)||` estimated by the full-batch inexact hypergradient.
pub fn gradient_proxy(
    train: &[ProblemInstance],
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    tight_eps: f64,
    cfg: &HypergradConfig,
    cost: &CostCounter,
) -> Result<f64> {
    Ok(proxy_eval(train, reg, theta, tight_eps, cfg, cost)?.grad_norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

/// Running minimum of the values, in order.
pub fn running_min(series: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let mut best = f64::INFINITY;
    series
        .iter()
        .map(|&(k, v)| {
            best = best.min(v);
            (k, best)
        })
        .collect()
}

/// Least-squares line through `(ln k, ln running_min)` for `k` inside the
/// window. Needs at least 5 points spanning 1.5 decades.
pub fn fit_rate(series: &[(u64, f64)], window: Option<(u64, u64)>) -> Result<RateFit> {
    let (lo, hi) = window.unwrap_or((1, u64::MAX));
    let pts: Vec<(f64, f64)> = running_min(series)
        .into_iter()
        .filter(|&(k, v)| k >= lo.max(1) && k <= hi && v > 0.0 && v.is_finite())
        .map(|(k, v)| ((k as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::InvalidArgument(format!("rate fit needs at least 5 points, got {}", pts.len())));
    }
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if xmax - xmin < 1.5 * std::f64::consts::LN_10 {
        return Err(Error::InvalidArgument("rate fit needs k spanning at least 1.5 decades".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    // an exactly flat series fits with slope 0 rather than rounding noise
    let flat = pts.iter().all(|p| p.1 == pts[0].1);
    let slope = if flat { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if !flat && syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let kmin = xmin.exp().round() as u64;
    let kmax = xmax.exp().round() as u64;
    Ok(RateFit { slope, intercept, r_squared, window: (kmin, kmax) })
}

/// Proxy series `(k, grad_proxy)` recorded in a run log.
pub fn proxy_series(rows: &[LogRow]) -> Vec<(u64, f64)> {
    rows.iter().filter_map(|r| r.grad_proxy.map(|g| (r.k, g))).collect()
}

/// One point of a sweep grid: accuracy `eps0 k^-p`, step `alpha0 k^-q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub p: f64,
    pub q: f64,
    pub eps0: f64,
    pub alpha0: f64,
}

impl GridCell {
    pub fn schedules(&self) -> Result<(Schedule, Schedule)> {
        Ok((Schedule::polynomial(self.alpha0, self.q)?, Schedule::polynomial(self.eps0, self.p)?))
    }
}

/// Everything a single sweep run needs.
pub struct Setup {
    pub train: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
    pub reg: Box<dyn Regularizer>,
    pub theta0: ThetaParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: GridCell,
    pub seed: u64,
    pub final_loss: f64,
    pub best_psnr: Option<f64>,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub total_cost: u64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub cell: GridCell,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellAggregate {
    pub cell: GridCell,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub mean_best_psnr: Option<f64>,
    pub std_best_psnr: Option<f64>,
    pub median_slope: Option<f64>,
    pub std_slope: Option<f64>,
    pub mean_r2: Option<f64>,
    pub std_r2: Option<f64>,
    pub mean_total_cost: f64,
    pub std_total_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<CellAggregate>,
    pub failures: Vec<SweepFailure>,
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub base: RunConfig,
    pub fit_window: Option<(u64, u64)>,
}

fn derived_seed(seed: u64, cell: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (cell as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn run_cell(
    cell: &GridCell,
    index: usize,
    seed: u64,
    setup: &(dyn Fn(u64) -> Result<Setup> + Sync),
    opts: &SweepOptions,
) -> Result<SweepRow> {
    let s = setup(seed)?;
    let (step, acc) = cell.schedules()?;
    let cfg = RunConfig { step, acc, seed: derived_seed(seed, index), ..opts.base.clone() };
    let out = run(&s.train, &s.test, s.reg.as_ref(), s.theta0, &cfg)?;
    if let RunStatus::Aborted(why) = &out.log.status {
        return Err(Error::Aborted(why.clone()));
    }
    let fit = fit_rate(&proxy_series(&out.log.rows), opts.fit_window).ok();
    let final_loss = training_loss(&s.train, s.reg.as_ref(), &out.theta, cfg.test_tol)?;
    let best_psnr = out.log.rows.iter().filter_map(|r| r.test_psnr).fold(None, |b: Option<f64>, p| Some(b.map_or(p, |b| b.max(p))));
    Ok(SweepRow {
        cell: *cell,
        seed,
        final_loss,
        best_psnr,
        slope: fit.map(|f| f.slope),
        r2: fit.map(|f| f.r_squared),
        total_cost: out.cum_cost,
        status: out.log.status.to_string(),
    })
}

/// Runs every `(cell, seed)` pair in parallel; output order follows the grid
/// and seed order. Failed runs are collected, not propagated.
pub fn sweep(
    grid: &[GridCell],
    seeds: &[u64],
    setup: &(dyn Fn(u64) -> Result<Setup> + Sync),
    opts: &SweepOptions,
) -> Result<SweepSummary> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs a nonempty grid and at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<SweepRow>> =
        jobs.par_iter().map(|&(c, s)| run_cell(&grid[c], c, s, setup, opts)).collect();
    let mut summary = SweepSummary::default();
    for ((c, s), r) in jobs.iter().zip(results) {
        match r {
            Ok(row) => summary.rows.push(row),
            Err(e) => summary.failures.push(SweepFailure { cell: grid[*c], seed: *s, error: e.to_string() }),
        }
    }
    for cell in grid {
        let rows: Vec<&SweepRow> = summary.rows.iter().filter(|r| r.cell == *cell).collect();
        if rows.is_empty() {
            continue;
        }
        let losses: Vec<f64> = rows.iter().map(|r| r.final_loss).collect();
        let psnrs: Vec<f64> = rows.iter().filter_map(|r| r.best_psnr).collect();
        let slopes: Vec<f64> = rows.iter().filter_map(|r| r.slope).collect();
        let r2s: Vec<f64> = rows.iter().filter_map(|r| r.r2).collect();
        let costs: Vec<f64> = rows.iter().map(|r| r.total_cost as f64).collect();
        let opt_stats = |xs: &[f64]| if xs.is_empty() { (None, None) } else { let (m, s) = mean_std(xs); (Some(m), Some(s)) };
        let (ml, sl) = mean_std(&losses);
        let (mp, sp) = opt_stats(&psnrs);
        let (mr, sr) = opt_stats(&r2s);
        let (mc, sc) = mean_std(&costs);
        summary.aggregates.push(CellAggregate {
            cell: *cell,
            mean_final_loss: ml,
            std_final_loss: sl,
            mean_best_psnr: mp,
            std_best_psnr: sp,
            median_slope: median(&slopes),
            std_slope: opt_stats(&slopes).1,
            mean_r2: mr,
            std_r2: sr,
            mean_total_cost: mc,
            std_total_cost: sc,
        });
    }
    Ok(summary)
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl SweepSummary {
    /// Raw rows per `(cell, seed)` followed by each cell's aggregate row
    /// (`seed = mean`, slope as the median over seeds).
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_HEADER.split(','))?;
        for a in &self.aggregates {
            let c = a.cell;
            let cell_fields = [c.p.to_string(), c.q.to_string(), c.eps0.to_string(), c.alpha0.to_string()];
            for r in self.rows.iter().filter(|r| r.cell == c) {
                let mut rec = cell_fields.to_vec();
                rec.extend([
                    r.seed.to_string(),
                    r.final_loss.to_string(),
                    field(r.best_psnr),
                    field(r.slope),
                    field(r.r2),
                    r.total_cost.to_string(),
                ]);
                out.write_record(&rec)?;
            }
            let mut rec = cell_fields.to_vec();
            rec.extend([
                "mean".to_string(),
                a.mean_final_loss.to_string(),
                field(a.mean_best_psnr),
                field(a.median_slope),
                field(a.mean_r2),
                a.mean_total_cost.to_string(),
            ]);
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Standard deviations across seeds, one row per cell with `seed = std`.
    pub fn write_spread<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_HEADER.split(','))?;
        for a in &self.aggregates {
            let c = a.cell;
            out.write_record([
                c.p.to_string(),
                c.q.to_string(),
                c.eps0.to_string(),
                c.alpha0.to_string(),
                "std".to_string(),
                a.std_final_loss.to_string(),
                field(a.std_best_psnr),
                field(a.std_slope),
                field(a.std_r2),
                a.std_total_cost.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_failures<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["p", "q", "eps0", "alpha0", "seed", "error"])?;
        for f in &self.failures {
            let c = f.cell;
            out.write_record([
                c.p.to_string(),
                c.q.to_string(),
                c.eps0.to_string(),
                c.alpha0.to_string(),
                f.seed.to_string(),
                f.error.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A labelled polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot with a logarithmic x axis. Points with non-positive `x` or
/// non-finite values are dropped.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let clean: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().copied().filter(|&(x, y)| x > 0.0 && x.is_finite() && y.is_finite()).map(|(x, y)| (x.log10(), y)).collect())
        .collect();
    let all = clean.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    let mut decade = x0.floor() as i32;
    while (decade as f64) <= x1 {
        if decade as f64 >= x0 {
            let x = px(decade as f64);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" font-size="11" text-anchor="middle">1e{decade}</text>"#, h - bottom + 16.0);
        }
        decade += 1;
    }
    for (v, anchor) in [(y0, h - bottom), (y1, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{anchor:.1}" font-size="11" text-anchor="end">{v:.4}</text>"#, left - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, (pts, meta)) in clean.iter().zip(series).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}" text-anchor="end">{}</text>"#, w - right - 4.0, escape(&meta.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `runlog_<label>.csv` for every run, then `loss.svg` and `psnr.svg`
/// drawn from the re-read CSV files against cumulative cost.
pub fn emit_plots(logs: &[(String, &RunLog)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut reread = Vec::with_capacity(logs.len());
    for (label, log) in logs {
        let path = out_dir.join(format!("runlog_{label}.csv"));
        log.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        reread.push((label.clone(), RunLog::read_csv(std::fs::File::open(&path)?)?));
        written.push(path);
    }
    let loss: Vec<PlotSeries> = reread
        .iter()
        .map(|(l, rows)| PlotSeries { label: l.clone(), points: rows.iter().map(|r| (r.cum_cost as f64, r.batch_loss)).collect() })
        .collect();
    let psnr: Vec<PlotSeries> = reread
        .iter()
        .map(|(l, rows)| PlotSeries {
            label: l.clone(),
            points: rows.iter().filter_map(|r| r.test_psnr.map(|p| (r.cum_cost as f64, p))).collect(),
        })
        .collect();
    for (name, title, y, series) in [
        ("loss.svg", "Training loss", "batch loss", &loss),
        ("psnr.svg", "Test PSNR", "PSNR [dB]", &psnr),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, render_svg(title, "computational cost", y, series))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use rand::{Rng as _, SeedableRng};

    fn power_law(e: f64, n: usize) -> Vec<(u64, f64)> {
        (0..n).map(|i| {
            let k = (10f64.powf(1.0 + 3.0 * i as f64 / (n - 1) as f64)).round() as u64;
            (k, (k as f64).powf(-e))
        }).collect()
    }

    #[test]
    fn exact_power_law() {
        let fit = fit_rate(&power_law(0.25, 40), None).unwrap();
        assert!((fit.slope + 0.25).abs() < 1e-9);
        assert!(fit.r_squared > 0.999_999);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = Rng::seed_from_u64(1);
        let pts: Vec<(u64, f64)> = (1..=400u64).map(|i| {
            let k = i * 25;
            (k, (k as f64).powf(-0.25) * (1.0 + rng.random_range(-0.1..0.1)))
        }).collect();
        let fit = fit_rate(&pts, Some((100, 10_000))).unwrap();
        assert!((fit.slope + 0.25).abs() < 0.03, "slope {}", fit.slope);
    }

    #[test]
    fn constant_series_is_flat() {
        let pts: Vec<(u64, f64)> = (1..100).map(|k| (k * 10, 0.3)).collect();
        let fit = fit_rate(&pts, None).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert!((0.0..=1.0).contains(&fit.r_squared));
    }

    #[test]
    fn degenerate_spans_rejected() {
        assert!(fit_rate(&power_law(0.5, 4), None).is_err());
        let narrow: Vec<(u64, f64)> = (100..110).map(|k| (k, 1.0 / k as f64)).collect();
        assert!(fit_rate(&narrow, None).is_err());
    }

    #[test]
    fn running_min_is_monotone() {
        let rm = running_min(&[(1, 3.0), (2, 1.0), (3, 2.0), (4, 0.5)]);
        assert_eq!(rm.iter().map(|p| p.1).collect::<Vec<_>>(), vec![3.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn empty_plot_and_overlay() {
        let empty = render_svg("t", "x", "y", &[]);
        assert!(empty.starts_with("<svg") && !empty.contains("<polyline"));
        let two = render_svg(
            "t",
            "x",
            "y",
            &[
                PlotSeries { label: "isgd".into(), points: vec![(1.0, 1.0), (10.0, 0.5)] },
                PlotSeries { label: "iadam".into(), points: vec![(1.0, 2.0), (100.0, 0.1)] },
            ],
        );
        assert_eq!(two.matches("<polyline").count(), 2);
        assert!(two.contains(">isgd<") && two.contains(">iadam<"));
    }
}
