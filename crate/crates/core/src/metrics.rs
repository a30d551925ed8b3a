//! Learning-curve post-processing: smoothing, outlier rejection and the
//! normalized area under the learning curve.
//!
//! Episode indices are zero-based throughout. The normalized AULC integrates
//! `y(t) = min(1, r(t) / (P/100 · optimum))` with the trapezoid rule over
//! `[0, e_P]` and divides by `e_P`, so an agent that sits at the threshold
//! from the first episode scores one and a linear ramp scores one half.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_PERCENT: f64 = 90.0;
pub const DEFAULT_KEEP: usize = 5;

/// Per-episode rewards of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    pub config_hash: String,
    pub rewards: Vec<f64>,
}

/// Trailing moving average. The first `window − 1` entries average the
/// available prefix.
pub fn smooth(curve: &[f64], window: usize) -> Result<Vec<f64>> {
    if curve.is_empty() {
        return Err(Error::Metrics("cannot smooth an empty curve".into()));
    }
    if window == 0 {
        return Err(Error::Metrics("smoothing window must be at least 1".into()));
    }
    // Summed directly per entry so long curves carry no running-sum drift.
    Ok((0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect())
}

fn final_mean(smoothed: &[f64], window: usize) -> f64 {
    let tail = &smoothed[smoothed.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Indices of the `keep` curves with the highest mean smoothed reward over
/// the final `window` episodes, ties broken by the lower seed. The result is
/// ordered by seed.
pub fn select_ensemble(curves: &[LearningCurve], keep: usize, window: usize) -> Result<Vec<usize>> {
    if curves.len() < keep {
        return Err(Error::Metrics(format!(
            "ensemble selection keeps {keep} curves but only {} were given",
            curves.len()
        )));
    }
    let mut scored = Vec::with_capacity(curves.len());
    for (i, c) in curves.iter().enumerate() {
        scored.push((final_mean(&smooth(&c.rewards, window)?, window), c.seed, i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(u64, usize)> = scored[..keep].iter().map(|&(_, s, i)| (s, i)).collect();
    kept.sort();
    Ok(kept.into_iter().map(|(_, i)| i).collect())
}

/// Element-wise mean of equal-length curves.
pub fn mean_curve(curves: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = curves.first() else {
        return Err(Error::Metrics("no curves to average".into()));
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Metrics("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / n)
        .collect())
}

/// Which curve defines the threshold episode `e_P`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpBasis {
    /// Earliest crossing of any individual smoothed curve.
    #[default]
    BestIndividual,
    /// Crossing of the smoothed ensemble mean.
    EnsembleMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AulcOptions {
    pub percent: f64,
    pub window: usize,
    pub basis: EpBasis,
}

impl Default for AulcOptions {
    fn default() -> Self {
        AulcOptions {
            percent: DEFAULT_PERCENT,
            window: DEFAULT_WINDOW,
            basis: EpBasis::BestIndividual,
        }
    }
}

impl AulcOptions {
    fn threshold(&self, optimum: f64) -> Result<f64> {
        if !(optimum > 0.0 && optimum.is_finite()) {
            return Err(Error::Metrics(format!("optimum must be positive, got {optimum}")));
        }
        if !(self.percent > 0.0 && self.percent <= 100.0) {
            return Err(Error::Metrics(format!("percent {} outside (0, 100]", self.percent)));
        }
        Ok(self.percent / 100.0 * optimum)
    }
}

/// First index at which `curve` reaches `threshold`.
pub fn first_crossing(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&r| r >= threshold)
}

/// Trapezoid area of the capped, normalized curve over `[0, e_p]`, divided
/// by `e_p`. For `e_p = 0` the value of the first point is returned.
pub fn aulc_on_window(curve: &[f64], threshold: f64, e_p: usize) -> Result<f64> {
    if e_p >= curve.len() {
        return Err(Error::Metrics(format!(
            "window end {e_p} beyond curve of length {}",
            curve.len()
        )));
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Metrics(format!("threshold must be positive, got {threshold}")));
    }
    let y = |t: usize| (curve[t] / threshold).min(1.0);
    if e_p == 0 {
        return Ok(y(0));
    }
    let area: f64 = (0..e_p).map(|t| 0.5 * (y(t) + y(t + 1))).sum();
    Ok(area / e_p as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AulcReport {
    pub percent: f64,
    pub optimum: f64,
    /// Threshold episode; the last index when no curve converged.
    pub e_p: usize,
    pub converged: bool,
    pub aulc: f64,
    /// Seeds of the curves entering the mean.
    pub agents: Vec<u64>,
    /// Smoothed ensemble-mean curve the score was computed on.
    pub mean: Vec<f64>,
}

/// Normalized AULC of an ensemble. Every curve is smoothed, `e_P` is taken
/// from `opts.basis`, and the score is computed on the smoothed mean.
pub fn normalized_aulc(curves: &[LearningCurve], optimum: f64, opts: &AulcOptions) -> Result<AulcReport> {
    let threshold = opts.threshold(optimum)?;
    let smoothed = curves
        .iter()
        .map(|c| smooth(&c.rewards, opts.window))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = smoothed.iter().map(|c| c.as_slice()).collect();
    let mean = mean_curve(&refs)?;
    let crossing = match opts.basis {
        EpBasis::BestIndividual => smoothed.iter().filter_map(|c| first_crossing(c, threshold)).min(),
        EpBasis::EnsembleMean => first_crossing(&mean, threshold),
    };
    let e_p = crossing.unwrap_or(mean.len() - 1);
    Ok(AulcReport {
        percent: opts.percent,
        optimum,
        e_p,
        converged: crossing.is_some(),
        aulc: aulc_on_window(&mean, threshold, e_p)?,
        agents: curves.iter().map(|c| c.seed).collect(),
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    /// Score on the shared window.
    pub aulc: f64,
    /// The method's own threshold episode, if it converged.
    pub own_e_p: Option<usize>,
    /// Rank by shared-window score, 1 being best.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// Window end shared by all methods: the fastest method's `e_P`.
    pub e_p: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Recomputes every method's AULC on the window set by the fastest
/// converged method. Without any converged method the window spans the
/// shortest curve.
pub fn compare_methods(reports: &[(String, AulcReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Metrics("no methods to compare".into()));
    };
    for (name, r) in reports {
        if r.optimum != first.optimum || r.percent != first.percent {
            return Err(Error::Metrics(format!(
                "method {name} uses optimum {} at {}%, expected {} at {}%",
                r.optimum, r.percent, first.optimum, first.percent
            )));
        }
    }
    let shortest = reports.iter().map(|(_, r)| r.mean.len()).min().unwrap_or(0);
    if shortest == 0 {
        return Err(Error::Metrics("empty learning curve".into()));
    }
    let e_p = reports
        .iter()
        .filter(|(_, r)| r.converged)
        .map(|(_, r)| r.e_p)
        .min()
        .unwrap_or(shortest - 1)
        .min(shortest - 1);
    let threshold = first.percent / 100.0 * first.optimum;
    let mut rows = reports
        .iter()
        .map(|(name, r)| {
            Ok(ComparisonRow {
                method: name.clone(),
                aulc: aulc_on_window(&r.mean, threshold, e_p)?,
                own_e_p: r.converged.then_some(r.e_p),
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].aulc.total_cmp(&rows[a].aulc).then(a.cmp(&b)));
    for (rank, i) in order.into_iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    Ok(Comparison { e_p, rows })
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    episode: usize,
    reward: f64,
}

/// Serializes a curve as `episode,reward` CSV.
pub fn curve_csv(rewards: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (episode, &reward) in rewards.iter().enumerate() {
        w.serialize(CurveRow { episode, reward })
            .map_err(|e| Error::Metrics(format!("curve serialization: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Metrics(format!("curve serialization: {e}")))
}

pub fn write_curve(path: &Path, rewards: &[f64]) -> Result<()> {
    crate::runner::io::write_atomic(path, &curve_csv(rewards)?)
}

pub fn read_curve(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<CurveRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if row.episode != i {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("row {i} has episode {}", row.episode),
            });
        }
        out.push(row.reward);
    }
    Ok(out)
}

/// `method,aulc,e_p,own_e_p,rank` rows of a comparison.
pub fn comparison_csv(c: &Comparison) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Metrics(format!("report serialization: {e}"));
    w.write_record(["method", "aulc", "e_p", "own_e_p", "rank"]).map_err(err)?;
    for row in &c.rows {
        w.write_record([
            row.method.clone(),
            row.aulc.to_string(),
            c.e_p.to_string(),
            row.own_e_p.map(|e| e.to_string()).unwrap_or_default(),
            row.rank.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Metrics(format!("report serialization: {e}")))
}

/// `episode,smoothed,normalized` rows for plotting one method.
pub fn plot_csv(report: &AulcReport) -> Result<Vec<u8>> {
    let threshold = report.percent / 100.0 * report.optimum;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Metrics(format!("plot data serialization: {e}"));
    w.write_record(["episode", "smoothed", "normalized"]).map_err(err)?;
    for (t, &v) in report.mean.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string(), (v / threshold).min(1.0).to_string()])
            .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Metrics(format!("plot data serialization: {e}")))
}
