//! Robustness evaluation of frozen policies, the entropic risk measure, the
//! cost-bound diagnostic and histogram export.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{derive_seed, Checkpoint, Rng};
use crate::envs::{mean, std_dev, Environment};
use crate::error::{Error, Result};
use crate::nets::{build_ballcatch_nets, build_mlp_policy, PolicyParams};
use crate::tdpg::{rollout_batch, tags, RolloutSpec};

/// Default number of evaluation rollouts per scenario.
pub const EVAL_ROLLOUTS: usize = 1000;
/// Default histogram resolution.
pub const HISTOGRAM_BINS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub n: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub dist_mean: f64,
    pub dist_std: f64,
    pub costs: Vec<f64>,
    pub distances: Vec<f64>,
    /// Per-rollout stage costs followed by the terminal cost.
    pub stage_costs: Vec<Vec<f64>>,
}

pub const REPORT_HEADER: &str = "scenario,n,cost_mean,cost_std,dist_mean,dist_std";

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scenario, self.n, self.cost_mean, self.cost_std, self.dist_mean, self.dist_std
        )
    }

    pub fn histogram(&self, bins: usize) -> Result<Histogram> {
        let (lo, hi) = value_range(&self.costs);
        Histogram::new(&self.costs, bins, lo, hi)
    }
}

/// Rolls out `n` stochastic trajectories of the frozen policy; the result
/// depends only on the inputs and `seed`.
pub fn evaluate<E: Environment>(
    env: &E,
    params: &PolicyParams,
    scenario: &str,
    n: usize,
    seed: u64,
    chunk: usize,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one rollout".into()));
    }
    let spec = RolloutSpec {
        n,
        seed: derive_seed(seed, &[tags::EVAL]),
        stream: 0,
        chunk,
        deterministic: false,
    };
    let b = rollout_batch(env, params, &spec)?;
    Ok(EvalReport {
        scenario: scenario.to_string(),
        n,
        cost_mean: mean(&b.total_costs),
        cost_std: std_dev(&b.total_costs),
        dist_mean: mean(&b.final_distances),
        dist_std: std_dev(&b.final_distances),
        costs: b.total_costs,
        distances: b.final_distances,
        stage_costs: b.costs,
    })
}

/// Rebuilds a lava policy from checkpoint blocks, inferring TRV size and
/// horizon from the block names.
pub fn lava_policy_from_checkpoint(ck: &Checkpoint) -> Result<PolicyParams> {
    let pi0 = ck
        .get("pi/t0/layer0/weight")
        .ok_or_else(|| Error::Checkpoint("missing block `pi/t0/layer0/weight`".into()))?;
    let trv = pi0.shape()[0];
    let hidden = pi0.shape()[1];
    let obs = ck
        .get("q/t0/layer0/weight")
        .ok_or_else(|| Error::Checkpoint("missing block `q/t0/layer0/weight`".into()))?
        .shape()[0]
        .checked_sub(trv)
        .ok_or_else(|| Error::Checkpoint("encoder input narrower than TRV".into()))?;
    let horizon = (0..)
        .take_while(|t| ck.get(&format!("q/t{t}/layer0/weight")).is_some())
        .count();
    let action = ck
        .get("pi/t0/layer2/bias")
        .ok_or_else(|| Error::Checkpoint("missing block `pi/t0/layer2/bias`".into()))?
        .numel()
        / 2;
    let mut p = build_mlp_policy(obs, trv, action, hidden, horizon, &mut Rng::new(0))?;
    p.load_checkpoint(ck)?;
    Ok(p)
}

/// Rebuilds a ball-catching policy for `image_size` images.
pub fn ballcatch_policy_from_checkpoint(ck: &Checkpoint, image_size: usize) -> Result<PolicyParams> {
    let trv = ck
        .get("pi/t0/layer0/weight")
        .ok_or_else(|| Error::Checkpoint("missing block `pi/t0/layer0/weight`".into()))?
        .shape()[0];
    let mut p = build_ballcatch_nets(image_size, trv, &mut Rng::new(0))?;
    p.load_checkpoint(ck)?;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskEstimate {
    pub beta: f64,
    pub rho: f64,
    pub n: usize,
}

/// `ρ_β = (1/β)·log mean exp(β·c)`, evaluated with max-subtraction.
pub fn entropic_risk(costs: &[f64], beta: f64) -> Result<RiskEstimate> {
    if costs.is_empty() {
        return Err(Error::Contract("entropic risk of an empty sample".into()));
    }
    if !(beta > 0.0) || costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract(format!(
            "entropic risk needs beta > 0 and finite costs (beta = {beta})"
        )));
    }
    let m = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = costs.iter().map(|c| (beta * (c - m)).exp()).sum();
    let rho = m + (s / costs.len() as f64).ln() / beta;
    Ok(RiskEstimate {
        beta,
        rho,
        n: costs.len(),
    })
}

/// Both sides of the online cost bound, for the record only: the MI terms
/// come from a lower-bound estimator and the bound's divergence condition is
/// not checked, so nothing here asserts the inequality.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundDiagnostic {
    pub beta: f64,
    /// `Σₜ (ρ_β[cₜ] + Îₜ)`.
    pub rhs: f64,
    /// `Ê[c(τ)]`.
    pub expected_cost: f64,
    pub gap: f64,
    pub risk_per_step: Vec<f64>,
}

impl BoundDiagnostic {
    pub const LABEL: &'static str = "NON-BINDING";

    pub fn summary(&self) -> String {
        format!(
            "bound diagnostic ({}): beta={} rhs={} expected_cost={} gap={}",
            Self::LABEL,
            self.beta,
            self.rhs,
            self.expected_cost,
            self.gap
        )
    }
}

/// `stage_costs[n][t]` holds the cost of rollout `n` at step `t` (terminal
/// cost last); `mi[t]` pairs with step `t`, missing entries count as zero.
pub fn bound_diagnostic(stage_costs: &[Vec<f64>], mi: &[f64], beta: f64) -> Result<BoundDiagnostic> {
    let steps = stage_costs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("bound diagnostic needs costs".into()))?;
    let mut risk_per_step = Vec::with_capacity(steps);
    for t in 0..steps {
        let col: Vec<f64> = stage_costs.iter().map(|r| r[t]).collect();
        risk_per_step.push(entropic_risk(&col, beta)?.rho);
    }
    let totals: Vec<f64> = stage_costs.iter().map(|r| r.iter().sum()).collect();
    let rhs = risk_per_step.iter().sum::<f64>() + mi.iter().sum::<f64>();
    let expected_cost = mean(&totals);
    Ok(BoundDiagnostic {
        beta,
        rhs,
        expected_cost,
        gap: rhs - expected_cost,
        risk_per_step,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `(min, max)` of the finite values.
pub fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the last bin is closed. A degenerate
    /// range is widened to one unit so every value lands in the first bin.
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Contract("histogram needs at least one bin".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::Contract(format!("bad histogram range [{lo}, {hi}]")));
        }
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        edges[bins] = hi;
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Writes histograms sharing one set of edges as CSV (`bin_lo,bin_hi,<label>...`)
/// and as an SVG bar chart with one colour per series.
pub fn export_histogram(series: &[(&str, &Histogram)], csv_path: &Path, svg_path: &Path) -> Result<()> {
    let first = series
        .first()
        .ok_or_else(|| Error::Contract("no histogram to export".into()))?
        .1;
    if series.iter().any(|(_, h)| h.edges != first.edges) {
        return Err(Error::Contract("histograms must share bin edges".into()));
    }
    let mut csv = String::from("bin_lo,bin_hi");
    for (label, _) in series {
        write!(csv, ",{label}").unwrap();
    }
    csv.push('\n');
    for k in 0..first.counts.len() {
        write!(csv, "{},{}", first.edges[k], first.edges[k + 1]).unwrap();
        for (_, h) in series {
            write!(csv, ",{}", h.counts[k]).unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(csv_path, csv)?;
    std::fs::write(svg_path, histogram_svg(series, first))?;
    Ok(())
}

const PALETTE: [&str; 4] = ["#d95f02", "#1b9e77", "#7570b3", "#e7298a"];

fn histogram_svg(series: &[(&str, &Histogram)], axis: &Histogram) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let bins = axis.counts.len();
    let max = series
        .iter()
        .flat_map(|(_, h)| h.counts.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let slot = (w - 2.0 * pad) / bins as f64;
    let bar = slot / series.len() as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (i, (label, hist)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (k, &c) in hist.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / max;
            let x = pad + k as f64 * slot + i as f64 * bar;
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{color}"/>"#,
                h - pad - bh,
                bar
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{color}">{label}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * i as f64
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{pad}" y="{:.2}" font-size="12">{:.3}</text>"#,
        h - pad + 16.0,
        axis.edges[0]
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{:.3}</text>"#,
        w - pad,
        h - pad + 16.0,
        axis.edges[bins]
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn risk_of_constant_costs() {
        for beta in [1e-3, 0.5, 3.0] {
            assert_eq!(entropic_risk(&[7.0; 5], beta).unwrap().rho, 7.0);
        }
        assert!(entropic_risk(&[], 1.0).is_err());
        assert!(entropic_risk(&[1.0], 0.0).is_err());
    }

    #[test]
    fn bound_diagnostic_constant_case() {
        let costs = vec![vec![1.0, 2.0, 3.0]; 4];
        let d = bound_diagnostic(&costs, &[0.0, 0.0], 0.5).unwrap();
        assert!(d.gap.abs() < 1e-12);
        assert_eq!(d.expected_cost, 6.0);
        assert!(d.summary().contains("NON-BINDING"));
    }

    #[test]
    fn histogram_cases() {
        let h = Histogram::new(&[3.0; 10], 30, 3.0, 3.0).unwrap();
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(h.total(), 10);

        let vals = [0.5, 1.0, 7.0, 9.5, 2.25];
        let (lo, hi) = value_range(&vals);
        let h = Histogram::new(&vals, 4, lo, hi).unwrap();
        assert_eq!(h.total(), vals.len());
        assert_eq!(h.edges[0], 0.5);
        assert_eq!(*h.edges.last().unwrap(), 9.5);
        assert!(Histogram::new(&vals, 0, lo, hi).is_err());
    }

    #[test]
    fn export_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = Histogram::new(&[1.0, 2.0], 2, 0.0, 4.0).unwrap();
        let b = Histogram::new(&[3.0], 2, 0.0, 4.0).unwrap();
        let (c, s) = (dir.path().join("h.csv"), dir.path().join("h.svg"));
        export_histogram(&[("pg", &a), ("tdpg", &b)], &c, &s).unwrap();
        let csv = std::fs::read_to_string(&c).unwrap();
        assert_eq!(csv, "bin_lo,bin_hi,pg,tdpg\n0,2,1,0\n2,4,1,1\n");
        assert!(std::fs::read_to_string(&s).unwrap().starts_with("<svg"));
    }
}
