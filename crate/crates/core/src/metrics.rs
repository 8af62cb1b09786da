//! Point estimates from stored draws and accuracy metrics against a known truth.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::simulation::GroundTruth;
use crate::store::DrawStore;

/// Most frequent value; ties go to the smallest.
fn mode<T: Ord + Clone>(items: impl Iterator<Item = T>) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimates {
    /// Per-time mode of the state label (0-based).
    pub s: Vec<usize>,
    /// Per-state joint mode of the allocation vector.
    pub gammas: Vec<Vec<bool>>,
    pub ranks: Vec<usize>,
}

pub fn map_estimates(store: &DrawStore) -> Result<MapEstimates> {
    let first = store
        .draws
        .first()
        .ok_or_else(|| Error::Validation(crate::error::ValidationErrors::single("draws", "store is empty")))?;
    let t_len = first.state.t();
    let k = first.state.k();
    let s = (0..t_len)
        .map(|t| mode(store.states().map(|st| st.s[t])).expect("nonempty"))
        .collect();
    let gammas = (0..k)
        .map(|kk| mode(store.states().map(|st| st.states[kk].gamma.clone())).expect("nonempty"))
        .collect();
    let ranks = (0..k)
        .map(|kk| mode(store.states().map(|st| st.states[kk].rank)).expect("nonempty"))
        .collect();
    Ok(MapEstimates { s, gammas, ranks })
}

/// Posterior mean of the fitted mean matrix over the stored draws.
pub fn posterior_mean_fit(store: &DrawStore, data: &Dataset) -> Result<DMatrix<f64>> {
    if store.is_empty() {
        return Err(Error::Validation(crate::error::ValidationErrors::single("draws", "store is empty")));
    }
    let mut acc = DMatrix::zeros(data.t(), data.q());
    for st in store.states() {
        acc += st.fitted_mean(data);
    }
    Ok(acc / store.len() as f64)
}

/// `‖a − b‖²_F / (T q)`.
pub fn frobenius_mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok((a - b).norm_squared() / (a.nrows() * a.ncols()) as f64)
}

pub fn mse(y_hat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    frobenius_mse(y_hat, y)
}

pub fn mspe(m_hat: &DMatrix<f64>, m_true: &DMatrix<f64>) -> Result<f64> {
    frobenius_mse(m_hat, m_true)
}

/// Accuracy and F1 with `true` as the positive class; F1 is 0 when there
/// are no predicted or no actual positives.
pub fn classification_scores(est: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::dimension("estimate and truth must have the same nonzero length"));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    let mut agree = 0usize;
    for (&e, &t) in est.iter().zip(truth) {
        agree += usize::from(e == t);
        match (e, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let acc = agree as f64 / est.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fnn) as f64;
        2.0 * precision * recall / (precision + recall)
    };
    Ok((acc, f1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: u8,
    pub seed: u64,
    pub variant: String,
    pub draws: usize,
    pub mse: f64,
    pub mspe: f64,
    /// `None` when the truth has a single state.
    pub accuracy_s: Option<f64>,
    pub f1_s: Option<f64>,
    pub accuracy_gamma: Vec<f64>,
    pub f1_gamma: Vec<f64>,
    pub q_gamma_hat: Vec<usize>,
    pub r_hat: Vec<usize>,
}

/// Scores a run against its ground truth. When the fitted and true numbers
/// of states differ, the single estimated (or true) allocation is compared
/// with every allocation on the other side.
pub fn evaluate(store: &DrawStore, data: &Dataset, truth: &GroundTruth) -> Result<MetricsReport> {
    let map = map_estimates(store)?;
    let m_hat = posterior_mean_fit(store, data)?;
    let k_fit = map.gammas.len();
    let k_true = truth.gammas.len();
    let (accuracy_s, f1_s) = if k_true > 1 {
        let est: Vec<bool> = map.s.iter().map(|&v| v > 0).collect();
        let tr: Vec<bool> = truth.s.iter().map(|&v| v > 0).collect();
        let (a, f) = classification_scores(&est, &tr)?;
        (Some(a), Some(f))
    } else {
        (None, None)
    };
    let mut accuracy_gamma = Vec::new();
    let mut f1_gamma = Vec::new();
    for i in 0..k_fit.max(k_true) {
        let (a, f) = classification_scores(&map.gammas[i.min(k_fit - 1)], &truth.gammas[i.min(k_true - 1)])?;
        accuracy_gamma.push(a);
        f1_gamma.push(f);
    }
    Ok(MetricsReport {
        scenario: truth.scenario,
        seed: truth.seed,
        variant: store.meta.variant.clone(),
        draws: store.len(),
        mse: mse(&m_hat, &data.y)?,
        mspe: mspe(&m_hat, &truth.mean)?,
        accuracy_s,
        f1_s,
        accuracy_gamma,
        f1_gamma,
        q_gamma_hat: map.gammas.iter().map(|g| g.iter().filter(|v| **v).count()).collect(),
        r_hat: map.ranks,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    scenario: u8,
    seed: u64,
    variant: &'a str,
    draws: usize,
    mse: f64,
    mspe: f64,
    accuracy_s: Option<f64>,
    f1_s: Option<f64>,
    accuracy_gamma: String,
    f1_gamma: String,
    q_gamma_hat: String,
    r_hat: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Writes reports as CSV rows, one per replication; list-valued fields
    /// are joined with `;`.
    pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in reports {
            w.serialize(ReportRow {
                scenario: r.scenario,
                seed: r.seed,
                variant: &r.variant,
                draws: r.draws,
                mse: r.mse,
                mspe: r.mspe,
                accuracy_s: r.accuracy_s,
                f1_s: r.f1_s,
                accuracy_gamma: join(&r.accuracy_gamma),
                f1_gamma: join(&r.f1_gamma),
                q_gamma_hat: join(&r.q_gamma_hat),
                r_hat: join(&r.r_hat),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct TraceRow<'a> {
    sweep: u64,
    quantity: &'a str,
    /// 1-based state label; empty for per-time quantities.
    state: Option<usize>,
    /// 1-based time point or response index; empty for scalars.
    index: Option<usize>,
    value: f64,
}

/// Writes the paths of `s`, `γ`, `r`, `σ²_f` and `ζ` as one long-format CSV
/// (`sweep,quantity,state,index,value`), one row per draw and coordinate.
pub fn write_traces(store: &DrawStore, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in &store.draws {
        let row = |quantity, state, index, value| TraceRow {
            sweep: d.sweep,
            quantity,
            state,
            index,
            value,
        };
        for (t, &v) in d.state.s.iter().enumerate() {
            w.serialize(row("s", None, Some(t + 1), (v + 1) as f64))?;
        }
        for (k, st) in d.state.states.iter().enumerate() {
            for (j, &g) in st.gamma.iter().enumerate() {
                w.serialize(row("gamma", Some(k + 1), Some(j + 1), f64::from(u8::from(g))))?;
            }
            w.serialize(row("rank", Some(k + 1), None, st.rank as f64))?;
            w.serialize(row("sigma2_f", Some(k + 1), None, st.sigma2_f))?;
            w.serialize(row("zeta", Some(k + 1), None, st.zeta))?;
        }
    }
    w.flush()?;
    Ok(())
}
