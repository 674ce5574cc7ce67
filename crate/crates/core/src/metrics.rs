//! Rank and linear correlation between predictions and labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("correlation of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite sample".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Four-parameter logistic `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`
/// fitted to `(pred, label)` by Gauss-Newton with step halving.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logistic {
    pub b: [f64; 4],
}

impl Logistic {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4.abs().max(1e-9)).exp())
    }

    pub fn fit(pred: &[f64], label: &[f64]) -> Result<Logistic> {
        check_pair(pred, label)?;
        let n = pred.len() as f64;
        let (lo, hi) = label.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mp = pred.iter().sum::<f64>() / n;
        let sp = (pred.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / n).sqrt();
        if sp == 0.0 {
            return Err(Error::UndefinedCorrelation("constant predictions".into()));
        }
        let mut fit = Logistic { b: [hi, lo, mp, sp] };
        let sse = |f: &Logistic| pred.iter().zip(label).map(|(&p, &l)| (f.eval(p) - l).powi(2)).sum::<f64>();
        let mut cur = sse(&fit);
        for _ in 0..200 {
            // normal equations J^T J d = J^T r with numeric Jacobian
            let mut jtj = [[0.0; 4]; 4];
            let mut jtr = [0.0; 4];
            for (&p, &l) in pred.iter().zip(label) {
                let f0 = fit.eval(p);
                let mut j = [0.0; 4];
                for (k, jk) in j.iter_mut().enumerate() {
                    let h = 1e-6 * fit.b[k].abs().max(1e-3);
                    let mut up = fit;
                    up.b[k] += h;
                    *jk = (up.eval(p) - f0) / h;
                }
                for a in 0..4 {
                    jtr[a] += j[a] * (l - f0);
                    for b in 0..4 {
                        jtj[a][b] += j[a] * j[b];
                    }
                }
            }
            for (a, row) in jtj.iter_mut().enumerate() {
                row[a] += 1e-9 * (1.0 + row[a]);
            }
            let Some(d) = solve4(jtj, jtr) else { break };
            let mut step = 1.0;
            let mut improved = false;
            while step > 1e-6 {
                let mut cand = fit;
                for k in 0..4 {
                    cand.b[k] += step * d[k];
                }
                let s = sse(&cand);
                if s.is_finite() && s < cur {
                    fit = cand;
                    let gain = cur - s;
                    cur = s;
                    improved = gain > 1e-12 * (1.0 + cur);
                    break;
                }
                step /= 2.0;
            }
            if !improved {
                break;
            }
        }
        Ok(fit)
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlccMode {
    #[default]
    Raw,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
    /// `(label, prediction)` per image.
    pub pairs: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn new(labels: &[f64], preds: &[f64], mode: PlccMode) -> Result<Self> {
        let s = srcc(preds, labels)?;
        let p = match mode {
            PlccMode::Raw => plcc(preds, labels)?,
            PlccMode::Logistic => {
                let f = Logistic::fit(preds, labels)?;
                let mapped: Vec<f64> = preds.iter().map(|&x| f.eval(x)).collect();
                plcc(&mapped, labels)?
            }
        };
        Ok(Self {
            srcc: s,
            plcc: p,
            n: labels.len(),
            pairs: labels.iter().copied().zip(preds.iter().copied()).collect(),
        })
    }
}

/// One cell of a K/T sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub wall_ms: f64,
}

pub const DEFAULT_SWEEP_K: [usize; 5] = [5, 10, 15, 20, 50];
pub const DEFAULT_SWEEP_T: [usize; 3] = [4, 7, 15];

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
