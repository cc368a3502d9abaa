//! Ranking fidelity between proxy scores `S` and policy success rates `R`.
//!
//! ```text
//! violation(i, j) = |R_i - R_j| * [ (S_i < S_j) != (R_i < R_j) ]
//! MMRV            = (1/N) * sum_i max_j violation(i, j)
//! ```
//!
//! The strict `<` is applied literally. With tied proxies `S_i == S_j` and
//! `R_i < R_j`, `violation(i, j)` is `R_j - R_i` (false vs true) while
//! `violation(j, i)` is 0 (false vs false). For example with
//! `R = (0.2, 0.6)` and `S = (1, 1)`: model 0 scores max violation 0.4,
//! model 1 scores 0, so MMRV = 0.2.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Success rates and proxy scores, aligned by model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInput {
    pub success: Vec<f64>,
    pub proxy: Vec<f64>,
}

impl RankInput {
    pub fn new(success: Vec<f64>, proxy: Vec<f64>) -> Result<Self> {
        if success.len() != proxy.len() {
            return Err(Error::InvalidInput(format!(
                "{} success rates but {} proxy scores",
                success.len(),
                proxy.len()
            )));
        }
        if success.len() < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 models, got {}", success.len())));
        }
        if success.iter().chain(&proxy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("success rates and proxy scores must be finite".into()));
        }
        Ok(RankInput { success, proxy })
    }

    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }
}

pub fn rank_violation(i: usize, j: usize, input: &RankInput) -> f64 {
    let (r, s) = (&input.success, &input.proxy);
    if (s[i] < s[j]) != (r[i] < r[j]) {
        (r[i] - r[j]).abs()
    } else {
        0.0
    }
}

pub fn mmrv(input: &RankInput) -> f64 {
    let n = input.len();
    let total: f64 =
        (0..n).map(|i| (0..n).filter(|j| *j != i).map(|j| rank_violation(i, j, input)).fold(0.0, f64::max)).sum();
    total / n as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Product-moment correlation `r(R, S)`, clamped to `[-1, 1]`.
pub fn pearson(input: &RankInput) -> Result<f64> {
    let (x, y) = (&input.success, &input.proxy);
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("success rates are constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("proxy scores are constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPair {
    pub other: usize,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub models: Vec<String>,
    pub success: Vec<f64>,
    pub proxy: Vec<f64>,
    pub mmrv: f64,
    /// `None` when either side is constant.
    pub pearson_r: Option<f64>,
    /// `violations[i][j]`; zero on the diagonal.
    pub violations: Vec<Vec<f64>>,
    /// Per model, the partner with the largest violation (lowest index on
    /// ties); `None` when the model has no violation.
    pub worst: Vec<Option<WorstPair>>,
}

pub fn rank_report(models: &[String], success: &[f64], proxy: &[f64]) -> Result<RankReport> {
    if models.len() != success.len() {
        return Err(Error::InvalidInput(format!("{} model ids but {} success rates", models.len(), success.len())));
    }
    let input = RankInput::new(success.to_vec(), proxy.to_vec())?;
    let n = input.len();
    let violations: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { rank_violation(i, j, &input) }).collect()).collect();
    let worst = violations
        .iter()
        .map(|row| {
            let mut best: Option<WorstPair> = None;
            for (j, v) in row.iter().enumerate() {
                if *v > best.as_ref().map_or(0.0, |b| b.violation) {
                    best = Some(WorstPair { other: j, violation: *v });
                }
            }
            best
        })
        .collect();
    Ok(RankReport {
        models: models.to_vec(),
        mmrv: mmrv(&input),
        pearson_r: pearson(&input).ok(),
        success: input.success,
        proxy: input.proxy,
        violations,
        worst,
    })
}

impl RankReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bad report document: {e}")))
    }

    /// `model,success,proxy,worst_other,worst_violation` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,success,proxy,worst_other,worst_violation\n");
        for (i, m) in self.models.iter().enumerate() {
            let (other, v) = match &self.worst[i] {
                Some(w) => (self.models[w.other].clone(), w.violation),
                None => (String::new(), 0.0),
            };
            let _ = writeln!(out, "{m},{},{},{other},{v}", self.success[i], self.proxy[i]);
        }
        out
    }

    /// `model,<model>...` violation matrix.
    pub fn violations_csv(&self) -> String {
        let mut out = String::from("model");
        for m in &self.models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (m, row) in self.models.iter().zip(&self.violations) {
            out.push_str(m);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table: per-model rows, then MMRV and Pearson rows.
    pub fn render(&self) -> String {
        let width = self.models.iter().map(|m| m.len()).max().unwrap_or(5).max(12);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>10}  {:>12}", "model", "success", "proxy", "worst");
        for (i, m) in self.models.iter().enumerate() {
            let worst = match &self.worst[i] {
                Some(w) => format!("{} ({:.3})", self.models[w.other], w.violation),
                None => "-".to_string(),
            };
            let _ = writeln!(out, "{m:<width$}  {:>8.3}  {:>10.4}  {:>12}", self.success[i], self.proxy[i], worst);
        }
        let _ = writeln!(out, "{:<width$}  {:>8.3}", "MMRV", self.mmrv);
        match self.pearson_r {
            Some(r) => {
                let _ = writeln!(out, "{:<width$}  {:>8.3}", "Pearson", r);
            }
            None => {
                let _ = writeln!(out, "{:<width$}  {:>8}", "Pearson", "undefined");
            }
        }
        out
    }
}
