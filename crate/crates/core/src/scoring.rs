//! Cross-model min-max normalization of per-state scores and aggregation
//! into one proxy score per model.
//!
//! For models `m` and retained states `a`:
//!
//! ```text
//! S_m = mean_a (r[m,a] - min_m' r[m',a]) / (max_m' r[m',a] - min_m' r[m',a])
//! ```
//!
//! States whose raw scores are identical across models carry no ranking
//! signal; they are dropped rather than scored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::PerStateScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub models: Vec<String>,
    pub states: Vec<String>,
    /// `raw[m][a]`.
    pub raw: Vec<Vec<f64>>,
    /// Same shape as `raw`; empty until [`normalize_scores`] runs. Columns of
    /// dropped states are NaN.
    pub normalized: Vec<Vec<f64>>,
    pub dropped_states: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(models: Vec<String>, states: Vec<String>, raw: Vec<Vec<f64>>) -> Result<Self> {
        if raw.len() != models.len() || raw.iter().any(|r| r.len() != states.len()) {
            return Err(Error::InvalidInput(format!("score matrix must be {} x {}", models.len(), states.len())));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("score matrix has non-finite entries".into()));
        }
        for (kind, names) in [("model", &models), ("state", &states)] {
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return Err(Error::InvalidInput(format!("duplicate {kind} `{n}`")));
                }
            }
        }
        Ok(ScoreMatrix { models, states, raw, normalized: Vec::new(), dropped_states: Vec::new() })
    }

    /// Builds the matrix from per-model scores. States absent for any model
    /// are recorded as dropped and left out of the raw matrix.
    pub fn from_scores(entries: &[(String, PerStateScores)]) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(Error::InvalidInput("no model scores".into()));
        };
        let names: Vec<String> = first.states.iter().map(|s| s.name.clone()).collect();
        let mut states = Vec::new();
        let mut dropped = Vec::new();
        for name in &names {
            if entries.iter().all(|(_, s)| s.get(name).is_some()) {
                states.push(name.clone());
            } else {
                dropped.push(name.clone());
            }
        }
        let raw = entries
            .iter()
            .map(|(model, s)| {
                states
                    .iter()
                    .map(|a| s.get(a).ok_or_else(|| Error::InvalidInput(format!("model `{model}` has no state `{a}`"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = ScoreMatrix::new(entries.iter().map(|(m, _)| m.clone()).collect(), states, raw)?;
        m.dropped_states = dropped;
        Ok(m)
    }

    fn state_index(&self, name: &str) -> Result<usize> {
        self.states.iter().position(|s| s == name).ok_or_else(|| Error::UnknownState(name.to_string()))
    }

    /// Restricts the matrix to `subset` (in the given order).
    pub fn select(&self, subset: &[&str]) -> Result<ScoreMatrix> {
        let idx = subset.iter().map(|n| self.state_index(n)).collect::<Result<Vec<_>>>()?;
        ScoreMatrix::new(
            self.models.clone(),
            idx.iter().map(|i| self.states[*i].clone()).collect(),
            self.raw.iter().map(|row| idx.iter().map(|i| row[*i]).collect()).collect(),
        )
    }

    /// Delimited `model,<state>...` table of raw scores.
    pub fn to_csv(&self) -> String {
        table_csv(&self.models, &self.states, &self.raw)
    }

    /// Delimited table of normalized scores for retained states.
    pub fn normalized_csv(&self) -> String {
        let keep: Vec<usize> =
            (0..self.states.len()).filter(|a| !self.dropped_states.contains(&self.states[*a])).collect();
        let states: Vec<String> = keep.iter().map(|a| self.states[*a].clone()).collect();
        let rows: Vec<Vec<f64>> = self.normalized.iter().map(|r| keep.iter().map(|a| r[*a]).collect()).collect();
        table_csv(&self.models, &states, &rows)
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
        if header.get(0) != Some("model") {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must start with `model`".into(),
            });
        }
        let states: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut models = Vec::new();
        let mut raw = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
            models.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| parse_err(format!("bad score `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != states.len() {
                return Err(parse_err(format!("expected {} scores, got {}", states.len(), row.len())));
            }
            raw.push(row);
        }
        ScoreMatrix::new(models, states, raw)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

fn table_csv(models: &[String], states: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = String::from("model");
    for s in states {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (m, row) in models.iter().zip(rows) {
        out.push_str(m);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Min-max normalizes every state column across models. Columns with
/// `max == min` are moved to `dropped_states`.
pub fn normalize_scores(raw: &ScoreMatrix) -> Result<ScoreMatrix> {
    if raw.models.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 models to normalize, got {}", raw.models.len())));
    }
    let mut out = raw.clone();
    out.normalized = vec![vec![f64::NAN; raw.states.len()]; raw.models.len()];
    for (a, name) in raw.states.iter().enumerate() {
        let col = raw.raw.iter().map(|r| r[a]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            if !out.dropped_states.contains(name) {
                out.dropped_states.push(name.clone());
            }
            continue;
        }
        let range = hi - lo;
        for (m, row) in raw.raw.iter().enumerate() {
            out.normalized[m][a] = (row[a] - lo) / range;
        }
    }
    Ok(out)
}

/// `(model, S_m)` pairs in model order.
pub type ProxyScores = Vec<(String, f64)>;

/// Mean normalized score over retained states, per model, in model order.
pub fn aggregate(normalized: &ScoreMatrix) -> Result<ProxyScores> {
    if normalized.normalized.len() != normalized.models.len() {
        return Err(Error::InvalidInput("score matrix has not been normalized".into()));
    }
    let keep: Vec<usize> =
        (0..normalized.states.len()).filter(|a| !normalized.dropped_states.contains(&normalized.states[*a])).collect();
    if keep.is_empty() {
        return Err(Error::InvalidInput("every state was dropped; no proxy score".into()));
    }
    Ok(normalized
        .models
        .iter()
        .zip(&normalized.normalized)
        .map(|(m, row)| (m.clone(), keep.iter().map(|a| row[*a]).sum::<f64>() / keep.len() as f64))
        .collect())
}

/// Proxy score over all states.
pub fn proxy_scores(raw: &ScoreMatrix) -> Result<ProxyScores> {
    aggregate(&normalize_scores(raw)?)
}

/// Proxy score restricted to `subset`.
pub fn subset_score(raw: &ScoreMatrix, subset: &[&str]) -> Result<ProxyScores> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("state subset is empty".into()));
    }
    proxy_scores(&raw.select(subset)?)
}

/// One proxy-score map per state, each computed without that state.
pub fn leave_one_out(raw: &ScoreMatrix) -> Result<Vec<(String, ProxyScores)>> {
    raw.states
        .iter()
        .map(|left_out| {
            let rest: Vec<&str> = raw.states.iter().filter(|s| *s != left_out).map(String::as_str).collect();
            Ok((left_out.clone(), subset_score(raw, &rest)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statevec::STATE_GROUPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(raw: Vec<Vec<f64>>) -> ScoreMatrix {
        let states = (0..raw[0].len()).map(|a| format!("s{a}")).collect();
        let models = (0..raw.len()).map(|m| format!("m{m}")).collect();
        ScoreMatrix::new(models, states, raw).unwrap()
    }

    fn values(scores: &[(String, f64)]) -> Vec<f64> {
        scores.iter().map(|(_, v)| *v).collect()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_scores(&matrix(vec![vec![2.0], vec![4.0], vec![3.0]])).unwrap();
        assert_eq!(n.normalized, vec![vec![0.0], vec![1.0], vec![0.5]]);

        let n = normalize_scores(&matrix(vec![vec![0.7, 1.0], vec![0.7, 2.0]])).unwrap();
        assert_eq!(n.dropped_states, vec!["s0".to_string()]);

        let base = matrix(vec![vec![2.0], vec![4.0], vec![3.0]]);
        let moved = matrix(vec![vec![11.0], vec![17.0], vec![14.0]]);
        assert_eq!(normalize_scores(&base).unwrap().normalized, normalize_scores(&moved).unwrap().normalized);

        assert!(normalize_scores(&matrix(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let n = normalize_scores(&matrix(vec![vec![1.0, 1.0], vec![0.0, 0.0]])).unwrap();
        assert_eq!(values(&aggregate(&n).unwrap()), vec![1.0, 0.0]);

        let n = normalize_scores(&matrix(vec![vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(values(&aggregate(&n).unwrap()), vec![0.5, 0.5]);

        let n = normalize_scores(&matrix(vec![vec![0.3, 0.3], vec![0.3, 0.3]])).unwrap();
        assert!(aggregate(&n).is_err());

        let raw = matrix(vec![vec![1.0]]);
        assert!(aggregate(&raw).is_err());
    }

    #[test]
    fn aggregate_matches_hand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let raw: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect();
            let got = values(&proxy_scores(&matrix(raw.clone())).unwrap());
            for m in 0..3 {
                let mut acc = 0.0;
                for a in 0..2 {
                    let col: Vec<f64> = raw.iter().map(|r| r[a]).collect();
                    let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                    let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                    acc += (raw[m][a] - lo) / (hi - lo);
                }
                assert!((got[m] - acc / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn subset_and_leave_one_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| rng.gen::<f64>()).collect()).collect();
        let m = ScoreMatrix::new(
            (0..4).map(|i| format!("m{i}")).collect(),
            STATE_GROUPS.iter().map(|s| s.to_string()).collect(),
            raw.clone(),
        )
        .unwrap();
        assert_eq!(subset_score(&m, &STATE_GROUPS).unwrap(), proxy_scores(&m).unwrap());

        // singleton subset ranks by that state's raw score
        let single = values(&subset_score(&m, &["p_pose"]).unwrap());
        let mut by_score: Vec<usize> = (0..4).collect();
        by_score.sort_by(|a, b| single[*a].total_cmp(&single[*b]));
        let mut by_raw: Vec<usize> = (0..4).collect();
        by_raw.sort_by(|a, b| raw[*a][0].total_cmp(&raw[*b][0]));
        assert_eq!(by_score, by_raw);

        let loo = leave_one_out(&m).unwrap();
        assert_eq!(loo.len(), 7);
        for ((name, scores), group) in loo.iter().zip(STATE_GROUPS) {
            assert_eq!(name, group);
            let rest: Vec<&str> = STATE_GROUPS.iter().copied().filter(|g| *g != group).collect();
            assert_eq!(scores, &subset_score(&m, &rest).unwrap());
        }

        assert!(matches!(subset_score(&m, &["nope"]), Err(Error::UnknownState(_))));
        assert!(subset_score(&m, &[]).is_err());
    }

    #[test]
    fn constant_state_never_changes_proxy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let raw: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
            let before = proxy_scores(&matrix(raw.clone())).unwrap();
            let c = rng.gen::<f64>();
            let with: Vec<Vec<f64>> = raw.iter().map(|r| [r.clone(), vec![c]].concat()).collect();
            let after = proxy_scores(&matrix(with)).unwrap();
            assert_eq!(values(&before), values(&after));
        }
    }

    #[test]
    fn extremes_attained_per_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| (rng.gen_range(0..4) as f64) * 0.25).collect()).collect();
        let n = normalize_scores(&matrix(raw)).unwrap();
        for a in 0..4 {
            if n.dropped_states.contains(&n.states[a]) {
                continue;
            }
            let col: Vec<f64> = n.normalized.iter().map(|r| r[a]).collect();
            assert!(col.contains(&0.0) && col.contains(&1.0));
            assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn from_scores_drops_absent_states() {
        use crate::probe::StateScore;
        let s = |a: Option<f64>, b: Option<f64>| PerStateScores {
            states: vec![
                StateScore { name: "p_pose".into(), score: a, count: 1 },
                StateScore { name: "l".into(), score: b, count: 1 },
            ],
        };
        let m = ScoreMatrix::from_scores(&[("a".into(), s(Some(-1.0), Some(0.5))), ("b".into(), s(None, Some(0.7)))])
            .unwrap();
        assert_eq!(m.states, vec!["l".to_string()]);
        assert_eq!(m.dropped_states, vec!["p_pose".to_string()]);
        assert_eq!(m.raw, vec![vec![0.5], vec![0.7]]);
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix(vec![vec![-0.1234567890123, 0.5], vec![1e-300, 0.75]]);
        let back = ScoreMatrix::from_csv(&m.to_csv(), Path::new("s.csv")).unwrap();
        assert_eq!(back, m);
        let err = ScoreMatrix::from_csv("model,a\nx,1\ny,zz\n", Path::new("s.csv")).unwrap_err();
        assert!(err.to_string().contains("s.csv, line 3"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_nan() {
        assert!(ScoreMatrix::new(vec!["a".into(), "a".into()], vec!["s".into()], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(ScoreMatrix::new(vec!["a".into()], vec!["s".into()], vec![vec![f64::NAN]]).is_err());
    }
}
