//! Training-free test-time edits of the stage-1 mask: dropping whole parts and
//! reclassifying tokens that lie unusually far from their part prototype.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Distance of each token to the prototype of its hard part: `1 − cos`.
/// `cosine` is `[N, K+1]`.
pub fn token_distances(cosine: &Tensor, hard: &[usize]) -> Vec<f64> {
    hard.iter().enumerate().map(|(i, &k)| 1.0 - cosine.at(i, k)).collect()
}

/// Nearest-rank percentile: the `⌈q·n/100⌉`-th smallest value, `+∞` for an empty set.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    if values.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 100.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("percentile must be in (0, 100], got {q}")))
    }
}

/// Per-part distance thresholds `τ_k` at percentile `q`; `tau[k-1]` belongs to part `k`.
///
/// Serialized as `{q, tau}` with infinite thresholds written as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    pub q: f64,
    #[serde(serialize_with = "write_tau", deserialize_with = "read_tau")]
    pub tau: Vec<f64>,
}

impl ThresholdTable {
    /// `distances[k-1]` holds the distances of all calibration tokens hard-assigned to part `k`.
    pub fn calibrate(distances: &[Vec<f64>], q: f64) -> Result<Self> {
        check_q(q)?;
        let tau = distances.iter().map(|d| nearest_rank(d, q)).collect::<Result<_>>()?;
        Ok(Self { q, tau })
    }

    pub fn n_parts(&self) -> usize {
        self.tau.len()
    }
}

/// Reassigns to background (part 0) every token whose distance exceeds its part's threshold.
/// Returns the edited hard map and the indices of the tokens that were moved.
pub fn token_removal(hard: &[usize], cosine: &Tensor, table: &ThresholdTable) -> (Vec<usize>, Vec<usize>) {
    let dist = token_distances(cosine, hard);
    let mut out = hard.to_vec();
    let mut removed = Vec::new();
    for (i, &k) in hard.iter().enumerate() {
        if k > 0 && dist[i] > table.tau[k - 1] {
            out[i] = 0;
            removed.push(i);
        }
    }
    (out, removed)
}

/// Parts to exclude and an optional token-removal table.
///
/// Serialized as `{dropped_parts, q, tau}`; an infinite threshold is written as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    #[serde(default)]
    pub dropped_parts: Vec<usize>,
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default, serialize_with = "write_tau", deserialize_with = "read_tau")]
    pub tau: Vec<f64>,
}

fn write_tau<S: Serializer>(tau: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<Option<f64>> = tau.iter().map(|t| t.is_finite().then_some(*t)).collect();
    v.serialize(s)
}

fn read_tau<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(v.into_iter().map(|t| t.unwrap_or(f64::INFINITY)).collect())
}

impl InterventionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn dropping(parts: &[usize]) -> Self {
        let mut plan = Self::default();
        plan.dropped_parts = parts.to_vec();
        plan.normalize();
        plan
    }

    pub fn with_table(mut self, table: &ThresholdTable) -> Self {
        self.q = Some(table.q);
        self.tau = table.tau.clone();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.dropped_parts.is_empty() && self.q.is_none()
    }

    pub fn table(&self) -> Option<ThresholdTable> {
        self.q.map(|q| ThresholdTable {
            q,
            tau: self.tau.clone(),
        })
    }

    fn normalize(&mut self) {
        self.dropped_parts.sort_unstable();
        self.dropped_parts.dedup();
    }

    /// Checks the plan against a model with `k` foreground parts.
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(bad) = self.dropped_parts.iter().find(|&&p| p == 0 || p > k) {
            return Err(Error::arg(format!("cannot drop part {bad}: parts are 1..={k}")));
        }
        if self.kept_parts(k).is_empty() {
            return Err(Error::arg("plan drops every part"));
        }
        match self.q {
            Some(q) => {
                check_q(q)?;
                if self.tau.len() != k {
                    return Err(Error::arg(format!("expected {k} thresholds, got {}", self.tau.len())));
                }
                if self.tau.iter().any(|t| t.is_nan()) {
                    return Err(Error::arg("threshold is NaN"));
                }
            }
            None if !self.tau.is_empty() => return Err(Error::arg("thresholds given without q")),
            None => {}
        }
        Ok(())
    }

    /// `{1..K} \ dropped`, ascending.
    pub fn kept_parts(&self, k: usize) -> Vec<usize> {
        (1..=k).filter(|p| !self.dropped_parts.contains(p)).collect()
    }
}

/// One leave-one-out evaluation: the metric with `dropped` removed from the base plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    /// `None` is the reference row without an additional drop.
    pub dropped: Option<usize>,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    /// One table per greedy round; a single round unless repeated mode is on.
    pub rounds: Vec<Vec<LooRow>>,
    pub plan: InterventionPlan,
}

impl LooReport {
    pub fn table(&self) -> &[LooRow] {
        &self.rounds[0]
    }
}

/// Leave-one-out part removal. Each round evaluates `metric` on the current plan and on the
/// plan with each remaining part dropped, then drops the part with the largest strict
/// improvement (lowest index on ties). One round unless `repeated`, which continues while
/// something improves and at least two parts remain.
pub fn loo_part_removal(
    k: usize,
    base: &InterventionPlan,
    repeated: bool,
    mut metric: impl FnMut(&InterventionPlan) -> Result<f64>,
) -> Result<LooReport> {
    if k == 0 {
        return Err(Error::arg("model has no foreground parts"));
    }
    base.validate(k)?;
    let mut plan = base.clone();
    plan.normalize();
    let mut rounds = Vec::new();
    loop {
        let reference = metric(&plan)?;
        let mut table = vec![LooRow {
            dropped: None,
            metric: reference,
        }];
        let kept = plan.kept_parts(k);
        let mut best: Option<(usize, f64)> = None;
        if kept.len() > 1 {
            for &part in &kept {
                let mut trial = plan.clone();
                trial.dropped_parts.push(part);
                trial.normalize();
                let m = metric(&trial)?;
                table.push(LooRow {
                    dropped: Some(part),
                    metric: m,
                });
                if m > reference && best.map_or(true, |(_, b)| m > b) {
                    best = Some((part, m));
                }
            }
        }
        rounds.push(table);
        match best {
            Some((part, _)) => {
                plan.dropped_parts.push(part);
                plan.normalize();
                if !repeated {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(LooReport { rounds, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_values() {
        let v: Vec<f64> = (1..=100).map(f64::from).rev().collect();
        assert_eq!(nearest_rank(&v, 97.0).unwrap(), 97.0);
        assert_eq!(nearest_rank(&v, 100.0).unwrap(), 100.0);
        assert_eq!(nearest_rank(&v, 0.1).unwrap(), 1.0);
        assert_eq!(nearest_rank(&[], 99.0).unwrap(), f64::INFINITY);
        assert!(nearest_rank(&v, 0.0).is_err());
        assert!(nearest_rank(&v, 100.5).is_err());
    }

    #[test]
    fn strict_exceed_flips() {
        let cosine = Tensor::matrix(3, 2, vec![0.0, 0.9, 0.0, 0.5, 1.0, 0.0]).unwrap();
        let hard = vec![1, 1, 0];
        let table = ThresholdTable { q: 99.0, tau: vec![0.5] };
        let (out, removed) = token_removal(&hard, &cosine, &table);
        assert_eq!(out, vec![1, 1, 0]);
        assert!(removed.is_empty());
        let table = ThresholdTable {
            q: 99.0,
            tau: vec![0.5 - 1e-12],
        };
        let (out, removed) = token_removal(&hard, &cosine, &table);
        assert_eq!(out, vec![1, 0, 0]);
        assert_eq!(removed, vec![1]);
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = InterventionPlan::dropping(&[3, 1]).with_table(&ThresholdTable {
            q: 99.0,
            tau: vec![0.2, f64::INFINITY, 0.4],
        });
        let s = serde_json::to_string(&plan).unwrap();
        assert_eq!(s, r#"{"dropped_parts":[1,3],"q":99.0,"tau":[0.2,null,0.4]}"#);
        let back: InterventionPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, plan);
        assert!(serde_json::from_str::<InterventionPlan>(r#"{"dropped":[1]}"#).is_err());
        let empty: InterventionPlan = serde_json::from_str("{}").unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn plan_validation() {
        assert!(InterventionPlan::dropping(&[7]).validate(6).is_err());
        assert!(InterventionPlan::dropping(&[0]).validate(6).is_err());
        assert!(InterventionPlan::dropping(&[1, 2]).validate(2).is_err());
        assert!(InterventionPlan::dropping(&[2]).validate(2).is_ok());
        let mut p = InterventionPlan::empty();
        p.q = Some(99.0);
        assert!(p.validate(2).is_err());
        p.tau = vec![1.0, 1.0];
        assert!(p.validate(2).is_ok());
    }

    fn fixture(plan: &InterventionPlan) -> Result<f64> {
        // metric per single dropped part, mirroring a typical LOO table
        Ok(match plan.dropped_parts.as_slice() {
            [] => 78.8,
            [1] => 64.7,
            [6] => 81.7,
            [3] => 78.8,
            _ => 70.0,
        })
    }

    #[test]
    fn loo_drops_best_part() {
        let r = loo_part_removal(6, &InterventionPlan::empty(), false, fixture).unwrap();
        assert_eq!(r.plan.dropped_parts, vec![6]);
        assert_eq!(r.table().len(), 7);
        assert_eq!(r.table()[0].metric, 78.8);
    }

    #[test]
    fn loo_no_improvement_and_ties() {
        let r = loo_part_removal(3, &InterventionPlan::empty(), false, |_| Ok(0.5)).unwrap();
        assert!(r.plan.dropped_parts.is_empty());
        let r = loo_part_removal(4, &InterventionPlan::empty(), false, |p| {
            Ok(match p.dropped_parts.as_slice() {
                [2] | [4] => 0.9,
                _ => 0.5,
            })
        })
        .unwrap();
        assert_eq!(r.plan.dropped_parts, vec![2]);
        let r = loo_part_removal(1, &InterventionPlan::empty(), false, |_| Ok(0.5)).unwrap();
        assert_eq!(r.table().len(), 1);
    }

    #[test]
    fn loo_repeated_mode() {
        // every drop improves by one; stops with a single part left
        let r = loo_part_removal(4, &InterventionPlan::empty(), true, |p| Ok(p.dropped_parts.len() as f64)).unwrap();
        assert_eq!(r.plan.dropped_parts, vec![1, 2, 3]);
        assert_eq!(r.rounds.len(), 4);
    }
}
