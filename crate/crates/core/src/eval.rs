//! Ranking metrics, report aggregation and rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ReformulationMode;
use crate::kg::EntityId;

/// Per-question indicators; `rr` is the reciprocal rank of the first gold hit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankScores {
    pub p1: f64,
    pub hit3: f64,
    pub hit5: f64,
    pub hit8: f64,
    pub rr: f64,
}

/// `None` when `gold` is empty (the caller counts it as skipped).
pub fn rank_metrics(ranked: &[EntityId], gold: &HashSet<EntityId>) -> Option<RankScores> {
    if gold.is_empty() {
        return None;
    }
    let first = ranked.iter().position(|e| gold.contains(e));
    let within = |k: usize| f64::from(u8::from(first.is_some_and(|r| r < k)));
    Some(RankScores {
        p1: within(1),
        hit3: within(3),
        hit5: within(5),
        hit8: within(8),
        rr: first.map_or(0.0, |r| 1.0 / (r + 1) as f64),
    })
}

/// Means over turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub p_at_1: f64,
    pub hit_at_3: f64,
    pub hit_at_5: f64,
    pub hit_at_8: f64,
    pub mrr: f64,
    pub turns: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    p1: f64,
    hit3: f64,
    hit5: f64,
    hit8: f64,
    rr: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, s: &RankScores) {
        self.p1 += s.p1;
        self.hit3 += s.hit3;
        self.hit5 += s.hit5;
        self.hit8 += s.hit8;
        self.rr += s.rr;
        self.n += 1;
    }

    fn metrics(&self) -> Metrics {
        let d = self.n.max(1) as f64;
        Metrics {
            p_at_1: self.p1 / d,
            hit_at_3: self.hit3 / d,
            hit_at_5: self.hit5 / d,
            hit_at_8: self.hit8 / d,
            mrr: self.rr / d,
            turns: self.n,
        }
    }
}

/// Accumulates per-turn scores by domain and by turn position.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    overall: Sums,
    domains: BTreeMap<String, Sums>,
    positions: Vec<Sums>,
    pub skipped_empty_gold: usize,
}

impl MetricAccumulator {
    pub fn record(&mut self, domain: &str, turn: usize, ranked: &[EntityId], gold: &HashSet<EntityId>) {
        let Some(s) = rank_metrics(ranked, gold) else {
            self.skipped_empty_gold += 1;
            return;
        };
        self.overall.add(&s);
        self.domains.entry(domain.to_string()).or_default().add(&s);
        if self.positions.len() <= turn {
            self.positions.resize(turn + 1, Sums::default());
        }
        self.positions[turn].add(&s);
    }

    pub fn overall(&self) -> Metrics {
        self.overall.metrics()
    }

    pub fn per_domain(&self) -> BTreeMap<String, Metrics> {
        self.domains.iter().map(|(k, v)| (k.clone(), v.metrics())).collect()
    }

    pub fn per_turn(&self) -> Vec<Metrics> {
        self.positions.iter().map(Sums::metrics).collect()
    }
}

/// A published number kept for comparison; never reproduced here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub benchmark: String,
    pub metric: String,
    pub value: f64,
    pub reproduced: bool,
}

impl ReferencePoint {
    fn new(benchmark: &str, metric: &str, value: f64) -> Self {
        ReferencePoint {
            benchmark: benchmark.into(),
            metric: metric.into(),
            value,
            reproduced: false,
        }
    }
}

pub fn overall_reference() -> Vec<ReferencePoint> {
    vec![
        ReferencePoint::new("ConvQA", "hit_at_5", 0.417),
        ReferencePoint::new("ConvQA", "mrr", 0.337),
        ReferencePoint::new("ConvRef", "hit_at_5", 0.477),
        ReferencePoint::new("ConvRef", "mrr", 0.353),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub metric: String,
    pub required: f64,
    pub actual: f64,
    pub passed: bool,
}

/// Top of the ranking for one replayed turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub question: String,
    pub topic_used: String,
    pub answer: Option<String>,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationPrediction {
    pub id: String,
    pub turns: Vec<TurnPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub teacher_force: bool,
    pub reformulation_mode: ReformulationMode,
    pub conversations: usize,
    pub overall: Metrics,
    pub per_domain: BTreeMap<String, Metrics>,
    pub per_turn: Vec<Metrics>,
    pub skipped_empty_gold: usize,
    pub resolution_failures: usize,
    pub reference: Vec<ReferencePoint>,
    pub thresholds: Vec<ThresholdCheck>,
    pub predictions: Vec<ConversationPrediction>,
}

impl EvalReport {
    /// Records `actual >= required` checks for the given minimums.
    pub fn check_thresholds(&mut self, min_p1: Option<f64>, min_hit5: Option<f64>) {
        let mut push = |metric: &str, required: Option<f64>, actual: f64| {
            if let Some(required) = required {
                self.thresholds.push(ThresholdCheck {
                    metric: metric.into(),
                    required,
                    actual,
                    passed: actual >= required,
                });
            }
        };
        push("p_at_1", min_p1, self.overall.p_at_1);
        push("hit_at_5", min_hit5, self.overall.hit_at_5);
    }

    pub fn thresholds_passed(&self) -> bool {
        self.thresholds.iter().all(|t| t.passed)
    }

    pub fn to_text(&self) -> String {
        let mut rows = vec![("overall".to_string(), self.overall)];
        rows.extend(self.per_domain.iter().map(|(d, m)| (format!("domain {d}"), *m)));
        rows.extend(self.per_turn.iter().enumerate().map(|(i, m)| (format!("turn {}", i + 1), *m)));
        let mut out = format!(
            "split {}  seed {}  config {}  teacher_force {}\n",
            self.split,
            self.seed,
            &self.config_hash[..self.config_hash.len().min(12)],
            self.teacher_force
        );
        out.push_str(&metrics_table(&rows));
        let _ = writeln!(
            out,
            "skipped (empty gold): {}  resolution failures: {}",
            self.skipped_empty_gold, self.resolution_failures
        );
        for t in &self.thresholds {
            let _ = writeln!(
                out,
                "threshold {:<9} >= {:.3}: {:.4} {}",
                t.metric,
                t.required,
                t.actual,
                if t.passed { "ok" } else { "FAILED" }
            );
        }
        out
    }
}

/// Aligned-column table of labelled metric rows.
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "", "P@1", "Hit@3", "Hit@5", "Hit@8", "MRR", "turns"
    );
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{:<w$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6}",
            label, m.p_at_1, m.hit_at_3, m.hit_at_5, m.hit_at_8, m.mrr, m.turns
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[usize]) -> Vec<EntityId> {
        v.iter().copied().map(EntityId).collect()
    }

    fn gold(v: &[usize]) -> HashSet<EntityId> {
        v.iter().copied().map(EntityId).collect()
    }

    #[test]
    fn gold_at_rank_one() {
        let s = rank_metrics(&ids(&[3, 1, 2]), &gold(&[3])).unwrap();
        assert_eq!((s.p1, s.hit3, s.hit5, s.hit8, s.rr), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn gold_at_rank_four() {
        let s = rank_metrics(&ids(&[0, 1, 2, 9, 4, 5, 6, 7, 8]), &gold(&[9])).unwrap();
        assert_eq!((s.p1, s.hit3, s.hit5, s.hit8), (0.0, 0.0, 1.0, 1.0));
        assert_eq!(s.rr, 0.25);
    }

    #[test]
    fn empty_gold_is_skipped() {
        let mut acc = MetricAccumulator::default();
        acc.record("d", 0, &ids(&[0, 1]), &gold(&[]));
        acc.record("d", 0, &ids(&[0, 1]), &gold(&[1]));
        assert_eq!(acc.skipped_empty_gold, 1);
        assert_eq!(acc.overall().turns, 1);
        assert_eq!(acc.overall().mrr, 0.5);
    }

    #[test]
    fn thresholds_and_text() {
        let mut acc = MetricAccumulator::default();
        acc.record("books", 0, &ids(&[1, 0]), &gold(&[1]));
        acc.record("music", 1, &ids(&[1, 0]), &gold(&[0]));
        let mut r = EvalReport {
            split: "test".into(),
            seed: 1,
            config_hash: "ab".repeat(32),
            teacher_force: false,
            reformulation_mode: ReformulationMode::Dataset,
            conversations: 1,
            overall: acc.overall(),
            per_domain: acc.per_domain(),
            per_turn: acc.per_turn(),
            skipped_empty_gold: 0,
            resolution_failures: 0,
            reference: overall_reference(),
            thresholds: Vec::new(),
            predictions: Vec::new(),
        };
        r.check_thresholds(Some(0.5), Some(0.9));
        assert!(r.thresholds[0].passed);
        assert!(r.thresholds_passed());
        r.check_thresholds(Some(0.6), None);
        assert!(!r.thresholds_passed());
        let text = r.to_text();
        assert!(text.contains("domain books"));
        assert!(text.contains("turn 2"));
        assert!(text.contains("FAILED"));
    }
}
