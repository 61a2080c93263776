//! QA metrics and run aggregation.
//!
//! Answer normalization follows the usual SQuAD recipe: lowercase, strip ASCII
//! punctuation, drop the articles `a`/`an`/`the`, collapse whitespace. EM and
//! F1 take the max over all gold answers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, QaExample};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("compression rate undefined: compressed token count is zero")]
    UndefinedRate,
    #[error("no price configured for provider {0:?}")]
    UnknownProvider(String),
    #[error("cannot aggregate an empty record set")]
    EmptyRecords,
}

pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether any gold answer occurs in `text` on token boundaries, after both
/// sides are normalized. An answer that normalizes to nothing never matches.
pub fn contains_answer(text: &str, answers: &[String]) -> bool {
    let haystack = format!(" {} ", normalize_answer(text));
    answers.iter().any(|a| {
        let needle = normalize_answer(a);
        !needle.is_empty() && haystack.contains(&format!(" {needle} "))
    })
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == pred))
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return if pred_tokens.is_empty() && gold_tokens.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1 over multisets, maxed over golds.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| token_f1(prediction, g)).fold(0.0, f64::max)
}

pub fn compression_rate(source_tokens: usize, compressed_tokens: usize) -> Result<f64, EvalError> {
    if compressed_tokens == 0 {
        return Err(EvalError::UndefinedRate);
    }
    Ok(source_tokens as f64 / compressed_tokens as f64)
}

/// 1 if a gold document (when the example lists any) or an answer-bearing
/// document appears among the first `k`.
pub fn recall_at_k(docs: &[Document], example: &QaExample, k: usize) -> u8 {
    let top = &docs[..k.min(docs.len())];
    match example.gold_doc_ids.as_deref() {
        Some(ids) if !ids.is_empty() => u8::from(top.iter().any(|d| ids.contains(&d.id))),
        _ => u8::from(top.iter().any(|d| contains_answer(&d.render(), &example.answers))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

/// Per-provider token prices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub prices: BTreeMap<String, Pricing>,
}

impl CostModel {
    pub fn with_price(mut self, provider: impl Into<String>, pricing: Pricing) -> Self {
        assert!(
            pricing.input_per_1k >= 0.0 && pricing.output_per_1k >= 0.0,
            "prices must be non-negative"
        );
        self.prices.insert(provider.into(), pricing);
        self
    }
}

pub fn estimate_cost(
    input_tokens: usize,
    output_tokens: usize,
    model: &CostModel,
    provider: &str,
) -> Result<f64, EvalError> {
    let p = model
        .prices
        .get(provider)
        .ok_or_else(|| EvalError::UnknownProvider(provider.to_string()))?;
    Ok(input_tokens as f64 / 1000.0 * p.input_per_1k + output_tokens as f64 / 1000.0 * p.output_per_1k)
}

/// Per-example evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    /// `None` when the context mode involves no compression.
    pub compression_rate: Option<f64>,
    pub source_tokens: Option<usize>,
    pub compressed_tokens: Option<usize>,
    pub recall_hit: Option<u8>,
    /// Number of compression steps executed; 0 when nothing was compressed.
    pub steps: usize,
    /// Token length of C_t for t = 1..=steps.
    pub step_context_tokens: Vec<usize>,
    pub terminated_early: Option<bool>,
    pub compressor_input_tokens: usize,
    pub compressor_output_tokens: usize,
    pub reader_input_tokens: usize,
    pub reader_output_tokens: usize,
    /// Seconds.
    pub compression_time: f64,
    /// Seconds.
    pub reading_time: f64,
    pub cost: f64,
}

impl EvalRecord {
    /// A record with only the answer metrics filled in.
    pub fn scored(example_id: impl Into<String>, prediction: impl Into<String>, golds: &[String]) -> Self {
        let prediction = prediction.into();
        EvalRecord {
            example_id: example_id.into(),
            em: exact_match(&prediction, golds),
            f1: f1(&prediction, golds),
            prediction,
            compression_rate: None,
            source_tokens: None,
            compressed_tokens: None,
            recall_hit: None,
            steps: 0,
            step_context_tokens: Vec::new(),
            terminated_early: None,
            compressor_input_tokens: 0,
            compressor_output_tokens: 0,
            reader_input_tokens: 0,
            reader_output_tokens: 0,
            compression_time: 0.0,
            reading_time: 0.0,
            cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    /// Percent.
    pub em: f64,
    /// Percent.
    pub f1: f64,
    /// Percent, over records that carry a recall judgement.
    pub recall: Option<f64>,
    /// Mean of per-query ratios (headline figure).
    pub compression_rate: Option<f64>,
    /// Total source tokens divided by total compressed tokens.
    pub compression_rate_total: Option<f64>,
    pub mean_source_tokens: Option<f64>,
    pub mean_compressed_tokens: Option<f64>,
    pub mean_steps: f64,
    /// Percent of compressed queries that stopped before the last segment.
    pub early_termination: Option<f64>,
    /// Queries per final step; step 0 collects uncompressed queries.
    pub termination_histogram: BTreeMap<usize, usize>,
    /// Mean C_t length over the queries that reached step t.
    pub avg_context_tokens_per_step: BTreeMap<usize, f64>,
    pub mean_compressor_input_tokens: f64,
    pub mean_compressor_output_tokens: f64,
    pub mean_reader_input_tokens: f64,
    pub mean_reader_output_tokens: f64,
    /// Seconds.
    pub mean_compression_time: f64,
    /// Seconds.
    pub mean_reading_time: f64,
    /// Seconds.
    pub mean_total_time: f64,
    pub total_cost: f64,
    pub mean_cost: f64,
}

fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(records: &[EvalRecord]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let n = records.len() as f64;
    let avg = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;

    let compressed: Vec<&EvalRecord> = records.iter().filter(|r| r.compression_rate.is_some()).collect();
    let totals: Option<(usize, usize)> = {
        let with_tokens: Vec<(usize, usize)> = records
            .iter()
            .filter_map(|r| Some((r.source_tokens?, r.compressed_tokens?)))
            .collect();
        (!with_tokens.is_empty()).then(|| with_tokens.iter().fold((0, 0), |(s, c), (rs, rc)| (s + rs, c + rc)))
    };

    let mut histogram = BTreeMap::new();
    let mut per_step: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        *histogram.entry(r.steps).or_insert(0) += 1;
        for (i, &len) in r.step_context_tokens.iter().enumerate() {
            let e = per_step.entry(i + 1).or_insert((0.0, 0));
            e.0 += len as f64;
            e.1 += 1;
        }
    }

    let total_cost: f64 = records.iter().map(|r| r.cost).sum();
    Ok(EvalReport {
        count: records.len(),
        em: 100.0 * avg(&|r| f64::from(r.em)),
        f1: 100.0 * avg(&|r| r.f1),
        recall: mean(records.iter().filter_map(|r| r.recall_hit.map(f64::from))).map(|m| 100.0 * m),
        compression_rate: mean(compressed.iter().filter_map(|r| r.compression_rate)),
        compression_rate_total: totals.and_then(|(s, c)| compression_rate(s, c).ok()),
        mean_source_tokens: mean(records.iter().filter_map(|r| r.source_tokens.map(|v| v as f64))),
        mean_compressed_tokens: mean(records.iter().filter_map(|r| r.compressed_tokens.map(|v| v as f64))),
        mean_steps: avg(&|r| r.steps as f64),
        early_termination: mean(
            records
                .iter()
                .filter_map(|r| r.terminated_early.map(|b| if b { 1.0 } else { 0.0 })),
        )
        .map(|m| 100.0 * m),
        termination_histogram: histogram,
        avg_context_tokens_per_step: per_step
            .into_iter()
            .map(|(t, (sum, cnt))| (t, sum / cnt as f64))
            .collect(),
        mean_compressor_input_tokens: avg(&|r| r.compressor_input_tokens as f64),
        mean_compressor_output_tokens: avg(&|r| r.compressor_output_tokens as f64),
        mean_reader_input_tokens: avg(&|r| r.reader_input_tokens as f64),
        mean_reader_output_tokens: avg(&|r| r.reader_output_tokens as f64),
        mean_compression_time: avg(&|r| r.compression_time),
        mean_reading_time: avg(&|r| r.reading_time),
        mean_total_time: avg(&|r| r.compression_time + r.reading_time),
        total_cost,
        mean_cost: total_cost / n,
    })
}

impl EvalReport {
    /// Aligned two-column table; percentages to one decimal.
    pub fn to_table(&self) -> String {
        fn opt(v: Option<f64>, digits: usize) -> String {
            v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
        }
        let mut rows: Vec<(String, String)> = vec![
            ("queries".into(), self.count.to_string()),
            ("EM (%)".into(), format!("{:.1}", self.em)),
            ("F1 (%)".into(), format!("{:.1}", self.f1)),
            ("recall (%)".into(), opt(self.recall, 1)),
            ("compression rate (mean)".into(), opt(self.compression_rate, 2)),
            ("compression rate (total)".into(), opt(self.compression_rate_total, 2)),
            ("source tokens (mean)".into(), opt(self.mean_source_tokens, 1)),
            ("compressed tokens (mean)".into(), opt(self.mean_compressed_tokens, 1)),
            ("steps (mean)".into(), format!("{:.2}", self.mean_steps)),
            ("early termination (%)".into(), opt(self.early_termination, 1)),
        ];
        for (step, count) in &self.termination_histogram {
            rows.push((format!("terminated at step {step}"), count.to_string()));
        }
        for (step, len) in &self.avg_context_tokens_per_step {
            rows.push((format!("C_t tokens at step {step}"), format!("{len:.1}")));
        }
        rows.extend([
            (
                "compression time (s, mean)".into(),
                format!("{:.4}", self.mean_compression_time),
            ),
            (
                "reading time (s, mean)".into(),
                format!("{:.4}", self.mean_reading_time),
            ),
            ("total time (s, mean)".into(), format!("{:.4}", self.mean_total_time)),
            ("cost (total)".into(), format!("{:.6}", self.total_cost)),
            ("cost (mean)".into(), format!("{:.6}", self.mean_cost)),
        ]);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer("a  b"), "b");
        assert_eq!(normalize_answer("42"), "42");
        assert_eq!(normalize_answer("  An apple,  THE pie "), "apple pie");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("The Eiffel Tower", &g(&["eiffel tower"])), 1);
        assert_eq!(exact_match("Paris, France", &g(&["Paris"])), 0);
        assert_eq!(exact_match("", &g(&["x"])), 0);
    }

    #[test]
    fn f1_examples() {
        assert!((f1("Barack Obama", &g(&["Obama"])) - 2.0 / 3.0).abs() < 1e-4);
        assert_eq!(f1("the Obama", &g(&["Obama"])), 1.0);
        assert_eq!(f1("red car", &g(&["blue bike"])), 0.0);
        assert_eq!(f1("", &g(&["the"])), 1.0);
        assert_eq!(f1("", &g(&["x"])), 0.0);
        // multiset overlap: the single gold "new" matches once
        assert!((f1("new new york", &g(&["new york"])) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(compression_rate(3000, 200).unwrap(), 15.0);
        assert_eq!(compression_rate(100, 100).unwrap(), 1.0);
        assert_eq!(compression_rate(0, 10).unwrap(), 0.0);
        assert_eq!(compression_rate(10, 0), Err(EvalError::UndefinedRate));
    }

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, "", text).unwrap()
    }

    #[test]
    fn recall_examples() {
        let docs: Vec<Document> = (1..=8)
            .map(|i| {
                doc(
                    &format!("d{i}"),
                    if i == 3 || i == 7 {
                        "the answer is Paris"
                    } else {
                        "nothing"
                    },
                )
            })
            .collect();
        let ex = QaExample {
            id: "q".into(),
            question: "?".into(),
            answers: g(&["Paris"]),
            gold_doc_ids: None,
        };
        assert_eq!(recall_at_k(&docs, &ex, 5), 1);
        assert_eq!(recall_at_k(&docs, &ex, 2), 0);

        let late: Vec<Document> = (1..=8)
            .map(|i| doc(&format!("d{i}"), if i == 7 { "Paris" } else { "nothing" }))
            .collect();
        assert_eq!(recall_at_k(&late, &ex, 5), 0);

        let with_ids = QaExample {
            gold_doc_ids: Some(g(&["d2"])),
            ..ex.clone()
        };
        assert_eq!(recall_at_k(&late, &with_ids, 2), 1);
        assert_eq!(recall_at_k(&late, &with_ids, 1), 0);
    }

    #[test]
    fn cost_examples() {
        let m = CostModel::default()
            .with_price(
                "a",
                Pricing {
                    input_per_1k: 0.5,
                    output_per_1k: 9.0,
                },
            )
            .with_price(
                "free",
                Pricing {
                    input_per_1k: 0.0,
                    output_per_1k: 0.0,
                },
            )
            .with_price(
                "b",
                Pricing {
                    input_per_1k: 1.0,
                    output_per_1k: 2.0,
                },
            );
        assert_eq!(estimate_cost(1000, 0, &m, "a").unwrap(), 0.5);
        assert_eq!(estimate_cost(1234, 99, &m, "free").unwrap(), 0.0);
        assert!((estimate_cost(500, 500, &m, "b").unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(
            estimate_cost(1, 1, &m, "zz"),
            Err(EvalError::UnknownProvider("zz".into()))
        );
    }

    #[test]
    fn aggregate_examples() {
        let golds = g(&["x"]);
        let a = EvalRecord::scored("1", "x", &golds);
        let b = EvalRecord::scored("2", "y", &golds);
        let rep = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(rep.em, 50.0);
        assert_eq!(aggregate(&[]), Err(EvalError::EmptyRecords));

        let mut single = a;
        single.compression_rate = Some(12.5);
        single.source_tokens = Some(250);
        single.compressed_tokens = Some(20);
        single.steps = 2;
        single.step_context_tokens = vec![10, 20];
        single.reading_time = 0.25;
        single.cost = 0.125;
        let rep = aggregate(std::slice::from_ref(&single)).unwrap();
        assert_eq!(rep.em, 100.0);
        assert_eq!(rep.f1, 100.0);
        assert_eq!(rep.compression_rate, Some(12.5));
        assert_eq!(rep.mean_source_tokens, Some(250.0));
        assert_eq!(rep.mean_reading_time, 0.25);
        assert_eq!(rep.total_cost, 0.125);
        assert_eq!(rep.termination_histogram, BTreeMap::from([(2, 1)]));
        assert_eq!(rep.avg_context_tokens_per_step, BTreeMap::from([(1, 10.0), (2, 20.0)]));
    }

    #[test]
    fn histogram_counts_final_steps() {
        let golds = g(&["x"]);
        let recs: Vec<EvalRecord> = [1usize, 1, 3]
            .iter()
            .map(|&s| EvalRecord {
                steps: s,
                ..EvalRecord::scored("e", "x", &golds)
            })
            .collect();
        let rep = aggregate(&recs).unwrap();
        assert_eq!(rep.termination_histogram, BTreeMap::from([(1, 2), (3, 1)]));
        assert_eq!(rep.termination_histogram.values().sum::<usize>(), rep.count);
    }

    #[test]
    fn table_has_one_decimal_percentages() {
        let golds = g(&["x"]);
        let rep = aggregate(&[
            EvalRecord::scored("1", "x", &golds),
            EvalRecord::scored("2", "y", &golds),
            EvalRecord::scored("3", "y", &golds),
        ])
        .unwrap();
        let table = rep.to_table();
        assert!(table.contains("EM (%)"));
        assert!(table.contains("33.3"));
        assert!(table.contains("n/a"));
    }

    proptest! {
        #[test]
        fn em_implies_full_f1(p in "[a-c ]{0,12}", gold in prop::collection::vec("[a-c ]{0,12}", 1..4)) {
            if exact_match(&p, &gold) == 1 {
                prop_assert_eq!(f1(&p, &gold), 1.0);
            }
        }

        #[test]
        fn f1_symmetric_for_single_gold(a in "[a-d ]{0,16}", b in "[a-d ]{0,16}") {
            let ab = f1(&a, std::slice::from_ref(&b));
            let ba = f1(&b, std::slice::from_ref(&a));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn rate_reciprocal(a in 1usize..100_000, b in 1usize..100_000) {
            let r = compression_rate(a, b).unwrap() * compression_rate(b, a).unwrap();
            prop_assert!((r - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone_in_k(hits in prop::collection::vec(any::<bool>(), 1..20)) {
            let docs: Vec<Document> = hits
                .iter()
                .enumerate()
                .map(|(i, &h)| doc(&format!("d{i}"), if h { "gold here" } else { "other" }))
                .collect();
            let ex = QaExample { id: "q".into(), question: "?".into(), answers: g(&["gold"]), gold_doc_ids: None };
            let mut prev = 0;
            for k in 1..=docs.len() + 2 {
                let r = recall_at_k(&docs, &ex, k);
                prop_assert!(r >= prev);
                prev = r;
            }
        }
    }
}
