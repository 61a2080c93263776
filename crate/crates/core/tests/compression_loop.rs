use std::time::Duration;

use ctxpress::compression::{
    compress, compress_batch, segment_documents, BatchItem, CompactConfig, Compressor, Condition, COMPLETE_TOKEN,
    INCOMPLETE_TOKEN,
};
use ctxpress::corpus::Document;
use ctxpress::provider::{Delayed, FnProvider, GenerationRequest, ProviderError, RequestRole, ScriptedProvider};
use proptest::prelude::*;

fn sentinel(seg: usize, i: usize) -> String {
    format!("SENTINEL_S{seg}_D{i}")
}

/// Documents whose text names the segment they will land in (j = 5).
fn sentinel_docs(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let seg = i / 5 + 1;
            Document::new(
                format!("d{i}"),
                format!("T{i}"),
                format!("filler {} filler", sentinel(seg, i)),
            )
            .unwrap()
        })
        .collect()
}

fn output(step: usize, complete: bool) -> String {
    let token = if complete { COMPLETE_TOKEN } else { INCOMPLETE_TOKEN };
    format!("Summary: context after step {step}\nEvaluation: judged at step {step}. {token}")
}

#[test]
fn call_count_matches_first_complete() {
    for complete_at in (1..=6).map(Some).chain([None]) {
        let script: Vec<String> = (1..=6).map(|t| output(t, Some(t) == complete_at)).collect();
        let p = ScriptedProvider::sequence("m", script);
        let r = compress("q", &sentinel_docs(30), &CompactConfig::default(), &p).unwrap();
        let expected = complete_at.unwrap_or(6);
        assert_eq!(p.call_count(), expected, "COMPLETE at {complete_at:?}");
        assert_eq!(r.steps.len(), expected);
        assert_eq!(r.terminated_early, complete_at.is_some_and(|t| t < 6));
        let last = if complete_at.is_some() {
            Condition::Complete
        } else {
            Condition::Incomplete
        };
        assert_eq!(r.final_evaluation().condition, last);
        assert_eq!(r.final_context, format!("context after step {expected}"));
    }
}

#[test]
fn prompts_never_see_later_segments() {
    let docs = sentinel_docs(30);
    let p = ScriptedProvider::sequence("m", (1..=6).map(|t| output(t, false)));
    compress("q", &docs, &CompactConfig::default(), &p).unwrap();
    let calls = p.calls();
    assert_eq!(calls.len(), 6);
    for (idx, call) in calls.iter().enumerate() {
        let t = idx + 1;
        for i in 0..30 {
            let seg = i / 5 + 1;
            let present = call.prompt.contains(&sentinel(seg, i));
            // only the current segment's documents appear raw
            assert_eq!(present, seg == t, "step {t} doc {i}");
        }
        if t >= 2 {
            assert!(call.prompt.contains(&format!("context after step {}", t - 1)));
        }
    }
}

#[test]
fn chaining_uses_only_the_previous_context() {
    let p = ScriptedProvider::sequence("m", (1..=6).map(|t| output(t, false)));
    let r = compress("q", &sentinel_docs(30), &CompactConfig::default(), &p).unwrap();
    for w in r.steps.windows(2) {
        assert_eq!(w[1].prev_context, w[0].compressed_context);
    }
    // the previous step's rationale is not forwarded
    for (idx, call) in p.calls().iter().enumerate().skip(1) {
        assert!(!call.prompt.contains(&format!("judged at step {idx}")));
    }
}

#[test]
fn max_iterations_and_segment_size() {
    let p = ScriptedProvider::sequence("m", (1..=6).map(|t| output(t, false)));
    let cfg = CompactConfig {
        segment_size: 10,
        ..Default::default()
    };
    let r = compress("q", &sentinel_docs(30), &cfg, &p).unwrap();
    assert_eq!(r.steps.len(), 3);
    assert_eq!(r.segment_count, 3);

    let p = ScriptedProvider::sequence("m", (1..=6).map(|t| output(t, false)));
    let cfg = CompactConfig {
        max_iterations: Some(2),
        ..Default::default()
    };
    compress("q", &sentinel_docs(30), &cfg, &p).unwrap();
    assert_eq!(p.call_count(), 2);
}

#[test]
fn repeated_runs_are_identical() {
    let run = || {
        let p = ScriptedProvider::sequence("m", (1..=6).map(|t| output(t, t == 4)));
        let mut r = compress("q", &sentinel_docs(30), &CompactConfig::default(), &p).unwrap();
        r.clear_timings();
        serde_json::to_string(&r).unwrap()
    };
    assert_eq!(run(), run());
}

/// Rule-keyed mock: query `qN` completes at step `N mod 6 + 1`; `fail` errors.
fn keyed_provider() -> FnProvider<impl Fn(&GenerationRequest<'_>) -> Result<String, ProviderError> + Send + Sync> {
    FnProvider::new("keyed", |req: &GenerationRequest<'_>| {
        let RequestRole::Compress(ctx) = req.role else {
            return Err(ProviderError::Script("not a compression call".into()));
        };
        if ctx.key == "fail" {
            return Err(ProviderError::Script("planted failure".into()));
        }
        let n: usize = ctx.key.trim_start_matches('q').parse().unwrap();
        Ok(format!(
            "Summary: {} step {}\nEvaluation: r {}",
            ctx.key,
            ctx.step,
            if ctx.step == n % 6 + 1 {
                COMPLETE_TOKEN
            } else {
                INCOMPLETE_TOKEN
            }
        ))
    })
}

fn items(keys: &[&str]) -> Vec<BatchItem> {
    keys.iter()
        .map(|k| BatchItem {
            key: k.to_string(),
            question: format!("question {k}"),
            documents: sentinel_docs(30),
        })
        .collect()
}

#[test]
fn batch_preserves_order_and_isolates_failures() {
    let compressor = Compressor::new(CompactConfig::default()).unwrap();
    // q5 takes 6 steps, q0 one, so completion order differs from input order
    let slow = Delayed::new(keyed_provider(), Duration::from_millis(3));
    let out = compress_batch(&items(&["q5", "fail", "q0"]), &compressor, &slow, 2);
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].as_ref().unwrap().final_context, "q5 step 6");
    let failure = out[1].as_ref().unwrap_err();
    assert_eq!((failure.index, failure.key.as_str()), (1, "fail"));
    assert!(failure.error.contains("planted failure"));
    assert_eq!(out[2].as_ref().unwrap().final_context, "q0 step 1");
}

#[test]
fn batch_output_is_independent_of_parallelism() {
    let compressor = Compressor::new(CompactConfig::default()).unwrap();
    let keys: Vec<String> = (0..20).map(|i| format!("q{i}")).collect();
    let keys: Vec<&str> = keys.iter().map(String::as_str).collect();
    let run = |p| {
        compress_batch(&items(&keys), &compressor, &keyed_provider(), p)
            .into_iter()
            .map(|r| {
                let mut r = r.unwrap();
                r.clear_timings();
                serde_json::to_string(&r).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn sequence_scripts_force_serial_batches() {
    let compressor = Compressor::new(CompactConfig::default()).unwrap();
    let p = ScriptedProvider::sequence("m", (1..=4).map(|t| output(t, true)));
    let out = compress_batch(&items(&["a", "b", "c", "d"]), &compressor, &p, 8);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(
            r.as_ref().unwrap().final_context,
            format!("context after step {}", i + 1)
        );
    }
}

proptest! {
    #[test]
    fn segments_partition_input(n in 1usize..=100, j in prop::sample::select(vec![1usize, 3, 5, 10])) {
        let docs = sentinel_docs(n);
        let segs = segment_documents(&docs, j).unwrap();
        prop_assert_eq!(segs.len(), n.div_ceil(j));
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.index, i + 1);
            if i + 1 < segs.len() {
                prop_assert_eq!(s.documents.len(), j);
            } else {
                prop_assert!((1..=j).contains(&s.documents.len()));
            }
        }
        let flat: Vec<&Document> = segs.iter().flat_map(|s| &s.documents).collect();
        prop_assert_eq!(flat, docs.iter().collect::<Vec<_>>());
    }
}
