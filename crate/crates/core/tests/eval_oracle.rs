use std::collections::BTreeMap;

use ctxpress::eval::{aggregate, exact_match, f1, EvalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_record(rng: &mut ChaCha8Rng, i: usize) -> EvalRecord {
    let mut r = EvalRecord::scored(format!("q{i}"), "", &["x".to_string()]);
    r.em = rng.random_range(0..=1);
    r.f1 = if r.em == 1 { 1.0 } else { rng.random_range(0.0..1.0) };
    let compressed = rng.random_bool(0.8);
    if compressed {
        let src = rng.random_range(100..5000);
        let cmp = rng.random_range(1..400);
        r.source_tokens = Some(src);
        r.compressed_tokens = Some(cmp);
        r.compression_rate = Some(src as f64 / cmp as f64);
        r.steps = rng.random_range(1..=6);
        r.step_context_tokens = (0..r.steps).map(|_| rng.random_range(1..300)).collect();
        r.terminated_early = Some(r.steps < 6 && rng.random_bool(0.7));
    }
    if rng.random_bool(0.5) {
        r.recall_hit = Some(rng.random_range(0..=1));
    }
    r.compressor_input_tokens = rng.random_range(0..10_000);
    r.reader_input_tokens = rng.random_range(0..3_000);
    r.compression_time = rng.random_range(0.0..3.0);
    r.reading_time = rng.random_range(0.0..1.0);
    r.cost = rng.random_range(0.0..0.1);
    r
}

#[test]
fn aggregate_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..30 {
        let n = rng.random_range(1..=100);
        let records: Vec<EvalRecord> = (0..n).map(|i| random_record(&mut rng, i)).collect();
        let rep = aggregate(&records).unwrap();
        let nf = n as f64;
        let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-9, "trial {trial}: {a} vs {b}");

        close(rep.em, 100.0 * records.iter().map(|r| r.em as f64).sum::<f64>() / nf);
        close(rep.f1, 100.0 * records.iter().map(|r| r.f1).sum::<f64>() / nf);
        close(rep.mean_steps, records.iter().map(|r| r.steps as f64).sum::<f64>() / nf);
        close(
            rep.mean_reading_time,
            records.iter().map(|r| r.reading_time).sum::<f64>() / nf,
        );
        close(
            rep.mean_total_time,
            records.iter().map(|r| r.reading_time + r.compression_time).sum::<f64>() / nf,
        );
        close(rep.total_cost, records.iter().map(|r| r.cost).sum());

        let rates: Vec<f64> = records.iter().filter_map(|r| r.compression_rate).collect();
        match rep.compression_rate {
            Some(v) => close(v, rates.iter().sum::<f64>() / rates.len() as f64),
            None => assert!(rates.is_empty()),
        }
        let recall: Vec<f64> = records.iter().filter_map(|r| r.recall_hit.map(f64::from)).collect();
        if let Some(v) = rep.recall {
            close(v, 100.0 * recall.iter().sum::<f64>() / recall.len() as f64);
        }

        let mut hist = BTreeMap::new();
        for r in &records {
            *hist.entry(r.steps).or_insert(0usize) += 1;
        }
        assert_eq!(rep.termination_histogram, hist);
        assert_eq!(rep.termination_histogram.values().sum::<usize>(), n);

        for (&t, &avg) in &rep.avg_context_tokens_per_step {
            let lens: Vec<f64> = records
                .iter()
                .filter(|r| r.steps >= t)
                .map(|r| r.step_context_tokens[t - 1] as f64)
                .collect();
            close(avg, lens.iter().sum::<f64>() / lens.len() as f64);
        }
    }
}

#[test]
fn single_record_report_equals_record() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_record(&mut rng, 0);
    let rep = aggregate(std::slice::from_ref(&r)).unwrap();
    assert_eq!(rep.em, 100.0 * r.em as f64);
    assert_eq!(rep.f1, 100.0 * r.f1);
    assert_eq!(rep.compression_rate, r.compression_rate);
    assert_eq!(rep.total_cost, r.cost);
}

#[test]
fn em_implies_f1_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = [
        "the", "a", "Obama", "obama", "Paris", "paris,", "tower", "Eiffel", "!", "42",
    ];
    for _ in 0..1000 {
        let pick = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..4);
            (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p = pick(&mut rng);
        let g = vec![pick(&mut rng)];
        if exact_match(&p, &g) == 1 {
            assert_eq!(f1(&p, &g), 1.0, "{p:?} vs {g:?}");
        }
    }
}
