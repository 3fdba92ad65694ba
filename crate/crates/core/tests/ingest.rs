mod common;

use common::*;
use gwa_core::ingest::{
    ingest_stream, offline_series, online_series, EngineConfig, ReferencePoint, Trace,
};
use gwa_core::moments::EpochFlag;
use gwa_core::trace::{
    read_alignment_rows, StepBatch, TraceError, TraceHeader, TraceReader, TraceWriter,
    WeightSection, FLAG_BIAS_PRESENT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn header(d: u32, c: u32, b: u32, k: u32, flags: u16) -> TraceHeader {
    TraceHeader {
        latent_dim: d,
        classes: c,
        dataset_size: (b * k) as u64,
        batch_size: b,
        steps_per_epoch: k,
        flags,
    }
}

/// Random trace; `drift` scales the per-step weight perturbation.
fn random_trace(seed: u64, epochs: u32, drift: f32) -> Vec<u8> {
    let (d, c, b, k) = (6usize, 3usize, 16usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f32> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tw = TraceWriter::new(Vec::new(), header(d as u32, c as u32, b as u32, k as u32, 0)).unwrap();
    for e in 0..epochs {
        for s in 0..k {
            let ids: Vec<u64> = (0..b).map(|i| (s * b + i) as u64).collect();
            let lat: Vec<f32> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut probs = Vec::new();
            for _ in 0..b {
                let raw: Vec<f32> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                let sum: f32 = raw.iter().sum();
                probs.extend(raw.iter().map(|p| p / sum));
            }
            let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..c as u32)).collect();
            tw.write_step(e, s as u32, &w, None, StepBatch {
                sample_ids: &ids,
                latents: &lat,
                probs: &probs,
                labels: &labels,
            })
            .unwrap();
            if drift != 0.0 {
                w.iter_mut().for_each(|v| *v += drift * rng.random_range(-1.0..1.0));
            }
        }
    }
    tw.write_step(epochs, 0, &w, None, StepBatch::empty()).unwrap();
    tw.finish().unwrap()
}

#[test]
fn single_step_two_samples_matches_oracle() {
    let w = [0.5f32, -0.25, 1.0, 0.75, 0.0, -0.5];
    let lat = [1.0f32, 2.0, -0.5, 0.25, -1.0, 0.5];
    let probs = [0.25f32, 0.75, 0.5, 0.5];
    let labels = [0u32, 1];
    let mut tw = TraceWriter::new(Vec::new(), header(3, 2, 2, 1, 0)).unwrap();
    tw.write_step(0, 0, &w, None, StepBatch {
        sample_ids: &[100, 101],
        latents: &lat,
        probs: &probs,
        labels: &labels,
    })
    .unwrap();
    let bytes = tw.finish().unwrap();

    let weights: Vec<f64> = w.iter().map(|&x| x as f64).collect();
    let gammas: Vec<f64> = (0..2)
        .map(|i| {
            let z: Vec<f64> = lat[i * 3..i * 3 + 3].iter().map(|&x| x as f64).collect();
            let p: Vec<f64> = probs[i * 2..i * 2 + 2].iter().map(|&x| x as f64).collect();
            flat_cosine(&outer(&residual(&p, labels[i] as usize), &z), &weights)
        })
        .collect();
    let [m1, m2, _, m4] = two_pass(&gammas);
    let kurt = m4 / (m2 * m2) - 3.0;

    // Two points always have excess kurtosis −2, so the default beta is unusable.
    let out = ingest_stream(&bytes[..], &EngineConfig::default(), None).unwrap();
    let e = &out.series.epochs[0];
    assert!((kurt + 2.0).abs() < 1e-9);
    assert!(e.has(EpochFlag::Unstable) && e.gwa.is_none());

    let cfg = EngineConfig { beta: 2.5, ..EngineConfig::default() };
    let out = ingest_stream(&bytes[..], &cfg, None).unwrap();
    let e = &out.series.epochs[0];
    let expected = m1 / (kurt + 2.5);
    assert!((e.gwa.unwrap() - expected).abs() < 1e-12);
    assert!(e.has(EpochFlag::TooFewSamples));
    assert_eq!((e.count, e.excluded), (2, 0));
}

#[test]
fn ingestion_is_deterministic() {
    let bytes = random_trace(1, 3, 0.01);
    let run = || {
        let mut rows = Vec::new();
        let out = ingest_stream(&bytes[..], &EngineConfig::default(), Some(&mut rows)).unwrap();
        let mut jsonl = Vec::new();
        out.series.write_jsonl(&mut jsonl).unwrap();
        (rows, jsonl)
    };
    let (r1, j1) = run();
    let (r2, j2) = run();
    assert_eq!(r1, r2);
    assert_eq!(j1, j2);
    let rows = read_alignment_rows(&r1[..]).unwrap();
    assert_eq!(rows.len(), 3 * 64);
}

#[test]
fn frozen_weights_make_online_equal_offline() {
    let bytes = random_trace(2, 4, 0.0);
    let trace = Trace::read(&bytes[..]).unwrap();
    let cfg = EngineConfig::default();
    let online = online_series(&trace, &cfg).unwrap();
    let streamed = ingest_stream(&bytes[..], &cfg, None).unwrap().series;
    assert_eq!(online, streamed);
    for point in [ReferencePoint::Start, ReferencePoint::Mid, ReferencePoint::End] {
        let offline = offline_series(&trace, point, &cfg).unwrap();
        for (a, b) in online.epochs.iter().zip(&offline.epochs) {
            assert!((a.gwa.unwrap() - b.gwa.unwrap()).abs() < 1e-9);
            assert!((a.m1 - b.m1).abs() < 1e-9);
        }
    }
    // Deduplication collapses every snapshot after the first.
    assert!(trace.steps[1..]
        .iter()
        .all(|s| matches!(s.weights, WeightSection::SameAsPrevious { .. })));
}

#[test]
fn drifting_weights_separate_online_from_offline() {
    let bytes = random_trace(3, 2, 0.2);
    let trace = Trace::read(&bytes[..]).unwrap();
    let cfg = EngineConfig::default();
    let online = online_series(&trace, &cfg).unwrap();
    let offline = offline_series(&trace, ReferencePoint::Start, &cfg).unwrap();
    assert_ne!(online.epochs[0].m1, offline.epochs[0].m1);
}

#[test]
fn end_reference_needs_a_trailing_snapshot() {
    let mut bytes = random_trace(4, 1, 0.1);
    // Drop the trailing snapshot-only record (prefix 21 bytes + 18 weights).
    bytes.truncate(bytes.len() - (21 + 18 * 4));
    let trace = Trace::read(&bytes[..]).unwrap();
    assert!(matches!(
        trace.reference_snapshot(0, ReferencePoint::End),
        Err(TraceError::MissingReference { .. })
    ));
    assert!(trace.reference_snapshot(0, ReferencePoint::Mid).is_ok());
}

#[test]
fn truncated_stream_fails_with_offset() {
    let bytes = random_trace(5, 1, 0.1);
    let err = ingest_stream(&bytes[..bytes.len() - 3], &EngineConfig::default(), None).unwrap_err();
    assert!(matches!(err, TraceError::TruncatedRecord { offset } if offset > 32));
}

#[test]
fn retained_scores_pass_the_cross_check() {
    let bytes = random_trace(6, 3, 0.05);
    let cfg = EngineConfig { retain_scores: true, ..EngineConfig::default() };
    let a = ingest_stream(&bytes[..], &cfg, None).unwrap();
    let b = ingest_stream(&bytes[..], &EngineConfig::default(), None).unwrap();
    assert_eq!(a.series, b.series);
}

#[test]
fn projection_identity_dimension_changes_nothing_structural() {
    let bytes = random_trace(7, 2, 0.05);
    let mut cfg = EngineConfig::default();
    cfg.projection.enabled = true;
    cfg.projection.dim = 4;
    let out = ingest_stream(&bytes[..], &cfg, None).unwrap();
    assert_eq!(out.series.len(), 2);
    cfg.projection.dim = 64;
    assert!(ingest_stream(&bytes[..], &cfg, None).is_err());
}

#[test]
fn bias_flag_round_trips_and_feeds_alignment() {
    let mut tw = TraceWriter::new(Vec::new(), header(2, 2, 1, 1, FLAG_BIAS_PRESENT)).unwrap();
    tw.write_step(0, 0, &[1.0, 0.0, 0.0, 1.0], Some(&[0.5, -0.5]), StepBatch {
        sample_ids: &[1],
        latents: &[1.0, 0.0],
        probs: &[0.5, 0.5],
        labels: &[0],
    })
    .unwrap();
    let bytes = tw.finish().unwrap();
    let mut r = TraceReader::new(&bytes[..]).unwrap();
    let rec = r.next_step().unwrap().unwrap();
    assert!(matches!(rec.weights, WeightSection::Full { bias: Some(ref b), .. } if b == &[0.5, -0.5]));

    let mut rows = Vec::new();
    let mut cfg = EngineConfig::default();
    cfg.alignment.include_bias = true;
    ingest_stream(&bytes[..], &cfg, Some(&mut rows)).unwrap();
    let row = read_alignment_rows(&rows[..]).unwrap()[0];
    // Augmented: z = (1, 0, 1), W = [[1, 0, .5], [0, 1, -.5]], a = (.5, -.5).
    let expected = flat_cosine(&outer(&[0.5, -0.5], &[1.0, 0.0, 1.0]), &[1.0, 0.0, 0.5, 0.0, 1.0, -0.5]);
    assert!((row.gamma as f64 - expected).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_records_parse_back_exactly(
        d in 1usize..6, c in 1usize..5, n in 0usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..c * d).map(|_| rng.random()).collect();
        let ids: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let lat: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1e6..1e6)).collect();
        let probs: Vec<f32> = (0..n * c).map(|_| rng.random()).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let mut tw = TraceWriter::new(Vec::new(), header(d as u32, c as u32, 8, 1, 0)).unwrap();
        let batch = StepBatch { sample_ids: &ids, latents: &lat, probs: &probs, labels: &labels };
        tw.write_step(0, 0, &w, None, batch).unwrap();
        tw.write_step(0, 1, &w, None, batch).unwrap();
        let bytes = tw.finish().unwrap();
        let mut r = TraceReader::new(&bytes[..]).unwrap();
        for step in 0..2 {
            let rec = r.next_step().unwrap().unwrap();
            prop_assert_eq!(rec.step, step);
            prop_assert_eq!(&rec.sample_ids, &ids);
            prop_assert_eq!(rec.latents.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            lat.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&rec.probs, &probs);
            prop_assert_eq!(&rec.labels, &labels);
        }
        prop_assert!(r.next_step().unwrap().is_none());
    }
}
