use imagerep_core::estimator::PredictOptions;
use imagerep_core::harness::{
    bootstrap_ci, emit_report, parse_report, recount, run_coverage, CoverageConfig, MaterialSource, Method,
    ReportFormat,
};
use imagerep_core::synthgen::{generate, BooleanSpec};
use imagerep_core::uncertainty::CalibrationModel;
use imagerep_core::Error;

fn config(sizes: Vec<usize>, n: usize, confidence: f64) -> CoverageConfig {
    CoverageConfig {
        sizes,
        samples_per_size: n,
        methods: vec![Method::Imagerep, Method::ImagerepNoCorrection, Method::Subdivision],
        confidence,
        seed: 17,
        min_spacing: None,
        predict: PredictOptions::default(),
    }
}

fn circles() -> MaterialSource {
    MaterialSource::Synthetic {
        templates: vec![BooleanSpec::circles(2, 0, 2.0, 0.5, 0), BooleanSpec::circles(2, 0, 3.0, 0.3, 0)],
    }
}

#[test]
fn report_round_trips_and_recounts() {
    let model = CalibrationModel::builtin(2).unwrap();
    let cfg = config(vec![64, 96], 12, 0.95);
    let report = run_coverage(&circles(), &cfg, &model).unwrap();
    assert_eq!(report.records.len(), 2 * 12 * 3);
    let json = emit_report(&report, ReportFormat::Json).unwrap();
    assert_eq!(parse_report(&json).unwrap(), report);
    let again = recount(&report.records, &cfg.methods, &cfg.sizes, cfg.confidence);
    assert_eq!(again, report.results);
    for r in &report.results {
        assert!(r.hits <= r.total);
        assert_eq!(r.rate, r.hits as f64 / r.total as f64);
        assert_eq!(r.per_size.iter().map(|s| s.total).sum::<usize>(), r.total);
    }
    // Replay: every hit flag follows from the stored numbers.
    for row in &report.records {
        let replay = row.half_width.is_some_and(|h| (row.truth - row.phi_obs).abs() <= h);
        assert_eq!(replay, row.hit);
    }
    let csv = emit_report(&report, ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("imagerep,")).count(), 3);
    assert!(csv.lines().count() > report.records.len());
}

#[test]
fn empty_report_is_valid() {
    let report = imagerep_core::harness::CoverageReport {
        source: "none".into(),
        truth: String::new(),
        config: config(vec![], 0, 0.95),
        calibration: String::new(),
        results: vec![],
        records: vec![],
        warnings: vec![],
    };
    let json = emit_report(&report, ReportFormat::Json).unwrap();
    assert_eq!(parse_report(&json).unwrap(), report);
    let csv = emit_report(&report, ReportFormat::Csv).unwrap();
    assert!(csv.starts_with("method,"));
}

#[test]
fn zero_model_equals_no_correction() {
    let cfg = config(vec![64], 16, 0.95);
    let report = run_coverage(&circles(), &cfg, &CalibrationModel::zero(2)).unwrap();
    let full = report.records.iter().filter(|r| r.method == Method::Imagerep);
    let bare = report.records.iter().filter(|r| r.method == Method::ImagerepNoCorrection);
    for (a, b) in full.zip(bare) {
        assert_eq!(a.half_width, b.half_width);
        assert_eq!(a.hit, b.hit);
    }
}

#[test]
fn very_high_confidence_nearly_always_covers() {
    let cfg = config(vec![96], 50, 0.999);
    let report = run_coverage(&circles(), &cfg, &CalibrationModel::builtin(2).unwrap()).unwrap();
    assert!(report.results[0].rate >= 0.96, "{}", report.results[0].rate);
}

#[test]
fn large_image_source() {
    let big = generate(&BooleanSpec::circles(2, 300, 3.0, 0.4, 2)).unwrap();
    let src = MaterialSource::LargeImage { image: big.clone(), name: "big".into() };
    let mut cfg = config(vec![64, 96], 6, 0.95);
    cfg.min_spacing = Some(20);
    let a = run_coverage(&src, &cfg, &CalibrationModel::builtin(2).unwrap()).unwrap();
    let b = run_coverage(&src, &cfg, &CalibrationModel::builtin(2).unwrap()).unwrap();
    assert_eq!(emit_report(&a, ReportFormat::Json).unwrap(), emit_report(&b, ReportFormat::Json).unwrap());
    assert!(a.records.iter().all(|r| r.origin.is_some()));
    let too_big = config(vec![128], 2, 0.95);
    let e = run_coverage(&MaterialSource::LargeImage { image: big, name: "big".into() }, &too_big, &CalibrationModel::builtin(2).unwrap())
        .unwrap_err();
    assert!(matches!(e, Error::SourceTooSmall { source_edge: 300, sample_edge: 128 }));
}

#[test]
fn bootstrap_width_shrinks_with_more_samples() {
    // Widths scale as 1/sqrt(n): doubling n narrows by √2, quadrupling halves.
    let pattern = |n: usize| (0..n).map(|i| i % 20 != 0).collect::<Vec<bool>>();
    let width = |n: usize| {
        let (lo, hi) = bootstrap_ci(&pattern(n), 4000, 0.95, 11);
        hi - lo
    };
    let (w1, w2, w4) = (width(400), width(800), width(1600));
    let ideal = std::f64::consts::SQRT_2;
    assert!(((w1 / w2) - ideal).abs() / ideal < 0.3, "{w1} {w2}");
    assert!(((w1 / w4) - 2.0).abs() / 2.0 < 0.3, "{w1} {w4}");
}
