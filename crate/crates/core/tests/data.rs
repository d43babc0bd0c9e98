use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simplex_flow::data::*;
use simplex_flow::density::{empirical_distribution, kl_divergence};
use simplex_flow::dequant::sample_symmetric_dirichlet;
use simplex_flow::experiments::*;
use simplex_flow::flow::TrainData;
use simplex_flow::geometry::{stick_breaking_inv, EuclideanPoint};
use simplex_flow::Error;

/// Dark-cell test written out from the board description: 4x4 cells of width
/// 2 on [-4, 4]^2, the lower-left cell dark.
fn dark_oracle(u: f64, v: f64) -> bool {
    if !(-4.0..4.0).contains(&u) || !(-4.0..4.0).contains(&v) {
        return false;
    }
    let i = ((u + 4.0) / 2.0) as i64;
    let j = ((v + 4.0) / 2.0) as i64;
    (i + j) % 2 == 0
}

#[test]
fn board_matches_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let (u, v) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        assert_eq!(checkerboard_is_dark(u, v), dark_oracle(u, v), "({u}, {v})");
    }
    let pts = gen_checkerboard_plane(50_000, &mut rng);
    assert!(pts.iter().all(|p| dark_oracle(p[0], p[1])));
    let lower_left = pts.iter().filter(|p| p[0] < -2.0 && p[1] < -2.0).count() as f64 / pts.len() as f64;
    assert!((lower_left - 0.125).abs() < 0.01);
}

#[test]
fn uniform_simplex_mass_on_dark_cells_matches_planar_integral() {
    // P(x on a dark cell) for x uniform on the 2-simplex equals the integral
    // over dark cells of 2 * x1 x2 x3, the uniform density pushed to the plane
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 400_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let (u, v) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        if dark_oracle(u, v) {
            let x = stick_breaking_inv(&EuclideanPoint::new(vec![u, v]).unwrap()).unwrap();
            acc += 2.0 * x.values().iter().product::<f64>();
        }
    }
    let planar = 64.0 * acc / n as f64;
    let m = 400_000;
    let hits = (0..m)
        .filter(|_| checkerboard_member(&sample_symmetric_dirichlet(1.0, 3, &mut rng).unwrap()).unwrap())
        .count();
    let empirical = hits as f64 / m as f64;
    assert!((planar - empirical).abs() < 0.005, "planar {planar} vs empirical {empirical}");
}

#[test]
fn random_categorical_is_recovered_from_a_million_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for parts in [2usize, 16] {
        let p = gen_random_categorical(parts, &mut rng).unwrap();
        assert_eq!(p.probs()[0], 0.5);
        let cats = sample_categories(&p, 1_000_000, &mut rng);
        let q = empirical_distribution(&cats, parts).unwrap();
        let kl = kl_divergence(p.probs(), q.probs()).unwrap();
        // the expected value is about (K - 1) / (2n)
        assert!(kl < 10.0 * (parts - 1) as f64 / 2e6, "K={parts}: {kl}");
    }
}

#[test]
fn files_are_ingested_with_headers_and_comments() {
    let dir = tempfile::tempdir().unwrap();
    let comp = dir.path().join("comp.csv");
    let mut f = std::fs::File::create(&comp).unwrap();
    writeln!(f, "a,b,c\n# a comment\n0.2,0.3,0.5\n\n1e-3, 0.499 ,0.5").unwrap();
    let xs = read_compositions(&comp).unwrap();
    assert_eq!(xs.len(), 2);
    assert_eq!(xs[1].values(), &[1e-3, 0.499, 0.5]);

    let cats = dir.path().join("cats.txt");
    std::fs::write(&cats, "0\n2\n1\n").unwrap();
    let handle: DatasetHandle = serde_json::from_str(r#"{"source": "categories_file", "path": "cats.txt", "parts": 3}"#).unwrap();
    let ds = handle.load(dir.path(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ds.data, TrainData::Categorical { parts: 3, labels: vec![0, 2, 1] });
    assert!(ds.truth.is_none());

    let handle = DatasetHandle::CompositionsFile { path: "comp.csv".into() };
    assert_eq!(handle.load(dir.path(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().data.len(), 2);

    std::fs::write(&comp, "0.2,0.3,0.5\n0.2,0.8\n").unwrap();
    assert!(matches!(read_compositions(&comp), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&comp, "0.2,0.3,0.5\n0.2,0.3,x\n").unwrap();
    assert!(matches!(read_compositions(&comp), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&comp, "# nothing\n").unwrap();
    assert!(read_compositions(&comp).is_err());
    assert!(serde_json::from_str::<DatasetHandle>(r#"{"source": "bogus"}"#).is_err());
}

fn tiny_spec(kind: ExperimentKind) -> ExperimentSpec {
    let text = format!(
        r#"{{
            "experiment": "{}",
            "grid": {{"parts": [2, 4], "bijection": ["ilr", "sb"]}},
            "seeds": [3],
            "train": {{"steps": 40, "batch_size": 32, "hidden": [16], "embed_dim": 4, "log_every": 10}},
            "train_samples": 500,
            "eval_samples": 600,
            "solver": {{"method": "euler", "steps": 10}}
        }}"#,
        kind.name()
    );
    ExperimentSpec::from_json(&text).unwrap()
}

#[test]
fn experiment_outputs_are_byte_identical_across_reruns() {
    let spec = tiny_spec(ExperimentKind::Scalability);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment_to(&spec, a.path()).unwrap();
    run_experiment_to(&spec, b.path()).unwrap();
    for file in [METRICS_FILE, MANIFEST_FILE] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let csv = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER);
    assert_eq!(lines.count(), 4);
    assert_eq!(ra.manifest.runs, 4);
    assert_eq!(ra.manifest.failures, 0);
    assert_eq!(ra.manifest.config_hash, spec.config_hash());
    assert!(ra.records.iter().all(|r| r.metrics.kl.unwrap() >= 0.0));

    let other = ExperimentSpec { seeds: vec![4], ..spec };
    assert_ne!(other.config_hash(), ra.manifest.config_hash);
}

#[test]
fn checkerboard_experiment_reports_invalid_fraction() {
    let spec = tiny_spec(ExperimentKind::Checkerboard);
    let records = run_experiment(&spec).unwrap();
    // the parts axis does not apply to the board
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.point.parts, 3);
        let f = r.metrics.invalid_fraction.unwrap();
        assert!((0.0..=1.0).contains(&f));
        assert!(r.metrics.kl.is_none());
    }
}

#[test]
fn bad_specs_are_rejected() {
    let mut spec = tiny_spec(ExperimentKind::Scalability);
    spec.grid.parts = vec![3];
    assert!(spec.validate().is_err());
    spec.grid.parts = vec![1024];
    assert!(spec.validate().is_err());
    assert!(ExperimentSpec::from_json(r#"{"experiment": "scalability", "typo": 1}"#).is_err());
    assert!(ExperimentSpec::from_json(r#"{"grid": {"alpha": [null, 1.0]}}"#).is_ok());
}

#[test]
fn derived_seeds_separate_streams() {
    let mut seen = std::collections::HashSet::new();
    for seed in 0..4 {
        for index in 0..50 {
            for stream in 0..3 {
                assert!(seen.insert(derive_seed(seed, index, stream)));
            }
        }
    }
}
