use noveltykit::hierarchy::{
    self, HierarchyConfig, HierarchyModel, LinearPredictor, LinearWeights, Sample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, PartialEq, Debug)]
enum Regime {
    A,
    B,
    C,
}

fn step(r: Regime, x: [f64; 2]) -> [f64; 2] {
    let rot = |a: f64| {
        let (s, c) = a.sin_cos();
        [0.95 * (c * x[0] - s * x[1]), 0.95 * (s * x[0] + c * x[1])]
    };
    match r {
        Regime::A => rot(0.3),
        Regime::B => rot(-0.8),
        Regime::C => [-x[0] + 0.5, -x[1] - 0.5],
    }
}

fn regime(r: Regime, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    (0..n)
        .map(|_| {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = step(r, x);
            Sample {
                input: x.to_vec(),
                target: vec![y[0] + noise.sample(&mut rng), y[1] + noise.sample(&mut rng)],
            }
        })
        .collect()
}

struct Corpus {
    samples: Vec<Sample>,
    labels: Vec<Regime>,
    seed: Vec<usize>,
}

fn two_regimes() -> Corpus {
    let a = regime(Regime::A, 300, 1);
    let b = regime(Regime::B, 300, 2);
    let labels = [vec![Regime::A; a.len()], vec![Regime::B; b.len()]].concat();
    Corpus {
        samples: [a, b].concat(),
        labels,
        seed: (0..150).collect(),
    }
}

fn build(c: &Corpus, theta: f64) -> HierarchyModel<LinearWeights> {
    let cfg = HierarchyConfig {
        theta: Some(theta),
        ..HierarchyConfig::default()
    };
    hierarchy::build(&LinearPredictor::default(), &c.samples, &c.seed, &cfg).unwrap()
}

#[test]
fn second_regime_spawns_exactly_one_level() {
    let c = two_regimes();
    let p = LinearPredictor::default();
    let h = build(&c, 0.1);
    assert_eq!(h.levels.len(), 2);
    let spawned = &h.levels[1].trained_on;
    let b = spawned
        .iter()
        .filter(|&&i| c.labels[i] == Regime::B)
        .count();
    assert!(
        b as f64 / spawned.len() as f64 >= 0.9,
        "{b}/{}",
        spawned.len()
    );
    assert!(h.mean_innovation(&p, &c.samples) < h.theta);
    // levels train on disjoint subsets
    let l0: std::collections::BTreeSet<_> = h.levels[0].trained_on.iter().collect();
    assert!(spawned.iter().all(|i| !l0.contains(i)));
}

#[test]
fn huge_theta_keeps_single_level() {
    let h = build(&two_regimes(), 1e6);
    assert_eq!(h.levels.len(), 1);
}

#[test]
fn raising_theta_never_adds_levels() {
    let c = two_regimes();
    let counts: Vec<usize> = [0.005, 0.02, 0.1, 0.5, 2.0]
        .iter()
        .map(|&t| build(&c, t).levels.len())
        .collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn held_out_regime_flagged_abnormal() {
    let c = two_regimes();
    let p = LinearPredictor::default();
    let h = build(&c, 0.1);
    let held = regime(Regime::C, 200, 3);
    let flagged = held.iter().filter(|s| h.evaluate(&p, s).abnormal).count();
    assert!(flagged as f64 / held.len() as f64 >= 0.9, "{flagged}");
    // fresh samples of the trained regimes mostly pass
    let fresh = [regime(Regime::A, 100, 4), regime(Regime::B, 100, 5)].concat();
    let false_alarms = fresh.iter().filter(|s| h.evaluate(&p, s).abnormal).count();
    assert!(false_alarms <= 10, "{false_alarms}");
}

#[test]
fn seed_samples_claimed_by_base_level() {
    let c = two_regimes();
    let p = LinearPredictor::default();
    let h = build(&c, 0.1);
    let claimed = c
        .seed
        .iter()
        .filter(|&&i| !h.evaluate(&p, &c.samples[i]).dummy[0])
        .count();
    assert!(claimed as f64 >= 0.95 * c.seed.len() as f64);
    for &i in &c.seed {
        assert!(!h.evaluate(&p, &c.samples[i]).abnormal);
    }
}

#[test]
fn zero_innovation_is_normal() {
    let c = two_regimes();
    let p = LinearPredictor::default();
    let h = build(&c, 0.1);
    let x = Sample {
        input: vec![0.9, -0.9],
        target: vec![],
    };
    let target = hierarchy::Predictor::predict(&p, &h.levels[1].model, &x);
    let s = Sample { target, ..x };
    let e = h.evaluate(&p, &s);
    assert!(e.innovation < 1e-12);
    assert!(!e.abnormal);
}

#[test]
fn merge_spawns_and_level_cap() {
    let c = two_regimes();
    let cfg = HierarchyConfig {
        theta: Some(0.1),
        merge_spawns: true,
        ..HierarchyConfig::default()
    };
    let h = hierarchy::build(&LinearPredictor::default(), &c.samples, &c.seed, &cfg).unwrap();
    assert!(h.levels.len() >= 2);
    let cfg = HierarchyConfig {
        theta: Some(1e-9),
        max_levels: 3,
        ..HierarchyConfig::default()
    };
    let h = hierarchy::build(&LinearPredictor::default(), &c.samples, &c.seed, &cfg).unwrap();
    assert!(h.levels.len() <= 3);
}

#[test]
fn default_theta_and_persistence() {
    let c = two_regimes();
    let h = hierarchy::build(
        &LinearPredictor::default(),
        &c.samples,
        &c.seed,
        &HierarchyConfig::default(),
    )
    .unwrap();
    assert!(h.theta > 0.0);
    let dir = tempfile::tempdir().unwrap();
    hierarchy::save(&h, dir.path()).unwrap();
    let back: HierarchyModel<LinearWeights> = hierarchy::load(dir.path()).unwrap();
    assert_eq!(back, h);
}

#[test]
fn empty_seed_rejected() {
    let c = two_regimes();
    assert!(hierarchy::build(
        &LinearPredictor::default(),
        &c.samples,
        &[],
        &HierarchyConfig::default()
    )
    .is_err());
}
