use nalgebra::{DMatrix, DVector};
use noveltykit::ocsvm::{self, Kernel, OcSvmConfig, ResolvedKernel, Standardizer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Bound {
    Lower,
    Upper,
    Free,
}

/// Primal active-set method on `min ½ aᵀKa, Σa = 1, 0 ≤ a ≤ c`.
/// Returns the coefficients and the offset (the equality multiplier).
fn active_set_qp(k: &DMatrix<f64>, c: f64) -> (DVector<f64>, f64) {
    let n = k.nrows();
    let mut a = DVector::zeros(n);
    let mut state = vec![Bound::Lower; n];
    let mut left: f64 = 1.0;
    for i in 0..n {
        if left <= 0.0 {
            break;
        }
        let v = left.min(c);
        a[i] = v;
        state[i] = if v >= c { Bound::Upper } else { Bound::Free };
        left -= v;
    }

    for _ in 0..10_000 {
        let g = k * &a;
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
        if free.is_empty() {
            let up = (0..n)
                .filter(|&i| state[i] == Bound::Upper)
                .max_by(|&x, &y| g[x].total_cmp(&g[y]));
            let lo = (0..n)
                .filter(|&i| state[i] == Bound::Lower)
                .min_by(|&x, &y| g[x].total_cmp(&g[y]));
            match (up, lo) {
                (Some(u), Some(l)) if g[u] > g[l] => {
                    state[u] = Bound::Free;
                    state[l] = Bound::Free;
                    continue;
                }
                _ => {
                    let hi = up.map_or(f64::NEG_INFINITY, |u| g[u]);
                    let lw = lo.map_or(f64::INFINITY, |l| g[l]);
                    return (a, 0.5 * (hi + lw));
                }
            }
        }

        let m = free.len();
        let mut sys = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (r, &i) in free.iter().enumerate() {
            for (s, &j) in free.iter().enumerate() {
                sys[(r, s)] = k[(i, j)];
            }
            sys[(r, m)] = 1.0;
            sys[(m, r)] = 1.0;
            rhs[r] = -g[i];
        }
        let sol = sys.lu().solve(&rhs).expect("singular KKT system");
        let p: Vec<f64> = (0..m).map(|r| sol[r]).collect();
        let lambda = sol[m];

        if p.iter().map(|v| v.abs()).fold(0.0, f64::max) > 1e-13 {
            let mut step = 1.0;
            let mut block = None;
            for (r, &i) in free.iter().enumerate() {
                let lim = if p[r] > 0.0 {
                    (c - a[i]) / p[r]
                } else if p[r] < 0.0 {
                    -a[i] / p[r]
                } else {
                    f64::INFINITY
                };
                if lim < step {
                    step = lim;
                    block = Some((i, p[r] > 0.0));
                }
            }
            for (r, &i) in free.iter().enumerate() {
                a[i] += step * p[r];
            }
            if let Some((i, up)) = block {
                a[i] = if up { c } else { 0.0 };
                state[i] = if up { Bound::Upper } else { Bound::Lower };
            }
            continue;
        }

        let rho = -lambda;
        let mut worst = (1e-12, None);
        for i in 0..n {
            let viol = match state[i] {
                Bound::Lower => rho - g[i],
                Bound::Upper => g[i] - rho,
                Bound::Free => 0.0,
            };
            if viol > worst.0 {
                worst = (viol, Some(i));
            }
        }
        match worst.1 {
            Some(i) => state[i] = Bound::Free,
            None => return (a, rho),
        }
    }
    panic!("active-set oracle did not terminate");
}

fn kernel_matrix(xs: &[Vec<f64>], kernel: ResolvedKernel) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| kernel.eval(&xs[i], &xs[j]))
}

fn rbf(gamma: f64, nu: f64) -> OcSvmConfig {
    OcSvmConfig {
        nu,
        kernel: Kernel::Rbf { gamma: Some(gamma) },
        ..OcSvmConfig::default()
    }
}

#[test]
fn matches_dense_qp_oracle() {
    let x = gaussian(20, 2, 42);
    let cfg = rbf(0.5, 0.1);
    let model = ocsvm::train(&x, &cfg).unwrap();

    let scaling = Standardizer::fit(&x);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| scaling.apply(r)).collect();
    let kernel = ResolvedKernel::Rbf { gamma: 0.5 };
    let k = kernel_matrix(&xs, kernel);
    let c = 1.0 / (0.1 * 20.0);
    let (alpha, rho) = active_set_qp(&k, c);
    assert!((alpha.sum() - 1.0).abs() < 1e-12);
    assert!(alpha.iter().all(|&v| (-1e-12..=c + 1e-12).contains(&v)));

    assert!((model.rho - rho).abs() < 1e-4, "{} vs {rho}", model.rho);
    let probes = x.iter().cloned().chain(gaussian(30, 2, 7));
    for p in probes {
        let z = scaling.apply(&p);
        let oracle: f64 = (0..20)
            .map(|i| alpha[i] * kernel.eval(&xs[i], &z))
            .sum::<f64>()
            - rho;
        let got = model.score(&p).unwrap();
        assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
    }
}

#[test]
fn oracle_agreement_across_seeds_and_nu() {
    for seed in 0..6 {
        for &nu in &[0.05, 0.2, 0.5] {
            let x = gaussian(25, 3, 100 + seed);
            let model = ocsvm::train(&x, &rbf(0.3, nu)).unwrap();
            let scaling = Standardizer::fit(&x);
            let xs: Vec<Vec<f64>> = x.iter().map(|r| scaling.apply(r)).collect();
            let k = kernel_matrix(&xs, ResolvedKernel::Rbf { gamma: 0.3 });
            let (_, rho) = active_set_qp(&k, 1.0 / (nu * 25.0));
            assert!((model.rho - rho).abs() < 1e-4, "seed {seed} nu {nu}");
        }
    }
}

#[test]
fn nu_bounds_training_outlier_fraction() {
    for seed in 0..10 {
        for &nu in &[0.05, 0.1, 0.3] {
            let x = gaussian(80, 3, seed);
            let n = x.len() as f64;
            let model = ocsvm::train(&x, &rbf(0.5, nu)).unwrap();
            // free support vectors sit on the boundary only up to the KKT tolerance
            let tol = OcSvmConfig::default().tolerance;
            let outliers = x.iter().filter(|p| model.score(p).unwrap() < -tol).count();
            assert!(
                outliers as f64 / n <= nu + 2.0 / n,
                "seed {seed} nu {nu}: {outliers}"
            );
            // at least a ν fraction of points are support vectors
            assert!(model.coefficients.len() as f64 >= nu * n - 1e-9);
        }
    }
}

#[test]
fn duplicated_dataset_same_decision_function() {
    let x = gaussian(30, 2, 9);
    let doubled: Vec<Vec<f64>> = x.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    let cfg = rbf(0.5, 0.1);
    let a = ocsvm::train(&x, &cfg).unwrap();
    let b = ocsvm::train(&doubled, &cfg).unwrap();
    for p in x.iter().chain(gaussian(20, 2, 10).iter()) {
        let (sa, sb) = (a.score(p).unwrap(), b.score(p).unwrap());
        assert!((sa - sb).abs() < 1e-4, "{sa} vs {sb}");
    }
}

#[test]
fn deterministic() {
    let x = gaussian(40, 3, 5);
    let a = ocsvm::train(&x, &OcSvmConfig::default()).unwrap();
    let b = ocsvm::train(&x, &OcSvmConfig::default()).unwrap();
    assert_eq!(a, b);
}
