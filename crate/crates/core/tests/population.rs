//! Data generators and population moments against large-sample oracles.

use gradnoise_core::gradstats::{column_mean, empirical_gnc, per_example_gradients, population_gnc_estimate};
use gradnoise_core::problems::{
    generate_dataset, population_oracle_sample, quadratic_population_moments, DataSpec, Example,
};
use gradnoise_core::{Error, SymmetricMatrix};
use nalgebra::DVector;

fn quad(d: usize) -> DataSpec {
    DataSpec::quadratic(&SymmetricMatrix::identity(d), &vec![0.0; d], &SymmetricMatrix::identity(d))
}

#[test]
fn generation_is_deterministic() {
    for spec in [quad(3), DataSpec::logistic(vec![1.0, 0.0], 1.0), DataSpec::mlp(3, 4, 2)] {
        let a = generate_dataset(&spec, 42, 50).unwrap();
        let b = generate_dataset(&spec, 42, 50).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 43, 50).unwrap();
        assert_ne!(a.examples, c.examples);
        assert_eq!(generate_dataset(&spec, 1, 1).unwrap().len(), 1);
    }
    assert!(matches!(generate_dataset(&quad(2), 0, 0), Err(Error::Config(_))));
}

#[test]
fn non_psd_covariance_is_a_config_error() {
    let bad = SymmetricMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    let spec = DataSpec::quadratic(&SymmetricMatrix::identity(2), &[0.0, 0.0], &bad);
    assert!(matches!(generate_dataset(&spec, 0, 5), Err(Error::Config(_))));
}

#[test]
fn sample_mean_converges() {
    let data = generate_dataset(&quad(5), 7, 100_000).unwrap();
    for k in 0..5 {
        let m = data.examples.iter().map(|z| z.features[k]).sum::<f64>() / data.len() as f64;
        assert!(m.abs() < 0.02, "coordinate {k}: {m}");
    }
}

#[test]
fn quadratic_moment_examples() {
    let (g, s, h) = quadratic_population_moments(&quad(3), &DVector::zeros(3)).unwrap();
    assert_eq!(g, DVector::zeros(3));
    assert_eq!(s, SymmetricMatrix::identity(3));
    assert_eq!(h, SymmetricMatrix::identity(3));

    let a = SymmetricMatrix::from_diagonal(&[1.0, 2.0]);
    let spec = DataSpec::quadratic(&a, &[0.5, -0.5], &SymmetricMatrix::identity(2));
    let (_, pop, _) = quadratic_population_moments(&spec, &DVector::from_vec(vec![0.3, 0.1])).unwrap();
    assert_eq!(pop, SymmetricMatrix::from_diagonal(&[1.0, 4.0]));
    let (g, ..) = quadratic_population_moments(&spec, &DVector::from_vec(vec![0.5, -0.5])).unwrap();
    assert_eq!(g, DVector::zeros(2));

    let p = spec.build().unwrap();
    let data = generate_dataset(&spec, 3, 1_000_000).unwrap();
    let emp = empirical_gnc(p.as_ref(), &DVector::zeros(2), &data.examples);
    for (i, j) in [(0, 0), (1, 1)] {
        let rel = (emp.get(i, j) - pop.get(i, j)).abs() / pop.get(i, j);
        assert!(rel < 0.02, "({i},{j}): {}", emp.get(i, j));
    }
    assert!(emp.get(0, 1).abs() < 0.02 * 2.0);

    let logistic = DataSpec::logistic(vec![1.0], 1.0);
    assert!(matches!(quadratic_population_moments(&logistic, &DVector::zeros(2)), Err(Error::Capability(_))));
}

#[test]
fn oracle_sample_contracts() {
    let spec = DataSpec::logistic(vec![1.0, 0.5], 1.0).with_oracle_size(10_000);
    let o = population_oracle_sample(&spec, 5).unwrap();
    assert_eq!(o.len(), 10_000);
    assert_eq!(o, population_oracle_sample(&spec, 5).unwrap());
    // Oracle draws do not coincide with the training stream of the same seed.
    assert_ne!(o.examples[..10], generate_dataset(&spec, 5, 10).unwrap().examples[..]);

    let a = SymmetricMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let zc = SymmetricMatrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap();
    let spec = DataSpec::quadratic(&a, &[1.0, -1.0], &zc).with_oracle_size(20_000);
    let p = spec.build().unwrap();
    let w = DVector::from_vec(vec![0.2, 0.4]);
    let o = population_oracle_sample(&spec, 1).unwrap();
    let est = column_mean(&per_example_gradients(p.as_ref(), &w, &o.examples));
    let (g, ..) = quadratic_population_moments(&spec, &w).unwrap();
    let tol = 3.0 * a.max_eigenvalue().unwrap() * (zc.trace() / 20_000.0).sqrt();
    assert!((est - g).norm() <= tol);
}

#[test]
fn population_gnc_estimate_examples() {
    let spec = quad(2);
    let p = spec.build().unwrap();
    let o = generate_dataset(&spec, 8, 1_000_000).unwrap();
    let est = population_gnc_estimate(p.as_ref(), &DVector::zeros(2), &o.examples);
    assert!((est.get(0, 0) - 1.0).abs() < 0.01 && (est.get(1, 1) - 1.0).abs() < 0.01);
    assert!(est.get(0, 1).abs() < 0.01);

    let same = vec![Example { features: vec![1.0, 2.0], label: 0.0 }; 5];
    assert!(population_gnc_estimate(p.as_ref(), &DVector::zeros(2), &same).is_zero());
    assert!(population_gnc_estimate(p.as_ref(), &DVector::zeros(2), &same[..1]).is_zero());
}
