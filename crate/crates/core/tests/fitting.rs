use miselbo::approximations::{GaussianApprox, Trainable};
use miselbo::experiments::verify::{finite_difference_gradient, gradient_config};
use miselbo::rng::SeedSpec;
use miselbo::targets::{make_energy, make_setting, EnergyTarget2D, GaussianMixture, P1Form, SettingId, Target};
use miselbo::training::{
    elbo_and_gradient_at, fit_ensemble, fit_member, moving_average, FitConfig, GradientOptions,
    GradientSource, MemberInit,
};

fn small_cfg(seed: u64) -> FitConfig {
    FitConfig {
        iterations: 300,
        samples_per_iter: 50,
        lr: 1e-2,
        seed: SeedSpec::new(seed, "train"),
        trainable: None,
        gradient: GradientOptions::default(),
    }
}

fn inits() -> Vec<MemberInit> {
    vec![
        MemberInit::new("q1", GaussianApprox::isotropic(vec![-3.0, 0.5], 0.9).unwrap()),
        MemberInit::new("q2", GaussianApprox::isotropic(vec![3.0, -0.5], 0.9).unwrap()),
        MemberInit::new("q3", GaussianApprox::isotropic(vec![0.0, 2.0], 0.9).unwrap()),
    ]
}

#[test]
fn parallel_and_serial_fits_are_identical() {
    let t = make_energy(EnergyTarget2D::P1(P1Form::Reference));
    let a = fit_ensemble(&t, &inits(), &small_cfg(0), true).unwrap();
    let b = fit_ensemble(&t, &inits(), &small_cfg(0), false).unwrap();
    for (x, y) in a.members.iter().zip(&b.members) {
        let (x, y) = (x.result.as_ref().unwrap(), y.result.as_ref().unwrap());
        assert_eq!(x.approx, y.approx);
        assert_eq!(x.trace, y.trace);
    }
}

#[test]
fn member_trajectory_ignores_other_members() {
    let t = make_energy(EnergyTarget2D::P1(P1Form::Reference));
    let all = fit_ensemble(&t, &inits(), &small_cfg(4), true).unwrap();
    let solo = fit_ensemble(&t, &inits()[1..2], &small_cfg(4), true).unwrap();
    let from_all = all.members.iter().find(|m| m.label == "q2").unwrap();
    assert_eq!(
        from_all.result.as_ref().unwrap().trace,
        solo.members[0].result.as_ref().unwrap().trace
    );
}

#[test]
fn different_seeds_give_different_traces() {
    let t = make_setting(SettingId::Iii);
    let init = GaussianApprox::isotropic(vec![1.0], 1.0).unwrap();
    let a = fit_member(&t, &init, &small_cfg(0)).unwrap();
    let b = fit_member(&t, &init, &small_cfg(1)).unwrap();
    assert_ne!(a.trace, b.trace);
}

#[test]
fn reparameterized_gradient_matches_finite_differences() {
    for i in 0..5 {
        let (t, q) = gradient_config(0, i).unwrap();
        let eps = SeedSpec::new(0, format!("fd{i}")).stream().standard_normal(1000 * q.dim());
        let (_, g) = elbo_and_gradient_at(&t, &q, &eps, &GradientOptions::default()).unwrap();
        let fd = finite_difference_gradient(&t, &q, &eps, 1e-5);
        let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(err / norm <= 1e-4, "config {i} ({}): {}", t.name(), err / norm);
    }
}

#[test]
fn finite_difference_target_gradient_path_is_used_for_custom_targets() {
    let t = Target::custom("quartic", 1, None, |z| -0.25 * z[0].powi(4));
    let init = GaussianApprox::isotropic(vec![2.0], 0.5).unwrap();
    let cfg = FitConfig {
        iterations: 1000,
        ..small_cfg(0)
    };
    let r = fit_member(&t, &init, &cfg).unwrap();
    assert_eq!(r.gradient_source, GradientSource::FiniteDifference);
    assert!(r.approx.mean()[0].abs() < 0.5, "{:?}", r.approx.mean());
}

#[test]
fn smoothed_trace_rises_on_a_unimodal_target() {
    let t = Target::mixture("n5", GaussianMixture::new(vec![1.0], vec![vec![5.0]], vec![1.0]).unwrap());
    let cfg = FitConfig {
        iterations: 2000,
        ..FitConfig::reference_preset()
    };
    let init = GaussianApprox::isotropic(vec![0.0], 1.0).unwrap();
    let r = fit_member(&t, &init, &cfg).unwrap();
    let smooth = moving_average(&r.trace, 100);
    let violations: Vec<usize> = (1..20)
        .filter(|&k| smooth[(k + 1) * 100 - 1] < smooth[k * 100 - 1])
        .collect();
    assert!(violations.is_empty(), "smoothed ELBO decreased at blocks {violations:?}");
}

#[test]
fn scale_training_reaches_target_width() {
    let t = Target::mixture("n", GaussianMixture::new(vec![1.0], vec![vec![1.0]], vec![2.0]).unwrap());
    let init = GaussianApprox::isotropic(vec![0.0], 0.5).unwrap().with_trainable(Trainable::ALL);
    let cfg = FitConfig {
        iterations: 3000,
        samples_per_iter: 200,
        lr: 1e-2,
        ..FitConfig::reference_preset()
    };
    let r = fit_member(&t, &init, &cfg).unwrap();
    assert!((r.approx.mean()[0] - 1.0).abs() < 0.1, "{:?}", r.approx.mean());
    assert!((r.approx.sigma(0) - 2.0).abs() < 0.1, "{}", r.approx.sigma(0));
}
