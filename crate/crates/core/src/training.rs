//! Classical VI: fit Gaussian members by stochastic ELBO ascent with Adam.
//!
//! Members are fitted independently against a frozen target. A member's
//! trajectory depends only on the target, its initialization, and its own seed.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximations::{Ensemble, GaussianApprox, Member, Trainable};
use crate::error::{Error, Result};
use crate::rng::{RandomStream, SeedSpec};
use crate::targets::Target;

/// Adam moments for ascent on a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Conventional defaults: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update that moves `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "Adam state has {} slots, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// How `∇ log p̃` was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    /// Fall back to central differences when the target has no analytic gradient.
    pub allow_finite_difference: bool,
    pub fd_step: f64,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            allow_finite_difference: true,
            fd_step: 1e-5,
        }
    }
}

pub fn gradient_source(target: &Target, opts: &GradientOptions) -> Result<GradientSource> {
    if target.has_analytic_gradient() {
        Ok(GradientSource::Analytic)
    } else if opts.allow_finite_difference {
        Ok(GradientSource::FiniteDifference)
    } else {
        Err(Error::Config(format!(
            "target '{}' has no analytic gradient and finite differences are disabled",
            target.name()
        )))
    }
}

/// ELBO estimate on fixed noise `eps` (row-major `n × dim`).
pub fn elbo_at(target: &Target, approx: &GaussianApprox, eps: &[f64]) -> f64 {
    let d = approx.dim();
    let z = approx.transform(eps);
    let n = eps.len() / d;
    z.chunks(d)
        .map(|p| target.log_density_unchecked(p) - approx.log_density_unchecked(p))
        .sum::<f64>()
        / n as f64
}

/// Reparameterized ELBO gradient on fixed noise, in the layout of
/// [`GaussianApprox::params`]. Also returns the ELBO estimate on the same noise.
pub fn elbo_and_gradient_at(
    target: &Target,
    approx: &GaussianApprox,
    eps: &[f64],
    opts: &GradientOptions,
) -> Result<(f64, Vec<f64>)> {
    let source = gradient_source(target, opts)?;
    let d = approx.dim();
    let n = eps.len() / d;
    if n == 0 {
        return Err(Error::Usage("need at least one sample".into()));
    }
    let sigmas = approx.sigmas();
    let z = approx.transform(eps);
    let mut g = vec![0.0; d];
    let mut mean_grad = vec![0.0; d];
    // Σ_i g_ij σ_j ε_ij, per coordinate.
    let mut scale_grad = vec![0.0; d];
    let mut elbo = 0.0;
    for (zi, ei) in z.chunks(d).zip(eps.chunks(d)) {
        match source {
            GradientSource::Analytic => {
                target.grad_log_density(zi, &mut g);
            }
            GradientSource::FiniteDifference => target.grad_log_density_fd(zi, opts.fd_step, &mut g),
        }
        for j in 0..d {
            mean_grad[j] += g[j];
            scale_grad[j] += g[j] * sigmas[j] * ei[j];
        }
        elbo += target.log_density_unchecked(zi) - approx.log_density_unchecked(zi);
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::new();
    if approx.trainable.mean {
        grad.extend(mean_grad.iter().map(|x| x * inv_n));
    }
    if approx.trainable.scale {
        // The entropy contributes +1 per coordinate to ∂/∂ log σ_j.
        if approx.is_isotropic() {
            grad.push(scale_grad.iter().sum::<f64>() * inv_n + d as f64);
        } else {
            grad.extend(scale_grad.iter().map(|x| x * inv_n + 1.0));
        }
    }
    Ok((elbo * inv_n, grad))
}

/// Draws `n_samples` noise vectors from `stream` and returns the ELBO gradient.
pub fn elbo_gradient(
    target: &Target,
    approx: &GaussianApprox,
    stream: &mut RandomStream,
    n_samples: usize,
    opts: &GradientOptions,
) -> Result<Vec<f64>> {
    if !approx.trainable.any() {
        return Err(Error::Config("approximation has no trainable parameters".into()));
    }
    let eps = stream.standard_normal(n_samples * approx.dim());
    Ok(elbo_and_gradient_at(target, approx, &eps, opts)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub samples_per_iter: usize,
    pub lr: f64,
    pub seed: SeedSpec,
    /// Overrides the initial approximation's trainable mask when set.
    pub trainable: Option<Trainable>,
    pub gradient: GradientOptions,
}

impl FitConfig {
    /// 10⁴ iterations, 10³ samples per iteration, learning rate 10⁻³, seed 0.
    pub fn reference_preset() -> Self {
        Self {
            iterations: 10_000,
            samples_per_iter: 1_000,
            lr: 1e-3,
            seed: SeedSpec::new(0, "train"),
            trainable: None,
            gradient: GradientOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.samples_per_iter == 0 {
            return Err(Error::Config(
                "iterations and samples_per_iter must be at least 1".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub approx: GaussianApprox,
    /// ELBO estimate at each iteration, before that iteration's update.
    pub trace: Vec<f64>,
    pub gradient_source: GradientSource,
}

/// Fits one member by Adam ascent on the reparameterized ELBO, drawing from `cfg.seed`.
pub fn fit_member(target: &Target, init: &GaussianApprox, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    target.check_dim(init.dim())?;
    let mut approx = init.clone();
    if let Some(t) = cfg.trainable {
        approx.trainable = t;
    }
    if !approx.trainable.any() {
        return Err(Error::Config("approximation has no trainable parameters".into()));
    }
    let source = gradient_source(target, &cfg.gradient)?;
    info!(
        "fitting '{}' stream '{}' with {:?} target gradients",
        target.name(),
        cfg.seed.stream_id,
        source
    );

    let mut stream = cfg.seed.stream();
    let mut params = approx.params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut eps = vec![0.0; cfg.samples_per_iter * approx.dim()];
    for iteration in 0..cfg.iterations {
        stream.fill_standard_normal(&mut eps);
        let (elbo, grad) = elbo_and_gradient_at(target, &approx, &eps, &cfg.gradient)?;
        if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration, params });
        }
        trace.push(elbo);
        adam.step(&mut params, &grad)?;
        approx.set_params(&params);
        if iteration % 1000 == 0 {
            debug!("iteration {iteration}: elbo {elbo:.6}");
        }
    }
    Ok(FitResult {
        approx,
        trace,
        gradient_source: source,
    })
}

/// Initialization for one ensemble member.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberInit {
    pub label: String,
    pub approx: GaussianApprox,
    /// Stream name under the fit seed; defaults to the label.
    pub stream_id: Option<String>,
}

impl MemberInit {
    pub fn new(label: impl Into<String>, approx: GaussianApprox) -> Self {
        Self {
            label: label.into(),
            approx,
            stream_id: None,
        }
    }

    pub fn with_stream(mut self, stream_id: impl Into<String>) -> Self {
        self.stream_id = Some(stream_id.into());
        self
    }
}

#[derive(Debug)]
pub struct MemberFit {
    pub label: String,
    pub result: Result<FitResult>,
}

/// Per-member outcomes of [`fit_ensemble`], in input order.
#[derive(Debug)]
pub struct EnsembleFit {
    pub members: Vec<MemberFit>,
}

impl EnsembleFit {
    /// The fitted ensemble, or the first member failure.
    pub fn into_ensemble(self) -> Result<Ensemble> {
        let mut out = Vec::with_capacity(self.members.len());
        for m in self.members {
            match m.result {
                Ok(r) => out.push(Member::new(m.label, r.approx)),
                Err(e) => {
                    return Err(Error::Member {
                        label: m.label,
                        source: Box::new(e),
                    })
                }
            }
        }
        Ensemble::new(out)
    }
}

/// Fits every member independently; member `s` uses `cfg.seed.child(stream_id_s)`.
///
/// With `parallel` the members run on the rayon pool. Results are identical
/// either way.
pub fn fit_ensemble(
    target: &Target,
    inits: &[MemberInit],
    cfg: &FitConfig,
    parallel: bool,
) -> Result<EnsembleFit> {
    if inits.is_empty() {
        return Err(Error::Config("need at least one member to fit".into()));
    }
    let fit_one = |init: &MemberInit| {
        let stream_id = init.stream_id.as_deref().unwrap_or(&init.label);
        let member_cfg = FitConfig {
            seed: cfg.seed.child(stream_id),
            ..cfg.clone()
        };
        MemberFit {
            label: init.label.clone(),
            result: fit_member(target, &init.approx, &member_cfg),
        }
    };
    let members = if parallel {
        inits.par_iter().map(fit_one).collect()
    } else {
        inits.iter().map(fit_one).collect()
    };
    Ok(EnsembleFit { members })
}

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use crate::targets::GaussianMixture;

    fn quadratic_target(a: f64) -> Target {
        Target::mixture("n", GaussianMixture::uniform_1d(&[a], &[1.0]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        for g in [1e-3, 0.5, 250.0, -7.0] {
            let mut adam = AdamState::new(1, 0.01);
            let mut p = vec![0.0];
            adam.step(&mut p, &[g]).unwrap();
            let expected = 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "{g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Maximize -(x - 3)²/2, gradient 3 - x.
        let mut adam = AdamState::new(1, 0.01);
        let mut p = vec![0.0];
        for _ in 0..1000 {
            let g = 3.0 - p[0];
            adam.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "{}", p[0]);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut adam = AdamState::new(2, 0.1);
        assert!(adam.step(&mut [0.0], &[1.0]).is_err());
    }

    #[test]
    fn gradient_is_zero_at_stationary_point() {
        let a = 1.7;
        let t = quadratic_target(a);
        let q = GaussianApprox::isotropic(vec![a], 1.0).unwrap();
        let mut s = derive_stream(0, "g");
        let eps = s.standard_normal(100_000);
        let (_, g) = elbo_and_gradient_at(&t, &q, &eps, &GradientOptions::default()).unwrap();
        // Per-sample gradient is a - z = -ε with unit variance.
        let se = 1.0 / (100_000f64).sqrt();
        assert!(g[0].abs() < 3.0 * se, "{}", g[0]);
    }

    #[test]
    fn gradient_pulls_mean_toward_mode() {
        let a = 2.0;
        let t = quadratic_target(a);
        let q = GaussianApprox::isotropic(vec![a - 1.0], 1e-3).unwrap();
        let g = elbo_gradient(&t, &q, &mut derive_stream(0, "g"), 1000, &GradientOptions::default())
            .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn missing_gradient_without_fd_is_config_error() {
        let t = Target::custom("c", 1, None, |z| -z[0] * z[0]);
        let q = GaussianApprox::isotropic(vec![0.0], 1.0).unwrap();
        let opts = GradientOptions {
            allow_finite_difference: false,
            ..Default::default()
        };
        let err = elbo_gradient(&t, &q, &mut derive_stream(0, "x"), 10, &opts).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(elbo_gradient(&t, &q, &mut derive_stream(0, "x"), 10, &GradientOptions::default())
            .is_ok());
    }

    #[test]
    fn no_trainable_parameters_is_rejected() {
        let t = quadratic_target(0.0);
        let q = GaussianApprox::isotropic(vec![0.0], 1.0)
            .unwrap()
            .with_trainable(Trainable::default());
        assert!(elbo_gradient(&t, &q, &mut derive_stream(0, "x"), 10, &Default::default()).is_err());
    }

    #[test]
    fn non_finite_objective_aborts_with_context() {
        let t = Target::custom("bad", 1, None, |z| if z[0] > 0.5 { f64::NAN } else { 0.0 });
        let q = GaussianApprox::isotropic(vec![0.0], 1.0).unwrap();
        let cfg = FitConfig {
            iterations: 5,
            samples_per_iter: 50,
            ..FitConfig::reference_preset()
        };
        match fit_member(&t, &q, &cfg) {
            Err(Error::NonFinite { iteration, params }) => {
                assert_eq!(iteration, 0);
                assert_eq!(params, vec![0.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unimodal_fit_reaches_mean() {
        let t = quadratic_target(4.0);
        let q = GaussianApprox::isotropic(vec![1.0], 1.0).unwrap();
        let cfg = FitConfig {
            iterations: 4000,
            samples_per_iter: 100,
            lr: 0.01,
            ..FitConfig::reference_preset()
        };
        let r = fit_member(&t, &q, &cfg).unwrap();
        assert!((r.approx.mean()[0] - 4.0).abs() < 0.05, "{:?}", r.approx.mean());
        assert_eq!(r.trace.len(), 4000);
    }

    #[test]
    fn moving_average_shape() {
        let m = moving_average(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(m, vec![1.0, 2.0, 4.0, 6.0]);
    }
}
