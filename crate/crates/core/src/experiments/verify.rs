//! Numerical verification of the bound identities and inequalities.
//!
//! Exact checks compare two routes to the same quantity on one shared batch and
//! must agree to a relative tolerance. Statistical checks compare replicate means
//! against a bound with a three-standard-error allowance.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximations::{Ensemble, GaussianApprox, Member, Trainable};
use crate::error::Result;
use crate::estimators::{self as est, draw_batch, SampleBatch};
use crate::math::mean_and_std_error;
use crate::rng::{RandomStream, SeedSpec};
use crate::targets::{
    make_energy, make_setting, EnergyTarget2D, GaussianMixture, P1Form, P2Form, SettingId, Target,
};
use crate::training::{elbo_and_gradient_at, elbo_at, GradientOptions};

pub const EXACT_TOL: f64 = 1e-10;
pub const N_SE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Number of random Gaussian ensembles.
    pub n_configs: usize,
    /// Replicate batches per ensemble for the statistical checks.
    pub replicates: usize,
    /// Draws per member per batch; must be a multiple of every entry of `l_list`.
    pub batch_l: usize,
    pub l_list: Vec<usize>,
    pub n_gradient_configs: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_configs: 50,
            replicates: 200,
            batch_l: 50,
            l_list: vec![1, 2, 5, 10, 50],
            n_gradient_configs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Exact,
    Statistical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub config: String,
    pub kind: CheckKind,
    /// Relative error for exact checks; replicate mean for statistical ones.
    pub measured: f64,
    /// Tolerance (exact) or bound (statistical).
    pub reference: f64,
    /// Distance to failure: positive means inside the allowed region.
    pub slack: f64,
    pub passed: bool,
}

impl Check {
    fn exact(name: &str, config: &str, rel_err: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            config: config.into(),
            kind: CheckKind::Exact,
            measured: rel_err,
            reference: tol,
            slack: tol - rel_err,
            passed: rel_err <= tol,
        }
    }

    /// Passes when `mean - N_SE·se ≤ bound`.
    fn at_most(name: &str, config: &str, mean: f64, se: f64, bound: f64) -> Self {
        let slack = bound - (mean - N_SE * se);
        Self {
            name: name.into(),
            config: config.into(),
            kind: CheckKind::Statistical,
            measured: mean,
            reference: bound,
            slack,
            passed: slack >= 0.0,
        }
    }

    /// Passes when `mean + N_SE·se ≥ bound`.
    fn at_least(name: &str, config: &str, mean: f64, se: f64, bound: f64) -> Self {
        let slack = mean + N_SE * se - bound;
        Self {
            name: name.into(),
            config: config.into(),
            kind: CheckKind::Statistical,
            measured: mean,
            reference: bound,
            slack,
            passed: slack >= 0.0,
        }
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both are equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn exact_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| c.kind == CheckKind::Exact && !c.passed)
    }

    pub fn statistical_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| c.kind == CheckKind::Statistical && !c.passed)
    }

    pub fn all_exact_passed(&self) -> bool {
        self.exact_failures().next().is_none()
    }

    /// `check,config,kind,measured,reference,slack,verdict` with verdict
    /// `pass`, `FAIL` (exact) or `warn` (statistical).
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["check", "config", "kind", "measured", "reference", "slack", "verdict"])?;
        for c in &self.checks {
            let verdict = match (c.passed, c.kind) {
                (true, _) => "pass",
                (false, CheckKind::Exact) => "FAIL",
                (false, CheckKind::Statistical) => "warn",
            };
            let kind = match c.kind {
                CheckKind::Exact => "exact",
                CheckKind::Statistical => "statistical",
            };
            w.write_record([
                c.name.as_str(),
                c.config.as_str(),
                kind,
                &c.measured.to_string(),
                &c.reference.to_string(),
                &c.slack.to_string(),
                verdict,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let exact = self.checks.iter().filter(|c| c.kind == CheckKind::Exact).count();
        let stat = self.checks.len() - exact;
        let _ = writeln!(
            s,
            "exact checks: {}/{} passed; statistical checks: {}/{} passed",
            exact - self.exact_failures().count(),
            exact,
            stat - self.statistical_failures().count(),
            stat
        );
        for c in self.exact_failures().chain(self.statistical_failures()) {
            let _ = writeln!(
                s,
                "  {:?} {} [{}]: measured {} vs {} (slack {})",
                c.kind, c.name, c.config, c.measured, c.reference, c.slack
            );
        }
        s
    }
}

fn uniform(stream: &mut RandomStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * stream.uniform()
}

/// A random Gaussian ensemble and a normalized mixture target (`log Z = 0`).
///
/// `S = 1 + index mod 5`, `dim ∈ {1, 2, 5}` cycling every five configs.
pub fn random_config(seed: u64, index: usize) -> Result<(Target, Ensemble)> {
    let mut rng = SeedSpec::new(seed, format!("verify/config{index}")).stream();
    let s = 1 + index % 5;
    let dim = [1, 2, 5][(index / 5) % 3];
    let k = 3;
    let raw: Vec<f64> = (0..k).map(|_| uniform(&mut rng, 0.5, 1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let means = (0..k)
        .map(|_| (0..dim).map(|_| uniform(&mut rng, -3.0, 3.0)).collect())
        .collect();
    let sigmas = (0..k).map(|_| uniform(&mut rng, 0.8, 1.6)).collect();
    let target = Target::mixture(
        format!("random-mixture-{index}"),
        GaussianMixture::new(weights, means, sigmas)?,
    );
    let members = (0..s)
        .map(|i| {
            let mean = (0..dim).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
            let sig = (0..dim).map(|_| uniform(&mut rng, 0.6, 1.5)).collect();
            Ok(Member::new(format!("m{i}"), GaussianApprox::diagonal(mean, sig)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((target, Ensemble::new(members)?))
}

fn config_name(index: usize, ensemble: &Ensemble) -> String {
    format!("#{index} S={} d={}", ensemble.len(), ensemble.dim())
}

/// All ensemble-level values on a batch, for bitwise comparisons.
fn ensemble_values(batch: &SampleBatch, l_list: &[usize]) -> Result<Vec<f64>> {
    let mut v = vec![
        est::avg_elbo(batch)?,
        est::jsd(batch)?,
        est::kl_bar(batch)?,
        est::kl_mis(batch)?,
    ];
    for &l in l_list {
        v.push(est::miselbo(batch, l)?);
        v.push(est::avg_iwelbo(batch, l)?);
        v.push(est::delta(batch, l)?);
    }
    Ok(v)
}

fn max_rel(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| rel_err(a, b)).fold(0.0, f64::max)
}

/// Exact identities on one shared batch of `(target, ensemble)`.
pub fn identity_checks(
    target: &Target,
    ensemble: &Ensemble,
    seed: &SeedSpec,
    batch_l: usize,
    l_list: &[usize],
    name: &str,
) -> Result<Vec<Check>> {
    let batch = draw_batch(target, ensemble, batch_l, seed)?;
    let s_count = batch.num_members();
    let jsd = est::jsd(&batch)?;
    let mut checks = vec![
        Check::exact("delta1_equals_jsd", name, rel_err(est::delta(&batch, 1)?, jsd), EXACT_TOL),
        Check::exact(
            "kl_bar_minus_kl_mis_equals_jsd",
            name,
            rel_err(est::kl_bar(&batch)? - est::kl_mis(&batch)?, jsd),
            EXACT_TOL,
        ),
        Check::exact(
            "iwelbo1_equals_elbo",
            name,
            max_rel(
                (0..s_count)
                    .map(|s| Ok((est::iwelbo(&batch, s, 1)?, est::elbo(&batch, s)?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            EXACT_TOL,
        ),
    ];
    if s_count == 1 {
        checks.push(Check::exact(
            "miselbo_equals_iwelbo_single_member",
            name,
            max_rel(
                l_list
                    .iter()
                    .map(|&l| Ok((est::miselbo(&batch, l)?, est::iwelbo(&batch, 0, l)?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            EXACT_TOL,
        ));
    }

    // Identical members: the mixture equals each member, bit for bit.
    let first = &ensemble.members()[0].approx;
    let clones = Ensemble::new(
        (0..s_count.max(2))
            .map(|i| Member::new(format!("copy{i}"), first.clone()))
            .collect(),
    )?;
    let cb = draw_batch(target, &clones, batch_l, &seed.child("identical"))?;
    let mut identical_err = rel_err(est::jsd(&cb)?, 0.0);
    for &l in l_list {
        identical_err = identical_err
            .max(rel_err(est::miselbo(&cb, l)?, est::avg_iwelbo(&cb, l)?))
            .max(rel_err(est::delta(&cb, l)?, 0.0));
    }
    checks.push(Check::exact("identical_members_miselbo_equals_avg_iwelbo", name, identical_err, 0.0));

    // Reordering the members changes nothing.
    let reversed = Ensemble::new(ensemble.members().iter().rev().cloned().collect())?;
    let rb = draw_batch(target, &reversed, batch_l, seed)?;
    let a = ensemble_values(&batch, l_list)?;
    let b = ensemble_values(&rb, l_list)?;
    checks.push(Check::exact(
        "permutation_invariance",
        name,
        max_rel(a.iter().copied().zip(b.iter().copied())),
        0.0,
    ));

    // Constant shift of the target.
    let c = 1.75;
    let shifted = target.clone().with_offset(c);
    let sb = draw_batch(&shifted, ensemble, batch_l, seed)?;
    let mut shift_err = rel_err(est::avg_elbo(&sb)? - est::avg_elbo(&batch)?, c);
    for &l in l_list {
        shift_err = shift_err
            .max(rel_err(est::miselbo(&sb, l)? - est::miselbo(&batch, l)?, c))
            .max(rel_err(est::avg_iwelbo(&sb, l)? - est::avg_iwelbo(&batch, l)?, c));
    }
    checks.push(Check::exact("constant_shift_moves_bounds", name, shift_err, EXACT_TOL));
    let mut invariant_err = rel_err(
        est::kl_bar(&sb)? - est::kl_mis(&sb)?,
        est::kl_bar(&batch)? - est::kl_mis(&batch)?,
    );
    for &l in l_list {
        invariant_err = invariant_err.max(rel_err(est::delta(&sb, l)?, est::delta(&batch, l)?));
    }
    checks.push(Check::exact("constant_shift_keeps_divergences", name, invariant_err, EXACT_TOL));
    checks.push(Check::exact(
        "constant_shift_keeps_jsd_bitwise",
        name,
        rel_err(est::jsd(&sb)?, jsd),
        0.0,
    ));
    Ok(checks)
}

/// Per-replicate values used by [`bound_checks`].
struct ReplicateRow {
    delta1: f64,
    miselbo: Vec<f64>,
}

/// Statistical checks over `replicates` independent batches.
pub fn bound_checks(
    target: &Target,
    ensemble: &Ensemble,
    seed: &SeedSpec,
    cfg: &VerifyConfig,
    name: &str,
) -> Result<Vec<Check>> {
    let rows: Vec<ReplicateRow> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let b = draw_batch(target, ensemble, cfg.batch_l, &seed.child(format!("rep{r}")))?;
            Ok(ReplicateRow {
                delta1: est::delta(&b, 1)?,
                miselbo: cfg
                    .l_list
                    .iter()
                    .map(|&l| est::miselbo(&b, l))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    let log_s = (ensemble.len() as f64).ln();
    let d1: Vec<f64> = rows.iter().map(|r| r.delta1).collect();
    let (m, se) = mean_and_std_error(&d1);
    let mut checks = vec![
        Check::at_least("delta1_nonnegative", name, m, se, 0.0),
        Check::at_most("delta1_at_most_log_s", name, m, se, log_s),
    ];
    if let Some(log_z) = target.log_normalizer() {
        for (k, &l) in cfg.l_list.iter().enumerate() {
            let xs: Vec<f64> = rows.iter().map(|r| r.miselbo[k]).collect();
            let (m, se) = mean_and_std_error(&xs);
            checks.push(Check::at_most(&format!("miselbo_L{l}_at_most_log_z"), name, m, se, log_z));
        }
    }
    for k in 1..cfg.l_list.len() {
        let diffs: Vec<f64> = rows.iter().map(|r| r.miselbo[k] - r.miselbo[k - 1]).collect();
        let (m, se) = mean_and_std_error(&diffs);
        checks.push(Check::at_least(
            &format!("miselbo_nondecreasing_L{}_to_L{}", cfg.l_list[k - 1], cfg.l_list[k]),
            name,
            m,
            se,
            0.0,
        ));
    }
    Ok(checks)
}

/// The two limiting cases: disjoint members (`Δ₁ = log 2`) and identical members (`Δ₁ = 0`).
pub fn ordering_checks(seed: u64) -> Result<Vec<Check>> {
    let target = make_setting(SettingId::I);
    let disjoint = Ensemble::new(vec![
        Member::new("a", GaussianApprox::isotropic(vec![0.0], 1.0)?),
        Member::new("b", GaussianApprox::isotropic(vec![100.0], 1.0)?),
    ])?;
    let same = Ensemble::new(vec![
        Member::new("a", GaussianApprox::isotropic(vec![3.0], 1.0)?),
        Member::new("b", GaussianApprox::isotropic(vec![3.0], 1.0)?),
    ])?;
    let mut checks = Vec::new();
    for r in 0..10 {
        let sd = SeedSpec::new(seed, format!("ordering/rep{r}"));
        let b = draw_batch(&target, &disjoint, 20, &sd)?;
        let d1 = est::delta(&b, 1)?;
        checks.push(Check::exact(
            "disjoint_members_delta1_is_log2",
            &format!("rep{r}"),
            (d1 - std::f64::consts::LN_2).abs(),
            1e-6,
        ));
        let b = draw_batch(&target, &same, 20, &sd)?;
        checks.push(Check::exact(
            "identical_members_delta1_is_zero",
            &format!("rep{r}"),
            est::delta(&b, 1)?.abs(),
            0.0,
        ));
    }
    Ok(checks)
}

/// Central finite differences of the fixed-noise ELBO in every trainable parameter.
pub fn finite_difference_gradient(
    target: &Target,
    approx: &GaussianApprox,
    eps: &[f64],
    h: f64,
) -> Vec<f64> {
    let base = approx.params();
    (0..base.len())
        .map(|i| {
            let mut up = approx.clone();
            let mut p = base.clone();
            p[i] += h;
            up.set_params(&p);
            let mut down = approx.clone();
            p[i] = base[i] - h;
            down.set_params(&p);
            (elbo_at(target, &up, eps) - elbo_at(target, &down, eps)) / (2.0 * h)
        })
        .collect()
}

/// Random `(target, member)` pairs for the gradient check.
pub fn gradient_config(seed: u64, index: usize) -> Result<(Target, GaussianApprox)> {
    let mut rng = SeedSpec::new(seed, format!("gradient/config{index}")).stream();
    let target = match index % 5 {
        0 => make_setting(SettingId::I),
        1 => make_setting(SettingId::Iii),
        2 => make_energy(EnergyTarget2D::P1(P1Form::Reference)),
        3 => make_energy(EnergyTarget2D::P2(P2Form::AsPrinted)),
        _ => make_setting(SettingId::Hierarchical),
    };
    let d = target.dim();
    let mean: Vec<f64> = (0..d).map(|_| uniform(&mut rng, -2.5, 2.5)).collect();
    let approx = if index.is_multiple_of(2) {
        GaussianApprox::isotropic(mean, uniform(&mut rng, 0.4, 1.2))?
    } else {
        GaussianApprox::diagonal(mean, (0..d).map(|_| uniform(&mut rng, 0.4, 1.2)).collect())?
    };
    Ok((target, approx.with_trainable(Trainable::ALL)))
}

/// Norm-wise relative error between the reparameterized gradient and finite differences.
pub fn gradient_rel_error(target: &Target, approx: &GaussianApprox, eps: &[f64]) -> Result<f64> {
    let (_, g) = elbo_and_gradient_at(target, approx, eps, &GradientOptions::default())?;
    let fd = finite_difference_gradient(target, approx, eps, 1e-5);
    let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    Ok(if num == 0.0 { 0.0 } else { num / den })
}

pub fn gradient_checks(seed: u64, n: usize) -> Result<Vec<Check>> {
    (0..n)
        .map(|i| {
            let (target, approx) = gradient_config(seed, i)?;
            let eps = SeedSpec::new(seed, format!("gradient/eps{i}"))
                .stream()
                .standard_normal(1000 * approx.dim());
            let err = gradient_rel_error(&target, &approx, &eps)?;
            Ok(Check::exact(
                "reparam_gradient_matches_finite_differences",
                &format!("#{i} {}", target.name()),
                err,
                1e-4,
            ))
        })
        .collect()
}

/// Runs the whole suite.
pub fn verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let per_config: Vec<Vec<Check>> = (0..cfg.n_configs)
        .into_par_iter()
        .map(|i| {
            let (target, ensemble) = random_config(cfg.seed, i)?;
            let name = config_name(i, &ensemble);
            let seed = SeedSpec::new(cfg.seed, format!("verify/batch{i}"));
            let mut checks =
                identity_checks(&target, &ensemble, &seed, cfg.batch_l, &cfg.l_list, &name)?;
            checks.extend(bound_checks(&target, &ensemble, &seed.child("bounds"), cfg, &name)?);
            Ok(checks)
        })
        .collect::<Result<_>>()?;
    let mut checks: Vec<Check> = per_config.into_iter().flatten().collect();
    checks.extend(ordering_checks(cfg.seed)?);
    checks.extend(gradient_checks(cfg.seed, cfg.n_gradient_configs)?);
    Ok(VerifyReport { checks })
}
