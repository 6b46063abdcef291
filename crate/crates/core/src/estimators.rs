//! ELBO-family bounds and divergences evaluated on a shared [`SampleBatch`].
//!
//! Every estimator reads the same draws, so the algebraic relations between
//! them hold per batch rather than only in expectation:
//!
//! * `delta(b, 1) == jsd(b)` exactly,
//! * `kl_bar(b) - kl_mis(b) == jsd(b)` up to rounding,
//! * `miselbo(b, L) == iwelbo(b, 0, L)` when `S = 1`,
//! * `iwelbo(b, s, 1) == elbo(b, s)`,
//! * `miselbo(b, L) == avg_iwelbo(b, L)` bit-for-bit when all members are identical.
//!
//! Members are indexed by position in [`SampleBatch::labels`], which [`draw_batch`]
//! fills in label order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximations::Ensemble;
use crate::error::{Error, Result};
use crate::math::{log_mean_exp, mean, mean_and_std_error};
use crate::rng::SeedSpec;
use crate::targets::Target;

/// Draws `z[s][ℓ]` for every member with the full cross log-density table.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    labels: Vec<String>,
    dim: usize,
    l: usize,
    /// `[s][ℓ][j]`
    z: Vec<f64>,
    /// `[s'][s][ℓ]`: member `s'` evaluated at `z[s][ℓ]`.
    log_q: Vec<f64>,
    /// `[s][ℓ]`
    log_p: Vec<f64>,
    /// `[s][ℓ]`: `log((1/S) Σ_{s'} q_{s'}(z[s][ℓ]))`.
    log_mix: Vec<f64>,
}

impl SampleBatch {
    /// Builds a batch from precomputed tables.
    ///
    /// `z` may be empty when only the log-density tables matter (synthetic batches).
    pub fn from_tables(
        labels: Vec<String>,
        dim: usize,
        l: usize,
        z: Vec<f64>,
        log_q: Vec<f64>,
        log_p: Vec<f64>,
    ) -> Result<Self> {
        let s = labels.len();
        if s == 0 || l == 0 {
            return Err(Error::Usage("batch needs S >= 1 and L >= 1".into()));
        }
        if log_q.len() != s * s * l || log_p.len() != s * l {
            return Err(Error::Usage(format!(
                "table shapes {}x{} do not match S = {s}, L = {l}",
                log_q.len(),
                log_p.len()
            )));
        }
        if !z.is_empty() && z.len() != s * l * dim {
            return Err(Error::Usage(format!(
                "latent table has {} entries, expected {}",
                z.len(),
                s * l * dim
            )));
        }
        let mut log_mix = vec![0.0; s * l];
        let mut column = vec![0.0; s];
        for src in 0..s {
            for ell in 0..l {
                for (sp, c) in column.iter_mut().enumerate() {
                    *c = log_q[(sp * s + src) * l + ell];
                }
                log_mix[src * l + ell] = log_mean_exp(&column);
            }
        }
        Ok(Self {
            labels,
            dim,
            l,
            z,
            log_q,
            log_p,
            log_mix,
        })
    }

    pub fn num_members(&self) -> usize {
        self.labels.len()
    }

    pub fn samples_per_member(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn member_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Latent draw `ℓ` of member `s` (empty for synthetic batches).
    pub fn z(&self, s: usize, ell: usize) -> &[f64] {
        if self.z.is_empty() {
            return &[];
        }
        let start = (s * self.l + ell) * self.dim;
        &self.z[start..start + self.dim]
    }

    /// `log q_{s'}(z[s][ℓ])`.
    pub fn log_q(&self, s_prime: usize, s: usize, ell: usize) -> f64 {
        self.log_q[(s_prime * self.num_members() + s) * self.l + ell]
    }

    pub fn log_p(&self, s: usize, ell: usize) -> f64 {
        self.log_p[s * self.l + ell]
    }

    pub fn log_mix(&self, s: usize, ell: usize) -> f64 {
        self.log_mix[s * self.l + ell]
    }

    fn own_log_q(&self, s: usize) -> &[f64] {
        let start = (s * self.num_members() + s) * self.l;
        &self.log_q[start..start + self.l]
    }

    fn row_log_p(&self, s: usize) -> &[f64] {
        &self.log_p[s * self.l..(s + 1) * self.l]
    }

    fn row_log_mix(&self, s: usize) -> &[f64] {
        &self.log_mix[s * self.l..(s + 1) * self.l]
    }

    fn check_member(&self, s: usize) -> Result<()> {
        if s >= self.num_members() {
            return Err(Error::Usage(format!(
                "member index {s} out of range for S = {}",
                self.num_members()
            )));
        }
        Ok(())
    }

    fn check_group(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.l {
            return Err(Error::Usage(format!(
                "importance-sample count {l} must be in 1..={}",
                self.l
            )));
        }
        Ok(())
    }
}

/// Samples every member of `ensemble` `l` times and tabulates all densities.
///
/// Member `label` draws from `seed.child(label)`.
pub fn draw_batch(
    target: &Target,
    ensemble: &Ensemble,
    l: usize,
    seed: &SeedSpec,
) -> Result<SampleBatch> {
    if l == 0 {
        return Err(Error::Usage("L must be at least 1".into()));
    }
    target.check_dim(ensemble.dim())?;
    let members: Vec<_> = ensemble.canonical_members().collect();
    let s_count = members.len();
    let dim = ensemble.dim();

    let draws: Vec<Vec<f64>> = members
        .par_iter()
        .map(|m| {
            let mut stream = seed.child(&m.label).stream();
            m.approx.sample(&mut stream, l).z
        })
        .collect();
    let z: Vec<f64> = draws.concat();

    let log_p: Vec<f64> = z
        .par_chunks(dim)
        .map(|p| target.log_density_unchecked(p))
        .collect();

    let mut log_q = vec![0.0; s_count * s_count * l];
    log_q
        .par_chunks_mut(l)
        .enumerate()
        .for_each(|(pair, row)| {
            let (sp, src) = (pair / s_count, pair % s_count);
            let approx = &members[sp].approx;
            for (ell, out) in row.iter_mut().enumerate() {
                let start = (src * l + ell) * dim;
                *out = approx.log_density_unchecked(&z[start..start + dim]);
            }
        });

    let labels = members.iter().map(|m| m.label.clone()).collect();
    SampleBatch::from_tables(labels, dim, l, z, log_q, log_p)
}

/// Mean over consecutive groups of `l` of `log((1/l) Σ exp(w))`.
///
/// A trailing partial group (when `l` does not divide the row length) is dropped.
fn grouped_log_mean_exp(weights: &[f64], l: usize) -> f64 {
    let groups: Vec<f64> = weights.chunks_exact(l).map(log_mean_exp).collect();
    mean(&groups)
}

/// `(1/L) Σ_ℓ log p̃(z_ℓ) - log q_s(z_ℓ)`.
pub fn elbo(batch: &SampleBatch, s: usize) -> Result<f64> {
    batch.check_member(s)?;
    let w: Vec<f64> = log_weights(batch.row_log_p(s), batch.own_log_q(s));
    Ok(mean(&w))
}

fn log_weights(log_p: &[f64], log_q: &[f64]) -> Vec<f64> {
    log_p.iter().zip(log_q).map(|(p, q)| p - q).collect()
}

/// Importance-weighted ELBO of member `s` with `l` samples per group, averaged over
/// the `⌊L / l⌋` disjoint groups the batch holds.
pub fn iwelbo(batch: &SampleBatch, s: usize, l: usize) -> Result<f64> {
    batch.check_member(s)?;
    batch.check_group(l)?;
    let w = log_weights(batch.row_log_p(s), batch.own_log_q(s));
    Ok(grouped_log_mean_exp(&w, l))
}

/// Multiple-importance-sampling ELBO with balance-heuristic weights:
/// `(1/S) Σ_s log((1/l) Σ_ℓ p̃(z_sℓ) / ((1/S) Σ_j q_j(z_sℓ)))`.
pub fn miselbo(batch: &SampleBatch, l: usize) -> Result<f64> {
    batch.check_group(l)?;
    let per_member: Vec<f64> = (0..batch.num_members())
        .map(|s| {
            let w = log_weights(batch.row_log_p(s), batch.row_log_mix(s));
            grouped_log_mean_exp(&w, l)
        })
        .collect();
    Ok(mean(&per_member))
}

pub fn avg_elbo(batch: &SampleBatch) -> Result<f64> {
    let v = (0..batch.num_members())
        .map(|s| elbo(batch, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

pub fn avg_iwelbo(batch: &SampleBatch, l: usize) -> Result<f64> {
    let v = (0..batch.num_members())
        .map(|s| iwelbo(batch, s, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Jensen-Shannon divergence of the ensemble, estimated as
/// `(1/S) Σ_s (1/L) Σ_ℓ log q_s(z_sℓ) - log((1/S) Σ_j q_j(z_sℓ))`.
///
/// Uses all `S × L` draws; no dependence on the target.
pub fn jsd(batch: &SampleBatch) -> Result<f64> {
    let per_member: Vec<f64> = (0..batch.num_members())
        .map(|s| mean(&log_weights(batch.own_log_q(s), batch.row_log_mix(s))))
        .collect();
    Ok(mean(&per_member))
}

/// `miselbo(batch, l) - avg_iwelbo(batch, l)` on the same draws.
///
/// Evaluated group by group as `lme(u - log_mix) - lme(u - log q_s)` with
/// `u = log p̃ - max_group log p̃`, so the target enters only through differences
/// of its log-density. At `l = 1` the summands are exactly those of [`jsd`].
pub fn delta(batch: &SampleBatch, l: usize) -> Result<f64> {
    batch.check_group(l)?;
    let per_member: Vec<f64> = (0..batch.num_members())
        .map(|s| {
            let (lp, lq, lmix) = (batch.row_log_p(s), batch.own_log_q(s), batch.row_log_mix(s));
            let groups: Vec<f64> = (0..batch.l / l)
                .map(|g| {
                    let r = g * l..(g + 1) * l;
                    let top = lp[r.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if !top.is_finite() {
                        return log_mean_exp(&log_weights(&lp[r.clone()], &lmix[r.clone()]))
                            - log_mean_exp(&log_weights(&lp[r.clone()], &lq[r]));
                    }
                    let u: Vec<f64> = lp[r.clone()].iter().map(|p| p - top).collect();
                    log_mean_exp(&log_weights(&u, &lmix[r.clone()]))
                        - log_mean_exp(&log_weights(&u, &lq[r]))
                })
                .collect();
            mean(&groups)
        })
        .collect();
    Ok(mean(&per_member))
}

/// Mean of the members' unnormalized KL divergences to the target.
pub fn kl_bar(batch: &SampleBatch) -> Result<f64> {
    let per_member: Vec<f64> = (0..batch.num_members())
        .map(|s| mean(&log_weights(batch.own_log_q(s), batch.row_log_p(s))))
        .collect();
    Ok(mean(&per_member))
}

/// Unnormalized KL from the ensemble mixture to the target, with stratified
/// draws (`L` from each member).
pub fn kl_mis(batch: &SampleBatch) -> Result<f64> {
    let per_member: Vec<f64> = (0..batch.num_members())
        .map(|s| mean(&log_weights(batch.row_log_mix(s), batch.row_log_p(s))))
        .collect();
    Ok(mean(&per_member))
}

/// A named estimator, for reports and the command line.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    Elbo(String),
    Iwelbo(String),
    Miselbo,
    AvgElbo,
    AvgIwelbo,
    Jsd,
    Delta,
    KlMis,
    KlBar,
}

impl Estimator {
    /// Every ensemble-level estimator, in report order.
    pub const ENSEMBLE: [Estimator; 7] = [
        Estimator::Miselbo,
        Estimator::AvgElbo,
        Estimator::AvgIwelbo,
        Estimator::Delta,
        Estimator::Jsd,
        Estimator::KlMis,
        Estimator::KlBar,
    ];

    /// Evaluates on `batch`; `l` is the importance-sample group size where used.
    pub fn evaluate(&self, batch: &SampleBatch, l: usize) -> Result<f64> {
        let index = |label: &str| {
            batch
                .member_index(label)
                .ok_or_else(|| Error::Usage(format!("no member labelled '{label}'")))
        };
        match self {
            Estimator::Elbo(label) => elbo(batch, index(label)?),
            Estimator::Iwelbo(label) => iwelbo(batch, index(label)?, l),
            Estimator::Miselbo => miselbo(batch, l),
            Estimator::AvgElbo => avg_elbo(batch),
            Estimator::AvgIwelbo => avg_iwelbo(batch, l),
            Estimator::Jsd => jsd(batch),
            Estimator::Delta => delta(batch, l),
            Estimator::KlMis => kl_mis(batch),
            Estimator::KlBar => kl_bar(batch),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Elbo(label) => write!(f, "elbo:{label}"),
            Estimator::Iwelbo(label) => write!(f, "iwelbo:{label}"),
            Estimator::Miselbo => f.write_str("miselbo"),
            Estimator::AvgElbo => f.write_str("avg_elbo"),
            Estimator::AvgIwelbo => f.write_str("avg_iwelbo"),
            Estimator::Jsd => f.write_str("jsd"),
            Estimator::Delta => f.write_str("delta"),
            Estimator::KlMis => f.write_str("kl_mis"),
            Estimator::KlBar => f.write_str("kl_bar"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(label) = s.strip_prefix("elbo:") {
            return Ok(Estimator::Elbo(label.to_owned()));
        }
        if let Some(label) = s.strip_prefix("iwelbo:") {
            return Ok(Estimator::Iwelbo(label.to_owned()));
        }
        Estimator::ENSEMBLE
            .iter()
            .find(|e| e.to_string() == s)
            .cloned()
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown estimator '{s}'; expected one of miselbo, avg_elbo, avg_iwelbo, \
                     delta, jsd, kl_mis, kl_bar, elbo:<label>, iwelbo:<label>"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub s: usize,
    pub l: usize,
    pub n_replicates: usize,
    pub seed: u64,
}

/// Replicate mean with its Monte-Carlo standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    pub std_error: f64,
    pub config: EstimateConfig,
}

impl BoundEstimate {
    pub fn from_replicates(values: &[f64], config: EstimateConfig) -> Self {
        let (value, std_error) = mean_and_std_error(values);
        Self {
            value,
            std_error,
            config,
        }
    }
}

/// Per-replicate values and their summary for one estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateEstimates {
    pub estimator: Estimator,
    pub values: Vec<f64>,
    pub summary: BoundEstimate,
}

/// Evaluates `estimators` on `replicates` independent batches of `l` draws per member.
///
/// Replicate `r` uses `seed.child("rep{r}")`.
pub fn estimate_replicates(
    target: &Target,
    ensemble: &Ensemble,
    estimators: &[Estimator],
    l: usize,
    replicates: usize,
    seed: &SeedSpec,
) -> Result<Vec<ReplicateEstimates>> {
    if replicates == 0 {
        return Err(Error::Usage("need at least one replicate".into()));
    }
    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let batch = draw_batch(target, ensemble, l, &seed.child(format!("rep{r}")))?;
            estimators.iter().map(|e| e.evaluate(&batch, l)).collect()
        })
        .collect::<Result<_>>()?;
    let config = EstimateConfig {
        s: ensemble.len(),
        l,
        n_replicates: replicates,
        seed: seed.root_seed,
    };
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let values: Vec<f64> = per_rep.iter().map(|row| row[k]).collect();
            ReplicateEstimates {
                estimator: e.clone(),
                summary: BoundEstimate::from_replicates(&values, config.clone()),
                values,
            }
        })
        .collect())
}
