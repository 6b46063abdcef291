//! Variational members and the equally weighted ensemble `Q_S`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_mean_exp, normal_log_pdf, LN_2PI};
use crate::rng::RandomStream;
use crate::targets::MeanSpec;

/// Which parameters receive gradients during fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub mean: bool,
    pub scale: bool,
}

impl Trainable {
    pub const MEAN_ONLY: Trainable = Trainable {
        mean: true,
        scale: false,
    };
    pub const ALL: Trainable = Trainable {
        mean: true,
        scale: true,
    };

    pub fn any(&self) -> bool {
        self.mean || self.scale
    }
}

/// Gaussian member `N(mean, diag(scale²))` with isotropic or diagonal scale.
///
/// Scales are held as logarithms so unconstrained updates keep them positive.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianApprox {
    mean: Vec<f64>,
    /// Length 1 (isotropic) or `dim` (diagonal).
    log_scale: Vec<f64>,
    pub trainable: Trainable,
}

/// Reparameterized draws `z = mean + scale ⊙ ε`, row-major `n × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamSample {
    pub dim: usize,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

impl ReparamSample {
    pub fn len(&self) -> usize {
        self.z.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_scale(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("scale must be positive and finite, got {sigma}")))
    }
}

impl GaussianApprox {
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        check_scale(sigma)?;
        if mean.is_empty() {
            return Err(Error::Config("mean must have at least one coordinate".into()));
        }
        Ok(Self {
            mean,
            log_scale: vec![sigma.ln()],
            trainable: Trainable::MEAN_ONLY,
        })
    }

    pub fn diagonal(mean: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || sigmas.len() != mean.len() {
            return Err(Error::Config(format!(
                "diagonal scale needs {} entries, got {}",
                mean.len(),
                sigmas.len()
            )));
        }
        for &s in &sigmas {
            check_scale(s)?;
        }
        Ok(Self {
            mean,
            log_scale: sigmas.iter().map(|s| s.ln()).collect(),
            trainable: Trainable::MEAN_ONLY,
        })
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_isotropic(&self) -> bool {
        self.log_scale.len() == 1
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    /// Standard deviation along coordinate `j`.
    pub fn sigma(&self, j: usize) -> f64 {
        self.log_scale_at(j).exp()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.sigma(j)).collect()
    }

    fn log_scale_at(&self, j: usize) -> f64 {
        if self.is_isotropic() {
            self.log_scale[0]
        } else {
            self.log_scale[j]
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.log_density_unchecked(z))
    }

    pub fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        let mut acc = -0.5 * LN_2PI * self.dim() as f64;
        for (j, (&zj, &mj)) in z.iter().zip(&self.mean).enumerate() {
            let ls = self.log_scale_at(j);
            let u = (zj - mj) / ls.exp();
            acc -= 0.5 * u * u + ls;
        }
        acc
    }

    /// Differential entropy `Σ_j log σ_j + (d/2)(1 + ln 2π)`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        (0..self.dim()).map(|j| self.log_scale_at(j)).sum::<f64>() + 0.5 * d * (1.0 + LN_2PI)
    }

    /// Maps standard-normal noise (row-major `n × dim`) to samples.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let d = self.dim();
        eps.iter()
            .enumerate()
            .map(|(i, &e)| {
                let j = i % d;
                self.mean[j] + self.sigma(j) * e
            })
            .collect()
    }

    pub fn reparam_sample(&self, stream: &mut RandomStream, n: usize) -> ReparamSample {
        let eps = stream.standard_normal(n * self.dim());
        ReparamSample {
            dim: self.dim(),
            z: self.transform(&eps),
            eps,
        }
    }

    /// Trainable parameters flattened as `[mean.., log_scale..]`, honoring the mask.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        if self.trainable.mean {
            p.extend_from_slice(&self.mean);
        }
        if self.trainable.scale {
            p.extend_from_slice(&self.log_scale);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut rest = p;
        if self.trainable.mean {
            let (head, tail) = rest.split_at(self.mean.len());
            self.mean.copy_from_slice(head);
            rest = tail;
        }
        if self.trainable.scale {
            let (head, tail) = rest.split_at(self.log_scale.len());
            self.log_scale.copy_from_slice(head);
            rest = tail;
        }
        debug_assert!(rest.is_empty());
    }
}

/// `q(z, μ) = N(μ; mu_mean, mu_sd²) · N(z; μ, cond_sd²)` over coordinates `(z, μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalApprox {
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub cond_sd: f64,
}

impl HierarchicalApprox {
    pub fn new(mu_mean: f64, mu_variance: f64, cond_variance: f64) -> Result<Self> {
        check_scale(mu_variance)?;
        check_scale(cond_variance)?;
        Ok(Self {
            mu_mean,
            mu_sd: mu_variance.sqrt(),
            cond_sd: cond_variance.sqrt(),
        })
    }

    pub fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let (z, mu) = (x[0], x[1]);
        normal_log_pdf(mu, self.mu_mean, self.mu_sd) + normal_log_pdf(z, mu, self.cond_sd)
    }

    /// Ancestral sampling: `μ ~ q(μ)`, then `z ~ q(z | μ)`.
    pub fn sample(&self, stream: &mut RandomStream, n: usize) -> ReparamSample {
        let mut z = Vec::with_capacity(2 * n);
        let mut eps = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let e_mu = stream.normal();
            let e_z = stream.normal();
            let mu = self.mu_mean + self.mu_sd * e_mu;
            z.push(mu + self.cond_sd * e_z);
            z.push(mu);
            eps.push(e_z);
            eps.push(e_mu);
        }
        ReparamSample { dim: 2, z, eps }
    }
}

/// A variational family member.
#[derive(Clone, Debug, PartialEq)]
pub enum Approx {
    Gaussian(GaussianApprox),
    Hierarchical(HierarchicalApprox),
}

impl Approx {
    pub fn dim(&self) -> usize {
        match self {
            Approx::Gaussian(g) => g.dim(),
            Approx::Hierarchical(_) => 2,
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.log_density_unchecked(z))
    }

    pub fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        match self {
            Approx::Gaussian(g) => g.log_density_unchecked(z),
            Approx::Hierarchical(h) => h.log_density_unchecked(z),
        }
    }

    pub fn sample(&self, stream: &mut RandomStream, n: usize) -> ReparamSample {
        match self {
            Approx::Gaussian(g) => g.reparam_sample(stream, n),
            Approx::Hierarchical(h) => h.sample(stream, n),
        }
    }
}

impl From<GaussianApprox> for Approx {
    fn from(g: GaussianApprox) -> Self {
        Approx::Gaussian(g)
    }
}

impl From<HierarchicalApprox> for Approx {
    fn from(h: HierarchicalApprox) -> Self {
        Approx::Hierarchical(h)
    }
}

/// A labelled ensemble member. The label also keys the member's random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub label: String,
    pub approx: Approx,
}

impl Member {
    pub fn new(label: impl Into<String>, approx: impl Into<Approx>) -> Self {
        Self {
            label: label.into(),
            approx: approx.into(),
        }
    }
}

/// Equally weighted ensemble of `S ≥ 1` members over a common space.
///
/// Reductions over members always run in label order, so results do not depend
/// on the order members were supplied in.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<Member>,
    canonical: Vec<usize>,
}

impl Ensemble {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let dim = members[0].approx.dim();
        if let Some(m) = members.iter().find(|m| m.approx.dim() != dim) {
            return Err(Error::Config(format!(
                "member '{}' has dimension {}, expected {dim}",
                m.label,
                m.approx.dim()
            )));
        }
        let mut seen = HashSet::new();
        for m in &members {
            if m.label.is_empty() {
                return Err(Error::Config("member labels must be nonempty".into()));
            }
            if !seen.insert(m.label.as_str()) {
                return Err(Error::Config(format!("duplicate member label '{}'", m.label)));
            }
        }
        let mut canonical: Vec<usize> = (0..members.len()).collect();
        canonical.sort_by(|&a, &b| members[a].label.cmp(&members[b].label));
        Ok(Self { members, canonical })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].approx.dim()
    }

    /// Members in the order supplied.
    pub fn members(&self) -> &[Member] {
        &self.members
    }

    /// Members sorted by label.
    pub fn canonical_members(&self) -> impl Iterator<Item = &Member> + '_ {
        self.canonical.iter().map(move |&i| &self.members[i])
    }

    pub fn member(&self, label: &str) -> Option<&Member> {
        self.members.iter().find(|m| m.label == label)
    }

    /// `log((1/S) Σ_s q_s(z))`.
    pub fn mixture_log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let terms: Vec<f64> = self
            .canonical_members()
            .map(|m| m.approx.log_density_unchecked(z))
            .collect();
        Ok(log_mean_exp(&terms))
    }
}

/// Member scale in a config file: scalar (isotropic) or per-coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Hierarchical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainableParam {
    Mean,
    Sigma,
}

/// Config-file member: `{label, family, mean, sigma, trainable}`.
///
/// For `family = "hierarchical"`, `mean` is the mean of `q(μ)`, `sigma` its
/// standard deviation, and `cond_sigma` the standard deviation of `q(z | μ)`
/// (default 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub label: String,
    #[serde(default = "default_family")]
    pub family: Family,
    pub mean: MeanSpec,
    pub sigma: SigmaSpec,
    #[serde(default = "default_trainable")]
    pub trainable: Vec<TrainableParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_sigma: Option<f64>,
}

fn default_family() -> Family {
    Family::Gaussian
}

fn default_trainable() -> Vec<TrainableParam> {
    vec![TrainableParam::Mean]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl MemberSpec {
    pub fn build(&self) -> Result<Member> {
        let trainable = Trainable {
            mean: self.trainable.contains(&TrainableParam::Mean),
            scale: self.trainable.contains(&TrainableParam::Sigma),
        };
        let approx: Approx = match self.family {
            Family::Gaussian => {
                let mean = self.mean.clone().into_vec();
                let g = match &self.sigma {
                    SigmaSpec::Scalar(s) => GaussianApprox::isotropic(mean, *s)?,
                    SigmaSpec::Vector(v) => GaussianApprox::diagonal(mean, v.clone())?,
                };
                g.with_trainable(trainable).into()
            }
            Family::Hierarchical => {
                let mu_mean = match &self.mean {
                    MeanSpec::Scalar(m) => *m,
                    MeanSpec::Vector(v) if v.len() == 1 => v[0],
                    MeanSpec::Vector(_) => {
                        return Err(Error::Config("hierarchical mean must be a scalar".into()))
                    }
                };
                let sd = match &self.sigma {
                    SigmaSpec::Scalar(s) => *s,
                    SigmaSpec::Vector(_) => {
                        return Err(Error::Config("hierarchical sigma must be a scalar".into()))
                    }
                };
                let cond = self.cond_sigma.unwrap_or(1.0);
                HierarchicalApprox::new(mu_mean, sd * sd, cond * cond)?.into()
            }
        };
        Ok(Member::new(self.label.clone(), approx))
    }

    pub fn from_member(m: &Member) -> Self {
        match &m.approx {
            Approx::Gaussian(g) => {
                let mut trainable = Vec::new();
                if g.trainable.mean {
                    trainable.push(TrainableParam::Mean);
                }
                if g.trainable.scale {
                    trainable.push(TrainableParam::Sigma);
                }
                MemberSpec {
                    label: m.label.clone(),
                    family: Family::Gaussian,
                    mean: MeanSpec::Vector(g.mean().to_vec()),
                    sigma: if g.is_isotropic() {
                        SigmaSpec::Scalar(g.sigma(0))
                    } else {
                        SigmaSpec::Vector(g.sigmas())
                    },
                    trainable,
                    cond_sigma: None,
                }
            }
            Approx::Hierarchical(h) => MemberSpec {
                label: m.label.clone(),
                family: Family::Hierarchical,
                mean: MeanSpec::Scalar(h.mu_mean),
                sigma: SigmaSpec::Scalar(h.mu_sd),
                trainable: Vec::new(),
                cond_sigma: Some(h.cond_sd),
            },
        }
    }
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<Ensemble> {
        Ensemble::new(self.members.iter().map(MemberSpec::build).collect::<Result<_>>()?)
    }

    pub fn from_ensemble(e: &Ensemble) -> Self {
        Self {
            members: e.members().iter().map(MemberSpec::from_member).collect(),
        }
    }
}
