//! Unnormalized log-density targets.
//!
//! Built-in settings:
//!
//! | id             | density                                                          |
//! |----------------|------------------------------------------------------------------|
//! | `i`            | uniform mixture, means {-5, 0, 5, 10, 15, 20}, σ = 0.5           |
//! | `ii`           | uniform mixture, means {0, 10, 20}, σ = 1.1                      |
//! | `iii`          | ½ N(0, 4) + ½ N(10, 16)                                          |
//! | `hierarchical` | p(z, μ) = p_i(z) · N(μ; 10, 9), coordinates ordered (z, μ)       |
//! | `p1`, `p2`     | unnormalized 2-D energy targets, see [`P1Form`] and [`P2Form`]   |
//!
//! In `N(a, b)` the second argument is a **variance**: setting `iii` has component
//! standard deviations 2 and 4, and the hierarchical prior on μ has standard
//! deviation 3. Settings `i` and `ii` are stated with standard deviations directly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, normal_log_pdf, LN_2PI};

/// Closure type for user-supplied log-densities.
pub type LogDensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Finite-mixture of isotropic Gaussians over `R^dim`. Normalized by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
    #[serde(skip)]
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigmas: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || sigmas.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching nonempty weights/means/sigmas, got {}/{}/{}",
                k,
                means.len(),
                sigmas.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if sigmas.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Config("mixture sigmas must be strictly positive".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            means,
            sigmas,
            log_weights,
        })
    }

    /// Equal-weight mixture of 1-D components.
    pub fn uniform_1d(means: &[f64], sigmas: &[f64]) -> Result<Self> {
        let k = means.len();
        Self::new(
            vec![1.0 / k as f64; k],
            means.iter().map(|&m| vec![m]).collect(),
            sigmas.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn component_log_terms(&self, z: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.sigmas)
            .zip(&self.log_weights)
            .map(|((m, &s), &lw)| {
                let sq: f64 = z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                lw - 0.5 * sq / (s * s) - z.len() as f64 * (s.ln() + 0.5 * LN_2PI)
            })
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        logsumexp(&self.component_log_terms(z))
    }

    fn grad(&self, z: &[f64], out: &mut [f64]) {
        let terms = self.component_log_terms(z);
        let lse = logsumexp(&terms);
        out.iter_mut().for_each(|g| *g = 0.0);
        for ((t, m), &s) in terms.iter().zip(&self.means).zip(&self.sigmas) {
            let r = (t - lse).exp();
            for ((g, &zj), &mj) in out.iter_mut().zip(z).zip(m) {
                *g += r * (mj - zj) / (s * s);
            }
        }
    }
}

/// Which reading of the ring-shaped 2-D target to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum P1Form {
    /// `-½((‖z‖-2)/0.4)² - (exp(-(z₁-2)/1.2) + exp(-(z₁+2)/1.2))`.
    #[default]
    AsPrinted,
    /// As printed, but with the exponent arguments squared:
    /// `-½((‖z‖-2)/0.4)² - (exp(-((z₁-2)/1.2)²) + exp(-((z₁+2)/1.2)²))`.
    SquaredExponent,
    /// The two-mode ring from the normalizing-flow benchmark suite:
    /// `-½((‖z‖-2)/0.4)² + ln(exp(-½((z₁-2)/0.6)²) + exp(-½((z₁+2)/0.6)²))`.
    Reference,
}

/// Which reading of the sinusoidal 2-D target to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum P2Form {
    /// `-½ (z₂ - w(z))² / 0.4` with `w(z) = sin(2π z₁ / 4)`.
    #[default]
    AsPrinted,
    /// The benchmark-suite form `-½ ((z₂ - w(z)) / 0.4)²`.
    Reference,
}

/// Unnormalized 2-D energy targets. No log-normalizer is known for either.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", content = "form", rename_all = "lowercase")]
pub enum EnergyTarget2D {
    P1(P1Form),
    P2(P2Form),
}

impl EnergyTarget2D {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let (z1, z2) = (z[0], z[1]);
        match *self {
            EnergyTarget2D::P1(form) => {
                let r = (z1 * z1 + z2 * z2).sqrt();
                let ring = -0.5 * ((r - 2.0) / 0.4).powi(2);
                let side = match form {
                    P1Form::AsPrinted => {
                        -((-(z1 - 2.0) / 1.2).exp() + (-(z1 + 2.0) / 1.2).exp())
                    }
                    P1Form::SquaredExponent => {
                        -((-((z1 - 2.0) / 1.2).powi(2)).exp() + (-((z1 + 2.0) / 1.2).powi(2)).exp())
                    }
                    P1Form::Reference => logsumexp(&[
                        -0.5 * ((z1 - 2.0) / 0.6).powi(2),
                        -0.5 * ((z1 + 2.0) / 0.6).powi(2),
                    ]),
                };
                ring + side
            }
            EnergyTarget2D::P2(form) => {
                let w = (std::f64::consts::FRAC_PI_2 * z1).sin();
                let d = z2 - w;
                match form {
                    P2Form::AsPrinted => -0.5 * d * d / 0.4,
                    P2Form::Reference => -0.5 * (d / 0.4).powi(2),
                }
            }
        }
    }

    fn grad(&self, z: &[f64], out: &mut [f64]) {
        let (z1, z2) = (z[0], z[1]);
        match *self {
            EnergyTarget2D::P1(form) => {
                let r = (z1 * z1 + z2 * z2).sqrt();
                // The ring term is not differentiable at the origin; use 0 there.
                let (g1, g2) = if r > 0.0 {
                    let c = -(r - 2.0) / (0.16 * r);
                    (c * z1, c * z2)
                } else {
                    (0.0, 0.0)
                };
                let side = match form {
                    P1Form::AsPrinted => {
                        ((-(z1 - 2.0) / 1.2).exp() + (-(z1 + 2.0) / 1.2).exp()) / 1.2
                    }
                    P1Form::SquaredExponent => {
                        let a = (z1 - 2.0) / 1.2;
                        let b = (z1 + 2.0) / 1.2;
                        (2.0 * a * (-a * a).exp() + 2.0 * b * (-b * b).exp()) / 1.2
                    }
                    P1Form::Reference => {
                        let a = (z1 - 2.0) / 0.6;
                        let b = (z1 + 2.0) / 0.6;
                        let la = -0.5 * a * a;
                        let lb = -0.5 * b * b;
                        let lse = logsumexp(&[la, lb]);
                        -((la - lse).exp() * a + (lb - lse).exp() * b) / 0.6
                    }
                };
                out[0] = g1 + side;
                out[1] = g2;
            }
            EnergyTarget2D::P2(form) => {
                let k = std::f64::consts::FRAC_PI_2;
                let w = (k * z1).sin();
                let dw = k * (k * z1).cos();
                let scale = match form {
                    P2Form::AsPrinted => 0.4,
                    P2Form::Reference => 0.16,
                };
                let d = (z2 - w) / scale;
                out[0] = d * dw;
                out[1] = -d;
            }
        }
    }
}

/// `p(z, μ) = p(z) p(μ)` over coordinates `(z, μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalTarget {
    pub p_z: GaussianMixture,
    pub mu_mean: f64,
    pub mu_variance: f64,
}

impl HierarchicalTarget {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.p_z.log_density(&z[..1]) + normal_log_pdf(z[1], self.mu_mean, self.mu_variance.sqrt())
    }

    fn grad(&self, z: &[f64], out: &mut [f64]) {
        self.p_z.grad(&z[..1], &mut out[..1]);
        out[1] = (self.mu_mean - z[1]) / self.mu_variance;
    }
}

#[derive(Clone)]
pub enum TargetKind {
    Mixture(GaussianMixture),
    Energy(EnergyTarget2D),
    Hierarchical(HierarchicalTarget),
    /// Arbitrary log-density without an analytic gradient.
    Custom {
        dim: usize,
        log_density: LogDensityFn,
        log_normalizer: Option<f64>,
    },
}

impl fmt::Debug for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetKind::Mixture(m) => f.debug_tuple("Mixture").field(m).finish(),
            TargetKind::Energy(e) => f.debug_tuple("Energy").field(e).finish(),
            TargetKind::Hierarchical(h) => f.debug_tuple("Hierarchical").field(h).finish(),
            TargetKind::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish(),
        }
    }
}

/// An unnormalized log-density `log p̃(z)` over `R^dim`, plus an additive offset.
#[derive(Clone, Debug)]
pub struct Target {
    name: String,
    kind: TargetKind,
    offset: f64,
}

impl Target {
    pub fn new(name: impl Into<String>, kind: TargetKind) -> Self {
        Self {
            name: name.into(),
            kind,
            offset: 0.0,
        }
    }

    pub fn mixture(name: impl Into<String>, mixture: GaussianMixture) -> Self {
        Self::new(name, TargetKind::Mixture(mixture))
    }

    pub fn custom(
        name: impl Into<String>,
        dim: usize,
        log_normalizer: Option<f64>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            name,
            TargetKind::Custom {
                dim,
                log_density: Arc::new(f),
                log_normalizer,
            },
        )
    }

    /// The same density with `c` added to its log (so `log Z` shifts by `c`).
    pub fn with_offset(mut self, c: f64) -> Self {
        self.offset += c;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TargetKind::Mixture(m) => m.dim(),
            TargetKind::Energy(_) | TargetKind::Hierarchical(_) => 2,
            TargetKind::Custom { dim, .. } => *dim,
        }
    }

    /// `log Z`, when it is known.
    pub fn log_normalizer(&self) -> Option<f64> {
        let base = match &self.kind {
            TargetKind::Mixture(_) | TargetKind::Hierarchical(_) => Some(0.0),
            TargetKind::Energy(_) => None,
            TargetKind::Custom { log_normalizer, .. } => *log_normalizer,
        };
        base.map(|b| b + self.offset)
    }

    pub fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        Ok(self.log_density_unchecked(z))
    }

    /// Like [`Target::log_density`] without the dimension check.
    pub fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        let base = match &self.kind {
            TargetKind::Mixture(m) => m.log_density(z),
            TargetKind::Energy(e) => e.log_density(z),
            TargetKind::Hierarchical(h) => h.log_density(z),
            TargetKind::Custom { log_density, .. } => log_density(z),
        };
        base + self.offset
    }

    pub fn has_analytic_gradient(&self) -> bool {
        !matches!(self.kind, TargetKind::Custom { .. })
    }

    /// Writes `∇ log p̃(z)` into `out`. Returns `false` when no closed form exists.
    pub fn grad_log_density(&self, z: &[f64], out: &mut [f64]) -> bool {
        match &self.kind {
            TargetKind::Mixture(m) => m.grad(z, out),
            TargetKind::Energy(e) => e.grad(z, out),
            TargetKind::Hierarchical(h) => h.grad(z, out),
            TargetKind::Custom { .. } => return false,
        }
        true
    }

    /// Central finite differences of the log-density with per-coordinate step `h`.
    pub fn grad_log_density_fd(&self, z: &[f64], h: f64, out: &mut [f64]) {
        let mut probe = z.to_vec();
        for j in 0..z.len() {
            probe[j] = z[j] + h;
            let up = self.log_density_unchecked(&probe);
            probe[j] = z[j] - h;
            let down = self.log_density_unchecked(&probe);
            probe[j] = z[j];
            out[j] = (up - down) / (2.0 * h);
        }
    }
}

/// Built-in target identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingId {
    I,
    Ii,
    Iii,
    Hierarchical,
    P1,
    P2,
}

impl SettingId {
    pub const ALL: [SettingId; 6] = [
        SettingId::I,
        SettingId::Ii,
        SettingId::Iii,
        SettingId::Hierarchical,
        SettingId::P1,
        SettingId::P2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SettingId::I => "i",
            SettingId::Ii => "ii",
            SettingId::Iii => "iii",
            SettingId::Hierarchical => "hierarchical",
            SettingId::P1 => "p1",
            SettingId::P2 => "p2",
        }
    }
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SettingId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SettingId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = SettingId::ALL.iter().map(|id| id.as_str()).collect();
                Error::Config(format!("unknown target '{s}'; valid ids: {}", valid.join(", ")))
            })
    }
}

fn setting_i_mixture() -> GaussianMixture {
    GaussianMixture::uniform_1d(&[-5.0, 0.0, 5.0, 10.0, 15.0, 20.0], &[0.5; 6])
        .expect("valid built-in mixture")
}

/// Builds a built-in target. `p1`/`p2` use their as-printed forms; see
/// [`make_energy`] for the alternatives.
pub fn make_setting(id: SettingId) -> Target {
    let mixture = |m: GaussianMixture| Target::mixture(id.as_str(), m);
    match id {
        SettingId::I => mixture(setting_i_mixture()),
        SettingId::Ii => mixture(
            GaussianMixture::uniform_1d(&[0.0, 10.0, 20.0], &[1.1; 3]).expect("valid built-in"),
        ),
        SettingId::Iii => mixture(
            GaussianMixture::uniform_1d(&[0.0, 10.0], &[2.0, 4.0]).expect("valid built-in"),
        ),
        SettingId::Hierarchical => Target::new(
            id.as_str(),
            TargetKind::Hierarchical(HierarchicalTarget {
                p_z: setting_i_mixture(),
                mu_mean: 10.0,
                mu_variance: 9.0,
            }),
        ),
        SettingId::P1 => make_energy(EnergyTarget2D::P1(P1Form::AsPrinted)),
        SettingId::P2 => make_energy(EnergyTarget2D::P2(P2Form::AsPrinted)),
    }
}

/// [`make_setting`] from a string id.
pub fn make_setting_str(id: &str) -> Result<Target> {
    Ok(make_setting(id.parse()?))
}

pub fn make_energy(energy: EnergyTarget2D) -> Target {
    let name = match energy {
        EnergyTarget2D::P1(_) => "p1",
        EnergyTarget2D::P2(_) => "p2",
    };
    Target::new(name, TargetKind::Energy(energy))
}

/// A mean entry in a config file: a scalar for 1-D components or a vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl MeanSpec {
    pub fn into_vec(self) -> Vec<f64> {
        match self {
            MeanSpec::Scalar(x) => vec![x],
            MeanSpec::Vector(v) => v,
        }
    }
}

/// Declarative mixture: `{weights, means, sigmas}`. Missing weights mean uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub means: Vec<MeanSpec>,
    pub sigmas: Vec<f64>,
}

impl MixtureSpec {
    pub fn build(self, name: impl Into<String>) -> Result<Target> {
        let k = self.means.len();
        let weights = self.weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let means = self.means.into_iter().map(MeanSpec::into_vec).collect();
        Ok(Target::mixture(name, GaussianMixture::new(weights, means, self.sigmas)?))
    }
}
