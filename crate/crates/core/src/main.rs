use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use miselbo::approximations::{Approx, Ensemble, EnsembleSpec, Member};
use miselbo::config::{load_ensemble, parse_target_id, RunConfig};
use miselbo::estimators::{estimate_replicates, Estimator};
use miselbo::experiments::{
    self, emit_plot, run_511, run_512_hier, run_512_shift, Budget, EnergyVariant, PlotKind, Report,
    Reproduce511Config, SweepSpec, VerifyConfig,
};
use miselbo::rng::SeedSpec;
use miselbo::targets::{SettingId, Target};
use miselbo::training::{fit_ensemble, FitConfig, FitResult, MemberInit};

/// Ensembles of variational approximations and the MISELBO family of bounds.
#[derive(Parser, Debug)]
#[command(name = "miselbo", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit each member by ELBO ascent with Adam.
    Fit(FitArgs),
    /// Evaluate estimators on replicate batches of an ensemble.
    Estimate(EstimateArgs),
    /// Sweep the mean of one member against a 1-D mixture setting.
    SweepShift(SweepArgs),
    /// Sweep the μ-variance of one hierarchical member.
    SweepHier(SweepArgs),
    /// Fit and evaluate the 2-D energy ensembles (KL_MIS, KL-bar, JSD).
    #[command(name = "reproduce-511")]
    Reproduce511(ReproduceArgs),
    /// Run the identity and bound verification suite.
    Verify(VerifyArgs),
    /// Render a sweep CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Target id (`i`, `ii`, `iii`, `hierarchical`, `p1`, `p2`, `p1:reference`, ...).
    #[arg(long)]
    target: Option<String>,
    /// Initial ensemble (TOML `[[members]]` or JSON).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Monte-Carlo samples per iteration.
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fitted ensemble (JSON).
    #[arg(long)]
    out: PathBuf,
    /// ELBO traces CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fitted parameters CSV; defaults to `<out>.params.csv`.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    target: Option<String>,
    /// Ensemble (TOML `[[members]]` or JSON from `fit`).
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Draws per member per batch.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Estimator to report; repeatable. Defaults to all ensemble estimators plus per-member ELBO/IWELBO.
    #[arg(long = "estimator")]
    estimators: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Setting for the shift sweep (`i`, `ii`, `iii`).
    #[arg(long)]
    setting: Option<String>,
    /// Comma-separated grid of swept values.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Comma-separated importance-sample counts.
    #[arg(long = "L", value_delimiter = ',')]
    l_list: Option<Vec<usize>>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Minimum draws per member per batch (rounded up to a multiple of every L).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write an overlay plot of `delta` with the JSD series.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    /// `p1` or `p2`.
    #[arg(long)]
    variant: Option<String>,
    /// `full` or `smoke` (10x fewer samples per iteration).
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Fitted ensemble (JSON).
    #[arg(long)]
    ensemble_out: Option<PathBuf>,
    /// ELBO traces CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    n_configs: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Per-check CSV with a verdict column.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Sweep CSV.
    #[arg(long)]
    input: PathBuf,
    /// `curve` or `overlay`.
    #[arg(long, default_value = "overlay")]
    kind: String,
    #[arg(long, default_value = "delta")]
    estimator: String,
    #[arg(long)]
    out: PathBuf,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn provenance_path(csv: &Path) -> PathBuf {
    csv.with_extension("provenance.json")
}

fn resolve_target(flag: Option<&str>, cfg: &RunConfig) -> Result<Target> {
    match (flag, &cfg.target) {
        (Some(id), _) => Ok(parse_target_id(id)?),
        (None, Some(spec)) => Ok(spec.build()?),
        (None, None) => bail!("no target: pass --target or set [target] in the config"),
    }
}

fn resolve_ensemble(flag: Option<&Path>, cfg: &RunConfig) -> Result<Ensemble> {
    if let Some(p) = flag {
        return load_ensemble(p).with_context(|| format!("reading ensemble {}", p.display()));
    }
    cfg.ensemble()?
        .context("no ensemble: pass a file or add [[members]] to the config")
}

fn write_ensemble(path: &Path, ensemble: &Ensemble) -> Result<()> {
    let spec = EnsembleSpec::from_ensemble(ensemble);
    fs::write(path, serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(())
}

fn write_traces(path: &Path, fits: &[(String, FitResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "iteration", "elbo"])?;
    for (label, r) in fits {
        for (i, v) in r.trace.iter().enumerate() {
            w.write_record([label.as_str(), &i.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_params(path: &Path, fits: &[(String, FitResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "parameter", "index", "value"])?;
    for (label, r) in fits {
        for (j, m) in r.approx.mean().iter().enumerate() {
            w.write_record([label.as_str(), "mean", &j.to_string(), &m.to_string()])?;
        }
        for (j, s) in r.approx.sigmas().iter().enumerate() {
            if r.approx.is_isotropic() && j > 0 {
                break;
            }
            w.write_record([label.as_str(), "sigma", &j.to_string(), &s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn collect_fits(fitted: miselbo::training::EnsembleFit) -> Result<Vec<(String, FitResult)>> {
    fitted
        .members
        .into_iter()
        .map(|m| {
            let label = m.label;
            m.result
                .map(|r| (label.clone(), r))
                .with_context(|| format!("fitting member '{label}'"))
        })
        .collect()
}

fn cmd_fit(a: FitArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let target = resolve_target(a.target.as_deref(), cfg)?;
    let init = resolve_ensemble(a.init.as_deref(), cfg)?;
    let inits = init
        .members()
        .iter()
        .map(|m| match &m.approx {
            Approx::Gaussian(g) => Ok(MemberInit::new(m.label.clone(), g.clone())),
            Approx::Hierarchical(_) => bail!("member '{}' is hierarchical; only Gaussian members can be fitted", m.label),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fit = FitConfig::reference_preset();
    fit.seed = SeedSpec::new(seed, "train");
    fit.iterations = a.iters.or(cfg.fit.iterations).unwrap_or(fit.iterations);
    fit.samples_per_iter = a.mc.or(cfg.fit.samples_per_iter).unwrap_or(fit.samples_per_iter);
    fit.lr = a.lr.or(cfg.fit.lr).unwrap_or(fit.lr);
    if let Some(b) = cfg.fit.allow_finite_difference {
        fit.gradient.allow_finite_difference = b;
    }
    if let Some(h) = cfg.fit.fd_step {
        fit.gradient.fd_step = h;
    }
    let fits = collect_fits(fit_ensemble(&target, &inits, &fit, true)?)?;
    let ensemble = Ensemble::new(
        fits.iter()
            .map(|(l, r)| Member::new(l.clone(), r.approx.clone()))
            .collect(),
    )?;
    write_ensemble(&a.out, &ensemble)?;
    write_traces(&a.trace.unwrap_or_else(|| sidecar(&a.out, ".trace.csv")), &fits)?;
    write_params(&a.params.unwrap_or_else(|| sidecar(&a.out, ".params.csv")), &fits)?;
    for (label, r) in &fits {
        let last = r.trace.last().copied().unwrap_or(f64::NAN);
        println!("{label}: final ELBO estimate {last:.6}, mean {:?}", r.approx.mean());
    }
    Ok(())
}

fn cmd_estimate(a: EstimateArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let target = resolve_target(a.target.as_deref(), cfg)?;
    let ensemble = resolve_ensemble(a.ensemble.as_deref(), cfg)?;
    let l = a.l.or(cfg.estimate.l).unwrap_or(1000);
    let replicates = a.replicates.or(cfg.estimate.replicates).unwrap_or(5);
    let names = if !a.estimators.is_empty() {
        a.estimators.clone()
    } else if let Some(v) = &cfg.estimate.estimators {
        v.clone()
    } else {
        let mut v: Vec<String> = Estimator::ENSEMBLE.iter().map(|e| e.to_string()).collect();
        for m in ensemble.canonical_members() {
            v.push(format!("elbo:{}", m.label));
            v.push(format!("iwelbo:{}", m.label));
        }
        v
    };
    let estimators = names
        .iter()
        .map(|n| n.parse::<Estimator>())
        .collect::<miselbo::Result<Vec<_>>>()?;
    let results = estimate_replicates(
        &target,
        &ensemble,
        &estimators,
        l,
        replicates,
        &SeedSpec::new(seed, "estimate"),
    )?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["estimator", "S", "L", "replicate", "value"])?;
    let s = ensemble.len().to_string();
    let l_str = l.to_string();
    for r in &results {
        let name = r.estimator.to_string();
        for (i, v) in r.values.iter().enumerate() {
            w.write_record([name.as_str(), &s, &l_str, &i.to_string(), &v.to_string()])?;
        }
        w.write_record([name.as_str(), &s, &l_str, "mean", &r.summary.value.to_string()])?;
        w.write_record([name.as_str(), &s, &l_str, "std", &r.summary.std_error.to_string()])?;
        println!("{name:>16} = {:.6} ± {:.6}", r.summary.value, r.summary.std_error);
    }
    w.flush()?;
    Ok(())
}

fn sweep_spec(a: &SweepArgs, base: SweepSpec, section: &miselbo::config::SweepSection, seed: u64) -> SweepSpec {
    SweepSpec {
        grid: a.grid.clone().or(section.grid.clone()).unwrap_or(base.grid),
        l_list: a.l_list.clone().or(section.l_list.clone()).unwrap_or(base.l_list),
        replicates: a.replicates.or(section.replicates).unwrap_or(base.replicates),
        samples_per_point: a.samples.or(section.samples_per_point).unwrap_or(base.samples_per_point),
        seed,
        ..base
    }
}

fn finish_sweep(report: &Report, a: &SweepArgs) -> Result<()> {
    report.write_csv(&a.out)?;
    report.write_provenance(&provenance_path(&a.out))?;
    if let Some(p) = &a.plot {
        emit_plot(report, PlotKind::Overlay, "delta", p)?;
    }
    println!("wrote {} rows to {}", report.rows.len(), a.out.display());
    Ok(())
}

fn cmd_sweep_shift(a: SweepArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let setting: SettingId = a
        .setting
        .clone()
        .or(cfg.sweep_shift.setting.clone())
        .unwrap_or_else(|| "i".into())
        .parse()?;
    let spec = sweep_spec(&a, SweepSpec::shift_default(), &cfg.sweep_shift, seed);
    finish_sweep(&run_512_shift(setting, &spec)?, &a)
}

fn cmd_sweep_hier(a: SweepArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    if a.setting.is_some() {
        bail!("--setting applies to sweep-shift only");
    }
    let spec = sweep_spec(&a, SweepSpec::hier_default(), &cfg.sweep_hier, seed);
    finish_sweep(&run_512_hier(&spec)?, &a)
}

fn cmd_reproduce(a: ReproduceArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let sec = &cfg.reproduce_511;
    let variant: EnergyVariant = a.variant.or(sec.variant.clone()).unwrap_or_else(|| "p1".into()).parse()?;
    let budget = match a.budget.or(sec.budget.clone()).as_deref().unwrap_or("full") {
        "full" => Budget::Full,
        "smoke" => Budget::Smoke,
        other => bail!("unknown budget '{other}' (full|smoke)"),
    };
    let mut rc = Reproduce511Config::preset(variant, budget);
    if let Some(s) = seed {
        rc.fit.seed.root_seed = s;
        rc.eval_seed.root_seed = s.wrapping_add(1);
    }
    if let Some(s) = sec.eval_seed {
        rc.eval_seed.root_seed = s;
    }
    if let Some(n) = sec.eval_samples {
        rc.eval_samples = n;
    }
    rc.fit.iterations = a.iters.or(cfg.fit.iterations).unwrap_or(rc.fit.iterations);
    rc.fit.samples_per_iter = a.mc.or(cfg.fit.samples_per_iter).unwrap_or(rc.fit.samples_per_iter);
    rc.fit.lr = a.lr.or(cfg.fit.lr).unwrap_or(rc.fit.lr);
    let run = run_511(&rc)?;
    run.report.write_csv(&a.out)?;
    run.report.write_provenance(&provenance_path(&a.out))?;
    if let Some(p) = &a.ensemble_out {
        write_ensemble(p, &run.ensemble)?;
    }
    if let Some(p) = &a.trace {
        write_traces(p, &run.fits)?;
    }
    println!("kl_mis = {:.4}  kl_bar = {:.4}  jsd = {:.4}", run.kl_mis, run.kl_bar, run.jsd);
    Ok(())
}

fn cmd_verify(a: VerifyArgs, cfg: &RunConfig, seed: u64) -> Result<bool> {
    let sec = &cfg.verify;
    let d = VerifyConfig::default();
    let vc = VerifyConfig {
        n_configs: a.n_configs.or(sec.n_configs).unwrap_or(d.n_configs),
        replicates: a.replicates.or(sec.replicates).unwrap_or(d.replicates),
        batch_l: sec.batch_l.unwrap_or(d.batch_l),
        l_list: sec.l_list.clone().unwrap_or(d.l_list),
        n_gradient_configs: sec.n_gradient_configs.unwrap_or(d.n_gradient_configs),
        seed,
    };
    let report = experiments::verify(&vc)?;
    if let Some(p) = &a.out {
        fs::write(p, report.to_csv_string()?)?;
    }
    print!("{}", report.summary());
    Ok(report.all_exact_passed())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let mut report = Report::read_csv(&a.input)?;
    let prov = provenance_path(&a.input);
    if prov.exists() {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&prov)?)?;
        report.swept_parameter = v["swept_parameter"].as_str().map(str::to_owned);
    }
    emit_plot(&report, a.kind.parse()?, &a.estimator, &a.out)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed);
    let root = seed.unwrap_or(0);
    match cli.command {
        Command::Fit(a) => cmd_fit(a, &cfg, root),
        Command::Estimate(a) => cmd_estimate(a, &cfg, root),
        Command::SweepShift(a) => cmd_sweep_shift(a, &cfg, root),
        Command::SweepHier(a) => cmd_sweep_hier(a, &cfg, root),
        Command::Reproduce511(a) => cmd_reproduce(a, &cfg, seed),
        Command::Verify(a) => {
            if !cmd_verify(a, &cfg, root)? {
                eprintln!("exact identity checks failed");
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Plot(a) => cmd_plot(a),
    }
}
