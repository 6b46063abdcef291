//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::LN_2;
use std::time::{Duration, Instant};

use miselbo::approximations::{Ensemble, GaussianApprox, Member};
use miselbo::estimators::{self as est, draw_batch, SampleBatch};
use miselbo::experiments::verify::{gradient_checks, random_config, rel_err};
use miselbo::experiments::{
    run_511, run_512_shift, shift_ensemble, Budget, EnergyVariant, Reproduce511Config, SweepSpec,
};
use miselbo::math::mean_and_std_error;
use miselbo::rng::SeedSpec;
use miselbo::targets::{make_setting, SettingId};

const SEED: u64 = 0;
const CONFIGS: usize = 50;
const REPLICATES: usize = 200;
const BATCH_L: usize = 50;
const L_LIST: [usize; 5] = [1, 2, 5, 10, 50];

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

/// Tracks the worst `kl_bar - kl_mis` vs `jsd` error over every batch the suite draws.
#[derive(Default)]
struct Telescoping {
    worst: f64,
    batches: usize,
}

impl Telescoping {
    fn record(&mut self, b: &SampleBatch) {
        let gap = est::kl_bar(b).unwrap() - est::kl_mis(b).unwrap();
        self.worst = self.worst.max(rel_err(gap, est::jsd(b).unwrap()));
        self.batches += 1;
    }
}

fn timed(
    id: &'static str,
    title: &'static str,
    limit: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    if !in_time {
        detail.push_str(&format!("; over the {:?} limit", limit.unwrap()));
    }
    Outcome {
        id,
        title,
        passed: ok && in_time,
        detail,
        elapsed,
    }
}

fn criterion_1(tele: &mut Telescoping) -> Outcome {
    timed("1", "delta(L=1) equals jsd on 50 random ensembles", Some(Duration::from_secs(10)), || {
        let mut worst = 0.0f64;
        for c in 0..CONFIGS {
            let (t, e) = random_config(SEED, c).unwrap();
            let b = draw_batch(&t, &e, BATCH_L, &SeedSpec::new(SEED, format!("identity{c}"))).unwrap();
            worst = worst.max(rel_err(est::delta(&b, 1).unwrap(), est::jsd(&b).unwrap()));
            tele.record(&b);
        }
        (worst <= 1e-10, format!("max relative error {worst:.2e} (limit 1e-10)"))
    })
}

/// Per config: (S, Δ₁ per replicate, MISELBO per L per replicate).
type ReplicateData = Vec<(usize, Vec<f64>, Vec<Vec<f64>>)>;

fn replicate_data(tele: &mut Telescoping) -> ReplicateData {
    (0..CONFIGS)
        .map(|c| {
            let (t, e) = random_config(SEED, c).unwrap();
            let mut d1 = Vec::with_capacity(REPLICATES);
            let mut mis = vec![Vec::with_capacity(REPLICATES); L_LIST.len()];
            for r in 0..REPLICATES {
                let b = draw_batch(&t, &e, BATCH_L, &SeedSpec::new(SEED, format!("bounds{c}/rep{r}"))).unwrap();
                d1.push(est::delta(&b, 1).unwrap());
                for (k, &l) in L_LIST.iter().enumerate() {
                    mis[k].push(est::miselbo(&b, l).unwrap());
                }
                tele.record(&b);
            }
            (e.len(), d1, mis)
        })
        .collect()
}

fn criterion_2(data: &ReplicateData, elapsed: Duration) -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut min_slack = f64::INFINITY;
    for (c, (s, d1, _)) in data.iter().enumerate() {
        let (m, se) = mean_and_std_error(d1);
        let lower = m + 3.0 * se;
        let upper = (*s as f64).ln() - (m - 3.0 * se);
        if *s > 1 {
            min_slack = min_slack.min(lower).min(upper);
        }
        if lower < 0.0 || upper < 0.0 {
            failures.push(format!("config {c}: mean {m:.4} ± {se:.4}, log S = {:.4}", (*s as f64).ln()));
        }
    }
    let mut o = timed("2", "0 <= E[delta_1] <= log S within 3 SE (200 replicates)", None, || {
        (
            failures.is_empty(),
            if failures.is_empty() {
                format!("all {CONFIGS} configs inside; smallest slack for S > 1 is {min_slack:.3e} (S = 1 gives delta_1 = 0 exactly)")
            } else {
                failures.join("; ")
            },
        )
    });
    o.elapsed = elapsed + start.elapsed();
    if o.elapsed > Duration::from_secs(60) {
        o.passed = false;
        o.detail.push_str("; over the 60s limit");
    }
    o
}

fn criterion_3(tele: &mut Telescoping) -> Outcome {
    timed("3", "disjoint members give log 2, identical members give 0", Some(Duration::from_secs(1)), || {
        let t = make_setting(SettingId::I);
        let disjoint = Ensemble::new(vec![
            Member::new("a", GaussianApprox::isotropic(vec![0.0], 1.0).unwrap()),
            Member::new("b", GaussianApprox::isotropic(vec![100.0], 1.0).unwrap()),
        ])
        .unwrap();
        let same = Ensemble::new(vec![
            Member::new("a", GaussianApprox::isotropic(vec![4.0], 1.0).unwrap()),
            Member::new("b", GaussianApprox::isotropic(vec![4.0], 1.0).unwrap()),
        ])
        .unwrap();
        let mut worst = 0.0f64;
        let mut nonzero = 0;
        for r in 0..20 {
            let sd = SeedSpec::new(SEED, format!("ordering{r}"));
            let b = draw_batch(&t, &disjoint, 1 + r * 7, &sd).unwrap();
            worst = worst.max((est::delta(&b, 1).unwrap() - LN_2).abs());
            tele.record(&b);
            let b = draw_batch(&t, &same, 1 + r * 7, &sd).unwrap();
            if est::delta(&b, 1).unwrap() != 0.0 {
                nonzero += 1;
            }
            tele.record(&b);
        }
        (
            worst <= 1e-6 && nonzero == 0,
            format!("max |delta_1 - log 2| = {worst:.2e}; identical-member batches with delta_1 != 0: {nonzero}"),
        )
    })
}

fn check_table(name: &str, got: [f64; 3], want: [f64; 3], tol: f64) -> (bool, String) {
    let ok = got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= tol);
    (
        ok,
        format!(
            "{name}: (kl_mis, kl_bar, jsd) = ({:.3}, {:.3}, {:.3}) vs ({}, {}, {}) ± {tol}",
            got[0], got[1], got[2], want[0], want[1], want[2]
        ),
    )
}

fn criterion_4(tele: &mut Telescoping) -> Outcome {
    timed("4", "2-D energy ensembles reproduce the KL/JSD table", None, || {
        let cases = [
            (EnergyVariant::P1, Budget::Full, [-0.03, 0.61, 0.64], 0.1, "p1 full"),
            (EnergyVariant::P2, Budget::Full, [0.15, 1.05, 0.90], 0.15, "p2 full"),
            (EnergyVariant::P1, Budget::Smoke, [-0.03, 0.61, 0.64], 0.25, "p1 smoke"),
            (EnergyVariant::P2, Budget::Smoke, [0.15, 1.05, 0.90], 0.25, "p2 smoke"),
        ];
        let mut ok = true;
        let mut lines = Vec::new();
        for (variant, budget, want, tol, name) in cases {
            let run = run_511(&Reproduce511Config::preset(variant, budget)).unwrap();
            tele.record(&run.batch);
            let (pass, line) = check_table(name, [run.kl_mis, run.kl_bar, run.jsd], want, tol);
            ok &= pass;
            lines.push(line);
        }
        (ok, lines.join("; "))
    })
}

fn criterion_5(tele: &mut Telescoping) -> Outcome {
    timed("5", "shift sweep: delta_L -> log 2 at mu1 = 15, delta_1 = jsd everywhere", Some(Duration::from_secs(60)), || {
        let spec = SweepSpec {
            seed: SEED,
            ..SweepSpec::shift_default()
        };
        let report = run_512_shift(SettingId::I, &spec).unwrap();
        let mut ok = true;
        let mut far = Vec::new();
        for &l in &spec.l_list {
            let d = report.find("delta", Some(15.0), l).unwrap().mean;
            ok &= (d - LN_2).abs() <= 0.02;
            far.push(format!("L={l}: {d:.4}"));
        }
        // Recompute every batch the sweep used and compare delta_1 with jsd per batch.
        let target = make_setting(SettingId::I);
        let mut worst = 0.0f64;
        for (p, &x) in spec.grid.iter().enumerate() {
            let e = shift_ensemble(x).unwrap();
            for r in 0..spec.replicates {
                let b = draw_batch(&target, &e, spec.batch_size(), &spec.point_seed(p, r)).unwrap();
                worst = worst.max(rel_err(est::delta(&b, 1).unwrap(), est::jsd(&b).unwrap()));
                tele.record(&b);
            }
            let row_d = report.find("delta", Some(x), 1).unwrap().mean;
            let row_j = report.find("jsd", Some(x), 1).unwrap().mean;
            worst = worst.max(rel_err(row_d, row_j));
        }
        ok &= worst <= 1e-10;
        (ok, format!("delta at mu1 = 15: {}; max |delta_1 - jsd| relative {worst:.2e}", far.join(", ")))
    })
}

fn criterion_6(tele: &Telescoping) -> Outcome {
    timed("6", "kl_bar - kl_mis = jsd on every batch of criteria 1-5", None, || {
        (
            tele.worst <= 1e-10,
            format!("{} batches, max relative error {:.2e}", tele.batches, tele.worst),
        )
    })
}

fn criterion_7(data: &ReplicateData) -> Outcome {
    timed("7", "E[MISELBO] <= log Z = 0 and nondecreasing in L (3 SE)", None, || {
        let mut failures = Vec::new();
        for (c, (_, _, mis)) in data.iter().enumerate() {
            for (k, xs) in mis.iter().enumerate() {
                let (m, se) = mean_and_std_error(xs);
                if m - 3.0 * se > 0.0 {
                    failures.push(format!("config {c} L={}: {m:.4} ± {se:.4} above 0", L_LIST[k]));
                }
            }
            for k in 1..mis.len() {
                let diffs: Vec<f64> = mis[k].iter().zip(&mis[k - 1]).map(|(a, b)| a - b).collect();
                let (m, se) = mean_and_std_error(&diffs);
                if m + 3.0 * se < 0.0 {
                    failures.push(format!("config {c} L={}->{}: {m:.4} ± {se:.4}", L_LIST[k - 1], L_LIST[k]));
                }
            }
        }
        (
            failures.is_empty(),
            if failures.is_empty() {
                format!("{CONFIGS} configs x L in {L_LIST:?}, no violations")
            } else {
                failures.join("; ")
            },
        )
    })
}

fn criterion_8() -> Outcome {
    timed("8", "reparameterized gradient matches finite differences", Some(Duration::from_secs(5)), || {
        let checks = gradient_checks(SEED, 5).unwrap();
        let worst = checks.iter().map(|c| c.measured).fold(0.0, f64::max);
        (
            checks.len() == 5 && checks.iter().all(|c| c.passed),
            format!("5 configurations, max relative error {worst:.2e} (limit 1e-4)"),
        )
    })
}

/// A categorical member over atoms `0..K`, encoded for synthetic batches.
struct Discrete {
    p_tilde: Vec<f64>,
    q: [Vec<f64>; 2],
}

impl Discrete {
    fn instance(k: usize, seed: u64) -> Self {
        let mut s = SeedSpec::new(seed, format!("discrete{k}")).stream();
        let mut draw = |lo: f64| (0..k).map(|_| lo + s.uniform()).collect::<Vec<f64>>();
        let norm = |v: Vec<f64>| {
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let p_tilde = draw(0.05).into_iter().map(|x| 3.0 * x).collect();
        let q = [norm(draw(0.05)), norm(draw(0.05))];
        Self { p_tilde, q }
    }

    fn mix(&self, x: usize) -> f64 {
        0.5 * (self.q[0][x] + self.q[1][x])
    }

    /// Batch where member `s` drew atoms `draws[s]`.
    fn batch(&self, draws: [&[usize]; 2]) -> SampleBatch {
        let l = draws[0].len();
        let mut log_q = Vec::with_capacity(4 * l);
        for sp in 0..2 {
            for src in draws {
                log_q.extend(src.iter().map(|&x| self.q[sp][x].ln()));
            }
        }
        let log_p = draws.iter().flat_map(|d| d.iter().map(|&x| self.p_tilde[x].ln())).collect();
        SampleBatch::from_tables(vec!["a".into(), "b".into()], 1, l, Vec::new(), log_q, log_p).unwrap()
    }
}

/// All length-`l` atom sequences over `k` atoms.
fn sequences(k: usize, l: usize) -> Vec<Vec<usize>> {
    (0..k.pow(l as u32))
        .map(|mut i| {
            (0..l)
                .map(|_| {
                    let a = i % k;
                    i /= k;
                    a
                })
                .collect()
        })
        .collect()
}

fn criterion_9() -> Outcome {
    timed("9", "discrete surrogates: estimators match exhaustive enumeration", None, || {
        let mut worst = 0.0f64;
        let mut cases = 0;
        for k in [2, 3, 5, 10] {
            let d = Discrete::instance(k, SEED);
            for l in [1usize, 2] {
                let seqs = sequences(k, l);
                let prob = |s: usize, seq: &[usize]| seq.iter().map(|&x| d.q[s][x]).product::<f64>();
                // Direct population formulas by plain summation over outcomes.
                let log_mean = |ws: &[f64]| (ws.iter().sum::<f64>() / ws.len() as f64).ln();
                let mut direct = [0.0f64; 8];
                for s in 0..2 {
                    for seq in &seqs {
                        let pr = prob(s, seq);
                        let w_own: Vec<f64> = seq.iter().map(|&x| d.p_tilde[x] / d.q[s][x]).collect();
                        let w_mix: Vec<f64> = seq.iter().map(|&x| d.p_tilde[x] / d.mix(x)).collect();
                        let q_over_mix = seq.iter().map(|&x| (d.q[s][x] / d.mix(x)).ln()).sum::<f64>() / l as f64;
                        let lq_lp = seq.iter().map(|&x| (d.q[s][x] / d.p_tilde[x]).ln()).sum::<f64>() / l as f64;
                        let lmix_lp = seq.iter().map(|&x| (d.mix(x) / d.p_tilde[x]).ln()).sum::<f64>() / l as f64;
                        let elbo = w_own.iter().map(|w| w.ln()).sum::<f64>() / l as f64;
                        direct[0] += 0.5 * pr * log_mean(&w_mix);
                        direct[1] += 0.5 * pr * log_mean(&w_own);
                        direct[2] += 0.5 * pr * elbo;
                        direct[3] += 0.5 * pr * q_over_mix;
                        direct[4] += 0.5 * pr * (log_mean(&w_mix) - log_mean(&w_own));
                        direct[5] += 0.5 * pr * lq_lp;
                        direct[6] += 0.5 * pr * lmix_lp;
                        if s == 0 {
                            direct[7] += pr * log_mean(&w_own);
                        }
                    }
                }
                // Brute force: expectation of each estimator over every joint outcome.
                let mut brute = [0.0f64; 8];
                for a in &seqs {
                    for b in &seqs {
                        let pr = prob(0, a) * prob(1, b);
                        let batch = d.batch([a, b]);
                        let v = [
                            est::miselbo(&batch, l).unwrap(),
                            est::avg_iwelbo(&batch, l).unwrap(),
                            est::avg_elbo(&batch).unwrap(),
                            est::jsd(&batch).unwrap(),
                            est::delta(&batch, l).unwrap(),
                            est::kl_bar(&batch).unwrap(),
                            est::kl_mis(&batch).unwrap(),
                            est::iwelbo(&batch, 0, l).unwrap(),
                        ];
                        for (acc, x) in brute.iter_mut().zip(v) {
                            *acc += pr * x;
                        }
                    }
                }
                for (x, y) in brute.iter().zip(&direct) {
                    worst = worst.max((x - y).abs() / (1.0 + y.abs()));
                }
                cases += 1;
            }
        }
        (
            worst <= 1e-12,
            format!("{cases} instances (K in 2..=10, L in {{1, 2}}), max error {worst:.2e} (limit 1e-12)"),
        )
    })
}

fn criterion_10() -> Outcome {
    timed("10", "large-scale model likelihood tables are out of scope", None, || {
        (true, "excluded by design; no check references them".into())
    })
}

fn main() {
    let mut tele = Telescoping::default();
    let mut outcomes = vec![criterion_1(&mut tele)];
    let start = Instant::now();
    let data = replicate_data(&mut tele);
    let data_time = start.elapsed();
    outcomes.push(criterion_2(&data, data_time));
    outcomes.push(criterion_3(&mut tele));
    outcomes.push(criterion_4(&mut tele));
    outcomes.push(criterion_5(&mut tele));
    outcomes.push(criterion_6(&tele));
    outcomes.push(criterion_7(&data));
    outcomes.push(criterion_8());
    outcomes.push(criterion_9());
    outcomes.push(criterion_10());

    println!();
    for o in &outcomes {
        println!(
            "[{}] criterion {:>2}: {} ({:.2}s) - {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.elapsed.as_secs_f64(),
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\n{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
