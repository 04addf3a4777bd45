//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taxrank::experiment::{self, Distribution, UtilitySource};
use taxrank::waterfill::{self, LowerBoundProblem, EPSILON};
use taxrank::{
    expected_utilities, io, metrics, policies, sampling, transport, ExposureVector, Mode,
    RankingConfig, ScoreMatrix, UtilityVector,
};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn ctr_config(k: usize, lambda_ot: f64) -> RankingConfig {
    RankingConfig {
        k,
        tax_rate: 0.0,
        lambda_ot,
        seed: 7,
        mode: Mode::Ctr,
    }
}

/// The seeded 50 x 20 power-law instance shared by criteria 6 and 7.
fn seeded_instance() -> ScoreMatrix {
    experiment::synth(50, 20, Distribution::PowerLaw, 42).unwrap()
}

const SEEDED_K: usize = 5;
const SEEDED_LAMBDA_OT: f64 = 0.5;

fn waterfill_optimality() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt = 0.0f64;
    for case in 0..500 {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..=3.min(n));
        let t = if case % 10 == 0 {
            // exact special rates appear in the mix
            [0.0, 1.0, 2.0, 3.0, 0.5][case / 10 % 5]
        } else {
            rng.random_range(0.0..=3.0)
        };
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let problem = LowerBoundProblem::new(a, k, t).map_err(err)?;
        let e = waterfill::solve(&problem).map_err(err)?;
        let oracle = common::projected_gradient(&problem, 3000);
        let gap = problem.objective(&oracle) - problem.objective(e.values());
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(common::kkt_residual(&problem, e.values()));
        ensure(
            gap <= 1e-6,
            format!("case {case}: oracle beats solver by {gap:e} (t={t}, k={k})"),
        )?;
        ensure(
            common::kkt_residual(&problem, e.values()) <= 1e-6,
            format!("case {case}: KKT residual above 1e-6 (t={t}, k={k})"),
        )?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 10.0, format!("took {elapsed:.2}s"))?;
    Ok(format!(
        "500 instances, max oracle gain {worst_gap:.1e}, max KKT residual {worst_kkt:.1e}, {elapsed:.2}s"
    ))
}

fn special_case_anchors() -> Check {
    // t = 0 is greedy top-k of the coefficients
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=n);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let e = waterfill::solve(&LowerBoundProblem::new(a.clone(), k, 0.0).map_err(err)?)
            .map_err(err)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[j].total_cmp(&a[i]));
        for (rank, &i) in order.iter().enumerate() {
            let want_top = rank < k;
            let got_top = e.values()[i] > 0.5;
            ensure(want_top == got_top, "t=0 exposure differs from top-k")?;
        }
    }
    // and the full pipeline matches per-user top-k on rank-one score matrices
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (users, items) = (rng.random_range(2..=8), rng.random_range(3..=10));
        let p: Vec<f64> = (0..users).map(|_| rng.random_range(0.2..1.0)).collect();
        let q: Vec<f64> = (0..items).map(|_| rng.random_range(0.05..1.0)).collect();
        let w = ndarray::Array2::from_shape_fn((users, items), |(u, i)| p[u] * q[i]);
        let scores = ScoreMatrix::with_unit_gamma(w).map_err(err)?;
        let k = rng.random_range(1..items);
        let (_, lists) = experiment::rank(&scores, &ctr_config(k, 0.5)).map_err(err)?;
        ensure(
            lists == policies::top_k(&scores, k).map_err(err)?,
            "t=0 lists differ from top-k",
        )?;
    }

    // two-item fixture with weights 2:5
    let scores = ScoreMatrix::from_rows(&[vec![0.2, 0.5]]).map_err(err)?;
    let at = |t: f64| -> std::result::Result<Vec<f64>, String> {
        let cfg = RankingConfig {
            k: 1,
            tax_rate: t,
            lambda_ot: 0.5,
            seed: 0,
            mode: Mode::Exposure,
        };
        let run = experiment::run_pipeline(&scores, &cfg).map_err(err)?;
        Ok(expected_utilities(&scores, &run.probs, Mode::Exposure)
            .map_err(err)?
            .0)
    };
    let v1 = at(1.0)?;
    let ratio = v1[0] / v1[1];
    ensure(
        (ratio - 0.4).abs() <= 1e-3,
        format!("t=1 utility ratio {ratio}, expected 0.4"),
    )?;
    let v1000 = at(1e3)?;
    ensure(
        (v1000[0] - v1000[1]).abs() <= 1e-2,
        format!("t=1000 utilities {v1000:?} not equal"),
    )?;

    // t = 1000 on random instances: uncapped coordinates are equal
    let mut spread_max = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..=10);
        let k = rng.random_range(1..n);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let e = waterfill::solve(&LowerBoundProblem::new(a, k, 1e3).map_err(err)?).map_err(err)?;
        let free: Vec<f64> = e
            .values()
            .iter()
            .copied()
            .filter(|&x| x < 1.0 - 1e-9 && x > EPSILON)
            .collect();
        if let (Some(lo), Some(hi)) = (
            free.iter().copied().reduce(f64::min),
            free.iter().copied().reduce(f64::max),
        ) {
            spread_max = spread_max.max(hi - lo);
        }
    }
    ensure(
        spread_max <= 1e-2,
        format!("t=1000 uncapped spread {spread_max}"),
    )?;
    Ok(format!(
        "t=0 top-k exact; t=1 ratio {ratio:.6}; t=1000 two-item gap {:.1e}, random spread {spread_max:.1e}",
        (v1000[0] - v1000[1]).abs()
    ))
}

fn sinkhorn_feasibility() -> Check {
    let mut converged = 0;
    let mut worst = 0.0f64;
    for (seed, dist) in [
        (3, Distribution::PowerLaw),
        (4, Distribution::Uniform),
        (5, Distribution::PowerLaw),
    ] {
        let scores = experiment::synth(40, 15, dist, seed).map_err(err)?;
        for k in [1, 3, 6] {
            for lambda_ot in [0.1, 0.5, 2.0] {
                for t in [0.0, 0.3, 1.0, 2.5, 8.0] {
                    let cfg = ctr_config(k, lambda_ot).with_tax_rate(t);
                    let e =
                        waterfill::solve(&waterfill::build_problem(&scores, &cfg).map_err(err)?)
                            .map_err(err)?;
                    let Ok((x, _)) = transport::project_with_state(&scores, &e, &cfg) else {
                        continue;
                    };
                    converged += 1;
                    let users = scores.num_users() as f64;
                    let row: f64 = x.row_sums().iter().map(|s| (s - k as f64).abs()).sum();
                    let col: f64 = x
                        .col_sums()
                        .iter()
                        .zip(e.values())
                        .map(|(s, e)| (s - users * e).abs())
                        .sum();
                    worst = worst.max(row).max(col);
                    ensure(
                        row <= 1e-6 && col <= 1e-6,
                        format!(
                            "k={k} lambda_ot={lambda_ot} t={t}: row L1 {row:e}, col L1 {col:e}"
                        ),
                    )?;
                }
            }
        }
    }
    ensure(
        converged == 135,
        format!("only {converged}/135 projections converged"),
    )?;

    let scores = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).map_err(err)?;
    let e = ExposureVector::new(vec![0.5, 0.5], 1).map_err(err)?;
    let x = transport::project(&scores, &e, &ctr_config(1, 0.1)).map_err(err)?;
    let identity = [[1.0, 0.0], [0.0, 1.0]];
    let mut dev = 0.0f64;
    for u in 0..2 {
        for i in 0..2 {
            dev = dev.max((x.matrix()[[u, i]] - identity[u][i]).abs());
        }
    }
    ensure(
        dev <= 1e-3,
        format!("2x2 plan deviates from assignment by {dev}"),
    )?;
    Ok(format!(
        "{converged} projections, max marginal L1 {worst:.1e}; 2x2 deviation {dev:.1e}"
    ))
}

fn sampler_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 10_000;
    let mut checks = 0;
    let mut worst_z = 0.0f64;
    let mut failures = Vec::new();
    for row_id in 0..100 {
        let n = rng.random_range(3..=8);
        let k = rng.random_range(1..n);
        let row = common::random_row(n, k, &mut rng);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let list = sampling::sample_row(&row, k, &mut rng).map_err(err)?;
            ensure(list.len() == k, "list of wrong length")?;
            let mut seen = vec![false; n];
            for &i in &list {
                ensure(!seen[i], "duplicate item in list")?;
                seen[i] = true;
                counts[i] += 1;
            }
        }
        for (i, (&c, &p)) in counts.iter().zip(&row).enumerate() {
            checks += 1;
            let freq = c as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let z = if se > 0.0 {
                (freq - p).abs() / se
            } else if (freq - p).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst_z = worst_z.max(z);
            if z > 3.0 {
                failures.push(format!(
                    "row {row_id} item {i}: p={p:.4} freq={freq:.4} z={z:.2}"
                ));
            }
        }
    }
    let summary = format!("{checks} item checks over 100 rows, max |z| {worst_z:.2}");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; beyond 3 SE: {}", failures.join("; ")))
    }
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_naive = 0.0f64;
    let mut worst_lorenz = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=200);
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let s: Vec<f64> = v.iter().zip(&gamma).map(|(a, b)| a * b).collect();
        let uv = UtilityVector(v);
        let fast = metrics::gini(&uv, &gamma).map_err(err)?;
        let naive = common::naive_gini(&s);
        let lorenz = common::lorenz_gini(&metrics::lorenz_points(&uv, &gamma).map_err(err)?);
        worst_naive = worst_naive.max((fast - naive).abs());
        worst_lorenz = worst_lorenz.max((fast - lorenz).abs());
    }
    ensure(worst_naive <= 1e-12, format!("naive gap {worst_naive:e}"))?;
    ensure(
        worst_lorenz <= 1e-9,
        format!("Lorenz-area gap {worst_lorenz:e}"),
    )?;
    let anchor = metrics::gini(&UtilityVector(vec![0.0, 0.0, 0.0, 1.0]), &[1.0; 4]).map_err(err)?;
    ensure(anchor == 0.75, format!("Gini([0,0,0,1]) = {anchor}"))?;
    Ok(format!(
        "200 vectors, naive gap {worst_naive:.1e}, Lorenz gap {worst_lorenz:.1e}, anchor {anchor}"
    ))
}

fn tradeoff_monotonicity() -> Check {
    let scores = seeded_instance();
    let grid = [0.0, 0.5, 1.0, 2.0, 4.0];
    let points = experiment::sweep(
        &scores,
        &ctr_config(SEEDED_K, SEEDED_LAMBDA_OT),
        &grid,
        0,
        UtilitySource::Expected,
    )
    .map_err(err)?;
    ensure(points[0].pot == 0.0, format!("POT(0) = {}", points[0].pot))?;
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        ensure(
            b.ecn <= a.ecn + 1e-6,
            format!("eCN rises from t={} to t={}", a.tax_rate, b.tax_rate),
        )?;
        ensure(
            b.gini <= a.gini + 1e-6,
            format!("Gini rises from t={} to t={}", a.tax_rate, b.tax_rate),
        )?;
        ensure(
            b.pot >= a.pot - 1e-6,
            format!("POT falls from t={} to t={}", a.tax_rate, b.tax_rate),
        )?;
    }
    let fmt = |f: fn(&taxrank::TradeoffPoint) -> f64| {
        points
            .iter()
            .map(|p| format!("{:.4}", f(p)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!(
        "eCN [{}], Gini [{}], POT [{}]",
        fmt(|p| p.ecn),
        fmt(|p| p.gini),
        fmt(|p| p.pot)
    ))
}

struct JumpRatios {
    tax_ecn: f64,
    tax_gini: f64,
    base_ecn: f64,
    base_gini: f64,
}

fn jump_ratios(k: usize) -> std::result::Result<JumpRatios, String> {
    let scores = seeded_instance();
    let delta = 0.02;
    let grid = experiment::linear_grid(0.0, delta, 200);
    let rows = experiment::continuity(&scores, &ctr_config(k, SEEDED_LAMBDA_OT), &grid, delta, 0)
        .map_err(err)?;
    let ratio = |pick: fn(&experiment::ContinuityRow) -> f64| {
        let jumps: Vec<f64> = rows.iter().map(pick).collect();
        let (max, median) = experiment::jump_stats(&jumps);
        max / median
    };
    Ok(JumpRatios {
        tax_ecn: ratio(|r| r.taxrank_ecn_jump),
        tax_gini: ratio(|r| r.taxrank_gini_jump),
        base_ecn: ratio(|r| r.baseline_ecn_jump),
        base_gini: ratio(|r| r.baseline_gini_jump),
    })
}

fn continuity_contrast() -> Check {
    let r = jump_ratios(SEEDED_K)?;
    let summary = format!(
        "max/median jump: taxrank eCN {:.2} Gini {:.2}; greedy tax eCN {:.2} Gini {:.2}",
        r.tax_ecn, r.tax_gini, r.base_ecn, r.base_gini
    );
    ensure(
        r.tax_ecn <= 5.0 && r.tax_gini <= 5.0,
        format!("{summary}: taxrank above 5"),
    )?;
    ensure(
        r.base_ecn >= 10.0 || r.base_gini >= 10.0,
        format!("{summary}: baseline below 10"),
    )?;
    Ok(summary)
}

fn pot_bound_overlay() -> Check {
    let scores = seeded_instance();
    let users = scores.num_users();
    let grid = experiment::linear_grid(0.0, 0.25, 17);
    let points = experiment::sweep(
        &scores,
        &ctr_config(SEEDED_K, SEEDED_LAMBDA_OT),
        &grid,
        0,
        UtilitySource::Expected,
    )
    .map_err(err)?;
    let bound: Vec<f64> = points
        .iter()
        .map(|p| metrics::pot_bound(users, p.tax_rate))
        .collect();
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("tradeoff.csv");
    io::save_tradeoff(&path, &points, Some(&bound)).map_err(err)?;
    let text = std::fs::read_to_string(&path).map_err(err)?;
    let mut lines = text.lines();
    ensure(
        lines.next() == Some("t,ecn,ecpm,gini,pot,pot_bound"),
        "trade-off header lacks pot_bound",
    )?;
    ensure(lines.count() == 17, "trade-off table has wrong length")?;

    ensure(bound[0] == 0.0, format!("bound(0) = {}", bound[0]))?;
    ensure(
        bound.windows(2).all(|w| w[1] > w[0]),
        "bound not increasing",
    )?;
    let limit = 1.0 - 1.0 / users as f64;
    ensure(
        metrics::pot_bound(users, f64::INFINITY) == limit
            && (metrics::pot_bound(users, 1e9) - limit).abs() < 1e-9,
        "bound limit differs from 1 - 1/|U|",
    )?;
    Ok(format!(
        "17 rows t in [0, 4], bound(4) = {:.4}, measured POT(4) = {:.4}, limit {limit:.4}",
        bound[16], points[16].pot
    ))
}

fn determinism_and_speed() -> Check {
    let scores = experiment::synth(1000, 500, Distribution::PowerLaw, 9).map_err(err)?;
    let cfg = RankingConfig {
        k: 10,
        tax_rate: 0.0,
        lambda_ot: 0.5,
        seed: 11,
        mode: Mode::Ctr,
    };
    let dir = tempfile::tempdir().map_err(err)?;
    let mut outputs = Vec::new();
    let mut times = Vec::new();
    for run in 0..2 {
        let start = Instant::now();
        let points = experiment::sweep(
            &scores,
            &cfg,
            &experiment::DEFAULT_T_GRID,
            0,
            UtilitySource::Realized,
        )
        .map_err(err)?;
        times.push(start.elapsed().as_secs_f64());
        let path = dir.path().join(format!("run{run}.csv"));
        io::save_tradeoff(&path, &points, None).map_err(err)?;
        let bits: Vec<u64> = points
            .iter()
            .flat_map(|p| [p.ecn.to_bits(), p.gini.to_bits(), p.pot.to_bits()])
            .collect();
        outputs.push((std::fs::read(&path).map_err(err)?, bits));
    }
    let summary = format!("1000x500, 7 rates: {:.1}s and {:.1}s", times[0], times[1]);
    ensure(outputs[0] == outputs[1], format!("{summary}: runs differ"))?;
    ensure(
        times.iter().all(|&s| s < 60.0),
        format!("{summary}: over 60s"),
    )?;
    Ok(format!("{summary}, bitwise identical"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("1 water-filling optimality", waterfill_optimality),
        ("2 special-case anchors", special_case_anchors),
        ("3 sinkhorn feasibility", sinkhorn_feasibility),
        ("4 sampler exactness", sampler_exactness),
        ("5 metric oracles", metric_oracles),
        ("6 trade-off monotonicity", tradeoff_monotonicity),
        ("7 continuity contrast", continuity_contrast),
        ("8 POT bound overlay", pot_bound_overlay),
        ("9 determinism and performance", determinism_and_speed),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    match jump_ratios(3) {
        Ok(r) => println!(
            "info  continuity at k=3: taxrank eCN {:.2} Gini {:.2}; greedy tax eCN {:.2} Gini {:.2}",
            r.tax_ecn, r.tax_gini, r.base_ecn, r.base_gini
        ),
        Err(e) => println!("info  continuity at k=3 failed: {e}"),
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
