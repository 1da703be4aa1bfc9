//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use branch_core::expr::{BinOp, Expr};
use branch_core::llm::{ChatBackend, FnBackend, ScriptedBackend, TaskHint};
use branch_core::metrics::{
    kendall_tau, log_error, paired_bootstrap, range_hit, shd, spearman_rho, EvalPair, PairMetric,
};
use branch_core::model::{BayesNetwork, DisclosureId, NetworkMode, QueryKind, RunConfig};
use branch_core::pipeline::Pipeline;
use branch_core::popsim::{
    exact_population, sample_population, Attribute, AttributeSchema, GeneratorNetwork, GeneratorNode, OracleBackend,
    Population, Scenario,
};
use branch_core::uncertainty::{interval_prf, k_interval, self_consistency, KInterval, Prf, RunEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn naive_count(pop: &Population, individual: &[usize], attrs: &[usize]) -> u64 {
    pop.individuals()
        .iter()
        .filter(|ind| attrs.iter().all(|&a| ind[a] == individual[a]))
        .count() as u64
}

fn oracle_raw_k(
    pop: Population,
    generator: &GeneratorNetwork,
    scenario: &Scenario,
    mode: NetworkMode,
) -> Result<f64, String> {
    let backend = OracleBackend::new(pop, generator.clone());
    let cfg = RunConfig {
        network_mode: mode,
        ..RunConfig::default()
    };
    Pipeline::new(&backend, cfg)
        .run(&scenario.context)
        .map(|r| r.raw_k)
        .map_err(|f| f.to_string())
}

fn oracle_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let scenarios = 120;
    let mut worst = 0.0f64;
    for seed in 0..scenarios {
        let attrs = rng.random_range(3..=6);
        let size = 10f64.powf(rng.random_range(2.5..5.0)).round() as usize;
        let generator = GeneratorNetwork::random(attrs, 4, seed);
        let pop = sample_population(&generator, size, seed).map_err(|e| e.to_string())?;
        let index = rng.random_range(0..pop.len());
        let scenario = Scenario::around(&generator, &pop, index, None).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..attrs).collect();
        let truth = naive_count(&pop, &pop.individuals()[index], &all);
        check(
            truth == scenario.true_k,
            format!("seed {seed}: scenario count {} vs naive {truth}", scenario.true_k),
        )?;
        let raw = oracle_raw_k(pop, &generator, &scenario, NetworkMode::FullyConnected)?;
        let delta = (raw - truth as f64).abs();
        worst = worst.max(delta);
        check(delta < 0.5, format!("seed {seed}: raw_k {raw} vs count {truth}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("{scenarios} scenarios, max |delta| {worst:.2e}, {secs:.2}s"))
}

fn binary_schema(names: &[&str]) -> AttributeSchema {
    let attrs = names
        .iter()
        .map(|n| {
            let (v0, v1) = (format!("{n}0"), format!("{n}1"));
            Attribute::new(*n, &[v0.as_str(), v1.as_str()])
        })
        .collect();
    AttributeSchema::new(attrs).unwrap()
}

fn root(p: f64) -> GeneratorNode {
    GeneratorNode {
        parents: vec![],
        table: vec![vec![p, 1.0 - p]],
    }
}

fn child(parent: usize, p0: f64, p1: f64) -> GeneratorNode {
    GeneratorNode {
        parents: vec![parent],
        table: vec![vec![p0, 1.0 - p0], vec![p1, 1.0 - p1]],
    }
}

fn independence_soundness() -> Outcome {
    let cases = vec![
        (
            "pair",
            GeneratorNetwork::new(binary_schema(&["a", "b"]), vec![root(0.5), child(0, 0.9, 0.1)]),
            1000,
        ),
        (
            "skip",
            GeneratorNetwork::new(
                binary_schema(&["a", "b", "c"]),
                vec![root(0.4), root(0.5), child(0, 0.95, 0.05)],
            ),
            1000,
        ),
        (
            "tail",
            GeneratorNetwork::new(
                binary_schema(&["a", "b", "c", "d"]),
                vec![root(0.5), root(0.2), root(0.5), child(1, 0.8, 0.1)],
            ),
            1000,
        ),
    ];
    let mut notes = Vec::new();
    for (name, generator, size) in cases {
        let generator = generator.map_err(|e| e.to_string())?;
        let pop = exact_population(&generator, size).map_err(|e| e.to_string())?;
        let scenario = Scenario::around(&generator, &pop, 0, None).map_err(|e| e.to_string())?;
        let truth = scenario.true_k as f64;
        let disjoint = oracle_raw_k(pop.clone(), &generator, &scenario, NetworkMode::FullyDisjoint)?;
        let elicited = oracle_raw_k(pop, &generator, &scenario, NetworkMode::Elicited)?;
        let rel = (disjoint - truth).abs() / truth;
        check(rel > 0.1, format!("{name}: disjoint error only {rel:.3}"))?;
        check(
            (elicited - truth).abs() < 0.5,
            format!("{name}: elicited {elicited} vs {truth}"),
        )?;
        notes.push(format!("{name} disjoint err {:.0}%", rel * 100.0));
    }
    Ok(notes.join(", ") + ", elicited exact")
}

fn metric_golden_values() -> Outcome {
    let le = log_error(100.0, 2.0).map_err(|e| e.to_string())?;
    check((le - 5.64).abs() <= 0.005, format!("log_error(100, 2) = {le}"))?;
    let hit = |k_hat: f64, k_star: f64| range_hit(k_hat, k_star, 5.0).map_err(|e| e.to_string());
    check(hit(100.0, 500.0)?, "range_hit(100, 500, 5) is false")?;
    for (k_star, want) in [(100.0, true), (99.0, false), (2500.0, true), (2501.0, false)] {
        let got = hit(500.0, k_star)?;
        check(got == want, format!("range_hit(500, {k_star}, 5) = {got}"))?;
    }
    let ids: Vec<DisclosureId> = (0..5).map(|i| DisclosureId::new(format!("d{i}"))).collect();
    let d = shd(
        &BayesNetwork::fully_connected(ids.clone()),
        &BayesNetwork::fully_disjoint(ids),
    );
    check(d == 10, format!("SHD = {d}"))?;
    Ok(format!("log_error {le:.4}, range boundaries [100, 2500], SHD {d}"))
}

/// Rank of each element: number of smaller elements plus the mean position
/// among equal ones.
fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn brute_tau_b(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 {
                tied_x += 1;
            }
            if dy == 0.0 {
                tied_y += 1;
            }
            if dx * dy > 0.0 {
                concordant += 1;
            } else if dx * dy < 0.0 {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - tied_x) as f64 * (pairs - tied_y) as f64).sqrt();
    if denom == 0.0 {
        None
    } else {
        Some((concordant - discordant) as f64 / denom)
    }
}

fn rank_correlation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=8);
        let span = rng.random_range(2..=6);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..span) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..span) as f64).collect();
        let rho = spearman_rho(&xs, &ys).ok();
        let tau = kendall_tau(&xs, &ys).ok();
        let want_rho = brute_pearson(&brute_ranks(&xs), &brute_ranks(&ys));
        let want_tau = brute_tau_b(&xs, &ys);
        for (name, got, want) in [("spearman", rho, want_rho), ("kendall", tau, want_tau)] {
            match (got, want) {
                (Some(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    check(
                        (g - w).abs() <= 1e-12,
                        format!("trial {trial} {name}: {g} vs {w} on {xs:?} {ys:?}"),
                    )?;
                }
                (None, None) => degenerate += 1,
                _ => {
                    return Err(format!(
                        "trial {trial} {name}: defined-ness differs ({got:?} vs {want:?})"
                    ))
                }
            }
        }
    }
    Ok(format!(
        "1000 vectors, max |diff| {worst:.1e}, {degenerate} undefined cases agree"
    ))
}

const SLOTS: &[&str] = &["s1", "s2", "s3", "x", "_t9"];

fn random_number(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(0..2000) as f64,
        1 => rng.random_range(0..10_000) as f64 / 10_000.0,
        2 => rng.random::<f64>() * 1e6,
        _ => loop {
            let v = f64::from_bits(rng.random::<u64>() & !(1 << 63));
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn random_tree(rng: &mut ChaCha8Rng, depth: u32) -> Expr {
    if depth == 0 || rng.random_bool(0.3) {
        if rng.random_bool(0.7) {
            Expr::Num(random_number(rng))
        } else {
            Expr::Slot(SLOTS[rng.random_range(0..SLOTS.len())].to_string())
        }
    } else {
        let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.random_range(0..4)];
        Expr::Binary(
            op,
            Box::new(random_tree(rng, depth - 1)),
            Box::new(random_tree(rng, depth - 1)),
        )
    }
}

fn reference_eval(e: &Expr, env: &BTreeMap<String, f64>) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        Expr::Slot(s) => env.get(s).copied(),
        Expr::Binary(op, l, r) => {
            let a = reference_eval(l, env)?;
            let b = reference_eval(r, env)?;
            match op {
                BinOp::Add => Some(a + b),
                BinOp::Sub => Some(a - b),
                BinOp::Mul => Some(a * b),
                BinOp::Div if b == 0.0 => None,
                BinOp::Div => Some(a / b),
            }
        }
    }
}

fn expression_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut evaluated = 0;
    for trial in 0..10_000 {
        let depth = rng.random_range(0..7);
        let tree = random_tree(&mut rng, depth);
        let text = tree.render();
        let back = Expr::parse(&text).map_err(|e| format!("trial {trial}: `{text}` does not parse: {e}"))?;
        check(back == tree, format!("trial {trial}: `{text}` re-parsed differently"))?;
        let mut env = BTreeMap::new();
        for s in SLOTS {
            if rng.random_bool(0.9) {
                env.insert(s.to_string(), random_number(&mut rng));
            }
        }
        let got = back.evaluate(&env).ok();
        let want = reference_eval(&tree, &env);
        let same = match (got, want) {
            (Some(g), Some(w)) => g.to_bits() == w.to_bits() || (g.is_nan() && w.is_nan()),
            (None, None) => true,
            _ => false,
        };
        check(
            same,
            format!("trial {trial}: `{text}` gives {got:?}, reference {want:?}"),
        )?;
        if got.is_some() {
            evaluated += 1;
        }
    }
    Ok(format!("10000 trees round-trip, {evaluated} evaluated bit-identically"))
}

fn prediction_intervals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut clamped = 0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=10);
        let centre = 10f64.powf(rng.random_range(0.0..6.0));
        let spread = rng.random_range(0.0..2.0);
        let samples: Vec<f64> = (0..n)
            .map(|_| (centre * 10f64.powf(rng.random_range(-spread..=spread))).max(1.0))
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let ensemble = RunEnsemble::from_samples(format!("e{trial}"), samples).map_err(|e| e.to_string())?;
        let iv = k_interval(&ensemble);
        check(
            iv.contains(ensemble.mean),
            format!("trial {trial}: {iv:?} misses mean {}", ensemble.mean),
        )?;
        check(iv.lo >= 1.0, format!("trial {trial}: lower bound {}", iv.lo))?;
        let want_lo = (mean - 2.0 * sd).max(1.0);
        check(
            (iv.lo - want_lo).abs() <= 1e-9 * mean.max(1.0),
            format!("trial {trial}: lo {} vs {want_lo}", iv.lo),
        )?;
        check(
            (iv.hi - (mean + 2.0 * sd)).abs() <= 1e-9 * mean,
            format!("trial {trial}: hi {}", iv.hi),
        )?;
        if mean - 2.0 * sd < 1.0 {
            clamped += 1;
        }
        let prf = interval_prf(&iv, &iv);
        check(
            prf == Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
            format!("trial {trial}: self-overlap {prf:?}"),
        )?;
    }
    let pred = KInterval::new(1.0, 10.0).map_err(|e| e.to_string())?;
    let gold = KInterval::new(6.0, 20.0).map_err(|e| e.to_string())?;
    let f1 = interval_prf(&pred, &gold).f1;
    check(f1 == 0.4, format!("[1,10] x [6,20] gives F1 {f1}"))?;
    Ok(format!(
        "1000 ensembles ({clamped} clamped at 1), self PRF (1,1,1), F1 {f1}"
    ))
}

fn self_consistency_identity() -> Outcome {
    let generator = GeneratorNetwork::random(3, 3, 11);
    let pop = sample_population(&generator, 2000, 5).map_err(|e| e.to_string())?;
    let index = 17;
    let scenario = Scenario::around(&generator, &pop, index, None).map_err(|e| e.to_string())?;
    let population_count = naive_count(&pop, &pop.individuals()[index], &[0]) as f64;
    let oracle = Arc::new(OracleBackend::new(pop, generator));
    let cfg = RunConfig {
        network_mode: NetworkMode::FullyConnected,
        ..RunConfig::default()
    };

    let recorder = {
        let oracle = oracle.clone();
        FnBackend::new(move |req| oracle.complete(req))
    };
    Pipeline::new(&recorder, cfg.clone())
        .run(&scenario.context)
        .map_err(|f| f.to_string())?;
    self_consistency(&Pipeline::new(&recorder, cfg.clone()), &scenario.context, 5).map_err(|e| e.to_string())?;
    let constant = ScriptedBackend::new(recorder.recorded(false));
    let single = Pipeline::new(&constant, cfg.clone())
        .run(&scenario.context)
        .map_err(|f| f.to_string())?;
    let sc =
        self_consistency(&Pipeline::new(&constant, cfg.clone()), &scenario.context, 5).map_err(|e| e.to_string())?;
    check(
        sc.k_hat == single.k_hat,
        format!("constant: k_hat {} vs single {}", sc.k_hat, single.k_hat),
    )?;
    check(
        sc.k_bar == single.raw_k,
        format!("constant: k_bar {} vs raw_k {}", sc.k_bar, single.raw_k),
    )?;

    let draws = ["0.2", "0.4", "0.2", "0.4", "0.2"];
    let mixture = {
        let oracle = oracle.clone();
        FnBackend::new(move |req| match &req.hint {
            TaskHint::Estimation {
                kind: QueryKind::Percentage,
                ..
            } => Ok(format!(
                "<answer>{}</answer><score>0.9</score>",
                draws[req.sample as usize % draws.len()]
            )),
            _ => oracle.complete(req),
        })
    };
    self_consistency(&Pipeline::new(&mixture, cfg.clone()), &scenario.context, 5).map_err(|e| e.to_string())?;
    let fixture = ScriptedBackend::new(mixture.recorded(true));
    let mixed = self_consistency(&Pipeline::new(&fixture, cfg), &scenario.context, 5).map_err(|e| e.to_string())?;
    let expected = population_count * 0.28 * 0.28;
    check(
        (mixed.k_bar - expected).abs() <= 1e-9,
        format!("mixture: k_bar {} vs hand value {expected}", mixed.k_bar),
    )?;
    Ok(format!(
        "constant k_hat {} = single run, mixture k_bar {:.6} = {expected:.6}",
        sc.k_hat, mixed.k_bar
    ))
}

fn bootstrap_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth: Vec<u64> = (0..40).map(|_| rng.random_range(1..100_000)).collect();
    let pairs = |f: &mut dyn FnMut(u64) -> u64| -> Result<Vec<EvalPair>, String> {
        truth
            .iter()
            .enumerate()
            .map(|(i, &k)| EvalPair::new(format!("p{i}"), f(k).max(1), k).map_err(|e| e.to_string()))
            .collect()
    };
    let noisy = pairs(&mut |k| (k as f64 * 10f64.powf(rng.random_range(-1.5..1.5))) as u64)?;
    let good = pairs(&mut |k| (k as f64 * 10f64.powf(rng.random_range(-0.1..0.1))) as u64)?;
    let same = paired_bootstrap(&noisy, &noisy, PairMetric::LogError, 10_000, 1).map_err(|e| e.to_string())?;
    check(same.p_value >= 0.9, format!("identical systems p = {}", same.p_value))?;
    let dom = paired_bootstrap(&good, &noisy, PairMetric::LogError, 100_000, 1).map_err(|e| e.to_string())?;
    check(dom.p_value < 0.01, format!("dominating system p = {}", dom.p_value))?;
    let again = paired_bootstrap(&good, &noisy, PairMetric::LogError, 100_000, 1).map_err(|e| e.to_string())?;
    check(
        again.p_value.to_bits() == dom.p_value.to_bits(),
        "repeat with the same seed differs",
    )?;
    let range = paired_bootstrap(&good, &noisy, PairMetric::Range { a: 2.0 }, 100_000, 3).map_err(|e| e.to_string())?;
    check(
        range.p_value < 0.01,
        format!("dominating system on range@2 p = {}", range.p_value),
    )?;
    Ok(format!(
        "identical p {}, dominating p {} (log error), {} (range@2), repeat bit-identical",
        same.p_value, dom.p_value, range.p_value
    ))
}

fn golden_transcript() -> Outcome {
    let mut notes = Vec::new();
    for case in common::golden::CASES {
        let (produced, expected) = common::golden::replay(case);
        check(
            produced == expected,
            format!("case {case} differs from its stored result"),
        )?;
        notes.push(*case);
    }
    let missing: Vec<&str> = common::golden::guards_fired(&common::golden::stored("branch"))
        .into_iter()
        .filter(|(_, fired)| !fired)
        .map(|(g, _)| g)
        .collect();
    check(missing.is_empty(), format!("guards never fired: {missing:?}"))?;
    Ok(format!("{} byte-identical, every guard fired", notes.join("/")))
}

fn dataset_validator() -> Outcome {
    let doc: serde_json::Value = serde_json::from_str(common::SAMPLE_DATASET).map_err(|e| e.to_string())?;
    check(!common::mutation::caught(&doc), "unmutated fixture is rejected")?;
    let sweep = common::mutation::sweep(&doc);
    check(
        sweep.rate() >= 0.95,
        format!("caught {}/{}; missed {:?}", sweep.caught, sweep.checked(), sweep.missed),
    )?;
    Ok(format!(
        "caught {}/{} constrained mutants ({:.1}%), {} free-field mutants exempt",
        sweep.caught,
        sweep.checked(),
        sweep.rate() * 100.0,
        sweep.free_caught + sweep.free_missed
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: &[Criterion] = &[
        ("oracle exactness", oracle_exactness),
        ("independence soundness", independence_soundness),
        ("metric golden values", metric_golden_values),
        ("rank-correlation oracle", rank_correlation_oracle),
        ("expression round-trip", expression_round_trip),
        ("prediction-interval properties", prediction_intervals),
        ("self-consistency identity", self_consistency_identity),
        ("bootstrap sanity", bootstrap_sanity),
        ("golden pipeline transcript", golden_transcript),
        ("dataset validator", dataset_validator),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
