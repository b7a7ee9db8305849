//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line regardless of capture mode.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;

use privsynth::access::{InstrumentedDataset, PrivateData};
use privsynth::domain::{self, Attribute, EncodedDataset, GroupLayout, RecordBits, Schema};
use privsynth::dual::{self, MwState, SamplePool};
use privsynth::harness::{self, ExperimentConfig};
use privsynth::oracle::{self, OracleBackend, OracleProblem, DEFAULT_EXACT_CAP};
use privsynth::primal::{self, PrimalConfig, Variant};
use privsynth::privacy::{self, FilterState, PrivacyLedger, ScoredCandidates};
use privsynth::seeds;
use privsynth::workload::{self, MarginalQuery, SyntheticDataset, Workload};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grid_schema(attributes: usize, values: usize) -> Schema {
    let names: Vec<String> = (0..values).map(|v| format!("v{v}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Schema::new((0..attributes).map(|a| Attribute::categorical(&format!("a{a}"), &refs)).collect()).unwrap()
}

fn synthetic_dataset(schema: &Schema, n: usize, seed: u64) -> EncodedDataset {
    let mut buf = Vec::new();
    domain::write_synthetic_csv(&mut buf, schema, n, seed).unwrap();
    domain::encode_csv(&buf[..], schema).unwrap()
}

/// Query semantics recomputed from attribute values.
fn brute_eval(q: &MarginalQuery, values: &[usize]) -> bool {
    let hit = q.features().iter().zip(q.targets()).all(|(&f, &t)| values[f] == t);
    hit != q.is_negated()
}

fn brute_objective(p: &OracleProblem, values: &[usize]) -> f64 {
    let layout = p.layout();
    let mut total = 0.0;
    for (q, w) in p.weighted_queries() {
        if brute_eval(q, values) {
            total += w;
        }
    }
    for (g, &v) in values.iter().enumerate() {
        total -= p.perturbation()[layout.bit(g, v)];
    }
    total
}

fn all_value_tuples(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &s in sizes {
        out = out.into_iter().flat_map(|prefix| (0..s).map(move |v| [prefix.clone(), vec![v]].concat())).collect();
    }
    out
}

fn random_problem(rng: &mut seeds::Rng) -> OracleProblem {
    let mut sizes = Vec::new();
    let mut product = 1usize;
    loop {
        let s = rng.random_range(1..=6usize);
        if product * s > 4096 || sizes.len() >= 9 {
            break;
        }
        product *= s;
        sizes.push(s);
        if sizes.len() >= 2 && rng.random_bool(0.15) {
            break;
        }
    }
    let layout = GroupLayout::from_sizes(&sizes);
    let m = rng.random_range(0..=40usize);
    let mut weighted = Vec::new();
    for _ in 0..m {
        let arity = rng.random_range(1..=sizes.len().min(3));
        let features = rand::seq::index::sample(rng, sizes.len(), arity).into_vec();
        let targets: Vec<usize> = features.iter().map(|&f| rng.random_range(0..sizes[f])).collect();
        let q = MarginalQuery::new(&layout, &features, &targets, rng.random_bool(0.3)).unwrap();
        // dyadic weights keep every objective exactly representable
        let w = rng.random_range(-16i32..=32) as f64 / 8.0;
        weighted.push((q, w));
    }
    let sigma: Vec<f64> = (0..layout.dimension()).map(|_| rng.random_range(0u32..=64) as f64 / 16.0).collect();
    OracleProblem::new(layout, weighted, sigma).unwrap()
}

fn oracle_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seeds::rng_from(1);
    let mut mismatches = 0;
    let mut largest = 0u128;
    for _ in 0..200 {
        let p = random_problem(&mut rng);
        largest = largest.max(p.layout().domain_size());
        let best = all_value_tuples(&p.layout().sizes())
            .iter()
            .map(|v| brute_objective(&p, v))
            .fold(f64::NEG_INFINITY, f64::max);
        let sol = oracle::solve_exact(&p, DEFAULT_EXACT_CAP).map_err(|e| e.to_string())?;
        let values = p.layout().active_values(&sol.record).ok_or("oracle returned an invalid record")?;
        if sol.objective != best || brute_objective(&p, &values) != best {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatches over 200 problems (largest domain {largest}), {secs:.2}s"),
    )
}

fn em_law() -> Outcome {
    let cases: Vec<(Vec<f64>, f64, f64)> = vec![
        (vec![0.0, 1.0, 2.0, 3.0], 1.0, 1.0),
        (vec![0.5; 6], 2.0, 1.0),
        (vec![-3.0, 0.0, 0.2, 1.5, -0.7, 2.2, 0.9], 0.8, 0.5),
        (vec![0.01, 0.02, 0.0, 0.005, 0.015], 0.05, 1.0 / 2000.0),
        ((0..20).map(|i| (i as f64).sin() * 50.0).collect(), 0.1, 1.0),
    ];
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for (i, (scores, param, sensitivity)) in cases.into_iter().enumerate() {
        let logits: Vec<f64> = scores.iter().map(|s| param * s / (2.0 * sensitivity)).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| (l - top).exp() / norm).collect();

        let c = ScoredCandidates::new(scores, sensitivity).map_err(|e| e.to_string())?;
        let mut rng = seeds::sub_rng(2, "em-law", i as u64);
        let mut counts = vec![0usize; c.len()];
        for _ in 0..draws {
            counts[privacy::exponential_mechanism(&c, param, &mut rng).map_err(|e| e.to_string())?] += 1;
        }
        let tv: f64 =
            0.5 * counts.iter().zip(&expected).map(|(&k, p)| (k as f64 / draws as f64 - p).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    check(worst <= 0.01, format!("worst TV {worst:.5} over 5 score vectors x {draws} draws"))
}

fn rejection_law() -> Outcome {
    let start = Instant::now();
    let layout = GroupLayout::from_sizes(&[2, 2, 2]);
    let base = vec![
        MarginalQuery::new(&layout, &[0], &[0], false).unwrap(),
        MarginalQuery::new(&layout, &[1], &[1], false).unwrap(),
        MarginalQuery::new(&layout, &[0, 2], &[1, 0], false).unwrap(),
        MarginalQuery::new(&layout, &[0, 1, 2], &[1, 1, 1], false).unwrap(),
    ];
    let workload = Workload::closed_under_negation(base);
    let data: Vec<RecordBits> =
        [[0, 0, 0], [0, 1, 1], [1, 1, 0], [1, 0, 0], [1, 1, 1]].iter().map(|v| layout.record_from_values(v)).collect();
    let truth = workload.answers(&data).map_err(|e| e.to_string())?;
    let x = layout.record_from_values(&[1, 0, 1]);
    let (eta, gamma) = (0.6, 0.3);
    let log_weights = vec![0.3, -0.2, 0.0, 0.9, -1.1, 0.4, 0.1, -0.5];
    let state = MwState::from_log_weights(log_weights.clone());
    let (ratios, next) = dual::mw_update(&state, &x, &truth, &workload, eta, gamma);

    // Q^{t+1}(q) ∝ Q^t(q) exp(−η (q(D) − q(x)))
    let unnorm: Vec<f64> = workload
        .queries()
        .iter()
        .zip(&log_weights)
        .zip(&truth.answers)
        .map(|((q, l), a)| (l - eta * (a - if q.eval_unchecked(&x) { 1.0 } else { 0.0 })).exp())
        .collect();
    let total: f64 = unnorm.iter().sum();
    let expected: Vec<f64> = unnorm.iter().map(|w| w / total).collect();

    let (s, fresh, trials) = (12, 3, 50_000);
    let current = state.sampler();
    let next_sampler = next.sampler();
    let mut rng = seeds::sub_rng(3, "rejection-law", 0);
    let mut counts = [0usize; 8];
    let mut seen = 0usize;
    for _ in 0..trials {
        let pool = SamplePool::draw(&current, s, &mut rng);
        let (after, _) =
            dual::rejection_resample(&pool, &ratios, &next_sampler, fresh, s, &mut rng).map_err(|e| e.to_string())?;
        for &id in after.ids() {
            counts[id] += 1;
            seen += 1;
        }
    }
    let tv: f64 = 0.5 * counts.iter().zip(&expected).map(|(&k, p)| (k as f64 / seen as f64 - p).abs()).sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    check(tv <= 0.02 && secs < 120.0, format!("TV {tv:.5} over {trials} trials, {secs:.2}s"))
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn accounting() -> Outcome {
    let mut problems = Vec::new();
    if privacy::dp_to_zcdp(1.0) != 0.5 {
        problems.push(format!("dp_to_zcdp(1) = {}", privacy::dp_to_zcdp(1.0)));
    }
    let conv = privacy::zcdp_to_dp(0.5, 1e-6).map_err(|e| e.to_string())?;
    let conv_ref = 0.5 + 2.0 * (0.5 * (1e6f64).ln()).sqrt();
    if (conv - 5.7566).abs() > 1e-3 || (conv - conv_ref).abs() > 1e-12 {
        problems.push(format!("zcdp_to_dp(0.5, 1e-6) = {conv}, reference {conv_ref}"));
    }
    let adv = privacy::advanced_composition(&[0.01; 100], 1e-5).map_err(|e| e.to_string())?;
    let adv_ref = 100.0 * 0.01 * 0.01f64.exp_m1() + (100.0 * 1e-4 * (1e5f64).ln() / 2.0).sqrt();
    if (adv - 0.24998).abs() > 1e-4 || (adv - adv_ref).abs() > 1e-12 {
        problems.push(format!("advanced_composition = {adv}, reference {adv_ref}"));
    }

    // Charges and budgets on a 1/1000 grid make exact ties with the budget common.
    let mut rng = seeds::sub_rng(4, "filter-streams", 0);
    let mut halted = 0;
    for stream in 0..1000 {
        let budget_units: i64 = rng.random_range(1..=8000);
        let budget = budget_units as f64 / 1000.0;
        let exact_budget = BigRational::new(BigInt::from(budget_units), BigInt::from(1000));
        let mut ledger = PrivacyLedger::new(budget).map_err(|e| e.to_string())?;
        let mut exact_total = BigRational::from_integer(BigInt::from(0));
        let mut expected_halt = None;
        let mut observed_halt = None;
        for i in 0..200 {
            let units: i64 = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=60) };
            exact_total += BigRational::new(BigInt::from(units), BigInt::from(1000));
            if expected_halt.is_none() && exact_total > exact_budget {
                expected_halt = Some(i);
            }
            if ledger.charge(units as f64 / 1000.0).map_err(|e| e.to_string())? == FilterState::Halt {
                observed_halt = Some(i);
                break;
            }
        }
        if expected_halt.is_some() {
            halted += 1;
        }
        if expected_halt != observed_halt {
            problems.push(format!("stream {stream}: expected halt {expected_halt:?}, observed {observed_halt:?}"));
            break;
        }
        // the float total stays within rounding of the exact prefix sum
        let diff = rational(ledger.total()) - &exact_total;
        let drift = if diff < BigRational::from_integer(BigInt::from(0)) { -diff } else { diff };
        if drift > BigRational::new(BigInt::from(1), BigInt::from(1_000_000_000i64)) {
            problems.push(format!("stream {stream}: ledger total drifted by {drift}"));
            break;
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("conversions match references; 1000 filter streams ({halted} halting) agree with exact sums")
        } else {
            problems.join("; ")
        },
    )
}

fn primal_invariant() -> Outcome {
    let schema = grid_schema(4, 3);
    let data = synthetic_dataset(&schema, 300, 5);
    let workload = workload::enumerate_marginals(&schema, 2, 6, 5).map_err(|e| e.to_string())?;
    let mut runs = 0;
    for (variant, rounds, rho) in [
        (Variant::Fem, 1, 0.3),
        (Variant::Fem, 7, 0.1),
        (Variant::Fem, 13, 1.7),
        (Variant::SepFem, 5, 0.05),
        (Variant::SepFem, 11, 2.3),
    ] {
        let instrumented = InstrumentedDataset::new(&data);
        let cfg = PrimalConfig {
            rounds,
            rho,
            eta: 0.5,
            samples: 8,
            variant,
            oracle: OracleBackend::default(),
            seed: rounds as u64,
        };
        let out = primal::run_primal(&instrumented, &workload, &cfg).map_err(|e| e.to_string())?;
        let spends = out.ledger.spends();
        let share = rho / rounds as f64;
        if spends.len() != rounds || spends.iter().any(|&s| s != share) {
            return Err(format!("{variant:?} T={rounds}: spends {spends:?}"));
        }
        if (out.ledger.total() - rho).abs() > 1e-12 {
            return Err(format!("{variant:?} T={rounds}: total {} vs rho {rho}", out.ledger.total()));
        }
        if let Some(t) = out.traces.iter().find(|t| t.data_reads != Some(0)) {
            return Err(format!("{variant:?}: round {} data update read private data ({:?})", t.t, t.data_reads));
        }
        if instrumented.reads().unwrap_or(0) == 0 {
            return Err("instrumentation observed no reads at all".into());
        }
        runs += 1;
    }
    Ok(format!("{runs} runs: T spends of rho/T, totals within 1e-12, zero reads in data updates"))
}

fn experiment_config(dir: &Path, body: serde_json::Value) -> ExperimentConfig {
    let schema = grid_schema(4, 4);
    std::fs::write(dir.join("schema.json"), schema.to_json()).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, body.to_string()).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = experiment_config(
        dir.path(),
        serde_json::json!({
            "data": {"schema": "schema.json", "generate": {"n": 2000, "seed": 11}},
            "workload": {"k": 3, "marginals": 4, "seed": 0},
            "algorithm": "fem",
            "epsilon0": 0.005,
            "eta": 1.0,
            "samples": 50,
            "repetitions": 5,
            "seed": 6
        }),
    );
    let reports = harness::run_epsilon_sweep(&cfg, &[0.1, 0.5, 1.0]).map_err(|e| e.to_string())?;
    let medians: Vec<f64> = reports.iter().map(|r| r.median_error).collect();
    let rounds: Vec<usize> = reports.iter().map(|r| r.parameters.rounds).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let secs = start.elapsed().as_secs_f64();
    check(
        monotone && medians[2] < medians[0] && secs < 600.0 && reports[0].num_queries == 512,
        format!(
            "median max error {:.4} / {:.4} / {:.4} at eps 0.1 / 0.5 / 1 (T = {rounds:?}), {secs:.1}s",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn dqrs_cheaper() -> Outcome {
    let start = Instant::now();
    let schema = grid_schema(8, 4);
    let data = synthetic_dataset(&schema, 2000, 7);
    let workload = workload::enumerate_marginals(&schema, 3, 16, 7).map_err(|e| e.to_string())?;
    let domain_size = data.layout().domain_size();
    if workload.len() != 2048 || domain_size != 1 << 16 {
        return Err(format!("instance has |Q| = {}, |X| = {domain_size}", workload.len()));
    }
    let params = dual::dqrs_params(0.5, 0.1, workload.len(), domain_size as f64).map_err(|e| e.to_string())?;
    let oracle = OracleBackend::default();
    let rs = dual::run_dqrs(&data, &workload, &params, &oracle, 8, None).map_err(|e| e.to_string())?;
    let fresh = dual::run_dualquery(&data, &workload, &params, &oracle, 8, None).map_err(|e| e.to_string())?;
    let (a, b) = (rs.ledger.total(), fresh.ledger.total());
    let secs = start.elapsed().as_secs_f64();
    check(
        a < b,
        format!(
            "T={} eta={} s={}: DQRS rho {a:.4e} < DualQuery rho {b:.4e} (ratio {:.3}), {secs:.1}s",
            params.rounds,
            params.eta,
            params.samples,
            a / b
        ),
    )
}

fn sample_concentration() -> Outcome {
    let start = Instant::now();
    let (alpha, beta, rounds) = (0.25, 0.1, 20);
    let schema = grid_schema(4, 4);
    let data = synthetic_dataset(&schema, 2000, 9);
    let workload = workload::enumerate_marginals(&schema, 3, 4, 0).map_err(|e| e.to_string())?;
    let samples = primal::samples_for(alpha, beta, rounds, workload.len());
    let eta = primal::fem_eta(rounds, data.d());
    let cfg = PrimalConfig {
        rounds,
        rho: privacy::invert_budget(1.0, 1.0 / (2000.0f64 * 2000.0)).map_err(|e| e.to_string())?,
        eta,
        samples,
        variant: Variant::Fem,
        oracle: OracleBackend::default(),
        seed: 10,
    };
    let out = primal::run_primal(&data, &workload, &cfg).map_err(|e| e.to_string())?;
    let mut far = 0usize;
    for t in 1..=rounds {
        let past: Vec<&MarginalQuery> = out.history[..t].iter().map(|&i| workload.get(i)).collect();
        let (reference, _) = primal::fem_data_update(
            data.layout(),
            &past,
            eta,
            50 * samples,
            &cfg.oracle,
            seeds::substream(99, "reference", t as u64),
        )
        .map_err(|e| e.to_string())?;
        let reference = SyntheticDataset::uniform(reference);
        let ref_answers = workload.answers(&reference).map_err(|e| e.to_string())?;
        let est = workload.answers(&out.rounds[t - 1]).map_err(|e| e.to_string())?;
        far += est.answers.iter().zip(&ref_answers.answers).filter(|(a, b)| (*a - *b).abs() > alpha / 4.0).count();
    }
    let pairs = rounds * workload.len();
    let fraction = far as f64 / pairs as f64;
    let secs = start.elapsed().as_secs_f64();
    check(
        fraction < beta,
        format!("s={samples}: {far}/{pairs} (round, query) pairs off by more than alpha/4 ({fraction:.4}), {secs:.1}s"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let schema = grid_schema(4, 3);
    std::fs::write(dir.path().join("schema.json"), schema.to_json()).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for algorithm in ["fem", "sepfem", "dqrs", "dualquery"] {
        let config = serde_json::json!({
            "data": {"schema": "schema.json", "generate": {"n": 400, "seed": 3}},
            "workload": {"k": 2, "marginals": 3, "seed": 1},
            "algorithm": algorithm,
            "T": 12,
            "eta": 0.8,
            "samples": 16,
            "alpha": 0.5,
            "repetitions": 2,
            "seed": 21
        });
        let cfg_path = dir.path().join(format!("{algorithm}.json"));
        std::fs::write(&cfg_path, config.to_string()).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{algorithm}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_privsynth"))
                .args(["run", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .args(["--rho", "0.5"])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{algorithm}: {}", String::from_utf8_lossy(&status.stderr)));
            }
            outputs.push(out);
        }
        for file in ["report.json", "traces/rep0.csv", "traces/rep1.csv", "ledgers/rep0.json"] {
            let a = std::fs::read(outputs[0].join(file)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outputs[1].join(file)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{algorithm}: {file} differs between runs"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} report/trace/ledger files byte-identical across repeated runs"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("oracle exactness", oracle_exactness),
        ("exponential mechanism law", em_law),
        ("rejection-sampling law", rejection_law),
        ("accounting arithmetic", accounting),
        ("primal privacy invariant", primal_invariant),
        ("desk-scale privacy trend", desk_trend),
        ("DQRS cheaper than DualQuery", dqrs_cheaper),
        ("sample concentration", sample_concentration),
        ("CLI determinism", cli_determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS [{id}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
