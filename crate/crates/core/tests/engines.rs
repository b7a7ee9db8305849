use proptest::prelude::*;

use privsynth::domain::{self, Attribute, EncodedDataset, Schema};
use privsynth::dual;
use privsynth::oracle::OracleBackend;
use privsynth::primal::{self, PrimalConfig, Variant};
use privsynth::workload::{self, SyntheticDataset, Workload};

fn schema(sizes: &[usize]) -> Schema {
    let attrs = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let values: Vec<String> = (0..s).map(|v| format!("v{v}")).collect();
            let refs: Vec<&str> = values.iter().map(String::as_str).collect();
            Attribute::categorical(&format!("a{i}"), &refs)
        })
        .collect();
    Schema::new(attrs).unwrap()
}

fn dataset(schema: &Schema, n: usize, seed: u64) -> EncodedDataset {
    let mut buf = Vec::new();
    domain::write_synthetic_csv(&mut buf, schema, n, seed).unwrap();
    domain::encode_csv(&buf[..], schema).unwrap()
}

fn uniform_error(data: &EncodedDataset, w: &Workload) -> f64 {
    let layout = data.layout();
    let all: Vec<_> = (0..layout.domain_size() as usize)
        .map(|mut i| {
            let values: Vec<usize> = layout
                .sizes()
                .iter()
                .map(|&s| {
                    let v = i % s;
                    i /= s;
                    v
                })
                .collect();
            layout.record_from_values(&values)
        })
        .collect();
    workload::max_error(w, data, &SyntheticDataset::uniform(all)).unwrap()
}

#[test]
fn fem_beats_uniform_with_generous_budget() {
    let s = schema(&[3, 3, 4]);
    let data = dataset(&s, 1000, 1);
    let w = workload::enumerate_marginals(&s, 2, 3, 1).unwrap();
    let cfg = PrimalConfig {
        rounds: 60,
        rho: 50.0,
        eta: 0.5,
        samples: 40,
        variant: Variant::Fem,
        oracle: OracleBackend::default(),
        seed: 3,
    };
    let out = primal::run_primal(&data, &w, &cfg).unwrap();
    let err = workload::max_error(&w, &data, &out.synthetic).unwrap();
    assert!(err < uniform_error(&data, &w), "FEM error {err}");
}

#[test]
fn dual_engines_beat_uniform() {
    let s = schema(&[3, 3, 4]);
    let data = dataset(&s, 1000, 2);
    let w = workload::enumerate_marginals(&s, 2, 3, 2).unwrap();
    let params = dual::DqrsParams::custom(0.3, 0.1, 80, 0.2, 60).unwrap();
    let baseline = uniform_error(&data, &w);
    for out in [
        dual::run_dqrs(&data, &w, &params, &OracleBackend::default(), 4, None).unwrap(),
        dual::run_dualquery(&data, &w, &params, &OracleBackend::default(), 4, None).unwrap(),
    ] {
        let err = workload::max_error(&w, &data, &out.synthetic).unwrap();
        assert!(err < baseline, "dual error {err} vs uniform {baseline}");
        assert_eq!(out.responses.len(), 80);
    }
}

#[test]
fn local_search_backend_runs_primal() {
    let s = schema(&[4, 4, 4, 4]);
    let data = dataset(&s, 500, 5);
    let w = workload::enumerate_marginals(&s, 3, 2, 5).unwrap();
    let cfg = PrimalConfig {
        rounds: 10,
        rho: 1.0,
        eta: 1.0,
        samples: 10,
        variant: Variant::SepFem,
        oracle: OracleBackend::Local { restarts: 4 },
        seed: 6,
    };
    let out = primal::run_primal(&data, &w, &cfg).unwrap();
    assert_eq!(out.rounds.len(), 10);
    assert!(out.synthetic.weighted_records().all(|(r, _)| data.layout().is_valid(r)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn error_never_exceeds_regret_sum(seed in 0u64..1000, rounds in 1usize..6, eta in 0.2f64..3.0) {
        let s = schema(&[2, 3, 2]);
        let data = dataset(&s, 120, seed);
        let w = workload::enumerate_marginals(&s, 2, 2, seed).unwrap();
        let cfg = PrimalConfig {
            rounds,
            rho: 0.5,
            eta,
            samples: 6,
            variant: Variant::Fem,
            oracle: OracleBackend::default(),
            seed,
        };
        let out = primal::run_primal(&data, &w, &cfg).unwrap();
        let regret = primal::empirical_regret(&out, &data, &w, data.layout(), &cfg.oracle).unwrap();
        let err = workload::max_error(&w, &data, &out.synthetic).unwrap();
        prop_assert!(err <= regret.data + regret.query + 1e-9);
        prop_assert!(regret.data >= -1e-12);
    }

    #[test]
    fn negation_pairs_sum_to_one(seed in 0u64..1000, n in 1usize..200) {
        let s = schema(&[3, 2, 2]);
        let data = dataset(&s, n, seed);
        let w = workload::enumerate_marginals(&s, 2, 3, seed).unwrap();
        let a = w.answers(&data).unwrap().answers;
        for (i, q) in w.queries().iter().enumerate() {
            let j = w.queries().iter().position(|p| *p == q.negate()).unwrap();
            prop_assert!((a[i] + a[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_ledgers_order(seed in 0u64..200) {
        let s = schema(&[2, 2, 3]);
        let data = dataset(&s, 300, seed);
        let w = workload::enumerate_marginals(&s, 2, 2, seed).unwrap();
        let params = dual::DqrsParams::custom(0.5, 0.1, 12, 0.125, 30).unwrap();
        let rs = dual::run_dqrs(&data, &w, &params, &OracleBackend::default(), seed, None).unwrap();
        let fresh = dual::run_dualquery(&data, &w, &params, &OracleBackend::default(), seed, None).unwrap();
        let cost = dual::dqrs_privacy_cost(&params, 300);
        prop_assert!(rs.ledger.total() >= cost.exact - 1e-15);
        prop_assert!((fresh.ledger.total() - dual::dualquery_privacy_cost(&params, 300)).abs() < 1e-12);
    }
}
