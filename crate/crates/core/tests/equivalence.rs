use pskv_core::numerics::Precision;
use pskv_core::verify::{case_specs, check_case, run_equivalence_suite, VerifyOptions};

#[test]
fn default_family_passes_in_f32() {
    let report = run_equivalence_suite(&VerifyOptions::default()).unwrap();
    assert!(report.passed, "{:#?}", report.failures);
    assert!(report.bit_identical);
    assert_eq!(report.cases.len(), 20);
}

#[test]
fn f64_mode_is_bit_identical() {
    let opts = VerifyOptions {
        precision: Precision::F64,
        n_configs: 6,
        seed: 3,
        ..VerifyOptions::default()
    };
    let report = run_equivalence_suite(&opts).unwrap();
    assert!(report.passed, "{:#?}", report.failures);
    assert!(report.bit_identical);
}

#[test]
fn injected_fault_is_detected() {
    let opts = VerifyOptions {
        n_configs: 3,
        inject_fault: true,
        ..VerifyOptions::default()
    };
    let report = run_equivalence_suite(&opts).unwrap();
    assert!(!report.passed);
    assert!(!report.bit_identical);
    assert!(report
        .failures
        .iter()
        .any(|f| f.contains("strategy_bit_identity")));
}

#[test]
fn family_spans_the_required_ranges() {
    let specs = case_specs(20, 0);
    let layers: std::collections::BTreeSet<_> = specs.iter().map(|s| s.model.n_layers).collect();
    assert_eq!(layers.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let groups: std::collections::BTreeSet<_> =
        specs.iter().map(|s| s.model.group_size()).collect();
    assert_eq!(groups.into_iter().collect::<Vec<_>>(), vec![1, 2, 4]);
    for s in &specs {
        assert!((16..=64).contains(&s.model.d_model));
        assert!((1..=4).contains(&s.n_prompts()));
        assert!((1..=64).contains(&s.n_cand()));
        assert!((4..=20).contains(&s.suffix_len));
        assert!(s.prefix_lens.iter().all(|n| (4..=64).contains(n)));
        assert!(s.target_lens.iter().all(|n| (4..=32).contains(n)));
    }
}

#[test]
fn every_check_runs_on_a_grouped_case() {
    let spec = case_specs(3, 9)
        .into_iter()
        .find(|s| s.model.group_size() > 1)
        .unwrap();
    let res = check_case::<f32>(&spec, false).unwrap();
    let names: Vec<_> = res.checks.iter().map(|c| c.name.as_str()).collect();
    for n in [
        "strategy_bit_identity",
        "padding_neutrality",
        "exact_cells",
        "prefix_bytes",
        "cache_split_invariance",
        "gqa_mha_equivalence",
    ] {
        assert!(names.contains(&n), "{n} missing");
    }
    assert!(res.passed, "{:#?}", res.checks);
}
