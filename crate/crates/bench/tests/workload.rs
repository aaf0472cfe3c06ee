use pskv_bench::{one_iteration, Workload};

#[test]
fn workload_shape() {
    let wl = Workload::new(78, 20);
    assert_eq!(wl.prompts.len(), 1);
    assert_eq!(wl.prompts[0].len(), 78);
    assert_eq!(wl.targets[0].len(), 20);
    let cfg = one_iteration(64);
    assert_eq!(cfg.width(), 64);
    assert!(cfg.validate().is_ok());
}
