use popnet_core::gradcheck::{run, LossName, Precision, DEFAULT_INSTANCES};

#[test]
fn all_losses_pass_in_f64() {
    let rows = run(&LossName::ALL, Precision::F64, 0, DEFAULT_INSTANCES).unwrap();
    for r in &rows {
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn all_losses_pass_in_f32() {
    let rows = run(&LossName::ALL, Precision::F32, 1, DEFAULT_INSTANCES).unwrap();
    for r in &rows {
        assert!(r.passed, "{r:?}");
    }
}
