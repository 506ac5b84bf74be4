mod support;

#[test]
fn train_is_deterministic() {
    support::training_is_deterministic(3).unwrap();
}

#[test]
fn activity_only_split_reproduces_baseline() {
    support::activity_only_matches_baseline(5).unwrap();
}

#[test]
fn pretraining_learns_separable_classes() {
    let (acc, head_same) = support::pretrain_separable(500, 1).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(head_same);
}

#[test]
fn zero_iterations_leave_the_net_unchanged() {
    assert!(support::zero_iteration_pretrain_is_identity(2));
}
