mod support;

#[test]
fn ranking_matches_brute_force() {
    for seed in 0..300 {
        support::tra_matches_oracle(seed).unwrap();
    }
}

#[test]
fn conv_matches_six_loop_reference() {
    for seed in 0..50 {
        support::conv_matches_naive(seed).unwrap();
    }
}

#[test]
fn embedding_tables_round_trip() {
    for seed in 0..100 {
        support::embedding_round_trip(seed).unwrap();
    }
}

#[test]
fn malformed_embeddings_are_classified() {
    support::malformed_embeddings_rejected().unwrap();
}

#[test]
fn heads_are_isolated() {
    for seed in 0..20 {
        support::head_isolation(seed).unwrap();
    }
}

#[test]
fn loss_decomposes_by_sample_share() {
    for seed in 0..50 {
        support::loss_decomposition(seed).unwrap();
    }
}

#[test]
fn object_samples_only_rescale_activity_head_gradient() {
    for seed in 0..20 {
        support::object_samples_leave_activity_head_gradient(seed).unwrap();
    }
}

#[test]
fn trunk_is_shared_between_heads() {
    for seed in 0..10 {
        support::trunk_is_shared(seed).unwrap();
    }
}

#[test]
fn synthetic_relevance_recovers_truth() {
    for seed in 0..20 {
        support::synthetic_tra_recovers_truth(seed).unwrap();
    }
}

#[test]
fn evaluation_protocol() {
    for seed in 0..10 {
        support::protocol_checks(seed).unwrap();
    }
}

#[test]
fn random_scoring_is_chance() {
    let (acc, bound) = support::random_scoring_accuracy(5, 3000, 9);
    assert!((acc - 0.2).abs() <= bound, "{acc} ± {bound}");
}
