use sparsedet3d_oracles::suites;

fn check(o: sparsedet3d_oracles::Outcome) {
    println!("{}", o.line());
    assert!(o.passed, "{}", o.line());
}

#[test]
fn kernel_map_matches_double_loop() {
    check(suites::kernel_map_bruteforce());
}

#[test]
fn resampling_matches_set_oracles() {
    check(suites::resampling_bruteforce());
}

#[test]
fn losses_match_direct_formulas() {
    check(suites::loss_formulas());
}

#[test]
fn composite_losses_match_primitives() {
    check(suites::compositional_losses());
}

#[test]
fn map_matches_reference() {
    check(suites::average_precision_reference());
}

#[test]
fn synthetic_sizes_follow_class_means() {
    check(suites::synthetic_size_statistics());
}

#[test]
fn clouds_survive_round_trip() {
    check(suites::cloud_round_trip());
}

#[test]
fn bench_agrees_with_dense_oracle() {
    check(suites::bench_dense_agreement());
}
