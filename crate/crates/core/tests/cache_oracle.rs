mod support;

#[test]
fn cache_matches_a_vector_lru_on_random_traces() {
    support::lru_oracle::check_traces(1000, 0).unwrap();
}
