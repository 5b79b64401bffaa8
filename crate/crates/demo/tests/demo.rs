use dilunet_demo::{agreement, neighborhood_of, synth_pair};

#[test]
fn window_in_the_middle_is_full() {
    let n = neighborhood_of(9, 9, 3, 1, 4, 4).unwrap();
    assert_eq!(n.len(), 9);
    assert!(n.contains(&(4 * 9 + 4)) && n.contains(&(3 * 9 + 3)) && n.contains(&(5 * 9 + 5)));
}

#[test]
fn dilated_window_keeps_the_residue_class() {
    let n = neighborhood_of(12, 12, 3, 2, 5, 5).unwrap();
    assert_eq!(n.len(), 9);
    assert!(n.iter().all(|&t| (t / 12) % 2 == 1 && (t % 12) % 2 == 1));
}

#[test]
fn bad_inputs_are_errors() {
    assert!(neighborhood_of(4, 4, 3, 1, 4, 0).is_err());
    assert!(neighborhood_of(4, 4, 2, 1, 0, 0).is_err());
    assert!(synth_pair(30, 2, 0).is_err());
}

#[test]
fn sample_layout() {
    let bytes = synth_pair(32, 4, 1).unwrap();
    assert_eq!(bytes.len(), 2 * 32 * 32);
    assert!(bytes[1024..].iter().all(|&l| l < 4));
}

#[test]
fn kernel_matches_oracle() {
    let a = agreement(10, 3, 2, 2, 0).unwrap();
    assert_eq!(a.tokens, 100);
    assert_eq!(a.neighbors_per_token, 9.0);
    assert!(a.max_abs_diff < 1e-5);
}
