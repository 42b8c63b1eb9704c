mod common;

#[test]
fn name_buffer_lands_before_a_user() {
    let (name, user) = common::walkthrough().unwrap();
    assert_eq!((name, user), (20, 24));
}

#[test]
fn splitting_and_coalescing_outcomes() {
    common::figures().unwrap();
}
