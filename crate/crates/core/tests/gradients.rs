mod oracles;

use oracles::gradcheck::worst_group_error;

#[test]
fn noiseless_gradients_match_finite_differences() {
    let (name, err) = worst_group_error(None);
    println!("worst group {name}: {err:e}");
    assert!(err < 1e-3, "{name}: relative error {err:e}");
}

#[test]
fn noisy_gradients_match_finite_differences() {
    let (name, err) = worst_group_error(Some(5.0));
    println!("worst group {name}: {err:e}");
    assert!(err < 1e-3, "{name}: relative error {err:e}");
}

