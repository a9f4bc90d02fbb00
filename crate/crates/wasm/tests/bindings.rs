use pinnweights_wasm::{field_spectrum, playground_weights, probe_ratios, target_field, PLAYGROUND_STRATEGIES};

#[test]
fn spectrum_of_target_sums_to_mean_square() {
    let side = 32;
    let f = target_field(3, 7, side).unwrap();
    assert_eq!(f.len(), side * side);
    let e = field_spectrum(&f, side).unwrap();
    assert_eq!(e.len(), side / 2 + 1);
    let ms = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
    assert!((e.iter().sum::<f64>() - ms).abs() <= 1e-9 * ms);
    // Length scales are at most 5 in each direction.
    assert!(e[9..].iter().all(|v| *v <= 1e-12 * ms));
}

#[test]
fn playground_rows_are_normalized() {
    let scales = [1.0, 10.0, 0.1];
    let w = playground_weights(&scales, 0.3, 500, 1).unwrap();
    assert_eq!(w.len(), PLAYGROUND_STRATEGIES.len() * scales.len());
    for row in w.chunks(scales.len()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Inverse-Dirichlet favours the weakest objective and MGDA too.
    let id = &w[3..6];
    assert!(id[2] > id[0] && id[0] > id[1]);
    let mgda = &w[9..12];
    assert!(mgda[2] > mgda[1]);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(target_field(0, 0, 32).is_err());
    assert!(target_field(3, 0, 33).is_err());
    assert!(playground_weights(&[1.0], 0.0, 10, 0).is_err());
    assert!(playground_weights(&[1.0, -1.0], 0.0, 10, 0).is_err());
    assert!(probe_ratios(5, 32, 0).is_err());
}

#[test]
fn probe_ratios_grow_with_wavenumber() {
    let r = probe_ratios(2, 16, 0).unwrap();
    // k0 = 1, 2, 4 plus the slope.
    assert_eq!(r.len(), 4);
    assert!(r[2] > r[0]);
    assert!(r[3] > 0.0);
}
