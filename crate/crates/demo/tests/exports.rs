use atrseq::attribution::twin_gate_gap;
use atrseq_demo::{audit, rollout_view, surface, MAX_LEN};

#[test]
fn surface_is_odd_in_history_and_bounded() {
    let s = surface(-4.0, 4.0, 9).unwrap();
    assert_eq!(s.axis, vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    for (r, row) in s.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!(v.abs() < 1.0);
            assert!((v + s.values[r][8 - c]).abs() < 1e-15);
        }
        assert_eq!(row[4], 0.0);
    }
    // σ(1) − σ(−1) at x = 0, y = 1.
    let want = 1.0 / (1.0 + (-1.0f64).exp()) - 1.0 / (1.0 + 1.0f64.exp());
    assert!((s.values[4][5] - want).abs() < 1e-15);
    assert_eq!(s.values[2][7], twin_gate_gap(-2.0, 3.0));
    assert!(surface(1.0, 1.0, 5).is_err());
    assert!(surface(0.0, 1.0, 10_000).is_err());
}

#[test]
fn rollout_view_rebuilds_states_and_is_seeded() {
    let a = rollout_view(7, 12, 16, 1.0).unwrap();
    assert!(a.residual < 1e-12, "{}", a.residual);
    assert_eq!(a.weights.len(), 12);
    assert_eq!(a.links.len(), 11);
    for (t, row) in a.weights.iter().enumerate() {
        assert!(row[t + 1..].iter().all(|&w| w == 0.0), "no weight on future inputs");
        assert!(row[..=t].iter().all(|&w| (0.0..1.0).contains(&w)));
    }
    for &(t, k) in &a.links {
        assert!(k < t);
    }
    assert!(a.input_gate_mean.iter().chain(&a.forget_gate_mean).all(|g| (0.0..1.0).contains(g)));

    let b = rollout_view(7, 12, 16, 1.0).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = rollout_view(8, 12, 16, 1.0).unwrap();
    assert_ne!(a.weights, c.weights);

    assert!(rollout_view(1, 0, 4, 1.0).is_err());
    assert!(rollout_view(1, MAX_LEN + 1, 4, 1.0).is_err());
    assert!(rollout_view(1, 4, 4, 0.0).is_err());
}

#[test]
fn audit_counts_match_hand_formulas() {
    let (di, d) = (3usize, 5usize);
    let rows = audit(di, d).unwrap();
    let get = |name: &str| rows.iter().find(|r| r.cell == name).unwrap();
    assert_eq!(get("atr").param_count, d * d + di * d);
    assert_eq!(get("srnn").param_count, d * d + di * d);
    assert_eq!(get("gru").param_count, 3 * (d * d + di * d));
    assert_eq!(get("lstm").param_count, 4 * (d * d + di * d));
    assert_eq!(get("ran").param_count, 2 * (d * d + di * d) + di * d);
    let matmuls: Vec<(&str, u64)> = rows.iter().map(|r| (r.cell, r.matmuls_per_step)).collect();
    assert_eq!(matmuls, vec![("atr", 2), ("srnn", 2), ("ran", 5), ("gru", 6), ("lstm", 8)]);
    assert_eq!(audit(4, 4).unwrap().iter().find(|r| r.cell == "ran").unwrap().matmuls_per_step, 4);
    assert_eq!(get("atr").param_ratio, 1.0);
    assert_eq!(get("lstm").param_ratio, 4.0);
    assert!(audit(0, 4).is_err());
}
