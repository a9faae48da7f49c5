//! The demo entry points on a native target.

use serde_json::Value;
use vilqr_web::{
    closed_loop, default_mass, linearization_error, run_closed_loop, run_linearization_error, run_swing_up, swing_up,
};

#[test]
fn swing_up_reaches_upright_with_monotone_cost() {
    let r = run_swing_up("variational", 0.02, 100, default_mass()).unwrap();
    assert_eq!(r.horizon, 40);
    assert_eq!(r.path.t.len(), 41);
    assert_eq!(r.path.u.len(), 40);
    assert!(r.final_state_norm < 0.1, "{}", r.final_state_norm);
    assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn json_has_the_fields_the_page_reads() {
    let v: Value = serde_json::from_str(&swing_up("euler", 0.05, 5, default_mass()).unwrap()).unwrap();
    for key in ["backend", "dt", "horizon", "cost_history", "final_state_norm", "mean_iter_time"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["t", "theta", "omega", "u"] {
        assert!(v["path"][key].is_array(), "{key}");
    }
    let v: Value = serde_json::from_str(&closed_loop("variational", 0.05, 1, 0.2, default_mass()).unwrap()).unwrap();
    assert_eq!(v["path"]["t"].as_array().unwrap().len(), 5);
    let v: Value = serde_json::from_str(&linearization_error(0.05, default_mass()).unwrap()).unwrap();
    assert_eq!(v["theta"].as_array().unwrap().len(), v["euler"].as_array().unwrap().len());
}

#[test]
fn invalid_arguments_are_reported() {
    assert!(swing_up("rk4", 0.02, 10, 0.1).unwrap_err().contains("rk4"));
    assert!(swing_up("euler", 0.0, 10, 0.1).is_err());
    assert!(swing_up("euler", 0.02, 0, 0.1).is_err());
    assert!(swing_up("euler", 0.02, 10, -1.0).is_err());
    assert!(closed_loop("euler", 0.02, 50, 1.0, 0.1).is_err());
    assert!(closed_loop("euler", 0.02, 5, 0.0, 0.1).is_err());
}

#[test]
fn closed_loop_balances() {
    let r = run_closed_loop("variational", 0.02, 5, 2.0, default_mass()).unwrap();
    assert!(!r.diverged);
    let last = r.path.theta.len() - 1;
    assert!(r.path.theta[last].hypot(r.path.omega[last]) < 0.05);
}

#[test]
fn variational_jacobian_beats_euler() {
    let r = run_linearization_error(0.05, default_mass()).unwrap();
    assert_eq!(r.theta.len(), 61);
    for (e, v) in r.euler.iter().zip(&r.variational) {
        assert!(*v < 1e-3 * e, "{v:e} vs {e:e}");
    }
}
