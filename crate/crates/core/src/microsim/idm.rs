//! Intelligent Driver Model car following.

use serde::{Deserialize, Serialize};

/// Hard floor on any commanded acceleration, m/s².
pub const EMERGENCY_DECEL: f64 = -8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Desired time headway, s.
    pub headway: f64,
    /// Jam distance, m.
    pub s0: f64,
    /// Free-road exponent.
    pub delta: f64,
    /// Vehicle length, m.
    pub vehicle_length: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            a_max: 1.5,
            b: 2.0,
            headway: 1.5,
            s0: 2.0,
            delta: 4.0,
            vehicle_length: 5.0,
        }
    }
}

/// IDM acceleration (m/s²) for speed `v`, net gap `gap` to the leader and
/// leader speed `lead_v`, with desired speed `v0`. Clamped to
/// `[EMERGENCY_DECEL, a_max]`; a non-positive gap is an emergency stop.
pub fn idm_acceleration(v: f64, gap: f64, lead_v: f64, v0: f64, p: &IdmParams) -> f64 {
    if !(gap > 0.0) {
        return EMERGENCY_DECEL;
    }
    let dv = v - lead_v;
    let s_star = p.s0 + (v * p.headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0);
    let free = if v0 > 0.0 {
        (v / v0).powf(p.delta)
    } else {
        1.0
    };
    let a = p.a_max * (1.0 - free - (s_star / gap).powi(2));
    a.clamp(EMERGENCY_DECEL, p.a_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_on_free_road() {
        let p = IdmParams::default();
        assert!(idm_acceleration(15.0, f64::INFINITY, 15.0, 15.0, &p).abs() < 1e-6);
    }

    #[test]
    fn standing_start_uses_full_acceleration() {
        let p = IdmParams::default();
        assert!((idm_acceleration(0.0, 1e9, 0.0, 15.0, &p) - p.a_max).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_formula() {
        // 1.5 * (1 - (10/15)^4 - (17/20)^2), evaluated independently
        let got = idm_acceleration(10.0, 20.0, 10.0, 15.0, &IdmParams::default());
        assert!((got - 0.11995370370370384).abs() < 1e-12);
    }

    #[test]
    fn non_positive_gap_brakes_hard() {
        let p = IdmParams::default();
        assert_eq!(idm_acceleration(10.0, 0.0, 0.0, 15.0, &p), EMERGENCY_DECEL);
        assert_eq!(idm_acceleration(10.0, -3.0, 0.0, 15.0, &p), EMERGENCY_DECEL);
        assert_eq!(idm_acceleration(30.0, 1.0, 0.0, 15.0, &p), EMERGENCY_DECEL);
    }
}
