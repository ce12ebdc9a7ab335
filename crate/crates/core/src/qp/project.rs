//! Closed-form Euclidean projections used by the splitting iteration and by
//! the resource capability sets.

/// Projects `x` onto `[lo, hi]`.  Either bound may be infinite.
pub fn project_box(x: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi, "empty box [{lo}, {hi}]");
    x.clamp(lo, hi)
}

/// Projects the point `(p, q)` onto the origin-centred disk of the given
/// radius.  Points inside (and the origin for radius 0) are fixed points.
pub fn project_disk(p: f64, q: f64, radius: f64) -> (f64, f64) {
    debug_assert!(radius >= 0.0, "negative disk radius {radius}");
    let norm = p.hypot(q);
    if norm <= radius || norm == 0.0 {
        (p, q)
    } else {
        let s = radius / norm;
        (p * s, q * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn box_clamps_each_side() {
        assert_eq!(project_box(5.0, -1.0, 2.0), 2.0);
        assert_eq!(project_box(-5.0, -1.0, 2.0), -1.0);
        assert_eq!(project_box(0.5, -1.0, 2.0), 0.5);
        assert_eq!(project_box(7.0, f64::NEG_INFINITY, f64::INFINITY), 7.0);
    }

    #[test]
    fn disk_radial_scaling() {
        // (3, 4) onto radius 2.5 lands at half scale.
        let (p, q) = project_disk(3.0, 4.0, 2.5);
        assert_abs_diff_eq!(p, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(q, 2.0, epsilon = 1e-12);
        // Interior point untouched.
        assert_eq!(project_disk(0.3, -0.1, 1.0), (0.3, -0.1));
        // Origin stays put even for radius 0.
        assert_eq!(project_disk(0.0, 0.0, 0.0), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn box_projection_idempotent_and_nonexpansive(
            a in -1e3f64..1e3, b in -1e3f64..1e3,
            lo in -50f64..0.0, hi in 0.0f64..50.0,
        ) {
            let pa = project_box(a, lo, hi);
            let pb = project_box(b, lo, hi);
            prop_assert_eq!(project_box(pa, lo, hi), pa);
            prop_assert!((pa - pb).abs() <= (a - b).abs() + 1e-15);
            prop_assert!(pa >= lo && pa <= hi);
        }

        #[test]
        fn disk_projection_idempotent_and_nonexpansive(
            ap in -1e3f64..1e3, aq in -1e3f64..1e3,
            bp in -1e3f64..1e3, bq in -1e3f64..1e3,
            r in 1e-3f64..100.0,
        ) {
            let (pap, paq) = project_disk(ap, aq, r);
            let (pbp, pbq) = project_disk(bp, bq, r);
            // Idempotent to machine precision.
            let (qp_, qq_) = project_disk(pap, paq, r);
            prop_assert!((qp_ - pap).abs() < 1e-12 && (qq_ - paq).abs() < 1e-12);
            // Feasible within 1e-12 relative.
            prop_assert!(pap.hypot(paq) <= r * (1.0 + 1e-12));
            // Nonexpansive.
            let before = (ap - bp).hypot(aq - bq);
            let after = (pap - pbp).hypot(paq - pbq);
            prop_assert!(after <= before + 1e-9);
        }
    }
}
