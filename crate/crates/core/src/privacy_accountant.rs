//! Rényi-DP accounting for the noisy aggregation steps.
//!
//! Each aggregation adds `N(0, σ²)` noise to a sum whose L2 sensitivity is the
//! row-norm bound `C`, so `T` steps compose to `(α, T·C²·α / 2σ²)`-RDP. The
//! conversion `ε = ε(α) + ln(1/δ)/(α − 1)` minimized over `α` gives
//!
//! ```text
//! ε₂ = T·C² / (2σ²) + C·√(2T·ln(1/δ)) / σ
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance of the calibrate → recompute round trip.
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-9;

/// Default `δ` sits this fraction below `1 / num_edges`.
const DELTA_FRACTION: f64 = 0.9;

/// The `(ε₁, ε₂, δ, T, C)` budget with the noise scale `σ` that realizes `ε₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    #[serde(with = "extended_float")]
    pub epsilon1: f64,
    /// `f64::INFINITY` means aggregation runs without noise.
    #[serde(with = "extended_float")]
    pub epsilon2: f64,
    pub delta: f64,
    pub steps: usize,
    pub embed_norm: f64,
    pub sigma: f64,
}

impl PrivacySpec {
    /// Calibrates `σ` for the given budget. An infinite `ε₂` yields `σ = 0`.
    pub fn calibrated(epsilon1: f64, epsilon2: f64, delta: f64, steps: usize, embed_norm: f64) -> Result<Self> {
        if !(epsilon1 > 0.0) {
            return Err(Error::InvalidBudget(format!("epsilon1 must be positive, got {epsilon1}")));
        }
        let sigma = if epsilon2 == f64::INFINITY {
            check_common(delta, steps, embed_norm)?;
            0.0
        } else {
            calibrate_sigma(epsilon2, delta, steps, embed_norm)?
        };
        Ok(PrivacySpec { epsilon1, epsilon2, delta, steps, embed_norm, sigma })
    }

    pub fn is_private(&self) -> bool {
        self.sigma > 0.0
    }

    /// `ε₂` implied by `(T, C, σ, δ)`.
    pub fn recomputed_epsilon2(&self) -> f64 {
        if self.sigma == 0.0 {
            return f64::INFINITY;
        }
        epsilon2(self.steps, self.embed_norm, self.sigma, self.delta)
    }
}

fn check_common(delta: f64, steps: usize, embed_norm: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    if !(embed_norm > 0.0 && embed_norm.is_finite()) {
        return Err(Error::InvalidParameter(format!("embedding norm must be positive, got {embed_norm}")));
    }
    Ok(())
}

/// Serializes `±∞` as the strings `"inf"` / `"-inf"` so budgets survive JSON.
pub mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => parse(&t).ok_or_else(|| de::Error::custom(format!("`{t}` is not a number"))),
        }
    }

    /// Accepts ordinary numbers plus `inf`, `+inf`, `infinity` in any case.
    pub fn parse(text: &str) -> Option<f64> {
        let t = text.trim().to_ascii_lowercase();
        match t.as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
            "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
            _ => t.parse().ok(),
        }
    }

    /// Same encoding for lists of budgets.
    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        #[derive(Serialize, Deserialize)]
        #[serde(transparent)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Item(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

/// A linear RDP curve `ε(α) = coefficient · α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub coefficient: f64,
}

impl RdpCurve {
    pub fn epsilon_at(&self, alpha: f64) -> f64 {
        self.coefficient * alpha
    }

    /// `(ε, δ)`-DP bound obtained at a specific order `α > 1`.
    pub fn dp_at(&self, alpha: f64, delta: f64) -> f64 {
        self.epsilon_at(alpha) + (1.0 / delta).ln() / (alpha - 1.0)
    }
}

/// RDP of `steps` Gaussian mechanisms with the given L2 sensitivity and noise.
pub fn rdp_of_gaussian(sensitivity: f64, sigma: f64, steps: usize) -> Result<RdpCurve> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    Ok(RdpCurve { coefficient: steps as f64 * sensitivity * sensitivity / (2.0 * sigma * sigma) })
}

/// Converts an RDP curve to `(ε, δ)`-DP by numerically minimizing over `α`.
///
/// The objective is convex in `s = ln(α − 1)`, so a golden-section search
/// over `s` finds the optimum.
pub fn rdp_to_dp(curve: RdpCurve, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
    }
    let objective = |s: f64| curve.dp_at(1.0 + s.exp(), delta);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(objective(0.5 * (lo + hi)))
}

/// Closed-form `ε₂` after `steps` noisy aggregations.
pub fn epsilon2(steps: usize, embed_norm: f64, sigma: f64, delta: f64) -> f64 {
    let t = steps as f64;
    let ratio = embed_norm / sigma;
    t * ratio * ratio / 2.0 + ratio * (2.0 * t * (1.0 / delta).ln()).sqrt()
}

/// The `σ` for which [`epsilon2`] equals `target`.
///
/// With `u = C/σ` the budget is the quadratic `(T/2)u² + √(2T ln(1/δ))·u = ε₂`,
/// whose positive root is taken directly. Bisection on `σ` is the fallback
/// if the root fails the round-trip check.
pub fn calibrate_sigma(target: f64, delta: f64, steps: usize, embed_norm: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidBudget(format!("epsilon2 must be positive and finite, got {target}")));
    }
    check_common(delta, steps, embed_norm)?;
    let t = steps as f64;
    let b = (2.0 * t * (1.0 / delta).ln()).sqrt();
    // Rationalized positive root; avoids cancellation in −b + √(b² + 2Tε).
    let u = 2.0 * target / (b + (b * b + 2.0 * t * target).sqrt());
    let sigma = embed_norm / u;
    let back = epsilon2(steps, embed_norm, sigma, delta);
    if sigma.is_finite() && ((back - target) / target).abs() <= ROUND_TRIP_TOLERANCE {
        Ok(sigma)
    } else {
        calibrate_sigma_bisection(target, delta, steps, embed_norm)
    }
}

/// Bisection on `σ` using monotonicity of `ε₂(σ)`.
pub fn calibrate_sigma_bisection(target: f64, delta: f64, steps: usize, embed_norm: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidBudget(format!("epsilon2 must be positive and finite, got {target}")));
    }
    check_common(delta, steps, embed_norm)?;
    let eps = |sigma: f64| epsilon2(steps, embed_norm, sigma, delta);
    let (mut lo, mut hi) = (embed_norm * 1e-6, embed_norm);
    while eps(hi) > target {
        hi *= 2.0;
    }
    while eps(lo) < target {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eps(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A `δ` strictly below the inverse edge count.
pub fn delta_default(num_edges: usize) -> Result<f64> {
    if num_edges == 0 {
        return Err(Error::InvalidParameter("edge count must be at least 1".into()));
    }
    Ok(DELTA_FRACTION / num_edges as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn infinite_budget_survives_json() {
        let spec = PrivacySpec::calibrated(f64::INFINITY, f64::INFINITY, 1e-5, 2, 1.0).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"epsilon2\":\"inf\""), "{text}");
        assert_eq!(serde_json::from_str::<PrivacySpec>(&text).unwrap(), spec);
        let finite = PrivacySpec::calibrated(20.0, 5.0, 1e-5, 2, 1.0).unwrap();
        let back: PrivacySpec = serde_json::from_str(&serde_json::to_string(&finite).unwrap()).unwrap();
        assert_eq!(back, finite);
        assert_eq!(extended_float::parse(" Infinity"), Some(f64::INFINITY));
        assert_eq!(extended_float::parse("2.5"), Some(2.5));
        assert_eq!(extended_float::parse("x"), None);
    }

    #[test]
    fn gaussian_rdp_coefficients() {
        assert_eq!(rdp_of_gaussian(1.0, 1.0, 1).unwrap().coefficient, 0.5);
        assert_eq!(rdp_of_gaussian(2.0, 1.0, 1).unwrap().coefficient, 2.0);
        assert_eq!(rdp_of_gaussian(1.0, 1.0, 3).unwrap().coefficient, 1.5);
        assert_eq!(rdp_of_gaussian(1.0, 1.0, 1).unwrap().epsilon_at(3.0), 1.5);
        assert!(rdp_of_gaussian(1.0, 0.0, 1).is_err());
        assert!(rdp_of_gaussian(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn conversion_worked_value() {
        let curve = rdp_of_gaussian(1.0, 1.0, 1).unwrap();
        let delta = (-1f64).exp();
        // 0.5 + √2
        assert_relative_eq!(rdp_to_dp(curve, delta).unwrap(), 1.9142135623730951, max_relative = 1e-9);
        assert_relative_eq!(epsilon2(1, 1.0, 1.0, delta), 1.9142135623730951, max_relative = 1e-12);
    }

    #[test]
    fn conversion_delta_near_one() {
        let curve = rdp_of_gaussian(1.0, 2.0, 2).unwrap();
        let eps = rdp_to_dp(curve, 1.0 - 1e-12).unwrap();
        assert_relative_eq!(eps, curve.coefficient, max_relative = 1e-4);
        assert!(rdp_to_dp(curve, 0.0).is_err());
        assert!(rdp_to_dp(curve, 1.0).is_err());
    }

    #[test]
    fn calibration_worked_value() {
        // mpmath: b = √(2 ln 1e5) = 4.798525912, u = 0.948286328, σ = 1/u.
        let sigma = calibrate_sigma(5.0, 1e-5, 1, 1.0).unwrap();
        assert_relative_eq!(sigma, 1.0545338152895137, max_relative = 1e-12);
        let bisect = calibrate_sigma_bisection(5.0, 1e-5, 1, 1.0).unwrap();
        assert!((sigma - bisect).abs() < 1e-9);
    }

    #[test]
    fn calibration_scales_with_norm_and_budget() {
        let a = calibrate_sigma(5.0, 1e-5, 2, 1.0).unwrap();
        let b = calibrate_sigma(5.0, 1e-5, 2, 2.0).unwrap();
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-12);
        let tighter = calibrate_sigma(3.0, 1e-5, 2, 1.0).unwrap();
        assert!(tighter > a);
        assert!(calibrate_sigma(0.0, 1e-5, 1, 1.0).is_err());
        assert!(calibrate_sigma(-1.0, 1e-5, 1, 1.0).is_err());
        assert!(calibrate_sigma(1.0, 1e-5, 0, 1.0).is_err());
        assert!(calibrate_sigma(1.0, 1.5, 1, 1.0).is_err());
    }

    #[test]
    fn delta_defaults() {
        assert_relative_eq!(delta_default(1_000_000).unwrap(), 9e-7);
        assert_relative_eq!(delta_default(1).unwrap(), 0.9);
        assert!(delta_default(0).is_err());
    }

    #[test]
    fn spec_infinite_budget_is_noise_free() {
        let spec = PrivacySpec::calibrated(20.0, f64::INFINITY, 1e-5, 2, 0.5).unwrap();
        assert_eq!(spec.sigma, 0.0);
        assert!(!spec.is_private());
        let spec = PrivacySpec::calibrated(20.0, 5.0, 1e-5, 2, 0.5).unwrap();
        assert_relative_eq!(spec.recomputed_epsilon2(), 5.0, max_relative = 1e-9);
    }

    proptest! {
        #[test]
        fn delta_below_inverse_edges(n in 1usize..10_000_000) {
            prop_assert!(delta_default(n).unwrap() * (n as f64) < 1.0);
        }

        #[test]
        fn round_trip(eps in 0.01f64..50.0, log_delta in -20f64..-0.01, t in 1usize..10, c in 0.01f64..10.0) {
            let delta = log_delta.exp();
            let sigma = calibrate_sigma(eps, delta, t, c).unwrap();
            let back = epsilon2(t, c, sigma, delta);
            prop_assert!(((back - eps) / eps).abs() <= ROUND_TRIP_TOLERANCE);
        }

        #[test]
        fn monotone_in_sigma_steps_and_norm(sigma in 0.05f64..10.0, t in 1usize..8, c in 0.05f64..5.0, log_delta in -15f64..-0.5) {
            let delta = log_delta.exp();
            let e = epsilon2(t, c, sigma, delta);
            prop_assert!(epsilon2(t, c, sigma * 1.01, delta) < e);
            prop_assert!(epsilon2(t + 1, c, sigma, delta) > e);
            prop_assert!(epsilon2(t, c * 1.01, sigma, delta) > e);
            // Only C/σ matters.
            let scaled = epsilon2(t, 3.0 * c, 3.0 * sigma, delta);
            prop_assert!(((scaled - e) / e).abs() < 1e-12);
        }
    }
}
