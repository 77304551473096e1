//! Step-size and accuracy sequences.
//!
//! A [`Schedule`] is a positive non-increasing sequence indexed from `k = 0`.
//! Polynomial and logarithmic kinds clamp the index (`max(k, 1)` and
//! `max(k, 2)`) so the first value is finite and equals the base for the
//! polynomial kind.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::vecops::CompensatedSum;

/// Largest horizon accepted by [`l_k_sum`] unless a different cap is given.
pub const DEFAULT_HORIZON_CAP: u64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Polynomial,
    Logarithmic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    base: f64,
    exponent: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, base: f64, exponent: f64) -> Result<Self> {
        let bad = |reason: &str| Error::Schedule {
            input: format!("{kind:?}({base}, {exponent})"),
            reason: reason.to_string(),
        };
        if !(base.is_finite() && base > 0.0) {
            return Err(bad("base must be finite and > 0"));
        }
        if !(exponent.is_finite() && exponent >= 0.0) {
            return Err(bad("exponent must be finite and >= 0"));
        }
        if kind == ScheduleKind::Constant && exponent != 0.0 {
            return Err(bad("constant schedules have exponent 0"));
        }
        Ok(Self { kind, base, exponent })
    }

    pub fn constant(base: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, base, 0.0)
    }

    pub fn polynomial(base: f64, exponent: f64) -> Result<Self> {
        Self::new(ScheduleKind::Polynomial, base, exponent)
    }

    pub fn logarithmic(base: f64, exponent: f64) -> Result<Self> {
        Self::new(ScheduleKind::Logarithmic, base, exponent)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Value at iteration `k`.
    pub fn value(&self, k: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Polynomial => {
                if self.exponent == 0.0 {
                    self.base
                } else {
                    self.base * (k.max(1) as f64).powf(-self.exponent)
                }
            }
            ScheduleKind::Logarithmic => {
                self.base * (k.max(2) as f64).ln().powf(-self.exponent)
            }
        }
    }

    /// Effective polynomial exponent, treating constants as exponent 0.
    fn poly_exponent(&self) -> Option<f64> {
        match self.kind {
            ScheduleKind::Constant => Some(0.0),
            ScheduleKind::Polynomial => Some(self.exponent),
            ScheduleKind::Logarithmic => None,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Constant => write!(f, "const:{}", self.base),
            ScheduleKind::Polynomial => write!(f, "poly:{}:{}", self.base, self.exponent),
            ScheduleKind::Logarithmic => write!(f, "log:{}:{}", self.base, self.exponent),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Grammar: `poly:<base>:<exponent>`, `log:<base>:<exponent>`, `const:<base>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Schedule { input: s.to_string(), reason: reason.to_string() };
        let real = |field: &str, what: &str| -> Result<f64> {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(&format!("{what} `{field}` is not a decimal real")))?;
            if !v.is_finite() {
                return Err(bad(&format!("{what} must be finite")));
            }
            Ok(v)
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["const", b] => Self::constant(real(b, "base")?).map_err(|_| bad("base must be > 0")),
            ["poly", b, e] => Self::polynomial(real(b, "base")?, real(e, "exponent")?)
                .map_err(|_| bad("base must be > 0 and exponent >= 0")),
            ["log", b, e] => Self::logarithmic(real(b, "base")?, real(e, "exponent")?)
                .map_err(|_| bad("base must be > 0 and exponent >= 0")),
            ["const", ..] => Err(bad("expected `const:<base>`")),
            ["poly", ..] => Err(bad("expected `poly:<base>:<exponent>`")),
            ["log", ..] => Err(bad("expected `log:<base>:<exponent>`")),
            _ => Err(bad("unknown kind; expected const, poly or log")),
        }
    }
}

/// Analytic check of the step-size conditions: square summability of the
/// steps and `1/(k alpha_k) -> 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepValidation {
    pub square_summable: bool,
    pub decay_ok: bool,
    pub neighborhood_only: bool,
    pub notes: Vec<String>,
}

impl StepValidation {
    pub fn passes(&self) -> bool {
        self.square_summable && self.decay_ok
    }
}

pub fn validate_step_schedule(s: &Schedule) -> StepValidation {
    let mut notes = Vec::new();
    let (square_summable, decay_ok, neighborhood_only) = match s.kind() {
        ScheduleKind::Constant => {
            notes.push("constant steps are not square summable".into());
            notes.push("constant steps only reach a neighborhood of a stationary point".into());
            (false, true, true)
        }
        ScheduleKind::Logarithmic => {
            notes.push("sum of (log k)^(-2q) diverges".into());
            (false, true, false)
        }
        ScheduleKind::Polynomial => {
            let q = s.exponent();
            if q == 0.0 {
                notes.push("exponent 0 is a constant step".into());
                notes.push("constant steps only reach a neighborhood of a stationary point".into());
                (false, true, true)
            } else {
                let sq = 2.0 * q > 1.0;
                if !sq {
                    notes.push(format!("sum of k^(-{}) diverges (needs q > 1/2)", 2.0 * q));
                }
                let decay = q < 1.0;
                if !decay {
                    notes.push(format!("1/(k alpha_k) ~ k^{} does not vanish (needs q < 1)", q - 1.0));
                }
                (sq, decay, false)
            }
        }
    };
    StepValidation { square_summable, decay_ok, neighborhood_only, notes }
}

/// `L_K = (1 / (K alpha_K)) * sum_{k<K} alpha_k eps_k^2`, summed directly.
pub fn l_k_sum(step: &Schedule, acc: &Schedule, horizon: u64) -> Result<f64> {
    l_k_sum_capped(step, acc, horizon, DEFAULT_HORIZON_CAP)
}

pub fn l_k_sum_capped(step: &Schedule, acc: &Schedule, horizon: u64, cap: u64) -> Result<f64> {
    Ok(l_k_series(step, acc, &[horizon], cap)?[0])
}

/// `L_K` at several horizons in one streaming pass.
pub fn l_k_series(step: &Schedule, acc: &Schedule, horizons: &[u64], cap: u64) -> Result<Vec<f64>> {
    let max = horizons.iter().copied().max().unwrap_or(0);
    if horizons.iter().any(|&h| h == 0) {
        return Err(Error::InvalidArgument("horizon K must be >= 1".into()));
    }
    if max > cap {
        return Err(Error::HorizonTooLarge { horizon: max, cap });
    }
    let mut order: Vec<usize> = (0..horizons.len()).collect();
    order.sort_by_key(|&i| horizons[i]);
    let mut out = vec![0.0; horizons.len()];
    let mut sum = CompensatedSum::new();
    let mut next = 0;
    for k in 0..max {
        let e = acc.value(k);
        sum.add(step.value(k) * e * e);
        while next < order.len() && horizons[order[next]] == k + 1 {
            let kk = k + 1;
            out[order[next]] = sum.value() / (kk as f64 * step.value(kk));
            next += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    AccuracyLimited,
    Boundary,
    StepLimited,
    Logarithmic,
    NeighborhoodOnly,
    /// Step exponent outside the analysed range; no rate is claimed.
    OutsideTheory,
}

/// Decay law of `min_k E||grad f(theta^k)||`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateLaw {
    /// `k^(-exponent)`
    Power(f64),
    /// `sqrt(log k / k^(2 * exponent))`
    PowerWithLog(f64),
    /// `(log k)^(-exponent)`
    LogPower(f64),
    None,
}

impl RateLaw {
    /// Exponent of the polynomial part, if any.
    pub fn power(&self) -> Option<f64> {
        match *self {
            RateLaw::Power(e) | RateLaw::PowerWithLog(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admissibility {
    Admissible,
    /// `q = 1/2`, approached from above.
    LimitingCase,
    Outside,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRegime {
    pub regime: Regime,
    pub rate: RateLaw,
    pub admissibility: Admissibility,
    pub note: String,
}

/// Rate regime for polynomial accuracy `k^-p` and polynomial steps `k^-q`.
pub fn predicted_rate(p: f64, q: f64) -> RateRegime {
    let outside = |note: String| RateRegime {
        regime: Regime::OutsideTheory,
        rate: RateLaw::None,
        admissibility: Admissibility::Outside,
        note,
    };
    if !(p.is_finite() && q.is_finite()) || p < 0.0 || q < 0.0 {
        return outside(format!("invalid exponents (p={p}, q={q})"));
    }
    if q == 0.0 {
        return RateRegime {
            regime: Regime::NeighborhoodOnly,
            rate: RateLaw::None,
            admissibility: Admissibility::Outside,
            note: "fixed step size: convergence to a neighborhood only".into(),
        };
    }
    if q < 0.5 || q >= 1.0 {
        return outside(format!("q={q} outside (1/2, 1): no rate claimed"));
    }
    if p == 0.0 {
        return RateRegime {
            regime: Regime::NeighborhoodOnly,
            rate: RateLaw::None,
            admissibility: Admissibility::Admissible,
            note: "constant accuracy: L_K does not vanish".into(),
        };
    }
    let limiting = q == 0.5;
    let admissibility = if limiting { Admissibility::LimitingCase } else { Admissibility::Admissible };
    let gap = 2.0 * p - (1.0 - q);
    let tol = 1e-12;
    // at q = 1/2 the limit q -> 1/2+ is reported, which never sits on the boundary
    // when 2p >= 1/2
    let (regime, rate, note) = if gap < -tol {
        (Regime::AccuracyLimited, RateLaw::Power(p), "limited by accuracy")
    } else if gap.abs() <= tol && !limiting {
        (Regime::Boundary, RateLaw::PowerWithLog((1.0 - q) / 2.0), "boundary: slower with log k")
    } else {
        (Regime::StepLimited, RateLaw::Power((1.0 - q) / 2.0), "limited by step size")
    };
    let note = if limiting {
        format!("{note}; q = 1/2 is the limiting case (theory needs q > 1/2)")
    } else {
        note.to_string()
    };
    RateRegime { regime, rate, admissibility, note }
}

/// Rate regime for arbitrary schedule kinds.
pub fn predicted_rate_for(step: &Schedule, acc: &Schedule) -> RateRegime {
    let q = match step.poly_exponent() {
        Some(q) => q,
        None => {
            return RateRegime {
                regime: Regime::OutsideTheory,
                rate: RateLaw::None,
                admissibility: Admissibility::Outside,
                note: "logarithmic step sizes are not analysed".into(),
            }
        }
    };
    match acc.kind() {
        ScheduleKind::Logarithmic => {
            let base = predicted_rate(1.0, q);
            if base.admissibility == Admissibility::Outside || acc.exponent() == 0.0 {
                return RateRegime {
                    regime: if q == 0.0 || acc.exponent() == 0.0 {
                        Regime::NeighborhoodOnly
                    } else {
                        base.regime
                    },
                    rate: RateLaw::None,
                    admissibility: base.admissibility,
                    note: base.note,
                };
            }
            RateRegime {
                regime: Regime::Logarithmic,
                rate: RateLaw::LogPower(acc.exponent()),
                admissibility: base.admissibility,
                note: "logarithmic accuracy: slowest".into(),
            }
        }
        _ => predicted_rate(acc.poly_exponent().unwrap_or(0.0), q),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightDiagnostics {
    pub weights: Vec<f64>,
    /// `prod_{j<K} (1 + L A alpha_j^2)`
    pub product_p: f64,
    /// `sum_{k<K} w_k`
    pub sum_w: f64,
}

/// Weight sequence `w_0 = 1`, `w_k = w_{k-1} alpha_k / (alpha_{k-1} (1 + L A alpha_k^2))`.
pub fn compute_weights(
    step: &Schedule,
    l_smooth: f64,
    a_tilde: f64,
    horizon: usize,
) -> Result<WeightDiagnostics> {
    if !(l_smooth > 0.0) || !(a_tilde >= 0.0) {
        return Err(Error::InvalidArgument("need L > 0 and A >= 0".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon K must be >= 1".into()));
    }
    let mut weights = Vec::with_capacity(horizon);
    let mut log_p = 0.0;
    let mut sum_w = CompensatedSum::new();
    let mut prev_alpha = 0.0;
    for k in 0..horizon {
        let alpha = step.value(k as u64);
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha_{k} = {alpha} is not positive")));
        }
        let t = l_smooth * a_tilde * alpha * alpha;
        let growth = 1.0 + t;
        log_p += t.ln_1p();
        let w = if k == 0 { 1.0 } else { weights[k - 1] * alpha / (prev_alpha * growth) };
        weights.push(w);
        sum_w.add(w);
        prev_alpha = alpha;
    }
    Ok(WeightDiagnostics { weights, product_p: log_p.exp(), sum_w: sum_w.value() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn value_examples() {
        let s = Schedule::polynomial(1.0, 2.0).unwrap();
        assert_relative_eq!(s.value(10), 0.01, max_relative = 1e-15);
        let c = Schedule::constant(1e-2).unwrap();
        assert_eq!(c.value(1_000_000), 1e-2);
        // k = e^2 rounds to 7
        let l = Schedule::logarithmic(1.0, 1.0).unwrap();
        let k = std::f64::consts::E.powi(2).round() as u64;
        assert_eq!(k, 7);
        assert!((l.value(k) - 0.5).abs() < 0.02);
        assert_relative_eq!(l.value(k), 1.0 / 7f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn first_value_is_base_for_polynomials() {
        let s = Schedule::polynomial(0.3, 0.75).unwrap();
        assert_eq!(s.value(0), 0.3);
        assert_eq!(s.value(1), 0.3);
    }

    #[test]
    fn constructor_rejects_invalid() {
        assert!(Schedule::polynomial(0.0, 1.0).is_err());
        assert!(Schedule::polynomial(1.0, -1.0).is_err());
        assert!(Schedule::new(ScheduleKind::Constant, 1.0, 0.5).is_err());
        assert!(Schedule::polynomial(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn parse_grammar() {
        assert_eq!("poly:1:0.5".parse::<Schedule>().unwrap(), Schedule::polynomial(1.0, 0.5).unwrap());
        assert_eq!("log:2:1".parse::<Schedule>().unwrap(), Schedule::logarithmic(2.0, 1.0).unwrap());
        assert_eq!("const:0.01".parse::<Schedule>().unwrap(), Schedule::constant(0.01).unwrap());
        for bad in ["poly:1", "const", "Poly:1:1", "poly:1:x", "const:-1", "exp:1:1", "poly:1:1:1", ""] {
            assert!(bad.parse::<Schedule>().is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn display_round_trips() {
        for s in ["poly:1:0.5", "log:0.25:2", "const:0.001"] {
            let parsed: Schedule = s.parse().unwrap();
            assert_eq!(parsed.to_string().parse::<Schedule>().unwrap(), parsed);
        }
    }

    #[test]
    fn step_validation_examples() {
        let v = validate_step_schedule(&Schedule::polynomial(1.0, 0.75).unwrap());
        assert!(v.square_summable && v.decay_ok && !v.neighborhood_only);
        let v = validate_step_schedule(&Schedule::polynomial(1.0, 1.0).unwrap());
        assert!(v.square_summable && !v.decay_ok);
        let v = validate_step_schedule(&Schedule::constant(1.0).unwrap());
        assert!(!v.square_summable && v.decay_ok && v.neighborhood_only);
        let v = validate_step_schedule(&Schedule::polynomial(1.0, 0.4).unwrap());
        assert!(!v.square_summable && v.decay_ok);
        let v = validate_step_schedule(&Schedule::polynomial(1.0, 0.0).unwrap());
        assert!(v.neighborhood_only);
    }

    #[test]
    fn l_k_constant_schedules() {
        let a = Schedule::constant(0.3).unwrap();
        let e = Schedule::constant(0.5).unwrap();
        for k in [1, 7, 1000] {
            assert_relative_eq!(l_k_sum(&a, &e, k).unwrap(), 0.25, max_relative = 1e-14);
        }
    }

    #[test]
    fn l_k_step_limited_decade_ratio() {
        let a = Schedule::polynomial(1.0, 0.75).unwrap();
        let e = Schedule::polynomial(1.0, 0.5).unwrap();
        let l = l_k_series(&a, &e, &[10_000, 100_000], DEFAULT_HORIZON_CAP).unwrap();
        let ratio = l[1] / l[0];
        let expect = 10f64.powf(-0.25);
        assert!((ratio / expect - 1.0).abs() < 0.1, "ratio {ratio} vs {expect}");
    }

    #[test]
    fn l_k_rejects_bad_horizons() {
        let a = Schedule::constant(1.0).unwrap();
        assert!(l_k_sum(&a, &a, 0).is_err());
        assert!(matches!(
            l_k_sum_capped(&a, &a, 11, 10),
            Err(Error::HorizonTooLarge { horizon: 11, cap: 10 })
        ));
    }

    #[test]
    fn l_k_series_matches_single_calls() {
        let a = Schedule::polynomial(0.5, 0.6).unwrap();
        let e = Schedule::logarithmic(1.0, 0.5).unwrap();
        let hs = [50, 3, 1000];
        let many = l_k_series(&a, &e, &hs, DEFAULT_HORIZON_CAP).unwrap();
        for (h, v) in hs.iter().zip(&many) {
            assert_eq!(l_k_sum(&a, &e, *h).unwrap(), *v);
        }
    }

    #[test]
    fn predicted_rate_examples() {
        let r = predicted_rate(1.0, 0.75);
        assert_eq!(r.regime, Regime::StepLimited);
        assert_relative_eq!(r.rate.power().unwrap(), 0.125);
        let r = predicted_rate(0.1, 0.6);
        assert_eq!(r.regime, Regime::AccuracyLimited);
        assert_relative_eq!(r.rate.power().unwrap(), 0.1);
        let r = predicted_rate(0.25, 0.5);
        assert_eq!(r.admissibility, Admissibility::LimitingCase);
        assert_relative_eq!(r.rate.power().unwrap(), 0.25);
        let r = predicted_rate(0.2, 0.6);
        assert_eq!(r.regime, Regime::Boundary);
        assert_eq!(r.rate, RateLaw::PowerWithLog(0.2));
        assert_eq!(predicted_rate(1.0, 0.0).regime, Regime::NeighborhoodOnly);
        assert_eq!(predicted_rate(1.0, 0.3).regime, Regime::OutsideTheory);
        assert_eq!(predicted_rate(1.0, 1.0).rate, RateLaw::None);
    }

    #[test]
    fn predicted_rate_for_kinds() {
        let a = Schedule::polynomial(1.0, 0.75).unwrap();
        let r = predicted_rate_for(&a, &Schedule::logarithmic(1.0, 0.5).unwrap());
        assert_eq!(r.regime, Regime::Logarithmic);
        assert_eq!(r.rate, RateLaw::LogPower(0.5));
        let r = predicted_rate_for(&Schedule::constant(0.1).unwrap(), &Schedule::polynomial(1.0, 1.0).unwrap());
        assert_eq!(r.regime, Regime::NeighborhoodOnly);
        let r = predicted_rate_for(&a, &Schedule::constant(0.1).unwrap());
        assert_eq!(r.regime, Regime::NeighborhoodOnly);
    }

    #[test]
    fn weights_examples() {
        let c = Schedule::constant(0.1).unwrap();
        let d = compute_weights(&c, 1.0, 0.0, 50).unwrap();
        assert!(d.weights.iter().all(|&w| w == 1.0));
        assert_eq!(d.sum_w, 50.0);
        assert_eq!(d.product_p, 1.0);

        let s = Schedule::polynomial(1.0, 0.75).unwrap();
        let d = compute_weights(&s, 1.0, 1.0, 1000).unwrap();
        assert_eq!(d.weights[0], 1.0);
        assert!(d.weights.windows(2).all(|w| w[1] <= w[0]));
        assert!(d.weights.iter().all(|&w| w > 0.0));
        assert!(d.product_p.is_finite());
        assert!(compute_weights(&s, 0.0, 1.0, 10).is_err());
        assert!(compute_weights(&s, 1.0, -1.0, 10).is_err());
    }

    #[test]
    fn weights_match_product_form() {
        let s = Schedule::polynomial(0.5, 0.6).unwrap();
        let (l, a) = (2.0, 3.0);
        let d = compute_weights(&s, l, a, 10_000).unwrap();
        // product form: w_k = (alpha_k / alpha_0) prod_{j=1..k} 1/(1 + L A alpha_j^2)
        let mut log_prod = 0.0;
        for k in 0..10_000u64 {
            if k >= 1 {
                let aj = s.value(k);
                log_prod -= (l * a * aj * aj).ln_1p();
            }
            let w = s.value(k) / s.value(0) * log_prod.exp();
            let rel = (d.weights[k as usize] - w).abs() / w;
            assert!(rel <= 1e-12, "k={k} rel={rel}");
        }
    }

    proptest! {
        #[test]
        fn values_positive_and_non_increasing(
            base in 1e-6f64..1e3,
            exponent in 0.0f64..4.0,
            kind in 0usize..3,
            k in 0u64..1_000_000,
        ) {
            let s = match kind {
                0 => Schedule::constant(base).unwrap(),
                1 => Schedule::polynomial(base, exponent).unwrap(),
                _ => Schedule::logarithmic(base, exponent).unwrap(),
            };
            prop_assert!(s.value(k) > 0.0);
            prop_assert!(s.value(k + 1) <= s.value(k));
        }

        #[test]
        fn regime_partition_is_total(p in 0.0f64..=4.0, q in 0.0f64..=1.0) {
            let r = predicted_rate(p, q);
            let claims_rate = r.rate != RateLaw::None;
            let in_theory = q >= 0.5 && q < 1.0 && p > 0.0;
            prop_assert_eq!(claims_rate, in_theory);
            if r.regime == Regime::StepLimited || r.regime == Regime::AccuracyLimited {
                let e = r.rate.power().unwrap();
                prop_assert!((e - (2.0 * p).min(1.0 - q) / 2.0).abs() < 1e-12);
            }
        }
    }
}
