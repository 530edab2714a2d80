//! Power-law CoT-probability schedule and expected dataset size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Shape exponent of the schedule; `Infinity` is kept distinct from any
/// float so that `0^inf` never has to be evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Finite(f64),
    Infinity,
}

impl Alpha {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value < 0.0 {
            return Err(Error::config(format!("alpha must be >= 0, got {value}")));
        }
        if value.is_infinite() {
            return Ok(Alpha::Infinity);
        }
        Ok(Alpha::Finite(value))
    }

    /// `u^alpha` for `u` in `[0, 1)`, with `0^0 = 1` and `u^inf = 0`.
    pub fn pow(self, u: f64) -> f64 {
        match self {
            Alpha::Infinity => 0.0,
            Alpha::Finite(0.0) => 1.0,
            Alpha::Finite(a) => u.powf(a),
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Finite(a) => write!(f, "{a}"),
            Alpha::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(Alpha::Infinity),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::config(format!("cannot parse alpha {s:?}")))
                .and_then(Alpha::new),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Finite(a) => s.serialize_f64(*a),
            Alpha::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Alpha::new(v),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// `r(j) = clamp(a * (j/T)^alpha + b, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub alpha: Alpha,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

fn one() -> f64 {
    1.0
}

impl Recipe {
    pub fn power(alpha: Alpha) -> Self {
        Self { alpha, a: 1.0, b: 0.0 }
    }

    /// Always produces CoT examples.
    pub fn all_cot() -> Self {
        Self::power(Alpha::Finite(0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if let Alpha::Finite(a) = self.alpha {
            Alpha::new(a)?;
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::config("recipe scale and offset must be finite"));
        }
        Ok(())
    }

    /// CoT probability for sequence `j` of a dataset of `t` sequences.
    pub fn r_cot(&self, j: u64, t: u64) -> Result<f64> {
        if j >= t {
            return Err(Error::input(format!("sequence index {j} out of range for T={t}")));
        }
        Ok(self.r_cot_unchecked(j, t))
    }

    fn r_cot_unchecked(&self, j: u64, t: u64) -> f64 {
        let u = j as f64 / t as f64;
        (self.a * self.alpha.pow(u) + self.b).clamp(0.0, 1.0)
    }

    fn is_standard_power(&self) -> bool {
        self.a == 1.0 && self.b == 0.0
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Expected number of CoT examples over a dataset: the direct sum
/// `K * sum_j r(j)` and its Euler–Maclaurin closed form.
///
/// The closed form is derived for `a = 1, b = 0`; for other recipes it is
/// reported as `a * closed_form + b*K*T` without clamping.
pub fn expected_cot_examples(recipe: &Recipe, k: u64, t: u64) -> Result<(f64, f64)> {
    recipe.validate()?;
    if t < 2 {
        return Err(Error::input("expected-count analytics need T >= 2"));
    }
    let kf = k as f64;
    let exact = kf * compensated_sum((0..t).map(|j| recipe.r_cot_unchecked(j, t)));
    let em = match recipe.alpha {
        Alpha::Infinity => 0.0,
        Alpha::Finite(alpha) => {
            let tf = t as f64;
            let last = tf - 1.0;
            kf / tf.powf(alpha)
                * ((last.powf(alpha + 1.0) - 1.0) / (alpha + 1.0) + (last.powf(alpha) + 1.0) / 2.0)
        }
    };
    let approx = if recipe.is_standard_power() {
        em
    } else {
        recipe.a * em + recipe.b * kf * t as f64
    };
    Ok((exact, approx))
}

/// Variance of the total CoT-example count (a Poisson-binomial sum of
/// `K*T` independent coin flips).
pub fn cot_examples_variance(recipe: &Recipe, k: u64, t: u64) -> Result<f64> {
    recipe.validate()?;
    Ok(k as f64
        * compensated_sum((0..t).map(|j| {
            let r = recipe.r_cot_unchecked(j, t);
            r * (1.0 - r)
        })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub n: u64,
    pub c: u64,
    pub k: u64,
    pub t: u64,
    pub recipe: Recipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub params: BudgetParams,
    pub expected_cot_examples_exact: f64,
    pub expected_cot_examples_approx: f64,
    pub expected_standard_examples: f64,
    pub expected_tokens: f64,
}

/// Expected token count of a dataset: one `bos` per sequence, `N+C+7`
/// tokens per CoT example and `N+6` per standard example. Uses the exact
/// CoT-example sum.
pub fn expected_tokens(recipe: &Recipe, n: u64, c: u64, k: u64, t: u64) -> Result<BudgetReport> {
    if n == 0 || c == 0 || k == 0 {
        return Err(Error::input("N, C and K must be >= 1"));
    }
    let (exact, approx) = expected_cot_examples(recipe, k, t)?;
    let total = (k * t) as f64;
    let standard = total - exact;
    let tokens = t as f64 + exact * (n + c + 7) as f64 + standard * (n + 6) as f64;
    Ok(BudgetReport {
        params: BudgetParams {
            n,
            c,
            k,
            t,
            recipe: *recipe,
        },
        expected_cot_examples_exact: exact,
        expected_cot_examples_approx: approx,
        expected_standard_examples: standard,
        expected_tokens: tokens,
    })
}

impl BudgetReport {
    pub fn table(&self) -> String {
        let p = &self.params;
        let rows = [
            ("alpha", p.recipe.alpha.to_string()),
            ("a", p.recipe.a.to_string()),
            ("b", p.recipe.b.to_string()),
            ("N", p.n.to_string()),
            ("C", p.c.to_string()),
            ("K", p.k.to_string()),
            ("T", p.t.to_string()),
            ("cot examples (exact)", format!("{:.3}", self.expected_cot_examples_exact)),
            ("cot examples (euler-maclaurin)", format!("{:.3}", self.expected_cot_examples_approx)),
            ("standard examples", format!("{:.3}", self.expected_standard_examples)),
            ("tokens", format!("{:.3}", self.expected_tokens)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vwidth = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>vwidth$}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pow(alpha: f64) -> Recipe {
        Recipe::power(Alpha::new(alpha).unwrap())
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(pow(0.0).r_cot(17, 100).unwrap(), 1.0);
        assert_eq!(pow(0.0).r_cot(0, 100).unwrap(), 1.0);
        assert_eq!(pow(1.0).r_cot(50, 100).unwrap(), 0.5);
        assert_eq!(pow(2.0).r_cot(50, 100).unwrap(), 0.25);
        let inf = Recipe::power(Alpha::Infinity);
        for j in [0, 1, 50, 99] {
            assert_eq!(inf.r_cot(j, 100).unwrap(), 0.0);
        }
        assert!(matches!(pow(1.0).r_cot(100, 100), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn clamping_for_general_scale() {
        let r = Recipe {
            alpha: Alpha::Finite(1.0),
            a: 3.0,
            b: -0.5,
        };
        assert_eq!(r.r_cot(0, 10).unwrap(), 0.0);
        assert_eq!(r.r_cot(9, 10).unwrap(), 1.0);
        assert!((r.r_cot(2, 10).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!("inf".parse::<Alpha>().unwrap(), Alpha::Infinity);
        assert_eq!("2".parse::<Alpha>().unwrap(), Alpha::Finite(2.0));
        assert!("-1".parse::<Alpha>().is_err());
        assert!("abc".parse::<Alpha>().is_err());
        let r: Recipe = serde_json::from_str(r#"{"alpha":"inf"}"#).unwrap();
        assert_eq!(r, Recipe::power(Alpha::Infinity));
        let r: Recipe = serde_json::from_str(r#"{"alpha":0.5,"a":1.0,"b":0.0}"#).unwrap();
        assert_eq!(r.alpha, Alpha::Finite(0.5));
        assert_eq!(serde_json::to_string(&Alpha::Infinity).unwrap(), "\"inf\"");
    }

    #[test]
    fn expected_counts_closed_cases() {
        let (exact, _) = expected_cot_examples(&pow(0.0), 40, 100).unwrap();
        assert_eq!(exact, 4000.0);
        // sum_{j<100} j/100 = 49.5
        let (exact, _) = expected_cot_examples(&pow(1.0), 40, 100).unwrap();
        assert!((exact - 1980.0).abs() < 1e-9);
        let (exact, approx) = expected_cot_examples(&Recipe::power(Alpha::Infinity), 40, 100).unwrap();
        assert_eq!((exact, approx), (0.0, 0.0));
        assert!(expected_cot_examples(&pow(1.0), 40, 1).is_err());
    }

    #[test]
    fn all_or_nothing_token_ratio() {
        let all = expected_tokens(&pow(0.0), 4, 4, 40, 100).unwrap();
        let none = expected_tokens(&Recipe::power(Alpha::Infinity), 4, 4, 40, 100).unwrap();
        assert_eq!(all.expected_tokens, 100.0 * 601.0);
        assert_eq!(none.expected_tokens, 100.0 * 401.0);
        let ratio = all.expected_tokens / none.expected_tokens;
        assert!((ratio - 601.0 / 401.0).abs() < 1e-12);
    }

    #[test]
    fn chain_length_irrelevant_without_cot() {
        let inf = Recipe::power(Alpha::Infinity);
        for c in [1, 4, 9] {
            let rep = expected_tokens(&inf, 4, c, 40, 50).unwrap();
            assert_eq!(rep.expected_tokens, 50.0 + 40.0 * 50.0 * 10.0);
        }
    }

    #[test]
    fn euler_maclaurin_sweep() {
        // Brute-force sweep of the closed-form quality over the stated range.
        for t in [1000u64, 5000, 20000] {
            for i in 0..=15 {
                let alpha = 0.25 + i as f64 * 0.25;
                let (exact, approx) = expected_cot_examples(&pow(alpha), 40, t).unwrap();
                let rel = (exact - approx).abs() / exact;
                assert!(rel <= 1e-3, "alpha {alpha} T {t} rel {rel}");
            }
        }
    }

    #[test]
    fn table_lists_every_quantity() {
        let rep = expected_tokens(&pow(2.0), 4, 4, 40, 100).unwrap();
        let table = rep.table();
        assert_eq!(table.lines().count(), 11);
        assert!(table.contains("tokens"));
    }

    proptest! {
        #[test]
        fn monotone_in_index(alpha in 0.0f64..6.0, a in 0.01f64..3.0, b in -1.0f64..1.0, t in 2u64..500) {
            let r = Recipe { alpha: Alpha::Finite(alpha), a, b };
            let mut prev = r.r_cot(0, t).unwrap();
            for j in 1..t {
                let cur = r.r_cot(j, t).unwrap();
                prop_assert!(cur >= prev);
                prop_assert!((0.0..=1.0).contains(&cur));
                prev = cur;
            }
        }

        #[test]
        fn counts_partition_examples(alpha in 0.0f64..6.0, k in 1u64..64, t in 2u64..2000, inf: bool) {
            let alpha = if inf { Alpha::Infinity } else { Alpha::Finite(alpha) };
            let rep = expected_tokens(&Recipe::power(alpha), 4, 4, k, t).unwrap();
            let total = rep.expected_cot_examples_exact + rep.expected_standard_examples;
            prop_assert_eq!(total, (k * t) as f64);
            prop_assert!(rep.expected_tokens >= t as f64);
        }
    }
}
