//! Log-domain arithmetic helpers.

/// `ln(Σ exp(x_i))` with the max-shift trick. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Sequential left-to-right sum. Used wherever two sums over identical
/// inputs must agree bit-for-bit.
#[inline]
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v)
}

/// Natural log that maps exact zero to `-inf` without a floor.
#[inline]
pub fn ln_prob(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// Per-step log-probabilities of a distribution raised to `exponent` and
/// renormalised. `exponent == 1` returns the input unchanged, and an infinite
/// exponent gives the argmax one-hot (lowest index on ties).
pub fn tempered_log_probs(log_probs: &[f64], exponent: f64) -> Vec<f64> {
    if exponent == 1.0 {
        return log_probs.to_vec();
    }
    if exponent.is_infinite() {
        let best = argmax(log_probs);
        return (0..log_probs.len())
            .map(|i| if i == best { 0.0 } else { f64::NEG_INFINITY })
            .collect();
    }
    let scaled: Vec<f64> = log_probs
        .iter()
        .map(|&lp| {
            if lp == f64::NEG_INFINITY {
                lp
            } else {
                exponent * lp
            }
        })
        .collect();
    let z = log_sum_exp(&scaled);
    scaled.iter().map(|&s| s - z).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Format with `digits` significant digits in plain decimal notation.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 {
            format!("{:.*}", digits.saturating_sub(1), 0.0)
        } else {
            format!("{x}")
        };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // Rounding may have carried into a new leading digit (0.9999.. -> 1.000..).
    let rounded: f64 = s.parse().unwrap_or(x);
    let new_magnitude = rounded.abs().log10().floor() as i64;
    if new_magnitude != magnitude {
        let decimals = (digits as i64 - 1 - new_magnitude).max(0) as usize;
        format!("{:.*}", decimals, rounded)
    } else {
        s
    }
}
