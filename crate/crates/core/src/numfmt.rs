//! Deterministic significant-digit float rendering (like C's `%.Ng`).

/// Renders `x` with `digits` significant digits, trailing zeros trimmed.
/// Uses scientific notation when the decimal exponent is below -4 or at
/// least `digits`.
pub fn sig(x: f64, digits: usize) -> String {
    assert!(digits >= 1);
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `[a, b, c]` with each element rendered by [`sig`].
pub fn sig_list(values: &[f64], digits: usize) -> String {
    let parts: Vec<String> = values.iter().map(|v| sig(*v, digits)).collect();
    format!("[{}]", parts.join(", "))
}
