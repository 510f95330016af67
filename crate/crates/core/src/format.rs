//! Text formatting shared by the CSV/JSON writers.

/// Format like C's `%.9g`: nine significant digits, trailing zeros trimmed.
///
/// Nine digits round-trip every `f32`.
pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(0.5), "0.5");
        assert_eq!(sig9(-2.25), "-2.25");
        assert_eq!(sig9(0.868_000_001), "0.868000001");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(123_456_789.0), "123456789");
        assert_eq!(sig9(1.5e9), "1.5e+09");
        assert_eq!(sig9(2.5e-7), "2.5e-07");
        assert_eq!(sig9(0.1f32 as f64), "0.100000001");
        assert_eq!(sig9(99.999_999_99), "100");
    }

    #[test]
    fn round_trips_f32() {
        for &v in &[0.1f32, 1.0e-7, 3.4e38, -7.25, 0.333_333_34] {
            let parsed: f32 = sig9(v as f64).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
