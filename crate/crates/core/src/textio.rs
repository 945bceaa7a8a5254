//! Plain-text float encoding shared by every on-disk format.

use crate::error::{Error, Result};

/// 17 significant digits in scientific notation; parsing the output gives
/// back the identical `f64`, and re-formatting gives identical bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("float {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(-0.1), "-1.0000000000000001e-1");
        assert!(parse_f64("x").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let s = fmt_f64(v);
            let back = parse_f64(&s).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
            prop_assert_eq!(fmt_f64(back), s);
        }
    }
}
