//! Number formatting shared by every text and JSON writer.
//!
//! All numeric output carries 9 significant digits so files diff cleanly and
//! regenerate byte-for-byte.

pub const SIG_DIGITS: usize = 9;

/// Formats `x` with 9 significant digits, trailing zeros trimmed.
pub fn sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-5..15).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

/// Timestamp with exactly 6 decimals.
pub fn stamp(t: f64) -> String {
    format!("{t:.6}")
}

/// Rounds to 9 significant digits so serde emits the same digits as [`sig`].
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x)
        .parse()
        .expect("round trip of formatted float")
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Serde helpers writing floats rounded to 9 significant digits.
pub mod serde_sig {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        let r = super::round_sig(*x);
        if r.is_finite() {
            s.serialize_f64(r)
        } else {
            s.serialize_none()
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::Serializer;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for x in xs {
                seq.serialize_element(&super::super::round_sig(*x))?;
            }
            seq.end()
        }
    }
}
