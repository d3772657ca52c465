//! Float formatting for model and feature files: 17 significant digits, so
//! every value survives a write/read cycle bit for bit.

use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;
use serde_json::value::RawValue;

/// `-1.2345678901234567e-3` style, always 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn raw(v: f64) -> Box<RawValue> {
    RawValue::from_string(fmt17(v)).expect("scientific notation is valid JSON")
}

pub fn serialize_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(serde::ser::Error::custom("non-finite float in model file"));
    }
    raw(*v).serialize(s)
}

pub fn serialize_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if !x.is_finite() {
            return Err(serde::ser::Error::custom("non-finite float in model file"));
        }
        seq.serialize_element(&raw(*x))?;
    }
    seq.end()
}



#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123_456_789.123_456_79, 0.0, -0.0, 2.0f64.sqrt()] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt17(0.25), "2.5000000000000000e-1");
    }

    #[test]
    fn json_vec() {
        #[derive(Serialize)]
        struct W {
            #[serde(serialize_with = "serialize_vec")]
            v: Vec<f64>,
        }
        let s = serde_json::to_string(&W { v: vec![0.5, -2.0] }).unwrap();
        assert_eq!(s, r#"{"v":[5.0000000000000000e-1,-2.0000000000000000e0]}"#);
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["v"][1].as_f64(), Some(-2.0));
    }
}
