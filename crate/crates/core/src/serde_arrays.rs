//! Serde adapters that store ndarray tensors as plain nested JSON arrays.

use ndarray::{Array1, Array2, Array3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub mod vec1 {
    use super::*;

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        a.as_slice_memory_order()
            .expect("contiguous")
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}

pub mod mat2 {
    use super::*;

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::rows_to_array(rows).map_err(D::Error::custom)
    }
}

pub mod mat3 {
    use super::*;

    pub fn serialize<S: Serializer>(a: &Array3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let nested: Vec<Vec<Vec<f64>>> = a
            .outer_iter()
            .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
            .collect();
        nested.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array3<f64>, D::Error> {
        let nested = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        let outer = nested.len();
        let (mid, inner) = match nested.first() {
            Some(m) => (m.len(), m.first().map_or(0, Vec::len)),
            None => (0, 0),
        };
        let mut flat = Vec::with_capacity(outer * mid * inner);
        for m in nested {
            if m.len() != mid {
                return Err(D::Error::custom("ragged 3-d array"));
            }
            for r in m {
                if r.len() != inner {
                    return Err(D::Error::custom("ragged 3-d array"));
                }
                flat.extend(r);
            }
        }
        Array3::from_shape_vec((outer, mid, inner), flat).map_err(D::Error::custom)
    }
}

pub(crate) fn rows_to_array(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n * d);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != d {
            return Err(format!("row {i} has length {}, expected {d}", r.len()));
        }
        flat.extend(r);
    }
    Array2::from_shape_vec((n, d), flat).map_err(|e| e.to_string())
}
