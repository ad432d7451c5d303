//! Serde adapters for nalgebra vectors as plain JSON arrays.

pub mod points {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vector3<f64>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = v.iter().map(|p| [p.x, p.y, p.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector3<f64>>, D::Error> {
        let raw = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(raw.into_iter().map(Vector3::from).collect())
    }
}

/// Optional 3-vectors, `null` when absent.
pub mod opt_points {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<Vector3<f64>>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Option<[f64; 3]>> = v.iter().map(|p| p.map(|p| [p.x, p.y, p.z])).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Vec<Option<Vector3<f64>>>, D::Error> {
        let raw = Vec::<Option<[f64; 3]>>::deserialize(d)?;
        Ok(raw.into_iter().map(|p| p.map(Vector3::from)).collect())
    }
}
