//! Spatial query vectors for a reference head and its nearest background heads.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{spherical_distance, SphericalPos};

/// `(sin λ, cos λ, sin φ, cos φ, θ, δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryVector(pub [f64; 6]);

impl QueryVector {
    pub fn new(pos: &SphericalPos, delta: f64) -> Self {
        let (sl, cl) = pos.azimuth.sin_cos();
        let (sp, cp) = pos.altitude.sin_cos();
        Self([sl, cl, sp, cp, pos.width, delta])
    }

    pub fn delta(&self) -> f64 {
        self.0[5]
    }

    /// Rotate the azimuth by `offset` radians.
    pub fn rolled(&self, offset: f64) -> Self {
        let (so, co) = offset.sin_cos();
        let [s, c, rest @ ..] = self.0;
        let [a, b, w, d] = rest;
        Self([s * co + c * so, c * co - s * so, a, b, w, d])
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Reference vector plus up to `N` background vectors, nearest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub reference: QueryVector,
    pub background: Vec<QueryVector>,
}

impl Query {
    /// Background vectors in a value-determined order (by δ, then by the
    /// remaining components), so downstream sums do not depend on how the
    /// caller ordered heads at equal distance.
    pub fn canonical_background(&self) -> Vec<QueryVector> {
        let mut bg = self.background.clone();
        bg.sort_by(|a, b| a.delta().total_cmp(&b.delta()).then_with(|| a.total_cmp(b)));
        bg
    }

    pub fn rolled(&self, offset: f64) -> Self {
        Self {
            reference: self.reference.rolled(offset),
            background: self.background.iter().map(|v| v.rolled(offset)).collect(),
        }
    }
}

/// Build the query for `reference` from the other visible heads, keeping the
/// `n` closest by great-circle distance (ties broken by id).
pub fn build_query(reference: &SphericalPos, others: &[(u64, SphericalPos)], n: usize) -> Query {
    let mut scored: Vec<(f64, u64, &SphericalPos)> = others
        .iter()
        .map(|(id, p)| (spherical_distance(reference, p), *id, p))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    Query {
        reference: QueryVector::new(reference, 0.0),
        background: scored.iter().map(|(d, _, p)| QueryVector::new(p, *d)).collect(),
    }
}

pub fn roll_azimuth(queries: &[Query], offset: f64) -> Vec<Query> {
    queries.iter().map(|q| q.rolled(offset)).collect()
}
