//! Invertible map between the mass-fraction simplex and an `(n−1)`-box.
//!
//! With `y` on the simplex (`Σ y = 1`), the collapsed coordinates are
//! `z_k = y_k / (1 − Σ_{j≠k, j<n} y_j)` for `k ≤ n−2` and `z_{n−1} = y_{n−1}`.
//! The inverse solves a small linear system for the denominators, and the
//! last fraction is recovered as `1 − Σ` so every output sums to one.

use crate::error::{Error, Result};
use crate::kinetics::TrajectoryDataset;
use crate::operator::StateSchema;
use crate::tensor::{Lu, Tensor};

/// Denominators at or below this are treated as a vertex/edge singularity.
pub const DEFAULT_EPS: f64 = 1e-14;

/// Allowed deviation from the simplex in dataset rows.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Simplex point (length `n ≥ 2`) to collapsed coordinates (length `n − 1`).
pub fn forward_map(y: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least two fractions, got {n}")));
    }
    let mut z = Vec::with_capacity(n - 1);
    for k in 0..n - 2 {
        // On the simplex 1 − Σ_{j≠k, j<n} y_j = y_n + y_k, and the sum keeps
        // full relative precision when y_n is tiny.
        let denom = y[n - 1] + y[k];
        if denom <= eps {
            return Err(Error::CoordinateSingularity(format!(
                "denominator {denom:e} for coordinate {k}"
            )));
        }
        z.push(y[k] / denom);
    }
    z.push(y[n - 2]);
    Ok(z)
}

/// Collapsed coordinates back to a simplex point that sums to one.
pub fn inverse_map(z: &[f64]) -> Result<Vec<f64>> {
    let m = z.len();
    if m == 0 {
        return Err(Error::Config("need at least one collapsed coordinate".into()));
    }
    let last = z[m - 1];
    let k = m - 1;
    let mut y = Vec::with_capacity(m + 1);
    if k > 0 {
        // d_k + Σ_{j≠k} z_j d_j = 1 − z_{n−1}
        let mut a = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                a[r * k + c] = if r == c { 1.0 } else { z[c] };
            }
        }
        let lu = Lu::factor(&a, k)
            .ok_or_else(|| Error::DegenerateCoordinates(format!("singular system at z = {z:?}")))?;
        let d = lu.solve(&vec![1.0 - last; k]);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCoordinates(format!("non-finite solution at z = {z:?}")));
        }
        y.extend(z[..k].iter().zip(&d).map(|(zj, dj)| zj * dj));
    }
    y.push(last);
    let s: f64 = y.iter().sum();
    y.push(1.0 - s);
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Collapse,
    Expand,
}

/// Schema of the collapsed representation: the last mass-group member is
/// dropped, the others carry the collapsed coordinates, and the mass group is empty.
pub fn collapsed_schema(schema: &StateSchema) -> Result<StateSchema> {
    let group = &schema.mass_group;
    if group.len() < 2 {
        return Err(Error::Config(
            "the simplex map needs a mass group of at least two states".into(),
        ));
    }
    let dropped = *group.last().expect("nonempty");
    let keep: Vec<usize> = (0..schema.j()).filter(|&a| a != dropped).collect();
    let names = keep
        .iter()
        .map(|&a| {
            if group.contains(&a) {
                format!("z_{}", schema.names[a])
            } else {
                schema.names[a].clone()
            }
        })
        .collect();
    let temperature_index = schema
        .temperature_index
        .map(|t| keep.iter().position(|&a| a == t).expect("temperature is never dropped"));
    let out = StateSchema {
        names,
        temperature_index,
        mass_group: vec![],
        log_transform: keep.iter().map(|&a| schema.log_transform[a]).collect(),
    };
    out.validate()?;
    Ok(out)
}

/// Applies the map row by row along the trailing axis. `schema` is always the
/// full (expanded) schema; returns the transformed data and its schema.
pub fn batch_transform(data: &Tensor, schema: &StateSchema, direction: Direction) -> Result<(Tensor, StateSchema)> {
    let small = collapsed_schema(schema)?;
    let group = &schema.mass_group;
    let n = group.len();
    let j = schema.j();
    let (jin, jout) = match direction {
        Direction::Collapse => (j, j - 1),
        Direction::Expand => (j - 1, j),
    };
    if data.shape().last() != Some(&jin) {
        return Err(Error::dim(
            "batch_transform",
            format!("trailing axis of {:?} must be {jin}", data.shape()),
        ));
    }
    let dropped = group[n - 1];
    let keep: Vec<usize> = (0..j).filter(|&a| a != dropped).collect();
    let rows = data.len() / jin;
    let mut out = Vec::with_capacity(rows * jout);
    let mut buf = vec![0.0; jout];
    for (r, row) in data.data().chunks(jin).enumerate() {
        match direction {
            Direction::Collapse => {
                let y: Vec<f64> = group.iter().map(|&a| row[a]).collect();
                let total: f64 = y.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL || y.iter().any(|&v| v < -SIMPLEX_TOL) {
                    return Err(Error::DataValidation {
                        row: r,
                        detail: format!("mass fractions sum to {total} or are negative"),
                    });
                }
                let z = forward_map(&y, DEFAULT_EPS).map_err(|e| Error::DataValidation {
                    row: r,
                    detail: e.to_string(),
                })?;
                for (pos, &a) in keep.iter().enumerate() {
                    buf[pos] = match group.iter().position(|&g| g == a) {
                        Some(gi) => z[gi],
                        None => row[a],
                    };
                }
            }
            Direction::Expand => {
                let z: Vec<f64> = group[..n - 1]
                    .iter()
                    .map(|&a| row[keep.iter().position(|&k| k == a).expect("kept")])
                    .collect();
                let y = inverse_map(&z)?;
                for (pos, &a) in keep.iter().enumerate() {
                    if !group.contains(&a) {
                        buf[a] = row[pos];
                    }
                }
                for (gi, &a) in group.iter().enumerate() {
                    buf[a] = y[gi];
                }
            }
        }
        out.extend_from_slice(&buf);
    }
    let mut shape = data.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = jout;
    let schema_out = match direction {
        Direction::Collapse => small,
        Direction::Expand => schema.clone(),
    };
    Ok((Tensor::new(shape, out)?, schema_out))
}

/// Dataset in collapsed coordinates, renormalised on its training split.
pub fn collapse_dataset(ds: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    let (raw, schema) = batch_transform(&ds.raw, &ds.schema, Direction::Collapse)?;
    ds.with_representation(raw, schema)
}
