//! Finite-difference operators and quadrature on lattice fields.
//!
//! Fields are flat vectors in lattice order (last axis fastest).

use rayon::prelude::*;

use crate::geometry::Domain;
use crate::linalg::Scalar;

/// Evaluates `f` at every lattice node.
pub fn sample<T, F>(domain: &Domain, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    (0..domain.len())
        .into_par_iter()
        .map(|i| f(&domain.coords(i)))
        .collect()
}

/// `(2n+1)`-point Laplacian at an interior node.
pub fn laplacian_at<T: Scalar>(domain: &Domain, u: &[T], idx: usize) -> T {
    let mut acc = T::ZERO;
    let c = u[idx];
    for (k, h) in domain.spacing().iter().enumerate() {
        let s = domain.strides()[k];
        acc += (u[idx + s] + u[idx - s] - c - c) / T::from_real(h * h);
    }
    acc
}

/// Laplacian on interior nodes, zero on boundary nodes.
pub fn laplacian<T: Scalar>(domain: &Domain, u: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; domain.len()];
    for &i in domain.interior_nodes() {
        out[i] = laplacian_at(domain, u, i);
    }
    out
}

/// Second-order derivative along `axis`: central inside, three-point one-sided
/// at the two end planes.
pub fn partial_at<T: Scalar>(domain: &Domain, u: &[T], idx: usize, axis: usize) -> T {
    let h = domain.spacing()[axis];
    let s = domain.strides()[axis];
    let i = domain.axis_index(idx, axis);
    let n = domain.points_per_axis();
    let two_h = T::from_real(2.0 * h);
    if i == 0 {
        (T::from_real(-3.0) * u[idx] + T::from_real(4.0) * u[idx + s] - u[idx + 2 * s]) / two_h
    } else if i == n - 1 {
        (T::from_real(3.0) * u[idx] - T::from_real(4.0) * u[idx - s] + u[idx - 2 * s]) / two_h
    } else {
        (u[idx + s] - u[idx - s]) / two_h
    }
}

pub fn gradient_at<T: Scalar>(domain: &Domain, u: &[T], idx: usize) -> Vec<T> {
    (0..domain.dim()).map(|k| partial_at(domain, u, idx, k)).collect()
}

/// Discrete L² norm over interior nodes.
pub fn interior_norm<T: Scalar>(domain: &Domain, u: &[T]) -> f64 {
    let dv = domain.cell_volume();
    (domain
        .interior_nodes()
        .iter()
        .map(|&i| u[i].modulus().powi(2))
        .sum::<f64>()
        * dv)
        .sqrt()
}

/// Trapezoid L² norm over the full lattice.
pub fn l2_norm<T: Scalar>(domain: &Domain, u: &[T]) -> f64 {
    let w = domain.volume_weights();
    u.iter()
        .zip(&w)
        .map(|(v, w)| v.modulus().powi(2) * w)
        .sum::<f64>()
        .sqrt()
}

/// Trapezoid quadrature of a field over the box.
pub fn integrate<T: Scalar>(domain: &Domain, u: &[T]) -> T {
    let w = domain.volume_weights();
    u.iter()
        .zip(&w)
        .fold(T::ZERO, |acc, (&v, &w)| acc + v * T::from_real(w))
}

/// Surface quadrature over a set of boundary slots.
pub fn boundary_integral<T: Scalar>(domain: &Domain, slots: &[usize], values: &[T]) -> T {
    let nodes = domain.boundary_nodes();
    slots.iter().fold(T::ZERO, |acc, &s| {
        acc + values[s] * T::from_real(nodes[s].weight)
    })
}

/// Weighted boundary L² norm over a set of boundary slots.
pub fn boundary_norm<T: Scalar>(domain: &Domain, slots: &[usize], values: &[T]) -> f64 {
    let nodes = domain.boundary_nodes();
    slots
        .iter()
        .map(|&s| values[s].modulus().powi(2) * nodes[s].weight)
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs<T: Scalar>(u: &[T]) -> f64 {
    u.iter().map(|v| v.modulus()).fold(0.0, f64::max)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
