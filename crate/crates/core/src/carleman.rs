//! Empirical constants of the interior and boundary Carleman estimates.
//!
//! All norms are trapezoid L² norms on the lattice. Weighted quantities are
//! formed by multiplying by `e^{φ/h}` after differencing `u`, so the
//! exponential never enters a difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::{partition_signed, Domain};
use crate::grid;
use crate::pde::{ball_bump, normal_derivative, Potential};
use crate::weights::CarlemanWeight;
use crate::Complex64;

/// Test field generators.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestField {
    /// `exp(1 - 1/(1 - |x-c|²/ρ²))`.
    Bump { center: Vec<f64>, radius: f64 },
    /// `Π sin(k_j π (x_j - a_j)/L_j)`.
    Eigenfunction { modes: Vec<usize> },
}

impl TestField {
    pub fn sample(&self, domain: &Domain) -> Vec<Complex64> {
        match self {
            TestField::Bump { center, radius } => {
                grid::sample(domain, |x| Complex64::new(ball_bump(x, center, *radius), 0.0))
            }
            TestField::Eigenfunction { modes } => {
                let (lo, hi) = (domain.lower().to_vec(), domain.upper().to_vec());
                let mut u: Vec<Complex64> = grid::sample(domain, |x| {
                    let v: f64 = modes
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| (k as f64 * std::f64::consts::PI * (x[j] - lo[j]) / (hi[j] - lo[j])).sin())
                        .product();
                    Complex64::new(v, 0.0)
                });
                // sin(kπ) is not exactly 0 in floating point
                for b in domain.boundary_nodes() {
                    u[b.index] = Complex64::new(0.0, 0.0);
                }
                u
            }
        }
    }
}

/// `count` bumps with seeded random centers and radii whose supports stay
/// at least two lattice layers away from the boundary.
pub fn bump_family(domain: &Domain, count: usize, seed: u64) -> Vec<TestField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (domain.lower(), domain.upper());
    let margin = 2.0 * domain.max_spacing();
    let half_min = (0..domain.dim()).map(|k| hi[k] - lo[k]).fold(f64::INFINITY, f64::min) / 2.0;
    let r_max = (half_min - margin).max(domain.max_spacing());
    (0..count)
        .map(|_| {
            let radius = rng.gen_range(0.4 * r_max..0.8 * r_max);
            let center = (0..domain.dim())
                .map(|k| rng.gen_range(lo[k] + margin + radius..hi[k] - margin - radius))
                .collect();
            TestField::Bump { center, radius }
        })
        .collect()
}

/// Norm breakdown of one estimate evaluation.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EstimateRecord {
    pub h: f64,
    pub test_id: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `‖e^{φ/h}u‖`.
    pub field_norm: f64,
    /// Weighted gradient norm (of `e^{φ/h}u` for the interior estimate, of
    /// `e^{φ/h}u` times `h∇u` for the boundary one).
    pub gradient_norm: f64,
    /// `(φ'·ν |e^{φ/h}∂_ν u|²)` over `∂Ω₋` (≤ 0) and `∂Ω₊` (≥ 0).
    pub flux_minus: f64,
    pub flux_plus: f64,
}

fn weights_on(weight: &CarlemanWeight, domain: &Domain, h: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let e = grid::sample(domain, |x| (weight.value(x) / h).exp());
    let g = grid::sample(domain, |x| weight.gradient(x));
    (e, g)
}

fn check_inputs(weight: &CarlemanWeight, domain: &Domain, q: &Potential, h: f64, u: &[Complex64]) -> Result<()> {
    if !(h > 0.0) {
        return invalid("h must be positive");
    }
    if u.len() != domain.len() || q.values().len() != domain.len() {
        return invalid("field lengths do not match the domain");
    }
    if weight.dim() != domain.dim() {
        return invalid("weight dimension does not match the domain");
    }
    if u.iter().all(|v| v.norm() == 0.0) {
        return invalid("test field vanishes identically");
    }
    Ok(())
}

/// `e^{φ/h}(-h²Δ_h + h²q)u` at interior nodes.
fn weighted_operator(domain: &Domain, q: &Potential, h: f64, u: &[Complex64], e: &[f64]) -> Vec<Complex64> {
    let lap = grid::laplacian(domain, u);
    let mut out = vec![Complex64::new(0.0, 0.0); domain.len()];
    for &i in domain.interior_nodes() {
        out[i] = e[i] * h * h * (q.values()[i] * u[i] - lap[i]);
    }
    out
}

/// `h(‖e^{φ/h}u‖ + ‖hD(e^{φ/h}u)‖) / ‖e^{φ/h}(-h²Δ + h²q)u‖` for `u`
/// vanishing on the two outermost lattice layers.
pub fn interior_estimate_ratio(
    weight: &CarlemanWeight,
    domain: &Domain,
    q: &Potential,
    h: f64,
    u: &[Complex64],
) -> Result<EstimateRecord> {
    check_inputs(weight, domain, q, h, u)?;
    let last = domain.points_per_axis() - 1;
    for (i, v) in u.iter().enumerate() {
        if v.norm() != 0.0 && domain.multi_index(i).iter().any(|&m| m < 2 || m > last - 2) {
            return invalid("test field is not supported away from the boundary");
        }
    }
    let (e, g) = weights_on(weight, domain, h);
    let weighted: Vec<Complex64> = u.iter().zip(&e).map(|(v, w)| v * w).collect();
    // h∇(e^{φ/h}u) = e^{φ/h}(h∇u + u∇φ)
    let grad_sq: Vec<f64> = (0..domain.len())
        .into_par_iter()
        .map(|i| {
            grid::gradient_at(domain, u, i)
                .iter()
                .zip(&g[i])
                .map(|(du, dp)| (e[i] * (h * du + u[i] * dp)).norm_sqr())
                .sum::<f64>()
        })
        .collect();
    let field_norm = grid::l2_norm(domain, &weighted);
    let gradient_norm = grid::integrate(domain, &grad_sq).sqrt();
    let rhs = grid::l2_norm(domain, &weighted_operator(domain, q, h, u, &e));
    if rhs == 0.0 {
        return invalid("right-hand side vanishes");
    }
    let lhs = h * (field_norm + gradient_norm);
    Ok(EstimateRecord {
        h,
        test_id: 0,
        lhs,
        rhs,
        ratio: lhs / rhs,
        field_norm,
        gradient_norm,
        flux_minus: 0.0,
        flux_plus: 0.0,
    })
}

/// Both sides of the boundary estimate for a field with zero trace.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BoundaryEstimate {
    pub record: EstimateRecord,
    /// `h²(‖e^{φ/h}u‖² + ‖e^{φ/h}h∇u‖²) - h³ flux₋` (the part divided by `C₀`).
    pub lhs_core: f64,
    /// `‖e^{φ/h}(-h²Δ + h²q)u‖²`.
    pub operator_term: f64,
    /// `h³ flux₊` (the part multiplied by `C₀`).
    pub plus_term: f64,
    /// Smallest `C₀ > 0` for which the inequality holds.
    pub implied_c0: f64,
}

impl BoundaryEstimate {
    /// Whether `lhs_core / c0 <= operator_term + c0 plus_term`.
    pub fn holds_with(&self, c0: f64) -> bool {
        self.lhs_core / c0 <= (self.operator_term + c0 * self.plus_term) * (1.0 + 1e-12)
    }
}

pub fn boundary_estimate_ratio(
    weight: &CarlemanWeight,
    domain: &Domain,
    q: &Potential,
    h: f64,
    u: &[Complex64],
) -> Result<BoundaryEstimate> {
    check_inputs(weight, domain, q, h, u)?;
    if domain.boundary_nodes().iter().any(|b| u[b.index].norm() != 0.0) {
        return invalid("test field has a nonzero boundary trace");
    }
    let (e, _) = weights_on(weight, domain, h);
    let weighted: Vec<Complex64> = u.iter().zip(&e).map(|(v, w)| v * w).collect();
    let grad_sq: Vec<f64> = (0..domain.len())
        .into_par_iter()
        .map(|i| {
            grid::gradient_at(domain, u, i)
                .iter()
                .map(|du| (e[i] * h * du).norm_sqr())
                .sum::<f64>()
        })
        .collect();
    let field_norm = grid::l2_norm(domain, &weighted);
    let gradient_norm = grid::integrate(domain, &grad_sq).sqrt();
    let part = partition_signed(domain, weight, 0.0)?;
    let dn = normal_derivative(domain, u);
    let nodes = domain.boundary_nodes();
    let flux = |set: &[usize]| -> f64 {
        set.iter()
            .map(|&s| part.normal_slope[s] * (e[nodes[s].index] * dn[s]).norm_sqr() * nodes[s].weight)
            .sum()
    };
    let flux_minus = flux(&part.signed_minus);
    let flux_plus = flux(&part.signed_plus);
    let operator_term = grid::l2_norm(domain, &weighted_operator(domain, q, h, u, &e)).powi(2);
    let lhs_core = h * h * (field_norm.powi(2) + gradient_norm.powi(2)) - h.powi(3) * flux_minus;
    let plus_term = h.powi(3) * flux_plus;
    // smallest root of  plus·C² + operator·C - core = 0
    let implied_c0 = if plus_term > 0.0 {
        (-operator_term + (operator_term.powi(2) + 4.0 * plus_term * lhs_core).sqrt()) / (2.0 * plus_term)
    } else if operator_term > 0.0 {
        lhs_core / operator_term
    } else {
        return Err(LabError::Domain("both right-hand terms vanish".into()));
    };
    let lhs = lhs_core / implied_c0;
    let rhs = operator_term + implied_c0 * plus_term;
    Ok(BoundaryEstimate {
        record: EstimateRecord {
            h,
            test_id: 0,
            lhs,
            rhs,
            ratio: lhs / rhs,
            field_norm,
            gradient_norm,
            flux_minus,
            flux_plus,
        },
        lhs_core,
        operator_term,
        plus_term,
        implied_c0,
    })
}

/// Per-h worst-case interior constants over a family of test fields.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EstimateReport {
    pub weight_kind: String,
    pub h_values: Vec<f64>,
    /// Largest ratio at each `h`.
    pub constants: Vec<f64>,
    /// Test index attaining each constant.
    pub argmax: Vec<usize>,
    pub test_count: usize,
    /// `max(constants) / min(constants)`.
    pub variation: f64,
    /// Some constant more than doubled when `h` was halved.
    pub growth_flag: bool,
    pub records: Vec<EstimateRecord>,
}

pub fn constant_sweep(
    weight: &CarlemanWeight,
    domain: &Domain,
    q: &Potential,
    h_list: &[f64],
    tests: &[TestField],
) -> Result<EstimateReport> {
    if h_list.len() < 3 || tests.len() < 10 {
        return invalid("a sweep needs at least 3 h values and 10 test fields");
    }
    let fields: Vec<Vec<Complex64>> = tests.par_iter().map(|t| t.sample(domain)).collect();
    let mut records = Vec::new();
    let mut constants = Vec::new();
    let mut argmax = Vec::new();
    for &h in h_list {
        let recs: Vec<EstimateRecord> = fields
            .par_iter()
            .enumerate()
            .map(|(k, u)| {
                interior_estimate_ratio(weight, domain, q, h, u).map(|mut r| {
                    r.test_id = k;
                    r
                })
            })
            .collect::<Result<_>>()?;
        let (k, best) = recs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, r)| if r.ratio > acc.1 { (k, r.ratio) } else { acc });
        constants.push(best);
        argmax.push(k);
        records.extend(recs);
    }
    let max = constants.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = constants.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut order: Vec<usize> = (0..h_list.len()).collect();
    order.sort_by(|&a, &b| h_list[b].total_cmp(&h_list[a]));
    let growth_flag = order.windows(2).any(|w| constants[w[1]] > 2.0 * constants[w[0]]);
    Ok(EstimateReport {
        weight_kind: weight.kind_name().to_string(),
        h_values: h_list.to_vec(),
        constants,
        argmax,
        test_count: tests.len(),
        variation: max / min,
        growth_flag,
        records,
    })
}
