//! The integral identity linking two potentials through CGO solutions, its
//! `h → 0` limit and the nonlinear Fourier functional it produces.
//!
//! Conventions: `u₂ = e^{(φ - iψ_y)/h}(a₂ + r₂)` solves `(Δ - q₂)u₂ = 0`,
//! `w = e^{(-φ + iψ_{y₁})/h}(ā₁ + r̄₁)` solves `(Δ - q₁)w = 0` (the conjugate of
//! the adjoint-side solution), with `y₁ = exp_y(hλν)`. Then
//! `u₂ w = e^{i(ψ_{y₁} - ψ_y)/h}(…)` and the phase quotient tends to `λ f(x; θ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::{build_cgo, CgoSolution, ComplexPhase, ExponentSign, PhasePair};
use crate::error::{invalid, Result};
use crate::geometry::{partition_signed, Domain, SignedPartition};
use crate::grid;
use crate::pde::{boundary_flux, DirichletSolver, Potential};
use crate::phases::{eval_f, eval_psi, geodesic_step, PhaseFamily};
use crate::Complex64;

/// Phase of `u₂`: `+φ`, `-ψ_y`.
pub fn u2_phase(theta: &PhaseFamily) -> ComplexPhase {
    ComplexPhase::new(PhasePair::Spherical(theta.clone()), ExponentSign::Plus).with_psi_sign(ExponentSign::Minus)
}

/// Phase of `w`: `-φ`, `+ψ` for the given family.
pub fn w_phase(theta: &PhaseFamily) -> ComplexPhase {
    ComplexPhase::new(PhasePair::Spherical(theta.clone()), ExponentSign::Minus)
}

/// `a₂ ā₁` at `x` in the `h → 0` limit.
pub fn amplitude_product(theta: &PhaseFamily, x: &[f64]) -> Result<Complex64> {
    Ok(u2_phase(theta).amplitude(x)?.0 * w_phase(theta).amplitude(x)?.0)
}

/// `ψ₁ = ψ(·; exp_y(hλν))`, `ψ₂ = ψ(·; y)` and the quotient `(ψ₁ - ψ₂)/h`.
#[derive(Clone, Debug)]
pub struct HPhasePair {
    pub psi1: PhaseFamily,
    pub psi2: PhaseFamily,
    pub quotient: Vec<f64>,
    /// `λ f(x; θ)` at every node.
    pub limit: Vec<f64>,
    pub max_error: f64,
}

pub fn h_phase_pair(theta: &PhaseFamily, domain: &Domain, lambda: f64, h: f64) -> Result<HPhasePair> {
    if !(h > 0.0) || !lambda.is_finite() {
        return invalid("h must be positive and lambda finite");
    }
    let psi1 = theta.with_y(geodesic_step(&theta.y, &theta.nu, h * lambda));
    psi1.validate_on(domain)?;
    theta.validate_on(domain)?;
    let pairs: Vec<(f64, f64)> = (0..domain.len())
        .into_par_iter()
        .map(|i| {
            let x = domain.coords(i);
            let quotient = (eval_psi(&psi1, &x)?.0 - eval_psi(theta, &x)?.0) / h;
            Ok((quotient, lambda * eval_f(&x, theta)?.0))
        })
        .collect::<Result<_>>()?;
    let (quotient, limit): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let max_error = quotient.iter().zip(&limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(HPhasePair {
        psi1,
        psi2: theta.clone(),
        quotient,
        limit,
        max_error,
    })
}

/// Trapezoid quadrature of `∫ q a₂ā₁ e^{iλ f(x; θ)} dx`.
pub fn nonlinear_fourier(domain: &Domain, q: &Potential, theta: &PhaseFamily, lambda: f64) -> Result<Complex64> {
    let w = domain.volume_weights();
    let qv = q.values();
    let terms: Vec<Complex64> = (0..domain.len())
        .into_par_iter()
        .map(|i| {
            if qv[i] == Complex64::new(0.0, 0.0) {
                return Ok(Complex64::new(0.0, 0.0));
            }
            let x = domain.coords(i);
            let f = eval_f(&x, theta)?.0;
            Ok(qv[i] * amplitude_product(theta, &x)? * Complex64::from_polar(w[i], lambda * f))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Terms of the discrete Green formula for `u` with zero trace.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GreensReport {
    /// `∫ q u₂ w`.
    pub volume: Complex64,
    /// `∫ u (Δ_h - q₁) w`.
    pub interior: Complex64,
    /// `∫_mask (∂_ν u) w dS`.
    pub boundary: Complex64,
    /// `|volume - interior - boundary|`.
    pub residual: f64,
    /// `max(|volume|, |interior|, |boundary|)`.
    pub scale: f64,
}

/// Green formula bookkeeping on interior nodes; `mask` selects the boundary
/// slots included in the surface term, `∂_ν u` is the energy-form flux.
pub fn greens_residual(
    domain: &Domain,
    q1: &Potential,
    q: &Potential,
    u2: &[Complex64],
    u: &[Complex64],
    w: &[Complex64],
    mask: &[bool],
) -> Result<GreensReport> {
    let n = domain.len();
    if [u2.len(), u.len(), w.len(), q1.values().len(), q.values().len()].iter().any(|&l| l != n) {
        return invalid("field lengths do not match the domain");
    }
    if mask.len() != domain.boundary_nodes().len() {
        return invalid("mask length differs from the boundary node count");
    }
    if domain.boundary_nodes().iter().any(|b| u[b.index].norm() != 0.0) {
        return invalid("u has a nonzero boundary trace");
    }
    let dv = domain.cell_volume();
    let lw = grid::laplacian(domain, w);
    let (q1v, qv) = (q1.values(), q.values());
    let mut volume = Complex64::new(0.0, 0.0);
    let mut interior = Complex64::new(0.0, 0.0);
    for &i in domain.interior_nodes() {
        volume += qv[i] * u2[i] * w[i] * dv;
        interior += u[i] * (lw[i] - q1v[i] * w[i]) * dv;
    }
    let flux = boundary_flux(domain, q1v, u);
    let boundary: Complex64 = domain
        .boundary_nodes()
        .iter()
        .enumerate()
        .filter(|(s, _)| mask[*s])
        .map(|(s, b)| flux[s] * w[b.index] * b.weight)
        .sum();
    Ok(GreensReport {
        volume,
        interior,
        boundary,
        residual: (volume - interior - boundary).norm(),
        scale: volume.norm().max(interior.norm()).max(boundary.norm()),
    })
}

/// Configuration of an identity run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IdentityConfig {
    pub theta: PhaseFamily,
    #[serde(default = "one")]
    pub lambda: f64,
    pub h_list: Vec<f64>,
    /// Defaults to `0.05 max|ν·φ'|`.
    #[serde(default)]
    pub eps0: Option<f64>,
    /// Constant of the boundary Carleman estimate used in the bound.
    #[serde(default = "one")]
    pub c0: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IdentityRecord {
    pub h: f64,
    /// `∫ q u₂ w`.
    pub lhs: Complex64,
    pub limit: Complex64,
    pub lhs_error: f64,
    /// `∫_{∂Ω₊,ε₀} (∂_ν u) w dS`.
    pub rhs_plus: Complex64,
    /// `∫_{∂Ω₋,ε₀} (∂_ν u) w dS`; vanishes when the partial DN maps agree.
    pub rhs_minus: Complex64,
    /// `sqrt((C₀h/ε₀) ‖a₁+r₁‖²_{∂Ω₊,ε₀} ‖q(a₂+r₂)‖²)`.
    pub rhs_bound: f64,
    /// `C₀h/ε₀`.
    pub bound_constant: f64,
    pub green_residual: f64,
    pub remainder_u2: f64,
    pub remainder_w: f64,
    pub phase_quotient_error: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IdentityRun {
    pub eps0: f64,
    pub lambda: f64,
    pub records: Vec<IdentityRecord>,
    /// Log-log slope of `lhs_error` against `h`.
    pub lhs_order: f64,
    /// Log-log slope of `rhs_bound` against `h`.
    pub bound_order: f64,
}

/// `ε₀` default: 5 % of the largest boundary slope `ν·φ'`.
pub fn default_eps0(part: &SignedPartition) -> f64 {
    0.05 * part.normal_slope.iter().cloned().fold(0.0, f64::max)
}

/// Everything assembled at one `h`.
pub struct IdentityFields {
    pub u2: CgoSolution,
    pub w: CgoSolution,
    /// `u = u₁ - u₂`, zero on the boundary.
    pub u: Vec<Complex64>,
    pub pair: HPhasePair,
}

/// Builds `u₂`, `w` and `u` solving `(Δ_h - q₁)u = q u₂` with zero trace.
pub fn identity_fields(
    domain: &Domain,
    q1: &Potential,
    q2: &Potential,
    theta: &PhaseFamily,
    lambda: f64,
    h: f64,
) -> Result<IdentityFields> {
    let pair = h_phase_pair(theta, domain, lambda, h)?;
    let u2 = build_cgo(&u2_phase(theta), domain, h, q2)?;
    let w = build_cgo(&w_phase(&pair.psi1), domain, h, q1)?;
    let q = q2.difference(q1)?;
    let solver = DirichletSolver::new(domain, q1.values().to_vec())?;
    let source: Vec<Complex64> = q.values().iter().zip(&u2.field).map(|(a, b)| -a * b).collect();
    let nb = domain.boundary_nodes().len();
    let u = solver.solve(&vec![Complex64::new(0.0, 0.0); nb], Some(&source));
    Ok(IdentityFields { u2, w, u, pair })
}

pub fn orthogonality_run(domain: &Domain, q1: &Potential, q2: &Potential, config: &IdentityConfig) -> Result<IdentityRun> {
    if config.h_list.is_empty() {
        return invalid("h_list is empty");
    }
    let theta = &config.theta;
    let part = partition_signed(domain, &theta.weight(), 0.0)?;
    let eps0 = config.eps0.unwrap_or_else(|| default_eps0(&part));
    if !(eps0 > 0.0) {
        return invalid("eps0 must be positive");
    }
    let part = partition_signed(domain, &theta.weight(), eps0)?;
    let plus = part.plus_eps_mask(domain.boundary_nodes().len());
    let q = q2.difference(q1)?;
    let limit = nonlinear_fourier(domain, &q, theta, config.lambda)?;
    let mut records = Vec::with_capacity(config.h_list.len());
    for &h in &config.h_list {
        let f = identity_fields(domain, q1, q2, theta, config.lambda, h)?;
        let g_plus = greens_residual(domain, q1, &q, &f.u2.field, &f.u, &f.w.field, &plus)?;
        let g_all = greens_residual(domain, q1, &q, &f.u2.field, &f.u, &f.w.field, &vec![true; plus.len()])?;
        // the exponentials cancel in u₂w: combine exponents before exponentiating
        let env2 = f.u2.envelope();
        let envw = f.w.envelope();
        let dv = domain.cell_volume();
        let qv = q.values();
        let lhs: Complex64 = domain
            .interior_nodes()
            .iter()
            .map(|&i| qv[i] * ((f.u2.exponent[i] + f.w.exponent[i]) / h).exp() * env2[i] * envw[i] * dv)
            .sum();
        let a1_norm = grid::boundary_norm(domain, &part.plus_eps, &boundary_values(domain, &envw));
        let qa2: Vec<Complex64> = qv.iter().zip(&env2).map(|(a, b)| a * b).collect();
        let bound_constant = config.c0 * h / eps0;
        let rhs_bound = (bound_constant * a1_norm.powi(2) * grid::l2_norm(domain, &qa2).powi(2)).sqrt();
        records.push(IdentityRecord {
            h,
            lhs,
            limit,
            lhs_error: (lhs - limit).norm(),
            rhs_plus: g_plus.boundary,
            rhs_minus: g_all.boundary - g_plus.boundary,
            rhs_bound,
            bound_constant,
            green_residual: g_all.residual / g_all.scale.max(f64::MIN_POSITIVE),
            remainder_u2: f.u2.remainder_constant,
            remainder_w: f.w.remainder_constant,
            phase_quotient_error: f.pair.max_error,
        });
    }
    let hs: Vec<f64> = records.iter().map(|r| r.h).collect();
    let slope = |v: Vec<f64>| {
        if hs.len() >= 2 && v.iter().all(|x| *x > 0.0) {
            grid::loglog_slope(&hs, &v)
        } else {
            f64::NAN
        }
    };
    let lhs_order = slope(records.iter().map(|r| r.lhs_error).collect());
    let bound_order = slope(records.iter().map(|r| r.rhs_bound).collect());
    Ok(IdentityRun {
        eps0,
        lambda: config.lambda,
        records,
        lhs_order,
        bound_order,
    })
}

fn boundary_values(domain: &Domain, u: &[Complex64]) -> Vec<Complex64> {
    domain.boundary_nodes().iter().map(|b| u[b.index]).collect()
}

/// Outcome of a discrimination scan.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Discrimination {
    pub max_abs: f64,
    /// `(θ index, λ)` attaining the maximum.
    pub argmax: (usize, f64),
    pub threshold: f64,
    pub distinct: bool,
    pub degenerate: bool,
    pub values: Vec<(usize, f64, Complex64)>,
}

impl Discrimination {
    pub fn verdict(&self) -> &'static str {
        if self.distinct {
            "distinct"
        } else {
            "indistinguishable at this resolution"
        }
    }
}

/// Max of `|nonlinear_fourier(q₂ - q₁)|` over the parameter grid, compared
/// with `threshold`.
pub fn discriminate(
    domain: &Domain,
    q1: &Potential,
    q2: &Potential,
    thetas: &[PhaseFamily],
    lambdas: &[f64],
    threshold: f64,
) -> Result<Discrimination> {
    if thetas.is_empty() || lambdas.is_empty() {
        return invalid("parameter grids must be nonempty");
    }
    let q = q2.difference(q1)?;
    let cells: Vec<(usize, f64)> = (0..thetas.len())
        .flat_map(|t| lambdas.iter().map(move |&l| (t, l)))
        .collect();
    let values: Vec<(usize, f64, Complex64)> = cells
        .par_iter()
        .map(|&(t, l)| nonlinear_fourier(domain, &q, &thetas[t], l).map(|v| (t, l, v)))
        .collect::<Result<_>>()?;
    let (t, l, v) = values
        .iter()
        .cloned()
        .fold((0, lambdas[0], Complex64::new(0.0, 0.0)), |acc, c| if c.2.norm() > acc.2.norm() { c } else { acc });
    let max_abs = v.norm();
    Ok(Discrimination {
        max_abs,
        argmax: (t, l),
        threshold,
        distinct: max_abs > threshold,
        degenerate: !threshold.is_finite(),
        values,
    })
}

/// Noise floor of the scan: the maximum for `q₂ = q₁` built independently,
/// floored by the rounding bound `n ε Σ w |q₁ a₂ā₁|` of the quadrature.
pub fn noise_floor(domain: &Domain, q1: &Potential, q1_again: &Potential, thetas: &[PhaseFamily], lambdas: &[f64]) -> Result<f64> {
    let measured = discriminate(domain, q1, q1_again, thetas, lambdas, f64::INFINITY)?.max_abs;
    let w = domain.volume_weights();
    let mut rounding: f64 = 0.0;
    for theta in thetas {
        let mut s = 0.0;
        for i in 0..domain.len() {
            let qi = q1.values()[i].norm();
            if qi > 0.0 {
                s += w[i] * qi * amplitude_product(theta, &domain.coords(i))?.norm();
            }
        }
        rounding = rounding.max(domain.len() as f64 * f64::EPSILON * s);
    }
    Ok(measured.max(rounding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_domain;
    use crate::pde::PotentialSpec;

    fn cube(n: usize) -> Domain {
        build_box_domain(3, &[[0.0, 1.0]; 3], n).unwrap()
    }

    fn theta() -> PhaseFamily {
        PhaseFamily::new(vec![-1.0, 0.5, 0.5], vec![0.0, 1.0, 0.0], vec![0.6, 0.0, 0.8]).unwrap()
    }

    fn bump(d: &Domain, height: f64) -> Potential {
        PotentialSpec::BallBump {
            center: vec![0.5; 3],
            radius: 0.3,
            height,
            imag: 0.0,
        }
        .build(d)
        .unwrap()
    }

    #[test]
    fn phase_quotient_converges_at_first_order() {
        let d = cube(9);
        let t = theta();
        let e: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&h| h_phase_pair(&t, &d, 1.5, h).unwrap().max_error)
            .collect();
        let slope = grid::loglog_slope(&[0.2, 0.1, 0.05], &e);
        assert!((slope - 1.0).abs() < 0.15, "{slope}");
        let z = h_phase_pair(&t, &d, 0.0, 0.1).unwrap();
        assert!(z.quotient.iter().all(|v| *v == 0.0));
        let a = h_phase_pair(&t, &d, 1.0, 0.1).unwrap();
        let b = h_phase_pair(&t, &d, 2.0, 0.1).unwrap();
        assert!(a.limit.iter().zip(&b.limit).all(|(x, y)| (2.0 * x - y).abs() < 1e-14));
        // a quarter turn along ν = e₁ lands on the direction of the cube seen from x̃
        let toward = PhaseFamily::new(vec![-1.0, 0.5, 0.5], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(h_phase_pair(&toward, &d, std::f64::consts::FRAC_PI_2 / 0.1, 0.1).is_err());
    }

    #[test]
    fn limit_amplitude_product_closed_form() {
        let t = theta();
        let x = [0.3, 0.7, 0.2];
        let (psi, _) = eval_psi(&t, &x).unwrap();
        let want = Complex64::from_polar(psi.sin().powi(-1), -psi);
        assert!((amplitude_product(&t, &x).unwrap() - want).norm() < 1e-14);
    }

    #[test]
    fn nonlinear_fourier_examples() {
        let d = cube(9);
        let t = theta();
        assert_eq!(nonlinear_fourier(&d, &Potential::zero(&d), &t, 1.0).unwrap(), Complex64::new(0.0, 0.0));
        let q = bump(&d, 3.0);
        // λ = 0: brute-force weighted mass with the amplitude product
        let w = d.volume_weights();
        let mut oracle = Complex64::new(0.0, 0.0);
        for i in 0..d.len() {
            let x = d.coords(i);
            let (psi, _) = eval_psi(&t, &x).unwrap();
            oracle += w[i] * q.values()[i] * Complex64::from_polar(1.0 / psi.sin(), -psi);
        }
        let v = nonlinear_fourier(&d, &q, &t, 0.0).unwrap();
        assert!((v - oracle).norm() < 1e-12 * oracle.norm());
        let l1: f64 = q.values().iter().zip(&w).map(|(a, b)| a.norm() * b).sum();
        let amax = (0..d.len())
            .map(|i| amplitude_product(&t, &d.coords(i)).unwrap().norm())
            .fold(0.0, f64::max);
        for lambda in [-3.0, 0.5, 4.0] {
            assert!(nonlinear_fourier(&d, &q, &t, lambda).unwrap().norm() <= l1 * amax * (1.0 + 1e-12));
        }
        // linearity in q
        let q2 = bump(&d, 5.0);
        let sum = Potential::from_values(q.values().iter().zip(q2.values()).map(|(a, b)| a + b).collect()).unwrap();
        let lhs = nonlinear_fourier(&d, &sum, &t, 1.3).unwrap();
        let rhs = nonlinear_fourier(&d, &q, &t, 1.3).unwrap() + nonlinear_fourier(&d, &q2, &t, 1.3).unwrap();
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm());
    }

    #[test]
    fn greens_formula_closes_with_full_boundary() {
        let d = cube(9);
        let q1 = bump(&d, 2.0);
        let q2 = bump(&d, 5.0);
        let f = identity_fields(&d, &q1, &q2, &theta(), 1.0, 0.3).unwrap();
        let q = q2.difference(&q1).unwrap();
        let nb = d.boundary_nodes().len();
        let g = greens_residual(&d, &q1, &q, &f.u2.field, &f.u, &f.w.field, &vec![true; nb]).unwrap();
        assert!(g.residual < 1e-10 * g.scale, "{g:?}");
        let zero = vec![Complex64::new(0.0, 0.0); d.len()];
        let g0 = greens_residual(&d, &q1, &q, &f.u2.field, &f.u, &zero, &vec![true; nb]).unwrap();
        assert_eq!(g0.scale, 0.0);
        assert!(greens_residual(&d, &q1, &q, &f.u2.field, &f.u2.field, &f.w.field, &vec![true; nb]).is_err());
    }

    #[test]
    fn equal_potentials_give_vanishing_terms() {
        let d = cube(9);
        let q1 = bump(&d, 2.0);
        let cfg = IdentityConfig {
            theta: theta(),
            lambda: 1.0,
            h_list: vec![0.4, 0.2],
            eps0: None,
            c0: 1.0,
        };
        let run = orthogonality_run(&d, &q1, &q1.clone(), &cfg).unwrap();
        for r in &run.records {
            assert_eq!(r.lhs, Complex64::new(0.0, 0.0));
            assert!(r.rhs_plus.norm() < 1e-12 && r.rhs_minus.norm() < 1e-12);
        }
    }

    #[test]
    fn bound_constant_tracks_eps0() {
        let d = cube(9);
        let mut cfg = IdentityConfig {
            theta: theta(),
            lambda: 1.0,
            h_list: vec![0.4],
            eps0: Some(0.1),
            c0: 1.0,
        };
        let q1 = Potential::zero(&d);
        let q2 = bump(&d, 2.0);
        let a = orthogonality_run(&d, &q1, &q2, &cfg).unwrap();
        cfg.eps0 = Some(0.05);
        let b = orthogonality_run(&d, &q1, &q2, &cfg).unwrap();
        assert!((b.records[0].bound_constant / a.records[0].bound_constant - 2.0).abs() < 1e-12);
    }

    #[test]
    fn discrimination_verdicts() {
        let d = cube(9);
        let q1 = Potential::zero(&d);
        let q2 = bump(&d, 2.0);
        let thetas = vec![theta()];
        let floor = noise_floor(&d, &q1, &q1.clone(), &thetas, &[1.0]).unwrap();
        let same = discriminate(&d, &q1, &q1.clone(), &thetas, &[1.0], 10.0 * floor).unwrap();
        assert!(!same.distinct);
        let diff = discriminate(&d, &q1, &q2, &thetas, &[1.0], 10.0 * floor).unwrap();
        assert!(diff.distinct);
        let inf = discriminate(&d, &q1, &q2, &thetas, &[1.0], f64::INFINITY).unwrap();
        assert!(!inf.distinct && inf.degenerate);
        assert!(discriminate(&d, &q1, &q2, &[], &[1.0], 1.0).is_err());
    }
}
