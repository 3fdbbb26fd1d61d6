//! Complex geometrical optics solutions `u = e^{(±φ + iψ)/h}(a + r)`.
//!
//! The amplitude solves the transport equation in closed form; the remainder
//! comes from a banded solve of the conjugated operator on interior nodes.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::Domain;
use crate::grid;
use crate::linalg::{min_norm_solve, SparseRows};
use crate::pde::Potential;
use crate::phases::{direction_from, dot, eval_psi, norm, PhaseFamily};
use crate::Complex64;

/// Condition-number limit for the conjugated system.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Sign in front of `φ` or `ψ` in the exponent.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ExponentSign {
    Plus,
    Minus,
}

impl ExponentSign {
    pub fn value(self) -> f64 {
        match self {
            ExponentSign::Plus => 1.0,
            ExponentSign::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            ExponentSign::Plus => ExponentSign::Minus,
            ExponentSign::Minus => ExponentSign::Plus,
        }
    }
}

/// Real phase pair `(φ, ψ)` solving `|φ'| = |ψ'|`, `φ'·ψ' = 0`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhasePair {
    /// `φ = α·x`, `ψ = β·x`.
    Linear { alpha: Vec<f64>, beta: Vec<f64> },
    /// `φ = log|x - x̃|`, `ψ` the spherical distance to `y`.
    Spherical(PhaseFamily),
}

/// First and second derivatives of `φ` and `ψ` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct PairJet {
    pub phi: f64,
    pub psi: f64,
    pub grad_phi: Vec<f64>,
    pub grad_psi: Vec<f64>,
    pub lap_phi: f64,
    pub lap_psi: f64,
}

impl PhasePair {
    pub fn linear(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.len() < 2 {
            return invalid("alpha and beta need equal dimension >= 2");
        }
        let (na, nb) = (norm(&alpha), norm(&beta));
        if !(na > 0.0) || (na - nb).abs() > 1e-12 * na || dot(&alpha, &beta).abs() > 1e-12 * na * nb {
            return invalid("linear phases need |alpha| = |beta| > 0 and alpha ⟂ beta");
        }
        Ok(PhasePair::Linear { alpha, beta })
    }

    pub fn dim(&self) -> usize {
        match self {
            PhasePair::Linear { alpha, .. } => alpha.len(),
            PhasePair::Spherical(f) => f.dim(),
        }
    }

    pub fn jet(&self, x: &[f64]) -> Result<PairJet> {
        match self {
            PhasePair::Linear { alpha, beta } => Ok(PairJet {
                phi: dot(alpha, x),
                psi: dot(beta, x),
                grad_phi: alpha.clone(),
                grad_psi: beta.clone(),
                lap_phi: 0.0,
                lap_psi: 0.0,
            }),
            PhasePair::Spherical(f) => {
                let (w, rho) = direction_from(&f.center, x)?;
                let (psi, grad_psi) = eval_psi(f, x)?;
                Ok(PairJet {
                    phi: rho.ln(),
                    psi,
                    grad_phi: w.iter().map(|v| v / rho).collect(),
                    grad_psi,
                    lap_phi: (f.dim() as f64 - 2.0) / (rho * rho),
                    lap_psi: f.psi_laplacian(x)?,
                })
            }
        }
    }

    pub fn validate_on(&self, domain: &Domain) -> Result<()> {
        if self.dim() != domain.dim() {
            return invalid("phase dimension does not match the domain");
        }
        match self {
            PhasePair::Linear { .. } => Ok(()),
            PhasePair::Spherical(f) => f.validate_on(domain),
        }
    }
}

/// `Φ = s_φ φ + i s_ψ ψ` with its gradient and Laplacian.
#[derive(Clone, Debug, PartialEq)]
pub struct ExponentJet {
    pub value: Complex64,
    pub gradient: Vec<Complex64>,
    pub laplacian: Complex64,
}

/// A phase pair together with the exponent signs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ComplexPhase {
    pub pair: PhasePair,
    pub phi_sign: ExponentSign,
    #[serde(default = "plus")]
    pub psi_sign: ExponentSign,
}

fn plus() -> ExponentSign {
    ExponentSign::Plus
}

impl ComplexPhase {
    pub fn new(pair: PhasePair, phi_sign: ExponentSign) -> Self {
        Self {
            pair,
            phi_sign,
            psi_sign: ExponentSign::Plus,
        }
    }

    pub fn with_psi_sign(mut self, s: ExponentSign) -> Self {
        self.psi_sign = s;
        self
    }

    pub fn exponent(&self, x: &[f64]) -> Result<ExponentJet> {
        let j = self.pair.jet(x)?;
        let (s, t) = (self.phi_sign.value(), self.psi_sign.value());
        Ok(ExponentJet {
            value: Complex64::new(s * j.phi, t * j.psi),
            gradient: j
                .grad_phi
                .iter()
                .zip(&j.grad_psi)
                .map(|(p, q)| Complex64::new(s * p, t * q))
                .collect(),
            laplacian: Complex64::new(s * j.lap_phi, t * j.lap_psi),
        })
    }

    /// Closed-form transport solution with its gradient:
    /// `a = sin^{-m}ψ · e^{i s_φ s_ψ m ψ}`, `m = (n-2)/2`, or `a ≡ 1` for linear phases.
    pub fn amplitude(&self, x: &[f64]) -> Result<(Complex64, Vec<Complex64>)> {
        match &self.pair {
            PhasePair::Linear { alpha, .. } => {
                Ok((Complex64::new(1.0, 0.0), vec![Complex64::new(0.0, 0.0); alpha.len()]))
            }
            PhasePair::Spherical(f) => {
                let (theta, grad_psi) = eval_psi(f, x)?;
                let m = (f.dim() as f64 - 2.0) / 2.0;
                let sigma = self.phi_sign.value() * self.psi_sign.value();
                let a = Complex64::from_polar(theta.sin().powf(-m), sigma * m * theta);
                let da = a * Complex64::new(-m / theta.tan(), sigma * m);
                Ok((a, grad_psi.iter().map(|g| da * g).collect()))
            }
        }
    }

    /// `La = -(2∇Φ·∇a + ΔΦ a)` from a given gradient of `a`.
    pub fn transport(&self, x: &[f64], a: Complex64, grad_a: &[Complex64]) -> Result<Complex64> {
        let e = self.exponent(x)?;
        let adv: Complex64 = e.gradient.iter().zip(grad_a).map(|(g, d)| g * d).sum();
        Ok(-(2.0 * adv + e.laplacian * a))
    }

    /// Transport residual of the closed-form amplitude with analytic derivatives.
    pub fn transport_residual(&self, x: &[f64]) -> Result<Complex64> {
        let (a, da) = self.amplitude(x)?;
        self.transport(x, a, &da)
    }

    /// Largest `|φ'|` over the lattice.
    pub fn max_grad_phi(&self, domain: &Domain) -> Result<f64> {
        let mut m: f64 = 0.0;
        for i in 0..domain.len() {
            m = m.max(norm(&self.pair.jet(&domain.coords(i))?.grad_phi));
        }
        Ok(m)
    }

    /// Upper end of the semiclassical range, `h₀ = 1/(2 max|φ'|)`.
    pub fn h0(&self, domain: &Domain) -> Result<f64> {
        Ok(0.5 / self.max_grad_phi(domain)?)
    }

    pub fn validate_on(&self, domain: &Domain) -> Result<()> {
        self.pair.validate_on(domain)
    }

    pub(crate) fn exponents(&self, domain: &Domain) -> Result<Vec<ExponentJet>> {
        (0..domain.len())
            .into_par_iter()
            .map(|i| self.exponent(&domain.coords(i)))
            .collect()
    }
}

/// Closed-form amplitude on the lattice.
pub fn amplitude_closed_form(phase: &ComplexPhase, domain: &Domain) -> Result<Vec<Complex64>> {
    phase.validate_on(domain)?;
    (0..domain.len())
        .into_par_iter()
        .map(|i| phase.amplitude(&domain.coords(i)).map(|v| v.0))
        .collect()
}

/// `La` with analytic phase derivatives and second-order differences of `a`
/// (one-sided on the boundary).
pub fn transport_apply(phase: &ComplexPhase, domain: &Domain, a: &[Complex64]) -> Result<Vec<Complex64>> {
    if a.len() != domain.len() {
        return invalid("amplitude has the wrong length");
    }
    (0..domain.len())
        .into_par_iter()
        .map(|i| {
            let da = grid::gradient_at(domain, a, i);
            phase.transport(&domain.coords(i), a[i], &da)
        })
        .collect()
}

/// Conjugated residual `e^{-Φ/h}(-h²Δ + h²q)(e^{Φ/h}a)` on interior nodes.
#[derive(Clone, Debug)]
pub struct WkbResidual {
    pub h: f64,
    /// Zero on boundary nodes.
    pub field: Vec<Complex64>,
    /// Interior L² norm of `field`.
    pub raw_norm: f64,
    /// `raw_norm / h²`.
    pub norm_ratio: f64,
}

/// Expands the conjugated operator analytically in the phase:
/// `-(∇Φ)²a + h La - h²Δ_h a + h² q a`.
pub fn wkb_residual(
    phase: &ComplexPhase,
    domain: &Domain,
    a: &[Complex64],
    h: f64,
    q: &Potential,
) -> Result<WkbResidual> {
    if !(h > 0.0) {
        return invalid("h must be positive");
    }
    if a.len() != domain.len() || q.values().len() != domain.len() {
        return invalid("field lengths do not match the domain");
    }
    let la = transport_apply(phase, domain, a)?;
    let mut field = vec![Complex64::new(0.0, 0.0); domain.len()];
    let qv = q.values();
    let vals: Vec<(usize, Complex64)> = domain
        .interior_nodes()
        .par_iter()
        .map(|&i| {
            let e = phase.exponent(&domain.coords(i))?;
            let g2: Complex64 = e.gradient.iter().map(|g| g * g).sum();
            let lap = grid::laplacian_at(domain, a, i);
            Ok((i, -g2 * a[i] + h * la[i] + h * h * (qv[i] * a[i] - lap)))
        })
        .collect::<Result<_>>()?;
    for (i, v) in vals {
        field[i] = v;
    }
    let raw_norm = grid::interior_norm(domain, &field);
    Ok(WkbResidual {
        h,
        field,
        raw_norm,
        norm_ratio: raw_norm / (h * h),
    })
}

#[derive(Clone, Debug)]
pub struct RemainderSolution {
    pub r: Vec<Complex64>,
    /// Condition estimate of the conjugated rows, `sqrt(cond(MMᴴ))`.
    pub condition: f64,
    pub h0: f64,
    /// `h < 5Δ`: oscillations are at most marginally resolved.
    pub under_resolved: bool,
}

/// Minimum-norm `r` over the whole lattice with
/// `e^{-Φ/h}(-h²Δ + h²q)(e^{Φ/h} r) = rhs` at every interior node (see
/// [`conjugated_rows`]). No boundary condition is imposed: the minimum-norm
/// solution is `Mᴴz` with `MMᴴz = rhs`, the discrete counterpart of solving by
/// duality against compactly supported test functions.
pub fn solve_remainder(
    phase: &ComplexPhase,
    domain: &Domain,
    h: f64,
    rhs: &[Complex64],
    q: &Potential,
) -> Result<RemainderSolution> {
    solve_remainder_pinned(phase, domain, h, rhs, q, &[])
}

/// [`solve_remainder`] with `r = 0` imposed at the lattice nodes `pinned`
/// (their columns are eliminated, so the constraint holds exactly).
pub fn solve_remainder_pinned(
    phase: &ComplexPhase,
    domain: &Domain,
    h: f64,
    rhs: &[Complex64],
    q: &Potential,
    pinned: &[usize],
) -> Result<RemainderSolution> {
    phase.validate_on(domain)?;
    if rhs.len() != domain.len() || q.values().len() != domain.len() {
        return invalid("field lengths do not match the domain");
    }
    let h0 = phase.h0(domain)?;
    if !(h > 0.0) || h > h0 {
        return Err(LabError::OutsideSemiclassical { h, h0 });
    }
    let under_resolved = h < 5.0 * domain.max_spacing();
    if under_resolved {
        warn!(
            "h = {h} is below 5Δ = {}; oscillations are marginally resolved",
            5.0 * domain.max_spacing()
        );
    }
    let mut a = conjugated_rows(phase, domain, h, q)?;
    if !pinned.is_empty() {
        let mut keep = vec![true; domain.len()];
        for &i in pinned {
            keep[i] = false;
        }
        for row in &mut a.rows {
            row.retain(|(c, _)| keep[*c]);
        }
    }
    let b: Vec<Complex64> = domain.interior_nodes().iter().map(|&i| rhs[i]).collect();
    let sol = min_norm_solve(&a, &b)?;
    let condition = sol.condition.sqrt();
    if !(condition <= CONDITION_LIMIT) {
        return Err(LabError::IllConditioned { condition });
    }
    Ok(RemainderSolution {
        r: sol.x,
        condition,
        h0,
        under_resolved,
    })
}

/// Rows of the analytically conjugated operator at interior nodes, columns
/// over the whole lattice:
/// `-(∇Φ)² r - h(2∇Φ·∇_h r + ΔΦ r) - h²Δ_h r + h² q r`.
pub fn conjugated_rows(
    phase: &ComplexPhase,
    domain: &Domain,
    h: f64,
    q: &Potential,
) -> Result<SparseRows<Complex64>> {
    let spacing = domain.spacing();
    let qv = q.values();
    let rows: Vec<Vec<(usize, Complex64)>> = domain
        .interior_nodes()
        .par_iter()
        .map(|&i| {
            let e = phase.exponent(&domain.coords(i))?;
            let g2: Complex64 = e.gradient.iter().map(|g| g * g).sum();
            let mut diag = -g2 - h * e.laplacian + h * h * qv[i];
            let mut row = Vec::with_capacity(2 * domain.dim() + 1);
            for (k, d) in spacing.iter().enumerate() {
                diag += 2.0 * h * h / (d * d);
                for dir in [1i8, -1] {
                    let j = domain.neighbor(i, k, dir).expect("interior node has neighbors");
                    row.push((j, -h * h / (d * d) - f64::from(dir) * h * e.gradient[k] / d));
                }
            }
            row.push((i, diag));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut a = SparseRows::new(domain.len());
    for row in rows {
        a.push_row(row);
    }
    Ok(a)
}

/// Assembled CGO solution; immutable once built.
#[derive(Clone, Debug)]
pub struct CgoSolution {
    pub h: f64,
    pub phase: ComplexPhase,
    pub amplitude: Vec<Complex64>,
    pub remainder: Vec<Complex64>,
    /// `Φ` at every node.
    pub exponent: Vec<Complex64>,
    /// `u = e^{Φ/h}(a + r)`.
    pub field: Vec<Complex64>,
    /// `‖r‖ / (h ‖a‖)`, trapezoid L² norms.
    pub remainder_constant: f64,
    /// `‖e^{-Φ/h}(-Δ_h + q)u‖ / (‖a + r‖ max|∇Φ|²/h²)` on interior nodes.
    pub pde_residual: f64,
    pub condition: f64,
    pub h0: f64,
    pub under_resolved: bool,
}

impl CgoSolution {
    /// `a + r`.
    pub fn envelope(&self) -> Vec<Complex64> {
        self.amplitude.iter().zip(&self.remainder).map(|(a, r)| a + r).collect()
    }
}

/// `e^{-Φ_c/h}(-Δ_h + q)(e^{Φ/h} w)` at interior nodes, with neighbor ratios
/// formed from exponent differences.
pub fn conjugated_discrete_residual(
    domain: &Domain,
    exponent: &[Complex64],
    w: &[Complex64],
    h: f64,
    q: &Potential,
) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); domain.len()];
    let qv = q.values();
    let vals: Vec<(usize, Complex64)> = domain
        .interior_nodes()
        .par_iter()
        .map(|&i| {
            let mut acc = qv[i] * w[i];
            for (k, d) in domain.spacing().iter().enumerate() {
                let s = domain.strides()[k];
                let mut t = 2.0 * w[i];
                for j in [i + s, i - s] {
                    t -= ((exponent[j] - exponent[i]) / h).exp() * w[j];
                }
                acc += t / (d * d);
            }
            (i, acc)
        })
        .collect();
    for (i, v) in vals {
        out[i] = v;
    }
    out
}

pub fn build_cgo(phase: &ComplexPhase, domain: &Domain, h: f64, q: &Potential) -> Result<CgoSolution> {
    let a = amplitude_closed_form(phase, domain)?;
    let wkb = wkb_residual(phase, domain, &a, h, q)?;
    let rhs: Vec<Complex64> = wkb.field.iter().map(|v| -v).collect();
    let sol = solve_remainder(phase, domain, h, &rhs, q)?;
    let jets = phase.exponents(domain)?;
    let exponent: Vec<Complex64> = jets.iter().map(|e| e.value).collect();
    let max_g2 = jets
        .iter()
        .map(|e| e.gradient.iter().map(|g| g.norm_sqr()).sum::<f64>())
        .fold(0.0, f64::max);
    let w: Vec<Complex64> = a.iter().zip(&sol.r).map(|(a, r)| a + r).collect();
    let res = conjugated_discrete_residual(domain, &exponent, &w, h, q);
    let pde_residual = grid::interior_norm(domain, &res) / (grid::interior_norm(domain, &w) * max_g2 / (h * h));
    let field = exponent.iter().zip(&w).map(|(e, w)| (e / h).exp() * w).collect();
    let remainder_constant = grid::l2_norm(domain, &sol.r) / (h * grid::l2_norm(domain, &a));
    Ok(CgoSolution {
        h,
        phase: phase.clone(),
        amplitude: a,
        remainder: sol.r,
        exponent,
        field,
        remainder_constant,
        pde_residual,
        condition: sol.condition,
        h0: sol.h0,
        under_resolved: sol.under_resolved,
    })
}
