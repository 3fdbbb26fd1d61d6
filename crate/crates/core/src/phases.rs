//! Spherical-distance phases for the logarithmic weight and the limit phase
//! family `f(x; θ)`, `θ = (y, x̃, ν)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::Domain;
use crate::weights::CarlemanWeight;

/// Default antipodal guard in radians.
pub const ANTIPODAL_GUARD: f64 = 0.05;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !(n > 1e-12 && n.is_finite()) {
        return invalid("vector must be nonzero");
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Unit direction and distance from `center` to `x`.
pub fn direction_from(center: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let r: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
    let rho = norm(&r);
    if !(rho > 1e-12) {
        return Err(LabError::Domain(format!("point {x:?} coincides with the center")));
    }
    Ok((r.iter().map(|v| v / rho).collect(), rho))
}

/// Orthonormal basis of the tangent space `y^⊥` (Gram–Schmidt on coordinate axes).
pub fn tangent_basis(y: &[f64]) -> Vec<Vec<f64>> {
    let n = y.len();
    let mut basis: Vec<Vec<f64>> = vec![y.to_vec()];
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        for b in &basis {
            let c = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(x, v)| *x -= c * v);
        }
        let en = norm(&e);
        if en > 1e-8 {
            basis.push(e.iter().map(|v| v / en).collect());
        }
        if basis.len() == n {
            break;
        }
    }
    basis.remove(0);
    basis
}

/// `exp_y(t ν)` on the unit sphere.
pub fn geodesic_step(y: &[f64], nu: &[f64], t: f64) -> Vec<f64> {
    let nn = norm(nu);
    if nn == 0.0 || t == 0.0 {
        return y.to_vec();
    }
    let a = t * nn;
    y.iter()
        .zip(nu)
        .map(|(yi, vi)| a.cos() * yi + a.sin() * vi / nn)
        .collect()
}

/// Phase parameters `θ = (y, x̃, ν)` together with the log weight centered at `x̃`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhaseFamily {
    pub center: Vec<f64>,
    pub y: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(default = "default_guard")]
    pub delta: f64,
}

fn default_guard() -> f64 {
    ANTIPODAL_GUARD
}

impl PhaseFamily {
    /// `y` is normalized; `ν` must be tangent at `y` and nonzero.
    pub fn new(center: Vec<f64>, y: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        let n = center.len();
        if y.len() != n || nu.len() != n {
            return invalid("center, y and nu must have equal dimension");
        }
        let y = normalized(&y)?;
        let nn = norm(&nu);
        if !(nn > 1e-12) {
            return invalid("nu must be nonzero");
        }
        if dot(&nu, &y).abs() > 1e-10 * nn {
            return invalid("nu is not tangent to the sphere at y");
        }
        Ok(Self {
            center,
            y,
            nu,
            delta: ANTIPODAL_GUARD,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn weight(&self) -> CarlemanWeight {
        CarlemanWeight::log(self.center.clone())
    }

    /// Same family with `y` replaced.
    pub fn with_y(&self, y: Vec<f64>) -> Self {
        Self { y, ..self.clone() }
    }

    /// Cosine of the spherical distance, distance to the center and direction.
    fn geometry(&self, x: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
        let (w, rho) = direction_from(&self.center, x)?;
        let c = dot(&w, &self.y);
        let lim = self.delta.cos();
        if !(c.abs() <= lim) {
            return Err(LabError::Domain(format!(
                "direction at {x:?} violates the antipodal guard (cos = {c:.6})"
            )));
        }
        Ok((w, rho, c))
    }

    /// Checks the antipodal guard at every lattice node.
    pub fn validate_on(&self, domain: &Domain) -> Result<()> {
        for i in 0..domain.len() {
            self.geometry(&domain.coords(i))?;
        }
        Ok(())
    }

    /// `ψ` and its Laplacian `(n-2) cot ψ / ρ²`.
    pub fn psi_laplacian(&self, x: &[f64]) -> Result<f64> {
        let (_, rho, c) = self.geometry(x)?;
        let s = (1.0 - c * c).sqrt();
        Ok((self.dim() as f64 - 2.0) * (c / s) / (rho * rho))
    }
}

/// `ψ(x) = arccos(ω·y)` and `∇ψ = -(y - (ω·y)ω) / (ρ sin ψ)`.
pub fn eval_psi(family: &PhaseFamily, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (w, rho, c) = family.geometry(x)?;
    let s = (1.0 - c * c).sqrt();
    let grad = family
        .y
        .iter()
        .zip(&w)
        .map(|(yi, wi)| -(yi - c * wi) / (rho * s))
        .collect();
    Ok((c.acos(), grad))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EikonalReport {
    pub nodes: usize,
    /// `max | |ψ'|² - |φ'|² |`.
    pub max_norm_residual: f64,
    /// `max |ψ'·φ'|`.
    pub max_orthogonality_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

pub fn verify_eikonal_pair(family: &PhaseFamily, domain: &Domain, tol: f64) -> Result<EikonalReport> {
    let w = family.weight();
    let mut a: f64 = 0.0;
    let mut b: f64 = 0.0;
    for i in 0..domain.len() {
        let x = domain.coords(i);
        let (_, gp) = eval_psi(family, &x)?;
        let gf = w.gradient(&x);
        a = a.max((dot(&gp, &gp) - dot(&gf, &gf)).abs());
        b = b.max(dot(&gp, &gf).abs());
    }
    Ok(EikonalReport {
        nodes: domain.len(),
        max_norm_residual: a,
        max_orthogonality_residual: b,
        tol,
        pass: a <= tol && b <= tol,
    })
}

/// A function on a patch of the unit sphere with its tangential gradient.
pub trait SpherePatchFunction {
    fn eval(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Spherical distance to `y`, defined on directions at distance in `[δ, π-δ]`.
#[derive(Clone, Debug)]
pub struct SphericalDistance {
    pub y: Vec<f64>,
    pub delta: f64,
}

impl SpherePatchFunction for SphericalDistance {
    fn eval(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let c = dot(w, &self.y);
        if !(c.abs() <= self.delta.cos()) {
            return Err(LabError::Domain(format!("direction {w:?} outside the patch")));
        }
        let s = (1.0 - c * c).sqrt();
        let g = self.y.iter().zip(w).map(|(yi, wi)| -(yi - c * wi) / s).collect();
        Ok((c.acos(), g))
    }
}

#[derive(Clone, Debug)]
pub struct ConstantOnSphere(pub f64);

impl SpherePatchFunction for ConstantOnSphere {
    fn eval(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0, vec![0.0; w.len()]))
    }
}

/// `ψ(x) = g((x - x̃)/|x - x̃|)`, constant along rays from `x̃`.
#[derive(Clone, Debug)]
pub struct HomogeneousExtension<G> {
    pub g: G,
    pub center: Vec<f64>,
}

pub fn extend_homogeneous<G: SpherePatchFunction>(g: G, center: Vec<f64>) -> HomogeneousExtension<G> {
    HomogeneousExtension { g, center }
}

impl<G: SpherePatchFunction> HomogeneousExtension<G> {
    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (w, rho) = direction_from(&self.center, x)?;
        let (v, gt) = self.g.eval(&w)?;
        let radial = dot(&gt, &w);
        let grad = gt
            .iter()
            .zip(&w)
            .map(|(g, wi)| (g - radial * wi) / rho)
            .collect();
        Ok((v, grad))
    }
}

/// `f(x; θ) = -⟨ω, ν⟩ / sqrt(1 - ⟨ω, y⟩²)` and its x-gradient.
pub fn eval_f(x: &[f64], theta: &PhaseFamily) -> Result<(f64, Vec<f64>)> {
    let (w, rho, c) = theta.geometry(x)?;
    let s2 = 1.0 - c * c;
    let s = s2.sqrt();
    let a = dot(&w, &theta.nu);
    let grad = (0..w.len())
        .map(|k| {
            let pnu = theta.nu[k] - a * w[k];
            let py = theta.y[k] - c * w[k];
            -(pnu / s + a * c * py / (s2 * s)) / rho
        })
        .collect();
    Ok((-a / s, grad))
}

/// Whether `f'_x(x; θ)` is bounded away from zero at `x`.
pub fn is_admissible_at(x: &[f64], theta: &PhaseFamily) -> Result<bool> {
    let (_, g) = eval_f(x, theta)?;
    let (_, rho) = direction_from(&theta.center, x)?;
    Ok(norm(&g) * rho > 1e-8 * norm(&theta.nu))
}

/// Local coordinates on θ-space: `y` moves in the tangent basis at the base
/// point, `ν` is re-projected onto the new tangent space, `x̃` moves freely.
/// Parameter vector layout: `[s (n-1), t (n-1), μ (n)]`.
pub fn perturbed_theta(base: &PhaseFamily, p: &[f64]) -> PhaseFamily {
    let n = base.dim();
    let basis = tangent_basis(&base.y);
    let mut y = base.y.clone();
    for (e, s) in basis.iter().zip(&p[..n - 1]) {
        y.iter_mut().zip(e).for_each(|(a, b)| *a += s * b);
    }
    let yn = norm(&y);
    y.iter_mut().for_each(|v| *v /= yn);
    let mut nu = base.nu.clone();
    for (e, t) in basis.iter().zip(&p[n - 1..2 * n - 2]) {
        nu.iter_mut().zip(e).for_each(|(a, b)| *a += t * b);
    }
    let c = dot(&nu, &y);
    nu.iter_mut().zip(&y).for_each(|(a, b)| *a -= c * b);
    let center = base
        .center
        .iter()
        .zip(&p[2 * n - 2..])
        .map(|(a, m)| a + m)
        .collect();
    PhaseFamily {
        center,
        y,
        nu,
        delta: base.delta,
    }
}

pub const THETA_FD_STEP: f64 = 1e-5;

/// `∂θ ∇_x f` as an `n × (3n-2)` matrix by central differences.
pub fn mixed_hessian(x: &[f64], theta: &PhaseFamily) -> Result<DMatrix<f64>> {
    let n = theta.dim();
    let m = 3 * n - 2;
    let mut jac = DMatrix::zeros(n, m);
    for j in 0..m {
        let mut p = vec![0.0; m];
        p[j] = THETA_FD_STEP;
        let (_, gp) = eval_f(x, &perturbed_theta(theta, &p))?;
        p[j] = -THETA_FD_STEP;
        let (_, gm) = eval_f(x, &perturbed_theta(theta, &p))?;
        for i in 0..n {
            jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * THETA_FD_STEP);
        }
    }
    Ok(jac)
}

/// `∂θ f` as a vector in `R^{3n-2}` by central differences.
pub fn theta_gradient(x: &[f64], theta: &PhaseFamily) -> Result<Vec<f64>> {
    let m = 3 * theta.dim() - 2;
    (0..m)
        .map(|j| {
            let mut p = vec![0.0; m];
            p[j] = THETA_FD_STEP;
            let fp = eval_f(x, &perturbed_theta(theta, &p))?.0;
            p[j] = -THETA_FD_STEP;
            let fm = eval_f(x, &perturbed_theta(theta, &p))?.0;
            Ok((fp - fm) / (2.0 * THETA_FD_STEP))
        })
        .collect()
}

/// Relative singular-value threshold for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RankSample {
    pub x: Vec<f64>,
    pub rank_ny: usize,
    pub rank_full: usize,
    pub singular_ny: Vec<f64>,
    pub singular_full: Vec<f64>,
    /// Both ranks are separated from the threshold by a factor ≥ 10³.
    pub gap_ok: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RankReport {
    pub dim: usize,
    pub samples: Vec<RankSample>,
    /// Most frequent rank of the `(y, ν)` block.
    pub rank_ny: usize,
    /// Most frequent rank of the full θ block.
    pub rank_full: usize,
    /// Fraction of samples with rank `n-1`, rank `n` and a clean gap.
    pub fraction_ok: f64,
    /// Smallest singular value counted in a rank, relative to the largest.
    pub min_relative_singular_above: f64,
    pub threshold: f64,
    /// Some sample has a rank below the expected one.
    pub rank_drop: bool,
}

/// `scale` is the natural size `|ν|/ρ²` of the mixed Hessian; singular values
/// are measured against `max(σ_max, scale)` so an identically vanishing block
/// has rank 0 rather than the rank of its roundoff.
fn numerical_rank(sv: &[f64], rank_cap: usize, scale: f64) -> (usize, bool) {
    let smax = sv.iter().cloned().fold(scale, f64::max);
    if smax == 0.0 {
        return (0, true);
    }
    let r = sv.iter().filter(|&&s| s > RANK_THRESHOLD * smax).count().min(rank_cap);
    let mut sorted = sv.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let above_ok = r == 0 || sorted[r - 1] >= 1e3 * RANK_THRESHOLD * smax;
    let below_ok = r >= sorted.len() || sorted[r] <= RANK_THRESHOLD * smax;
    (r, above_ok && below_ok)
}

fn mode(values: &[usize]) -> usize {
    let mut best = (0, 0);
    for &v in values {
        let c = values.iter().filter(|&&w| w == v).count();
        if c > best.1 || (c == best.1 && v < best.0) {
            best = (v, c);
        }
    }
    best.0
}

pub fn check_rank(theta: &PhaseFamily, xs: &[Vec<f64>]) -> Result<RankReport> {
    if xs.is_empty() {
        return invalid("at least one sample point is required");
    }
    let n = theta.dim();
    let mut samples = Vec::with_capacity(xs.len());
    let mut min_rel: f64 = f64::INFINITY;
    for x in xs {
        let jac = mixed_hessian(x, theta)?;
        let ny = jac.columns(0, 2 * n - 2).into_owned();
        let sv_ny: Vec<f64> = ny.singular_values().iter().cloned().collect();
        let sv_full: Vec<f64> = jac.singular_values().iter().cloned().collect();
        let (_, rho) = direction_from(&theta.center, x)?;
        let scale = norm(&theta.nu) / (rho * rho);
        let (rank_ny, gap_ny) = numerical_rank(&sv_ny, n, scale);
        let (rank_full, gap_full) = numerical_rank(&sv_full, n, scale);
        for (sv, r) in [(&sv_ny, rank_ny), (&sv_full, rank_full)] {
            let smax = sv.iter().cloned().fold(scale, f64::max);
            let mut s = sv.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if r > 0 && smax > 0.0 {
                min_rel = min_rel.min(s[r - 1] / smax);
            }
        }
        samples.push(RankSample {
            x: x.clone(),
            rank_ny,
            rank_full,
            singular_ny: sv_ny,
            singular_full: sv_full,
            gap_ok: gap_ny && gap_full,
        });
    }
    let ok = samples
        .iter()
        .filter(|s| s.rank_ny == n - 1 && s.rank_full == n && s.gap_ok)
        .count();
    let rank_drop = samples.iter().any(|s| s.rank_ny < n - 1 || s.rank_full < n);
    let rny: Vec<usize> = samples.iter().map(|s| s.rank_ny).collect();
    let rf: Vec<usize> = samples.iter().map(|s| s.rank_full).collect();
    Ok(RankReport {
        dim: n,
        rank_ny: mode(&rny),
        rank_full: mode(&rf),
        fraction_ok: ok as f64 / samples.len() as f64,
        min_relative_singular_above: min_rel,
        threshold: RANK_THRESHOLD,
        rank_drop,
        samples,
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct InjectivityReport {
    pub pairs: usize,
    /// Pairs with `x₁ = x₂`, excluded from the ratio.
    pub coincident_pairs: usize,
    /// `min |f'_θ(x₁) - f'_θ(x₂)| / |x₁ - x₂|`.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

pub fn injectivity_probe(theta: &PhaseFamily, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<InjectivityReport> {
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    let mut coincident = 0;
    for (a, b) in pairs {
        let d: f64 = norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
        if d == 0.0 {
            coincident += 1;
            continue;
        }
        let ga = theta_gradient(a, theta)?;
        let gb = theta_gradient(b, theta)?;
        let diff = norm(&ga.iter().zip(&gb).map(|(p, q)| p - q).collect::<Vec<_>>());
        min_ratio = min_ratio.min(diff / d);
        max_ratio = max_ratio.max(diff / d);
    }
    Ok(InjectivityReport {
        pairs: pairs.len(),
        coincident_pairs: coincident,
        min_ratio,
        max_ratio,
    })
}

/// θ-grid descriptor: `y` on a ring of geodesic radius `radius` around `y0`,
/// `ν` rotated within `±nu_spread` of `nu0` in the tangent plane, and centers
/// `x̃ = center + offset`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ThetaGridSpec {
    pub y0: Vec<f64>,
    pub radius: f64,
    pub n_y: usize,
    pub nu0: Vec<f64>,
    pub nu_count: usize,
    #[serde(default = "default_spread")]
    pub nu_spread: f64,
    pub center: Vec<f64>,
    pub xtilde_offsets: Vec<Vec<f64>>,
}

fn default_spread() -> f64 {
    0.2
}

impl ThetaGridSpec {
    pub fn families(&self) -> Result<Vec<PhaseFamily>> {
        if self.n_y == 0 || self.nu_count == 0 || self.xtilde_offsets.is_empty() {
            return invalid("theta grid must be nonempty");
        }
        if self.radius > 0.3 + 1e-12 {
            return invalid("y must stay within geodesic radius 0.3 of y0");
        }
        let y0 = normalized(&self.y0)?;
        let basis = tangent_basis(&y0);
        let mut ys = vec![y0.clone()];
        for k in 0..self.n_y - 1 {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / (self.n_y - 1) as f64;
            let dir: Vec<f64> = (0..y0.len())
                .map(|i| ang.cos() * basis[0][i] + ang.sin() * basis.get(1).map_or(0.0, |b| b[i]))
                .collect();
            ys.push(geodesic_step(&y0, &dir, self.radius));
        }
        let mut out = Vec::new();
        for y in &ys {
            let c = dot(&self.nu0, y);
            let base: Vec<f64> = self.nu0.iter().zip(y).map(|(a, b)| a - c * b).collect();
            let base = normalized(&base)?;
            // second tangent direction at y orthogonal to base
            let mut other = vec![0.0; y.len()];
            for e in tangent_basis(y) {
                let v: Vec<f64> = {
                    let c = dot(&e, &base);
                    e.iter().zip(&base).map(|(a, b)| a - c * b).collect()
                };
                if norm(&v) > 1e-6 {
                    other = normalized(&v)?;
                    break;
                }
            }
            for j in 0..self.nu_count {
                let ang = if self.nu_count == 1 {
                    0.0
                } else {
                    -self.nu_spread + 2.0 * self.nu_spread * j as f64 / (self.nu_count - 1) as f64
                };
                let nu: Vec<f64> = base
                    .iter()
                    .zip(&other)
                    .map(|(a, b)| ang.cos() * a + ang.sin() * b)
                    .collect();
                for off in &self.xtilde_offsets {
                    let center: Vec<f64> = self.center.iter().zip(off).map(|(a, b)| a + b).collect();
                    out.push(PhaseFamily::new(center, y.clone(), nu.clone())?);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_domain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cube_family() -> PhaseFamily {
        PhaseFamily::new(vec![-1.0, 0.5, 0.5], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]).unwrap()
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn psi_examples() {
        let fam = PhaseFamily::new(vec![0.0; 3], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]).unwrap();
        let (v, g) = eval_psi(&fam, &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - PI / 2.0).abs() < 1e-15);
        assert!((norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(g, vec![-0.0, -0.0, -1.0]);
        let fd = fd_grad(|x| eval_psi(&fam, x).unwrap().0, &[1.0, 0.0, 0.0], 1e-6);
        assert!((norm(&fd) - 1.0).abs() < 1e-8);
        assert_eq!(eval_psi(&fam, &[3.0, 0.0, 0.0]).unwrap().0, v);
        assert!(eval_psi(&fam, &[0.0, 0.0, 0.0]).is_err());
        assert!(eval_psi(&fam, &[0.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn psi_laplacian_matches_second_differences() {
        let fam = cube_family();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let h = 1e-4;
            let c = eval_psi(&fam, &x).unwrap().0;
            let mut lap = 0.0;
            for k in 0..3 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[k] += h;
                m[k] -= h;
                lap += (eval_psi(&fam, &p).unwrap().0 + eval_psi(&fam, &m).unwrap().0 - 2.0 * c) / (h * h);
            }
            assert!((lap - fam.psi_laplacian(&x).unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn eikonal_pair_on_cube() {
        let d = build_box_domain(3, &[[0.0, 1.0]; 3], 17).unwrap();
        let fam = cube_family();
        let r = verify_eikonal_pair(&fam, &d, 1e-10).unwrap();
        assert!(r.pass, "{r:?}");
        // single point orthogonality
        let fam0 = PhaseFamily::new(vec![0.0; 3], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]).unwrap();
        let (_, g) = eval_psi(&fam0, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dot(&g, &[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn wrong_psi_is_caught() {
        // ψ' with its first and last components swapped
        let d = build_box_domain(3, &[[0.0, 1.0]; 3], 9).unwrap();
        let fam = cube_family();
        let w = fam.weight();
        let mut worst: f64 = 0.0;
        for i in 0..d.len() {
            let x = d.coords(i);
            let (_, mut gp) = eval_psi(&fam, &x).unwrap();
            gp.swap(0, 2);
            let gf = w.gradient(&x);
            worst = worst.max(dot(&gp, &gf).abs());
        }
        assert!(worst > 1e-2);
    }

    #[test]
    fn homogeneous_extension() {
        let fam = cube_family();
        let ext = extend_homogeneous(
            SphericalDistance { y: fam.y.clone(), delta: ANTIPODAL_GUARD },
            fam.center.clone(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (v, g) = ext.eval(&x).unwrap();
            let (v2, g2) = eval_psi(&fam, &x).unwrap();
            assert!((v - v2).abs() < 1e-14);
            assert!(g.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-13));
            let (w, _) = direction_from(&fam.center, &x).unwrap();
            assert!(dot(&g, &w).abs() < 1e-10);
        }
        let c = extend_homogeneous(ConstantOnSphere(2.5), vec![0.0; 3]);
        assert_eq!(c.eval(&[1.0, 2.0, 3.0]).unwrap(), (2.5, vec![0.0; 3]));
        assert!(ext.eval(&[-1.0, 0.5, 3.0]).is_err());
    }

    #[test]
    fn f_examples_and_gradient() {
        let fam = PhaseFamily::new(vec![0.0; 3], vec![0.0, 0.0, 1.0], vec![0.6, 0.8, 0.0]).unwrap();
        let x = [0.0, 2.0, 0.0];
        let (v, _) = eval_f(&x, &fam).unwrap();
        assert!((v + 0.8).abs() < 1e-15);
        let fam2 = PhaseFamily { nu: vec![1.2, 1.6, 0.0], ..fam.clone() };
        assert!((eval_f(&x, &fam2).unwrap().0 - 2.0 * v).abs() < 1e-15);
        let cube = cube_family();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (_, g) = eval_f(&x, &cube).unwrap();
            let fd = fd_grad(|p| eval_f(p, &cube).unwrap().0, &x, 1e-5);
            assert!(g.iter().zip(&fd).all(|(a, b)| (a - b).abs() < 1e-8));
            assert!(is_admissible_at(&x, &cube).unwrap());
        }
    }

    #[test]
    fn arrival_direction_is_inadmissible() {
        let cube = cube_family();
        let x = [0.4, 0.7, 0.2];
        let (w, _) = direction_from(&cube.center, &x).unwrap();
        let c = dot(&w, &cube.y);
        let nu: Vec<f64> = w.iter().zip(&cube.y).map(|(a, b)| a - c * b).collect();
        let bad = PhaseFamily::new(cube.center.clone(), cube.y.clone(), nu).unwrap();
        let (_, g) = eval_f(&x, &bad).unwrap();
        assert!(norm(&g) < 1e-12);
        let fd = fd_grad(|p| eval_f(p, &bad).unwrap().0, &x, 1e-5);
        assert!(norm(&fd) < 1e-8);
        assert!(!is_admissible_at(&x, &bad).unwrap());
    }

    #[test]
    fn ranks_in_three_and_two_dimensions() {
        let cube = cube_family();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let r = check_rank(&cube, &xs).unwrap();
        assert_eq!((r.rank_ny, r.rank_full), (2, 3));
        assert!(r.fraction_ok >= 0.95, "{}", r.fraction_ok);
        // In the plane every tangent ν points along the geodesic, so f is
        // constant in x and the whole mixed Hessian vanishes.
        let fam2 = PhaseFamily::new(vec![-1.0, 0.5], vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let xs2: Vec<Vec<f64>> = (0..10).map(|_| (0..2).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let r2 = check_rank(&fam2, &xs2).unwrap();
        assert_eq!((r2.rank_ny, r2.rank_full), (0, 0));
        assert!(r2.rank_drop);
    }

    #[test]
    fn degenerate_direction_drops_rank() {
        let cube = cube_family();
        let x = vec![0.4, 0.7, 0.2];
        let (w, _) = direction_from(&cube.center, &x).unwrap();
        let c = dot(&w, &cube.y);
        let nu: Vec<f64> = w.iter().zip(&cube.y).map(|(a, b)| a - c * b).collect();
        let bad = PhaseFamily::new(cube.center.clone(), cube.y.clone(), nu).unwrap();
        let r = check_rank(&bad, &[x]).unwrap();
        assert!(r.rank_drop, "{:?}", r.samples[0]);
    }

    #[test]
    fn injectivity() {
        let cube = cube_family();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
            .map(|_| {
                let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let b: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                (a, b)
            })
            .collect();
        let r = injectivity_probe(&cube, &pairs).unwrap();
        assert!(r.min_ratio > 0.0 && r.min_ratio.is_finite());
        let same = vec![(vec![0.3, 0.3, 0.3], vec![0.3, 0.3, 0.3])];
        let r = injectivity_probe(&cube, &same).unwrap();
        assert_eq!(r.coincident_pairs, 1);
        // two points on one ray through x̃
        let a = vec![0.2, 0.4, 0.6];
        let b: Vec<f64> = a.iter().zip(&cube.center).map(|(p, c)| c + 1.5 * (p - c)).collect();
        let r = injectivity_probe(&cube, &[(a, b)]).unwrap();
        assert!(r.min_ratio > 1e-3);
    }

    #[test]
    fn theta_grid_has_expected_size() {
        let spec = ThetaGridSpec {
            y0: vec![0.0, 0.0, 1.0],
            radius: 0.2,
            n_y: 3,
            nu0: vec![0.0, 1.0, 0.0],
            nu_count: 3,
            nu_spread: 0.2,
            center: vec![-1.0, 0.5, 0.5],
            xtilde_offsets: vec![vec![0.0; 3], vec![0.0, 0.1, 0.0], vec![0.0, 0.0, -0.1]],
        };
        let fams = spec.families().unwrap();
        assert_eq!(fams.len(), 27);
        let d = build_box_domain(3, &[[0.0, 1.0]; 3], 9).unwrap();
        for f in &fams {
            f.validate_on(&d).unwrap();
            assert!(dot(&f.y, &f.nu).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn psi_homogeneous_and_f_linear(
            x in prop::array::uniform3(0.0f64..1.0),
            lam in -3.0f64..3.0,
        ) {
            let fam = cube_family();
            let v = eval_psi(&fam, &x).unwrap().0;
            for s in [0.5, 2.0, 10.0] {
                let xs: Vec<f64> = x.iter().zip(&fam.center).map(|(a, c)| c + s * (a - c)).collect();
                prop_assert!((eval_psi(&fam, &xs).unwrap().0 - v).abs() < 1e-12);
            }
            let scaled = PhaseFamily { nu: fam.nu.iter().map(|v| lam * v).collect(), ..fam.clone() };
            let f1 = eval_f(&x, &fam).unwrap().0;
            prop_assert!((eval_f(&x, &scaled).unwrap().0 - lam * f1).abs() < 1e-14 * (1.0 + lam.abs()));
        }
    }
}
