//! Dirichlet problems for `(-Δ + q) u = 0`, Dirichlet-to-Neumann matrices and
//! the conductivity equation `div(γ∇u) = 0`.
//!
//! Both equations share one energy-form discretization: every lattice link
//! carries a conductance and every node a mass, each scaled by trapezoid
//! factors on the boundary planes. Interior rows reduce to the standard
//! `(2n+1)`-point stencil; boundary rows give a second-order flux whose
//! Schur complement is exactly symmetric for real coefficients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, LabError, Result};
use crate::geometry::Domain;
use crate::grid;
use crate::linalg::{spectral_norm, BandLu, BandMatrix, Scalar, SparseRows};
use crate::Complex64;

/// Built-in potential generators.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PotentialSpec {
    Zero,
    Constant {
        value: f64,
        #[serde(default)]
        imag: f64,
    },
    /// `height · exp(1 - 1/(1 - |x-c|²/r²))` inside the ball, 0 outside.
    BallBump {
        center: Vec<f64>,
        radius: f64,
        height: f64,
        #[serde(default)]
        imag: f64,
    },
    Sum {
        terms: Vec<PotentialSpec>,
    },
}

/// Smooth compactly supported bump with value 1 at the center.
pub fn ball_bump(x: &[f64], center: &[f64], radius: f64) -> f64 {
    let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / (radius * radius);
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r2)).exp()
    }
}

impl PotentialSpec {
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        match self {
            PotentialSpec::Zero => Complex64::new(0.0, 0.0),
            PotentialSpec::Constant { value, imag } => Complex64::new(*value, *imag),
            PotentialSpec::BallBump {
                center,
                radius,
                height,
                imag,
            } => Complex64::new(*height, *imag) * ball_bump(x, center, *radius),
            PotentialSpec::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
        }
    }

    pub fn build(&self, domain: &Domain) -> Result<Potential> {
        self.validate(domain.dim())?;
        Potential::from_values(grid::sample(domain, |x| self.eval(x)))
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            PotentialSpec::BallBump { center, radius, .. } => {
                if center.len() != dim || !(*radius > 0.0) {
                    return invalid("ball bump needs a center of matching dimension and radius > 0");
                }
                Ok(())
            }
            PotentialSpec::Sum { terms } => terms.iter().try_for_each(|t| t.validate(dim)),
            _ => Ok(()),
        }
    }
}

/// Lattice values of a bounded potential.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    values: Vec<Complex64>,
    max_norm: f64,
    is_real: bool,
}

impl Potential {
    pub fn from_values(values: Vec<Complex64>) -> Result<Self> {
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return invalid("potential has non-finite values");
        }
        let max_norm = grid::max_abs(&values);
        let is_real = values.iter().all(|v| v.im == 0.0);
        Ok(Self {
            values,
            max_norm,
            is_real,
        })
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::from_values(values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn zero(domain: &Domain) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); domain.len()],
            max_norm: 0.0,
            is_real: true,
        }
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn is_real(&self) -> bool {
        self.is_real
    }

    pub fn real_values(&self) -> Option<Vec<f64>> {
        self.is_real.then(|| self.values.iter().map(|v| v.re).collect())
    }

    pub fn conj(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| v.conj()).collect(),
            ..self.clone()
        }
    }

    /// `self - other`.
    pub fn difference(&self, other: &Potential) -> Result<Self> {
        if self.values.len() != other.values.len() {
            return invalid("potentials live on different lattices");
        }
        Self::from_values(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }

    /// SHA-256 of the little-endian value bytes.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.re.to_le_bytes());
            h.update(v.im.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Energy-form operator `Σ_links c_l (u_i - u_j)² + Σ m_i q_i |u_i|²` on a lattice.
struct EnergyForm<'a, T> {
    domain: &'a Domain,
    /// Conductance of the link `(i, i + e_k)` at `i * dim + k`.
    link: Vec<f64>,
    mass: Vec<T>,
}

impl<'a, T: Scalar> EnergyForm<'a, T> {
    fn schrodinger(domain: &'a Domain, q: Vec<T>) -> Self {
        Self {
            domain,
            link: vec![1.0; domain.len() * domain.dim()],
            mass: q,
        }
    }

    fn conductivity(domain: &'a Domain, gamma: &[f64]) -> Self {
        let n = domain.dim();
        let mut link = vec![0.0; domain.len() * n];
        for i in 0..domain.len() {
            for k in 0..n {
                if let Some(j) = domain.neighbor(i, k, 1) {
                    link[i * n + k] = 2.0 * gamma[i] * gamma[j] / (gamma[i] + gamma[j]);
                }
            }
        }
        Self {
            domain,
            link,
            mass: vec![T::ZERO; domain.len()],
        }
    }

    /// Links at node `i`: `(neighbor, axis, conductance)`.
    fn links(&self, i: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.domain.dim();
        (0..n).flat_map(move |k| {
            let up = self.domain.neighbor(i, k, 1).map(|j| (j, k, self.link[i * n + k]));
            let down = self.domain.neighbor(i, k, -1).map(|j| (j, k, self.link[j * n + k]));
            up.into_iter().chain(down)
        })
    }

    /// Trapezoid factor of node `i` along axis `j`.
    fn half(&self, i: usize, j: usize) -> f64 {
        let a = self.domain.axis_index(i, j);
        if a == 0 || a == self.domain.points_per_axis() - 1 {
            0.5
        } else {
            1.0
        }
    }

    /// Quadrature weight of the link from `i` along `axis`.
    fn link_weight(&self, i: usize, axis: usize) -> f64 {
        let h = self.domain.spacing();
        (0..self.domain.dim())
            .filter(|&j| j != axis)
            .map(|j| self.half(i, j) * h[j])
            .product::<f64>()
            / h[axis]
    }

    fn node_mass(&self, i: usize) -> f64 {
        let h = self.domain.spacing();
        (0..self.domain.dim()).map(|j| self.half(i, j) * h[j]).product()
    }

    /// Energy-form row at node `i` applied to `u`, divided by the node mass
    /// for interior nodes (so interior rows are the point stencil).
    fn apply_row(&self, u: &[T], i: usize) -> T {
        let mut acc = T::ZERO;
        for (j, axis, c) in self.links(i) {
            acc += T::from_real(c * self.link_weight(i, axis)) * (u[i] - u[j]);
        }
        acc += T::from_real(self.node_mass(i)) * self.mass[i] * u[i];
        if self.domain.is_interior(i) {
            acc / T::from_real(self.node_mass(i))
        } else {
            acc
        }
    }

    /// Interior system (point-stencil rows) over interior unknowns.
    fn interior_matrix(&self) -> BandMatrix<T> {
        let interior = self.domain.interior_nodes();
        let mut pos = vec![usize::MAX; self.domain.len()];
        for (p, &i) in interior.iter().enumerate() {
            pos[i] = p;
        }
        let h = self.domain.spacing();
        let mut a = SparseRows::new(interior.len());
        for &i in interior {
            let mut row = Vec::with_capacity(2 * self.domain.dim() + 1);
            let mut diag = self.mass[i];
            for (j, axis, c) in self.links(i) {
                let w = T::from_real(c / (h[axis] * h[axis]));
                diag += w;
                if self.domain.is_interior(j) {
                    row.push((pos[j], -w));
                }
            }
            row.push((pos[i], diag));
            a.push_row(row);
        }
        a.to_band()
    }
}

/// Factorized Dirichlet problem on the interior unknowns.
pub struct DirichletSolver<'a, T> {
    form: EnergyForm<'a, T>,
    lu: BandLu<T>,
    condition: f64,
}

/// Condition-number threshold for declaring the Dirichlet problem singular.
pub const CONDITION_LIMIT: f64 = 1e12;

impl<'a, T: Scalar> DirichletSolver<'a, T> {
    /// Factorizes `-Δ_h + q` with zero Dirichlet data and checks that 0 is
    /// not an eigenvalue within discretization accuracy.
    pub fn new(domain: &'a Domain, q: Vec<T>) -> Result<Self> {
        if q.len() != domain.len() {
            return invalid("potential has the wrong length");
        }
        Self::from_form(EnergyForm::schrodinger(domain, q), true)
    }

    fn from_form(form: EnergyForm<'a, T>, eigen_check: bool) -> Result<Self> {
        let band = form.interior_matrix();
        let lu = match band.clone().factor() {
            Ok(lu) => lu,
            Err(_) => {
                return Err(LabError::ZeroEigenvalue {
                    eigenvalue: 0.0,
                    band: 0.0,
                    condition: f64::INFINITY,
                })
            }
        };
        let condition = lu.condition_estimate();
        let solver = Self {
            form,
            lu,
            condition,
        };
        if eigen_check {
            let (mu, tol) = solver.nearest_eigenvalue(&band);
            if mu.abs() <= tol || condition > CONDITION_LIMIT || !condition.is_finite() {
                return Err(LabError::ZeroEigenvalue {
                    eigenvalue: mu,
                    band: tol,
                    condition,
                });
            }
        } else if condition > CONDITION_LIMIT || !condition.is_finite() {
            return Err(LabError::IllConditioned { condition });
        }
        Ok(solver)
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Eigenvalue of the interior operator closest to 0 (inverse iteration)
    /// and the size of its discretization error, estimated as twice
    /// `(Δ²/12) <D⁴v, v>/<v, v>` with `D⁴` the sum of squared 1D second
    /// differences.
    fn nearest_eigenvalue(&self, band: &BandMatrix<T>) -> (f64, f64) {
        let m = self.lu.dim();
        let mut v: Vec<T> = (0..m)
            .map(|i| T::from_real(1.0 + 0.37 * ((i * 2654435761usize) % 1000) as f64 / 1000.0))
            .collect();
        for _ in 0..40 {
            self.lu.solve_in_place(&mut v);
            let nv = crate::linalg::norm2(&v);
            v.iter_mut().for_each(|x| *x /= T::from_real(nv));
        }
        let av = band.matvec(&v);
        let mu = av
            .iter()
            .zip(&v)
            .fold(T::ZERO, |acc, (a, b)| acc + *a * b.conjugate());
        let mu = if mu.real_part() < 0.0 { -mu.modulus() } else { mu.modulus() };
        let domain = self.form.domain;
        let interior = domain.interior_nodes();
        let mut full = vec![T::ZERO; domain.len()];
        for (p, &i) in interior.iter().enumerate() {
            full[i] = v[p];
        }
        let mut d4 = 0.0;
        for k in 0..domain.dim() {
            let h2 = domain.spacing()[k].powi(2);
            let s = domain.strides()[k];
            let mut second = vec![T::ZERO; domain.len()];
            for &i in interior {
                second[i] = (full[i + s] + full[i - s] - full[i] - full[i]) / T::from_real(h2);
            }
            d4 += interior
                .iter()
                .map(|&i| second[i].modulus().powi(2))
                .sum::<f64>()
                * h2
                / 12.0;
        }
        (mu, 2.0 * d4)
    }

    /// Solves `(-Δ_h + q) u = source` at interior nodes with `u = boundary`
    /// on boundary nodes (given per boundary slot).
    pub fn solve(&self, boundary: &[T], source: Option<&[T]>) -> Vec<T> {
        let domain = self.form.domain;
        let h = domain.spacing();
        let mut u = vec![T::ZERO; domain.len()];
        for (s, b) in domain.boundary_nodes().iter().enumerate() {
            u[b.index] = boundary[s];
        }
        let interior = domain.interior_nodes();
        let mut rhs: Vec<T> = interior
            .iter()
            .map(|&i| source.map_or(T::ZERO, |s| s[i]))
            .collect();
        for (p, &i) in interior.iter().enumerate() {
            for (j, axis, c) in self.form.links(i) {
                if !domain.is_interior(j) && u[j] != T::ZERO {
                    rhs[p] += T::from_real(c / (h[axis] * h[axis])) * u[j];
                }
            }
        }
        self.lu.solve_in_place(&mut rhs);
        for (p, &i) in interior.iter().enumerate() {
            u[i] = rhs[p];
        }
        u
    }

    /// Second-order boundary flux `W⁻¹ S u` of a field solving the equation.
    pub fn flux(&self, u: &[T]) -> Vec<T> {
        self.form
            .domain
            .boundary_nodes()
            .iter()
            .map(|b| self.form.apply_row(u, b.index) / T::from_real(b.weight))
            .collect()
    }

    /// Interior residual `(-Δ_h + q) u - source`.
    pub fn residual(&self, u: &[T], source: Option<&[T]>) -> Vec<T> {
        let domain = self.form.domain;
        let mut r = vec![T::ZERO; domain.len()];
        for &i in domain.interior_nodes() {
            r[i] = self.form.apply_row(u, i) - source.map_or(T::ZERO, |s| s[i]);
        }
        r
    }

    /// Dense DN matrix `W⁻¹ S`, one solve per boundary node.
    fn dn_matrix(&self) -> Vec<T> {
        let nb = self.form.domain.boundary_nodes().len();
        let cols: Vec<Vec<T>> = (0..nb)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![T::ZERO; nb];
                e[j] = T::ONE;
                self.flux(&self.solve(&e, None))
            })
            .collect();
        let mut m = vec![T::ZERO; nb * nb];
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m[i * nb + j] = *v;
            }
        }
        m
    }
}

/// Second-order boundary flux `W⁻¹ S u` of the energy form with potential `q`.
/// For `u` vanishing on the boundary, `Σ_int ΔV (Δ_h u) w = Σ_int ΔV u Δ_h w + Σ_b W_b flux_b w_b`
/// holds exactly.
pub fn boundary_flux<T: Scalar>(domain: &Domain, q: &[T], u: &[T]) -> Vec<T> {
    let form = EnergyForm::schrodinger(domain, q.to_vec());
    domain
        .boundary_nodes()
        .iter()
        .map(|b| form.apply_row(u, b.index) / T::from_real(b.weight))
        .collect()
}

/// `u` on the full lattice for `(-Δ+q)u = 0`, `u|∂Ω = f` (per boundary slot).
pub fn solve_dirichlet(domain: &Domain, q: &Potential, f: &[Complex64]) -> Result<Vec<Complex64>> {
    if f.len() != domain.boundary_nodes().len() {
        return invalid("boundary data has the wrong length");
    }
    if let (Some(qr), true) = (q.real_values(), f.iter().all(|v| v.im == 0.0)) {
        let fr: Vec<f64> = f.iter().map(|v| v.re).collect();
        let u = DirichletSolver::new(domain, qr)?.solve(&fr, None);
        return Ok(u.into_iter().map(|v| Complex64::new(v, 0.0)).collect());
    }
    let s = DirichletSolver::new(domain, q.values().to_vec())?;
    Ok(s.solve(f, None))
}

/// Three-point one-sided derivative along the assigned outward normal.
pub fn normal_derivative<T: Scalar>(domain: &Domain, u: &[T]) -> Vec<T> {
    domain
        .boundary_nodes()
        .iter()
        .map(|b| {
            let h = domain.spacing()[b.axis];
            let s = domain.strides()[b.axis];
            let i = b.index;
            let (u1, u2) = if b.side > 0 {
                (u[i - s], u[i - 2 * s])
            } else {
                (u[i + s], u[i + 2 * s])
            };
            (T::from_real(3.0) * u[i] - T::from_real(4.0) * u1 + u2) / T::from_real(2.0 * h)
        })
        .collect()
}

/// Normal derivative averaged over every face a boundary node lies on,
/// weighted by the trapezoid face weights (the normal implied by the flux
/// rows at edges and corners). Equals [`normal_derivative`] on face interiors.
pub fn face_weighted_normal_derivative<T: Scalar>(domain: &Domain, u: &[T]) -> Vec<T> {
    let n = domain.dim();
    let h = domain.spacing();
    let last = domain.points_per_axis() - 1;
    domain
        .boundary_nodes()
        .iter()
        .map(|b| {
            let i = b.index;
            let m = domain.multi_index(i);
            let mut acc = T::ZERO;
            for k in 0..n {
                let side = if m[k] == 0 {
                    -1
                } else if m[k] == last {
                    1
                } else {
                    continue;
                };
                let face: f64 = (0..n)
                    .filter(|&j| j != k)
                    .map(|j| if m[j] == 0 || m[j] == last { 0.5 * h[j] } else { h[j] })
                    .product();
                let s = domain.strides()[k];
                let (u1, u2) = if side > 0 {
                    (u[i - s], u[i - 2 * s])
                } else {
                    (u[i + s], u[i + 2 * s])
                };
                let d = (T::from_real(3.0) * u[i] - T::from_real(4.0) * u1 + u2) / T::from_real(2.0 * h[k]);
                acc += T::from_real(face / b.weight) * d;
            }
            acc
        })
        .collect()
}

/// Dense Dirichlet-to-Neumann matrix over all boundary nodes.
#[derive(Clone, Debug)]
pub struct DnMap {
    /// Row-major `rows × cols`.
    pub matrix: Vec<Complex64>,
    /// Lattice indices of the rows (measurement nodes).
    pub row_index: Vec<usize>,
    /// Lattice indices of the columns (input nodes).
    pub col_index: Vec<usize>,
    /// Surface weights of the row nodes.
    pub row_weights: Vec<f64>,
    pub potential_hash: String,
}

impl DnMap {
    pub fn rows(&self) -> usize {
        self.row_index.len()
    }

    pub fn cols(&self) -> usize {
        self.col_index.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.matrix[i * self.cols() + j]
    }

    pub fn apply(&self, f: &[Complex64]) -> Vec<Complex64> {
        (0..self.rows())
            .map(|i| (0..self.cols()).map(|j| self.get(i, j) * f[j]).sum())
            .collect()
    }

    /// `W N` for a square map.
    fn weighted(&self) -> Vec<Complex64> {
        let n = self.cols();
        let mut m = self.matrix.clone();
        for i in 0..self.rows() {
            for j in 0..n {
                m[i * n + j] *= self.row_weights[i];
            }
        }
        m
    }

    /// `‖WN - (WN)ᵀ‖_F / ‖WN‖_F`; vanishes for real potentials.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.cols();
        let m = self.weighted();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                num += (m[i * n + j] - m[j * n + i]).norm_sqr();
                den += m[i * n + j].norm_sqr();
            }
        }
        (num / den).sqrt()
    }

    /// `‖W N_q - (W N_{q̄})ᴴ‖_F / ‖W N_q‖_F` against the map of the conjugate potential.
    pub fn adjoint_defect(&self, conj_map: &DnMap) -> f64 {
        let n = self.cols();
        let a = self.weighted();
        let b = conj_map.weighted();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                num += (a[i * n + j] - b[j * n + i].conj()).norm_sqr();
                den += a[i * n + j].norm_sqr();
            }
        }
        (num / den).sqrt()
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(&self.matrix, self.rows(), self.cols(), 1000)
    }
}

pub fn assemble_dn(domain: &Domain, q: &Potential) -> Result<DnMap> {
    let matrix: Vec<Complex64> = match q.real_values() {
        Some(qr) => DirichletSolver::new(domain, qr)?
            .dn_matrix()
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect(),
        None => DirichletSolver::new(domain, q.values().to_vec())?.dn_matrix(),
    };
    Ok(full_map(domain, matrix, q.hash_hex()))
}

fn full_map(domain: &Domain, matrix: Vec<Complex64>, potential_hash: String) -> DnMap {
    let idx: Vec<usize> = domain.boundary_nodes().iter().map(|b| b.index).collect();
    DnMap {
        matrix,
        row_index: idx.clone(),
        col_index: idx,
        row_weights: domain.boundary_nodes().iter().map(|b| b.weight).collect(),
        potential_hash,
    }
}

/// Rows restricted to `front_set` (measurement), columns to `back_set` (inputs).
/// Sets are positions into the map's rows/columns.
pub fn restrict_partial_dn(dn: &DnMap, front_set: &[usize], back_set: &[usize]) -> Result<DnMap> {
    if front_set.is_empty() || back_set.is_empty() {
        return invalid("partial DN restriction needs nonempty sets");
    }
    if front_set.iter().any(|&i| i >= dn.rows()) || back_set.iter().any(|&j| j >= dn.cols()) {
        return invalid("restriction set outside the boundary");
    }
    let mut matrix = Vec::with_capacity(front_set.len() * back_set.len());
    for &i in front_set {
        for &j in back_set {
            matrix.push(dn.get(i, j));
        }
    }
    Ok(DnMap {
        matrix,
        row_index: front_set.iter().map(|&i| dn.row_index[i]).collect(),
        col_index: back_set.iter().map(|&j| dn.col_index[j]).collect(),
        row_weights: front_set.iter().map(|&i| dn.row_weights[i]).collect(),
        potential_hash: dn.potential_hash.clone(),
    })
}

/// Lattice values of a strictly positive conductivity.
#[derive(Clone, Debug, PartialEq)]
pub struct Conductivity {
    values: Vec<f64>,
}

impl Conductivity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return invalid("conductivity must be finite and strictly positive");
        }
        Ok(Self { values })
    }

    pub fn from_fn(domain: &Domain, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        Self::new(grid::sample(domain, f))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn boundary_trace(&self, domain: &Domain) -> Vec<f64> {
        domain.boundary_nodes().iter().map(|b| self.values[b.index]).collect()
    }

    pub fn normal_derivative(&self, domain: &Domain) -> Vec<f64> {
        normal_derivative(domain, &self.values)
    }
}

/// DN map of `div(γ∇u) = 0` with flux `γ ∂_ν u`; harmonic-mean link conductances.
pub fn assemble_conductivity_dn(domain: &Domain, gamma: &Conductivity) -> Result<DnMap> {
    if gamma.values.len() != domain.len() {
        return invalid("conductivity has the wrong length");
    }
    let form = EnergyForm::<f64>::conductivity(domain, &gamma.values);
    let solver = DirichletSolver::from_form(form, false)?;
    let m = solver.dn_matrix().into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut h = Sha256::new();
    for v in &gamma.values {
        h.update(v.to_le_bytes());
    }
    let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(full_map(domain, m, hash))
}

/// Second difference along `axis`: central inside, four-point one-sided
/// (second order) on the end planes.
fn second_difference(domain: &Domain, u: &[f64], i: usize, axis: usize) -> f64 {
    let h2 = domain.spacing()[axis].powi(2);
    let s = domain.strides()[axis] as isize;
    let a = domain.axis_index(i, axis);
    let n = domain.points_per_axis();
    let at = |k: isize| u[(i as isize + k * s) as usize];
    if a == 0 {
        (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h2
    } else if a == n - 1 {
        (2.0 * at(0) - 5.0 * at(-1) + 4.0 * at(-2) - at(-3)) / h2
    } else {
        (at(1) + at(-1) - 2.0 * at(0)) / h2
    }
}

/// `q = Δ√γ / √γ`, with one-sided second differences on boundary planes.
pub fn gamma_to_q(domain: &Domain, gamma: &Conductivity) -> Result<Potential> {
    if gamma.values.len() != domain.len() {
        return invalid("conductivity has the wrong length");
    }
    if domain.points_per_axis() < 4 {
        return invalid("one-sided second differences need at least 4 points per axis");
    }
    let root: Vec<f64> = gamma.values.iter().map(|v| v.sqrt()).collect();
    let q: Vec<f64> = (0..domain.len())
        .map(|i| {
            (0..domain.dim())
                .map(|k| second_difference(domain, &root, i, k))
                .sum::<f64>()
                / root[i]
        })
        .collect();
    Potential::from_real(&q)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DnRelationReport {
    pub points_per_axis: usize,
    /// `‖N_q - R(N_γ)‖₂ / ‖N_q‖₂`.
    pub residual: f64,
    pub norm_q: f64,
    pub norm_difference: f64,
}

/// Compares `N_q` with `γ^{-1/2} N_γ γ^{-1/2} + ½ γ⁻¹ ∂_ν γ`, where `∂_ν`
/// at edges and corners is the face-weighted average.
pub fn dn_relation_check(domain: &Domain, gamma: &Conductivity) -> Result<DnRelationReport> {
    let q = gamma_to_q(domain, gamma)?;
    let nq = assemble_dn(domain, &q)?;
    let ng = assemble_conductivity_dn(domain, gamma)?;
    let g = gamma.boundary_trace(domain);
    let dg = face_weighted_normal_derivative(domain, gamma.values());
    let nb = g.len();
    let mut diff = nq.matrix.clone();
    for i in 0..nb {
        for j in 0..nb {
            let mut r = ng.get(i, j) / (g[i].sqrt() * g[j].sqrt());
            if i == j {
                r += 0.5 * dg[i] / g[i];
            }
            diff[i * nb + j] -= r;
        }
    }
    let norm_q = nq.spectral_norm();
    let norm_difference = spectral_norm(&diff, nb, nb, 1000);
    Ok(DnRelationReport {
        points_per_axis: domain.points_per_axis(),
        residual: norm_difference / norm_q,
        norm_q,
        norm_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_domain;
    use crate::grid::sample;
    use std::f64::consts::PI;

    fn cube(n: usize) -> Domain {
        build_box_domain(3, &[[0.0, 1.0]; 3], n).unwrap()
    }

    fn bump_q(d: &Domain) -> Potential {
        PotentialSpec::BallBump {
            center: vec![0.5; 3],
            radius: 0.35,
            height: 4.0,
            imag: 0.0,
        }
        .build(d)
        .unwrap()
    }

    #[test]
    fn constants_and_linear_functions_are_reproduced() {
        let d = cube(9);
        let q = Potential::zero(&d);
        let ones = vec![Complex64::new(1.0, 0.0); d.boundary_nodes().len()];
        let u = solve_dirichlet(&d, &q, &ones).unwrap();
        assert!(u.iter().all(|v| (v - 1.0).norm() < 1e-12));
        let f: Vec<Complex64> = d
            .boundary_nodes()
            .iter()
            .map(|b| Complex64::new(d.coords(b.index)[0], 0.0))
            .collect();
        let u = solve_dirichlet(&d, &q, &f).unwrap();
        for i in 0..d.len() {
            assert!((u[i].re - d.coords(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_eigenvalue_triggers_failure() {
        let d = cube(9);
        let q = vec![-3.0 * PI * PI; d.len()];
        match DirichletSolver::new(&d, q) {
            Err(LabError::ZeroEigenvalue { eigenvalue, band, .. }) => {
                assert!(eigenvalue.abs() <= band);
            }
            other => panic!("expected eigenvalue failure, got {:?}", other.map(|s| s.condition())),
        }
        // a shift well away from the spectrum passes
        assert!(DirichletSolver::new(&d, vec![-20.0; d.len()]).is_ok());
    }

    #[test]
    fn normal_derivative_examples() {
        let d = cube(9);
        let lin = sample(&d, |x| x[0]);
        let quad = sample(&d, |x| x[0] * x[0]);
        let cst = vec![2.0; d.len()];
        let dl = normal_derivative(&d, &lin);
        let dq = normal_derivative(&d, &quad);
        let dc = normal_derivative(&d, &cst);
        for (s, b) in d.boundary_nodes().iter().enumerate() {
            let x = d.coords(b.index);
            assert!((dl[s] - b.normal[0]).abs() < 1e-12);
            assert!((dq[s] - 2.0 * x[0] * b.normal[0]).abs() < 1e-12);
            assert_eq!(dc[s], 0.0);
        }
    }

    #[test]
    fn dn_annihilates_constants_and_is_symmetric() {
        let d = cube(7);
        let dn = assemble_dn(&d, &Potential::zero(&d)).unwrap();
        let ones = vec![Complex64::new(1.0, 0.0); dn.cols()];
        assert!(grid::max_abs(&dn.apply(&ones)) < 1e-10);
        let dn = assemble_dn(&d, &bump_q(&d)).unwrap();
        assert!(dn.symmetry_defect() < 1e-8, "{}", dn.symmetry_defect());
    }

    #[test]
    fn complex_potential_adjoint_identity() {
        let d = cube(7);
        let q = PotentialSpec::BallBump {
            center: vec![0.4, 0.5, 0.6],
            radius: 0.4,
            height: 3.0,
            imag: 2.0,
        }
        .build(&d)
        .unwrap();
        let a = assemble_dn(&d, &q).unwrap();
        let b = assemble_dn(&d, &q.conj()).unwrap();
        assert!(a.adjoint_defect(&b) < 1e-8);
        assert!(a.symmetry_defect() < 1e-8, "complex symmetric as well");
    }

    #[test]
    fn dn_flux_of_linear_function() {
        // N applied to the trace of x1 gives the outward normal component
        let d = cube(9);
        let dn = assemble_dn(&d, &Potential::zero(&d)).unwrap();
        let f: Vec<Complex64> = d
            .boundary_nodes()
            .iter()
            .map(|b| Complex64::new(d.coords(b.index)[0], 0.0))
            .collect();
        let g = dn.apply(&f);
        for (s, b) in d.boundary_nodes().iter().enumerate() {
            if d.is_face_interior(b) {
                assert!((g[s].re - b.normal[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn discrete_green_formula_is_exact() {
        let d = cube(9);
        let q = bump_q(&d).values().to_vec();
        let mut u: Vec<Complex64> = grid::sample(&d, |x| Complex64::new((3.0 * x[0]).sin() * x[1], x[2] * x[0]));
        for b in d.boundary_nodes() {
            u[b.index] = Complex64::new(0.0, 0.0);
        }
        let w: Vec<Complex64> = grid::sample(&d, |x| Complex64::new(x[1].exp(), x[0] * x[2]));
        let (lu, lw) = (grid::laplacian(&d, &u), grid::laplacian(&d, &w));
        let dv = d.cell_volume();
        let lhs: Complex64 = d.interior_nodes().iter().map(|&i| lu[i] * w[i] * dv).sum();
        let vol: Complex64 = d.interior_nodes().iter().map(|&i| u[i] * lw[i] * dv).sum();
        let flux = boundary_flux(&d, &q, &u);
        let bnd: Complex64 = d.boundary_nodes().iter().enumerate().map(|(s, b)| flux[s] * w[b.index] * b.weight).sum();
        assert!((lhs - vol - bnd).norm() < 1e-12 * lhs.norm().max(1.0));
    }

    #[test]
    fn restriction_shapes() {
        let d = cube(5);
        let dn = assemble_dn(&d, &Potential::zero(&d)).unwrap();
        let all: Vec<usize> = (0..dn.cols()).collect();
        let full = restrict_partial_dn(&dn, &all, &all).unwrap();
        assert_eq!(full.matrix, dn.matrix);
        let one = restrict_partial_dn(&dn, &[3], &[10]).unwrap();
        assert_eq!(one.matrix, vec![dn.get(3, 10)]);
        assert!(restrict_partial_dn(&dn, &[], &all).is_err());
    }

    #[test]
    fn gamma_to_q_examples() {
        let d = cube(9);
        let one = Conductivity::new(vec![1.0; d.len()]).unwrap();
        assert!(gamma_to_q(&d, &one).unwrap().max_norm() == 0.0);
        let exp = Conductivity::from_fn(&d, |x| (2.0 * x[0]).exp()).unwrap();
        let q = gamma_to_q(&d, &exp).unwrap();
        // Δ e^{x} / e^{x} = 1 up to O(Δ²)
        let err = q.values().iter().map(|v| (v.re - 1.0).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "{err}");
        let inner = d.interior_nodes().iter().map(|&i| (q.values()[i].re - 1.0).abs()).fold(0.0, f64::max);
        assert!(inner < 0.002, "{inner}");
        // small bump: q ≈ ½ Δ(bump)
        let eps = 1e-4;
        let g = Conductivity::from_fn(&d, |x| 1.0 + eps * (PI * x[0]).sin() * (PI * x[1]).sin() * (PI * x[2]).sin()).unwrap();
        let q = gamma_to_q(&d, &g).unwrap();
        let i = d.index_of(&[4, 4, 4]);
        let want = 0.5 * eps * (-3.0 * PI * PI);
        assert!((q.values()[i].re - want).abs() < 0.05 * want.abs());
        assert!(Conductivity::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn dn_relation_trivial_for_unit_conductivity() {
        let d = cube(5);
        let r = dn_relation_check(&d, &Conductivity::new(vec![1.0; d.len()]).unwrap()).unwrap();
        assert!(r.residual < 1e-8, "{r:?}");
    }

    #[test]
    fn dn_relation_with_neumann_flat_conductivity() {
        // ∂_ν γ = 0 on every face: the zeroth-order term drops
        let d = cube(9);
        let g = Conductivity::from_fn(&d, |x| {
            2.0 + (0..3).map(|k| (PI * x[k]).cos()).product::<f64>()
        })
        .unwrap();
        let r = dn_relation_check(&d, &g).unwrap();
        assert!(r.residual < 0.05, "{r:?}");
    }

    #[test]
    fn flux_is_second_order() {
        // harmonic u = e^{x} cos(y)
        let err = |n: usize| {
            let d = cube(n);
            let f: Vec<f64> = d
                .boundary_nodes()
                .iter()
                .map(|b| {
                    let x = d.coords(b.index);
                    x[0].exp() * x[1].cos()
                })
                .collect();
            let s = DirichletSolver::new(&d, vec![0.0; d.len()]).unwrap();
            let flux = s.flux(&s.solve(&f, None));
            d.boundary_nodes()
                .iter()
                .enumerate()
                .filter(|(_, b)| d.is_face_interior(b))
                .map(|(k, b)| {
                    let x = d.coords(b.index);
                    let g = [x[0].exp() * x[1].cos(), -x[0].exp() * x[1].sin(), 0.0];
                    let exact: f64 = (0..3).map(|j| g[j] * b.normal[j]).sum();
                    (flux[k] - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(9), err(17));
        assert!(e2 < 5e-3, "{e2}");
        assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
    }
}
