//! Carleman weights, conjugated symbols, the bracket test and convexification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::Domain;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    /// `φ = α·x` with `|α| = 1`.
    Linear { direction: Vec<f64> },
    /// `φ = ln|x - x0|`.
    Log { center: Vec<f64> },
    /// `φ = |x|²`, not limiting; used as a negative control.
    Quadratic { dim: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CarlemanWeight {
    #[serde(flatten)]
    pub kind: WeightKind,
    /// `±1`; the weight is `sign · base`.
    #[serde(default = "unit")]
    pub sign: f64,
    /// Convexification parameter: the weight becomes `φ + eps φ²/2`.
    #[serde(default)]
    pub convex_eps: f64,
}

fn unit() -> f64 {
    1.0
}

/// Value, gradient and row-major Hessian at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightJet {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(h: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += u[i] * h[i * n + j] * v[j];
        }
    }
    s
}

impl CarlemanWeight {
    pub fn linear(direction: Vec<f64>) -> Result<Self> {
        let norm = dot(&direction, &direction).sqrt();
        if !(norm > 1e-12 && norm.is_finite()) {
            return invalid("linear weight direction must be nonzero");
        }
        Ok(Self {
            kind: WeightKind::Linear {
                direction: direction.iter().map(|v| v / norm).collect(),
            },
            sign: 1.0,
            convex_eps: 0.0,
        })
    }

    pub fn log(center: Vec<f64>) -> Self {
        Self {
            kind: WeightKind::Log { center },
            sign: 1.0,
            convex_eps: 0.0,
        }
    }

    pub fn quadratic(dim: usize) -> Self {
        Self {
            kind: WeightKind::Quadratic { dim },
            sign: 1.0,
            convex_eps: 0.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            WeightKind::Linear { .. } => "linear",
            WeightKind::Log { .. } => "log",
            WeightKind::Quadratic { .. } => "quadratic",
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            WeightKind::Linear { direction } => direction.len(),
            WeightKind::Log { center } => center.len(),
            WeightKind::Quadratic { dim } => *dim,
        }
    }

    /// Whether the unconvexified weight satisfies the limiting condition.
    pub fn is_limiting(&self) -> bool {
        self.convex_eps == 0.0 && !matches!(self.kind, WeightKind::Quadratic { .. })
    }

    /// `-φ`. Only defined before convexification.
    pub fn negated(&self) -> Result<Self> {
        if self.convex_eps != 0.0 {
            return invalid("cannot negate a convexified weight");
        }
        Ok(Self {
            sign: -self.sign,
            ..self.clone()
        })
    }

    fn base_jet(&self, x: &[f64]) -> WeightJet {
        let n = x.len();
        match &self.kind {
            WeightKind::Linear { direction } => WeightJet {
                value: dot(direction, x),
                gradient: direction.clone(),
                hessian: vec![0.0; n * n],
            },
            WeightKind::Log { center } => {
                let r: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let r2 = dot(&r, &r);
                let mut hessian = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        hessian[i * n + j] = (delta - 2.0 * r[i] * r[j] / r2) / r2;
                    }
                }
                WeightJet {
                    value: 0.5 * r2.ln(),
                    gradient: r.iter().map(|v| v / r2).collect(),
                    hessian,
                }
            }
            WeightKind::Quadratic { .. } => {
                let mut hessian = vec![0.0; n * n];
                for i in 0..n {
                    hessian[i * n + i] = 2.0;
                }
                WeightJet {
                    value: dot(x, x),
                    gradient: x.iter().map(|v| 2.0 * v).collect(),
                    hessian,
                }
            }
        }
    }

    pub fn jet(&self, x: &[f64]) -> WeightJet {
        let mut j = self.base_jet(x);
        if self.sign != 1.0 {
            j.value *= self.sign;
            j.gradient.iter_mut().for_each(|v| *v *= self.sign);
            j.hessian.iter_mut().for_each(|v| *v *= self.sign);
        }
        let eps = self.convex_eps;
        if eps != 0.0 {
            let n = x.len();
            let fp = 1.0 + eps * j.value;
            let mut hessian = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    hessian[a * n + b] = fp * j.hessian[a * n + b] + eps * j.gradient[a] * j.gradient[b];
                }
            }
            j = WeightJet {
                value: j.value + 0.5 * eps * j.value * j.value,
                gradient: j.gradient.iter().map(|v| fp * v).collect(),
                hessian,
            };
        }
        j
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.jet(x).gradient
    }

    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        self.jet(x).hessian
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let h = self.hessian(x);
        (0..n).map(|i| h[i * n + i]).sum()
    }

    /// Checks `|φ'| > 0` and finiteness at every lattice node.
    pub fn validate_on(&self, domain: &Domain) -> Result<()> {
        if self.dim() != domain.dim() {
            return invalid("weight and domain dimensions differ");
        }
        for i in 0..domain.len() {
            let j = self.jet(&domain.coords(i));
            let g = dot(&j.gradient, &j.gradient).sqrt();
            if !(j.value.is_finite() && g.is_finite() && g > 1e-12) {
                return Err(LabError::Domain(format!(
                    "{} weight degenerate at node {i}",
                    self.kind_name()
                )));
            }
        }
        Ok(())
    }
}

/// The principal symbols `a = ξ² - φ'²`, `b = 2φ'·ξ` of the conjugated operator.
#[derive(Clone, Copy, Debug)]
pub struct ConjugatedSymbols<'a> {
    pub weight: &'a CarlemanWeight,
}

impl ConjugatedSymbols<'_> {
    pub fn a(&self, x: &[f64], xi: &[f64]) -> f64 {
        let g = self.weight.gradient(x);
        dot(xi, xi) - dot(&g, &g)
    }

    pub fn b(&self, x: &[f64], xi: &[f64]) -> f64 {
        2.0 * dot(&self.weight.gradient(x), xi)
    }
}

/// `{a, b} = 4(ξᵀφ''ξ + φ'ᵀφ''φ')`.
pub fn poisson_bracket(weight: &CarlemanWeight, x: &[f64], xi: &[f64]) -> f64 {
    let j = weight.jet(x);
    4.0 * (quad_form(&j.hessian, xi, xi) + quad_form(&j.hessian, &j.gradient, &j.gradient))
}

/// A covector with `|ξ| = |φ'|` and `ξ ⊥ φ'`, i.e. a point of `{a = b = 0}`.
///
/// The orthogonal complement of `φ'` is spanned by Gram–Schmidt on the
/// coordinate basis; `mix` picks the direction inside it.
pub fn characteristic_covector(gradient: &[f64], mix: &[f64]) -> Result<Vec<f64>> {
    let n = gradient.len();
    let gn = dot(gradient, gradient).sqrt();
    if !(gn > 1e-12 && gn.is_finite()) {
        return Err(LabError::Domain(
            "cannot build a characteristic covector for a vanishing gradient".into(),
        ));
    }
    let mut basis: Vec<Vec<f64>> = vec![gradient.iter().map(|v| v / gn).collect()];
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        for b in &basis {
            let c = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let en = dot(&e, &e).sqrt();
        if en > 1e-8 {
            basis.push(e.iter().map(|v| v / en).collect());
        }
        if basis.len() == n {
            break;
        }
    }
    let mut xi = vec![0.0; n];
    for (b, m) in basis[1..].iter().zip(mix) {
        xi.iter_mut().zip(b).for_each(|(x, y)| *x += m * y);
    }
    let xn = dot(&xi, &xi).sqrt();
    if xn < 1e-12 {
        xi = basis[1].clone();
    } else {
        xi.iter_mut().for_each(|v| *v /= xn);
    }
    xi.iter_mut().for_each(|v| *v *= gn);
    Ok(xi)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LimitingReport {
    pub weight_kind: String,
    pub samples: usize,
    pub max_bracket: f64,
    /// Largest `|{a,b}| / (1 + |ξ|⁴)`.
    pub max_scaled_bracket: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Samples interior points and characteristic covectors and reports the
/// largest bracket.
pub fn check_limiting(
    weight: &CarlemanWeight,
    domain: &Domain,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<LimitingReport> {
    if samples == 0 {
        return invalid("at least one sample is required");
    }
    if weight.dim() != domain.dim() {
        return invalid("weight and domain dimensions differ");
    }
    let n = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_bracket: f64 = 0.0;
    let mut max_scaled: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..n)
            .map(|k| {
                let (a, b) = (domain.lower()[k], domain.upper()[k]);
                a + (b - a) * rng.gen_range(0.01..0.99)
            })
            .collect();
        let mix: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xi = characteristic_covector(&weight.gradient(&x), &mix)?;
        let br = poisson_bracket(weight, &x, &xi).abs();
        let xi4 = dot(&xi, &xi).powi(2);
        max_bracket = max_bracket.max(br);
        max_scaled = max_scaled.max(br / (1.0 + xi4));
    }
    Ok(LimitingReport {
        weight_kind: weight.kind_name().into(),
        samples,
        max_bracket,
        max_scaled_bracket: max_scaled,
        tol,
        pass: max_bracket <= tol,
    })
}

/// `φ_ε = φ + εφ²/2`.
pub fn convexify(weight: &CarlemanWeight, eps: f64, domain: &Domain) -> Result<CarlemanWeight> {
    if !(0.0..=0.5).contains(&eps) {
        return invalid(format!("convexification parameter {eps} outside [0, 0.5]"));
    }
    if weight.convex_eps != 0.0 {
        return invalid("weight is already convexified");
    }
    let mut positive = 0usize;
    let mut negative = 0usize;
    for i in 0..domain.len() {
        let f1 = 1.0 + eps * weight.value(&domain.coords(i));
        if f1 > 0.0 {
            positive += 1;
        } else {
            negative += 1;
        }
    }
    if positive > 0 && negative > 0 || negative == domain.len() {
        return invalid("1 + eps·φ is not positive on the domain");
    }
    Ok(CarlemanWeight {
        convex_eps: eps,
        ..weight.clone()
    })
}
