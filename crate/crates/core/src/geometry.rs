//! Box lattices, boundary normals, surface quadrature and boundary partitions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::weights::CarlemanWeight;

/// JSON descriptor of a box domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub dim: usize,
    pub bounds: Vec<[f64; 2]>,
    pub points_per_axis: usize,
}

impl DomainSpec {
    pub fn unit_cube(dim: usize, points_per_axis: usize) -> Self {
        Self {
            dim,
            bounds: vec![[0.0, 1.0]; dim],
            points_per_axis,
        }
    }

    pub fn build(&self) -> Result<Domain> {
        build_box_domain(self.dim, &self.bounds, self.points_per_axis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryNode {
    /// Lattice index of the node.
    pub index: usize,
    /// Axis of the face the node is assigned to.
    pub axis: usize,
    /// `-1` on the lower face of `axis`, `+1` on the upper one.
    pub side: i8,
    pub normal: Vec<f64>,
    /// Trapezoid surface weight summed over every face the node touches.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Domain {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    points_per_axis: usize,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
    interior_mask: Vec<bool>,
    boundary: Vec<BoundaryNode>,
    boundary_slot: Vec<Option<usize>>,
    interior: Vec<usize>,
}

pub fn build_box_domain(dim: usize, bounds: &[[f64; 2]], points_per_axis: usize) -> Result<Domain> {
    if dim < 2 {
        return invalid(format!("dimension {dim} < 2"));
    }
    if bounds.len() != dim {
        return invalid(format!("{} bounds given for dimension {dim}", bounds.len()));
    }
    if points_per_axis < 3 {
        return invalid(format!(
            "{points_per_axis} points per axis leaves no interior node"
        ));
    }
    for (k, b) in bounds.iter().enumerate() {
        if !(b[0].is_finite() && b[1].is_finite() && b[1] > b[0]) {
            return invalid(format!("degenerate bounds {:?} on axis {k}", b));
        }
    }
    let n = points_per_axis;
    let len = n.checked_pow(dim as u32).filter(|&l| l <= 50_000_000);
    let Some(len) = len else {
        return invalid("lattice too large");
    };
    let lower: Vec<f64> = bounds.iter().map(|b| b[0]).collect();
    let upper: Vec<f64> = bounds.iter().map(|b| b[1]).collect();
    let spacing: Vec<f64> = bounds.iter().map(|b| (b[1] - b[0]) / (n - 1) as f64).collect();
    let mut strides = vec![1usize; dim];
    for k in (0..dim - 1).rev() {
        strides[k] = strides[k + 1] * n;
    }
    let mut dom = Domain {
        dim,
        lower,
        upper,
        points_per_axis: n,
        spacing,
        strides,
        len,
        interior_mask: vec![false; len],
        boundary: Vec::new(),
        boundary_slot: vec![None; len],
        interior: Vec::new(),
    };
    for idx in 0..len {
        let m = dom.multi_index(idx);
        let on_face: Vec<(usize, i8)> = m
            .iter()
            .enumerate()
            .filter_map(|(k, &i)| {
                if i == 0 {
                    Some((k, -1))
                } else if i == n - 1 {
                    Some((k, 1))
                } else {
                    None
                }
            })
            .collect();
        if on_face.is_empty() {
            dom.interior_mask[idx] = true;
            dom.interior.push(idx);
            continue;
        }
        let (axis, side) = on_face[0];
        let mut normal = vec![0.0; dim];
        normal[axis] = side as f64;
        let weight: f64 = on_face
            .iter()
            .map(|&(k, _)| {
                (0..dim)
                    .filter(|&j| j != k)
                    .map(|j| {
                        let t = if m[j] == 0 || m[j] == n - 1 { 0.5 } else { 1.0 };
                        t * dom.spacing[j]
                    })
                    .product::<f64>()
            })
            .sum();
        dom.boundary_slot[idx] = Some(dom.boundary.len());
        dom.boundary.push(BoundaryNode {
            index: idx,
            axis,
            side,
            normal,
            weight,
        });
    }
    Ok(dom)
}

impl Domain {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Largest lattice spacing.
    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            dim: self.dim,
            bounds: self.lower.iter().zip(&self.upper).map(|(&a, &b)| [a, b]).collect(),
            points_per_axis: self.points_per_axis,
        }
    }

    /// Total number of lattice nodes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior_mask
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.interior_mask[idx]
    }

    /// Interior node indices in increasing lattice order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_nodes(&self) -> &[BoundaryNode] {
        &self.boundary
    }

    /// Position of a lattice node in [`Domain::boundary_nodes`].
    pub fn boundary_slot(&self, idx: usize) -> Option<usize> {
        self.boundary_slot[idx]
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim];
        for k in 0..self.dim {
            m[k] = idx / self.strides[k];
            idx %= self.strides[k];
        }
        m
    }

    pub fn index_of(&self, m: &[usize]) -> usize {
        m.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        (0..self.dim)
            .map(|k| {
                let i = rem / self.strides[k];
                rem %= self.strides[k];
                self.lower[k] + i as f64 * self.spacing[k]
            })
            .collect()
    }

    /// Coordinate of lattice index `i` along `axis`.
    pub fn axis_coord(&self, idx: usize, axis: usize) -> f64 {
        let i = (idx / self.strides[axis]) % self.points_per_axis;
        self.lower[axis] + i as f64 * self.spacing[axis]
    }

    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.points_per_axis
    }

    /// Neighbor of `idx` one step along `axis` in direction `dir` (±1), if it exists.
    pub fn neighbor(&self, idx: usize, axis: usize, dir: i8) -> Option<usize> {
        let i = self.axis_index(idx, axis);
        match dir {
            1 if i + 1 < self.points_per_axis => Some(idx + self.strides[axis]),
            -1 if i > 0 => Some(idx - self.strides[axis]),
            _ => None,
        }
    }

    /// Volume element of the lattice (product of spacings).
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Trapezoid volume weights over the full lattice.
    pub fn volume_weights(&self) -> Vec<f64> {
        (0..self.len)
            .map(|idx| {
                (0..self.dim)
                    .map(|k| {
                        let i = self.axis_index(idx, k);
                        let t = if i == 0 || i == self.points_per_axis - 1 { 0.5 } else { 1.0 };
                        t * self.spacing[k]
                    })
                    .product()
            })
            .collect()
    }

    /// Exact surface area of the box.
    pub fn boundary_area(&self) -> f64 {
        let side: Vec<f64> = self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).collect();
        (0..self.dim)
            .map(|k| {
                2.0 * (0..self.dim)
                    .filter(|&j| j != k)
                    .map(|j| side[j])
                    .product::<f64>()
            })
            .sum()
    }

    /// Whether `x` lies in the closed box (the box is its own convex hull).
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lower[k] && v <= self.upper[k])
    }

    /// Whether the boundary node sits inside a face (not on an edge or corner).
    pub fn is_face_interior(&self, b: &BoundaryNode) -> bool {
        let m = self.multi_index(b.index);
        m.iter()
            .enumerate()
            .all(|(k, &i)| k == b.axis || (i > 0 && i < self.points_per_axis - 1))
    }
}

/// Boundary nodes split by the sign of `(x - x0)·ν`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontBackPartition {
    pub x0: Vec<f64>,
    /// Positions into [`Domain::boundary_nodes`].
    pub front: Vec<usize>,
    pub back: Vec<usize>,
}

/// Boundary nodes split by the sign of `ν·φ'`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignedPartition {
    pub eps0: f64,
    /// `ν·φ' <= 0` (the complement of `signed_plus`).
    pub signed_minus: Vec<usize>,
    /// `ν·φ' > 0`.
    pub signed_plus: Vec<usize>,
    /// Complement of `plus_eps`.
    pub minus_eps: Vec<usize>,
    /// `ν·φ' >= eps0` and `ν·φ' > 0`; for `eps0 = 0` this is `signed_plus`.
    pub plus_eps: Vec<usize>,
    /// `ν·φ'` at every boundary node.
    pub normal_slope: Vec<f64>,
}

impl SignedPartition {
    pub fn minus_mask(&self, nb: usize) -> Vec<bool> {
        mask_of(&self.signed_minus, nb)
    }

    pub fn plus_eps_mask(&self, nb: usize) -> Vec<bool> {
        mask_of(&self.plus_eps, nb)
    }
}

pub fn mask_of(set: &[usize], len: usize) -> Vec<bool> {
    let mut m = vec![false; len];
    for &i in set {
        m[i] = true;
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn partition_front_back(domain: &Domain, x0: &[f64]) -> Result<FrontBackPartition> {
    if x0.len() != domain.dim() {
        return invalid("x0 has the wrong dimension");
    }
    if domain.contains_closed(x0) {
        return invalid(format!("x0 = {x0:?} lies in the closed convex hull of the domain"));
    }
    let mut front = Vec::new();
    let mut back = Vec::new();
    for (slot, b) in domain.boundary_nodes().iter().enumerate() {
        let x = domain.coords(b.index);
        let d: Vec<f64> = x.iter().zip(x0).map(|(a, c)| a - c).collect();
        if dot(&d, &b.normal) <= 0.0 {
            front.push(slot);
        } else {
            back.push(slot);
        }
    }
    Ok(FrontBackPartition {
        x0: x0.to_vec(),
        front,
        back,
    })
}

pub fn partition_signed(domain: &Domain, weight: &CarlemanWeight, eps0: f64) -> Result<SignedPartition> {
    if !(eps0 >= 0.0 && eps0.is_finite()) {
        return invalid(format!("eps0 = {eps0} must be a finite nonnegative number"));
    }
    let mut p = SignedPartition {
        eps0,
        signed_minus: Vec::new(),
        signed_plus: Vec::new(),
        minus_eps: Vec::new(),
        plus_eps: Vec::new(),
        normal_slope: Vec::with_capacity(domain.boundary_nodes().len()),
    };
    for (slot, b) in domain.boundary_nodes().iter().enumerate() {
        let x = domain.coords(b.index);
        let g = weight.gradient(&x);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            return invalid(format!("weight gradient vanishes at boundary node {}", b.index));
        }
        let s = dot(&g, &b.normal);
        p.normal_slope.push(s);
        if s <= 0.0 {
            p.signed_minus.push(slot);
        } else {
            p.signed_plus.push(slot);
        }
        if s < eps0 || s <= 0.0 {
            p.minus_eps.push(slot);
        } else {
            p.plus_eps.push(slot);
        }
    }
    Ok(p)
}

/// CSV export of labelled boundary sets: `node_index, x_k.., nu_k.., set_label`.
pub fn write_partition_csv(
    domain: &Domain,
    labelled_sets: &[(&str, &[usize])],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = domain.dim();
    let mut header = vec!["node_index".to_string()];
    header.extend((0..n).map(|k| format!("x{k}")));
    header.extend((0..n).map(|k| format!("nu{k}")));
    header.push("set_label".into());
    w.write_record(&header)?;
    for (label, set) in labelled_sets {
        for &slot in *set {
            let b = &domain.boundary_nodes()[slot];
            let mut rec = vec![b.index.to_string()];
            rec.extend(domain.coords(b.index).iter().map(|v| format!("{v:.17e}")));
            rec.extend(b.normal.iter().map(|v| format!("{v}")));
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_domain_json(domain: &Domain, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &domain.spec())?;
    f.write_all(b"\n")?;
    Ok(())
}
