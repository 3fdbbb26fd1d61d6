//! Report writers: pretty JSON, flat little-endian binary fields with a JSON
//! header, and the CSV schemas of the sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::carleman::EstimateRecord;
use crate::cgo::CgoSolution;
use crate::error::Result;
use crate::geometry::{Domain, DomainSpec};
use crate::identity::IdentityRun;
use crate::pde::DnMap;
use crate::reflection::PartialIdentityRun;
use crate::Complex64;

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Writes `values` as little-endian `f64` to `<stem>.bin` and `header` to
/// `<stem>.json`. Returns the two paths.
pub fn write_binary<H: Serialize>(dir: &Path, stem: &str, header: &H, values: &[f64]) -> Result<(PathBuf, PathBuf)> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let mut f = BufWriter::new(File::create(&bin)?);
    for v in values {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    write_json(&json, header)?;
    Ok((bin, json))
}

/// Interleaves real and imaginary parts.
pub fn interleave(values: &[Complex64]) -> Vec<f64> {
    values.iter().flat_map(|c| [c.re, c.im]).collect()
}

#[derive(Serialize)]
struct CgoHeader<'a> {
    h: f64,
    /// Sign of `φ` in the exponent.
    sign: f64,
    psi_sign: f64,
    theta: &'a crate::cgo::PhasePair,
    grid: DomainSpec,
    /// Arrays stored back to back, each complex and interleaved `re, im`.
    arrays: [&'static str; 3],
    layout: &'static str,
}

/// CGO fixture: exponent, amplitude and remainder in row-major lattice order.
pub fn write_cgo_fixture(dir: &Path, stem: &str, domain: &Domain, cgo: &CgoSolution) -> Result<(PathBuf, PathBuf)> {
    let header = CgoHeader {
        h: cgo.h,
        sign: cgo.phase.phi_sign.value(),
        psi_sign: cgo.phase.psi_sign.value(),
        theta: &cgo.phase.pair,
        grid: domain.spec(),
        arrays: ["exponent", "amplitude", "remainder"],
        layout: "complex interleaved, little-endian f64, row-major lattice order (last axis fastest)",
    };
    let mut values = interleave(&cgo.exponent);
    values.extend(interleave(&cgo.amplitude));
    values.extend(interleave(&cgo.remainder));
    write_binary(dir, stem, &header, &values)
}

#[derive(Serialize)]
struct DnHeader<'a> {
    grid: DomainSpec,
    potential_hash: &'a str,
    row_index: &'a [usize],
    col_index: &'a [usize],
    layout: &'static str,
}

/// DN matrix as a flat binary file plus header.
pub fn write_dn(dir: &Path, stem: &str, domain: &Domain, dn: &DnMap) -> Result<(PathBuf, PathBuf)> {
    let header = DnHeader {
        grid: domain.spec(),
        potential_hash: &dn.potential_hash,
        row_index: &dn.row_index,
        col_index: &dn.col_index,
        layout: "complex interleaved, little-endian f64, row-major rows × cols",
    };
    write_binary(dir, stem, &header, &interleave(&dn.matrix))
}

#[derive(Serialize)]
struct DnEntry {
    row: usize,
    col: usize,
    re: f64,
    im: f64,
}

/// Dense DN matrix as `row, col, re, im` (lattice indices); for small grids.
pub fn write_dn_csv(path: &Path, dn: &DnMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let cols = dn.col_index.len();
    for (r, &ri) in dn.row_index.iter().enumerate() {
        for (c, &ci) in dn.col_index.iter().enumerate() {
            let v = dn.matrix[r * cols + c];
            w.serialize(DnEntry {
                row: ri,
                col: ci,
                re: v.re,
                im: v.im,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CarlemanRow {
    h: f64,
    test_id: usize,
    lhs: f64,
    rhs: f64,
    ratio: f64,
}

pub fn write_carleman_csv(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CarlemanRow {
            h: r.h,
            test_id: r.test_id,
            lhs: r.lhs,
            rhs: r.rhs,
            ratio: r.ratio,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct IdentityRow {
    theta_id: usize,
    lambda: f64,
    h: f64,
    lhs_re: f64,
    lhs_im: f64,
    limit_re: f64,
    limit_im: f64,
    lhs_error: f64,
    rhs_plus_re: f64,
    rhs_plus_im: f64,
    rhs_bound: f64,
    green_residual: f64,
    limit_under_tol: bool,
    lhs_under_tol: bool,
}

/// Identity columns followed by the reflection extras; csv cannot serialize
/// `serde(flatten)`, so the base row is a tuple prefix.
#[derive(Serialize)]
struct ReflectionRow(IdentityRow, f64, f64, f64);

fn identity_rows(theta_id: usize, run: &IdentityRun, tol: f64) -> Vec<IdentityRow> {
    run.records
        .iter()
        .map(|r| IdentityRow {
            theta_id,
            lambda: run.lambda,
            h: r.h,
            lhs_re: r.lhs.re,
            lhs_im: r.lhs.im,
            limit_re: r.limit.re,
            limit_im: r.limit.im,
            lhs_error: r.lhs_error,
            rhs_plus_re: r.rhs_plus.re,
            rhs_plus_im: r.rhs_plus.im,
            rhs_bound: r.rhs_bound,
            green_residual: r.green_residual,
            limit_under_tol: r.limit.norm() <= tol,
            lhs_under_tol: r.lhs.norm() <= tol,
        })
        .collect()
}

/// Identity results, one row per `(θ, λ, h)`; `tol` sets the verdict columns.
pub fn write_identity_csv(path: &Path, runs: &[(usize, IdentityRun)], tol: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, run) in runs {
        for row in identity_rows(*id, run, tol) {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Identity schema plus the reflected term and the trace residual on `W₋`.
pub fn write_reflection_csv(path: &Path, runs: &[(usize, PartialIdentityRun)], tol: f64) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(IDENTITY_COLUMNS.iter().chain(&["reflected_term_re", "reflected_term_im", "trace_residual"]))?;
    for (id, run) in runs {
        for (k, base) in identity_rows(*id, &run.run, tol).into_iter().enumerate() {
            let t = run.reflected_term[k];
            w.serialize(ReflectionRow(base, t.re, t.im, run.trace_residual[k]))?;
        }
    }
    w.flush()?;
    Ok(())
}

const IDENTITY_COLUMNS: &[&str] = &[
    "theta_id",
    "lambda",
    "h",
    "lhs_re",
    "lhs_im",
    "limit_re",
    "limit_im",
    "lhs_error",
    "rhs_plus_re",
    "rhs_plus_im",
    "rhs_bound",
    "green_residual",
    "limit_under_tol",
    "lhs_under_tol",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_domain;
    use crate::pde::{assemble_dn, Potential};

    #[test]
    fn binary_layout_is_little_endian_interleaved() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_box_domain(2, &[[0.0, 1.0]; 2], 4).unwrap();
        let dn = assemble_dn(&d, &Potential::zero(&d)).unwrap();
        let (bin, json) = write_dn(dir.path(), "dn", &d, &dn).unwrap();
        let bytes = std::fs::read(bin).unwrap();
        assert_eq!(bytes.len(), 16 * dn.matrix.len());
        let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        let second = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!((first, second), (dn.matrix[0].re, dn.matrix[0].im));
        let header: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
        assert_eq!(header["potential_hash"], dn.potential_hash.as_str());
        assert_eq!(header["grid"]["points_per_axis"], 4);
        assert_eq!(header["row_index"].as_array().unwrap().len(), dn.rows());
    }

    #[test]
    fn carleman_csv_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let rec = EstimateRecord {
            h: 0.1,
            test_id: 3,
            lhs: 1.0,
            rhs: 2.0,
            ratio: 0.5,
            field_norm: 1.0,
            gradient_norm: 1.0,
            flux_minus: 0.0,
            flux_plus: 0.0,
        };
        write_carleman_csv(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "h,test_id,lhs,rhs,ratio\n0.1,3,1.0,2.0,0.5\n");
    }

    #[test]
    fn reflection_csv_extends_the_identity_columns() {
        use crate::identity::IdentityRecord;
        use crate::reflection::WMinus;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let c = |a: f64| Complex64::new(a, 0.0);
        let rec = IdentityRecord {
            h: 0.2,
            lhs: c(1.0),
            limit: c(0.0),
            lhs_error: 1.0,
            rhs_plus: c(0.0),
            rhs_minus: c(0.0),
            rhs_bound: 2.0,
            bound_constant: 1.0,
            green_residual: 0.0,
            remainder_u2: 0.1,
            remainder_w: 0.1,
            phase_quotient_error: 0.0,
        };
        let run = PartialIdentityRun {
            patch: WMinus {
                axis: 0,
                side: -1,
                lo: vec![1, 1],
                hi: vec![2, 2],
            },
            collar_width: 0.3,
            run: IdentityRun {
                eps0: 0.1,
                lambda: 1.0,
                records: vec![rec],
                lhs_order: f64::NAN,
                bound_order: f64::NAN,
            },
            main_term: vec![c(1.5)],
            reflected_term: vec![Complex64::new(0.5, -0.25)],
            trace_residual: vec![0.0],
        };
        write_reflection_csv(&p, &[(7, run)], 1e-9).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("theta_id,lambda,h,lhs_re") && lines[0].ends_with("reflected_term_re,reflected_term_im,trace_residual"));
        assert_eq!(lines[1], "7,1.0,0.2,1.0,0.0,0.0,0.0,1.0,0.0,0.0,2.0,0.0,true,false,0.5,-0.25,0.0");
    }
}
