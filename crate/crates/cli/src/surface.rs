use std::io::Write;
use std::path::Path;

use pdespline::basis::{linspace, tensor_design, PointSet, TensorBasis};

use crate::config::SurfaceSection;
use crate::error::CliError;

/// Grid axes for the surface section; bounds default to the basis domain.
pub fn surface_axes(s: &SurfaceSection, basis: &TensorBasis) -> Result<Vec<Vec<f64>>, CliError> {
    (0..basis.dim())
        .map(|d| {
            let spec = basis.spec(d);
            let lo = s.lo.as_ref().map_or(spec.lo(), |v| v[d]);
            let hi = s.hi.as_ref().map_or(spec.hi(), |v| v[d]);
            let n = s.points[d];
            if n == 1 {
                return Ok(vec![lo]);
            }
            if !(lo < hi) {
                return Err(CliError::Config(format!("surface: need lo < hi in dimension {}", d + 1)));
            }
            Ok(linspace(lo, hi, n))
        })
        .collect()
}

/// Writes `coords…,value` for every point of the grid, dimension 1 fastest.
/// Returns the number of data rows.
pub fn export_surface(
    c: &[f64],
    basis: &TensorBasis,
    axes: &[Vec<f64>],
    names: &[String],
    value_name: &str,
    path: &Path,
    prelude: &[String],
) -> Result<usize, CliError> {
    if axes.len() != basis.dim() || names.len() != basis.dim() {
        return Err(pdespline::Error::DimensionMismatch(format!(
            "{} grid axes and {} names for a {}-dimensional basis",
            axes.len(),
            names.len(),
            basis.dim()
        ))
        .into());
    }
    let points = PointSet::Grid(axes.to_vec());
    for row in points.rows() {
        if !basis.contains(&row) {
            let d = (0..basis.dim())
                .find(|&d| !(basis.spec(d).lo()..=basis.spec(d).hi()).contains(&row[d]))
                .unwrap_or(0);
            return Err(pdespline::Error::OutsideDomain {
                dim: d,
                value: row[d],
                lo: basis.spec(d).lo(),
                hi: basis.spec(d).hi(),
            }
            .into());
        }
    }
    let design = tensor_design(basis, &points, &vec![0; basis.dim()])?;
    let u = design.mul_vec(c);
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    for p in prelude {
        writeln!(w, "# {p}").map_err(io)?;
    }
    writeln!(w, "{},{value_name}", names.join(",")).map_err(io)?;
    for (row, v) in points.rows().iter().zip(&u) {
        let coords: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{v:.10e}", coords.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(u.len())
}
