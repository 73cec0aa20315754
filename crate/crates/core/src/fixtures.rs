//! Shared test geometries.

use std::f64::consts::PI;

use crate::geometry::{staircase_from_arcs, Geometry, Segment};
use crate::sheet::BoundaryCondition;

/// Dirichlet strip with a centered `2π × π` rectangular widening.
pub fn standard_cavity() -> Geometry {
    Geometry::from_pieces(&[Segment::new(PI, 2.0 * PI, -0.5 * PI)], BoundaryCondition::Dirichlet)
}

/// Width of the irises in [`weak_coupling_cavity`].
pub const IRIS_WIDTH: f64 = 0.1;
/// Length of each iris.
pub const IRIS_LENGTH: f64 = 0.15;
/// Length of the closed box between the irises.
pub const BOX_LENGTH: f64 = 2.0 * PI;

/// A `2π × π` box joined to each lead through a narrow centered iris.
pub fn weak_coupling_cavity() -> Geometry {
    let iris = Segment::new(IRIS_LENGTH, IRIS_WIDTH, 0.5 * (PI - IRIS_WIDTH));
    let cavity = Segment::new(BOX_LENGTH, PI, 0.0);
    Geometry::from_pieces(&[iris, cavity, iris], BoundaryCondition::Dirichlet)
}

/// Dirichlet eigenvalues `(mπ/L)² + n²` of the closed box, ascending.
pub fn closed_box_eigenvalues(kmax: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for m in 1..200 {
        let a = (m as f64 * PI / BOX_LENGTH).powi(2);
        if a > kmax {
            break;
        }
        for n in 1..200 {
            let v = a + (n * n) as f64;
            if v > kmax {
                break;
            }
            out.push(v);
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Two-mirror staircase: `d = 1`, `r1 = r2 = 4`, eight steps.
pub fn buldyrev_staircase() -> Geometry {
    staircase_from_arcs(1.0, 4.0, 4.0, 8).expect("fixture parameters are stable")
}

/// Names accepted by [`by_name`].
pub const FIXTURE_NAMES: [&str; 5] = ["free-strip", "free-strip-neumann", "cavity", "weak-coupling", "staircase"];

pub fn by_name(name: &str) -> Option<Geometry> {
    match name {
        "free-strip" => Some(Geometry::free_strip(BoundaryCondition::Dirichlet)),
        "free-strip-neumann" => Some(Geometry::free_strip(BoundaryCondition::Neumann)),
        "cavity" => Some(standard_cavity()),
        "weak-coupling" => Some(weak_coupling_cavity()),
        "staircase" => Some(buldyrev_staircase()),
        _ => None,
    }
}
