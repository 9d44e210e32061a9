use std::fmt::Write as _;

use serde::Serialize;

use super::{generator_grid, max_scaling_lp, ElfvingError};
use crate::design::TargetVector;
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Generator,
    Hull,
    Ray,
    Intersection,
}

impl PlotKind {
    fn label(self) -> &'static str {
        match self {
            PlotKind::Generator => "generator",
            PlotKind::Hull => "hull",
            PlotKind::Ray => "ray",
            PlotKind::Intersection => "intersection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub kind: PlotKind,
    pub coords: Vec<f64>,
    pub x: Option<f64>,
    pub eps: Option<Vec<f64>>,
}

/// Projected generator cloud, its hull (2D only), the target ray and `γc`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotData {
    /// Zero-based coordinate indices that were projected.
    pub dims: Vec<usize>,
    pub k: usize,
    pub gamma: f64,
    pub rows: Vec<PlotRow>,
}

impl PlotData {
    /// CSV with columns `kind, coord1.., x, eps1..epsk`; empty cells where not applicable.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind");
        for i in 1..=self.dims.len() {
            let _ = write!(out, ",coord{i}");
        }
        out.push_str(",x");
        for i in 1..=self.k {
            let _ = write!(out, ",eps{i}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.kind.label());
            for v in &row.coords {
                let _ = write!(out, ",{v}");
            }
            match row.x {
                Some(x) => {
                    let _ = write!(out, ",{x}");
                }
                None => out.push(','),
            }
            match &row.eps {
                Some(eps) => eps.iter().for_each(|e| {
                    let _ = write!(out, ",{e}");
                }),
                None => (0..self.k).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }

    pub fn rows_of(&self, kind: PlotKind) -> impl Iterator<Item = &PlotRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }
}

/// Builds plot data for the generator set projected onto `dims` (zero-based).
pub fn plot_boundary(
    model: &ModelSpec,
    dims: &[usize],
    n_x: usize,
    n_eps: usize,
    c: &TargetVector,
) -> Result<PlotData, ElfvingError> {
    let p = model.p();
    let distinct = dims.iter().all(|&d| dims.iter().filter(|&&e| e == d).count() == 1);
    if !(dims.len() == 2 || dims.len() == 3) || dims.iter().any(|&d| d >= p) || !distinct {
        return Err(ElfvingError::Axes { p });
    }
    c.check_dim(p)?;
    let set = generator_grid(model, n_x, n_eps, 0)?;
    let rep = max_scaling_lp(&set.generators, c)?;
    let project = |v: &[f64]| dims.iter().map(|&d| v[d]).collect::<Vec<f64>>();

    let mut rows: Vec<PlotRow> = set
        .generators
        .iter()
        .map(|g| PlotRow {
            kind: PlotKind::Generator,
            coords: project(g.g.as_slice()),
            x: Some(g.x),
            eps: Some(g.eps.clone()),
        })
        .collect();
    if dims.len() == 2 {
        let pts: Vec<[f64; 2]> = rows.iter().map(|r| [r.coords[0], r.coords[1]]).collect();
        let hull = convex_hull(&pts);
        let mut closed = hull.clone();
        if let Some(&first) = hull.first() {
            closed.push(first);
        }
        let hull_rows: Vec<PlotRow> = closed
            .into_iter()
            .map(|i| PlotRow {
                kind: PlotKind::Hull,
                ..rows[i].clone()
            })
            .collect();
        rows.extend(hull_rows);
    }
    let cv = c.as_slice();
    let tip: Vec<f64> = cv.iter().map(|v| v * rep.gamma * 1.5).collect();
    for end in [vec![0.0; p], tip] {
        rows.push(PlotRow {
            kind: PlotKind::Ray,
            coords: project(&end),
            x: None,
            eps: None,
        });
    }
    let hit: Vec<f64> = cv.iter().map(|v| v * rep.gamma).collect();
    rows.push(PlotRow {
        kind: PlotKind::Intersection,
        coords: project(&hit),
        x: None,
        eps: None,
    });
    Ok(PlotData {
        dims: dims.to_vec(),
        k: model.k(),
        gamma: rep.gamma,
        rows,
    })
}

/// Indices of the convex hull in counter-clockwise order (monotone chain).
fn convex_hull(pts: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        pts[a][0]
            .total_cmp(&pts[b][0])
            .then(pts[a][1].total_cmp(&pts[b][1]))
    });
    idx.dedup_by(|a, b| pts[*a] == pts[*b]);
    if idx.len() < 3 {
        return idx;
    }
    let cross = |o: usize, a: usize, b: usize| {
        (pts[a][0] - pts[o][0]) * (pts[b][1] - pts[o][1])
            - (pts[a][1] - pts[o][1]) * (pts[b][0] - pts[o][0])
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for &i in &idx {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    let lower = hull.len() + 1;
    for &i in idx.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    hull.pop();
    hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{linear, mm41};

    #[test]
    fn linear_model_projects_to_square() {
        let c = TargetVector::new(vec![0.0, 1.0]).unwrap();
        let data = plot_boundary(&linear(), &[0, 1], 21, 2, &c).unwrap();
        let mut corners: Vec<(f64, f64)> = data
            .rows_of(PlotKind::Hull)
            .map(|r| (r.coords[0], r.coords[1]))
            .collect();
        corners.pop();
        corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(corners, vec![(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]);
        let hit = data.rows_of(PlotKind::Intersection).next().unwrap();
        assert_eq!(hit.coords, vec![0.0, 1.0]);
    }

    #[test]
    fn three_axes_and_csv_shape() {
        let c = TargetVector::new(vec![-0.425, 0.5, 0.0]).unwrap();
        let data = plot_boundary(&mm41(), &[0, 1, 2], 11, 8, &c).unwrap();
        assert_eq!(data.rows_of(PlotKind::Hull).count(), 0);
        let csv = data.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("kind,coord1,coord2,coord3,x,eps1,eps2"));
        assert!(lines.all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn bad_axes() {
        let c = TargetVector::new(vec![0.0, 1.0]).unwrap();
        assert!(plot_boundary(&linear(), &[0, 0], 5, 2, &c).is_err());
        assert!(plot_boundary(&linear(), &[0, 2], 5, 2, &c).is_err());
        assert!(plot_boundary(&linear(), &[0], 5, 2, &c).is_err());
    }
}
