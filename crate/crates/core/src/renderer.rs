//! Parallel-beam line-integral projector: the desk-scale renderer that maps
//! a grid canvas to 1D views, with its exact adjoint.
//!
//! Pixel `(i, j)` (row `i`, column `j`) sits at `(x, y) = (j - c, i - c)` with
//! `c = (n - 1) / 2`. At angle `theta` ray `k` has detector offset
//! `u_k = k - c` along `(cos, sin)` and is sampled at `n` unit-spaced points
//! along `(-sin, cos)`. Samples are bilinear with zero padding; each output
//! is the mean over its samples.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const MIN_GRID_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraAngle(f64);

impl CameraAngle {
    pub fn new(theta: f64) -> Self {
        let w = theta.rem_euclid(TAU);
        // rem_euclid can round up to TAU itself
        Self(if w >= TAU { 0.0 } else { w })
    }

    /// Angle of bucket `k` out of `n` uniformly spaced buckets.
    pub fn bucket(k: usize, n: usize) -> Self {
        Self::new(TAU * k as f64 / n as f64)
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanvasShape {
    /// flat image vector for the identity renderer
    Flat(usize),
    /// `n x n` grid for the tomographic renderer
    Square(usize),
}

impl CanvasShape {
    pub fn len(self) -> usize {
        match self {
            CanvasShape::Flat(d) => d,
            CanvasShape::Square(n) => n * n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// The distilled parameters: unconstrained logits, squashed by a sigmoid
/// before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    shape: CanvasShape,
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(shape: CanvasShape, data: Vec<f64>) -> Result<Self> {
        check_dim(shape.len(), data.len())?;
        if let CanvasShape::Square(n) = shape {
            if n < MIN_GRID_SIDE {
                return Err(Error::InvalidModel(format!("canvas side {n} below minimum {MIN_GRID_SIDE}")));
            }
        }
        if !crate::vecops::all_finite(&data) {
            return Err(Error::InvalidModel("canvas has non-finite entries".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: CanvasShape) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.len()])
    }

    pub fn shape(&self) -> CanvasShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn squashed(&self) -> Vec<f64> {
        self.data.iter().map(|&v| sigmoid(v)).collect()
    }

    /// Grid side length, or an error for a flat canvas.
    pub fn side(&self) -> Result<usize> {
        match self.shape {
            CanvasShape::Square(n) => Ok(n),
            CanvasShape::Flat(_) => Err(Error::Unsupported("flat canvas has no grid side".into())),
        }
    }

    /// Squashed values as CSV, one grid row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let cols = match self.shape {
            CanvasShape::Square(n) => n,
            CanvasShape::Flat(d) => d,
        };
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::io(path, e.into()))?;
        let header: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for row in self.squashed().chunks(cols) {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Squashed values as an 8-bit binary portable graymap.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (w, h) = match self.shape {
            CanvasShape::Square(n) => (n, n),
            CanvasShape::Flat(d) => (d, 1),
        };
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(self.squashed().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 - s)
}

/// Visit `(ray, pixel, weight)` for every nonzero bilinear tap.
fn for_each_tap(n: usize, angle: CameraAngle, mut f: impl FnMut(usize, usize, f64)) {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = angle.radians().sin_cos();
    for k in 0..n {
        let u = k as f64 - c;
        for m in 0..n {
            let v = m as f64 - c;
            let cx = u * co - v * s + c;
            let cy = u * s + v * co + c;
            let (j0, i0) = (cx.floor(), cy.floor());
            let (fx, fy) = (cx - j0, cy - i0);
            let (j0, i0) = (j0 as i64, i0 as i64);
            let taps = [
                (i0, j0, (1.0 - fx) * (1.0 - fy)),
                (i0, j0 + 1, fx * (1.0 - fy)),
                (i0 + 1, j0, (1.0 - fx) * fy),
                (i0 + 1, j0 + 1, fx * fy),
            ];
            for (i, j, w) in taps {
                if w != 0.0 && i >= 0 && j >= 0 && (i as usize) < n && (j as usize) < n {
                    f(k, i as usize * n + j as usize, w);
                }
            }
        }
    }
}

/// Linear stage: projects raw grid values (no squashing).
pub fn project_linear(values: &[f64], n: usize, angle: CameraAngle) -> Result<Vec<f64>> {
    check_dim(n * n, values.len())?;
    let mut out = vec![0.0; n];
    for_each_tap(n, angle, |k, p, w| out[k] += w * values[p]);
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Transpose of [`project_linear`].
pub fn project_linear_adjoint(n: usize, angle: CameraAngle, cotangent: &[f64]) -> Result<Vec<f64>> {
    check_dim(n, cotangent.len())?;
    let mut out = vec![0.0; n * n];
    let inv = 1.0 / n as f64;
    for_each_tap(n, angle, |k, p, w| out[p] += w * inv * cotangent[k]);
    Ok(out)
}

/// Render one view of a grid canvas.
pub fn project(canvas: &Canvas, angle: CameraAngle) -> Result<Vec<f64>> {
    let n = canvas.side()?;
    project_linear(&canvas.squashed(), n, angle)
}

/// Transpose-Jacobian of [`project`] (sigmoid factor included).
pub fn project_adjoint(canvas: &Canvas, angle: CameraAngle, cotangent: &[f64]) -> Result<Vec<f64>> {
    let n = canvas.side()?;
    let mut g = project_linear_adjoint(n, angle, cotangent)?;
    for (gi, &v) in g.iter_mut().zip(canvas.data()) {
        *gi *= sigmoid_grad(v);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Disk,
    Square,
    Annulus,
    TwoBars,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Disk, Template::Square, Template::Annulus, Template::TwoBars];

    pub fn name(self) -> &'static str {
        match self {
            Template::Disk => "disk",
            Template::Square => "square",
            Template::Annulus => "annulus",
            Template::TwoBars => "two-bars",
        }
    }

    pub const DISK_RADIUS: f64 = 0.3;

    /// Occupancy of the point `(x, y)` in units of the grid side, origin at the centre.
    fn inside(self, x: f64, y: f64) -> bool {
        let r2 = x * x + y * y;
        match self {
            Template::Disk => r2 <= Self::DISK_RADIUS * Self::DISK_RADIUS,
            Template::Square => x.abs() <= 0.25 && y.abs() <= 0.25,
            Template::Annulus => (0.18 * 0.18..=0.33 * 0.33).contains(&r2),
            Template::TwoBars => y.abs() <= 0.3 && (0.1..=0.25).contains(&x.abs()),
        }
    }

    /// `n x n` reference occupancy, antialiased by 4x4 supersampling.
    pub fn grid(self, n: usize) -> Vec<f64> {
        const SS: usize = 4;
        let c = (n as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut hits = 0;
                for a in 0..SS {
                    for b in 0..SS {
                        let x = j as f64 - c + (b as f64 + 0.5) / SS as f64 - 0.5;
                        let y = i as f64 - c + (a as f64 + 0.5) / SS as f64 - 0.5;
                        if self.inside(x / n as f64, y / n as f64) {
                            hits += 1;
                        }
                    }
                }
                out[i * n + j] = hits as f64 / (SS * SS) as f64;
            }
        }
        out
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown template `{s}` (expected disk, square, annulus, two-bars)")))
    }
}

/// Projections of the template at `n_angles` uniformly spaced angles starting at 0.
pub fn template_projection_table(template: Template, n: usize, n_angles: usize) -> Result<Vec<Vec<f64>>> {
    if n_angles == 0 {
        return Err(Error::InvalidModel("n_angles must be at least 1".into()));
    }
    let grid = template.grid(n);
    (0..n_angles)
        .map(|k| project_linear(&grid, n, CameraAngle::bucket(k, n_angles)))
        .collect()
}

/// How a canvas becomes the image the denoiser sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Renderer {
    /// The canvas is the image; `squash` applies the sigmoid.
    Identity { squash: bool },
    /// One projection per camera angle.
    Tomographic,
}

impl Renderer {
    pub fn render(&self, canvas: &Canvas, angle: CameraAngle) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity { squash: true } => Ok(canvas.squashed()),
            Renderer::Identity { squash: false } => Ok(canvas.data().to_vec()),
            Renderer::Tomographic => project(canvas, angle),
        }
    }

    pub fn pullback(&self, canvas: &Canvas, angle: CameraAngle, cotangent: &[f64]) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity { squash } => {
                check_dim(canvas.data().len(), cotangent.len())?;
                if *squash {
                    Ok(cotangent.iter().zip(canvas.data()).map(|(c, &v)| c * sigmoid_grad(v)).collect())
                } else {
                    Ok(cotangent.to_vec())
                }
            }
            Renderer::Tomographic => project_adjoint(canvas, angle, cotangent),
        }
    }

    /// Dimension of a rendered view for this canvas shape.
    pub fn view_dimension(&self, shape: CanvasShape) -> usize {
        match (self, shape) {
            (Renderer::Tomographic, CanvasShape::Square(n)) => n,
            (_, s) => s.len(),
        }
    }
}
