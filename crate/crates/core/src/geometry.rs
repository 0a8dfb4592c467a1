//! Space-time discretization of the half-cylinder.
//!
//! The computational domain is the half-rectangle `[a1, b1] x [0, H]` with the
//! distinguished thin line `xn = 0`, marched over the time interval
//! `(t_start, t_end]`.  Points carry the parabolic metric
//! `d_p((x,t),(y,s)) = max(|x - y|, |t - s|^(1/2))`, and parabolic cylinders
//! come in four flavours: past `Q_r`, full `~Q_r` and their thin sections.
//!
//! Grid functions are stored for every time slice, which keeps space-time
//! diagnostics (free-boundary tracks, heat-kernel functionals, seminorms)
//! cheap at desk scale.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("rescaled sampling stencil leaves the source domain: {0}")]
    DomainExceeded(String),
    #[error("non-finite value at node (i={i}, j={j}, k={k})")]
    NonFinite { i: usize, j: usize, k: usize },
}

/// A point of the space-time half-cylinder (or of its even reflection).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub x1: f64,
    pub xn: f64,
    pub t: f64,
}

impl Point {
    pub fn new(x1: f64, xn: f64, t: f64) -> Self {
        Point { x1, xn, t }
    }

    /// Point on the thin line `xn = 0`.
    pub fn thin(x1: f64, t: f64) -> Self {
        Point { x1, xn: 0.0, t }
    }
}

/// Parabolic distance `max(|x - y|, |t - s|^(1/2))`.
pub fn parabolic_distance(p: &Point, q: &Point) -> f64 {
    let dx = (p.x1 - q.x1).hypot(p.xn - q.xn);
    let dt = (p.t - q.t).abs().sqrt();
    dx.max(dt)
}

/// Parabolic distance between two point sets; `+inf` for an empty side.
pub fn set_distance(a: &[Point], b: &[Point]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            let d = parabolic_distance(p, q);
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// Which piece of the parabolic cylinder a membership test refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CylinderKind {
    /// `Q_r = B_r x (t0 - r^2, t0]`
    Past,
    /// `~Q_r = B_r x (t0 - r^2, t0 + r^2)`
    Full,
    /// thin section of `Q_r`
    ThinPast,
    /// thin section of `~Q_r`
    ThinFull,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParabolicCylinder {
    pub center: Point,
    pub radius: f64,
    pub kind: CylinderKind,
}

const THIN_TOL: f64 = 1e-12;

impl ParabolicCylinder {
    pub fn new(center: Point, radius: f64, kind: CylinderKind) -> Self {
        assert!(radius > 0.0, "cylinder radius must be positive");
        ParabolicCylinder { center, radius, kind }
    }

    pub fn past(center: Point, radius: f64) -> Self {
        Self::new(center, radius, CylinderKind::Past)
    }

    pub fn full(center: Point, radius: f64) -> Self {
        Self::new(center, radius, CylinderKind::Full)
    }

    pub fn contains(&self, p: &Point) -> bool {
        let r = self.radius;
        let dx = (p.x1 - self.center.x1).hypot(p.xn - self.center.xn);
        if dx >= r {
            return false;
        }
        let on_thin = p.xn.abs() <= THIN_TOL;
        let dt = p.t - self.center.t;
        match self.kind {
            CylinderKind::Past => -r * r < dt && dt <= 0.0,
            CylinderKind::Full => dt.abs() < r * r,
            CylinderKind::ThinPast => on_thin && -r * r < dt && dt <= 0.0,
            CylinderKind::ThinFull => on_thin && dt.abs() < r * r,
        }
    }
}

/// Uniform mesh of the half-rectangle `[a1, b1] x [0, H] x (t_start, t_end]`.
///
/// Thin-boundary nodes are exactly those with `xn`-index 0.  Node coordinates
/// are affine in the indices, so they are reproducible bit-exactly; nothing is
/// ever accumulated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfGrid {
    pub nx1: usize,
    pub nxn: usize,
    pub nt: usize,
    pub x1_min: f64,
    pub x1_max: f64,
    pub height: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub hx1: f64,
    pub hxn: f64,
    pub dt: f64,
}

impl HalfGrid {
    pub fn new(
        nx1: usize,
        nxn: usize,
        nt: usize,
        x1_range: (f64, f64),
        height: f64,
        t_range: (f64, f64),
    ) -> Result<Self, GeometryError> {
        if nx1 < 3 || nxn < 2 || nt < 1 {
            return Err(GeometryError::DegenerateGrid(format!(
                "need nx1 >= 3, nxn >= 2, nt >= 1, got {nx1} x {nxn} x {nt}"
            )));
        }
        let (a1, b1) = x1_range;
        let (t0, t1) = t_range;
        if !(b1 > a1) || !(height > 0.0) || !(t1 > t0) {
            return Err(GeometryError::DegenerateGrid(
                "ranges must have positive extent".into(),
            ));
        }
        let hx1 = (b1 - a1) / (nx1 - 1) as f64;
        let hxn = height / (nxn - 1) as f64;
        let dt = (t1 - t0) / nt as f64;
        Ok(HalfGrid {
            nx1,
            nxn,
            nt,
            x1_min: a1,
            x1_max: b1,
            height,
            t_start: t0,
            t_end: t1,
            hx1,
            hxn,
            dt,
        })
    }

    /// Default laboratory domain `[-1, 1] x [0, 1] x (-1, 0]`, matching `Q_1`.
    pub fn unit(nx1: usize, nxn: usize, nt: usize) -> Self {
        Self::new(nx1, nxn, nt, (-1.0, 1.0), 1.0, (-1.0, 0.0)).expect("valid unit grid")
    }

    #[inline]
    pub fn x1(&self, i: usize) -> f64 {
        self.x1_min + i as f64 * self.hx1
    }

    #[inline]
    pub fn xn(&self, j: usize) -> f64 {
        j as f64 * self.hxn
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Point {
        Point::new(self.x1(i), self.xn(j), self.t(k))
    }

    /// Number of stored time slices (initial slice included).
    #[inline]
    pub fn nslices(&self) -> usize {
        self.nt + 1
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.nx1 * self.nxn
    }

    /// Flat index within one space slice.
    #[inline]
    pub fn sidx(&self, i: usize, j: usize) -> usize {
        j * self.nx1 + i
    }

    pub fn is_lateral(&self, i: usize, j: usize) -> bool {
        i == 0 || i == self.nx1 - 1 || j == self.nxn - 1
    }

    pub fn is_thin(&self, j: usize) -> bool {
        j == 0
    }
}

/// Real grid function over all stored time slices of a [`HalfGrid`].
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    pub grid: HalfGrid,
    values: Vec<f64>,
    pub label: String,
}

impl SpaceTimeField {
    pub fn zeros(grid: &HalfGrid, label: &str) -> Self {
        let len = grid.slice_len() * grid.nslices();
        SpaceTimeField {
            grid: grid.clone(),
            values: vec![0.0; len],
            label: label.to_string(),
        }
    }

    pub fn from_fn<F: Fn(f64, f64, f64) -> f64>(grid: &HalfGrid, label: &str, f: F) -> Self {
        let mut out = Self::zeros(grid, label);
        for k in 0..grid.nslices() {
            let t = grid.t(k);
            for j in 0..grid.nxn {
                let xn = grid.xn(j);
                for i in 0..grid.nx1 {
                    out.set(i, j, k, f(grid.x1(i), xn, t));
                }
            }
        }
        out
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.grid.nxn + j) * self.grid.nx1 + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let id = self.idx(i, j, k);
        self.values[id] = v;
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.slice_len();
        &mut self.values[k * n..(k + 1) * n]
    }

    /// Trace on the thin set: stored values at `xn`-index 0, no interpolation.
    pub fn trace_slice(&self, k: usize) -> &[f64] {
        &self.slice(k)[0..self.grid.nx1]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<(), GeometryError> {
        for k in 0..self.grid.nslices() {
            for j in 0..self.grid.nxn {
                for i in 0..self.grid.nx1 {
                    if !self.get(i, j, k).is_finite() {
                        return Err(GeometryError::NonFinite { i, j, k });
                    }
                }
            }
        }
        Ok(())
    }

    /// Bilinear-in-space, linear-in-time interpolation.  Coordinates may sit
    /// on the boundary up to a small multiple of machine epsilon.
    pub fn sample(&self, x1: f64, xn: f64, t: f64) -> Result<f64, GeometryError> {
        let g = &self.grid;
        let fx = locate(x1, g.x1_min, g.hx1, g.nx1, "x1")?;
        let fy = locate(xn, 0.0, g.hxn, g.nxn, "xn")?;
        let ft = locate(t, g.t_start, g.dt, g.nslices(), "t")?;
        let (i, a) = fx;
        let (j, b) = fy;
        let (k, c) = ft;
        let v = |ii, jj, kk| self.get(ii, jj, kk);
        let at = |kk| {
            let v00 = v(i, j, kk);
            let v10 = v(i + 1, j, kk);
            let v01 = v(i, j + 1, kk);
            let v11 = v(i + 1, j + 1, kk);
            (1.0 - a) * (1.0 - b) * v00 + a * (1.0 - b) * v10 + (1.0 - a) * b * v01 + a * b * v11
        };
        Ok((1.0 - c) * at(k) + c * at(k + 1))
    }

    /// Parabolic rescaling `u_r(x, t) = u(r x, r^2 t) / r` onto an explicit
    /// target grid.  Exact (no interpolation) when every sampling coordinate
    /// lands on a source node.
    pub fn rescale_onto(&self, r: f64, target: &HalfGrid) -> Result<SpaceTimeField, GeometryError> {
        assert!(r > 0.0, "rescale factor must be positive");
        let mut out = SpaceTimeField::zeros(target, &self.label);
        for k in 0..target.nslices() {
            let t = r * r * target.t(k);
            for j in 0..target.nxn {
                let xn = r * target.xn(j);
                for i in 0..target.nx1 {
                    let v = self.sample(r * target.x1(i), xn, t)?;
                    out.set(i, j, k, v / r);
                }
            }
        }
        Ok(out)
    }

    /// Parabolic rescaling onto the default target: same physical ranges,
    /// node counts scaled so that dyadic `r` on dyadic grids samples nodes
    /// exactly.  Requires `r <= 1` (larger factors leave the domain).
    pub fn rescale(&self, r: f64) -> Result<SpaceTimeField, GeometryError> {
        let g = &self.grid;
        if r > 1.0 + 1e-14 {
            return Err(GeometryError::DomainExceeded(format!(
                "default-target rescale needs r <= 1, got {r}"
            )));
        }
        if g.t_end > 1e-14 || g.x1_min > -1e-14 || g.x1_max < 1e-14 {
            return Err(GeometryError::DomainExceeded(
                "default-target rescale needs 0 in the x1 range and t_end <= 0".into(),
            ));
        }
        let nx1 = (((g.nx1 - 1) as f64 * r).round() as usize).max(2) + 1;
        let nxn = (((g.nxn - 1) as f64 * r).round() as usize).max(1) + 1;
        let nt = ((g.nt as f64 * r * r).round() as usize).max(1);
        let target = HalfGrid::new(
            nx1,
            nxn,
            nt,
            (g.x1_min, g.x1_max),
            g.height,
            (g.t_start, g.t_end),
        )?;
        self.rescale_onto(r, &target)
    }

    /// Even reflection across the thin line: the output lives on
    /// `xn in [-H, H]` with shared (not duplicated) thin-line values.
    pub fn reflect_even(&self) -> ReflectedField {
        let g = &self.grid;
        let spec = FullGridSpec {
            nx1: g.nx1,
            nxn: 2 * g.nxn - 1,
            nt: g.nt,
            x1_min: g.x1_min,
            x1_max: g.x1_max,
            xn_min: -g.height,
            xn_max: g.height,
            t_start: g.t_start,
            t_end: g.t_end,
            hx1: g.hx1,
            hxn: g.hxn,
            dt: g.dt,
        };
        let mut values = vec![0.0; spec.nx1 * spec.nxn * (spec.nt + 1)];
        let mid = g.nxn - 1; // full-grid index of the thin line
        for k in 0..g.nslices() {
            for j in 0..g.nxn {
                for i in 0..g.nx1 {
                    let v = self.get(i, j, k);
                    values[spec.idx(i, mid + j, k)] = v;
                    values[spec.idx(i, mid - j, k)] = v;
                }
            }
        }
        ReflectedField { spec, values, label: self.label.clone() }
    }
}

fn locate(
    x: f64,
    min: f64,
    h: f64,
    n: usize,
    axis: &str,
) -> Result<(usize, f64), GeometryError> {
    let span = (n - 1) as f64 * h;
    let eps = 64.0 * f64::EPSILON * (span.abs() + min.abs() + 1.0);
    let s = (x - min) / h;
    if s < -eps / h || s > (n - 1) as f64 + eps / h {
        return Err(GeometryError::DomainExceeded(format!(
            "{axis} = {x} outside [{min}, {}]",
            min + span
        )));
    }
    let mut i = s.floor() as isize;
    if i < 0 {
        i = 0;
    }
    let mut i = i as usize;
    if i >= n - 1 {
        i = n - 2;
    }
    let w = (s - i as f64).clamp(0.0, 1.0);
    Ok((i, w))
}

/// Geometry of a full rectangle straddling the thin line (the image of the
/// even reflection, and the natural home of analytic test fields).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullGridSpec {
    pub nx1: usize,
    pub nxn: usize,
    pub nt: usize,
    pub x1_min: f64,
    pub x1_max: f64,
    pub xn_min: f64,
    pub xn_max: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub hx1: f64,
    pub hxn: f64,
    pub dt: f64,
}

impl FullGridSpec {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.nxn + j) * self.nx1 + i
    }

    #[inline]
    pub fn x1(&self, i: usize) -> f64 {
        self.x1_min + i as f64 * self.hx1
    }

    #[inline]
    pub fn xn(&self, j: usize) -> f64 {
        self.xn_min + j as f64 * self.hxn
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    #[inline]
    pub fn nslices(&self) -> usize {
        self.nt + 1
    }
}

/// Grid function on a full rectangle; produced by [`SpaceTimeField::reflect_even`]
/// or built directly from a closure for analytic tests.
#[derive(Debug, Clone)]
pub struct ReflectedField {
    pub spec: FullGridSpec,
    values: Vec<f64>,
    pub label: String,
}

impl ReflectedField {
    pub fn from_fn<F: Fn(f64, f64, f64) -> f64>(
        nx1: usize,
        nxn: usize,
        nt: usize,
        x1_range: (f64, f64),
        xn_range: (f64, f64),
        t_range: (f64, f64),
        label: &str,
        f: F,
    ) -> Self {
        assert!(nx1 >= 2 && nxn >= 2 && nt >= 1);
        let spec = FullGridSpec {
            nx1,
            nxn,
            nt,
            x1_min: x1_range.0,
            x1_max: x1_range.1,
            xn_min: xn_range.0,
            xn_max: xn_range.1,
            t_start: t_range.0,
            t_end: t_range.1,
            hx1: (x1_range.1 - x1_range.0) / (nx1 - 1) as f64,
            hxn: (xn_range.1 - xn_range.0) / (nxn - 1) as f64,
            dt: (t_range.1 - t_range.0) / nt as f64,
        };
        let mut values = vec![0.0; nx1 * nxn * (nt + 1)];
        for k in 0..spec.nslices() {
            let t = spec.t(k);
            for j in 0..nxn {
                let xn = spec.xn(j);
                for i in 0..nx1 {
                    values[spec.idx(i, j, k)] = f(spec.x1(i), xn, t);
                }
            }
        }
        ReflectedField { spec, values, label: label.to_string() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let id = self.spec.idx(i, j, k);
        self.values[id] = v;
    }

    /// Pointwise positive part `max(u, 0)`.
    pub fn positive_part(&self) -> ReflectedField {
        let mut out = self.clone();
        out.label = format!("{}+", self.label);
        for v in &mut out.values {
            *v = v.max(0.0);
        }
        out
    }

    /// Pointwise negative part `max(-u, 0)` (nonnegative).
    pub fn negative_part(&self) -> ReflectedField {
        let mut out = self.clone();
        out.label = format!("{}-", self.label);
        for v in &mut out.values {
            *v = (-*v).max(0.0);
        }
        out
    }

    /// Translate coordinates so that `(x1_c, 0, t_c)` becomes the origin.
    pub fn recenter(&self, x1_c: f64, t_c: f64) -> ReflectedField {
        let mut out = self.clone();
        out.spec.x1_min -= x1_c;
        out.spec.x1_max -= x1_c;
        out.spec.t_start -= t_c;
        out.spec.t_end -= t_c;
        out
    }

    pub fn sample(&self, x1: f64, xn: f64, t: f64) -> Result<f64, GeometryError> {
        let s = &self.spec;
        let (i, a) = locate(x1, s.x1_min, s.hx1, s.nx1, "x1")?;
        let (j, b) = locate(xn, s.xn_min, s.hxn, s.nxn, "xn")?;
        let (k, c) = locate(t, s.t_start, s.dt, s.nslices(), "t")?;
        let at = |kk| {
            let v00 = self.get(i, j, kk);
            let v10 = self.get(i + 1, j, kk);
            let v01 = self.get(i, j + 1, kk);
            let v11 = self.get(i + 1, j + 1, kk);
            (1.0 - a) * (1.0 - b) * v00 + a * (1.0 - b) * v10 + (1.0 - a) * b * v01 + a * b * v11
        };
        Ok((1.0 - c) * at(k) + c * at(k + 1))
    }

    /// Parabolic rescaling `u_r = u(r x, r^2 t)/r` onto the same coordinate
    /// ranges with node counts scaled by `r` (`r^2` in time).  The origin must
    /// lie inside the spatial ranges and `t_end >= 0`.
    pub fn rescale(&self, r: f64) -> Result<ReflectedField, GeometryError> {
        let s = &self.spec;
        if r > 1.0 + 1e-14 {
            return Err(GeometryError::DomainExceeded(format!(
                "default-target rescale needs r <= 1, got {r}"
            )));
        }
        if s.x1_min > 0.0 || s.x1_max < 0.0 || s.xn_min > 0.0 || s.xn_max < 0.0 || s.t_end < 0.0 {
            return Err(GeometryError::DomainExceeded(
                "rescale target must contain the origin".into(),
            ));
        }
        let nx1 = (((s.nx1 - 1) as f64 * r).round() as usize).max(1) + 1;
        let nxn = (((s.nxn - 1) as f64 * r).round() as usize).max(1) + 1;
        let nt = ((s.nt as f64 * r * r).round() as usize).max(1);
        let spec = FullGridSpec {
            nx1,
            nxn,
            nt,
            x1_min: s.x1_min,
            x1_max: s.x1_max,
            xn_min: s.xn_min,
            xn_max: s.xn_max,
            t_start: s.t_start,
            t_end: s.t_end,
            hx1: (s.x1_max - s.x1_min) / (nx1 - 1) as f64,
            hxn: (s.xn_max - s.xn_min) / (nxn - 1) as f64,
            dt: (s.t_end - s.t_start) / nt as f64,
        };
        let mut values = vec![0.0; nx1 * nxn * (nt + 1)];
        for k in 0..spec.nslices() {
            let t = r * r * spec.t(k);
            for j in 0..nxn {
                let xn = r * spec.xn(j);
                for i in 0..nx1 {
                    values[spec.idx(i, j, k)] = self.sample(r * spec.x1(i), xn, t)? / r;
                }
            }
        }
        Ok(ReflectedField { spec, values, label: self.label.clone() })
    }

    /// Max cell-center gradient magnitude over all cells and slices; the
    /// Lipschitz constant used by Gaussian tail bounds.
    pub fn max_grad(&self) -> f64 {
        let s = &self.spec;
        let mut best = 0.0f64;
        for k in 0..s.nslices() {
            for j in 0..s.nxn - 1 {
                for i in 0..s.nx1 - 1 {
                    let v00 = self.get(i, j, k);
                    let v10 = self.get(i + 1, j, k);
                    let v01 = self.get(i, j + 1, k);
                    let v11 = self.get(i + 1, j + 1, k);
                    let gx = ((v10 - v00) + (v11 - v01)) / (2.0 * s.hx1);
                    let gy = ((v01 - v00) + (v11 - v10)) / (2.0 * s.hxn);
                    best = best.max(gx.hypot(gy));
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabolic_distance_examples() {
        let o = Point::new(0.0, 0.0, 0.0);
        assert_eq!(parabolic_distance(&o, &o), 0.0);
        assert_eq!(parabolic_distance(&o, &Point::new(3.0, 4.0, 0.0)), 5.0);
        // max(1, sqrt(9)) = 3
        assert_eq!(parabolic_distance(&o, &Point::new(1.0, 0.0, -9.0)), 3.0);
        // symmetry
        let p = Point::new(0.3, 0.1, -0.5);
        let q = Point::new(-0.2, 0.4, -0.1);
        assert_eq!(parabolic_distance(&p, &q), parabolic_distance(&q, &p));
    }

    #[test]
    fn set_distance_examples() {
        let a = [Point::thin(0.0, 0.0)];
        let b = [Point::thin(1.0, 0.0)];
        assert_eq!(set_distance(&a, &b), 1.0);
        assert_eq!(set_distance(&[], &b), f64::INFINITY);
        let c = [Point::thin(0.0, -0.25)];
        assert_eq!(set_distance(&a, &c), 0.5);
    }

    #[test]
    fn cylinder_membership() {
        let c = ParabolicCylinder::past(Point::thin(0.0, 0.0), 0.5);
        assert!(c.contains(&Point::new(0.2, 0.1, -0.1)));
        assert!(c.contains(&Point::thin(0.0, 0.0)));
        assert!(!c.contains(&Point::new(0.2, 0.1, 0.1))); // future
        assert!(!c.contains(&Point::new(0.2, 0.1, -0.3))); // below t0 - r^2
        assert!(!c.contains(&Point::new(0.5, 0.0, 0.0))); // on the sphere

        let f = ParabolicCylinder::full(Point::thin(0.0, 0.0), 0.5);
        assert!(f.contains(&Point::new(0.2, 0.1, 0.1)));
        assert!(!f.contains(&Point::new(0.2, 0.1, 0.25)));

        let tp = ParabolicCylinder::new(Point::thin(0.0, 0.0), 0.5, CylinderKind::ThinPast);
        assert!(tp.contains(&Point::thin(0.3, -0.1)));
        assert!(!tp.contains(&Point::new(0.3, 0.05, -0.1)));
    }

    #[test]
    fn membership_stable_under_index_roundtrip() {
        let g = HalfGrid::unit(17, 9, 8);
        let cyl = ParabolicCylinder::past(Point::thin(0.125, -0.25), 0.4375);
        for k in 0..g.nslices() {
            for j in 0..g.nxn {
                for i in 0..g.nx1 {
                    let p = g.node(i, j, k);
                    // re-derive coordinates from indices a second time
                    let q = Point::new(g.x1(i), g.xn(j), g.t(k));
                    assert_eq!(p.x1.to_bits(), q.x1.to_bits());
                    assert_eq!(cyl.contains(&p), cyl.contains(&q));
                }
            }
        }
    }

    #[test]
    fn grid_invariants() {
        let g = HalfGrid::unit(65, 33, 16);
        assert_eq!(g.hx1, 2.0 / 64.0);
        assert_eq!(g.hxn, 1.0 / 32.0);
        assert_eq!(g.dt, 1.0 / 16.0);
        assert!(g.is_thin(0) && !g.is_thin(1));
        assert!(HalfGrid::new(2, 2, 1, (-1.0, 1.0), 1.0, (-1.0, 0.0)).is_err());
        assert!(HalfGrid::new(5, 5, 1, (1.0, -1.0), 1.0, (-1.0, 0.0)).is_err());
    }

    #[test]
    fn reflection_is_even_and_shares_thin_line() {
        let g = HalfGrid::unit(9, 5, 2);
        let u = SpaceTimeField::from_fn(&g, "xn", |_, xn, _| xn);
        let r = u.reflect_even();
        assert_eq!(r.spec.nxn, 9);
        let mid = 4;
        for k in 0..g.nslices() {
            for j in 0..g.nxn {
                for i in 0..g.nx1 {
                    let a = r.get(i, mid + j, k);
                    let b = r.get(i, mid - j, k);
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        // u = xn reflects to |xn|
        assert_eq!(r.get(0, mid - 2, 0), 2.0 * g.hxn);
        // u = x1 is xn-independent
        let u2 = SpaceTimeField::from_fn(&g, "x1", |x1, _, _| x1);
        let r2 = u2.reflect_even();
        for j in 0..r2.spec.nxn {
            assert_eq!(r2.get(1, j, 0), g.x1(1));
        }
        // u = xn^2 fixes the mirrored node value
        let u3 = SpaceTimeField::from_fn(&g, "xn2", |_, xn, _| xn * xn);
        let r3 = u3.reflect_even();
        assert!((r3.get(3, mid - 1, 1) - g.hxn * g.hxn).abs() < 1e-16);
    }

    #[test]
    fn rescale_identity_and_homogeneous() {
        let g = HalfGrid::unit(33, 17, 8);
        let u = SpaceTimeField::from_fn(&g, "cxn", |_, xn, _| 3.0 * xn);
        let id = u.rescale(1.0).unwrap();
        for k in 0..g.nslices() {
            for j in 0..g.nxn {
                for i in 0..g.nx1 {
                    assert!((id.get(i, j, k) - u.get(i, j, k)).abs() < 1e-13);
                }
            }
        }
        // degree-1 homogeneous fields are fixed points for any r
        let half = u.rescale(0.5).unwrap();
        for j in 0..half.grid.nxn {
            for i in 0..half.grid.nx1 {
                assert!((half.get(i, j, 0) - 3.0 * half.grid.xn(j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rescale_parabolic_scaling() {
        // u = x1^2 + 2t maps to r (x1^2 + 2t)
        let g = HalfGrid::unit(65, 9, 16);
        let u = SpaceTimeField::from_fn(&g, "q", |x1, _, t| x1 * x1 + 2.0 * t);
        let v = u.rescale(0.5).unwrap();
        for k in 0..v.grid.nslices() {
            for i in 0..v.grid.nx1 {
                let want = 0.5 * (v.grid.x1(i).powi(2) + 2.0 * v.grid.t(k));
                assert!(
                    (v.get(i, 0, k) - want).abs() < 1e-12,
                    "i={i} k={k}: {} vs {want}",
                    v.get(i, 0, k)
                );
            }
        }
    }

    #[test]
    fn rescale_composition_on_dyadic_nodes() {
        let g = HalfGrid::unit(65, 33, 16);
        let u = SpaceTimeField::from_fn(&g, "mix", |x1, xn, t| {
            (3.1 * x1).sin() + xn * xn + 0.7 * t
        });
        let a = u.rescale(0.5).unwrap().rescale(0.5).unwrap();
        let b = u.rescale(0.25).unwrap();
        assert_eq!(a.grid.nx1, b.grid.nx1);
        for k in 0..a.grid.nslices() {
            for j in 0..a.grid.nxn {
                for i in 0..a.grid.nx1 {
                    assert!((a.get(i, j, k) - b.get(i, j, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rescale_rejects_domain_exit() {
        let g = HalfGrid::unit(17, 9, 4);
        let u = SpaceTimeField::zeros(&g, "z");
        assert!(matches!(
            u.rescale(2.0),
            Err(GeometryError::DomainExceeded(_))
        ));
    }

    #[test]
    fn triangle_inequality_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let mut p = || {
                Point::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            };
            let (a, b, c) = (p(), p(), p());
            let lhs = parabolic_distance(&a, &c);
            let rhs = parabolic_distance(&a, &b) + parabolic_distance(&b, &c);
            assert!(lhs <= rhs + 1e-12);
        }
    }
}
