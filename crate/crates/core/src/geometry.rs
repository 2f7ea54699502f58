//! Metric kernel for the Poincare ball and the Euclidean unit ball.
//!
//! Everything downstream (type embeddings, the projection model, the
//! evaluation protocol) measures distances through this module. All
//! arithmetic is f64; points are validated once at construction and the
//! distance functions reject rather than clamp invalid inputs.

use thiserror::Error;

/// Margin kept between valid points and the unit sphere.
pub const BALL_EPS: f64 = 1e-5;

/// Largest admissible Euclidean norm for a point in either space.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;

/// Norm below which a vector has no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("point outside the ball: norm {norm} exceeds {MAX_NORM}")]
    OutsideBall { norm: f64 },
    #[error("zero-dimensional point")]
    EmptyPoint,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("near-zero vector (norm {norm:e}) has no direction for the cosine distance")]
    ZeroVector { norm: f64 },
    #[error("loss weights must be nonnegative with alpha + beta > 0 (got alpha={alpha}, beta={beta})")]
    BadWeights { alpha: f64, beta: f64 },
}

/// Which metric space a table or model lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Hyperbolic,
    Euclidean,
}

impl std::fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpaceKind::Hyperbolic => write!(f, "hyperbolic"),
            SpaceKind::Euclidean => write!(f, "euclidean"),
        }
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hyperbolic" => Ok(SpaceKind::Hyperbolic),
            "euclidean" => Ok(SpaceKind::Euclidean),
            other => Err(format!("unknown space '{other}' (expected hyperbolic|euclidean)")),
        }
    }
}

/// A point strictly inside the unit ball (norm <= 1 - BALL_EPS).
///
/// The bound is inclusive of `MAX_NORM` itself: retraction in the graph
/// embedder renormalizes runaway parameters to exactly that norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if coords.is_empty() {
            return Err(GeometryError::EmptyPoint);
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let norm = norm(&coords);
        if norm > MAX_NORM {
            return Err(GeometryError::OutsideBall { norm });
        }
        Ok(Self { coords })
    }

    pub fn origin(dim: usize) -> Self {
        Self { coords: vec![0.0; dim] }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

/// Mixing weights for the combined distance losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, GeometryError> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
            return Err(GeometryError::BadWeights { alpha, beta });
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

/// arcosh via ln(z + sqrt(z^2 - 1)); z is clamped below at 1 to absorb
/// rounding when the argument dips to 1 - 1e-16 for nearly equal points.
fn arcosh(z: f64) -> f64 {
    let z = z.max(1.0);
    (z + (z * z - 1.0).sqrt()).ln()
}

/// The arcosh argument of the Poincare distance between raw coordinates.
fn poincare_arg(u: &[f64], v: &[f64]) -> f64 {
    let diff_sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let den = (1.0 - norm_sq(u)) * (1.0 - norm_sq(v));
    1.0 + 2.0 * diff_sq / den
}

/// Distance in the Poincare ball:
/// arcosh(1 + 2 ||u - v||^2 / ((1 - ||u||^2)(1 - ||v||^2))).
pub fn hyperbolic_distance(u: &BallPoint, v: &BallPoint) -> Result<f64, GeometryError> {
    check_dims(u.coords(), v.coords())?;
    Ok(hyperbolic_distance_raw(u.coords(), v.coords()))
}

/// Unchecked variant for callers that already hold validated points.
pub(crate) fn hyperbolic_distance_raw(u: &[f64], v: &[f64]) -> f64 {
    arcosh(poincare_arg(u, v))
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64, GeometryError> {
    check_dims(x, y)?;
    Ok(euclidean_distance_raw(x, y))
}

pub(crate) fn euclidean_distance_raw(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// 1 - cos(x, y) on raw vectors. A near-zero input has no direction and is
/// rejected: it indicates a broken upstream layer, not a valid query.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64, GeometryError> {
    check_dims(x, y)?;
    let nx = norm(x);
    let ny = norm(y);
    if nx < DEGENERATE_NORM {
        return Err(GeometryError::ZeroVector { norm: nx });
    }
    if ny < DEGENERATE_NORM {
        return Err(GeometryError::ZeroVector { norm: ny });
    }
    Ok(1.0 - dot(x, y) / (nx * ny))
}

/// alpha * d_H(u,v)^2 + beta * d_cos(u,v).
///
/// The squared hyperbolic term keeps the derivative continuous at u = v.
/// The cosine term is skipped entirely when beta = 0, so degenerate
/// directions only error when they would actually be used.
pub fn combined_hyperbolic_loss(
    u: &BallPoint,
    v: &BallPoint,
    w: &LossWeights,
) -> Result<f64, GeometryError> {
    let d = hyperbolic_distance(u, v)?;
    let mut loss = w.alpha * d * d;
    if w.beta > 0.0 {
        loss += w.beta * cosine_distance(u.coords(), v.coords())?;
    }
    Ok(loss)
}

/// alpha * d_E(x,y) + beta * d_cos(x,y).
pub fn combined_euclidean_loss(
    x: &[f64],
    y: &[f64],
    w: &LossWeights,
) -> Result<f64, GeometryError> {
    let mut loss = w.alpha * euclidean_distance(x, y)?;
    if w.beta > 0.0 {
        loss += w.beta * cosine_distance(x, y)?;
    }
    Ok(loss)
}

/// Combined loss for either space, dispatching on `space`.
pub fn combined_loss(
    u: &BallPoint,
    v: &BallPoint,
    w: &LossWeights,
    space: SpaceKind,
) -> Result<f64, GeometryError> {
    match space {
        SpaceKind::Hyperbolic => combined_hyperbolic_loss(u, v, w),
        SpaceKind::Euclidean => combined_euclidean_loss(u.coords(), v.coords(), w),
    }
}

/// Gradient of the combined loss with respect to `u` (`v` is a constant
/// target). Finite everywhere, including u = v for the squared hyperbolic
/// term whose limit factor is handled analytically.
pub fn loss_gradient(
    u: &BallPoint,
    v: &BallPoint,
    w: &LossWeights,
    space: SpaceKind,
) -> Result<Vec<f64>, GeometryError> {
    check_dims(u.coords(), v.coords())?;
    loss_gradient_raw(u.coords(), v.coords(), w, space)
}

pub(crate) fn loss_gradient_raw(
    u: &[f64],
    v: &[f64],
    w: &LossWeights,
    space: SpaceKind,
) -> Result<Vec<f64>, GeometryError> {
    let mut grad = vec![0.0; u.len()];
    match space {
        SpaceKind::Hyperbolic => {
            if w.alpha > 0.0 {
                let g = squared_hyperbolic_grad(u, v);
                for (gi, qi) in grad.iter_mut().zip(g) {
                    *gi += w.alpha * qi;
                }
            }
        }
        SpaceKind::Euclidean => {
            if w.alpha > 0.0 {
                let d = euclidean_distance_raw(u, v);
                if d > DEGENERATE_NORM {
                    for i in 0..u.len() {
                        grad[i] += w.alpha * (u[i] - v[i]) / d;
                    }
                }
            }
        }
    }
    if w.beta > 0.0 {
        let g = cosine_grad(u, v)?;
        for (gi, qi) in grad.iter_mut().zip(g) {
            *gi += w.beta * qi;
        }
    }
    Ok(grad)
}

/// d(d_H^2)/du = g(z) * dz/du with g(z) = 2 arcosh(z) / sqrt(z^2 - 1).
///
/// g has the finite limit 2 at z -> 1+; a two-term series keeps it
/// accurate where the direct quotient would divide ~0 by ~0.
fn squared_hyperbolic_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    let a = 1.0 - norm_sq(u);
    let b = 1.0 - norm_sq(v);
    let diff_sq: f64 = u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum();
    let z = 1.0 + 2.0 * diff_sq / (a * b);
    let s = (z - 1.0).max(0.0);
    let g = if s < 1e-8 {
        2.0 * (1.0 - s / 3.0)
    } else {
        2.0 * arcosh(z) / (z * z - 1.0).sqrt()
    };
    // dz/du = (4/(a b)) (u - v) + (4 diff_sq / (a^2 b)) u
    let c1 = 4.0 / (a * b);
    let c2 = 4.0 * diff_sq / (a * a * b);
    u.iter()
        .zip(v)
        .map(|(ui, vi)| g * (c1 * (ui - vi) + c2 * ui))
        .collect()
}

/// Gradient of d_H (unsquared) w.r.t. u; used by the graph embedder where
/// endpoints of a sampled pair never coincide. Returns zero at u = v.
pub(crate) fn hyperbolic_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    let a = 1.0 - norm_sq(u);
    let b = 1.0 - norm_sq(v);
    let diff_sq: f64 = u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum();
    let z = 1.0 + 2.0 * diff_sq / (a * b);
    let denom_sq = z * z - 1.0;
    if denom_sq < 1e-24 {
        return vec![0.0; u.len()];
    }
    let g = 1.0 / denom_sq.sqrt();
    let c1 = 4.0 / (a * b);
    let c2 = 4.0 * diff_sq / (a * a * b);
    u.iter()
        .zip(v)
        .map(|(ui, vi)| g * (c1 * (ui - vi) + c2 * ui))
        .collect()
}

fn cosine_grad(x: &[f64], y: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let nx = norm(x);
    let ny = norm(y);
    if nx < DEGENERATE_NORM {
        return Err(GeometryError::ZeroVector { norm: nx });
    }
    if ny < DEGENERATE_NORM {
        return Err(GeometryError::ZeroVector { norm: ny });
    }
    let xy = dot(x, y);
    // d/dx [1 - x.y/(|x||y|)] = (x.y/(|x|^3 |y|)) x - y/(|x||y|)
    let cx = xy / (nx * nx * nx * ny);
    let cy = 1.0 / (nx * ny);
    Ok(x.iter().zip(y).map(|(xi, yi)| cx * xi - cy * yi).collect())
}

/// Distance under the given space on raw coordinates.
pub(crate) fn space_distance_raw(space: SpaceKind, x: &[f64], y: &[f64]) -> f64 {
    match space {
        SpaceKind::Hyperbolic => hyperbolic_distance_raw(x, y),
        SpaceKind::Euclidean => euclidean_distance_raw(x, y),
    }
}
