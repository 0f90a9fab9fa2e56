//! Analytic shape rendering via signed distance functions with soft edges.
//! Geometry is shared across domains; domains only restyle it.

use rand::Rng;

/// The four content classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Triangle = 2,
    Cross = 3,
}

pub const SHAPE_CLASSES: [ShapeClass; 4] = [
    ShapeClass::Circle,
    ShapeClass::Square,
    ShapeClass::Triangle,
    ShapeClass::Cross,
];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        SHAPE_CLASSES.get(i).copied()
    }
}

/// Shared geometry knobs: the same sampler is used for every domain, so the
/// domain shift is style-only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryParams {
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub rotation: f64,
}

impl GeometryParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, image_size: usize) -> Self {
        let half = image_size as f64 / 2.0;
        GeometryParams {
            cx: half + rng.gen_range(-3.0..3.0),
            cy: half + rng.gen_range(-3.0..3.0),
            size: rng.gen_range(7.0..11.0),
            rotation: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

fn sd_box(qx: f64, qy: f64, bx: f64, by: f64) -> f64 {
    let dx = qx.abs() - bx;
    let dy = qy.abs() - by;
    let ox = dx.max(0.0);
    let oy = dy.max(0.0);
    (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
}

fn sd_equilateral_triangle(mut px: f64, mut py: f64, r: f64) -> f64 {
    let k = 3.0f64.sqrt();
    px = px.abs() - r;
    py += r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

/// Signed distance from pixel (x, y) to the shape boundary (negative inside).
pub fn signed_distance(class: ShapeClass, geo: &GeometryParams, x: f64, y: f64) -> f64 {
    let dx = x - geo.cx;
    let dy = y - geo.cy;
    let (sin, cos) = geo.rotation.sin_cos();
    let qx = cos * dx + sin * dy;
    let qy = -sin * dx + cos * dy;
    match class {
        ShapeClass::Circle => (dx * dx + dy * dy).sqrt() - geo.size,
        ShapeClass::Square => {
            let h = geo.size * 0.82;
            sd_box(qx, qy, h, h)
        }
        ShapeClass::Triangle => sd_equilateral_triangle(qx, qy, geo.size),
        ShapeClass::Cross => {
            let arm = geo.size;
            let w = geo.size * 0.30;
            sd_box(qx, qy, arm, w).min(sd_box(qx, qy, w, arm))
        }
    }
}

/// Soft coverage of the filled shape at a pixel (1 inside, 0 outside).
pub fn fill_alpha(sdf: f64, aa: f64) -> f64 {
    (0.5 - sdf / aa).clamp(0.0, 1.0)
}

/// Soft coverage of the outline band of width `thickness`.
pub fn outline_alpha(sdf: f64, thickness: f64, aa: f64) -> f64 {
    (0.5 - (sdf.abs() - thickness / 2.0) / aa).clamp(0.0, 1.0)
}

/// HSV (all in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue and saturation estimated from RGB; hue meaningless when `sat` is 0.
pub fn rgb_to_hue_sat(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let sat = if max > 0.0 { chroma / max } else { 0.0 };
    let hue = if chroma <= 1e-12 {
        0.0
    } else if (max - r).abs() < 1e-12 {
        (((g - b) / chroma).rem_euclid(6.0)) / 6.0
    } else if (max - g).abs() < 1e-12 {
        ((b - r) / chroma + 2.0) / 6.0
    } else {
        ((r - g) / chroma + 4.0) / 6.0
    };
    (hue, sat, chroma)
}
