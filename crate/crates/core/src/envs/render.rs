//! Orthographic side-view rasterizer with procedural backdrops.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{derive_seed, Rng, Tensor};
use crate::error::{Error, Result};

/// Wall texture behind the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backdrop {
    Training,
    /// Test backgrounds `1..=7`; 7 keeps the training hue.
    Test(u8),
    /// A seeded stripe pattern with random hues.
    Procedural(u64),
}

impl Backdrop {
    pub const TEST_COUNT: u8 = 7;

    pub fn validate(self) -> Result<Self> {
        match self {
            Backdrop::Test(k) if !(1..=Self::TEST_COUNT).contains(&k) => Err(Error::Contract(
                format!("texture id {k} out of range 1..={}", Self::TEST_COUNT),
            )),
            b => Ok(b),
        }
    }

    /// `training`, `test-k` or `proc-seed`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("unknown backdrop `{s}`"));
        if s == "training" {
            return Ok(Backdrop::Training);
        }
        if let Some(k) = s.strip_prefix("test-") {
            return Backdrop::Test(k.parse().map_err(|_| bad())?).validate();
        }
        if let Some(k) = s.strip_prefix("proc-") {
            return Ok(Backdrop::Procedural(k.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }

    pub fn label(self) -> String {
        match self {
            Backdrop::Training => "training".into(),
            Backdrop::Test(k) => format!("test-{k}"),
            Backdrop::Procedural(s) => format!("proc-{s}"),
        }
    }

    /// Colour of the wall at world position `(x, y)` in meters.
    pub fn color(self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Backdrop::Training => brick(x, y, 0.6, 0.3, [0.70, 0.22, 0.16], [0.78, 0.76, 0.72]),
            Backdrop::Test(1) => stripes(x, 0.8, [0.15, 0.35, 0.85], [0.95, 0.95, 0.95]),
            Backdrop::Test(2) => {
                let c = ((x / 0.7).floor() + (y / 0.7).floor()).rem_euclid(2.0);
                if c < 1.0 {
                    [0.10, 0.55, 0.20]
                } else {
                    [0.05, 0.05, 0.05]
                }
            }
            Backdrop::Test(3) => {
                let n = value_noise(x * 1.5, y * 1.5, 11);
                [0.35 + 0.4 * n, 0.35 + 0.4 * n, 0.40 + 0.4 * n]
            }
            Backdrop::Test(4) => stripes(y, 0.6, [0.95, 0.85, 0.15], [0.45, 0.15, 0.55]),
            Backdrop::Test(5) => stripes(x + y, 0.9, [0.10, 0.80, 0.85], [0.95, 0.55, 0.10]),
            Backdrop::Test(6) => {
                let r = ((x - 3.0).powi(2) + (y - 4.0).powi(2)).sqrt();
                stripes(r, 0.7, [0.55, 0.85, 0.35], [0.25, 0.20, 0.15])
            }
            Backdrop::Test(_) => brick(x, y, 1.1, 0.45, [0.55, 0.08, 0.10], [0.25, 0.18, 0.18]),
            Backdrop::Procedural(seed) => {
                let mut rng = Rng::new(derive_seed(seed, &[0x7e47]));
                let a = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
                let b = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
                let period = rng.uniform(0.3, 1.5);
                let angle = rng.uniform(0.0, std::f64::consts::PI);
                stripes(x * angle.cos() + y * angle.sin(), period, a, b)
            }
        }
    }
}

fn stripes(coord: f64, period: f64, a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    if (coord / period).rem_euclid(1.0) < 0.5 {
        a
    } else {
        b
    }
}

fn brick(x: f64, y: f64, w: f64, h: f64, face: [f64; 3], mortar: [f64; 3]) -> [f64; 3] {
    let row = (y / h).floor();
    let offset = if row.rem_euclid(2.0) < 1.0 { 0.0 } else { 0.5 * w };
    let fx = ((x + offset) / w).rem_euclid(1.0);
    let fy = (y / h).rem_euclid(1.0);
    let gap = 0.08;
    if fx < gap * h / w || fy < gap {
        mortar
    } else {
        face
    }
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = derive_seed(seed, &[ix as u64, iy as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = lattice(ix, iy, seed) * (1.0 - sx) + lattice(ix + 1, iy, seed) * sx;
    let bot = lattice(ix, iy + 1, seed) * (1.0 - sx) + lattice(ix + 1, iy + 1, seed) * sx;
    top * (1.0 - sy) + bot * sy
}

/// Orthographic camera looking at the `x`–`y` plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ball_radius: f64,
    pub robot_size: (f64, f64),
    /// Sub-samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            x_range: (-3.0, 9.0),
            y_range: (0.0, 8.0),
            ball_radius: 0.25,
            robot_size: (0.5, 0.3),
            supersample: 4,
        }
    }
}

pub const BALL_COLOR: [f64; 3] = [1.0, 0.9, 0.1];
pub const ROBOT_COLOR: [f64; 3] = [0.1, 0.2, 0.9];

/// Scene contents; `None` leaves that object out.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scene {
    pub ball: Option<(f64, f64)>,
    pub robot: Option<f64>,
}

impl Camera {
    /// Renders a `3 × size × size` image (channel-major, row 0 at the top),
    /// adds per-channel Gaussian noise of standard deviation `noise_std` and
    /// clamps to `[0, 1]`.
    pub fn render(
        &self,
        scene: &Scene,
        backdrop: Backdrop,
        size: usize,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Vec<f64> {
        let plane = size * size;
        let mut img = vec![0.0; 3 * plane];
        let ss = self.supersample.max(1);
        let weight = 1.0 / (ss * ss) as f64;
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        for i in 0..size {
            for j in 0..size {
                let mut acc = [0.0; 3];
                for si in 0..ss {
                    for sj in 0..ss {
                        let u = (j as f64 + (sj as f64 + 0.5) / ss as f64) / size as f64;
                        let v = (i as f64 + (si as f64 + 0.5) / ss as f64) / size as f64;
                        let x = x0 + u * (x1 - x0);
                        let y = y1 - v * (y1 - y0);
                        let c = self.shade(scene, backdrop, x, y);
                        for k in 0..3 {
                            acc[k] += c[k] * weight;
                        }
                    }
                }
                for k in 0..3 {
                    img[k * plane + i * size + j] = acc[k];
                }
            }
        }
        if noise_std > 0.0 {
            for p in img.iter_mut() {
                *p += noise_std * rng.normal();
            }
        }
        for p in img.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        img
    }

    fn shade(&self, scene: &Scene, backdrop: Backdrop, x: f64, y: f64) -> [f64; 3] {
        if let Some((bx, by)) = scene.ball {
            if (x - bx).powi(2) + (y - by).powi(2) <= self.ball_radius.powi(2) {
                return BALL_COLOR;
            }
        }
        if let Some(d) = scene.robot {
            let (w, h) = self.robot_size;
            if (x - d).abs() <= 0.5 * w && y >= 0.0 && y <= h {
                return ROBOT_COLOR;
            }
        }
        backdrop.color(x, y)
    }
}

/// Writes a `3 × H × W` image in `[0, 1]` as a binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(20 + 3 * plane);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    for p in 0..plane {
        for k in 0..3 {
            out.push((data[k * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
