//! Dense two-frame motion estimation by polynomial expansion.
//!
//! Each neighbourhood is approximated by `f(p) = p^T A p + b^T p + c`,
//! fitted by Gaussian-weighted least squares. A displacement `d` between two
//! frames satisfies `A d = -(b2 - b1) / 2`, which is solved in the least-squares
//! sense over a box window, refined over a coarse-to-fine pyramid.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pyramid levels stop once the shorter image side would drop below this.
pub const MIN_LEVEL_SIZE: usize = 32;

static WARNED_SMALL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarnebackParams {
    pub levels: usize,
    pub scale: f64,
    pub window: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            levels: 3,
            scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || !(self.scale > 0.0 && self.scale < 1.0)
            || self.window == 0
            || self.iterations == 0
            || self.poly_n == 0
            || !(self.poly_sigma > 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// A row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    #[inline]
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with clamped borders; exact at integer positions.
    #[inline]
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = if fx == 0.0 {
            self.at(y0, x0)
        } else {
            self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx
        };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 {
            self.at(y0 + 1, x0)
        } else {
            self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx
        };
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable correlation with `kernel` (odd length), clamped borders.
    fn correlate(&self, kernel: &[f64], vertical: bool) -> Plane {
        let r = (kernel.len() / 2) as isize;
        let mut out = Plane::zeros(self.height, self.width);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut s = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    s += w * if vertical { self.at(y + o, x) } else { self.at(y, x + o) };
                }
                out.data[y as usize * self.width + x as usize] = s;
            }
        }
        out
    }

    fn gaussian_blur(&self, sigma: f64) -> Plane {
        let radius = ((sigma * 5.0).round() as usize / 2).max(1);
        let mut k: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        self.correlate(&k, true).correlate(&k, false)
    }

    /// Bilinear resize with pixel-centre alignment.
    fn resize(&self, height: usize, width: usize) -> Plane {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Plane::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                out.data[y * width + x] = self.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            }
        }
        out
    }

    /// Mean over a `window x window` box, with clamped borders.
    fn box_blur(&self, window: usize) -> Plane {
        let k = vec![1.0 / window as f64; window];
        let odd = if window % 2 == 1 { k } else { [k, vec![0.0]].concat() };
        self.correlate(&odd, true).correlate(&odd, false)
    }
}

/// Per-pixel quadratic fit coefficients `(r1..r6)` of the basis
/// `1, x, y, x^2, y^2, xy`.
struct Expansion {
    coeffs: [Plane; 6],
}

impl Expansion {
    fn a(&self, i: usize) -> [f64; 3] {
        let c = &self.coeffs;
        [c[3].data[i], c[4].data[i], c[5].data[i] / 2.0]
    }

    fn b(&self, i: usize) -> [f64; 2] {
        [self.coeffs[1].data[i], self.coeffs[2].data[i]]
    }
}

/// Weighted least-squares quadratic fit over a `(2n + 1)^2` neighbourhood.
/// Weights and monomials are separable, so the six moments come from 1-D passes.
fn poly_expand(img: &Plane, n: usize, sigma: f64) -> Expansion {
    let offs: Vec<f64> = (0..=2 * n).map(|i| i as f64 - n as f64).collect();
    let g: Vec<f64> = offs.iter().map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let kern = |p: i32| -> Vec<f64> { g.iter().zip(&offs).map(|(w, x)| w * x.powi(p)).collect() };
    let (k0, k1, k2) = (kern(0), kern(1), kern(2));

    let v0 = img.correlate(&k0, true);
    let v1 = img.correlate(&k1, true);
    let v2 = img.correlate(&k2, true);
    // Moments sum g(x) g(y) x^a y^b f for the six basis monomials.
    let moments = [
        v0.correlate(&k0, false),
        v0.correlate(&k1, false),
        v1.correlate(&k0, false),
        v0.correlate(&k2, false),
        v2.correlate(&k0, false),
        v1.correlate(&k1, false),
    ];

    let basis = |x: f64, y: f64| Vector6::new(1.0, x, y, x * x, y * y, x * y);
    let mut gram = Matrix6::zeros();
    for (wy, y) in g.iter().zip(&offs) {
        for (wx, x) in g.iter().zip(&offs) {
            let b = basis(*x, *y);
            gram += b * b.transpose() * (wx * wy);
        }
    }
    let inv = gram.try_inverse().expect("quadratic fit Gram matrix is positive definite");

    let len = img.data.len();
    let mut coeffs: [Plane; 6] = std::array::from_fn(|_| Plane::zeros(img.height, img.width));
    for i in 0..len {
        let m = Vector6::from_fn(|k, _| moments[k].data[i]);
        let r = inv * m;
        for k in 0..6 {
            coeffs[k].data[i] = r[k];
        }
    }
    Expansion { coeffs }
}

/// Least-squares system entries `G = A^T A` (3 unique) and `h = A^T db`.
fn update_matrices(e1: &Expansion, e2: &Expansion, u: &Plane, v: &Plane) -> [Plane; 5] {
    let (h, w) = (u.height, u.width);
    let mut m: [Plane; 5] = std::array::from_fn(|_| Plane::zeros(h, w));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (u.data[i], v.data[i]);
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            let a1 = e1.a(i);
            let b1 = e1.b(i);
            let a2 = [
                e2.coeffs[3].sample(sy, sx),
                e2.coeffs[4].sample(sy, sx),
                e2.coeffs[5].sample(sy, sx) / 2.0,
            ];
            let b2 = [e2.coeffs[1].sample(sy, sx), e2.coeffs[2].sample(sy, sx)];
            let axx = (a1[0] + a2[0]) / 2.0;
            let ayy = (a1[1] + a2[1]) / 2.0;
            let axy = (a1[2] + a2[2]) / 2.0;
            let bx = -0.5 * (b2[0] - b1[0]) + axx * dx + axy * dy;
            let by = -0.5 * (b2[1] - b1[1]) + axy * dx + ayy * dy;
            m[0].data[i] = axx * axx + axy * axy;
            m[1].data[i] = axy * (axx + ayy);
            m[2].data[i] = axy * axy + ayy * ayy;
            m[3].data[i] = axx * bx + axy * by;
            m[4].data[i] = axy * bx + ayy * by;
        }
    }
    m
}

fn solve_flow(m: &[Plane; 5], window: usize) -> (Plane, Plane) {
    let b: Vec<Plane> = m.iter().map(|p| p.box_blur(window)).collect();
    let (h, w) = (m[0].height, m[0].width);
    let mut u = Plane::zeros(h, w);
    let mut v = Plane::zeros(h, w);
    for i in 0..h * w {
        let (g11, g12, g22, h1, h2) = (b[0].data[i], b[1].data[i], b[2].data[i], b[3].data[i], b[4].data[i]);
        let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
        u.data[i] = (g22 * h1 - g12 * h2) * idet;
        v.data[i] = (g11 * h2 - g12 * h1) * idet;
    }
    (u, v)
}

fn pyramid_sizes(height: usize, width: usize, p: &FarnebackParams) -> Vec<(usize, usize)> {
    let mut sizes = vec![(height, width)];
    for k in 1..p.levels {
        let s = p.scale.powi(k as i32);
        let (h, w) = ((height as f64 * s).round() as usize, (width as f64 * s).round() as usize);
        if h.min(w) < MIN_LEVEL_SIZE {
            if !WARNED_SMALL.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "frames of {height}x{width} support only {} of {} pyramid levels",
                    sizes.len(),
                    p.levels
                );
            }
            break;
        }
        sizes.push((h, w));
    }
    sizes
}

/// Forward flow `(u, v)` such that `next(y + v, x + u) ~ prev(y, x)`.
pub fn flow_pair(prev: &Plane, next: &Plane, p: &FarnebackParams) -> Result<(Plane, Plane)> {
    p.validate()?;
    if (prev.height, prev.width) != (next.height, next.width) {
        return Err(Error::ShapeMismatch {
            context: "flow frames",
            expected: vec![prev.height, prev.width],
            found: vec![next.height, next.width],
        });
    }
    if prev.height.min(prev.width) < p.window {
        return Err(Error::InvalidInput(format!(
            "frames of {}x{} are smaller than the {} px window",
            prev.height, prev.width, p.window
        )));
    }
    let sizes = pyramid_sizes(prev.height, prev.width, p);
    let mut flow: Option<(Plane, Plane)> = None;
    for (k, &(h, w)) in sizes.iter().enumerate().rev() {
        let level = |img: &Plane| {
            if k == 0 {
                img.clone()
            } else {
                let s = p.scale.powi(k as i32);
                img.gaussian_blur((1.0 / s - 1.0) * 0.5).resize(h, w)
            }
        };
        let (l1, l2) = (level(prev), level(next));
        let (mut u, mut v) = match flow.take() {
            None => (Plane::zeros(h, w), Plane::zeros(h, w)),
            Some((cu, cv)) => {
                let (ru, rv) = (cu.resize(h, w), cv.resize(h, w));
                let fy = h as f64 / cu.height as f64;
                let fx = w as f64 / cu.width as f64;
                (
                    Plane::new(h, w, ru.data.iter().map(|d| d * fx).collect()),
                    Plane::new(h, w, rv.data.iter().map(|d| d * fy).collect()),
                )
            }
        };
        let e1 = poly_expand(&l1, p.poly_n, p.poly_sigma);
        let e2 = poly_expand(&l2, p.poly_n, p.poly_sigma);
        for _ in 0..p.iterations {
            let m = update_matrices(&e1, &e2, &u, &v);
            (u, v) = solve_flow(&m, p.window);
        }
        flow = Some((u, v));
    }
    Ok(flow.expect("at least one pyramid level"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, shift: f64) -> Plane {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64 - shift);
                128.0 + 60.0 * (x * 0.31).sin() * (y * 0.23).cos() + 40.0 * ((x + 2.0 * y) * 0.17).sin()
            })
            .collect();
        Plane::new(h, w, data)
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn identical_and_constant_frames_give_zero() {
        let p = FarnebackParams::default();
        let a = pattern(40, 40, 0.0);
        let (u, v) = flow_pair(&a, &a, &p).unwrap();
        assert!(u.data.iter().chain(&v.data).all(|&d| d == 0.0));
        let c = Plane::new(40, 40, vec![7.0; 1600]);
        let (u, v) = flow_pair(&c, &c, &p).unwrap();
        assert!(u.data.iter().chain(&v.data).all(|&d| d == 0.0));
    }

    #[test]
    fn recovers_translation() {
        let p = FarnebackParams::default();
        let (h, w) = (64, 64);
        let (u, v) = flow_pair(&pattern(h, w, 0.0), &pattern(h, w, 3.0), &p).unwrap();
        let inner = |pl: &Plane| -> Vec<f64> {
            (10..h - 10).flat_map(|y| (10..w - 10).map(move |x| (y, x))).map(|(y, x)| pl.data[y * w + x]).collect()
        };
        let (mu, mv) = (median(inner(&u)), median(inner(&v)));
        assert!((mu - 3.0).abs() <= 0.3, "median u {mu}");
        assert!(mv.abs() <= 0.3, "median v {mv}");
    }

    #[test]
    fn rejects_tiny_frames() {
        let a = Plane::new(8, 8, vec![0.0; 64]);
        assert!(flow_pair(&a, &a, &FarnebackParams::default()).is_err());
    }
}
