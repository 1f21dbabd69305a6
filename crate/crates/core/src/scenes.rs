//! Deterministic synthetic endoscopic-like scenes with exact ground truth.
//!
//! Geometry. With normalized pixel coordinates `p = (u, v) ∈ [−1, 1]²`, a
//! seeded lumen centre `c₀`, bend vector `κ`, radius `R`, and fold amplitude,
//! frequency and phase `(f, k, φ)`:
//!
//! ```text
//! q     = p − c₀
//! q'    = q − κ·|q|²                    (centreline c₀ + κ·s², bent rings)
//! ρ     = |q'| · (1 + f·sin(k·atan2(q'ᵥ, q'ᵤ) + φ))
//! t     = 1 / (1 + (ρ/R)²)              ∈ (0, 1]
//! depth = d_min + (d_max − d_min)·t
//! ```
//!
//! so the lumen (ρ = 0) is the farthest point.
//!
//! Appearance. A pinhole camera with a co-located light sees the surface
//! point `P = (u·z, v·z, z)`. Pixel colour is
//! `albedo(u, v) · cosθ / (1 + λ·z²) · (1 − 0.25·|p|²/2)`, where `cosθ` is the
//! Lambertian term between the surface normal (from central differences of
//! the analytic depth) and the viewing ray, `λ` the falloff coefficient and
//! the last factor a vignette. Albedo is a reddish tissue tone modulated by
//! seeded sinusoids.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Upper bound on each component of the bend vector `κ`.
    pub curvature_max: f64,
    /// Inverse-square falloff coefficient `λ`.
    pub falloff: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_depth: 0.1,
            max_depth: 15.0,
            radius_min: 0.2,
            radius_max: 0.5,
            curvature_max: 0.4,
            falloff: 0.5,
            seed: 1234,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene size {}×{} below the 16×16 minimum",
                self.height, self.width
            )));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::Config(format!(
                "scene.min_depth {} must be positive and below scene.max_depth {}",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("scene.radius_min must be positive and ≤ radius_max".into()));
        }
        if !(self.curvature_max >= 0.0 && self.falloff >= 0.0) {
            return Err(Error::Config("scene.curvature_max and falloff must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-scene random parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TubeParams {
    pub center: (f64, f64),
    pub bend: (f64, f64),
    pub radius: f64,
    pub fold_amp: f64,
    pub fold_freq: f64,
    pub fold_phase: f64,
    pub albedo_freq: [(f64, f64, f64); 3],
}

impl TubeParams {
    pub fn sample(cfg: &SceneConfig, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let c = cfg.curvature_max;
        let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let center = (sym(&mut rng, 0.35), sym(&mut rng, 0.35));
        let bend = (sym(&mut rng, c), sym(&mut rng, c));
        let radius = if cfg.radius_max > cfg.radius_min {
            rng.random_range(cfg.radius_min..cfg.radius_max)
        } else {
            cfg.radius_min
        };
        let fold_amp = rng.random_range(0.0..0.25);
        let fold_freq = f64::from(rng.random_range(3u32..=7));
        let fold_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut albedo_freq = [(0.0, 0.0, 0.0); 3];
        for f in &mut albedo_freq {
            *f = (
                rng.random_range(2.0..9.0),
                rng.random_range(2.0..9.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Self {
            center,
            bend,
            radius,
            fold_amp,
            fold_freq,
            fold_phase,
            albedo_freq,
        }
    }

    /// A straight, fold-free tube centred in the image.
    pub fn straight(radius: f64) -> Self {
        Self {
            center: (0.0, 0.0),
            bend: (0.0, 0.0),
            radius,
            fold_amp: 0.0,
            fold_freq: 0.0,
            fold_phase: 0.0,
            albedo_freq: [(1.0, 1.0, 0.0); 3],
        }
    }

    /// Normalized depth `t ∈ (0, 1]` at `(u, v)`.
    pub fn t(&self, u: f64, v: f64) -> f64 {
        let (qx, qy) = (u - self.center.0, v - self.center.1);
        let r2 = qx * qx + qy * qy;
        let (bx, by) = (qx - self.bend.0 * r2, qy - self.bend.1 * r2);
        let theta = by.atan2(bx);
        let rho = (bx * bx + by * by).sqrt() * (1.0 + self.fold_amp * (self.fold_freq * theta + self.fold_phase).sin());
        let x = rho / self.radius;
        1.0 / (1.0 + x * x)
    }

    fn albedo(&self, u: f64, v: f64) -> [f64; 3] {
        let base = [0.85, 0.42, 0.36];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let (fu, fv, ph) = self.albedo_freq[i];
            *o = base[i] * (1.0 + 0.12 * (fu * u + ph).sin() * (fv * v - ph).cos());
        }
        out
    }
}

/// One generated frame: `rgb[3×H×W]` in `[0, 1]` and `depth[H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
}

fn pixel_coord(i: usize, extent: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / extent as f64 - 1.0
}

/// Renders a scene with explicit tube parameters.
pub fn render_scene<T: Scalar>(cfg: &SceneConfig, params: &TubeParams) -> Result<Scene<T>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let span = cfg.max_depth - cfg.min_depth;
    let depth_at = |u: f64, v: f64| cfg.min_depth + span * params.t(u, v);
    let step = 1e-3;
    let mut depth = Vec::with_capacity(h * w);
    let mut rgb = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        let v = pixel_coord(y, h);
        for x in 0..w {
            let u = pixel_coord(x, w);
            let z = depth_at(u, v);
            depth.push(T::of(z));
            let zu = (depth_at(u + step, v) - depth_at(u - step, v)) / (2.0 * step);
            let zv = (depth_at(u, v + step) - depth_at(u, v - step)) / (2.0 * step);
            // Tangents of P(u, v) = (u·z, v·z, z).
            let tu = [z + u * zu, v * zu, zu];
            let tv = [u * zv, z + v * zv, zv];
            let n = [
                tu[1] * tv[2] - tu[2] * tv[1],
                tu[2] * tv[0] - tu[0] * tv[2],
                tu[0] * tv[1] - tu[1] * tv[0],
            ];
            let ray = [u, v, 1.0];
            let dotp = n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2];
            let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let rn = (u * u + v * v + 1.0).sqrt();
            let cos = if nn > 0.0 { (dotp / (nn * rn)).abs() } else { 1.0 };
            let light = cos / (1.0 + cfg.falloff * z * z);
            let vignette = 1.0 - 0.25 * (u * u + v * v) / 2.0;
            let albedo = params.albedo(u, v);
            for (c, a) in albedo.iter().enumerate() {
                rgb[(c * h + y) * w + x] = T::of((a * light * vignette).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Scene {
        rgb: Tensor::new([3, h, w], rgb)?,
        depth: Tensor::new([h, w], depth)?,
    })
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene<T: Scalar>(cfg: &SceneConfig, index: u64) -> Result<Scene<T>> {
    render_scene(cfg, &TubeParams::sample(cfg, index))
}

/// A contiguous range of scene indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSet {
    pub indices: Range<u64>,
}

impl SceneSet {
    pub fn len(&self) -> usize {
        (self.indices.end - self.indices.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize) -> u64 {
        self.indices.start + i as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: SceneSet,
    pub val: SceneSet,
    pub test: SceneSet,
}

pub const DEFAULT_SPLIT: (usize, usize, usize) = (512, 64, 32);

/// Disjoint consecutive index ranges: train, then validation, then test.
pub fn make_split(n_train: usize, n_val: usize, n_test: usize) -> Result<Split> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split sizes must be positive, got {n_train}/{n_val}/{n_test}"
        )));
    }
    let (a, b, c) = (n_train as u64, n_val as u64, n_test as u64);
    Ok(Split {
        train: SceneSet { indices: 0..a },
        val: SceneSet { indices: a..a + b },
        test: SceneSet { indices: a + b..a + b + c },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        let a = generate_scene::<f32>(&cfg, 3).unwrap();
        let b = generate_scene::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene::<f32>(&cfg, 4).unwrap());
    }

    #[test]
    fn depth_and_rgb_ranges() {
        let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
        for i in 0..8 {
            let s = generate_scene::<f64>(&cfg, i).unwrap();
            assert!(s.depth.data().iter().all(|&d| d >= cfg.min_depth && d <= cfg.max_depth));
            assert!(s.rgb.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn straight_tube_lumen_is_deepest() {
        let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
        let s = render_scene::<f64>(&cfg, &TubeParams::straight(0.3)).unwrap();
        let centre = s.depth.at2(16, 16);
        for &(y, x) in &[(0, 0), (0, 16), (31, 31), (16, 0)] {
            assert!(centre > s.depth.at2(y, x));
        }
    }

    #[test]
    fn split_defaults_and_disjointness() {
        let (a, b, c) = DEFAULT_SPLIT;
        let s = make_split(a, b, c).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (512, 64, 32));
        assert!(s.train.indices.end <= s.val.indices.start);
        assert!(s.val.indices.end <= s.test.indices.start);
        assert!(make_split(1, 0, 1).is_err());
    }

    #[test]
    fn small_scenes_are_rejected() {
        let cfg = SceneConfig { height: 8, width: 64, ..SceneConfig::default() };
        assert!(matches!(generate_scene::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}
