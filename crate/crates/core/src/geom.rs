//! Vector geometry, orthonormal frames and the deterministic sampling
//! primitives shared by every other module.

use glam::DVec3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::{Error, Result};

/// A ray with a unit-length direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    pub direction: DVec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: DVec3, direction: DVec3) -> Ray {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + t * self.direction
    }
}

/// Right-handed orthonormal frame with `normal` as the local +z axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthonormalBasis {
    pub tangent: DVec3,
    pub bitangent: DVec3,
    pub normal: DVec3,
}

impl OrthonormalBasis {
    #[inline]
    pub fn to_world(&self, v: DVec3) -> DVec3 {
        v.x * self.tangent + v.y * self.bitangent + v.z * self.normal
    }

    #[inline]
    pub fn to_local(&self, v: DVec3) -> DVec3 {
        DVec3::new(v.dot(self.tangent), v.dot(self.bitangent), v.dot(self.normal))
    }
}

/// Builds a frame around `n`. The tangent is chosen from the plane that
/// excludes the dominant axis of `n` so no near-parallel cross product occurs.
pub fn build_onb(n: DVec3) -> Result<OrthonormalBasis> {
    let len = n.length();
    if !(len > 1e-12) || !len.is_finite() {
        return Err(Error::DegenerateNormal);
    }
    let n = n / len;
    let tangent = if n.x.abs() > n.z.abs() {
        DVec3::new(-n.y, n.x, 0.0).normalize()
    } else {
        DVec3::new(0.0, -n.z, n.y).normalize()
    };
    let bitangent = n.cross(tangent);
    Ok(OrthonormalBasis {
        tangent,
        bitangent,
        normal: n,
    })
}

/// Mirror `v` about `n` (both pointing away from the surface).
#[inline]
pub fn reflect(v: DVec3, n: DVec3) -> DVec3 {
    2.0 * v.dot(n) * n - v
}

/// Counter-based random stream. A stream is addressed by `(seed, key)` and
/// advances a 64-bit word counter, so any worker can reproduce the exact
/// sequence for a pixel or sample without shared state.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: u64) -> RngStream {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(key);
        RngStream { seed, key, inner }
    }

    /// Derives an independent stream for a sub-task.
    pub fn fork(&self, key: u64) -> RngStream {
        RngStream::new(self.seed, mix_key(&[self.key, key]))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform double in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Exposes the underlying generator for `rand` APIs.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Purposes used when keying per-pixel streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Direct = 1,
    Indirect = 2,
    Pose = 3,
    Training = 4,
    Init = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of integers into a single stream key.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Stream key for a pixel/sample/purpose triple.
pub fn stream_key(pixel: u64, sample: u64, purpose: Purpose) -> u64 {
    mix_key(&[pixel, sample, purpose as u64])
}

/// Chooses which cells of an `a x b` grid receive a sample when the grid has
/// more cells than requested samples. Dropped cells are picked at random so
/// every sample stays marginally uniform.
fn stratum_layout(count: usize, rng: &mut RngStream) -> (usize, Vec<usize>) {
    let side = (count as f64).sqrt().ceil() as usize;
    let cells = side * side;
    let mut chosen: Vec<usize> = (0..cells).collect();
    if cells > count {
        for i in 0..count {
            let j = i + rng.next_below(cells - i);
            chosen.swap(i, j);
        }
        chosen.truncate(count);
        chosen.sort_unstable();
    }
    (side, chosen)
}

/// One jittered direction per `(cos theta, phi)` stratum on the unit sphere.
/// Each direction has density `1 / (4 pi)`.
pub fn stratified_sphere_dirs(count: usize, rng: &mut RngStream) -> Vec<DVec3> {
    if count == 0 {
        return Vec::new();
    }
    let (side, cells) = stratum_layout(count, rng);
    cells
        .into_iter()
        .map(|cell| {
            let (row, col) = (cell / side, cell % side);
            let cos_theta = 1.0 - 2.0 * (row as f64 + rng.next_f64()) / side as f64;
            let phi = 2.0 * PI * (col as f64 + rng.next_f64()) / side as f64;
            spherical(cos_theta, phi)
        })
        .collect()
}

/// Stratified directions over the hemisphere around `n` with density
/// `1 / (2 pi)`; every direction satisfies `d . n > 0`.
pub fn stratified_hemisphere_dirs(
    count: usize,
    n: DVec3,
    rng: &mut RngStream,
) -> Result<Vec<DVec3>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let basis = build_onb(n)?;
    let (side, cells) = stratum_layout(count, rng);
    Ok(cells
        .into_iter()
        .map(|cell| {
            let (row, col) = (cell / side, cell % side);
            // (row + u) / side < 1, so cos theta stays strictly positive.
            let cos_theta = 1.0 - (row as f64 + rng.next_f64()) / side as f64;
            let phi = 2.0 * PI * (col as f64 + rng.next_f64()) / side as f64;
            basis.to_world(spherical(cos_theta, phi))
        })
        .collect())
}

#[inline]
pub(crate) fn spherical(cos_theta: f64, phi: f64) -> DVec3 {
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    DVec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta)
}

/// Uniform direction on the sphere from two uniforms.
pub fn uniform_sphere(u1: f64, u2: f64) -> DVec3 {
    spherical(1.0 - 2.0 * u1, 2.0 * PI * u2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_unit(rng: &mut RngStream) -> DVec3 {
        uniform_sphere(rng.next_f64(), rng.next_f64())
    }

    fn assert_orthonormal(b: &OrthonormalBasis) {
        for v in [b.tangent, b.bitangent, b.normal] {
            assert!((v.length() - 1.0).abs() < 1e-6);
        }
        assert!(b.tangent.dot(b.bitangent).abs() < 1e-6);
        assert!(b.tangent.dot(b.normal).abs() < 1e-6);
        assert!(b.bitangent.dot(b.normal).abs() < 1e-6);
        assert!((b.tangent.cross(b.bitangent) - b.normal).length() < 1e-6);
    }

    #[test]
    fn onb_axis_aligned() {
        let b = build_onb(DVec3::Z).unwrap();
        assert!(b.tangent.dot(DVec3::Z).abs() < 1e-12);
        assert!((b.tangent.length() - 1.0).abs() < 1e-12);
        let b = build_onb(DVec3::Y).unwrap();
        assert_eq!(b.normal, DVec3::Y);
        assert_orthonormal(&b);
    }

    #[test]
    fn onb_random_normals() {
        assert_orthonormal(&build_onb(DVec3::ONE / 3f64.sqrt()).unwrap());
        let mut rng = RngStream::new(7, 0);
        for _ in 0..1000 {
            let n = random_unit(&mut rng);
            let b = build_onb(n).unwrap();
            assert_orthonormal(&b);
            let v = random_unit(&mut rng);
            assert!((b.to_world(b.to_local(v)) - v).length() < 1e-5);
        }
    }

    #[test]
    fn onb_rejects_zero() {
        assert!(matches!(build_onb(DVec3::ZERO), Err(Error::DegenerateNormal)));
    }

    #[test]
    fn rng_replays() {
        let mut a = RngStream::new(3, 11);
        let mut b = RngStream::new(3, 11);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.counter(), 32);
        let mut c = RngStream::new(3, 12);
        assert_ne!(xs[0], c.next_u64());
    }

    #[test]
    fn sphere_dirs_basic() {
        let mut rng = RngStream::new(1, 0);
        assert!(stratified_sphere_dirs(0, &mut rng).is_empty());
        let one = stratified_sphere_dirs(1, &mut rng);
        assert_eq!(one.len(), 1);
        assert!((one[0].length() - 1.0).abs() < 1e-12);
        let dirs = stratified_sphere_dirs(10_000, &mut rng);
        let mean = dirs.iter().copied().sum::<DVec3>() / dirs.len() as f64;
        assert!(mean.abs().max_element() < 0.05, "{mean:?}");
    }

    #[test]
    fn sphere_dirs_one_per_stratum() {
        let mut rng = RngStream::new(5, 0);
        let dirs = stratified_sphere_dirs(1024, &mut rng);
        let side = 32;
        let mut seen = vec![false; side * side];
        for d in dirs {
            let row = (((1.0 - d.z) / 2.0) * side as f64).floor() as usize;
            let mut phi = d.y.atan2(d.x);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            let col = ((phi / (2.0 * PI)) * side as f64).floor() as usize;
            let cell = row.min(side - 1) * side + col.min(side - 1);
            assert!(!seen[cell], "two samples in stratum {cell}");
            seen[cell] = true;
        }
    }

    #[test]
    fn trimmed_sphere_dirs_are_unit_and_distinct() {
        let mut rng = RngStream::new(9, 0);
        let dirs = stratified_sphere_dirs(8, &mut rng);
        assert_eq!(dirs.len(), 8);
        for d in &dirs {
            assert!((d.length() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hemisphere_dirs() {
        let mut rng = RngStream::new(2, 0);
        assert!(stratified_hemisphere_dirs(0, DVec3::Z, &mut rng).unwrap().is_empty());
        let dirs = stratified_hemisphere_dirs(64, DVec3::Z, &mut rng).unwrap();
        assert!(dirs.iter().all(|d| d.z > 0.0));
        let dirs = stratified_hemisphere_dirs(4096, DVec3::Z, &mut rng).unwrap();
        let mean_z = dirs.iter().map(|d| d.z).sum::<f64>() / dirs.len() as f64;
        assert!((mean_z - 0.5).abs() < 0.02, "{mean_z}");
        let n = DVec3::new(1.0, -2.0, 0.5).normalize();
        let dirs = stratified_hemisphere_dirs(100, n, &mut rng).unwrap();
        assert!(dirs.iter().all(|d| d.dot(n) > 0.0));
    }

    #[test]
    fn constant_integrand_is_exact() {
        let mut rng = RngStream::new(4, 0);
        for count in [1, 7, 64, 1000] {
            let dirs = stratified_sphere_dirs(count, &mut rng);
            let est = dirs.iter().map(|_| 4.0 * PI).sum::<f64>() / count as f64;
            assert!((est - 4.0 * PI).abs() <= 1e-14 * 4.0 * PI);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = stratified_sphere_dirs(50, &mut RngStream::new(42, 3));
        let b = stratified_sphere_dirs(50, &mut RngStream::new(42, 3));
        assert_eq!(a, b);
    }
}
