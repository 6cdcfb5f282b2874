//! Synthetic Lambertian ground truth: sphere-cap normal fields, seeded
//! random lights, rendered image pairs with their ground-truth bundle, and
//! the noise models used by the robustness tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decompose::PairInput;
use crate::error::{Error, Result};
use crate::grid::{AlbedoMap, Image, Mask, NormalMap, ShadingMap};
use crate::lambertian::render;
use crate::sh::{eval_shading, ShCoefficients};

/// Minimum shading a generated light must produce anywhere on the cap.
pub const MIN_CAP_SHADING: f64 = 0.05;

const REJECTION_CAP: usize = 1000;

/// Orthographic unit-sphere cap normals. The mask marks the disk of the
/// given radius fraction; pixels outside the disk are frontal so the map is
/// valid everywhere. Inside the disk z > 0, approaching 0 at the rim.
pub fn sphere_normals(size: usize, radius_fraction: f64) -> (NormalMap, Mask) {
    assert!(size >= 16, "sphere_normals wants size >= 16, got {size}");
    assert!(
        radius_fraction > 0.0 && radius_fraction <= 1.0,
        "radius_fraction must lie in (0, 1]"
    );
    let c = (size as f64 - 1.0) / 2.0;
    let radius = radius_fraction * size as f64 / 2.0;
    let mut mask = Mask::empty(size, size);
    let normals = NormalMap::from_fn(size, size, |x, y| {
        let u = (x as f64 - c) / radius;
        // image y grows downward, normal y points up
        let v = (c - y as f64) / radius;
        let rr = u * u + v * v;
        if rr < 1.0 {
            mask.set(x, y, true);
            [u, v, (1.0 - rr).sqrt()]
        } else {
            [0.0, 0.0, 1.0]
        }
    });
    (normals, mask)
}

fn cap_min_shading(light: &ShCoefficients) -> f64 {
    // Coarse cap probe; shading is smooth so a 48-pixel grid is enough to
    // bound the minimum for rejection purposes.
    let (normals, mask) = sphere_normals(48, 1.0);
    let s = eval_shading(&normals, light, Some(&mask)).expect("probe shading");
    mask.iter_true()
        .map(|(x, y)| s.get(x, y))
        .fold(f64::INFINITY, f64::min)
}

/// Draws a seeded random light with ambient term at least `ambient_floor`,
/// resampled until the sphere-cap shading stays above [`MIN_CAP_SHADING`].
pub fn random_light(seed: u64, ambient_floor: f64) -> Result<ShCoefficients> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..REJECTION_CAP {
        let mut l = [0.0; 9];
        l[0] = ambient_floor + rng.random_range(0.0..0.3_f64) * ambient_floor.abs().max(1.0);
        let spread = 0.22 * l[0];
        for coeff in l.iter_mut().skip(1) {
            *coeff = rng.random_range(-spread..spread);
        }
        let light = ShCoefficients(l);
        if cap_min_shading(&light) >= MIN_CAP_SHADING {
            return Ok(light);
        }
    }
    Err(Error::RejectionCapExceeded(REJECTION_CAP))
}

/// How the prior normals handed to the solver relate to the true normals.
#[derive(Debug, Clone, Copy)]
pub enum PriorSpec {
    /// Prior equals the true normal field.
    Exact,
    /// Each pixel rotated by an angle drawn from [0, max_angle_deg].
    Perturbed { max_angle_deg: f64, seed: u64 },
}

/// Ground-truth bundle kept alongside a generated pair.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub albedo: AlbedoMap,
    pub normals: NormalMap,
    pub shading_i: ShadingMap,
    pub shading_j: ShadingMap,
    pub light_i: ShCoefficients,
    pub light_j: ShCoefficients,
}

/// Renders a pair I = A·S from shared albedo/normals under two lights and
/// returns it with its ground truth. The prior is the true normal field,
/// optionally perturbed per pixel.
pub fn make_pair(
    albedo: &AlbedoMap,
    normals: &NormalMap,
    light_i: &ShCoefficients,
    light_j: &ShCoefficients,
    mask: &Mask,
    prior: PriorSpec,
) -> Result<(PairInput, GroundTruth)> {
    let image_i = render(albedo, normals, light_i)?;
    let image_j = render(albedo, normals, light_j)?;
    let shading_i = eval_shading(normals, light_i, None)?;
    let shading_j = eval_shading(normals, light_j, None)?;

    let prior_map = match prior {
        PriorSpec::Exact => normals.clone(),
        PriorSpec::Perturbed {
            max_angle_deg,
            seed,
        } => perturb_normals(normals, max_angle_deg, seed),
    };

    let input = PairInput {
        image_i,
        image_j,
        mask: mask.clone(),
        prior_i: prior_map.clone(),
        prior_j: prior_map,
    };
    let truth = GroundTruth {
        albedo: albedo.clone(),
        normals: normals.clone(),
        shading_i,
        shading_j,
        light_i: *light_i,
        light_j: *light_j,
    };
    Ok((input, truth))
}

/// Rotates every normal by a random angle in [0, max_angle_deg] about a
/// random tangent axis, then re-projects onto the z >= 0 hemisphere.
pub fn perturb_normals(normals: &NormalMap, max_angle_deg: f64, seed: u64) -> NormalMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = normals.dims();
    NormalMap::from_fn(w, h, |x, y| {
        let n = normals.get(x, y);
        if n[0] == 0.0 && n[1] == 0.0 && n[2] == 0.0 {
            return n;
        }
        let angle = rng.random_range(0.0..max_angle_deg).to_radians();
        // random direction, made tangent to n
        let raw = [
            rng.random_range(-1.0..1.0_f64),
            rng.random_range(-1.0..1.0_f64),
            rng.random_range(-1.0..1.0_f64),
        ];
        let dot = raw[0] * n[0] + raw[1] * n[1] + raw[2] * n[2];
        let mut t = [raw[0] - dot * n[0], raw[1] - dot * n[1], raw[2] - dot * n[2]];
        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        if tn < 1e-9 {
            return n;
        }
        for c in &mut t {
            *c /= tn;
        }
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut out = [
            ca * n[0] + sa * t[0],
            ca * n[1] + sa * t[1],
            ca * n[2] + sa * t[2],
        ];
        if out[2] < 0.0 {
            out[2] = 0.0;
        }
        let norm = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
        for c in &mut out {
            *c /= norm;
        }
        out
    })
}

/// Test albedo patterns; all generated, no data dependency.
#[derive(Debug, Clone, Copy)]
pub enum AlbedoPattern {
    /// Two-tone checkerboard with the given cell size.
    Checker { cell: usize, low: f64, high: f64 },
    /// Radial gradient from `center` at the middle to `edge` at the corners.
    Radial { center: f64, edge: f64 },
    /// Seeded smooth noise in [low, high].
    SmoothNoise { low: f64, high: f64, seed: u64 },
}

pub fn albedo_pattern(size: usize, pattern: AlbedoPattern) -> AlbedoMap {
    match pattern {
        AlbedoPattern::Checker { cell, low, high } => Image::from_fn(size, size, |x, y| {
            let on = (x / cell + y / cell) % 2 == 0;
            let v = if on { high } else { low };
            // mild per-channel tint so channels are not identical
            [v, (v * 0.95).clamp(0.0, 1.0), (v * 0.9).clamp(0.0, 1.0)]
        }),
        AlbedoPattern::Radial { center, edge } => {
            let c = (size as f64 - 1.0) / 2.0;
            let corner = (2.0_f64).sqrt() * c;
            Image::from_fn(size, size, |x, y| {
                let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() / corner;
                let v = center + (edge - center) * d;
                [v, v, v]
            })
        }
        AlbedoPattern::SmoothNoise { low, high, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse lattice, bilinearly interpolated
            let cells = 6;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.random_range(low..high))
                .collect();
            Image::from_fn(size, size, |x, y| {
                let fx = x as f64 / (size - 1) as f64 * cells as f64;
                let fy = y as f64 / (size - 1) as f64 * cells as f64;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (ix1, iy1) = ((ix + 1).min(cells), (iy + 1).min(cells));
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
                let v = at(ix, iy) * (1.0 - tx) * (1.0 - ty)
                    + at(ix1, iy) * tx * (1.0 - ty)
                    + at(ix, iy1) * (1.0 - tx) * ty
                    + at(ix1, iy1) * tx * ty;
                [v, v, v]
            })
        }
    }
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Adds i.i.d. per-channel Gaussian noise and clamps to [0, 1].
pub fn add_gaussian_noise(image: &Image, sigma: f64, seed: u64) -> Image {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    let data = out.data_mut();
    let mut i = 0;
    while i < data.len() {
        let (a, b) = gaussian_pair(&mut rng);
        data[i] = (data[i] + sigma * a).clamp(0.0, 1.0);
        if i + 1 < data.len() {
            data[i + 1] = (data[i + 1] + sigma * b).clamp(0.0, 1.0);
        }
        i += 2;
    }
    out
}

/// Sets a fraction `snr` of pixels to black or white with equal probability.
pub fn add_salt_pepper(image: &Image, snr: f64, seed: u64) -> Image {
    assert!(snr > 0.0 && snr <= 1.0, "snr must lie in (0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.dims();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if rng.random_range(0.0..1.0_f64) < snr {
                let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                out.set(x, y, [v, v, v]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_cap_geometry() {
        let (n, mask) = sphere_normals(33, 1.0);
        // apex
        assert_eq!(n.get(16, 16), [0.0, 0.0, 1.0]);
        // all masked normals unit within 1e-9 and z > 0
        for (x, y) in mask.iter_true() {
            let v = n.get(x, y);
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
            assert!(v[2] > 0.0);
        }
        // rim pixels approach z = 0
        let rim_z = n.get(32, 16)[2];
        assert!(rim_z < 0.3, "rim z = {rim_z}");
    }

    #[test]
    fn random_light_is_deterministic_and_bounded() {
        let a = random_light(7, 2.5).unwrap();
        let b = random_light(7, 2.5).unwrap();
        assert_eq!(a.0, b.0);
        assert!(a.0[0] >= 2.5);
        assert!(cap_min_shading(&a) >= MIN_CAP_SHADING);
        let c = random_light(8, 2.5).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn make_pair_same_light_gives_identical_images() {
        let (normals, mask) = sphere_normals(32, 0.9);
        let albedo = albedo_pattern(32, AlbedoPattern::Checker { cell: 4, low: 0.3, high: 0.6 });
        let l = ShCoefficients::ambient(0.8);
        let (input, _) = make_pair(&albedo, &normals, &l, &l, &mask, PriorSpec::Exact).unwrap();
        assert_eq!(input.image_i, input.image_j);
    }

    #[test]
    fn make_pair_ambient_reproduces_albedo() {
        let (normals, mask) = sphere_normals(32, 0.9);
        let albedo = albedo_pattern(32, AlbedoPattern::Radial { center: 0.9, edge: 0.2 });
        let l = ShCoefficients::ambient(1.0);
        let (input, _) = make_pair(&albedo, &normals, &l, &l, &mask, PriorSpec::Exact).unwrap();
        for i in 0..input.image_i.data().len() {
            assert_relative_eq!(input.image_i.data()[i], albedo.data()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn make_pair_product_identity() {
        let (normals, mask) = sphere_normals(32, 0.9);
        let albedo = albedo_pattern(32, AlbedoPattern::SmoothNoise { low: 0.2, high: 0.55, seed: 3 });
        let li = random_light(11, 2.0).unwrap();
        let lj = random_light(12, 2.0).unwrap();
        let (input, truth) = make_pair(&albedo, &normals, &li, &lj, &mask, PriorSpec::Exact).unwrap();
        // I = A * S pixelwise wherever the product stays within [0, 1]
        let (w, h) = input.image_i.dims();
        for y in 0..h {
            for x in 0..w {
                let a = truth.albedo.get(x, y);
                let s = truth.shading_i.get(x, y).max(0.0);
                let img = input.image_i.get(x, y);
                for c in 0..3 {
                    let prod = a[c] * s;
                    if prod <= 1.0 {
                        assert_relative_eq!(img[c], prod, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn perturbed_prior_stays_within_bound() {
        let (normals, mask) = sphere_normals(32, 0.9);
        let pert = perturb_normals(&normals, 10.0, 5);
        for (x, y) in mask.iter_true() {
            let a = normals.get(x, y);
            let b = pert.get(x, y);
            let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
            let angle = dot.acos().to_degrees();
            assert!(angle <= 10.0 + 1e-6, "angle {angle}");
            let norm = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gaussian_noise_zero_sigma_is_identity() {
        let img = albedo_pattern(24, AlbedoPattern::Checker { cell: 3, low: 0.2, high: 0.8 });
        let noisy = add_gaussian_noise(&img, 0.0, 1);
        assert_eq!(img, noisy);
    }

    #[test]
    fn gaussian_noise_unbiased_on_midgray() {
        // Monte-Carlo oracle: the clamp almost never bites at 0.5 +- 5 sigma,
        // so the sample mean of (noisy - clean) must vanish within 3 sigma/sqrt(n).
        let img = Image::splat(600, 600, [0.5, 0.5, 0.5]);
        let noisy = add_gaussian_noise(&img, 0.1, 99);
        let n = img.data().len() as f64;
        let mean: f64 = noisy
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / n;
        let bound = 3.0 * 0.1 / n.sqrt();
        assert!(mean.abs() < bound, "mean {mean}, bound {bound}");
    }

    #[test]
    fn salt_pepper_full_snr_saturates_everything() {
        let img = Image::splat(16, 16, [0.4, 0.5, 0.6]);
        let noisy = add_salt_pepper(&img, 1.0, 4);
        for y in 0..16 {
            for x in 0..16 {
                let p = noisy.get(x, y);
                assert!(p == [0.0, 0.0, 0.0] || p == [1.0, 1.0, 1.0]);
            }
        }
    }

    #[test]
    fn salt_pepper_fraction_roughly_matches() {
        let img = Image::splat(200, 200, [0.5, 0.5, 0.5]);
        let noisy = add_salt_pepper(&img, 0.01, 42);
        let corrupted = (0..200 * 200)
            .filter(|i| {
                let (x, y) = (i % 200, i / 200);
                noisy.get(x, y) != img.get(x, y)
            })
            .count();
        let frac = corrupted as f64 / 40_000.0;
        assert!((frac - 0.01).abs() < 0.005, "fraction {frac}");
    }

    #[test]
    fn seeded_determinism() {
        let img = albedo_pattern(24, AlbedoPattern::SmoothNoise { low: 0.1, high: 0.9, seed: 2 });
        assert_eq!(
            add_gaussian_noise(&img, 0.1, 7),
            add_gaussian_noise(&img, 0.1, 7)
        );
        assert_eq!(add_salt_pepper(&img, 0.05, 7), add_salt_pepper(&img, 0.05, 7));
        assert_eq!(
            albedo_pattern(24, AlbedoPattern::SmoothNoise { low: 0.1, high: 0.9, seed: 2 }),
            img
        );
    }
}
