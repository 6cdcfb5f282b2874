//! Forward and inverse Lambertian relations: I = A·S recomposition, the
//! full render from albedo/normals/light, de-lighting (A = I/S), and the
//! (n+1)/2 normal-map codec.

use crate::error::{Error, Result};
use crate::grid::{AlbedoMap, Image, Mask, NormalMap, ShadingMap};
use crate::sh::{eval_shading, ShCoefficients};

/// I(p) = A(p)·S(p), shading broadcast across channels, output clamped to [0, 1].
pub fn recompose(albedo: &AlbedoMap, shading: &ShadingMap) -> Result<Image> {
    if albedo.dims() != shading.dims() {
        return Err(Error::DimensionMismatch(
            "albedo and shading differ in size".into(),
        ));
    }
    let (w, h) = albedo.dims();
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let a = albedo.get(x, y);
            let s = shading.get(x, y);
            out.set(
                x,
                y,
                [
                    (a[0] * s).clamp(0.0, 1.0),
                    (a[1] * s).clamp(0.0, 1.0),
                    (a[2] * s).clamp(0.0, 1.0),
                ],
            );
        }
    }
    Ok(out)
}

/// Renders albedo under the given light: the shading is synthesized from the
/// normals, clamped at zero, then multiplied in.
pub fn render(albedo: &AlbedoMap, normals: &NormalMap, light: &ShCoefficients) -> Result<Image> {
    if albedo.dims() != normals.dims() {
        return Err(Error::DimensionMismatch(
            "albedo and normal map differ in size".into(),
        ));
    }
    let mut shading = eval_shading(normals, light, None)?;
    for v in shading.data_mut() {
        *v = v.max(0.0);
    }
    recompose(albedo, &shading)
}

/// De-lighting output: the recovered albedo plus a mask of pixels where the
/// shading fell below epsilon (albedo unreliable there).
#[derive(Debug, Clone)]
pub struct Delighted {
    pub albedo: AlbedoMap,
    pub low_confidence: Mask,
}

/// A(p) = I(p)/max(S(p), epsilon), clamped to [0, 1].
pub fn delight(image: &Image, shading: &ShadingMap, epsilon: f64) -> Result<Delighted> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("delight epsilon must be positive"));
    }
    if image.dims() != shading.dims() {
        return Err(Error::DimensionMismatch(
            "image and shading differ in size".into(),
        ));
    }
    let (w, h) = image.dims();
    let mut albedo = Image::new(w, h);
    let mut low = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let s = shading.get(x, y);
            if s < epsilon {
                low.set(x, y, true);
            }
            let d = s.max(epsilon);
            let i = image.get(x, y);
            albedo.set(
                x,
                y,
                [
                    (i[0] / d).clamp(0.0, 1.0),
                    (i[1] / d).clamp(0.0, 1.0),
                    (i[2] / d).clamp(0.0, 1.0),
                ],
            );
        }
    }
    Ok(Delighted {
        albedo,
        low_confidence: low,
    })
}

/// Encodes normals as an image with channel = (component+1)/2, pre-quantized
/// to the 8-bit grid so a PNG round trip is exact. Invalid pixels encode the
/// zero vector, i.e. mid-gray.
pub fn encode_normal_map(normals: &NormalMap) -> Image {
    let (w, h) = normals.dims();
    Image::from_fn(w, h, |x, y| {
        let n = normals.get(x, y);
        let q = |c: f64| ((c + 1.0) / 2.0 * 255.0).round() / 255.0;
        [q(n[0]), q(n[1]), q(n[2])]
    })
}

/// Decodes an (n+1)/2 encoded image back to unit normals. Pixels decoding to
/// a (near) zero vector are marked invalid.
pub fn decode_normal_map(image: &Image) -> NormalMap {
    let (w, h) = image.dims();
    NormalMap::from_fn(w, h, |x, y| {
        let c = image.get(x, y);
        let v = [c[0] * 2.0 - 1.0, c[1] * 2.0 - 1.0, c[2] * 2.0 - 1.0];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 0.5 {
            [0.0, 0.0, 0.0]
        } else {
            [v[0] / norm, v[1] / norm, v[2] / norm]
        }
    })
}
