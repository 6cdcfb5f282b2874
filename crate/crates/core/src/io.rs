//! File formats: 8-bit PNG images (RGB and grayscale), masks thresholded at
//! 128, SH light text files, the trace CSV, and the result/pair directory
//! layouts used by the command-line tools.
//!
//! All pixel I/O assumes linear values unless a gamma is supplied, in which
//! case stored values v are decoded as v^gamma and encoded as v^(1/gamma).

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::decompose::{DecompositionResult, Member, SolverTrace};
use crate::energy::LossWeights;
use crate::error::Result;
use crate::grid::{Image as Img, Mask, NormalMap, ShadingMap};
use crate::lambertian::{decode_normal_map, encode_normal_map};
use crate::sh::{format_light_text, parse_light_text, ShCoefficients};
use crate::synth::GroundTruth;

/// No gamma correction; stored values are already linear.
pub const LINEAR: f64 = 1.0;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_gamma(v: u8, gamma: f64) -> f64 {
    let x = v as f64 / 255.0;
    if gamma == LINEAR {
        x
    } else {
        x.powf(gamma)
    }
}

fn encode_gamma(v: f64, gamma: f64) -> u8 {
    if gamma == LINEAR {
        to_byte(v)
    } else {
        to_byte(v.clamp(0.0, 1.0).powf(1.0 / gamma))
    }
}

pub fn load_image(path: &Path, gamma: f64) -> Result<Img> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Img::new(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(
            x as usize,
            y as usize,
            [
                decode_gamma(px[0], gamma),
                decode_gamma(px[1], gamma),
                decode_gamma(px[2], gamma),
            ],
        );
    }
    Ok(out)
}

pub fn save_image(path: &Path, img: &Img, gamma: f64) -> Result<()> {
    let (w, h) = img.dims();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = img.get(x as usize, y as usize);
        *px = image::Rgb([
            encode_gamma(v[0], gamma),
            encode_gamma(v[1], gamma),
            encode_gamma(v[2], gamma),
        ]);
    }
    out.save(path)?;
    Ok(())
}

/// Grayscale PNG as a shading map; values land in [0, 1].
pub fn load_shading(path: &Path, gamma: f64) -> Result<ShadingMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ShadingMap::new(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, decode_gamma(px[0], gamma));
    }
    Ok(out)
}

/// Shading clamps to [0, 1] at 8-bit write.
pub fn save_shading(path: &Path, s: &ShadingMap, gamma: f64) -> Result<()> {
    let (w, h) = s.dims();
    let mut out = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = image::Luma([encode_gamma(s.get(x as usize, y as usize), gamma)]);
    }
    out.save(path)?;
    Ok(())
}

/// 8-bit grayscale mask, thresholded at 128.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Mask::empty(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, px[0] >= 128);
    }
    Ok(out)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (w, h) = mask.dims();
    let mut out = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }]);
    }
    out.save(path)?;
    Ok(())
}

/// Normal maps travel as (n+1)/2 encoded RGB PNGs; gamma never applies.
pub fn load_normal_map(path: &Path) -> Result<NormalMap> {
    let img = load_image(path, LINEAR)?;
    Ok(decode_normal_map(&img))
}

pub fn save_normal_map(path: &Path, normals: &NormalMap) -> Result<()> {
    save_image(path, &encode_normal_map(normals), LINEAR)
}

pub fn load_light(path: &Path) -> Result<ShCoefficients> {
    let text = fs::read_to_string(path)?;
    parse_light_text(&text)
}

pub fn save_light(path: &Path, light: &ShCoefficients) -> Result<()> {
    fs::write(path, format_light_text(light))?;
    Ok(())
}

/// trace.csv: a weight-set comment, a header, then one row per iteration
/// with the total and the unweighted per-term values.
pub fn save_trace(path: &Path, trace: &SolverTrace, weights: &LossWeights, preset: &str) -> Result<()> {
    let mut text = format!(
        "# preset={preset} lambda_a={} lambda_s={} lambda_n={} lambda_l={} lambda_irec={} lambda_srec={} xi={}\n",
        weights.lambda_a,
        weights.lambda_s,
        weights.lambda_n,
        weights.lambda_l,
        weights.lambda_irec,
        weights.lambda_srec,
        weights.xi
    );
    text.push_str(
        "iteration,total,albedo_consistency,shading_smoothness,normal_prior,light_fidelity,image_recon,shading_recon\n",
    );
    for row in &trace.rows {
        text.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            row.iteration,
            row.total,
            row.terms.albedo_consistency,
            row.terms.shading_smoothness,
            row.terms.normal_prior,
            row.terms.light_fidelity,
            row.terms.image_recon,
            row.terms.shading_recon,
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes the 10-file result layout: albedo_{i,j}.png, shading_{i,j}.png,
/// normal_{i,j}.png, light_{i,j}.txt, mask.png and trace.csv.
pub fn write_result_dir(
    dir: &Path,
    result: &DecompositionResult,
    mask: &Mask,
    weights: &LossWeights,
    preset: &str,
    gamma: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for member in [Member::I, Member::J] {
        let sfx = member.suffix();
        save_image(&dir.join(format!("albedo_{sfx}.png")), result.albedo(member), gamma)?;
        save_shading(
            &dir.join(format!("shading_{sfx}.png")),
            result.state.shading(member),
            gamma,
        )?;
        save_normal_map(&dir.join(format!("normal_{sfx}.png")), result.state.normal(member))?;
        save_light(&dir.join(format!("light_{sfx}.txt")), result.state.light(member))?;
    }
    save_mask(&dir.join("mask.png"), mask)?;
    save_trace(&dir.join("trace.csv"), &result.trace, weights, preset)?;
    Ok(())
}

/// The component files of one result-directory member, as read back for
/// evaluation or relighting.
#[derive(Debug, Clone)]
pub struct MemberFiles {
    pub albedo: Img,
    pub shading: ShadingMap,
    pub normals: NormalMap,
    pub light: ShCoefficients,
}

pub fn read_member(dir: &Path, member: Member, gamma: f64) -> Result<MemberFiles> {
    let sfx = member.suffix();
    Ok(MemberFiles {
        albedo: load_image(&dir.join(format!("albedo_{sfx}.png")), gamma)?,
        shading: load_shading(&dir.join(format!("shading_{sfx}.png")), gamma)?,
        normals: load_normal_map(&dir.join(format!("normal_{sfx}.png")))?,
        light: load_light(&dir.join(format!("light_{sfx}.txt")))?,
    })
}

/// Writes a synthetic pair directory: the inputs at the top level plus a
/// ground_truth/ subfolder in the result layout (minus trace and mask).
pub fn write_pair_dir(
    dir: &Path,
    input: &crate::decompose::PairInput,
    truth: &GroundTruth,
    gamma: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_image(&dir.join("image_i.png"), &input.image_i, gamma)?;
    save_image(&dir.join("image_j.png"), &input.image_j, gamma)?;
    save_mask(&dir.join("mask.png"), &input.mask)?;
    save_normal_map(&dir.join("prior_i.png"), &input.prior_i)?;
    save_normal_map(&dir.join("prior_j.png"), &input.prior_j)?;

    let gt = dir.join("ground_truth");
    fs::create_dir_all(&gt)?;
    save_image(&gt.join("albedo_i.png"), &truth.albedo, gamma)?;
    save_image(&gt.join("albedo_j.png"), &truth.albedo, gamma)?;
    save_shading(&gt.join("shading_i.png"), &truth.shading_i, gamma)?;
    save_shading(&gt.join("shading_j.png"), &truth.shading_j, gamma)?;
    save_normal_map(&gt.join("normal_i.png"), &truth.normals)?;
    save_normal_map(&gt.join("normal_j.png"), &truth.normals)?;
    save_light(&gt.join("light_i.txt"), &truth.light_i)?;
    save_light(&gt.join("light_j.txt"), &truth.light_j)?;
    Ok(())
}

/// Reads a weights config file (key=value lines, `preset=` rebase).
pub fn load_weights(path: &Path) -> Result<LossWeights> {
    let text = fs::read_to_string(path)?;
    LossWeights::parse_config(&text)
}
