//! Second-order spherical harmonics: basis evaluation, shading synthesis
//! from a normal map and a 9-vector of lighting coefficients, and recovery
//! of the coefficients from shading + normals by least squares.
//!
//! The basis at a unit normal (x, y, z), in the coefficient order used
//! throughout this crate:
//!
//! ```text
//! h1 = 1/sqrt(4pi)
//! h2 = sqrt(3/4pi) y          h3 = sqrt(3/4pi) z        h4 = sqrt(3/4pi) x
//! h5 = 3 sqrt(5/12pi) x y     h6 = 3 sqrt(5/12pi) y z
//! h7 = 1/2 sqrt(5/4pi) (3z^2 - 1)
//! h8 = 3 sqrt(5/12pi) x z     h9 = 3/2 sqrt(5/12pi) (x^2 - y^2)
//! ```

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::grid::{Mask, NormalMap, ShadingMap};

pub const SH_DIM: usize = 9;

/// 1/sqrt(4pi)
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// sqrt(3/(4pi))
const SH_C1: f64 = 0.488_602_511_902_919_9;
/// 3 sqrt(5/(12pi))
const SH_C2: f64 = 1.092_548_430_592_079_2;
/// (1/2) sqrt(5/(4pi))
const SH_C3: f64 = 0.315_391_565_252_520_05;
/// (3/2) sqrt(5/(12pi))
const SH_C4: f64 = 0.546_274_215_296_039_6;

/// Relative eigenvalue cutoff for treating the 9×9 normal-equation matrix
/// as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Nine lighting coefficients, shared across color channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShCoefficients(pub [f64; SH_DIM]);

impl ShCoefficients {
    pub fn zeros() -> Self {
        Self([0.0; SH_DIM])
    }

    /// Light whose shading is uniformly `value` regardless of the normal.
    pub fn ambient(value: f64) -> Self {
        let mut l = [0.0; SH_DIM];
        l[0] = value / SH_C0;
        Self(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("non-finite lighting coefficient"))
        }
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn relative_error(&self, reference: &Self) -> f64 {
        let diff: f64 = self
            .0
            .iter()
            .zip(reference.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / reference.l2_norm().max(f64::MIN_POSITIVE)
    }

    /// Mirror of the light under x → −x (negates the x-odd basis terms).
    pub fn mirror_x(&self) -> Self {
        let l = self.0;
        Self([l[0], l[1], l[2], -l[3], -l[4], l[5], l[6], -l[7], l[8]])
    }
}

/// The nine basis values at one normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShBasis(pub [f64; SH_DIM]);

impl ShBasis {
    pub fn dot(&self, light: &ShCoefficients) -> f64 {
        self.0
            .iter()
            .zip(light.0.iter())
            .map(|(h, l)| h * l)
            .sum()
    }
}

/// Basis evaluation without validity checks; defined for any (x, y, z).
#[inline]
pub(crate) fn sh_basis_raw(x: f64, y: f64, z: f64) -> [f64; SH_DIM] {
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Jacobian of the basis w.r.t. (x, y, z); rows follow the basis order.
#[inline]
pub(crate) fn sh_basis_jacobian(x: f64, y: f64, z: f64) -> [[f64; 3]; SH_DIM] {
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2 * y, SH_C2 * x, 0.0],
        [0.0, SH_C2 * z, SH_C2 * y],
        [0.0, 0.0, 6.0 * SH_C3 * z],
        [SH_C2 * z, 0.0, SH_C2 * x],
        [2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0],
    ]
}

/// Evaluates the nine basis formulas at a unit normal.
///
/// The normal must be unit length within 1e-6 and finite.
pub fn sh_basis(normal: [f64; 3]) -> Result<ShBasis> {
    let [x, y, z] = normal;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::invalid("non-finite normal"));
    }
    let norm = (x * x + y * y + z * z).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "sh_basis expects a unit normal, got norm {norm}"
        )));
    }
    Ok(ShBasis(sh_basis_raw(x, y, z)))
}

/// Per-pixel shading S(p) = h(N(p))·l over the mask; unmasked pixels are 0.
///
/// With no mask every pixel is evaluated. Masked pixels must carry valid
/// normals.
pub fn eval_shading(
    normals: &NormalMap,
    light: &ShCoefficients,
    mask: Option<&Mask>,
) -> Result<ShadingMap> {
    light.validate()?;
    if let Some(m) = mask {
        if m.dims() != normals.dims() {
            return Err(Error::DimensionMismatch(
                "mask and normal map differ in size".into(),
            ));
        }
    }
    let (w, h) = normals.dims();
    let mut out = ShadingMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.map(|m| m.get(x, y)).unwrap_or(true) {
                if !normals.is_valid(x, y) {
                    return Err(Error::invalid(format!(
                        "invalid normal at masked pixel ({x}, {y})"
                    )));
                }
                let [nx, ny, nz] = normals.get(x, y);
                let basis = sh_basis_raw(nx, ny, nz);
                let s: f64 = basis
                    .iter()
                    .zip(light.0.iter())
                    .map(|(b, l)| b * l)
                    .sum();
                out.set(x, y, s);
            }
        }
    }
    Ok(out)
}

/// Least-squares light recovery result. `rank` counts the eigenvalues of the
/// 9×9 normal-equation matrix above 1e-10 of the largest; a deficient rank
/// means the returned light is the minimum-norm solution.
#[derive(Debug, Clone, Copy)]
pub struct LightSolution {
    pub light: ShCoefficients,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Solves argmin over l of Σ_p (h(N(p))·l − S(p))² on the masked pixels.
///
/// Requires at least nine masked pixels. Rank-deficient normal fields give
/// the minimum-norm solution with the advisory flag set.
pub fn solve_light_lsq(
    shading: &ShadingMap,
    normals: &NormalMap,
    mask: &Mask,
) -> Result<LightSolution> {
    if shading.dims() != normals.dims() || shading.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(
            "shading, normals and mask must share dimensions".into(),
        ));
    }
    let n = mask.count();
    if n < SH_DIM {
        return Err(Error::InsufficientData(format!(
            "light solve needs at least 9 masked pixels, got {n}"
        )));
    }

    let mut gram = SMatrix::<f64, 9, 9>::zeros();
    let mut rhs = SVector::<f64, 9>::zeros();
    for (x, y) in mask.iter_true() {
        if !normals.is_valid(x, y) {
            return Err(Error::invalid(format!(
                "invalid normal at masked pixel ({x}, {y})"
            )));
        }
        let [nx, ny, nz] = normals.get(x, y);
        let h = SVector::<f64, 9>::from(sh_basis_raw(nx, ny, nz));
        gram.syger(1.0, &h, &h, 1.0);
        rhs += h * shading.get(x, y);
    }
    // syger filled the lower triangle; mirror it.
    for r in 0..9 {
        for c in (r + 1)..9 {
            gram[(r, c)] = gram[(c, r)];
        }
    }

    let (solution, rank) = gram_pinv_solve(&gram, &rhs);

    Ok(LightSolution {
        light: ShCoefficients(solution.into()),
        rank,
        rank_deficient: rank < SH_DIM,
    })
}

/// Minimum-norm solve of the symmetric PSD system `gram · x = rhs`,
/// zeroing eigenvalues below 1e-10 of the largest. Returns (x, rank).
pub(crate) fn gram_pinv_solve(
    gram: &SMatrix<f64, 9, 9>,
    rhs: &SVector<f64, 9>,
) -> (SVector<f64, 9>, usize) {
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = RANK_TOL * max_ev;
    let mut solution = SVector::<f64, 9>::zeros();
    let mut rank = 0;
    for k in 0..9 {
        let ev = eig.eigenvalues[k];
        if ev > cutoff && ev > 0.0 {
            rank += 1;
            let u = eig.eigenvectors.column(k);
            solution += u * (u.dot(rhs) / ev);
        }
    }
    (solution, rank)
}

/// Parses a light file: nine whitespace/newline-separated decimal floats.
pub fn parse_light_text(text: &str) -> Result<ShCoefficients> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad light coefficient {tok:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != SH_DIM {
        return Err(Error::Parse(format!(
            "light file must hold exactly 9 coefficients, found {}",
            values.len()
        )));
    }
    let mut l = [0.0; SH_DIM];
    l.copy_from_slice(&values);
    let coeffs = ShCoefficients(l);
    coeffs.validate()?;
    Ok(coeffs)
}

/// Formats a light as one coefficient per line with 12 significant digits.
pub fn format_light_text(light: &ShCoefficients) -> String {
    light
        .0
        .iter()
        .map(|v| format!("{v:.11e}\n"))
        .collect::<Vec<_>>()
        .concat()
}
