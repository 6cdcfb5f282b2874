//! The loss terms of the decomposition energy and their analytic gradients:
//! albedo consistency, shading smoothness, normal prior, light fidelity,
//! image reconstruction and shading reconstruction, plus the phase-dependent
//! weighted total.
//!
//! Conventions: every per-pixel loss is a mean over masked pixels (and
//! channels where applicable); the light-fidelity term is a plain ℓ₁ over
//! the nine coefficients. ℓ₁ subgradients at zero are zero. The smoothness
//! denominator max(|∇S|, ξ) is treated as a constant during differentiation.

use nalgebra::{SMatrix, SVector};

use crate::decompose::{DecompositionState, PairInput};
use crate::error::{Error, Result};
use crate::grid::{AlbedoMap, Mask, NormalMap, ShadingMap};
use crate::sh::{gram_pinv_solve, sh_basis_jacobian, sh_basis_raw, ShCoefficients, SH_DIM};

/// The λ set and the smoothness constant ξ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_n: f64,
    pub lambda_l: f64,
    pub lambda_irec: f64,
    pub lambda_srec: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::default_preset()
    }
}

impl LossWeights {
    /// Training-phase weights: λ_a=0.25, λ_s=0.1, λ_n=0.5, λ_l=0.01,
    /// λ_Irec=0.25, λ_Srec=0.01, ξ=0.01.
    pub fn default_preset() -> Self {
        Self {
            lambda_a: 0.25,
            lambda_s: 0.1,
            lambda_n: 0.5,
            lambda_l: 0.01,
            lambda_irec: 0.25,
            lambda_srec: 0.01,
            xi: 0.01,
        }
    }

    /// Relit-pair (DPR-style) weights: λ_s=0.01, λ_Irec=0.25, λ_a=0.15,
    /// other values as in the default preset.
    pub fn dpr_preset() -> Self {
        Self {
            lambda_a: 0.15,
            lambda_s: 0.01,
            ..Self::default_preset()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_preset()),
            "dpr" => Some(Self::dpr_preset()),
            _ => None,
        }
    }

    /// Parses a plain-text key=value config. Keys: `preset`, `lambda_a`,
    /// `lambda_s`, `lambda_n`, `lambda_l`, `lambda_irec`, `lambda_srec`,
    /// `xi`. Lines starting with `#` and blank lines are ignored; a preset
    /// line rebases the weights, later keys override individual values.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut w = Self::default_preset();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                w = Self::preset(value)
                    .ok_or_else(|| Error::Parse(format!("unknown preset {value:?}")))?;
                continue;
            }
            let num: f64 = value
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad value {value:?}: {e}", lineno + 1)))?;
            match key {
                "lambda_a" => w.lambda_a = num,
                "lambda_s" => w.lambda_s = num,
                "lambda_n" => w.lambda_n = num,
                "lambda_l" => w.lambda_l = num,
                "lambda_irec" => w.lambda_irec = num,
                "lambda_srec" => w.lambda_srec = num,
                "xi" => w.xi = num,
                _ => return Err(Error::Parse(format!("unknown weight key {key:?}"))),
            }
        }
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_a,
            self.lambda_s,
            self.lambda_n,
            self.lambda_l,
            self.lambda_irec,
            self.lambda_srec,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(Error::invalid("xi must be a positive real"));
        }
        Ok(())
    }
}

/// Which terms are active and which variables receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Albedo/shading stage: λ_Irec·L_Irec + λ_a·L_a + λ_s·L_s over A, S.
    Asd,
    /// Normal/light stage: λ_n·L_n + λ_l·L_l + λ_Srec·L_Srec over N, l.
    Nld,
    /// All six terms over all variables.
    Full,
}

/// Gradient-flow variants for the derived quantities (ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachMode {
    /// Nothing detached: l̂ is a live function of the shading.
    None,
    /// The computed light l̂ is a fixed target (default; "w/ DL").
    DetachLight,
    /// l̂ fixed and the predicted shading detached in L_Srec ("w/ DLS").
    DetachLightAndShading,
}

/// Fixed least-squares light targets for the fidelity term.
#[derive(Debug, Clone, Copy)]
pub struct LightTargets {
    pub lhat_i: ShCoefficients,
    pub lhat_j: ShCoefficients,
}

/// Unweighted values of the six terms. Terms inactive in the evaluated
/// phase are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues {
    pub albedo_consistency: f64,
    pub shading_smoothness: f64,
    pub normal_prior: f64,
    pub light_fidelity: f64,
    pub image_recon: f64,
    pub shading_recon: f64,
}

impl TermValues {
    pub fn weighted_total(&self, w: &LossWeights, phase: Phase) -> f64 {
        let asd = w.lambda_irec * self.image_recon
            + w.lambda_a * self.albedo_consistency
            + w.lambda_s * self.shading_smoothness;
        let nld = w.lambda_n * self.normal_prior
            + w.lambda_l * self.light_fidelity
            + w.lambda_srec * self.shading_recon;
        match phase {
            Phase::Asd => asd,
            Phase::Nld => nld,
            Phase::Full => asd + nld,
        }
    }
}

/// Gradient of the weighted total with respect to every state variable.
/// Entries for variables outside the phase's free set are zero.
#[derive(Debug, Clone)]
pub struct StateGrad {
    pub albedo_i: Vec<f64>,
    pub albedo_j: Vec<f64>,
    pub shading_i: Vec<f64>,
    pub shading_j: Vec<f64>,
    pub normal_i: Vec<f64>,
    pub normal_j: Vec<f64>,
    pub light_i: [f64; SH_DIM],
    pub light_j: [f64; SH_DIM],
}

impl StateGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            albedo_i: vec![0.0; 3 * n],
            albedo_j: vec![0.0; 3 * n],
            shading_i: vec![0.0; n],
            shading_j: vec![0.0; n],
            normal_i: vec![0.0; 3 * n],
            normal_j: vec![0.0; 3 * n],
            light_i: [0.0; SH_DIM],
            light_j: [0.0; SH_DIM],
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0_f64;
        for v in self
            .albedo_i
            .iter()
            .chain(&self.albedo_j)
            .chain(&self.shading_i)
            .chain(&self.shading_j)
            .chain(&self.normal_i)
            .chain(&self.normal_j)
            .chain(&self.light_i)
            .chain(&self.light_j)
        {
            m = m.max(v.abs());
        }
        m
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Mean masked ℓ₁ distance between paired albedos, with gradients.
pub fn loss_albedo_consistency(
    a_i: &AlbedoMap,
    a_j: &AlbedoMap,
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(a_i.dims(), a_j.dims(), "albedo pair")?;
    check_dims(a_i.dims(), mask.dims(), "albedo vs mask")?;
    let m = mask.require_nonempty("albedo consistency")? as f64;
    let norm = 1.0 / (3.0 * m);
    let mut value = 0.0;
    let mut gi = vec![0.0; a_i.data().len()];
    let mut gj = vec![0.0; a_j.data().len()];
    for (x, y) in mask.iter_true() {
        let base = a_i.idx(x, y);
        for c in 0..3 {
            let d = a_i.data()[base + c] - a_j.data()[base + c];
            value += d.abs() * norm;
            let s = sign(d) * norm;
            gi[base + c] = s;
            gj[base + c] = -s;
        }
    }
    Ok((value, gi, gj))
}

/// Gradient style for the smoothness term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SmoothGradStyle {
    /// Published semantics: denominator held constant during
    /// differentiation, so saturated pixels keep a sign(∇S)/|∇S| pull.
    StopGradient,
    /// Exact a.e. derivative of the value: zero on the saturation plateau.
    /// The two coincide wherever |∇S| < ξ.
    TrueAe,
}

/// Forward difference toward +x/+y with replication at image borders and
/// across the mask boundary (differences to unmasked neighbours are zero).
#[inline]
fn forward_diff(s: &ShadingMap, mask: &Mask, x: usize, y: usize, dx: usize, dy: usize) -> Option<f64> {
    let (nx, ny) = (x + dx, y + dy);
    if nx >= s.width() || ny >= s.height() || !mask.get(nx, ny) {
        return None;
    }
    Some(s.get(nx, ny) - s.get(x, y))
}

pub(crate) fn loss_shading_smoothness_impl(
    s: &ShadingMap,
    mask: &Mask,
    xi: f64,
    style: SmoothGradStyle,
) -> Result<(f64, Vec<f64>)> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::invalid("xi must be positive"));
    }
    check_dims(s.dims(), mask.dims(), "shading vs mask")?;
    let m = mask.require_nonempty("shading smoothness")? as f64;
    let norm = 1.0 / m;
    let mut value = 0.0;
    let mut grad = vec![0.0; s.data().len()];
    for (x, y) in mask.iter_true() {
        for (dx, dy) in [(1, 0), (0, 1)] {
            let Some(g) = forward_diff(s, mask, x, y, dx, dy) else {
                continue;
            };
            let denom = g.abs().max(xi);
            value += g.abs() / denom * norm;
            let saturated = g.abs() > xi;
            let coeff = match style {
                SmoothGradStyle::StopGradient => sign(g) / denom * norm,
                SmoothGradStyle::TrueAe => {
                    if saturated {
                        0.0
                    } else {
                        sign(g) / denom * norm
                    }
                }
            };
            grad[s.idx(x + dx, y + dy)] += coeff;
            grad[s.idx(x, y)] -= coeff;
        }
    }
    Ok((value, grad))
}

/// Edge-preserving smoothness |∇S|/max(|∇S|, ξ), mean over masked pixels,
/// summed over the two gradient directions. The returned gradient treats the
/// denominator as a constant.
pub fn loss_shading_smoothness(s: &ShadingMap, mask: &Mask, xi: f64) -> Result<(f64, Vec<f64>)> {
    loss_shading_smoothness_impl(s, mask, xi, SmoothGradStyle::StopGradient)
}

/// Mean masked squared distance of both normal maps from their priors.
pub fn loss_normal_prior(
    n_i: &NormalMap,
    n_j: &NormalMap,
    nbar_i: &NormalMap,
    nbar_j: &NormalMap,
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(n_i.dims(), n_j.dims(), "normal pair")?;
    check_dims(n_i.dims(), nbar_i.dims(), "normals vs prior")?;
    check_dims(n_i.dims(), mask.dims(), "normals vs mask")?;
    let m = mask.require_nonempty("normal prior")? as f64;
    let norm = 1.0 / m;
    let mut value = 0.0;
    let mut gi = vec![0.0; n_i.data().len()];
    let mut gj = vec![0.0; n_j.data().len()];
    for (x, y) in mask.iter_true() {
        let base = n_i.idx(x, y);
        for c in 0..3 {
            let di = n_i.data()[base + c] - nbar_i.data()[base + c];
            let dj = n_j.data()[base + c] - nbar_j.data()[base + c];
            value += (di * di + dj * dj) * norm;
            gi[base + c] = 2.0 * di * norm;
            gj[base + c] = 2.0 * dj * norm;
        }
    }
    Ok((value, gi, gj))
}

/// ℓ₁ distance of both lights from their fixed least-squares targets.
/// The targets carry no gradient.
pub fn loss_light_fidelity(
    l_i: &ShCoefficients,
    l_j: &ShCoefficients,
    lhat_i: &ShCoefficients,
    lhat_j: &ShCoefficients,
) -> (f64, [f64; SH_DIM], [f64; SH_DIM]) {
    let mut value = 0.0;
    let mut gi = [0.0; SH_DIM];
    let mut gj = [0.0; SH_DIM];
    for k in 0..SH_DIM {
        let di = l_i.0[k] - lhat_i.0[k];
        let dj = l_j.0[k] - lhat_j.0[k];
        value += di.abs() + dj.abs();
        gi[k] = sign(di);
        gj[k] = sign(dj);
    }
    (value, gi, gj)
}

/// Gradients of the image-reconstruction term for one pair member.
struct IrecGrads {
    albedo: Vec<f64>,
    shading: Vec<f64>,
}

fn image_recon_member(
    image: &crate::grid::Image,
    albedo: &AlbedoMap,
    shading: &ShadingMap,
    mask: &Mask,
) -> Result<(f64, IrecGrads)> {
    check_dims(image.dims(), albedo.dims(), "image vs albedo")?;
    check_dims(image.dims(), shading.dims(), "image vs shading")?;
    check_dims(image.dims(), mask.dims(), "image vs mask")?;
    let m = mask.require_nonempty("image reconstruction")? as f64;
    let norm = 1.0 / (3.0 * m);
    let mut value = 0.0;
    let mut ga = vec![0.0; albedo.data().len()];
    let mut gs = vec![0.0; shading.data().len()];
    for (x, y) in mask.iter_true() {
        let base = albedo.idx(x, y);
        let si = shading.idx(x, y);
        let s = shading.data()[si];
        for c in 0..3 {
            let a = albedo.data()[base + c];
            let r = image.data()[base + c] - a * s;
            value += r.abs() * norm;
            let sg = sign(r) * norm;
            ga[base + c] = -sg * s;
            gs[si] -= sg * a;
        }
    }
    Ok((value, IrecGrads { albedo: ga, shading: gs }))
}

/// Mean masked ℓ₁ of I − A·S summed over both pair members. Returns
/// (value, dA_i, dA_j, dS_i, dS_j).
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn loss_image_recon(
    i_i: &crate::grid::Image,
    i_j: &crate::grid::Image,
    a_i: &AlbedoMap,
    a_j: &AlbedoMap,
    s_i: &ShadingMap,
    s_j: &ShadingMap,
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (vi, gi) = image_recon_member(i_i, a_i, s_i, mask)?;
    let (vj, gj) = image_recon_member(i_j, a_j, s_j, mask)?;
    Ok((vi + vj, gi.albedo, gj.albedo, gi.shading, gj.shading))
}

/// Mean masked ℓ₁ of S − Ŝ summed over both members. Returns
/// (value, dS_i, dS_j, dŜ_i, dŜ_j).
#[allow(clippy::type_complexity)]
pub fn loss_shading_recon(
    s_i: &ShadingMap,
    s_j: &ShadingMap,
    shat_i: &ShadingMap,
    shat_j: &ShadingMap,
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_dims(s_i.dims(), shat_i.dims(), "shading vs reconstruction")?;
    check_dims(s_i.dims(), mask.dims(), "shading vs mask")?;
    check_dims(s_i.dims(), s_j.dims(), "shading pair")?;
    let m = mask.require_nonempty("shading reconstruction")? as f64;
    let norm = 1.0 / m;
    let mut value = 0.0;
    let mut gsi = vec![0.0; s_i.data().len()];
    let mut gsj = vec![0.0; s_j.data().len()];
    let mut ghi = vec![0.0; s_i.data().len()];
    let mut ghj = vec![0.0; s_j.data().len()];
    for (x, y) in mask.iter_true() {
        let idx = s_i.idx(x, y);
        let ri = s_i.data()[idx] - shat_i.data()[idx];
        let rj = s_j.data()[idx] - shat_j.data()[idx];
        value += (ri.abs() + rj.abs()) * norm;
        gsi[idx] = sign(ri) * norm;
        gsj[idx] = sign(rj) * norm;
        ghi[idx] = -sign(ri) * norm;
        ghj[idx] = -sign(rj) * norm;
    }
    Ok((value, gsi, gsj, ghi, ghj))
}

/// Everything total_energy produces: the weighted total, the unweighted
/// term values, and the gradient for the phase's free variables.
#[derive(Debug, Clone)]
pub struct EnergyEval {
    pub total: f64,
    pub terms: TermValues,
    pub grad: StateGrad,
}

/// Shading synthesized from the state's normals and light on the mask,
/// via the raw basis (no unit check; the solver keeps normals projected).
fn synthesize_shading(normals: &NormalMap, light: &ShCoefficients, mask: &Mask) -> ShadingMap {
    let (w, h) = normals.dims();
    let mut out = ShadingMap::new(w, h);
    for (x, y) in mask.iter_true() {
        let [nx, ny, nz] = normals.get(x, y);
        let basis = sh_basis_raw(nx, ny, nz);
        let s: f64 = basis.iter().zip(light.0.iter()).map(|(b, l)| b * l).sum();
        out.set(x, y, s);
    }
    out
}

/// Live least-squares light from (shading, prior normals) together with the
/// Gram matrix needed for the detach-free gradient path.
fn live_light(
    shading: &ShadingMap,
    prior: &NormalMap,
    mask: &Mask,
) -> Result<(ShCoefficients, SMatrix<f64, 9, 9>)> {
    let n = mask.count();
    if n < SH_DIM {
        return Err(Error::InsufficientData(format!(
            "live light solve needs at least 9 masked pixels, got {n}"
        )));
    }
    let mut gram = SMatrix::<f64, 9, 9>::zeros();
    let mut rhs = SVector::<f64, 9>::zeros();
    for (x, y) in mask.iter_true() {
        let [nx, ny, nz] = prior.get(x, y);
        let h = SVector::<f64, 9>::from(sh_basis_raw(nx, ny, nz));
        gram.syger(1.0, &h, &h, 1.0);
        rhs += h * shading.get(x, y);
    }
    for r in 0..9 {
        for c in (r + 1)..9 {
            gram[(r, c)] = gram[(c, r)];
        }
    }
    let (sol, _rank) = gram_pinv_solve(&gram, &rhs);
    Ok((ShCoefficients(sol.into()), gram))
}

/// Weighted sum of the phase's active terms with the gradient over the
/// phase's free variables. `targets` supplies the fixed l̂ except in
/// Full/None, where l̂ is recomputed from the current shading and the prior.
pub fn total_energy(
    state: &DecompositionState,
    input: &PairInput,
    targets: &LightTargets,
    weights: &LossWeights,
    phase: Phase,
    detach: DetachMode,
) -> Result<EnergyEval> {
    total_energy_with_style(state, input, targets, weights, phase, detach, SmoothGradStyle::StopGradient)
}

pub(crate) fn total_energy_with_style(
    state: &DecompositionState,
    input: &PairInput,
    targets: &LightTargets,
    weights: &LossWeights,
    phase: Phase,
    detach: DetachMode,
    smooth_style: SmoothGradStyle,
) -> Result<EnergyEval> {
    weights.validate()?;
    let (w, h) = input.image_i.dims();
    let mask = &input.mask;
    let mut terms = TermValues::default();
    let mut grad = StateGrad::zeros(w, h);

    let asd_active = matches!(phase, Phase::Asd | Phase::Full);
    let nld_active = matches!(phase, Phase::Nld | Phase::Full);

    if asd_active {
        let (va, gai, gaj) = loss_albedo_consistency(&state.albedo_i, &state.albedo_j, mask)?;
        terms.albedo_consistency = va;
        axpy(&mut grad.albedo_i, weights.lambda_a, &gai);
        axpy(&mut grad.albedo_j, weights.lambda_a, &gaj);

        let (vsi, gsi) = loss_shading_smoothness_impl(&state.shading_i, mask, weights.xi, smooth_style)?;
        let (vsj, gsj) = loss_shading_smoothness_impl(&state.shading_j, mask, weights.xi, smooth_style)?;
        terms.shading_smoothness = vsi + vsj;
        axpy(&mut grad.shading_i, weights.lambda_s, &gsi);
        axpy(&mut grad.shading_j, weights.lambda_s, &gsj);

        let (vr, gai, gaj, gsi, gsj) = loss_image_recon(
            &input.image_i,
            &input.image_j,
            &state.albedo_i,
            &state.albedo_j,
            &state.shading_i,
            &state.shading_j,
            mask,
        )?;
        terms.image_recon = vr;
        axpy(&mut grad.albedo_i, weights.lambda_irec, &gai);
        axpy(&mut grad.albedo_j, weights.lambda_irec, &gaj);
        axpy(&mut grad.shading_i, weights.lambda_irec, &gsi);
        axpy(&mut grad.shading_j, weights.lambda_irec, &gsj);
    }

    if nld_active {
        let (vn, gni, gnj) = loss_normal_prior(
            &state.normal_i,
            &state.normal_j,
            &input.prior_i,
            &input.prior_j,
            mask,
        )?;
        terms.normal_prior = vn;
        axpy(&mut grad.normal_i, weights.lambda_n, &gni);
        axpy(&mut grad.normal_j, weights.lambda_n, &gnj);

        // Light fidelity: either against the fixed targets, or against the
        // live least-squares light when nothing is detached in a joint phase.
        let live = phase == Phase::Full && detach == DetachMode::None;
        let (lhat_i, lhat_j, grams) = if live {
            let (li, gram_i) = live_light(&state.shading_i, &input.prior_i, mask)?;
            let (lj, gram_j) = live_light(&state.shading_j, &input.prior_j, mask)?;
            (li, lj, Some((gram_i, gram_j)))
        } else {
            (targets.lhat_i, targets.lhat_j, None)
        };
        let (vl, gli, glj) = loss_light_fidelity(&state.light_i, &state.light_j, &lhat_i, &lhat_j);
        terms.light_fidelity = vl;
        for k in 0..SH_DIM {
            grad.light_i[k] += weights.lambda_l * gli[k];
            grad.light_j[k] += weights.lambda_l * glj[k];
        }
        if let Some((gram_i, gram_j)) = grams {
            // d‖l − l̂(S)‖₁/dS(p) = h̄_p · G⁺ · (−sign(l − l̂))
            for (member, gram, gl, gs) in [
                (0, gram_i, gli, &mut grad.shading_i),
                (1, gram_j, glj, &mut grad.shading_j),
            ] {
                let prior = if member == 0 { &input.prior_i } else { &input.prior_j };
                let rhs = SVector::<f64, 9>::from(gl);
                let (y, _) = gram_pinv_solve(&gram, &rhs);
                for (x, py) in mask.iter_true() {
                    let [nx, ny, nz] = prior.get(x, py);
                    let basis = sh_basis_raw(nx, ny, nz);
                    let dot: f64 = basis.iter().zip(y.iter()).map(|(b, v)| b * v).sum();
                    gs[state.shading_i.idx(x, py)] += -weights.lambda_l * dot;
                }
            }
        }

        // Shading reconstruction with the chain through Ŝ = h(N)·l.
        let shat_i = synthesize_shading(&state.normal_i, &state.light_i, mask);
        let shat_j = synthesize_shading(&state.normal_j, &state.light_j, mask);
        let (vs, gsi, gsj, ghi, ghj) =
            loss_shading_recon(&state.shading_i, &state.shading_j, &shat_i, &shat_j, mask)?;
        terms.shading_recon = vs;
        let keep_direct_s =
            phase == Phase::Full && detach != DetachMode::DetachLightAndShading;
        if keep_direct_s {
            axpy(&mut grad.shading_i, weights.lambda_srec, &gsi);
            axpy(&mut grad.shading_j, weights.lambda_srec, &gsj);
        }
        for (member, gh) in [(0, &ghi), (1, &ghj)] {
            let (normals, light, gn, gl) = if member == 0 {
                (&state.normal_i, &state.light_i, &mut grad.normal_i, &mut grad.light_i)
            } else {
                (&state.normal_j, &state.light_j, &mut grad.normal_j, &mut grad.light_j)
            };
            for (x, y) in mask.iter_true() {
                let idx = state.shading_i.idx(x, y);
                let g = gh[idx];
                if g == 0.0 {
                    continue;
                }
                let [nx, ny, nz] = normals.get(x, y);
                let basis = sh_basis_raw(nx, ny, nz);
                let jac = sh_basis_jacobian(nx, ny, nz);
                for k in 0..SH_DIM {
                    gl[k] += weights.lambda_srec * g * basis[k];
                    let lk = light.0[k];
                    gn[3 * idx] += weights.lambda_srec * g * jac[k][0] * lk;
                    gn[3 * idx + 1] += weights.lambda_srec * g * jac[k][1] * lk;
                    gn[3 * idx + 2] += weights.lambda_srec * g * jac[k][2] * lk;
                }
            }
        }
    }

    let total = terms.weighted_total(weights, phase);
    if !total.is_finite() {
        return Err(Error::invalid("energy is non-finite"));
    }
    Ok(EnergyEval { total, terms, grad })
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x.iter()) {
        *a += alpha * v;
    }
}

/// Value-only evaluation of the phase total (no gradient buffers); the
/// returned total may be non-finite, callers decide how to react.
pub(crate) fn total_value_raw(
    state: &DecompositionState,
    input: &PairInput,
    targets: &LightTargets,
    weights: &LossWeights,
    phase: Phase,
    detach: DetachMode,
) -> Result<(f64, TermValues)> {
    let mask = &input.mask;
    let m = mask.require_nonempty("total energy")? as f64;
    let mut terms = TermValues::default();

    if matches!(phase, Phase::Asd | Phase::Full) {
        let norm3 = 1.0 / (3.0 * m);
        let mut l_a = 0.0;
        let mut l_irec = 0.0;
        for (x, y) in mask.iter_true() {
            let base = state.albedo_i.idx(x, y);
            let si = state.shading_i.get(x, y);
            let sj = state.shading_j.get(x, y);
            for c in 0..3 {
                let ai = state.albedo_i.data()[base + c];
                let aj = state.albedo_j.data()[base + c];
                l_a += (ai - aj).abs();
                l_irec += (input.image_i.data()[base + c] - ai * si).abs()
                    + (input.image_j.data()[base + c] - aj * sj).abs();
            }
        }
        terms.albedo_consistency = l_a * norm3;
        terms.image_recon = l_irec * norm3;
        terms.shading_smoothness = smoothness_value(&state.shading_i, mask, weights.xi)
            + smoothness_value(&state.shading_j, mask, weights.xi);
    }

    if matches!(phase, Phase::Nld | Phase::Full) {
        let (lhat_i, lhat_j) = if phase == Phase::Full && detach == DetachMode::None {
            (
                live_light(&state.shading_i, &input.prior_i, mask)?.0,
                live_light(&state.shading_j, &input.prior_j, mask)?.0,
            )
        } else {
            (targets.lhat_i, targets.lhat_j)
        };
        terms.light_fidelity =
            state.light_i.l1_distance(&lhat_i) + state.light_j.l1_distance(&lhat_j);

        let norm = 1.0 / m;
        let mut l_n = 0.0;
        let mut l_srec = 0.0;
        for (x, y) in mask.iter_true() {
            let nb = state.normal_i.idx(x, y);
            for c in 0..3 {
                let di = state.normal_i.data()[nb + c] - input.prior_i.data()[nb + c];
                let dj = state.normal_j.data()[nb + c] - input.prior_j.data()[nb + c];
                l_n += di * di + dj * dj;
            }
            let ni = state.normal_i.get(x, y);
            let nj = state.normal_j.get(x, y);
            let hi = sh_basis_raw(ni[0], ni[1], ni[2]);
            let hj = sh_basis_raw(nj[0], nj[1], nj[2]);
            let shat_i: f64 = hi.iter().zip(state.light_i.0.iter()).map(|(b, l)| b * l).sum();
            let shat_j: f64 = hj.iter().zip(state.light_j.0.iter()).map(|(b, l)| b * l).sum();
            l_srec += (state.shading_i.get(x, y) - shat_i).abs()
                + (state.shading_j.get(x, y) - shat_j).abs();
        }
        terms.normal_prior = l_n * norm;
        terms.shading_recon = l_srec * norm;
    }

    Ok((terms.weighted_total(weights, phase), terms))
}

fn smoothness_value(s: &ShadingMap, mask: &Mask, xi: f64) -> f64 {
    let m = mask.count() as f64;
    let mut value = 0.0;
    for (x, y) in mask.iter_true() {
        for (dx, dy) in [(1, 0), (0, 1)] {
            if let Some(g) = forward_diff(s, mask, x, y, dx, dy) {
                value += g.abs() / g.abs().max(xi);
            }
        }
    }
    value / m
}
