//! Two-stage hierarchical decomposition of an image pair. The ASD stage
//! separates each image into albedo and shading; the NLD stage separates the
//! shading into normals and a 9-vector light against the least-squares light
//! target l̂. Phase 2 first refines the lights with l̂ rebuilt from the
//! predicted normals, then polishes all variables at a smaller step.
//!
//! The optimizer takes sign-based steps with per-component adaptive step
//! sizes, one variable block at a time, each gated so the recorded energy
//! never increases — the trace is non-increasing by construction. l̂
//! refreshes translate the lights by the target delta and are committed
//! only when the iteration they belong to keeps the trace monotone.

use crate::energy::{
    total_energy_with_style, total_value_raw, DetachMode, LightTargets, LossWeights, Phase,
    SmoothGradStyle, StateGrad, TermValues,
};
use crate::error::{Error, Result};
use crate::grid::{AlbedoMap, Image, Mask, NormalMap, ShadingMap};
use crate::lambertian::{delight, render};
use crate::sh::{solve_light_lsq, ShCoefficients};

/// Upper clamp for shading during optimization.
const SHADING_MAX: f64 = 4.0;
/// Epsilon used for the de-lighting correction of the final albedo.
const DELIGHT_EPS: f64 = 1e-3;
/// Backtracking halvings before a step is rejected.
const MAX_BACKTRACKS: u32 = 14;
/// Per-component step-size dynamics.
const GROW: f64 = 1.2;
const SHRINK: f64 = 0.5;
const DELTA_MIN: f64 = 1e-12;
/// Trailing window for the convergence test.
const CONV_WINDOW: usize = 50;

/// A pair of aligned images of the same subject under different lights,
/// with the shared mask and coarse prior normals.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub image_i: Image,
    pub image_j: Image,
    pub mask: Mask,
    pub prior_i: NormalMap,
    pub prior_j: NormalMap,
}

impl PairInput {
    pub fn validate(&self) -> Result<()> {
        let dims = self.image_i.dims();
        if self.image_j.dims() != dims
            || self.mask.dims() != dims
            || self.prior_i.dims() != dims
            || self.prior_j.dims() != dims
        {
            return Err(Error::DimensionMismatch(
                "pair input fields must share dimensions".into(),
            ));
        }
        self.mask.require_nonempty("pair input")?;
        for (x, y) in self.mask.iter_true() {
            if !self.prior_i.is_valid(x, y) || !self.prior_j.is_valid(x, y) {
                return Err(Error::invalid(format!(
                    "prior normal invalid at masked pixel ({x}, {y})"
                )));
            }
        }
        Ok(())
    }
}

/// All free variables of the decomposition for both pair members.
#[derive(Debug, Clone)]
pub struct DecompositionState {
    pub albedo_i: AlbedoMap,
    pub albedo_j: AlbedoMap,
    pub shading_i: ShadingMap,
    pub shading_j: ShadingMap,
    pub normal_i: NormalMap,
    pub normal_j: NormalMap,
    pub light_i: ShCoefficients,
    pub light_j: ShCoefficients,
}

/// Selects one member of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    I,
    J,
}

impl Member {
    pub fn suffix(self) -> &'static str {
        match self {
            Member::I => "i",
            Member::J => "j",
        }
    }
}

impl DecompositionState {
    pub fn light(&self, m: Member) -> &ShCoefficients {
        match m {
            Member::I => &self.light_i,
            Member::J => &self.light_j,
        }
    }

    pub fn normal(&self, m: Member) -> &NormalMap {
        match m {
            Member::I => &self.normal_i,
            Member::J => &self.normal_j,
        }
    }

    pub fn shading(&self, m: Member) -> &ShadingMap {
        match m {
            Member::I => &self.shading_i,
            Member::J => &self.shading_j,
        }
    }
}

/// Solver configuration. Step sizes seed the per-component adaptive steps;
/// phase 2 must use the smaller one.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub weights: LossWeights,
    pub phase1_iters: u32,
    pub phase2_iters: u32,
    pub step_size_phase1: f64,
    pub step_size_phase2: f64,
    pub convergence_tol: f64,
    pub detach_mode: DetachMode,
    /// ASD steps per outer iteration of phase 1.
    pub asd_steps: u32,
    /// NLD steps per outer iteration of phase 1.
    pub nld_steps: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default_preset(),
            phase1_iters: 600,
            phase2_iters: 300,
            step_size_phase1: 1e-3,
            step_size_phase2: 1e-4,
            convergence_tol: 1e-9,
            detach_mode: DetachMode::DetachLight,
            asd_steps: 1,
            nld_steps: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.phase1_iters == 0 || self.phase2_iters == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.step_size_phase1) || !positive(self.step_size_phase2) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if self.step_size_phase2 >= self.step_size_phase1 {
            return Err(Error::invalid(
                "phase-2 step size must be smaller than phase-1",
            ));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence tolerance must be positive"));
        }
        if self.asd_steps == 0 || self.nld_steps == 0 {
            return Err(Error::invalid("interleave step counts must be positive"));
        }
        Ok(())
    }
}

/// One recorded outer iteration: the weighted total and the raw term values.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: u32,
    pub total: f64,
    pub terms: TermValues,
}

#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
}

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }

    /// True when the recorded totals never increase.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].total <= w[0].total)
    }
}

/// Final state, trace, and the de-lighting-corrected albedo (the canonical
/// albedo output) with its low-confidence mask per member. The state at the
/// end of phase 1 is kept so the effect of the refinement phase can be
/// evaluated.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub state: DecompositionState,
    pub phase1_state: DecompositionState,
    pub trace: SolverTrace,
    pub albedo_i: AlbedoMap,
    pub albedo_j: AlbedoMap,
    pub low_confidence_i: Mask,
    pub low_confidence_j: Mask,
    pub converged: bool,
}

impl DecompositionResult {
    /// The canonical (de-lighting-corrected) albedo of a member.
    pub fn albedo(&self, m: Member) -> &AlbedoMap {
        match m {
            Member::I => &self.albedo_i,
            Member::J => &self.albedo_j,
        }
    }

    /// Reconstruction of a member from its decomposed components.
    pub fn reconstruction(&self, m: Member) -> Result<Image> {
        render(self.albedo(m), self.state.normal(m), self.state.light(m))
    }
}

/// A ← I, S ← 1 inside the mask, N ← prior, l ← least-squares light.
pub fn init_state(input: &PairInput) -> Result<DecompositionState> {
    input.validate()?;
    let (w, h) = input.image_i.dims();
    let mut albedo_i = input.image_i.clone();
    let mut albedo_j = input.image_j.clone();
    albedo_i.clamp01();
    albedo_j.clamp01();
    let mut shading = ShadingMap::new(w, h);
    for (x, y) in input.mask.iter_true() {
        shading.set(x, y, 1.0);
    }
    let light_i = solve_light_lsq(&shading, &input.prior_i, &input.mask)?.light;
    let light_j = solve_light_lsq(&shading, &input.prior_j, &input.mask)?.light;
    Ok(DecompositionState {
        albedo_i,
        albedo_j,
        shading_i: shading.clone(),
        shading_j: shading,
        normal_i: input.prior_i.clone(),
        normal_j: input.prior_j.clone(),
        light_i,
        light_j,
    })
}

/// Which variables a step may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    AlbedoI,
    AlbedoJ,
    ShadingI,
    ShadingJ,
    NormalI,
    NormalJ,
    LightI,
    LightJ,
}

// Steps move one variable block at a time: in this piecewise-linear energy
// a mixed direction with one uphill block stays uphill under any step
// scaling, so blocks are gated independently.
const FREE_ALBEDO: &[Var] = &[Var::AlbedoI, Var::AlbedoJ];
const FREE_SHADING: &[Var] = &[Var::ShadingI, Var::ShadingJ];
const FREE_NORMAL: &[Var] = &[Var::NormalI, Var::NormalJ];
const FREE_LIGHT: &[Var] = &[Var::LightI, Var::LightJ];

/// Per-component adaptive step sizes with sign memory for one variable block.
#[derive(Debug, Clone)]
struct BlockOpt {
    delta: Vec<f64>,
    prev_sign: Vec<i8>,
    delta_max: f64,
}

impl BlockOpt {
    fn new(len: usize, init: f64) -> Self {
        Self {
            delta: vec![init; len],
            prev_sign: vec![0; len],
            delta_max: 100.0 * init,
        }
    }

    /// Gauge rates are fractions of the remaining gap; allow up to 1/2.
    fn gauge(len: usize, init: f64) -> Self {
        Self {
            delta: vec![init; len],
            prev_sign: vec![0; len],
            delta_max: 0.5,
        }
    }

    fn reset(&mut self, init: f64) {
        self.delta.iter_mut().for_each(|d| *d = init);
        self.prev_sign.iter_mut().for_each(|s| *s = 0);
        self.delta_max = 100.0 * init;
    }

    fn reset_gauge(&mut self, init: f64) {
        self.delta.iter_mut().for_each(|d| *d = init);
        self.prev_sign.iter_mut().for_each(|s| *s = 0);
        self.delta_max = 0.5;
    }

    fn shrink_all(&mut self) {
        for d in &mut self.delta {
            *d = (*d * SHRINK).max(DELTA_MIN);
        }
    }

    fn update_on_accept(&mut self, grad: &[f64], tau: f64) {
        for k in 0..self.delta.len() {
            let g = grad[k];
            let s: i8 = if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                continue;
            };
            let prev = self.prev_sign[k];
            if prev != 0 {
                self.delta[k] = if s == prev {
                    (self.delta[k] * GROW).min(self.delta_max)
                } else {
                    (self.delta[k] * SHRINK).max(DELTA_MIN)
                };
            }
            if tau < 1.0 {
                self.delta[k] = (self.delta[k] * tau).max(DELTA_MIN);
            }
            self.prev_sign[k] = s;
        }
    }
}

#[derive(Debug, Clone)]
struct OptBlocks {
    albedo_i: BlockOpt,
    albedo_j: BlockOpt,
    shading_i: BlockOpt,
    shading_j: BlockOpt,
    normal_i: BlockOpt,
    normal_j: BlockOpt,
    light_i: BlockOpt,
    light_j: BlockOpt,
}

impl OptBlocks {
    fn new(w: usize, h: usize, init: f64) -> Self {
        let n = w * h;
        Self {
            albedo_i: BlockOpt::new(3 * n, init),
            albedo_j: BlockOpt::new(3 * n, init),
            shading_i: BlockOpt::new(n, init),
            shading_j: BlockOpt::new(n, init),
            normal_i: BlockOpt::new(3 * n, init),
            normal_j: BlockOpt::new(3 * n, init),
            light_i: BlockOpt::new(9, init),
            light_j: BlockOpt::new(9, init),
        }
    }

    fn get_mut(&mut self, var: Var) -> &mut BlockOpt {
        match var {
            Var::AlbedoI => &mut self.albedo_i,
            Var::AlbedoJ => &mut self.albedo_j,
            Var::ShadingI => &mut self.shading_i,
            Var::ShadingJ => &mut self.shading_j,
            Var::NormalI => &mut self.normal_i,
            Var::NormalJ => &mut self.normal_j,
            Var::LightI => &mut self.light_i,
            Var::LightJ => &mut self.light_j,
        }
    }

    fn get(&self, var: Var) -> &BlockOpt {
        match var {
            Var::AlbedoI => &self.albedo_i,
            Var::AlbedoJ => &self.albedo_j,
            Var::ShadingI => &self.shading_i,
            Var::ShadingJ => &self.shading_j,
            Var::NormalI => &self.normal_i,
            Var::NormalJ => &self.normal_j,
            Var::LightI => &self.light_i,
            Var::LightJ => &self.light_j,
        }
    }

    fn reset(&mut self, init: f64) {
        self.albedo_i.reset(init);
        self.albedo_j.reset(init);
        self.shading_i.reset(init);
        self.shading_j.reset(init);
        self.normal_i.reset(init);
        self.normal_j.reset(init);
        self.light_i.reset(init);
        self.light_j.reset(init);
    }
}

fn grad_block(grad: &StateGrad, var: Var) -> &[f64] {
    match var {
        Var::AlbedoI => &grad.albedo_i,
        Var::AlbedoJ => &grad.albedo_j,
        Var::ShadingI => &grad.shading_i,
        Var::ShadingJ => &grad.shading_j,
        Var::NormalI => &grad.normal_i,
        Var::NormalJ => &grad.normal_j,
        Var::LightI => &grad.light_i,
        Var::LightJ => &grad.light_j,
    }
}

/// Where the l̂ targets are rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetSource {
    Prior,
    CurrentNormals,
}

/// How strictly individual moves are gated; see [`Engine::outer_iteration`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepMode {
    Fast,
    Conservative,
}

/// Work done inside one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    /// asd_steps ASD steps then nld_steps NLD steps (phase 1).
    Interleaved,
    AsdOnly,
    NldOnly,
    /// Light-only refinement with l̂ from the current normals (phase 2a).
    LightRefine,
    /// Joint step over all variables (phase 2b).
    JointPolish,
}

impl Schedule {
    fn target_source(self) -> TargetSource {
        match self {
            Schedule::Interleaved | Schedule::AsdOnly | Schedule::NldOnly => TargetSource::Prior,
            Schedule::LightRefine | Schedule::JointPolish => TargetSource::CurrentNormals,
        }
    }

    fn lights_free(self) -> bool {
        !matches!(self, Schedule::AsdOnly)
    }
}

struct Engine<'a> {
    input: &'a PairInput,
    cfg: &'a SolverConfig,
    state: DecompositionState,
    scratch: DecompositionState,
    opt: OptBlocks,
    /// Step sizes for the ASD gauge move (albedo step with product-
    /// preserving shading rescale).
    gauge_a_i: BlockOpt,
    gauge_a_j: BlockOpt,
    targets: LightTargets,
    /// Objective that is gated and recorded: a standalone stage runs
    /// against its own objective, the full solver against the full energy.
    gate_phase: Phase,
    trace: Vec<TraceRow>,
    last_recorded: Option<f64>,
    iteration: u32,
    phase_start_row: usize,
    window_met: bool,
}

impl<'a> Engine<'a> {
    fn new(input: &'a PairInput, cfg: &'a SolverConfig, gate_phase: Phase) -> Result<Self> {
        cfg.validate()?;
        let state = init_state(input)?;
        Self::with_state(input, cfg, state, gate_phase)
    }

    fn with_state(
        input: &'a PairInput,
        cfg: &'a SolverConfig,
        state: DecompositionState,
        gate_phase: Phase,
    ) -> Result<Self> {
        cfg.validate()?;
        input.validate()?;
        let (w, h) = input.image_i.dims();
        let targets = LightTargets {
            lhat_i: solve_light_lsq(&state.shading_i, &input.prior_i, &input.mask)?.light,
            lhat_j: solve_light_lsq(&state.shading_j, &input.prior_j, &input.mask)?.light,
        };
        let mut engine = Self {
            input,
            cfg,
            scratch: state.clone(),
            state,
            opt: OptBlocks::new(w, h, cfg.step_size_phase1),
            gauge_a_i: BlockOpt::gauge(w * h, cfg.step_size_phase1),
            gauge_a_j: BlockOpt::gauge(w * h, cfg.step_size_phase1),
            targets,
            gate_phase,
            trace: Vec::new(),
            last_recorded: None,
            iteration: 0,
            phase_start_row: 0,
            window_met: false,
        };
        // gate the very first iteration against the starting energy
        engine.last_recorded = Some(engine.value_of(&engine.state)?);
        Ok(engine)
    }

    fn value_of(&self, state: &DecompositionState) -> Result<f64> {
        let (total, _) = total_value_raw(
            state,
            self.input,
            &self.targets,
            &self.cfg.weights,
            self.gate_phase,
            self.cfg.detach_mode,
        )?;
        Ok(total)
    }

    fn gate_terms(&self) -> Result<(f64, TermValues)> {
        total_value_raw(
            &self.state,
            self.input,
            &self.targets,
            &self.cfg.weights,
            self.gate_phase,
            self.cfg.detach_mode,
        )
    }

    fn compute_targets(&self, source: TargetSource) -> Result<LightTargets> {
        let (ni, nj) = match source {
            TargetSource::Prior => (&self.input.prior_i, &self.input.prior_j),
            TargetSource::CurrentNormals => (&self.state.normal_i, &self.state.normal_j),
        };
        Ok(LightTargets {
            lhat_i: solve_light_lsq(&self.state.shading_i, ni, &self.input.mask)?.light,
            lhat_j: solve_light_lsq(&self.state.shading_j, nj, &self.input.mask)?.light,
        })
    }

    /// One gated step: direction from the phase gradient, candidate accepted
    /// only if the full energy does not increase.
    fn step(&mut self, phase: Phase, free: &[Var]) -> Result<()> {
        let eval = total_energy_with_style(
            &self.state,
            self.input,
            &self.targets,
            &self.cfg.weights,
            phase,
            self.cfg.detach_mode,
            SmoothGradStyle::TrueAe,
        )?;
        let e_current = self.value_of(&self.state)?;
        let mut tau = 1.0;
        for _ in 0..=MAX_BACKTRACKS {
            self.build_candidate(&eval.grad, free, tau);
            let e_cand = self.value_of(&self.scratch)?;
            if e_cand <= e_current {
                std::mem::swap(&mut self.state, &mut self.scratch);
                for var in free {
                    self.opt
                        .get_mut(*var)
                        .update_on_accept(grad_block(&eval.grad, *var), tau);
                }
                return Ok(());
            }
            tau *= 0.5;
        }
        // No acceptable step: stand still and shrink the block steps.
        for var in free {
            self.opt.get_mut(*var).shrink_all();
        }
        Ok(())
    }

    fn build_candidate(&mut self, grad: &StateGrad, free: &[Var], tau: f64) {
        self.scratch = self.state.clone();
        for var in free {
            let g = grad_block(grad, *var);
            let block = self.opt.get(*var);
            match var {
                Var::AlbedoI | Var::AlbedoJ => {
                    let dst = if *var == Var::AlbedoI {
                        self.scratch.albedo_i.data_mut()
                    } else {
                        self.scratch.albedo_j.data_mut()
                    };
                    signed_step(dst, g, &block.delta, tau);
                    for v in dst.iter_mut() {
                        *v = v.clamp(0.0, 1.0);
                    }
                }
                Var::ShadingI | Var::ShadingJ => {
                    let dst = if *var == Var::ShadingI {
                        self.scratch.shading_i.data_mut()
                    } else {
                        self.scratch.shading_j.data_mut()
                    };
                    signed_step(dst, g, &block.delta, tau);
                    for v in dst.iter_mut() {
                        *v = v.clamp(0.0, SHADING_MAX);
                    }
                }
                Var::NormalI | Var::NormalJ => {
                    let dst = if *var == Var::NormalI {
                        self.scratch.normal_i.data_mut()
                    } else {
                        self.scratch.normal_j.data_mut()
                    };
                    signed_step(dst, g, &block.delta, tau);
                    project_hemisphere(dst);
                }
                Var::LightI | Var::LightJ => {
                    let dst = if *var == Var::LightI {
                        &mut self.scratch.light_i.0
                    } else {
                        &mut self.scratch.light_j.0
                    };
                    signed_step(dst, g, &block.delta, tau);
                }
            }
        }
    }

    /// The sign-gradient cannot leave the exact reconstruction manifold
    /// A·S = I (every single-variable move is uphill there), so the ASD
    /// stage pairs each plain step with a gauge move: every pixel's albedos
    /// scale a bounded fraction of the way toward the pair midpoint (rate
    /// proportional to the gap, so the compensation stays smooth across the
    /// light-symmetry line) while the shading absorbs the inverse factor,
    /// keeping the product and the albedo texture intact.
    ///
    /// In Fast mode the gate is the move's own objective (reconstruction +
    /// consistency); the enclosing iteration re-runs everything in
    /// Conservative mode (full-energy gate on every step) whenever the
    /// recorded trace would rise. Skipped when λ_a = 0.
    fn gauge_step(&mut self, mode: StepMode) -> Result<()> {
        if self.cfg.weights.lambda_a == 0.0 {
            return Ok(());
        }
        let (w, h) = self.input.image_i.dims();
        let n_px = w * h;
        // signed relative moves that would place both albedo sums at the
        // pixel midpoint; doubles as the sign field for the step memory
        let mut rel_i = vec![0.0; n_px];
        let mut rel_j = vec![0.0; n_px];
        for (x, y) in self.input.mask.iter_true() {
            let p = y * w + x;
            let ai = self.state.albedo_i.get(x, y);
            let aj = self.state.albedo_j.get(x, y);
            let sum_i = ai[0] + ai[1] + ai[2];
            let sum_j = aj[0] + aj[1] + aj[2];
            if sum_i > 1e-9 && sum_j > 1e-9 {
                let m = 0.5 * (sum_i + sum_j);
                rel_i[p] = m / sum_i - 1.0;
                rel_j[p] = m / sum_j - 1.0;
            }
        }
        let e_current = self.gauge_gate_value(&self.state, mode)?;
        let mut tau = 1.0;
        for _ in 0..=MAX_BACKTRACKS {
            self.scratch = self.state.clone();
            for member in [Member::I, Member::J] {
                let (rel, block) = match member {
                    Member::I => (&rel_i, &self.gauge_a_i),
                    Member::J => (&rel_j, &self.gauge_a_j),
                };
                let (albedo, shading) = match member {
                    Member::I => (&mut self.scratch.albedo_i, &mut self.scratch.shading_i),
                    Member::J => (&mut self.scratch.albedo_j, &mut self.scratch.shading_j),
                };
                for p in 0..n_px {
                    let r = rel[p];
                    if r == 0.0 {
                        continue;
                    }
                    // walk an adaptive fraction of the gap toward the
                    // midpoint; proportional rates keep the shading
                    // compensation smooth across the light-symmetry line
                    let fraction = (tau * block.delta[p]).min(1.0);
                    let factor = 1.0 + fraction * r;
                    let base = 3 * p;
                    let mut old_sum = 0.0;
                    let mut new_sum = 0.0;
                    for c in 0..3 {
                        let old = albedo.data()[base + c];
                        old_sum += old;
                        let v = (old * factor).clamp(0.0, 1.0);
                        albedo.data_mut()[base + c] = v;
                        new_sum += v;
                    }
                    if new_sum > 1e-9 && old_sum > 0.0 {
                        let ratio = (old_sum / new_sum).clamp(0.25, 4.0);
                        let s = shading.data()[p];
                        shading.data_mut()[p] = (s * ratio).clamp(0.0, SHADING_MAX);
                    }
                }
            }
            let e_cand = self.gauge_gate_value(&self.scratch, mode)?;
            if e_cand <= e_current {
                std::mem::swap(&mut self.state, &mut self.scratch);
                // sign memory on the gap direction: crossing the midpoint
                // flips it and anneals the rate
                self.gauge_a_i.update_on_accept(&rel_i, tau);
                self.gauge_a_j.update_on_accept(&rel_j, tau);
                return Ok(());
            }
            tau *= 0.5;
        }
        self.gauge_a_i.shrink_all();
        self.gauge_a_j.shrink_all();
        Ok(())
    }

    fn gauge_gate_value(&self, state: &DecompositionState, mode: StepMode) -> Result<f64> {
        match mode {
            StepMode::Conservative => self.value_of(state),
            StepMode::Fast => {
                let (_, terms) = total_value_raw(
                    state,
                    self.input,
                    &self.targets,
                    &self.cfg.weights,
                    Phase::Asd,
                    self.cfg.detach_mode,
                )?;
                Ok(self.cfg.weights.lambda_irec * terms.image_recon
                    + self.cfg.weights.lambda_a * terms.albedo_consistency)
            }
        }
    }

    fn run_schedule(&mut self, sched: Schedule, mode: StepMode) -> Result<()> {
        match sched {
            Schedule::Interleaved => {
                for _ in 0..self.cfg.asd_steps {
                    self.gauge_step(mode)?;
                    self.step(Phase::Asd, FREE_ALBEDO)?;
                    self.step(Phase::Asd, FREE_SHADING)?;
                }
                for _ in 0..self.cfg.nld_steps {
                    self.step(Phase::Nld, FREE_NORMAL)?;
                    self.step(Phase::Nld, FREE_LIGHT)?;
                }
            }
            Schedule::AsdOnly => {
                self.gauge_step(mode)?;
                self.step(Phase::Asd, FREE_ALBEDO)?;
                self.step(Phase::Asd, FREE_SHADING)?;
            }
            Schedule::NldOnly => {
                self.step(Phase::Nld, FREE_NORMAL)?;
                self.step(Phase::Nld, FREE_LIGHT)?;
            }
            Schedule::LightRefine => self.step(Phase::Nld, FREE_LIGHT)?,
            Schedule::JointPolish => {
                self.step(Phase::Full, FREE_NORMAL)?;
                self.step(Phase::Full, FREE_LIGHT)?;
                self.step(Phase::Full, FREE_SHADING)?;
                self.step(Phase::Full, FREE_ALBEDO)?;
            }
        }
        Ok(())
    }

    /// Packages "refresh l̂, then run the schedule" so the recorded energy
    /// never increases: the fast attempt may let individual moves trade
    /// terms against each other, and whenever the iteration would end above
    /// the last recorded row it is replayed under the previous targets with
    /// every step gated on the full energy (which cannot increase).
    fn outer_iteration(&mut self, sched: Schedule) -> Result<()> {
        self.iteration += 1;
        let new_targets = self.compute_targets(sched.target_source())?;
        let snap_state = self.state.clone();
        let snap_opt = self.opt.clone();
        let snap_gauge = (self.gauge_a_i.clone(), self.gauge_a_j.clone());
        let snap_targets = self.targets;

        // adopting refreshed targets translates the lights by the same
        // delta so the fidelity residual l − l̂ is preserved (the lights
        // then keep tracking a moving shading instead of a stale target)
        if sched.lights_free() {
            for k in 0..9 {
                self.state.light_i.0[k] += new_targets.lhat_i.0[k] - self.targets.lhat_i.0[k];
                self.state.light_j.0[k] += new_targets.lhat_j.0[k] - self.targets.lhat_j.0[k];
            }
        }
        self.targets = new_targets;
        self.run_schedule(sched, StepMode::Fast)?;
        let (mut total, mut terms) = self.gate_terms()?;

        if let Some(prev) = self.last_recorded {
            // negated so a NaN total also takes the conservative path
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(total <= prev) {
                self.state = snap_state;
                self.opt = snap_opt;
                (self.gauge_a_i, self.gauge_a_j) = snap_gauge;
                self.targets = snap_targets;
                self.run_schedule(sched, StepMode::Conservative)?;
                (total, terms) = self.gate_terms()?;
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                trace: Box::new(SolverTrace { rows: std::mem::take(&mut self.trace) }),
            });
        }
        self.trace.push(TraceRow {
            iteration: self.iteration,
            total,
            terms,
        });
        self.last_recorded = Some(total);
        self.check_window();
        Ok(())
    }

    fn begin_phase(&mut self, step_init: f64) {
        self.opt.reset(step_init);
        self.gauge_a_i.reset_gauge(step_init);
        self.gauge_a_j.reset_gauge(step_init);
        self.phase_start_row = self.trace.len();
        self.window_met = false;
    }

    fn check_window(&mut self) {
        let n = self.trace.len();
        if n < self.phase_start_row + CONV_WINDOW + 1 {
            return;
        }
        let old = self.trace[n - 1 - CONV_WINDOW].total;
        let new = self.trace[n - 1].total;
        let rel = (old - new).abs() / old.abs().max(f64::MIN_POSITIVE);
        if rel < self.cfg.convergence_tol {
            self.window_met = true;
        }
    }

    fn into_trace(self) -> SolverTrace {
        SolverTrace { rows: self.trace }
    }
}

fn signed_step(dst: &mut [f64], grad: &[f64], delta: &[f64], tau: f64) {
    for k in 0..dst.len() {
        let g = grad[k];
        if g > 0.0 {
            dst[k] -= tau * delta[k];
        } else if g < 0.0 {
            dst[k] += tau * delta[k];
        }
    }
}

/// Renormalizes every 3-vector onto the unit sphere with z >= 0.
fn project_hemisphere(data: &mut [f64]) {
    for n in data.chunks_exact_mut(3) {
        if n[2] < 0.0 {
            n[2] = 0.0;
        }
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm < 1e-12 {
            n[0] = 0.0;
            n[1] = 0.0;
            n[2] = 1.0;
        } else {
            n[0] /= norm;
            n[1] /= norm;
            n[2] /= norm;
        }
    }
}

/// Runs ASD-only iterations (gradient steps on the albedos and shadings,
/// clamped to `[0,1]` and `[0,4]`), recording the stage energy per iteration.
pub fn stage_asd(
    state: &mut DecompositionState,
    input: &PairInput,
    config: &SolverConfig,
) -> Result<SolverTrace> {
    let mut eng = Engine::with_state(input, config, state.clone(), Phase::Asd)?;
    eng.begin_phase(config.step_size_phase1);
    for _ in 0..config.phase1_iters {
        eng.outer_iteration(Schedule::AsdOnly)?;
        if eng.window_met {
            break;
        }
    }
    *state = eng.state.clone();
    Ok(eng.into_trace())
}

/// Phase selector for [`stage_nld`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NldPhase {
    /// l̂ from (shading, prior normals); normals and lights both move.
    One,
    /// l̂ from (shading, current normals); normals frozen, lights refined
    /// at the phase-2 step size.
    Two,
}

/// Runs NLD iterations on the normals and lights against the shading
/// produced by the ASD stage.
pub fn stage_nld(
    state: &mut DecompositionState,
    input: &PairInput,
    config: &SolverConfig,
    phase: NldPhase,
) -> Result<SolverTrace> {
    let mut eng = Engine::with_state(input, config, state.clone(), Phase::Nld)?;
    let (sched, step, iters) = match phase {
        NldPhase::One => (Schedule::NldOnly, config.step_size_phase1, config.phase1_iters),
        NldPhase::Two => (
            Schedule::LightRefine,
            config.step_size_phase2,
            config.phase2_iters,
        ),
    };
    eng.begin_phase(step);
    for _ in 0..iters {
        eng.outer_iteration(sched)?;
        if eng.window_met {
            break;
        }
    }
    *state = eng.state.clone();
    Ok(eng.into_trace())
}

/// Full two-phase decomposition: interleaved ASD/NLD, then light refinement
/// with l̂ rebuilt from the predicted normals, then a joint polish. The
/// canonical albedo output is the de-lighting correction I/S.
pub fn decompose_pair(input: &PairInput, config: &SolverConfig) -> Result<DecompositionResult> {
    let mut eng = Engine::new(input, config, Phase::Full)?;

    eng.begin_phase(config.step_size_phase1);
    for _ in 0..config.phase1_iters {
        eng.outer_iteration(Schedule::Interleaved)?;
        if eng.window_met {
            break;
        }
    }
    let phase1_state = eng.state.clone();

    let refine_iters = config.phase2_iters / 2;
    let polish_iters = config.phase2_iters - refine_iters;
    eng.begin_phase(config.step_size_phase2);
    for _ in 0..refine_iters {
        eng.outer_iteration(Schedule::LightRefine)?;
        if eng.window_met {
            break;
        }
    }
    eng.begin_phase(config.step_size_phase2);
    for _ in 0..polish_iters {
        eng.outer_iteration(Schedule::JointPolish)?;
        if eng.window_met {
            break;
        }
    }

    let converged = eng.window_met || final_window_converged(&eng.trace, config.convergence_tol);
    let state = eng.state.clone();
    let trace = eng.into_trace();

    let (albedo_i, low_i) = corrected_albedo(&input.image_i, &state.shading_i)?;
    let (albedo_j, low_j) = corrected_albedo(&input.image_j, &state.shading_j)?;

    Ok(DecompositionResult {
        state,
        phase1_state,
        trace,
        albedo_i,
        albedo_j,
        low_confidence_i: low_i,
        low_confidence_j: low_j,
        converged,
    })
}

fn final_window_converged(trace: &[TraceRow], tol: f64) -> bool {
    if trace.len() < 2 {
        return false;
    }
    let window = CONV_WINDOW.min(trace.len() - 1);
    let old = trace[trace.len() - 1 - window].total;
    let new = trace[trace.len() - 1].total;
    (old - new).abs() / old.abs().max(f64::MIN_POSITIVE) < tol
}

/// Delight correction A = I/S with low-confidence flags where the shading is
/// tiny or the input is black (albedo unidentifiable).
fn corrected_albedo(image: &Image, shading: &ShadingMap) -> Result<(AlbedoMap, Mask)> {
    let out = delight(image, shading, DELIGHT_EPS)?;
    let (w, h) = image.dims();
    let mut low = out.low_confidence;
    for y in 0..h {
        for x in 0..w {
            let px = image.get(x, y);
            if px[0].max(px[1]).max(px[2]) < DELIGHT_EPS {
                low.set(x, y, true);
            }
        }
    }
    Ok((out.albedo, low))
}

/// Re-renders albedo and normals under a target light.
pub fn relight(
    albedo: &AlbedoMap,
    normals: &NormalMap,
    target_light: &ShCoefficients,
) -> Result<Image> {
    render(albedo, normals, target_light)
}

/// Relights `target`'s albedo and normals with the light estimated from
/// `source` (same member on both sides).
pub fn transfer_light(
    source: &DecompositionResult,
    target: &DecompositionResult,
    member: Member,
) -> Result<Image> {
    relight(
        target.albedo(member),
        target.state.normal(member),
        source.state.light(member),
    )
}
