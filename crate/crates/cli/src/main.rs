//! Command-line pipeline: decompose aligned face-image pairs into albedo,
//! shading, normals and SH lighting, then relight, transfer light, de-light,
//! blend and evaluate.
//!
//! Exit codes: 0 success, 1 input error, 2 solver hit the iteration budget
//! without converging (results are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use relume_core::energy::{DetachMode, LossWeights};
use relume_core::grid::{Mask, NormalMap};
use relume_core::io;
use relume_core::sh::ShCoefficients;
use relume_core::synth::{self, AlbedoPattern, PriorSpec};
use relume_core::{
    decompose_pair, mae, poisson_blend, relight, rmse, Member, PairInput, SolverConfig,
};

#[derive(Parser)]
#[command(name = "relume", version, about = "Face-pair intrinsic decomposition and relighting")]
struct Cli {
    /// Worker threads for manifest processing.
    #[arg(long, global = true, env = "RELUME_THREADS")]
    threads: Option<usize>,

    /// Seed for the synthetic generator.
    #[arg(long, global = true, env = "RELUME_SEED", default_value_t = 0)]
    seed: u64,

    /// Decode gamma: stored values are read as v^gamma (1 = already linear).
    #[arg(long, global = true, env = "RELUME_GAMMA", default_value_t = 1.0)]
    gamma: f64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetachArg {
    /// no detaching
    None,
    /// detach the computed light (default)
    Dl,
    /// detach the computed light and the predicted shading
    Dls,
}

impl From<DetachArg> for DetachMode {
    fn from(v: DetachArg) -> Self {
        match v {
            DetachArg::None => DetachMode::None,
            DetachArg::Dl => DetachMode::DetachLight,
            DetachArg::Dls => DetachMode::DetachLightAndShading,
        }
    }
}

#[derive(Args)]
struct WeightArgs {
    /// Weight preset.
    #[arg(long, env = "RELUME_PRESET", default_value = "default")]
    preset: String,

    /// Weights config file (key=value lines); applied over the preset.
    #[arg(long)]
    weights: Option<PathBuf>,

    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    #[arg(long)]
    lambda_l: Option<f64>,
    #[arg(long)]
    lambda_irec: Option<f64>,
    #[arg(long)]
    lambda_srec: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
}

impl WeightArgs {
    fn resolve(&self) -> Result<LossWeights> {
        let mut w = LossWeights::preset(&self.preset)
            .with_context(|| format!("unknown preset {:?} (use default or dpr)", self.preset))?;
        if let Some(path) = &self.weights {
            w = io::load_weights(path)?;
        }
        if let Some(v) = self.lambda_a {
            w.lambda_a = v;
        }
        if let Some(v) = self.lambda_s {
            w.lambda_s = v;
        }
        if let Some(v) = self.lambda_n {
            w.lambda_n = v;
        }
        if let Some(v) = self.lambda_l {
            w.lambda_l = v;
        }
        if let Some(v) = self.lambda_irec {
            w.lambda_irec = v;
        }
        if let Some(v) = self.lambda_srec {
            w.lambda_srec = v;
        }
        if let Some(v) = self.xi {
            w.xi = v;
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Args)]
struct SolverArgs {
    #[command(flatten)]
    weights: WeightArgs,

    #[arg(long, default_value_t = 400)]
    phase1_iters: u32,
    #[arg(long, default_value_t = 200)]
    phase2_iters: u32,
    #[arg(long, default_value_t = 1e-3)]
    step_phase1: f64,
    #[arg(long, default_value_t = 1e-4)]
    step_phase2: f64,
    #[arg(long, default_value_t = 1e-9)]
    convergence_tol: f64,
    #[arg(long, value_enum, default_value_t = DetachArg::Dl)]
    detach: DetachArg,
    /// ASD steps per outer iteration.
    #[arg(long, default_value_t = 1)]
    asd_steps: u32,
    /// NLD steps per outer iteration.
    #[arg(long, default_value_t = 1)]
    nld_steps: u32,
}

impl SolverArgs {
    fn resolve(&self) -> Result<SolverConfig> {
        let config = SolverConfig {
            weights: self.weights.resolve()?,
            phase1_iters: self.phase1_iters,
            phase2_iters: self.phase2_iters,
            step_size_phase1: self.step_phase1,
            step_size_phase2: self.step_phase2,
            convergence_tol: self.convergence_tol,
            detach_mode: self.detach.into(),
            asd_steps: self.asd_steps,
            nld_steps: self.nld_steps,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decompose an image pair (or a manifest of pairs) into albedo,
    /// shading, normals and SH lighting.
    Decompose(DecomposeCmd),
    /// Re-render albedo + normals under a target SH light, optionally
    /// Poisson-blended into a background.
    Relight(RelightCmd),
    /// Relight a target decomposition with the light of a source one.
    TransferLight(TransferCmd),
    /// Recover albedo as image / shading.
    Delight(DelightCmd),
    /// Render albedo + normals under an SH light.
    Render(RenderCmd),
    /// Generate a synthetic pair directory with ground truth.
    Synth(SynthCmd),
    /// Poisson-blend a foreground region into a background.
    Blend(BlendCmd),
    /// Compare a result directory against a ground-truth directory.
    Eval(EvalCmd),
}

#[derive(Args)]
struct DecomposeCmd {
    /// Input images (exactly two), or use --manifest.
    images: Vec<PathBuf>,
    /// Tab-separated manifest: path_i, path_j, mask, prior_i, prior_j per line.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    prior_i: Option<PathBuf>,
    #[arg(long)]
    prior_j: Option<PathBuf>,
    /// Result directory (single pair) or root for pair_NNNN dirs (manifest).
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct RelightCmd {
    #[arg(long)]
    albedo: PathBuf,
    #[arg(long)]
    normal: PathBuf,
    /// Target SH light file (nine floats).
    #[arg(long)]
    light: PathBuf,
    /// Background to blend into (requires --blend-mask).
    #[arg(long, requires = "blend_mask")]
    background: Option<PathBuf>,
    #[arg(long, requires = "background")]
    blend_mask: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferCmd {
    /// Result directory providing the light.
    #[arg(long)]
    source: PathBuf,
    /// Result directory providing albedo and normals.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "i")]
    member: String,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct DelightCmd {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    shading: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, short)]
    out: PathBuf,
    /// Optional low-confidence mask output.
    #[arg(long)]
    low_confidence: Option<PathBuf>,
}

#[derive(Args)]
struct RenderCmd {
    #[arg(long)]
    albedo: PathBuf,
    #[arg(long)]
    normal: PathBuf,
    #[arg(long)]
    light: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LightsArg {
    /// shared ambient with mirrored directional components
    Mirrored,
    /// seeded random lights
    Random,
    /// pure ambient (shading = 1)
    Ambient,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PatternArg {
    Checker,
    Radial,
    Noise,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, value_enum, default_value_t = PatternArg::Checker)]
    albedo: PatternArg,
    #[arg(long, value_enum, default_value_t = LightsArg::Mirrored)]
    lights: LightsArg,
    /// Per-pixel prior perturbation bound in degrees (0 = exact prior).
    #[arg(long, default_value_t = 0.0)]
    perturb_prior: f64,
    /// Gaussian noise sigma applied to both images.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Salt-and-pepper corruption fraction applied to both images.
    #[arg(long, default_value_t = 0.0)]
    salt_pepper: f64,
}

#[derive(Args)]
struct BlendCmd {
    #[arg(long)]
    foreground: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// Result directory (the 10-file layout).
    #[arg(long)]
    result: PathBuf,
    /// Ground-truth directory (albedo/shading/normal/light files).
    #[arg(long)]
    truth: PathBuf,
    /// Angular-error thresholds in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [20.0, 25.0, 30.0])]
    thresholds: Vec<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by default; the exit-code contract
    // reserves 2 for non-convergence, so parse failures map to 1
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let gamma = cli.gamma;
    if !(gamma.is_finite() && gamma > 0.0) {
        bail!("gamma must be positive");
    }
    match cli.command {
        Command::Decompose(cmd) => decompose(cmd, gamma, cli.threads),
        Command::Relight(cmd) => {
            let albedo = io::load_image(&cmd.albedo, gamma)?;
            let normals = io::load_normal_map(&cmd.normal)?;
            let light = io::load_light(&cmd.light)?;
            let mut img = relight(&albedo, &normals, &light)?;
            if let (Some(bg_path), Some(mask_path)) = (&cmd.background, &cmd.blend_mask) {
                let background = io::load_image(bg_path, gamma)?;
                let mask = io::load_mask(mask_path)?;
                img = poisson_blend(&img, &background, &mask)?;
            }
            io::save_image(&cmd.out, &img, gamma)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::TransferLight(cmd) => {
            let member = parse_member(&cmd.member)?;
            let source = io::read_member(&cmd.source, member, gamma)?;
            let target = io::read_member(&cmd.target, member, gamma)?;
            let img = relight(&target.albedo, &target.normals, &source.light)?;
            io::save_image(&cmd.out, &img, gamma)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Delight(cmd) => {
            let image = io::load_image(&cmd.image, gamma)?;
            let shading = io::load_shading(&cmd.shading, gamma)?;
            let out = relume_core::delight(&image, &shading, cmd.epsilon)?;
            io::save_image(&cmd.out, &out.albedo, gamma)?;
            if let Some(path) = &cmd.low_confidence {
                io::save_mask(path, &out.low_confidence)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Render(cmd) => {
            let albedo = io::load_image(&cmd.albedo, gamma)?;
            let normals = io::load_normal_map(&cmd.normal)?;
            let light = io::load_light(&cmd.light)?;
            let img = relume_core::render(&albedo, &normals, &light)?;
            io::save_image(&cmd.out, &img, gamma)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth(cmd) => synth_cmd(cmd, cli.seed, gamma),
        Command::Blend(cmd) => {
            let fg = io::load_image(&cmd.foreground, gamma)?;
            let bg = io::load_image(&cmd.background, gamma)?;
            let mask = io::load_mask(&cmd.mask)?;
            let img = poisson_blend(&fg, &bg, &mask)?;
            io::save_image(&cmd.out, &img, gamma)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(cmd) => eval(cmd, gamma),
    }
}

fn parse_member(s: &str) -> Result<Member> {
    match s {
        "i" => Ok(Member::I),
        "j" => Ok(Member::J),
        other => bail!("member must be i or j, got {other:?}"),
    }
}

/// One parsed manifest line; empty optional fields fall back to a full mask
/// and a frontal prior.
struct ManifestEntry {
    path_i: PathBuf,
    path_j: PathBuf,
    mask: Option<PathBuf>,
    prior_i: Option<PathBuf>,
    prior_j: Option<PathBuf>,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            bail!(
                "manifest line {}: need at least path_i<TAB>path_j",
                lineno + 1
            );
        }
        let get = |idx: usize| -> Option<PathBuf> {
            fields
                .get(idx)
                .filter(|s| !s.trim().is_empty())
                .map(|s| PathBuf::from(s.trim()))
        };
        entries.push(ManifestEntry {
            path_i: PathBuf::from(fields[0].trim()),
            path_j: PathBuf::from(fields[1].trim()),
            mask: get(2),
            prior_i: get(3),
            prior_j: get(4),
        });
    }
    if entries.is_empty() {
        bail!("manifest holds no pairs");
    }
    Ok(entries)
}

fn load_pair(entry: &ManifestEntry, gamma: f64) -> Result<PairInput> {
    let image_i = io::load_image(&entry.path_i, gamma)
        .with_context(|| format!("reading {}", entry.path_i.display()))?;
    let image_j = io::load_image(&entry.path_j, gamma)
        .with_context(|| format!("reading {}", entry.path_j.display()))?;
    let (w, h) = image_i.dims();
    let mask = match &entry.mask {
        Some(path) => io::load_mask(path)?,
        None => Mask::full(w, h),
    };
    let frontal = || {
        eprintln!("warning: no prior normals given, falling back to a frontal constant prior");
        NormalMap::frontal(w, h)
    };
    let prior_i = match &entry.prior_i {
        Some(path) => io::load_normal_map(path)?,
        None => frontal(),
    };
    let prior_j = match &entry.prior_j {
        Some(path) => io::load_normal_map(path)?,
        None => frontal(),
    };
    let input = PairInput {
        image_i,
        image_j,
        mask,
        prior_i,
        prior_j,
    };
    input.validate()?;
    Ok(input)
}

fn decompose_one(
    entry: &ManifestEntry,
    out_dir: &Path,
    config: &SolverConfig,
    preset: &str,
    gamma: f64,
) -> Result<bool> {
    let input = load_pair(entry, gamma)?;
    let result = decompose_pair(&input, config)?;
    io::write_result_dir(out_dir, &result, &input.mask, &config.weights, preset, gamma)?;
    if !result.converged {
        eprintln!(
            "warning: {} did not converge within the iteration budget",
            out_dir.display()
        );
    }
    Ok(result.converged)
}

fn decompose(cmd: DecomposeCmd, gamma: f64, threads: Option<usize>) -> Result<ExitCode> {
    let config = cmd.solver.resolve()?;
    let preset = cmd.solver.weights.preset.clone();

    if let Some(manifest) = &cmd.manifest {
        let entries = parse_manifest(manifest)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .context("building worker pool")?;
        use rayon::prelude::*;
        let results: Vec<Result<bool>> = pool.install(|| {
            entries
                .par_iter()
                .enumerate()
                .map(|(idx, entry)| {
                    let dir = cmd.out.join(format!("pair_{idx:04}"));
                    decompose_one(entry, &dir, &config, &preset, gamma)
                })
                .collect()
        });
        let mut all_converged = true;
        for r in results {
            all_converged &= r?;
        }
        return Ok(if all_converged {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(2)
        });
    }

    if cmd.images.len() != 2 {
        bail!("decompose expects exactly two image paths (or --manifest)");
    }
    let entry = ManifestEntry {
        path_i: cmd.images[0].clone(),
        path_j: cmd.images[1].clone(),
        mask: cmd.mask.clone(),
        prior_i: cmd.prior_i.clone(),
        prior_j: cmd.prior_j.clone(),
    };
    let converged = decompose_one(&entry, &cmd.out, &config, &preset, gamma)?;
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn synth_cmd(cmd: SynthCmd, seed: u64, gamma: f64) -> Result<ExitCode> {
    if cmd.size < 16 {
        bail!("synthetic size must be at least 16");
    }
    let (normals, mask) = synth::sphere_normals(cmd.size, 0.92);
    let albedo = synth::albedo_pattern(
        cmd.size,
        match cmd.albedo {
            PatternArg::Checker => AlbedoPattern::Checker {
                cell: (cmd.size / 8).max(2),
                low: 0.45,
                high: 0.65,
            },
            PatternArg::Radial => AlbedoPattern::Radial { center: 0.85, edge: 0.25 },
            PatternArg::Noise => AlbedoPattern::SmoothNoise { low: 0.2, high: 0.7, seed },
        },
    );
    let (light_i, light_j) = match cmd.lights {
        LightsArg::Mirrored => {
            let mut l = ShCoefficients::ambient(1.0);
            l.0[3] = 0.8;
            (l, l.mirror_x())
        }
        LightsArg::Random => (
            synth::random_light(seed, 2.5)?,
            synth::random_light(seed.wrapping_add(1), 2.5)?,
        ),
        LightsArg::Ambient => (ShCoefficients::ambient(1.0), ShCoefficients::ambient(1.0)),
    };
    let prior = if cmd.perturb_prior > 0.0 {
        PriorSpec::Perturbed {
            max_angle_deg: cmd.perturb_prior,
            seed,
        }
    } else {
        PriorSpec::Exact
    };
    let (mut input, truth) = synth::make_pair(&albedo, &normals, &light_i, &light_j, &mask, prior)?;
    if cmd.noise_sigma > 0.0 {
        input.image_i = synth::add_gaussian_noise(&input.image_i, cmd.noise_sigma, seed ^ 0x5eed);
        input.image_j = synth::add_gaussian_noise(&input.image_j, cmd.noise_sigma, seed ^ 0xface);
    }
    if cmd.salt_pepper > 0.0 {
        input.image_i = synth::add_salt_pepper(&input.image_i, cmd.salt_pepper, seed ^ 0x7a17);
        input.image_j = synth::add_salt_pepper(&input.image_j, cmd.salt_pepper, seed ^ 0x9e99);
    }
    io::write_pair_dir(&cmd.out, &input, &truth, gamma)?;
    println!("wrote synthetic pair to {}", cmd.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(cmd: EvalCmd, gamma: f64) -> Result<ExitCode> {
    let mask = io::load_mask(&cmd.result.join("mask.png"))?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for member in [Member::I, Member::J] {
        let sfx = member.suffix();
        let got = io::read_member(&cmd.result, member, gamma)?;
        let want = io::read_member(&cmd.truth, member, gamma)?;

        rows.push((
            format!("albedo_mae_{sfx}"),
            mae(got.albedo.data(), want.albedo.data(), &mask, 3)?,
        ));
        rows.push((
            format!("albedo_rmse_{sfx}"),
            rmse(got.albedo.data(), want.albedo.data(), &mask, 3)?,
        ));
        rows.push((
            format!("shading_mae_{sfx}"),
            mae(got.shading.data(), want.shading.data(), &mask, 1)?,
        ));
        rows.push((
            format!("shading_rmse_{sfx}"),
            rmse(got.shading.data(), want.shading.data(), &mask, 1)?,
        ));
        let stats =
            relume_core::angular_error_stats(&got.normals, &want.normals, &mask, &cmd.thresholds)?;
        rows.push((format!("normal_mean_deg_{sfx}"), stats.mean_deg));
        rows.push((format!("normal_std_deg_{sfx}"), stats.std_deg));
        for (t, frac) in &stats.pct_under {
            rows.push((format!("normal_pct_under_{t}_{sfx}"), *frac));
        }
        rows.push((
            format!("light_rel_err_{sfx}"),
            got.light.relative_error(&want.light),
        ));
    }
    let mut csv = String::from("metric,value\n");
    for (name, value) in &rows {
        csv.push_str(&format!("{name},{value:.9}\n"));
    }
    std::fs::write(&cmd.out, csv)?;
    println!("wrote {} metrics to {}", rows.len(), cmd.out.display());
    Ok(ExitCode::SUCCESS)
}
