//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sapa_core::grad::{finite_diff_check, CorruptGradient, FdOptions, SapaGradOp};
use sapa_core::reference::{random_case, CaseLimits};
use sapa_core::{
    cost, cost_table, CostQuery, CostReport, DType, Real, RngSpec, SapaConfig, SapaParams, Step,
    Tensor, Upsampler, Variant,
};
use serde::Serialize;

use crate::bench::{bench_variant, to_csv, BenchOptions};
use crate::checks;
use crate::error::{CliError, CliResult};
use crate::method::Method;
use crate::params;
use crate::pgm;
use crate::tensorfile::TensorFile;

#[derive(Debug, Parser)]
#[command(
    name = "sapa",
    version,
    about = "Similarity-aware feature upsampling toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upsample a decoder tensor with a SAPA variant or a fixed-rule baseline.
    Upsample(UpsampleArgs),
    /// Export the kernel map of every slot as PGM images plus a text dump.
    Kernelmap(KernelmapArgs),
    /// Time forward passes on seeded random inputs and write CSV.
    Bench(BenchArgs),
    /// Print the analytic FLOPs/parameter table.
    Flops(FlopsArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the invariant suite and print a pass/fail table.
    Selftest,
    /// Write a seeded random (or constant) tensor file.
    Gen(GenArgs),
    /// Write an untrained parameter bundle (Xavier embeddings, zero offsets).
    InitParams(InitParamsArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// i, b or d.
    #[arg(long)]
    pub variant: String,
    /// Repeatable KEY=VAL overrides of the variant defaults.
    #[arg(long = "config", value_name = "KEY=VAL")]
    pub config: Vec<String>,
    /// Seed for untrained parameters when --params is absent.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    /// i, b, d, nn, bilinear or pixelshuffle.
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long = "config", value_name = "KEY=VAL")]
    pub config: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KernelmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// High-res output position `i,j`.
    #[arg(long)]
    pub position: String,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "1,256,120,120")]
    pub shape: String,
    #[arg(long, default_value_t = 2)]
    pub ratio: usize,
    #[arg(long, default_value = "sapa-i,sapa-b,sapa-d")]
    pub variants: String,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// fig10: C=256, H=W=120 with published default hyper-parameters.
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated KEY=VAL: upsampler, c, d, k, s, g, h, w.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// b or d.
    #[arg(long, default_value = "b")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Scale the analytic decoder gradient by 1.1 to exercise the harness.
    #[arg(long)]
    pub inject_bug: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fill with this value instead of N(0, 1) samples.
    #[arg(long, allow_hyphen_values = true)]
    pub constant: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitParamsArgs {
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub channels: usize,
    #[arg(long)]
    pub encoder_channels: usize,
    #[arg(long = "config", value_name = "KEY=VAL")]
    pub config: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Upsample(a) => upsample_cmd(&a),
        Command::Kernelmap(a) => kernelmap_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Flops(a) => flops_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Selftest => selftest_cmd(),
        Command::Gen(a) => gen_cmd(&a),
        Command::InitParams(a) => init_params_cmd(&a),
    }
}

pub fn parse_list(s: &str, what: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad {what} {s:?}")))
        })
        .collect()
}

fn parse_shape(s: &str) -> CliResult<[usize; 4]> {
    let v = parse_list(s, "shape")?;
    let dims: [usize; 4] = v
        .try_into()
        .map_err(|_| CliError::usage(format!("shape must be N,C,H,W, got {s:?}")))?;
    if dims.contains(&0) {
        return Err(CliError::usage("shape dims must be positive"));
    }
    Ok(dims)
}

fn sapa_variant(name: &str) -> CliResult<Variant> {
    match Method::parse(name)? {
        Method::Sapa(v) => Ok(v),
        m => Err(CliError::usage(format!(
            "{} has no kernels; expected i, b or d",
            m.name()
        ))),
    }
}

/// Variant defaults with `KEY=VAL` overrides; reports whether the ratio
/// was given explicitly.
fn build_config(variant: Variant, overrides: &[String]) -> CliResult<(SapaConfig, bool)> {
    let mut cfg = SapaConfig::for_variant(variant);
    let mut ratio_set = false;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config {kv:?} is not KEY=VAL")))?;
        cfg.set(k.trim(), v.trim())?;
        ratio_set |= matches!(k.trim(), "ratio" | "s" | "scale");
    }
    Ok((cfg, ratio_set))
}

fn check_ratio<T: Real>(
    cfg: &mut SapaConfig,
    explicit: bool,
    dec: &Tensor<T>,
    enc: &Tensor<T>,
) -> CliResult<()> {
    if dec.c() == 0 || dec.h() == 0 || !enc.h().is_multiple_of(dec.h()) {
        return Err(CliError::usage(format!(
            "encoder spatial {}x{} is not a multiple of decoder spatial {}x{}",
            enc.h(),
            enc.w(),
            dec.h(),
            dec.w()
        )));
    }
    let inferred = enc.h() / dec.h();
    if explicit && cfg.ratio != inferred {
        return Err(CliError::usage(format!(
            "ratio={} disagrees with the feature shapes (ratio {inferred})",
            cfg.ratio
        )));
    }
    cfg.ratio = inferred;
    Ok(())
}

fn load_params<T: Real>(
    path: Option<&Path>,
    cfg: &SapaConfig,
    c: usize,
    ce: usize,
    seed: u64,
) -> CliResult<SapaParams<T>> {
    match path {
        Some(p) => params::load(p, cfg, c, ce),
        None => Ok(SapaParams::init(cfg, c, ce, &RngSpec::new(seed))),
    }
}

fn dims_str(d: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3])
}

fn upsample_cmd(a: &UpsampleArgs) -> CliResult<()> {
    let method = Method::parse(&a.variant)?;
    let dec = TensorFile::load(&a.decoder)?;
    let enc = match (&a.encoder, method) {
        (Some(p), _) => Some(TensorFile::load(p)?),
        (None, Method::Sapa(v)) => {
            return Err(CliError::usage(format!(
                "{} needs an encoder feature: pass --encoder FILE",
                v.name()
            )))
        }
        (None, _) => None,
    };
    // Compute in f64 and round once to the input dtype.
    let y = upsample_typed(a, method, &dec, enc.as_ref())?;
    let out = match dec.dtype() {
        DType::F32 => TensorFile::from_tensor(&y.cast::<f32>()),
        DType::F64 => TensorFile::from_tensor(&y),
    };
    out.save(&a.out)?;
    println!(
        "{}: {} -> {} ({:?}) written to {}",
        method.name(),
        dims_str(dec.dims4()),
        dims_str(out.dims4()),
        out.dtype(),
        a.out.display()
    );
    Ok(())
}

fn upsample_typed(
    a: &UpsampleArgs,
    method: Method,
    dec: &TensorFile,
    enc: Option<&TensorFile>,
) -> CliResult<Tensor<f64>> {
    let x = dec.to_tensor::<f64>()?;
    match method {
        Method::Sapa(variant) => {
            let y = enc.expect("checked by caller").to_tensor::<f64>()?;
            let (mut cfg, explicit) = build_config(variant, &a.config)?;
            check_ratio(&mut cfg, explicit, &x, &y)?;
            cfg.validate(x.c(), y.c())?;
            let params = load_params::<f64>(a.params.as_deref(), &cfg, x.c(), y.c(), a.seed)?;
            Ok(sapa_core::upsample(&x, &y, &params, &cfg)?.output)
        }
        baseline => {
            let mut cfg = SapaConfig::sapa_i();
            for kv in &a.config {
                match kv.split_once('=') {
                    Some((k, v)) if matches!(k.trim(), "ratio" | "s" | "scale") => {
                        cfg.set(k.trim(), v.trim())?
                    }
                    _ => {
                        return Err(CliError::usage(format!(
                            "{} only accepts ratio=S, got {kv:?}",
                            baseline.name()
                        )))
                    }
                }
            }
            if let Some(y) = enc {
                let [_, _, eh, _] = y.dims4();
                if x.h() > 0 && eh % x.h() == 0 && !a.config.iter().any(|kv| kv.contains('=')) {
                    cfg.ratio = eh / x.h();
                }
            }
            baseline.run_baseline(&x, cfg.ratio)
        }
    }
}

fn kernelmap_cmd(a: &KernelmapArgs) -> CliResult<()> {
    let variant = sapa_variant(&a.model.variant)?;
    let x = TensorFile::load(&a.decoder)?.to_tensor::<f64>()?;
    let y = TensorFile::load(&a.encoder)?.to_tensor::<f64>()?;
    let (mut cfg, explicit) = build_config(variant, &a.model.config)?;
    check_ratio(&mut cfg, explicit, &x, &y)?;
    cfg.validate(x.c(), y.c())?;
    let pos = parse_list(&a.position, "position")?;
    let [pi, pj]: [usize; 2] = pos
        .try_into()
        .map_err(|_| CliError::usage(format!("position must be i,j, got {:?}", a.position)))?;
    let (oh, ow) = (y.h(), y.w());
    if pi >= oh || pj >= ow {
        return Err(CliError::usage(format!(
            "position ({pi}, {pj}) outside the {oh}x{ow} output"
        )));
    }
    let params = load_params::<f64>(a.model.params.as_deref(), &cfg, x.c(), y.c(), a.model.seed)?;
    let km = sapa_core::upsample(&x, &y, &params, &cfg)?.kernels;
    let prefix = a.out_prefix.display().to_string();
    let mut dump = format!(
        "# {} kernel weights at output ({pi}, {pj})\n# group slot weight\n",
        variant.name()
    );
    let mut files = 0;
    for g in 0..km.groups {
        let w = km.weights_at(0, pi, pj, g);
        for (slot, wt) in w.iter().enumerate() {
            let name = if km.groups == 1 {
                format!("{prefix}_slot{slot}.pgm")
            } else {
                format!("{prefix}_g{g}_slot{slot}.pgm")
            };
            pgm::write(Path::new(&name), ow, oh, &km.slot_map(0, g, slot))?;
            files += 1;
            dump.push_str(&format!("{g} {slot} {wt:.9}\n"));
        }
        dump.push_str(&format!("# group {g} sum {:.9}\n", w.iter().sum::<f64>()));
    }
    let txt = format!("{prefix}_weights.txt");
    std::fs::write(&txt, &dump).map_err(|e| CliError::runtime(format!("{txt}: {e}")))?;
    println!("wrote {files} PGM maps ({ow}x{oh}) and {txt}");
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> CliResult<()> {
    let opts = BenchOptions {
        shape: parse_shape(&a.shape)?,
        ratio: a.ratio,
        warmup: a.warmup,
        iters: a.iters,
        seed: a.seed,
    };
    let names: Vec<&str> = a
        .variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(CliError::usage("no variants given"));
    }
    let records = names
        .iter()
        .map(|n| bench_variant(n, &opts))
        .collect::<CliResult<Vec<_>>>()?;
    let csv = to_csv(&records);
    match &a.out {
        Some(p) => {
            std::fs::write(p, &csv)
                .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            for r in &records {
                eprintln!(
                    "{}: {}",
                    r.upsampler,
                    r.mean_ms
                        .map(|m| format!("{m:.2} ms"))
                        .unwrap_or_else(|| r.status.clone())
                );
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FlopsRow {
    upsampler: &'static str,
    c: u64,
    d: u64,
    k: u64,
    s: u64,
    g: u64,
    h: u64,
    w: u64,
    step_i_flops: Option<u64>,
    step_ii_flops: Option<u64>,
    step_iii_flops: Option<u64>,
    flops_per_position: u64,
    published_total_flops_per_position: u64,
    flops: u64,
    gflops: f64,
    params: u64,
    has_forward: bool,
}

impl From<&CostReport> for FlopsRow {
    fn from(r: &CostReport) -> Self {
        let q = r.query;
        let step = |s| r.step(s).map(|x| x.flops_per_position);
        FlopsRow {
            upsampler: q.upsampler.name(),
            c: q.c,
            d: q.d,
            k: q.k,
            s: q.s,
            g: q.g,
            h: q.h,
            w: q.w,
            step_i_flops: step(Step::PointSelection),
            step_ii_flops: step(Step::WeightGeneration),
            step_iii_flops: step(Step::FeatureAssembly),
            flops_per_position: r.flops_per_position,
            published_total_flops_per_position: r.published_total_flops_per_position,
            flops: r.flops,
            gflops: r.gflops(),
            params: r.params,
            has_forward: q.upsampler.has_forward(),
        }
    }
}

/// Parses `KEY=VAL,...`; without `upsampler` every row is produced.
pub fn parse_query(s: &str) -> CliResult<Vec<CostQuery>> {
    let mut upsampler = None;
    let mut fields: Vec<(String, u64)> = Vec::new();
    for kv in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("query item {kv:?} is not KEY=VAL")))?;
        let k = k.trim().to_ascii_lowercase();
        if k == "upsampler" || k == "u" {
            upsampler = Some(Upsampler::parse(v.trim())?);
            continue;
        }
        let n = v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::usage(format!("{k} expects a positive integer, got {v:?}")))?;
        if !matches!(k.as_str(), "c" | "d" | "k" | "s" | "g" | "h" | "w") {
            return Err(CliError::usage(format!(
                "unknown query key {k:?} (expected upsampler, c, d, k, s, g, h, w)"
            )));
        }
        fields.push((k, n));
    }
    let rows: Vec<Upsampler> = upsampler
        .map(|u| vec![u])
        .unwrap_or_else(|| Upsampler::ALL.to_vec());
    Ok(rows
        .into_iter()
        .map(|u| {
            let mut q = CostQuery::with_defaults(u, 256, 120, 120);
            for (k, n) in &fields {
                let slot = match k.as_str() {
                    "c" => &mut q.c,
                    "d" => &mut q.d,
                    "k" => &mut q.k,
                    "s" => &mut q.s,
                    "g" => &mut q.g,
                    "h" => &mut q.h,
                    _ => &mut q.w,
                };
                *slot = *n;
            }
            q
        })
        .collect())
}

fn flops_cmd(a: &FlopsArgs) -> CliResult<()> {
    let reports: Vec<CostReport> = match (&a.preset, &a.query) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage("give either --preset or --query, not both"))
        }
        (Some(p), None) if p.eq_ignore_ascii_case("fig10") => cost_table(256, 120, 120)?,
        (Some(p), None) => {
            return Err(CliError::usage(format!(
                "unknown preset {p:?} (expected fig10)"
            )))
        }
        (None, Some(q)) => parse_query(q)?.iter().map(cost).collect::<Result<_, _>>()?,
        (None, None) => cost_table(256, 120, 120)?,
    };
    let rows: Vec<FlopsRow> = reports.iter().map(FlopsRow::from).collect();
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&rows).map_err(|e| CliError::runtime(e.to_string()))?
        );
        return Ok(());
    }
    let cell = |v: Option<u64>| {
        v.map(|x| x.to_string())
            .unwrap_or_else(|| String::from("-"))
    };
    println!(
        "{:<13} {:>12} {:>12} {:>12} {:>12} {:>15} {:>9} {:>10}  note",
        "upsampler", "I/pos", "II/pos", "III/pos", "total/pos", "FLOPs", "GFLOPs", "params"
    );
    for r in &rows {
        let mut note = String::new();
        if r.published_total_flops_per_position != r.flops_per_position {
            note.push_str(&format!(
                "printed total {}/pos; ",
                r.published_total_flops_per_position
            ));
        }
        if !r.has_forward {
            note.push_str("cost model only");
        }
        println!(
            "{:<13} {:>12} {:>12} {:>12} {:>12} {:>15} {:>9.3} {:>10}  {}",
            r.upsampler,
            cell(r.step_i_flops),
            cell(r.step_ii_flops),
            cell(r.step_iii_flops),
            r.flops_per_position,
            r.flops,
            r.gflops,
            r.params,
            note.trim_end_matches("; ")
        );
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult<()> {
    let variant = sapa_variant(&a.variant)?;
    if variant == Variant::I {
        return Err(CliError::usage("gradcheck covers b and d"));
    }
    let case = random_case(variant, a.seed, CaseLimits::GRADIENT);
    println!("{} seed {}: {:?}", variant.name(), a.seed, case.cfg);
    let op = SapaGradOp {
        cfg: case.cfg,
        decoder: case.decoder,
        encoder: case.encoder,
        params: case.params,
    };
    let opts = FdOptions {
        rel_tol: a.tol,
        seed: a.seed,
        ..FdOptions::default()
    };
    let report = if a.inject_bug {
        finite_diff_check(
            &CorruptGradient {
                inner: &op,
                tensor: 0,
                entry: None,
                factor: 1.1,
            },
            &opts,
        )?
    } else {
        finite_diff_check(&op, &opts)?
    };
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &a.csv {
        std::fs::write(p, &csv).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
    }
    if report.passed() {
        println!(
            "gradcheck PASS (max rel err {:.2e} < {:.1e})",
            report.max_rel_err(),
            a.tol
        );
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradcheck FAIL: {}",
            report.failing().join(", ")
        )))
    }
}

fn selftest_cmd() -> CliResult<()> {
    let mut failed = Vec::new();
    for check in checks::core_suite() {
        println!("{}", check.line());
        if !check.ok() {
            failed.push(check.name);
        }
    }
    if failed.is_empty() {
        println!("selftest: all properties PASS");
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}

fn gen_cmd(a: &GenArgs) -> CliResult<()> {
    let dims = parse_shape(&a.shape)?;
    let t64 = match a.constant {
        Some(v) => Tensor::<f64>::full(dims, v),
        None => Tensor::<f64>::randn(dims, a.seed),
    };
    let file = match a.dtype.as_str() {
        "f32" => TensorFile::from_tensor(&t64.cast::<f32>()),
        "f64" => TensorFile::from_tensor(&t64),
        other => {
            return Err(CliError::usage(format!(
                "dtype must be f32 or f64, got {other:?}"
            )))
        }
    };
    file.save(&a.out)?;
    println!(
        "wrote {} {} to {}",
        a.dtype,
        dims_str(dims),
        a.out.display()
    );
    Ok(())
}

fn init_params_cmd(a: &InitParamsArgs) -> CliResult<()> {
    let variant = sapa_variant(&a.variant)?;
    let (cfg, _) = build_config(variant, &a.config)?;
    cfg.validate(a.channels, a.encoder_channels)?;
    let p = SapaParams::<f32>::init(&cfg, a.channels, a.encoder_channels, &RngSpec::new(a.seed));
    params::save(&a.out, &p)?;
    println!(
        "wrote {} parameters ({} tensors) to {}",
        p.param_count(),
        p.mx.len() + p.my.len() + p.phi.iter().count(),
        a.out.display()
    );
    Ok(())
}
