use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scalecode::classify::ApVariant;
use scalecode::dataset::load_manifest;
use scalecode::descriptors::synth::{synth_dataset, ScaleSignal, SynthConfig};
use scalecode::descriptors::toy::{procedural_image, toy_extract, LumaImage};
use scalecode::descriptors::DescriptorDir;
use scalecode::parallel::{self, Parallelism};
use scalecode::pipeline::commands;
use scalecode::pipeline::{CoderKind, GridSpec, PipelineConfig, SweepRow};
use scalecode::scale_coding::RepresentationMode;
use scalecode::ErrorKind;

#[derive(Parser)]
#[command(name = "scalecode", version, about = "Scale-coded Fisher vector pipelines")]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, env = "SCALECODE_THREADS", default_value_t = 0)]
    threads: usize,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scale-discriminative dataset.
    Synth(SynthArgs),
    /// Extract toy gradient descriptors for every manifest instance.
    ExtractToy(ExtractArgs),
    /// Sample train descriptors and fit the GMM vocabulary.
    FitGmm(Common),
    /// Encode train and test instances with the fitted vocabulary.
    Encode(StageArgs),
    /// Train one-vs-rest SVMs on encoded train instances.
    Train(StageArgs),
    /// Score the test split and write AP/mAP reports.
    Eval(StageArgs),
    /// Sum per-mode test scores and evaluate the result.
    Fuse(FuseArgs),
    /// Every stage end to end for the configured modes.
    Run(RunArgs),
    /// mAP as a function of the number of absolute scale partitions.
    SweepPartitions(SweepPartitionsArgs),
    /// mAP as a function of the number of GMM components.
    SweepK(SweepKArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config with [paths] and [experiment] tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    descriptors: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Directory of precomputed `<id>.fc-external.scrp` representations.
    #[arg(long)]
    external_dir: Option<PathBuf>,
    /// Number of GMM components.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples_per_image: Option<usize>,
    /// Scale partition cutoffs, e.g. `1.1,1.8`; empty for one partition.
    #[arg(long, value_parser = parse_thresholds, allow_hyphen_values = true)]
    thresholds: Option<Thresholds>,
    /// SVM regularization constant.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scale grid as `lo,step,n`.
    #[arg(long)]
    grid: Option<GridSpec>,
    #[arg(long, value_enum)]
    ap_variant: Option<ApArg>,
    #[arg(long, value_enum)]
    coder: Option<CoderArg>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mode: RepresentationMode,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Modes to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<RepresentationMode>,
    /// Skip score fusion.
    #[arg(long)]
    no_fuse: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    /// Score tables to add, by report name; defaults to the configured modes.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
}

#[derive(Args)]
struct SweepPartitionsArgs {
    #[command(flatten)]
    common: Common,
    /// Partition counts; defaults to every count from 1 to the grid size.
    #[arg(long, value_delimiter = ',')]
    counts: Vec<usize>,
}

#[derive(Args)]
struct SweepKArgs {
    #[command(flatten)]
    common: Common,
    /// Component counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    ks: Vec<usize>,
    #[arg(long, default_value = "relative")]
    mode: RepresentationMode,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives manifest.json and descriptors/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 120)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SignalArg::Absolute)]
    signal: SignalArg,
    #[arg(long, default_value = "0.5,0.1,21")]
    grid: GridSpec,
    /// Partition cutoffs the signal is planted along.
    #[arg(long, value_parser = parse_thresholds, default_value = "1.1,1.8")]
    thresholds: Thresholds,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<image_id>.pgm` files; procedural images are used when
    /// omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "0.5,0.1,21")]
    grid: GridSpec,
    /// Patch stride in resampled pixels.
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Box expansion factor applied before cropping.
    #[arg(long, default_value_t = 1.5)]
    expand: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Off,
    Absolute,
    Relative,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApArg {
    All,
    #[value(name = "11pt")]
    ElevenPoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoderArg {
    Fisher,
    Bow,
}

#[derive(Clone)]
struct Thresholds(Vec<f64>);

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    if s.trim().is_empty() {
        return Ok(Thresholds(Vec::new()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Thresholds)
}

impl Common {
    fn config(&self, policy: Parallelism) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let p = &mut cfg.paths;
        for (slot, value) in [
            (&mut p.manifest, &self.manifest),
            (&mut p.descriptors, &self.descriptors),
            (&mut p.model_dir, &self.model_dir),
            (&mut p.output_dir, &self.output_dir),
        ] {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        if let Some(dir) = &self.external_dir {
            p.external_dir = Some(dir.clone());
        }
        let e = &mut cfg.experiment;
        if let Some(k) = self.k {
            e.k = k;
        }
        if let Some(n) = self.samples_per_image {
            e.samples_per_image = n;
        }
        if let Some(t) = &self.thresholds {
            e.thresholds = t.0.clone();
        }
        if let Some(c) = self.c {
            e.c = c;
        }
        if let Some(seed) = self.seed {
            e.seed = seed;
        }
        if let Some(grid) = self.grid {
            e.grid = grid;
        }
        if let Some(ap) = self.ap_variant {
            e.ap_variant = match ap {
                ApArg::All => ApVariant::AllPoints,
                ApArg::ElevenPoint => ApVariant::ElevenPoint,
            };
        }
        if let Some(coder) = self.coder {
            e.coder = match coder {
                CoderArg::Fisher => CoderKind::Fisher,
                CoderArg::Bow => CoderKind::Bow,
            };
        }
        e.parallelism = policy;
        Ok(cfg)
    }
}

fn print_sweep(key: &str, rows: &[SweepRow]) {
    println!("{key}\tmAP\tseconds");
    for r in rows {
        println!("{}\t{:.4}\t{:.2}", r.value, r.map, r.seconds);
    }
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let signal = match args.signal {
        SignalArg::Off => ScaleSignal::Off,
        SignalArg::Absolute => ScaleSignal::Absolute,
        SignalArg::Relative => ScaleSignal::Relative,
    };
    let cfg = SynthConfig {
        grid: args.grid.grid()?,
        thresholds: args.thresholds.0.clone(),
        ..SynthConfig::new(args.classes, args.per_class, args.seed, signal)
    };
    let data = synth_dataset(&cfg)?;
    let manifest = args.out.join("manifest.json");
    let descriptors = args.out.join("descriptors");
    data.write(&manifest, &descriptors)?;
    println!(
        "wrote {} train and {} test instances to {}",
        data.manifest.train.len(),
        data.manifest.test.len(),
        args.out.display()
    );
    Ok(())
}

fn extract_toy(args: &ExtractArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let grid = args.grid.grid()?;
    let out = DescriptorDir::new(&args.out);
    let mut count = 0;
    for inst in manifest.instances() {
        let image = match &args.images {
            Some(dir) => {
                let path = dir.join(format!("{}.pgm", inst.image_id));
                LumaImage::read_pgm(&path).with_context(|| format!("instance {}", inst.instance_id))?
            }
            None => procedural_image(&inst.image_id, inst.image_w as usize, inst.image_h as usize),
        };
        let desc = toy_extract(&inst.instance_id, &image, inst.expanded_bbox(args.expand), &grid, args.stride)?;
        out.store(&desc)?;
        count += 1;
    }
    println!("wrote {count} descriptor files to {}", args.out.display());
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    parallel::init_thread_pool(cli.threads);
    let policy = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::Synth(args) => synth(&args)?,
        Command::ExtractToy(args) => extract_toy(&args)?,
        Command::FitGmm(common) => {
            let fit = commands::fit_gmm(&common.config(policy)?)?;
            let last = fit.log_likelihood.last().copied().unwrap_or(f64::NAN);
            println!(
                "K={} D={} iterations={} converged={} mean log-likelihood={last:.6}",
                fit.model.k(),
                fit.model.dim(),
                fit.iterations,
                fit.converged
            );
        }
        Command::Encode(args) => {
            let n = commands::encode(&args.common.config(policy)?, args.mode)?;
            println!("encoded {n} instances ({})", args.mode);
        }
        Command::Train(args) => {
            let model = commands::train(&args.common.config(policy)?, args.mode)?;
            let untrainable = model.trainable.iter().filter(|t| !**t).count();
            println!(
                "trained {} categories ({untrainable} untrainable), dim {}",
                model.num_categories(),
                model.dim()
            );
        }
        Command::Eval(args) => {
            let report = commands::eval(&args.common.config(policy)?, args.mode)?;
            println!("{}\tmAP {:.4}", report.name, report.map);
        }
        Command::Fuse(args) => {
            let cfg = args.common.config(policy)?;
            let inputs = if args.inputs.is_empty() {
                cfg.experiment.modes.iter().map(|m| m.name().to_string()).collect()
            } else {
                args.inputs
            };
            let report = commands::fuse(&cfg, &inputs)?;
            println!("fused\tmAP {:.4}", report.map);
        }
        Command::Run(args) => {
            let mut cfg = args.common.config(policy)?;
            if !args.mode.is_empty() {
                cfg.experiment.modes = args.mode;
            }
            if args.no_fuse {
                cfg.experiment.fuse = false;
            }
            let out = commands::run_pipeline(&cfg)?;
            for r in out.reports() {
                println!("{}\tmAP {:.4}", r.name, r.map);
            }
            println!("chance\tmAP {:.4}", out.chance_map);
        }
        Command::SweepPartitions(args) => {
            let cfg = args.common.config(policy)?;
            let counts = if args.counts.is_empty() {
                (1..=cfg.experiment.grid.n).collect()
            } else {
                args.counts
            };
            print_sweep("T", &commands::sweep_partitions_cmd(&cfg, &counts)?);
        }
        Command::SweepK(args) => {
            let cfg = args.common.config(policy)?;
            if args.ks.is_empty() {
                bail!("no component counts given");
            }
            print_sweep("K", &commands::sweep_components_cmd(&cfg, args.mode, &args.ks)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<scalecode::Error>())
        .map(scalecode::Error::kind);
    match kind {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
