use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pearl_core::attention::{diff_mask, flow_mask, FlowSource};
use pearl_core::autodiff::Tensor;
use pearl_core::composer::{canonical_frame, compose_dataset, ComposeOptions, CompositionConfig};
use pearl_core::dataset::{generate_synthetic, load_dataset, make_splits, save_dataset, EpisodeDataset, SynthSpec, PROBE_RATIOS};
use pearl_core::encoder::{write_embeddings, EmbeddingCache};
use pearl_core::finetune::{
    apply_head, aug_views, read_head, train_aug_head, train_cpc_head, train_dim_head, unit_roles, write_head,
    FinetuneHyper, HeadKind, UnitTable,
};
use pearl_core::harness::{
    compare_runs, episode_flows, load_results, open_encoder, read_reference_csv, read_representations,
    render_report, report_csv, run_experiment, with_overrides, write_representations, EncoderChoice, EncoderSpec,
    ExperimentConfig, RESULTS_FILE,
};
use pearl_core::imaging::{block_match_flow, read_flows, to_grayscale, write_flows, Frame, DEFAULT_BLOCK, DEFAULT_RADIUS};
use pearl_core::probe::{probe_suite, ProbeHyper};
use pearl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pearl", version, about = "Compose, fine-tune and probe frame representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a moving-sprite dataset
    Synth(SynthArgs),
    /// Encode every unit a composition needs with the mock encoder and write a PRLE file
    Encode(EncodeArgs),
    /// Write attention masks as PNGs and, optionally, block-matched flow as PRLF
    Mask(MaskArgs),
    /// Compose per-frame representations into a PRLE file
    Compose(ComposeArgs),
    /// Train a contrastive head on composed representations
    Finetune(FinetuneArgs),
    /// Train linear probes on composed (optionally head-projected) representations
    Probe(ProbeArgs),
    /// Run full experiments from config files
    Run(RunArgs),
    /// Build a CSV table and SVG chart from results files
    Report(ReportArgs),
    /// Per-category F1 deltas between two results files
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    episodes: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    sprites: usize,
    #[arg(long, default_value_t = 32)]
    frame_size: usize,
    #[arg(long, default_value_t = 4)]
    sprite_size: usize,
    #[arg(long, default_value_t = 4)]
    buckets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EncoderArgs {
    /// Precomputed embeddings (PRLE); the mock encoder is used when absent
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
}

impl EncoderArgs {
    fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            kind: if self.embeddings.is_some() { EncoderChoice::File } else { EncoderChoice::Mock },
            width: self.width,
            side: self.side,
            seed: self.encoder_seed,
            path: self.embeddings.clone(),
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "FI")]
    config: CompositionConfig,
    /// Also encode this many augmented views per frame
    #[arg(long, default_value_t = 0)]
    aug_views: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// diff or flow
    #[arg(long, default_value = "diff")]
    source: String,
    /// Directory for mask PNGs
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write block-matched flow of every consecutive pair to this PRLF file
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: usize,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: CompositionConfig,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Imported flow (PRLF) for FM/FP units
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Composed representations written by `compose`
    #[arg(long)]
    reps: PathBuf,
    /// aug-mlp, t-dim, s-dim, st-dim or cpc
    #[arg(long)]
    kind: HeadKind,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Hyperparameter override, e.g. `--hyper epochs=5`
    #[arg(long = "hyper", value_name = "KEY=VALUE")]
    hyper: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the head-projected representations here
    #[arg(long)]
    apply_out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    reps: PathBuf,
    /// Apply this head before probing
    #[arg(long)]
    head: Option<PathBuf>,
    /// Probe override, e.g. `--hyper lr=0.001`
    #[arg(long = "hyper", value_name = "KEY=VALUE")]
    hyper: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the probe report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// One experiment per file
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Config override applied to every file, e.g. `--set probe.lr=0.001`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Extra bars from a `label,config,f1` CSV
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    treatment: PathBuf,
    /// Also write the delta table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a).map_err(|e| e.in_stage("synth")),
        Command::Encode(a) => encode(a).map_err(|e| e.in_stage("encode")),
        Command::Mask(a) => mask(a).map_err(|e| e.in_stage("mask")),
        Command::Compose(a) => compose(a).map_err(|e| e.in_stage("compose")),
        Command::Finetune(a) => finetune(a).map_err(|e| e.in_stage("finetune")),
        Command::Probe(a) => probe(a).map_err(|e| e.in_stage("probe")),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a).map_err(|e| e.in_stage("report")),
        Command::Compare(a) => compare(a).map_err(|e| e.in_stage("compare")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        frame_size: a.frame_size,
        episodes: a.episodes,
        frames_per_episode: a.frames,
        sprites: a.sprites,
        sprite_size: a.sprite_size,
        buckets: a.buckets,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} frames in {} episodes to {}", ds.frame_count(), ds.episodes().len(), a.out.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let spec = EncoderSpec { width: a.width, side: a.side, seed: a.encoder_seed, ..EncoderSpec::default() };
    let encoder = open_encoder(&spec)?;
    let cache = EmbeddingCache::new();
    compose_dataset(&a.config, &ds, &encoder, &cache, &ComposeOptions::default(), None)?;
    if a.aug_views > 0 {
        aug_views(&ds, &encoder, &cache, &FinetuneHyper::default().augmentations, a.aug_views)?;
    }
    let entries = cache.entries();
    write_embeddings(&a.out, encoder.width(), &entries)?;
    println!("wrote {} embeddings of width {} to {}", entries.len(), encoder.width(), a.out.display());
    Ok(())
}

fn mask(a: MaskArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let source = match a.source.as_str() {
        "diff" | "flow" => a.source.as_str(),
        other => return Err(Error::Config(format!("unknown mask source `{other}` (expected diff or flow)"))),
    };
    let mut flows = Vec::new();
    let mut written = 0;
    for ep in ds.episodes() {
        let canon: Vec<Frame> = ep.frames.iter().map(canonical_frame).collect::<Result<_>>()?;
        if let Some(dir) = &a.out {
            let dir = dir.join(format!("episode_{}", ep.id));
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (i, fid) in ep.frame_ids.iter().enumerate() {
                let prev = &canon[i.saturating_sub(1)];
                let m = match source {
                    "diff" => diff_mask(prev, &canon[i])?,
                    _ => flow_mask(prev, &canon[i], &FlowSource::BlockMatch { block: a.block, radius: a.radius })?,
                };
                let f = m.field();
                let rgb: Vec<f64> = f.data().iter().flat_map(|&v| [v, v, v]).collect();
                let path = dir.join(format!("mask_{fid}.png"));
                Frame::new(f.width(), f.height(), rgb)?
                    .to_image()
                    .save(&path)
                    .map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
                written += 1;
            }
        }
        if a.flows.is_some() {
            for pair in canon.windows(2) {
                flows.push(block_match_flow(&to_grayscale(&pair[0]), &to_grayscale(&pair[1]), a.block, a.radius)?);
            }
        }
    }
    if let Some(p) = &a.flows {
        write_flows(p, &flows)?;
        println!("wrote {} flow fields to {}", flows.len(), p.display());
    }
    if let Some(dir) = &a.out {
        println!("wrote {written} {source} masks under {}", dir.display());
    }
    Ok(())
}

fn compose(a: ComposeArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let encoder = open_encoder(&a.encoder.spec())?;
    let flows = match &a.flows {
        Some(p) => Some(episode_flows(&ds, read_flows(p)?)?),
        None => None,
    };
    let opts = ComposeOptions { normalize: a.normalize, ..ComposeOptions::default() };
    let rows = compose_dataset(&a.config, &ds, &encoder, &EmbeddingCache::new(), &opts, flows.as_deref())?;
    let x = Tensor::new(&[rows.len(), a.config.dimension(encoder.width())], rows.concat())?;
    write_representations(&a.out, &ds, &a.config.to_string(), &x)?;
    println!("wrote {} representations of width {} to {}", x.rows(), x.cols(), a.out.display());
    Ok(())
}

fn episode_ranges(ds: &EpisodeDataset) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    ds.episodes()
        .iter()
        .map(|e| {
            start += e.len();
            start - e.len()..start
        })
        .collect()
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let hyper = with_overrides(&FinetuneHyper::default(), &a.hyper)?;
    let (tag, x) = read_representations(&a.reps, &ds)?;
    let config: CompositionConfig = tag.parse()?;
    let trained = match a.kind {
        HeadKind::AugMlp => {
            let encoder = open_encoder(&a.encoder.spec())?;
            let views = aug_views(&ds, &encoder, &EmbeddingCache::new(), &hyper.augmentations, hyper.views)?;
            train_aug_head(&views, &hyper, a.seed)?
        }
        kind => {
            let units = config.unit_count();
            if x.cols() % units != 0 {
                return Err(Error::Inconsistent(format!("{tag} representations of width {} do not split into {units} units", x.cols())));
            }
            let table = UnitTable::new(x.cols() / units, unit_roles(&config), x.clone(), episode_ranges(&ds))?;
            match kind {
                HeadKind::Dim(mode) => train_dim_head(&table, mode, &hyper, a.seed)?,
                _ => train_cpc_head(&table, &hyper, a.seed)?,
            }
        }
    };
    write_head(&a.out, &trained.head)?;
    println!(
        "{} head: {} steps, loss {:.4} -> {:.4}, wrote {}",
        a.kind,
        trained.losses.len(),
        trained.initial_loss(),
        trained.final_loss(),
        a.out.display()
    );
    if let Some(p) = &a.apply_out {
        let y = apply_head(&trained.head, &x)?;
        write_representations(p, &ds, &format!("{tag}:{}", a.kind), &y)?;
        println!("wrote projected representations of width {} to {}", y.cols(), p.display());
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let hyper = with_overrides(&ProbeHyper::default(), &a.hyper)?;
    let (_, mut x) = read_representations(&a.reps, &ds)?;
    if let Some(h) = &a.head {
        x = apply_head(&read_head(h)?, &x)?;
    }
    let split = make_splits(ds.frame_count(), PROBE_RATIOS, a.seed)?;
    let report = probe_suite(&ds, &x, &split, &hyper, a.seed)?;
    for c in &report.categories {
        match (c.f1, &c.error) {
            (Some(f), _) => println!("{:<16} {f:.4}", c.name),
            (None, Some(e)) => println!("{:<16} failed: {e}", c.name),
            _ => {}
        }
    }
    println!("{:<16} {:.4}", "mean", report.mean_f1);
    if let Some(p) = &a.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(p, text).map_err(io_err(p))?;
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    for path in &a.configs {
        let config = ExperimentConfig::load(path, &a.overrides).map_err(|e| e.in_stage("config"))?;
        let record = run_experiment(&config)?;
        println!(
            "{}: {} mean F1 {:.4} ({:.1}s) -> {}",
            record.name,
            record.variant,
            record.mean_f1,
            record.wall_clock_secs,
            config.output_dir().join(RESULTS_FILE).display()
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let records = a.results.iter().map(|p| load_results(p)).collect::<Result<Vec<_>>>()?;
    let refs = match &a.reference {
        Some(p) => read_reference_csv(p)?,
        None => Vec::new(),
    };
    let table = render_report(&records, &refs, &a.out)?;
    print!("{}", report_csv(&table)?);
    println!("wrote report.csv and report.svg to {}", a.out.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let table = compare_runs(&load_results(&a.baseline)?, &load_results(&a.treatment)?)?;
    println!("{table}");
    if let Some(p) = &a.csv {
        std::fs::write(p, table.to_csv()?).map_err(io_err(p))?;
    }
    Ok(())
}
