//! Command line front end. `main.rs` only forwards to [`run`].

pub mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use artopih::analysis::{compare_modes, flops_report, locality_map, Similarity};
use artopih::datapipe::{build_pairs, dataset_stats, generate_toy_dataset, ToyConfig, TOY_NUM_CATEGORIES};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::{peek_checkpoint, HarmonizerConfig, HarmonizerModel, StyleMode};
use artopih::imagecore::{read_manifest, Image, Mask};
use artopih::retrieval::{
    build_photo_index, evaluate_retrieval, export_candidates, painterly_queries, train_retrieval, RetrievalModel,
    RetrievalTrainConfig, SyntheticDomainConfig, TwoDomainData, DEFAULT_TOP_K,
};
use artopih::trainer::{train, Ablation, RunOutput, TrainConfig};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

/// Seed of the randomly initialised encoder used when no weights are given.
pub const ENCODER_SEED: u64 = 0;

const ENCODER_SOURCE_KEY: &str = "encoder_source";

#[derive(Debug, Parser)]
#[command(name = "artopih", version, about = "Painterly image harmonization with object-aware style hallucination")]
pub struct Cli {
    /// Seed for data generation, initialisation and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// TOML file with `[train]`, `[retrieval]` and `[serve]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Network widths.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Tiny)]
    pub profile: ProfileArg,

    /// Encoder weights: a saved encoder or torchvision VGG-19 safetensors.
    /// Without it a seeded random encoder is used.
    #[arg(long, global = true)]
    pub encoder: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Tiny,
}

impl From<ProfileArg> for WidthProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => WidthProfile::Paper,
            ProfileArg::Tiny => WidthProfile::Tiny,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ours,
    Bg,
    /// Reference-object style; needs `--reference` and `--reference-mask`.
    Ro,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural toy dataset.
    Toydata {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        paintings: usize,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print dataset statistics and optionally dump composite pairs.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        /// Write composite | reference strips here.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the retrieval network on a manifest or on synthetic features.
    TrainRetrieval {
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Export nearest photographic candidates for every painterly object.
    Retrieve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the harmonization network.
    Train(TrainArgs),
    /// Harmonize one composite.
    Harmonize {
        #[command(flatten)]
        input: CompositeArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Ours)]
        mode: ModeArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render composite | bg | ro | ours side by side.
    Compare {
        #[command(flatten)]
        input: CompositeArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Patch-style similarity of an image.
    Locality {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value = "cosine")]
        metric: String,
        /// Query patches to render heatmaps for.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        queries: Vec<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Analytic cost and measured latency.
    Flops {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "PORT")]
        port: Option<u16>,
        #[arg(long, env = "CHECKPOINT")]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// FULL, NO_OBADAIN, NO_OBJECT_FEATURE, NO_L_OBJ, NO_L_MAP_P or NO_L_MAP_C.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Use only entries of the train split.
    #[arg(long)]
    pub train_split_only: bool,
}

#[derive(Debug, Args)]
pub struct CompositeArgs {
    #[arg(long)]
    pub composite: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pub reference_mask: Option<PathBuf>,
}

/// Optional config file contents.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: Option<TrainConfig>,
    pub retrieval: Option<RetrievalTrainConfig>,
    pub serve: ServeConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: Option<u16>,
    pub checkpoint: Option<PathBuf>,
}

pub const DEFAULT_PORT: u16 = 8080;

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }
}

fn device() -> Device {
    Device::Cpu
}

/// Encoder from `--encoder` or the seeded random one, plus a tag that lets a
/// later run rebuild it.
pub fn resolve_encoder(path: Option<&Path>, profile: WidthProfile) -> Result<(Arc<Encoder>, String)> {
    match path {
        Some(p) => {
            let enc = Encoder::load(p, &device(), DType::F32)
                .or_else(|_| Encoder::from_torchvision_vgg19(p, &device(), DType::F32))
                .with_context(|| format!("loading encoder weights from {}", p.display()))?;
            Ok((Arc::new(enc), format!("file:{}", p.display())))
        }
        None => Ok((
            Arc::new(Encoder::random(profile, ENCODER_SEED, &device(), DType::F32)?),
            format!("random:{profile}:{ENCODER_SEED}"),
        )),
    }
}

/// Loads a harmonizer checkpoint, rebuilding the encoder it was trained with
/// unless `--encoder` overrides it.
pub fn load_model(ckpt: &Path, encoder: Option<&Path>) -> Result<(HarmonizerModel, String)> {
    let info = peek_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let enc = match (encoder, info.metadata.get(ENCODER_SOURCE_KEY)) {
        (Some(p), _) => resolve_encoder(Some(p), info.config.profile)?.0,
        (None, Some(src)) if src.starts_with("file:") => resolve_encoder(Some(Path::new(&src[5..])), info.config.profile)?.0,
        (None, Some(src)) => {
            let seed: u64 = src
                .rsplit(':')
                .next()
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("unreadable encoder source {src:?}"))?;
            Arc::new(Encoder::random(info.config.profile, seed, &device(), DType::F32)?)
        }
        (None, None) => resolve_encoder(None, info.config.profile)?.0,
    };
    let (model, info) = HarmonizerModel::load(ckpt, enc)?;
    Ok((model, info.id))
}

fn load_pair(args: &CompositeArgs) -> Result<(Image, Mask, Option<(Image, Mask)>)> {
    let comp = Image::load_png(&args.composite)?;
    let mask = Mask::load_png(&args.mask)?;
    let reference = match (&args.reference, &args.reference_mask) {
        (Some(r), Some(m)) => Some((Image::load_png(r)?, Mask::load_png(m)?)),
        (Some(_), None) => bail!("--reference needs --reference-mask"),
        _ => None,
    };
    Ok((comp, mask, reference))
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let profile: WidthProfile = cli.profile.into();
    match cli.command {
        Command::Toydata {
            out,
            paintings,
            objects,
            size,
        } => {
            let ds = generate_toy_dataset(
                &ToyConfig {
                    seed: cli.seed,
                    n_paintings: paintings,
                    n_objects: objects,
                    size,
                },
                &out,
            )?;
            println!(
                "wrote {} entries to {}",
                ds.manifest.len(),
                ds.manifest_path.display()
            );
            println!("hash {}", artopih::datapipe::directory_hash(&out)?);
        }
        Command::Pairs { manifest, out, limit } => {
            let m = read_manifest(&manifest)?;
            println!("{}", serde_json::to_string_pretty(&dataset_stats(&m))?);
            for (split, n) in m.split_counts() {
                println!("{split:?}: {n}");
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let n = limit.unwrap_or(m.len());
                for pair in build_pairs(&m, Some(cli.seed)).take(n) {
                    let p = pair?;
                    let strip = Image::hstack(&[p.composite.clone(), p.reference.clone()])?;
                    strip.save_png(dir.join(format!("pair_{:04}.png", p.index)))?;
                    p.composite_mask.save_png(dir.join(format!("pair_{:04}_mask.png", p.index)))?;
                }
                println!("wrote {n} pairs to {}", dir.display());
            }
        }
        Command::TrainRetrieval {
            manifest,
            synthetic,
            out,
            steps,
            lr,
        } => {
            let mut cfg = file.retrieval.unwrap_or_default();
            cfg.seed = cli.seed;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            let (model, train_data, held_out) = if synthetic || manifest.is_none() {
                let sc = SyntheticDomainConfig {
                    seed: cli.seed,
                    dim: profile.widths()[3],
                    per_category: 96,
                    ..Default::default()
                };
                let data = TwoDomainData::synthetic(&sc, &device(), DType::F32)?;
                let (tr, te) = data.holdout(3)?;
                let model = RetrievalModel::new(sc.dim, sc.num_categories, cli.seed, &device(), DType::F32)?;
                (model, tr, Some(te))
            } else {
                let m = read_manifest(manifest.as_ref().expect("checked above"))?;
                let (enc, _) = resolve_encoder(cli.encoder.as_deref(), profile)?;
                let k = m.entries.iter().map(|e| e.category_label).max().map_or(TOY_NUM_CATEGORIES, |v| v + 1);
                let model = RetrievalModel::with_encoder(enc, k as usize, cli.seed)?;
                let data = TwoDomainData::from_manifest(&model, &m)?;
                (model, data, None)
            };
            let every = (cfg.steps / 10).max(1);
            train_retrieval(&model, &train_data, &cfg, |l| {
                if l.step % every == 0 {
                    println!(
                        "step {} adv {:.4} cls {:.4} total {:.4} disc {:.4}",
                        l.step, l.adv, l.cls, l.total, l.disc
                    );
                }
            })?;
            let eval = evaluate_retrieval(&model, held_out.as_ref().unwrap_or(&train_data))?;
            println!("{}", serde_json::to_string(&eval)?);
            if let Some(p) = out {
                let id = model.save(&p)?;
                println!("saved {} ({id})", p.display());
            }
        }
        Command::Retrieve { manifest, ckpt, k, out } => {
            let m = read_manifest(&manifest)?;
            let (enc, _) = resolve_encoder(cli.encoder.as_deref(), profile)?;
            let model = RetrievalModel::load(&ckpt, enc)?;
            let index = build_photo_index(&model, &m)?;
            let queries = painterly_queries(&model, &m)?;
            let k_eff = k.min(index.len());
            if k_eff < k {
                eprintln!("note: only {} photographic objects, retrieving {k_eff}", index.len());
            }
            let recs = export_candidates(&index, &queries, k_eff, &out)?;
            println!("wrote {} candidates for {} queries to {}", recs.len(), queries.len(), out.display());
        }
        Command::Train(args) => {
            let mut cfg = file
                .train
                .unwrap_or_else(|| TrainConfig::for_profile(profile));
            cfg.width_profile = profile;
            cfg.seed = cli.seed;
            if let Some(v) = args.steps {
                cfg.steps = v;
            }
            if let Some(v) = args.lr {
                cfg.lr = v;
            }
            if let Some(v) = args.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = args.ablation {
                cfg.ablation = v;
            }
            if let Some(v) = args.checkpoint_every {
                cfg.checkpoint_every = v;
            }
            cfg.validate()?;
            let mut m = read_manifest(&args.manifest)?;
            if args.train_split_only {
                m = m.filter_split(artopih::imagecore::Split::Train);
            }
            let pairs = build_pairs(&m, Some(cfg.seed)).collect::<artopih::Result<Vec<_>>>()?;
            let (enc, source) = resolve_encoder(cli.encoder.as_deref(), profile)?;
            let model = HarmonizerModel::new(enc, cfg.harmonizer_config(), cfg.seed)?;
            std::fs::create_dir_all(&args.out)?;
            std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
            let every = (cfg.steps / 20).max(1);
            let mut out = RunOutput::new(&args.out);
            out.metadata.insert(ENCODER_SOURCE_KEY.into(), source);
            let summary = train(&model, &pairs, &cfg, Some(&out), |r| {
                if r.step % every == 0 || r.step == 1 {
                    println!(
                        "step {:>6} total {:.4} obj {:.4} map_p {:.4} map_c {:.4} sty {:.4} con {:.4}",
                        r.step, r.total, r.obj, r.map_p, r.map_c, r.sty, r.con
                    );
                }
            })?;
            if let Some((p, _)) = summary.checkpoints.last() {
                let id = artopih::harmonizer::peek_checkpoint(p)?.id;
                println!("checkpoint {} ({id})", p.display());
            }
        }
        Command::Harmonize { input, mode, out } => {
            let (model, _) = load_model(&input.ckpt, cli.encoder.as_deref())?;
            let (comp, mask, reference) = load_pair(&input)?;
            let style = match mode {
                ModeArg::Ours => StyleMode::Ours,
                ModeArg::Bg => StyleMode::Bg,
                ModeArg::Ro => {
                    let (r, rm) = reference.context("--mode ro needs --reference and --reference-mask")?;
                    StyleMode::External(model.reference_styles(&r, &rm)?)
                }
            };
            model.harmonize(&comp, &mask, &style)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Compare { input, out } => {
            let (model, _) = load_model(&input.ckpt, cli.encoder.as_deref())?;
            let (comp, mask, reference) = load_pair(&input)?;
            let r = reference.as_ref().map(|(a, b)| (a, b));
            let cmp = compare_modes(&model, &comp, &mask, r, Some(&out))?;
            let labels: Vec<_> = cmp.panels.iter().map(|(l, _)| l.as_str()).collect();
            println!("wrote {} [{}]", out.display(), labels.join(" | "));
        }
        Command::Locality {
            image,
            n,
            metric,
            queries,
            out,
        } => {
            let metric: Similarity = metric.parse()?;
            let (enc, _) = resolve_encoder(cli.encoder.as_deref(), profile)?;
            let img = Image::load_png(&image)?;
            let map = locality_map(&enc, &img, n, metric)?;
            for row in &map.matrix {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
                println!("{}", cells.join(" "));
            }
            if let Some(p) = out {
                map.figure(&img, &queries)?.save_png(&p)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Flops {
            size,
            runs,
            warmup,
            json,
        } => {
            let (enc, _) = resolve_encoder(cli.encoder.as_deref(), profile)?;
            let model = HarmonizerModel::new(
                enc,
                HarmonizerConfig {
                    profile,
                    ..Default::default()
                },
                cli.seed,
            )?;
            let report = flops_report(&model, size, warmup, runs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Serve { port, ckpt } => {
            let port = port.or(file.serve.port).unwrap_or(DEFAULT_PORT);
            let ckpt = ckpt.or(file.serve.checkpoint);
            let state = match ckpt {
                Some(p) => {
                    let (model, checkpoint_id) = load_model(&p, cli.encoder.as_deref())?;
                    eprintln!("loaded {} ({checkpoint_id})", p.display());
                    server::AppState {
                        loaded: Some(Arc::new(server::LoadedModel { model, checkpoint_id })),
                    }
                }
                None => {
                    eprintln!("no checkpoint configured; harmonize requests will return 503");
                    server::AppState::default()
                }
            };
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, port))?;
        }
    }
    Ok(())
}
