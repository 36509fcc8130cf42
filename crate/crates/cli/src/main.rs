use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use saliency_core::bundle::ModelBundle;
use saliency_core::config::PipelineConfig;
use saliency_core::dataset::check_annotations;
use saliency_core::imaging::{load_image, load_map, load_mask, save_map, save_mask};
use saliency_core::metrics::{evaluate, write_curve_csv, write_report_csv, write_summary_json};
use saliency_core::pipeline::{
    infer_many, load_dataset, load_images, split_dataset, train, ModelKind, SegmentCache, TrainOptions,
};
use saliency_core::segmentation::build_stack;
use saliency_core::synth::{synth_dataset, write_dataset, SynthParams};

#[derive(Parser)]
#[command(name = "saliency", version, about = "Region-based salient object detection")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of segmentation levels.
    #[arg(long)]
    levels: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.levels {
            cfg.levels = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under `<out>/images` and `<out>/gt`.
    Synth {
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Give shapes colors close to their background.
        #[arg(long)]
        low_contrast: bool,
    },
    /// Write the multi-level segmentation of one image.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model bundle on the train and validation splits of a dataset.
    Train {
        /// Directory holding `images/` and `gt/`.
        #[arg(long)]
        data: PathBuf,
        /// Bundle directory to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides the configured MLP epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Reuse segmentations stored here across runs.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Write training-region descriptors to this CSV file.
        #[arg(long)]
        dump_descriptors: Option<PathBuf>,
    },
    /// Compute saliency maps for an image or a directory of images.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        /// A PNG file or a directory of PNG files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hdhf")]
        model: ModelKind,
        /// Skip CRF refinement; the output is the fused map.
        #[arg(long)]
        no_crf: bool,
        /// Also write per-level and fused maps under `<out>/stages`.
        #[arg(long)]
        stages: bool,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score saliency maps against ground truth.
    Eval {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check annotation triplets `<id>_1.png`..`<id>_3.png` and write majority
    /// ground truth for consistent images.
    DatasetCheck {
        #[arg(long)]
        annotations: PathBuf,
        /// Directory of `<id>.png` source images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn run_synth(n: usize, seed: u64, out: &Path, low_contrast: bool) -> Result<()> {
    if n == 0 {
        bail!(saliency_core::Error::InvalidArgument("n must be at least 1".into()));
    }
    let params = SynthParams {
        low_contrast,
        ..SynthParams::default()
    };
    let samples = synth_dataset(n, seed, &params)?;
    write_dataset(out, &samples)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn run_segment(image: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let img = load_image(image)?;
    let stack = build_stack(&img, cfg.levels, cfg.finest, cfg.coarsest)?;
    create_dir(out)?;
    for (i, seg) in stack.levels.iter().enumerate() {
        seg.save(out.join(format!("level_{:02}.png", i + 1)))?;
        println!("level {} regions {}", i + 1, seg.num_regions());
    }
    Ok(())
}

fn run_train(
    data: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    cache: Option<PathBuf>,
    dump: Option<PathBuf>,
) -> Result<()> {
    let items = load_dataset(data)?;
    let (tr, va, te) = split_dataset(items, cfg);
    info!("split: {} train, {} val, {} test", tr.len(), va.len(), te.len());
    let opts = TrainOptions {
        cache: cache.map(SegmentCache::new).unwrap_or_default(),
        descriptor_dump: dump,
    };
    let (bundle, log) = train(cfg, &tr, &va, &opts)?;
    bundle.save(out)?;
    println!(
        "trained on {} regions (MLP) and {} regions (forest); final loss {:.6}; bundle {}",
        log.mlp_samples,
        log.forest_samples,
        log.mlp.final_loss(),
        out.display()
    );
    let test: Vec<&str> = te.iter().map(|t| t.id.as_str()).collect();
    std::fs::write(out.join("test_ids.txt"), test.join("\n") + "\n")?;
    Ok(())
}

fn run_infer(
    bundle: &Path,
    input: &Path,
    out: &Path,
    model: ModelKind,
    no_crf: bool,
    stages: bool,
    cache: Option<PathBuf>,
) -> Result<()> {
    let bundle = ModelBundle::load(bundle)?;
    let images = if input.is_dir() {
        load_images(input)?
    } else {
        let id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .context("input file has no name")?
            .to_string();
        vec![(id, load_image(input)?)]
    };
    let cache = cache.map(SegmentCache::new).unwrap_or_default();
    let results = infer_many(&bundle, &images, model, !no_crf, &cache)?;
    create_dir(out)?;
    if stages {
        create_dir(&out.join("stages"))?;
    }
    for ((id, _), res) in images.iter().zip(&results) {
        save_map(res.output(), out.join(format!("{id}.png")))?;
        if stages {
            for (l, m) in res.levels.iter().enumerate() {
                save_map(m, out.join("stages").join(format!("{id}_level_{:02}.png", l + 1)))?;
            }
            save_map(&res.fused, out.join("stages").join(format!("{id}_fused.png")))?;
        }
    }
    println!("wrote {} maps to {}", results.len(), out.display());
    Ok(())
}

fn run_eval(maps: &Path, gts: &Path, out: &Path) -> Result<()> {
    let map_ids = stems(maps)?;
    let gt_ids = stems(gts)?;
    if map_ids != gt_ids {
        let only_maps: Vec<_> = map_ids.iter().filter(|i| !gt_ids.contains(i)).collect();
        let only_gts: Vec<_> = gt_ids.iter().filter(|i| !map_ids.contains(i)).collect();
        bail!(saliency_core::Error::Dataset(format!(
            "map and gt files do not pair up: maps without gt {only_maps:?}, gt without maps {only_gts:?}"
        )));
    }
    let pairs = map_ids
        .par_iter()
        .map(|id| {
            let m = load_map(maps.join(format!("{id}.png")))?;
            let g = load_mask(gts.join(format!("{id}.png")))?;
            Ok((m, g))
        })
        .collect::<saliency_core::Result<Vec<_>>>()?;
    let (m, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let eval = evaluate(&m, &g)?;
    create_dir(out)?;
    write_report_csv(out.join("report.csv"), &map_ids, &eval)?;
    write_summary_json(out.join("summary.json"), &eval)?;
    write_curve_csv(out.join("curve.csv"), &eval.curve)?;
    let s = &eval.summary;
    println!(
        "images {} auc {:.4} max_f {:.4} adaptive_f {:.4} mae {:.4}",
        map_ids.len(),
        s.auc,
        s.max_f,
        s.adaptive.f,
        s.mae
    );
    Ok(())
}

fn run_dataset_check(annotations: &Path, images: &Path, out: &Path) -> Result<()> {
    let ids = stems(images)?;
    create_dir(&out.join("gt"))?;
    let mut report = String::from("image,consistency,included,contrast,components,touches_border\n");
    let mut excluded = Vec::new();
    for id in &ids {
        let mut masks = Vec::with_capacity(3);
        for k in 1..=3 {
            let p = annotations.join(format!("{id}_{k}.png"));
            if !p.exists() {
                bail!(saliency_core::Error::Dataset(format!(
                    "missing annotator mask {} for image {id}",
                    p.display()
                )));
            }
            masks.push(load_mask(&p)?);
        }
        let img = load_image(images.join(format!("{id}.png")))?;
        let check = check_annotations(&img, &masks)?;
        let contrast = check.contrast.map(|c| format!("{c:.6}")).unwrap_or_default();
        report.push_str(&format!(
            "{id},{:.6},{},{contrast},{},{}\n",
            check.consistency.value(),
            check.included,
            check.components,
            check.touches_border
        ));
        match &check.gt {
            Some(gt) => save_mask(gt, out.join("gt").join(format!("{id}.png")))?,
            None => excluded.push(id.as_str()),
        }
    }
    std::fs::write(out.join("consistency.csv"), report)?;
    let mut list = excluded.join("\n");
    if !list.is_empty() {
        list.push('\n');
    }
    std::fs::write(out.join("excluded.txt"), list)?;
    println!("{} images checked, {} excluded", ids.len(), excluded.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            low_contrast,
        } => run_synth(n, seed, &out, low_contrast),
        Command::Segment { image, out, config } => run_segment(&image, &out, &config.resolve()?),
        Command::Train {
            data,
            out,
            config,
            epochs,
            cache,
            dump_descriptors,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(e) = epochs {
                cfg.mlp.epochs = e;
            }
            run_train(&data, &out, &cfg, cache, dump_descriptors)
        }
        Command::Infer {
            bundle,
            input,
            out,
            model,
            no_crf,
            stages,
            cache,
        } => run_infer(&bundle, &input, &out, model, no_crf, stages, cache),
        Command::Eval { maps, gts, out } => run_eval(&maps, &gts, &out),
        Command::DatasetCheck {
            annotations,
            images,
            out,
        } => run_dataset_check(&annotations, &images, &out),
    }
}

/// One JSON object per failure: `{"error": <kind>, "message": <text>}`.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<saliency_core::Error>())
        .map(|e| e.kind())
        .unwrap_or_else(|| {
            if err.chain().any(|e| e.is::<std::io::Error>()) {
                "io"
            } else {
                "other"
            }
        });
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
