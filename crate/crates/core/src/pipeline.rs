//! Training and inference over whole images.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{corpus_mean_rgb, s3cnn_extract, Backbone};
use crate::bundle::ModelBundle;
use crate::config::PipelineConfig;
use crate::crf::crf_refine;
use crate::error::{Error, Result};
use crate::forest::{build_hdhf, forest_predict_batch, forest_train};
use crate::fusion::{fit_fusion, fuse};
use crate::handcrafted::{
    level_descriptors, pseudo_background, write_descriptor_csv, DescriptorRow, ImageFeatures,
    LowLevelDescriptor, BACKGROUND_THRESHOLD, BORDER,
};
use crate::imaging::{load_image, load_mask, BinaryMask, RasterImage, SaliencyMap};
use crate::mlp::{mlp_train, region_map, select_samples, DeepContrastFeature, MlpModel, TrainReport, TrainingSample};
use crate::segmentation::{build_stack, Segmentation, SegmentationStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Region scores from the MLP on deep features.
    Mdf,
    /// Region scores from the forest on hybrid features.
    Hdhf,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdf" => Ok(ModelKind::Mdf),
            "hdhf" => Ok(ModelKind::Hdhf),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?} (expected mdf or hdhf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RasterImage,
    pub gt: BinaryMask,
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Reads `dir/images/*.png` with the matching `dir/gt/*.png`, sorted by id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let gts = dir.join("gt");
    let ids = png_stems(&images)?;
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", images.display())));
    }
    ids.into_par_iter()
        .map(|id| {
            let gt_path = gts.join(format!("{id}.png"));
            if !gt_path.exists() {
                return Err(Error::Dataset(format!("missing gt for image {id}: {}", gt_path.display())));
            }
            let image = load_image(images.join(format!("{id}.png")))?;
            let gt = load_mask(&gt_path)?;
            if !gt.same_size(image.width(), image.height()) {
                return Err(Error::size_mismatch(
                    "gt vs image",
                    (image.width(), image.height()),
                    (gt.width(), gt.height()),
                ));
            }
            Ok(LabeledImage { id, image, gt })
        })
        .collect()
}

/// Reads every `*.png` in `dir`, sorted by file stem.
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<(String, RasterImage)>> {
    let dir = dir.as_ref();
    png_stems(dir)?
        .into_par_iter()
        .map(|id| {
            let img = load_image(dir.join(format!("{id}.png")))?;
            Ok((id, img))
        })
        .collect()
}

/// Optional on-disk store of segmentation stacks, keyed by image id and the
/// stack parameters.
#[derive(Clone, Debug, Default)]
pub struct SegmentCache {
    pub dir: Option<PathBuf>,
}

impl SegmentCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SegmentCache { dir: Some(dir.into()) }
    }

    fn entry(&self, id: &str, cfg: &PipelineConfig) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| {
            d.join(format!("{id}_m{}_{}_{}", cfg.levels, cfg.finest, cfg.coarsest))
        })
    }

    pub fn stack(&self, id: Option<&str>, img: &RasterImage, cfg: &PipelineConfig) -> Result<SegmentationStack> {
        let Some(entry) = id.and_then(|id| self.entry(id, cfg)) else {
            return build_stack(img, cfg.levels, cfg.finest, cfg.coarsest);
        };
        let path = |i: usize| entry.join(format!("level_{i:02}.png"));
        if (1..=cfg.levels).all(|i| path(i).exists()) {
            let levels = (1..=cfg.levels)
                .map(|i| Segmentation::load(path(i)))
                .collect::<Result<Vec<_>>>()?;
            if levels.iter().all(|s| s.width() == img.width() && s.height() == img.height()) {
                return Ok(SegmentationStack { levels });
            }
        }
        let stack = build_stack(img, cfg.levels, cfg.finest, cfg.coarsest)?;
        std::fs::create_dir_all(&entry).map_err(|e| Error::io(&entry, e))?;
        for (i, seg) in stack.levels.iter().enumerate() {
            seg.save(path(i + 1))?;
        }
        Ok(stack)
    }
}

/// Segmentation and deep features of one image, reusable across model kinds.
pub struct Prepared {
    stack: SegmentationStack,
    /// Per level, one row of S-3CNN features per region.
    features: Vec<Array2<f64>>,
}

fn prepare(img: &RasterImage, id: Option<&str>, cfg: &PipelineConfig, backbone: &Backbone, cache: &SegmentCache) -> Result<Prepared> {
    let stack = cache.stack(id, img, cfg)?;
    let dim = 3 * backbone.feature_dim();
    let features = stack
        .levels
        .iter()
        .map(|seg| {
            let mut rows = Array2::zeros((seg.num_regions(), dim));
            for r in 0..seg.num_regions() {
                let v = s3cnn_extract(img, seg, r, backbone)?;
                rows.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { stack, features })
}

/// MLP scores and second-hidden-layer activations of every region.
struct DeepScores {
    scores: Vec<Array1<f64>>,
    dcf: Vec<Array2<f64>>,
}

fn deep_scores(mlp: &MlpModel, prep: &Prepared) -> Result<DeepScores> {
    let mut scores = Vec::with_capacity(prep.features.len());
    let mut dcf = Vec::with_capacity(prep.features.len());
    for x in &prep.features {
        let (s, d) = mlp.forward_batch(x.view())?;
        scores.push(s);
        dcf.push(d);
    }
    Ok(DeepScores { scores, dcf })
}

fn level_maps(stack: &SegmentationStack, scores: &[Array1<f64>]) -> Result<Vec<SaliencyMap>> {
    stack
        .levels
        .iter()
        .zip(scores)
        .map(|(seg, s)| region_map(seg, s.as_slice().expect("contiguous scores")))
        .collect()
}

/// Per level, the low-level descriptor of every region against the
/// pseudo-background implied by `init`.
fn descriptors(img: &RasterImage, stack: &SegmentationStack, init: &SaliencyMap) -> Result<Vec<Vec<LowLevelDescriptor>>> {
    let feat = ImageFeatures::new(img);
    let bg = pseudo_background(init, BORDER, BACKGROUND_THRESHOLD);
    let reference = feat.reference(&bg)?;
    stack
        .levels
        .iter()
        .map(|seg| level_descriptors(&feat, &reference, seg))
        .collect()
}

fn hybrid_rows(deep: &DeepScores, low: &[Vec<LowLevelDescriptor>], level: usize) -> Vec<Vec<f64>> {
    deep.dcf[level]
        .rows()
        .into_iter()
        .zip(&low[level])
        .map(|(d, l)| build_hdhf(&DeepContrastFeature(d.to_vec()), l).0)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub levels: Vec<SaliencyMap>,
    pub fused: SaliencyMap,
    pub refined: Option<SaliencyMap>,
}

impl Inference {
    /// The CRF-refined map when refinement ran, else the fused map.
    pub fn output(&self) -> &SaliencyMap {
        self.refined.as_ref().unwrap_or(&self.fused)
    }
}

pub fn infer_prepared(bundle: &ModelBundle, img: &RasterImage, prep: &Prepared, kind: ModelKind, crf: bool) -> Result<Inference> {
    let deep = deep_scores(&bundle.mlp, prep)?;
    let mdf_levels = level_maps(&prep.stack, &deep.scores)?;
    let mdf = fuse(&mdf_levels, &bundle.mdf_fusion)?;
    let (levels, fused) = match kind {
        ModelKind::Mdf => (mdf_levels, mdf),
        ModelKind::Hdhf => {
            let low = descriptors(img, &prep.stack, &mdf)?;
            let scores = (0..prep.stack.num_levels())
                .map(|l| forest_predict_batch(&bundle.forest, &hybrid_rows(&deep, &low, l)).map(Array1::from))
                .collect::<Result<Vec<_>>>()?;
            let levels = level_maps(&prep.stack, &scores)?;
            let fused = fuse(&levels, &bundle.hdhf_fusion)?;
            (levels, fused)
        }
    };
    let refined = if crf { Some(crf_refine(img, &fused, &bundle.crf)?) } else { None };
    Ok(Inference { levels, fused, refined })
}

pub fn prepare_image(bundle: &ModelBundle, img: &RasterImage, id: Option<&str>, cache: &SegmentCache) -> Result<Prepared> {
    prepare(img, id, &bundle.config, &bundle.backbone, cache)
}

pub fn infer(bundle: &ModelBundle, img: &RasterImage, kind: ModelKind, crf: bool) -> Result<Inference> {
    let prep = prepare_image(bundle, img, None, &SegmentCache::default())?;
    infer_prepared(bundle, img, &prep, kind, crf)
}

/// Runs [`infer`] over many images in parallel, reusing cached segmentations.
pub fn infer_many(
    bundle: &ModelBundle,
    images: &[(String, RasterImage)],
    kind: ModelKind,
    crf: bool,
    cache: &SegmentCache,
) -> Result<Vec<Inference>> {
    images
        .par_iter()
        .map(|(id, img)| {
            let prep = prepare(img, Some(id), &bundle.config, &bundle.backbone, cache)?;
            infer_prepared(bundle, img, &prep, kind, crf)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub cache: SegmentCache,
    /// Writes the training-image descriptors as CSV.
    pub descriptor_dump: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub mlp: TrainReport,
    pub mlp_samples: usize,
    pub forest_samples: usize,
    pub forest_oob_mae: Option<f64>,
}

/// Regions of every level whose purity passes the threshold, as
/// (level, region, label).
fn pure_regions(stack: &SegmentationStack, gt: &BinaryMask, purity: f64) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (l, seg) in stack.levels.iter().enumerate() {
        for (r, label) in select_samples(seg, gt, purity)? {
            out.push((l, r, label));
        }
    }
    Ok(out)
}

fn prepare_all(
    items: &[LabeledImage],
    cfg: &PipelineConfig,
    backbone: &Backbone,
    cache: &SegmentCache,
) -> Result<Vec<Prepared>> {
    items
        .par_iter()
        .map(|it| prepare(&it.image, Some(&it.id), cfg, backbone, cache))
        .collect()
}

/// Trains the full model on `train`, fitting both fusion weight sets on
/// `val`.
pub fn train(
    cfg: &PipelineConfig,
    train: &[LabeledImage],
    val: &[LabeledImage],
    opts: &TrainOptions,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let mean_rgb = corpus_mean_rgb(train.iter().map(|t| &t.image));
    let backbone = Backbone::seeded(cfg.backbone_spec(mean_rgb))?;

    info!("segmenting and encoding {} training and {} validation images", train.len(), val.len());
    let prep_train = prepare_all(train, cfg, &backbone, &opts.cache)?;
    let prep_val = prepare_all(val, cfg, &backbone, &opts.cache)?;

    let pure: Vec<Vec<(usize, usize, f64)>> = train
        .par_iter()
        .zip(&prep_train)
        .map(|(it, p)| pure_regions(&p.stack, &it.gt, cfg.purity))
        .collect::<Result<_>>()?;
    let samples: Vec<TrainingSample> = prep_train
        .iter()
        .zip(&pure)
        .flat_map(|(p, picks)| {
            picks
                .iter()
                .map(|&(l, r, y)| TrainingSample::new(p.features[l].row(r).to_vec(), y))
        })
        .collect();
    info!("training MLP on {} regions", samples.len());
    let (mlp, report) = mlp_train(&samples, &cfg.train_params())?;
    let mlp_samples = samples.len();
    drop(samples);

    let deep_train: Vec<DeepScores> = prep_train
        .par_iter()
        .map(|p| deep_scores(&mlp, p))
        .collect::<Result<_>>()?;
    let deep_val: Vec<DeepScores> = prep_val
        .par_iter()
        .map(|p| deep_scores(&mlp, p))
        .collect::<Result<_>>()?;
    let val_gts: Vec<BinaryMask> = val.iter().map(|v| v.gt.clone()).collect();

    let mdf_val: Vec<Vec<SaliencyMap>> = prep_val
        .iter()
        .zip(&deep_val)
        .map(|(p, d)| level_maps(&p.stack, &d.scores))
        .collect::<Result<_>>()?;
    let mdf_fusion = fit_fusion(&mdf_val, &val_gts)?;
    info!("MDF fusion weights {:?}", mdf_fusion.alphas);

    let init = |p: &Prepared, d: &DeepScores| -> Result<SaliencyMap> {
        fuse(&level_maps(&p.stack, &d.scores)?, &mdf_fusion)
    };
    let low_train: Vec<Vec<Vec<LowLevelDescriptor>>> = train
        .par_iter()
        .zip(&prep_train)
        .zip(&deep_train)
        .map(|((it, p), d)| descriptors(&it.image, &p.stack, &init(p, d)?))
        .collect::<Result<_>>()?;
    if let Some(path) = &opts.descriptor_dump {
        let rows = train.iter().zip(&low_train).flat_map(|(it, levels)| {
            levels.iter().enumerate().flat_map(move |(l, descs)| {
                descs.iter().enumerate().map(move |(r, d)| DescriptorRow {
                    image_id: &it.id,
                    level: (l + 1) as u8,
                    region: r as u16,
                    descriptor: d,
                })
            })
        });
        write_descriptor_csv(path, rows)?;
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for ((picks, d), low) in pure.iter().zip(&deep_train).zip(&low_train) {
        for &(l, r, label) in picks {
            let dcf = DeepContrastFeature(d.dcf[l].row(r).to_vec());
            x.push(build_hdhf(&dcf, &low[l][r]).0);
            y.push(label);
        }
    }
    if let Some(cap) = cfg.forest.max_samples {
        if x.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
            let mut keep = rand::seq::index::sample(&mut rng, x.len(), cap).into_vec();
            keep.sort_unstable();
            x = keep.iter().map(|&i| std::mem::take(&mut x[i])).collect();
            y = keep.iter().map(|&i| y[i]).collect();
        }
    }
    info!("training forest on {} regions", x.len());
    let forest = forest_train(&x, &y, &cfg.forest_params())?;
    let forest_samples = x.len();
    drop(x);

    let hdhf_val: Vec<Vec<SaliencyMap>> = val
        .par_iter()
        .zip(&prep_val)
        .zip(&deep_val)
        .map(|((it, p), d)| {
            let low = descriptors(&it.image, &p.stack, &init(p, d)?)?;
            let scores = (0..p.stack.num_levels())
                .map(|l| forest_predict_batch(&forest, &hybrid_rows(d, &low, l)).map(Array1::from))
                .collect::<Result<Vec<_>>>()?;
            level_maps(&p.stack, &scores)
        })
        .collect::<Result<_>>()?;
    let hdhf_fusion = fit_fusion(&hdhf_val, &val_gts)?;
    info!("HDHF fusion weights {:?}", hdhf_fusion.alphas);

    let log = TrainLog {
        mlp: report,
        mlp_samples,
        forest_samples,
        forest_oob_mae: forest.oob_mae,
    };
    let bundle = ModelBundle {
        config: cfg.clone(),
        backbone,
        mlp,
        forest,
        mdf_fusion,
        hdhf_fusion,
        crf: cfg.crf.clone(),
    };
    Ok((bundle, log))
}

/// Splits a sorted dataset by the configured ratios into (train, val, test).
pub fn split_dataset(items: Vec<LabeledImage>, cfg: &PipelineConfig) -> (Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>) {
    let (n_train, n_val, _) = cfg.split.counts(items.len());
    let mut rest = items;
    let mut tail = rest.split_off(n_train);
    let test = tail.split_off(n_val);
    (rest, tail, test)
}
