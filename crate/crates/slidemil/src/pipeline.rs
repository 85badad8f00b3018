//! Pipeline stages: tile -> bags -> train -> eval -> report.
//!
//! Each stage is restartable and pure given its inputs. Every output
//! file embeds the run's config hash (a `# config_hash=...` comment line
//! for CSVs, a meta line for JSON-lines, the JSON header for
//! checkpoints); later stages verify the hash so artifacts from
//! different configurations cannot be combined silently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::{compose, AugmentSpec};
use crate::bags::{build_bags, split_cohorts, Bag, Cohort, CohortSplit, SlidePatches};
use crate::clinical::{self, ClinicalRecord};
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::imagery::{self, RgbImage};
use crate::milnet::{self, BagInput, Instances, MilModel};
use crate::seed::{rng_from, subseed};
use crate::tensor::Tensor;
use crate::train::{self, BagSource};

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("patches.csv")
}

pub fn patches_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("patches")
}

pub fn bags_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("bags.jsonl")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("model.ckpt")
}

pub fn train_log_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("train_log.csv")
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("metrics.csv")
}

fn patch_file(cfg: &RunConfig, slide_id: &str, x: usize, y: usize) -> PathBuf {
    patches_dir(cfg).join(format!("{slide_id}_x{x}_y{y}.png"))
}

fn write_with_meta(path: &Path, meta: &str, body: &str) -> Result<()> {
    let mut text = String::with_capacity(meta.len() + body.len() + 2);
    text.push_str(meta);
    text.push('\n');
    text.push_str(body);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a hash-stamped text file; verifies the embedded hash and returns
/// the body (meta line stripped).
fn read_verify_hash(path: &Path, expected: &str) -> Result<String> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (meta, body) = raw
        .split_once('\n')
        .ok_or_else(|| Error::Data(format!("{}: empty stage file", path.display())))?;
    let found = meta_value(meta, "config_hash").ok_or_else(|| {
        Error::Data(format!("{}: missing config_hash meta line", path.display()))
    })?;
    if found != expected {
        return Err(Error::ConfigHash {
            file: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(body.to_string())
}

/// Value of `key=value` in a `# ...` comment meta line.
fn meta_value<'a>(meta_line: &'a str, key: &str) -> Option<&'a str> {
    let rest = meta_line.strip_prefix("# ")?;
    rest.split_whitespace()
        .filter_map(|token| token.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

/// JSON-lines meta object for bags.jsonl.
#[derive(serde::Serialize, serde::Deserialize)]
struct JsonlMeta {
    config_hash: String,
}

#[derive(Debug)]
pub struct TileReport {
    pub slides: usize,
    pub patches_total: usize,
    pub patches_kept: usize,
    /// Mask files opened; must be zero in whole-slide mode.
    pub mask_files_read: usize,
    /// Every file the stage opened, for access auditing.
    pub files_read: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Tile every slide, filter by entropy, write kept patch files and the
/// manifest CSV.
pub fn run_tile(cfg: &RunConfig) -> Result<TileReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let slides_dir = &cfg.paths.slides;
    let mut slide_files: Vec<PathBuf> = std::fs::read_dir(slides_dir)
        .map_err(|e| Error::io(slides_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("tif") | Some("tiff")
            )
        })
        .collect();
    slide_files.sort();
    if slide_files.is_empty() {
        return Err(Error::Data(format!(
            "no slides found under {}",
            slides_dir.display()
        )));
    }
    std::fs::create_dir_all(patches_dir(cfg)).map_err(|e| Error::io(patches_dir(cfg), e))?;

    let mut files_read = Vec::new();
    let mut mask_files_read = 0usize;
    let mut body = String::from("slide_id,x,y,entropy_bits,kept\n");
    let (mut total, mut kept_count) = (0usize, 0usize);
    for slide_file in &slide_files {
        let slide_id = slide_file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad slide file name {}", slide_file.display())))?
            .to_string();
        let img = imagery::load_image(slide_file)?;
        files_read.push(slide_file.clone());
        let mask = if cfg.mode.uses_masks() {
            let masks_dir = cfg.paths.masks.as_ref().expect("validated");
            let mask_path = masks_dir.join(format!("{slide_id}.png"));
            let mask = imagery::load_mask(&mask_path)?;
            files_read.push(mask_path);
            mask_files_read += 1;
            Some(mask)
        } else {
            None
        };
        let patches = imagery::tile_slide(
            &slide_id,
            &img,
            cfg.tiling.tile_size,
            cfg.tiling.stride,
            mask.as_ref(),
            cfg.tiling.mask_coverage_min,
        )?;
        for patch in &patches {
            total += 1;
            let kept = patch.entropy_bits >= cfg.tiling.entropy_threshold;
            let _ = writeln!(
                body,
                "{},{},{},{:.6},{}",
                patch.slide_id, patch.x, patch.y, patch.entropy_bits, kept
            );
            if kept {
                kept_count += 1;
                let path = patch_file(cfg, &patch.slide_id, patch.x, patch.y);
                let buf = image::RgbImage::from_raw(
                    patch.pixels.width() as u32,
                    patch.pixels.height() as u32,
                    patch.pixels.data().to_vec(),
                )
                .expect("consistent buffer");
                buf.save(&path).map_err(|e| Error::ImageDecode {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            }
        }
    }
    let manifest = manifest_path(cfg);
    write_with_meta(&manifest, &format!("# config_hash={hash}"), &body)?;
    Ok(TileReport {
        slides: slide_files.len(),
        patches_total: total,
        patches_kept: kept_count,
        mask_files_read,
        files_read,
        manifest,
    })
}

/// Kept patches per slide, in manifest order.
pub fn read_manifest(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    let body = read_verify_hash(&manifest_path(cfg), &cfg.hash())?;
    let mut lines = body.lines();
    let header = lines.next().unwrap_or_default();
    if header != "slide_id,x,y,entropy_bits,kept" {
        return Err(Error::Parse {
            row: 2,
            column: "<header>".into(),
            reason: format!("unexpected manifest header '{header}'"),
        });
    }
    let mut kept: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                row: i + 3,
                column: "<row>".into(),
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_num = |s: &str, col: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                row: i + 3,
                column: col.into(),
                reason: format!("not an integer: '{s}'"),
            })
        };
        kept.entry(fields[0].to_string()).or_default();
        if fields[4] == "true" {
            let x = parse_num(fields[1], "x")?;
            let y = parse_num(fields[2], "y")?;
            kept.get_mut(fields[0]).expect("just inserted").push((x, y));
        }
    }
    Ok(kept)
}

#[derive(Debug)]
pub struct BagsReport {
    pub n_bags: usize,
    pub warnings: Vec<String>,
    pub manifest: PathBuf,
}

fn encoded_label(record: &ClinicalRecord, task: Task) -> usize {
    match task {
        Task::Binary => record.aln_label.binary_class(),
        Task::Multiclass => record.aln_label.multiclass_class(),
    }
}

/// Split patients, sample bags per slide, write the bag manifest.
pub fn run_bags(cfg: &RunConfig) -> Result<BagsReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let kept = read_manifest(cfg)?;
    let records = clinical::parse_clinical(&cfg.paths.clinical)?;
    let by_patient: BTreeMap<&str, &ClinicalRecord> =
        records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    for slide_id in kept.keys() {
        if !by_patient.contains_key(slide_id.as_str()) {
            return Err(Error::Data(format!(
                "slide {slide_id} has no clinical record (one slide per patient, matched by id)"
            )));
        }
    }
    let patient_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let split = split_cohorts(&patient_ids, cfg.seed)?;
    let labels: BTreeMap<String, usize> = records
        .iter()
        .map(|r| (r.patient_id.clone(), encoded_label(r, cfg.task)))
        .collect();
    let slides: Vec<SlidePatches> = kept
        .iter()
        .map(|(slide_id, coords)| SlidePatches {
            slide_id: slide_id.clone(),
            coords: coords.clone(),
        })
        .collect();
    let (bags, warnings) = build_bags(
        &slides,
        &split,
        &labels,
        cfg.bags.n_instances,
        cfg.bags.bags_per_slide,
        subseed(cfg.seed, "bags"),
    )?;
    let mut body = String::new();
    for bag in &bags {
        body.push_str(&serde_json::to_string(bag).expect("bag serializes"));
        body.push('\n');
    }
    let meta = serde_json::to_string(&JsonlMeta {
        config_hash: hash.clone(),
    })
    .expect("meta serializes");
    let path = bags_path(cfg);
    write_with_meta(&path, &meta, &body)?;
    Ok(BagsReport {
        n_bags: bags.len(),
        warnings,
        manifest: path,
    })
}

/// Load the bag manifest, verifying the config hash.
pub fn read_bags(cfg: &RunConfig) -> Result<Vec<Bag>> {
    let path = bags_path(cfg);
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = raw.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty bag manifest", path.display())))?;
    let meta: JsonlMeta = serde_json::from_str(meta_line)
        .map_err(|e| Error::Data(format!("{}: bad meta line: {e}", path.display())))?;
    let expected = cfg.hash();
    if meta.config_hash != expected {
        return Err(Error::ConfigHash {
            file: path,
            expected,
            found: meta.config_hash,
        });
    }
    let mut bags = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        bags.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}: bad bag on line {}: {e}", path.display(), i + 2))
        })?);
    }
    Ok(bags)
}

/// Decoded kept patches, keyed by (slide, x, y).
pub struct PatchStore {
    patches: BTreeMap<(String, usize, usize), RgbImage>,
}

impl PatchStore {
    /// Decode every patch referenced by the given bags.
    pub fn load(cfg: &RunConfig, bags: &[Bag]) -> Result<PatchStore> {
        let mut needed: BTreeSet<(String, usize, usize)> = BTreeSet::new();
        for bag in bags {
            for &(x, y) in &bag.patch_coords {
                needed.insert((bag.slide_id.clone(), x, y));
            }
        }
        let mut patches = BTreeMap::new();
        for (slide_id, x, y) in needed {
            let path = patch_file(cfg, &slide_id, x, y);
            let img = imagery::load_image(&path)?;
            patches.insert((slide_id, x, y), img);
        }
        Ok(PatchStore { patches })
    }

    fn get(&self, slide_id: &str, x: usize, y: usize) -> Result<&RgbImage> {
        self.patches
            .get(&(slide_id.to_string(), x, y))
            .ok_or_else(|| Error::Data(format!("missing patch {slide_id} ({x},{y})")))
    }
}

/// Clinical vectors per patient under the run's feature selection,
/// standardized with training-cohort statistics only.
pub fn clinical_vectors(
    cfg: &RunConfig,
    records: &[ClinicalRecord],
    split: &CohortSplit,
) -> Result<(BTreeMap<String, Vec<f64>>, usize)> {
    if !cfg.mode.uses_clinical() {
        return Ok((
            records
                .iter()
                .map(|r| (r.patient_id.clone(), Vec::new()))
                .collect(),
            0,
        ));
    }
    let schema = clinical::select_features(records, cfg.feature_selection());
    let train_records: Vec<ClinicalRecord> = records
        .iter()
        .filter(|r| split.cohort_of(&r.patient_id) == Some(Cohort::Train))
        .cloned()
        .collect();
    let stats = clinical::fit_stats(&train_records, &schema)?;
    let mut vectors = BTreeMap::new();
    for r in records {
        vectors.insert(
            r.patient_id.clone(),
            clinical::encode(r, &schema, &stats)?.values,
        );
    }
    Ok((vectors, schema.encoded_len()))
}

/// Bag source over manifest bags. Training sources re-augment per epoch
/// (training cohort only); evaluation sources pre-materialize tensors.
pub struct PipelineBags {
    bags: Vec<Bag>,
    clinical: BTreeMap<String, Vec<f64>>,
    cached: Option<Vec<BagInput>>,
    augment: Option<(AugmentSpec, u64)>,
    store_tensors: BTreeMap<(String, usize, usize), Tensor>,
    raw: BTreeMap<(String, usize, usize), RgbImage>,
    resize_to: usize,
    norm_mean: [f64; 3],
    norm_std: [f64; 3],
}

impl PipelineBags {
    /// `augment`: Some(spec, seed) enables per-epoch augmentation and is
    /// only legal when every bag belongs to the training cohort.
    pub fn new(
        cfg: &RunConfig,
        bags: Vec<Bag>,
        store: &PatchStore,
        clinical: &BTreeMap<String, Vec<f64>>,
        augment: Option<(AugmentSpec, u64)>,
    ) -> Result<PipelineBags> {
        if augment.is_some() && bags.iter().any(|b| b.cohort != Cohort::Train) {
            return Err(Error::Validation(
                "augmentation is restricted to the training cohort".into(),
            ));
        }
        let mut raw = BTreeMap::new();
        for bag in &bags {
            for &(x, y) in &bag.patch_coords {
                if let std::collections::btree_map::Entry::Vacant(slot) =
                    raw.entry((bag.slide_id.clone(), x, y))
                {
                    slot.insert(store.get(&bag.slide_id, x, y)?.clone());
                }
            }
        }
        let mut source = PipelineBags {
            bags,
            clinical: clinical.clone(),
            cached: None,
            augment,
            store_tensors: BTreeMap::new(),
            raw,
            resize_to: cfg.tiling.resize_to,
            norm_mean: cfg.tiling.norm_mean,
            norm_std: cfg.tiling.norm_std,
        };
        if source.augment.as_ref().is_none_or(|(spec, _)| spec.transforms.is_empty()) {
            // No augmentation: resize/normalize once and reuse.
            source.augment = None;
            for ((slide, x, y), img) in &source.raw {
                let patch = imagery::Patch {
                    slide_id: slide.clone(),
                    x: *x,
                    y: *y,
                    pixels: img.clone(),
                    entropy_bits: 0.0,
                };
                source.store_tensors.insert(
                    (slide.clone(), *x, *y),
                    imagery::resize_normalize(
                        &patch,
                        source.resize_to,
                        source.norm_mean,
                        source.norm_std,
                    ),
                );
            }
            let mut cached = Vec::with_capacity(source.bags.len());
            for bag in &source.bags {
                cached.push(source.materialize(bag, 0)?);
            }
            source.cached = Some(cached);
        }
        Ok(source)
    }

    fn materialize(&self, bag: &Bag, epoch: usize) -> Result<BagInput> {
        let clinical = self
            .clinical
            .get(&bag.slide_id)
            .ok_or_else(|| Error::Data(format!("no clinical vector for {}", bag.slide_id)))?
            .clone();
        let mut instances = Vec::with_capacity(bag.patch_coords.len());
        for (inst, &(x, y)) in bag.patch_coords.iter().enumerate() {
            match &self.augment {
                None => {
                    instances.push(
                        self.store_tensors
                            .get(&(bag.slide_id.clone(), x, y))
                            .expect("pre-materialized")
                            .clone(),
                    );
                }
                Some((spec, aug_seed)) => {
                    let img = self
                        .raw
                        .get(&(bag.slide_id.clone(), x, y))
                        .ok_or_else(|| Error::Data(format!("missing patch {} ({x},{y})", bag.slide_id)))?;
                    let name = format!("{}/{x}/{y}/{inst}/{epoch}", bag.slide_id);
                    let mut rng = rng_from(subseed(*aug_seed, &name));
                    let augmented = compose(spec, &mut rng, img)?;
                    let patch = imagery::Patch {
                        slide_id: bag.slide_id.clone(),
                        x,
                        y,
                        pixels: augmented,
                        entropy_bits: 0.0,
                    };
                    instances.push(imagery::resize_normalize(
                        &patch,
                        self.resize_to,
                        self.norm_mean,
                        self.norm_std,
                    ));
                }
            }
        }
        Ok(BagInput {
            instances: Instances::Images(instances),
            clinical,
        })
    }
}

impl BagSource for PipelineBags {
    fn len(&self) -> usize {
        self.bags.len()
    }

    fn slide_id(&self, idx: usize) -> &str {
        &self.bags[idx].slide_id
    }

    fn label(&self, idx: usize) -> usize {
        self.bags[idx].label
    }

    fn bag(&self, idx: usize, epoch: usize) -> Result<BagInput> {
        match &self.cached {
            Some(cache) => Ok(cache[idx].clone()),
            None => self.materialize(&self.bags[idx], epoch),
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auroc: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Train on the manifest bags and write the best-validation checkpoint
/// plus the per-epoch log.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let bags = read_bags(cfg)?;
    let records = clinical::parse_clinical(&cfg.paths.clinical)?;
    let patient_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let split = split_cohorts(&patient_ids, cfg.seed)?;
    for bag in &bags {
        if split.cohort_of(&bag.slide_id) != Some(bag.cohort) {
            return Err(Error::Data(format!(
                "bag manifest cohort for {} disagrees with the split; regenerate bags",
                bag.slide_id
            )));
        }
    }
    let (vectors, clinical_dim) = clinical_vectors(cfg, &records, &split)?;
    let store = PatchStore::load(cfg, &bags)?;
    let train_bags: Vec<Bag> = bags.iter().filter(|b| b.cohort == Cohort::Train).cloned().collect();
    let val_bags: Vec<Bag> = bags.iter().filter(|b| b.cohort == Cohort::Val).cloned().collect();
    let augment_spec = cfg.augment_spec()?;
    let train_source = PipelineBags::new(
        cfg,
        train_bags,
        &store,
        &vectors,
        Some((augment_spec, subseed(cfg.seed, "augment"))),
    )?;
    let val_source = PipelineBags::new(cfg, val_bags, &store, &vectors, None)?;
    let mil_cfg = cfg.mil_config(clinical_dim, None);
    let mut init_rng = rng_from(subseed(cfg.seed, "init"));
    let model = MilModel::init(mil_cfg, &mut init_rng)?;
    let outcome = train::train_loop(model, &train_source, &val_source, &cfg.train, cfg.seed)?;
    let ckpt = checkpoint_path(cfg);
    milnet::save_checkpoint(&outcome.model, &hash, &ckpt)?;
    let log = train_log_path(cfg);
    write_with_meta(
        &log,
        &format!("# config_hash={hash}"),
        &train::render_log_csv(&outcome.log),
    )?;
    Ok(TrainReport {
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_auroc: outcome.best_val_auroc,
        checkpoint: ckpt,
        log,
    })
}

#[derive(Debug)]
pub struct EvalReport {
    pub metrics: Vec<MetricsReport>,
    pub metrics_file: PathBuf,
    pub roc_files: Vec<PathBuf>,
    /// Slide-level AUROC per cohort (binary: positive class; multiclass:
    /// mean of defined one-vs-rest AUROCs).
    pub cohort_auroc: BTreeMap<Cohort, Option<f64>>,
}

/// Evaluate a checkpoint over all three cohorts and write the metrics
/// CSV and ROC point files.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let (model, ckpt_hash) = milnet::load_checkpoint(checkpoint, None)?;
    let bags = read_bags(cfg)?;
    let records = clinical::parse_clinical(&cfg.paths.clinical)?;
    let patient_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let split = split_cohorts(&patient_ids, cfg.seed)?;
    let (vectors, clinical_dim) = clinical_vectors(cfg, &records, &split)?;
    // Dimension check first so a mismatched model is reported as such.
    let expected_cfg = cfg.mil_config(clinical_dim, None);
    if model.cfg.clinical_dim != expected_cfg.clinical_dim {
        return Err(Error::Dimension {
            what: "checkpoint clinical dimension".into(),
            expected: expected_cfg.clinical_dim,
            got: model.cfg.clinical_dim,
        });
    }
    if model.cfg.classes != expected_cfg.classes {
        return Err(Error::Dimension {
            what: "checkpoint class count".into(),
            expected: expected_cfg.classes,
            got: model.cfg.classes,
        });
    }
    if model.cfg.featurizer == milnet::FeaturizerKind::Conv
        && model.cfg.input_size != expected_cfg.input_size
    {
        return Err(Error::Dimension {
            what: "checkpoint input size".into(),
            expected: expected_cfg.input_size,
            got: model.cfg.input_size,
        });
    }
    if ckpt_hash != hash {
        return Err(Error::ConfigHash {
            file: checkpoint.to_path_buf(),
            expected: hash,
            found: ckpt_hash,
        });
    }
    let store = PatchStore::load(cfg, &bags)?;
    let mut metrics = Vec::new();
    let mut roc_files = Vec::new();
    let mut cohort_auroc = BTreeMap::new();
    for cohort in [Cohort::Train, Cohort::Val, Cohort::Test] {
        let cohort_bags: Vec<Bag> = bags.iter().filter(|b| b.cohort == cohort).cloned().collect();
        if cohort_bags.is_empty() {
            cohort_auroc.insert(cohort, None);
            continue;
        }
        let source = PipelineBags::new(cfg, cohort_bags, &store, &vectors, None)?;
        let preds = train::slide_predictions(&model, &source, cfg.eval.aggregation.into(), 0)?;
        cohort_auroc.insert(
            cohort,
            train::auroc_of_predictions(&preds, model.cfg.classes),
        );
        let labels: Vec<usize> = preds.iter().map(|p| p.true_label).collect();
        match cfg.task {
            Task::Binary => {
                let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
                metrics.push(eval::confusion_metrics(
                    cohort.as_str(),
                    &scores,
                    &labels,
                    cfg.eval.threshold,
                ));
                let points = eval::roc_points(&scores, &labels);
                let path = cfg.paths.out.join(format!("roc_{}.csv", cohort.as_str()));
                write_with_meta(
                    &path,
                    &format!("# config_hash={hash}"),
                    &eval::render_roc_csv(&points),
                )?;
                roc_files.push(path);
            }
            Task::Multiclass => {
                let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
                let class_names = ["N0", "N1-2", "N2+"];
                metrics.extend(eval::multiclass_metrics(
                    cohort.as_str(),
                    &probs,
                    &labels,
                    &class_names,
                ));
                for (c, name) in class_names.iter().enumerate() {
                    let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                    let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
                    let points = eval::roc_points(&scores, &bin);
                    let path = cfg
                        .paths
                        .out
                        .join(format!("roc_{}_c{c}.csv", cohort.as_str()));
                    write_with_meta(
                        &path,
                        &format!("# config_hash={hash}"),
                        &eval::render_roc_csv(&points),
                    )?;
                    roc_files.push(path);
                    let _ = name;
                }
            }
        }
    }
    let metrics_file = metrics_path(cfg);
    write_with_meta(
        &metrics_file,
        &format!(
            "# config_hash={hash} mode={} task={} seed={}",
            cfg.mode.as_str(),
            cfg.task.as_str(),
            cfg.seed
        ),
        &eval::render_csv(&metrics),
    )?;
    Ok(EvalReport {
        metrics,
        metrics_file,
        roc_files,
        cohort_auroc,
    })
}

/// Build a Markdown comparison table from test-cohort rows of several
/// metrics files (e.g. a masked run vs a whole-slide run).
pub fn run_report(metrics_files: &[PathBuf], out_file: &Path) -> Result<String> {
    let mut table = String::from(
        "| Run | Class | AUROC | Accuracy | Sensitivity | Specificity | PPV | NPV | F1 |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for path in metrics_files {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = raw.lines();
        let meta = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty metrics file", path.display())))?;
        let run_label = meta_value(meta, "mode")
            .map(str::to_string)
            .unwrap_or_else(|| {
                path.file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("run")
                    .to_string()
            });
        let header = lines.next().unwrap_or_default();
        if header != "cohort,class,auroc,accuracy,sensitivity,specificity,ppv,npv,f1" {
            return Err(Error::Parse {
                row: 2,
                column: "<header>".into(),
                reason: format!("{}: unexpected metrics header", path.display()),
            });
        }
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 || fields[0] != "test" {
                continue;
            }
            let _ = writeln!(
                table,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                run_label,
                fields[1],
                fields[2],
                fields[3],
                fields[4],
                fields[5],
                fields[6],
                fields[7],
                fields[8],
            );
        }
    }
    std::fs::write(out_file, &table).map_err(|e| Error::io(out_file, e))?;
    Ok(table)
}
