use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use locprobe::backbone::{weights::sha256_hex, weights::WeightMap, BackboneFamily, BackboneSpec, Encoder, FeatureCache, WeightSource};
use locprobe::config::{BackboneChoice, Overrides, RunConfig};
use locprobe::data::{load_manifest, save_png, write_atomic, DatasetManifest, Label, LoadOptions, PredictionMap, Split};
use locprobe::dataset::composite::{background_is_exact, open_rgb};
use locprobe::dataset::{self, AugmentSpec, CocoSdOptions, Inpainter, LdmBuild, LdmVariant, SubprocessInpainter};
use locprobe::decoder::load_checkpoint;
use locprobe::inference::DecoderPredictor;
use locprobe::metrics::{self, CrossGenMatrix, Predictor};
use locprobe::report;
use locprobe::training::{self, Control, LossKind, TrainRequest};
use locprobe::ValidationError;

#[derive(Parser)]
#[command(name = "locprobe", version, about = "Localize inpainted regions from frozen backbone features")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a decoder (or a global-token probe) on frozen features.
    Train(TrainArgs),
    /// Score a checkpoint on a test manifest, or build a cross-generator matrix.
    Eval(EvalArgs),
    /// Write probability maps and overlays for individual images.
    Predict(PredictArgs),
    /// Paste generated content into real images under a mask.
    Compose(ComposeArgs),
    /// Write an augmented copy of a dataset.
    Augment(AugmentArgs),
    /// Build an inpainted dataset by calling an external generator.
    BuildCocosd(CocoSdArgs),
    /// Render a matrix CSV as a heatmap with an ID/OOD summary.
    Report(ReportArgs),
    /// Write deterministic random backbone weights for offline runs.
    InitBackbone(InitArgs),
    /// Generate the procedural toy dataset.
    MakeFixture(FixtureArgs),
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<BackboneChoice>,
    #[arg(long)]
    layer: Option<usize>,
    /// Second transformer layer for `--backbone concat`.
    #[arg(long)]
    layer2: Option<usize>,
    /// Backbone weights: a safetensors path (optionally `path#sha256`) or `seed:N`.
    #[arg(long)]
    weights: Option<String>,
    /// linear, attention, conv-4, conv-12 or conv-20.
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Threshold ground-truth masks at 128 instead of rejecting non-binary values.
    #[arg(long)]
    binarize_masks: bool,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ModelArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            backbone: self.backbone,
            layer: self.layer,
            layer2: self.layer2,
            weights: self.weights.clone(),
            decoder: self.decoder.clone(),
            seed: self.seed,
            cache_dir: self.cache_dir.clone(),
            binarize_masks: self.binarize_masks.then_some(true),
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

fn parse_backbone(s: &str) -> Result<BackboneChoice, String> {
    s.parse()
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train a logistic probe on the global token instead of a decoder.
    #[arg(long)]
    probe: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Decoder checkpoint(s); several with --matrix, one per generator.
    #[arg(long, num_args = 1.., required_unless_present = "predictions")]
    checkpoint: Vec<PathBuf>,
    /// Test manifest(s); several with --matrix, one per generator.
    #[arg(long, num_args = 1.., required = true)]
    test: Vec<PathBuf>,
    /// Evaluate every checkpoint on every test manifest.
    #[arg(long)]
    matrix: bool,
    /// Generator names for matrix rows and columns, in checkpoint order.
    #[arg(long, value_delimiter = ',')]
    generators: Vec<String>,
    /// Score precomputed probability PNGs (same relative paths as the manifest) instead of a checkpoint.
    #[arg(long, conflicts_with_all = ["checkpoint", "matrix"])]
    predictions: Option<PathBuf>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    binarize_masks: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    weights: String,
    /// Binarization threshold for the overlay; probability maps do not depend on it.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Clean,
    Real,
}

#[derive(Args)]
struct ComposeArgs {
    /// Build a whole LDM-style dataset from matched directories.
    #[arg(long, value_enum, requires_all = ["real_dir", "generated_dir", "mask_dir", "out"])]
    variant: Option<VariantArg>,
    #[arg(long)]
    real_dir: Option<PathBuf>,
    #[arg(long)]
    generated_dir: Option<PathBuf>,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Single composite: image supplying the masked region.
    #[arg(long, conflicts_with = "variant", requires_all = ["outside", "mask", "output"])]
    inside: Option<PathBuf>,
    #[arg(long)]
    outside: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    binarize_masks: bool,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// blur, jitter or jpeg, applied in order with default ranges.
    #[arg(long = "aug", value_delimiter = ',', required_unless_present = "spec")]
    augs: Vec<String>,
    /// JSON file with a list of augmentation specs.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CocoSdArgs {
    /// JSON lines of {image_path, caption, object_masks, split}.
    #[arg(long)]
    records: PathBuf,
    /// Inpainter program; receives one job as JSON on stdin.
    #[arg(long, required_unless_present = "inpainter_url")]
    inpainter_cmd: Option<PathBuf>,
    #[arg(long = "inpainter-arg", allow_hyphen_values = true)]
    inpainter_args: Vec<String>,
    /// Inpainting service accepting the job JSON by POST.
    #[arg(long, conflicts_with = "inpainter_cmd")]
    inpainter_url: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    min_area: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    retries: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Matrix CSV (header row and column of generator names).
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value = "Cross-generator IoU (%)")]
    title: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_parser = parse_family)]
    backbone: BackboneFamily,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn parse_family(s: &str) -> Result<BackboneFamily, String> {
    s.parse()
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 6)]
    fakes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    ValidationError::InvalidParameter(msg.into()).into()
}

/// `out/<kind>-<hash>` for non-training commands, keyed by their inputs.
fn command_dir(out: &Path, kind: &str, inputs: &serde_json::Value) -> PathBuf {
    let digest = sha256_hex(inputs.to_string().as_bytes());
    out.join(format!("{kind}-{}", &digest[..12]))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| locprobe::Error::io(dir, e))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut o = a.model.overrides();
    o.train_manifest = a.train.clone();
    o.val_manifest = a.val.clone();
    o.max_epochs = a.epochs;
    o.batch_size = a.batch_size;
    o.initial_lr = a.lr;
    let mut cfg = RunConfig::resolve(a.model.config.as_deref(), &o)?;
    if a.probe {
        cfg.train.loss = LossKind::ImageBce;
    }
    cfg.validate()?;
    let train_path = cfg.train_manifest.clone().ok_or_else(|| usage("no training manifest (use --train)"))?;
    let opts = cfg.load_options();
    let train_m = load_manifest(&train_path, opts)?;
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    cfg.save(&run_dir.join("config.json"))?;
    if cfg.train.loss == LossKind::ImageBce {
        let specs = cfg.backbone_specs()?;
        let [spec] = specs.as_slice() else {
            bail!(usage("the probe reads one backbone; concat is not supported"));
        };
        let out = training::train_cls_probe(spec, &train_m, &cfg.train, &run_dir)?;
        let ap = metrics::average_precision(&out.scores.iter().map(|&s| s as f64).collect::<Vec<_>>(), &out.labels)?;
        println!("probe: {}", out.path.display());
        println!("epochs: {} ({:?})", out.history.records.len(), out.history.stop_reason);
        println!("train AP: {:.1}", 100.0 * ap);
        println!("run directory: {}", run_dir.display());
        return Ok(());
    }
    let val_m = cfg.val_manifest.as_deref().map(|p| load_manifest(p, opts)).transpose()?;
    let req = TrainRequest {
        backbones: cfg.backbone_specs()?,
        decoder: cfg.decoder_arch()?,
        train: &train_m,
        val: val_m.as_ref(),
        config: cfg.train.clone(),
        out_dir: run_dir.clone(),
        cache_dir: cfg.cache_dir.clone(),
        config_hash: Some(cfg.hash()),
        mask_options: opts,
    };
    let mut observer = |_: &training::EpochRecord, _: &locprobe::decoder::Decoder<f32>| Control::Continue;
    let out = training::train(&req, &mut observer)?;
    let last = out.history.records.last();
    println!("decoder: {} ({} parameters)", cfg.decoder, out.decoder.num_parameters());
    println!("epochs: {} ({:?})", out.history.records.len(), out.history.stop_reason);
    if let Some(r) = last {
        println!("final train loss: {:.5}", r.train_loss);
    }
    println!("encoder checksum unchanged: {}", out.checksum_after);
    println!("checkpoint: {}", out.checkpoint.display());
    println!("run directory: {}", run_dir.display());
    Ok(())
}

/// Encoder matching a checkpoint's recorded backbones.
fn encoder_for(checkpoint: &Path, weights: Option<&str>) -> anyhow::Result<Encoder> {
    let (_, meta) = load_checkpoint(checkpoint)?;
    let source: WeightSource = weights.ok_or_else(|| usage("no backbone weights given (use --weights)"))?.parse().map_err(usage)?;
    let specs = meta
        .encoders
        .iter()
        .map(|r| {
            let family: BackboneFamily = r.family.parse().map_err(usage)?;
            Ok(BackboneSpec::new(family, r.layer, source.clone())?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Encoder::load(&specs)?)
}

fn write_per_image(path: &Path, manifest: &DatasetManifest, result: &metrics::DatasetIou) -> anyhow::Result<()> {
    let generators: BTreeMap<&Path, &str> = manifest.samples.iter().map(|s| (s.image_path.as_path(), s.generator.as_str())).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_path", "generator", "iou"])?;
    for r in &result.per_image {
        let g = generators.get(r.image_path.as_path()).copied().unwrap_or_default();
        w.write_record([r.image_path.to_string_lossy().as_ref(), g, &format!("{:.6}", r.iou)])?;
    }
    write_atomic(path, &w.into_inner()?)?;
    Ok(())
}

/// Image-level score: the largest pixel probability.
fn image_score(p: &PredictionMap) -> f64 {
    p.values.iter().copied().fold(0.0f32, f32::max) as f64
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let opts = LoadOptions { binarize: a.binarize_masks };
    if !(0.0..1.0).contains(&a.threshold) {
        bail!(usage(format!("threshold {} outside [0, 1)", a.threshold)));
    }
    let manifests = a.test.iter().map(|p| load_manifest(p, opts)).collect::<Result<Vec<_>, _>>()?;
    for (m, p) in manifests.iter().zip(&a.test) {
        if m.is_empty() {
            bail!(locprobe::Error::from(ValidationError::EmptyManifest(p.display().to_string())));
        }
    }
    let inputs = json!({
        "checkpoints": a.checkpoint, "tests": a.test, "matrix": a.matrix, "generators": a.generators,
        "predictions": a.predictions, "weights": a.weights, "threshold": a.threshold, "binarize": a.binarize_masks,
    });
    let dir = command_dir(&a.out, "eval", &inputs);
    let cache = a.cache_dir.as_ref().map(FeatureCache::new);
    if let Some(c) = &a.cache_dir {
        create_dir(c)?;
    }

    if a.matrix {
        let g = a.checkpoint.len();
        let generators =
            if a.generators.is_empty() { manifests.iter().map(|m| m.samples[0].generator.clone()).collect() } else { a.generators.clone() };
        if generators.len() != g || manifests.len() != g {
            bail!(usage(format!(
                "matrix mode needs one checkpoint, test manifest and generator name per generator (got {g}, {}, {})",
                manifests.len(),
                generators.len()
            )));
        }
        let encoder = encoder_for(&a.checkpoint[0], a.weights.as_deref())?;
        let predictors = a.checkpoint.iter().map(|c| DecoderPredictor::load(&encoder, c, cache.clone())).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&dyn Predictor> = predictors.iter().map(|p| p as &dyn Predictor).collect();
        let matrix = metrics::build_cross_matrix(&generators, &refs, &manifests, a.threshold, opts)?;
        create_dir(&dir)?;
        matrix.save_csv(&dir.join("matrix.csv"))?;
        let mut summary = json!({ "generators": generators, "threshold": a.threshold });
        match matrix.aggregate_id_ood() {
            Ok(s) => {
                summary["id_iou"] = json!(s.id_iou);
                summary["ood_iou"] = json!(s.ood_iou);
                println!("ID IoU: {:.1}  OOD IoU: {:.1}", s.id_iou, s.ood_iou);
            }
            Err(_) => println!("ID IoU: {:.1}", matrix.values[0][0]),
        }
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
        print!("{}", matrix.to_csv()?);
        println!("run directory: {}", dir.display());
        return Ok(());
    }

    let [manifest] = manifests.as_slice() else {
        bail!(usage("give one --test manifest, or use --matrix"));
    };
    let maps = match (&a.predictions, a.checkpoint.as_slice()) {
        (Some(pred_dir), _) => manifest
            .samples
            .iter()
            .map(|s| {
                let p = pred_dir.join(s.image_path.with_extension("png"));
                if !p.is_file() {
                    return Err(ValidationError::MissingPrediction(s.image_path.clone()).into());
                }
                PredictionMap::load(&p)
            })
            .collect::<Result<Vec<_>, locprobe::Error>>()?,
        (None, [checkpoint]) => {
            let encoder = encoder_for(checkpoint, a.weights.as_deref())?;
            DecoderPredictor::load(&encoder, checkpoint, cache)?.predict(manifest)?
        }
        (None, _) => bail!(usage("give one --checkpoint, or use --matrix")),
    };
    let scores: Vec<f64> = maps.iter().map(image_score).collect();
    let labels: Vec<bool> = manifest.samples.iter().map(|s| s.label == Label::Fake).collect();
    let keyed = metrics::keyed_predictions(manifest, maps)?;
    let result = metrics::dataset_iou(&keyed, manifest, a.threshold, opts)?;
    create_dir(&dir)?;
    write_per_image(&dir.join("per_image.csv"), manifest, &result)?;
    let mut summary = json!({
        "iou": result.mean_iou,
        "fake_images": result.per_image.len(),
        "images": manifest.len(),
        "threshold": a.threshold,
    });
    println!("IoU: {:.1} over {} fake images", result.mean_iou, result.per_image.len());
    if let Ok(ap) = metrics::average_precision(&scores, &labels) {
        summary["ap"] = json!(100.0 * ap);
        println!("AP: {:.1}", 100.0 * ap);
    }
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&a.threshold) {
        bail!(usage(format!("threshold {} outside [0, 1)", a.threshold)));
    }
    let encoder = encoder_for(&a.checkpoint, Some(&a.weights))?;
    let predictor = DecoderPredictor::load(&encoder, &a.checkpoint, None)?;
    let dir = command_dir(
        &a.out,
        "predict",
        &json!({"checkpoint": a.checkpoint, "weights": a.weights, "threshold": a.threshold, "images": a.images}),
    );
    create_dir(&dir)?;
    for path in &a.images {
        let input = open_rgb(path)?;
        let pred = predictor.predict_path(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let prob = dir.join(format!("{stem}.prob.png"));
        let over = dir.join(format!("{stem}.overlay.png"));
        pred.save(&prob)?;
        save_png(&image::DynamicImage::ImageRgb8(report::overlay(&input, &pred, a.threshold)), &over)?;
        let positives = pred.binarize(a.threshold).positives();
        println!(
            "{}: {:.1}% predicted manipulated -> {}, {}",
            path.display(),
            100.0 * positives as f64 / (pred.height * pred.width) as f64,
            prob.display(),
            over.display()
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    serde_json::from_value(json!(s)).map_err(|_| usage(format!("unknown split {s:?} (train, val or test)")))
}

fn cmd_compose(a: ComposeArgs) -> anyhow::Result<()> {
    let opts = LoadOptions { binarize: a.binarize_masks };
    if let Some(inside) = &a.inside {
        let (outside, mask, output) = (a.outside.unwrap(), a.mask.unwrap(), a.output.unwrap());
        let background = open_rgb(&outside)?;
        let mask = locprobe::data::load_mask(&mask, Some((background.height() as usize, background.width() as usize)), opts)?;
        let job = dataset::CompositeJob {
            inside_source: inside.clone(),
            outside_source: outside,
            mask: mask.clone(),
            output_path: output.clone(),
        };
        let img = dataset::composite(&job)?;
        let exact = background_is_exact(&img, &background, &mask);
        println!("wrote {} ({} of {} pixels from the inside source)", output.display(), mask.positives(), mask.values.len());
        println!("background exact: {}", if exact { "yes" } else { "NO" });
        if !exact {
            bail!("composite background differs from the source");
        }
        return Ok(());
    }
    let Some(variant) = a.variant else {
        bail!(usage("give --variant with source directories, or --inside/--outside/--mask/--output"));
    };
    let variant = match variant {
        VariantArg::Clean => LdmVariant::Clean,
        VariantArg::Real => LdmVariant::Real,
    };
    let (real_dir, out) = (a.real_dir.unwrap(), a.out.unwrap());
    let manifest = dataset::build_ldm_dataset(&LdmBuild {
        variant,
        real_dir: &real_dir,
        generated_dir: &a.generated_dir.unwrap(),
        mask_dir: &a.mask_dir.unwrap(),
        out_dir: &out,
        split: parse_split(&a.split)?,
        mask_options: opts,
    })?;
    let real = dataset::composite::images_by_stem(&real_dir)?;
    let mut exact = 0;
    for s in &manifest.samples {
        let stem = s.image_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let img = open_rgb(&manifest.image_path(s))?;
        let mask = manifest.load_sample_mask(s, (img.height() as usize, img.width() as usize), opts)?;
        exact += usize::from(background_is_exact(&img, &open_rgb(&real[&stem])?, &mask));
    }
    println!("composited {} images ({})", manifest.len(), variant.generator_tag());
    println!("background exact: {exact}/{}", manifest.len());
    println!("manifest: {}", out.join("manifest.jsonl").display());
    if exact != manifest.len() {
        bail!("{} composites differ from their real background", manifest.len() - exact);
    }
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.manifest, LoadOptions::default())?;
    let specs: Vec<AugmentSpec> = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| locprobe::Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("augmentation spec {}: {e}", path.display())))?
        }
        None => a
            .augs
            .iter()
            .map(|name| Ok(AugmentSpec { kind: dataset::AugmentKind::from_name(name)?, seed: a.seed }))
            .collect::<Result<_, locprobe::Error>>()?,
    };
    let out = dataset::augment_dataset(&manifest, &specs, &a.out)?;
    println!("augmented {} images with {} transform(s)", out.len(), specs.len());
    println!("manifest: {}", a.out.join("manifest.jsonl").display());
    Ok(())
}

fn cmd_build_cocosd(a: CocoSdArgs) -> anyhow::Result<()> {
    let opts = CocoSdOptions {
        min_area_frac: a.min_area,
        seed: a.seed,
        retries: a.retries,
        concurrency: a.concurrency,
        ..CocoSdOptions::default()
    };
    let inpainter: Box<dyn Inpainter> = match (&a.inpainter_cmd, &a.inpainter_url) {
        (Some(program), _) => Box::new(SubprocessInpainter { program: program.clone(), args: a.inpainter_args.clone() }),
        #[cfg(feature = "http")]
        (None, Some(url)) => Box::new(dataset::HttpInpainter { endpoint: url.clone() }),
        #[cfg(not(feature = "http"))]
        (None, Some(_)) => bail!(usage("built without the http feature")),
        (None, None) => bail!(usage("give --inpainter-cmd or --inpainter-url")),
    };
    let report = dataset::build_cocosd_manifest(&a.records, inpainter.as_ref(), &a.out, &opts)?;
    println!("inpainted {} images, skipped {}", report.manifest.len(), report.skipped.len());
    for s in &report.skipped {
        println!("  skipped {}: {}", s.image_path.display(), s.reason);
    }
    println!("manifest: {}", a.out.join("manifest.jsonl").display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let matrix = CrossGenMatrix::load_csv(&a.matrix)?;
    let csv_text = matrix.to_csv()?;
    let dir = command_dir(&a.out, "report", &json!({"matrix": csv_text, "title": a.title}));
    create_dir(&dir)?;
    report::write_heatmap(&matrix, &a.title, &dir.join("heatmap.svg"))?;
    matrix.save_csv(&dir.join("matrix.csv"))?;
    let summary = match matrix.aggregate_id_ood() {
        Ok(s) => {
            println!("ID IoU: {:.1}  OOD IoU: {:.1}", s.id_iou, s.ood_iou);
            json!({"id_iou": s.id_iou, "ood_iou": s.ood_iou})
        }
        Err(_) => {
            println!("ID IoU: {:.1} (single generator, no OOD pairs)", matrix.values[0][0]);
            json!({"id_iou": matrix.values[0][0], "ood_iou": null})
        }
    };
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("figure: {}", dir.join("heatmap.svg").display());
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_init_backbone(a: InitArgs) -> anyhow::Result<()> {
    let layout = match a.backbone {
        BackboneFamily::VitL14 => locprobe::backbone::vit::VitConfig::l14().layout(),
        BackboneFamily::Resnet50 => locprobe::backbone::resnet::layout(),
    };
    WeightMap::seeded(&layout, a.seed).save_safetensors(&a.output)?;
    let bytes = std::fs::read(&a.output).with_context(|| format!("reading back {}", a.output.display()))?;
    println!("wrote {} seeded {} weights", a.output.display(), a.backbone);
    println!("sha256: {}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_make_fixture(a: FixtureArgs) -> anyhow::Result<()> {
    let m = dataset::fixture::toy_dataset(&a.out, a.images, a.fakes, a.seed)?;
    println!("wrote {} images ({} manipulated) to {}", m.len(), m.fakes().count(), a.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<ValidationError>().is_some() || e.downcast_ref::<locprobe::Error>().is_some_and(locprobe::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Augment(a) => cmd_augment(a),
        Command::BuildCocosd(a) => cmd_build_cocosd(a),
        Command::Report(a) => cmd_report(a),
        Command::InitBackbone(a) => cmd_init_backbone(a),
        Command::MakeFixture(a) => cmd_make_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
