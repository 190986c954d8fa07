//! General-domain inpainting dataset builder: pick one sufficiently large
//! object per image, hand (image, mask, caption) to an external inpainter,
//! and collect the results as fake samples.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::composite::open_rgb;
use crate::data::{load_mask, DatasetManifest, Label, LoadOptions, MaskGrid, Sample, Split};
use crate::error::{Error, Result, ValidationError};

/// Index of a uniformly chosen object whose area fraction is strictly above
/// `min_area_frac`, or `None` when no object qualifies.
pub fn select_object_mask(objects: &[MaskGrid], min_area_frac: f64, seed: u64) -> Result<Option<usize>> {
    if objects.is_empty() {
        return Err(ValidationError::NoObjects.into());
    }
    let eligible: Vec<usize> = objects.iter().enumerate().filter(|(_, m)| m.area_fraction() > min_area_frac).map(|(i, _)| i).collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Some(eligible[rng.random_range(0..eligible.len())]))
}

/// One request to the external generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintJob {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub prompt: String,
    pub output_path: PathBuf,
}

/// Runs an inpainting model somewhere else. Success means an image of the
/// source's size was written to `job.output_path`.
pub trait Inpainter: Sync {
    fn inpaint(&self, job: &InpaintJob) -> Result<()>;
}

impl<F: Fn(&InpaintJob) -> Result<()> + Sync> Inpainter for F {
    fn inpaint(&self, job: &InpaintJob) -> Result<()> {
        self(job)
    }
}

/// Spawns `program args...` per job with the job JSON on stdin; exit status
/// zero signals success.
#[derive(Clone, Debug)]
pub struct SubprocessInpainter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Inpainter for SubprocessInpainter {
    fn inpaint(&self, job: &InpaintJob) -> Result<()> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Inpainter(format!("spawn {}: {e}", self.program.display())))?;
        let body = serde_json::to_vec(job)?;
        if let Some(mut stdin) = child.stdin.take() {
            // a child that exits without reading is reported through its status
            let _ = stdin.write_all(&body);
        }
        let out = child.wait_with_output().map_err(|e| Error::Inpainter(format!("wait {}: {e}", self.program.display())))?;
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            return Err(Error::Inpainter(format!("{} exited with {}: {}", self.program.display(), out.status, err.trim())));
        }
        Ok(())
    }
}

/// POSTs the job JSON to an endpoint; any 2xx response signals success.
#[cfg(feature = "http")]
#[derive(Clone, Debug)]
pub struct HttpInpainter {
    pub endpoint: String,
}

#[cfg(feature = "http")]
impl Inpainter for HttpInpainter {
    fn inpaint(&self, job: &InpaintJob) -> Result<()> {
        let body = serde_json::to_string(job)?;
        ureq::post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| Error::Inpainter(format!("POST {}: {e}", self.endpoint)))?;
        Ok(())
    }
}

/// One source image with its caption and candidate object masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_path: PathBuf,
    pub caption: String,
    pub object_masks: Vec<PathBuf>,
    pub split: Split,
}

pub fn load_caption_records(path: &Path) -> Result<Vec<CaptionRecord>> {
    if !path.is_file() {
        return Err(ValidationError::MissingFile(path.to_path_buf()).into());
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ValidationError::MalformedRecord { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CocoSdOptions {
    pub min_area_frac: f64,
    pub seed: u64,
    /// Extra attempts after a failed inpainting call.
    pub retries: usize,
    /// Maximum jobs in flight.
    pub concurrency: usize,
    pub generator: String,
}

impl Default for CocoSdOptions {
    fn default() -> Self {
        Self { min_area_frac: 0.05, seed: 0, retries: 2, concurrency: 4, generator: "coco-sd".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub image_path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct CocoSdReport {
    pub manifest: DatasetManifest,
    pub skipped: Vec<Skipped>,
}

fn record_seed(image_path: &Path, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(image_path.to_string_lossy().as_bytes());
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn build_one(
    rec: &CaptionRecord,
    root: &Path,
    out_dir: &Path,
    inpainter: &dyn Inpainter,
    opts: &CocoSdOptions,
) -> Result<std::result::Result<Sample, String>> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    let source = resolve(&rec.image_path);
    let image = open_rgb(&source)?;
    let masks = rec
        .object_masks
        .iter()
        .map(|m| load_mask(&resolve(m), Some((image.height() as usize, image.width() as usize)), LoadOptions { binarize: true }))
        .collect::<Result<Vec<_>>>()?;
    let Some(chosen) = select_object_mask(&masks, opts.min_area_frac, record_seed(&rec.image_path, opts.seed))? else {
        return Ok(Err(format!("no object above {:.0}% of the image", opts.min_area_frac * 100.0)));
    };
    let stem = rec.image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let mask_rel = PathBuf::from("masks").join(format!("{stem}.png"));
    let image_rel = PathBuf::from("images").join(format!("{stem}.png"));
    masks[chosen].save(&out_dir.join(&mask_rel))?;
    let job = InpaintJob {
        image_path: std::path::absolute(&source).unwrap_or(source),
        mask_path: out_dir.join(&mask_rel),
        prompt: rec.caption.clone(),
        output_path: out_dir.join(&image_rel),
    };
    let mut last = String::new();
    for attempt in 0..=opts.retries {
        let outcome = inpainter.inpaint(&job).and_then(|()| {
            let out = open_rgb(&job.output_path)?;
            if out.dimensions() != image.dimensions() {
                return Err(Error::Inpainter(format!("output is {:?}, source is {:?}", out.dimensions(), image.dimensions())));
            }
            Ok(())
        });
        match outcome {
            Ok(()) => {
                return Ok(Ok(Sample {
                    image_path: image_rel,
                    mask_path: Some(mask_rel),
                    label: Label::Fake,
                    generator: opts.generator.clone(),
                    split: rec.split,
                }))
            }
            Err(e) => {
                log::warn!("inpainting {} failed (attempt {}): {e}", rec.image_path.display(), attempt + 1);
                last = e.to_string();
            }
        }
    }
    Ok(Err(format!("inpainter failed {} times: {last}", opts.retries + 1)))
}

/// Builds the dataset from caption records at `source` (JSON lines, paths
/// relative to its directory). Images that cannot be inpainted within the
/// retry budget, or have no qualifying object, are skipped and reported.
/// Fails only on unreadable inputs or when every image was skipped.
pub fn build_cocosd_manifest(source: &Path, inpainter: &dyn Inpainter, out_dir: &Path, opts: &CocoSdOptions) -> Result<CocoSdReport> {
    let records = load_caption_records(source)?;
    if records.is_empty() {
        return Err(ValidationError::EmptyManifest(source.display().to_string()).into());
    }
    let root = source.parent().map(Path::to_path_buf).unwrap_or_default();
    for d in ["images", "masks"] {
        let dir = out_dir.join(d);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<std::result::Result<Sample, String>>>>> = Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..opts.concurrency.clamp(1, records.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = records.get(i) else { break };
                let r = build_one(rec, &root, out_dir, inpainter, opts);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (rec, r) in records.iter().zip(results.into_inner().expect("workers joined")) {
        match r.expect("every record processed")? {
            Ok(s) => samples.push(s),
            Err(reason) => skipped.push(Skipped { image_path: rec.image_path.clone(), reason }),
        }
    }
    if samples.is_empty() {
        return Err(Error::Inpainter(format!("all {} images were skipped", records.len())));
    }
    let manifest = DatasetManifest::new(opts.generator.clone(), out_dir, samples);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(CocoSdReport { manifest, skipped })
}
