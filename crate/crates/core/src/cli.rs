//! The `fp-volseg` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric or
//! contract error. Diagnostics go to stderr; machine-readable results go to
//! stdout or to the files named by flags. Every output file is written to a
//! temporary sibling and renamed into place.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_phantom, manifest_to_string, read_manifest, split_model_wise, ManifestEntry, ModelWiseSplit, PhantomSpec};
use crate::focused::FpCheckpoint;
use crate::inference::{ensemble_average, postprocess_open, threshold_prob, EnsembleSpec};
use crate::metrics::{evaluate_case, summarize, CaseReport, Connectivity};
use crate::patch::{compute_grid, extract_volume_patch, gaussian_weight_map, sliding_window_infer, DEFAULT_SIGMA_SCALE};
use crate::train::{fit, parse_shape, stats_to_jsonl, CaseVolumes, ModelCheckpoint, PatchStore, TrainConfig, TOY_MODEL_NAME};
use crate::volume::{load_volume, normalize_zscore, save_volume, stack_channels, write_atomic, Shape, Volume3D, VolumeKind};
use crate::{Error, Result};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (volume format FPVOL001)");

#[derive(Debug, Parser)]
#[command(name = "fp-volseg", version = VERSION, about = "Patch-based PET/CT lesion segmentation toolkit")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic PET/CT phantoms and a manifest.
    Synth(SynthArgs),
    /// Draw disjoint model-wise validation sets from a manifest.
    Split(SplitArgs),
    /// Crop a case into overlapping patches.
    ExtractPatches(ExtractArgs),
    /// Train the toy model on a manifest.
    Train(TrainArgs),
    /// Sliding-window inference on one case.
    Infer(InferArgs),
    /// Weighted average of probability volumes.
    Ensemble(EnsembleArgs),
    /// Threshold and optionally open a prediction.
    Postprocess(PostprocessArgs),
    /// Dice, FPV, FNV and aggregate score per case.
    Eval(EvalArgs),
}

fn shape_arg(s: &str) -> std::result::Result<Shape, String> {
    parse_shape("shape", s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    lesion_cases: usize,
    #[arg(long, default_value_t = 0)]
    normal_cases: usize,
    /// N or Z,Y,X.
    #[arg(long, default_value = "64", value_parser = shape_arg)]
    shape: Shape,
    #[arg(long, default_value_t = 3)]
    n_lesions: usize,
    #[arg(long, default_value_t = 3)]
    radius_min: usize,
    #[arg(long, default_value_t = 6)]
    radius_max: usize,
    #[arg(long, default_value_t = 2.0)]
    pet_lesion_intensity: f64,
    #[arg(long, default_value_t = 1.0)]
    pet_background: f64,
    #[arg(long, default_value_t = 0.5)]
    ct_contrast: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    /// Isotropic voxel size in mm.
    #[arg(long, default_value_t = 1.5)]
    spacing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 30)]
    lesion: usize,
    #[arg(long, default_value_t = 20)]
    normal: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the split here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    input_pet: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "64", value_parser = shape_arg)]
    patch: Shape,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Skip per-channel z-score normalization.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split JSON from `split`; training uses its pool, validation one of its sets.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    val_set: usize,
    /// Without --split, the last N manifest cases are held out for validation.
    #[arg(long, default_value_t = 2)]
    val_count: usize,
    /// Model checkpoint output (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch stats as JSON lines; stdout when omitted.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Final per-patch loss registry (JSON).
    #[arg(long)]
    fp_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    input_pet: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the checkpoint's training patch size.
    #[arg(long, value_parser = shape_arg)]
    patch: Option<Shape>,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_SCALE)]
    sigma_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// PATH:WEIGHT, repeated.
    #[arg(long = "member", required = true)]
    members: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    /// Probability or mask volume.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Opening radius in voxels; 0 disables morphology.
    #[arg(long, default_value_t = 0)]
    open_radius: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted mask (or probability, thresholded), repeated.
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    /// Ground-truth mask, repeated in the same order as --pred.
    #[arg(long = "gt", required = true)]
    gts: Vec<PathBuf>,
    /// Case ids; default to the ground-truth file stems.
    #[arg(long = "case-id")]
    case_ids: Vec<String>,
    #[arg(long, default_value_t = 18)]
    connectivity: u32,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the report lines to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fp-volseg: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::ExtractPatches(a) => extract_patches(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Postprocess(a) => postprocess(a),
        Command::Eval(a) => eval(a),
    }
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn synth(a: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let mut entries = Vec::new();
    let total = a.lesion_cases + a.normal_cases;
    for i in 0..total {
        let has_lesion = i < a.lesion_cases;
        let spec = PhantomSpec {
            shape: a.shape,
            spacing_mm: [a.spacing; 3],
            n_lesions: if has_lesion { a.n_lesions } else { 0 },
            lesion_radius_range: (a.radius_min, a.radius_max),
            pet_lesion_intensity: a.pet_lesion_intensity,
            pet_background: a.pet_background,
            ct_contrast: a.ct_contrast,
            noise_sigma: a.noise_sigma,
            seed: seeds.random(),
        };
        let ph = generate_phantom(&spec)?;
        let case_id = format!("case{i:04}");
        let entry = ManifestEntry {
            ct_path: format!("{case_id}_ct.fpvol"),
            pet_path: format!("{case_id}_pet.fpvol"),
            mask_path: format!("{case_id}_mask.fpvol"),
            case_id,
            has_lesion,
        };
        save_volume(&ph.ct, a.out_dir.join(&entry.ct_path))?;
        save_volume(&ph.pet, a.out_dir.join(&entry.pet_path))?;
        save_volume(&ph.mask, a.out_dir.join(&entry.mask_path))?;
        eprintln!("synth: {} ({} lesion voxels)", entry.case_id, ph.mask.count_nonzero());
        entries.push(entry);
    }
    write_text(&a.out_dir.join("manifest.jsonl"), &manifest_to_string(&entries))
}

fn split(a: SplitArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let records: Vec<_> = entries.iter().map(ManifestEntry::record).collect();
    let s = split_model_wise(&records, a.k, a.lesion, a.normal, a.seed)?;
    let json = serde_json::to_string_pretty(&s).expect("split serialization cannot fail") + "\n";
    match a.out {
        Some(p) => write_text(&p, &json),
        None => emit(&json),
    }
}

fn load_pair(ct: &Path, pet: &Path, normalize: bool) -> Result<crate::MultiChannelVolume> {
    let (ct, pet) = (load_volume(ct)?, load_volume(pet)?);
    if normalize {
        stack_channels(normalize_zscore(&ct)?, normalize_zscore(&pet)?)
    } else {
        stack_channels(ct, pet)
    }
}

fn extract_patches(a: ExtractArgs) -> Result<()> {
    let mc = load_pair(&a.input, &a.input_pet, !a.no_normalize)?;
    let mask = a.mask.as_deref().map(load_volume).transpose()?;
    if let Some(m) = &mask {
        m.require_kind(VolumeKind::Mask, "extract-patches --mask")?;
        if m.shape() != mc.shape() {
            return Err(Error::Dimension("mask and image shapes differ".into()));
        }
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let grid = compute_grid(mc.shape(), a.patch, a.overlap)?;
    let mut lines = String::new();
    let write = |v: &Volume3D, origin, kind, name: String| -> Result<()> {
        let data = extract_volume_patch(v, origin, a.patch)?;
        save_volume(&Volume3D::new(a.patch, v.spacing(), data, kind)?, a.out_dir.join(name))
    };
    for (i, &origin) in grid.origins().iter().enumerate() {
        write(mc.channel(0), origin, VolumeKind::Image, format!("patch{i:05}_ct.fpvol"))?;
        write(mc.channel(1), origin, VolumeKind::Image, format!("patch{i:05}_pet.fpvol"))?;
        if let Some(m) = &mask {
            write(m, origin, VolumeKind::Mask, format!("patch{i:05}_mask.fpvol"))?;
        }
        lines += &serde_json::json!({ "patch_id": i, "origin": origin }).to_string();
        lines.push('\n');
    }
    eprintln!("extract-patches: {} patches", grid.len());
    emit(&lines)
}

fn load_cases(manifest: &Path, entries: &[&ManifestEntry]) -> Result<Vec<CaseVolumes>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| {
            CaseVolumes::from_raw(
                e.case_id.clone(),
                &load_volume(base.join(&e.ct_path))?,
                &load_volume(base.join(&e.pet_path))?,
                load_volume(base.join(&e.mask_path))?,
            )
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let entries = read_manifest(&a.manifest)?;
    let (train_entries, val_entries): (Vec<&ManifestEntry>, Vec<&ManifestEntry>) = match &a.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let s: ModelWiseSplit =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad split file: {e}")))?;
            let val = s
                .val_sets
                .get(a.val_set)
                .ok_or_else(|| Error::Data(format!("split has no validation set {}", a.val_set)))?;
            let find = |id: &String| {
                entries
                    .iter()
                    .find(|e| &e.case_id == id)
                    .ok_or_else(|| Error::Data(format!("split names unknown case {id}")))
            };
            (
                s.train_pool.iter().map(find).collect::<Result<_>>()?,
                val.iter().map(find).collect::<Result<_>>()?,
            )
        }
        None => {
            if a.val_count == 0 || a.val_count >= entries.len() {
                return Err(Error::Data(format!(
                    "cannot hold out {} of {} cases for validation",
                    a.val_count,
                    entries.len()
                )));
            }
            let cut = entries.len() - a.val_count;
            (entries[..cut].iter().collect(), entries[cut..].iter().collect())
        }
    };
    let train_cases = load_cases(&a.manifest, &train_entries)?;
    let val_cases = load_cases(&a.manifest, &val_entries)?;
    let store = PatchStore::extract(&train_cases, config.patch_size, config.overlap)?;
    eprintln!(
        "train: {} training patches from {} cases, {} validation cases",
        store.len(),
        train_cases.len(),
        val_cases.len()
    );
    let out = fit(&config, &store, &val_cases)?;
    for s in &out.stats {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val dice {:6.2}%  lr {:.3e}  plan {}  hard {}  excluded {}",
            s.epoch, s.mean_train_loss, s.val_dice_pct, s.lr_used, s.plan_len, s.hard_count, s.excluded_count
        );
    }
    let ck = ModelCheckpoint {
        model: TOY_MODEL_NAME.into(),
        params: out.model,
        patch_size: config.patch_size,
        overlap: config.overlap,
    };
    write_text(&a.out, &ck.to_json())?;
    if let Some(p) = &a.fp_checkpoint {
        write_text(p, &FpCheckpoint::new(&out.registry, None).to_json())?;
    }
    let jsonl = stats_to_jsonl(&out.stats);
    match &a.stats {
        Some(p) => write_text(p, &jsonl),
        None => emit(&jsonl),
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.model).map_err(|e| Error::io(&a.model, e))?;
    let ck = ModelCheckpoint::from_json(&text)?;
    let mc = load_pair(&a.input, &a.input_pet, true)?;
    let patch = a.patch.unwrap_or(ck.patch_size);
    let wmap = gaussian_weight_map(patch, a.sigma_scale)?;
    let prob = sliding_window_infer(&mc, &ck.params, a.overlap, &wmap)?;
    save_volume(&prob, &a.out)
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let mut members = Vec::new();
    let mut vols = Vec::new();
    for m in &a.members {
        let (path, w) = m
            .rsplit_once(':')
            .ok_or_else(|| Error::Usage(format!("--member {m:?} must be PATH:WEIGHT")))?;
        let w: f64 = w
            .parse()
            .map_err(|_| Error::Usage(format!("--member {m:?}: weight is not a number")))?;
        vols.push(load_volume(path)?);
        members.push((path.to_string(), w));
    }
    let spec = EnsembleSpec::new(members)?;
    save_volume(&ensemble_average(&vols, &spec)?, &a.out)
}

fn to_mask(v: Volume3D, t: f64) -> Result<Volume3D> {
    match v.kind() {
        VolumeKind::Mask => Ok(v),
        VolumeKind::Probability => threshold_prob(&v, t),
        VolumeKind::Image => Err(Error::Kind("expected a probability or mask volume, got an image".into())),
    }
}

fn postprocess(a: PostprocessArgs) -> Result<()> {
    let mut mask = to_mask(load_volume(&a.input)?, a.threshold)?;
    if a.open_radius > 0 {
        let before = mask.count_nonzero();
        mask = postprocess_open(&mask, a.open_radius)?;
        eprintln!("postprocess: opening removed {} voxels", before - mask.count_nonzero());
    }
    save_volume(&mask, &a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.preds.len() != a.gts.len() {
        return Err(Error::Usage(format!("{} --pred but {} --gt", a.preds.len(), a.gts.len())));
    }
    if !a.case_ids.is_empty() && a.case_ids.len() != a.gts.len() {
        return Err(Error::Usage("--case-id must be given once per case or not at all".into()));
    }
    let connectivity = Connectivity::from_count(a.connectivity)?;
    let mut reports = Vec::new();
    for (i, (pp, gp)) in a.preds.iter().zip(&a.gts).enumerate() {
        let pred = to_mask(load_volume(pp)?, a.threshold)?;
        let gt = load_volume(gp)?;
        let id = match a.case_ids.get(i) {
            Some(id) => id.clone(),
            None => gp
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("case{i}")),
        };
        reports.push(CaseReport::new(id, evaluate_case(&pred, &gt, connectivity)?));
    }
    let mut text = String::new();
    for r in &reports {
        text += &serde_json::to_string(r).expect("report serialization cannot fail");
        text.push('\n');
    }
    text += &serde_json::to_string(&summarize(&reports)?).expect("summary serialization cannot fail");
    text.push('\n');
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    emit(&text)
}
