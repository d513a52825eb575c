use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use skedit_core::bundle::{ModelBundle, ModelVersions, LDM_FILE, REFINER_FILE, VAE_FILE};
use skedit_core::data::{
    generate_phantom, load_dataset, random_phantom_spec, read_mask_png, read_slice_png, save_record, split_dataset,
    write_mask_png, write_slice_png, VolumeRecord,
};
use skedit_core::edit::EditResult;
use skedit_core::eval::{condition_sketch, evaluate_suite, threshold_segment, ConditionTag, EditOutcome};
use skedit_core::ldm::{train_ldm, SamplerConfig};
use skedit_core::metrics::{nrmse, psnr, ssim};
use skedit_core::pipeline::{latent_scale, prepare_ldm_examples, AnnotatedSlice};
use skedit_core::refiner::{train_refiner, Refiner};
use skedit_core::sketch::synthesize_training_pair;
use skedit_core::vae::{train_vae, Vae};
use skedit_core::{png_io, Error as CoreError, Image};

use crate::manifest::{hash_all_outputs, hash_config, hash_file, hash_outputs, hash_tree, Manifest, StageRecord};
use crate::{
    CliError, Command, Common, EditArgs, EvalArgs, RunConfig, ServeArgs, SynthDataArgs, SynthSketchesArgs,
    TrainLdmArgs, TrainRefinerArgs, TrainVaeArgs,
};

pub const SKETCH_INDEX: &str = "index.json";
pub const REFINER_HISTORY: &str = "refiner_history.json";
pub const VAE_HISTORY: &str = "vae_history.json";
pub const LDM_HISTORY: &str = "ldm_history.json";
pub const EDIT_RESULT: &str = "result.json";

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::SynthSketches(a) => synth_sketches(a),
        Command::TrainRefiner(a) => train_refiner_cmd(a),
        Command::TrainVae(a) => train_vae_cmd(a),
        Command::TrainLdm(a) => train_ldm_cmd(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    cfg.resolve_device()?;
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set it in the config file)")))
}

fn existing_dir(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn stage_record<C: Serialize>(
    seed: u64,
    config: &C,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> Result<StageRecord, CliError> {
    let (config_sha256, config) = hash_config(config)?;
    Ok(StageRecord {
        seed,
        config_sha256,
        config,
        inputs,
        outputs,
    })
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Train or test split of the dataset at `root`, always partitioned with the
/// configured split seed.
fn split(root: &Path, cfg: &RunConfig) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>), CliError> {
    existing_dir(root, "data root")?;
    Ok(split_dataset(load_dataset(root)?, cfg.split_seed)?)
}

fn annotated(records: &[VolumeRecord]) -> Vec<(String, AnnotatedSlice<f32>)> {
    let mut out = Vec::new();
    for r in records {
        for (k, img) in r.slices.iter().enumerate() {
            if let Some(mask) = r.mask(k).filter(|m| m.count() > 0) {
                out.push((
                    format!("{}/{k}", r.id),
                    AnnotatedSlice {
                        image: img.clone(),
                        mask: mask.clone(),
                        spacing: r.spacing.0,
                    },
                ));
            }
        }
    }
    out
}

fn synth_data(a: SynthDataArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let out = pick(a.out, &cfg.output_dir, "out")?;
    cfg.synth.n = a.n.unwrap_or(cfg.synth.n);
    cfg.synth.size = a.size.unwrap_or(cfg.synth.size);
    if cfg.synth.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    for i in 0..cfg.synth.n {
        let spec = random_phantom_spec(format!("phantom_{i:04}"), cfg.synth.size, rng.random());
        save_record(&out, &generate_phantom(&spec)?)?;
    }
    tracing::info!("wrote {} phantom records to {}", cfg.synth.n, out.display());
    let rec = stage_record(cfg.seed, &cfg.synth, BTreeMap::new(), hash_all_outputs(&out)?)?;
    Manifest::record(&out, "synth-data", rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchEntry {
    pub sketch: String,
    pub edge: String,
    pub record: String,
    pub slice: usize,
}

fn synth_sketches(a: SynthSketchesArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let root = pick(a.data_root, &cfg.data_root, "data-root")?;
    if let Some(s) = a.sigma0 {
        cfg.sketches.deformation.sigma0 = s;
    }
    cfg.sketches.per_slice = a.per_slice.unwrap_or(cfg.sketches.per_slice);
    cfg.sketches.deformation.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (train, _) = split(&root, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e7c);
    let mut index = Vec::new();
    let mut degenerate = 0;
    for (id, s) in annotated(&train) {
        for _ in 0..cfg.sketches.per_slice {
            match synthesize_training_pair(&s.mask, &cfg.sketches.deformation, &mut rng) {
                Ok((sketch, edges)) => {
                    let n = index.len();
                    let e = SketchEntry {
                        sketch: format!("sketch_{n:04}.png"),
                        edge: format!("edge_{n:04}.png"),
                        record: id.rsplit_once('/').map_or(id.clone(), |(r, _)| r.to_string()),
                        slice: id.rsplit_once('/').and_then(|(_, k)| k.parse().ok()).unwrap_or(0),
                    };
                    write_mask_png(&a.out.join(&e.sketch), &sketch)?;
                    write_mask_png(&a.out.join(&e.edge), edges.pixels())?;
                    index.push(e);
                }
                Err(CoreError::DegenerateSketch { .. }) => degenerate += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    if index.is_empty() {
        return Err(CliError::Runtime("no sketches could be drawn from the training masks".into()));
    }
    write_json(&a.out.join(SKETCH_INDEX), &index)?;
    tracing::info!("wrote {} sketch pairs ({degenerate} degenerate draws skipped)", index.len());
    let inputs = BTreeMap::from([("data_root".to_string(), hash_tree(&root)?)]);
    let rec = stage_record(cfg.seed, &cfg.sketches, inputs, hash_all_outputs(&a.out)?)?;
    Manifest::record(&a.out, "synth-sketches", rec)
}

pub fn load_sketch_pairs(dir: &Path) -> Result<Vec<(Image, Image)>, CliError> {
    let p = dir.join(SKETCH_INDEX);
    let index: Vec<SketchEntry> = serde_json::from_slice(
        &fs::read(&p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
    )
    .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    index
        .iter()
        .map(|e| {
            Ok((
                read_mask_png(&dir.join(&e.sketch))?.to_scalar(),
                read_mask_png(&dir.join(&e.edge))?.to_scalar(),
            ))
        })
        .collect()
}

fn checkpoint_due(every: usize, step: usize) -> bool {
    every > 0 && step > 0 && step % every == 0
}

#[derive(Serialize)]
struct VaeHistory<'a> {
    steps: usize,
    last: Option<&'a skedit_core::vae::VaeLossParts>,
    heldout_psnr: f64,
    heldout_count: usize,
}

fn train_refiner_cmd(a: TrainRefinerArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let out = pick(a.out, &cfg.output_dir, "out")?;
    cfg.refiner.steps = a.steps.unwrap_or(cfg.refiner.steps);
    existing_dir(&a.sketches, "sketch directory")?;
    let pairs = load_sketch_pairs(&a.sketches)?;
    fs::create_dir_all(&out)?;
    let path = out.join(REFINER_FILE);
    let t = Instant::now();
    let (model, history) = train_refiner(&pairs, cfg.refiner.clone(), |step, loss, m: &Refiner<f32>| {
        if step % 50 == 0 {
            tracing::info!("refiner step {step} loss {loss:.4}");
        }
        if checkpoint_due(cfg.checkpoint_every, step) {
            if let Err(e) = m.save(&path) {
                tracing::warn!("checkpoint failed: {e}");
            }
        }
    })?;
    model.save(&path)?;
    write_json(&out.join(REFINER_HISTORY), &history)?;
    tracing::info!(
        "refiner trained in {:.0}s; cc loss {:.4} -> {:.4} ({:.1}% better)",
        t.elapsed().as_secs_f64(),
        history.eval_cc_initial,
        history.eval_cc_final,
        100.0 * history.cc_improvement()
    );
    let inputs = BTreeMap::from([("sketches".to_string(), hash_tree(&a.sketches)?)]);
    let rec = stage_record(cfg.seed, &cfg.refiner, inputs, hash_outputs(&out, &[REFINER_FILE, REFINER_HISTORY])?)?;
    Manifest::record(&out, "train-refiner", rec)
}

fn train_vae_cmd(a: TrainVaeArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let root = pick(a.data_root, &cfg.data_root, "data-root")?;
    let out = pick(a.out, &cfg.output_dir, "out")?;
    cfg.vae.steps = a.steps.unwrap_or(cfg.vae.steps);
    let (train, test) = split(&root, &cfg)?;
    let images: Vec<Image> = train.iter().flat_map(|r| r.slices.iter().cloned()).collect();
    fs::create_dir_all(&out)?;
    let path = out.join(VAE_FILE);
    let t = Instant::now();
    let trained = train_vae(&images, cfg.vae.clone(), |step, parts, v: &Vae<f32>| {
        if step % 50 == 0 {
            tracing::info!("vae step {step} recon {:.4} total {:.4}", parts.recon, parts.total);
        }
        if checkpoint_due(cfg.checkpoint_every, step) {
            if let Err(e) = v.save(&path, &serde_json::json!({})) {
                tracing::warn!("checkpoint failed: {e}");
            }
        }
    })?;
    trained.vae.save(&path, &serde_json::json!({}))?;
    let held: Vec<&Image> = test.iter().flat_map(|r| r.slices.iter()).collect();
    let mut total = 0.0;
    for x in &held {
        total += psnr(x, &trained.vae.reconstruct(x)?)? as f64;
    }
    let heldout_psnr = total / held.len().max(1) as f64;
    write_json(
        &out.join(VAE_HISTORY),
        &VaeHistory {
            steps: trained.history.len(),
            last: trained.history.last(),
            heldout_psnr,
            heldout_count: held.len(),
        },
    )?;
    tracing::info!("vae trained in {:.0}s; held-out PSNR {heldout_psnr:.2} dB", t.elapsed().as_secs_f64());
    let inputs = BTreeMap::from([("data_root".to_string(), hash_tree(&root)?)]);
    let rec = stage_record(cfg.seed, &cfg.vae, inputs, hash_outputs(&out, &[VAE_FILE, VAE_HISTORY])?)?;
    Manifest::record(&out, "train-vae", rec)
}

fn train_ldm_cmd(a: TrainLdmArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let root = pick(a.data_root, &cfg.data_root, "data-root")?;
    let models = pick(a.models, &cfg.output_dir, "models")?;
    cfg.ldm.steps = a.steps.unwrap_or(cfg.ldm.steps);
    let refiner = Refiner::<f32>::load(&models.join(REFINER_FILE))?;
    let (vae, _) = Vae::<f32>::load(&models.join(VAE_FILE))?;
    // the latent layout is the VAE's
    cfg.ldm.model.latent_channels = vae.config.latent_channels;
    cfg.ldm.model.downsample_factor = vae.config.downsample_factor;
    let (train, _) = split(&root, &cfg)?;
    let slices: Vec<AnnotatedSlice<f32>> = annotated(&train).into_iter().map(|(_, s)| s).collect();
    if slices.is_empty() {
        return Err(CliError::Runtime("the training split has no annotated slices".into()));
    }
    let images: Vec<Image> = slices.iter().map(|s| s.image.clone()).collect();
    let t = Instant::now();
    cfg.ldm.latent_scale = latent_scale(&vae, &images)?;
    let examples = prepare_ldm_examples(&slices, &vae, &refiner, cfg.ldm.latent_scale, &cfg.conditions)?;
    tracing::info!(
        "{} conditioned examples, latent scale {:.4} ({:.0}s)",
        examples.len(),
        cfg.ldm.latent_scale,
        t.elapsed().as_secs_f64()
    );
    let path = models.join(LDM_FILE);
    let mut avg = 0.0;
    let (ldm, history) = train_ldm(&examples, cfg.ldm.clone(), |step, loss, m| {
        avg = if step == 0 { loss } else { 0.98 * avg + 0.02 * loss };
        if step % 50 == 0 {
            tracing::info!("ldm step {step} loss {loss:.4} avg {avg:.4}");
        }
        if checkpoint_due(cfg.checkpoint_every, step) {
            if let Err(e) = m.save(&path) {
                tracing::warn!("checkpoint failed: {e}");
            }
        }
    })?;
    ldm.save(&path)?;
    write_json(&models.join(LDM_HISTORY), &serde_json::json!({ "loss": history }))?;
    tracing::info!("ldm trained in {:.0}s", t.elapsed().as_secs_f64());
    let inputs = BTreeMap::from([
        ("data_root".to_string(), hash_tree(&root)?),
        (REFINER_FILE.to_string(), hash_file(&models.join(REFINER_FILE))?),
        (VAE_FILE.to_string(), hash_file(&models.join(VAE_FILE))?),
    ]);
    let stage_cfg = serde_json::json!({ "ldm": cfg.ldm, "conditions": cfg.conditions });
    let rec = stage_record(cfg.seed, &stage_cfg, inputs, hash_outputs(&models, &[LDM_FILE, LDM_HISTORY])?)?;
    Manifest::record(&models, "train-ldm", rec)
}

fn load_bundle(models: &Path) -> Result<ModelBundle<f32>, CliError> {
    let missing = ModelVersions::scan(models).missing();
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} lacks checkpoints: {}",
            models.display(),
            missing.join(", ")
        )));
    }
    Ok(ModelBundle::load(models)?)
}

#[derive(Serialize)]
struct EditSummary<'a> {
    seed: u64,
    spacing: [f64; 3],
    nrmse: f64,
    ssim: f64,
    psnr: f64,
    interior_pixels: usize,
    difference_scale: f64,
    model_versions: &'a ModelVersions,
}

pub const EDIT_OUTPUTS: [&str; 6] = [
    "edited.png",
    "interior.png",
    "reference.png",
    "difference.png",
    "soft_sketch.png",
    EDIT_RESULT,
];

fn write_edit(out: &Path, r: &EditResult<f32>, source: &Image, spacing: [f64; 3], versions: &ModelVersions) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    write_slice_png(&out.join("edited.png"), &r.edited)?;
    write_mask_png(&out.join("interior.png"), r.interior.pixels())?;
    write_slice_png(&out.join("reference.png"), &r.reference)?;
    let max = r.difference.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let scale = if max > 0.0 { max } else { 1.0 };
    fs::write(out.join("difference.png"), png_io::encode_gray8(&r.difference.map(|v| v / scale))?)?;
    write_slice_png(&out.join("soft_sketch.png"), &r.soft_sketch.map(|v| v.clamp(0.0, 1.0)))?;
    write_json(
        &out.join(EDIT_RESULT),
        &EditSummary {
            seed: r.seed,
            spacing,
            nrmse: nrmse(source, &r.edited)? as f64,
            ssim: ssim(source, &r.edited)? as f64,
            psnr: psnr(source, &r.edited)? as f64,
            interior_pixels: r.interior.pixels().count(),
            difference_scale: scale as f64,
            model_versions: versions,
        },
    )
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let models = pick(a.models, &cfg.output_dir, "models")?;
    if let Some(steps) = a.steps {
        cfg.edit.sampler = SamplerConfig { steps, ..cfg.edit.sampler };
    }
    if a.no_refine {
        cfg.edit.refine = false;
    }
    let read = |p: &Path, what: &str| {
        read_slice_png(p).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", p.display())))
    };
    let image = read(&a.image, "image")?;
    let sketch = read(&a.sketch, "sketch")?;
    let bundle = load_bundle(&models)?;
    let t = Instant::now();
    let r = bundle.edit(&image, &sketch, a.spacing, &cfg.edit)?;
    tracing::info!("edit done in {:.1}s", t.elapsed().as_secs_f64());
    write_edit(&a.out, &r, &image, a.spacing, &bundle.versions)?;
    let inputs = BTreeMap::from([
        ("image".to_string(), hash_file(&a.image)?),
        ("sketch".to_string(), hash_file(&a.sketch)?),
        (REFINER_FILE.to_string(), hash_file(&models.join(REFINER_FILE))?),
        (VAE_FILE.to_string(), hash_file(&models.join(VAE_FILE))?),
        (LDM_FILE.to_string(), hash_file(&models.join(LDM_FILE))?),
    ]);
    let stage_cfg = serde_json::json!({ "edit": cfg.edit, "spacing": a.spacing });
    let rec = stage_record(cfg.seed, &stage_cfg, inputs, hash_outputs(&a.out, &EDIT_OUTPUTS)?)?;
    Manifest::record(&a.out, "edit", rec)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let models = pick(a.models, &cfg.output_dir, "models")?;
    let root = pick(a.data_root, &cfg.data_root, "data-root")?;
    if let Some(l) = a.limit {
        cfg.eval.limit = Some(l);
    }
    if let Some(tags) = &a.conditions {
        cfg.eval.conditions = tags
            .iter()
            .map(|t| t.parse::<ConditionTag>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    let bundle = load_bundle(&models)?;
    let (_, test) = split(&root, &cfg)?;
    let mut slices = annotated(&test);
    if let Some(l) = cfg.eval.limit {
        slices.truncate(l);
    }
    if slices.is_empty() {
        return Err(CliError::Runtime("the test split has no annotated slices".into()));
    }
    let dataset_id = root
        .file_name()
        .map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned());
    let t = Instant::now();
    let ids: Vec<String> = slices.iter().map(|(id, _)| id.clone()).collect();
    let report = evaluate_suite(
        &dataset_id,
        &slices,
        &cfg.eval.conditions,
        |id, s, tag| {
            let k = ids.iter().position(|i| i == id).unwrap_or(0) as u64;
            let raw = condition_sketch(&s.mask, tag, &cfg.sketches.deformation, cfg.seed ^ (k << 8))?;
            let opts = skedit_core::edit::EditOptions {
                refine: tag.uses_refiner(),
                ..cfg.edit
            };
            match bundle.edit(&s.image, &raw.to_scalar(), s.spacing, &opts) {
                Ok(r) => Ok(Ok(EditOutcome {
                    edited: r.edited,
                    interior: r.interior.0,
                })),
                Err(CoreError::OpenContour) => Ok(Err("open contour".into())),
                Err(e) => Err(e),
            }
        },
        threshold_segment,
    )?;
    report.write(&a.out)?;
    for agg in &report.aggregates {
        tracing::info!(
            "{}: n={} nrmse {:.4} ssim {:.4} psnr {:.2} dice {:.3} dice(interior) {:.3}",
            agg.condition.as_str(),
            agg.count,
            agg.nrmse,
            agg.ssim,
            agg.psnr,
            agg.dice,
            agg.dice_interior
        );
    }
    tracing::info!("evaluated {} slices in {:.0}s ({} skipped)", slices.len(), t.elapsed().as_secs_f64(), report.skipped.len());
    let inputs = BTreeMap::from([
        ("data_root".to_string(), hash_tree(&root)?),
        (REFINER_FILE.to_string(), hash_file(&models.join(REFINER_FILE))?),
        (VAE_FILE.to_string(), hash_file(&models.join(VAE_FILE))?),
        (LDM_FILE.to_string(), hash_file(&models.join(LDM_FILE))?),
    ]);
    let stage_cfg = serde_json::json!({ "eval": cfg.eval, "edit": cfg.edit, "sketches": cfg.sketches, "split_seed": cfg.split_seed });
    let rec = stage_record(cfg.seed, &stage_cfg, inputs, hash_outputs(&a.out, &["report.csv", "report.json"])?)?;
    Manifest::record(&a.out, "eval", rec)
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let models = pick(a.models, &cfg.output_dir, "models")?;
    let data_root = a.data_root.or(cfg.data_root.clone());
    let mut state = skedit_service::AppState::load(&models, data_root, cfg.edit);
    state.save_dir = a.save_dir;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(skedit_service::serve(state, a.port))?;
    Ok(())
}
