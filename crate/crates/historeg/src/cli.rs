//! Command-line surface. Each subcommand consumes the previous stage's
//! output directory and writes its own, so a full run is
//! `fixtures -> preprocess -> synth -> train -> register -> evaluate ->
//! report` (synth and train are skipped for the iterative backend). Every
//! stage directory gets a copy of the effective run configuration, and all
//! artifacts except the explicitly named timing files are byte-stable for a
//! fixed seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fixtures::generate_fixtures;
use crate::geometry::{deformed_grid_image, StageKind, Transform2D};
use crate::image::{Image2D, Mask2D};
use crate::manifest::{DatasetManifest, SliceEntry};
use crate::metrics::{
    aggregate_patients, dice, hausdorff_mm, landmark_error_mm, summarize, write_metrics_csv,
    write_summary_json, SliceScores,
};
use crate::net::MatchNet;
use crate::pipeline::{map_mm, register_pair, register_pair_baseline, RegistrationResult};
use crate::preprocess::{
    apply_orientation, apply_orientation_mask, preprocess_case, CaseGeometry, LandmarkPair,
    PreprocessedCase,
};
use crate::render;
use crate::synth::{make_training_set, write_training_set, load_training_set};
use crate::train::{train_stage, write_loss_csv, write_train_report, TrainReport};

#[derive(Parser)]
#[command(name = "historeg", version, about = "Histology-to-MRI slice registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset with a manifest.
    Fixtures(FixturesArgs),
    /// Orient, crop, and normalize manifest slices into canvas pairs.
    Preprocess(ManifestArgs),
    /// Draw synthetic training tuples from the preprocessed canvases.
    Synth(CommonArgs),
    /// Fit the affine and spline stage networks on the synthetic tuples.
    Train(CommonArgs),
    /// Register every manifest slice with the selected backend.
    Register(RegisterArgs),
    /// Score registrations against reference masks, labels, and landmarks.
    Evaluate(ManifestArgs),
    /// Collect metrics, summaries, and figures into one report directory.
    Report(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root, overriding the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for synthesis and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-slice stages; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct ManifestArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct RegisterArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Registration backend.
    #[arg(long, value_enum, default_value_t = Backend::Learned)]
    backend: Backend,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct FixturesArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    /// Number of phantom patients.
    #[arg(long, default_value_t = 2)]
    patients: usize,
    /// Slices per patient.
    #[arg(long, default_value_t = 2)]
    slices: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Two forward passes through the trained stage networks.
    Learned,
    /// Iterative mask alignment plus mutual-information refinement.
    Baseline,
}

impl Backend {
    fn name(self) -> &'static str {
        match self {
            Backend::Learned => "learned",
            Backend::Baseline => "baseline",
        }
    }
}

/// Entry point behind `main`: parses, dispatches, and maps errors to the
/// exit-code contract (0 ok, 1 usage, 2 data, 3 numerical).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.cmd {
        Cmd::Fixtures(args) => cmd_fixtures(args),
        Cmd::Preprocess(args) => cmd_preprocess(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Register(args) => cmd_register(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(dir.join("run_config.toml"))?;
    Ok(dir)
}

fn missing_stage(path: &Path, hint: &str) -> Error {
    Error::Config(format!("{} not found; {hint}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Serialize, Deserialize)]
struct PreprocessIndex {
    canvas: usize,
    slices: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PreprocessReport {
    ok: Vec<String>,
    failed: BTreeMap<String, String>,
}

/// Per-slice bookkeeping that cannot be recovered from the canvases alone:
/// the native-resolution frame geometry and the oriented landmark pairs.
#[derive(Serialize, Deserialize)]
struct CaseRecord {
    geom: CaseGeometry,
    landmarks: Vec<LandmarkPair>,
}

#[derive(Serialize, Deserialize)]
struct RegisterIndex {
    backend: String,
    slices: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RegisterRecord {
    n_forward_passes: usize,
    iter_count: usize,
    min_jacobian_det: f64,
}

/// Wall-clock seconds per slice. Kept in its own file because timing is the
/// one thing a rerun legitimately changes.
#[derive(Serialize, Deserialize)]
struct SliceTiming {
    affine_s: f64,
    deformable_s: f64,
    wall_s: f64,
}

fn cmd_fixtures(args: FixturesArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest = generate_fixtures(&args.out, args.patients, args.slices, args.seed)?;
    println!(
        "wrote {} phantom slices and a manifest into {}",
        manifest.slices.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_preprocess(args: ManifestArgs) -> Result<i32> {
    let cfg = effective_config(&args.common)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let dir = stage_dir(&cfg, "preprocessed")?;

    let results: Vec<(String, Result<()>)> = in_pool(args.common.workers, || {
        manifest
            .slices
            .par_iter()
            .map(|entry| (entry.key(), preprocess_one(entry, &cfg, &dir)))
            .collect()
    })?;

    let mut report = PreprocessReport { ok: Vec::new(), failed: BTreeMap::new() };
    for (key, res) in results {
        match res {
            Ok(()) => report.ok.push(key),
            Err(e) => {
                eprintln!("preprocess {key}: {e}");
                report.failed.insert(key, e.to_string());
            }
        }
    }
    let index = PreprocessIndex { canvas: cfg.preprocess.canvas, slices: report.ok.clone() };
    write_json(&dir.join("index.json"), &index)?;
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "preprocessed {} slices into {} ({} failed)",
        report.ok.len(),
        dir.display(),
        report.failed.len()
    );
    Ok(if report.failed.is_empty() { 0 } else { 2 })
}

fn preprocess_one(entry: &SliceEntry, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let case = entry.load_case()?;
    let prep = preprocess_case(&case, &cfg.preprocess)?;
    let slice_dir = dir.join(entry.key());
    std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
    prep.moving.save_png16(slice_dir.join("moving.png"))?;
    prep.fixed.save_png16(slice_dir.join("fixed.png"))?;
    prep.moving_mask_soft.save_png16(slice_dir.join("moving_mask.png"))?;
    prep.fixed_mask_soft.save_png16(slice_dir.join("fixed_mask.png"))?;
    write_json(
        &slice_dir.join("case.json"),
        &CaseRecord { geom: prep.geom, landmarks: prep.landmarks },
    )
}

fn load_prep_index(out: &Path) -> Result<PreprocessIndex> {
    let path = out.join("preprocessed").join("index.json");
    if !path.is_file() {
        return Err(missing_stage(&path, "run the preprocess stage first"));
    }
    read_json(&path)
}

fn load_prep_case(out: &Path, key: &str) -> Result<(PreprocessedCase, CaseRecord)> {
    let slice_dir = out.join("preprocessed").join(key);
    let record: CaseRecord = read_json(&slice_dir.join("case.json"))?;
    let load = |name: &str| Image2D::load_gray(slice_dir.join(name));
    let prep = PreprocessedCase {
        moving: load("moving.png")?,
        fixed: load("fixed.png")?,
        moving_mask_soft: load("moving_mask.png")?,
        fixed_mask_soft: load("fixed_mask.png")?,
        landmarks: record.landmarks.clone(),
        geom: record.geom.clone(),
    };
    Ok((prep, record))
}

fn cmd_synth(args: CommonArgs) -> Result<i32> {
    let cfg = effective_config(&args)?;
    let index = load_prep_index(&cfg.out_dir)?;
    // Each stage trains on the canvases it will see at inference: the affine
    // network reads the soft mask pair, the spline network the intensities.
    let mut mask_sources = Vec::with_capacity(2 * index.slices.len());
    let mut intensity_sources = Vec::with_capacity(2 * index.slices.len());
    for key in &index.slices {
        let (prep, _) = load_prep_case(&cfg.out_dir, key)?;
        mask_sources.push(prep.moving_mask_soft);
        mask_sources.push(prep.fixed_mask_soft);
        intensity_sources.push(prep.moving);
        intensity_sources.push(prep.fixed);
    }
    if intensity_sources.is_empty() {
        return Err(Error::Config("preprocessed store holds no slices".into()));
    }
    let dir = stage_dir(&cfg, "synth")?;
    for (kind, name, n, seed, sources) in [
        (
            StageKind::Affine,
            "affine",
            cfg.synth.n_affine_per_image,
            cfg.seed,
            &mask_sources,
        ),
        (
            StageKind::Tps,
            "tps",
            cfg.synth.n_tps_per_image,
            cfg.seed.wrapping_add(1),
            &intensity_sources,
        ),
    ] {
        let set = make_training_set(sources, kind, n, &cfg.synth.bounds, cfg.alpha, seed)?;
        write_training_set(&dir.join(name), &set, kind, cfg.alpha, seed)?;
        println!("wrote {} {name} tuples", set.len());
    }
    Ok(0)
}

fn cmd_train(args: CommonArgs) -> Result<i32> {
    let cfg = effective_config(&args)?;
    let dir = stage_dir(&cfg, "train")?;
    for (kind, name) in [(StageKind::Affine, "affine"), (StageKind::Tps, "tps")] {
        let tuple_dir = cfg.out_dir.join("synth").join(name);
        if !tuple_dir.is_dir() {
            return Err(missing_stage(&tuple_dir, "run the synth stage first"));
        }
        let (tuples, stored_kind) = load_training_set(&tuple_dir)?;
        if stored_kind != kind {
            return Err(Error::Config(format!(
                "tuple store {} holds {stored_kind:?} samples, expected {kind:?}",
                tuple_dir.display()
            )));
        }
        let (net, report) = train_stage(&tuples, kind, &cfg.train)?;
        let stage = dir.join(name);
        std::fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
        net.save_checkpoint(&stage.join("checkpoint.json"))?;
        write_train_report(&stage.join("report.json"), &report)?;
        write_loss_csv(&stage.join("loss.csv"), &report)?;
        render::loss_curve_png(
            stage.join("loss.png"),
            &format!("{name} stage loss"),
            &loss_series(&report),
        )?;
        let best = report
            .best_val_loss
            .map(|v| format!("best val loss {v:.6}"))
            .unwrap_or_else(|| "no validation split".into());
        println!(
            "trained {name} stage on {} tuples, {best}, {:.1} s",
            report.n_train + report.n_val,
            report.wall_time_s
        );
    }
    Ok(0)
}

fn loss_series(report: &TrainReport) -> Vec<(String, Vec<f64>)> {
    let train: Vec<f64> = report.epochs.iter().filter_map(|e| e.train_loss).collect();
    let val: Vec<f64> = report.epochs.iter().filter_map(|e| e.val_loss).collect();
    let mut series = Vec::new();
    if !train.is_empty() {
        series.push(("train".to_string(), train));
    }
    if !val.is_empty() {
        series.push(("val".to_string(), val));
    }
    series
}

fn cmd_register(args: RegisterArgs) -> Result<i32> {
    let cfg = effective_config(&args.common)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let index = load_prep_index(&cfg.out_dir)?;
    let in_store: BTreeSet<&String> = index.slices.iter().collect();

    let nets = match args.backend {
        Backend::Baseline => None,
        Backend::Learned => {
            let load = |name: &str, kind| {
                let path = cfg.out_dir.join("train").join(name).join("checkpoint.json");
                if !path.is_file() {
                    return Err(missing_stage(&path, "run the train stage first"));
                }
                MatchNet::load_checkpoint(&path, kind)
            };
            Some((load("affine", StageKind::Affine)?, load("tps", StageKind::Tps)?))
        }
    };

    let dir = stage_dir(&cfg, "register")?;
    for sub in ["transforms", "results", "warped", "warped_canvas", "labels", "overlays", "grids"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let entries: Vec<&SliceEntry> = manifest
        .slices
        .iter()
        .filter(|e| {
            let keep = in_store.contains(&e.key());
            if !keep {
                eprintln!("register {}: not in preprocessed store, skipping", e.key());
            }
            keep
        })
        .collect();

    let results: Vec<Result<(String, SliceTiming)>> = in_pool(args.common.workers, || {
        entries
            .par_iter()
            .map(|entry| register_one(entry, &cfg, &dir, nets.as_ref()))
            .collect()
    })?;

    let mut timings = BTreeMap::new();
    let mut keys = Vec::new();
    for res in results {
        let (key, timing) = res?;
        eprintln!("register {key}: {:.2} s", timing.wall_s);
        timings.insert(key.clone(), timing);
        keys.push(key);
    }
    write_json(&dir.join("timings.json"), &timings)?;
    write_json(
        &dir.join("index.json"),
        &RegisterIndex { backend: args.backend.name().to_string(), slices: keys.clone() },
    )?;
    println!(
        "registered {} slices with the {} backend into {}",
        keys.len(),
        args.backend.name(),
        dir.display()
    );
    Ok(0)
}

/// Name under which the warped whole-gland mask is stored with the label
/// outputs; a manifest label of the same name takes precedence.
const GLAND: &str = "gland";

fn register_one(
    entry: &SliceEntry,
    cfg: &RunConfig,
    dir: &Path,
    nets: Option<&(MatchNet, MatchNet)>,
) -> Result<(String, SliceTiming)> {
    let key = entry.key();
    let (prep, _) = load_prep_case(&cfg.out_dir, &key)?;
    let case = entry.load_case()?;
    let moving_native = apply_orientation(&case.hist_image, &case.orientation);
    let mut labels_native = BTreeMap::new();
    for (name, mask) in &case.labels {
        labels_native.insert(name.clone(), apply_orientation_mask(mask, &case.orientation));
    }
    labels_native
        .entry(GLAND.to_string())
        .or_insert_with(|| apply_orientation_mask(&case.hist_mask, &case.orientation));

    let result: RegistrationResult = match nets {
        Some((affine_net, tps_net)) => {
            register_pair(&prep, &moving_native, &labels_native, affine_net, tps_net)?
        }
        None => register_pair_baseline(&prep, &moving_native, &labels_native, &cfg.iterative)?,
    };

    let mut transform_json = result.composite.to_json_string()?;
    transform_json.push('\n');
    let tpath = dir.join("transforms").join(format!("{key}.json"));
    std::fs::write(&tpath, transform_json).map_err(|e| Error::io(&tpath, e))?;

    let canvas = prep.geom.canvas;
    let grid = deformed_grid_image(&result.composite, (canvas, canvas), canvas.max(60) / 15);
    write_json(
        &dir.join("results").join(format!("{key}.json")),
        &RegisterRecord {
            n_forward_passes: result.n_forward_passes,
            iter_count: result.iter_count,
            min_jacobian_det: grid.min_jacobian_det,
        },
    )?;

    result.warped_hist.save_png16(dir.join("warped").join(format!("{key}.png")))?;
    result
        .warped_moving_canvas
        .save_png16(dir.join("warped_canvas").join(format!("{key}.png")))?;
    let label_dir = dir.join("labels").join(&key);
    std::fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    for (name, mask) in &result.warped_labels {
        mask.save_png8(label_dir.join(format!("{name}.png")))?;
    }
    render::overlay_png(
        dir.join("overlays").join(format!("{key}.png")),
        &case.mri_slice,
        &result.warped_hist,
        &result.warped_labels,
    )?;
    render::grid_figure_png(dir.join("grids").join(format!("{key}.png")), &grid)?;

    Ok((
        key,
        SliceTiming {
            affine_s: result.affine_time_s,
            deformable_s: result.deformable_time_s,
            wall_s: result.wall_time_s,
        },
    ))
}

fn cmd_evaluate(args: ManifestArgs) -> Result<i32> {
    let cfg = effective_config(&args.common)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let reg_dir = cfg.out_dir.join("register");
    let index_path = reg_dir.join("index.json");
    if !index_path.is_file() {
        return Err(missing_stage(&index_path, "run the register stage first"));
    }
    let reg_index: RegisterIndex = read_json(&index_path)?;
    let by_key: BTreeMap<String, &SliceEntry> =
        manifest.slices.iter().map(|e| (e.key(), e)).collect();

    let rows: Vec<Result<SliceScores>> = in_pool(args.common.workers, || {
        reg_index
            .slices
            .par_iter()
            .map(|key| {
                let entry = by_key.get(key).ok_or_else(|| {
                    Error::Manifest(format!("registered slice {key} is not in the manifest"))
                })?;
                evaluate_one(entry, &cfg, &reg_dir)
            })
            .collect()
    })?;
    let slices: Vec<SliceScores> = rows.into_iter().collect::<Result<_>>()?;

    let dir = stage_dir(&cfg, "evaluate")?;
    let patients = aggregate_patients(&slices);
    let summary = summarize(&reg_index.backend, &slices, &patients);
    write_json(&dir.join("scores.json"), &slices)?;
    write_metrics_csv(dir.join("metrics.csv"), &slices, &patients)?;
    write_summary_json(dir.join("summary.json"), &summary)?;
    let dice_txt = summary
        .dice
        .as_ref()
        .map(|s| format!("dice {:.3} +- {:.3}", s.mean, s.std))
        .unwrap_or_else(|| "no dice values".into());
    println!("evaluated {} slices, {dice_txt}", slices.len());
    Ok(0)
}

fn evaluate_one(entry: &SliceEntry, cfg: &RunConfig, reg_dir: &Path) -> Result<SliceScores> {
    let key = entry.key();
    let spacing = entry.mri_spacing_mm;
    let mri_mask = Mask2D::load(&entry.mri_mask_path)?.with_spacing(spacing);
    let warped_gland = Mask2D::load(reg_dir.join("labels").join(&key).join("gland.png"))?
        .with_spacing(spacing);

    let dice_v = dice(&warped_gland, &mri_mask)?;
    let hd = hausdorff_mm(&warped_gland, &mri_mask)?;

    let urethra_path = reg_dir.join("labels").join(&key).join("urethra.png");
    let urethra_dev = match (urethra_path.is_file(), entry.mri_label_paths.get("urethra")) {
        (true, Some(ref_path)) => {
            let warped = Mask2D::load(&urethra_path)?.with_spacing(spacing);
            let reference = Mask2D::load(ref_path)?.with_spacing(spacing);
            if warped.is_empty() || reference.is_empty() {
                None
            } else {
                let a = warped.centroid_mm()?;
                let b = reference.centroid_mm()?;
                Some((a[0] - b[0]).hypot(a[1] - b[1]))
            }
        }
        _ => None,
    };

    let (_, record) = load_prep_case(&cfg.out_dir, &key)?;
    let landmark_err = if record.landmarks.is_empty() {
        None
    } else {
        let text = std::fs::read_to_string(reg_dir.join("transforms").join(format!("{key}.json")))
            .map_err(|e| Error::io(reg_dir.join("transforms").join(format!("{key}.json")), e))?;
        let composite = Transform2D::from_json_str(&text)?;
        let pairs: Vec<([f64; 2], [f64; 2])> =
            record.landmarks.iter().map(|l| (l.mri_mm, l.hist_mm)).collect();
        Some(landmark_error_mm(&pairs, |p| map_mm(&composite, &record.geom, p))?)
    };

    Ok(SliceScores {
        patient_id: entry.patient_id.clone(),
        slice_id: entry.slice_id.clone(),
        dice: Some(dice_v),
        hausdorff_mm: Some(hd),
        urethra_dev_mm: urethra_dev,
        landmark_err_mm: landmark_err,
        // Timing stays in register/timings.json; embedding it here would make
        // the metrics files differ between identical reruns.
        time_s: None,
    })
}

fn cmd_report(args: CommonArgs) -> Result<i32> {
    let cfg = effective_config(&args)?;
    let eval_dir = cfg.out_dir.join("evaluate");
    let scores_path = eval_dir.join("scores.json");
    if !scores_path.is_file() {
        return Err(missing_stage(&scores_path, "run the evaluate stage first"));
    }
    let slices: Vec<SliceScores> = read_json(&scores_path)?;
    let dir = stage_dir(&cfg, "report")?;

    for name in ["metrics.csv", "summary.json"] {
        std::fs::copy(eval_dir.join(name), dir.join(name))
            .map_err(|e| Error::io(eval_dir.join(name), e))?;
    }

    let dice_vals: Vec<f64> = slices.iter().filter_map(|s| s.dice).collect();
    if !dice_vals.is_empty() {
        render::box_plot_png(
            dir.join("dice_box.png"),
            "dice by slice",
            &[("dice".to_string(), dice_vals)],
        )?;
    }
    let mut mm_groups = Vec::new();
    let pickers: [(&str, fn(&SliceScores) -> Option<f64>); 3] = [
        ("hausdorff", |s| s.hausdorff_mm),
        ("urethra", |s| s.urethra_dev_mm),
        ("landmark", |s| s.landmark_err_mm),
    ];
    for (name, get) in pickers {
        let vals: Vec<f64> = slices.iter().filter_map(get).collect();
        if !vals.is_empty() {
            mm_groups.push((name.to_string(), vals));
        }
    }
    if !mm_groups.is_empty() {
        render::box_plot_png(dir.join("distance_box.png"), "distances in mm", &mm_groups)?;
    }

    // Loss curves exist only after a training run; the iterative backend has
    // none and that is not an error.
    for name in ["affine", "tps"] {
        let report_path = cfg.out_dir.join("train").join(name).join("report.json");
        if report_path.is_file() {
            let report: TrainReport = read_json(&report_path)?;
            render::loss_curve_png(
                dir.join(format!("loss_{name}.png")),
                &format!("{name} stage loss"),
                &loss_series(&report),
            )?;
        }
    }

    let fig_dir = dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| Error::io(&fig_dir, e))?;
    let reg_index_path = cfg.out_dir.join("register").join("index.json");
    if reg_index_path.is_file() {
        let reg_index: RegisterIndex = read_json(&reg_index_path)?;
        for key in &reg_index.slices {
            for (sub, suffix) in [("overlays", "overlay"), ("grids", "grid")] {
                let src = cfg.out_dir.join("register").join(sub).join(format!("{key}.png"));
                let dst = fig_dir.join(format!("{key}_{suffix}.png"));
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
        }
    }
    println!("report written to {}", dir.display());
    Ok(0)
}
