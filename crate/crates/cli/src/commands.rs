use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use tripatch::compositor::PlacementSpec;
use tripatch::data_io::{
    generate_synthetic, load_boxfile_dir, load_coco, load_patch, save_patch, save_patch_png, Dataset, DatasetFormat,
    SceneRecord,
};
use tripatch::detector::{AdapterError, BlackBoxAdapter, Detector, DetectorOutput, ToyDetector};
use tripatch::evaluation::{
    evaluate, evaluate_against, pseudo_ground_truth, seed_stability, transfer_matrix, EvalReport, PseudoGroundTruth,
};
use tripatch::losses::{LossBreakdown, LossWeights};
use tripatch::optimizer::{prepare_scene, train, train_with, write_checkpoint, TrainConfig};
use tripatch::{Error, Patch, SceneImage};

use crate::config::{DetectorSpec, RunConfig};
use crate::error::CliError;
use crate::plot;
use crate::report::{borrow_text, dataset_hash, Provenance};

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.dataset;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let ds = match d.format {
        DatasetFormat::CocoJson => load_coco(&path(&d.annotations), &path(&d.image_root), d.person_category_id),
        DatasetFormat::BoxfileDir => {
            let images = path(&d.image_dir);
            let boxes = d.boxes_dir.clone().unwrap_or_else(|| images.clone());
            load_boxfile_dir(&images, &boxes)
        }
        DatasetFormat::Synthetic => {
            let toy = ToyDetector::new(cfg.toy.clone())?;
            generate_synthetic(&d.synthetic, &toy)
        }
    }
    .map_err(|e| CliError::config(format!("dataset: {e}")))?;
    if ds.dropped_boxes > 0 {
        log::warn!("dropped {} zero-area or out-of-frame boxes", ds.dropped_boxes);
    }
    Ok(ds)
}

fn toy_for_training(cfg: &RunConfig) -> Result<ToyDetector, CliError> {
    match &cfg.detector {
        DetectorSpec::Toy => Ok(ToyDetector::new(cfg.toy.clone())?),
        DetectorSpec::Blackbox(_) => Err(CliError::config(
            "detector: training needs gradients; only the toy detector can be trained against",
        )),
    }
}

/// A victim whose adapter could not be started; every query fails.
struct Unreachable {
    command: String,
    reason: String,
}

impl Detector for Unreachable {
    fn detect(&self, _: &SceneImage) -> tripatch::Result<DetectorOutput> {
        Err(AdapterError::Spawn {
            command: self.command.clone(),
            source: std::io::Error::other(self.reason.clone()),
        }
        .into())
    }
}

fn build_detector(spec: &DetectorSpec, cfg: &RunConfig) -> Result<Box<dyn Detector>, Error> {
    Ok(match spec {
        DetectorSpec::Toy => Box::new(ToyDetector::new(cfg.toy.clone())?),
        DetectorSpec::Blackbox(argv) => Box::new(BlackBoxAdapter::spawn(argv, cfg.adapter_timeout())?),
    })
}

fn prepared(ds: &Dataset, cfg: &RunConfig) -> Vec<SceneRecord> {
    ds.records
        .iter()
        .map(|r| prepare_scene(r, cfg.train.input_resolution))
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("output directory {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct LossHistory<'a> {
    steps: usize,
    final_loss: Option<&'a LossBreakdown>,
    history: &'a [LossBreakdown],
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let detector = toy_for_training(cfg)?;
    let ds = load_dataset(cfg)?;
    let prov = Provenance {
        command: "train",
        config: cfg,
        dataset_sha256: dataset_hash(&ds),
    };
    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let state = train_with(&ds.records, &detector, &cfg.train, |s| {
        if every > 0 && s.step % every == 0 {
            write_checkpoint(&ckpt_dir, s)?;
        }
        Ok(())
    })?;

    let text = prov.png_text();
    save_patch(&out.join("patch.tpch"), &state.patch).map_err(|e| CliError::runtime(e.to_string()))?;
    save_patch_png(&out.join("patch.png"), &state.patch, &borrow_text(&text))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    prov.write_json(
        &out.join("loss_history.json"),
        &LossHistory {
            steps: state.step,
            final_loss: state.history.last(),
            history: &state.history,
        },
    )?;
    // Weighted terms, so the lines add up to the total.
    let w = cfg.train.weights;
    let pick = |f: &dyn Fn(&LossBreakdown) -> f64| state.history.iter().map(f).collect::<Vec<_>>();
    let (total, det, iou, nms, app) = (
        pick(&|l| l.total),
        pick(&|l| w.det * l.l_det),
        pick(&|l| w.iou * l.l_iou),
        pick(&|l| w.nms * l.l_nms),
        pick(&|l| w.app * l.l_app),
    );
    plot::line_chart(
        "TRAINING LOSS (WEIGHTED TERMS)",
        &[("total", &total), ("det", &det), ("iou", &iou), ("nms", &nms), ("app", &app)],
    )
    .save(&out.join("loss_curve.png"), &borrow_text(&text))?;
    println!(
        "trained {} steps, final loss {:.6}; wrote {}",
        state.step,
        state.history.last().map_or(f64::NAN, |l| l.total),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalResult<'a> {
    patch: Option<String>,
    report: &'a EvalReport,
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, patch_path: Option<&Path>) -> Result<(), CliError> {
    let patch = patch_path
        .map(|p| load_patch(p).map_err(|e| CliError::config(format!("--patch: {e}"))))
        .transpose()?;
    let detector = build_detector(&cfg.detector, cfg)?;
    let ds = load_dataset(cfg)?;
    let prov = Provenance {
        command: "eval",
        config: cfg,
        dataset_sha256: dataset_hash(&ds),
    };
    create_dir(out)?;
    let scenes = prepared(&ds, cfg);
    let report = evaluate(detector.as_ref(), &scenes, patch.as_ref(), &cfg.train.placement, &cfg.eval)?;
    prov.write_json(
        &out.join("eval_report.json"),
        &EvalResult {
            patch: patch_path.map(|p| p.display().to_string()),
            report: &report,
        },
    )?;
    println!("ap_person: {:.2}", report.ap_person);
    println!("asr: {:.4}", report.asr);
    Ok(())
}

fn list_patches(dir: &Path) -> Result<Vec<(String, Patch)>, CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::config(format!("transfer.patch_dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tpch"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let patch = load_patch(&p).map_err(|e| CliError::config(format!("patch {}: {e}", p.display())))?;
            Ok((name, patch))
        })
        .collect()
}

pub fn cmd_transfer(cfg: &RunConfig, out: &Path, patch_dir: Option<&Path>) -> Result<(), CliError> {
    let mut patches: Vec<(String, Option<Patch>)> = Vec::new();
    if cfg.transfer.include_clean {
        patches.push(("clean".to_string(), None));
    }
    match patch_dir.map(Path::to_path_buf).or_else(|| cfg.transfer.patch_dir.clone()) {
        Some(dir) => patches.extend(list_patches(&dir)?.into_iter().map(|(n, p)| (n, Some(p)))),
        None if patches.is_empty() => {
            return Err(CliError::config("transfer: set transfer.patch_dir or pass --patch DIR"))
        }
        None => {}
    }
    if patches.is_empty() {
        return Err(CliError::config("transfer: no *.tpch patches found"));
    }

    let specs: Vec<(String, DetectorSpec)> = if cfg.transfer.victims.is_empty() {
        vec![("target".to_string(), cfg.detector.clone())]
    } else {
        cfg.transfer
            .victims
            .iter()
            .map(|v| (v.name.clone(), v.detector.clone()))
            .collect()
    };
    let mut victims: Vec<(String, Box<dyn Detector>)> = Vec::with_capacity(specs.len());
    for (name, spec) in &specs {
        let det = match build_detector(spec, cfg) {
            Ok(d) => d,
            Err(Error::Adapter(AdapterError::Spawn { command, source })) => {
                log::warn!("victim {name}: cannot start `{command}`: {source}");
                Box::new(Unreachable {
                    command,
                    reason: source.to_string(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        victims.push((name.clone(), det));
    }
    let victim_refs: Vec<(String, &dyn Detector)> = victims.iter().map(|(n, d)| (n.clone(), d.as_ref())).collect();

    let ds = load_dataset(cfg)?;
    let prov = Provenance {
        command: "transfer",
        config: cfg,
        dataset_sha256: dataset_hash(&ds),
    };
    create_dir(out)?;
    let scenes = prepared(&ds, cfg);
    let matrix = transfer_matrix(&patches, &victim_refs, &scenes, &cfg.train.placement, &cfg.eval)?;

    let mut body = Vec::new();
    matrix
        .write_csv(&mut body)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    prov.write_csv(&out.join("transfer.csv"), &body)?;
    prov.write_json(&out.join("transfer.json"), &matrix)?;
    plot::heatmap("ATTACKED AP (%)", &matrix.rows, &matrix.columns, &matrix.cells, 100.0)
        .save(&out.join("transfer_heatmap.png"), &borrow_text(&prov.png_text()))?;

    for f in &matrix.failures {
        eprintln!("cell {} / {} failed: {}", f.trained_on, f.victim, f.message);
    }
    println!(
        "{} of {} cells computed; wrote {}",
        matrix.computed_cells(),
        matrix.rows.len() * matrix.columns.len(),
        out.display()
    );
    if matrix.computed_cells() == 0 {
        return Err(CliError::runtime("no transfer cell could be computed"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Epochs,
    PatchSize,
    LossTerms,
    LossWeights,
    Seeds,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Epochs => "epochs",
            Axis::PatchSize => "patch-size",
            Axis::LossTerms => "loss-terms",
            Axis::LossWeights => "loss-weights",
            Axis::Seeds => "seeds",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub ap_person: Option<f64>,
    pub asr: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    fn from_outcome(setting: String, outcome: Result<(EvalReport, Option<f64>), Error>) -> Self {
        match outcome {
            Ok((r, final_loss)) => Self {
                setting,
                ap_person: Some(r.ap_person),
                asr: Some(r.asr),
                final_loss,
                error: None,
            },
            Err(e) => {
                log::warn!("{setting}: {e}");
                Self {
                    setting,
                    ap_person: None,
                    asr: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                }
            }
        }
    }
}

#[derive(Serialize)]
struct AblationResult<'a> {
    axis: Axis,
    rows: &'a [AblationRow],
    /// Max minus min AP over the successful seeds (seeds axis only).
    #[serde(skip_serializing_if = "Option::is_none")]
    spread: Option<f64>,
}

/// Non-empty on/off masks over (det, iou, nms), full set first.
pub const LOSS_TERM_MASKS: [[bool; 3]; 7] = [
    [true, true, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, false, false],
    [false, true, false],
    [false, false, true],
];

fn mask_label(m: [bool; 3]) -> String {
    ["det", "iou", "nms"]
        .iter()
        .zip(m)
        .filter(|(_, on)| *on)
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join("+")
}

fn weights_label(w: &LossWeights) -> String {
    format!("det={} iou={} nms={} app={}", w.det, w.iou, w.nms, w.app)
}

fn train_and_score(
    scenes: &[SceneRecord],
    detector: &ToyDetector,
    gt: &PseudoGroundTruth,
    train_cfg: &TrainConfig,
    cfg: &RunConfig,
) -> Result<(EvalReport, Option<f64>), Error> {
    let state = train(scenes, detector, train_cfg)?;
    let report = evaluate_against(detector, scenes, gt, Some(&state.patch), &train_cfg.placement, &cfg.eval)?;
    Ok((report, state.history.last().map(|l| l.total)))
}

/// Trains once to the largest requested epoch count and scores the patch at
/// each requested epoch boundary. Equivalent to separate runs, since every
/// epoch's shuffle and augmentation draws depend only on the seed and the
/// epoch index.
fn epoch_sweep(
    scenes: &[SceneRecord],
    detector: &ToyDetector,
    gt: &PseudoGroundTruth,
    cfg: &RunConfig,
) -> Vec<AblationRow> {
    let wanted = &cfg.ablate.epochs;
    let max = wanted.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Vec::new();
    }
    let train_cfg = TrainConfig {
        epochs: max,
        ..cfg.train.clone()
    };
    let per_epoch = scenes.len().div_ceil(train_cfg.batch_size.max(1));
    let mut scored: Vec<(usize, EvalReport, Option<f64>)> = Vec::new();
    let run = train_with(scenes, detector, &train_cfg, |s| {
        if per_epoch > 0 && s.step % per_epoch == 0 {
            let epoch = s.step / per_epoch;
            if wanted.contains(&epoch) {
                let r = evaluate_against(detector, scenes, gt, Some(&s.patch), &train_cfg.placement, &cfg.eval)?;
                scored.push((epoch, r, s.history.last().map(|l| l.total)));
            }
        }
        Ok(())
    });
    wanted
        .iter()
        .map(|&e| {
            let outcome = match scored.iter().find(|(k, _, _)| *k == e) {
                Some((_, r, l)) => Ok((r.clone(), *l)),
                None => Err(match &run {
                    Err(err) => Error::InvalidConfig(format!("training stopped before epoch {e}: {err}")),
                    Ok(_) => Error::InvalidConfig(format!("epoch {e} was not reached")),
                }),
            };
            AblationRow::from_outcome(e.to_string(), outcome)
        })
        .collect()
}

pub fn run_ablation(cfg: &RunConfig, axis: Axis) -> Result<(Dataset, Vec<AblationRow>, Option<f64>), CliError> {
    let detector = toy_for_training(cfg)?;
    let ds = load_dataset(cfg)?;
    if ds.records.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let scenes = prepared(&ds, cfg);
    if axis == Axis::Seeds {
        let s = seed_stability(&scenes, &detector, &cfg.train, &cfg.ablate.seeds, &cfg.eval)?;
        let rows = s
            .runs
            .into_iter()
            .map(|r| AblationRow {
                setting: r.seed.to_string(),
                ap_person: r.ap_person,
                asr: r.asr,
                final_loss: r.final_loss,
                error: r.error,
            })
            .collect();
        return Ok((ds, rows, s.spread));
    }
    let gt = pseudo_ground_truth(&detector, &scenes, &cfg.eval)?;
    let base = &cfg.train;
    let points: Vec<(String, TrainConfig)> = match axis {
        Axis::Epochs => return Ok((ds.clone(), epoch_sweep(&scenes, &detector, &gt, cfg), None)),
        Axis::PatchSize => cfg
            .ablate
            .patch_size
            .iter()
            .map(|&beta| {
                let placement = PlacementSpec {
                    scale_fraction: beta,
                    ..base.placement
                };
                (beta.to_string(), TrainConfig { placement, ..base.clone() })
            })
            .collect(),
        Axis::LossTerms => LOSS_TERM_MASKS
            .iter()
            .map(|&m| {
                let on = |b: bool, w: f64| if b { w } else { 0.0 };
                let weights = LossWeights {
                    det: on(m[0], base.weights.det),
                    iou: on(m[1], base.weights.iou),
                    nms: on(m[2], base.weights.nms),
                    app: base.weights.app,
                };
                (mask_label(m), TrainConfig { weights, ..base.clone() })
            })
            .collect(),
        Axis::LossWeights => cfg
            .ablate
            .loss_weights
            .iter()
            .map(|w| (weights_label(w), TrainConfig { weights: *w, ..base.clone() }))
            .collect(),
        Axis::Seeds => unreachable!(),
    };
    let rows = points
        .into_iter()
        .map(|(label, tc)| {
            log::info!("ablation point {label}");
            AblationRow::from_outcome(label, train_and_score(&scenes, &detector, &gt, &tc, cfg))
        })
        .collect();
    Ok((ds, rows, None))
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, axis: Axis) -> Result<(), CliError> {
    let (ds, rows, spread) = run_ablation(cfg, axis)?;
    let prov = Provenance {
        command: "ablate",
        config: cfg,
        dataset_sha256: dataset_hash(&ds),
    };
    create_dir(out)?;
    let stem = format!("ablate-{}", axis.name());

    let mut w = csv::Writer::from_writer(Vec::new());
    let num = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let csv_err = |e: csv::Error| CliError::runtime(e.to_string());
    w.write_record(["axis", "setting", "ap_person", "asr", "final_loss", "error"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            axis.name().to_string(),
            r.setting.clone(),
            num(r.ap_person),
            num(r.asr),
            num(r.final_loss),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    prov.write_csv(&out.join(format!("{stem}.csv")), &body)?;
    prov.write_json(
        &out.join(format!("{stem}.json")),
        &AblationResult {
            axis,
            rows: &rows,
            spread,
        },
    )?;
    let bars: Vec<(String, Option<f64>)> = rows.iter().map(|r| (r.setting.clone(), r.ap_person)).collect();
    let title = format!("ATTACKED AP (%) BY {}", axis.name());
    plot::bar_chart(&title, &bars, 100.0).save(&out.join(format!("{stem}.png")), &borrow_text(&prov.png_text()))?;

    for r in &rows {
        match (r.ap_person, &r.error) {
            (Some(ap), _) => println!("{:<28} ap_person {:>7.2}", r.setting, ap),
            (None, Some(e)) => println!("{:<28} failed: {e}", r.setting),
            (None, None) => println!("{:<28} -", r.setting),
        }
    }
    if let Some(s) = spread {
        println!("spread: {s:.2}");
    }
    if rows.iter().all(|r| r.ap_person.is_none()) {
        return Err(CliError::runtime("every ablation point failed"));
    }
    Ok(())
}
