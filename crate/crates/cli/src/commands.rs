use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gpp_core::detect::write_diagnostics_csv;
use gpp_core::evalrank::{
    evaluate_by_method, kfold_split, leaderboard_table, rank_teams, read_predictions_csv, read_summary_csv,
    write_predictions_csv, write_report_csv, write_summary_csv, ScoreReport,
};
use gpp_core::phantom::{generate_dataset, write_dataset, PhantomJitter, PhantomSpec};
use gpp_core::pipeline::{detect_ensemble, detect_volume, train_method, LabeledRef, Method, MethodSettings, TrainedModel};
use gpp_core::prep::{clip_hu, resize_volume_xy, ClipRange, ResizeMode};
use gpp_core::seed::derive_seed;
use gpp_core::volgrid::{gpv_paths, load_annotated, save_annotated, save_volume};
use serde_json::json;

use crate::config::{overlay, required, DetectArgs, EvalArgs, PhantomArgs, PrepArgs, RankArgs, RunConfig, TrainArgs};
use crate::dataset::{load_dir, read_truth, volume_stems, TRUTH_FILE};
use crate::manifest::{beside, Manifest};
use crate::Failure;

fn start(cfg: &RunConfig, command: &'static str, parameters: serde_json::Value) -> Manifest {
    let mut m = Manifest::new(command, parameters);
    if let Some(file) = &cfg.file {
        m.inputs.push(file.clone());
    }
    m
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn phantom(cfg: &RunConfig, flags: PhantomArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.phantom.as_ref())?;
    let out = cfg.dir_or_data(a.out, "out")?;
    let seed = cfg.seed_for(a.seed, "phantom");
    let count = a.count.unwrap_or(20);
    let size = a.size.unwrap_or(96);
    let defaults = PhantomSpec::default();
    let base = PhantomSpec {
        dims: (size, size, a.planes.unwrap_or(defaults.dims.2)),
        gppi: a.gppi.unwrap_or(defaults.gppi),
        noise_sigma: a.noise_sigma.unwrap_or(defaults.noise_sigma),
        ..defaults
    };
    let jitter = PhantomJitter {
        gppi: a.gppi_jitter.unwrap_or(30),
        protrusion_radius_vox: a.radius_jitter.unwrap_or(1.0),
        shaft_radius_vox: a.shaft_jitter.unwrap_or(2.0),
    };
    let mut m = start(cfg, "phantom", json!({ "count": count, "base": base, "jitter": jitter }));
    m.seed("dataset", seed);
    let items = generate_dataset(count, &base, &jitter, seed)?;
    for path in write_dataset(&items, &out)? {
        m.output(&path)?;
    }
    m.write(&out.join("phantom.manifest.json"))?;
    println!("wrote {count} volumes to {}", out.display());
    Ok(())
}

pub fn prep(cfg: &RunConfig, flags: PrepArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.prep.as_ref())?;
    let input = cfg.dir_or_data(a.input, "input")?;
    let out = required(a.out, "out")?;
    if input == out {
        return Err(Failure::input("--out must differ from --input"));
    }
    let clip = ClipRange::new(a.clip_lo.unwrap_or(-1000.0), a.clip_hi.unwrap_or(3000.0))?;
    let resize = a.resize.unwrap_or(ResizeMode::Area);
    let mut m = start(cfg, "prep", json!({ "clip": clip, "size": a.size, "resize": resize }));
    let stems = volume_stems(&input)?;
    create_dir(&out)?;
    for stem in &stems {
        let (v, ann) = load_annotated(stem)?;
        let (json, raw) = gpv_paths(stem);
        m.input(&json)?;
        m.input(&raw)?;
        let mut v = clip_hu(&v, clip)?;
        if let Some(size) = a.size {
            v = resize_volume_xy(&v, (size, size), resize)?;
        }
        let dest = out.join(stem.file_name().expect("stem has a file name"));
        match &ann {
            Some(ann) => save_annotated(&v, ann, &dest)?,
            None => save_volume(&v, &dest)?,
        }
        let (json, raw) = gpv_paths(&dest);
        m.output(&json)?;
        m.output(&raw)?;
    }
    let truth = input.join(TRUTH_FILE);
    if truth.is_file() {
        let dest = out.join(TRUTH_FILE);
        std::fs::copy(&truth, &dest).map_err(|e| Failure::input(format!("{}: {e}", truth.display())))?;
        m.input(&truth)?;
        m.output(&dest)?;
    }
    m.write(&out.join("prep.manifest.json"))?;
    println!("prepared {} volumes into {}", stems.len(), out.display());
    Ok(())
}

fn method_settings(a: &TrainArgs, method: Method) -> Result<MethodSettings, Failure> {
    let mut settings = match &a.settings {
        None => MethodSettings::default_for(method),
        Some(value) => {
            let mut value = value.clone();
            let table = value
                .as_object_mut()
                .ok_or_else(|| Failure::input("train.settings must be a table"))?;
            match table.get("method").and_then(|v| v.as_str()) {
                Some(name) if name != method.name() => {
                    return Err(Failure::input(format!(
                        "train.settings is for '{name}' but the method is '{method}'"
                    )))
                }
                Some(_) => {}
                None => {
                    table.insert("method".into(), json!(method.name()));
                }
            }
            serde_json::from_value(value).map_err(|e| Failure::input(format!("train.settings: {e}")))?
        }
    };
    if let Some(epochs) = a.epochs {
        settings.set_epochs(epochs);
    }
    Ok(settings)
}

fn fold_path(out: &Path, fold: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "gpm".into());
    out.with_file_name(format!("{stem}-fold{fold}.{ext}"))
}

fn history_csv(model: &TrainedModel) -> String {
    let mut s = String::from("network,epoch,loss\n");
    for (n, h) in model.history.iter().enumerate() {
        for (e, loss) in h.iter().enumerate() {
            let _ = writeln!(s, "{n},{e},{loss}");
        }
    }
    s
}

pub fn train(cfg: &RunConfig, flags: TrainArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.train.as_ref())?;
    let method: Method = required(a.method.as_deref(), "method")?.parse()?;
    let settings = method_settings(&a, method)?;
    let input = cfg.dir_or_data(a.input.clone(), "input")?;
    let out = required(a.out.clone(), "out")?;
    let seed = cfg.seed_for(a.seed, "train");
    if a.fold.is_some() && a.folds.is_none() {
        return Err(Failure::input("--fold needs --folds"));
    }
    let mut m = start(
        cfg,
        "train",
        json!({ "settings": settings, "folds": a.folds, "fold": a.fold }),
    );
    m.seed("train", seed);
    let entries = load_dir(&input, &mut m)?;
    let mut labeled = Vec::with_capacity(entries.len());
    for e in &entries {
        let gppi = e
            .gppi
            .ok_or_else(|| Failure::input(format!("volume '{}' has no ground-truth plane", e.volume.id())))?;
        labeled.push((e.volume.id().to_string(), LabeledRef { volume: &e.volume, gppi }));
    }
    // (model path, training ids, seed)
    let mut jobs: Vec<(PathBuf, Option<BTreeSet<String>>, u64)> = Vec::new();
    match a.folds {
        None => jobs.push((out.clone(), None, seed)),
        Some(k) => {
            let fold_seed = derive_seed(seed, &["folds"]);
            m.seed("folds", fold_seed);
            let ids: Vec<(String, String)> = entries
                .iter()
                .map(|e| (e.volume.id().to_string(), e.study.clone()))
                .collect();
            let split = kfold_split(&ids, k, fold_seed)?;
            let mut folds_csv = String::from("volume_id,study,fold\n");
            for (id, study) in &ids {
                let _ = writeln!(folds_csv, "{id},{study},{}", split.fold_of[id]);
            }
            let folds_path = out.with_extension("folds.csv");
            write_file(&folds_path, &folds_csv)?;
            m.output(&folds_path)?;
            let selected: Vec<usize> = match a.fold {
                Some(f) if f >= k => return Err(Failure::input(format!("--fold {f} is not below --folds {k}"))),
                Some(f) => vec![f],
                None => (0..k).collect(),
            };
            for f in selected {
                let path = if a.fold.is_some() { out.clone() } else { fold_path(&out, f) };
                let fseed = derive_seed(seed, &["fold", &f.to_string()]);
                m.seed(&format!("fold{f}"), fseed);
                jobs.push((path, Some(split.complement(f).into_iter().collect()), fseed));
            }
        }
    }
    for (path, members, job_seed) in jobs {
        let data: Vec<LabeledRef<'_>> = labeled
            .iter()
            .filter(|(id, _)| members.as_ref().is_none_or(|s| s.contains(id)))
            .map(|(_, r)| *r)
            .collect();
        let model = train_method(&settings, &data, job_seed)?;
        model.save(&path)?;
        m.output(&path)?;
        let history = path.with_extension("history.csv");
        write_file(&history, &history_csv(&model))?;
        m.output(&history)?;
        println!(
            "{}: {method} on {} volumes, model {}",
            path.display(),
            data.len(),
            model.model_id()?
        );
    }
    m.write(&beside(&out))?;
    Ok(())
}

pub fn detect(cfg: &RunConfig, flags: DetectArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.detect.as_ref())?;
    let method = required(a.method, "method")?;
    let paths = a.model.unwrap_or_default();
    if paths.is_empty() {
        return Err(Failure::input("--model is required"));
    }
    let input = cfg.dir_or_data(a.input, "input")?;
    let out = required(a.out, "out")?;
    let mut m = start(cfg, "detect", json!({ "method": method, "models": paths.len() }));
    let mut models = Vec::with_capacity(paths.len());
    for p in &paths {
        models.push(TrainedModel::load(p)?);
        m.input(p)?;
    }
    let ensemble = method == "ensemble";
    if !ensemble {
        let want: Method = method.parse()?;
        if models.len() != 1 {
            return Err(Failure::input("several models need --method ensemble"));
        }
        if models[0].method() != want {
            return Err(Failure::input(format!(
                "model was trained for '{}', not '{want}'",
                models[0].method()
            )));
        }
    }
    let entries = load_dir(&input, &mut m)?;
    if let Some(dir) = &a.diagnostics {
        create_dir(dir)?;
    }
    let mut preds = Vec::with_capacity(entries.len());
    for e in &entries {
        let d = if ensemble {
            detect_ensemble(&models, &e.volume)?
        } else {
            detect_volume(&models[0], &e.volume)?
        };
        if let Some(dir) = &a.diagnostics {
            let path = dir.join(format!("{}.csv", d.volume_id));
            write_diagnostics_csv(&d, &path)?;
            m.output(&path)?;
        }
        preds.push(d.to_prediction());
    }
    write_predictions_csv(&preds, &out)?;
    m.output(&out)?;
    m.write(&beside(&out))?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, flags: EvalArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.eval.as_ref())?;
    let pred = required(a.pred, "pred")?;
    let truth = match a.truth {
        Some(t) => t,
        None => cfg.dir_or_data(None, "truth")?.join(TRUTH_FILE),
    };
    let out = a.out.unwrap_or_else(|| parent_dir(&pred));
    let mut m = start(cfg, "eval", json!({}));
    let preds = read_predictions_csv(&pred)?;
    m.input(&pred)?;
    let truths = read_truth(&truth, &mut m)?;
    let reports = evaluate_by_method(&preds, &truths)?;
    create_dir(&out)?;
    let report = out.join("report.csv");
    let summary = out.join("summary.csv");
    write_report_csv(&reports, &report)?;
    write_summary_csv(&reports, &summary)?;
    m.output(&report)?;
    m.output(&summary)?;
    m.write(&out.join("eval.manifest.json"))?;
    print!("{}", leaderboard_table(&rank_teams(&reports)));
    Ok(())
}

pub fn rank(cfg: &RunConfig, flags: RankArgs) -> Result<(), Failure> {
    let a = overlay(flags, cfg.rank.as_ref())?;
    let summaries = a.summary.unwrap_or_default();
    let first = summaries
        .first()
        .ok_or_else(|| Failure::input("--summary is required"))?;
    let out = a.out.unwrap_or_else(|| parent_dir(first).join("leaderboard.txt"));
    let mut m = start(cfg, "rank", json!({}));
    let mut seen = BTreeSet::new();
    let mut reports = Vec::new();
    for path in &summaries {
        for r in read_summary_csv(path)? {
            if !seen.insert(r.method.clone()) {
                return Err(Failure::input(format!("method '{}' appears twice", r.method)));
            }
            reports.push(ScoreReport {
                method: r.method,
                rows: Vec::new(),
                mean_score: r.mean,
                std_score: r.std,
                sum_score: r.sum,
                mae: r.mae,
            });
        }
        m.input(path)?;
    }
    let table = leaderboard_table(&rank_teams(&reports));
    write_file(&out, &table)?;
    m.output(&out)?;
    m.write(&beside(&out))?;
    print!("{table}");
    Ok(())
}
