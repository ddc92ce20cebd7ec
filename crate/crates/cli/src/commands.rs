use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde_json::json;

use hoi_core::dataset::{generate_synthetic, load_annotations, save_annotations};
use hoi_core::eval::{evaluate, ground_truth_predictions, read_predictions, ApReport, Interpolation};
use hoi_core::features::{export_features, write_feature_file, FeatureProvider, FileProvider, SyntheticProvider};
use hoi_core::inference::{fit_kmeans_offsets, infer_dataset, write_predictions, Overlay, ScoredTriplet, TargetScorer};
use hoi_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use hoi_core::trainer::{format_loss_log, train, Phase};
use hoi_core::{Dataset, RelOffset};

use crate::config::{DensityMode, RunConfig};
use crate::error::{CliError, Kind};
use crate::{BaselineArgs, Cli, Command, DataArgs, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    match cli.command {
        Command::Synth(a) => synth(cfg, &a, &cli.out),
        Command::Train(a) => train_cmd(cfg, &a, &cli.out),
        Command::Infer(a) => infer_cmd(cfg, &a, &cli.out).map(|_| ()),
        Command::Eval(a) => eval_cmd(cfg, &a, &cli.out),
        Command::Baseline(a) => baseline(cfg, &a, &cli.out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Kind::Io, format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn validation(what: &str) -> CliError {
    CliError::new(Kind::Io, format!("{what} did not read back identically"))
}

fn feature_dim(dataset: &Dataset, padding: usize) -> usize {
    SyntheticProvider::min_dim(dataset.categories.len(), dataset.registry.num_verbs()) + padding
}

fn provider(data: &DataArgs, dataset: &Dataset, dim: usize, noise: f64) -> Result<Box<dyn FeatureProvider>, CliError> {
    Ok(match &data.features {
        Some(p) => Box::new(FileProvider::load(p, Some(dim)).map_err(|e| match e {
            hoi_core::FeatureError::Io(io) => io_err(p, io),
            e => CliError::new(Kind::Data, format!("{}: {e}", p.display())),
        })?),
        None => Box::new(SyntheticProvider::for_dataset(dataset, dim, noise)?),
    })
}

fn load(data: &Path, schema: crate::SchemaArg) -> Result<Dataset, CliError> {
    Ok(load_annotations(data, schema.into())?)
}

fn synth(mut cfg: RunConfig, a: &SynthArgs, out: &Path) -> Result<(), CliError> {
    if let Some(n) = a.scenes {
        cfg.synth.train.scenes = n;
    }
    if let Some(n) = a.test_scenes {
        cfg.synth.test_scenes = n;
    }
    if let Some(n) = a.distractors {
        cfg.synth.train.distractors_per_scene = n;
    }
    if let Some(n) = a.noise {
        cfg.features.noise = n;
    }
    let cfg = cfg.resolve()?;
    let run = cfg.to_json();
    for (name, sc) in [("train", cfg.synth.train.clone()), ("test", cfg.test_synth())] {
        let mut ds = generate_synthetic(&sc);
        ds.generator = Some(json!({ "synth": ds.generator, "run": run }));
        let ann = out.join(format!("{name}.json"));
        save_annotations(&ann, &ds)?;
        let dim = feature_dim(&ds, cfg.features.padding);
        let prov = SyntheticProvider::for_dataset(&ds, dim, cfg.features.noise)?;
        let entries = export_features(&prov, &ds.scenes)?;
        let fpath = out.join(format!("{name}.features"));
        let file = fs::File::create(&fpath).map_err(|e| io_err(&fpath, e))?;
        write_feature_file(BufWriter::new(file), dim, &entries)?;

        if load_annotations(&ann, hoi_core::Schema::VcocoLike)?.scenes != ds.scenes {
            return Err(validation(&ann.display().to_string()));
        }
        let back = FileProvider::load(&fpath, Some(dim))?;
        if back.len() != entries.len() {
            return Err(validation(&fpath.display().to_string()));
        }
        println!("{name}: {} scenes, {} proposal features of dim {dim}", ds.scenes.len(), entries.len());
    }
    write_json(&out.join("synth.config.json"), &run)
}

fn train_cmd(mut cfg: RunConfig, a: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let sched = &mut cfg.train.schedule;
    if a.iterations.is_some() || a.lr.is_some() {
        let total = a.iterations.unwrap_or_else(|| sched.total_iterations());
        let lr = a.lr.unwrap_or(sched.phases[0].lr);
        let first = (total * 4).div_ceil(5);
        sched.phases = vec![Phase { iterations: first, lr }];
        if total > first {
            sched.phases.push(Phase {
                iterations: total - first,
                lr: lr / 10.0,
            });
        }
    }
    if let Some(n) = a.images_per_step {
        sched.images_per_step = n;
    }
    if let Some(h) = a.hidden_dim {
        cfg.head.hidden_dim = h;
    }
    if let Some(d) = a.density {
        cfg.density_mode = Some(d);
    }
    if let Some(p) = a.pairwise {
        cfg.head.pairwise_mode = p.into();
    }
    if a.no_interaction {
        cfg.head.use_interaction_branch = false;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    let cfg = cfg.resolve()?;

    let dataset = load(&a.data.data, a.data.schema)?;
    let dim = feature_dim(&dataset, cfg.features.padding);
    let prov = provider(&a.data, &dataset, dim, cfg.features.noise)?;
    let extra = json!({
        "command": "train",
        "data": a.data.data,
        "features": a.data.features,
        "run": cfg.to_json(),
    });
    let wrap = |model: &hoi_core::Model| Checkpoint {
        model: model.clone(),
        actions: dataset.registry.verbs().to_vec(),
        categories: dataset.categories.clone(),
        extra: extra.clone(),
    };

    let mut periodic_err = None;
    let every = cfg.checkpoint_every;
    let mut on_step = |it: usize, model: &hoi_core::Model| {
        if every > 0 && (it + 1).is_multiple_of(every) && periodic_err.is_none() {
            let p = out.join(format!("ckpt-{:06}.ckpt", it + 1));
            if let Err(e) = save_checkpoint(&p, &wrap(model)) {
                periodic_err = Some(e);
            }
        }
    };
    let outcome = train(&dataset, prov.as_ref(), &cfg.head, &cfg.train, Some(&mut on_step))?;
    if let Some(e) = periodic_err {
        return Err(e.into());
    }

    let ckpt = wrap(&outcome.model);
    let path = out.join("model.ckpt");
    save_checkpoint(&path, &ckpt)?;
    if load_checkpoint(&path)? != ckpt {
        return Err(validation(&path.display().to_string()));
    }
    let log_path = out.join("loss.log");
    fs::write(&log_path, format_loss_log(&outcome.history)).map_err(|e| io_err(&log_path, e))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "trained {} iterations: loss {:.4} -> {:.4}",
            outcome.history.len(),
            first.loss.total,
            last.loss.total
        );
    }
    Ok(())
}

struct Inferred {
    predictions: Vec<ScoredTriplet>,
    dataset: Dataset,
}

fn infer_with(
    cfg: &RunConfig,
    a: &InferArgs,
    kmeans_centers: Option<&[Vec<RelOffset>]>,
    ckpt: &Checkpoint,
    out_stem: &str,
    out: &Path,
) -> Result<Inferred, CliError> {
    let dataset = load(&a.data.data, a.data.schema)?;
    if dataset.registry.verbs() != ckpt.actions.as_slice() || dataset.categories != ckpt.categories {
        return Err(CliError::new(
            Kind::Data,
            "annotation actions or categories differ from the checkpoint's",
        ));
    }
    let prov = provider(&a.data, &dataset, ckpt.model.config.feature_dim, cfg.features.noise)?;
    let scorer = match kmeans_centers {
        Some(c) => TargetScorer::KMeans(c),
        None => TargetScorer::Model,
    };
    let mut results = infer_dataset(&ckpt.model, &dataset, prov.as_ref(), &cfg.inference, scorer)?;
    results.sort_by_key(|r| r.image_id);
    let predictions: Vec<ScoredTriplet> = results.iter().flat_map(|r| r.output.triplets.iter().cloned()).collect();

    let path = out.join(format!("{out_stem}.jsonl"));
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write_predictions(BufWriter::new(file), &predictions).map_err(|e| io_err(&path, e))?;
    let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    if read_predictions(BufReader::new(file))? != predictions {
        return Err(validation(&path.display().to_string()));
    }
    let roi: usize = results.iter().map(|r| r.output.stats.roi_evaluations).sum();
    write_json(
        &out.join(format!("{out_stem}.meta.json")),
        &json!({
            "command": out_stem,
            "checkpoint": a.checkpoint,
            "data": a.data.data,
            "features": a.data.features,
            "scorer": if kmeans_centers.is_some() { "kmeans" } else { "model" },
            "images": results.len(),
            "triplets": predictions.len(),
            "roi_evaluations": roi,
            "run": cfg.to_json(),
        }),
    )?;
    if a.overlays {
        let overlays: Vec<Overlay> = results
            .iter()
            .map(|r| r.overlay(&dataset.categories, &dataset.registry))
            .collect();
        write_json(
            &out.join(format!("{out_stem}.overlays.json")),
            &json!({ "run": cfg.to_json(), "images": overlays }),
        )?;
    }
    println!("{}: {} triplets over {} images", path.display(), predictions.len(), results.len());
    Ok(Inferred { predictions, dataset })
}

fn apply_infer_flags(cfg: &mut RunConfig, a: &InferArgs) {
    if let Some(v) = a.score_thresh {
        cfg.inference.score_thresh = v;
    }
    if let Some(v) = a.nms_thresh {
        cfg.inference.nms_thresh = v;
    }
    if let Some(v) = a.sigma {
        cfg.inference.sigma = v;
    }
    if let Some(v) = a.max_triplets {
        cfg.inference.max_triplets = v;
    }
    if let Some(d) = a.density {
        cfg.density_mode = Some(d);
    }
}

fn centers_for(cfg: &RunConfig, train_path: Option<&PathBuf>, a: &InferArgs) -> Result<Vec<Vec<RelOffset>>, CliError> {
    let Some(train_path) = train_path else {
        return Err(CliError::new(Kind::Config, "k-means scoring needs --train <annotations>"));
    };
    let train_set = load(train_path, a.data.schema)?;
    Ok(fit_kmeans_offsets(&train_set, cfg.kmeans_k, cfg.kmeans_seed()))
}

fn infer_cmd(mut cfg: RunConfig, a: &InferArgs, out: &Path) -> Result<(), CliError> {
    apply_infer_flags(&mut cfg, a);
    let mode = cfg.density_mode;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = cfg.resolve()?;
    if let Some(m) = mode.filter(|m| *m != DensityMode::KmeansBaseline) {
        if m.density() != ckpt.model.config.density {
            return Err(CliError::new(
                Kind::Config,
                format!("density mode {m:?} does not match the checkpoint's density head"),
            ));
        }
    }
    let centers = match mode {
        Some(DensityMode::KmeansBaseline) => Some(centers_for(&cfg, a.train.as_ref(), a)?),
        _ => None,
    };
    infer_with(&cfg, a, centers.as_deref(), &ckpt, "predictions", out)?;
    Ok(())
}

fn write_report(report: &ApReport, cfg: &RunConfig, stem: &str, out: &Path) -> Result<(), CliError> {
    write_json(
        &out.join(format!("{stem}.json")),
        &json!({ "report": report, "run": cfg.to_json() }),
    )?;
    let table = report.to_table();
    let p = out.join(format!("{stem}.txt"));
    fs::write(&p, &table).map_err(|e| io_err(&p, e))?;
    print!("{table}");
    Ok(())
}

fn eval_cmd(mut cfg: RunConfig, a: &EvalArgs, out: &Path) -> Result<(), CliError> {
    if let Some(t) = a.iou_thresh {
        cfg.eval.iou_thresh = t;
    }
    if a.require_category {
        cfg.eval.require_object_category = true;
    }
    if a.eleven_point {
        cfg.eval.interpolation = Interpolation::ElevenPoint;
    }
    let cfg = cfg.resolve()?;
    let dataset = load(&a.data, a.schema)?;
    let preds = match &a.predictions {
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| io_err(p, e))?;
            read_predictions(BufReader::new(file))?
        }
        None => ground_truth_predictions(&dataset),
    };
    let report = evaluate(&dataset, &preds, &cfg.eval)?;
    write_report(&report, &cfg, "report", out)
}

fn baseline(mut cfg: RunConfig, a: &BaselineArgs, out: &Path) -> Result<(), CliError> {
    apply_infer_flags(&mut cfg, &a.infer);
    if let Some(k) = a.k {
        cfg.kmeans_k = k;
    }
    cfg.density_mode = Some(DensityMode::KmeansBaseline);
    let cfg = cfg.resolve()?;
    let ckpt = load_checkpoint(&a.infer.checkpoint)?;
    let centers = centers_for(&cfg, a.infer.train.as_ref(), &a.infer)?;
    let centers_json: Vec<Vec<[f64; 4]>> = centers
        .iter()
        .map(|c| c.iter().map(|o| o.to_array()).collect())
        .collect();
    write_json(
        &out.join("kmeans_centers.json"),
        &json!({ "k": cfg.kmeans_k, "centers": centers_json, "run": cfg.to_json() }),
    )?;
    let inferred = infer_with(&cfg, &a.infer, Some(&centers), &ckpt, "baseline", out)?;
    let report = evaluate(&inferred.dataset, &inferred.predictions, &cfg.eval)?;
    write_report(&report, &cfg, "baseline.report", out)
}
