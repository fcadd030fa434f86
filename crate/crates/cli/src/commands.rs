use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use msrt_core::datagen::{gen_dataset_with, kfold_split};
use msrt_core::dsp::{correlation_heatmap, preprocess};
use msrt_core::encoder::Architecture;
use msrt_core::train::{evaluate, pyramid_histograms, train_with, EpochStats, EvalReport};
use msrt_core::{Model, CLASS_NAMES};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{encode_for, read_dataset, Dataset};
use crate::error::{CliError, CliResult};
use crate::export;
use crate::plot;

/// Fails early when `path` exists and overwriting was not requested.
pub fn ensure_writable(path: &Path, force: bool) -> CliResult<()> {
    if !force && path.exists() {
        return Err(CliError::Validation(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8], force: bool) -> CliResult<()> {
    ensure_writable(path, force)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &Value, force: bool) -> CliResult<()> {
    let mut text = serde_json::to_vec_pretty(value).expect("JSON value serializes");
    text.push(b'\n');
    write_file(path, &text, force)
}

/// `data.bin` -> `data.bin.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn provenance(kind: &str, cfg: &RunConfig, details: Value) -> Value {
    let mut doc = json!({
        "kind": kind,
        "run_config": cfg.to_json(),
        "class_names": CLASS_NAMES,
    });
    if let (Some(doc), Value::Object(extra)) = (doc.as_object_mut(), details) {
        doc.extend(extra);
    }
    doc
}

fn write_dataset(path: &Path, data: &Dataset, cfg: &RunConfig, kind: &str, extra: Value, force: bool) -> CliResult<()> {
    let side = sidecar_path(path);
    ensure_writable(path, force)?;
    ensure_writable(&side, force)?;
    write_file(path, &encode_for(path, data), force)?;
    let mut details = json!({ "records": data.len(), "record_len": data.record_len() });
    if let (Some(d), Value::Object(extra)) = (details.as_object_mut(), extra) {
        d.extend(extra);
    }
    write_json(&side, &provenance(kind, cfg, details), force)
}

fn require(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::Validation(format!("no {what} given on the command line or in the config")))
}

fn check_shape(data: &Dataset, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    if data.is_empty() {
        return Err(CliError::Validation(format!("{} holds no records", path.display())));
    }
    if data.record_len() != cfg.model.input_len {
        return Err(CliError::Validation(format!(
            "{} has records of length {}, model expects {}",
            path.display(),
            data.record_len(),
            cfg.model.input_len
        )));
    }
    Ok(())
}

pub fn generate(mut cfg: RunConfig, out: Option<PathBuf>, per_class: Option<usize>, force: bool) -> CliResult<Dataset> {
    if let Some(n) = per_class {
        cfg.generator.per_class = n;
    }
    let out = require(out.or(cfg.paths.dataset.clone()), "output path")?;
    cfg.paths.dataset = Some(out.clone());
    cfg.validate()?;
    ensure_writable(&out, force)?;
    let g = &cfg.generator;
    let signals = gen_dataset_with(g.per_class, g.seed, &g.waveform)?;
    let data = Dataset::from_signals(g.waveform.input_len, &signals)?;
    write_dataset(&out, &data, &cfg, "dataset", json!({}), force)?;
    println!("wrote {} records to {}", data.len(), out.display());
    Ok(data)
}

pub fn preprocess_file(cfg: RunConfig, input: &Path, out: &Path, force: bool) -> CliResult<Dataset> {
    cfg.validate()?;
    ensure_writable(out, force)?;
    let data = read_dataset(input)?;
    let filtered = data.try_map(|r| Ok(preprocess(r, &cfg.filter)?))?;
    write_dataset(
        out,
        &filtered,
        &cfg,
        "preprocessed",
        json!({ "source": input }),
        force,
    )?;
    println!("preprocessed {} records into {}", filtered.len(), out.display());
    Ok(filtered)
}

fn epoch_line(total: usize, s: &EpochStats) {
    println!(
        "epoch {:>3}/{total}  loss {:.6}  accuracy {:.4}  macro_f1 {:.4}",
        s.epoch, s.loss, s.accuracy, s.macro_f1
    );
}

fn fit(cfg: &RunConfig, data: &Dataset) -> CliResult<(Model, Vec<EpochStats>)> {
    let mut model = Model::new(cfg.model.clone())?;
    let epochs = cfg.train.epochs;
    let outcome = train_with(&mut model, &data.sample_refs(), data.labels(), &cfg.train, |_, s| {
        epoch_line(epochs, s);
        ControlFlow::Continue(())
    })?;
    Ok((model, outcome.trajectory))
}

pub struct TrainArgs {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<Architecture>,
    pub test: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub force: bool,
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> CliResult<EvalReport> {
    if let Some(a) = args.model {
        cfg.model.architecture = a;
    }
    let dataset = require(args.dataset.or(cfg.paths.dataset.clone()), "dataset")?;
    let out = require(args.out.or(cfg.paths.checkpoint.clone()), "checkpoint path")?;
    cfg.paths.dataset = Some(dataset.clone());
    cfg.paths.checkpoint = Some(out.clone());
    cfg.validate()?;
    let report_path = args.report.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    });
    ensure_writable(&out, args.force)?;
    ensure_writable(&report_path, args.force)?;

    let data = read_dataset(&dataset)?;
    check_shape(&data, &cfg, &dataset)?;
    let test = match &args.test {
        Some(p) => {
            let t = read_dataset(p)?;
            check_shape(&t, &cfg, p)?;
            Some(t)
        }
        None => None,
    };

    let (model, trajectory) = fit(&cfg, &data)?;
    let eval_set = test.as_ref().unwrap_or(&data);
    let report = evaluate(&model, &eval_set.sample_refs(), eval_set.labels())?.with_trajectory(trajectory);

    write_file(&out, &checkpoint::encode(&model, &cfg), args.force)?;
    let evaluated_on = args.test.as_deref().unwrap_or(&dataset);
    write_json(
        &report_path,
        &provenance(
            "eval_report",
            &cfg,
            json!({ "evaluated_on": evaluated_on, "report": report }),
        ),
        args.force,
    )?;
    println!(
        "accuracy {:.4}  macro_f1 {:.4} on {}",
        report.accuracy,
        report.macro_f1,
        evaluated_on.display()
    );
    Ok(report)
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub kfold: Option<usize>,
    pub model: Option<Architecture>,
    pub heatmaps: usize,
    pub window: usize,
    pub stride: usize,
    pub histograms: usize,
    pub bins: usize,
    pub svg: bool,
    pub force: bool,
}

/// Output directory writer that renders SVG twins on request.
struct OutDir {
    dir: PathBuf,
    svg: bool,
    force: bool,
}

impl OutDir {
    fn csv(&self, name: &str, bytes: &[u8], curve: bool) -> CliResult<()> {
        let path = self.dir.join(name);
        write_file(&path, bytes, self.force)?;
        if self.svg && curve {
            let text = String::from_utf8_lossy(bytes);
            let fig = plot::figure_from_csv(&text).map_err(|m| CliError::syntax(&path, m))?;
            let stem = name.trim_end_matches(".csv");
            write_file(&self.dir.join(format!("{stem}.svg")), plot::render(&fig, stem).as_bytes(), self.force)?;
        }
        Ok(())
    }

    fn json(&self, name: &str, value: &Value) -> CliResult<()> {
        write_json(&self.dir.join(name), value, self.force)
    }

    fn sub(&self, name: &str) -> CliResult<OutDir> {
        let dir = self.dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(OutDir {
            dir,
            svg: self.svg,
            force: self.force,
        })
    }

    fn report(&self, label: &str, report: &EvalReport) -> CliResult<()> {
        self.csv("confusion.csv", &export::confusion_csv(&report.confusion), false)?;
        self.csv("f1_table.csv", &export::f1_table_csv(label, report), false)?;
        self.csv("auc.csv", &export::auc_csv(report), false)?;
        for cr in &report.roc {
            if let Some(roc) = &cr.roc {
                self.csv(&format!("roc_class{}.csv", cr.class), &export::roc_csv(roc), true)?;
            }
        }
        if !report.trajectory.is_empty() {
            self.csv("trajectory.csv", &export::trajectory_csv(&report.trajectory), true)?;
        }
        Ok(())
    }
}

fn arch_label(a: Architecture) -> &'static str {
    match a {
        Architecture::Msrt => "msrt",
        Architecture::Baseline => "baseline",
    }
}

pub struct FoldResult {
    pub n_train: usize,
    pub n_test: usize,
    pub report: EvalReport,
}

pub fn eval(cfg: RunConfig, args: EvalArgs) -> CliResult<Vec<FoldResult>> {
    let dataset = require(args.dataset.or(cfg.paths.dataset.clone()), "dataset")?;
    let out_dir = require(args.out_dir.or(cfg.paths.output.clone()), "output directory")?;
    let ckpt_path = args.checkpoint.or(cfg.paths.checkpoint.clone());
    if args.kfold.is_none() && ckpt_path.is_none() {
        return Err(CliError::Validation("eval needs --checkpoint unless --kfold is given".into()));
    }
    let (mut cfg, model) = match &ckpt_path {
        Some(p) => {
            let (c, m) = checkpoint::load(p)?;
            (c, Some(m))
        }
        None => (cfg, None),
    };
    if let Some(a) = args.model {
        if model.is_some() && a != cfg.model.architecture {
            return Err(CliError::Validation("--model contradicts the checkpoint architecture".into()));
        }
        cfg.model.architecture = a;
    }
    cfg.paths.dataset = Some(dataset.clone());
    cfg.paths.checkpoint = ckpt_path;
    cfg.paths.output = Some(out_dir.clone());
    cfg.validate()?;
    if args.histograms > 0 && !matches!(model, Some(Model::Msrt(_))) {
        return Err(CliError::Validation("--histograms needs an MSRT checkpoint".into()));
    }

    let data = read_dataset(&dataset)?;
    check_shape(&data, &cfg, &dataset)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let out = OutDir {
        dir: out_dir,
        svg: args.svg,
        force: args.force,
    };
    out.json("config.json", &provenance("run_config", &cfg, json!({})))?;
    let label = arch_label(cfg.model.architecture);

    let mut results = Vec::new();
    if let Some(k) = args.kfold {
        let folds = kfold_split(data.len(), k, cfg.train.seed)?;
        for (i, test_idx) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let (train_set, test_set) = (data.select(&train_idx), data.select(test_idx));
            println!("fold {}/{k}: train {} test {}", i + 1, train_set.len(), test_set.len());
            let (m, trajectory) = fit(&cfg, &train_set)?;
            let report = evaluate(&m, &test_set.sample_refs(), test_set.labels())?.with_trajectory(trajectory);
            println!("fold {}/{k}: macro_f1 {:.4}", i + 1, report.macro_f1);
            let sub = out.sub(&format!("fold{}", i + 1))?;
            sub.report(label, &report)?;
            sub.json(
                "report.json",
                &provenance(
                    "eval_report",
                    &cfg,
                    json!({
                        "fold": i + 1,
                        "k": k,
                        "n_train": train_set.len(),
                        "n_test": test_set.len(),
                        "report": report,
                    }),
                ),
            )?;
            results.push(FoldResult {
                n_train: train_set.len(),
                n_test: test_set.len(),
                report,
            });
        }
        let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
        out.csv("cv_grid.csv", &export::cv_grid_csv(&reports), false)?;
    } else if let Some(m) = &model {
        let report = evaluate(m, &data.sample_refs(), data.labels())?;
        out.report(label, &report)?;
        out.json(
            "report.json",
            &provenance("eval_report", &cfg, json!({ "evaluated_on": dataset, "report": report })),
        )?;
        println!("accuracy {:.4}  macro_f1 {:.4}", report.accuracy, report.macro_f1);
        results.push(FoldResult {
            n_train: 0,
            n_test: data.len(),
            report,
        });
    }

    for (i, r) in data.records().iter().take(args.heatmaps).enumerate() {
        let h = correlation_heatmap(r, args.window, args.stride)?;
        out.csv(&format!("heatmap_{i}.csv"), &export::matrix_csv(&h), true)?;
    }
    if let Some(Model::Msrt(m)) = &model {
        for (i, r) in data.records().iter().take(args.histograms).enumerate() {
            for (level, h) in pyramid_histograms(m, r, args.bins)? {
                out.csv(&format!("hist_{i}_{level}.csv"), &export::histogram_csv(&h), true)?;
            }
        }
    }
    Ok(results)
}

pub fn plot_file(input: &Path, out: &Path, title: Option<String>, force: bool) -> CliResult<()> {
    let text = std::fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let fig = plot::figure_from_csv(&text).map_err(|m| CliError::syntax(input, m))?;
    let title = title.unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    write_file(out, plot::render(&fig, &title).as_bytes(), force)
}
