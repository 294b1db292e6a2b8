use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use boosts::data::{csv_headers, load_columns, load_csv, split};
use boosts::evaluate::{metrics, run_study, Metric, StudyConfig};
use boosts::simulate::simulate as run_simulation;
use boosts::tune::{design_csv, space_filling_design_with, tune as run_tune};
use boosts::{fit_with_report, predict as run_predict, Ensemble, SpatialDataset};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

const COORDS: [&str; 3] = ["sx", "sy", "sz"];

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} not found", path.display())))
    }
}

fn out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("creating {}: {e}", out.display())))
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn data_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = flag
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| CliError::Usage("no data file: pass --data or set data.path".into()))?;
    require_file(&p)?;
    Ok(p)
}

/// Loads a dataset, inferring coordinate and feature columns unless configured.
fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<SpatialDataset, CliError> {
    let headers = csv_headers(path)?;
    let coords = match &cfg.data.coords {
        Some(c) => c.clone(),
        None => COORDS
            .iter()
            .filter(|c| headers.iter().any(|h| h == *c))
            .map(|c| c.to_string())
            .collect(),
    };
    if coords.is_empty() {
        return Err(CliError::Usage(format!("{} has no coordinate columns", path.display())));
    }
    let response = &cfg.data.response;
    let features = match &cfg.data.features {
        Some(f) => f.clone(),
        None => headers
            .iter()
            .filter(|h| !coords.contains(h) && *h != response && *h != "index")
            .cloned()
            .collect(),
    };
    Ok(load_csv(path, &coords, &features, response)?)
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    out_dir(out)?;
    let sim = run_simulation(&cfg.simulate)?;
    boosts::data::write_csv(&sim.dataset, out.join("data.csv"))?;
    cfg.simulate.write_truth(out.join("truth.json"))?;
    println!(
        "{}",
        json!({ "rows": sim.dataset.n(), "features": sim.dataset.n_features(), "data": out.join("data.csv") })
    );
    Ok(())
}

pub fn fit(cfg: &RunConfig, data: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let path = data_path(cfg, data)?;
    let ds = load_dataset(cfg, &path)?;
    let sp = split(&ds, cfg.data.train_fraction, cfg.fit.seed)?;
    let report = fit_with_report(&ds, &sp, &cfg.fit)?;
    let ens = &report.ensemble;

    out_dir(out)?;
    ens.save(out.join("model.json"))?;
    let mut trace = String::from("tree_index,objective,n_leaves\n");
    for (k, obj) in ens.objective_trace.iter().enumerate() {
        let leaves = if k == 0 { String::new() } else { ens.trees[k - 1].n_leaves().to_string() };
        let _ = writeln!(trace, "{k},{obj},{leaves}");
    }
    write(out.join("trace.csv"), &trace)?;
    if let Some(v) = &report.initial_variogram {
        v.write_csv(out.join("variogram.csv"))?;
    }
    write(out.join("split.json"), &sp.to_json())?;
    println!(
        "{}",
        json!({
            "trees": ens.trees.len(),
            "trees_effective": ens.n_trees_effective(),
            "objective_initial": ens.objective_trace[0],
            "objective_final": ens.objective_trace.last(),
            "covariance_final": ens.covariance_history.last(),
        })
    );
    Ok(())
}

pub fn predict(model: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    require_file(model)?;
    require_file(data)?;
    let ens = Ensemble::load(model)?;
    let x = load_columns(data, &ens.feature_names)?;
    let pred = run_predict(&ens, &x)?;
    out_dir(out)?;
    let mut text = String::from("index,prediction\n");
    for (i, p) in pred.iter().enumerate() {
        let _ = writeln!(text, "{i},{p}");
    }
    write(out.join("predictions.csv"), &text)?;
    println!("{}", json!({ "rows": pred.len(), "predictions": out.join("predictions.csv") }));
    Ok(())
}

/// `(index, value)` pairs; the index column is optional and defaults to the row number.
fn indexed_column(path: &Path, value: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let headers = csv_headers(path)?;
    let values = load_columns(path, &[value.to_string()])?;
    let index: Vec<usize> = if headers.iter().any(|h| h == "index") {
        let raw = load_columns(path, &["index".to_string()])?;
        (0..raw.nrows())
            .map(|i| {
                let v = raw[(i, 0)];
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(CliError::Usage(format!("{}: bad index {v} on row {}", path.display(), i + 1)))
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        (0..values.nrows()).collect()
    };
    Ok(index.into_iter().zip((0..values.nrows()).map(|i| values[(i, 0)])).collect())
}

/// Prints the metrics; also writes `metrics.json` when an output directory is set.
pub fn evaluate(cfg: &RunConfig, truth: &Path, predictions: &Path) -> Result<(), CliError> {
    require_file(truth)?;
    require_file(predictions)?;
    let headers = csv_headers(truth)?;
    let truth_col = if headers.iter().any(|h| *h == cfg.data.response) {
        cfg.data.response.as_str()
    } else {
        "prediction"
    };
    let truth_map: HashMap<usize, f64> = indexed_column(truth, truth_col)?.into_iter().collect();
    let mut y = Vec::new();
    let mut p = Vec::new();
    for (i, v) in indexed_column(predictions, "prediction")? {
        let t = truth_map
            .get(&i)
            .ok_or_else(|| CliError::Usage(format!("no truth for index {i}")))?;
        y.push(*t);
        p.push(v);
    }
    let m = metrics(&y, &p)?;
    let text = serde_json::to_string_pretty(&m).expect("metrics serialize");
    if let Some(dir) = &cfg.out {
        out_dir(dir)?;
        write(dir.join("metrics.json"), &text)?;
    }
    println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
    Ok(())
}

pub fn tune(cfg: &RunConfig, data: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let path = data_path(cfg, data)?;
    let ds = load_dataset(cfg, &path)?;
    let seed = cfg.fit.seed;
    let sp = split(&ds, cfg.data.train_fraction, seed)?;
    let t = &cfg.tune;
    let design = space_filling_design_with(t.runs, t.lambda_range, t.gamma_range, seed, t.candidates)?;
    let res = run_tune(&ds, &sp, &cfg.fit, &design, &t.options(seed))?;
    out_dir(out)?;
    write(out.join("design.csv"), &design_csv(&res.points))?;
    let best = &res.points[res.recommended_index];
    let rec = json!({
        "lambda": res.recommended.0,
        "gamma": res.recommended.1,
        "index": res.recommended_index,
        "val_rmse": best.val_rmse,
        "leaf_count_quartiles": best.leaf_count_quartiles,
        "window_satisfied": res.window_satisfied,
    });
    write(
        out.join("recommendation.json"),
        &serde_json::to_string_pretty(&rec).expect("json"),
    )?;
    println!("{rec}");
    Ok(())
}

pub fn compare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let study = StudyConfig {
        replicates: cfg.compare.replicates,
        sim: cfg.simulate.clone(),
        train_fraction: cfg.compare.train_fraction,
        fit: cfg.fit.clone(),
    };
    let res = run_study(&study)?;
    out_dir(out)?;
    let mut summary = serde_json::Map::new();
    for m in Metric::ALL {
        res.write_csv(m, out.join(format!("{}.csv", m.name())))?;
        let ps: serde_json::Map<String, serde_json::Value> = boosts::evaluate::Method::ALL[1..]
            .iter()
            .map(|&k| (k.name().to_string(), json!(res.wilcoxon_against(k, m).ok())))
            .collect();
        summary.insert(m.name().to_string(), serde_json::Value::Object(ps));
    }
    println!("{}", json!({ "replicates": res.replicates.len(), "wilcoxon_p": summary }));
    Ok(())
}
