use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use cmcseg::data::{
    gen_synthetic_case, load_checkpoint, partial_path, read_intensity, read_labels,
    save_checkpoint, write_atomic, write_volume, Dataset, Volume,
};
use cmcseg::gradcheck::run_suite;
use cmcseg::metrics::{confusion, ConfusionMatrix, MetricsReport};
use cmcseg::network::{init_params, predict_volume};
use cmcseg::training::run_two_phase;
use cmcseg::{LabelVolume, ModelParams, MultiModalVolume};

use crate::failure::{Failure, Outcome};
use crate::run_config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.mmck";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

pub fn image_file(i: usize) -> String {
    format!("case_{i}_img.mmv")
}

pub fn label_file(i: usize) -> String {
    format!("case_{i}_lbl.mmv")
}

pub fn gen(out: &Path, count: usize, seed: u64, dims: (usize, usize, usize)) -> Outcome {
    fs::create_dir_all(out)
        .map_err(|e| Failure::data(anyhow::anyhow!("cannot create {}: {e}", out.display())))?;
    for i in 0..count {
        let (volume, labels) = gen_synthetic_case(seed.wrapping_add(i as u64), dims)?;
        write_volume(&out.join(image_file(i)), &Volume::Intensity(volume))?;
        write_volume(&out.join(label_file(i)), &Volume::Labels(labels))?;
    }
    println!("wrote {count} cases to {}", out.display());
    Ok(())
}

/// Case ids with both files present, ascending.
fn case_ids(dir: &Path) -> Result<Vec<usize>, Failure> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot read data directory {}", dir.display()))
        .map_err(Failure::data)?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| Failure::data(e.into()))?.file_name();
        let Some(id) = name
            .to_str()
            .and_then(|n| n.strip_prefix("case_"))
            .and_then(|n| n.strip_suffix("_img.mmv"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if !dir.join(label_file(id)).is_file() {
            return Err(Failure::data(anyhow::anyhow!(
                "{} has no label file {}",
                image_file(id),
                label_file(id)
            )));
        }
        ids.push(id);
    }
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Failure::data(anyhow::anyhow!(
            "no case_<i>_img.mmv files in {}",
            dir.display()
        )));
    }
    Ok(ids)
}

/// Reads every case in `dir`. With `same_extent` the slices must match the
/// model's configured height and width.
fn load_cases(
    dir: &Path,
    cfg: &cmcseg::ModelConfig,
    same_extent: bool,
) -> Result<Vec<(MultiModalVolume, LabelVolume)>, Failure> {
    let mut cases = Vec::new();
    for id in case_ids(dir)? {
        let volume = read_intensity(&dir.join(image_file(id)))?;
        let labels = read_labels(&dir.join(label_file(id)))?;
        let (_, h, w) = volume.dims();
        if volume.modalities() != cfg.modality_count() {
            return Err(Failure::data(anyhow::anyhow!(
                "case {id} has {} modalities, the model expects {}",
                volume.modalities(),
                cfg.modality_count()
            )));
        }
        if same_extent && (h, w) != (cfg.input_height, cfg.input_width) {
            return Err(Failure::data(anyhow::anyhow!(
                "case {id} slices are {h}x{w}, the model expects {}x{}; set input_height and input_width",
                cfg.input_height,
                cfg.input_width
            )));
        }
        if labels.dims() != volume.dims() {
            return Err(Failure::data(anyhow::anyhow!(
                "case {id}: label dims {:?} differ from volume dims {:?}",
                labels.dims(),
                volume.dims()
            )));
        }
        labels.validate(cfg.class_count)?;
        cases.push((volume, labels));
    }
    Ok(cases)
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let data = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("no data directory given")))?;
    let out = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("no output directory given")))?;
    let cases = load_cases(data, &cfg.model, true)?;
    let dataset = Dataset::new(cases, cfg.model.sequence_length, cfg.sequence_stride)?;
    fs::create_dir_all(out)
        .map_err(|e| Failure::data(anyhow::anyhow!("cannot create {}: {e}", out.display())))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;

    let mut params = init_params::<f32>(&cfg.model)?;
    let log_path = out.join(LOG_FILE);
    let partial = partial_path(&log_path);
    let io_err = |e: std::io::Error| {
        Failure::data(anyhow::anyhow!("cannot write {}: {e}", partial.display()))
    };
    let mut log = std::io::BufWriter::new(fs::File::create(&partial).map_err(io_err)?);
    let mut write_err = None;
    let total = cfg.train.total_steps();
    let result = run_two_phase(&cfg.train, &mut params, &dataset, |r| {
        if write_err.is_none() {
            write_err = writeln!(log, "{r}").err();
        }
        if r.step % 25 == 0 || r.step == total {
            eprintln!("{r}");
        }
    });
    let flushed = log.flush();
    drop(log);
    result?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    flushed.map_err(io_err)?;
    fs::rename(&partial, &log_path).map_err(io_err)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &params)?;
    println!(
        "trained {} sequences from {} cases for {total} steps; wrote {}",
        dataset.sequences.len(),
        dataset.volumes.len(),
        out.display()
    );
    Ok(())
}

/// Where a command writing `file` echoes its resolved configuration.
pub fn config_echo_path(file: &Path) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".config.txt");
    file.with_file_name(name)
}

pub struct EvalInputs<'a> {
    pub model: Option<&'a Path>,
    pub data: &'a Path,
    pub report: &'a Path,
    pub oracle: bool,
}

pub fn eval(cfg: &RunConfig, model_keys: &[(String, String)], inputs: EvalInputs<'_>) -> Outcome {
    let params = match inputs.model {
        Some(p) => Some(load_model(p, model_keys)?),
        None if inputs.oracle => None,
        None => {
            return Err(Failure::usage(anyhow::anyhow!(
                "--model is required unless --oracle is given"
            )))
        }
    };
    let model_cfg = params.as_ref().map_or(&cfg.model, |p| &p.config);
    let k = model_cfg.class_count;
    let mut total = ConfusionMatrix::new(k);
    for (i, (mut volume, truth)) in load_cases(inputs.data, model_cfg, false)?
        .into_iter()
        .enumerate()
    {
        let pred = match &params {
            Some(p) if !inputs.oracle => {
                volume.normalize();
                predict_volume(p, &volume, p.config.sequence_length)?
            }
            _ => truth.clone(),
        };
        let cm = confusion(&pred, &truth, k)?;
        eprintln!("case {i}: {} voxels", cm.total());
        total.merge(&cm)?;
    }
    let report = MetricsReport::from_confusion(&total, &cfg.regions);
    let text = report.to_text();
    write_atomic(inputs.report, text.as_bytes())?;
    let resolved = RunConfig {
        model: model_cfg.clone(),
        data_dir: Some(inputs.data.to_path_buf()),
        ..cfg.clone()
    };
    write_atomic(
        &config_echo_path(inputs.report),
        resolved.to_text().as_bytes(),
    )?;
    print!("{text}");
    Ok(())
}

/// Loads a checkpoint; every model setting the user supplied must agree
/// with the checkpoint's own.
fn load_model(path: &Path, model_keys: &[(String, String)]) -> Result<ModelParams<f32>, Failure> {
    let params = load_checkpoint(path)?;
    let mut requested = params.config.clone();
    for (k, v) in model_keys {
        requested
            .apply(k, v)
            .map_err(|e| Failure::usage(e.into()))?;
    }
    if requested != params.config {
        return Err(Failure::data(anyhow::anyhow!(
            "checkpoint {} does not match the given model settings; it was trained with:\n{}",
            path.display(),
            params.config.to_text()
        )));
    }
    Ok(params)
}

pub fn predict(
    cfg: &RunConfig,
    model_keys: &[(String, String)],
    model: &Path,
    volume: &Path,
    out: &Path,
) -> Outcome {
    let params = load_model(model, model_keys)?;
    let mut v = read_intensity(volume)?;
    v.normalize();
    let labels = predict_volume(&params, &v, params.config.sequence_length)?;
    write_volume(out, &Volume::Labels(labels))?;
    let resolved = RunConfig {
        model: params.config.clone(),
        ..cfg.clone()
    };
    write_atomic(&config_echo_path(out), resolved.to_text().as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn gradcheck(seed: u64, tolerance: f64) -> Outcome {
    let reports = run_suite(seed, tolerance);
    println!(
        "{:<18} {:>6} {:>14}  status",
        "layer", "seed", "max_rel_error"
    );
    let mut failed = Vec::new();
    for (s, r) in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<18} {:>6} {:>14.3e}  {status}",
            r.op,
            s,
            r.max_rel_error()
        );
        if let Some(msg) = &r.failure {
            println!("    {msg}");
        }
        if !r.passed() {
            failed.push(format!("{}@{s}", r.op));
        }
    }
    if failed.is_empty() {
        println!(
            "all {} checks passed at tolerance {tolerance:e}",
            reports.len()
        );
        Ok(())
    } else {
        Err(Failure::gradcheck(anyhow::anyhow!(
            "{} of {} checks exceed tolerance {tolerance:e}: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}
