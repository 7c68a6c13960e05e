//! Subcommand implementations, kept in library form so tests can drive them
//! in-process.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset_io;
use crate::error::{CliError, Result};
use crate::train::{self, EvalMetrics, TrainOutcome};
use loupe_core::backbone::{self, ModelState};
use loupe_core::data::{self, Dataset};
use loupe_core::gradcheck::{grad_check, GradCheckReport};
use loupe_core::graph::{Graph, Real, Shape};
use loupe_core::optim;
use loupe_core::params::ParamSet;
use loupe_core::viz;
use std::path::{Path, PathBuf};

/// Flags shared by subcommands; each entry overrides the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub precision: Option<String>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &mut RunConfig, overrides: &Overrides) -> Result<()> {
    if let Some(seed) = overrides.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &overrides.out_dir {
        cfg.run.out_dir = out.clone();
    }
    if let Some(p) = &overrides.precision {
        match p.as_str() {
            "single" | "double" => cfg.run.precision = p.clone(),
            other => {
                return Err(CliError::Config(format!(
                    "at run.precision: expected single or double, got `{other}`"
                )))
            }
        }
    }
    cfg.resolve()
}

/// Load the configured dataset file or generate the splits in memory.
pub fn obtain_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.file {
        Some(path) => {
            let ds = dataset_io::read_lfg1(Path::new(path))?;
            if ds.spec.image_size != cfg.data.image_size {
                return Err(CliError::Config(format!(
                    "dataset file image size {} does not match data.image_size {}",
                    ds.spec.image_size, cfg.data.image_size
                )));
            }
            if ds.spec.classes != cfg.data.classes {
                return Err(CliError::Config(format!(
                    "dataset file has {} classes, config expects {}",
                    ds.spec.classes, cfg.data.classes
                )));
            }
            Ok(ds)
        }
        None => Ok(data::generate(&cfg.dataset_spec())?),
    }
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<TrainOutcome> {
    let cfg = load_config(config_path, overrides)?;
    let dataset = obtain_dataset(&cfg)?;
    train::run_train(&cfg, &dataset)
}

pub fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config_path, &Overrides::default())?;
    let dataset = data::generate(&cfg.dataset_spec())?;
    dataset_io::write_lfg1(out, &dataset)?;
    println!(
        "wrote {} ({} train / {} val / {} test, {} classes, {}px)",
        out.display(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.spec.classes,
        dataset.spec.image_size
    );
    Ok(())
}

/// Rebuild a typed model from a checkpoint, validating layout compatibility.
fn model_from_checkpoint<T: Real>(ckpt: &checkpoint::Checkpoint) -> Result<ModelState<T>> {
    let bcfg = ckpt.config.backbone_config();
    let expected = backbone::build::<f32>(&bcfg)?;
    expected.params.check_layout(&ckpt.params).map_err(|e| {
        CliError::Config(format!(
            "checkpoint incompatible with its config ({e}); expected layout: {}",
            expected
                .params
                .iter()
                .map(|p| format!("{} {}", p.name, p.shape))
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    Ok(ModelState {
        config: bcfg,
        params: ckpt.params.cast::<T>(),
        step: 0,
    })
}

pub struct EvalOutcome {
    pub split: String,
    pub metrics: EvalMetrics,
}

pub fn cmd_eval(
    checkpoint_dir: &Path,
    data_path: &Path,
    split: &str,
    precision: Option<&str>,
) -> Result<EvalOutcome> {
    let ckpt = checkpoint::load(checkpoint_dir)?;
    let mut cfg = ckpt.config.clone();
    if let Some(p) = precision {
        apply_overrides(
            &mut cfg,
            &Overrides {
                precision: Some(p.to_string()),
                ..Default::default()
            },
        )?;
    }
    let dataset = dataset_io::read_lfg1(data_path)?;
    if dataset.spec.image_size != cfg.data.image_size {
        return Err(CliError::Config(format!(
            "checkpoint expects {0}x{0} images, dataset file has {1}x{1}",
            cfg.data.image_size, dataset.spec.image_size
        )));
    }
    if dataset.spec.classes != cfg.data.classes {
        return Err(CliError::Config(format!(
            "checkpoint head has {} classes, dataset file has {}",
            cfg.data.classes, dataset.spec.classes
        )));
    }
    let samples = match split {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(CliError::Config(format!(
                "unknown split `{other}` (expected train, val, or test)"
            )))
        }
    };
    let et = cfg.eval_transform();
    let transformed: Vec<_> = samples
        .iter()
        .map(|s| data::eval_transform(s, &et))
        .collect::<loupe_core::Result<_>>()?;

    let metrics = match cfg.precision() {
        loupe_core::Precision::Single => {
            let state = model_from_checkpoint::<f32>(&checkpoint::Checkpoint {
                params: ckpt.params.clone(),
                config: cfg.clone(),
            })?;
            train::evaluate(&state, &transformed, cfg.run.workers)?
        }
        loupe_core::Precision::Double => {
            let state = model_from_checkpoint::<f64>(&checkpoint::Checkpoint {
                params: ckpt.params.clone(),
                config: cfg.clone(),
            })?;
            train::evaluate(&state, &transformed, cfg.run.workers)?
        }
    };
    Ok(EvalOutcome {
        split: split.to_string(),
        metrics,
    })
}

pub struct VizOutcome {
    pub files: Vec<PathBuf>,
    pub sidecar: PathBuf,
}

pub fn cmd_viz(
    checkpoint_dir: &Path,
    data_path: &Path,
    n: usize,
    out_dir: &Path,
) -> Result<VizOutcome> {
    let ckpt = checkpoint::load(checkpoint_dir)?;
    if !ckpt.config.model.loupe {
        return Err(CliError::Numeric(
            "contract violation: viz requires a checkpoint with the attention module enabled"
                .into(),
        ));
    }
    let dataset = dataset_io::read_lfg1(data_path)?;
    if dataset.spec.image_size != ckpt.config.data.image_size {
        return Err(CliError::Config(format!(
            "checkpoint expects {0}x{0} images, dataset file has {1}x{1}",
            ckpt.config.data.image_size, dataset.spec.image_size
        )));
    }
    if n == 0 || n > dataset.test.len() {
        return Err(CliError::Config(format!(
            "n must lie in [1, {}], got {n}",
            dataset.test.len()
        )));
    }
    let state = model_from_checkpoint::<f32>(&ckpt)?;
    let et = ckpt.config.eval_transform();
    std::fs::create_dir_all(out_dir)?;

    let mut files = Vec::with_capacity(n);
    let sidecar = out_dir.join("viz_metrics.jsonl");
    let mut sidecar_file = std::fs::File::create(&sidecar)?;
    use std::io::Write as _;

    for (index, raw) in dataset.test.iter().take(n).enumerate() {
        let sample = data::eval_transform(raw, &et)?;
        let s = sample.size;
        let mut g = Graph::new();
        let img = g.leaf(
            sample.image.iter().map(|&v| v).collect(),
            Shape::nchw(1, 3, s, s),
            false,
        )?;
        let fwd = backbone::forward(&mut g, &state, img, false)?;
        let map_var = fwd.map.expect("loupe enabled");
        let ms = g.shape(map_var);
        let map = g.data(map_var);

        let (up, _) = viz::upsample_bilinear(map, ms, (s, s))?;
        let top = viz::top_fraction_mask(&up, s, s, 0.05)?;
        let contours = viz::trace_contours(&top);
        let rgb = viz::render_overlay(&sample.image, s, &contours)?;
        let ppm = viz::encode_ppm(&rgb, s, s)?;
        let path = out_dir.join(format!("sample_{index:04}.ppm"));
        std::fs::write(&path, ppm)?;

        let gt = viz::BinaryMask::from_bytes(&sample.mask, s, s)?;
        let hit = viz::pointing_game(&up, s, s, &gt)?;
        let iou = viz::attention_iou(&top, &gt)?;
        let logits = g.data(fwd.logits);
        let pred = (0..logits.len())
            .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
            .unwrap_or(0);
        let mass: f64 = map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64;
        let line = serde_json::json!({
            "index": index,
            "label": sample.label,
            "prediction": pred,
            "hit": hit,
            "iou": iou,
            "attention_mass": mass,
        });
        writeln!(sidecar_file, "{line}")?;
        files.push(path);
    }
    sidecar_file.flush()?;
    Ok(VizOutcome { files, sidecar })
}

pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub loupe_checked: bool,
    pub pass: bool,
}

/// Gradient check of the full composite loss on a 4-sample batch, in double
/// precision regardless of the configured mode.
pub fn cmd_gradcheck(config_path: &Path, overrides: &Overrides, eps: f64) -> Result<GradCheckOutcome> {
    let mut cfg = load_config(config_path, overrides)?;
    cfg.run.precision = "double".into();
    let dataset = obtain_dataset(&cfg)?;
    let et = cfg.eval_transform();
    let batch: Vec<_> = dataset
        .val
        .iter()
        .take(4)
        .map(|s| data::eval_transform(s, &et))
        .collect::<loupe_core::Result<_>>()?;
    if batch.is_empty() {
        return Err(CliError::Config("validation split is empty".into()));
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let s = batch[0].size;
    let images: Vec<f64> = batch
        .iter()
        .flat_map(|sample| sample.image.iter().map(|&v| v as f64))
        .collect();

    let bcfg = cfg.backbone_config();
    let state = backbone::build::<f64>(&bcfg)?;
    let loss_cfg = cfg.loss_config();
    let n = batch.len();

    let eval = |p: &ParamSet<f64>| -> loupe_core::Result<f64> {
        let mut g = Graph::new();
        let eval_state = ModelState {
            config: bcfg.clone(),
            params: p.clone(),
            step: 0,
        };
        let img = g.leaf(images.clone(), Shape::nchw(n, 3, s, s), false)?;
        let fwd = backbone::forward(&mut g, &eval_state, img, false)?;
        let loss = optim::composite_loss(&mut g, fwd.logits, &labels, fwd.map, &loss_cfg)?;
        Ok(g.scalar(loss.total))
    };

    // analytic gradients
    let mut g = Graph::new();
    let img = g.leaf(images.clone(), Shape::nchw(n, 3, s, s), false)?;
    let fwd = backbone::forward(&mut g, &state, img, true)?;
    let loss = optim::composite_loss(&mut g, fwd.logits, &labels, fwd.map, &loss_cfg)?;
    g.backward(loss.total)?;
    let analytic: Vec<Vec<f64>> = fwd
        .param_vars
        .iter()
        .map(|&v| g.grad(v).expect("gradient").to_vec())
        .collect();

    let mut params = state.params.clone();
    let report = grad_check(&mut params, &analytic, eval, eps, 220, cfg.run.seed)?;
    let pass = report.max_rel_err < 1e-4;

    for (name, err) in &report.per_param {
        println!("  {name:<28} max_rel_err {err:.3e}");
    }
    if !cfg.model.loupe {
        println!("  loupe parameters: absent (module disabled)");
    }
    println!(
        "checked {} coordinates across {} parameter groups",
        report.coords_checked,
        report.per_param.len()
    );
    println!(
        "max relative error {:.3e} at {}[{}]: {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        if pass { "PASS" } else { "FAIL" }
    );
    let loupe_checked = report
        .per_param
        .iter()
        .any(|(name, _)| name.starts_with("loupe."));
    Ok(GradCheckOutcome {
        report,
        loupe_checked,
        pass,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seeds: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_sd: f64,
    pub attention_mass_mean: f64,
    pub per_seed: Vec<SweepCell>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepCell {
    pub seed: u64,
    pub test_accuracy: f64,
    pub attention_mass: f64,
}

/// Train one model per (lambda, seed) with a shared seed set and report
/// mean +- sd test accuracy plus mean attention mass per lambda.
pub fn cmd_sweep(
    config_path: &Path,
    overrides: &Overrides,
    lambdas: &[f64],
    seeds: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(CliError::Config("lambda list must be nonempty".into()));
    }
    if seeds == 0 {
        return Err(CliError::Config("seeds must be >= 1".into()));
    }
    let base = load_config(config_path, overrides)?;
    let dataset = obtain_dataset(&base)?;
    let sweep_root = PathBuf::from(&base.run.out_dir);

    let mut rows = Vec::with_capacity(lambdas.len());
    for (li, &lambda) in lambdas.iter().enumerate() {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(CliError::Config(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let mut cells = Vec::with_capacity(seeds);
        for si in 0..seeds {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            cfg.run.seed = base.run.seed + si as u64;
            cfg.run.out_dir = sweep_root
                .join(format!("sweep_l{li}_s{si}"))
                .to_string_lossy()
                .into_owned();
            cfg.resolve()?;
            println!("sweep: lambda {lambda} seed {}", cfg.run.seed);
            let outcome = train::run_train(&cfg, &dataset)?;
            cells.push(SweepCell {
                seed: cfg.run.seed,
                test_accuracy: outcome.test.accuracy,
                attention_mass: outcome.test.mean_attention_mass.unwrap_or(0.0),
            });
        }
        let accs: Vec<f64> = cells.iter().map(|c| c.test_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        let mass = cells.iter().map(|c| c.attention_mass).sum::<f64>() / cells.len() as f64;
        rows.push(SweepRow {
            lambda,
            seeds,
            test_accuracy_mean: mean,
            test_accuracy_sd: var.sqrt(),
            attention_mass_mean: mass,
            per_seed: cells,
        });
    }

    std::fs::create_dir_all(&sweep_root)?;
    let table_path = sweep_root.join("sweep.jsonl");
    let mut f = std::fs::File::create(&table_path)?;
    use std::io::Write as _;
    println!("{:>8} {:>6} {:>18} {:>16}", "lambda", "seeds", "test_acc (mean+-sd)", "attn_mass");
    for row in &rows {
        writeln!(f, "{}", serde_json::to_string(row).map_err(|e| CliError::Io(e.to_string()))?)?;
        println!(
            "{:>8} {:>6} {:>11.4} +- {:.4} {:>16.4}",
            row.lambda, row.seeds, row.test_accuracy_mean, row.test_accuracy_sd, row.attention_mass_mean
        );
    }
    println!("sweep table written to {}", table_path.display());
    Ok(rows)
}
