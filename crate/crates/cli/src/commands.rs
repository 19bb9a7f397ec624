//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use bitspike::analyze::{
    accuracy_sweep, count_ops, decompose_errors, estimate_energy, evaluate_snn, AnalysisReport,
    EnergyTable, Provenance, Reference, REPORT_SCHEMA_VERSION,
};
use bitspike::ann::checkpoint::{self, ModelFile};
use bitspike::ann::AnnModel;
use bitspike::convert::{self as conv, ConvertError};
use bitspike::snn::dump::{write_spike_dump, SpikeTrain};
use bitspike::snn::{run_snn, Scheduler};
use bitspike::tensor::Tensor;
use bitspike::trainer::data::{load_idx_images, load_idx_labels};
use bitspike::trainer::{self, gen_synthetic, Dataset, RunConfig, TrainError};

use crate::manifest::RunManifest;
use crate::{CmdResult, Failure, Precision};

fn read(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    fs::read(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))
        .map_err(Failure::usage)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_ann(path: &Path) -> Result<AnnModel, Failure> {
    checkpoint::load_ann(&read(path, "ANN checkpoint")?)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::usage)
}

fn load_snn(path: &Path) -> Result<conv::SnnModel, Failure> {
    checkpoint::load_snn(&read(path, "SNN checkpoint")?)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::usage)
}

/// Resolves a dataset path from the config relative to the config's
/// directory.
fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn idx_dataset(images: &Path, labels: Option<&Path>, classes: usize) -> Result<(Dataset, bool), Failure> {
    let x = load_idx_images(&read(images, "IDX images")?)
        .with_context(|| format!("parsing {}", images.display()))
        .map_err(Failure::usage)?;
    let (y, labelled) = match labels {
        Some(p) => (
            load_idx_labels(&read(p, "IDX labels")?)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(Failure::usage)?,
            true,
        ),
        None => (vec![0; x.batch()], false),
    };
    let data = Dataset::new(x, y, classes).map_err(Failure::usage)?;
    Ok((data, labelled))
}

/// `synthetic` or an IDX image file; the flag says whether labels are real.
fn eval_dataset(
    source: &str,
    labels: Option<&Path>,
    samples: usize,
    seed: u64,
    model: &AnnModel,
) -> Result<(Dataset, bool), Failure> {
    if samples == 0 {
        return Err(Failure::usage(anyhow!("--samples must be positive")));
    }
    let (data, labelled) = if source == "synthetic" {
        (gen_synthetic(seed, samples, model.classes()).map_err(Failure::usage)?, true)
    } else {
        let (d, l) = idx_dataset(Path::new(source), labels, model.classes())?;
        (d.take(samples).map_err(Failure::usage)?, l)
    };
    if data.image_shape() != model.input_shape {
        return Err(Failure::usage(anyhow!(
            "images are {:?} but the model expects {:?}",
            data.image_shape(),
            model.input_shape
        )));
    }
    Ok((data, labelled))
}

pub fn train(args: &[String], config: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(config)
        .with_context(|| format!("cannot read config {}", config.display()))
        .map_err(Failure::usage)?;
    let cfg = RunConfig::parse(&text)
        .with_context(|| format!("in {}", config.display()))
        .map_err(Failure::usage)?;
    let mut manifest = RunManifest::new(
        "train",
        args,
        serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
        Some(cfg.train.seed),
    );
    let d = &cfg.data;
    let data = match (&d.images, &d.labels) {
        (Some(images), Some(labels)) => {
            idx_dataset(&relative_to(config, images), Some(&relative_to(config, labels)), d.classes)?.0
        }
        _ => gen_synthetic(cfg.train.seed, d.samples, d.classes).map_err(Failure::usage)?,
    };
    let (train_set, test_set) = data.split(d.test_fraction).map_err(Failure::usage)?;
    let arch = cfg.architecture(data.image_shape(), data.classes);
    let mut model = arch
        .init(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed))
        .map_err(Failure::usage)?;
    let history = trainer::train(&mut model, &train_set, &cfg.train_config(), cfg.regularizer().as_ref())
        .map_err(|e| match e {
            TrainError::NonFinite { .. } => Failure::numeric(e),
            TrainError::Invalid(_) => Failure::usage(e),
            other => Failure::from(anyhow::Error::from(other)),
        })?;
    let test_accuracy = if test_set.is_empty() {
        None
    } else {
        Some(trainer::accuracy(&model, &test_set).map_err(anyhow::Error::from)?)
    };
    write(out, checkpoint::save_ann(&model))?;
    let last = history.epochs.last();
    if let Some(e) = last {
        println!(
            "trained {} epochs: loss {:.4}, train accuracy {:.4}, bit density {:.4}",
            history.epochs.len(),
            e.loss,
            e.train_accuracy,
            e.bit_density
        );
    }
    if let Some(a) = test_accuracy {
        println!("held-out accuracy {a:.4} on {} samples", test_set.len());
    }
    manifest.outputs.push(out.to_path_buf());
    manifest.summary = json!({
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
        "test_accuracy": test_accuracy,
        "final_epoch": last,
    });
    let path = manifest.write(out)?;
    println!("wrote {} and {}", out.display(), path.display());
    Ok(())
}

pub fn convert(
    args: &[String],
    model: &Path,
    timesteps: u32,
    out: &Path,
    exact: bool,
    baseline: bool,
) -> CmdResult {
    let ann = load_ann(model)?;
    let snn = if baseline {
        conv::convert_baseline(&ann, timesteps)
    } else {
        conv::convert(&ann, timesteps, exact)
    }
    .map_err(|e| match e {
        ConvertError::TimestepMismatch { .. } | ConvertError::Ann(_) | ConvertError::Invalid(_) => {
            Failure::usage(e)
        }
        other => Failure::from(anyhow::Error::from(other)),
    })?;
    write(out, checkpoint::save_snn(&snn))?;
    let mut manifest = RunManifest::new(
        "convert",
        args,
        json!({
            "model": model,
            "timesteps": timesteps,
            "exact": exact,
            "neuron": snn.neuron,
        }),
        None,
    );
    if snn.is_exact() {
        let banner = format!(
            "exact mode: T = log2(Q) = {timesteps}, spikes reproduce every activation bit",
        );
        println!("{banner}");
        manifest.banner = Some(banner);
    } else if snn.neuron == conv::NeuronModel::Modified {
        println!(
            "reduced mode: T = {timesteps} < log2(Q) = {}, activations keep {timesteps} bits",
            ann.q_steps().trailing_zeros()
        );
    }
    manifest.outputs.push(out.to_path_buf());
    manifest.summary = json!({ "thresholds": snn.thresholds });
    let path = manifest.write(out)?;
    println!("wrote {} and {}", out.display(), path.display());
    Ok(())
}

fn random_inputs(model: &AnnModel, samples: usize, seed: u64) -> Tensor {
    let [c, h, w] = model.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..samples * c * h * w).map(|_| rng.random::<f32>()).collect();
    Tensor::new(vec![samples, c, h, w], data).expect("input shape")
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    args: &[String],
    ann_path: &Path,
    snn_path: &Path,
    samples: usize,
    tol: f64,
    seed: u64,
    precision: Precision,
    report_path: Option<&Path>,
) -> CmdResult {
    if samples == 0 {
        return Err(Failure::usage(anyhow!("--samples must be positive")));
    }
    let ann = load_ann(ann_path)?;
    let snn = load_snn(snn_path)?;
    let x = random_inputs(&ann, samples, seed);
    let report = match precision {
        Precision::F32 => conv::verify_lossless(&ann, &snn, &x),
        Precision::F64 => conv::verify_lossless(&ann, &snn, &x.cast::<f64>()),
    }
    .map_err(Failure::usage)?;
    for (l, (dev, bad)) in report
        .layer_max_deviation
        .iter()
        .zip(&report.layer_bit_mismatches)
        .enumerate()
    {
        println!("layer {l}: max deviation {dev:.3e}, bit mismatches {bad}");
    }
    println!("logits: max deviation {:.3e}", report.logit_max_deviation);
    let worst = report.max_deviation.max(report.logit_max_deviation);
    let passed = worst <= tol;
    println!(
        "{}: max deviation {worst:.3e} (tolerance {tol:e}) over {} samples",
        if passed { "PASS" } else { "FAIL" },
        report.samples
    );
    if let Some(path) = report_path {
        let body = json!({
            "ann": ann_path,
            "snn": snn_path,
            "seed": seed,
            "precision": format!("{precision:?}").to_lowercase(),
            "tolerance": tol,
            "passed": passed,
            "report": report,
        });
        write(path, serde_json::to_string_pretty(&body).map_err(anyhow::Error::from)?)?;
        let mut manifest = RunManifest::new("verify", args, json!({ "samples": samples, "tol": tol }), Some(seed));
        manifest.outputs.push(path.to_path_buf());
        manifest.summary = json!({ "passed": passed, "max_deviation": worst });
        manifest.write(path)?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::verification(anyhow!(
            "max deviation {worst:.3e} exceeds tolerance {tol:e}"
        )))
    }
}

pub struct InferArgs {
    pub model: PathBuf,
    pub input: String,
    pub labels: Option<PathBuf>,
    pub scheduler: Scheduler,
    pub samples: usize,
    pub seed: u64,
    pub dump_spikes: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn infer(args: &[String], a: &InferArgs) -> CmdResult {
    let file = checkpoint::load(&read(&a.model, "model checkpoint")?)
        .with_context(|| format!("loading {}", a.model.display()))
        .map_err(Failure::usage)?;
    let network = match &file {
        ModelFile::Ann(m) => m,
        ModelFile::Snn(s) => &s.network,
    };
    let (data, labelled) = eval_dataset(&a.input, a.labels.as_deref(), a.samples, a.seed, network)?;
    let mut summary = json!({});
    let logits = match &file {
        ModelFile::Ann(m) => {
            if a.dump_spikes.is_some() {
                return Err(Failure::usage(anyhow!("--dump-spikes needs an SNN checkpoint")));
            }
            m.logits(&data.images).map_err(anyhow::Error::from)?
        }
        ModelFile::Snn(snn) => {
            let trace = run_snn(snn, &data.images, a.scheduler).map_err(Failure::usage)?;
            let l = &trace.ledger;
            println!(
                "{} scheduler, T = {}: peak live planes {}, latency {:.1} layer-steps",
                l.scheduler, l.timesteps, l.peak_live_planes, l.latency_units
            );
            summary["ledger"] = serde_json::to_value(l).map_err(anyhow::Error::from)?;
            if let Some(dir) = &a.dump_spikes {
                let trains = trace
                    .layers
                    .iter()
                    .map(|layer| SpikeTrain::from_planes(&layer.spikes))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(anyhow::Error::from)?;
                let files = write_spike_dump(dir, &trains).map_err(anyhow::Error::from)?;
                println!("wrote {} spike dumps to {}", files.len(), dir.display());
            }
            trace.logits
        }
    };
    let predictions = logits.argmax_rows();
    let accuracy = labelled.then(|| {
        predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64
            / data.len() as f64
    });
    match accuracy {
        Some(acc) => println!("accuracy {acc:.4} on {} samples", data.len()),
        None => println!("predicted {} samples (no labels)", data.len()),
    }
    summary["accuracy"] = json!(accuracy);
    if let Some(out) = &a.out {
        let body = json!({ "predictions": predictions, "accuracy": accuracy });
        write(out, serde_json::to_string_pretty(&body).map_err(anyhow::Error::from)?)?;
    }
    if let Some(artifact) = a.out.as_ref().or(a.dump_spikes.as_ref()) {
        let mut manifest = RunManifest::new(
            "infer",
            args,
            json!({ "model": a.model, "input": a.input, "scheduler": a.scheduler, "samples": a.samples }),
            Some(a.seed),
        );
        manifest.outputs.extend(a.out.iter().chain(a.dump_spikes.iter()).cloned());
        manifest.summary = summary;
        manifest.write(artifact)?;
    }
    Ok(())
}

pub struct AnalyzeArgs {
    pub model: PathBuf,
    pub dataset: String,
    pub labels: Option<PathBuf>,
    pub samples: usize,
    pub seed: u64,
    pub timesteps: Option<u32>,
    pub energy_table: Option<PathBuf>,
    pub width: u32,
    pub float_reference: bool,
    pub sweep: bool,
    pub report: Option<PathBuf>,
}

/// Samples used for the (per-neuron, float64) error decomposition.
const ERROR_SAMPLES: usize = 64;

pub fn analyze(args: &[String], a: &AnalyzeArgs) -> CmdResult {
    let ann = load_ann(&a.model)?;
    let bits = ann.q_steps().trailing_zeros();
    let t = a.timesteps.unwrap_or(bits);
    if t == 0 || t > bits {
        return Err(Failure::usage(anyhow!("--timesteps must be in 1..={bits}")));
    }
    let table = match &a.energy_table {
        Some(p) => {
            let text = String::from_utf8(read(p, "energy table")?)
                .map_err(|e| Failure::usage(anyhow!("energy table is not UTF-8: {e}")))?;
            EnergyTable::from_json(&text).map_err(Failure::usage)?
        }
        None => EnergyTable::default(),
    };
    table.get(a.width).map_err(Failure::usage)?;
    let (data, labelled) = eval_dataset(&a.dataset, a.labels.as_deref(), a.samples, a.seed, &ann)?;

    let modified = conv::convert(&ann, t, false).map_err(anyhow::Error::from)?;
    let baseline = conv::convert_baseline(&ann, t).map_err(anyhow::Error::from)?;
    let (snn_accuracy, activity) = evaluate_snn(&modified, &data).map_err(anyhow::Error::from)?;
    let head = data.take(ERROR_SAMPLES).map_err(anyhow::Error::from)?;
    let reference = if a.float_reference {
        Reference::FloatRelu
    } else {
        Reference::Quantized
    };
    let errors = decompose_errors(&ann, &baseline, &modified, &head.images.cast::<f64>(), reference)
        .map_err(anyhow::Error::from)?;
    let ops = count_ops(&ann, &activity.densities(), t).map_err(anyhow::Error::from)?;
    let energy = estimate_energy(&ops, &table, a.width).map_err(anyhow::Error::from)?;
    let sweep = if a.sweep {
        accuracy_sweep(&ann, &data, &(1..=bits).collect::<Vec<_>>()).map_err(anyhow::Error::from)?
    } else {
        Vec::new()
    };

    println!("T = {t}, {} samples, spike density {:.4}", data.len(), activity.overall);
    if labelled {
        println!("SNN accuracy {snn_accuracy:.4}");
    }
    for (b, m) in errors.baseline.iter().zip(&errors.modified) {
        println!(
            "block {}: expected quantization {:.4}; baseline q/c/d {:.4}/{:.4}/{:.4}; bit-serial q/c/d {:.4}/{:.4}/{:.4}",
            b.layer, b.expected_quantization, b.quantization, b.clipping, b.deviation,
            m.quantization, m.clipping, m.deviation
        );
    }
    println!(
        "energy {:.1} pJ at {} bits, shift share {:.2}%",
        energy.total_pj,
        a.width,
        energy.shift_share * 100.0
    );
    for p in &sweep {
        println!("sweep T = {}: SNN {:.4} (ANN {:.4})", p.timesteps, p.snn_accuracy, p.ann_accuracy);
    }

    if let Some(path) = &a.report {
        let report = AnalysisReport {
            schema_version: REPORT_SCHEMA_VERSION,
            provenance: Provenance {
                tool: "bitspike".into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                model: Some(a.model.display().to_string()),
                dataset: a.dataset.clone(),
                samples: data.len(),
                timesteps: t,
                seed: Some(a.seed),
                energy_table: table.provenance.clone(),
            },
            activity,
            energy,
            errors: Some(errors),
            sweep,
        };
        write(path, report.to_json())?;
        let mut manifest = RunManifest::new(
            "analyze",
            args,
            json!({ "model": a.model, "dataset": a.dataset, "timesteps": t, "width": a.width }),
            Some(a.seed),
        );
        manifest.outputs.push(path.clone());
        manifest.summary = json!({ "snn_accuracy": labelled.then_some(snn_accuracy) });
        manifest.write(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
