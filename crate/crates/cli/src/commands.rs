use std::io::Write;
use std::path::Path;

use fedsim::data::{resize_bilinear, read_image, write_dir, DatasetManifest, LabeledExample, Split};
use fedsim::distill::Teacher;
use fedsim::fed::{run_federation, write_history, Federation, LoraStateDict};
use fedsim::gradcam::{default_layer, export_overlay, gradcam_pp};
use fedsim::metrics::{evaluate_logits, MetricsReport};
use fedsim::model::{ModelConfig, MsDeit, Trainable};
use fedsim::tensor::Tensor;
use fedsim::train::{predict_examples, pretrain_teacher, OptimConfig, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, RunArgs};

type Result<T> = std::result::Result<T, CliError>;

fn io<'a>(context: &str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    let context = context.to_string();
    move |e| CliError {
        code: crate::EXIT_RUNTIME,
        message: format!("{context} {}: {e}", path.display()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        if let Some(s) = config.data.synthetic.as_mut() {
            s.seed = seed;
        }
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(r) = args.rounds {
        config.federation.rounds = r;
    }
    if let Some(p) = &args.data {
        config.data.path = Some(p.clone());
    }
    config.validate()?;
    Ok(config)
}

fn dataset(config: &RunConfig, args: &RunArgs) -> Result<(Vec<LabeledExample>, DatasetManifest)> {
    config.dataset(args.synthetic)
}

fn build_model(config: &RunConfig) -> Result<MsDeit> {
    MsDeit::new(config.model.clone(), config.seed).map_err(CliError::from_core)
}

fn load_checkpoint(model: &mut MsDeit, path: &Path) -> Result<()> {
    let state = LoraStateDict::load(path).map_err(|e| match e {
        fedsim::Error::Io(_) => CliError {
            code: crate::EXIT_CHECKPOINT,
            message: format!("cannot read checkpoint {}: {e}", path.display()),
        },
        e => CliError::checkpoint(e),
    })?;
    model.load_lora_state(&state).map_err(CliError::checkpoint)
}

fn teacher(config: &RunConfig, train: &[LabeledExample], manifest: &DatasetManifest) -> Result<Option<Box<dyn Teacher>>> {
    if !config.teacher.enabled || config.distill.alpha >= 1.0 {
        return Ok(None);
    }
    let t = &config.teacher;
    let model = ModelConfig {
        embed_dim: t.embed_dim,
        depth: t.depth,
        ..config.model.clone()
    };
    let optim = OptimConfig {
        lr: t.lr,
        ..config.optim.clone()
    };
    let (teacher, history) =
        pretrain_teacher(model, train, &manifest.normalization, t.epochs, optim, config.seed).map_err(CliError::from_core)?;
    if let Some(last) = history.last() {
        eprintln!("teacher: {} epochs, train loss {:.4}, accuracy {:.3}", history.len(), last.loss, last.accuracy);
    }
    Ok(Some(Box::new(teacher)))
}

fn evaluate_split(model: &MsDeit, examples: &[LabeledExample], manifest: &DatasetManifest, split: Split) -> Result<MetricsReport> {
    let chosen = manifest.select(examples, split);
    if chosen.is_empty() {
        return Err(CliError::usage(format!("the {} split is empty", split.name())));
    }
    let logits = predict_examples(model, &chosen, &manifest.normalization).map_err(CliError::from_core)?;
    let labels: Vec<usize> = chosen.iter().map(|e| e.class_id).collect();
    evaluate_logits(&logits, &labels).map_err(CliError::from_core)
}

#[derive(Serialize)]
struct RunSummary {
    config_fingerprint: String,
    model_fingerprint: String,
    base_checksum: String,
    rounds_run: usize,
    best_round: usize,
    total_params: usize,
    adapter_params: usize,
    adapter_ratio: f64,
    adapter_bytes: usize,
    teacher: Option<String>,
}

pub fn train(args: &RunArgs) -> Result<()> {
    let config = resolve(args)?;
    let (examples, manifest) = dataset(&config, args)?;
    let model = build_model(&config)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(io("cannot create", out))?;

    let train_split: Vec<LabeledExample> = manifest.select(&examples, Split::Train).into_iter().cloned().collect();
    let teacher = teacher(&config, &train_split, &manifest)?;
    let train = TrainConfig {
        optim: config.optim.clone(),
        distill: config.distill.clone(),
        use_sampler: config.use_sampler,
        augment: config.augment.clone(),
        trainable: Trainable::Adapters,
    };
    let counts = model.param_counts();
    let outcome = run_federation(Federation {
        model,
        examples: &examples,
        manifest: &manifest,
        train,
        config: config.federation.clone(),
        teacher: teacher.as_deref(),
        seed: config.seed,
    })
    .map_err(CliError::from_core)?;
    for r in &outcome.history {
        eprintln!(
            "round {:>3}: val loss {:.4} accuracy {:.3}{}",
            r.round,
            r.validation.loss,
            r.validation.accuracy,
            if r.improved { " *" } else { "" }
        );
    }

    let path = |name: &str| out.join(name);
    outcome.adapters.save(path("adapters.flra")).map_err(CliError::from_core)?;
    write_history(&outcome.history, path("history.jsonl")).map_err(CliError::from_core)?;
    let report = evaluate_split(&outcome.model, &examples, &manifest, Split::Test)?;
    let write = |name: &str, text: String| std::fs::write(path(name), text).map_err(io("cannot write", out));
    write("metrics.json", report.to_json().map_err(CliError::from_core)?)?;
    write("roc.csv", report.roc_csv())?;
    write("config.toml", config.to_toml())?;
    write("manifest.json", manifest.to_json().map_err(CliError::from_core)?)?;
    let summary = RunSummary {
        config_fingerprint: hex(&config.fingerprint()),
        model_fingerprint: hex(&outcome.model.fingerprint()),
        base_checksum: hex(&outcome.model.base_checksum()),
        rounds_run: outcome.history.len(),
        best_round: outcome.best_round,
        total_params: counts.total,
        adapter_params: counts.adapter,
        adapter_ratio: counts.ratio(),
        adapter_bytes: outcome.adapters.serialized_size(),
        teacher: teacher.as_ref().map(|t| t.name().to_string()),
    };
    write("summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    eprintln!(
        "best round {} of {}; test accuracy {:.3}, macro AUC {:.3}; adapters are {:.2}% of parameters; wrote {}",
        outcome.best_round,
        outcome.history.len(),
        report.accuracy,
        report.auc_macro,
        100.0 * counts.ratio(),
        out.display()
    );
    Ok(())
}

pub fn eval(args: &RunArgs, checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let config = resolve(args)?;
    let split: Split = split.parse().map_err(|_| CliError::usage(format!("unknown split `{split}`")))?;
    let mut model = build_model(&config)?;
    load_checkpoint(&mut model, checkpoint)?;
    let (examples, manifest) = dataset(&config, args)?;
    let report = evaluate_split(&model, &examples, &manifest, split)?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&config.output_dir).map_err(io("cannot create", &config.output_dir))?;
            config.output_dir.join(format!("eval-{}.json", split.name()))
        }
    };
    std::fs::write(&target, report.to_json().map_err(CliError::from_core)?).map_err(io("cannot write", &target))?;
    println!(
        "{} split: accuracy {:.4}, loss {:.4}, macro AUC {:.4}, macro F1 {:.4}",
        split.name(),
        report.accuracy,
        report.mean_loss,
        report.auc_macro,
        report.f1_macro
    );
    Ok(())
}

pub fn gradcam(
    args: &RunArgs,
    checkpoint: &Path,
    image: &Path,
    class: usize,
    layer: Option<usize>,
    out: &Path,
) -> Result<()> {
    let config = resolve(args)?;
    if class >= config.model.num_classes {
        return Err(CliError::usage(format!(
            "class {class} out of range for {} classes",
            config.model.num_classes
        )));
    }
    let mut model = build_model(&config)?;
    load_checkpoint(&mut model, checkpoint)?;
    let (_, manifest) = dataset(&config, args)?;

    let n = config.model.image_size;
    let raw = read_image(image).map_err(|e| CliError::usage(format!("cannot read image {}: {e}", image.display())))?;
    let raw = if config.model.in_channels == 1 {
        let (h, w) = (raw.shape()[1], raw.shape()[2]);
        Tensor::from_fn(&[1, h, w], |i| (0..3).map(|c| raw.data()[c * h * w + i]).sum::<f64>() / 3.0)
    } else {
        raw
    };
    let resized = resize_bilinear(&raw, n, n).map_err(CliError::from_core)?;
    let input = manifest.normalization.apply(&resized).map_err(CliError::from_core)?;
    let layer = layer.unwrap_or_else(|| default_layer(&model));
    let map = gradcam_pp(&model, &input, class, layer).map_err(CliError::from_core)?;
    if map.zero_gradient {
        eprintln!("warning: all gradients at {} are zero; the map is empty", map.layer);
    }
    export_overlay(&map, &resized, out).map_err(CliError::from_core)?;
    let (r, c) = map.argmax_cell();
    println!("wrote {} (layer {}, class {class}, peak cell {r},{c})", out.display(), map.layer);
    Ok(())
}

pub fn synth(args: &RunArgs, out: &Path) -> Result<()> {
    let config = resolve(args)?;
    let (examples, manifest) = config.dataset(true)?;
    write_dir(&examples, &manifest.class_names, out).map_err(CliError::from_core)?;
    manifest.save(out.join("manifest.json")).map_err(CliError::from_core)?;
    println!("wrote {} images in {} classes to {}", examples.len(), manifest.num_classes(), out.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let state = LoraStateDict::load(path).map_err(|e| match e {
        fedsim::Error::Io(_) => CliError {
            code: crate::EXIT_CHECKPOINT,
            message: format!("cannot read checkpoint {}: {e}", path.display()),
        },
        e => CliError::checkpoint(e),
    })?;
    let mut text = format!(
        "format version {}\nfingerprint {}\nadapters {}\n",
        fedsim::fed::CHECKPOINT_VERSION,
        hex(state.fingerprint()),
        state.len()
    );
    for (k, p) in state.iter() {
        text += &format!("  {k}: A {:?} B {:?}\n", p.a.shape(), p.b.shape());
    }
    text += &format!("parameters {}\nbytes {}\n", state.element_count(), state.serialized_size());
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    Ok(())
}
