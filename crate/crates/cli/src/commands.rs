use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use layerdrop::contribution::{similarity_profile, SimilarityProfile};
use layerdrop::encoder::{batch_examples, parse_examples, EncoderConfig, EncoderModel, Scalar, TokenBatch};
use layerdrop::finetune::{drop_after_finetune, finetune, gradual_drop_finetune, Metrics, TaskSpec};
use layerdrop::strategies::{select_by_threshold, DropPlan, Strategy};
use layerdrop::surgery::{apply_plan, max_droppable_within, reduction_report};
use layerdrop::tensorstore::{load_checkpoint, save_checkpoint, Checkpoint, DType};
use layerdrop::topology::{count_parameters, infer_topology, NamingScheme};

use crate::error::CliError;
use crate::{Command, FinetuneArgs, PlanArgs, SchemeArg};

pub const SCHEMA_VERSION: &str = "1";

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<String> {
    let (name, payload) = match command {
        Command::Inspect { checkpoint, scheme } => ("inspect", inspect(&checkpoint, &scheme)?),
        Command::Plan(args) => ("plan", plan(&args)?),
        Command::Apply {
            checkpoint,
            plan,
            out,
            scheme,
        } => ("apply", apply(&checkpoint, &plan, &out, &scheme)?),
        Command::Score {
            checkpoint,
            config,
            data,
            thresholds,
            batch_size,
            scheme,
        } => (
            "score",
            score(&checkpoint, &config, &data, &thresholds, batch_size, &scheme)?,
        ),
        Command::Finetune(args) => ("finetune", run_finetune(&args)?),
        Command::Report {
            scores,
            threshold_points,
            full_score,
        } => ("report", report(&scores, threshold_points, full_score)?),
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": name,
        "payload": payload,
    });
    // serde_json's default map is ordered, so keys come out sorted
    Ok(serde_json::to_string_pretty(&report).expect("reports are plain JSON values"))
}

fn to_value(v: impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("report payloads serialize")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::data("io", format!("{}: {e}", path.display())))
}

/// Parse a JSON file that is either a bare record or a report wrapping it.
fn read_record<T: DeserializeOwned>(path: &Path, component: &'static str) -> Result<T> {
    let text = read_text(path)?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::data(component, format!("{}: {e}", path.display())))?;
    if value.get("schema_version").is_some() {
        value = value
            .get_mut("payload")
            .map(Value::take)
            .ok_or_else(|| CliError::data(component, format!("{}: report has no payload", path.display())))?;
    }
    serde_json::from_value(value).map_err(|e| CliError::data(component, format!("{}: {e}", path.display())))
}

fn naming_scheme(arg: &SchemeArg) -> Result<NamingScheme> {
    match &arg.scheme {
        Some(path) => Ok(NamingScheme::load(path)?),
        None => Ok(NamingScheme::bert()),
    }
}

fn inspect(path: &Path, scheme: &SchemeArg) -> Result<Value> {
    let ckpt = load_checkpoint(path)?;
    let topo = infer_topology(&ckpt, &naming_scheme(scheme)?)?;
    let params = count_parameters(&ckpt, &topo);
    Ok(json!({ "topology": topo, "params": params }))
}

fn plan(args: &PlanArgs) -> Result<Value> {
    let strategy: Strategy = args.strategy.parse()?;
    let plan = match strategy {
        Strategy::Contribution => {
            let tau = args
                .threshold
                .ok_or_else(|| CliError::usage("cli", "contribution plans need --threshold"))?;
            let profile = contribution_profile(args)?;
            select_by_threshold(&profile, tau)?
        }
        Strategy::Custom => {
            return Err(CliError::usage(
                "cli",
                "custom plans are written by hand, not computed",
            ));
        }
        positional => {
            if args.threshold.is_some() || args.profile.is_some() || args.checkpoint.is_some() {
                return Err(CliError::usage(
                    "cli",
                    "--threshold, --profile and --checkpoint apply only to contribution plans",
                ));
            }
            let (Some(layers), Some(k)) = (args.layers, args.k) else {
                return Err(CliError::usage(
                    "cli",
                    format!("{positional} plans need --layers and --k"),
                ));
            };
            positional.plan(layers, k)?
        }
    };
    Ok(to_value(plan))
}

fn contribution_profile(args: &PlanArgs) -> Result<SimilarityProfile> {
    if args.layers.is_some() || args.k.is_some() {
        return Err(CliError::usage(
            "cli",
            "contribution plans take no --layers or --k",
        ));
    }
    match (&args.profile, &args.checkpoint, &args.config, &args.data) {
        (Some(profile), None, None, None) => read_record(profile, "contribution"),
        (None, Some(ckpt), Some(config), Some(data)) => {
            let scheme = naming_scheme(&args.scheme)?;
            let batches = load_batches(data, args.batch_size)?;
            let (ckpt, cfg) = load_model_inputs(ckpt, config, &scheme)?;
            if is_double(&ckpt, &scheme) {
                profile_with::<f64>(&ckpt, &cfg, &scheme, &batches)
            } else {
                profile_with::<f32>(&ckpt, &cfg, &scheme, &batches)
            }
        }
        _ => Err(CliError::usage(
            "cli",
            "contribution plans need --profile, or --checkpoint with --config and --data",
        )),
    }
}

fn apply(input: &Path, plan_path: &Path, out: &Path, scheme: &SchemeArg) -> Result<Value> {
    if same_file(input, out) {
        return Err(CliError::usage(
            "cli",
            "--out must differ from the input checkpoint",
        ));
    }
    let scheme = naming_scheme(scheme)?;
    let plan: DropPlan = read_record(plan_path, "strategies")?;
    let ckpt = load_checkpoint(input)?;
    let topo = infer_topology(&ckpt, &scheme)?;
    let pruned = apply_plan(&ckpt, &topo, &plan)?;
    let after = count_parameters(&pruned, &infer_topology(&pruned, &scheme)?);
    save_checkpoint(&pruned, out)?;
    Ok(to_value(reduction_report(
        &count_parameters(&ckpt, &topo),
        &after,
        &plan,
    )))
}

fn same_file(a: &Path, b: &Path) -> bool {
    if a == b {
        return true;
    }
    match (fs::canonicalize(a), absolute(b)) {
        (Ok(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Canonical form of a path whose final component may not exist yet.
fn absolute(p: &Path) -> Option<PathBuf> {
    if let Ok(c) = fs::canonicalize(p) {
        return Some(c);
    }
    let parent = match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    Some(fs::canonicalize(parent).ok()?.join(p.file_name()?))
}

fn load_batches(path: &Path, batch_size: usize) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(CliError::usage("cli", "--batch-size must be positive"));
    }
    let examples = parse_examples(&read_text(path)?)?;
    Ok(batch_examples(&examples, batch_size)?)
}

/// Checkpoint plus a config whose layer count is taken from the checkpoint,
/// so one config file serves a model and all of its pruned descendants.
fn load_model_inputs(
    ckpt: &Path,
    config: &Path,
    scheme: &NamingScheme,
) -> Result<(Checkpoint, EncoderConfig)> {
    let cfg = EncoderConfig::load(config)?;
    let ckpt = load_checkpoint(ckpt)?;
    let layers = infer_topology(&ckpt, scheme)?.num_layers;
    Ok((ckpt, cfg.with_layers(layers)))
}

/// Double-precision checkpoints are run in f64, everything else in f32.
fn is_double(ckpt: &Checkpoint, scheme: &NamingScheme) -> bool {
    ckpt.iter()
        .find(|(name, _)| scheme.match_layer(name).is_some())
        .is_some_and(|(_, e)| e.dtype() == DType::F64)
}

fn profile_with<T: Scalar>(
    ckpt: &Checkpoint,
    cfg: &EncoderConfig,
    scheme: &NamingScheme,
    batches: &[TokenBatch],
) -> Result<SimilarityProfile> {
    let model = EncoderModel::<T>::load(ckpt, cfg, scheme)?;
    Ok(similarity_profile(&model, batches)?)
}

fn score(
    ckpt: &Path,
    config: &Path,
    data: &Path,
    thresholds: &[f64],
    batch_size: usize,
    scheme: &SchemeArg,
) -> Result<Value> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::usage("cli", format!("threshold {t} outside [0, 1]")));
    }
    let scheme = naming_scheme(scheme)?;
    let batches = load_batches(data, batch_size)?;
    let (ckpt, cfg) = load_model_inputs(ckpt, config, &scheme)?;
    let profile = if is_double(&ckpt, &scheme) {
        profile_with::<f64>(&ckpt, &cfg, &scheme, &batches)?
    } else {
        profile_with::<f32>(&ckpt, &cfg, &scheme, &batches)?
    };
    let layers: Vec<Value> = profile
        .mean_similarity
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let flags: BTreeMap<String, bool> = thresholds.iter().map(|&t| (t.to_string(), s > t)).collect();
            json!({ "index": i + 1, "mean_similarity": s, "dropped_at": flags })
        })
        .collect();
    let mut payload = to_value(&profile);
    payload["thresholds"] = to_value(thresholds);
    payload["layers"] = Value::Array(layers);
    Ok(payload)
}

fn run_finetune(args: &FinetuneArgs) -> Result<Value> {
    let scheme = naming_scheme(&args.scheme)?;
    let spec = TaskSpec::load(&args.task)?;
    let (ckpt, cfg) = load_model_inputs(&args.checkpoint, &args.config, &scheme)?;
    let plan: Option<DropPlan> = args
        .plan
        .as_deref()
        .map(|p| read_record(p, "strategies"))
        .transpose()?;
    if is_double(&ckpt, &scheme) {
        finetune_with::<f64>(args, &spec, ckpt, &cfg, plan.as_ref(), &scheme)
    } else {
        finetune_with::<f32>(args, &spec, ckpt, &cfg, plan.as_ref(), &scheme)
    }
}

fn finetune_with<T: Scalar>(
    args: &FinetuneArgs,
    spec: &TaskSpec,
    ckpt: Checkpoint,
    cfg: &EncoderConfig,
    plan: Option<&DropPlan>,
    scheme: &NamingScheme,
) -> Result<Value> {
    let (model, metrics): (_, Metrics) = match plan {
        Some(plan) if args.gradual => gradual_drop_finetune(
            EncoderModel::<T>::load(&ckpt, cfg, scheme)?,
            &spec.task,
            plan,
            &spec.train,
        )?,
        Some(plan) if args.drop_after_finetune => drop_after_finetune(
            EncoderModel::<T>::load(&ckpt, cfg, scheme)?,
            &spec.task,
            plan,
            &spec.train,
        )?,
        Some(plan) => {
            let topo = infer_topology(&ckpt, scheme)?;
            let pruned = apply_plan(&ckpt, &topo, plan)?;
            let model = EncoderModel::<T>::load(&pruned, &cfg.with_layers(plan.layers_after()), scheme)?;
            finetune(model, &spec.task, &spec.train)?
        }
        None => finetune(
            EncoderModel::<T>::load(&ckpt, cfg, scheme)?,
            &spec.task,
            &spec.train,
        )?,
    };
    if let Some(path) = &args.metrics {
        fs::write(path, metrics.to_json_lines())
            .map_err(|e| CliError::data("io", format!("{}: {e}", path.display())))?;
    }
    if let Some(out) = &args.out {
        if same_file(&args.checkpoint, out) {
            return Err(CliError::usage(
                "cli",
                "--out must differ from the input checkpoint",
            ));
        }
        save_checkpoint(&model.to_checkpoint(scheme), out)?;
    }
    Ok(to_value(&metrics))
}

fn report(path: &Path, threshold: f64, full_score: Option<f64>) -> Result<Value> {
    if !(threshold >= 0.0) {
        return Err(CliError::usage("cli", "--threshold-points must be non-negative"));
    }
    let raw: BTreeMap<String, f64> = read_record(path, "surgery")?;
    let scores = raw
        .into_iter()
        .map(|(k, v)| {
            k.parse::<usize>().map(|k| (k, v)).map_err(|_| {
                CliError::data(
                    "surgery",
                    format!("{}: key {k:?} is not a layer count", path.display()),
                )
            })
        })
        .collect::<Result<BTreeMap<usize, f64>>>()?;
    let k = max_droppable_within(&scores, full_score, threshold)?;
    Ok(json!({
        "max_droppable": k,
        "threshold_points": threshold,
        "full_score": full_score.or_else(|| scores.get(&0).copied()),
        "scores": scores,
    }))
}
