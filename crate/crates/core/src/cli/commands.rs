use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::calibration::{apply_calibration, calibrate_search, BisectionOutcome, CalibrationParams, StageTrace};
use crate::distribution::{corpus_stats, softmax_grid, LogitGrid, TargetStats};
use crate::error::{Error, Result};
use crate::lcdm::{lcdm_pipeline, Codebook};
use crate::otsu::{otsu_report_grid, rank_profile, rank_profile_csv};
use crate::synth::synth_corpus;
use crate::tensor_io::{
    read_matrix, read_stats_config, read_tensor, write_matrix, write_tensor, DType, StatsConfig, Tensor,
};
use crate::toy_decoder::{
    encode_conditioning, examples_from_tensors, examples_to_tensors, initial_noise, integrate, latents_from_tensor,
    latents_to_tensor, sample, sources_from_tensors, train, DatasetTensors, DecoderParams, FlowSchedule, LatentGrid,
    OracleVelocity, ToyRunConfig, TrainingExample,
};

use super::{
    AnalyzeArgs, CalibrateArgs, Command, DatasetArgs, MapArgs, SynthArgs, ToyDecodeArgs, ToyTrainArgs, EXIT_DEGENERATE,
    EXIT_OK,
};

pub(super) fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Analyze(a) => analyze(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Map(a) => map(a),
        Command::Synth(a) => synth(a),
        Command::ToyTrain(a) => toy_train(a),
        Command::ToyDecode(a) => toy_decode(a),
    }
}

/// Reading stage: every failure, non-finite values included, is bad input.
fn loaded<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::InvalidArgument(format!("non-finite values in {what}")),
        other => other,
    })
}

fn require_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    Ok(())
}

fn prepare_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    prepare_output(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_tensor_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    prepare_output(path)?;
    write_tensor(path, t, dtype)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_logits(path: &Path) -> Result<LogitGrid> {
    loaded(read_matrix(path).and_then(LogitGrid::new))
}

fn read_params(path: Option<&Path>) -> Result<CalibrationParams> {
    let Some(path) = path else {
        return Ok(CalibrationParams::IDENTITY);
    };
    let p: CalibrationParams = serde_json::from_str(&read_text(path)?)?;
    p.validate()?;
    Ok(p)
}

fn analyze(a: AnalyzeArgs) -> Result<i32> {
    require_inputs([a.logits.as_path()].into_iter().chain(a.params.as_deref()))?;
    let logits = read_logits(&a.logits)?;
    let params = read_params(a.params.as_deref())?;
    let probs = apply_calibration(&logits, &params)?;
    let report = otsu_report_grid(&probs, a.otsu_weight)?;
    let json = report.to_json() + "\n";
    match &a.report {
        Some(p) => write_text(p, &json)?,
        None => print!("{json}"),
    }
    if let Some(p) = &a.profile {
        let profile = rank_profile(std::slice::from_ref(&probs), a.top_n)?;
        write_text(p, &rank_profile_csv(&profile))?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct CalibrationDocument<'a> {
    #[serde(flatten)]
    params: CalibrationParams,
    diagnostics: Diagnostics<'a>,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    loss: f64,
    bracketed: bool,
    objective_weights: [f64; 4],
    entropy_tolerance: f64,
    target: TargetStats,
    achieved: TargetStats,
    bisection: BisectionOutcome,
    stages: &'a [StageTrace],
}

fn calibrate(a: CalibrateArgs) -> Result<i32> {
    require_inputs(
        a.corpus
            .iter()
            .map(|p| p.as_path())
            .chain(a.target.as_deref())
            .chain(a.target_corpus.as_deref())
            .chain(a.config.as_deref()),
    )?;
    let config = match &a.config {
        Some(p) => read_stats_config(p)?,
        None => StatsConfig::default(),
    };
    let corpus = a.corpus.iter().map(|p| read_logits(p)).collect::<Result<Vec<_>>>()?;
    let target = if let Some(p) = &a.target {
        let t: TargetStats = serde_json::from_str(&read_text(p)?)?;
        t.validate()?;
        t
    } else if let Some(p) = &a.target_corpus {
        corpus_stats(&[softmax_grid(&read_logits(p)?, 1.0)?])?
    } else {
        config.target_stats.ok_or_else(|| {
            Error::InvalidConfig("no target statistics: pass --target, --target-corpus or set target_stats".into())
        })?
    };

    let result = calibrate_search(&corpus, &target, &config)?;
    let doc = CalibrationDocument {
        params: result.params,
        diagnostics: Diagnostics {
            loss: result.loss,
            bracketed: result.bisection.bracketed,
            objective_weights: config.objective_weights.as_array(),
            entropy_tolerance: config.entropy_tolerance,
            target: result.target,
            achieved: result.achieved,
            bisection: result.bisection,
            stages: &result.stages,
        },
    };
    write_text(&a.out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    println!("loss {:.6e}", result.loss);
    if !result.bisection.bracketed {
        eprintln!("warning: scale search did not bracket the target entropy; endpoint kept");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(EXIT_OK)
}

fn map(a: MapArgs) -> Result<i32> {
    require_inputs([a.logits.as_path(), a.codebook.as_path()].into_iter().chain(a.params.as_deref()))?;
    let logits = read_logits(&a.logits)?;
    let codebook = loaded(read_matrix(&a.codebook).and_then(Codebook::new))?;
    let params = read_params(a.params.as_deref())?;
    let out = lcdm_pipeline(&logits, &codebook, &params)?;
    prepare_output(&a.codes_out)?;
    prepare_output(&a.uncertainty_out)?;
    write_matrix(&a.codes_out, &out.codes, a.dtype)?;
    write_matrix(&a.uncertainty_out, &out.uncertainty, a.dtype)?;
    Ok(EXIT_OK)
}

fn synth(a: SynthArgs) -> Result<i32> {
    let grid = synth_corpus(a.kind, a.n, a.k, a.seed)?;
    prepare_output(&a.out)?;
    write_matrix(&a.out, grid.as_matrix(), a.dtype)?;
    Ok(EXIT_OK)
}

fn read_run_config(path: Option<&Path>) -> Result<ToyRunConfig> {
    match path {
        Some(p) => ToyRunConfig::from_json(&read_text(p)?),
        None => Ok(ToyRunConfig::default()),
    }
}

fn dataset_inputs(d: &DatasetArgs) -> impl Iterator<Item = &Path> {
    [d.latents.as_deref(), d.codes.as_deref(), d.uncertainty.as_deref()].into_iter().flatten()
}

fn read_training_set(d: &DatasetArgs) -> Result<Option<Vec<TrainingExample>>> {
    match (&d.latents, &d.codes, &d.uncertainty) {
        (None, None, None) => Ok(None),
        (Some(l), Some(c), Some(u)) => {
            let t = DatasetTensors { latents: read_tensor(l)?, codes: read_tensor(c)?, uncertainty: read_tensor(u)? };
            loaded(examples_from_tensors(&t)).map(Some)
        }
        _ => Err(Error::InvalidArgument("--latents, --codes and --uncertainty must be given together".into())),
    }
}

fn dump_split(dir: &Path, name: &str, examples: &[TrainingExample]) -> Result<()> {
    if examples.is_empty() {
        return Ok(());
    }
    let t = examples_to_tensors(examples)?;
    write_tensor_file(&dir.join(format!("{name}_latents.l2ct")), &t.latents, DType::F64)?;
    write_tensor_file(&dir.join(format!("{name}_codes.l2ct")), &t.codes, DType::F64)?;
    write_tensor_file(&dir.join(format!("{name}_uncertainty.l2ct")), &t.uncertainty, DType::F64)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    examples: usize,
    parameters: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn smoothed(losses: &[f64], head: bool) -> f64 {
    let w = (losses.len() / 10).max(1).min(losses.len());
    let window = if head { &losses[..w] } else { &losses[losses.len() - w..] };
    window.iter().sum::<f64>() / w as f64
}

fn toy_train(a: ToyTrainArgs) -> Result<i32> {
    require_inputs(a.config.as_deref().into_iter().chain(dataset_inputs(&a.data)))?;
    let mut cfg = read_run_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let examples = match read_training_set(&a.data)? {
        Some(ex) => ex,
        None => {
            let data = cfg.data.build()?;
            if let Some(dir) = &a.dump_dataset {
                dump_split(dir, "train", &data.train)?;
                dump_split(dir, "test", &data.test)?;
            }
            data.train
        }
    };
    let out = train(&examples, &cfg.train)?;
    write_tensor_file(&a.params_out, &Tensor::new(vec![out.params.num_params()], out.params.to_flat())?, DType::F64)?;
    if let Some(p) = &a.trace {
        let mut csv = String::from("step,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_text(p, &csv)?;
    }
    if !out.losses.is_empty() {
        let summary = TrainSummary {
            steps: out.losses.len(),
            examples: examples.len(),
            parameters: out.params.num_params(),
            initial_loss: smoothed(&out.losses, true),
            final_loss: smoothed(&out.losses, false),
        };
        println!("{}", serde_json::to_string_pretty(&summary)?);
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DecodeSummary {
    steps: usize,
    samples: usize,
    mse: Option<f64>,
    zero_conditioning_mse: Option<f64>,
}

fn mean_mse(samples: &[LatentGrid], refs: &[LatentGrid]) -> Result<f64> {
    let mut total = 0.0;
    for (s, r) in samples.iter().zip(refs) {
        total += s.mse(r)?;
    }
    Ok(total / samples.len() as f64)
}

fn toy_decode(a: ToyDecodeArgs) -> Result<i32> {
    require_inputs(a.config.as_deref().into_iter().chain(a.params.as_deref()).chain(dataset_inputs(&a.data)))?;
    let cfg = read_run_config(a.config.as_deref())?;
    let schedule = FlowSchedule::new(a.steps)?;
    let seed_for = |i: usize| a.seed.wrapping_add(i as u64);

    let references =
        a.data.latents.as_deref().map(|p| loaded(read_tensor(p).and_then(|t| latents_from_tensor(&t)))).transpose()?;

    if a.oracle {
        let refs = references.as_deref().unwrap_or_default();
        let samples = refs
            .iter()
            .enumerate()
            .map(|(i, target)| {
                let noise = initial_noise(target.shape(), seed_for(i))?;
                integrate(&OracleVelocity::new(target, &noise)?, noise, schedule)
            })
            .collect::<Result<Vec<_>>>()?;
        write_tensor_file(&a.out, &latents_to_tensor(&samples)?, DType::F64)?;
        let summary = DecodeSummary {
            steps: a.steps,
            samples: samples.len(),
            mse: Some(mean_mse(&samples, refs)?),
            zero_conditioning_mse: None,
        };
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(EXIT_OK);
    }

    let params_path = a.params.as_deref().ok_or_else(|| Error::InvalidArgument("--params is required".into()))?;
    let flat = read_tensor(params_path)?;
    let params = loaded(DecoderParams::from_flat(cfg.train.dims, cfg.train.activation, flat.data()))?;

    let (sources, references) = match (&a.data.codes, &a.data.uncertainty) {
        (Some(c), Some(u)) => {
            let target = references.as_ref().and_then(|r| r.first()).map(|z| z.token_grid());
            let sources = loaded(sources_from_tensors(&read_tensor(c)?, &read_tensor(u)?, target))?;
            (sources, references)
        }
        _ => {
            let test = cfg.data.build()?.test;
            if test.is_empty() {
                return Err(Error::InvalidConfig("no conditioning given and the synthetic test split is empty".into()));
            }
            let (clean, sources): (Vec<_>, Vec<_>) = test.into_iter().map(|e| (e.clean, e.source)).unzip();
            (sources, Some(references.unwrap_or(clean)))
        }
    };
    if let Some(r) = &references {
        if r.len() != sources.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reference latents for {} conditioning entries",
                r.len(),
                sources.len()
            )));
        }
    }

    let decode = |zero: bool| -> Result<Vec<LatentGrid>> {
        sources
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let mut cond = encode_conditioning(&params, src)?;
                if zero {
                    cond = cond.zeros_like();
                }
                sample(&params, &cond, schedule, seed_for(i))
            })
            .collect()
    };
    let samples = decode(false)?;
    write_tensor_file(&a.out, &latents_to_tensor(&samples)?, DType::F64)?;
    let (mse, zero_mse) = match &references {
        Some(r) => (Some(mean_mse(&samples, r)?), Some(mean_mse(&decode(true)?, r)?)),
        None => (None, None),
    };
    let summary = DecodeSummary { steps: a.steps, samples: samples.len(), mse, zero_conditioning_mse: zero_mse };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(EXIT_OK)
}
