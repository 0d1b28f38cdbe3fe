use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fsaa_core::data::pnm::{read_pnm, write_pnm};
use fsaa_core::data::{
    load_directory_dataset, rotation_class_augment, synthetic_benchmark, AugmentSpec, Dataset, Image,
};
use fsaa_core::episodic::{evaluate, train, EpisodeSpec, EvalOptions, EvalReport, LossValues, TrainConfig};
use fsaa_core::gradcheck::{check_op, OPS};
use fsaa_core::model::{CombineMode, ModelConfig};
use fsaa_core::Model32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{AblateArgs, DataArgs, EpisodeArgs, EvalArgs, GradcheckArgs, TrainArgs, VisualizeArgs};
use crate::checkpoint;
use crate::error::{CliError, Result};

/// Images per class in the synthetic corpus.
pub const SYNTHETIC_IMAGES: usize = 40;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

/// Which class split of the synthetic corpus to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// The dataset selected by `args`; `image_size` overrides the flag (used
/// by evaluation to follow the checkpoint).
pub fn load_dataset(args: &DataArgs, split: Split, image_size: Option<usize>) -> Result<Dataset> {
    let size = image_size.unwrap_or(args.image_size);
    let data = match (&args.data, args.synthetic) {
        (Some(_), true) => return Err(usage("--data and --synthetic are mutually exclusive")),
        (None, false) => return Err(usage("one of --data <DIR> or --synthetic is required")),
        // Several shape families are rotation-symmetric, so rotated copies
        // would be indistinguishable classes.
        (None, true) if args.rotate => return Err(usage("--rotate applies to --data only")),
        (None, true) => {
            let (train, test) = synthetic_benchmark(SYNTHETIC_IMAGES, size, args.data_seed)?;
            match split {
                Split::Train => train,
                Split::Test => test,
            }
        }
        (Some(dir), false) => load_directory_dataset(dir, size)?,
    };
    Ok(if args.rotate {
        rotation_class_augment(&data)?
    } else {
        data
    })
}

pub fn episode_spec(args: &EpisodeArgs) -> Result<EpisodeSpec> {
    EpisodeSpec::new(args.way, args.shot, args.query).map_err(|e| usage(e.to_string()))
}

/// Model configuration for images shaped like `dataset`'s.
pub fn config_for(dataset: &Dataset, combine: CombineMode, classifier: bool) -> Result<ModelConfig> {
    let [c, h, w] = dataset.image_shape().ok_or_else(|| usage("dataset has no images"))?;
    if h != w {
        return Err(usage(format!("images must be square, got {h}x{w}")));
    }
    let config = ModelConfig {
        input_channels: c,
        input_size: h,
        ..ModelConfig::grayscale28()
    }
    .with_combine(combine)
    .with_classifier(classifier);
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// Fresh model for `seed`; initialization draws from its own stream so
/// that it never shares numbers with episode sampling.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    Ok(Model32::init(config, &mut rng)?)
}

pub const LOSS_LOG_HEADER: &str = "# episode\tattention\tclassification\ttotal";

pub fn loss_log_line(episode: usize, loss: &LossValues) -> String {
    let ce = loss
        .classification
        .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    format!("{episode}\t{:.6}\t{ce}\t{:.6}", loss.attention, loss.total)
}

/// Trains a fresh model, writing one loss-log line per episode to `log`.
pub fn train_model(
    config: ModelConfig,
    dataset: &Dataset,
    train_config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Model32, Vec<LossValues>)> {
    let mut model = init_model(config, train_config.seed)?;
    let mut losses = Vec::with_capacity(train_config.episodes);
    let mut io_error = None;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOSS_LOG_HEADER}").map_err(write_err)?;
    }
    train(&mut model, dataset, train_config, |i, loss| {
        if let Some(w) = log.as_deref_mut() {
            if let Err(e) = writeln!(w, "{}", loss_log_line(i, loss)) {
                io_error.get_or_insert(e);
            }
        }
        losses.push(*loss);
    })?;
    if let Some(e) = io_error {
        return Err(write_err(e));
    }
    Ok((model, losses))
}

pub fn run_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(usage(format!("--lr must be positive, got {}", args.lr)));
    }
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let spec = episode_spec(&args.episode)?;
    let dataset = load_dataset(&args.data, Split::Train, None)?;
    spec.check_dataset(&dataset).map_err(|e| usage(e.to_string()))?;
    let config = config_for(&dataset, args.combine, !args.no_classifier)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let train_config = TrainConfig {
        learning_rate: args.lr,
        ..TrainConfig::new(spec, args.episodes, args.seed)
    };
    let (model, losses) = train_model(config, &dataset, &train_config, Some(&mut log))?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    checkpoint::save(&args.out, &model)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let running = tail.iter().map(|l| l.total).sum::<f64>() / tail.len() as f64;
    writeln!(
        out,
        "trained {} episodes ({}), final running loss {running:.4}\ncheckpoint {}\nloss log {}",
        args.episodes,
        model.config,
        args.out.display(),
        log_path.display()
    )
    .map_err(write_err)
}

/// CRC-32 of the report's configuration string, as eight hex digits.
pub fn config_hash(report: &EvalReport) -> String {
    format!("{:08x}", crc32fast::hash(report.config.as_bytes()))
}

pub const EVAL_RECORD_HEADER: &str = "# mean\tci95\tepisodes\tconfig_hash";

pub fn eval_record(report: &EvalReport) -> String {
    format!(
        "{:.6}\t{:.6}\t{}\t{}",
        report.mean,
        report.ci95,
        report.episodes,
        config_hash(report)
    )
}

pub fn run_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    if args.finetune && !(args.finetune_lr >= 0.0 && args.finetune_lr.is_finite()) {
        return Err(usage(format!(
            "--finetune-lr must be non-negative, got {}",
            args.finetune_lr
        )));
    }
    let spec = episode_spec(&args.episode)?;
    let model = checkpoint::load(&args.ckpt)?;
    let dataset = load_dataset(&args.data, Split::Test, Some(model.config.input_size))?;
    let shape = dataset.image_shape().expect("validated dataset");
    if shape[0] != model.config.input_channels {
        return Err(CliError::Checkpoint {
            path: args.ckpt.clone(),
            detail: format!(
                "model expects {} input channels, dataset images have {}",
                model.config.input_channels, shape[0]
            ),
        });
    }
    let options = EvalOptions {
        tta_copies: args.tta,
        augment: AugmentSpec::new(AugmentSpec::DEFAULT_CROP, args.flip)?,
        finetune_lr: args.finetune.then_some(args.finetune_lr),
    };
    let report = evaluate(&model, &dataset, &spec, args.episodes, &options, args.seed)?;
    writeln!(
        out,
        "accuracy {:.2}±{:.2}\n{EVAL_RECORD_HEADER}\n{}",
        100.0 * report.mean,
        100.0 * report.ci95,
        eval_record(&report)
    )
    .map_err(write_err)?;
    Ok(report)
}

/// Heatmap (raw map upsampled to input size, min-max scaled to `[0, 1]`)
/// and `0.5 * query + 0.5 * heatmap` overlay. Color queries are averaged
/// to gray for the overlay.
pub fn render_attention(model: &Model32, support: &Image, query: &Image) -> Result<(Image, Image)> {
    let raw = model.heatmap(&support.to_tensor(), &query.to_tensor())?;
    let (lo, hi) = raw
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut heat = raw.clone();
    for v in &mut heat.pixels {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    let plane = query.height * query.width;
    let overlay_px = (0..plane)
        .map(|p| {
            let gray = (0..query.channels).map(|c| query.pixels[c * plane + p]).sum::<f32>() / query.channels as f32;
            0.5 * gray + 0.5 * heat.pixels[p]
        })
        .collect();
    let overlay = Image::new(1, query.height, query.width, overlay_px)?;
    Ok((heat, overlay))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

pub fn run_visualize(args: &VisualizeArgs, out: &mut dyn Write) -> Result<(PathBuf, PathBuf)> {
    let model = checkpoint::load(&args.ckpt)?;
    let s = model.config.input_size;
    let want = [model.config.input_channels, s, s];
    let support = read_pnm(&args.support)?;
    let query = read_pnm(&args.query)?;
    for (path, img) in [(&args.support, &support), (&args.query, &query)] {
        if img.shape() != want {
            return Err(usage(format!(
                "{} is {:?} (channels, height, width); the checkpoint expects {want:?}",
                path.display(),
                img.shape()
            )));
        }
    }
    let (heat, overlay) = render_attention(&model, &support, &query)?;
    let heat_path = with_suffix(&args.out_prefix, "_heatmap.pgm");
    let overlay_path = with_suffix(&args.out_prefix, "_overlay.pgm");
    write_pnm(&heat_path, &heat)?;
    write_pnm(&overlay_path, &overlay)?;
    writeln!(out, "{}\n{}", heat_path.display(), overlay_path.display()).map_err(write_err)?;
    Ok((heat_path, overlay_path))
}

/// Selected op names; `all` expands to every registered op.
pub fn parse_ops(list: &str) -> Result<Vec<&'static str>> {
    if list.trim() == "all" {
        return Ok(OPS.to_vec());
    }
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            OPS.iter()
                .copied()
                .find(|&o| o == name)
                .ok_or_else(|| usage(format!("unknown op '{name}'; known: {}", OPS.join(", "))))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(usage("--ops is empty"))
            } else {
                Ok(v)
            }
        })
}

/// Prints one line per op and returns whether all passed.
pub fn run_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(usage(format!("--tolerance must be positive, got {}", args.tolerance)));
    }
    if args.instances == 0 {
        return Err(usage("--instances must be positive"));
    }
    let ops = parse_ops(&args.ops)?;
    writeln!(out, "# op\tinstances\tprobes\tworst_rel_err\tstatus").map_err(write_err)?;
    let mut all = true;
    for op in ops {
        let r = check_op(op, args.seed, args.instances)?;
        let ok = r.passed(args.tolerance);
        all &= ok;
        writeln!(
            out,
            "{}\t{}\t{}\t{:.3e}\t{}",
            r.op,
            r.instances,
            r.probes,
            r.worst_rel_err,
            if ok { "PASS" } else { "FAIL" }
        )
        .map_err(write_err)?;
    }
    Ok(all)
}

/// One evaluated arm of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub combine: CombineMode,
    pub classifier: bool,
    pub tta: bool,
    pub report: EvalReport,
}

/// Arms in table order: concatenate then reweight, classifier off then on.
pub const ARMS: [(CombineMode, bool); 4] = [
    (CombineMode::Concatenate, false),
    (CombineMode::Concatenate, true),
    (CombineMode::Reweight, false),
    (CombineMode::Reweight, true),
];

/// Trains each arm with identical data, seed and budget; evaluates each
/// without TTA, and reweight arms also with TTA (concatenation has no
/// weight vectors to average). `progress` receives a line per finished step.
#[allow(clippy::too_many_arguments)]
pub fn ablation_grid(
    train_set: &Dataset,
    test_set: &Dataset,
    train_spec: EpisodeSpec,
    eval_spec: EpisodeSpec,
    episodes_train: usize,
    episodes_eval: usize,
    tta_copies: usize,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (combine, classifier) in ARMS {
        let config = config_for(train_set, combine, classifier)?;
        let tc = TrainConfig::new(train_spec, episodes_train, seed);
        let (model, _) = train_model(config, train_set, &tc, None)?;
        progress(&format!("trained {combine} classifier={classifier}"));
        let mut tta_settings = vec![false];
        if combine == CombineMode::Reweight && tta_copies > 0 {
            tta_settings.push(true);
        }
        for tta in tta_settings {
            let options = EvalOptions {
                tta_copies: if tta { tta_copies } else { 0 },
                ..EvalOptions::default()
            };
            let report = evaluate(&model, test_set, &eval_spec, episodes_eval, &options, seed)?;
            progress(&format!(
                "evaluated {combine} classifier={classifier} tta={tta}: {:.4}",
                report.mean
            ));
            rows.push(AblationRow {
                combine,
                classifier,
                tta,
                report,
            });
        }
    }
    Ok(rows)
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut s = format!("{:<12} {:<4} {:<4} {:>15}\n", "combination", "TA", "AC", "accuracy (%)");
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<4} {:<4} {:>15}\n",
            r.combine.to_string(),
            mark(r.tta),
            mark(r.classifier),
            format!("{:.2} ± {:.2}", 100.0 * r.report.mean, 100.0 * r.report.ci95)
        ));
    }
    s
}

pub fn run_ablate(args: &AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Vec<AblationRow>> {
    if args.episodes_train == 0 || args.episodes_eval == 0 {
        return Err(usage("--episodes-train and --episodes-eval must be positive"));
    }
    let eval_spec = episode_spec(&args.episode)?;
    let train_spec = episode_spec(&EpisodeArgs {
        query: args.train_query,
        ..args.episode.clone()
    })?;
    let train_set = load_dataset(&args.data, Split::Train, None)?;
    let test_set = match &args.data.data {
        Some(_) => train_set.clone(),
        None => load_dataset(&args.data, Split::Test, None)?,
    };
    let rows = ablation_grid(
        &train_set,
        &test_set,
        train_spec,
        eval_spec,
        args.episodes_train,
        args.episodes_eval,
        args.tta,
        args.seed,
        |line| {
            let _ = writeln!(err, "{line}");
        },
    )?;
    write!(out, "{}", format_ablation_table(&rows)).map_err(write_err)?;
    Ok(rows)
}
