use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use segflow_core::checkpoint::{self, sha256_hex};
use segflow_core::data::layout::{list_sequences, load_sequence, Sequence, ANNOTATIONS_DIR};
use segflow_core::data::{
    export_scene, flow_to_color, generate_corpus, load_davis_layout, load_flow_dataset, overlay_mask, read_frame, read_mask,
    write_frame, write_rgb, FlowField,
};
use segflow_core::eval::{evaluate_sequences, score_masks, EvalOptions};
use segflow_core::metrics::{flip_ensemble_infer, EvalReport};
use segflow_core::training::{offline_train, online_finetune, OfflineReport, TrainState};
use segflow_core::{FramePair, Mask, SegFlowModel, Tensor};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, EvalArgs, FinetuneArgs, GenDataArgs, TrainArgs, VizArgs};

pub const MODEL_FILE: &str = "model.ckpt";
pub const PROGRESS_FILE: &str = "progress.json";
pub const PHASES_DIR: &str = "phases";
pub const TRAIN_LOG: &str = "train.log";
pub const CURVES_FILE: &str = "curves.csv";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.all_overrides())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    match cli.command {
        Command::GenData(a) => gen_data(config, a),
        Command::Train(a) => train(config, a),
        Command::Finetune(a) => finetune(config, a),
        Command::Eval(a) => eval(config, a),
        Command::Viz(a) => viz(config, a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn require_dir(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::Usage(format!("no {what} dataset given")))?;
    if !path.is_dir() {
        return Err(segflow_core::Error::Data(format!("{what} dataset {} does not exist", path.display())).into());
    }
    Ok(path)
}

fn gen_data(mut config: RunConfig, args: GenDataArgs) -> Result<(), CliError> {
    let g = &mut config.generate;
    if let Some(f) = args.frames {
        g.scene.frames = f;
    }
    if let Some(n) = args.train_sequences {
        g.train_sequences = n;
    }
    if let Some(n) = args.val_sequences {
        g.val_sequences = n;
    }
    let out = config.out.clone();
    config.data.train = Some(out.join("train"));
    config.data.eval = Some(out.join("val"));
    let config = config.resolve()?;
    let g = &config.generate;
    let splits = [("train", 0, g.train_sequences), ("val", g.train_sequences, g.val_sequences)];
    for (name, first, count) in splits {
        let root = out.join(name);
        create_dir(&root)?;
        for (id, scene) in generate_corpus(&g.scene, count, first, config.seed)? {
            export_scene(&scene, &root, &id)?;
        }
        println!("{name}: {count} sequences of {} frames in {}", g.scene.frames, root.display());
    }
    config.write(&out)
}

/// Completed phases of a training run, for resuming it.
#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    fingerprint: String,
    phases: Vec<TrainState>,
}

/// Everything that determines the trained weights.
fn fingerprint(config: &RunConfig) -> String {
    let key = (&config.model, &config.train, &config.data, &config.ablation);
    sha256_hex(&serde_json::to_vec(&key).expect("config serializes"))
}

fn phase_path(out: &Path, index: usize) -> PathBuf {
    out.join(PHASES_DIR).join(format!("phase-{index}.ckpt"))
}

fn metadata(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Load the finished phases of a previous run in `out`, if it is the same run.
fn resume_state(out: &Path, config: &RunConfig, print: &str) -> Result<Option<(SegFlowModel, Vec<TrainState>)>, CliError> {
    let path = out.join(PROGRESS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let progress: Progress = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if progress.fingerprint != print {
        return Err(CliError::Usage(format!(
            "{} holds a different training run; pass --fresh or choose another --out",
            out.display()
        )));
    }
    if progress.phases.is_empty() {
        return Ok(None);
    }
    let last = phase_path(out, progress.phases.len() - 1);
    let ck = checkpoint::load_matching(&last, &config.model)?;
    Ok(Some((ck.model, progress.phases)))
}

fn train(mut config: RunConfig, args: TrainArgs) -> Result<(), CliError> {
    if args.train.is_some() {
        config.data.train = args.train;
    }
    if args.flow.is_some() {
        config.data.flow = args.flow;
    }
    if let Some(r) = args.rounds {
        config.train.rounds = r;
    }
    if let Some(s) = args.max_steps {
        config.train.max_steps_per_phase = s;
    }
    let a = &mut config.ablation;
    a.disable_fusion |= args.disable_fusion;
    a.disable_offline |= args.disable_offline;
    a.disable_iterative |= args.disable_iterative;
    a.disable_seg_augmentation |= args.disable_seg_augmentation;
    a.disable_flow_augmentation |= args.disable_flow_augmentation;
    let config = config.resolve()?;
    let out = config.out.clone();
    create_dir(&out)?;
    config.write(&out)?;

    let mut model = SegFlowModel::new(config.model.clone())?;
    let print = fingerprint(&config);
    if config.ablation.disable_offline {
        checkpoint::save(&model, &metadata(&[("run", print), ("phases", "0".into())]), out.join(MODEL_FILE))?;
        println!("offline training disabled; wrote the initial model to {}", out.join(MODEL_FILE).display());
        return Ok(());
    }

    let seg_root = require_dir(config.data.train.clone(), "training")?;
    let flow_root = require_dir(config.data.flow.clone().or_else(|| config.data.train.clone()), "flow")?;
    let seg_pairs = load_davis_layout(&seg_root, config.data.skip_missing)?.load_all()?;
    let flow_pairs = load_flow_dataset(&flow_root, config.data.skip_missing)?.load_all()?;
    println!("loaded {} segmentation pairs and {} flow pairs", seg_pairs.len(), flow_pairs.len());

    let resumed = if args.fresh { None } else { resume_state(&out, &config, &print)? };
    let (start, previous) = match resumed {
        Some((m, phases)) => {
            println!("resuming after {} finished phases", phases.len());
            model = m;
            (phases.len(), phases)
        }
        None => (0, Vec::new()),
    };
    create_dir(&out.join(PHASES_DIR))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(start > 0)
        .write(true)
        .truncate(start == 0)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut done = previous.clone();
    let mut log_error = None;
    let result = offline_train(
        &mut model,
        &seg_pairs,
        &flow_pairs,
        &config.train,
        start,
        previous,
        |line| {
            println!("{line}");
            if let Err(e) = writeln!(log_file, "{line}") {
                log_error.get_or_insert(e);
            }
        },
        |index, state, model| {
            let meta = metadata(&[("run", print.clone()), ("phases", (index + 1).to_string())]);
            checkpoint::save(model, &meta, phase_path(&out, index))?;
            done.push(state.clone());
            let progress = Progress {
                fingerprint: print.clone(),
                phases: done.clone(),
            };
            let path = out.join(PROGRESS_FILE);
            fs::write(&path, serde_json::to_string_pretty(&progress).expect("progress serializes")).map_err(|e| segflow_core::Error::Data(format!("{}: {e}", path.display())))
        },
    );
    if let Some(e) = log_error {
        return Err(CliError::io(&log_path, e));
    }
    let report: OfflineReport = result?;
    write_file(&out.join(CURVES_FILE), report.curves_csv())?;
    write_file(&out.join(TRAIN_REPORT), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let meta = metadata(&[("run", print), ("phases", report.phases.len().to_string())]);
    checkpoint::save(&model, &meta, out.join(MODEL_FILE))?;
    for p in &report.phases {
        println!(
            "round {} {} best val error {:.4} at step {} ({})",
            p.round_index, p.active_branch, p.best_error, p.best_step, p.stop_reason.map_or("-".to_string(), |r| format!("{r:?}"))
        );
    }
    println!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn checkpoint_path(config: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| config.out.join(MODEL_FILE))
}

fn finetune(mut config: RunConfig, args: FinetuneArgs) -> Result<(), CliError> {
    if args.data.is_some() {
        config.data.eval = args.data;
    }
    config.ablation.disable_online |= args.disable_online;
    let ck_path = checkpoint_path(&config, args.checkpoint);
    let ck = checkpoint::load(&ck_path)?;
    config.model = ck.model.config().clone();
    let config = config.resolve()?;
    let root = require_dir(config.data.eval.clone(), "sequence")?;
    let out = config.out.join("finetune");
    create_dir(&out)?;
    config.write(&out)?;

    let seq = load_sequence(&root, &args.sequence)?;
    let mask_path = args
        .mask
        .unwrap_or_else(|| root.join(ANNOTATIONS_DIR).join(&seq.id).join(format!("{}.png", seq.frame_names[0])));
    if !mask_path.is_file() {
        return Err(segflow_core::Error::MissingAnnotation { path: mask_path }.into());
    }
    let mask = read_mask(&mask_path)?;
    let mut model = ck.model;
    let dest = out.join(format!("{}.ckpt", seq.id));
    if config.ablation.disable_online {
        println!("online fine-tuning disabled; copying the offline model");
    } else {
        let report = online_finetune(&mut model, &seq.frames[0], &mask, &config.train)?;
        let last = report.losses.last().copied().unwrap_or(f64::NAN);
        println!("fine-tuned {} for {} steps, final loss {last:.4}", seq.id, report.losses.len());
        write_file(
            &out.join(format!("{}.json", seq.id)),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
    }
    let mut meta = ck.metadata;
    meta.insert("finetuned_on".into(), seq.id.clone());
    checkpoint::save(&model, &meta, &dest)?;
    println!("wrote {}", dest.display());
    Ok(())
}

fn load_sequences(root: &Path) -> Result<Vec<Sequence>, CliError> {
    let ids = list_sequences(root)?;
    if ids.is_empty() {
        return Err(segflow_core::Error::Data(format!("no sequences under {}", root.display())).into());
    }
    Ok(ids.iter().map(|id| load_sequence(root, id)).collect::<Result<_, _>>()?)
}

/// Score masks stored as `<dir>/<seq>/<frame>.png`.
fn evaluate_predictions(dir: &Path, seqs: &[Sequence], tolerance: usize) -> Result<EvalReport, CliError> {
    let mut per_sequence = BTreeMap::new();
    for seq in seqs {
        let n = seq.len() - 1;
        let masks = seq.frame_names[..n]
            .iter()
            .map(|f| read_mask(dir.join(&seq.id).join(format!("{f}.png"))))
            .collect::<Result<Vec<Mask>, _>>()?;
        let (h, w) = seq.frames[0].spatial();
        // Without ground-truth flow the T-proxy falls back to zero motion.
        let flows = vec![Tensor::zeros(&[2, h, w]); n];
        per_sequence.insert(seq.id.clone(), score_masks(seq, &masks, &flows, tolerance)?);
    }
    Ok(EvalReport::from_sequences(per_sequence, None)?)
}

fn eval(mut config: RunConfig, args: EvalArgs) -> Result<(), CliError> {
    if args.data.is_some() {
        config.data.eval = args.data;
    }
    config.eval.flip_ensemble |= args.flip_ensemble;
    config.eval.online |= args.online;
    config.ablation.disable_online |= args.disable_online;
    let model = match &args.predictions {
        Some(_) => None,
        None => {
            let ck = checkpoint::load(checkpoint_path(&config, args.checkpoint.clone()))?;
            config.model = ck.model.config().clone();
            Some(ck.model)
        }
    };
    let config = config.resolve()?;
    let root = require_dir(config.data.eval.clone(), "evaluation")?;
    let out = config.out.join("eval");
    create_dir(&out)?;
    config.write(&out)?;

    let seqs = load_sequences(&root)?;
    let report = match (&args.predictions, &model) {
        (Some(dir), _) => evaluate_predictions(dir, &seqs, config.eval.boundary_tolerance)?,
        (None, Some(model)) => {
            let (h, w) = seqs[0].frames[0].spatial();
            if (h, w) != model.config().input_size {
                return Err(segflow_core::Error::Shape(format!(
                    "dataset frames are {h}x{w} but the checkpoint expects {:?}",
                    model.config().input_size
                ))
                .into());
            }
            let online = (config.eval.online && !config.ablation.disable_online).then(|| config.train.clone());
            let options = EvalOptions {
                flip_ensemble: config.eval.flip_ensemble,
                boundary_tolerance: config.eval.boundary_tolerance,
                online,
            };
            evaluate_sequences(model, &seqs, &options)?
        }
        (None, None) => unreachable!("a model is loaded whenever predictions are absent"),
    };
    write_file(&out.join(REPORT_JSON), report.to_json())?;
    write_file(&out.join(REPORT_TXT), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn viz(config: RunConfig, args: VizArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(CliError::Usage(format!("alpha must lie in [0, 1], got {}", args.alpha)));
    }
    let ck = checkpoint::load(checkpoint_path(&config, args.checkpoint))?;
    let mut config = config;
    config.model = ck.model.config().clone();
    let config = config.resolve()?;
    let out = config.out.join("viz");
    create_dir(&out)?;
    config.write(&out)?;

    let pair = FramePair::new(read_frame(&args.frame)?, read_frame(&args.next)?);
    let output = if config.eval.flip_ensemble {
        flip_ensemble_infer(&ck.model, &pair)?
    } else {
        ck.model.forward(&pair)?
    };
    let stem = args
        .frame
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("cannot name outputs after {}", args.frame.display())))?;
    let mask = Mask::from_logits(&output.seg_logits);
    let seg_path = out.join(format!("{stem}_seg.png"));
    write_frame(&overlay_mask(&pair.frame_t, &mask, [1.0, 0.0, 0.0], args.alpha), &seg_path)?;
    let flow_path = out.join(format!("{stem}_flow.png"));
    write_rgb(&flow_to_color(&FlowField::from_tensor(&output.flow_pred, None), None), &flow_path)?;
    println!("wrote {} and {}", seg_path.display(), flow_path.display());
    Ok(())
}
