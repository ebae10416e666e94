//! Command-line entry point: corpus generation, pretraining, fine-tuning,
//! evaluation, knob sweeps, masking-strategy benchmarking, and PNG
//! visualization. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
//! abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vidmae::autograd::Tape;
use vidmae::checkpoint::Checkpoint;
use vidmae::config::RunConfig;
use vidmae::corpus::{
    generate_synthetic_corpus, load_video, make_patient_folds, DatasetManifest, VideoSample,
};
use vidmae::error::{Result, VidmaeError};
use vidmae::model::{attention_rollout, classify};
use vidmae::nn::Bindings;
use vidmae::pipeline::{resize_clip, subsample_and_clip, ClipMode, ClipProfile};
use vidmae::priors::{clip_region_union, group_boxes_by_frame};
use vidmae::sampler::{baseline_mask, boost, sample_visible, sampler_forward, MaskStrategy};
use vidmae::tokenizer::tokenize;
use vidmae::train::{
    cross_validate, derive_seed, evaluate_videos, finetune, fold_metrics, pretrain, write_curve,
    EvalReport,
};

#[derive(Parser)]
#[command(name = "vidmae", version, about = "Masked video autoencoder with region-prior-guided masking")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and patient-wise folds.
    GenData,
    /// Self-supervised pretraining; writes pretrain.json and curve.csv.
    Pretrain,
    /// Fine-tune a pretrained checkpoint; writes finetune.json.
    Finetune {
        /// Pretrained checkpoint (default: <run>/pretrain.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out validation fold.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a checkpoint; writes metrics.json.
    Eval {
        /// Fine-tuned checkpoint (default: <run>/finetune.json). Ignored with --cv.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Full cross-validation: pretrain + fine-tune + evaluate per fold.
        #[arg(long)]
        cv: bool,
    },
    /// Sweep pi_value or rho over several seeds; writes sweep.csv.
    Sweep {
        /// pi | rho
        #[arg(long)]
        knob: String,
        /// Comma-separated values, e.g. 0,0.05,0.1,0.15,0.2
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Compare masking strategies; writes bench_mask.csv.
    BenchMask {
        /// Comma-separated subset of random_patch,frame,tube,focused.
        #[arg(long, default_value = "random_patch,frame,tube,focused")]
        strategies: String,
    },
    /// Emit PNG panel grids for one video; writes vis/*.png.
    Visualize {
        /// Checkpoint supplying sampler + encoder weights
        /// (default: <run>/pretrain.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Video id (default: first malignant video in the manifest).
        #[arg(long)]
        video: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<VideoSample>, Vec<Option<usize>>)> {
    let manifest = DatasetManifest::read(&cfg.data.manifest_path())?;
    let mut videos = Vec::with_capacity(manifest.len());
    let mut folds = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        videos.push(load_video(e)?);
        folds.push(e.fold);
    }
    Ok((videos, folds))
}

fn split_by_fold(
    videos: &[VideoSample],
    folds: &[Option<usize>],
    val_fold: usize,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    if !folds.iter().any(|f| *f == Some(val_fold)) {
        return Err(VidmaeError::NotFound(format!(
            "fold {val_fold} does not exist in the manifest"
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (v, f) in videos.iter().zip(folds) {
        if *f == Some(val_fold) {
            val.push(v.clone());
        } else {
            train.push(v.clone());
        }
    }
    Ok((train, val))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| VidmaeError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| VidmaeError::io(path, e))
}

/// Pretrain + fine-tune on one train/val split and return validation accuracy.
fn train_once(
    cfg: &RunConfig,
    videos: &[VideoSample],
    folds: &[Option<usize>],
    seed: u64,
) -> Result<f64> {
    let (train, val) = split_by_fold(videos, folds, 0)?;
    let pre = pretrain(&train, &cfg.pretrain_config()?, seed)?;
    let ft = finetune(&pre.checkpoint, &train, &val, &cfg.finetune_config()?, derive_seed(seed, &[1]))?;
    Ok(evaluate_videos(&ft.checkpoint.params, &cfg.finetune_config()?, &val)?.0)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    let run_dir = cfg.run_dir();

    match &cli.cmd {
        Cmd::GenData => {
            let d = &cfg.data;
            let manifest = generate_synthetic_corpus(
                &d.dir,
                d.n_videos,
                d.frames_per_video,
                (d.frame_height, d.frame_width),
                d.malignant_fraction,
                cfg.seed,
            )?;
            let with_folds = make_patient_folds(&manifest, d.k_folds, cfg.seed)?;
            with_folds.write(&d.manifest_path())?;
            println!(
                "wrote {} videos ({} folds) under {}",
                with_folds.len(),
                d.k_folds,
                d.dir.display()
            );
        }

        Cmd::Pretrain => {
            cfg.echo_into(&cli.config)?;
            let (videos, _) = load_corpus(&cfg)?;
            let out = pretrain(&videos, &cfg.pretrain_config()?, cfg.seed)?;
            write_curve(&run_dir.join("curve.csv"), &out.curve)?;
            out.checkpoint.save(&run_dir.join("pretrain.json"))?;
            let last = out.curve.last().unwrap();
            println!(
                "pretrained {} epochs; final loss_recon {:.5} -> {}",
                cfg.pretrain.epochs,
                last.loss_recon,
                run_dir.join("pretrain.json").display()
            );
        }

        Cmd::Finetune { checkpoint, fold } => {
            cfg.echo_into(&cli.config)?;
            let ckpt_path = checkpoint
                .clone()
                .unwrap_or_else(|| run_dir.join("pretrain.json"));
            let base = Checkpoint::load(&ckpt_path)?;
            let (videos, folds) = load_corpus(&cfg)?;
            let (train, val) = split_by_fold(&videos, &folds, *fold)?;
            let out = finetune(&base, &train, &val, &cfg.finetune_config()?, cfg.seed)?;
            out.checkpoint.save(&run_dir.join("finetune.json"))?;
            println!(
                "fine-tuned on {} videos, validated on {} (fold {fold}); best val acc {:.3}",
                train.len(),
                val.len(),
                out.val_acc_per_epoch
                    .iter()
                    .cloned()
                    .fold(f64::NAN, f64::max)
            );
        }

        Cmd::Eval { checkpoint, fold, cv } => {
            cfg.echo_into(&cli.config)?;
            let (videos, folds) = load_corpus(&cfg)?;
            let report = if *cv {
                let k = cfg.data.k_folds;
                let fold_of: Vec<usize> = folds
                    .iter()
                    .map(|f| {
                        f.ok_or_else(|| {
                            VidmaeError::Contract(
                                "cross-validation requires fold assignments; run gen-data".into(),
                            )
                        })
                    })
                    .collect::<Result<_>>()?;
                cross_validate(
                    &videos,
                    &fold_of,
                    &cfg.pretrain_config()?,
                    &cfg.finetune_config()?,
                    k,
                    cfg.seed,
                    cfg.finetune.shared_pretrain,
                )?
                .report
            } else {
                let ckpt_path = checkpoint
                    .clone()
                    .unwrap_or_else(|| run_dir.join("finetune.json"));
                let ckpt = Checkpoint::load(&ckpt_path)?;
                let (_, val) = split_by_fold(&videos, &folds, *fold)?;
                let fm = fold_metrics(&ckpt.params, &cfg.finetune_config()?, &val, *fold)?;
                EvalReport::from_folds(vec![fm])
            };
            report.write_json(&run_dir.join("metrics.json"))?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "null".into());
            println!(
                "acc {} spec {} sens {} -> {}",
                fmt(report.mean.acc),
                fmt(report.mean.spec),
                fmt(report.mean.sens),
                run_dir.join("metrics.json").display()
            );
        }

        Cmd::Sweep { knob, values, seeds } => {
            cfg.echo_into(&cli.config)?;
            if *seeds == 0 {
                return Err(VidmaeError::Config("sweep needs at least 1 seed".into()));
            }
            let vals: Vec<f64> = values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| VidmaeError::Config(format!("sweep value `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.is_empty() {
                return Err(VidmaeError::Config("sweep needs at least one value".into()));
            }
            let (videos, folds) = load_corpus(&cfg)?;
            let mut csv = String::from("knob,value,seed,acc\n");
            for &v in &vals {
                let mut point = cfg.clone();
                match knob.as_str() {
                    "pi" => point.pretrain.pi_value = v,
                    "rho" => point.model.rho = v,
                    other => {
                        return Err(VidmaeError::Config(format!(
                            "unknown sweep knob `{other}` (expected pi or rho)"
                        )))
                    }
                }
                point.validate()?;
                for s in 0..*seeds {
                    let seed = derive_seed(cfg.seed, &[s as u64]);
                    let acc = train_once(&point, &videos, &folds, seed)?;
                    csv.push_str(&format!("{knob},{v},{seed},{acc:.6}\n"));
                    println!("{knob}={v} seed {s}: acc {acc:.3}");
                }
            }
            write_text(&run_dir.join("sweep.csv"), &csv)?;
        }

        Cmd::BenchMask { strategies } => {
            cfg.echo_into(&cli.config)?;
            let strats: Vec<MaskStrategy> = strategies
                .split(',')
                .map(|s| MaskStrategy::parse(s.trim()))
                .collect::<Result<_>>()?;
            let (videos, folds) = load_corpus(&cfg)?;
            let mut csv = String::from("strategy,masked_region_coverage,accuracy\n");
            for &strategy in &strats {
                let mut point = cfg.clone();
                point.pretrain.strategy = match strategy {
                    MaskStrategy::RandomPatch => "random_patch",
                    MaskStrategy::Frame => "frame",
                    MaskStrategy::Tube => "tube",
                    MaskStrategy::Focused => "focused",
                }
                .into();
                let coverage = region_coverage(&point, &videos, strategy)?;
                let acc = train_once(&point, &videos, &folds, cfg.seed)?;
                csv.push_str(&format!("{},{coverage:.6},{acc:.6}\n", point.pretrain.strategy));
                println!("{}: coverage {coverage:.3}, acc {acc:.3}", point.pretrain.strategy);
            }
            write_text(&run_dir.join("bench_mask.csv"), &csv)?;
        }

        Cmd::Visualize { checkpoint, video } => {
            cfg.echo_into(&cli.config)?;
            let ckpt_path = checkpoint
                .clone()
                .unwrap_or_else(|| run_dir.join("pretrain.json"));
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let (videos, _) = load_corpus(&cfg)?;
            let sample = match video {
                Some(id) => videos
                    .iter()
                    .find(|v| &v.id == id)
                    .ok_or_else(|| VidmaeError::NotFound(format!("video `{id}` not in manifest")))?,
                None => videos
                    .iter()
                    .find(|v| v.label == vidmae::corpus::Label::Malignant)
                    .unwrap_or(&videos[0]),
            };
            visualize_video(&cfg, &ckpt, sample, &run_dir.join("vis"))?;
            println!("wrote panels for {} under {}", sample.id, run_dir.join("vis").display());
        }
    }
    Ok(())
}

/// Average fraction of masked tokens whose spatial centers lie in a gt region
/// box, over the corpus clips.
fn region_coverage(cfg: &RunConfig, videos: &[VideoSample], strategy: MaskStrategy) -> Result<f64> {
    let model = &cfg.model;
    let pre = cfg.pretrain_config()?;
    let profile = pre.profile();
    let store = model.init_params(cfg.seed)?;
    let mut covered = 0usize;
    let mut total = 0usize;
    for (vi, video) in videos.iter().enumerate() {
        let by_frame = group_boxes_by_frame(&video.gt_boxes);
        for (ci, mut clip) in subsample_and_clip(video, &profile, derive_seed(cfg.seed, &[vi as u64]))?
            .into_iter()
            .enumerate()
        {
            clip.boxes = clip_region_union(&by_frame, &clip.source_frames);
            let clip = resize_clip(&clip, (model.input_h, model.input_w), (model.patch_h, model.patch_w))?;
            let seed = derive_seed(cfg.seed, &[vi as u64, ci as u64]);
            let mut tape = Tape::new();
            let mut b = Bindings::new(&store);
            let grid = tokenize(&mut tape, &mut b, &clip, model.patch(), model.d)?;
            let plan = if strategy == MaskStrategy::Focused {
                let p = sampler_forward(&mut tape, &mut b, grid.embeddings, model.sampler_heads)?;
                let pi = vidmae::priors::build_pi(&clip.boxes, &grid.geom, pre.pi_value)?;
                let p_hat = boost(&mut tape, p, &pi)?;
                let vals: Vec<f64> = tape.value(p_hat).column(0).to_vec();
                sample_visible(&vals, model.rho, seed)?
            } else {
                baseline_mask(strategy, &grid.geom, model.rho, seed)?
            };
            for &i in &plan.masked {
                let (x, y) = grid.geom.token_center(i)?;
                if clip.boxes.iter().any(|bx| bx.contains(x, y)) {
                    covered += 1;
                }
            }
            total += plan.masked.len();
        }
    }
    if total == 0 {
        return Err(VidmaeError::Contract("no masked tokens in coverage benchmark".into()));
    }
    Ok(covered as f64 / total as f64)
}

fn visualize_video(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    video: &VideoSample,
    out_dir: &Path,
) -> Result<()> {
    let model = &ckpt.model;
    let profile = ClipProfile {
        stride: cfg.pretrain.stride,
        clip_len: model.clip_len,
        clips_per_video: 1,
        mode: ClipMode::Pretrain,
    };
    let by_frame: BTreeMap<usize, Vec<vidmae::corpus::BBox>> =
        group_boxes_by_frame(&cfg.provider()?.boxes(video)?);
    let mut clip = subsample_and_clip(video, &profile, cfg.seed)?.remove(0);
    clip.boxes = clip_region_union(&by_frame, &clip.source_frames);
    let clip = resize_clip(&clip, (model.input_h, model.input_w), (model.patch_h, model.patch_w))?;

    let mut tape = Tape::new();
    let mut b = Bindings::new(&ckpt.params);
    let grid = tokenize(&mut tape, &mut b, &clip, model.patch(), model.d)?;
    let plan = if cfg.strategy()? == MaskStrategy::Focused {
        let p = sampler_forward(&mut tape, &mut b, grid.embeddings, model.sampler_heads)?;
        let pi = vidmae::priors::build_pi(&clip.boxes, &grid.geom, cfg.pretrain.pi_value)?;
        let p_hat = boost(&mut tape, p, &pi)?;
        let vals: Vec<f64> = tape.value(p_hat).column(0).to_vec();
        sample_visible(&vals, model.rho, cfg.seed)?
    } else {
        baseline_mask(cfg.strategy()?, &grid.geom, model.rho, cfg.seed)?
    };

    let mut tape_c = Tape::new();
    let mut b_c = Bindings::new(&ckpt.params);
    let (_, grid_c, attns) = classify(&mut tape_c, &mut b_c, &clip, model)?;
    let rollout = attention_rollout(&tape_c, &attns, &grid_c.geom);

    vidmae::viz::write_clip_panels(out_dir, &clip, &grid.geom, &plan, &rollout)
}
