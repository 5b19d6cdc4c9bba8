use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use prism::captions::{RemovalStyle, Vocabulary};
use prism::config::RunConfig;
use prism::eval::EvalReport;
use prism::numerics::{gradient_suite, Tensor};
use prism::pipeline::{
    append_run_log, edit_metrics, load_classifier, open_corpus, refuse_existing,
    remove_device_batch, render_report_panels, run_edit_session, stage_eval, stage_gen_data,
    stage_train_ae, stage_train_classifiers, stage_train_clip, stage_train_unet,
    write_edit_outcomes, Models, Workspace,
};
use prism::synthdata::{load_gray_png, save_gray_png, Split};
use prism::{Error, Result};

#[derive(Parser)]
#[command(name = "prism", version, about = "Counterfactual image editing pipeline")]
struct Cli {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured global seed (ripples into stage seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace existing artifacts instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (images, masks, manifest).
    GenData,
    /// Train (or construct) the image codec.
    TrainAe,
    /// Train the contrastive text/image encoders.
    TrainClip,
    /// Fine-tune the denoiser against the frozen codec and text encoder.
    TrainUnet,
    /// Train the multi-head and independent device classifiers.
    TrainClassifier,
    /// Invert one image and emit its null-text reconstruction.
    Invert(InvertArgs),
    /// Edit one image, or run the remove-device batch when no image is given.
    Edit(EditArgs),
    /// Edit-quality metrics (acceptance rate, L1, CPG) over a fresh batch.
    Eval(BatchArgs),
    /// Three-arm augmentation experiment; writes the full report.
    AugmentExp(BatchArgs),
    /// Finite-difference checks for every autodiff primitive.
    GradCheck(GradArgs),
    /// Render result tables and image panels from saved artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct InvertArgs {
    /// Grayscale PNG to invert.
    #[arg(long)]
    image: PathBuf,
    /// Caption describing the image.
    #[arg(long)]
    prompt: String,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long, requires = "orig_prompt", requires = "edit_prompt")]
    image: Option<PathBuf>,
    #[arg(long)]
    orig_prompt: Option<String>,
    #[arg(long)]
    edit_prompt: Option<String>,
    /// Batch size for the remove-device run (images taken from the test split).
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// How removed attributes read in the edit prompt.
    #[arg(long, value_enum, default_value_t = StyleArg::Omission)]
    removal_style: StyleArg,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long, default_value_t = 50)]
    count: usize,
}

#[derive(Args)]
struct GradArgs {
    /// Number of seeds to sweep.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Maximum number of edit panels to render.
    #[arg(long, default_value_t = 8)]
    panels: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StyleArg {
    Negation,
    Omission,
}

impl From<StyleArg> for RemovalStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Negation => RemovalStyle::Negation,
            StyleArg::Omission => RemovalStyle::Omission,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::TrainAe => "train-ae",
        Command::TrainClip => "train-clip",
        Command::TrainUnet => "train-unet",
        Command::TrainClassifier => "train-classifier",
        Command::Invert(_) => "invert",
        Command::Edit(_) => "edit",
        Command::Eval(_) => "eval",
        Command::AugmentExp(_) => "augment-exp",
        Command::GradCheck(_) => "grad-check",
        Command::Report(_) => "report",
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(&cli.out);
    ws.ensure()?;
    let started = Instant::now();
    let name = command_name(&cli.command);

    match &cli.command {
        Command::GenData => {
            let corpus = stage_gen_data(&cfg, &ws, cli.overwrite)?;
            cfg.save(&ws.config_path())?;
            println!(
                "wrote {} samples to {}",
                corpus.samples.len(),
                ws.corpus_dir().display()
            );
        }
        Command::TrainAe => {
            let corpus = open_corpus(&ws)?;
            let ae = stage_train_ae(&cfg, &corpus, &ws, cli.overwrite)?;
            println!(
                "codec saved to {} (latent shape {:?})",
                ws.ae_ckpt().display(),
                ae.latent_shape()
            );
        }
        Command::TrainClip => {
            let corpus = open_corpus(&ws)?;
            stage_train_clip(&cfg, &corpus, &ws, cli.overwrite)?;
            println!(
                "encoders saved to {} and {}",
                ws.text_ckpt().display(),
                ws.image_ckpt().display()
            );
        }
        Command::TrainUnet => {
            let corpus = open_corpus(&ws)?;
            let ae = prism::pipeline::load_autoencoder(&ws.ae_ckpt())?;
            let txt = prism::pipeline::load_text_encoder(&ws.text_ckpt())?;
            stage_train_unet(&cfg, &corpus, &ae, &txt, &ws, cli.overwrite)?;
            println!("denoiser saved to {}", ws.unet_ckpt().display());
        }
        Command::TrainClassifier => {
            let corpus = open_corpus(&ws)?;
            stage_train_classifiers(&cfg, &corpus, &ws, cli.overwrite)?;
            println!(
                "classifiers saved to {} and {}",
                ws.classifier_ckpt().display(),
                ws.device_classifier_ckpt().display()
            );
        }
        Command::Invert(args) => {
            let models = Models::load(&cfg, &ws)?;
            let (h, w, pixels) = load_gray_png(&args.image)?;
            let image = Tensor::from_vec(vec![1, h, w], pixels)?;
            let tokens = Vocabulary::closed().tokenize(&args.prompt)?;
            let editor = models.editor();
            let (traj, nulls) = editor.invert(&image, &tokens, &cfg.edit)?;
            let recon = editor.reconstruct(&traj, &nulls, &tokens, &cfg.edit)?;
            let out = ws.root.join("inversion_recon.png");
            refuse_existing(&out, cli.overwrite)?;
            save_gray_png(&out, h, w, recon.data())?;
            let err: f32 = image
                .data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f32>()
                / (h * w) as f32;
            println!("reconstruction written to {} (mean abs error {err:.5})", out.display());
        }
        Command::Edit(args) => match &args.image {
            Some(path) => {
                let models = Models::load(&cfg, &ws)?;
                let vocab = Vocabulary::closed();
                let p_orig = vocab.tokenize(args.orig_prompt.as_deref().unwrap())?;
                let p_edit = vocab.tokenize(args.edit_prompt.as_deref().unwrap())?;
                let (h, w, pixels) = load_gray_png(path)?;
                let image = Tensor::from_vec(vec![1, h, w], pixels)?;
                let editor = models.editor();
                let (session, degenerate) =
                    run_edit_session(&editor, &models.img, &image, &p_orig, &p_edit, &cfg.edit)?;
                let cf_out = ws.root.join("edit_cf.png");
                let recon_out = ws.root.join("edit_recon.png");
                refuse_existing(&cf_out, cli.overwrite)?;
                save_gray_png(&cf_out, h, w, session.image_cf.data())?;
                save_gray_png(&recon_out, h, w, session.reconstruction.data())?;
                match degenerate {
                    Some(msg) => println!(
                        "edit written to {} (degenerate edit: {msg}; score set to 0)",
                        cf_out.display()
                    ),
                    None => println!(
                        "edit written to {} (score {:.4}, accepted: {})",
                        cf_out.display(),
                        session.score,
                        session.accepted
                    ),
                }
            }
            None => {
                let corpus = open_corpus(&ws)?;
                let models = Models::load(&cfg, &ws)?;
                let outcomes = remove_device_batch(
                    &corpus,
                    &models,
                    &cfg.edit,
                    args.removal_style.into(),
                    Split::Test,
                    args.count,
                )?;
                refuse_existing(&ws.edits_dir().join("sessions.jsonl"), cli.overwrite)?;
                write_edit_outcomes(&ws, corpus.spec.height, corpus.spec.width, &outcomes)?;
                let accepted = outcomes.iter().filter(|o| o.session.accepted).count();
                println!(
                    "{} edits written to {} ({} accepted)",
                    outcomes.len(),
                    ws.edits_dir().display(),
                    accepted
                );
            }
        },
        Command::Eval(args) => {
            let corpus = open_corpus(&ws)?;
            let models = Models::load(&cfg, &ws)?;
            let device_clf = load_classifier(&ws.device_classifier_ckpt())?;
            let outcomes = remove_device_batch(
                &corpus,
                &models,
                &cfg.edit,
                RemovalStyle::Omission,
                Split::Test,
                args.count,
            )?;
            let (acceptance, l1, cpg) = edit_metrics(&outcomes, &device_clf)?;
            let report = EvalReport {
                arms: vec![],
                mean_l1: l1,
                mean_cpg: cpg,
                acceptance_rate: Some(acceptance),
                seeds: vec![cfg.seed],
                config_hash: cfg.hash(),
            };
            refuse_existing(&ws.eval_report(), cli.overwrite)?;
            std::fs::write(ws.eval_report(), serde_json::to_string_pretty(&report)?)?;
            println!(
                "acceptance {acceptance:.2}, mean L1 {:?}, mean CPG {:?} -> {}",
                l1,
                cpg,
                ws.eval_report().display()
            );
        }
        Command::AugmentExp(args) => {
            let corpus = open_corpus(&ws)?;
            let models = Models::load(&cfg, &ws)?;
            let device_clf = load_classifier(&ws.device_classifier_ckpt())?;
            let outcomes = remove_device_batch(
                &corpus,
                &models,
                &cfg.edit,
                RemovalStyle::Omission,
                Split::Train,
                args.count,
            )?;
            let report = stage_eval(&cfg, &corpus, &models, &device_clf, &outcomes)?;
            refuse_existing(&ws.eval_report(), cli.overwrite)?;
            std::fs::write(ws.eval_report(), serde_json::to_string_pretty(&report)?)?;
            println!("{}", report.render_table());
            println!("report written to {}", ws.eval_report().display());
        }
        Command::GradCheck(args) => {
            let seeds: Vec<u64> = (0..args.seeds).collect();
            let results = gradient_suite(&seeds)?;
            let mut all_ok = true;
            for r in &results {
                let ok = r.passes(1e-3);
                all_ok &= ok;
                println!(
                    "{:<20} max rel err {:>10.3e}  {}",
                    r.op,
                    r.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if !all_ok {
                return Err(Error::InvalidArg("gradient checks failed".into()));
            }
        }
        Command::Report(args) => {
            if ws.eval_report().exists() {
                let report: EvalReport =
                    serde_json::from_str(&std::fs::read_to_string(ws.eval_report())?)?;
                println!("{}", report.render_table());
            }
            let n = render_report_panels(&ws, args.panels)?;
            println!("{n} panels written to {}", ws.report_dir().display());
        }
    }
    append_run_log(&ws, name, &cfg, started)?;
    Ok(())
}
