//! End-to-end orchestration shared by the CLI binary and the acceptance
//! suite: artifact layout, model persistence, and the pipeline stages.
//!
//! Model structs carry non-weight state (dims, scales, trained flags); it is
//! persisted alongside the weights as `meta.*` tensors so one container
//! format covers everything. `meta.*` names are reserved for this purpose.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::captions::{
    caption_from_record, Attribute, AttributeRecord, EditAction, RemovalStyle, TokenSequence,
    Vocabulary,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::denoiser::{finetune, prepare_corpus, sample, UNet};
use crate::editor::{clip_edit_score, EditConfig, EditSession, Editor};
use crate::encoders::{
    train_autoencoder, train_contrastive, CodecMode, ImageEncoder, LatentAutoencoder, TextEncoder,
};
use crate::eval::{
    augmentation_experiment, split_labeled, train_classifier, train_device_classifier,
    Classifier, EvalReport, LabeledImage,
};
use crate::numerics::{ParamSet, Tensor};
use crate::schedule::{DiffusionSchedule, TimestepPlan};
use crate::synthdata::{generate_corpus, load_corpus, write_corpus, Corpus, Split};
use crate::{Error, Result};

/// Output-directory layout for one run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn ae_ckpt(&self) -> PathBuf {
        self.root.join("ae.prsm")
    }

    pub fn text_ckpt(&self) -> PathBuf {
        self.root.join("clip_text.prsm")
    }

    pub fn image_ckpt(&self) -> PathBuf {
        self.root.join("clip_image.prsm")
    }

    pub fn unet_ckpt(&self) -> PathBuf {
        self.root.join("unet.prsm")
    }

    pub fn classifier_ckpt(&self) -> PathBuf {
        self.root.join("classifier.prsm")
    }

    pub fn device_classifier_ckpt(&self) -> PathBuf {
        self.root.join("device_classifier.prsm")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }

    pub fn edits_dir(&self) -> PathBuf {
        self.root.join("edits")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn run_log(&self) -> PathBuf {
        self.root.join("run_log.jsonl")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn loss_csv(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_loss.csv"))
    }
}

/// Second runs refuse to clobber an existing artifact unless --overwrite.
pub fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::InvalidArg(format!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

/// One line per executed command, machine-readable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
}

pub fn append_run_log(ws: &Workspace, command: &str, cfg: &RunConfig, started: Instant) -> Result<()> {
    let entry = RunLogEntry {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut line = serde_json::to_string(&entry)?;
    line.push('\n');
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(ws.run_log())?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

// --- checkpoint wiring -----------------------------------------------------

fn meta_tensor(values: &[f32]) -> Tensor {
    Tensor::from_vec(vec![values.len()], values.to_vec()).expect("finite meta values")
}

fn with_meta(params: &ParamSet, meta: &[(&str, Vec<f32>)]) -> ParamSet {
    let mut out = params.clone();
    for (name, values) in meta {
        out.insert(format!("meta.{name}"), meta_tensor(values));
    }
    out
}

fn split_meta(set: ParamSet) -> (ParamSet, HashMap<String, Vec<f32>>) {
    let mut params = ParamSet::new();
    let mut meta = HashMap::new();
    for (name, t) in set.iter() {
        if let Some(key) = name.strip_prefix("meta.") {
            meta.insert(key.to_string(), t.data().to_vec());
        } else {
            params.insert(name, t.clone());
        }
    }
    (params, meta)
}

fn meta_scalar(meta: &HashMap<String, Vec<f32>>, key: &str, path: &Path) -> Result<f32> {
    meta.get(key)
        .and_then(|v| v.first().copied())
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing meta.{key}", path.display())))
}

pub fn save_autoencoder(ae: &LatentAutoencoder, path: &Path) -> Result<()> {
    let mode = match ae.mode {
        CodecMode::Learned => 0.0,
        CodecMode::PixelBypass => 1.0,
    };
    let set = with_meta(
        &ae.params,
        &[
            ("mode", vec![mode]),
            ("height", vec![ae.height as f32]),
            ("width", vec![ae.width as f32]),
            ("latent_scale", vec![ae.latent_scale]),
            ("train_recon_error", vec![ae.train_recon_error]),
        ],
    );
    checkpoint::save(&set, path)
}

pub fn load_autoencoder(path: &Path) -> Result<LatentAutoencoder> {
    let (params, meta) = split_meta(checkpoint::load(path)?);
    let mode = if meta_scalar(&meta, "mode", path)? == 0.0 {
        CodecMode::Learned
    } else {
        CodecMode::PixelBypass
    };
    Ok(LatentAutoencoder {
        params,
        mode,
        height: meta_scalar(&meta, "height", path)? as usize,
        width: meta_scalar(&meta, "width", path)? as usize,
        latent_scale: meta_scalar(&meta, "latent_scale", path)?,
        train_recon_error: meta_scalar(&meta, "train_recon_error", path)?,
    })
}

pub fn save_text_encoder(txt: &TextEncoder, path: &Path) -> Result<()> {
    let set = with_meta(
        &txt.params,
        &[
            ("vocab_len", vec![txt.vocab_len as f32]),
            ("heads", vec![txt.heads as f32]),
            ("layers", vec![txt.layers as f32]),
        ],
    );
    checkpoint::save(&set, path)
}

pub fn load_text_encoder(path: &Path) -> Result<TextEncoder> {
    let (params, meta) = split_meta(checkpoint::load(path)?);
    Ok(TextEncoder {
        params,
        vocab_len: meta_scalar(&meta, "vocab_len", path)? as usize,
        heads: meta_scalar(&meta, "heads", path)? as usize,
        layers: meta_scalar(&meta, "layers", path)? as usize,
    })
}

pub fn save_image_encoder(img: &ImageEncoder, path: &Path) -> Result<()> {
    let set = with_meta(
        &img.params,
        &[("height", vec![img.height as f32]), ("width", vec![img.width as f32])],
    );
    checkpoint::save(&set, path)
}

pub fn load_image_encoder(path: &Path) -> Result<ImageEncoder> {
    let (params, meta) = split_meta(checkpoint::load(path)?);
    Ok(ImageEncoder {
        params,
        height: meta_scalar(&meta, "height", path)? as usize,
        width: meta_scalar(&meta, "width", path)? as usize,
    })
}

pub fn save_unet(unet: &UNet, path: &Path) -> Result<()> {
    let set = with_meta(
        &unet.params,
        &[
            ("channels", vec![unet.channels as f32]),
            ("trained", vec![unet.trained as u8 as f32]),
        ],
    );
    checkpoint::save(&set, path)
}

pub fn load_unet(path: &Path) -> Result<UNet> {
    let (params, meta) = split_meta(checkpoint::load(path)?);
    Ok(UNet {
        params,
        channels: meta_scalar(&meta, "channels", path)? as usize,
        trained: meta_scalar(&meta, "trained", path)? != 0.0,
    })
}

pub fn save_classifier(clf: &Classifier, path: &Path) -> Result<()> {
    let cols: Vec<f32> = clf.head_cols.iter().map(|&c| c as f32).collect();
    let set = with_meta(
        &clf.params,
        &[
            ("n_heads", vec![clf.n_heads as f32]),
            ("head_cols", cols),
            ("height", vec![clf.height as f32]),
            ("width", vec![clf.width as f32]),
            ("trained", vec![clf.trained as u8 as f32]),
        ],
    );
    checkpoint::save(&set, path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let (params, meta) = split_meta(checkpoint::load(path)?);
    let head_cols = meta
        .get("head_cols")
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing meta.head_cols", path.display())))?
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok(Classifier {
        params,
        n_heads: meta_scalar(&meta, "n_heads", path)? as usize,
        head_cols,
        height: meta_scalar(&meta, "height", path)? as usize,
        width: meta_scalar(&meta, "width", path)? as usize,
        trained: meta_scalar(&meta, "trained", path)? != 0.0,
    })
}

fn write_loss_csv(path: &Path, losses: &[f32]) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

// --- pipeline stages -------------------------------------------------------

pub fn stage_gen_data(cfg: &RunConfig, ws: &Workspace, overwrite: bool) -> Result<Corpus> {
    let dir = ws.corpus_dir();
    refuse_existing(&dir.join("manifest.jsonl"), overwrite)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&corpus, &dir)?;
    Ok(corpus)
}

pub fn open_corpus(ws: &Workspace) -> Result<Corpus> {
    let manifest = ws.corpus_dir().join("manifest.jsonl");
    if !manifest.exists() {
        return Err(Error::MissingCheckpoint(format!(
            "{} (run gen-data first)",
            manifest.display()
        )));
    }
    load_corpus(&ws.corpus_dir())
}

/// Trains (or, in pixel-bypass mode, constructs) the codec and saves it.
pub fn stage_train_ae(cfg: &RunConfig, corpus: &Corpus, ws: &Workspace, overwrite: bool) -> Result<LatentAutoencoder> {
    refuse_existing(&ws.ae_ckpt(), overwrite)?;
    let ae = match cfg.codec {
        CodecMode::Learned => {
            let (ae, stats) = train_autoencoder(corpus, &cfg.autoencoder)?;
            std::fs::write(ws.root.join("ae_stats.json"), serde_json::to_string_pretty(&stats)?)?;
            ae
        }
        CodecMode::PixelBypass => {
            LatentAutoencoder::pixel_bypass(corpus.spec.height, corpus.spec.width)
        }
    };
    save_autoencoder(&ae, &ws.ae_ckpt())?;
    Ok(ae)
}

pub fn stage_train_clip(cfg: &RunConfig, corpus: &Corpus, ws: &Workspace, overwrite: bool) -> Result<(TextEncoder, ImageEncoder)> {
    refuse_existing(&ws.text_ckpt(), overwrite)?;
    refuse_existing(&ws.image_ckpt(), overwrite)?;
    let (txt, img, stats) = train_contrastive(corpus, &cfg.contrastive)?;
    write_loss_csv(&ws.loss_csv("clip"), &stats.losses)?;
    save_text_encoder(&txt, &ws.text_ckpt())?;
    save_image_encoder(&img, &ws.image_ckpt())?;
    Ok((txt, img))
}

/// Fine-tunes the denoiser against frozen codec and text-encoder weights
/// loaded from their checkpoints.
pub fn stage_train_unet(
    cfg: &RunConfig,
    corpus: &Corpus,
    ae: &LatentAutoencoder,
    txt: &TextEncoder,
    ws: &Workspace,
    overwrite: bool,
) -> Result<UNet> {
    refuse_existing(&ws.unet_ckpt(), overwrite)?;
    let (schedule, _) = cfg.schedule.build()?;
    let prepared = prepare_corpus(corpus, ae, txt, Split::Train)?;
    let channels = ae.latent_shape()[0];
    let (unet, losses) = finetune(&prepared, &schedule, channels, &cfg.unet)?;
    write_loss_csv(&ws.loss_csv("unet"), &losses)?;
    save_unet(&unet, &ws.unet_ckpt())?;
    Ok(unet)
}

pub fn stage_train_classifiers(cfg: &RunConfig, corpus: &Corpus, ws: &Workspace, overwrite: bool) -> Result<(Classifier, Classifier)> {
    refuse_existing(&ws.classifier_ckpt(), overwrite)?;
    refuse_existing(&ws.device_classifier_ckpt(), overwrite)?;
    let train = split_labeled(corpus, Split::Train);
    let (h, w) = (corpus.spec.height, corpus.spec.width);
    let clf = train_classifier(&train, h, w, &cfg.classifier)?;
    let dev = train_device_classifier(&train, h, w, &cfg.classifier)?;
    save_classifier(&clf, &ws.classifier_ckpt())?;
    save_classifier(&dev, &ws.device_classifier_ckpt())?;
    Ok((clf, dev))
}

/// All frozen and trained models an editing/eval stage needs.
pub struct Models {
    pub ae: LatentAutoencoder,
    pub txt: TextEncoder,
    pub img: ImageEncoder,
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
    pub plan: TimestepPlan,
}

impl Models {
    pub fn load(cfg: &RunConfig, ws: &Workspace) -> Result<Self> {
        let (schedule, plan) = cfg.schedule.build()?;
        Ok(Models {
            ae: load_autoencoder(&ws.ae_ckpt())?,
            txt: load_text_encoder(&ws.text_ckpt())?,
            img: load_image_encoder(&ws.image_ckpt())?,
            unet: load_unet(&ws.unet_ckpt())?,
            schedule,
            plan,
        })
    }

    pub fn editor(&self) -> Editor<'_> {
        Editor {
            unet: &self.unet,
            ae: &self.ae,
            txt: &self.txt,
            schedule: &self.schedule,
            plan: &self.plan,
        }
    }
}

/// One counterfactual edit with full provenance back to the source sample.
pub struct CfOutcome {
    /// Index into the test-split vector this edit started from.
    pub sample_index: usize,
    pub record_orig: AttributeRecord,
    pub record_edit: AttributeRecord,
    pub session: EditSession,
    /// Degenerate-edit status from scoring, if any (score forced to 0).
    pub degenerate: Option<String>,
}

/// Inverts, reconstructs, edits, and scores a single image.
pub fn run_edit_session(
    editor: &Editor<'_>,
    img_enc: &ImageEncoder,
    image: &Tensor,
    p_orig: &TokenSequence,
    p_edit: &TokenSequence,
    ecfg: &EditConfig,
) -> Result<(EditSession, Option<String>)> {
    let (traj, nulls) = editor.invert(image, p_orig, ecfg)?;
    let reconstruction = editor.reconstruct(&traj, &nulls, p_orig, ecfg)?;
    let image_cf = editor.edit(&traj, &nulls, p_orig, p_edit, ecfg)?;
    let (score, degenerate) = match clip_edit_score(img_enc, editor.txt, image, &image_cf, p_orig, p_edit) {
        Ok(s) => (s, None),
        Err(Error::DegenerateEdit(msg)) => (0.0, Some(msg)),
        Err(e) => return Err(e),
    };
    let accepted = degenerate.is_none() && score >= ecfg.threshold;
    Ok((
        EditSession {
            image_orig: image.clone(),
            reconstruction,
            image_cf,
            p_orig: p_orig.clone(),
            p_edit: p_edit.clone(),
            score,
            accepted,
        },
        degenerate,
    ))
}

/// "Remove device" edits over the first `max_n` device-positive images of
/// `split`. Test-split edits feed the efficacy/locality metrics; train-split
/// edits feed augmentation, so evaluation images never enter a training set.
pub fn remove_device_batch(
    corpus: &Corpus,
    models: &Models,
    ecfg: &EditConfig,
    style: RemovalStyle,
    split: Split,
    max_n: usize,
) -> Result<Vec<CfOutcome>> {
    let vocab = Vocabulary::closed();
    let editor = models.editor();
    let test: Vec<_> = corpus.split(split).collect();
    let mut out = Vec::new();
    for (i, s) in test.iter().enumerate() {
        if out.len() >= max_n {
            break;
        }
        if !s.record.device {
            continue;
        }
        let (c_orig, c_edit) =
            crate::captions::make_edit_prompts(&s.record, &[(Attribute::Device, EditAction::Remove)], style)?;
        let p_orig = vocab.tokenize(&c_orig.text)?;
        let p_edit = vocab.tokenize(&c_edit.text)?;
        let image = Tensor::from_vec(
            vec![1, corpus.spec.height, corpus.spec.width],
            s.image.clone(),
        )?;
        let (session, degenerate) =
            run_edit_session(&editor, &models.img, &image, &p_orig, &p_edit, ecfg)?;
        out.push(CfOutcome {
            sample_index: i,
            record_orig: s.record,
            record_edit: c_edit.source_record,
            session,
            degenerate,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArg(
            "no device-positive test images to edit".into(),
        ));
    }
    Ok(out)
}

/// Accepted counterfactuals as labeled training images (labels from the
/// edit prompt's intended attributes).
pub fn cf_labeled_images(outcomes: &[CfOutcome]) -> Vec<LabeledImage> {
    outcomes
        .iter()
        .filter(|o| o.session.accepted)
        .map(|o| LabeledImage::from_record(o.session.image_cf.data().to_vec(), &o.record_edit))
        .collect()
}

/// Control arm: generic augmentation with fresh samples cycled over the four
/// subgroup prompts (disease A with devices, disease A without, disease B,
/// no finding), labeled by their generation prompts. Unlike the
/// counterfactual arm this mix is not targeted at the confound.
pub fn generated_control_samples(
    models: &Models,
    n: usize,
    guidance: f32,
    base_seed: u64,
) -> Result<Vec<LabeledImage>> {
    let subgroups = [
        AttributeRecord::new(true, false, true),
        AttributeRecord::new(true, false, false),
        AttributeRecord::new(false, true, false),
        AttributeRecord::new(false, false, false),
    ];
    let records: Vec<AttributeRecord> =
        (0..n).map(|i| subgroups[i % subgroups.len()]).collect();
    let vocab = Vocabulary::closed();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let caption = caption_from_record(r)?;
        let prompt = vocab.tokenize(&caption.text)?;
        let img = sample(
            &models.unet,
            &models.ae,
            &models.txt,
            &models.schedule,
            &models.plan,
            &prompt,
            guidance,
            base_seed.wrapping_add(i as u64),
        )?;
        out.push(LabeledImage::from_record(img.data().to_vec(), r));
    }
    Ok(out)
}

/// The three-arm augmentation experiment plus edit-quality summary metrics.
pub fn stage_eval(
    cfg: &RunConfig,
    corpus: &Corpus,
    models: &Models,
    device_clf: &Classifier,
    outcomes: &[CfOutcome],
) -> Result<EvalReport> {
    let cf = cf_labeled_images(outcomes);
    let generated = generated_control_samples(
        models,
        cf.len(),
        cfg.edit.guidance,
        cfg.seed.wrapping_mul(2654435761).wrapping_add(99),
    )?;
    let base_train = split_labeled(corpus, Split::Train);
    let std_test = split_labeled(corpus, Split::Test);
    let anti_test = crate::eval::anti_correlated(&std_test);
    let mut report = augmentation_experiment(
        &base_train,
        &cf,
        &generated,
        &std_test,
        &anti_test,
        corpus.spec.height,
        corpus.spec.width,
        &cfg.augment,
        cfg.hash(),
    )?;

    let (acceptance, l1, cpg) = edit_metrics(outcomes, device_clf)?;
    report.acceptance_rate = Some(acceptance);
    report.mean_l1 = l1;
    report.mean_cpg = cpg;
    Ok(report)
}

/// Acceptance rate plus mean L1 / mean device-CPG over accepted edits.
pub fn edit_metrics(
    outcomes: &[CfOutcome],
    device_clf: &Classifier,
) -> Result<(f32, Option<f32>, Option<f32>)> {
    let accepted: Vec<&CfOutcome> = outcomes.iter().filter(|o| o.session.accepted).collect();
    let acceptance = accepted.len() as f32 / outcomes.len().max(1) as f32;
    if accepted.is_empty() {
        return Ok((acceptance, None, None));
    }
    let mut l1 = 0.0f32;
    let mut cpg_sum = 0.0f32;
    for o in &accepted {
        l1 += crate::eval::l1_identity(&o.session.image_orig, &o.session.image_cf)?;
        cpg_sum += crate::eval::cpg(device_clf, 0, &o.session.image_orig, &o.session.image_cf)?;
    }
    let n = accepted.len() as f32;
    Ok((acceptance, Some(l1 / n), Some(cpg_sum / n)))
}

/// JSON line persisted per edit so `report` can rebuild its panels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditOutcomeRecord {
    pub index: usize,
    pub sample_index: usize,
    pub record_orig: AttributeRecord,
    pub record_edit: AttributeRecord,
    pub score: f32,
    pub accepted: bool,
    pub degenerate: Option<String>,
}

/// Writes per-edit PNGs (original / reconstruction / counterfactual) and a
/// `sessions.jsonl` summary under the workspace's edits directory.
pub fn write_edit_outcomes(ws: &Workspace, h: usize, w: usize, outcomes: &[CfOutcome]) -> Result<()> {
    use std::io::Write;
    let dir = ws.edits_dir();
    std::fs::create_dir_all(&dir)?;
    let mut f = std::fs::File::create(dir.join("sessions.jsonl"))?;
    for (i, o) in outcomes.iter().enumerate() {
        crate::synthdata::save_gray_png(&dir.join(format!("{i:03}_orig.png")), h, w, o.session.image_orig.data())?;
        crate::synthdata::save_gray_png(&dir.join(format!("{i:03}_recon.png")), h, w, o.session.reconstruction.data())?;
        crate::synthdata::save_gray_png(&dir.join(format!("{i:03}_cf.png")), h, w, o.session.image_cf.data())?;
        let rec = EditOutcomeRecord {
            index: i,
            sample_index: o.sample_index,
            record_orig: o.record_orig,
            record_edit: o.record_edit,
            score: o.session.score,
            accepted: o.session.accepted,
            degenerate: o.degenerate.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_edit_records(ws: &Workspace) -> Result<Vec<EditOutcomeRecord>> {
    use std::io::BufRead;
    let path = ws.edits_dir().join("sessions.jsonl");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(format!("{} (run edit first)", path.display())));
    }
    let f = std::fs::File::open(path)?;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Renders up to `max_panels` four-up panels
/// (original | reconstruction | counterfactual | 4x difference) from the
/// saved edit PNGs. Returns the number of panels written.
pub fn render_report_panels(ws: &Workspace, max_panels: usize) -> Result<usize> {
    let records = read_edit_records(ws)?;
    let dir = ws.edits_dir();
    let out = ws.report_dir();
    std::fs::create_dir_all(&out)?;
    let mut count = 0;
    for rec in records.iter().take(max_panels) {
        let i = rec.index;
        let (h, w, orig) = crate::synthdata::load_gray_png(&dir.join(format!("{i:03}_orig.png")))?;
        let (_, _, recon) = crate::synthdata::load_gray_png(&dir.join(format!("{i:03}_recon.png")))?;
        let (_, _, cf) = crate::synthdata::load_gray_png(&dir.join(format!("{i:03}_cf.png")))?;
        let diff: Vec<f32> = orig.iter().zip(&cf).map(|(a, b)| ((a - b).abs() * 4.0).min(1.0)).collect();
        let panes = [&orig, &recon, &cf, &diff];
        let sep = 1usize;
        let total_w = 4 * w + 3 * sep;
        let mut pixels = vec![1.0f32; h * total_w];
        for (pi, pane) in panes.iter().enumerate() {
            let x0 = pi * (w + sep);
            for y in 0..h {
                for x in 0..w {
                    pixels[y * total_w + x0 + x] = pane[y * w + x];
                }
            }
        }
        crate::synthdata::save_gray_png(&out.join(format!("panel_{i:03}.png")), h, total_w, &pixels)?;
        count += 1;
    }
    Ok(count)
}

/// Full pipeline: data → codec → encoders → denoiser → classifiers → edits
/// → report. Every stage runs from the same config; artifacts land in `ws`.
pub fn full_pipeline(cfg: &RunConfig, ws: &Workspace, n_edits: usize, overwrite: bool) -> Result<EvalReport> {
    ws.ensure()?;
    cfg.save(&ws.config_path())?;
    let corpus = stage_gen_data(cfg, ws, overwrite)?;
    let ae = stage_train_ae(cfg, &corpus, ws, overwrite)?;
    let (txt, img) = stage_train_clip(cfg, &corpus, ws, overwrite)?;
    let unet = stage_train_unet(cfg, &corpus, &ae, &txt, ws, overwrite)?;
    let (_clf, dev) = stage_train_classifiers(cfg, &corpus, ws, overwrite)?;
    let (schedule, plan) = cfg.schedule.build()?;
    let models = Models { ae, txt, img, unet, schedule, plan };
    let outcomes =
        remove_device_batch(&corpus, &models, &cfg.edit, RemovalStyle::Omission, Split::Train, n_edits)?;
    let report = stage_eval(cfg, &corpus, &models, &dev, &outcomes)?;
    std::fs::write(ws.eval_report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn autoencoder_checkpoint_round_trip_preserves_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.prsm");
        let mut ae = LatentAutoencoder::init(5, 16, 16).unwrap();
        ae.latent_scale = 2.5;
        ae.train_recon_error = 0.03;
        save_autoencoder(&ae, &path).unwrap();
        let back = load_autoencoder(&path).unwrap();
        assert_eq!(back.latent_scale, 2.5);
        assert_eq!(back.train_recon_error, 0.03);
        assert_eq!(back.mode, CodecMode::Learned);
        assert_eq!(back.params.checksum(), ae.params.checksum());
    }

    #[test]
    fn meta_tensors_do_not_leak_into_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unet.prsm");
        let unet = UNet::init(3, 1);
        let n = unet.params.len();
        save_unet(&unet, &path).unwrap();
        let back = load_unet(&path).unwrap();
        assert_eq!(back.params.len(), n);
        assert!(!back.trained);
        assert_eq!(back.channels, 1);
    }

    #[test]
    fn classifier_head_cols_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.prsm");
        let mut clf = Classifier::init(9, 16, 16, 1);
        clf.head_cols = vec![3];
        clf.trained = true;
        save_classifier(&clf, &path).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.head_cols, vec![3]);
        assert!(back.trained);
    }

    #[test]
    fn missing_corpus_names_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let err = open_corpus(&ws).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
        assert!(err.to_string().contains("manifest.jsonl"));
    }

    #[test]
    fn refuse_existing_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.prsm");
        std::fs::write(&p, b"x").unwrap();
        assert!(refuse_existing(&p, false).is_err());
        assert!(refuse_existing(&p, true).is_ok());
    }

    #[test]
    fn save_is_deterministic_for_equal_models() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.prsm");
        let b = dir.path().join("b.prsm");
        let txt = TextEncoder::init(21);
        save_text_encoder(&txt, &a).unwrap();
        save_text_encoder(&txt, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
