//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them on success). Heavy
//! state (trained corpus models, the edit batch, the inversion pairs) is
//! built once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use prism::captions::{Attribute, RemovalStyle, Vocabulary};
use prism::checkpoint;
use prism::config::{RunConfig, ScheduleConfig};
use prism::denoiser::{finetune, prepare_corpus, TrainConfig, UNet};
use prism::editor::{filter_edits, EditConfig, EditSession};
use prism::encoders::{
    cosine, train_autoencoder, train_contrastive, AutoencoderConfig, ContrastiveConfig,
};
use prism::eval::{
    anti_correlated, augmentation_experiment, cpg, l1_identity, split_labeled,
    train_device_classifier, Arm, AugmentConfig, Classifier, ClassifierConfig,
};
use prism::numerics::{gradient_suite, rng, AdamState, BoundParams, ParamSet, Tape, Tensor};
use prism::pipeline::{cf_labeled_images, full_pipeline, remove_device_batch, CfOutcome, Models, Workspace};
use prism::schedule::{add_noise, ddim_invert_step, ddim_step, make_schedule, ScheduleKind, CLEAN_T};
use prism::synthdata::{generate_corpus, CorpusSpec, Split};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:02} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n:02} {name} failed: {detail}");
}

// --- shared fixture --------------------------------------------------------

struct Fixture {
    cfg: RunConfig,
    corpus: prism::synthdata::Corpus,
    models: Models,
    device_clf: Classifier,
    unet_losses: Vec<f32>,
    finetune_secs: f64,
    ae_bytes_before: Vec<u8>,
    txt_bytes_before: Vec<u8>,
}

fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusSpec { rho: 0.9, split_train: 0.6, split_val: 0.1, split_test: 0.3, ..CorpusSpec::default() };
    cfg.schedule = ScheduleConfig { total_timesteps: 200, num_steps: 10, ..ScheduleConfig::default() };
    cfg.autoencoder = AutoencoderConfig { steps: 400, ..AutoencoderConfig::default() };
    cfg.contrastive = ContrastiveConfig { steps: 300, ..ContrastiveConfig::default() };
    cfg.unet = TrainConfig { steps: 2500, batch: 4, ..TrainConfig::default() };
    cfg.edit = EditConfig { guidance: 7.5, tau: 0.8, ..EditConfig::default() };
    cfg
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let cfg = fixture_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let (ae, _) = train_autoencoder(&corpus, &cfg.autoencoder).unwrap();
        let (txt, img, _) = train_contrastive(&corpus, &cfg.contrastive).unwrap();
        let ae_bytes_before = checkpoint::serialize(&ae.params);
        let txt_bytes_before = checkpoint::serialize(&txt.params);
        let prepared = prepare_corpus(&corpus, &ae, &txt, Split::Train).unwrap();
        let (schedule, plan) = cfg.schedule.build().unwrap();
        let t0 = Instant::now();
        let (unet, unet_losses) =
            finetune(&prepared, &schedule, ae.latent_shape()[0], &cfg.unet).unwrap();
        let finetune_secs = t0.elapsed().as_secs_f64();
        let train = split_labeled(&corpus, Split::Train);
        let device_clf = train_device_classifier(&train, 32, 32, &cfg.classifier).unwrap();
        Fixture {
            cfg,
            corpus,
            models: Models { ae, txt, img, unet, schedule, plan },
            device_clf,
            unet_losses,
            finetune_secs,
            ae_bytes_before,
            txt_bytes_before,
        }
    })
}

/// The fifty remove-device edits of criterion 8 (reused by 9 and 10).
fn edit_batch() -> &'static Vec<CfOutcome> {
    static BATCH: OnceLock<Vec<CfOutcome>> = OnceLock::new();
    BATCH.get_or_init(|| {
        let f = fixture();
        remove_device_batch(&f.corpus, &f.models, &f.cfg.edit, RemovalStyle::Omission, Split::Test, 50)
            .unwrap()
    })
}

struct InversionPair {
    image: Tensor,
    recon_optimized: Tensor,
    recon_baseline: Tensor,
    loss_before: Vec<f32>,
    loss_after: Vec<f32>,
    identity_edit: Tensor,
    recon_tau1: Tensor,
}

/// Twenty test images inverted with and without null-text optimization
/// (criteria 5 and 6).
fn inversion_pairs() -> &'static Vec<InversionPair> {
    static PAIRS: OnceLock<Vec<InversionPair>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let f = fixture();
        let vocab = Vocabulary::closed();
        let editor = f.models.editor();
        let tau1 = EditConfig { tau: 1.0, ..f.cfg.edit.clone() };
        let baseline_cfg = EditConfig { n_inner: 0, ..tau1.clone() };
        f.corpus
            .split(Split::Test)
            .take(20)
            .map(|s| {
                let image = Tensor::from_vec(vec![1, 32, 32], s.image.clone()).unwrap();
                let tokens = vocab.tokenize(&s.caption.text).unwrap();
                let (traj, nulls) = editor.invert(&image, &tokens, &tau1).unwrap();
                let recon_optimized = editor.reconstruct(&traj, &nulls, &tokens, &tau1).unwrap();
                let (traj0, nulls0) = editor.invert(&image, &tokens, &baseline_cfg).unwrap();
                let recon_baseline =
                    editor.reconstruct(&traj0, &nulls0, &tokens, &baseline_cfg).unwrap();
                let identity_edit =
                    editor.edit(&traj, &nulls, &tokens, &tokens, &tau1).unwrap();
                InversionPair {
                    image,
                    recon_tau1: recon_optimized.clone(),
                    recon_optimized,
                    recon_baseline,
                    loss_before: nulls.loss_before.clone(),
                    loss_after: nulls.loss_after.clone(),
                    identity_edit,
                }
            })
            .collect()
    })
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.numel() as f32
}

// --- criteria --------------------------------------------------------------

#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let results = gradient_suite(&[0, 1, 2, 3, 4]).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let pass = results.iter().all(|r| r.passes(1e-3)) && elapsed < 30.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} primitives, worst {} at {:.2e}, {elapsed:.1}s",
            results.len(),
            worst.op,
            worst.max_rel_err
        ),
    );
}

#[test]
fn criterion_02_scheduler_algebra() {
    let t0 = Instant::now();
    let s = make_schedule(ScheduleKind::ScaledLinear, 200, 85e-5, 12e-3).unwrap();
    let endpoints = s.betas()[0] == 85e-5 && *s.betas().last().unwrap() == 12e-3;
    let monotone = s.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    let mut r = rng(2024);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let t = r.gen_range(1..200) as i32;
        let t_prev = if r.gen::<bool>() { CLEAN_T } else { r.gen_range(0..t as usize) as i32 };
        let x: Vec<f32> = (0..12).map(|_| StandardNormal.sample(&mut r)).collect();
        let e: Vec<f32> = (0..12).map(|_| StandardNormal.sample(&mut r)).collect();
        let x_t = Tensor::from_vec(vec![12], x).unwrap();
        let eps = Tensor::from_vec(vec![12], e).unwrap();
        let x_prev = ddim_step(&x_t, &eps, t, t_prev, &s).unwrap();
        let back = ddim_invert_step(&x_prev, &eps, t_prev, t, &s).unwrap();
        worst = worst.max(x_t.max_abs_diff(&back));
        let x_up = ddim_invert_step(&x_t, &eps, t_prev, t, &s).unwrap();
        let down = ddim_step(&x_up, &eps, t, t_prev, &s).unwrap();
        worst = worst.max(x_t.max_abs_diff(&down));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = endpoints && monotone && worst <= 1e-5 && elapsed < 5.0;
    report(
        2,
        "scheduler algebra",
        pass,
        &format!("endpoints exact={endpoints}, monotone={monotone}, worst inverse {worst:.2e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_03_frozen_modules() {
    let f = fixture();
    let ae_after = checkpoint::serialize(&f.models.ae.params);
    let txt_after = checkpoint::serialize(&f.models.txt.params);
    let pass = ae_after == f.ae_bytes_before && txt_after == f.txt_bytes_before;
    report(
        3,
        "frozen-module contract",
        pass,
        &format!("ae {} bytes, text {} bytes, byte-identical after fine-tuning", ae_after.len(), txt_after.len()),
    );
}

#[test]
fn criterion_04_toy_finetuning() {
    let f = fixture();
    let smooth = |w: &[f32]| w.iter().sum::<f32>() / w.len() as f32;
    let initial = smooth(&f.unet_losses[..50]);
    let final_ = smooth(&f.unet_losses[f.unet_losses.len() - 50..]);

    // Single-sample overfit: one fixed (z0, t, eps) triple must be memorized.
    let t0 = Instant::now();
    let prepared = prepare_corpus(&f.corpus, &f.models.ae, &f.models.txt, Split::Train).unwrap();
    let z0 = prepared.latents[0].clone();
    let ctx = prepared.contexts[0].clone();
    let mut r = rng(404);
    let eps_data: Vec<f32> = (0..z0.numel()).map(|_| StandardNormal.sample(&mut r)).collect();
    let eps = Tensor::from_vec(z0.shape().to_vec(), eps_data).unwrap();
    let t_fixed = 100;
    let zt = add_noise(&z0, &eps, t_fixed, &f.models.schedule).unwrap();
    let mut unet = UNet::init(505, z0.shape()[0]);
    let mut adam = AdamState::new(&unet.params, 1e-3);
    let mut overfit = f32::INFINITY;
    for _ in 0..400 {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &unet.params, true).unwrap();
        let zv = tape.constant(&zt).unwrap();
        let cv = tape.constant(&ctx).unwrap();
        let pred = unet.forward_on(&mut tape, &b, zv, t_fixed, cv).unwrap();
        let ev = tape.constant(&eps).unwrap();
        let loss = tape.mse(pred, ev).unwrap();
        overfit = tape.value(loss).item();
        if overfit < 0.04 {
            break;
        }
        let grads = tape.backward(loss).unwrap();
        let g = b.grads(&grads);
        adam.step(&mut unet.params, &g).unwrap();
    }
    let secs = f.finetune_secs + t0.elapsed().as_secs_f64();
    let pass = final_ < 0.5 * initial && overfit < 0.05 && secs < 600.0;
    report(
        4,
        "toy fine-tuning",
        pass,
        &format!("smoothed MSE {initial:.3} -> {final_:.3}, overfit {overfit:.4}, {secs:.0}s"),
    );
}

#[test]
fn criterion_05_null_text_inversion() {
    let pairs = inversion_pairs();
    let mut improved = 0;
    let mut monotone = true;
    for p in pairs.iter() {
        let e_opt = mean_abs(&p.image, &p.recon_optimized);
        let e_base = mean_abs(&p.image, &p.recon_baseline);
        if e_opt < e_base {
            improved += 1;
        }
        monotone &= p
            .loss_after
            .iter()
            .zip(&p.loss_before)
            .all(|(a, b)| a <= b);
    }
    let pass = improved == pairs.len() && monotone;
    report(
        5,
        "null-text inversion",
        pass,
        &format!("optimized beats baseline on {improved}/{} images, per-timestep monotone={monotone}", pairs.len()),
    );
}

#[test]
fn criterion_06_identity_edit() {
    let pairs = inversion_pairs();
    let worst = pairs
        .iter()
        .map(|p| mean_abs(&p.identity_edit, &p.recon_tau1))
        .fold(0.0f32, f32::max);
    let pass = worst <= 1e-4;
    report(
        6,
        "identity edit",
        pass,
        &format!("worst mean abs deviation from reconstruction {worst:.2e}"),
    );
}

#[test]
fn criterion_07_edit_score_contract() {
    // Parallel / anti-parallel synthetic deltas.
    let delta_p = Tensor::from_vec(vec![4], vec![0.3, -0.1, 0.7, 0.2]).unwrap();
    let parallel = Tensor::from_vec(vec![4], delta_p.data().iter().map(|v| v * 2.5).collect()).unwrap();
    let anti = Tensor::from_vec(vec![4], delta_p.data().iter().map(|v| v * -0.4).collect()).unwrap();
    let plus = cosine(&parallel, &delta_p);
    let minus = cosine(&anti, &delta_p);
    let extremes = (plus - 1.0).abs() <= 1e-6 && (minus + 1.0).abs() <= 1e-6;

    // Range over real sessions from the fixture batch.
    let batch = edit_batch();
    let in_range = batch.iter().all(|o| (-1.0..=1.0).contains(&o.session.score));

    // Filter boundary: keeps exactly scores >= 0.1.
    let scores = [-0.5f32, 0.0, 0.099_999, 0.1, 0.100_001, 0.9];
    let sessions: Vec<EditSession> = scores
        .iter()
        .map(|&sc| {
            let mut s = batch[0].session.clone();
            s.score = sc;
            s
        })
        .collect();
    let kept = filter_edits(sessions, 0.1);
    let boundary = kept.len() == 3 && kept.iter().all(|s| s.score >= 0.1);

    let pass = extremes && in_range && boundary;
    report(
        7,
        "edit-score contract",
        pass,
        &format!("parallel {plus:.7}, anti {minus:.7}, scores in range={in_range}, boundary keeps >= 0.1={boundary}"),
    );
}

#[test]
fn criterion_08_counterfactual_efficacy() {
    let f = fixture();
    let t0 = Instant::now();
    let batch = edit_batch();
    let accepted: Vec<&CfOutcome> = batch.iter().filter(|o| o.session.accepted).collect();
    let mut flips = 0;
    let mut cpg_cf = 0.0f32;
    let mut cpg_id = 0.0f32;
    let mut l1 = 0.0f32;
    for o in &accepted {
        let p_cf = f.device_clf.predict(o.session.image_cf.data()).unwrap()[0];
        if p_cf < 0.5 {
            flips += 1;
        }
        cpg_cf += cpg(&f.device_clf, 0, &o.session.image_orig, &o.session.image_cf).unwrap();
        cpg_id += cpg(&f.device_clf, 0, &o.session.image_orig, &o.session.reconstruction).unwrap();
        l1 += l1_identity(&o.session.image_orig, &o.session.image_cf).unwrap();
    }
    let n = accepted.len() as f32;
    let (cpg_cf, cpg_id, l1) = (cpg_cf / n, cpg_id / n, l1 / n);
    let flip_rate = flips as f32 / n;
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = !accepted.is_empty()
        && flip_rate >= 0.7
        && cpg_cf - cpg_id >= 0.3
        && l1 < 0.15
        && elapsed < 600.0;
    report(
        8,
        "counterfactual efficacy",
        pass,
        &format!(
            "{} accepted of {}, flip rate {flip_rate:.2}, CPG {cpg_cf:.3} vs identity {cpg_id:.3}, mean L1 {l1:.3}, {elapsed:.0}s",
            accepted.len(),
            batch.len()
        ),
    );
}

#[test]
fn criterion_09_locality() {
    let f = fixture();
    let batch = edit_batch();
    let test: Vec<_> = f.corpus.split(Split::Test).collect();
    let mut local = 0;
    let total = batch.len().min(20);
    for o in batch.iter().take(20) {
        let mask = test[o.sample_index].masks.get(Attribute::Device);
        let (mut inside, mut outside, mut ni, mut no) = (0.0f32, 0.0f32, 0usize, 0usize);
        for (k, (a, b)) in o
            .session
            .image_orig
            .data()
            .iter()
            .zip(o.session.image_cf.data())
            .enumerate()
        {
            let d = (a - b).abs();
            if mask[k] {
                inside += d;
                ni += 1;
            } else {
                outside += d;
                no += 1;
            }
        }
        if outside / (no.max(1) as f32) < inside / (ni.max(1) as f32) {
            local += 1;
        }
    }
    let pass = total == 20 && local >= 18;
    report(9, "locality", pass, &format!("outside < inside on {local}/{total} edits"));
}

#[test]
fn criterion_10_augmentation_direction() {
    let f = fixture();
    // Augmentation counterfactuals come from the train split so evaluation
    // images never enter a training set; 200 per subgroup at this scale.
    let batch =
        remove_device_batch(&f.corpus, &f.models, &f.cfg.edit, RemovalStyle::Omission, Split::Train, 200)
            .unwrap();
    let cf = cf_labeled_images(&batch);
    let generated =
        prism::pipeline::generated_control_samples(&f.models, cf.len(), f.cfg.edit.guidance, 7001)
            .unwrap();
    let base_train = split_labeled(&f.corpus, Split::Train);
    let std_test = split_labeled(&f.corpus, Split::Test);
    let anti_test = anti_correlated(&std_test);
    let aug = AugmentConfig {
        classifier: ClassifierConfig::default(),
        min_cf: 8,
        seeds: vec![31, 32, 33],
    };
    let rep = augmentation_experiment(
        &base_train,
        &cf,
        &generated,
        &std_test,
        &anti_test,
        32,
        32,
        &aug,
        "acceptance".into(),
    )
    .unwrap();
    let dev = prism::eval::Head::Device.index();
    let orig = rep.arm(Arm::OriginalOnly).unwrap().anti_correlated[dev];
    let gen_arm = rep.arm(Arm::OriginalPlusGenerated).unwrap().anti_correlated[dev];
    let cf_arm = rep.arm(Arm::OriginalPlusCounterfactuals).unwrap().anti_correlated[dev];
    let pass = cf_arm >= orig && gen_arm <= cf_arm;
    report(
        10,
        "augmentation direction",
        pass,
        &format!("anti-correlated device acc: original {orig:.3}, generated {gen_arm:.3}, counterfactual {cf_arm:.3} (3 seeds)"),
    );
}

#[test]
fn criterion_11_reproducibility() {
    // Fast full-pipeline config: pixel-bypass codec, short schedules.
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusSpec { n_samples: 200, height: 16, width: 16, rho: 0.5, ..CorpusSpec::default() };
    cfg.schedule = ScheduleConfig { total_timesteps: 40, num_steps: 5, ..ScheduleConfig::default() };
    cfg.codec = prism::encoders::CodecMode::PixelBypass;
    cfg.contrastive = ContrastiveConfig { steps: 30, ..ContrastiveConfig::default() };
    cfg.unet = TrainConfig { steps: 40, batch: 2, ..TrainConfig::default() };
    cfg.edit = EditConfig { n_inner: 2, ..EditConfig::default() };
    cfg.classifier = ClassifierConfig { steps: 30, ..ClassifierConfig::default() };
    cfg.augment = AugmentConfig {
        classifier: ClassifierConfig { steps: 30, ..ClassifierConfig::default() },
        min_cf: 0,
        seeds: vec![31],
    };

    let run = |dir: &std::path::Path| {
        let ws = Workspace::new(dir);
        full_pipeline(&cfg, &ws, 4, true).unwrap();
        std::fs::read(ws.eval_report()).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(d1.path());
    let b = run(d2.path());
    let pass = a == b;
    report(
        11,
        "reproducibility",
        pass,
        &format!("two full runs, report {} bytes, bit-identical={pass}", a.len()),
    );
}

#[test]
fn criterion_12_checkpoint_container() {
    let mut r = rng(88);
    let mut p = ParamSet::new();
    p.insert("w.a", Tensor::randn(vec![4, 3], 0.5, &mut r));
    p.insert("w.b", Tensor::randn(vec![7], 0.5, &mut r));
    let bytes = checkpoint::serialize(&p);
    let back = checkpoint::deserialize(&bytes).unwrap();
    let round_trip = checkpoint::serialize(&back) == bytes;

    let mut faults = 0;
    let mut detected = 0;
    // Single-byte corruption across the container (every 3rd byte).
    for i in (0..bytes.len()).step_by(3) {
        let mut c = bytes.clone();
        c[i] ^= 0x40;
        faults += 1;
        if checkpoint::deserialize(&c).is_err() {
            detected += 1;
        }
    }
    // Truncations.
    for cut in [1usize, 4, 9, bytes.len() / 2, bytes.len() - 1] {
        faults += 1;
        if checkpoint::deserialize(&bytes[..cut]).is_err() {
            detected += 1;
        }
    }
    let pass = round_trip && detected == faults;
    report(
        12,
        "checkpoint container",
        pass,
        &format!("round trip bitwise={round_trip}, {detected}/{faults} injected faults detected"),
    );
}
