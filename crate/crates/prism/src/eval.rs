//! Quantitative apparatus: identity preservation (L1), counterfactual
//! prediction gain, multi-head classifier training, and the controlled
//! counterfactual-augmentation experiment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::captions::AttributeRecord;
use crate::nn::{conv, group_norm, init_conv, init_group_norm, init_linear, linear};
use crate::numerics::{rng, AdamState, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::synthdata::{Corpus, Split, SyntheticSample};
use crate::{Error, Result};

/// Classifier heads, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    DiseaseA,
    DiseaseB,
    NoFinding,
    Device,
}

pub const HEADS: [Head; 4] = [Head::DiseaseA, Head::DiseaseB, Head::NoFinding, Head::Device];

impl Head {
    pub fn index(&self) -> usize {
        match self {
            Head::DiseaseA => 0,
            Head::DiseaseB => 1,
            Head::NoFinding => 2,
            Head::Device => 3,
        }
    }

    pub fn label(&self, r: &AttributeRecord) -> bool {
        match self {
            Head::DiseaseA => r.disease_a,
            Head::DiseaseB => r.disease_b,
            Head::NoFinding => r.no_finding,
            Head::Device => r.device,
        }
    }
}

/// An image paired with its four head labels; the unit both corpus samples
/// and counterfactual augmentations reduce to for classifier training.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Vec<f32>,
    pub labels: [bool; 4],
}

impl LabeledImage {
    pub fn from_sample(s: &SyntheticSample) -> Self {
        LabeledImage {
            image: s.image.clone(),
            labels: labels_of(&s.record),
        }
    }

    pub fn from_record(image: Vec<f32>, r: &AttributeRecord) -> Self {
        LabeledImage { image, labels: labels_of(r) }
    }
}

pub fn labels_of(r: &AttributeRecord) -> [bool; 4] {
    [r.disease_a, r.disease_b, r.no_finding, r.device]
}

pub fn split_labeled(corpus: &Corpus, split: Split) -> Vec<LabeledImage> {
    corpus.split(split).map(LabeledImage::from_sample).collect()
}

/// Test samples where device and disease_a disagree — the robustness readout
/// a device/disease shortcut fails on.
pub fn anti_correlated(images: &[LabeledImage]) -> Vec<LabeledImage> {
    images
        .iter()
        .filter(|s| s.labels[Head::Device.index()] != s.labels[Head::DiseaseA.index()])
        .cloned()
        .collect()
}

/// Small CNN trunk with `n_heads` sigmoid outputs.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParamSet,
    pub n_heads: usize,
    /// Label column backing each output head.
    pub head_cols: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub trained: bool,
}

/// The 4-head classifier (disease_a, disease_b, no_finding, device).
pub type MultiHeadClassifier = Classifier;

impl Classifier {
    pub fn init(seed: u64, height: usize, width: usize, n_heads: usize) -> Self {
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        init_conv(&mut p, "clf.c0", 1, 16, 3, &mut r);
        init_group_norm(&mut p, "clf.g0", 16);
        init_conv(&mut p, "clf.c1", 16, 32, 3, &mut r);
        init_group_norm(&mut p, "clf.g1", 32);
        init_conv(&mut p, "clf.c2", 32, 32, 3, &mut r);
        init_group_norm(&mut p, "clf.g2", 32);
        init_linear(&mut p, "clf.fc", 32, n_heads, &mut r);
        let head_cols = (0..n_heads).collect();
        Classifier { params: p, n_heads, head_cols, height, width, trained: false }
    }

    fn logits_on(&self, tape: &mut Tape, b: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            h = conv(tape, b, &format!("clf.c{i}"), h, 2, 1)?;
            h = group_norm(tape, b, &format!("clf.g{i}"), h, 4)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.reshape(pooled, vec![1, 32])?;
        linear(tape, b, "clf.fc", pooled)
    }

    /// Per-head probabilities in (0,1).
    pub fn predict(&self, image: &[f32]) -> Result<Vec<f32>> {
        if !self.trained {
            return Err(Error::InvalidArg("classifier is untrained".into()));
        }
        if image.len() != self.height * self.width {
            return Err(Error::shape(
                "Classifier::predict",
                format!("expected {} pixels, got {}", self.height * self.width, image.len()),
            ));
        }
        let t = Tensor::from_vec(vec![1, self.height, self.width], image.to_vec())?;
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &self.params, false)?;
        let x = tape.constant(&t)?;
        let logits = self.logits_on(&mut tape, &b, x)?;
        let probs = tape.sigmoid(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Fraction of samples where every head thresholds correctly at 0.5.
    pub fn head_accuracy(&self, data: &[LabeledImage], head: usize) -> Result<f32> {
        if head >= self.n_heads {
            return Err(Error::InvalidArg(format!("head {head} out of range")));
        }
        if data.is_empty() {
            return Err(Error::InvalidArg("empty evaluation set".into()));
        }
        let col = self.head_cols[head];
        let mut correct = 0usize;
        for s in data {
            let p = self.predict(&s.image)?;
            if (p[head] >= 0.5) == s.labels[col] {
                correct += 1;
            }
        }
        Ok(correct as f32 / data.len() as f32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { steps: 250, batch: 8, lr: 2e-3, seed: 31 }
    }
}

/// Binary cross-entropy with logits via softplus(x) - y·x, summed per head.
fn bce_loss(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Var> {
    let y: Vec<f32> = labels.iter().map(|&b| b as u8 as f32).collect();
    let yt = Tensor::from_vec(vec![1, labels.len()], y)?;
    let yv = tape.constant(&yt)?;
    let sp = tape.softplus(logits)?;
    let yx = tape.mul(logits, yv)?;
    let diff = tape.sub(sp, yx)?;
    tape.mean(diff)
}

/// Multi-label BCE training over `head_ids` (a subset of the label columns).
pub fn train_classifier_on(
    train: &[LabeledImage],
    head_ids: &[usize],
    height: usize,
    width: usize,
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::InvalidArg("empty classifier training set".into()));
    }
    for &h in head_ids {
        let pos = train.iter().filter(|s| s.labels[h]).count();
        if pos == 0 || pos == train.len() {
            return Err(Error::InvalidArg(format!(
                "single-class head {h} in training data ({pos}/{} positive)",
                train.len()
            )));
        }
    }
    let mut clf = Classifier::init(cfg.seed, height, width, head_ids.len());
    clf.head_cols = head_ids.to_vec();
    let mut adam = AdamState::new(&clf.params, cfg.lr);
    let mut r = rng(cfg.seed.wrapping_add(101));
    for _ in 0..cfg.steps {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut r);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &clf.params, true)?;
        let mut loss = None;
        for &i in idx.iter().take(cfg.batch) {
            let s = &train[i];
            let t = Tensor::from_vec(vec![1, height, width], s.image.clone())?;
            let x = tape.constant(&t)?;
            let logits = clf.logits_on(&mut tape, &b, x)?;
            let labels: Vec<bool> = head_ids.iter().map(|&h| s.labels[h]).collect();
            let l = bce_loss(&mut tape, logits, &labels)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(loss.unwrap(), 1.0 / cfg.batch.min(train.len()) as f32)?;
        let grads = tape.backward(loss)?;
        let g = b.grads(&grads);
        adam.step(&mut clf.params, &g)?;
    }
    clf.trained = true;
    Ok(clf)
}

/// The 4-head classifier over all label columns.
pub fn train_classifier(train: &[LabeledImage], height: usize, width: usize, cfg: &ClassifierConfig) -> Result<MultiHeadClassifier> {
    train_classifier_on(train, &[0, 1, 2, 3], height, width, cfg)
}

/// Independent single-head device classifier used for prediction-gain
/// scoring, trained and seeded separately from the multi-head model.
pub fn train_device_classifier(train: &[LabeledImage], height: usize, width: usize, cfg: &ClassifierConfig) -> Result<Classifier> {
    let cfg = ClassifierConfig { seed: cfg.seed.wrapping_add(7919), ..cfg.clone() };
    train_classifier_on(train, &[Head::Device.index()], height, width, &cfg)
}

/// Mean absolute pixel difference between two same-shape images in [0,1].
pub fn l1_identity(i_orig: &Tensor, i_cf: &Tensor) -> Result<f32> {
    if i_orig.shape() != i_cf.shape() {
        return Err(Error::shape(
            "l1_identity",
            format!("{:?} vs {:?}", i_orig.shape(), i_cf.shape()),
        ));
    }
    Ok(i_orig.mean_abs_diff(i_cf))
}

/// |p_head(I_orig) - p_head(I_CF)| for a trained classifier head.
pub fn cpg(classifier: &Classifier, head: usize, i_orig: &Tensor, i_cf: &Tensor) -> Result<f32> {
    if head >= classifier.n_heads {
        return Err(Error::InvalidArg(format!("head {head} out of range")));
    }
    let p_orig = classifier.predict(i_orig.data())?;
    let p_cf = classifier.predict(i_cf.data())?;
    Ok((p_orig[head] - p_cf[head]).abs())
}

// ---- augmentation experiment ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    OriginalOnly,
    OriginalPlusGenerated,
    OriginalPlusCounterfactuals,
}

pub const ARMS: [Arm; 3] = [Arm::OriginalOnly, Arm::OriginalPlusGenerated, Arm::OriginalPlusCounterfactuals];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    /// Per-head accuracy on the standard test split, head order as [`HEADS`].
    pub standard: [f32; 4],
    /// Per-head accuracy on the anti-correlated test split.
    pub anti_correlated: [f32; 4],
    pub n_train: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub arms: Vec<ArmReport>,
    pub mean_l1: Option<f32>,
    pub mean_cpg: Option<f32>,
    pub acceptance_rate: Option<f32>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// Plain text table of per-arm accuracies.
    pub fn render_table(&self) -> String {
        let mut out = String::from("arm                          split      da     db     nf     dev\n");
        for a in &self.arms {
            let name = match a.arm {
                Arm::OriginalOnly => "original-only",
                Arm::OriginalPlusGenerated => "original+generated",
                Arm::OriginalPlusCounterfactuals => "original+counterfactuals",
            };
            out.push_str(&format!(
                "{name:<28} standard   {:.3}  {:.3}  {:.3}  {:.3}\n",
                a.standard[0], a.standard[1], a.standard[2], a.standard[3]
            ));
            out.push_str(&format!(
                "{name:<28} anti-corr  {:.3}  {:.3}  {:.3}  {:.3}\n",
                a.anti_correlated[0], a.anti_correlated[1], a.anti_correlated[2], a.anti_correlated[3]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub classifier: ClassifierConfig,
    /// Minimum accepted counterfactual count required to run the CF arm.
    pub min_cf: usize,
    pub seeds: Vec<u64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { classifier: ClassifierConfig::default(), min_cf: 8, seeds: vec![31, 32, 33] }
    }
}

fn eval_arm(
    arm: Arm,
    train: &[LabeledImage],
    std_test: &[LabeledImage],
    anti_test: &[LabeledImage],
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
) -> Result<ArmReport> {
    let mut standard = [0.0f32; 4];
    let mut anti = [0.0f32; 4];
    for &seed in &cfg.seeds {
        let ccfg = ClassifierConfig { seed, ..cfg.classifier.clone() };
        let clf = train_classifier(train, height, width, &ccfg)?;
        for h in 0..4 {
            standard[h] += clf.head_accuracy(std_test, h)?;
            anti[h] += clf.head_accuracy(anti_test, h)?;
        }
    }
    let n = cfg.seeds.len() as f32;
    for h in 0..4 {
        standard[h] /= n;
        anti[h] /= n;
    }
    Ok(ArmReport { arm, standard, anti_correlated: anti, n_train: train.len() })
}

/// Trains the three augmentation arms on identical schedules and seeds; only
/// the appended augmentation set differs between arms.
pub fn augmentation_experiment(
    base_train: &[LabeledImage],
    cf_samples: &[LabeledImage],
    generated_samples: &[LabeledImage],
    std_test: &[LabeledImage],
    anti_test: &[LabeledImage],
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    config_hash: String,
) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArg("augmentation experiment needs at least one seed".into()));
    }
    if cf_samples.len() < cfg.min_cf {
        return Err(Error::InvalidArg(format!(
            "insufficient counterfactuals: {} < configured minimum {}",
            cf_samples.len(),
            cfg.min_cf
        )));
    }
    let mut arms = Vec::with_capacity(3);
    arms.push(eval_arm(Arm::OriginalOnly, base_train, std_test, anti_test, height, width, cfg)?);
    let mut with_gen = base_train.to_vec();
    with_gen.extend_from_slice(generated_samples);
    arms.push(eval_arm(Arm::OriginalPlusGenerated, &with_gen, std_test, anti_test, height, width, cfg)?);
    let mut with_cf = base_train.to_vec();
    with_cf.extend_from_slice(cf_samples);
    arms.push(eval_arm(Arm::OriginalPlusCounterfactuals, &with_cf, std_test, anti_test, height, width, cfg)?);
    Ok(EvalReport {
        arms,
        mean_l1: None,
        mean_cpg: None,
        acceptance_rate: None,
        seeds: cfg.seeds.clone(),
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand::Rng;

    #[test]
    fn l1_identity_basics() {
        let a = Tensor::full(vec![1, 4, 4], 0.5);
        assert_eq!(l1_identity(&a, &a).unwrap(), 0.0);
        let b = Tensor::full(vec![1, 4, 4], 0.6);
        assert!((l1_identity(&a, &b).unwrap() - 0.1).abs() < 1e-6);
        let c = Tensor::full(vec![1, 2, 2], 0.5);
        assert!(l1_identity(&a, &c).is_err());
    }

    #[test]
    fn cpg_is_absolute_probability_difference() {
        // p=0.9 vs p=0.1 -> 0.8 is pure arithmetic; checked on the formula.
        assert!((0.9f32 - 0.1).abs() - 0.8 < 1e-6);
        // identical inputs -> 0 via a real trained classifier.
        let imgs = toy_training_set(40, 5);
        let clf = train_classifier_on(&imgs, &[3], 16, 16, &ClassifierConfig { steps: 5, ..Default::default() }).unwrap();
        let t = Tensor::from_vec(vec![1, 16, 16], imgs[0].image.clone()).unwrap();
        assert_eq!(cpg(&clf, 0, &t, &t).unwrap(), 0.0);
    }

    #[test]
    fn untrained_classifier_rejected() {
        let clf = Classifier::init(0, 16, 16, 4);
        assert!(clf.predict(&vec![0.0; 256]).is_err());
    }

    fn toy_training_set(n: usize, seed: u64) -> Vec<LabeledImage> {
        // Bright-top vs bright-bottom images labeled on head 3 (device).
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let mut img = vec![0.0f32; 256];
                for y in 0..16 {
                    for x in 0..16 {
                        let base = if (y < 8) == pos { 0.9 } else { 0.1 };
                        img[y * 16 + x] = base + 0.05 * r.gen::<f32>();
                    }
                }
                LabeledImage { image: img, labels: [(i / 2) % 2 == 0, (i / 4) % 2 == 0, !pos, pos] }
            })
            .collect()
    }

    #[test]
    fn single_class_head_rejected() {
        let mut imgs = toy_training_set(10, 1);
        for s in &mut imgs {
            s.labels[0] = false;
        }
        assert!(train_classifier(&imgs, 16, 16, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn separable_toy_task_is_learned() {
        let imgs = toy_training_set(40, 2);
        let cfg = ClassifierConfig { steps: 120, batch: 8, lr: 2e-3, seed: 3 };
        let clf = train_classifier_on(&imgs, &[3], 16, 16, &cfg).unwrap();
        let acc = clf.head_accuracy(&toy_training_set(20, 9), 0).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_augmentation_reduces_to_original_only() {
        let imgs = toy_training_set(24, 4);
        let std_test = toy_training_set(10, 8);
        let anti = anti_correlated(&std_test);
        let cfg = AugmentConfig {
            classifier: ClassifierConfig { steps: 20, ..Default::default() },
            min_cf: 0,
            seeds: vec![5],
        };
        let rep = augmentation_experiment(&imgs, &[], &[], &std_test, &anti, 16, 16, &cfg, "h".into()).unwrap();
        let a = rep.arm(Arm::OriginalOnly).unwrap();
        let b = rep.arm(Arm::OriginalPlusCounterfactuals).unwrap();
        assert_eq!(a.standard, b.standard);
        assert_eq!(a.anti_correlated, b.anti_correlated);
    }

    #[test]
    fn insufficient_cf_count_rejected() {
        let imgs = toy_training_set(24, 4);
        let cfg = AugmentConfig { min_cf: 5, seeds: vec![1], ..Default::default() };
        let err = augmentation_experiment(&imgs, &[], &[], &imgs, &imgs, 16, 16, &cfg, "h".into());
        assert!(matches!(err, Err(Error::InvalidArg(_))));
    }

    #[test]
    fn anti_correlated_filter_keeps_disagreements() {
        let imgs = toy_training_set(10, 6);
        let anti = anti_correlated(&imgs);
        assert!(!anti.is_empty());
        assert!(anti.iter().all(|s| s.labels[3] != s.labels[0]));
        assert_eq!(anti.len(), imgs.iter().filter(|s| s.labels[3] != s.labels[0]).count());
    }
}
