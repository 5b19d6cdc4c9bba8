//! Procedural grayscale corpus with controllable attribute correlation and
//! ground-truth pixel masks.
//!
//! Every sample is reproducible from `(record, seed)` alone; the written
//! manifest plus the base seed reproduce the whole corpus bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{caption_from_record, Attribute, AttributeRecord, Caption};
use crate::numerics::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub p_disease_a: f64,
    pub p_disease_b: f64,
    pub p_device: f64,
    /// Target correlation between `device` and `disease_a` labels.
    pub rho: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub base_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_samples: 2000,
            height: 32,
            width: 32,
            p_disease_a: 0.35,
            p_disease_b: 0.3,
            p_device: 0.35,
            rho: 0.0,
            split_train: 0.7,
            split_val: 0.15,
            split_test: 0.15,
            base_seed: 17,
        }
    }
}

impl CorpusSpec {
    /// Conditional device probabilities that hit correlation `rho` while
    /// preserving the device marginal: cov = rho * sqrt(pd qd pa qa).
    pub fn device_conditionals(&self) -> Result<(f64, f64)> {
        let (pa, pd) = (self.p_disease_a, self.p_device);
        let (qa, qd) = (1.0 - pa, 1.0 - pd);
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArg("rho must lie in [0, 1]".into()));
        }
        for (name, p) in [("p_disease_a", pa), ("p_disease_b", self.p_disease_b), ("p_device", pd)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArg(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if pa <= 0.0 || qa <= 0.0 {
            return Err(Error::InvalidArg("disease_a marginal must be strictly inside (0, 1)".into()));
        }
        let s = self.rho * (pd * qd).sqrt();
        let given_pos = pd + s * (qa / pa).sqrt();
        let given_neg = pd - s * (pa / qa).sqrt();
        if !(0.0..=1.0).contains(&given_pos) || !(0.0..=1.0).contains(&given_neg) {
            return Err(Error::InvalidArg(format!(
                "infeasible (rho, marginals): conditional device probabilities ({given_pos:.3}, {given_neg:.3}) leave [0, 1]"
            )));
        }
        Ok((given_pos, given_neg))
    }

    pub fn split_counts(&self) -> Result<(usize, usize, usize)> {
        let sum = self.split_train + self.split_val + self.split_test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!("split fractions must sum to 1, got {sum}")));
        }
        let n_train = (self.split_train * self.n_samples as f64).round() as usize;
        let n_val = (self.split_val * self.n_samples as f64).round() as usize;
        if n_train + n_val > self.n_samples {
            return Err(Error::InvalidArg("split fractions round past n_samples".into()));
        }
        Ok((n_train, n_val, self.n_samples - n_train - n_val))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Boolean ground-truth masks for the rendered attribute pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub disease_a: Vec<bool>,
    pub disease_b: Vec<bool>,
    pub device: Vec<bool>,
}

impl Masks {
    fn empty(n: usize) -> Self {
        Masks { disease_a: vec![false; n], disease_b: vec![false; n], device: vec![false; n] }
    }

    pub fn get(&self, a: Attribute) -> &[bool] {
        match a {
            Attribute::DiseaseA => &self.disease_a,
            Attribute::DiseaseB => &self.disease_b,
            Attribute::Device => &self.device,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// Row-major grayscale pixels in [0, 1], quantized to 8-bit levels so the
    /// in-memory image equals its PNG round trip.
    pub image: Vec<f32>,
    pub record: AttributeRecord,
    pub masks: Masks,
    pub caption: Caption,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<SyntheticSample>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(move |x| x.split == s)
    }
}

/// One JSON-lines manifest record per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub labels: AttributeRecord,
    pub caption: String,
    pub seed: u64,
    pub split: Split,
    pub mask_paths: BTreeMap<String, String>,
}

fn quantize(v: f32) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0
}

/// Box-blurred uniform noise in [0, 1], used for background texture.
fn smooth_noise(r: &mut impl Rng, h: usize, w: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..h * w).map(|_| r.gen::<f32>()).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += raw[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

fn inside_ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

/// Supercover line rasterization; marks roughly 2-pixel-wide strokes.
fn draw_segment(buf: &mut [f32], mask: &mut [bool], h: usize, w: usize, a: (f32, f32), b: (f32, f32), v: f32) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        for (px, py) in [(x.floor(), y.floor()), (x.ceil(), y.floor()), (x.floor(), y.ceil())] {
            if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
                let idx = py as usize * w + px as usize;
                buf[idx] = v;
                mask[idx] = true;
            }
        }
    }
}

/// Deterministic renderer: body ellipse and texture always present,
/// attribute features drawn (and recorded in masks) only when positive.
pub fn render(record: &AttributeRecord, seed: u64, h: usize, w: usize) -> Result<(Vec<f32>, Masks)> {
    record.validate()?;
    if h < 16 || w < 16 {
        return Err(Error::InvalidArg(format!("image size {h}x{w} below the 16x16 renderer minimum")));
    }
    let mut r = rng(seed);
    let noise = smooth_noise(&mut r, h, w);
    let (hf, wf) = (h as f32, w as f32);
    let jx: f32 = r.gen_range(-0.02..0.02);
    let jy: f32 = r.gen_range(-0.02..0.02);

    let mut img = vec![0.0f32; h * w];
    let mut masks = Masks::empty(h * w);

    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = (x as f32 / wf, y as f32 / hf);
            let i = y * w + x;
            img[i] = if inside_ellipse(xn, yn, 0.5 + jx, 0.52 + jy, 0.40, 0.44) {
                0.32 + 0.22 * noise[i]
            } else {
                0.04 + 0.08 * noise[i]
            };
        }
    }

    // Central bright ellipse: always drawn small; disease_b enlarges it.
    let (rx, ry, level) = if record.disease_b { (0.24, 0.18, 0.72) } else { (0.13, 0.10, 0.58) };
    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = (x as f32 / wf, y as f32 / hf);
            if inside_ellipse(xn, yn, 0.5 + jx, 0.5 + jy, rx, ry) {
                let i = y * w + x;
                img[i] = level + 0.10 * noise[i];
                if record.disease_b {
                    masks.disease_b[i] = true;
                }
            }
        }
    }

    // Lower-left bright wedge.
    if record.disease_a {
        let size: f32 = 0.45 + r.gen_range(-0.04..0.04);
        for y in 0..h {
            for x in 0..w {
                let (xn, yn) = (x as f32 / wf, y as f32 / hf);
                if yn > 0.66 && xn < (yn - 0.66) / 0.34 * size {
                    let i = y * w + x;
                    img[i] = 0.86 + 0.08 * noise[i];
                    masks.disease_a[i] = true;
                }
            }
        }
    }

    // Thin high-intensity polyline plus a small box in the upper-right.
    if record.device {
        let ax = (0.78 * wf + r.gen_range(-1.0..1.0)).round();
        let ay = (0.08 * hf + r.gen_range(-1.0..1.0)).round();
        let pts = [(ax, ay), (ax - 0.14 * wf, ay + 0.18 * hf), (ax + 0.02 * wf, ay + 0.32 * hf)];
        draw_segment(&mut img, &mut masks.device, h, w, pts[0], pts[1], 0.98);
        draw_segment(&mut img, &mut masks.device, h, w, pts[1], pts[2], 0.98);
        let (bx, by) = ((0.84 * wf) as usize, (0.12 * hf) as usize);
        for y in by..(by + h.max(32) / 8).min(h) {
            for x in bx..(bx + w.max(32) / 8).min(w) {
                let i = y * w + x;
                img[i] = 0.98;
                masks.device[i] = true;
            }
        }
    }

    for v in &mut img {
        *v = quantize(*v);
    }
    Ok((img, masks))
}

/// Draws labels with the confounding knob, renders every sample, and assigns
/// contiguous splits (labels are i.i.d. over the index, so contiguity is safe).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let (dev_given_pos, dev_given_neg) = spec.device_conditionals()?;
    let (n_train, n_val, _) = spec.split_counts()?;
    let mut label_rng = rng(spec.base_seed ^ 0x5eed_1abe_15u64);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let disease_a = label_rng.gen::<f64>() < spec.p_disease_a;
        let disease_b = label_rng.gen::<f64>() < spec.p_disease_b;
        let p_dev = if disease_a { dev_given_pos } else { dev_given_neg };
        let device = label_rng.gen::<f64>() < p_dev;
        let record = AttributeRecord::new(disease_a, disease_b, device);
        let seed = spec.base_seed + idx as u64;
        let (image, masks) = render(&record, seed, spec.height, spec.width)?;
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(SyntheticSample {
            image,
            record,
            masks,
            caption: caption_from_record(&record)?,
            seed,
            split,
        });
    }
    Ok(Corpus { spec: spec.clone(), samples })
}

/// Saves a [0,1] grayscale image, quantizing to 8 bits.
pub fn save_gray_png(path: &Path, h: usize, w: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::InvalidArg(format!(
            "save_gray_png: {} pixels for a {h}x{w} image",
            pixels.len()
        )));
    }
    write_png(path, h, w, pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Loads a grayscale PNG back to [0,1] row-major pixels.
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.as_raw().iter().map(|&b| b as f32 / 255.0).collect()))
}

fn write_png(path: &Path, h: usize, w: usize, pixels: impl Iterator<Item = u8>) -> Result<()> {
    let buf: Vec<u8> = pixels.collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::InvalidArg("pixel buffer does not match image size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Writes images, masks, and `manifest.jsonl` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&mask_dir)?;
    let (h, w) = (corpus.spec.height, corpus.spec.width);
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let spec_json = serde_json::to_string_pretty(&corpus.spec)?;
    fs::write(dir.join("spec.json"), spec_json)?;
    for (idx, s) in corpus.samples.iter().enumerate() {
        let rel = format!("images/{idx:05}.png");
        write_png(&dir.join(&rel), h, w, s.image.iter().map(|&v| (v * 255.0).round() as u8))?;
        let mut mask_paths = BTreeMap::new();
        for a in crate::captions::CANONICAL_ORDER {
            if s.record.has(a) {
                let mrel = format!("masks/{idx:05}_{}.png", a.word());
                write_png(&dir.join(&mrel), h, w, s.masks.get(a).iter().map(|&b| if b { 255 } else { 0 }))?;
                mask_paths.insert(a.word().to_string(), mrel);
            }
        }
        let entry = ManifestEntry {
            path: rel,
            labels: s.record,
            caption: s.caption.text.clone(),
            seed: s.seed,
            split: s.split,
            mask_paths,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    }
    Ok(())
}

/// Reloads a corpus written by [`write_corpus`]; masks are re-rendered from
/// each entry's `(labels, seed)` rather than parsed back from PNGs.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let manifest = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut samples = Vec::new();
    for line in BufReader::new(manifest).lines() {
        let entry: ManifestEntry = serde_json::from_str(&line?)?;
        let path: PathBuf = dir.join(&entry.path);
        let img = image::open(&path)?.into_luma8();
        if (img.width() as usize, img.height() as usize) != (spec.width, spec.height) {
            return Err(Error::InvalidArg(format!("{} does not match the corpus image size", path.display())));
        }
        let image: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        let (_, masks) = render(&entry.labels, entry.seed, spec.height, spec.width)?;
        samples.push(SyntheticSample {
            image,
            record: entry.labels,
            masks,
            caption: caption_from_record(&entry.labels)?,
            seed: entry.seed,
            split: entry.split,
        });
    }
    if samples.len() != spec.n_samples {
        return Err(Error::InvalidArg("manifest length disagrees with spec.n_samples".into()));
    }
    Ok(Corpus { spec, samples })
}

/// Pearson correlation between two binary label vectors.
pub fn label_correlation(a: &[bool], b: &[bool]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().filter(|&&x| x).count() as f64 / n;
    let mb = b.iter().filter(|&&x| x).count() as f64 / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as u8 as f64 - ma) * (y as u8 as f64 - mb))
        .sum::<f64>()
        / n;
    let denom = (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_record_has_empty_masks() {
        let rec = AttributeRecord::new(false, false, false);
        let (img, masks) = render(&rec, 5, 32, 32).unwrap();
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!masks.disease_a.iter().any(|&b| b));
        assert!(!masks.disease_b.iter().any(|&b| b));
        assert!(!masks.device.iter().any(|&b| b));
    }

    #[test]
    fn render_is_deterministic() {
        let rec = AttributeRecord::new(true, true, true);
        let (a, ma) = render(&rec, 77, 32, 32).unwrap();
        let (b, mb) = render(&rec, 77, 32, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn device_yields_enough_bright_pixels() {
        for seed in 0..20 {
            let rec = AttributeRecord::new(false, false, true);
            let (img, masks) = render(&rec, seed, 32, 32).unwrap();
            let bright = masks
                .device
                .iter()
                .zip(&img)
                .filter(|(&m, &v)| m && v > 0.9)
                .count();
            assert!(bright >= 30, "seed {seed}: only {bright} bright device pixels");
        }
    }

    #[test]
    fn mask_nonempty_iff_attribute_set() {
        for bits in 0..8u32 {
            let rec = AttributeRecord::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            let (_, masks) = render(&rec, 9, 32, 32).unwrap();
            for a in crate::captions::CANONICAL_ORDER {
                assert_eq!(masks.get(a).iter().any(|&b| b), rec.has(a), "{a:?} bits={bits}");
            }
        }
    }

    #[test]
    fn device_disease_mask_overlap_is_small() {
        for seed in 0..20 {
            let rec = AttributeRecord::new(true, true, true);
            let (_, masks) = render(&rec, seed, 32, 32).unwrap();
            let device_px = masks.device.iter().filter(|&&b| b).count();
            let overlap = (0..masks.device.len())
                .filter(|&i| masks.device[i] && (masks.disease_a[i] || masks.disease_b[i]))
                .count();
            assert!(
                (overlap as f64) < 0.05 * device_px as f64,
                "seed {seed}: overlap {overlap}/{device_px}"
            );
        }
    }

    #[test]
    fn rho_zero_gives_near_zero_correlation() {
        let spec = CorpusSpec { n_samples: 2000, ..CorpusSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        let dev: Vec<bool> = c.samples.iter().map(|s| s.record.device).collect();
        let da: Vec<bool> = c.samples.iter().map(|s| s.record.disease_a).collect();
        assert!(label_correlation(&dev, &da).abs() < 0.1);
    }

    #[test]
    fn rho_high_gives_matching_correlation() {
        let spec = CorpusSpec { n_samples: 2000, rho: 0.9, ..CorpusSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        let dev: Vec<bool> = c.samples.iter().map(|s| s.record.device).collect();
        let da: Vec<bool> = c.samples.iter().map(|s| s.record.disease_a).collect();
        let corr = label_correlation(&dev, &da);
        assert!((0.8..=0.95).contains(&corr), "corr = {corr}");
    }

    #[test]
    fn split_counts_round_to_expected() {
        let spec = CorpusSpec { n_samples: 2000, ..CorpusSpec::default() };
        assert_eq!(spec.split_counts().unwrap(), (1400, 300, 300));
        let c = generate_corpus(&CorpusSpec { n_samples: 200, ..spec }).unwrap();
        assert_eq!(c.split(Split::Train).count(), 140);
        assert_eq!(c.split(Split::Val).count(), 30);
        assert_eq!(c.split(Split::Test).count(), 30);
    }

    #[test]
    fn infeasible_rho_rejected() {
        let spec = CorpusSpec { rho: 1.0, p_disease_a: 0.05, p_device: 0.5, ..CorpusSpec::default() };
        assert!(matches!(spec.device_conditionals(), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n_samples: 12, ..CorpusSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 12);
        for (a, b) in c.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.image, b.image, "PNG round trip must be exact");
            assert_eq!(a.record, b.record);
            assert_eq!(a.masks, b.masks);
        }
    }
}
