#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dsne::data::{Dataset, Domain, Image, Sample};
use dsne::net::{Arch, InputShape};
use dsne::trainer::TrainConfig;

/// Dense-only network on 2×2 single-channel inputs.
pub fn blob_arch(classes: usize) -> Arch {
    Arch {
        input: InputShape {
            height: 2,
            width: 2,
            channels: 1,
        },
        conv: vec![],
        hidden: vec![16],
        embedding_dim: 8,
        class_count: classes,
    }
}

/// Gaussian blobs on a 2×2 image. Pixels 0 and 1 carry the class, pixels 2
/// and 3 mark the domain. Target samples are also shifted along the class
/// direction by one class spacing, so a classifier fit on the source alone
/// mislabels them.
pub fn blobs(classes: usize, per_class: usize, domain: Domain, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let (shift, marker) = match domain {
        Domain::Source => (0.0, 0.2),
        Domain::Target => (0.35, 0.6),
    };
    let mut samples = Vec::new();
    for _ in 0..per_class {
        for label in 0..classes {
            let centre = 0.1 + 0.7 * label as f64 / (classes - 1).max(1) as f64 + shift;
            let px = [centre, centre, marker, marker]
                .iter()
                .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            samples.push(Sample {
                image: Image::new(2, 2, 1, px).unwrap(),
                label,
                domain,
            });
        }
    }
    Dataset::new(format!("blobs-{domain}"), classes, samples).unwrap()
}

pub fn blob_config(seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: 1.0,
        beta: 1.0,
        lr: 0.02,
        epochs: 60,
        steps_per_epoch: Some(10),
        source_batch: 12,
        target_batch: 6,
        seed,
        eval_every: 10,
        arch: blob_arch(3),
        ..Default::default()
    }
}

/// Random image pixels in [0,1].
pub fn random_pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

pub fn idx_images_bytes(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for v in [count, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// One USPS text line; pixels are given in [0,1] and written in [−1,1].
pub fn usps_line(label: &str, pixels: &[f64]) -> String {
    let mut line = label.to_string();
    for p in pixels {
        line.push(' ');
        line.push_str(&format!("{:.6}", 2.0 * p - 1.0));
    }
    line
}

/// Files of a miniature digit-like corpus: an IDX source pair at 12×12 and a
/// USPS-format target file at 16×16 (labels 1..10, 10 meaning digit 0).
pub struct MiniCorpus {
    pub dir: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub usps: PathBuf,
}

fn pattern(class: usize, y: f64, x: f64, shift: f64) -> f64 {
    let cy = 0.3 + 0.4 * ((class * 3) % 10) as f64 / 9.0 + shift;
    let cx = 0.3 + 0.4 * ((class * 7) % 10) as f64 / 9.0 + shift;
    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
    (-r2 / 0.02).exp()
}

pub fn write_mini_corpus(dir: &Path, per_class: usize, seed: u64) -> MiniCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for class in 0..10 {
            for y in 0..12 {
                for x in 0..12 {
                    let v = pattern(class, y as f64 / 11.0, x as f64 / 11.0, 0.0) + 0.1 * rng.random::<f64>();
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(class as u8);
        }
    }
    let count = labels.len();
    let images = dir.join("src-images-idx3-ubyte");
    let label_path = dir.join("src-labels-idx1-ubyte");
    fs::write(&images, idx_images_bytes(count, 12, 12, &pixels)).unwrap();
    fs::write(&label_path, idx_labels_bytes(&labels)).unwrap();

    let mut text = String::new();
    for _ in 0..per_class {
        for class in 0..10 {
            let px: Vec<f64> = (0..256)
                .map(|i| {
                    let (y, x) = ((i / 16) as f64 / 15.0, (i % 16) as f64 / 15.0);
                    (0.8 * pattern(class, y, x, 0.05) + 0.15 * rng.random::<f64>()).clamp(0.0, 1.0)
                })
                .collect();
            let label = if class == 0 { 10 } else { class };
            text.push_str(&usps_line(&label.to_string(), &px));
            text.push('\n');
        }
    }
    let usps = dir.join("usps.txt");
    fs::write(&usps, text).unwrap();
    MiniCorpus {
        dir: dir.to_path_buf(),
        images,
        labels: label_path,
        usps,
    }
}

/// A small convolutional architecture for 8×8 inputs.
pub fn mini_arch_json() -> &'static str {
    r#"{"input": {"height": 8, "width": 8, "channels": 1},
        "conv": [{"channels": 4, "kernel": 3}],
        "hidden": [16], "embedding_dim": 8, "class_count": 10}"#
}

pub fn mini_config(corpus: &MiniCorpus, out: &Path, extra: &str) -> String {
    format!(
        r#"{{"source": {{"format": "mnist", "images": "{}", "labels": "{}"}},
            "target": {{"format": "usps", "paths": ["{}"]}},
            "output_root": "{}",
            "shots": 2, "source_samples": 100, "seed": 3,
            "epochs": 3, "steps_per_epoch": 4, "source_batch": 20, "target_batch": 8,
            "eval_every": 1, "lr": 0.01,
            "arch": {}{extra}}}"#,
        corpus.images.display(),
        corpus.labels.display(),
        corpus.usps.display(),
        out.display(),
        mini_arch_json(),
    )
}
