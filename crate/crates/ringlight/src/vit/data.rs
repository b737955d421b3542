//! Synthetic class-conditional image data and a CSV dataset format.
//!
//! Each class owns a smooth template built from a few Gaussian bumps;
//! samples are `separation * template + unit pixel noise`. Separation 0
//! makes every class distribution identical (chance-level Bayes accuracy);
//! large separation makes classes linearly separable.

use std::io::{Read, Write};
use std::path::Path;

use crate::math::rng::SeedContext;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Smooth unit-RMS class template from `n_bumps` signed Gaussian bumps.
fn class_template(ctx: &SeedContext, image_size: usize, n_bumps: usize) -> Vec<f64> {
    let s = ctx.stream();
    let mut img = vec![0.0f64; image_size * image_size];
    for b in 0..n_bumps as u64 {
        let cx = s.uniform_at(4 * b) * image_size as f64;
        let cy = s.uniform_at(4 * b + 1) * image_size as f64;
        let width = image_size as f64 * (0.10 + 0.15 * s.uniform_at(4 * b + 2));
        let amp = if s.u64_at(4 * b + 3) & 1 == 0 { 1.0 } else { -1.0 };
        for y in 0..image_size {
            for x in 0..image_size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                img[y * image_size + x] +=
                    amp * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            }
        }
    }
    let rms =
        (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt().max(1e-12);
    img.iter_mut().for_each(|v| *v /= rms);
    img
}

/// Class-conditional Gaussian-blob images with a controllable margin.
pub fn make_synthetic_dataset(
    ctx: &SeedContext,
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_classes < 2 || n_per_class == 0 || image_size == 0 {
        return Err(Error::Param(
            "synthetic dataset needs n_classes >= 2, n_per_class >= 1, image_size >= 1".into(),
        ));
    }
    let templates: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| class_template(&ctx.child("template", c as u64), image_size, 4))
        .collect();
    let mut images = Vec::with_capacity(n_classes * n_per_class);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        for i in 0..n_per_class {
            let s = ctx.child("sample", (c * n_per_class + i) as u64).stream();
            let img: Vec<f64> = templates[c]
                .iter()
                .enumerate()
                .map(|(px, t)| separation * t + s.normal_at(px as u64, 0.0, 1.0))
                .collect();
            images.push(img);
            labels.push(c);
        }
    }
    Ok(Dataset { images, labels, image_size, n_classes })
}

/// CSV rows `label,p0,p1,...`; float formatting round-trips bit-exactly.
pub fn write_dataset_csv<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        let pixels: Vec<String> = img.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{label},{}", pixels.join(","))?;
    }
    Ok(())
}

pub fn read_dataset_csv<R: Read>(r: &mut R, image_size: usize) -> Result<Dataset> {
    let mut text = String::new();
    let rd = r;
    rd.read_to_string(&mut text)?;
    let expected = image_size * image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut n_classes = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label", ln + 1)))?;
        let img: Vec<f64> = parts
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad pixel '{s}'", ln + 1)))
            })
            .collect::<Result<_>>()?;
        if img.len() != expected {
            return Err(Error::Format(format!(
                "line {}: {} pixels, expected {expected}",
                ln + 1,
                img.len()
            )));
        }
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("line {}", ln + 1)));
        }
        n_classes = n_classes.max(label + 1);
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset { images, labels, image_size, n_classes })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_csv(&mut f, ds)
}

pub fn load_dataset(path: &Path, image_size: usize) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset_csv(&mut f, image_size)
}

/// Nearest-template classification accuracy, the Bayes-style reference for
/// the synthetic construction.
pub fn nearest_template_accuracy(ds: &Dataset, templates: &[Vec<f64>]) -> f64 {
    let mut hits = 0usize;
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (c, t) in templates.iter().enumerate() {
            let dot: f64 = img.iter().zip(t).map(|(a, b)| a * b).sum();
            if dot > best_dot {
                best_dot = dot;
                best = c;
            }
        }
        if best == *label {
            hits += 1;
        }
    }
    hits as f64 / ds.len() as f64
}

/// The templates a checked dataset was built from (matching construction
/// order), used by tests.
pub fn dataset_templates(ctx: &SeedContext, n_classes: usize, image_size: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| class_template(&ctx.child("template", c as u64), image_size, 4))
        .collect()
}
