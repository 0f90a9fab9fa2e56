//! Dataset loading (with checksum validation) and seeded batch streaming.

use super::generate::Manifest;
use super::shapes::rgb_to_hue_sat;
use crate::error::{Error, Result};
use crate::fsio::sha256_hex;
use crate::scalar::{s, Scalar};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// In-memory dataset: decoded images plus per-domain sample indices.
pub struct Dataset<S> {
    pub manifest: Manifest,
    pub images: Vec<Array3<S>>,
    pub labels: Vec<usize>,
    pub sample_domains: Vec<String>,
    by_domain: BTreeMap<String, Vec<usize>>,
}

impl<S: Scalar> Dataset<S> {
    /// Loads and validates every file listed in the manifest (sha256).
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_bytes = std::fs::read(root.join("manifest.json"))
            .map_err(|e| Error::Data(format!("cannot read manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut images = Vec::with_capacity(manifest.files.len());
        let mut labels = Vec::with_capacity(manifest.files.len());
        let mut sample_domains = Vec::with_capacity(manifest.files.len());
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, entry) in manifest.files.iter().enumerate() {
            let bytes = std::fs::read(root.join(&entry.path))
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", entry.path)))?;
            let digest = sha256_hex(&bytes);
            if digest != entry.sha256 {
                return Err(Error::Data(format!(
                    "checksum mismatch for {}: manifest {}, file {digest}",
                    entry.path, entry.sha256
                )));
            }
            let img = image::load_from_memory(&bytes)?.to_rgb8();
            let (w, h) = img.dimensions();
            if (w as usize, h as usize) != (manifest.image_size, manifest.image_size) {
                return Err(Error::Data(format!("bad image size in {}", entry.path)));
            }
            let mut arr = Array3::zeros((3, h as usize, w as usize));
            for y in 0..h as usize {
                for x in 0..w as usize {
                    let p = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        arr[[c, y, x]] = s::<S>(p.0[c] as f64 / 255.0);
                    }
                }
            }
            images.push(arr);
            labels.push(entry.class_label);
            sample_domains.push(entry.domain.clone());
            by_domain.entry(entry.domain.clone()).or_default().push(i);
        }
        Ok(Dataset {
            manifest,
            images,
            labels,
            sample_domains,
            by_domain,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn domains(&self) -> Vec<String> {
        self.by_domain.keys().cloned().collect()
    }

    /// Indices of one domain's samples; unknown domains list the known ones.
    pub fn samples_of(&self, domain: &str) -> Result<&[usize]> {
        self.by_domain
            .get(domain)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::Domain(format!(
                    "unknown domain '{domain}'; available: {}",
                    self.domains().join(", ")
                ))
            })
    }

    /// Stacks a set of samples into a batch tensor.
    pub fn batch_of(&self, indices: &[usize]) -> (Array4<S>, Vec<usize>, Vec<String>) {
        let size = self.manifest.image_size;
        let mut images = Array4::zeros((indices.len(), 3, size, size));
        let mut labels = Vec::with_capacity(indices.len());
        let mut domains = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images[i]);
            labels.push(self.labels[i]);
            domains.push(self.sample_domains[i].clone());
        }
        (images, labels, domains)
    }
}

/// One training batch: `batch_per_domain` samples from every source domain.
pub struct Batch<S> {
    pub images: Array4<S>,
    pub labels: Vec<usize>,
    pub domains: Vec<String>,
}

/// Seeded stream of mixed-source batches (sampling with replacement).
pub struct BatchStream<'a, S> {
    dataset: &'a Dataset<S>,
    sources: Vec<String>,
    pub batch_per_domain: usize,
    rng: ChaCha8Rng,
}

impl<'a, S: Scalar> BatchStream<'a, S> {
    pub fn new(
        dataset: &'a Dataset<S>,
        sources: &[String],
        batch_per_domain: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("no source domains".into()));
        }
        let mut sorted: Vec<String> = sources.to_vec();
        sorted.sort();
        sorted.dedup();
        for d in &sorted {
            dataset.samples_of(d)?;
        }
        Ok(BatchStream {
            dataset,
            sources: sorted,
            batch_per_domain,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Batch<S> {
        let mut indices = Vec::with_capacity(self.sources.len() * self.batch_per_domain);
        for d in &self.sources {
            let pool = self.dataset.samples_of(d).expect("validated");
            for _ in 0..self.batch_per_domain {
                indices.push(pool[self.rng.gen_range(0..pool.len())]);
            }
        }
        let (images, labels, domains) = self.dataset.batch_of(&indices);
        Batch {
            images,
            labels,
            domains,
        }
    }
}

/// Normalized hue histogram over pixels with reliable chroma; used to verify
/// that domain palettes do not overlap.
pub fn hue_histogram<S: Scalar>(images: &[&Array3<S>], bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0f64; bins];
    let mut total = 0.0f64;
    for img in images {
        let (_, h, w) = img.dim();
        for y in 0..h {
            for x in 0..w {
                let r = img[[0, y, x]].as_f64();
                let g = img[[1, y, x]].as_f64();
                let b = img[[2, y, x]].as_f64();
                let (hue, sat, chroma) = rgb_to_hue_sat(r, g, b);
                // need enough chroma for the quantized hue to be trustworthy
                if sat > 0.04 && chroma * 255.0 >= 3.0 {
                    let bin = ((hue * bins as f64) as usize).min(bins - 1);
                    hist[bin] += 1.0;
                    total += 1.0;
                }
            }
        }
    }
    if total > 0.0 {
        for v in hist.iter_mut() {
            *v /= total;
        }
    }
    hist
}

/// Chi-square distance between histograms.
pub fn chi_square_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .filter(|(x, y)| **x + **y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum::<f64>()
        / 2.0
}
