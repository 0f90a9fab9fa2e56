//! Procedural four-domain shape dataset: the desk-scale stand-in for
//! style-dominant domain generalization benchmarks. Content (shape geometry)
//! is identically distributed across domains; every domain knob is style.

pub mod generate;
pub mod load;
pub mod shapes;

pub use generate::{generate_dataset, DatasetConfig, FileEntry, Manifest};
pub use load::{hue_histogram, BatchStream, Dataset};
pub use shapes::{GeometryParams, ShapeClass, SHAPE_CLASSES};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Noise,
    Stripes,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Solid,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stroke {
    Filled,
    Outline,
}

/// Style recipe of one synthetic domain. Hue palettes (plus jitter) must be
/// pairwise disjoint across domains; the generator self-checks this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Base hues in [0, 1); per-image hue = palette choice + small jitter.
    pub hue_palette: Vec<f64>,
    pub texture: Texture,
    pub background: Background,
    pub stroke: Stroke,
    /// Foreground saturation range.
    pub fg_sat: (f64, f64),
    /// Foreground value (brightness) range.
    pub fg_val: (f64, f64),
    pub bg_sat: (f64, f64),
    pub bg_val: (f64, f64),
}

/// Hue jitter radius around palette entries.
pub const HUE_JITTER: f64 = 0.02;

impl DomainSpec {
    /// Inclusive hue interval covered by this domain.
    pub fn hue_interval(&self) -> (f64, f64) {
        let lo = self
            .hue_palette
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            - HUE_JITTER;
        let hi = self
            .hue_palette
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            + HUE_JITTER;
        (lo, hi)
    }
}

/// The four default domains, emulating photo / art / cartoon / sketch axes:
/// flat color, graded fills on graded paper, saturated stripes, and outline
/// strokes on noisy paper. Foreground/background polarity is shared (dark
/// shape on light ground); everything that differs is style.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            domain_id: "flat".into(),
            hue_palette: vec![0.02, 0.06, 0.10],
            texture: Texture::Flat,
            background: Background::Solid,
            stroke: Stroke::Filled,
            fg_sat: (0.65, 0.90),
            fg_val: (0.20, 0.45),
            bg_sat: (0.08, 0.18),
            bg_val: (0.75, 0.95),
        },
        DomainSpec {
            domain_id: "gradient".into(),
            hue_palette: vec![0.30, 0.34, 0.38],
            texture: Texture::Gradient,
            background: Background::Gradient,
            stroke: Stroke::Filled,
            fg_sat: (0.55, 0.85),
            fg_val: (0.15, 0.45),
            bg_sat: (0.15, 0.30),
            bg_val: (0.65, 0.90),
        },
        DomainSpec {
            domain_id: "stripes".into(),
            hue_palette: vec![0.55, 0.59, 0.63],
            texture: Texture::Stripes,
            background: Background::Solid,
            stroke: Stroke::Filled,
            fg_sat: (0.80, 1.00),
            fg_val: (0.25, 0.50),
            bg_sat: (0.10, 0.20),
            bg_val: (0.60, 0.80),
        },
        DomainSpec {
            domain_id: "outline".into(),
            hue_palette: vec![0.80, 0.84, 0.88],
            texture: Texture::Noise,
            background: Background::Solid,
            stroke: Stroke::Outline,
            fg_sat: (0.12, 0.20),
            fg_val: (0.10, 0.30),
            bg_sat: (0.04, 0.10),
            bg_val: (0.65, 0.90),
        },
    ]
}

/// Generator self-check: hue intervals pairwise disjoint and style recipes
/// pairwise distinct.
pub fn verify_disjoint_styles(domains: &[DomainSpec]) -> Result<()> {
    for (i, a) in domains.iter().enumerate() {
        for b in domains.iter().skip(i + 1) {
            let (alo, ahi) = a.hue_interval();
            let (blo, bhi) = b.hue_interval();
            if ahi >= blo && bhi >= alo {
                return Err(Error::Config(format!(
                    "hue ranges of '{}' and '{}' overlap: [{alo:.3},{ahi:.3}] vs [{blo:.3},{bhi:.3}]",
                    a.domain_id, b.domain_id
                )));
            }
            if (a.texture, a.background, a.stroke) == (b.texture, b.background, b.stroke) {
                return Err(Error::Config(format!(
                    "style recipes of '{}' and '{}' coincide",
                    a.domain_id, b.domain_id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_domains_pass_self_check() {
        let domains = default_domains();
        assert_eq!(domains.len(), 4);
        verify_disjoint_styles(&domains).unwrap();
    }

    #[test]
    fn overlapping_palettes_are_rejected() {
        let mut domains = default_domains();
        domains[1].hue_palette = vec![0.05, 0.11];
        assert!(verify_disjoint_styles(&domains).is_err());
    }
}
