//! Reporting: metrics tables (text, CSV, JSON), deterministic 2-D embedding
//! exports via a principal-axes projection, scatter plots, and the
//! domain-mixing score.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::scalar::Scalar;
use crate::trainer::{AblationFlags, DgModel};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ─── metrics tables ──────────────────────────────────────────────────────────

/// Per-target-domain accuracy rows plus their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<(String, f64)>,
}

impl MetricsTable {
    pub fn new(rows: Vec<(String, f64)>) -> Self {
        MetricsTable { rows }
    }

    /// Arithmetic mean of the rows, never rounded.
    pub fn average(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|(_, v)| v).sum::<f64>() / self.rows.len() as f64
    }
}

/// Renders rows plus an average row; the average is computed before rounding.
pub fn format_metrics_table(rows: &[(String, f64)], precision: usize) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Domain("empty metrics table".into()));
    }
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once("target_domain".len()))
        .max()
        .unwrap();
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$}  accuracy\n", "target_domain"));
    for (name, acc) in rows {
        out.push_str(&format!("{name:<name_w$}  {acc:.precision$}\n"));
    }
    let avg = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64;
    out.push_str(&format!("{:<name_w$}  {avg:.precision$}\n", "avg."));
    Ok(out)
}

/// JSON summary persisted next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub rows: Vec<(String, f64)>,
    pub average: f64,
    pub flags: AblationFlags,
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub seed: u64,
}

/// Writes `<base>.csv` (`target_domain,accuracy`) and `<base>.json`.
pub fn write_metrics(
    base: &Path,
    table: &MetricsTable,
    flags: &AblationFlags,
    seed: u64,
) -> Result<()> {
    let mut csv = String::from("target_domain,accuracy\n");
    for (name, acc) in &table.rows {
        csv.push_str(&format!("{name},{acc}\n"));
    }
    atomic_write(&base.with_extension("csv"), csv.as_bytes())?;
    let summary = MetricsSummary {
        rows: table.rows.clone(),
        average: table.average(),
        flags: flags.clone(),
        t_steps: flags.t_steps,
        seed,
    };
    atomic_write(
        &base.with_extension("json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(())
}

/// Parses a metrics CSV produced by [`write_metrics`].
pub fn parse_metrics_csv(text: &str) -> Result<MetricsTable> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "target_domain,accuracy" {
                return Err(Error::Data(format!("bad metrics header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (name, val) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("bad metrics row: {line}")))?;
        let acc: f64 = val
            .parse()
            .map_err(|_| Error::Data(format!("bad accuracy: {val}")))?;
        rows.push((name.to_string(), acc));
    }
    if rows.is_empty() {
        return Err(Error::Data("metrics CSV has no rows".into()));
    }
    Ok(MetricsTable::new(rows))
}

// ─── principal-axes projection ───────────────────────────────────────────────

/// Jacobi eigensolver for a symmetric matrix; returns (eigenvalues,
/// eigenvectors as columns), descending by eigenvalue.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.dim().0;
    let mut a = m.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let vals = Array1::from_shape_fn(n, |i| a[[order[i], order[i]]]);
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        // sign convention: the largest-magnitude component is positive
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for k in 0..n {
            if v[[k, src]].abs() > max_abs {
                max_abs = v[[k, src]].abs();
                sign = v[[k, src]].signum();
            }
        }
        for k in 0..n {
            vecs[[k, col]] = v[[k, src]] * sign;
        }
    }
    (vals, vecs)
}

/// A 2-D embedding export: projected points with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingExport {
    /// (n, 2) projections onto the top-2 variance axes.
    pub points: Array2<f64>,
    pub domains: Vec<String>,
    pub classes: Vec<usize>,
    /// Top-2 eigenvalues of the feature covariance.
    pub variances: [f64; 2],
}

/// Pools the hooked layer's feature maps (global average) for every dataset
/// sample and projects onto the top-2 principal axes.
pub fn compute_embeddings_2d<S: Scalar>(
    model: &DgModel<S>,
    dataset: &Dataset<S>,
    layer: usize,
) -> Result<EmbeddingExport> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Domain(format!(
            "embedding export needs at least 3 samples, got {n}"
        )));
    }
    let mut feats: Option<Array2<f64>> = None;
    let batch = 64usize;
    let indices: Vec<usize> = (0..n).collect();
    let mut row0 = 0usize;
    for chunk in indices.chunks(batch) {
        let (images, _, _) = dataset.batch_of(chunk);
        let (_, maps) = model.backbone.encode_image(&model.ps, &images, &[layer])?;
        let fm = maps.get(&layer).expect("hooked layer present");
        let (bs, c, h, w) = fm.data.dim();
        let feats_ref = feats.get_or_insert_with(|| Array2::zeros((n, c)));
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..bs {
            for ci in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += fm.data[[bi, ci, y, x]].as_f64();
                    }
                }
                feats_ref[[row0 + bi, ci]] = acc * inv;
            }
        }
        row0 += bs;
    }
    let mut x = feats.expect("at least one batch");
    let c = x.dim().1;
    // center columns
    for ci in 0..c {
        let mean = x.column(ci).sum() / n as f64;
        for r in 0..n {
            x[[r, ci]] -= mean;
        }
    }
    let cov = x.t().dot(&x) / n as f64;
    let (vals, vecs) = symmetric_eigen(&cov);
    let proj = vecs.slice(ndarray::s![.., 0..2]).to_owned();
    let points = x.dot(&proj);
    Ok(EmbeddingExport {
        points,
        domains: dataset.sample_domains.clone(),
        classes: dataset.labels.clone(),
        variances: [vals[0], vals[1]],
    })
}

/// Writes the embedding CSV (`x,y,domain,class`) and a scatter plot, both
/// atomically and byte-deterministically.
pub fn export_embeddings_2d<S: Scalar>(
    model: &DgModel<S>,
    dataset: &Dataset<S>,
    layer: usize,
    csv_path: &Path,
    plot_path: &Path,
) -> Result<EmbeddingExport> {
    let export = compute_embeddings_2d(model, dataset, layer)?;
    let mut csv = String::from("x,y,domain,class\n");
    for i in 0..export.points.dim().0 {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            export.points[[i, 0]],
            export.points[[i, 1]],
            export.domains[i],
            export.classes[i]
        ));
    }
    atomic_write(csv_path, csv.as_bytes())?;
    let png = scatter_png(&export)?;
    atomic_write(plot_path, &png)?;
    Ok(export)
}

/// Fixed palette per domain index (sorted order).
const DOMAIN_COLORS: [[u8; 3]; 8] = [
    [214, 69, 65],
    [68, 108, 179],
    [38, 166, 91],
    [244, 179, 80],
    [142, 68, 173],
    [52, 152, 219],
    [22, 160, 133],
    [127, 140, 141],
];

fn scatter_png(export: &EmbeddingExport) -> Result<Vec<u8>> {
    use image::codecs::png::PngEncoder;
    use image::{ExtendedColorType, ImageEncoder};
    let size = 512usize;
    let mut buf = vec![255u8; size * size * 3];
    let n = export.points.dim().0;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for i in 0..n {
        xmin = xmin.min(export.points[[i, 0]]);
        xmax = xmax.max(export.points[[i, 0]]);
        ymin = ymin.min(export.points[[i, 1]]);
        ymax = ymax.max(export.points[[i, 1]]);
    }
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let mut domain_order: Vec<String> = export.domains.clone();
    domain_order.sort();
    domain_order.dedup();
    for i in 0..n {
        let px = ((export.points[[i, 0]] - xmin) / xspan * (size - 20) as f64) as i64 + 10;
        let py = ((export.points[[i, 1]] - ymin) / yspan * (size - 20) as f64) as i64 + 10;
        let di = domain_order
            .iter()
            .position(|d| *d == export.domains[i])
            .unwrap_or(0);
        let color = DOMAIN_COLORS[di % DOMAIN_COLORS.len()];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (xx, yy) = (px + dx, py + dy);
                if xx >= 0 && xx < size as i64 && yy >= 0 && yy < size as i64 {
                    let off = (yy as usize * size + xx as usize) * 3;
                    buf[off..off + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let mut png = Vec::new();
    PngEncoder::new(&mut png).write_image(
        &buf,
        size as u32,
        size as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(png)
}

/// Leave-one-out 1-nearest-neighbor accuracy of a *domain* classifier on the
/// projected points. Lower is better mixing (an invented diagnostic, labeled
/// as such in reports).
pub fn domain_mixing_score(points: &Array2<f64>, domains: &[String]) -> f64 {
    let n = points.dim().0;
    assert_eq!(domains.len(), n);
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = points[[i, 0]] - points[[j, 0]];
            let dy = points[[i, 1]] - points[[j, 1]];
            let d = dx * dx + dy * dy;
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if domains[best] == domains[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn table_average_matches_reported_values() {
        // published table rows reproduce their averages
        let rows = vec![
            ("art".to_string(), 92.6),
            ("cartoon".to_string(), 89.4),
            ("photo".to_string(), 99.7),
            ("sketch".to_string(), 88.8),
        ];
        let text = format_metrics_table(&rows, 1).unwrap();
        assert!(text.lines().last().unwrap().contains("92.6"), "{text}");
        let rows2 = vec![
            ("c".to_string(), 98.9),
            ("l".to_string(), 64.3),
            ("s".to_string(), 79.2),
            ("p".to_string(), 80.8),
        ];
        let text2 = format_metrics_table(&rows2, 1).unwrap();
        assert!(text2.lines().last().unwrap().contains("80.8"), "{text2}");
        // all rows equal v -> average v
        let rows3 = vec![("a".to_string(), 50.0), ("b".to_string(), 50.0)];
        let text3 = format_metrics_table(&rows3, 1).unwrap();
        assert!(text3.lines().last().unwrap().contains("50.0"));
        assert!(format_metrics_table(&[], 1).is_err());
    }

    #[test]
    fn metrics_roundtrip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let table = MetricsTable::new(vec![
            ("flat".to_string(), 81.25),
            ("stripes".to_string(), 64.0625),
        ]);
        let base = dir.path().join("metrics");
        write_metrics(&base, &table, &AblationFlags::default(), 7).unwrap();
        let text = std::fs::read_to_string(base.with_extension("csv")).unwrap();
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(parsed, table);
        let summary: MetricsSummary =
            serde_json::from_slice(&std::fs::read(base.with_extension("json")).unwrap()).unwrap();
        assert!((summary.average - table.average()).abs() < 1e-12);
        assert_eq!(summary.seed, 7);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let m = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&m);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // eigenvector of 3 is (1,1)/sqrt(2) up to sign convention
        let e = 1.0 / 2.0f64.sqrt();
        assert!((vecs[[0, 0]] - e).abs() < 1e-10);
        assert!((vecs[[1, 0]] - e).abs() < 1e-10);
    }

    #[test]
    fn projection_orders_variance_axes() {
        let mut rng = stream(131, "pca");
        // anisotropic cloud: x-variance 9, y-variance 1, plus rotation
        let n = 400;
        let mut pts = Array2::zeros((n, 3));
        for i in 0..n {
            let a = 3.0 * f64::standard_normal(&mut rng);
            let b = f64::standard_normal(&mut rng);
            let c = 0.1 * f64::standard_normal(&mut rng);
            pts[[i, 0]] = 0.8 * a - 0.6 * b;
            pts[[i, 1]] = 0.6 * a + 0.8 * b;
            pts[[i, 2]] = c;
        }
        // center and project
        for ci in 0..3 {
            let m = pts.column(ci).sum() / n as f64;
            for r in 0..n {
                pts[[r, ci]] -= m;
            }
        }
        let cov = pts.t().dot(&pts) / n as f64;
        let (vals, _) = symmetric_eigen(&cov);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        assert!((vals[0] - 9.0).abs() < 1.5, "{}", vals[0]);
    }

    #[test]
    fn mixing_score_separates_clusters_from_mixture() {
        let mut rng = stream(132, "mix");
        let n = 200;
        let mut separated = Array2::zeros((n, 2));
        let mut mixed = Array2::zeros((n, 2));
        let mut domains = Vec::new();
        for i in 0..n {
            let d = i % 2;
            domains.push(format!("d{d}"));
            let off = if d == 0 { -5.0 } else { 5.0 };
            separated[[i, 0]] = off + 0.1 * f64::standard_normal(&mut rng);
            separated[[i, 1]] = 0.1 * f64::standard_normal(&mut rng);
            mixed[[i, 0]] = f64::standard_normal(&mut rng);
            mixed[[i, 1]] = f64::standard_normal(&mut rng);
        }
        let s_sep = domain_mixing_score(&separated, &domains);
        let s_mix = domain_mixing_score(&mixed, &domains);
        assert!(s_sep > 0.95, "separated clusters score {s_sep}");
        assert!(s_mix < s_sep, "mixture {s_mix} should score below {s_sep}");
    }
}
