//! Miniature four-block VMamba-style encoder producing per-layer state
//! embeddings and classification logits.

pub mod layer;
pub mod scan;

pub use layer::{direction_orders, ss2d_merge, VssCache, VssLayer};
pub use scan::{
    precompute_transitions, scan_backward, scan_forward, scan_forward_pre, selective_scan,
    ScanCache, ScanGrads, ScanParams,
};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, map_to_rows, rows_to_map, LayerNorm, LayerNormCache, Linear, ParamStore, PatchConv};
use crate::scalar::{s, Scalar};
use ndarray::{Array2, Array4};
use rand::Rng;
use std::collections::BTreeMap;

/// Backbone dimensions. Defaults mirror the four-block layout at desk scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub block_layer_counts: Vec<usize>,
    pub channels_per_block: Vec<usize>,
    pub state_dim: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            block_layer_counts: vec![2, 2, 4, 2],
            channels_per_block: vec![16, 32, 64, 128],
            state_dim: 8,
            patch_size: 4,
            num_classes: 4,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_layer_counts.len() != 4 {
            return Err(Error::Config(
                "block_layer_counts must have exactly 4 entries".into(),
            ));
        }
        if self.channels_per_block.len() != 4 {
            return Err(Error::Config(
                "channels_per_block must have exactly 4 entries".into(),
            ));
        }
        if self
            .block_layer_counts
            .iter()
            .chain(self.channels_per_block.iter())
            .any(|&v| v == 0)
            || self.state_dim == 0
            || self.patch_size == 0
            || self.num_classes == 0
            || self.image_size == 0
        {
            return Err(Error::Config("all backbone dimensions must be > 0".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        // three 2x downsamples between the four blocks
        let s0 = self.image_size / self.patch_size;
        if s0 % 8 != 0 && s0 < 8 {
            return Err(Error::Config(format!(
                "stem output {s0}x{s0} cannot be downsampled across 4 blocks"
            )));
        }
        Ok(())
    }

    /// Total layer count N.
    pub fn num_layers(&self) -> usize {
        self.block_layer_counts.iter().sum()
    }

    /// Maps a global layer index (1-based) to (block, layer-within-block).
    pub fn block_of_layer(&self, layer_index: usize) -> Option<(usize, usize)> {
        if layer_index == 0 {
            return None;
        }
        let mut rem = layer_index - 1;
        for (b, &count) in self.block_layer_counts.iter().enumerate() {
            if rem < count {
                return Some((b, rem));
            }
            rem -= count;
        }
        None
    }

    /// Global index (1-based) of the last layer of each block.
    pub fn last_layer_of_blocks(&self) -> [usize; 4] {
        let mut out = [0usize; 4];
        let mut acc = 0;
        for (b, &count) in self.block_layer_counts.iter().enumerate() {
            acc += count;
            out[b] = acc;
        }
        out
    }

    /// Spatial side length of block `b` feature maps.
    pub fn block_side(&self, b: usize) -> usize {
        (self.image_size / self.patch_size) >> b
    }
}

/// Per-layer state embedding: (batch, channels, height, width) plus the
/// 1-based index of the layer that produced it (0 marks the stem output).
#[derive(Debug, Clone)]
pub struct FeatureMap<S> {
    pub data: Array4<S>,
    pub layer_index: usize,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(data: Array4<S>, layer_index: usize) -> Self {
        FeatureMap { data, layer_index }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.layer_index > num_layers {
            return Err(Error::Config(format!(
                "layer index {} out of range [0, {num_layers}]",
                self.layer_index
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature map".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }
}

/// The classifier head: channelwise LayerNorm, global average pooling,
/// and a linear readout.
pub struct Head {
    pub norm: LayerNorm,
    pub linear: Linear,
}

pub struct HeadCache<S> {
    rows: Array2<S>,
    ln: LayerNormCache<S>,
    pooled: Array2<S>,
    dims: (usize, usize, usize, usize),
}

impl Head {
    fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Array4<S>) -> (Array2<S>, HeadCache<S>) {
        let (b, c, h, w) = x.dim();
        let rows = map_to_rows(x);
        let (normed, ln) = self.norm.forward(ps, &rows);
        let mut pooled = Array2::zeros((b, c));
        let inv = S::one() / s::<S>((h * w) as f64);
        for bi in 0..b {
            for p in 0..h * w {
                for ci in 0..c {
                    pooled[[bi, ci]] += normed[[bi * h * w + p, ci]] * inv;
                }
            }
        }
        let logits = self.linear.forward(ps, &pooled);
        (
            logits,
            HeadCache {
                rows,
                ln,
                pooled,
                dims: (b, c, h, w),
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &HeadCache<S>,
        dlogits: &Array2<S>,
    ) -> Array4<S> {
        let (b, c, h, w) = cache.dims;
        let dpooled = self.linear.backward(ps, &cache.pooled, dlogits);
        let inv = S::one() / s::<S>((h * w) as f64);
        let mut dnormed = Array2::zeros((b * h * w, c));
        for bi in 0..b {
            for p in 0..h * w {
                for ci in 0..c {
                    dnormed[[bi * h * w + p, ci]] = dpooled[[bi, ci]] * inv;
                }
            }
        }
        let _ = &cache.rows;
        let drows = self.norm.backward(ps, &cache.ln, &dnormed);
        rows_to_map(&drows, b, c, h, w)
    }
}

/// The full encoder. Forward pieces are exposed individually so the trainer
/// can interleave style injection and flow branches between layers; inference
/// entry points compose them.
pub struct Backbone<S> {
    pub config: BackboneConfig,
    pub stem: PatchConv,
    pub blocks: Vec<Vec<VssLayer>>,
    pub merges: Vec<PatchConv>,
    pub head: Head,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Backbone<S> {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let std = s::<S>(0.02);
        // stem and merges are the only non-residual paths: they get
        // fan-in-scaled weights; bias 0.5 keeps raw feature statistics near
        // the unit style box
        let stem_fan_in = 3 * config.patch_size * config.patch_size;
        let stem = PatchConv::init(
            ps,
            "stem",
            config.patch_size,
            3,
            config.channels_per_block[0],
            s::<S>(1.0 / (stem_fan_in as f64).sqrt()),
            s(0.5),
            rng,
        );
        let mut blocks = Vec::new();
        for b in 0..4 {
            let mut layers = Vec::new();
            for j in 0..config.block_layer_counts[b] {
                layers.push(VssLayer::init(
                    ps,
                    &format!("block{b}.layer{j}"),
                    config.channels_per_block[b],
                    config.state_dim,
                    rng,
                ));
            }
            blocks.push(layers);
        }
        let mut merges = Vec::new();
        for b in 0..3 {
            let fan_in = 4 * config.channels_per_block[b];
            merges.push(PatchConv::init(
                ps,
                &format!("merge{b}"),
                2,
                config.channels_per_block[b],
                config.channels_per_block[b + 1],
                s::<S>(1.0 / (fan_in as f64).sqrt()),
                s(0.5),
                rng,
            ));
        }
        let head = Head {
            norm: LayerNorm::init(
                ps,
                "head.norm",
                config.channels_per_block[3],
                S::one(),
                S::zero(),
            ),
            linear: Linear::init(
                ps,
                "head.linear",
                config.channels_per_block[3],
                config.num_classes,
                std,
                S::zero(),
                rng,
            ),
        };
        Ok(Backbone {
            config: config.clone(),
            stem,
            blocks,
            merges,
            head,
            _marker: std::marker::PhantomData,
        })
    }

    /// Patch embedding of a pixel image. Errors if the spatial size is not
    /// divisible by the patch size.
    pub fn patch_embed(&self, ps: &ParamStore<S>, image: &Array4<S>) -> Result<FeatureMap<S>> {
        let (_, c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Config(format!("expected 3 input channels, got {c}")));
        }
        if h % self.config.patch_size != 0 || w % self.config.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by patch size {}",
                self.config.patch_size
            )));
        }
        let (y, _) = self.stem.forward(ps, image);
        Ok(FeatureMap::new(y, 0))
    }

    /// Inference forward: logits plus feature maps of the hooked layers
    /// (1-based global indices).
    pub fn encode_image(
        &self,
        ps: &ParamStore<S>,
        image: &Array4<S>,
        hooks: &[usize],
    ) -> Result<(Array2<S>, BTreeMap<usize, FeatureMap<S>>)> {
        let n = self.config.num_layers();
        for &hk in hooks {
            if hk == 0 || hk > n {
                return Err(Error::Config(format!("hook {hk} outside [1, {n}]")));
            }
        }
        let mut features = BTreeMap::new();
        let mut x = self.patch_embed(ps, image)?.data;
        let mut global = 0usize;
        for b in 0..4 {
            for layer in &self.blocks[b] {
                let (y, _) = layer.forward(ps, &x);
                x = y;
                global += 1;
                if hooks.contains(&global) {
                    features.insert(global, FeatureMap::new(x.clone(), global));
                }
            }
            if b < 3 {
                let (y, _) = self.merges[b].forward(ps, &x);
                x = y;
            }
        }
        let (logits, _) = self.head.forward(ps, &x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok((logits, features))
    }

    /// Head forward, exposed for the trainer.
    pub fn head_forward(&self, ps: &ParamStore<S>, x: &Array4<S>) -> (Array2<S>, HeadCache<S>) {
        self.head.forward(ps, x)
    }

    pub fn head_backward(
        &self,
        ps: &mut ParamStore<S>,
        cache: &HeadCache<S>,
        dlogits: &Array2<S>,
    ) -> Array4<S> {
        self.head.backward(ps, cache, dlogits)
    }

    /// Mean cross-entropy of `encode_image` logits against labels; used by
    /// the plain evaluation path.
    pub fn classify_loss(
        &self,
        ps: &ParamStore<S>,
        image: &Array4<S>,
        labels: &[usize],
    ) -> Result<S> {
        let (logits, _) = self.encode_image(ps, image, &[])?;
        Ok(cross_entropy(&logits, labels).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::rel_err;
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            block_layer_counts: vec![1, 1, 1, 1],
            channels_per_block: vec![4, 6, 8, 10],
            state_dim: 2,
            patch_size: 2,
            num_classes: 3,
            image_size: 16,
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut bad = BackboneConfig::default();
        bad.block_layer_counts = vec![2, 2, 2];
        assert!(bad.validate().is_err());
        let mut bad = BackboneConfig::default();
        bad.image_size = 30;
        assert!(bad.validate().is_err());
        assert_eq!(BackboneConfig::default().num_layers(), 10);
        assert_eq!(BackboneConfig::default().last_layer_of_blocks(), [2, 4, 8, 10]);
        assert_eq!(BackboneConfig::default().block_of_layer(5), Some((2, 0)));
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let mut rng = stream(31, "pe");
        let mut ps = ParamStore::<f64>::new();
        let cfg = BackboneConfig {
            image_size: 32,
            patch_size: 4,
            ..tiny_config()
        };
        let model = Backbone::init(&mut ps, &cfg, &mut rng).unwrap();
        let img = Array4::zeros((2, 3, 32, 32));
        let f = model.patch_embed(&ps, &img).unwrap();
        // S=32, patch 4 -> spatial 8x8, channels = first block
        assert_eq!(f.data.dim(), (2, 4, 8, 8));
        // zero image -> bias only, finite
        let bias = ps.p1(model.stem.lin.b);
        for bi in 0..2 {
            for ci in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        assert_eq!(f.data[[bi, ci, y, x]], bias[ci]);
                    }
                }
            }
        }
        // non-divisible size -> configuration error
        let img_bad = Array4::zeros((1, 3, 30, 30));
        assert!(matches!(
            model.patch_embed(&ps, &img_bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patch_embed_is_batch_equivariant() {
        let mut rng = stream(32, "pe-batch");
        let mut ps = ParamStore::<f64>::new();
        let model = Backbone::init(&mut ps, &tiny_config(), &mut rng).unwrap();
        let a = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let b = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let mut ab = Array4::zeros((2, 3, 16, 16));
        ab.index_axis_mut(ndarray::Axis(0), 0).assign(&a.index_axis(ndarray::Axis(0), 0));
        ab.index_axis_mut(ndarray::Axis(0), 1).assign(&b.index_axis(ndarray::Axis(0), 0));
        let mut ba = Array4::zeros((2, 3, 16, 16));
        ba.index_axis_mut(ndarray::Axis(0), 0).assign(&b.index_axis(ndarray::Axis(0), 0));
        ba.index_axis_mut(ndarray::Axis(0), 1).assign(&a.index_axis(ndarray::Axis(0), 0));
        let fab = model.patch_embed(&ps, &ab).unwrap().data;
        let fba = model.patch_embed(&ps, &ba).unwrap().data;
        for ci in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(fab[[0, ci, y, x]], fba[[1, ci, y, x]]);
                    assert_eq!(fab[[1, ci, y, x]], fba[[0, ci, y, x]]);
                }
            }
        }
    }

    #[test]
    fn encode_image_hooks_contract() {
        let mut rng = stream(33, "enc");
        let mut ps = ParamStore::<f64>::new();
        let cfg = tiny_config();
        let model = Backbone::init(&mut ps, &cfg, &mut rng).unwrap();
        let img = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        // empty hook set: features empty, logits produced
        let (logits, feats) = model.encode_image(&ps, &img, &[]).unwrap();
        assert_eq!(logits.dim(), (2, 3));
        assert!(feats.is_empty());
        // all layers hooked: per-block channel counts
        let all: Vec<usize> = (1..=cfg.num_layers()).collect();
        let (_, feats) = model.encode_image(&ps, &img, &all).unwrap();
        assert_eq!(feats.len(), cfg.num_layers());
        for (idx, f) in &feats {
            let (b, _) = cfg.block_of_layer(*idx).unwrap();
            assert_eq!(f.channels(), cfg.channels_per_block[b]);
            assert_eq!(f.layer_index, *idx);
        }
        // out-of-range hook rejected
        assert!(model.encode_image(&ps, &img, &[99]).is_err());
    }

    #[test]
    fn encode_image_is_deterministic_and_thread_safe() {
        let mut rng = stream(34, "det");
        let mut ps = ParamStore::<f64>::new();
        let model = Backbone::init(&mut ps, &tiny_config(), &mut rng).unwrap();
        let img = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let (l1, _) = model.encode_image(&ps, &img, &[]).unwrap();
        let (l2, _) = model.encode_image(&ps, &img, &[]).unwrap();
        assert_eq!(l1, l2); // bit-identical
        // shared read-only inference across threads
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| {
                    let model = &model;
                    let ps = &ps;
                    let img = &img;
                    scope.spawn(move || model.encode_image(ps, img, &[]).unwrap().0)
                })
                .collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), l1);
            }
        });
    }

    #[test]
    fn input_gradient_matches_fd_through_whole_encoder() {
        // gradient of a scalar loss on encode_image output w.r.t. the input
        // image, on 10 random coordinates, central differences at 1e-4
        let mut rng = stream(35, "fullgrad");
        let mut ps = ParamStore::<f64>::new();
        let cfg = BackboneConfig {
            block_layer_counts: vec![1, 1, 1, 1],
            channels_per_block: vec![4, 5, 6, 7],
            state_dim: 2,
            patch_size: 2,
            num_classes: 3,
            image_size: 16,
        };
        let model = Backbone::init(&mut ps, &cfg, &mut rng).unwrap();
        // scale up some weights so signals are not vanishing
        for id in ps.ids() {
            if ps.name(id).contains("out_proj.w") {
                for k in 0..ps.flat_len(id) {
                    let v = ps.get_flat(id, k);
                    ps.set_flat(id, k, v * 8.0);
                }
            }
        }
        let img = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let labels = vec![1usize];

        // analytic input gradient via manual chain
        let f0 = model.patch_embed(&ps, &img).unwrap().data;
        let mut x = f0;
        let mut layer_caches = Vec::new();
        let mut merge_caches = Vec::new();
        for b in 0..4 {
            for layer in &model.blocks[b] {
                let (y, cache) = layer.forward(&ps, &x);
                layer_caches.push(cache);
                x = y;
            }
            if b < 3 {
                let (y, rows) = model.merges[b].forward(&ps, &x);
                merge_caches.push(rows);
                x = y;
            }
        }
        let (logits, head_cache) = model.head.forward(&ps, &x);
        let (_, dlogits) = cross_entropy(&logits, &labels);
        let mut dx = model.head.backward(&mut ps, &head_cache, &dlogits);
        let mut li = layer_caches.len();
        for b in (0..4).rev() {
            if b < 3 {
                let side = cfg.block_side(b + 1);
                let _ = side;
                dx = model.merges[b].backward(&mut ps, &merge_caches[b], &dx);
            }
            for layer in model.blocks[b].iter().rev() {
                li -= 1;
                dx = layer.backward(&mut ps, &layer_caches[li], &dx);
            }
        }
        let (b0, _) = model.stem.forward(&ps, &img);
        let _ = b0;
        let rows = model.stem.gather(&img);
        let dimg = model.stem.backward(&mut ps, &rows, &dx);

        let mut coord_rng = stream(36, "coords");
        for _ in 0..10 {
            let bi = 0;
            let ci = coord_rng.gen_range(0..3);
            let y = coord_rng.gen_range(0..16);
            let xx = coord_rng.gen_range(0..16);
            let h = 1e-4;
            let mut imp = img.clone();
            imp[[bi, ci, y, xx]] += h;
            let fp = model.classify_loss(&ps, &imp, &labels).unwrap();
            imp[[bi, ci, y, xx]] -= 2.0 * h;
            let fm = model.classify_loss(&ps, &imp, &labels).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = dimg[[bi, ci, y, xx]];
            assert!(
                rel_err(an, fd, 1e-7) < 1e-4,
                "input grad at ({ci},{y},{xx}): {an} vs {fd}"
            );
        }
    }
}
