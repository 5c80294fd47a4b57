//! Single-scale anchor-based detector with mixture-density heads.

pub mod anchors;
pub mod eval;
pub mod gmm;
pub mod predict;

use std::sync::Arc;

use mdal_autodiff::{GatherIndex, Graph, ParamId, ParamStore, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MdalError, Result};
use crate::seed::{rng_for, TAG_INIT};
use anchors::{build_anchor_grid, AnchorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Mixture over localization offsets and over class logits with per-class variance.
    FullGmm,
    /// Mixture over localization offsets and class logits, no class variance.
    Efficient,
    /// Point-estimate baseline trained with smooth-L1 and cross-entropy.
    Deterministic,
}

impl HeadVariant {
    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::FullGmm => "full_gmm",
            HeadVariant::Efficient => "efficient",
            HeadVariant::Deterministic => "deterministic",
        }
    }

    pub fn is_mixture(self) -> bool {
        !matches!(self, HeadVariant::Deterministic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub head: HeadVariant,
    /// Mixture components K.
    pub components: usize,
    /// Foreground classes C; the heads emit C + 1 scores including background.
    pub num_classes: usize,
    pub image_size: usize,
    /// Output channels of each 3×3 convolution.
    pub backbone_channels: Vec<usize>,
    /// Stride (1 or 2) of each convolution.
    pub backbone_strides: Vec<usize>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// The heads regress encoded offsets multiplied by this factor, as in the
    /// usual SSD target encoding.
    pub offset_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            head: HeadVariant::FullGmm,
            components: 4,
            num_classes: 4,
            image_size: 64,
            backbone_channels: vec![8, 16, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            anchor_scales: vec![16.0, 24.0],
            anchor_ratios: vec![1.0],
            offset_scale: 10.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(MdalError::Config("components K must be ≥ 1".into()));
        }
        if self.num_classes == 0 {
            return Err(MdalError::Config("num_classes must be ≥ 1".into()));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(MdalError::Config("offset_scale must be positive".into()));
        }
        if self.backbone_channels.is_empty() {
            return Err(MdalError::Config("backbone needs at least one layer".into()));
        }
        if self.backbone_strides.len() != self.backbone_channels.len()
            || self.backbone_strides.iter().any(|s| !matches!(s, 1 | 2))
        {
            return Err(MdalError::Config(
                "backbone_strides needs one stride of 1 or 2 per layer".into(),
            ));
        }
        let total: usize = self.backbone_strides.iter().product();
        if self.image_size == 0 || self.image_size % total != 0 {
            return Err(MdalError::Config(format!(
                "image size {} is not divisible by the total stride {total}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Feature map side F.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.backbone_strides.iter().product::<usize>()
    }

    /// Anchors per cell D.
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// C' = C + 1 classification outputs including background.
    pub fn class_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn loc_width(&self) -> usize {
        match self.head {
            HeadVariant::Deterministic => 4,
            _ => 4 * 3 * self.components,
        }
    }

    pub fn cls_width(&self) -> usize {
        let (k, c) = (self.components, self.class_outputs());
        match self.head {
            HeadVariant::FullGmm => c * 2 * k + k,
            HeadVariant::Efficient => c * k + k,
            HeadVariant::Deterministic => c,
        }
    }
}

/// Raw per-anchor head outputs before mixture post-processing.
///
/// Localization rows (mixture heads) hold, for each coordinate b in x, y, w, h,
/// K weight logits, K means and K raw variances. Classification rows hold K
/// weight logits, then `K·C'` means (component-major), then for the full head
/// `K·C'` raw variances.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeadOutput {
    /// `[A, loc_width]`
    pub loc: Tensor,
    /// `[A, cls_width]`
    pub cls: Tensor,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[F·F, channels]` last backbone feature map.
    pub features: Var,
    pub loc: Var,
    pub cls: Var,
}

#[derive(Debug)]
struct ConvLayer {
    index: GatherIndex,
    out_hw: usize,
    cin: usize,
    cout: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Network structure; parameters are kept separately in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Detector {
    config: NetworkConfig,
    anchors: AnchorSet,
    convs: Arc<Vec<ConvLayer>>,
    loc_w: ParamId,
    loc_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// im2col table for a 3×3, padding-1 convolution over a channels-last
/// `side × side × cin` input.
fn conv_index(side: usize, cin: usize, stride: usize) -> (GatherIndex, usize) {
    let out = side.div_ceil(stride);
    let mut idx = Vec::with_capacity(out * out * 9 * cin);
    for oy in 0..out {
        for ox in 0..out {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (stride * oy + ky) as isize - 1;
                    let ix = (stride * ox + kx) as isize - 1;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < side && (ix as usize) < side;
                    for c in 0..cin {
                        idx.push(inside.then(|| (iy as usize * side + ix as usize) * cin + c));
                    }
                }
            }
        }
    }
    (idx.into(), out)
}

impl Detector {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let anchors = build_anchor_grid(
            config.image_size,
            config.feature_size(),
            &config.anchor_scales,
            &config.anchor_ratios,
        )?;
        let mut convs = Vec::new();
        let (mut side, mut cin) = (config.image_size, 1);
        let mut next = 0;
        for (&cout, &stride) in config.backbone_channels.iter().zip(&config.backbone_strides) {
            let (index, out_hw) = conv_index(side, cin, stride);
            convs.push(ConvLayer {
                index,
                out_hw,
                cin,
                cout,
                weight: ParamId(next),
                bias: ParamId(next + 1),
            });
            next += 2;
            side = out_hw;
            cin = cout;
        }
        Ok(Self {
            config,
            anchors,
            convs: Arc::new(convs),
            loc_w: ParamId(next),
            loc_b: ParamId(next + 1),
            cls_w: ParamId(next + 2),
            cls_b: ParamId(next + 3),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn feature_channels(&self) -> usize {
        *self.config.backbone_channels.last().expect("validated")
    }

    /// Fresh parameters: He-normal convolutions, scaled-normal heads, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = rng_for(seed, &[TAG_INIT]);
        let mut store = ParamStore::new();
        let mut normal = |fan_in: usize, gain: f64, shape: &[usize]| {
            let sd = gain * (1.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, sd).expect("positive sd");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        for (i, l) in self.convs.iter().enumerate() {
            let fan_in = 9 * l.cin;
            store.insert(format!("conv{i}.w"), normal(fan_in, 2f64.sqrt(), &[fan_in, l.cout]));
            store.insert(format!("conv{i}.b"), Tensor::zeros(&[l.cout]));
        }
        let d = self.config.anchors_per_cell();
        let ch = self.feature_channels();
        let loc_out = d * self.config.loc_width();
        let cls_out = d * self.config.cls_width();
        store.insert("loc.w", normal(ch, 0.5, &[ch, loc_out]));
        store.insert("loc.b", Tensor::zeros(&[loc_out]));
        store.insert("cls.w", normal(ch, 0.5, &[ch, cls_out]));
        store.insert("cls.b", Tensor::zeros(&[cls_out]));
        store
    }

    /// Registers every parameter of `store` in `g`, in id order.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<Vec<Var>> {
        Ok(store
            .ids()
            .map(|id| g.param(id, store.get(id).clone()))
            .collect::<mdal_autodiff::Result<Vec<_>>>()?)
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], image: &[f64]) -> Result<HeadVars> {
        let side = self.config.image_size;
        if image.len() != side * side {
            return Err(MdalError::ImageSize {
                got: image.len(),
                expected: side * side,
            });
        }
        let centred: Vec<f64> = image.iter().map(|v| v - 0.5).collect();
        let mut x = g.constant(Tensor::new(vec![side * side, 1], centred)?)?;
        for l in self.convs.iter() {
            let cols = g.gather(x, l.index.clone(), &[l.out_hw * l.out_hw, 9 * l.cin])?;
            let y = g.matmul(cols, params[l.weight.0])?;
            let y = g.add_bias(y, params[l.bias.0])?;
            x = g.relu(y)?;
            debug_assert_eq!(g.shape(x)[1], l.cout);
        }
        let features = x;
        let a = self.num_anchors();
        let loc = g.matmul(features, params[self.loc_w.0])?;
        let loc = g.add_bias(loc, params[self.loc_b.0])?;
        let loc = g.reshape(loc, &[a, self.config.loc_width()])?;
        let cls = g.matmul(features, params[self.cls_w.0])?;
        let cls = g.add_bias(cls, params[self.cls_b.0])?;
        let cls = g.reshape(cls, &[a, self.config.cls_width()])?;
        Ok(HeadVars { features, loc, cls })
    }

    /// Forward pass returning raw head values.
    pub fn forward(&self, store: &ParamStore, image: &[f64]) -> Result<RawHeadOutput> {
        Ok(self.forward_with_features(store, image)?.0)
    }

    /// Forward pass that also returns the spatially averaged backbone features.
    pub fn forward_with_features(
        &self,
        store: &ParamStore,
        image: &[f64],
    ) -> Result<(RawHeadOutput, Vec<f64>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, store)?;
        let h = self.forward_graph(&mut g, &params, image)?;
        let feats = g.value(h.features);
        let ch = feats.last_dim();
        let cells = feats.len() / ch;
        let mut pooled = vec![0.0; ch];
        for row in feats.data().chunks(ch) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v / cells as f64;
            }
        }
        Ok((
            RawHeadOutput {
                loc: g.value(h.loc).clone(),
                cls: g.value(h.cls).clone(),
            },
            pooled,
        ))
    }
}
