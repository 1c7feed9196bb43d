//! Multi-level feature extraction producing unit-normalized feature maps at
//! strides 16/8/4 of the input.
//!
//! Two interchangeable extractors:
//! - `Learned`: a seeded three-stage strided convolution stack with ReLU,
//!   standing in for a pretrained backbone.
//! - `RawPatch`: each cell is the flattened, normalized image patch it
//!   covers; backbone-free, so matching tests don't depend on weights.

use ndarray::{Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{bilinear_support, Image};
use crate::weights::{seeded_uniform, seeded_uniform_range, Tensor, WeightStore};

/// Strides of the pyramid levels, coarse to fine.
pub const LEVEL_STRIDES: [usize; 3] = [16, 8, 4];

/// Feature grid with shape `(h, w, c)`. Cells are unit-normalized after
/// extraction so dot products are cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadRange("feature map has non-finite values".into()));
        }
        Ok(FeatureMap { data })
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn c(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn cell(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![y, x, ..])
    }

    /// Scales every cell to unit L2 norm; zero cells (norm below 1e-12) are
    /// left untouched.
    pub fn normalize(&mut self) {
        let (h, w, c) = self.data.dim();
        for y in 0..h {
            for x in 0..w {
                let mut n = 0.0;
                for k in 0..c {
                    n += self.data[(y, x, k)] * self.data[(y, x, k)];
                }
                let n = n.sqrt();
                if n > 1e-12 {
                    for k in 0..c {
                        self.data[(y, x, k)] /= n;
                    }
                }
            }
        }
    }

    /// Bilinear sample of the feature vector at continuous cell coordinates,
    /// border-clamped; the flag reports whether the query was in bounds.
    pub fn sample(&self, x: f64, y: f64) -> (Vec<f64>, bool) {
        let (corners, wgt, in_bounds) = bilinear_support(self.h(), self.w(), x, y);
        let mut out = vec![0.0; self.c()];
        for (&(cy, cx), &g) in corners.iter().zip(wgt.iter()) {
            for k in 0..self.c() {
                out[k] += g * self.data[(cy, cx, k)];
            }
        }
        (out, in_bounds)
    }
}

/// Ordered coarse-to-fine feature maps with strictly growing spatial size.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn finest(&self) -> &FeatureMap {
        self.levels.last().expect("pyramid has at least one level")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidMode {
    Learned,
    RawPatch,
}

/// One strided convolution: kernel size equals stride (non-overlapping
/// patches), ReLU activation, strictly positive bias so no cell collapses to
/// the zero vector on flat inputs.
#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    in_c: usize,
    out_c: usize,
    stride: usize,
    /// Layout `[out_c][in_c][ky][kx]`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvStage {
    fn seeded(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let fan_in = in_c * stride * stride;
        let scale = (2.0 / fan_in as f64).sqrt();
        ConvStage {
            in_c,
            out_c,
            stride,
            weight: seeded_uniform(rng, out_c * fan_in, scale),
            bias: seeded_uniform_range(rng, out_c, 0.01, 0.2),
        }
    }

    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_c + ic) * self.stride + ky) * self.stride + kx]
    }

    fn apply(&self, input: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = input.dim();
        let (oh, ow) = (h / self.stride, w / self.stride);
        let mut out = Array3::zeros((oh, ow, self.out_c));
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..self.out_c {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_c {
                        for ky in 0..self.stride {
                            for kx in 0..self.stride {
                                acc += self.w(oc, ic, ky, kx)
                                    * input[(oy * self.stride + ky, ox * self.stride + kx, ic)];
                            }
                        }
                    }
                    out[(oy, ox, oc)] = acc.max(0.0);
                }
            }
        }
        out
    }
}

/// Extractor parameters; construction is deterministic in the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidParams {
    pub mode: PyramidMode,
    pub seed: u64,
    /// Channels per level, coarse to fine (learned mode only).
    pub channels: Vec<usize>,
    stages: Vec<ConvStage>,
}

impl PyramidParams {
    /// Learned mode: stage 1 maps the image to the finest level, stages 2-3
    /// halve resolution twice toward the coarsest.
    pub fn seeded(seed: u64, channels: &[usize]) -> Result<Self> {
        if channels.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "learned pyramid needs 3 channel counts, got {}",
                channels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = vec![
            ConvStage::seeded(&mut rng, 3, channels[2], 4),
            ConvStage::seeded(&mut rng, channels[2], channels[1], 2),
            ConvStage::seeded(&mut rng, channels[1], channels[0], 2),
        ];
        Ok(PyramidParams {
            mode: PyramidMode::Learned,
            seed,
            channels: channels.to_vec(),
            stages,
        })
    }

    /// Backbone-free mode: features are the raw image patches.
    pub fn raw_patch() -> Self {
        PyramidParams {
            mode: PyramidMode::RawPatch,
            seed: 0,
            channels: LEVEL_STRIDES.iter().map(|s| s * s * 3).collect(),
            stages: Vec::new(),
        }
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut tensors = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            tensors.push(
                Tensor::new(
                    &format!("pyramid.stage{i}.weight"),
                    vec![st.out_c, st.in_c, st.stride, st.stride],
                    st.weight.clone(),
                )
                .expect("stage weights are consistent"),
            );
            tensors.push(
                Tensor::new(&format!("pyramid.stage{i}.bias"), vec![st.out_c], st.bias.clone())
                    .expect("stage bias is consistent"),
            );
        }
        tensors
    }

    pub fn to_store(&self) -> WeightStore {
        WeightStore::new(self.seed, self.to_tensors())
    }

    pub fn from_store(store: &WeightStore, channels: &[usize]) -> Result<Self> {
        let mut params = PyramidParams::seeded(store.seed, channels)?;
        for (i, st) in params.stages.iter_mut().enumerate() {
            let w = store.get(&format!("pyramid.stage{i}.weight"))?;
            let b = store.get(&format!("pyramid.stage{i}.bias"))?;
            if w.shape != vec![st.out_c, st.in_c, st.stride, st.stride] || b.shape != vec![st.out_c]
            {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid stage {i} weight shapes do not match the configuration"
                )));
            }
            st.weight = w.data.clone();
            st.bias = b.data.clone();
        }
        Ok(params)
    }
}

/// Extracts the coarse-to-fine pyramid; every level is unit-normalized.
pub fn extract_pyramid(img: &Image, params: &PyramidParams) -> Result<FeaturePyramid> {
    let coarsest = LEVEL_STRIDES[0];
    if img.h() % coarsest != 0 || img.w() % coarsest != 0 {
        return Err(Error::BadDimensions(format!(
            "image {}x{} not divisible by the coarsest stride {coarsest}",
            img.h(),
            img.w()
        )));
    }
    let mut levels = match params.mode {
        PyramidMode::Learned => {
            let fine = params.stages[0].apply(img.data());
            let mid = params.stages[1].apply(&fine);
            let coarse = params.stages[2].apply(&mid);
            vec![
                FeatureMap::new(coarse)?,
                FeatureMap::new(mid)?,
                FeatureMap::new(fine)?,
            ]
        }
        PyramidMode::RawPatch => LEVEL_STRIDES
            .iter()
            .map(|&s| {
                let (oh, ow) = (img.h() / s, img.w() / s);
                let mut data = Array3::zeros((oh, ow, s * s * 3));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut k = 0;
                        for py in 0..s {
                            for px in 0..s {
                                let rgb = img.pixel(oy * s + py, ox * s + px);
                                for c in 0..3 {
                                    data[(oy, ox, k)] = rgb[c];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                FeatureMap::new(data)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    for level in &mut levels {
        level.normalize();
    }
    Ok(FeaturePyramid { levels })
}
