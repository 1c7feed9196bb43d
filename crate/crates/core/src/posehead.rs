//! Relative pose head: dual-softmax attention over the fused cost volume,
//! weighted bilinear pooling of positionally encoded feature tokens, and an
//! MLP regressing a 6D rotation plus metric translation.

use ndarray::Array2;

use crate::correlation::CostVolume;
use crate::error::{Error, Result};
use crate::geometry::{rot6d_to_rotation, Pose, Rot6D, Translation};
use crate::pyramid::FeatureMap;
use crate::weights::{seeded_uniform, seeded_uniform_range, Tensor, WeightStore};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PE_FREQUENCIES: usize = 16;
pub const MLP_HIDDEN: usize = 256;

/// Parameters of the pose head. The pooled bilinear feature has dimension
/// `c * c` for token width `c`; the MLP maps it through two hidden layers to
/// 9 outputs (6 rotation, 3 translation).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHeadParams {
    pub c: usize,
    pub freqs: usize,
    pub use_pe: bool,
    pub temperature: f64,
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
    pub w3: Array2<f64>,
    pub b3: Vec<f64>,
}

impl PoseHeadParams {
    pub fn seeded(seed: u64, c: usize, temperature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = c * c;
        let s1 = (2.0 / din as f64).sqrt();
        let s2 = (2.0 / MLP_HIDDEN as f64).sqrt();
        let w1 = Array2::from_shape_vec(
            (MLP_HIDDEN, din),
            seeded_uniform(&mut rng, MLP_HIDDEN * din, s1),
        )
        .unwrap();
        let b1 = seeded_uniform_range(&mut rng, MLP_HIDDEN, 0.0, 0.1);
        let w2 = Array2::from_shape_vec(
            (MLP_HIDDEN, MLP_HIDDEN),
            seeded_uniform(&mut rng, MLP_HIDDEN * MLP_HIDDEN, s2),
        )
        .unwrap();
        let b2 = seeded_uniform_range(&mut rng, MLP_HIDDEN, 0.0, 0.1);
        let w3 =
            Array2::from_shape_vec((9, MLP_HIDDEN), seeded_uniform(&mut rng, 9 * MLP_HIDDEN, s2))
                .unwrap();
        let mut b3 = seeded_uniform(&mut rng, 9, 0.1);
        // Bias the 6D head toward the identity frame so untrained outputs
        // start far from the Gram-Schmidt degeneracy.
        b3[0] = ((b3[0] + 1.0) as f32) as f64;
        b3[4] = ((b3[4] + 1.0) as f32) as f64;
        PoseHeadParams {
            c,
            freqs: PE_FREQUENCIES,
            use_pe: true,
            temperature,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// All-zero MLP emitting exactly `out` regardless of input; used to pin
    /// structural behavior in tests.
    pub fn rigged(c: usize, out: [f64; 9]) -> Self {
        let din = c * c;
        PoseHeadParams {
            c,
            freqs: PE_FREQUENCIES,
            use_pe: true,
            temperature: 1.0,
            w1: Array2::zeros((MLP_HIDDEN, din)),
            b1: vec![0.0; MLP_HIDDEN],
            w2: Array2::zeros((MLP_HIDDEN, MLP_HIDDEN)),
            b2: vec![0.0; MLP_HIDDEN],
            w3: Array2::zeros((9, MLP_HIDDEN)),
            b3: out.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.c * self.c
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mat = |name: &str, m: &Array2<f64>| {
            Tensor::new(
                &format!("{prefix}.{name}"),
                vec![m.nrows(), m.ncols()],
                m.iter().copied().collect(),
            )
            .unwrap()
        };
        let vec = |name: &str, v: &[f64]| {
            Tensor::new(&format!("{prefix}.{name}"), vec![v.len()], v.to_vec()).unwrap()
        };
        vec![
            mat("w1", &self.w1),
            vec("b1", &self.b1),
            mat("w2", &self.w2),
            vec("b2", &self.b2),
            mat("w3", &self.w3),
            vec("b3", &self.b3),
        ]
    }

    pub fn from_store(
        store: &WeightStore,
        prefix: &str,
        c: usize,
        temperature: f64,
    ) -> Result<Self> {
        let mat = |name: &str| -> Result<Array2<f64>> {
            let t = store.get(&format!("{prefix}.{name}"))?;
            if t.shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!("{prefix}.{name} is not a matrix")));
            }
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        };
        let vec = |name: &str| -> Result<Vec<f64>> {
            Ok(store.get(&format!("{prefix}.{name}"))?.data.clone())
        };
        let p = PoseHeadParams {
            c,
            freqs: PE_FREQUENCIES,
            use_pe: true,
            temperature,
            w1: mat("w1")?,
            b1: vec("b1")?,
            w2: mat("w2")?,
            b2: vec("b2")?,
            w3: mat("w3")?,
            b3: vec("b3")?,
        };
        let din = c * c;
        if p.w1.dim() != (MLP_HIDDEN, din)
            || p.w2.dim() != (MLP_HIDDEN, MLP_HIDDEN)
            || p.w3.dim() != (9, MLP_HIDDEN)
            || p.b1.len() != MLP_HIDDEN
            || p.b2.len() != MLP_HIDDEN
            || p.b3.len() != 9
        {
            return Err(Error::ShapeMismatch(format!(
                "pose head tensors inconsistent with token width {c}"
            )));
        }
        Ok(p)
    }
}

/// Elementwise product of the row-wise and column-wise softmax of `a / T`:
/// a soft mutual-agreement map with entries in [0, 1].
pub fn dual_softmax(a: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if temperature <= 0.0 {
        return Err(Error::BadRange(format!(
            "dual softmax temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = a.dim();
    let mut rows = Array2::zeros((n, m));
    for i in 0..n {
        let row = a.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..m {
            let e = ((a[(i, j)] - max) / temperature).exp();
            rows[(i, j)] = e;
            z += e;
        }
        for j in 0..m {
            rows[(i, j)] /= z;
        }
    }
    let mut cols = Array2::zeros((n, m));
    for j in 0..m {
        let col = a.column(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..n {
            let e = ((a[(i, j)] - max) / temperature).exp();
            cols[(i, j)] = e;
            z += e;
        }
        for i in 0..n {
            cols[(i, j)] /= z;
        }
    }
    Ok(&rows * &cols)
}

/// 2D sinusoidal positional encoding of cell (y, x) on an h x w grid,
/// emitted at token width `c`: even channels encode the x coordinate, odd
/// channels the y coordinate, cycling through `freqs` octaves of sin/cos.
pub fn positional_encoding(y: usize, x: usize, h: usize, w: usize, c: usize, freqs: usize) -> Vec<f64> {
    let u = (x as f64 + 0.5) / w as f64;
    let v = (y as f64 + 0.5) / h as f64;
    let mut out = Vec::with_capacity(c);
    for k in 0..c {
        let coord = if k % 2 == 0 { u } else { v };
        let m = k / 2;
        let f_idx = (m / 2) % freqs;
        let angle = std::f64::consts::PI * (1 << f_idx) as f64 * coord;
        out.push(if m % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}

/// Pools the two token sets through the mutual-agreement map of the fused
/// cost volume: `pooled = T1^T W T2` flattened to `c * c` reals, where
/// `W = dual_softmax(C / T)` and tokens are features plus (optionally) the
/// sinusoidal positional encoding.
pub fn essential_module(
    c_fused: &CostVolume,
    d1: &FeatureMap,
    d2: &FeatureMap,
    p: &PoseHeadParams,
) -> Result<Vec<f64>> {
    let (h1, w1, h2, w2) = c_fused.dims();
    if d1.h() != h1 || d1.w() != w1 || d2.h() != h2 || d2.w() != w2 {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} / {}x{} disagree with cost volume {h1}x{w1}x{h2}x{w2}",
            d1.h(),
            d1.w(),
            d2.h(),
            d2.w()
        )));
    }
    if d1.c() != p.c || d2.c() != p.c {
        return Err(Error::ShapeMismatch(format!(
            "token width {} expected, features have {} and {}",
            p.c,
            d1.c(),
            d2.c()
        )));
    }
    let tokens = |d: &FeatureMap, h: usize, w: usize| -> Array2<f64> {
        let mut t = Array2::zeros((h * w, p.c));
        for y in 0..h {
            for x in 0..w {
                let cell = d.cell(y, x);
                let pe = if p.use_pe {
                    positional_encoding(y, x, h, w, p.c, p.freqs)
                } else {
                    vec![0.0; p.c]
                };
                for k in 0..p.c {
                    t[(y * w + x, k)] = cell[k] + pe[k];
                }
            }
        }
        t
    };
    let t1 = tokens(d1, h1, w1);
    let t2 = tokens(d2, h2, w2);
    let w = dual_softmax(&c_fused.as_matrix(), p.temperature)?;
    let pooled = t1.t().dot(&w).dot(&t2);
    Ok(pooled.iter().copied().collect())
}

/// Two-hidden-layer ReLU MLP from the pooled feature to 9 reals; the first
/// six parametrize the rotation (always a valid element of SO(3) by
/// Gram-Schmidt), the last three are the metric translation.
pub fn regress_pose(feature: &[f64], p: &PoseHeadParams) -> Result<Pose> {
    if feature.len() != p.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "pose head wants {} inputs, got {}",
            p.input_dim(),
            feature.len()
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("pooled feature contains NaN/Inf".into()));
    }
    let relu_layer = |w: &Array2<f64>, b: &[f64], x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; w.nrows()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = b[i];
            for (j, &xj) in x.iter().enumerate() {
                acc += w[(i, j)] * xj;
            }
            *o = acc.max(0.0);
        }
        out
    };
    let h1 = relu_layer(&p.w1, &p.b1, feature);
    let h2 = relu_layer(&p.w2, &p.b2, &h1);
    let mut out = vec![0.0; 9];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = p.b3[i];
        for (j, &hj) in h2.iter().enumerate() {
            acc += p.w3[(i, j)] * hj;
        }
        *o = acc;
    }
    let r6 = Rot6D::new(
        Vector3::new(out[0], out[1], out[2]),
        Vector3::new(out[3], out[4], out[5]),
    );
    let r = rot6d_to_rotation(&r6)?;
    Ok(Pose::new(r, Translation::new(out[6], out[7], out[8])))
}
