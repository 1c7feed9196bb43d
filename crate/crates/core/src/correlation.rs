//! All-pairs cost volumes, attention aggregation over the augmented volumes,
//! matching distributions, cross-view feature conditioning and level fusion.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pyramid::FeatureMap;
use crate::weights::{seeded_uniform, Tensor, WeightStore};

/// Pairwise similarity between every cell of a source grid and every cell of
/// a target grid; shape `(h1, w1, h2, w2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    data: Array4<f64>,
}

impl CostVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadRange("cost volume has non-finite values".into()));
        }
        Ok(CostVolume { data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    /// Entry for source cell `(y1, x1)` and target cell `(y2, x2)`.
    pub fn at(&self, y1: usize, x1: usize, y2: usize, x2: usize) -> f64 {
        self.data[(y1, x1, y2, x2)]
    }

    /// Swaps source and target roles: `t(j, i) = c(i, j)`.
    pub fn transposed(&self) -> CostVolume {
        let (h1, w1, h2, w2) = self.dims();
        CostVolume {
            data: Array4::from_shape_fn((h2, w2, h1, w1), |(y2, x2, y1, x1)| {
                self.data[(y1, x1, y2, x2)]
            }),
        }
    }

    /// Flat `(h1*w1, h2*w2)` copy, source cells as rows.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (h1, w1, h2, w2) = self.dims();
        let flat = self.data.as_standard_layout();
        flat.to_shape((h1 * w1, h2 * w2)).expect("contiguous").to_owned()
    }

    pub fn from_matrix(m: Array2<f64>, h1: usize, w1: usize, h2: usize, w2: usize) -> Result<Self> {
        if m.dim() != (h1 * w1, h2 * w2) {
            return Err(Error::ShapeMismatch(format!(
                "matrix {:?} does not reshape to ({h1},{w1},{h2},{w2})",
                m.dim()
            )));
        }
        let data = m
            .into_shape_with_order((h1, w1, h2, w2))
            .expect("size checked");
        Ok(CostVolume { data })
    }

    /// Writes the volume as a flat little-endian f64 blob plus a JSON shape
    /// header next to it.
    pub fn save_blob(&self, blob_path: &std::path::Path, header_path: &std::path::Path) -> Result<()> {
        let (h1, w1, h2, w2) = self.dims();
        let header = CostVolumeHeader { h1, w1, h2, w2, dtype: "f64le".into() };
        std::fs::write(
            header_path,
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )?;
        let flat = self.data.as_standard_layout();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(blob_path, bytes)?;
        Ok(())
    }

    pub fn load_blob(blob_path: &std::path::Path, header_path: &std::path::Path) -> Result<Self> {
        let bad = |path: &std::path::Path, reason: String| Error::MalformedFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(header_path)
            .map_err(|e| bad(header_path, e.to_string()))?;
        let header: CostVolumeHeader =
            serde_json::from_str(&text).map_err(|e| bad(header_path, e.to_string()))?;
        if header.dtype != "f64le" {
            return Err(bad(header_path, format!("unsupported dtype {:?}", header.dtype)));
        }
        let raw = std::fs::read(blob_path).map_err(|e| bad(blob_path, e.to_string()))?;
        let n = header.h1 * header.w1 * header.h2 * header.w2;
        if raw.len() != n * 8 {
            return Err(bad(
                blob_path,
                format!("expected {} bytes for shape in header, found {}", n * 8, raw.len()),
            ));
        }
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array4::from_shape_vec((header.h1, header.w1, header.h2, header.w2), vals)
            .expect("length checked");
        CostVolume::new(data)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CostVolumeHeader {
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
    dtype: String,
}

/// `C(i, j) = <d1(i), d2(j)>` for every cell pair. With unit-normalized
/// features the entries are cosine similarities.
///
/// Summation order over channels is fixed, so `build(d1, d2)` equals
/// `build(d2, d1)` transposed bitwise.
pub fn build_cost_volume(d1: &FeatureMap, d2: &FeatureMap) -> Result<CostVolume> {
    if d1.c() != d2.c() {
        return Err(Error::ChannelMismatch {
            left: d1.c(),
            right: d2.c(),
        });
    }
    let (h1, w1, h2, w2, c) = (d1.h(), d1.w(), d2.h(), d2.w(), d1.c());
    let a = d1.data();
    let b = d2.data();
    let mut out = Array4::zeros((h1, w1, h2, w2));
    for y1 in 0..h1 {
        for x1 in 0..w1 {
            for y2 in 0..h2 {
                for x2 in 0..w2 {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += a[(y1, x1, k)] * b[(y2, x2, k)];
                    }
                    out[(y1, x1, y2, x2)] = acc;
                }
            }
        }
    }
    Ok(CostVolume { data: out })
}

/// Logit bonus each token grants itself in learned aggregation; seeded
/// blocks therefore start near the identity map.
pub const IDENTITY_PRIOR: f64 = 16.0;

/// How the aggregation attention mixes tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingMode {
    /// Attention matrix pinned to identity: tokens pass through unchanged.
    Identity,
    /// Seeded query/key projections over the augmented-volume tokens.
    Learned,
}

/// Self-attention parameters for one pyramid level. Token width is
/// `hw + c`: a cost row concatenated with that cell's feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub mode: MixingMode,
    pub seed: u64,
    token_w: usize,
    dk: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
}

impl AggregatorParams {
    pub fn identity() -> Self {
        AggregatorParams {
            mode: MixingMode::Identity,
            seed: 0,
            token_w: 0,
            dk: 0,
            wq: Vec::new(),
            wk: Vec::new(),
        }
    }

    /// Learned single-head attention sized for grids of `hw` cells with `c`
    /// feature channels. The projections start at small gain so a freshly
    /// seeded block stays close to the identity prior of the logits and the
    /// cost structure survives an untrained pass.
    pub fn seeded(seed: u64, hw: usize, c: usize, dk: usize) -> Self {
        let token_w = hw + c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (0.1 / token_w as f64).sqrt();
        AggregatorParams {
            mode: MixingMode::Learned,
            seed,
            token_w,
            dk,
            wq: seeded_uniform(&mut rng, token_w * dk, scale),
            wk: seeded_uniform(&mut rng, token_w * dk, scale),
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor::new(&format!("{prefix}.wq"), vec![self.token_w, self.dk], self.wq.clone())
                .expect("consistent"),
            Tensor::new(&format!("{prefix}.wk"), vec![self.token_w, self.dk], self.wk.clone())
                .expect("consistent"),
        ]
    }

    pub fn from_store(store: &WeightStore, prefix: &str, hw: usize, c: usize, dk: usize) -> Result<Self> {
        let mut p = AggregatorParams::seeded(store.seed, hw, c, dk);
        let wq = store.get(&format!("{prefix}.wq"))?;
        let wk = store.get(&format!("{prefix}.wk"))?;
        if wq.shape != vec![p.token_w, dk] || wk.shape != vec![p.token_w, dk] {
            return Err(Error::ShapeMismatch(format!(
                "aggregator {prefix} weight shapes do not match hw={hw} c={c} dk={dk}"
            )));
        }
        p.wq = wq.data.clone();
        p.wk = wk.data.clone();
        Ok(p)
    }
}

/// Row-wise softmax with log-sum-exp stabilization; finite for any input.
fn softmax_rows_inplace(m: &mut Array2<f64>) {
    let (rows, cols) = m.dim();
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            max = max.max(m[(r, c)]);
        }
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (m[(r, c)] - max).exp();
            m[(r, c)] = e;
            sum += e;
        }
        for c in 0..cols {
            m[(r, c)] /= sum;
        }
    }
}

/// One attention pass over the augmented volume `[cost-rows, features]`.
/// Values pass through unprojected, so the output token splits back into a
/// cost slice and a feature slice of the original widths.
fn attention_pass(
    cost_rows: &Array2<f64>,
    feats: &Array2<f64>,
    params: &AggregatorParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = cost_rows.dim().0;
    if feats.dim().0 != n {
        return Err(Error::ShapeMismatch(
            "cost rows and feature rows disagree on cell count".into(),
        ));
    }
    if params.mode == MixingMode::Identity {
        return Ok((cost_rows.clone(), feats.clone()));
    }
    let (n_tgt, c) = (cost_rows.dim().1, feats.dim().1);
    let token_w = n_tgt + c;
    if token_w != params.token_w {
        return Err(Error::ShapeMismatch(format!(
            "aggregator sized for token width {}, got {token_w}",
            params.token_w
        )));
    }
    let token = |i: usize, k: usize| -> f64 {
        if k < n_tgt {
            cost_rows[(i, k)]
        } else {
            feats[(i, k - n_tgt)]
        }
    };
    let dk = params.dk;
    let mut q = Array2::zeros((n, dk));
    let mut key = Array2::zeros((n, dk));
    for i in 0..n {
        for d in 0..dk {
            let mut aq = 0.0;
            let mut ak = 0.0;
            for k in 0..token_w {
                let t = token(i, k);
                aq += t * params.wq[k * dk + d];
                ak += t * params.wk[k * dk + d];
            }
            q[(i, d)] = aq;
            key[(i, d)] = ak;
        }
    }
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut attn = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for d in 0..dk {
                s += q[(i, d)] * key[(j, d)];
            }
            attn[(i, j)] = s * inv_sqrt_dk;
        }
        // Identity prior: untrained blocks refine rather than scramble, so
        // matching structure is preserved until training reshapes the logits.
        attn[(i, i)] += IDENTITY_PRIOR;
    }
    softmax_rows_inplace(&mut attn);
    let mut cost_out = Array2::zeros((n, n_tgt));
    let mut feat_out = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..n {
            let a = attn[(i, j)];
            for k in 0..n_tgt {
                cost_out[(i, k)] += a * cost_rows[(j, k)];
            }
            for k in 0..c {
                feat_out[(i, k)] += a * feats[(j, k)];
            }
        }
    }
    Ok((cost_out, feat_out))
}

fn feats_as_rows(d: &FeatureMap) -> Array2<f64> {
    d.data()
        .as_standard_layout()
        .to_shape((d.h() * d.w(), d.c()))
        .expect("contiguous")
        .to_owned()
}

fn rows_as_feats(rows: Array2<f64>, h: usize, w: usize) -> FeatureMap {
    let c = rows.dim().1;
    FeatureMap::new(
        rows.into_shape_with_order((h, w, c))
            .expect("size consistent"),
    )
    .expect("finite by construction")
}

/// Joint cost/feature refinement: the refined volume is
/// `phi([C, D1]) + phi([C^T, D2])^T` with the same attention parameters on
/// both passes, so swapping the two views exactly transposes the result.
pub fn aggregate(
    c: &CostVolume,
    d1: &FeatureMap,
    d2: &FeatureMap,
    params: &AggregatorParams,
) -> Result<(CostVolume, FeatureMap, FeatureMap)> {
    let (h1, w1, h2, w2) = c.dims();
    if (d1.h(), d1.w()) != (h1, w1) || (d2.h(), d2.w()) != (h2, w2) {
        return Err(Error::ShapeMismatch(
            "feature grids do not match the cost volume".into(),
        ));
    }
    if d1.c() != d2.c() {
        return Err(Error::ChannelMismatch {
            left: d1.c(),
            right: d2.c(),
        });
    }
    if params.mode == MixingMode::Learned && (h1 * w1) != (h2 * w2) {
        return Err(Error::ShapeMismatch(
            "learned aggregation requires equal cell counts in both views".into(),
        ));
    }
    let cm = c.as_matrix();
    let ctm = c.transposed().as_matrix();
    let f1 = feats_as_rows(d1);
    let f2 = feats_as_rows(d2);
    let (cost1, feat1) = attention_pass(&cm, &f1, params)?;
    let (cost2, feat2) = attention_pass(&ctm, &f2, params)?;
    let refined = &cost1 + &cost2.t();
    Ok((
        CostVolume::from_matrix(refined, h1, w1, h2, w2)?,
        rows_as_feats(feat1, h1, w1),
        rows_as_feats(feat2, h2, w2),
    ))
}

/// Row-stochastic matching probabilities: softmax of each source cell's cost
/// row at the given temperature. Shape `(h1*w1, h2*w2)`.
pub fn matching_distribution(c: &CostVolume, temperature: f64) -> Result<Array2<f64>> {
    if temperature <= 0.0 {
        return Err(Error::BadRange(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut m = c.as_matrix();
    m.mapv_inplace(|v| v / temperature);
    softmax_rows_inplace(&mut m);
    Ok(m)
}

/// Mixes the other view's features by matching probability:
/// `out(i) = sum_j attn(i, j) * d_other(j)`, reshaped onto the `(h, w)` grid
/// of the attention rows.
pub fn condition_features(
    d_other: &FeatureMap,
    attn: &Array2<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap> {
    let (rows, cols) = attn.dim();
    if rows != out_h * out_w {
        return Err(Error::ShapeMismatch(format!(
            "attention has {rows} rows, output grid wants {}",
            out_h * out_w
        )));
    }
    if cols != d_other.h() * d_other.w() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {cols} columns, source grid has {}",
            d_other.h() * d_other.w()
        )));
    }
    let src = feats_as_rows(d_other);
    let c = d_other.c();
    let mut out = Array2::zeros((rows, c));
    for i in 0..rows {
        for j in 0..cols {
            let a = attn[(i, j)];
            for k in 0..c {
                out[(i, k)] += a * src[(j, k)];
            }
        }
    }
    Ok(rows_as_feats(out, out_h, out_w))
}

/// Support of 1D resampling: `src = (dst + 0.5) * (src_len / dst_len) - 0.5`,
/// border-clamped; constant fields stay constant.
fn axis_taps(dst_len: usize, src_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let s0 = s.floor() as usize;
            let s1 = (s0 + 1).min(src_len - 1);
            (s0, s1, s - s0 as f64)
        })
        .collect()
}

/// Averages per-level volumes after resampling each onto the finest level's
/// 4D grid by multilinear interpolation over both coordinate pairs.
pub fn fuse_levels(costs: &[CostVolume]) -> Result<CostVolume> {
    if costs.is_empty() {
        return Err(Error::EmptyInput("fuse_levels needs at least one volume".into()));
    }
    let finest = costs
        .iter()
        .max_by_key(|c| {
            let (h1, w1, _, _) = c.dims();
            h1 * w1
        })
        .expect("non-empty");
    let (fh1, fw1, fh2, fw2) = finest.dims();
    let mut acc = Array4::<f64>::zeros((fh1, fw1, fh2, fw2));
    let inv_l = 1.0 / costs.len() as f64;
    for c in costs {
        let (h1, w1, h2, w2) = c.dims();
        let ty1 = axis_taps(fh1, h1);
        let tx1 = axis_taps(fw1, w1);
        let ty2 = axis_taps(fh2, h2);
        let tx2 = axis_taps(fw2, w2);
        for (dy1, &(y1a, y1b, fy1)) in ty1.iter().enumerate() {
            for (dx1, &(x1a, x1b, fx1)) in tx1.iter().enumerate() {
                for (dy2, &(y2a, y2b, fy2)) in ty2.iter().enumerate() {
                    for (dx2, &(x2a, x2b, fx2)) in tx2.iter().enumerate() {
                        let mut v = 0.0;
                        for (ya, wy) in [(y1a, 1.0 - fy1), (y1b, fy1)] {
                            if wy == 0.0 {
                                continue;
                            }
                            for (xa, wx) in [(x1a, 1.0 - fx1), (x1b, fx1)] {
                                if wx == 0.0 {
                                    continue;
                                }
                                for (yb, wy2) in [(y2a, 1.0 - fy2), (y2b, fy2)] {
                                    if wy2 == 0.0 {
                                        continue;
                                    }
                                    for (xb, wx2) in [(x2a, 1.0 - fx2), (x2b, fx2)] {
                                        if wx2 == 0.0 {
                                            continue;
                                        }
                                        v += wy * wx * wy2 * wx2 * c.at(ya, xa, yb, xb);
                                    }
                                }
                            }
                        }
                        acc[(dy1, dx1, dy2, dx2)] += v * inv_l;
                    }
                }
            }
        }
    }
    CostVolume::new(acc)
}
