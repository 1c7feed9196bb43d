//! Image containers, bilinear sampling, flow warping and quality metrics.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// RGB image with unit-range floats, shape `(h, w, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Validates the unit range and the minimum 8x8 size.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("image needs 3 channels, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::BadDimensions(format!("image must be at least 8x8, got {h}x{w}")));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::BadRange("image values must lie in [0,1]".into()));
        }
        Ok(Image { data })
    }

    pub fn constant(h: usize, w: usize, rgb: [f64; 3]) -> Result<Self> {
        Image::new(Array3::from_shape_fn((h, w, 3), |(_, _, c)| rgb[c]))
    }

    /// Builds from a per-pixel function returning RGB; values are clamped.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            f(y, x)[c].clamp(0.0, 1.0)
        }))
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[(y, x, 0)], self.data[(y, x, 1)], self.data[(y, x, 2)]]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.h() == other.h() && self.w() == other.w()
    }
}

/// Per-pixel depth in meters plus validity flags; valid entries are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
}

impl DepthMap {
    pub fn new(depth: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if depth.dim() != valid.dim() {
            return Err(Error::ShapeMismatch("depth and validity dims differ".into()));
        }
        for (d, &v) in depth.iter().zip(valid.iter()) {
            if v && !(d.is_finite() && *d > 0.0) {
                return Err(Error::BadRange(format!("valid depth must be positive, got {d}")));
            }
        }
        Ok(DepthMap { depth, valid })
    }
}

/// Resolution a flow field is expressed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowResolution {
    /// Cell units on the feature grid.
    Feature,
    /// Pixel units on the full image grid.
    Full,
}

/// Dense displacement field `(dx, dy)`, shape `(h, w, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array3<f64>,
    resolution: FlowResolution,
}

impl FlowField {
    pub fn new(data: Array3<f64>, resolution: FlowResolution) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 2 {
            return Err(Error::ShapeMismatch(format!("flow needs 2 channels, got {c}")));
        }
        let diag = ((h * h + w * w) as f64).sqrt();
        for v in data.iter() {
            if !v.is_finite() {
                return Err(Error::BadRange("flow contains non-finite values".into()));
            }
        }
        for row in data.rows() {
            let mag = (row[0] * row[0] + row[1] * row[1]).sqrt();
            if mag > diag {
                return Err(Error::BadRange(format!(
                    "flow magnitude {mag:.3} exceeds grid diagonal {diag:.3}"
                )));
            }
        }
        Ok(FlowField { data, resolution })
    }

    pub fn zeros(h: usize, w: usize, resolution: FlowResolution) -> Self {
        FlowField {
            data: Array3::zeros((h, w, 2)),
            resolution,
        }
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn resolution(&self) -> FlowResolution {
        self.resolution
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Displacement `(dx, dy)` at a grid position.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data[(y, x, 0)], self.data[(y, x, 1)])
    }
}

/// Binary confidence mask over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub data: Array2<bool>,
}

impl ConfidenceMask {
    pub fn ones(h: usize, w: usize) -> Self {
        ConfidenceMask {
            data: Array2::from_elem((h, w), true),
        }
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Fraction of set pixels.
    pub fn mean(&self) -> f64 {
        self.count() as f64 / (self.h() * self.w()) as f64
    }
}

/// Four-corner interpolation support for a continuous coordinate: corner
/// `(y, x)` indices, convex weights, and whether the query was in bounds.
/// Out-of-bounds queries are clamped to the border before interpolation.
pub fn bilinear_support(
    h: usize,
    w: usize,
    x: f64,
    y: f64,
) -> ([(usize, usize); 4], [f64; 4], bool) {
    let in_bounds = x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64;
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    (
        [(y0, x0), (y0, x1), (y1, x0), (y1, x1)],
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
        in_bounds,
    )
}

/// Color at a continuous pixel coordinate; the flag is false when the query
/// fell outside the pixel-center grid and was border-clamped.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> ([f64; 3], bool) {
    let (corners, weights, in_bounds) = bilinear_support(img.h(), img.w(), x, y);
    let mut out = [0.0; 3];
    for (&(cy, cx), &wgt) in corners.iter().zip(weights.iter()) {
        let px = img.pixel(cy, cx);
        for c in 0..3 {
            out[c] += wgt * px[c];
        }
    }
    (out, in_bounds)
}

/// Scalar-field variant of [`bilinear_sample`].
pub fn bilinear_sample_scalar(field: &Array2<f64>, x: f64, y: f64) -> (f64, bool) {
    let (h, w) = field.dim();
    let (corners, weights, in_bounds) = bilinear_support(h, w, x, y);
    let mut out = 0.0;
    for (&c, &wgt) in corners.iter().zip(weights.iter()) {
        out += wgt * field[c];
    }
    (out, in_bounds)
}

/// Backward-warps `src` by the flow: `out[i] = src[i + flow[i]]`, sampled
/// bilinearly. The mask records which samples stayed in bounds.
///
/// The flow must be at full resolution with the same grid as the image.
pub fn warp_image(src: &Image, flow: &FlowField) -> (Image, Array2<bool>) {
    assert_eq!(
        (src.h(), src.w()),
        (flow.h(), flow.w()),
        "flow grid must match the image"
    );
    assert_eq!(flow.resolution(), FlowResolution::Full);
    let mut data = Array3::zeros((src.h(), src.w(), 3));
    let mut mask = Array2::from_elem((src.h(), src.w()), false);
    for y in 0..src.h() {
        for x in 0..src.w() {
            let (dx, dy) = flow.at(y, x);
            let (rgb, ok) = bilinear_sample(src, x as f64 + dx, y as f64 + dy);
            for c in 0..3 {
                data[(y, x, c)] = rgb[c];
            }
            mask[(y, x)] = ok;
        }
    }
    (Image { data }, mask)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = [0.0; 2 * SSIM_RADIUS + 1];
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Gaussian-weighted local mean with the window renormalized where it hangs
/// over the border. Separable: the truncated in-bounds region is always a
/// rectangle, so per-axis renormalization is exact.
fn local_mean(field: &Array2<f64>) -> Array2<f64> {
    let taps = gaussian_taps();
    let (h, w) = field.dim();
    let mut horiz = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let xx = x as isize + i as isize - SSIM_RADIUS as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * field[(y, xx as usize)];
                    norm += t;
                }
            }
            horiz[(y, x)] = acc / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let yy = y as isize + i as isize - SSIM_RADIUS as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * horiz[(yy as usize, x)];
                    norm += t;
                }
            }
            out[(y, x)] = acc / norm;
        }
    }
    out
}

/// Per-pixel structural similarity, averaged over the three channels.
///
/// Gaussian window 11x11 with sigma 1.5 and the standard constants for unit
/// dynamic range; values lie in [-1, 1] and the map of an image with itself
/// is identically 1.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Array2<f64>> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch(format!(
            "ssim needs equal sizes, got {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let (h, w) = (a.h(), a.w());
    let mut map = Array2::zeros((h, w));
    for c in 0..3 {
        let ac = a.data().index_axis(ndarray::Axis(2), c).to_owned();
        let bc = b.data().index_axis(ndarray::Axis(2), c).to_owned();
        let mu_a = local_mean(&ac);
        let mu_b = local_mean(&bc);
        let mu_aa = local_mean(&(&ac * &ac));
        let mu_bb = local_mean(&(&bc * &bc));
        let mu_ab = local_mean(&(&ac * &bc));
        for y in 0..h {
            for x in 0..w {
                let (ma, mb) = (mu_a[(y, x)], mu_b[(y, x)]);
                // Cancellation can push tiny variances a hair negative and
                // the score past 1; clamp both so identical inputs score
                // exactly 1 and the similarity stays in range.
                let va = (mu_aa[(y, x)] - ma * ma).max(0.0);
                let vb = (mu_bb[(y, x)] - mb * mb).max(0.0);
                let cov = mu_ab[(y, x)] - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                map[(y, x)] += s.clamp(-1.0, 1.0) / 3.0;
            }
        }
    }
    Ok(map)
}

/// Mean structural similarity over the whole frame.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.mean().unwrap_or(0.0))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch("mse needs equal image sizes".into()));
    }
    let diff = a.data() - b.data();
    Ok(diff.mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99 dB
/// so identical images report a finite value.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / e).log10())
}

/// Reads an 8-bit RGB PNG into unit-range floats.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    Image::new(data)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest level.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut out = image::RgbImage::new(img.w() as u32, img.h() as u32);
    for y in 0..img.h() {
        for x in 0..img.w() {
            let px = img.pixel(y, x);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    out.save(path).map_err(Error::from)
}

/// Writes depth as 16-bit grayscale PNG: value 0 marks invalid pixels, the
/// remaining range scales linearly from 0 at depth 0 to 65535 at `max_depth`.
pub fn save_depth_png16(depth: &DepthMap, max_depth: f64, path: &Path) -> Result<()> {
    if max_depth <= 0.0 {
        return Err(Error::BadRange("max_depth must be positive".into()));
    }
    let (h, w) = depth.depth.dim();
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if depth.valid[(y, x)] {
                let scaled = (depth.depth[(y, x)] / max_depth * 65535.0).round();
                scaled.clamp(1.0, 65535.0) as u16
            } else {
                0
            };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path).map_err(Error::from)
}

/// Writes a binary mask as an 8-bit grayscale PNG (255 = set).
pub fn save_mask_png(mask: &ConfidenceMask, path: &Path) -> Result<()> {
    let (h, w) = mask.data.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([if mask.data[(y, x)] { 255 } else { 0 }]));
        }
    }
    out.save(path).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn image_validation() {
        assert!(Image::constant(8, 8, [0.5, 0.5, 0.5]).is_ok());
        assert!(Image::constant(7, 8, [0.5, 0.5, 0.5]).is_err());
        assert!(Image::new(Array3::from_elem((8, 8, 3), 1.5)).is_err());
    }

    #[test]
    fn bilinear_exact_at_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 8, 9);
        for y in 0..8 {
            for x in 0..9 {
                let (got, ok) = bilinear_sample(&img, x as f64, y as f64);
                assert!(ok);
                assert_eq!(got, img.pixel(y, x));
            }
        }
    }

    #[test]
    fn bilinear_midpoint_halves() {
        let img = Image::from_fn(8, 8, |_, x| if x == 0 { [0.0; 3] } else { [1.0; 3] }).unwrap();
        let (got, ok) = bilinear_sample(&img, 0.5, 3.0);
        assert!(ok);
        assert_abs_diff_eq!(got[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_matches_four_neighbor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 12, 10);
        for _ in 0..500 {
            let x = rng.random::<f64>() * 9.0;
            let y = rng.random::<f64>() * 11.0;
            let (got, ok) = bilinear_sample(&img, x, y);
            assert!(ok);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(9), (y0 + 1).min(11));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for c in 0..3 {
                let expect = img.pixel(y0, x0)[c] * (1.0 - fx) * (1.0 - fy)
                    + img.pixel(y0, x1)[c] * fx * (1.0 - fy)
                    + img.pixel(y1, x0)[c] * (1.0 - fx) * fy
                    + img.pixel(y1, x1)[c] * fx * fy;
                assert_abs_diff_eq!(got[c], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_out_of_bounds_clamps_and_flags() {
        let img = Image::constant(8, 8, [0.25, 0.5, 0.75]).unwrap();
        let (got, ok) = bilinear_sample(&img, -3.0, 100.0);
        assert!(!ok);
        assert_eq!(got, [0.25, 0.5, 0.75]);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 10, 10);
        let flow = FlowField::zeros(10, 10, FlowResolution::Full);
        let (out, mask) = warp_image(&img, &flow);
        assert_eq!(out.data(), img.data());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn warp_recovers_translated_image() {
        // img2 is img1 shifted right by 5 px: img2[x] = img1[x - 5]. Warping
        // img1 by constant flow (-5, 0) reproduces img2 where covisible.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_image(&mut rng, 16, 24);
        let img2 = Image::from_fn(16, 24, |y, x| {
            if x >= 5 {
                base.pixel(y, x - 5)
            } else {
                [0.0; 3]
            }
        })
        .unwrap();
        let flow = FlowField::new(
            Array3::from_shape_fn((16, 24, 2), |(_, _, c)| if c == 0 { -5.0 } else { 0.0 }),
            FlowResolution::Full,
        )
        .unwrap();
        let (warped, mask) = warp_image(&img2, &flow);
        for y in 0..16 {
            for x in 0..19 {
                assert!(mask[(y, x + 5)] || x + 5 >= 24);
                for c in 0..3 {
                    // warped[x] = img2[x-5] = base[x-10]; compare against base
                    // on the doubly-shifted region.
                    if x >= 5 {
                        assert_abs_diff_eq!(
                            warped.pixel(y, x + 5)[c],
                            base.pixel(y, x - 5 + 5 - 5)[c],
                            epsilon = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 16, 16);
        assert_abs_diff_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::constant(16, 16, [0.3; 3]).unwrap();
        let b = Image::constant(16, 16, [0.7; 3]).unwrap();
        let (m1, m2) = (0.3, 0.7);
        let expect = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 14, 14);
        let b = random_image(&mut rng, 14, 14);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 12, 13);
        let b = random_image(&mut rng, 12, 13);
        let map = ssim_map(&a, &b).unwrap();
        let taps = gaussian_taps();
        // Direct per-window evaluation with border renormalization.
        for &(y, x) in &[(0usize, 0usize), (5, 6), (11, 12), (3, 0), (0, 9)] {
            let mut expect = 0.0;
            for c in 0..3 {
                let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                for dy in -5i64..=5 {
                    for dx in -5i64..=5 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy < 0 || yy >= 12 || xx < 0 || xx >= 13 {
                            continue;
                        }
                        let wgt = taps[(dy + 5) as usize] * taps[(dx + 5) as usize];
                        let va = a.pixel(yy as usize, xx as usize)[c];
                        let vb = b.pixel(yy as usize, xx as usize)[c];
                        wsum += wgt;
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                ma /= wsum;
                mb /= wsum;
                maa /= wsum;
                mbb /= wsum;
                mab /= wsum;
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                expect += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2) * 3.0);
            }
            assert_abs_diff_eq!(map[(y, x)], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 10, 10);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);

        let lo = Image::constant(10, 10, [0.2; 3]).unwrap();
        let hi = Image::constant(10, 10, [0.3; 3]).unwrap();
        assert_abs_diff_eq!(mse(&lo, &hi).unwrap(), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(psnr(&lo, &hi).unwrap(), 20.0, epsilon = 1e-9);

        let b = random_image(&mut rng, 10, 10);
        let e = mse(&a, &b).unwrap();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 10.0 * (1.0 / e).log10(), epsilon = 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean = Image::constant(16, 16, [0.5; 3]).unwrap();
        let mut last = f64::INFINITY;
        for level in 1..=5 {
            let amp = level as f64 * 0.05;
            let noisy = Image::new(clean.data().mapv(|v| {
                (v + (rng.random::<f64>() * 2.0 - 1.0) * amp).clamp(0.0, 1.0)
            }))
            .unwrap();
            let p = psnr(&clean, &noisy).unwrap();
            assert!(p < last, "psnr must fall as noise grows: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Quantized values survive the 8-bit round trip exactly.
        let img = Image::new(Array3::from_shape_fn((8, 12, 3), |_| {
            (rng.random::<u32>() % 256) as f64 / 255.0
        }))
        .unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn depth_png_marks_invalid_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let mut depth = Array2::from_elem((8, 8), 2.0);
        depth[(0, 0)] = 10.0;
        let mut valid = Array2::from_elem((8, 8), true);
        valid[(3, 3)] = false;
        let dm = DepthMap::new(depth, valid).unwrap();
        save_depth_png16(&dm, 10.0, &path).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.get_pixel(3, 3).0[0], 0);
        assert_eq!(img.get_pixel(0, 0).0[0], 65535);
        assert_eq!(img.get_pixel(5, 5).0[0], (2.0f64 / 10.0 * 65535.0).round() as u16);
    }
}
