//! Images, landmark sets, and the geometric operations used to build views.
//!
//! Normalized coordinates map to pixels corner-aligned: `x_px = x·(W−1)`.
//! Samples outside the image read as zero.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// A `[C×H×W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    /// Builds an image, clamping values into `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("image", "empty image"));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Image {
            data: Tensor::new(&[channels, height, width], data)?,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let [c, h, w] = *t.shape() else {
            return Err(Error::dim("image", format!("expected [C, H, W], got {:?}", t.shape())));
        };
        Image::new(c, h, w, t.into_data())
    }

    pub fn from_gray_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Image::new(1, height, width, pixels.iter().map(|p| *p as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn pixels(&self) -> &[f32] {
        self.data.data()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Applies `f` to every pixel value and clamps the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        let data = self.pixels().iter().map(|v| f(*v).clamp(0.0, 1.0)).collect();
        Image {
            data: Tensor::new(self.data.shape(), data).unwrap(),
        }
    }
}

/// Stacks same-sized images into `[N×C×H×W]`.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::dim("stack_images", "no images"))?;
    let shape = first.tensor().shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.pixels().len());
    for img in images {
        if img.tensor().shape() != shape.as_slice() {
            return Err(Error::dim(
                "stack_images",
                format!("{:?} vs {:?}", img.tensor().shape(), shape),
            ));
        }
        data.extend_from_slice(img.pixels());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// `R` landmark coordinates `[R×2]`, each `(x, y)` in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    coords: Tensor,
}

impl LandmarkSet {
    pub fn new(coords: Tensor) -> Result<Self> {
        match *coords.shape() {
            [_, 2] => Ok(LandmarkSet { coords }),
            _ => Err(Error::dim("landmarks", format!("expected [R, 2], got {:?}", coords.shape()))),
        }
    }

    pub fn from_points(points: &[[f32; 2]]) -> Self {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        LandmarkSet {
            coords: Tensor::new(&[points.len(), 2], data).unwrap(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f32; 2] {
        let d = self.coords.data();
        [d[2 * i], d[2 * i + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f32; 2]> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.coords
    }

    pub fn into_tensor(self) -> Tensor {
        self.coords
    }

    /// Rows `index` in the given order.
    pub fn select(&self, index: &[usize]) -> Result<LandmarkSet> {
        let mut pts = Vec::with_capacity(index.len());
        for &i in index {
            if i >= self.len() {
                return Err(Error::dim("landmarks", format!("index {i} of {}", self.len())));
            }
            pts.push(self.point(i));
        }
        Ok(LandmarkSet::from_points(&pts))
    }

    /// Mean pairwise Euclidean distance between landmarks.
    pub fn mean_pairwise_distance(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (self.point(i), self.point(j));
                total += ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64);
            }
        }
        total / (n * (n - 1) / 2) as f64
    }
}

/// Patches `[R×C×P×P]` sampled around landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub patches: Tensor,
    pub indices: Vec<usize>,
}

impl PatchStack {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape()[2]
    }

    /// Rows flattened to `[R × C·P·P]`.
    pub fn flattened(&self) -> Tensor {
        let r = self.len();
        let w = if r == 0 { 0 } else { self.patches.numel() / r };
        self.patches.clone().reshape(&[r, w]).unwrap()
    }
}

/// Bilinear sampling at continuous pixel positions `points[N×2]` (x, y).
/// Returns `[N×C]`; out-of-bounds neighbours contribute zero.
pub fn bilinear_sample(img: &Image, points: &Tensor) -> Result<Tensor> {
    let [n, 2] = *points.shape() else {
        return Err(Error::dim("bilinear_sample", format!("points {:?}", points.shape())));
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let (x, y) = (points.data()[2 * i], points.data()[2 * i + 1]);
        for ch in 0..c {
            out.push(kernels::bilinear(&img.pixels()[ch * h * w..(ch + 1) * h * w], h, w, x, y));
        }
    }
    Tensor::new(&[n, c], out)
}

/// Samples a `p×p` unit-spaced grid centred on every landmark.
pub fn extract_patches(img: &Image, lm: &LandmarkSet, p: usize) -> Result<PatchStack> {
    if p == 0 {
        return Err(Error::Parameter("patch size must be at least 1".into()));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let offs: Vec<f32> = kernels::patch_offsets(p).collect();
    let mut out = Vec::with_capacity(lm.len() * c * p * p);
    for [x, y] in lm.points() {
        let (cx, cy) = (kernels::to_pixel(x, w), kernels::to_pixel(y, h));
        for ch in 0..c {
            let plane = &img.pixels()[ch * h * w..(ch + 1) * h * w];
            for oy in &offs {
                for ox in &offs {
                    out.push(kernels::bilinear(plane, h, w, cx + ox, cy + oy));
                }
            }
        }
    }
    Ok(PatchStack {
        patches: Tensor::new(&[lm.len(), c, p, p], out)?,
        indices: (0..lm.len()).collect(),
    })
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// Resamples `bx` to an `out×out` image with bilinear interpolation.
pub fn crop_resize(img: &Image, bx: CropBox, out: usize) -> Result<Image> {
    let inside = |v: f32| (0.0..=1.0).contains(&v);
    if ![bx.x0, bx.y0, bx.x1, bx.y1].into_iter().all(inside) {
        return Err(Error::Parameter(format!("crop box {bx:?} outside the unit square")));
    }
    if !(bx.x1 > bx.x0 && bx.y1 > bx.y0) {
        return Err(Error::Parameter(format!("degenerate crop box {bx:?}")));
    }
    if out < 2 {
        return Err(Error::Parameter(format!("output size {out} below 2")));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let step = 1.0 / (out - 1) as f64;
    let coord = |lo: f32, hi: f32, i: usize, size: usize| -> f32 {
        let t = i as f64 * step;
        ((lo as f64 + (hi as f64 - lo as f64) * t) * (size - 1) as f64) as f32
    };
    let xs: Vec<f32> = (0..out).map(|i| coord(bx.x0, bx.x1, i, w)).collect();
    let ys: Vec<f32> = (0..out).map(|i| coord(bx.y0, bx.y1, i, h)).collect();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &img.pixels()[ch * h * w..(ch + 1) * h * w];
        for y in &ys {
            for x in &xs {
                data.push(kernels::bilinear(plane, h, w, *x, *y));
            }
        }
    }
    Image::new(c, out, out, data)
}

/// Mirrors columns.
pub fn hflip(img: &Image) -> Image {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let src = img.pixels();
    let mut data = Vec::with_capacity(src.len());
    for row in 0..c * h {
        data.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Image {
        data: Tensor::new(&[c, h, w], data).unwrap(),
    }
}

/// Centres of the non-overlapping `patch`-pixel grid, in normalized units.
pub fn grid_centers(size: usize, patch: usize) -> Result<LandmarkSet> {
    if patch == 0 || size % patch != 0 {
        return Err(Error::Config(format!(
            "image size {size} is not divisible by grid patch size {patch}"
        )));
    }
    let g = size / patch;
    let half = (patch as f32 - 1.0) / 2.0;
    let norm = (size - 1) as f32;
    let mut pts = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            pts.push([
                ((gx * patch) as f32 + half) / norm,
                ((gy * patch) as f32 + half) / norm,
            ]);
        }
    }
    Ok(LandmarkSet::from_points(&pts))
}

/// Non-overlapping integer crops `[G×C×P×P]` in row-major grid order.
pub fn grid_patches(img: &Image, patch: usize) -> Result<PatchStack> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by grid patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    let row = (ch * h + gy * patch + py) * w + gx * patch;
                    out.extend_from_slice(&img.pixels()[row..row + patch]);
                }
            }
        }
    }
    Ok(PatchStack {
        patches: Tensor::new(&[gh * gw, c, patch, patch], out)?,
        indices: (0..gh * gw).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        Image::new(1, h, w, data).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let img = Image::new(1, 2, 2, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let p = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.5, 0.5, -5.0, -5.0]).unwrap();
        let v = bilinear_sample(&img, &p).unwrap();
        assert_eq!(v.data()[0], img.at(0, 0, 1));
        assert!((v.data()[1] - 0.5).abs() < 1e-6);
        assert_eq!(v.data()[2], 0.0);
    }

    #[test]
    fn centred_patch_on_odd_image_is_integer_crop() {
        // W − 1 = 16 keeps the normalized centre exact.
        let img = ramp(17, 17);
        let lm = LandmarkSet::from_points(&[[0.5, 0.5]]);
        let ps = extract_patches(&img, &lm, 5).unwrap();
        for py in 0..5 {
            for px in 0..5 {
                let got = ps.patches.data()[py * 5 + px];
                assert_eq!(got.to_bits(), img.at(0, 6 + py, 6 + px).to_bits());
            }
        }
    }

    #[test]
    fn grid_centres_sample_integer_crops_exactly() {
        for (size, patch) in [(32, 4), (112, 8), (24, 3), (30, 5), (64, 16)] {
            let img = ramp(size, size);
            let sampled = extract_patches(&img, &grid_centers(size, patch).unwrap(), patch).unwrap();
            assert!(sampled.patches.bit_eq(&grid_patches(&img, patch).unwrap().patches), "{size}/{patch}");
        }
    }

    #[test]
    fn one_pixel_shift_moves_patch_by_one_column() {
        let img = ramp(17, 17);
        let a = extract_patches(&img, &LandmarkSet::from_points(&[[0.5, 0.5]]), 3).unwrap();
        let b = extract_patches(&img, &LandmarkSet::from_points(&[[9.0 / 16.0, 0.5]]), 3).unwrap();
        for py in 0..3 {
            for px in 0..2 {
                assert_eq!(b.patches.data()[py * 3 + px], a.patches.data()[py * 3 + px + 1]);
            }
        }
    }

    #[test]
    fn default_patch_stack_shape() {
        let img = ramp(112, 112);
        let lm = LandmarkSet::from_points(&vec![[0.3, 0.6]; 196]);
        let ps = extract_patches(&img, &lm, 8).unwrap();
        assert_eq!(ps.patches.shape(), &[196, 1, 8, 8]);
    }

    #[test]
    fn crop_resize_full_box_is_identity() {
        let img = ramp(23, 23);
        let out = crop_resize(&img, CropBox::FULL, 23).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) < 1e-6);
    }

    #[test]
    fn crop_resize_quadrant_of_block_pattern() {
        // 9×9 image, upper-left block covers columns/rows 0..=4.
        let mut data = vec![0.0; 81];
        for y in 0..9 {
            for x in 0..9 {
                data[y * 9 + x] = match (x <= 4, y <= 4) {
                    (true, true) => 0.2,
                    (false, true) => 0.4,
                    (true, false) => 0.6,
                    (false, false) => 0.8,
                };
            }
        }
        let img = Image::new(1, 9, 9, data).unwrap();
        let bx = CropBox {
            x0: 0.0,
            y0: 0.0,
            x1: 0.5,
            y1: 0.5,
        };
        let out = crop_resize(&img, bx, 6).unwrap();
        assert!(out.pixels().iter().all(|v| (*v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn crop_resize_rejects_degenerate_box() {
        let img = ramp(8, 8);
        let bx = CropBox {
            x0: 0.5,
            y0: 0.0,
            x1: 0.5,
            y1: 1.0,
        };
        assert!(matches!(crop_resize(&img, bx, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn view_sizes() {
        let img = ramp(112, 112);
        assert_eq!(crop_resize(&img, CropBox::FULL, 112).unwrap().width(), 112);
        assert_eq!(crop_resize(&img, CropBox::FULL, 48).unwrap().width(), 48);
    }

    #[test]
    fn hflip_moves_pixel_and_is_involution() {
        let mut data = vec![0.0; 20];
        data[6] = 1.0; // (x=1, y=1) in a 5-wide image
        let img = Image::new(1, 4, 5, data).unwrap();
        assert_eq!(hflip(&img).at(0, 1, 5 - 1 - 1), 1.0);
        let img2 = ramp(4, 5);
        assert!(hflip(&hflip(&img2)).tensor().bit_eq(img2.tensor()));
        let sym = Image::new(1, 1, 3, vec![0.1, 0.5, 0.1]).unwrap();
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn grid_cover_is_disjoint_and_complete() {
        let img = ramp(16, 16);
        let ps = grid_patches(&img, 8).unwrap();
        assert_eq!(ps.len(), 4);
        let mut seen: Vec<f32> = ps.patches.data().to_vec();
        let mut all: Vec<f32> = img.pixels().to_vec();
        seen.sort_by(f32::total_cmp);
        all.sort_by(f32::total_cmp);
        assert_eq!(seen, all);
        assert_eq!(grid_patches(&ramp(112, 112), 8).unwrap().len(), 196);
        assert_eq!(grid_patches(&ramp(48, 48), 8).unwrap().len(), 36);
        assert!(matches!(grid_patches(&ramp(20, 20), 8), Err(Error::Config(_))));
    }
}
