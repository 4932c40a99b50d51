//! Label rasters, binary masks and the pixel-level primitives the mask
//! generator is built from: class masks, connected components, square
//! dilation, sliding-window tiling and categorical resampling.
//!
//! Masks are stored on disk as 8-bit single-channel PNGs (0 background,
//! 255 foreground). Label maps are 8-bit single-channel PNGs of class ids.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unknown class id {value} at (x={x}, y={y})")]
    UnknownClassId { x: usize, y: usize, value: u8 },
    #[error("class id set is empty")]
    EmptyIdSet,
    #[error("window {window} does not fit in a {width}x{height} map")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("resampling needs a square input, got {width}x{height}")]
    NonSquareInput { width: usize, height: usize },
    #[error("invalid raster dimensions {width}x{height} for {len} pixels")]
    InvalidDimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("invalid tile spec: {0}")]
    InvalidTileSpec(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width.checked_mul(height) != Some(len) {
        return Err(RasterError::InvalidDimensions { width, height, len });
    }
    Ok(())
}

/// Dense grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, class_id: u8) -> Result<Self> {
        Self::new(width, height, vec![class_id; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class_id: u8) {
        self.pixels[y * self.width + x] = class_id;
    }

    /// First pixel (row-major) whose value is not a class of `tax`.
    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        match self.pixels.iter().position(|&v| !tax.has_class(v)) {
            Some(i) => Err(RasterError::UnknownClassId {
                x: i % self.width,
                y: i / self.width,
                value: self.pixels[i],
            }),
            None => Ok(()),
        }
    }

    pub fn crop(&self, rect: CropRect) -> Result<LabelMap> {
        if rect.x + rect.side > self.width || rect.y + rect.side > self.height {
            return Err(RasterError::WindowTooLarge {
                window: rect.side,
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(rect.side * rect.side);
        for y in rect.y..rect.y + rect.side {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + rect.x..row + rect.x + rect.side]);
        }
        LabelMap::new(rect.side, rect.side, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction");
        save_image(path, |p| img.save(p))
    }
}

/// Reads a single-channel 8-bit raster and checks every pixel against the
/// taxonomy's class ids.
pub fn load_label_map(path: &Path, tax: &Taxonomy) -> Result<LabelMap> {
    let img = open_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(RasterError::Decode {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit single-channel raster, found {:?}", img.color()),
        });
    }
    let gray = img.into_luma8();
    let map = LabelMap::new(gray.width() as usize, gray.height() as usize, gray.into_raw())?;
    map.validate(tax)?;
    Ok(map)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = reader.with_guessed_format().map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    reader.decode().map_err(|e| RasterError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn save_image<F>(path: &Path, save: F) -> Result<()>
where
    F: FnOnce(&Path) -> image::ImageResult<()>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| RasterError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    save(path).map_err(|e| RasterError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an RGB image (any decodable colour type is converted).
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open_image(path)?.into_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save_image(path, |p| img.save(p))
}

/// Row-major foreground flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask with the listed `(x, y)` pixels set.
    pub fn from_points(width: usize, height: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(width, height);
        for &(x, y) in points {
            m.set(x, y, true);
        }
        m
    }

    pub fn from_indices(width: usize, height: usize, indices: &[usize]) -> Self {
        let mut m = Self::empty(width, height);
        for &i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// Row-major indices of foreground pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { bits, ..*self })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect();
        Ok(BinaryMask { bits, ..*self })
    }

    /// `(|self ∩ other|, |self ∪ other|)`.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        self.same_dims(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        Ok((inter, union))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = self.to_gray();
        save_image(path, |p| img.save(p))
    }

    /// Any non-zero sample counts as foreground.
    pub fn load_png(path: &Path) -> Result<BinaryMask> {
        let img = open_image(path)?;
        if img.color() != ColorType::L8 {
            return Err(RasterError::Decode {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit single-channel mask, found {:?}", img.color()),
            });
        }
        let gray = img.into_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        BinaryMask::new(w, h, gray.into_raw().into_iter().map(|v| v != 0).collect())
    }
}

/// Foreground iff the pixel's class id is in `ids`. A multi-id set is the
/// union of the single-class masks.
pub fn class_mask(map: &LabelMap, ids: &BTreeSet<u8>) -> Result<BinaryMask> {
    if ids.is_empty() {
        return Err(RasterError::EmptyIdSet);
    }
    let mut lut = [false; 256];
    for &id in ids {
        lut[id as usize] = true;
    }
    Ok(BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.pixels.iter().map(|&v| lut[v as usize]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            4 => Some(Self::Four),
            8 => Some(Self::Eight),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
        }
    }
}

/// Connected regions of a mask. Each instance holds sorted row-major pixel
/// indices; instances are ordered by their smallest index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSet {
    pub instances: Vec<Vec<usize>>,
    pub connectivity: Connectivity,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    // Smaller index becomes the root so roots are region minima.
    if ra < rb {
        parent[rb] = ra;
    } else if rb < ra {
        parent[ra] = rb;
    }
}

/// Two-pass union-find labelling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> InstanceSet {
    let (w, h) = mask.dims();
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            if x > 0 && mask.bits[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if y > 0 {
                let up = i - w;
                if mask.bits[up] {
                    union(&mut parent, i, up);
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && mask.bits[up - 1] {
                        union(&mut parent, i, up - 1);
                    }
                    if x + 1 < w && mask.bits[up + 1] {
                        union(&mut parent, i, up + 1);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; w * h];
    let mut instances: Vec<Vec<usize>> = Vec::new();
    for i in 0..w * h {
        if !mask.bits[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = instances.len();
            instances.push(Vec::new());
        }
        instances[slot[root]].push(i);
    }
    InstanceSet {
        instances,
        connectivity,
    }
}

/// Square (Chebyshev) dilation: a pixel is set iff some source pixel lies
/// within `radius` along both axes. Separable running-count filter.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let mut horiz = vec![false; w * h];
    let mut prefix = vec![0usize; w.max(h) + 1];
    for y in 0..h {
        let row = &mask.bits[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x] as usize;
        }
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(w);
            horiz[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut bits = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + horiz[y * w + x] as usize;
        }
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius + 1).min(h);
            bits[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

/// Square crop window geometry: `window`-sized crops every `stride` pixels,
/// resampled to `output_side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub window: usize,
    pub stride: usize,
    pub output_side: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            window: 1200,
            stride: 600,
            output_side: 512,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(RasterError::InvalidTileSpec(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        if self.output_side == 0 {
            return Err(RasterError::InvalidTileSpec("output side must be positive".into()));
        }
        Ok(())
    }
}

/// Square crop at `(x, y)`; serialized as an `[x, y, side]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl From<[usize; 3]> for CropRect {
    fn from([x, y, side]: [usize; 3]) -> Self {
        Self { x, y, side }
    }
}

impl From<CropRect> for [usize; 3] {
    fn from(r: CropRect) -> Self {
        [r.x, r.y, r.side]
    }
}

/// Full windows only, row-major. Partial windows at the right and bottom
/// edges are dropped.
pub fn tile_crops(map_dims: (usize, usize), spec: &TileSpec) -> Result<Vec<CropRect>> {
    spec.validate()?;
    let (width, height) = map_dims;
    if spec.window > width || spec.window > height {
        return Err(RasterError::WindowTooLarge {
            window: spec.window,
            width,
            height,
        });
    }
    let nx = (width - spec.window) / spec.stride + 1;
    let ny = (height - spec.window) / spec.stride + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(CropRect {
                x: i * spec.stride,
                y: j * spec.stride,
                side: spec.window,
            });
        }
    }
    Ok(out)
}

/// Nearest-neighbour resampling of a square label map; output pixel
/// `(r, c)` takes source `(⌊r·n/out⌋, ⌊c·n/out⌋)`.
pub fn resample_labels(map: &LabelMap, out_side: usize) -> Result<LabelMap> {
    if map.width != map.height {
        return Err(RasterError::NonSquareInput {
            width: map.width,
            height: map.height,
        });
    }
    let n = map.width;
    if out_side == n {
        return Ok(map.clone());
    }
    let src: Vec<usize> = (0..out_side).map(|i| i * n / out_side).collect();
    let mut pixels = Vec::with_capacity(out_side * out_side);
    for &sr in &src {
        for &sc in &src {
            pixels.push(map.pixels[sr * n + sc]);
        }
    }
    LabelMap::new(out_side, out_side, pixels)
}

/// Box-average resampling of an RGB image to `out_side × out_side`, for
/// display copies of imagery.
pub fn resample_rgb(img: &RgbImage, out_side: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == out_side && h == out_side {
        return img.clone();
    }
    RgbImage::from_fn(out_side as u32, out_side as u32, |ox, oy| {
        let (ox, oy) = (ox as usize, oy as usize);
        let x0 = ox * w / out_side;
        let x1 = ((ox + 1) * w).div_ceil(out_side).max(x0 + 1);
        let y0 = oy * h / out_side;
        let y1 = ((oy + 1) * h).div_ceil(out_side).max(y0 + 1);
        let mut acc = [0u64; 3];
        for y in y0..y1 {
            for x in x0..x1 {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    acc[c] += p[c] as u64;
                }
            }
        }
        let n = ((x1 - x0) * (y1 - y0)) as u64;
        image::Rgb(acc.map(|a| ((a + n / 2) / n) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
        let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
        BinaryMask::new(w, h, bits).unwrap()
    }

    #[test]
    fn class_mask_membership() {
        let map = LabelMap::new(2, 2, vec![2, 1, 1, 3]).unwrap();
        let m = class_mask(&map, &BTreeSet::from([2, 3])).unwrap();
        assert_eq!(m.bits(), &[true, false, false, true]);
        assert!(matches!(
            class_mask(&map, &BTreeSet::new()),
            Err(RasterError::EmptyIdSet)
        ));
    }

    #[test]
    fn class_mask_union_matches_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pixels = (0..64 * 64).map(|_| rng.random_range(0..6u8)).collect();
            let map = LabelMap::new(64, 64, pixels).unwrap();
            let a = class_mask(&map, &BTreeSet::from([1])).unwrap();
            let b = class_mask(&map, &BTreeSet::from([4])).unwrap();
            let ab = class_mask(&map, &BTreeSet::from([1, 4])).unwrap();
            assert_eq!(ab, a.or(&b).unwrap());
        }
    }

    #[test]
    fn components_four_vs_eight() {
        let m = BinaryMask::from_points(4, 4, &[(0, 0), (1, 0), (3, 3)]);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 2);

        let diag = BinaryMask::from_points(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&diag, Connectivity::Eight).len(), 1);
        assert_eq!(connected_components(&diag, Connectivity::Four).len(), 2);
        assert!(connected_components(&BinaryMask::empty(3, 3), Connectivity::Eight).is_empty());
    }

    #[test]
    fn components_ordered_by_min_index() {
        // A U-shape whose right arm starts before its left arm closes.
        let m = BinaryMask::from_points(
            5,
            3,
            &[(0, 0), (4, 0), (0, 1), (4, 1), (0, 2), (1, 2), (2, 2), (3, 2), (4, 2), (2, 0)],
        );
        let set = connected_components(&m, Connectivity::Four);
        assert_eq!(set.len(), 2);
        assert_eq!(set.instances[0][0], 0);
        assert_eq!(set.instances[1], vec![2]);
        assert!(set.instances[0].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dilate_single_pixel() {
        let m = BinaryMask::from_points(5, 5, &[(2, 2)]);
        let d = dilate(&m, 1);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(d.get(x, y), (1..=3).contains(&x) && (1..=3).contains(&y));
            }
        }
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn dilate_monotone_and_extensive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_mask(&mut rng, 20, 17, 0.05);
            let mut prev = m.clone();
            for r in 0..4 {
                let d = dilate(&m, r);
                assert!(m.is_subset_of(&d));
                assert!(prev.is_subset_of(&d));
                prev = d;
            }
        }
    }

    #[test]
    fn tiling_counts() {
        let spec = TileSpec::default();
        let crops = tile_crops((5616, 3744), &spec).unwrap();
        assert_eq!(crops.len(), 40);
        assert!(crops.iter().all(|c| c.x + c.side <= 5616 && c.y + c.side <= 3744));
        assert_eq!(crops[1], CropRect { x: 600, y: 0, side: 1200 });
        assert_eq!(tile_crops((1200, 1200), &spec).unwrap().len(), 1);
        assert!(matches!(
            tile_crops((1000, 1000), &spec),
            Err(RasterError::WindowTooLarge { .. })
        ));
        let bad = TileSpec { stride: 0, ..spec };
        assert!(tile_crops((5000, 5000), &bad).is_err());
    }

    #[test]
    fn tiling_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let window = rng.random_range(1..50);
            let stride = rng.random_range(1..=window);
            let w = rng.random_range(window..200);
            let h = rng.random_range(window..200);
            let spec = TileSpec { window, stride, output_side: 8 };
            let crops = tile_crops((w, h), &spec).unwrap();
            let per_axis = |d: usize| (0..).take_while(|k| k * stride + window <= d).count();
            assert_eq!(crops.len(), per_axis(w) * per_axis(h));
        }
    }

    #[test]
    fn resample_nearest() {
        let map = LabelMap::filled(4, 4, 7).unwrap();
        assert_eq!(resample_labels(&map, 2).unwrap(), LabelMap::filled(2, 2, 7).unwrap());

        let small = LabelMap::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(resample_labels(&small, 2).unwrap(), small);

        let pixels = (0..1200 * 1200).map(|i| ((i / 1200) * 7 + (i % 1200) * 13) as u8).collect();
        let big = LabelMap::new(1200, 1200, pixels).unwrap();
        let out = resample_labels(&big, 512).unwrap();
        for (r, c) in [(0, 0), (1, 1), (100, 311), (511, 511), (256, 3)] {
            let (sr, sc) = (r * 1200 / 512, c * 1200 / 512);
            assert_eq!(out.get(c, r), big.get(sc, sr));
        }

        let rect = LabelMap::filled(3, 2, 0).unwrap();
        assert!(matches!(
            resample_labels(&rect, 2),
            Err(RasterError::NonSquareInput { .. })
        ));
    }

    #[test]
    fn resample_rgb_box_average() {
        let img = RgbImage::from_fn(4, 4, |x, _| image::Rgb([if x < 2 { 0 } else { 200 }, 10, 10]));
        let out = resample_rgb(&img, 2);
        assert_eq!(out.get_pixel(0, 0).0, [0, 10, 10]);
        assert_eq!(out.get_pixel(1, 1).0, [200, 10, 10]);
    }

    #[test]
    fn crop_extracts_window() {
        let map = LabelMap::new(3, 3, (0..9).collect()).unwrap();
        let c = map.crop(CropRect { x: 1, y: 1, side: 2 }).unwrap();
        assert_eq!(c.pixels(), &[4, 5, 7, 8]);
        assert!(map.crop(CropRect { x: 2, y: 0, side: 2 }).is_err());
    }

    #[test]
    fn crop_rect_serializes_as_triple() {
        let r = CropRect { x: 600, y: 1200, side: 1200 };
        assert_eq!(serde_json::to_string(&r).unwrap(), "[600,1200,1200]");
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_points(3, 2, &[(0, 0), (2, 1)]);
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load_png(&path).unwrap(), m);
        let raw = image::open(&path).unwrap().into_luma8();
        assert_eq!(raw.get_pixel(0, 0).0, [255]);
        assert_eq!(raw.get_pixel(1, 0).0, [0]);
    }
}
