//! Face crops at the network input geometry, with saliency maps cropped and
//! resized identically, plus dataset manifests over labeled directories.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_resample, Grid};
use crate::jsonl;
use crate::saliency::{load_saliency, HumanSaliencyMap};
use crate::tensor::Tensor3;

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 224;

/// Uniform expansion on every side, in units of the box extent.
pub const BOX_MARGIN: f64 = 0.20;
/// Extra expansion on the top (forehead) side, in units of box height.
pub const FOREHEAD_MARGIN: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real = 0,
    Synthetic = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Synthetic),
            _ => Err(Error::validation(format!("label index {i} is not binary"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "synthetic" | "fake" => Ok(Label::Synthetic),
            other => Err(Error::validation(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    ExternalDetector,
    ProvidedFile,
    FullImageFallback,
}

/// Face box in source pixel coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub source: BoxSource,
}

impl FaceBox {
    pub fn full_image(img_h: usize, img_w: usize) -> Self {
        FaceBox {
            x0: 0.0,
            y0: 0.0,
            x1: img_w as f64,
            y1: img_h as f64,
            source: BoxSource::FullImageFallback,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    fn check(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || !(self.x1 > self.x0) || !(self.y1 > self.y0) {
            return Err(Error::validation(format!("degenerate face box {self:?}")));
        }
        Ok(())
    }

    fn clamped(self, img_h: usize, img_w: usize) -> Self {
        FaceBox {
            x0: self.x0.clamp(0.0, img_w as f64),
            y0: self.y0.clamp(0.0, img_h as f64),
            x1: self.x1.clamp(0.0, img_w as f64),
            y1: self.y1.clamp(0.0, img_h as f64),
            ..self
        }
    }
}

/// Box sidecar file: `{image_id, x0, y0, x1, y1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSidecar {
    pub image_id: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Grow the box by 20% of its width on the left and right, 20% of its
/// height at the bottom and 50% of its height at the top, then clamp.
pub fn expand_box(face: FaceBox, img_h: usize, img_w: usize) -> Result<FaceBox> {
    face.check()?;
    let (w, h) = (face.width(), face.height());
    let grown = FaceBox {
        x0: face.x0 - BOX_MARGIN * w,
        x1: face.x1 + BOX_MARGIN * w,
        y0: face.y0 - (BOX_MARGIN + FOREHEAD_MARGIN) * h,
        y1: face.y1 + BOX_MARGIN * h,
        source: face.source,
    }
    .clamped(img_h, img_w);
    grown.check()?;
    Ok(grown)
}

/// A preprocessed sample ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image_id: String,
    /// `3 × H × W`, values in `[0, 1]`.
    pub pixels: Tensor3,
    pub label: Label,
    /// Registered to `pixels`.
    pub saliency: Option<HumanSaliencyMap>,
}

/// Load an image as a `3 × H × W` tensor scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor3> {
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            other => Error::Image {
                path: path.to_path_buf(),
                source: other,
            },
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Bilinear sample of the box region onto an `out × out` grid (pixel-center
/// aligned, edge-clamped).
fn bilinear_crop(image: &Tensor3, face: &FaceBox, out: usize) -> Tensor3 {
    let (h, w) = (image.height, image.width);
    let sy = face.height() / out as f64;
    let sx = face.width() / out as f64;
    let coords = |o: usize, start: f64, scale: f64, len: usize| {
        let s = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(|o| coords(o, face.y0, sy, h)).collect();
    let xs: Vec<_> = (0..out).map(|o| coords(o, face.x0, sx, w)).collect();
    let mut t = Tensor3::zeros(image.channels, out, out);
    for c in 0..image.channels {
        let src = image.plane(c);
        let dst = t.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out + ox] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// Crop image and saliency with the same box and resize both to
/// `INPUT_SIZE × INPUT_SIZE` (bilinear for pixels, area average for
/// saliency).
pub fn crop_resize(
    image_id: &str,
    image: &Tensor3,
    face: &FaceBox,
    saliency: Option<&HumanSaliencyMap>,
    label: Label,
) -> Result<LabeledSample> {
    crop_resize_to(image_id, image, face, saliency, label, INPUT_SIZE)
}

pub fn crop_resize_to(
    image_id: &str,
    image: &Tensor3,
    face: &FaceBox,
    saliency: Option<&HumanSaliencyMap>,
    label: Label,
    size: usize,
) -> Result<LabeledSample> {
    face.check()?;
    if image.channels != 3 || image.height == 0 || image.width == 0 {
        return Err(Error::shape("3-channel image", format!("{:?}", image.shape())));
    }
    let face = face.clamped(image.height, image.width);
    face.check()?;
    let saliency = match saliency {
        Some(map) => {
            if map.grid.dims() != (image.height, image.width) {
                return Err(Error::shape(
                    format!("saliency {}x{}", image.height, image.width),
                    format!("{:?}", map.grid.dims()),
                ));
            }
            let grid = area_resample(&map.grid, (face.y0, face.y1), (face.x0, face.x1), size, size)
                .map(|v| v.clamp(0.0, 1.0));
            Some(HumanSaliencyMap::new(map.image_id.clone(), grid, map.source_count)?)
        }
        None => None,
    };
    Ok(LabeledSample {
        image_id: image_id.to_string(),
        pixels: bilinear_crop(image, &face, size),
        label,
        saliency,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<PathBuf>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub face_box: Option<PathBuf>,
    pub split: Split,
    pub source_tag: String,
}

impl ManifestEntry {
    pub fn image_id(&self) -> String {
        file_stem(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub source_tag: String,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.entries)
    }

    /// Read a manifest; split and source tag come from the first entry.
    pub fn read(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = jsonl::read(path)?;
        let (split, source_tag) = entries
            .first()
            .map(|e| (e.split, e.source_tag.clone()))
            .unwrap_or((Split::Train, String::new()));
        Ok(DatasetManifest {
            entries,
            split,
            source_tag,
        })
    }
}

/// A directory of images sharing one label, with optional sidecar dirs.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDir {
    pub images: PathBuf,
    pub label: Label,
    pub saliency: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    pub exclusions: Vec<Exclusion>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn find_sidecar(dir: &Path, stem: &str, extensions: &[&str]) -> Option<PathBuf> {
    extensions
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Scan labeled directories into a manifest. Entries are sorted by path;
/// files that cannot be decoded are reported, not silently dropped.
pub fn build_manifest(dirs: &[LabeledDir], split: Split, source_tag: &str) -> Result<ManifestBuild> {
    let mut entries = Vec::new();
    let mut exclusions = Vec::new();
    for dir in dirs {
        let listing = fs::read_dir(&dir.images).map_err(|e| Error::io(&dir.images, e))?;
        let mut files: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("no images found in {}", dir.images.display());
        }
        for path in files {
            if let Err(e) = image::image_dimensions(&path) {
                exclusions.push(Exclusion {
                    path,
                    reason: e.to_string(),
                });
                continue;
            }
            let stem = file_stem(&path);
            entries.push(ManifestEntry {
                saliency: dir.saliency.as_deref().and_then(|d| find_sidecar(d, &stem, &["sal", "png"])),
                face_box: dir.boxes.as_deref().and_then(|d| find_sidecar(d, &stem, &["json"])),
                path,
                label: dir.label,
                split,
                source_tag: source_tag.to_string(),
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(ManifestBuild {
        manifest: DatasetManifest {
            entries,
            split,
            source_tag: source_tag.to_string(),
        },
        exclusions,
    })
}

pub fn read_box_sidecar(path: &Path) -> Result<FaceBox> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let b: BoxSidecar = serde_json::from_str(&text)?;
    Ok(FaceBox {
        x0: b.x0,
        y0: b.y0,
        x1: b.x1,
        y1: b.y1,
        source: BoxSource::ProvidedFile,
    })
}

/// Load, crop and resize one manifest entry to `size × size`. Sidecar boxes
/// are expanded; without one the whole frame is used.
pub fn load_entry(entry: &ManifestEntry, size: usize) -> Result<LabeledSample> {
    let image = load_image(&entry.path)?;
    let face = match &entry.face_box {
        Some(p) => expand_box(read_box_sidecar(p)?, image.height, image.width)?,
        None => FaceBox::full_image(image.height, image.width),
    };
    let saliency = entry.saliency.as_deref().map(load_saliency).transpose()?;
    crop_resize_to(&entry.image_id(), &image, &face, saliency.as_ref(), entry.label, size)
}

/// Write a `3 × H × W` (or single-channel gray) tensor in `[0, 1]` as an
/// 8-bit RGB PNG.
pub fn save_image(pixels: &Tensor3, path: &Path) -> Result<()> {
    let (h, w) = (pixels.height, pixels.width);
    if pixels.channels != 1 && pixels.channels != 3 {
        return Err(Error::shape("1 or 3 channels", format!("{} channels", pixels.channels)));
    }
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            let c = c.min(pixels.channels - 1);
            raw.push(crate::saliency::quantize(pixels.data[c * h * w + i] as f32));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::validation("pixel buffer has inconsistent size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Convenience for tests and tools: a grid from a closure, as a saliency map.
pub fn saliency_from_fn(id: &str, h: usize, w: usize, f: impl FnMut(usize, usize) -> f32) -> Result<HumanSaliencyMap> {
    HumanSaliencyMap::new(id, Grid::from_fn(h, w, f), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> FaceBox {
        FaceBox {
            x0,
            y0,
            x1,
            y1,
            source: BoxSource::ProvidedFile,
        }
    }

    fn corners(b: FaceBox) -> (f64, f64, f64, f64) {
        (b.x0, b.y0, b.x1, b.y1)
    }

    #[test]
    fn expand_interior_box() {
        let out = expand_box(bx(100.0, 100.0, 200.0, 200.0), 1000, 1000).unwrap();
        assert_eq!(corners(out), (80.0, 50.0, 220.0, 220.0));
    }

    #[test]
    fn expand_clamps_at_top() {
        let out = expand_box(bx(100.0, 0.0, 200.0, 100.0), 1000, 1000).unwrap();
        assert_eq!(corners(out), (80.0, 0.0, 220.0, 120.0));
    }

    #[test]
    fn expand_full_image_unchanged() {
        let out = expand_box(FaceBox::full_image(300, 400), 300, 400).unwrap();
        assert_eq!(corners(out), (0.0, 0.0, 400.0, 300.0));
    }

    #[test]
    fn expand_rejects_degenerate() {
        assert!(expand_box(bx(5.0, 5.0, 5.0, 9.0), 10, 10).is_err());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor3::from_vec(3, 50, 70, vec![0.4; 3 * 50 * 70]).unwrap();
        let sal = saliency_from_fn("s", 50, 70, |_, _| 1.0).unwrap();
        let out = crop_resize("g", &img, &bx(3.0, 7.0, 61.0, 44.0), Some(&sal), Label::Real).unwrap();
        assert_eq!(out.pixels.shape(), [3, INPUT_SIZE, INPUT_SIZE]);
        assert!(out.pixels.data.iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let s = out.saliency.unwrap();
        assert_eq!(s.grid.dims(), (INPUT_SIZE, INPUT_SIZE));
        assert!(s.grid.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn block_pattern_halves_exactly() {
        // 448x448 with 2x2 blocks: each output pixel is the mean of one block.
        let value = |y: usize, x: usize| ((y * 31 + x * 17) % 11) as f64 / 10.0;
        let mut img = Tensor3::zeros(3, 448, 448);
        for c in 0..3 {
            for y in 0..448 {
                for x in 0..448 {
                    img.data[(c * 448 + y) * 448 + x] = value(y, x) * (c as f64 + 1.0) / 3.0;
                }
            }
        }
        let out = crop_resize("b", &img, &FaceBox::full_image(448, 448), None, Label::Synthetic).unwrap();
        for &(oy, ox) in &[(0usize, 0usize), (10, 200), (223, 223), (117, 5)] {
            for c in 0..3 {
                let s = (c as f64 + 1.0) / 3.0;
                let expect = s
                    * (value(2 * oy, 2 * ox)
                        + value(2 * oy, 2 * ox + 1)
                        + value(2 * oy + 1, 2 * ox)
                        + value(2 * oy + 1, 2 * ox + 1))
                    / 4.0;
                assert!((out.pixels.at(c, oy, ox) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saliency_dimension_mismatch_rejected() {
        let img = Tensor3::zeros(3, 10, 10);
        let sal = saliency_from_fn("s", 10, 12, |_, _| 0.0).unwrap();
        let err = crop_resize("x", &img, &FaceBox::full_image(10, 10), Some(&sal), Label::Real).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image(Path::new("/definitely/not/here.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    #[test]
    fn label_parsing() {
        assert_eq!("real".parse::<Label>().unwrap(), Label::Real);
        assert_eq!("synthetic".parse::<Label>().unwrap(), Label::Synthetic);
        assert!("maybe".parse::<Label>().is_err());
        assert!(Label::from_index(2).is_err());
    }
}
