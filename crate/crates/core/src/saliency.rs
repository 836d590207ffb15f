//! Human saliency maps: aggregation of annotator masks, resizing to the
//! CAM resolution, and on-disk artifacts.
//!
//! Aggregation sums the binary masks of correctly answered trials with
//! equal weight, blurs the count map with a Gaussian (zero padding outside
//! the image, kernel truncated at the configured radius and renormalized),
//! then min–max scales to `[0, 1]`. A constant count map scales to all
//! zeros.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_resample, Grid};

/// One annotator's painted region for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMask {
    pub image_id: String,
    pub annotator_id: String,
    /// Binary grid, values in `{0, 1}`.
    pub mask: Grid<u8>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSaliencyMap {
    pub image_id: String,
    pub grid: Grid<f32>,
    pub source_count: usize,
}

impl HumanSaliencyMap {
    pub fn new(image_id: impl Into<String>, grid: Grid<f32>, source_count: usize) -> Result<Self> {
        if grid.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("saliency values must lie in [0, 1]"));
        }
        Ok(HumanSaliencyMap {
            image_id: image_id.into(),
            grid,
            source_count,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyBuildConfig {
    pub blur_sigma: f64,
    /// Kernel radius in pixels; `None` means `ceil(3σ)`.
    pub blur_kernel_radius: Option<usize>,
    pub include_incorrect: bool,
}

impl Default for SaliencyBuildConfig {
    fn default() -> Self {
        SaliencyBuildConfig {
            blur_sigma: 5.0,
            blur_kernel_radius: None,
            include_incorrect: false,
        }
    }
}

impl SaliencyBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::validation("blur_sigma must be a finite value >= 0"));
        }
        if self.blur_sigma > 0.0 && self.blur_kernel_radius == Some(0) {
            return Err(Error::validation("blur_kernel_radius must be >= 1 when blurring"));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.blur_kernel_radius
            .unwrap_or_else(|| (3.0 * self.blur_sigma).ceil() as usize)
            .max(1)
    }
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(src: &Grid<f64>, sigma: f64, radius: usize) -> Grid<f64> {
    let (h, w) = src.dims();
    let taps = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let mut tmp = Grid::<f64>::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += t * src.get(y, sx as usize);
                }
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Grid::<f64>::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += t * tmp.get(sy as usize, x);
                }
            }
            out.set(y, x, acc);
        }
    }
    out
}

/// Min–max scale to `[0, 1]`; constant inputs map to all zeros.
pub fn min_max_scale(src: &Grid<f64>) -> Grid<f32> {
    let (lo, hi) = src
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if src.is_empty() || !(hi > lo) {
        return Grid::zeros(src.height(), src.width());
    }
    let range = hi - lo;
    src.map(|v| ((v - lo) / range) as f32)
}

/// Combine the masks of one image into a human saliency map.
///
/// An empty list yields an empty `0 × 0` map with no image id.
pub fn aggregate(masks: &[AnnotatorMask], cfg: &SaliencyBuildConfig) -> Result<HumanSaliencyMap> {
    cfg.validate()?;
    let Some(first) = masks.first() else {
        return Ok(HumanSaliencyMap {
            image_id: String::new(),
            grid: Grid::zeros(0, 0),
            source_count: 0,
        });
    };
    let dims = first.mask.dims();
    for m in masks {
        if m.image_id != first.image_id {
            return Err(Error::validation(format!(
                "masks for several images in one aggregation: {:?} and {:?}",
                first.image_id, m.image_id
            )));
        }
        if m.mask.dims() != dims {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?}", m.mask.dims())));
        }
        if m.mask.as_slice().iter().any(|&v| v > 1) {
            return Err(Error::validation(format!(
                "mask from annotator {:?} is not binary",
                m.annotator_id
            )));
        }
    }

    let mut counts = Grid::<f64>::zeros(dims.0, dims.1);
    let mut used = 0;
    for m in masks.iter().filter(|m| m.correct || cfg.include_incorrect) {
        used += 1;
        for (acc, &v) in counts.as_mut_slice().iter_mut().zip(m.mask.as_slice()) {
            *acc += v as f64;
        }
    }
    let blurred = if cfg.blur_sigma > 0.0 {
        gaussian_blur(&counts, cfg.blur_sigma, cfg.radius())
    } else {
        counts
    };
    Ok(HumanSaliencyMap {
        image_id: first.image_id.clone(),
        grid: min_max_scale(&blurred),
        source_count: used,
    })
}

/// Area-average downsample to the CAM resolution. Values are not
/// re-normalized afterwards.
pub fn resize_to_cam(map: &HumanSaliencyMap, cam_h: usize, cam_w: usize) -> Result<HumanSaliencyMap> {
    let (h, w) = map.grid.dims();
    if cam_h == 0 || cam_w == 0 {
        return Err(Error::validation("CAM dimensions must be >= 1"));
    }
    if cam_h > h || cam_w > w {
        return Err(Error::validation(format!(
            "refusing to upsample saliency {h}x{w} to {cam_h}x{cam_w}"
        )));
    }
    let grid = if (cam_h, cam_w) == (h, w) {
        map.grid.clone()
    } else {
        area_resample(&map.grid, (0.0, h as f64), (0.0, w as f64), cam_h, cam_w)
            .map(|v| v.clamp(0.0, 1.0))
    };
    Ok(HumanSaliencyMap {
        image_id: map.image_id.clone(),
        grid,
        source_count: map.source_count,
    })
}

/// 8-bit quantization used for the PNG artifact (half-up rounding).
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Serialize, Deserialize)]
struct FloatRecordHeader {
    image_id: String,
    height: usize,
    width: usize,
    dtype: String,
}

/// Write `map` as a float record: one JSON header line followed by
/// `height · width` little-endian `f32` values, row-major.
pub fn write_float_record(map: &HumanSaliencyMap, path: &Path) -> Result<()> {
    let header = FloatRecordHeader {
        image_id: map.image_id.clone(),
        height: map.grid.height(),
        width: map.grid.width(),
        dtype: "f32le".into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in map.grid.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_float_record(path: &Path) -> Result<HumanSaliencyMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: FloatRecordHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32le" {
        return Err(Error::validation(format!("unsupported dtype {:?}", header.dtype)));
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let n = header.height * header.width;
    if raw.len() != n * 4 {
        return Err(Error::shape(format!("{} payload bytes", n * 4), format!("{} bytes", raw.len())));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HumanSaliencyMap::new(
        header.image_id,
        Grid::from_vec(header.height, header.width, data)?,
        0,
    )
}

pub fn write_png(map: &HumanSaliencyMap, path: &Path) -> Result<()> {
    let (h, w) = map.grid.dims();
    let pixels: Vec<u8> = map.grid.as_slice().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::validation("saliency grid has inconsistent size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a saliency map from either a float record or an 8-bit PNG.
pub fn load_saliency(path: &Path) -> Result<HumanSaliencyMap> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return read_float_record(path);
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&p| p as f32 / 255.0).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HumanSaliencyMap::new(id, Grid::from_vec(h as usize, w as usize, data)?, 0)
}

/// Persisted pair of artifacts for one map.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedSaliency {
    pub png: PathBuf,
    pub float_record: PathBuf,
}

/// Write `<dir>/<image_id>.png` and `<dir>/<image_id>.sal`.
pub fn export_saliency(map: &HumanSaliencyMap, dir: &Path) -> Result<ExportedSaliency> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{}.png", map.image_id));
    let float_record = dir.join(format!("{}.sal", map.image_id));
    write_png(map, &png)?;
    write_float_record(map, &float_record)?;
    Ok(ExportedSaliency { png, float_record })
}

/// Read a binary mask from a PNG; any nonzero pixel counts as painted.
pub fn mask_from_png(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(
        h as usize,
        w as usize,
        img.as_raw().iter().map(|&p| u8::from(p != 0)).collect(),
    )
}

/// Group masks by image id (sorted) and aggregate each group.
pub fn aggregate_all(masks: Vec<AnnotatorMask>, cfg: &SaliencyBuildConfig) -> Result<Vec<HumanSaliencyMap>> {
    let mut groups: std::collections::BTreeMap<String, Vec<AnnotatorMask>> = Default::default();
    for m in masks {
        groups.entry(m.image_id.clone()).or_default().push(m);
    }
    groups.values().map(|g| aggregate(g, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(id: &str, h: usize, w: usize, f: impl Fn(usize, usize) -> bool, correct: bool) -> AnnotatorMask {
        AnnotatorMask {
            image_id: id.into(),
            annotator_id: "a".into(),
            mask: Grid::from_fn(h, w, |y, x| u8::from(f(y, x))),
            correct,
        }
    }

    fn no_blur() -> SaliencyBuildConfig {
        SaliencyBuildConfig {
            blur_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn all_zero_mask_gives_zero_map() {
        let m = mask("img", 4, 4, |_, _| false, true);
        let out = aggregate(&[m], &no_blur()).unwrap();
        assert_eq!(out.source_count, 1);
        assert!(out.grid.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_and_full_masks() {
        let a = mask("img", 4, 4, |y, _| y < 2, true);
        let b = mask("img", 4, 4, |_, _| true, true);
        let out = aggregate(&[a, b], &no_blur()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                // Sums are 2 on top and 1 below; min–max sends the minimum to 0.
                let expected = if y < 2 { 1.0 } else { 0.0 };
                assert_eq!(out.grid.get(y, x), expected);
            }
        }
    }

    #[test]
    fn incorrect_masks_filtered_unless_requested() {
        let a = mask("img", 2, 2, |y, x| y == 0 && x == 0, true);
        let b = mask("img", 2, 2, |y, x| y == 1 && x == 1, false);
        let out = aggregate(&[a.clone(), b.clone()], &no_blur()).unwrap();
        assert_eq!(out.source_count, 1);
        assert_eq!(out.grid.get(1, 1), 0.0);
        let cfg = SaliencyBuildConfig {
            include_incorrect: true,
            ..no_blur()
        };
        let out = aggregate(&[a, b], &cfg).unwrap();
        assert_eq!(out.source_count, 2);
        assert_eq!(out.grid.get(1, 1), 1.0);
    }

    #[test]
    fn rejects_mixed_images_and_dims() {
        let a = mask("x", 2, 2, |_, _| true, true);
        let b = mask("y", 2, 2, |_, _| true, true);
        assert!(aggregate(&[a.clone(), b], &no_blur()).is_err());
        let c = mask("x", 3, 2, |_, _| true, true);
        assert!(matches!(aggregate(&[a, c], &no_blur()), Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_list_is_accepted() {
        let out = aggregate(&[], &SaliencyBuildConfig::default()).unwrap();
        assert_eq!(out.source_count, 0);
        assert!(out.grid.is_empty());
    }

    #[test]
    fn blurred_blob_peaks_at_one_inside() {
        let blob = |y: usize, x: usize| (12..20).contains(&y) && (10..22).contains(&x);
        let a = mask("img", 32, 32, blob, true);
        let out = aggregate(&[a.clone(), a], &SaliencyBuildConfig::default()).unwrap();
        let (lo, hi) = out.grid.min_max().unwrap();
        assert!(lo >= 0.0);
        assert_eq!(hi, 1.0);
        let argmax = out.grid.as_slice().iter().position(|&v| v == 1.0).unwrap();
        assert!(blob(argmax / 32, argmax % 32));
    }

    #[test]
    fn blur_matches_dense_convolution() {
        // Direct 2-D convolution with the outer-product kernel, zero padded.
        let src = Grid::from_fn(9, 11, |y, x| ((y * 7 + x * 3) % 5) as f64);
        let (sigma, r) = (1.3, 4usize);
        let k = gaussian_kernel(sigma, r);
        let blurred = gaussian_blur(&src, sigma, r);
        for y in 0..9isize {
            for x in 0..11isize {
                let mut acc = 0.0;
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let (sy, sx) = (y + dy, x + dx);
                        if (0..9).contains(&sy) && (0..11).contains(&sx) {
                            acc += k[(dy + r as isize) as usize]
                                * k[(dx + r as isize) as usize]
                                * src.get(sy as usize, sx as usize);
                        }
                    }
                }
                assert!((acc - blurred.get(y as usize, x as usize)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_constant_and_diagonal() {
        let constant = HumanSaliencyMap::new("c", Grid::filled(4, 4, 0.7f32), 1).unwrap();
        let out = resize_to_cam(&constant, 2, 2).unwrap();
        assert!(out.grid.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-7));

        let diag = HumanSaliencyMap::new("d", Grid::from_fn(4, 4, |y, x| if y == x { 1.0 } else { 0.0 }), 1).unwrap();
        let out = resize_to_cam(&diag, 2, 2).unwrap();
        assert_eq!(out.grid.as_slice(), &[0.5, 0.0, 0.0, 0.5]);

        let same = resize_to_cam(&out, 2, 2).unwrap();
        assert_eq!(same.grid, out.grid);
    }

    #[test]
    fn resize_rejects_upsampling() {
        let m = HumanSaliencyMap::new("u", Grid::filled(2, 2, 0.0f32), 0).unwrap();
        assert!(resize_to_cam(&m, 3, 2).is_err());
        assert!(resize_to_cam(&m, 0, 1).is_err());
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::from_fn(3, 5, |y, x| (y * 5 + x) as f32 / 14.0);
        let map = HumanSaliencyMap::new("face_01", grid, 2).unwrap();
        let paths = export_saliency(&map, dir.path()).unwrap();
        let back = read_float_record(&paths.float_record).unwrap();
        assert_eq!(back.image_id, "face_01");
        let bits = |g: &Grid<f32>| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.grid), bits(&map.grid));

        let png = image::open(&paths.png).unwrap().to_luma8();
        assert_eq!(png.get_pixel(0, 0).0[0], 0);
        assert_eq!(png.get_pixel(4, 2).0[0], 255);
    }

    #[test]
    fn zero_map_png_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let map = HumanSaliencyMap::new("z", Grid::zeros(4, 6), 0).unwrap();
        let paths = export_saliency(&map, dir.path()).unwrap();
        let png = image::open(&paths.png).unwrap().to_luma8();
        assert!(png.as_raw().iter().all(|&p| p == 0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let map = HumanSaliencyMap::new("z", Grid::zeros(2, 2), 0).unwrap();
        let err = write_float_record(&map, Path::new("/nonexistent/dir/z.sal")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
