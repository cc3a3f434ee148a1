//! Region cropping, multilevel HoG energy channels and the LDA projection.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AnglePair;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("landmark {0:?} lies outside the image")]
    LandmarkOutside([f64; 2]),
    #[error("interocular distance {0:.2} px is below the 4 px minimum")]
    DegenerateIod(f64),
    #[error("image {h}x{w} is smaller than the {cell} px cell")]
    TooSmall { h: usize, w: usize, cell: usize },
    #[error("invalid HoG configuration: {0}")]
    HogConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("LDA needs at least 2 occupied classes, found {0}")]
    TooFewClasses(usize),
    #[error("within-class scatter is singular after shrinkage {lambda}; increase the shrinkage")]
    Singular { lambda: f64 },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad LDA sidecar: {0}")]
    Format(String),
}

/// Sub-pixel bilinear sample with replicate-edge extension.
pub fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = img.dimensions();
    let xc = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let yc = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as u32, yc.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let p = |x, y| img.get_pixel(x, y)[0] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the axis-aligned box centred at `center` with size `(box_h, box_w)`
/// (pixels) into an image of `out = (h, w)`.
pub fn crop_box(img: &GrayImage, center: [f64; 2], box_h: f64, box_w: f64, out: (usize, usize)) -> GrayImage {
    let (h, w) = out;
    let (sx, sy) = (box_w / w as f64, box_h / h as f64);
    let (x0, y0) = (center[0] - box_w / 2.0, center[1] - box_h / 2.0);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = sample_bilinear(img, x0 + (x as f64 + 0.5) * sx, y0 + (y as f64 + 0.5) * sy);
        image::Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Area-aware resize to `(h, w)`.
pub fn resize(img: &GrayImage, size: (usize, usize)) -> GrayImage {
    if img.dimensions() == (size.1 as u32, size.0 as u32) {
        return img.clone();
    }
    image::imageops::resize(img, size.1 as u32, size.0 as u32, image::imageops::FilterType::Triangle)
}

/// Landmarks needed to crop a face capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceLandmarks {
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    /// `[x0, y0, width, height]` in pixels.
    pub face_box: Option<[f64; 4]>,
}

impl FaceLandmarks {
    /// Uses the first two points as the left and right eye centres.
    pub fn from_points(points: &[[f64; 2]]) -> Result<Self, PreprocessError> {
        match points {
            [l, r, ..] => Ok(Self {
                left_eye: *l,
                right_eye: *r,
                face_box: None,
            }),
            _ => Err(PreprocessError::Shape(format!("need 2 eye points, got {}", points.len()))),
        }
    }

    pub fn iod(&self) -> f64 {
        let d = [self.left_eye[0] - self.right_eye[0], self.left_eye[1] - self.right_eye[1]];
        (d[0] * d[0] + d[1] * d[1]).sqrt()
    }

    /// The given face box, or a square of 2.8 IOD centred half an IOD below
    /// the eye midpoint.
    pub fn face_box(&self) -> [f64; 4] {
        if let Some(b) = self.face_box {
            return b;
        }
        let iod = self.iod();
        let mid = [(self.left_eye[0] + self.right_eye[0]) / 2.0, (self.left_eye[1] + self.right_eye[1]) / 2.0];
        let side = 2.8 * iod;
        [mid[0] - side / 2.0, mid[1] + 0.5 * iod - side / 2.0, side, side]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub face_size: (usize, usize),
    pub eye_size: (usize, usize),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            face_size: (224, 224),
            eye_size: (64, 96),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Crops {
    pub face: GrayImage,
    pub left_eye: GrayImage,
    pub right_eye: GrayImage,
}

/// Face and eye crops. Eye crops are `0.7 * IOD` wide, centred on the eye
/// centres, with the height following the configured aspect ratio.
pub fn crop_regions(img: &GrayImage, lm: &FaceLandmarks, cfg: &CropConfig) -> Result<Crops, PreprocessError> {
    let (w, h) = img.dimensions();
    for p in [lm.left_eye, lm.right_eye] {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w as f64 && p[1] <= h as f64) {
            return Err(PreprocessError::LandmarkOutside(p));
        }
    }
    let iod = lm.iod();
    if iod < 4.0 {
        return Err(PreprocessError::DegenerateIod(iod));
    }
    let eye_w = 0.35 * iod * 2.0;
    let eye_h = eye_w * cfg.eye_size.0 as f64 / cfg.eye_size.1 as f64;
    let b = lm.face_box();
    Ok(Crops {
        face: crop_box(img, [b[0] + b[2] / 2.0, b[1] + b[3] / 2.0], b[3], b[2], cfg.face_size),
        left_eye: crop_box(img, lm.left_eye, eye_h, eye_w, cfg.eye_size),
        right_eye: crop_box(img, lm.right_eye, eye_h, eye_w, cfg.eye_size),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    /// Cell edge in pixels, one entry per level.
    pub cell_sizes: Vec<usize>,
    /// Unsigned orientation bins over [0, 180).
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell_sizes: vec![8, 16, 32],
            bins: 9,
            epsilon: 1e-6,
        }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.cell_sizes.is_empty() || self.cell_sizes.contains(&0) {
            return Err(PreprocessError::HogConfig("need at least one nonzero cell size".into()));
        }
        if self.bins < 2 {
            return Err(PreprocessError::HogConfig("need at least 2 orientation bins".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.cell_sizes.len()
    }

    fn check_size(&self, h: usize, w: usize) -> Result<(), PreprocessError> {
        self.validate()?;
        let cell = *self.cell_sizes.iter().max().expect("validated");
        if h < cell || w < cell {
            return Err(PreprocessError::TooSmall { h, w, cell });
        }
        Ok(())
    }
}

pub fn gray_to_array(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64)
}

/// Per-cell orientation histograms, L2-normalized as `v / sqrt(|v|^2 + eps^2)`.
/// Gradients are central differences with replicated borders; each pixel
/// votes its magnitude into the two nearest bins, bin `k` centred at
/// `k * 180 / bins` degrees. Partial edge cells count.
pub fn cell_histograms(img: &Array2<f64>, cell: usize, bins: usize, eps: f64) -> Array3<f64> {
    let (h, w) = img.dim();
    let (ch, cw) = (h.div_ceil(cell), w.div_ceil(cell));
    let mut hist = Array3::<f64>::zeros((ch, cw, bins));
    let bin_width = std::f64::consts::PI / bins as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = img[[y, (x + 1).min(w - 1)]] - img[[y, x.saturating_sub(1)]];
            let gy = img[[(y + 1).min(h - 1), x]] - img[[y.saturating_sub(1), x]];
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let pos = theta / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(bins as isize) as usize;
            let b1 = (b0 + 1) % bins;
            hist[[y / cell, x / cell, b0]] += mag * (1.0 - frac);
            hist[[y / cell, x / cell, b1]] += mag * frac;
        }
    }
    for mut v in hist.lanes_mut(Axis(2)) {
        let norm = (v.iter().map(|a| a * a).sum::<f64>() + eps * eps).sqrt();
        v.mapv_inplace(|a| a / norm);
    }
    hist
}

/// Bilinear upsampling of a per-cell map to pixel resolution, interpolating
/// between cell centres and holding the edge cells constant beyond them.
fn upsample_cells(cells: &Array2<f64>, cell: usize, h: usize, w: usize) -> Array2<f64> {
    let (ch, cw) = cells.dim();
    let coord = |p: usize, n: usize| {
        let c = ((p as f64 + 0.5) / cell as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n - 1), c - i0 as f64)
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = coord(y, ch);
        let (x0, x1, fx) = coord(x, cw);
        let top = cells[[y0, x0]] * (1.0 - fx) + cells[[y0, x1]] * fx;
        let bottom = cells[[y1, x0]] * (1.0 - fx) + cells[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Multilevel HoG energy: one `[0, 1]` channel per level holding each cell's
/// dominant normalized bin, upsampled to the input resolution. Output is
/// `(H, W, levels)`.
pub fn mhog(img: &Array2<f64>, cfg: &HogConfig) -> Result<Array3<f32>, PreprocessError> {
    let (h, w) = img.dim();
    cfg.check_size(h, w)?;
    let mut out = Array3::<f32>::zeros((h, w, cfg.levels()));
    for (l, &cell) in cfg.cell_sizes.iter().enumerate() {
        let hist = cell_histograms(img, cell, cfg.bins, cfg.epsilon);
        let dominant = hist.map_axis(Axis(2), |v| v.iter().copied().fold(0.0, f64::max));
        let up = upsample_cells(&dominant, cell, h, w);
        out.index_axis_mut(Axis(2), l).assign(&up.mapv(|v| v.clamp(0.0, 1.0) as f32));
    }
    Ok(out)
}

/// Concatenation of every level's normalized cell histograms.
pub fn hog_descriptor(img: &Array2<f64>, cfg: &HogConfig) -> Result<Vec<f64>, PreprocessError> {
    let (h, w) = img.dim();
    cfg.check_size(h, w)?;
    Ok(cfg
        .cell_sizes
        .iter()
        .flat_map(|&cell| cell_histograms(img, cell, cfg.bins, cfg.epsilon).into_iter())
        .collect())
}

/// Network input: image intensities scaled from 0..255 to [0, 1], followed by
/// the extra channels (already in [0, 1]) when `use_mhog` is set.
pub fn assemble_input(image: &Array3<f32>, extra: Option<&Array3<f32>>, use_mhog: bool) -> Result<Array3<f32>, PreprocessError> {
    let scaled = image.mapv(|v| v / 255.0);
    match (use_mhog, extra) {
        (false, _) => Ok(scaled),
        (true, None) => Err(PreprocessError::Shape("mHoG enabled but no extra channels given".into())),
        (true, Some(e)) => {
            if e.dim().0 != image.dim().0 || e.dim().1 != image.dim().1 {
                return Err(PreprocessError::Shape(format!(
                    "image {:?} vs extra channels {:?}",
                    image.dim(),
                    e.dim()
                )));
            }
            Ok(concatenate(Axis(2), &[scaled.view(), e.view()]).expect("spatial shapes checked"))
        }
    }
}

/// Pseudo-class of a gaze label: yaw and pitch quantized at `bin_width`.
pub fn pseudo_class(g: AnglePair, bin_width: f64) -> (i64, i64) {
    ((g.yaw / bin_width).floor() as i64, (g.pitch / bin_width).floor() as i64)
}

pub const LDA_SHRINKAGE: f64 = 1e-3;
pub const LDA_MAX_DIM: usize = 32;

/// A fitted LDA projection with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    pub mean: DVector<f64>,
    /// `descriptor_dim x k`.
    pub projection: DMatrix<f64>,
    pub classes: Vec<(i64, i64)>,
    /// Projected class means, `classes x k`.
    pub centroids: DMatrix<f64>,
    pub bin_width: f64,
}

fn class_groups(labels: &[AnglePair], bin_width: f64) -> BTreeMap<(i64, i64), Vec<usize>> {
    let mut groups: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, g) in labels.iter().enumerate() {
        groups.entry(pseudo_class(*g, bin_width)).or_default().push(i);
    }
    groups
}

/// Within- and between-class scatter, each divided by the sample count.
pub fn scatter_matrices(x: &DMatrix<f64>, groups: &BTreeMap<(i64, i64), Vec<usize>>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean = x.row_mean().transpose();
    let mut sw = DMatrix::<f64>::zeros(d, d);
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for idx in groups.values() {
        let mut mu = DVector::<f64>::zeros(d);
        for &i in idx {
            mu += x.row(i).transpose();
        }
        mu /= idx.len() as f64;
        for &i in idx {
            let c = x.row(i).transpose() - &mu;
            sw.ger(1.0, &c, &c, 1.0);
        }
        let m = &mu - &mean;
        sb.ger(idx.len() as f64, &m, &m, 1.0);
    }
    (sw / n as f64, sb / n as f64)
}

/// Fits LDA on row descriptors `x` (`n x d`) with gaze pseudo-classes.
pub fn fit_lda(x: &DMatrix<f64>, labels: &[AnglePair], bin_width: f64) -> Result<LdaTransform, PreprocessError> {
    fit_lda_with(x, labels, bin_width, LDA_SHRINKAGE)
}

pub fn fit_lda_with(x: &DMatrix<f64>, labels: &[AnglePair], bin_width: f64, lambda: f64) -> Result<LdaTransform, PreprocessError> {
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(PreprocessError::Shape(format!("{n} descriptors but {} labels", labels.len())));
    }
    let groups = class_groups(labels, bin_width);
    if groups.len() < 2 {
        return Err(PreprocessError::TooFewClasses(groups.len()));
    }
    let (mut sw, sb) = scatter_matrices(x, &groups);
    for i in 0..d {
        sw[(i, i)] += lambda;
    }
    let chol = sw.cholesky().ok_or(PreprocessError::Singular { lambda })?;
    let l = chol.l();
    // Whitened between-class scatter: L^-1 Sb L^-T.
    let a = l
        .solve_lower_triangular(&sb)
        .ok_or(PreprocessError::Singular { lambda })?;
    let m = l
        .solve_lower_triangular(&a.transpose())
        .ok_or(PreprocessError::Singular { lambda })?;
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let k = (groups.len() - 1).min(LDA_MAX_DIM).min(d);
    let v = DMatrix::from_columns(&order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let w = l
        .transpose()
        .solve_upper_triangular(&v)
        .ok_or(PreprocessError::Singular { lambda })?;
    let mut projection = w.clone().qr().q();
    // QR may flip signs; keep each column aligned with its discriminant.
    for j in 0..k {
        if projection.column(j).dot(&w.column(j)) < 0.0 {
            projection.column_mut(j).neg_mut();
        }
    }
    let mean = x.row_mean().transpose();
    let classes: Vec<(i64, i64)> = groups.keys().copied().collect();
    let mut centroids = DMatrix::<f64>::zeros(classes.len(), k);
    for (c, idx) in groups.values().enumerate() {
        let mut mu = DVector::<f64>::zeros(d);
        for &i in idx {
            mu += x.row(i).transpose();
        }
        mu /= idx.len() as f64;
        centroids.set_row(c, &(projection.transpose() * (mu - &mean)).transpose());
    }
    Ok(LdaTransform {
        mean,
        projection,
        classes,
        centroids,
        bin_width,
    })
}

const LDA_MAGIC: &str = "headgaze-lda";
const LDA_VERSION: u32 = 1;

impl LdaTransform {
    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn k(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, descriptor: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        if descriptor.len() != self.dim() {
            return Err(PreprocessError::Shape(format!(
                "descriptor has {} values, LDA expects {}",
                descriptor.len(),
                self.dim()
            )));
        }
        let x = DVector::from_column_slice(descriptor) - &self.mean;
        Ok((self.projection.transpose() * x).iter().copied().collect())
    }

    /// Text header terminated by a blank line, then little-endian f64 payload:
    /// mean, projection (column-major), centroids (column-major), then class
    /// keys as little-endian i64 pairs.
    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let mut buf = format!(
            "{LDA_MAGIC} {LDA_VERSION}\ndim {}\nk {}\nclasses {}\nbin_width {}\n\n",
            self.dim(),
            self.k(),
            self.classes.len(),
            self.bin_width
        )
        .into_bytes();
        for v in self.mean.iter().chain(self.projection.iter()).chain(self.centroids.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (a, b) in &self.classes {
            buf.extend_from_slice(&a.to_le_bytes());
            buf.extend_from_slice(&b.to_le_bytes());
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| PreprocessError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let io = |e: std::io::Error| PreprocessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut reader = BufReader::new(fs::File::open(path).map_err(io)?);
        let mut fields = BTreeMap::new();
        let mut first = String::new();
        reader.read_line(&mut first).map_err(io)?;
        if first.trim() != format!("{LDA_MAGIC} {LDA_VERSION}") {
            return Err(PreprocessError::Format(format!("unexpected header {:?}", first.trim())));
        }
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(io)? == 0 {
                return Err(PreprocessError::Format("missing blank line after header".into()));
            }
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| PreprocessError::Format(format!("bad header line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<f64, PreprocessError> {
            fields
                .get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| PreprocessError::Format(format!("missing or bad `{k}`")))
        };
        let (d, k, c, bin_width) = (get("dim")? as usize, get("k")? as usize, get("classes")? as usize, get("bin_width")?);
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(io)?;
        let n_floats = d + d * k + c * k;
        if payload.len() != 8 * n_floats + 16 * c {
            return Err(PreprocessError::Format(format!("payload has {} bytes", payload.len())));
        }
        let word = |i: usize| -> [u8; 8] { payload[8 * i..8 * i + 8].try_into().expect("8 bytes") };
        let floats: Vec<f64> = (0..n_floats).map(|i| f64::from_le_bytes(word(i))).collect();
        let classes = (0..c)
            .map(|j| {
                let i = n_floats + 2 * j;
                (i64::from_le_bytes(word(i)), i64::from_le_bytes(word(i + 1)))
            })
            .collect();
        Ok(Self {
            mean: DVector::from_column_slice(&floats[..d]),
            projection: DMatrix::from_column_slice(d, k, &floats[d..d + d * k]),
            centroids: DMatrix::from_column_slice(c, k, &floats[d + d * k..]),
            classes,
            bin_width,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(h: usize, w: usize, edge: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(_, x)| if x < edge { lo } else { hi })
    }

    #[test]
    fn constant_image_has_zero_energy() {
        let img = Array2::from_elem((64, 64), 77.0);
        let out = mhog(&img, &HogConfig::default()).unwrap();
        assert_eq!(out.dim(), (64, 64, 3));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_energy_stays_near_the_edge() {
        let img = step_image(64, 128, 64, 20.0, 200.0);
        let cfg = HogConfig {
            cell_sizes: vec![8],
            ..HogConfig::default()
        };
        let out = mhog(&img, &cfg).unwrap();
        assert!(out[[32, 64, 0]] > 0.9);
        for x in (0..40).chain(88..128) {
            assert_eq!(out[[32, x, 0]], 0.0, "column {x}");
        }
        let hist = cell_histograms(&img, 8, 9, 1e-6);
        let cell = hist.slice(ndarray::s![4, 7, ..]);
        let argmax = cell.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        // A horizontal intensity step has a purely horizontal gradient: angle 0.
        assert_eq!(argmax, 0, "{cell:?}");
    }

    #[test]
    fn brightness_offset_leaves_channels_unchanged() {
        let img = Array2::from_shape_fn((48, 64), |(y, x)| 60.0 + 40.0 * ((x as f64 / 5.0).sin() + (y as f64 / 7.0).cos()));
        let brighter = img.mapv(|v| v + 50.0);
        let a = mhog(&img, &HogConfig::default()).unwrap();
        let b = mhog(&brighter, &HogConfig::default()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn image_smaller_than_cell_is_rejected() {
        let img = Array2::zeros((20, 40));
        assert!(matches!(mhog(&img, &HogConfig::default()), Err(PreprocessError::TooSmall { .. })));
    }

    #[test]
    fn assemble_shapes() {
        let img = Array3::from_elem((224, 224, 1), 255.0f32);
        let extra = Array3::from_elem((224, 224, 3), 0.5f32);
        let out = assemble_input(&img, Some(&extra), true).unwrap();
        assert_eq!(out.dim(), (224, 224, 4));
        assert_eq!(out[[0, 0, 0]], 1.0);
        assert_eq!(assemble_input(&img, Some(&extra), false).unwrap().dim(), (224, 224, 1));
        let bad = Array3::from_elem((10, 224, 3), 0.5f32);
        assert!(assemble_input(&img, Some(&bad), true).is_err());
    }

    #[test]
    fn degenerate_iod_is_rejected() {
        let img = GrayImage::new(100, 100);
        let lm = FaceLandmarks {
            left_eye: [50.0, 50.0],
            right_eye: [47.0, 50.0],
            face_box: None,
        };
        assert!(matches!(crop_regions(&img, &lm, &CropConfig::default()), Err(PreprocessError::DegenerateIod(_))));
        let out = FaceLandmarks {
            left_eye: [150.0, 50.0],
            right_eye: [20.0, 50.0],
            face_box: None,
        };
        assert!(matches!(crop_regions(&img, &out, &CropConfig::default()), Err(PreprocessError::LandmarkOutside(_))));
    }
}
