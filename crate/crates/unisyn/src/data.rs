//! Synthetic phantom dataset, volume I/O (`.mmv` + text header sidecar),
//! preprocessing (mean normalization, center slice extraction) and batching.

use crate::conditioning::{zero_impute, AvailabilityCondition};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MMV_VERSION: u32 = 1;

/// Co-registered multi-modal volume, voxels shaped [M, D, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub voxels: Array4<f32>,
    pub modality_names: Vec<String>,
    pub subject_id: String,
}

impl MultiModalVolume {
    pub fn modalities(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_names.len() != self.modalities() {
            return Err(Error::Dimension(format!(
                "{} modality names for {} modalities",
                self.modality_names.len(),
                self.modalities()
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "volume {} contains non-finite intensities",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Synthetic tissue classes rendered by the phantom generator.
pub const NUM_TISSUE_CLASSES: usize = 4;
pub const TISSUE_BACKGROUND: u8 = 0;
pub const TISSUE_BRAIN: u8 = 1;
pub const TISSUE_VENTRICLE: u8 = 2;
pub const TISSUE_LESION: u8 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub modality_names: Vec<String>,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of ventricle-class blobs.
    pub blob_count: (usize, usize),
    /// Per modality: intensity multiplier for each tissue class
    /// (background, brain, ventricle, lesion).
    pub contrast: Vec<[f64; NUM_TISSUE_CLASSES]>,
    /// Additive Gaussian noise std, applied inside the head only.
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            modality_names: vec!["m1".into(), "m2".into(), "m3".into(), "m4".into()],
            depth: 12,
            height: 64,
            width: 64,
            blob_count: (2, 4),
            // distinct tissue transfer per modality; every modality sees the
            // lesion so cross-modality synthesis of it is learnable
            contrast: vec![
                [0.0, 1.0, 0.4, 1.8],
                [0.0, 0.7, 1.6, 2.2],
                [0.0, 1.2, 0.8, 0.5],
                [0.0, 0.5, 1.2, 2.8],
            ],
            noise_std: 0.03,
        }
    }
}

impl PhantomSpec {
    pub fn modalities(&self) -> usize {
        self.contrast.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.contrast.is_empty() {
            return Err(Error::Config("phantom contrast table is empty".into()));
        }
        if self.contrast.len() != self.modality_names.len() {
            return Err(Error::Config(format!(
                "{} contrast rows for {} modality names",
                self.contrast.len(),
                self.modality_names.len()
            )));
        }
        if self
            .contrast
            .iter()
            .any(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config("phantom contrast table not finite".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("phantom noise std must be >= 0".into()));
        }
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("phantom dimensions must be nonzero".into()));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::Config("phantom blob count range is inverted".into()));
        }
        let lesion_visible = self
            .contrast
            .iter()
            .filter(|row| row[TISSUE_LESION as usize] != 0.0)
            .count();
        if lesion_visible < 2 {
            return Err(Error::Config(
                "lesion must have nonzero contrast in at least two modalities".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let d = [
            (z as f64 - self.center[0]) / self.radii[0],
            (y as f64 - self.center[1]) / self.radii[1],
            (x as f64 - self.center[2]) / self.radii[2],
        ];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
    }
}

/// One subject's shared anatomy: a tissue-class label per voxel.
fn phantom_anatomy(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Array3<u8> {
    let (d, h, w) = (spec.depth, spec.height, spec.width);
    let head = Ellipsoid {
        center: [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0],
        radii: [
            d as f64 * rng.gen_range(0.38..0.48),
            h as f64 * rng.gen_range(0.34..0.44),
            w as f64 * rng.gen_range(0.34..0.44),
        ],
    };
    // random blobs inside the head
    let inner = |rng: &mut ChaCha8Rng, scale: std::ops::Range<f64>| {
        let r = [
            d as f64 * rng.gen_range(scale.clone()),
            h as f64 * rng.gen_range(scale.clone()),
            w as f64 * rng.gen_range(scale),
        ];
        Ellipsoid {
            center: [
                head.center[0] + rng.gen_range(-0.5..0.5) * head.radii[0],
                head.center[1] + rng.gen_range(-0.5..0.5) * head.radii[1],
                head.center[2] + rng.gen_range(-0.5..0.5) * head.radii[2],
            ],
            radii: r,
        }
    };
    let n_blobs = rng.sample(Uniform::new_inclusive(spec.blob_count.0, spec.blob_count.1));
    let blobs: Vec<Ellipsoid> = (0..n_blobs).map(|_| inner(rng, 0.06..0.16)).collect();
    let lesion = inner(rng, 0.05..0.12);

    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !head.contains(z, y, x) {
            TISSUE_BACKGROUND
        } else if lesion.contains(z, y, x) {
            TISSUE_LESION
        } else if blobs.iter().any(|b| b.contains(z, y, x)) {
            TISSUE_VENTRICLE
        } else {
            TISSUE_BRAIN
        }
    })
}

/// Render M modality volumes from one shared anatomy.
pub fn generate_phantom_dataset(
    seed: u64,
    spec: &PhantomSpec,
    n_subjects: usize,
) -> Result<Vec<MultiModalVolume>> {
    spec.validate()?;
    if n_subjects == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    // independent per-subject streams derived from the master seed
    let subject_seeds: Vec<u64> = (0..n_subjects).map(|_| master.next_u64()).collect();
    let m = spec.modalities();
    let (d, h, w) = (spec.depth, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(n_subjects);
    for (si, &sseed) in subject_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sseed);
        let anatomy = phantom_anatomy(&mut rng, spec);
        let mut voxels = Array4::<f32>::zeros((m, d, h, w));
        for mi in 0..m {
            let row = &spec.contrast[mi];
            let mut plane = voxels.index_axis_mut(Axis(0), mi);
            for ((z, y, x), v) in plane.indexed_iter_mut() {
                let class = anatomy[[z, y, x]];
                if class == TISSUE_BACKGROUND {
                    continue;
                }
                let mut val = row[class as usize];
                if spec.noise_std > 0.0 {
                    val += rng.sample(noise);
                }
                *v = val.max(0.0) as f32;
            }
        }
        out.push(MultiModalVolume {
            voxels,
            modality_names: spec.modality_names.clone(),
            subject_id: format!("s{si:04}"),
        });
    }
    Ok(out)
}

/// Which voxels enter the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Mean over nonzero voxels only (zero background stays untouched by
    /// scale statistics).
    #[default]
    NonzeroVoxels,
    AllVoxels,
}

/// Per-modality mean normalization: divide each modality by the mean of its
/// (nonzero) voxels.
pub fn mean_normalize(
    volume: &MultiModalVolume,
    mode: NormalizationMode,
) -> Result<MultiModalVolume> {
    let mut out = volume.clone();
    for (mi, mut plane) in out.voxels.axis_iter_mut(Axis(0)).enumerate() {
        let (sum, count) = match mode {
            NormalizationMode::NonzeroVoxels => plane
                .iter()
                .filter(|&&v| v != 0.0)
                .fold((0.0f64, 0usize), |(s, c), &v| (s + v as f64, c + 1)),
            NormalizationMode::AllVoxels => plane
                .iter()
                .fold((0.0f64, 0usize), |(s, c), &v| (s + v as f64, c + 1)),
        };
        if count == 0 || sum == 0.0 {
            return Err(Error::Normalization(format!(
                "modality {mi} of {} has no usable voxels for mean normalization",
                volume.subject_id
            )));
        }
        let mean = sum / count as f64;
        plane.mapv_inplace(|v| (v as f64 / mean) as f32);
    }
    Ok(out)
}

/// Select `n_slices` axial slices centered at D/2 (lower start on ties) and
/// center-crop each to `crop` = (H', W'). Returns [M, H', W'] per slice, in
/// axial index order.
pub fn extract_center_slices(
    volume: &MultiModalVolume,
    n_slices: usize,
    crop: (usize, usize),
) -> Result<Vec<Array3<f32>>> {
    let (m, d, h, w) = volume.voxels.dim();
    if n_slices > d {
        return Err(Error::Dimension(format!(
            "{n_slices} slices requested from depth {d}"
        )));
    }
    let (ch, cw) = crop;
    if ch > h || cw > w {
        return Err(Error::Dimension(format!(
            "crop {ch}x{cw} exceeds slice {h}x{w}"
        )));
    }
    let z0 = (d - n_slices) / 2;
    let y0 = (h - ch) / 2;
    let x0 = (w - cw) / 2;
    let mut out = Vec::with_capacity(n_slices);
    for z in z0..z0 + n_slices {
        let mut slice = Array3::<f32>::zeros((m, ch, cw));
        slice.assign(&volume.voxels.slice(ndarray::s![
            ..,
            z,
            y0..y0 + ch,
            x0..x0 + cw
        ]));
        out.push(slice);
    }
    Ok(out)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Write `<path>` (raw little-endian f32, C order) and `<path>.hdr`.
pub fn save_volume(volume: &MultiModalVolume, path: &Path) -> Result<()> {
    volume.validate()?;
    let (m, d, h, w) = volume.voxels.dim();
    let hdr = format!(
        "format: mmv\nversion: {MMV_VERSION}\ndims: {m} {d} {h} {w}\nbyte_order: little\nmodalities: {}\nsubject: {}\n",
        volume.modality_names.join(","),
        volume.subject_id
    );
    std::fs::write(header_path(path), hdr).map_err(|e| io_err(&header_path(path), e))?;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    let standard = volume.voxels.as_standard_layout();
    for &v in standard.iter() {
        f.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn header_field<'a>(fields: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("header missing '{key}'"),
        })
}

pub fn load_volume(path: &Path) -> Result<MultiModalVolume> {
    let hdr_path = header_path(path);
    let text = std::fs::read_to_string(&hdr_path).map_err(|e| io_err(&hdr_path, e))?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: hdr_path.clone(),
        reason,
    };
    let fields: Vec<(String, String)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(':')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| corrupt(format!("malformed header line '{l}'")))
        })
        .collect::<Result<_>>()?;
    if header_field(&fields, "format", &hdr_path)? != "mmv" {
        return Err(Error::UnsupportedFormat {
            path: hdr_path.clone(),
            reason: "not an mmv header".into(),
        });
    }
    let version: u32 = header_field(&fields, "version", &hdr_path)?
        .parse()
        .map_err(|_| corrupt("unparseable version".into()))?;
    if version != MMV_VERSION {
        return Err(Error::UnsupportedFormat {
            path: hdr_path.clone(),
            reason: format!("mmv version {version} (supported: {MMV_VERSION})"),
        });
    }
    if header_field(&fields, "byte_order", &hdr_path)? != "little" {
        return Err(Error::UnsupportedFormat {
            path: hdr_path.clone(),
            reason: "only little-endian payloads are supported".into(),
        });
    }
    let dims: Vec<usize> = header_field(&fields, "dims", &hdr_path)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| corrupt(format!("bad dim '{t}'"))))
        .collect::<Result<_>>()?;
    if dims.len() != 4 {
        return Err(corrupt(format!("expected 4 dims, got {}", dims.len())));
    }
    let modality_names: Vec<String> = header_field(&fields, "modalities", &hdr_path)?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if modality_names.len() != dims[0] {
        return Err(corrupt(format!(
            "{} modality names for {} modalities",
            modality_names.len(),
            dims[0]
        )));
    }
    let subject_id = header_field(&fields, "subject", &hdr_path)?.to_string();

    let n = dims.iter().product::<usize>();
    let mut payload = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut payload)
        .map_err(|e| io_err(path, e))?;
    if payload.len() != n * 4 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("payload holds {} bytes, header implies {}", payload.len(), n * 4),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = ArrayD::from_shape_vec(IxDyn(&dims), values)
        .expect("size checked above")
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4 dims checked above");
    let vol = MultiModalVolume {
        voxels,
        modality_names,
        subject_id,
    };
    vol.validate()?;
    Ok(vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// On-disk dataset: `subjects/<id>.mmv[.hdr]` plus a `manifest` of
/// `<id> <split>` lines.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<(String, Split)>,
}

impl Dataset {
    pub fn write(root: &Path, volumes: &[MultiModalVolume], splits: &[Split]) -> Result<Self> {
        if volumes.len() != splits.len() {
            return Err(Error::Config(format!(
                "{} volumes but {} split labels",
                volumes.len(),
                splits.len()
            )));
        }
        let subjects = root.join("subjects");
        std::fs::create_dir_all(&subjects).map_err(|e| io_err(&subjects, e))?;
        let mut manifest = String::new();
        let mut entries = Vec::new();
        for (vol, &split) in volumes.iter().zip(splits) {
            save_volume(vol, &subjects.join(format!("{}.mmv", vol.subject_id)))?;
            manifest.push_str(&format!("{} {}\n", vol.subject_id, split));
            entries.push((vol.subject_id.clone(), split));
        }
        let mpath = root.join("manifest");
        std::fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest");
        let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (id, split) = line.split_once(' ').ok_or_else(|| Error::CorruptFile {
                path: mpath.clone(),
                reason: format!("malformed manifest line '{line}'"),
            })?;
            entries.push((id.to_string(), split.trim().parse()?));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn subject_ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn load(&self, subject_id: &str) -> Result<MultiModalVolume> {
        load_volume(&self.root.join("subjects").join(format!("{subject_id}.mmv")))
    }
}

/// Training sample batch. Masked channels of `pixels` are all-zero;
/// `targets` always hold the complete ground truth.
#[derive(Debug, Clone)]
pub struct MultiModalBatch<F> {
    pub pixels: Array4<F>,
    pub condition: AvailabilityCondition,
    pub targets: Array4<F>,
}

/// Stack slice samples ([M, H, W] each) into a batch under one availability
/// condition; inputs for missing modalities are zero-imputed.
pub fn assemble_batch<F: Scalar>(
    samples: &[Array3<f32>],
    ac: &AvailabilityCondition,
) -> Result<MultiModalBatch<F>> {
    if samples.is_empty() {
        return Err(Error::Config("cannot assemble an empty batch".into()));
    }
    let (m, h, w) = samples[0].dim();
    if m != ac.len() {
        return Err(Error::Dimension(format!(
            "{m}-modality samples under condition of length {}",
            ac.len()
        )));
    }
    let mut targets = Array4::<F>::zeros((samples.len(), m, h, w));
    for (bi, s) in samples.iter().enumerate() {
        if s.dim() != (m, h, w) {
            return Err(Error::Dimension("ragged sample shapes in batch".into()));
        }
        targets
            .index_axis_mut(Axis(0), bi)
            .assign(&s.mapv(|v| F::from_f64c(v as f64)));
    }
    let pixels = zero_impute(&targets.view(), ac)?;
    Ok(MultiModalBatch {
        pixels,
        condition: ac.clone(),
        targets,
    })
}
