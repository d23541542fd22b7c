//! Dataset ingestion: Netpbm images and masks listed by a JSON manifest,
//! plus a seeded synthetic segmentation task.

mod netpbm;
mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use netpbm::{
    decode_pgm, decode_ppm, encode, load_image_ppm, load_mask_pgm, raster_to_tensor, read_pgm, read_ppm,
    save_image_ppm, save_mask_pgm, tensor_to_raster, write_raster, Raster,
};
pub use synth::{class_colors, synthesize_dataset, SynthConfig, NOISE_STD};

use crate::metrics::{ClassSet, LabelMask, MetricsError, DEFAULT_IGNORE_LABEL};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:?}, expected {expected}", path = .path.display())]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: malformed header: {detail}", path = .path.display())]
    BadHeader { path: PathBuf, detail: String },
    #[error("{path}: maxval {maxval} is not supported, only 255", path = .path.display())]
    BadMaxval { path: PathBuf, maxval: usize },
    #[error("{path}: truncated raster: expected {expected} bytes, found {got}", path = .path.display())]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{path}: pixel (x={x}, y={y}) has label {value}, outside 0..{k} and not the ignore label", path = .path.display())]
    LabelOutOfRange {
        path: PathBuf,
        x: usize,
        y: usize,
        value: u8,
        k: usize,
    },
    #[error("{path}: pixel (x={x}, y={y}) has colour {color:?}, which is not in the palette", path = .path.display())]
    UnknownColor {
        path: PathBuf,
        x: usize,
        y: usize,
        color: [u8; 3],
    },
    #[error("image {image} is {image_hw:?} but mask {mask} is {mask_hw:?}", image = .image.display(), mask = .mask.display())]
    SizeMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_hw: (usize, usize),
        mask_hw: (usize, usize),
    },
    #[error("{path}: invalid JSON: {detail}", path = .path.display())]
    ManifestSyntax { path: PathBuf, detail: String },
    #[error("{path}: missing field `{field}`", path = .path.display())]
    MissingField { path: PathBuf, field: String },
    #[error("{path}: field `{field}` {detail}", path = .path.display())]
    InvalidField {
        path: PathBuf,
        field: String,
        detail: String,
    },
    #[error("{manifest}: {field} file {file} does not exist", manifest = .manifest.display(), file = .file.display())]
    MissingFile {
        manifest: PathBuf,
        field: String,
        file: PathBuf,
    },
    #[error("{manifest}: sample {index} repeats image {file} (first listed as sample {first})", manifest = .manifest.display(), file = .file.display())]
    DuplicateSample {
        manifest: PathBuf,
        index: usize,
        first: usize,
        file: PathBuf,
    },
    #[error("dataset has {dataset} classes but the model predicts {model}")]
    ClassCount { dataset: usize, model: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("samples differ in size: {first:?} vs {other:?}; batches need equal sizes")]
    MixedSizes { first: (usize, usize), other: (usize, usize) },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Classes(#[from] MetricsError),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// I/O failures are runtime errors; everything else is bad input.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DataError::Io { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub color: [u8; 3],
    pub id: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Validated manifest; sample paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub classes: ClassSet,
    pub samples: Vec<SampleEntry>,
    /// Colour-to-id table for masks stored as colour (P6) images.
    pub palette: Option<Vec<PaletteEntry>>,
}

/// On-disk manifest layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub classes: Vec<String>,
    pub ignore_label: u8,
    pub samples: Vec<SampleEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub palette: Option<Vec<PaletteEntry>>,
}

fn field<'a>(obj: &'a Value, name: &str, ctx: &str, path: &Path) -> Result<&'a Value, DataError> {
    obj.get(name).ok_or_else(|| DataError::MissingField {
        path: path.to_path_buf(),
        field: format!("{ctx}{name}"),
    })
}

fn invalid(path: &Path, field: impl Into<String>, detail: impl Into<String>) -> DataError {
    DataError::InvalidField {
        path: path.to_path_buf(),
        field: field.into(),
        detail: detail.into(),
    }
}

fn as_str<'a>(v: &'a Value, name: &str, path: &Path) -> Result<&'a str, DataError> {
    v.as_str().ok_or_else(|| invalid(path, name, "must be a string"))
}

fn as_u8(v: &Value, name: &str, path: &Path) -> Result<u8, DataError> {
    v.as_u64()
        .and_then(|n| u8::try_from(n).ok())
        .ok_or_else(|| invalid(path, name, "must be an integer in 0..=255"))
}

/// Parses and validates a manifest: required fields, existing files, no
/// repeated images. Relative paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest, DataError> {
    let root: Value = serde_json::from_str(text).map_err(|e| DataError::ManifestSyntax {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if !root.is_object() {
        return Err(invalid(path, "<root>", "must be an object"));
    }
    let names = field(&root, "classes", "", path)?
        .as_array()
        .ok_or_else(|| invalid(path, "classes", "must be an array of strings"))?
        .iter()
        .enumerate()
        .map(|(i, v)| as_str(v, &format!("classes[{i}]"), path).map(str::to_string))
        .collect::<Result<Vec<_>, _>>()?;
    let ignore_label = match root.get("ignore_label") {
        None => DEFAULT_IGNORE_LABEL,
        Some(v) => as_u8(v, "ignore_label", path)?,
    };
    let classes = ClassSet::new(names, ignore_label).map_err(|e| invalid(path, "classes", e.to_string()))?;

    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let raw_samples = field(&root, "samples", "", path)?
        .as_array()
        .ok_or_else(|| invalid(path, "samples", "must be an array"))?;
    let mut samples = Vec::with_capacity(raw_samples.len());
    let mut seen: std::collections::HashMap<PathBuf, usize> = std::collections::HashMap::new();
    for (i, s) in raw_samples.iter().enumerate() {
        let ctx = format!("samples[{i}].");
        let mut entry = [PathBuf::new(), PathBuf::new()];
        for (slot, name) in entry.iter_mut().zip(["image", "mask"]) {
            let v = field(s, name, &ctx, path)?;
            let file = resolve(as_str(v, &format!("{ctx}{name}"), path)?);
            if !file.is_file() {
                return Err(DataError::MissingFile {
                    manifest: path.to_path_buf(),
                    field: format!("{ctx}{name}"),
                    file,
                });
            }
            *slot = file;
        }
        let [image, mask] = entry;
        if let Some(&first) = seen.get(&image) {
            return Err(DataError::DuplicateSample {
                manifest: path.to_path_buf(),
                index: i,
                first,
                file: image,
            });
        }
        seen.insert(image.clone(), i);
        samples.push(SampleEntry { image, mask });
    }

    let palette = match root.get("palette") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let entries: Vec<PaletteEntry> =
                serde_json::from_value(v.clone()).map_err(|e| invalid(path, "palette", e.to_string()))?;
            let mut colors = HashSet::new();
            for e in &entries {
                if e.id != classes.ignore_label && e.id as usize >= classes.len() {
                    return Err(invalid(path, "palette", format!("id {} is not a class id", e.id)));
                }
                if !colors.insert(e.color) {
                    return Err(invalid(path, "palette", format!("colour {:?} is listed twice", e.color)));
                }
            }
            Some(entries)
        }
    };

    Ok(DatasetManifest {
        path: path.to_path_buf(),
        classes,
        samples,
        palette,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn load_mask(&self, path: &Path) -> Result<LabelMask, DataError> {
        let Some(palette) = &self.palette else {
            return load_mask_pgm(path, &self.classes);
        };
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        if bytes.starts_with(b"P5") {
            let r = decode_pgm(&bytes, path)?;
            netpbm::validate_labels(&r.bytes, r.width, &self.classes, path)?;
            return Ok(LabelMask::new(1, r.height, r.width, r.bytes));
        }
        let r = decode_ppm(&bytes, path)?;
        let mut labels = Vec::with_capacity(r.width * r.height);
        for (i, px) in r.bytes.chunks_exact(3).enumerate() {
            let color = [px[0], px[1], px[2]];
            let id = palette
                .iter()
                .find(|e| e.color == color)
                .ok_or(DataError::UnknownColor {
                    path: path.to_path_buf(),
                    x: i % r.width,
                    y: i / r.width,
                    color,
                })?
                .id;
            labels.push(id);
        }
        Ok(LabelMask::new(1, r.height, r.width, labels))
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample, DataError> {
        let entry = &self.samples[index];
        let image = load_image_ppm(&entry.image)?;
        let mask = self.load_mask(&entry.mask)?;
        let s = image.shape();
        if (s.h, s.w) != (mask.h, mask.w) {
            return Err(DataError::SizeMismatch {
                image: entry.image.clone(),
                mask: entry.mask.clone(),
                image_hw: (s.h, s.w),
                mask_hw: (mask.h, mask.w),
            });
        }
        Ok(Sample { image, mask })
    }

    /// Loads every sample into memory.
    pub fn load_dataset(&self) -> Result<Dataset, DataError> {
        let samples = (0..self.len()).map(|i| self.load_sample(i)).collect::<Result<Vec<_>, _>>()?;
        Dataset::new(self.classes.clone(), samples)
    }
}

/// One image `(1, 3, H, W)` in [0, 1] with its label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: ClassSet,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Requires a non-empty list of equally sized samples.
    pub fn new(classes: ClassSet, samples: Vec<Sample>) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::Empty)?;
        let hw = (first.mask.h, first.mask.w);
        for s in &samples {
            if (s.mask.h, s.mask.w) != hw {
                return Err(DataError::MixedSizes {
                    first: hw,
                    other: (s.mask.h, s.mask.w),
                });
            }
        }
        Ok(Self { classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Spatial size shared by every sample.
    pub fn image_hw(&self) -> (usize, usize) {
        let m = &self.samples[0].mask;
        (m.h, m.w)
    }

    pub fn image_channels(&self) -> usize {
        self.samples[0].image.shape().c
    }

    /// Stacks the listed samples into an `(N, C, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, LabelMask) {
        let (h, w) = self.image_hw();
        let c = self.image_channels();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.extend_from_slice(&self.samples[i].mask.labels);
        }
        let images = Tensor::from_vec(Shape::new(indices.len(), c, h, w), data).expect("sizes checked at construction");
        (images, LabelMask::new(indices.len(), h, w, labels))
    }
}
