//! On-disk dataset format, polygon annotations, and rasterization.
//!
//! A corpus is a directory of case directories plus a root `manifest.json`:
//!
//! ```text
//! corpus/
//!   manifest.json            corpus index, generator provenance, hashes
//!   case_0000/
//!     manifest.json          case metadata, prick layout, polygons
//!     img_01.png .. img_32.png
//!     full_light.png
//!     dark.png               optional control-image slot
//!   case_0001/ ...
//! ```
//!
//! Images are 8-bit RGB PNG. Polygons are annotated in pixel coordinates
//! and rasterized with a pixel-center even-odd rule, so they render
//! identically everywhere. Unknown manifest fields survive a load/save
//! round trip. See `docs/dataset_format.md` for the schema with a worked
//! example.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{BinaryMask, PrickLayout, RigidTransform2D};
use crate::{DIRECTIONAL_IMAGES, PRICK_COUNT};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing image index {index} ({file}) in {dir}")]
    MissingImage {
        index: usize,
        file: String,
        dir: String,
    },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("manifest error in {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("inconsistent image dims in case {case}: {details}")]
    InconsistentDims { case: String, details: String },
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// One prick test's image set: 32 directional images indexed 1–32, the
/// full-light image, and an optional dark-control slot. All images share
/// dimensions.
#[derive(Debug, Clone)]
pub struct ImageStack {
    pub case_id: String,
    pub site: String,
    pub mm_per_px: f64,
    /// `directional[k]` is image index `k + 1`.
    pub directional: Vec<RgbImage>,
    pub full_light: RgbImage,
    pub dark: Option<RgbImage>,
}

impl ImageStack {
    pub fn width(&self) -> usize {
        self.full_light.width() as usize
    }

    pub fn height(&self) -> usize {
        self.full_light.height() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.directional.len() != DIRECTIONAL_IMAGES {
            return Err(DataError::Invalid(format!(
                "stack has {} directional images, expected {DIRECTIONAL_IMAGES}",
                self.directional.len()
            )));
        }
        let dims = self.full_light.dimensions();
        for (k, img) in self.directional.iter().enumerate() {
            if img.dimensions() != dims {
                return Err(DataError::InconsistentDims {
                    case: self.case_id.clone(),
                    details: format!(
                        "img_{:02} is {:?}, full_light is {:?}",
                        k + 1,
                        img.dimensions(),
                        dims
                    ),
                });
            }
        }
        if let Some(d) = &self.dark {
            if d.dimensions() != dims {
                return Err(DataError::InconsistentDims {
                    case: self.case_id.clone(),
                    details: "dark control image dims differ".into(),
                });
            }
        }
        Ok(())
    }
}

/// Per-prick optional wheal polygon (pixel coordinates, implicitly closed)
/// plus the layout the pricks came from.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    /// Slot k annotates prick k; `None` means no wheal formed.
    pub polygons: Vec<Option<Vec<[f64; 2]>>>,
    pub layout: PrickLayout,
}

impl AnnotationSet {
    pub fn empty(layout: PrickLayout) -> Self {
        AnnotationSet {
            polygons: vec![None; PRICK_COUNT],
            layout,
        }
    }
}

/// A loaded case: images, annotations, and optional generator provenance.
#[derive(Debug, Clone)]
pub struct Case {
    pub stack: ImageStack,
    pub annotations: AnnotationSet,
    /// Transform the generator planted, when the case is synthetic.
    pub planted_transform: Option<RigidTransform2D>,
    /// Analytic wheal areas from the generator, when synthetic.
    pub true_areas_mm2: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseManifest {
    pub format_version: u32,
    pub case_id: String,
    pub site: String,
    pub mm_per_px: f64,
    pub width: u32,
    pub height: u32,
    pub prick_layout_mm: Vec<[f64; 2]>,
    pub polygons_px: Vec<Option<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_transform: Option<RigidTransform2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_areas_mm2: Option<Vec<Option<f64>>>,
    /// Fields this version does not know are preserved verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusCaseEntry {
    pub case_id: String,
    pub site: String,
    pub dir: String,
    /// SHA-256 over the case directory content (sorted file names + bytes).
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub cases: Vec<CorpusCaseEntry>,
    /// Generator configuration, embedded for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A corpus root with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus, DataError> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|_| DataError::MissingFile(path.display().to_string()))?;
        let manifest: CorpusManifest =
            serde_json::from_slice(&bytes).map_err(|e| DataError::Manifest {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.cases.is_empty()
    }

    pub fn case_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.cases[i].dir)
    }

    pub fn load_case(&self, i: usize) -> Result<Case, DataError> {
        load_case(&self.case_dir(i))
    }

    /// SHA-256 of the root manifest bytes; covers every case through the
    /// embedded per-case hashes.
    pub fn manifest_hash(&self) -> Result<String, DataError> {
        let bytes = fs::read(self.root.join("manifest.json"))?;
        Ok(hex_digest(&bytes))
    }
}

fn image_file_name(index: usize) -> String {
    format!("img_{:02}.png", index)
}

/// Reads one case directory: images by index name plus `manifest.json`.
/// A missing directional image is reported by its index.
pub fn load_case(dir: &Path) -> Result<Case, DataError> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path)
        .map_err(|_| DataError::MissingFile(manifest_path.display().to_string()))?;
    let manifest: CaseManifest =
        serde_json::from_slice(&bytes).map_err(|e| DataError::Manifest {
            path: manifest_path.display().to_string(),
            msg: e.to_string(),
        })?;
    validate_manifest(&manifest, &manifest_path)?;

    let mut directional = Vec::with_capacity(DIRECTIONAL_IMAGES);
    for index in 1..=DIRECTIONAL_IMAGES {
        let file = image_file_name(index);
        let path = dir.join(&file);
        if !path.exists() {
            return Err(DataError::MissingImage {
                index,
                file,
                dir: dir.display().to_string(),
            });
        }
        directional.push(image::open(&path)?.to_rgb8());
    }
    let full_path = dir.join("full_light.png");
    if !full_path.exists() {
        return Err(DataError::MissingFile(full_path.display().to_string()));
    }
    let full_light = image::open(&full_path)?.to_rgb8();
    let dark_path = dir.join("dark.png");
    let dark = if dark_path.exists() {
        Some(image::open(&dark_path)?.to_rgb8())
    } else {
        None
    };

    let stack = ImageStack {
        case_id: manifest.case_id.clone(),
        site: manifest.site.clone(),
        mm_per_px: manifest.mm_per_px,
        directional,
        full_light,
        dark,
    };
    stack.validate()?;
    if stack.width() != manifest.width as usize || stack.height() != manifest.height as usize {
        return Err(DataError::InconsistentDims {
            case: manifest.case_id.clone(),
            details: format!(
                "images are {}x{}, manifest says {}x{}",
                stack.width(),
                stack.height(),
                manifest.width,
                manifest.height
            ),
        });
    }

    let annotations = AnnotationSet {
        polygons: manifest.polygons_px.clone(),
        layout: PrickLayout {
            points_mm: manifest.prick_layout_mm.clone(),
            mm_per_px: manifest.mm_per_px,
        },
    };
    Ok(Case {
        stack,
        annotations,
        planted_transform: manifest.planted_transform,
        true_areas_mm2: manifest
            .true_areas_mm2
            .unwrap_or_else(|| vec![None; PRICK_COUNT]),
    })
}

fn validate_manifest(m: &CaseManifest, path: &Path) -> Result<(), DataError> {
    let fail = |msg: String| {
        Err(DataError::Manifest {
            path: path.display().to_string(),
            msg,
        })
    };
    if m.format_version != FORMAT_VERSION {
        // forward compatible: newer versions may add fields, but a version
        // we have never seen is rejected loudly
        if m.format_version == 0 || m.format_version > FORMAT_VERSION + 1 {
            return fail(format!("unsupported format_version {}", m.format_version));
        }
    }
    if m.prick_layout_mm.len() != PRICK_COUNT {
        return fail(format!(
            "prick_layout_mm has {} points, expected {PRICK_COUNT}",
            m.prick_layout_mm.len()
        ));
    }
    if m.polygons_px.len() != PRICK_COUNT {
        return fail(format!(
            "polygons_px has {} slots, expected {PRICK_COUNT}",
            m.polygons_px.len()
        ));
    }
    if !(m.mm_per_px > 0.0) {
        return fail(format!("mm_per_px must be positive, got {}", m.mm_per_px));
    }
    for (k, poly) in m.polygons_px.iter().enumerate() {
        if let Some(p) = poly {
            if p.len() < 3 {
                return fail(format!("polygon {k} has {} vertices", p.len()));
            }
            for v in p {
                if v[0] < 0.0 || v[1] < 0.0 || v[0] > f64::from(m.width) || v[1] > f64::from(m.height)
                {
                    return fail(format!("polygon {k} vertex {v:?} outside image bounds"));
                }
            }
        }
    }
    Ok(())
}

/// Writes a case directory atomically: everything lands in a temp sibling
/// which is then renamed over the target.
pub fn save_case(case: &Case, dir: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<(), DataError> {
    case.stack.validate()?;
    let parent = dir
        .parent()
        .ok_or_else(|| DataError::Invalid(format!("case dir {} has no parent", dir.display())))?;
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        case.stack.case_id,
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;

    let manifest = CaseManifest {
        format_version: FORMAT_VERSION,
        case_id: case.stack.case_id.clone(),
        site: case.stack.site.clone(),
        mm_per_px: case.stack.mm_per_px,
        width: case.stack.full_light.width(),
        height: case.stack.full_light.height(),
        prick_layout_mm: case.annotations.layout.points_mm.clone(),
        polygons_px: case.annotations.polygons.clone(),
        planted_transform: case.planted_transform,
        true_areas_mm2: if case.true_areas_mm2.iter().any(Option::is_some) {
            Some(case.true_areas_mm2.clone())
        } else {
            None
        },
        extra,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Manifest {
        path: tmp.join("manifest.json").display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(tmp.join("manifest.json"), json)?;

    for (k, img) in case.stack.directional.iter().enumerate() {
        img.save(tmp.join(image_file_name(k + 1)))?;
    }
    case.stack.full_light.save(tmp.join("full_light.png"))?;
    if let Some(dark) = &case.stack.dark {
        dark.save(tmp.join("dark.png"))?;
    }

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// SHA-256 over a case directory's content: file names (sorted) and bytes.
pub fn case_content_hash(dir: &Path) -> Result<String, DataError> {
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.insert(entry.file_name().to_string_lossy().into_owned(), entry.path());
        }
    }
    let mut hasher = Sha256::new();
    for (name, path) in files {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(path)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Rasterizes one closed polygon with the pixel-center even-odd rule: a
/// pixel is inside iff its center (x + 0.5, y + 0.5) crosses the boundary an
/// odd number of times. Edges are half-open in y so shared vertices count
/// once.
pub fn rasterize_polygon(
    polygon: &[[f64; 2]],
    width: usize,
    height: usize,
) -> Result<BinaryMask, DataError> {
    if polygon.len() < 3 {
        return Err(DataError::DegeneratePolygon(polygon.len()));
    }
    let mut mask = BinaryMask::empty(width, height);
    let n = polygon.len();
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let [x1, y1] = polygon[i];
            let [x2, y2] = polygon[(i + 1) % n];
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centers in [pair0, pair1): x + 0.5 >= pair0 and < pair1
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let stop = ((pair[1] - 0.5).ceil() as isize).min(width as isize);
            for x in start as isize..stop {
                mask.set(x as usize, y, true);
            }
        }
    }
    Ok(mask)
}

/// Union of every annotated polygon, rasterized. This is the pixel-level
/// training target.
pub fn union_gt_mask(
    annotations: &AnnotationSet,
    width: usize,
    height: usize,
) -> Result<BinaryMask, DataError> {
    let mut mask = BinaryMask::empty(width, height);
    for poly in annotations.polygons.iter().flatten() {
        let m = rasterize_polygon(poly, width, height)?;
        for (dst, src) in mask.data.iter_mut().zip(&m.data) {
            *dst |= *src;
        }
    }
    Ok(mask)
}
