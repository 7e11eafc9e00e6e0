//! Procedural cross-domain datasets.
//!
//! Content comes from ten shape families; style comes from a corruption
//! applied to one or both halves of the class split. The first `K/2`
//! classes are seen (labeled), the rest are novel (unlabeled).

pub mod augment;
pub mod corrupt;
pub mod shapes;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{io as cdt1, Tensor};

pub use augment::augment;
pub use corrupt::{apply_corruption, Corruption};
pub use shapes::generate_content;

/// A square grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f32>,
}

/// Where the corruption goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Labeled half clean, unlabeled half corrupted.
    Cmix,
    /// Both halves corrupted.
    Call,
    /// Both halves clean.
    None,
}

impl ShiftMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cmix" => Ok(Self::Cmix),
            "call" => Ok(Self::Call),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown shift mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cmix => "cmix",
            Self::Call => "call",
            Self::None => "none",
        }
    }

    fn corrupts(self, seen: bool) -> bool {
        match self {
            Self::Cmix => !seen,
            Self::Call => true,
            Self::None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub corruption: Corruption,
    pub severity: u8,
    pub shift_mode: ShiftMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            num_classes: 10,
            samples_per_class: 100,
            corruption: Corruption::GaussianBlur,
            severity: 5,
            shift_mode: ShiftMode::Cmix,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        if self.num_classes < 2 || self.num_classes % 2 != 0 || self.num_classes > shapes::NUM_FAMILIES {
            return Err(Error::Config(format!(
                "num_classes must be even and in 2..={}, got {}",
                shapes::NUM_FAMILIES,
                self.num_classes
            )));
        }
        if self.image_size < shapes::MIN_SIZE {
            return Err(Error::Config(format!("image_size must be at least {}", shapes::MIN_SIZE)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn num_seen(&self) -> usize {
        self.num_classes / 2
    }

    pub fn seen_classes(&self) -> std::ops::Range<usize> {
        0..self.num_seen()
    }

    pub fn novel_classes(&self) -> std::ops::Range<usize> {
        self.num_seen()..self.num_classes
    }
}

/// Images with class ids and a domain tag (0 clean, 1 corrupted).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Subset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub domains: Vec<u8>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[n, size*size]` batch of the listed rows.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor<f32>> {
        images_to_tensor(rows.iter().map(|&i| &self.images[i]))
    }

    fn extend(&mut self, other: Subset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.domains.extend(other.domains);
    }
}

pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut size = None;
    for im in images {
        if *size.get_or_insert(im.size) != im.size {
            return Err(Error::Shape("images differ in size".into()));
        }
        data.extend_from_slice(&im.pixels);
        count += 1;
    }
    let s = size.ok_or_else(|| Error::Shape("empty image batch".into()))?;
    Tensor::new(vec![count, s * s], data)
}

/// Seen classes as the labeled set, novel classes as the unlabeled set.
/// Unlabeled labels are kept for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub spec: SyntheticSpec,
    pub labeled: Subset,
    pub unlabeled: Subset,
}

fn class_subset(spec: &SyntheticSpec, class: usize) -> Result<Subset> {
    let clean = generate_content(class, spec.samples_per_class, spec.image_size, spec.seed)?;
    let corrupt = spec.shift_mode.corrupts(class < spec.num_seen()) && spec.corruption != Corruption::None;
    let images = clean
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            if corrupt {
                let seed = derive_seed(&[spec.seed, class as u64, i as u64]);
                apply_corruption(&img, spec.corruption, spec.severity, seed)
            } else {
                Ok(img)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = images.len();
    Ok(Subset { images, labels: vec![class; n], domains: vec![u8::from(corrupt); n] })
}

pub fn build_split(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let per_class: Vec<Subset> = (0..spec.num_classes)
        .into_par_iter()
        .map(|c| class_subset(spec, c))
        .collect::<Result<_>>()?;
    let mut labeled = Subset::default();
    let mut unlabeled = Subset::default();
    for (c, s) in per_class.into_iter().enumerate() {
        if c < spec.num_seen() {
            labeled.extend(s);
        } else {
            unlabeled.extend(s);
        }
    }
    Ok(DatasetSplit { spec: *spec, labeled, unlabeled })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    seen_classes: Vec<usize>,
    novel_classes: Vec<usize>,
}

impl DatasetSplit {
    /// Writes `manifest.json`, `images.cdt1`, `labels.cdt1` and
    /// `domains.cdt1`; labeled rows come first.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let all: Vec<&Image> = self.labeled.images.iter().chain(&self.unlabeled.images).collect();
        let n = all.len();
        let s = self.spec.image_size;
        let images = images_to_tensor(all)?.reshape(&[n, s, s])?;
        let labels: Vec<f32> = self.labeled.labels.iter().chain(&self.unlabeled.labels).map(|&l| l as f32).collect();
        let domains: Vec<f32> = self.labeled.domains.iter().chain(&self.unlabeled.domains).map(|&d| d as f32).collect();
        cdt1::write(dir.join("images.cdt1"), &images)?;
        cdt1::write(dir.join("labels.cdt1"), &Tensor::new(vec![n], labels)?)?;
        cdt1::write(dir.join("domains.cdt1"), &Tensor::new(vec![n], domains)?)?;
        let manifest = Manifest {
            spec: self.spec,
            n_labeled: self.labeled.len(),
            n_unlabeled: self.unlabeled.len(),
            seen_classes: self.spec.seen_classes().collect(),
            novel_classes: self.spec.novel_classes().collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        manifest.spec.validate()?;
        let images = cdt1::read(dir.join("images.cdt1"))?;
        let labels = cdt1::read(dir.join("labels.cdt1"))?;
        let domains = cdt1::read(dir.join("domains.cdt1"))?;
        let s = manifest.spec.image_size;
        let n = manifest.n_labeled + manifest.n_unlabeled;
        if images.dims() != [n, s, s] || labels.dims() != [n] || domains.dims() != [n] {
            return Err(Error::Format("dataset files disagree with manifest".into()));
        }
        let mut split = DatasetSplit { spec: manifest.spec, labeled: Subset::default(), unlabeled: Subset::default() };
        for i in 0..n {
            let target = if i < manifest.n_labeled { &mut split.labeled } else { &mut split.unlabeled };
            target.images.push(Image { size: s, pixels: images.data()[i * s * s..(i + 1) * s * s].to_vec() });
            target.labels.push(labels.data()[i] as usize);
            target.domains.push(domains.data()[i] as u8);
        }
        Ok(split)
    }
}
