//! Stereo folder ingestion, splitting, patch extraction and color augmentation.
//!
//! A dataset lives under `root/<left_dir>` and `root/<right_dir>`; the two
//! folders must hold the same file names, which are paired in sorted order.
//! Split files are plain text with one source id (the file stem) per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::netdef::ENCODER_STRIDE;
use crate::tensor::ImageTensor;

/// Evaluation frames are center-cropped to this `(height, width)`.
pub const EVAL_CROP: (usize, usize) = (256, 512);

pub const TRAIN_SPLIT_FILE: &str = "train.txt";
pub const VAL_SPLIT_FILE: &str = "val.txt";

/// A rectified stereo pair normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: ImageTensor,
    pub right: ImageTensor,
    pub source_id: String,
}

impl StereoSample {
    pub fn new(
        left: ImageTensor,
        right: ImageTensor,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if left.shape() != right.shape() || left.channels() != 3 {
            return Err(Error::shape("StereoSample", left.shape(), right.shape()));
        }
        Ok(StereoSample {
            left,
            right,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(StereoSample {
            left: self.left.crop(top, left, h, w)?,
            right: self.right.crop(top, left, h, w)?,
            source_id: self.source_id.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    /// Every pair, unsplit.
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub left_dir: String,
    pub right_dir: String,
    pub glob: String,
    pub split: Split,
    /// `(height, width)` of training crops.
    pub patch: (usize, usize),
    pub augment_fraction: f64,
    /// Number of pairs held out for validation.
    pub val_count: usize,
    /// Directory holding `train.txt` / `val.txt`; used instead of a seeded split when present.
    pub split_dir: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            root: PathBuf::from("data"),
            left_dir: "left".into(),
            right_dir: "right".into(),
            glob: "*.png".into(),
            split: Split::Train,
            patch: (256, 256),
            augment_fraction: 0.2,
            val_count: 35,
            split_dir: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.patch;
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: ENCODER_STRIDE,
            });
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::InvalidArgument(format!(
                "augment fraction {} outside [0, 1]",
                self.augment_fraction
            )));
        }
        glob::Pattern::new(&self.glob)
            .map_err(|e| Error::InvalidArgument(format!("bad file glob `{}`: {e}", self.glob)))?;
        Ok(())
    }
}

/// One pair of files on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub source_id: String,
    pub left: PathBuf,
    pub right: PathBuf,
}

impl PairEntry {
    pub fn load(&self) -> Result<StereoSample> {
        let left = imageio::load_image(&self.left)?;
        let right = imageio::load_image(&self.right)?;
        if left.shape() != right.shape() {
            return Err(Error::Dataset(format!(
                "pair `{}` has mismatched sizes {} and {}",
                self.source_id,
                left.shape(),
                right.shape()
            )));
        }
        StereoSample::new(left, right, &self.source_id)
    }
}

/// Ordered pair list with a reproducible train/validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub pairs: Vec<PairEntry>,
    /// Positions into `pairs`, ascending.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl DatasetIndex {
    /// Pairs belonging to `split`.
    pub fn entries(&self, split: Split) -> Vec<&PairEntry> {
        match split {
            Split::Train => self.train.iter().map(|&i| &self.pairs[i]).collect(),
            Split::Val => self.val.iter().map(|&i| &self.pairs[i]).collect(),
            Split::Test => self.pairs.iter().collect(),
        }
    }

    pub fn write_split(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, ids) in [(TRAIN_SPLIT_FILE, &self.train), (VAL_SPLIT_FILE, &self.val)] {
            let mut text = String::new();
            for &i in ids {
                text.push_str(&self.pairs[i].source_id);
                text.push('\n');
            }
            let p = dir.join(file);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn list_dir(dir: &Path, pattern: &glob::Pattern) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && pattern.matches(&name) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Indexes the dataset and splits it, reproducibly from `seed`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetIndex> {
    spec.validate()?;
    let pattern = glob::Pattern::new(&spec.glob).expect("validated");
    let ldir = spec.root.join(&spec.left_dir);
    let rdir = spec.root.join(&spec.right_dir);
    let left = list_dir(&ldir, &pattern)?;
    let right = list_dir(&rdir, &pattern)?;
    if let Some(name) = left.iter().find(|n| right.binary_search(n).is_err()) {
        return Err(Error::Dataset(format!(
            "unpaired file {}",
            ldir.join(name).display()
        )));
    }
    if let Some(name) = right.iter().find(|n| left.binary_search(n).is_err()) {
        return Err(Error::Dataset(format!(
            "unpaired file {}",
            rdir.join(name).display()
        )));
    }
    if left.is_empty() {
        return Err(Error::Dataset(format!(
            "no `{}` pairs under {}",
            spec.glob,
            spec.root.display()
        )));
    }

    let mut pairs = Vec::with_capacity(left.len());
    for name in &left {
        let entry = PairEntry {
            source_id: Path::new(name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.clone()),
            left: ldir.join(name),
            right: rdir.join(name),
        };
        // decode headers now so bad files fail at indexing time
        let dl = image::image_dimensions(&entry.left).map_err(|source| Error::Image {
            path: entry.left.clone(),
            source,
        })?;
        let dr = image::image_dimensions(&entry.right).map_err(|source| Error::Image {
            path: entry.right.clone(),
            source,
        })?;
        if dl != dr {
            return Err(Error::Dataset(format!(
                "pair `{name}` has mismatched sizes {dl:?} and {dr:?}"
            )));
        }
        pairs.push(entry);
    }

    if let Some(dir) = spec
        .split_dir
        .as_ref()
        .filter(|d| d.join(VAL_SPLIT_FILE).exists())
    {
        let position = |id: &String| {
            pairs
                .iter()
                .position(|p| &p.source_id == id)
                .ok_or_else(|| Error::Dataset(format!("split file names unknown pair `{id}`")))
        };
        let mut val = read_ids(&dir.join(VAL_SPLIT_FILE))?
            .iter()
            .map(position)
            .collect::<Result<Vec<_>>>()?;
        val.sort_unstable();
        val.dedup();
        let train = (0..pairs.len())
            .filter(|i| val.binary_search(i).is_err())
            .collect();
        return Ok(DatasetIndex { pairs, train, val });
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = spec.val_count.min(pairs.len());
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(DatasetIndex { pairs, train, val })
}

/// Crop offsets `(top, left)`, uniform over all valid positions.
pub fn patch_offsets(
    height: usize,
    width: usize,
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    let (ph, pw) = patch;
    if ph > height || pw > width {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} is smaller than patch {ph}x{pw}"
        )));
    }
    Ok((
        rng.gen_range(0..=height - ph),
        rng.gen_range(0..=width - pw),
    ))
}

/// Random crop with the same coordinates in both views.
pub fn extract_patch(
    sample: &StereoSample,
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> Result<StereoSample> {
    let (top, left) = patch_offsets(sample.height(), sample.width(), patch, rng)?;
    sample.crop(top, left, patch.0, patch.1)
}

/// Centered crop of `(height, width)`.
pub fn center_crop(sample: &StereoSample, size: (usize, usize)) -> Result<StereoSample> {
    let (top, left) = center_offsets(sample.height(), sample.width(), size)?;
    sample.crop(top, left, size.0, size.1)
}

/// `(top, left)` of a centered `size` window.
pub fn center_offsets(height: usize, width: usize, size: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = size;
    if h > height || w > width {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} is smaller than crop {h}x{w}"
        )));
    }
    Ok(((height - h) / 2, (width - w) / 2))
}

/// Centered crop of a single image, as used for evaluation frames.
pub fn center_crop_image(t: &ImageTensor, size: (usize, usize)) -> Result<ImageTensor> {
    let (top, left) = center_offsets(t.height(), t.width(), size)?;
    t.crop(top, left, size.0, size.1)
}

/// Applies gamma `g` then brightness `b` in [0, 1] space, clipping the result.
pub fn photometric(sample: &StereoSample, gamma: f32, brightness: f32) -> StereoSample {
    if gamma == 1.0 && brightness == 1.0 {
        return sample.clone();
    }
    let f = |v: f32| {
        let p = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        (2.0 * p.powf(gamma) * brightness - 1.0).clamp(-1.0, 1.0)
    };
    StereoSample {
        left: sample.left.map(f),
        right: sample.right.map(f),
        source_id: sample.source_id.clone(),
    }
}

/// With probability `fraction`, applies one random gamma and brightness draw
/// from [0.8, 1.2] to both views.
pub fn augment(sample: &StereoSample, rng: &mut impl Rng, fraction: f64) -> StereoSample {
    if fraction <= 0.0 || rng.gen::<f64>() >= fraction {
        return sample.clone();
    }
    let g = rng.gen_range(0.8f32..=1.2);
    let b = rng.gen_range(0.8f32..=1.2);
    photometric(sample, g, b)
}

/// Groups `0..n` into batches.
///
/// Training order (`rng` given) is shuffled and drops the trailing partial
/// batch; evaluation order keeps every sample in sequence.
pub fn batches(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    match rng {
        Some(rng) => {
            order.shuffle(rng);
            order
                .chunks_exact(batch_size)
                .map(<[usize]>::to_vec)
                .collect()
        }
        None => order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    }
}

/// Procedural rectified pair: a smooth random texture `T` with
/// `left(x) = T(x)` and `right(x) = T(x + disparity)`.
///
/// Useful for desk-scale runs and tests; the true disparity is known exactly.
pub fn synthetic_pair(height: usize, width: usize, disparity: f32, seed: u64) -> StereoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a few low-frequency waves per channel, amplitudes summing to 0.9
    let waves: Vec<[(f32, f32, f32, f32); 4]> = (0..3)
        .map(|_| {
            [0; 4].map(|_| {
                (
                    rng.gen_range(0.05f32..0.35),
                    rng.gen_range(-0.2f32..0.2),
                    rng.gen_range(0.0f32..std::f32::consts::TAU),
                    0.225f32,
                )
            })
        })
        .collect();
    let texture = |c: usize, y: f32, x: f32| {
        waves[c]
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
            .sum::<f32>()
    };
    let shape = crate::tensor::Shape::new(3, height, width);
    let left = ImageTensor::from_fn(shape, |c, y, x| texture(c, y as f32, x as f32));
    let right = ImageTensor::from_fn(shape, |c, y, x| texture(c, y as f32, x as f32 + disparity));
    StereoSample {
        left,
        right,
        source_id: format!("synthetic-{seed}"),
    }
}

/// Training input: either decoded samples or pairs read from disk on demand.
#[derive(Clone, Debug)]
pub enum SampleSource {
    Memory(StereoSample),
    Disk(PairEntry),
}

impl SampleSource {
    pub fn load(&self) -> Result<StereoSample> {
        match self {
            SampleSource::Memory(s) => Ok(s.clone()),
            SampleSource::Disk(e) => e.load(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub train: Vec<SampleSource>,
    pub val: Vec<SampleSource>,
}

impl TrainingData {
    pub fn from_samples(train: Vec<StereoSample>, val: Vec<StereoSample>) -> Self {
        TrainingData {
            train: train.into_iter().map(SampleSource::Memory).collect(),
            val: val.into_iter().map(SampleSource::Memory).collect(),
        }
    }

    pub fn from_index(index: &DatasetIndex) -> Self {
        let src = |ids: &[usize]| {
            ids.iter()
                .map(|&i| SampleSource::Disk(index.pairs[i].clone()))
                .collect()
        };
        TrainingData {
            train: src(&index.train),
            val: src(&index.val),
        }
    }
}
