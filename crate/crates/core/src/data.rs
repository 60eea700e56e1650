//! Image datasets: the bundled digits set, synthetic blobs, and directory-backed
//! datasets described by a manifest. Images are stored normalized, `[n, c, h, w]`.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the root of directory-backed datasets.
pub const DATA_ROOT_ENV: &str = "RDFCIL_DATA_ROOT";

static DIGITS_GZ: &[u8] = include_bytes!("../data/digits.csv.gz");

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn cifar100() -> Self {
        Normalization {
            mean: vec![0.5071, 0.4867, 0.4408],
            std: vec![0.2675, 0.2565, 0.2761],
        }
    }

    pub fn tiny_imagenet() -> Self {
        Normalization {
            mean: vec![0.4803, 0.4481, 0.3976],
            std: vec![0.2764, 0.2688, 0.2816],
        }
    }

    pub fn imagenet() -> Self {
        Normalization {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    /// Channel statistics of raw `[n, c, h, w]` pixels. Zero deviations become 1.
    pub fn fit(raw: &Tensor<f32>) -> Self {
        let (n, c) = (raw.dim(0), raw.dim(1));
        let sp = raw.numel() / (n * c).max(1);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, chunk) in raw.data().chunks(sp.max(1)).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (n * sp).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = s / count - *m * *m;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, images: &mut Tensor<f32>) {
        let c = images.dim(1);
        let sp = images.numel() / (images.dim(0) * c).max(1);
        for (i, chunk) in images.data_mut().chunks_mut(sp.max(1)).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch] as f32, self.std[ch] as f32);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Back to `[0, 1]` pixel space.
    pub fn invert(&self, images: &mut Tensor<f32>) {
        let c = images.dim(1);
        let sp = images.numel() / (images.dim(0) * c).max(1);
        for (i, chunk) in images.data_mut().chunks_mut(sp.max(1)).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch] as f32, self.std[ch] as f32);
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
    }
}

/// Random crop from a zero-padded image plus optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub pad: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation { pad: 0, flip: false };

    pub fn standard() -> Self {
        Augmentation { pad: 4, flip: true }
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && !self.flip
    }

    /// Augment a normalized `[n, c, h, w]` batch in place. Padding is zero in normalized space.
    pub fn apply<R: Rng + ?Sized>(&self, images: &mut Tensor<f32>, rng: &mut R) {
        if self.is_identity() {
            return;
        }
        let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
        let per = c * h * w;
        let p = self.pad as i64;
        let mut buf = vec![0.0f32; per];
        for s in 0..n {
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            let flip = self.flip && rng.random_bool(0.5);
            let img = &mut images.data_mut()[s * per..(s + 1) * per];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        buf[(ch * h + y) * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            img.copy_from_slice(&buf);
        }
    }
}

/// Images and their integer class ids.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("gather shape")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    /// (height, width, channels)
    pub image_shape: (usize, usize, usize),
    pub train: Split,
    pub test: Split,
    pub normalization: Normalization,
    pub augmentation: Augmentation,
}

impl Dataset {
    fn build(
        name: &str,
        n_classes: usize,
        image_shape: (usize, usize, usize),
        mut train: Split,
        mut test: Split,
        normalization: Option<Normalization>,
        augmentation: Augmentation,
    ) -> Result<Dataset> {
        let norm = normalization.unwrap_or_else(|| Normalization::fit(&train.images));
        if norm.channels() != image_shape.2 {
            return Err(Error::invalid(format!(
                "normalization for {} channels on {}-channel images",
                norm.channels(),
                image_shape.2
            )));
        }
        norm.apply(&mut train.images);
        norm.apply(&mut test.images);
        Ok(Dataset {
            name: name.to_string(),
            n_classes,
            image_shape,
            train,
            test,
            normalization: norm,
            augmentation,
        })
    }
}

/// Which dataset to load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// The bundled 8x8 handwritten digits (10 classes).
    Digits,
    /// Gaussian blobs rendered as 8x8 RGB images.
    Blobs {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
    /// `manifest.csv` (columns `split,label,path`) under `path`, or under the
    /// data-root environment variable when `path` is relative.
    Directory {
        path: PathBuf,
        /// `cifar100`, `tiny-imagenet`, `imagenet`, or `fit`.
        normalization: String,
        #[serde(default)]
        class_list: Option<PathBuf>,
        #[serde(default)]
        augmentation: Option<Augmentation>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Digits
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Digits => digits(),
            DatasetSpec::Blobs {
                classes,
                train_per_class,
                test_per_class,
                seed,
            } => blobs(*classes, *train_per_class, *test_per_class, *seed),
            DatasetSpec::Directory {
                path,
                normalization,
                class_list,
                augmentation,
            } => {
                let root = resolve_root(path);
                let norm = match normalization.as_str() {
                    "cifar100" => Some(Normalization::cifar100()),
                    "tiny-imagenet" => Some(Normalization::tiny_imagenet()),
                    "imagenet" => Some(Normalization::imagenet()),
                    "fit" => None,
                    other => {
                        return Err(Error::Config {
                            key: "dataset.normalization".into(),
                            message: format!("unknown normalization preset {:?}", other),
                        })
                    }
                };
                let classes = class_list.as_ref().map(|p| resolve_in(&root, p));
                load_dir(
                    &root,
                    norm,
                    classes.as_deref(),
                    augmentation.unwrap_or_else(Augmentation::standard),
                )
            }
        }
    }
}

fn resolve_root(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn resolve_in(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// 1797 grayscale 8x8 digits, intensities scaled to `[0, 1]` and replicated to three
/// channels. The last fifth of each class (file order) is the test split.
pub fn digits() -> Result<Dataset> {
    let mut text = String::new();
    GzDecoder::new(DIGITS_GZ)
        .read_to_string(&mut text)
        .map_err(|e| Error::format("digits", e.to_string()))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows: Vec<(Vec<f32>, usize)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format("digits", e.to_string()))?;
        if rec.len() != 65 {
            return Err(Error::format("digits", format!("row with {} fields", rec.len())));
        }
        let vals: Vec<f32> = rec
            .iter()
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("digits", e.to_string()))?;
        rows.push((vals[..64].iter().map(|v| v / 16.0).collect(), vals[64] as usize));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, (_, y)) in rows.iter().enumerate() {
        by_class[*y].push(i);
    }
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for members in &by_class {
        let n_test = members.len() / 5;
        let cut = members.len() - n_test;
        train_idx.extend_from_slice(&members[..cut]);
        test_idx.extend_from_slice(&members[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let make = |idx: &[usize]| -> Result<Split> {
        let mut data = Vec::with_capacity(idx.len() * 192);
        for &i in idx {
            for _ in 0..3 {
                data.extend_from_slice(&rows[i].0);
            }
        }
        Ok(Split {
            images: Tensor::new(vec![idx.len(), 3, 8, 8], data)?,
            labels: idx.iter().map(|&i| rows[i].1).collect(),
        })
    };
    Dataset::build(
        "digits",
        10,
        (8, 8, 3),
        make(&train_idx)?,
        make(&test_idx)?,
        None,
        Augmentation { pad: 1, flip: false },
    )
}

/// Each class is a random 8x8 RGB prototype; samples add isotropic Gaussian noise.
pub fn blobs(classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || train_per_class == 0 || test_per_class == 0 {
        return Err(Error::invalid("blobs need positive class and sample counts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * 8 * 8;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| rng.random::<f32>()).collect())
        .collect();
    let mut make = |count: usize| -> Result<Split> {
        let mut data = Vec::with_capacity(classes * count * per);
        let mut labels = Vec::with_capacity(classes * count);
        for (y, p) in protos.iter().enumerate() {
            for _ in 0..count {
                for &v in p {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    data.push(v + 0.2 * z);
                }
                labels.push(y);
            }
        }
        Ok(Split {
            images: Tensor::new(vec![labels.len(), 3, 8, 8], data)?,
            labels,
        })
    };
    let train = make(train_per_class)?;
    let test = make(test_per_class)?;
    Dataset::build("blobs", classes, (8, 8, 3), train, test, None, Augmentation::NONE)
}

fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_c = info.color_type.samples();
    let c = if src_c >= 3 { 3 } else { 1 };
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * info.line_size + x * src_c..];
            for ch in 0..c {
                out[(ch * h + y) * w + x] = px[ch] as f32 / 255.0;
            }
        }
    }
    Ok((h, w, c, out))
}

/// Load `root/manifest.csv` (`split,label,path`, split is `train` or `test`).
///
/// With a class list (one integer label per line) only those classes are kept,
/// relabelled `0..k` in list order. Images must share one size.
pub fn load_dir(
    root: &Path,
    normalization: Option<Normalization>,
    class_list: Option<&Path>,
    augmentation: Augmentation,
) -> Result<Dataset> {
    let manifest = root.join("manifest.csv");
    let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| Error::format(&manifest, e.to_string()))?;
    let keep: Option<Vec<usize>> = match class_list {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.trim().parse::<usize>().map_err(|e| Error::format(p, e.to_string())))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut splits = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let mut max_label = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(&manifest, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::format(&manifest, "expected columns split,label,path"));
        }
        let which = match rec[0].trim() {
            "train" => 0,
            "test" => 1,
            other => return Err(Error::format(&manifest, format!("unknown split {:?}", other))),
        };
        let raw: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::format(&manifest, format!("bad label {:?}", &rec[1])))?;
        let label = match &keep {
            Some(k) => match k.iter().position(|&c| c == raw) {
                Some(pos) => pos,
                None => continue,
            },
            None => raw,
        };
        max_label = max_label.max(label);
        let (h, w, c, px) = read_png(&root.join(rec[2].trim()))?;
        match shape {
            None => shape = Some((h, w, c)),
            Some(s) if s != (h, w, c) => {
                return Err(Error::format(&manifest, format!("mixed image sizes {:?} and {:?}", s, (h, w, c))))
            }
            _ => {}
        }
        splits[which].0.extend(px);
        splits[which].1.push(label);
    }
    let (h, w, c) = shape.ok_or_else(|| Error::format(&manifest, "no images"))?;
    let n_classes = keep.as_ref().map_or(max_label + 1, |k| k.len());
    let [(tr_px, tr_y), (te_px, te_y)] = splits;
    let train = Split {
        images: Tensor::new(vec![tr_y.len(), c, h, w], tr_px)?,
        labels: tr_y,
    };
    let test = Split {
        images: Tensor::new(vec![te_y.len(), c, h, w], te_px)?,
        labels: te_y,
    };
    let name = root.file_name().map_or("directory".into(), |n| n.to_string_lossy().into_owned());
    Dataset::build(&name, n_classes, (h, w, c), train, test, normalization, augmentation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_split_sizes() {
        let d = digits().unwrap();
        assert_eq!(d.train.len() + d.test.len(), 1797);
        assert_eq!(d.n_classes, 10);
        for y in 0..10 {
            let tr = d.train.labels.iter().filter(|&&l| l == y).count();
            let te = d.test.labels.iter().filter(|&&l| l == y).count();
            assert_eq!(te, (tr + te) / 5);
        }
        let m: f32 = d.train.images.data().iter().sum::<f32>() / d.train.images.numel() as f32;
        assert!(m.abs() < 1e-4);
    }

    #[test]
    fn flip_only_mirrors() {
        let mut t = Tensor::new(vec![1, 1, 1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let aug = Augmentation { pad: 0, flip: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            aug.apply(&mut t, &mut rng);
            assert!(t.data() == [1.0, 2.0, 3.0] || t.data() == [3.0, 2.0, 1.0]);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let raw = Tensor::new(vec![2, 1, 1, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let n = Normalization::fit(&raw);
        let mut x = raw.clone();
        n.apply(&mut x);
        n.invert(&mut x);
        assert!(x.max_abs_diff(&raw) < 1e-6);
    }
}
