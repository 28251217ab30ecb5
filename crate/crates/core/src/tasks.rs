//! Task sequences: toy 2-D tasks, rotated digits and class splits.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Dataset;

/// Environment variable naming the directory with IDX digit files.
pub const DATA_ROOT_ENV: &str = "LOSSLAB_DATA";

pub const DEFAULT_ANGLES: [f64; 5] = [-45.0, -22.5, 0.0, 22.5, 45.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes one row per sample: `task_id, split, label, x_0, ..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task_id".to_string(), "split".into(), "label".into()];
        header.extend((0..self.input_dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (t, task) in self.tasks.iter().enumerate() {
            for (split, d) in [("train", &task.train), ("test", &task.test)] {
                for i in 0..d.len() {
                    let mut row = vec![(t + 1).to_string(), split.to_string(), d.labels()[i].to_string()];
                    row.extend(d.sample(i).iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        crate::checkpoint::write_atomic(path, &bytes)
    }
}

/// Class-blob centres of the three toy tasks: centre, bottom-left, top-right.
pub const TOY_CENTERS: [[[f64; 2]; 2]; 3] = [
    [[0.42, 0.50], [0.58, 0.50]],
    [[0.20, 0.28], [0.20, 0.12]],
    [[0.88, 0.80], [0.72, 0.80]],
];

pub const TOY_STD: f64 = 0.04;

/// Three two-class Gaussian-blob tasks in the unit square.
pub fn toy_geometric(seed: u64, n_per_class: usize) -> Result<TaskSequence> {
    if n_per_class < 10 {
        return Err(Error::InvalidArgument(format!("n_per_class must be at least 10, got {n_per_class}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_STD).unwrap();
    let mut tasks = Vec::new();
    for (t, centers) in TOY_CENTERS.iter().enumerate() {
        let make = |rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut rows = Vec::with_capacity(2 * n_per_class);
            let mut labels = Vec::with_capacity(2 * n_per_class);
            for i in 0..2 * n_per_class {
                let c = i % 2;
                let x = (centers[c][0] + noise.sample(rng)).clamp(0.0, 1.0);
                let y = (centers[c][1] + noise.sample(rng)).clamp(0.0, 1.0);
                rows.push(vec![x, y]);
                labels.push(c);
            }
            Dataset::from_rows(&rows, labels, t + 1)
        };
        let train = make(&mut rng)?;
        let test = make(&mut rng)?;
        tasks.push(TaskData { train, test });
    }
    Ok(TaskSequence {
        tasks,
        input_dim: 2,
        n_classes: 2,
    })
}

/// Square grayscale images in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn bilinear_sample(img: &[f64], side: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let px = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= side as f64 || cc >= side as f64 {
            0.0
        } else {
            img[rr as usize * side + cc as usize]
        }
    };
    let mut v = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let w = wr * wc;
            if w != 0.0 {
                v += w * px(r0 + dr, c0 + dc);
            }
        }
    }
    v
}

/// Bilinear rotation by `angle_deg` (counter-clockwise) about the image
/// centre; pixels sampled from outside the frame read as 0.
pub fn rotate_bilinear(img: &[f64], side: usize, angle_deg: f64) -> Vec<f64> {
    if angle_deg == 0.0 {
        return img.to_vec();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let ctr = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            // inverse map: rotate the output coordinate by −angle
            let y = ctr - r as f64;
            let x = col as f64 - ctr;
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            out[r * side + col] = bilinear_sample(img, side, ctr - ys, xs + ctr);
        }
    }
    out
}

/// Bilinear resampling to `side_out × side_out` with pixel centres aligned.
pub fn downscale_bilinear(img: &[f64], side_in: usize, side_out: usize) -> Vec<f64> {
    if side_in == side_out {
        return img.to_vec();
    }
    let scale = side_in as f64 / side_out as f64;
    let mut out = vec![0.0; side_out * side_out];
    let clampf = |v: f64| v.clamp(0.0, side_in as f64 - 1.0);
    for r in 0..side_out {
        for c in 0..side_out {
            let sr = clampf((r as f64 + 0.5) * scale - 0.5);
            let sc = clampf((c as f64 + 0.5) * scale - 0.5);
            out[r * side_out + c] = bilinear_sample(img, side_in, sr, sc);
        }
    }
    out
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::MalformedIdx {
            offset,
            reason: "truncated header".into(),
        })
}

/// Parses an IDX file of unsigned bytes; returns the dimensions and data.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::MalformedIdx {
            offset: 0,
            reason: "file shorter than the magic number".into(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::MalformedIdx {
            offset: 0,
            reason: "magic number must start with two zero bytes".into(),
        });
    }
    if bytes[2] != 0x08 {
        return Err(Error::MalformedIdx {
            offset: 2,
            reason: format!("unsupported element type 0x{:02x}", bytes[2]),
        });
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::MalformedIdx {
            offset: 3,
            reason: "zero dimensions".into(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    if bytes.len() != start + count {
        return Err(Error::MalformedIdx {
            offset: start,
            reason: format!("expected {count} data bytes, found {}", bytes.len().saturating_sub(start)),
        });
    }
    Ok((dims, &bytes[start..]))
}

/// Encodes unsigned-byte data with the given dimensions as IDX.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Reads an image file and its label file.
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<ImageSet> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (idims, idata) = parse_idx(&ib)?;
    let (ldims, ldata) = parse_idx(&lb)?;
    if idims.len() != 3 || idims[1] != idims[2] {
        return Err(Error::MalformedIdx {
            offset: 3,
            reason: format!("expected n × s × s images, got dims {idims:?}"),
        });
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(Error::MalformedIdx {
            offset: 4,
            reason: format!("label count {ldims:?} does not match {} images", idims[0]),
        });
    }
    let side = idims[1];
    let images = idata.chunks_exact(side * side).map(|c| c.iter().map(|&b| b as f64 / 255.0).collect()).collect();
    Ok(ImageSet {
        side,
        images,
        labels: ldata.iter().map(|&b| b as usize).collect(),
    })
}

/// Where rotated-digit tasks get their images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DigitSource {
    /// Directory with the four standard IDX files; `None` reads the
    /// directory from the data-root environment variable.
    Idx {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        allow_synthetic_fallback: bool,
    },
    Synthetic,
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Train and test image sets from the source.
pub fn load_digits(source: &DigitSource, n_train: usize, n_test: usize, seed: u64) -> Result<(ImageSet, ImageSet)> {
    match source {
        DigitSource::Synthetic => Ok((synthetic_digits(n_train, seed), synthetic_digits(n_test, seed ^ 0x5EED_7E57))),
        DigitSource::Idx {
            root,
            allow_synthetic_fallback,
        } => {
            let root = root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
            let loaded = root.as_ref().map(|r| {
                Ok::<_, Error>((
                    read_idx_pair(&r.join(TRAIN_IMAGES), &r.join(TRAIN_LABELS))?,
                    read_idx_pair(&r.join(TEST_IMAGES), &r.join(TEST_LABELS))?,
                ))
            });
            match loaded {
                Some(Ok(pair)) => Ok(pair),
                Some(Err(Error::Io { .. })) | None if *allow_synthetic_fallback => {
                    load_digits(&DigitSource::Synthetic, n_train, n_test, seed)
                }
                Some(Err(e)) => Err(e),
                None => Err(Error::InvalidConfig(format!(
                    "no IDX root given and {DATA_ROOT_ENV} is unset; synthetic fallback not allowed"
                ))),
            }
        }
    }
}

/// Seeded 28×28 "digits": each class is a fixed set of three strokes
/// drawn inside the central 16×16 window, with per-sample jitter in
/// position, thickness and intensity plus pixel noise.
pub fn synthetic_digits(n: usize, seed: u64) -> ImageSet {
    const SIDE: usize = 28;
    let protos: Vec<Vec<[f64; 4]>> = (0..10)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(0xD161_7000 + c as u64);
            (0..3)
                .map(|_| {
                    [
                        r.random_range(7.0..21.0),
                        r.random_range(7.0..21.0),
                        r.random_range(7.0..21.0),
                        r.random_range(7.0..21.0),
                    ]
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        let dx: f64 = rng.random_range(-1.5..1.5);
        let dy: f64 = rng.random_range(-1.5..1.5);
        let width: f64 = rng.random_range(0.9..1.6);
        let amp: f64 = rng.random_range(0.7..1.0);
        let mut img = vec![0.0_f64; SIDE * SIDE];
        for s in &protos[c] {
            let jit: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let (r0, c0) = (s[0] + dy + jit[0], s[1] + dx + jit[1]);
            let (r1, c1) = (s[2] + dy + jit[2], s[3] + dx + jit[3]);
            for r in 0..SIDE {
                for col in 0..SIDE {
                    let d = seg_dist(r as f64, col as f64, r0, c0, r1, c1);
                    let v = amp * (-(d * d) / (2.0 * width * width)).exp();
                    let px = &mut img[r * SIDE + col];
                    *px = (*px).max(v);
                }
            }
        }
        for px in &mut img {
            if *px > 0.05 {
                *px = (*px + rng.random_range(-0.05_f64..0.05)).clamp(0.0, 1.0);
            } else {
                *px = 0.0;
            }
        }
        images.push(img);
        labels.push(c);
    }
    // deterministic label order is interleaved; shuffle for realism
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    ImageSet {
        side: SIDE,
        images: idx.iter().map(|&i| images[i].clone()).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    }
}

fn seg_dist(pr: f64, pc: f64, r0: f64, c0: f64, r1: f64, c1: f64) -> f64 {
    let (vr, vc) = (r1 - r0, c1 - c0);
    let len2 = vr * vr + vc * vc;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((pr - r0) * vr + (pc - c0) * vc) / len2).clamp(0.0, 1.0)
    };
    let (dr, dc) = (pr - (r0 + t * vr), pc - (c0 + t * vc));
    (dr * dr + dc * dc).sqrt()
}

/// Seeded subset of `n` images (all if fewer are available).
fn pick(set: &ImageSet, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.images.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx
}

fn to_dataset(images: &[Vec<f64>], labels: &[usize], task_id: usize) -> Result<Dataset> {
    let d = images.first().map(|v| v.len()).ok_or(Error::EmptyDataset)?;
    let flat: Vec<f64> = images.iter().flatten().copied().collect();
    Dataset::from_columns(DMatrix::from_vec(d, images.len(), flat), labels.to_vec(), task_id)
}

/// One task per angle: the same seeded sample subset, rotated about the
/// image centre and then downscaled to `downscale × downscale`.
pub fn rotated_digits(
    source: &DigitSource,
    angles: &[f64],
    downscale: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if angles.is_empty() {
        return Err(Error::InvalidArgument("no rotation angles".into()));
    }
    let (train_set, test_set) = load_digits(source, n_train, n_test, seed)?;
    let tr = pick(&train_set, n_train, seed);
    let te = pick(&test_set, n_test, seed.wrapping_add(1));
    let side = train_set.side;
    let mut tasks = Vec::with_capacity(angles.len());
    for (t, &a) in angles.iter().enumerate() {
        let build = |set: &ImageSet, idx: &[usize]| -> Result<Dataset> {
            let imgs: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| downscale_bilinear(&rotate_bilinear(&set.images[i], side, a), side, downscale))
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            to_dataset(&imgs, &labels, t + 1)
        };
        tasks.push(TaskData {
            train: build(&train_set, &tr)?,
            test: build(&test_set, &te)?,
        });
    }
    Ok(TaskSequence {
        tasks,
        input_dim: downscale * downscale,
        n_classes: 10,
    })
}

/// Consecutive class blocks `{0..k}, {k..2k}, ..` with labels remapped to
/// `[0, k)`. Samples inside each task are shuffled with `seed`.
pub fn split_by_class(
    train: &Dataset,
    test: &Dataset,
    n_classes: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if classes_per_task == 0 || n_classes % classes_per_task != 0 {
        return Err(Error::IndivisibleSplit {
            classes: n_classes,
            per_task: classes_per_task,
        });
    }
    let n_tasks = n_classes / classes_per_task;
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let lo = t * classes_per_task;
        let hi = lo + classes_per_task;
        let part = |d: &Dataset, salt: u64| -> Result<Dataset> {
            let mut idx: Vec<usize> = (0..d.len()).filter(|&i| (lo..hi).contains(&d.labels()[i])).collect();
            if idx.is_empty() {
                return Err(Error::InvalidDataset(format!("no samples for classes {lo}..{hi}")));
            }
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt ^ t as u64));
            let sub = d.subset(&idx)?;
            let labels = sub.labels().iter().map(|&y| y - lo).collect();
            Dataset::from_columns(sub.inputs().clone(), labels, t + 1)
        };
        tasks.push(TaskData {
            train: part(train, 0)?,
            test: part(test, 0xA5A5)?,
        });
    }
    Ok(TaskSequence {
        tasks,
        input_dim: train.dim(),
        n_classes: classes_per_task,
    })
}

/// Digits as a flat dataset (no rotation) at the given resolution.
pub fn digits_dataset(set: &ImageSet, downscale: usize, n: usize, seed: u64) -> Result<Dataset> {
    let idx = pick(set, n, seed);
    let imgs: Vec<Vec<f64>> = idx.iter().map(|&i| downscale_bilinear(&set.images[i], set.side, downscale)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
    to_dataset(&imgs, &labels, 1)
}
