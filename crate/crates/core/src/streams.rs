//! Dataset ingestion and continual task streams with episodic sampling.

use std::path::Path;

use mocl_autodiff::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One labelled image with pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[C, H, W]`
    pub image: Tensor,
    /// Label in the original dataset label space.
    pub label: usize,
}

/// Train and test examples of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub image_shape: [usize; 3],
    pub n_labels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub train_pool: Vec<Example>,
    pub test_pool: Vec<Example>,
    /// Original labels in local-label order.
    pub class_map: Vec<usize>,
    /// Rotation in degrees applied at sampling time.
    pub rotation: Option<Real>,
}

impl Task {
    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    fn local_label(&self, original: usize) -> Option<usize> {
        self.class_map.iter().position(|&c| c == original)
    }
}

/// Support and query sets with labels already mapped to `0..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[K·N, C, H, W]`
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    /// `[Q, C, H, W]`
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// Pool indices of the support examples.
    pub support_ids: Vec<usize>,
    /// Pool indices of the query examples.
    pub query_ids: Vec<usize>,
}

impl Episode {
    pub fn support_len(&self) -> usize {
        self.support_y.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    SplitMnist,
    RotatedMnist,
    SplitCifar100,
    Toy,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SplitMnist => "split_mnist",
            Self::RotatedMnist => "rotated_mnist",
            Self::SplitCifar100 => "split_cifar100",
            Self::Toy => "toy",
        }
    }
}

/// Shape and difficulty of the procedural toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub channels: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: Real,
    /// Maximum random translation in pixels.
    pub max_shift: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            channels: 1,
            size: 12,
            train_per_class: 100,
            test_per_class: 60,
            noise: 0.15,
            max_shift: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub seed: u64,
    pub max_train_per_task: Option<usize>,
    pub max_test_per_task: Option<usize>,
    pub toy: ToySpec,
}

impl StreamSpec {
    /// Defaults of each stream family: 5×2 split MNIST, 10×10 rotated MNIST, 5×5 split CIFAR-100.
    pub fn standard(kind: StreamKind, seed: u64) -> Self {
        let (n_tasks, classes_per_task) = match kind {
            StreamKind::SplitMnist => (5, 2),
            StreamKind::RotatedMnist => (10, 10),
            StreamKind::SplitCifar100 => (5, 5),
            StreamKind::Toy => (3, 2),
        };
        Self {
            kind,
            n_tasks,
            classes_per_task,
            seed,
            max_train_per_task: None,
            max_test_per_task: None,
            toy: ToySpec::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// File formats

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CoreError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CoreError::Format(format!("{}: truncated header", path.display())))
}

fn idx_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(CoreError::BadMagic {
            path: path.display().to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Example>> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    idx_magic(&img, images_path, IDX_IMAGES_MAGIC)?;
    idx_magic(&lab, labels_path, IDX_LABELS_MAGIC)?;
    let n_img = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_lab = be_u32(&lab, 4, labels_path)? as usize;
    if n_img != n_lab {
        return Err(CoreError::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let plane = rows * cols;
    if rows == 0 || cols == 0 || img.len() < 16 + n_img * plane || lab.len() < 8 + n_lab {
        return Err(CoreError::Format(format!(
            "{} / {}: payload shorter than header declares",
            images_path.display(),
            labels_path.display()
        )));
    }
    (0..n_img)
        .map(|i| {
            let px = &img[16 + i * plane..16 + (i + 1) * plane];
            let data = px.iter().map(|&b| b as Real / 255.0).collect();
            Ok(Example {
                image: Tensor::new(vec![1, rows, cols], data)?,
                label: lab[8 + i] as usize,
            })
        })
        .collect()
}

const CIFAR_RECORD: usize = 2 + 3072;

/// Reads a CIFAR-100 binary batch, keeping the fine label.
pub fn load_cifar100(path: &Path) -> Result<Vec<Example>> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(CoreError::Format(format!(
            "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let label = rec[1] as usize;
            if label >= 100 {
                return Err(CoreError::Format(format!(
                    "{}: fine label {label} ≥ 100",
                    path.display()
                )));
            }
            let data = rec[2..].iter().map(|&b| b as Real / 255.0).collect();
            Ok(Example {
                image: Tensor::new(vec![3, 32, 32], data)?,
                label,
            })
        })
        .collect()
}

/// Loads the dataset a stream kind needs from `dir`, using the standard file names.
pub fn load_dataset(kind: StreamKind, dir: &Path) -> Result<DataSplits> {
    match kind {
        StreamKind::SplitMnist | StreamKind::RotatedMnist => Ok(DataSplits {
            train: load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?,
            test: load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?,
            image_shape: [1, 28, 28],
            n_labels: 10,
        }),
        StreamKind::SplitCifar100 => Ok(DataSplits {
            train: load_cifar100(&dir.join("train.bin"))?,
            test: load_cifar100(&dir.join("test.bin"))?,
            image_shape: [3, 32, 32],
            n_labels: 100,
        }),
        StreamKind::Toy => Err(CoreError::Precondition(
            "the toy stream is generated, not loaded".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Toy data

/// Procedural class patterns: each class is a smooth random prototype; examples
/// are shifted copies with additive noise, clipped to [0, 1].
pub fn toy_dataset(toy: &ToySpec, n_classes: usize, seed: u64) -> Result<DataSplits> {
    if toy.size < 2 || toy.channels == 0 || n_classes == 0 {
        return Err(CoreError::Precondition(
            "toy images need size ≥ 2, ≥1 channel and ≥1 class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (toy.channels, toy.size);
    let prototypes: Vec<Vec<Real>> = (0..n_classes)
        .map(|_| toy_prototype(&mut rng, c, s))
        .collect();
    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(count * n_classes);
        for _ in 0..count {
            for (label, proto) in prototypes.iter().enumerate() {
                out.push(Example {
                    image: toy_sample(rng, proto, toy)?,
                    label,
                });
            }
        }
        Ok(out)
    };
    let train = draw(toy.train_per_class, &mut rng)?;
    let test = draw(toy.test_per_class, &mut rng)?;
    Ok(DataSplits {
        train,
        test,
        image_shape: [c, s, s],
        n_labels: n_classes,
    })
}

fn toy_prototype(rng: &mut impl Rng, c: usize, s: usize) -> Vec<Real> {
    // Sum of a few Gaussian blobs per channel.
    let mut img = vec![0.0; c * s * s];
    for ch in 0..c {
        for _ in 0..3 {
            let cy = rng.random_range(0.0..s as Real);
            let cx = rng.random_range(0.0..s as Real);
            let sigma = rng.random_range(0.12..0.3) * s as Real;
            let amp = rng.random_range(0.5..1.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as Real - cy).powi(2) + (x as Real - cx).powi(2);
                    img[(ch * s + y) * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.min(1.0));
    img
}

fn toy_sample(rng: &mut impl Rng, proto: &[Real], toy: &ToySpec) -> Result<Tensor> {
    let (c, s) = (toy.channels, toy.size);
    let m = toy.max_shift as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let normal = rand_distr::Normal::new(0.0, toy.noise.max(0.0))
        .map_err(|e| CoreError::Precondition(e.to_string()))?;
    let mut data = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                let base = if (0..s as isize).contains(&sy) && (0..s as isize).contains(&sx) {
                    proto[(ch * s + sy as usize) * s + sx as usize]
                } else {
                    0.0
                };
                let noise: Real = rand_distr::Distribution::sample(&normal, rng);
                data[(ch * s + y) * s + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(vec![c, s, s], data)?)
}

// ---------------------------------------------------------------------------
// Streams

/// Seeded, class-balanced subsample of the examples whose label is in `classes`.
fn select_pool(
    examples: &[Example],
    classes: &[usize],
    cap: Option<usize>,
    rng: &mut impl Rng,
) -> Vec<Example> {
    let per_class_cap = cap.map(|c| c / classes.len().max(1));
    let mut out = Vec::new();
    for &class in classes {
        let mut idx: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        if let Some(k) = per_class_cap {
            if idx.len() > k {
                idx.shuffle(rng);
                idx.truncate(k);
                idx.sort_unstable();
            }
        }
        out.extend(idx.into_iter().map(|i| examples[i].clone()));
    }
    out
}

/// Builds the ordered tasks of a stream from loaded or generated data.
pub fn build_stream(spec: &StreamSpec, data: &DataSplits) -> Result<Vec<Task>> {
    let (m, n) = (spec.n_tasks, spec.classes_per_task);
    if m == 0 || n == 0 {
        return Err(CoreError::Precondition(
            "a stream needs ≥1 task and ≥1 class per task".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut class_maps: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut rotations = vec![None; m];
    match spec.kind {
        StreamKind::SplitMnist | StreamKind::Toy => {
            for t in 0..m {
                class_maps.push((t * n..(t + 1) * n).collect());
            }
        }
        StreamKind::RotatedMnist => {
            for rot in rotations.iter_mut() {
                class_maps.push((0..n).collect());
                *rot = Some(rng.random_range(0.0..=180.0));
            }
        }
        StreamKind::SplitCifar100 => {
            let mut labels: Vec<usize> = (0..data.n_labels).collect();
            labels.shuffle(&mut rng);
            for t in 0..m {
                class_maps.push(
                    labels
                        .get(t * n..(t + 1) * n)
                        .map(<[usize]>::to_vec)
                        .unwrap_or_default(),
                );
            }
        }
    }
    let mut tasks = Vec::with_capacity(m);
    for (index, (class_map, rotation)) in class_maps.into_iter().zip(rotations).enumerate() {
        if class_map.len() != n || class_map.iter().any(|&c| c >= data.n_labels) {
            return Err(CoreError::InsufficientData(format!(
                "{} with {m} tasks × {n} classes needs more than the {} labels available",
                spec.kind.name(),
                data.n_labels
            )));
        }
        let train_pool = select_pool(&data.train, &class_map, spec.max_train_per_task, &mut rng);
        let test_pool = select_pool(&data.test, &class_map, spec.max_test_per_task, &mut rng);
        let task = Task {
            index,
            train_pool,
            test_pool,
            class_map,
            rotation,
        };
        for &c in &task.class_map {
            let tr = task.train_pool.iter().filter(|e| e.label == c).count();
            let te = task.test_pool.iter().filter(|e| e.label == c).count();
            if tr < 2 || te < 2 {
                return Err(CoreError::InsufficientData(format!(
                    "task {index} class {c}: {tr} train / {te} test examples after caps"
                )));
            }
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Checks that every class of every task can supply an episode of the given size.
pub fn check_episode_capacity(
    tasks: &[Task],
    k: usize,
    query_size: usize,
    use_test_pool: bool,
) -> Result<()> {
    for t in tasks {
        let n = t.n_classes();
        let need = k + query_size.div_ceil(n);
        let pool = if use_test_pool {
            &t.test_pool
        } else {
            &t.train_pool
        };
        for &c in &t.class_map {
            let have = pool.iter().filter(|e| e.label == c).count();
            if have < need {
                return Err(CoreError::InsufficientData(format!(
                    "task {} class {c}: {have} {} examples, an episode with K={k} and {query_size} queries needs {need}",
                    t.index,
                    if use_test_pool { "test" } else { "train" }
                )));
            }
        }
    }
    Ok(())
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Samples K examples per class as support and `query_size` of the remaining
/// examples as query, balanced across classes up to the remainder.
pub fn sample_from_pool(
    task: &Task,
    pool: &[Example],
    k: usize,
    query_size: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let n = task.n_classes();
    if k == 0 || query_size == 0 {
        return Err(CoreError::Precondition(
            "episodes need K ≥ 1 and a nonempty query".into(),
        ));
    }
    let mut support_ids = Vec::with_capacity(k * n);
    let mut rest: Vec<Vec<usize>> = Vec::with_capacity(n);
    let need = k + query_size.div_ceil(n);
    for &class in &task.class_map {
        let mut idx: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < need {
            return Err(CoreError::InsufficientData(format!(
                "task {} class {class}: pool holds {}, need {need}",
                task.index,
                idx.len()
            )));
        }
        idx.shuffle(rng);
        support_ids.extend_from_slice(&idx[..k]);
        rest.push(idx[k..].to_vec());
    }
    let mut query_ids = Vec::with_capacity(query_size);
    for (j, r) in rest.iter().enumerate() {
        let take = query_size / n + usize::from(j < query_size % n);
        query_ids.extend_from_slice(&r[..take]);
    }
    let materialize = |ids: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            let e = &pool[i];
            images.push(match task.rotation {
                Some(a) => rotate_image(&e.image, a),
                None => e.image.clone(),
            });
            labels.push(task.local_label(e.label).expect("pool label in class map"));
        }
        Ok((stack(&images)?, labels))
    };
    let (support_x, support_y) = materialize(&support_ids)?;
    let (query_x, query_y) = materialize(&query_ids)?;
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        support_ids,
        query_ids,
    })
}

/// Training episode drawn from the task's training pool.
pub fn sample_episode(
    task: &Task,
    k: usize,
    query_size: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    sample_from_pool(task, &task.train_pool, k, query_size, rng)
}

/// Rotation about the image centre with bilinear interpolation and zero fill.
pub fn rotate_image(image: &Tensor, angle_degrees: Real) -> Tensor {
    if angle_degrees == 0.0 {
        return image.clone();
    }
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let cy = (h as Real - 1.0) / 2.0;
    let cx = (w as Real - 1.0) / 2.0;
    let src = image.data();
    let at = |ch: usize, y: isize, x: isize| -> Real {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // Inverse map: output pixel back into the source frame.
            let (py, px) = (y as Real - cy, x as Real - cx);
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}
