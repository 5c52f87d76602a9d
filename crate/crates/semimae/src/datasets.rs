//! Dataset loaders and split manifests.
//!
//! * `synthetic`: the built-in shape generator; validation uses a
//!   different seed from training.
//! * `image_folder`: `<path>/train/<class>/*.png` and
//!   `<path>/val/<class>/*.png`. Class indices follow the sorted directory
//!   names; images are resized to `model.image_size`.
//! * `cifar_binary`: the CIFAR-10 binary release (`data_batch_*.bin` for
//!   training, `test_batch.bin` for validation).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use semimae_core::config::DataSource;
use semimae_core::data::{make_split, Dataset, SplitManifest, SyntheticShapes};
use semimae_core::{Error as CoreError, Images, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: String, message: String },
    #[error("dataset: {0}")]
    Format(String),
    #[error("split manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Seed offset separating the synthetic validation set from training.
const VAL_SEED_OFFSET: u64 = 0x5EED_0000_0001;

/// Training and validation sets for `cfg.data`.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let generator = SyntheticShapes::from_config(cfg)?;
            let train = generator.generate(cfg.data.synthetic_train_size, cfg.seed);
            let val = generator.generate(
                cfg.data.synthetic_val_size,
                cfg.seed.wrapping_add(VAL_SEED_OFFSET),
            );
            Ok((train, val))
        }
        DataSource::ImageFolder => {
            let root = Path::new(&cfg.data.path);
            let (train, val, _) = load_image_folder(root, cfg)?;
            Ok((train, val))
        }
        DataSource::CifarBinary => load_cifar_binary(Path::new(&cfg.data.path), cfg),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<_>>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn to_chw(path: &Path, size: u32, channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let img = if img.width() != size || img.height() != size {
        img.resize_exact(size, size, FilterType::Triangle)
    } else {
        img
    };
    let (s, hw) = (size as usize, (size * size) as usize);
    let mut out = vec![0.0; channels * hw];
    match channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * hw + i] = p.0[c] as f64 / 255.0;
                }
            }
        }
        c => {
            return Err(DatasetError::Format(format!(
                "image_folder supports 1 or 3 channels, not {c}"
            )))
        }
    }
    debug_assert_eq!(out.len(), channels * s * s);
    Ok(out)
}

fn load_folder_split(dir: &Path, classes: &[String], cfg: &TrainConfig) -> Result<Dataset> {
    let (size, ch) = (cfg.model.image_size, cfg.model.channels);
    let mut images = Images::zeros(0, ch, size, size);
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let class_dir = dir.join(class);
        if !class_dir.is_dir() {
            continue;
        }
        for file in sorted_entries(&class_dir)? {
            if file
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                != Some(true)
            {
                continue;
            }
            images.push(&to_chw(&file, size as u32, ch)?);
            labels.push(label);
        }
    }
    Ok(Dataset::new(images, labels, classes.len())?)
}

/// Returns (train, val, class names).
pub fn load_image_folder(
    root: &Path,
    cfg: &TrainConfig,
) -> Result<(Dataset, Dataset, Vec<String>)> {
    let train_dir = root.join("train");
    let classes: Vec<String> = sorted_entries(&train_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if classes.len() != cfg.model.num_classes {
        return Err(DatasetError::Format(format!(
            "{} has {} class directories but model.num_classes = {}",
            train_dir.display(),
            classes.len(),
            cfg.model.num_classes
        )));
    }
    let train = load_folder_split(&train_dir, &classes, cfg)?;
    let val = load_folder_split(&root.join("val"), &classes, cfg)?;
    Ok((train, val, classes))
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read_cifar_file(path: &Path, into: &mut Images, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DatasetError::Format(format!(
            "{} is not a whole number of CIFAR records",
            path.display()
        )));
    }
    let mut img = vec![0.0; CIFAR_RECORD - 1];
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(DatasetError::Format(format!(
                "{}: label {label} out of range",
                path.display()
            )));
        }
        for (dst, &src) in img.iter_mut().zip(&rec[1..]) {
            *dst = src as f64 / 255.0;
        }
        into.push(&img);
        labels.push(label);
    }
    Ok(())
}

pub fn load_cifar_binary(dir: &Path, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    if m.image_size != CIFAR_SIDE || m.channels != 3 || m.num_classes != 10 {
        return Err(DatasetError::Format(
            "cifar_binary requires model.image_size = 32, model.channels = 3 and model.num_classes = 10".into(),
        ));
    }
    let mut train = Images::zeros(0, 3, CIFAR_SIDE, CIFAR_SIDE);
    let mut train_labels = Vec::new();
    let batches: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    if batches.is_empty() {
        return Err(DatasetError::Format(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    for b in &batches {
        read_cifar_file(b, &mut train, &mut train_labels)?;
    }
    let mut val = Images::zeros(0, 3, CIFAR_SIDE, CIFAR_SIDE);
    let mut val_labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut val, &mut val_labels)?;
    Ok((
        Dataset::new(train, train_labels, 10)?,
        Dataset::new(val, val_labels, 10)?,
    ))
}

/// Checks that a manifest partitions a subset of `0..dataset_size`.
pub fn check_split(split: &SplitManifest, dataset_size: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; dataset_size];
    for &i in split.labeled.iter().chain(&split.unlabeled) {
        if i >= dataset_size {
            return Err(format!("index {i} out of range for {dataset_size} samples"));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(format!("index {i} appears more than once"));
        }
    }
    Ok(())
}

pub fn save_split(path: &Path, split: &SplitManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(split).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn load_split(path: &Path, dataset_size: usize) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest_err = |message: String| DatasetError::Manifest {
        path: path.display().to_string(),
        message,
    };
    let split: SplitManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
    check_split(&split, dataset_size).map_err(manifest_err)?;
    Ok(split)
}

/// The manifest named by `data.split_path`, or a fresh stratified split.
pub fn split_for(cfg: &TrainConfig, train: &Dataset) -> Result<SplitManifest> {
    if cfg.data.split_path.is_empty() {
        Ok(make_split(
            train.len(),
            &train.labels,
            train.num_classes,
            cfg.data.labeled_fraction,
            cfg.seed,
        )?)
    } else {
        load_split(Path::new(&cfg.data.split_path), train.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn folder_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.image_size = 8;
        cfg.model.patch_size = 4;
        cfg.model.num_classes = 2;
        cfg
    }

    #[test]
    fn image_folder_loads_sorted_classes_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        for (split, n) in [("train", 3), ("val", 1)] {
            for (class, shade) in [("cat", 40u8), ("ant", 200u8)] {
                let d = dir.path().join(split).join(class);
                fs::create_dir_all(&d).unwrap();
                for i in 0..n {
                    let img = image::RgbImage::from_pixel(16, 16, image::Rgb([shade, 0, 255]));
                    img.save(d.join(format!("{i}.png"))).unwrap();
                }
            }
        }
        fs::write(dir.path().join("train/cat/notes.txt"), "skip").unwrap();
        let (train, val, classes) = load_image_folder(dir.path(), &folder_config()).unwrap();
        assert_eq!(classes, ["ant", "cat"]);
        assert_eq!((train.len(), val.len()), (6, 2));
        assert_eq!(train.labels, [0, 0, 0, 1, 1, 1]);
        assert_eq!((train.images.h, train.images.w), (8, 8));
        let first = train.images.image(0);
        assert!((first[0] - 200.0 / 255.0).abs() < 1e-12);
        assert_eq!(first[64], 0.0);
        assert_eq!(first[128], 1.0);

        let mut wrong = folder_config();
        wrong.model.num_classes = 3;
        assert!(matches!(
            load_image_folder(dir.path(), &wrong),
            Err(DatasetError::Format(_))
        ));
    }

    #[test]
    fn cifar_records_decode_channel_planes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD * 2];
        rec[0] = 3;
        rec[1] = 255;
        rec[1 + 1024] = 51;
        rec[CIFAR_RECORD] = 9;
        fs::write(dir.path().join("data_batch_1.bin"), &rec).unwrap();
        fs::write(dir.path().join("test_batch.bin"), &rec[..CIFAR_RECORD]).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.data.source = DataSource::CifarBinary;
        cfg.data.path = dir.path().display().to_string();
        let (train, val) = load_datasets(&cfg).unwrap();
        assert_eq!(train.labels, [3, 9]);
        assert_eq!(val.len(), 1);
        let img = train.images.image(0);
        assert_eq!(img[0], 1.0);
        assert_eq!(img[1024], 0.2);

        fs::write(dir.path().join("data_batch_2.bin"), [0u8; 5]).unwrap();
        assert!(matches!(load_datasets(&cfg), Err(DatasetError::Format(_))));
    }

    #[test]
    fn manifests_round_trip_and_are_checked() {
        let cfg = TrainConfig::default();
        let train = load_datasets(&TrainConfig {
            data: semimae_core::config::DataConfig {
                synthetic_train_size: 200,
                ..cfg.data.clone()
            },
            ..cfg.clone()
        })
        .unwrap()
        .0;
        let split = split_for(&cfg, &train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        save_split(&path, &split).unwrap();
        assert_eq!(load_split(&path, train.len()).unwrap(), split);
        assert!(matches!(
            load_split(&path, 10),
            Err(DatasetError::Manifest { .. })
        ));

        let mut dup = split.clone();
        dup.unlabeled.push(dup.labeled[0]);
        save_split(&path, &dup).unwrap();
        assert!(load_split(&path, train.len()).is_err());
    }

    #[test]
    fn synthetic_validation_differs_from_training() {
        let mut cfg = TrainConfig::default();
        cfg.data.synthetic_train_size = 20;
        cfg.data.synthetic_val_size = 20;
        let (train, val) = load_datasets(&cfg).unwrap();
        assert_ne!(train.images.data, val.images.data);
        assert_eq!(
            load_datasets(&cfg).unwrap().0.images.data,
            train.images.data
        );
    }
}
