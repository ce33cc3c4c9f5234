//! Seeded synthetic detection datasets: grayscale images of simple shapes
//! with exact normalized annotations.
//!
//! Shapes are drawn at full intensity on integer pixel positions over a low
//! noise floor, so every annotation is a rational box known by construction.
//! The same configuration always produces byte-identical files.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BoundingBox, GroundTruth, GroundTruthSet};
use crate::tensor::Tensor;

/// Shape vocabulary; the class index of a shape is its position in
/// [`DatasetConfig::shapes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Square,
    Cross,
    Diagonal,
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ShapeClass::Square => "square",
            ShapeClass::Cross => "cross",
            ShapeClass::Diagonal => "diagonal",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "square" => Ok(ShapeClass::Square),
            "cross" => Ok(ShapeClass::Cross),
            "diagonal" => Ok(ShapeClass::Diagonal),
            other => Err(format!(
                "unknown shape {other:?}; expected square, cross, or diagonal"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeClass>,
    /// Objects drawn per image.
    pub objects_per_image: usize,
    /// Uniform background noise in `[0, amplitude)`.
    pub noise_amplitude: f64,
    pub samples: usize,
    /// Shape bounding-box side, inclusive range.
    pub side_min: usize,
    pub side_max: usize,
    /// Reject placements whose boxes overlap an earlier object.
    pub non_overlap: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            shapes: vec![ShapeClass::Square, ShapeClass::Cross, ShapeClass::Diagonal],
            objects_per_image: 1,
            noise_amplitude: 0.05,
            samples: 8,
            side_min: 5,
            side_max: 8,
            non_overlap: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset config: {0}")]
    Config(String),
    #[error("could not place object {object} of sample {sample} without overlap")]
    Placement { sample: usize, object: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("annotation file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset invalid: {0}")]
    Malformed(String),
}

/// In-memory dataset: one `[1, H, W]` tensor and one annotation set per
/// sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub images: Vec<Tensor>,
    pub annotations: Vec<GroundTruthSet>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.config.shapes.len()
    }
}

fn check_config(config: &DatasetConfig) -> Result<(), DatasetError> {
    if config.height == 0 || config.width == 0 {
        return Err(DatasetError::Config("image size must be positive".into()));
    }
    if config.shapes.is_empty() {
        return Err(DatasetError::Config("at least one shape class".into()));
    }
    if config.objects_per_image == 0 {
        return Err(DatasetError::Config("objects_per_image must be >= 1".into()));
    }
    if config.samples == 0 {
        return Err(DatasetError::Config("sample count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_amplitude) {
        return Err(DatasetError::Config(format!(
            "noise amplitude {} outside [0, 1]",
            config.noise_amplitude
        )));
    }
    if config.side_min < 3 || config.side_min > config.side_max {
        return Err(DatasetError::Config(format!(
            "side range [{}, {}] invalid (minimum 3)",
            config.side_min, config.side_max
        )));
    }
    if config.side_max > config.height || config.side_max > config.width {
        return Err(DatasetError::Config(format!(
            "side {} does not fit a {}x{} image",
            config.side_max, config.height, config.width
        )));
    }
    Ok(())
}

/// Draw one shape at full intensity into a row-major grayscale buffer and
/// return its exact normalized annotation.
pub fn place_shape(
    pixels: &mut [f64],
    height: usize,
    width: usize,
    shape: ShapeClass,
    class: usize,
    x0: usize,
    y0: usize,
    side: usize,
) -> GroundTruth {
    assert!(x0 + side <= width && y0 + side <= height, "shape must fit");
    let mut put = |x: usize, y: usize| pixels[y * width + x] = 1.0;
    match shape {
        ShapeClass::Square => {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    put(x, y);
                }
            }
        }
        ShapeClass::Cross => {
            let mid = side / 2;
            for x in x0..x0 + side {
                put(x, y0 + mid);
            }
            for y in y0..y0 + side {
                put(x0 + mid, y);
            }
        }
        ShapeClass::Diagonal => {
            for i in 0..side {
                put(x0 + i, y0 + i);
            }
        }
    }
    let box_ = BoundingBox::new(
        x0 as f64 / width as f64,
        y0 as f64 / height as f64,
        side as f64 / width as f64,
        side as f64 / height as f64,
    )
    .expect("integer placement yields a valid box");
    GroundTruth { box_, class }
}

fn pixel_boxes_overlap(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let (ax, ay, asz) = a;
    let (bx, by, bsz) = b;
    ax < bx + bsz && bx < ax + asz && ay < by + bsz && by < ay + asz
}

/// Generate the dataset for a config. Bit-deterministic in the seed.
pub fn gen_dataset(config: &DatasetConfig) -> Result<Dataset, DatasetError> {
    check_config(config)?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut images = Vec::with_capacity(config.samples);
    let mut annotations = Vec::with_capacity(config.samples);
    for sample in 0..config.samples {
        let mut pixels: Vec<f64> = (0..h * w)
            .map(|_| config.noise_amplitude * rng.gen::<f64>())
            .collect();
        let mut placed: Vec<(usize, usize, usize)> = Vec::new();
        let mut gts = Vec::new();
        for object in 0..config.objects_per_image {
            let class = rng.gen_range(0..config.shapes.len());
            let side = rng.gen_range(config.side_min..=config.side_max);
            let mut attempt = 0;
            let (x0, y0) = loop {
                let x0 = rng.gen_range(0..=w - side);
                let y0 = rng.gen_range(0..=h - side);
                let candidate = (x0, y0, side);
                if !config.non_overlap
                    || placed.iter().all(|p| !pixel_boxes_overlap(*p, candidate))
                {
                    break (x0, y0);
                }
                attempt += 1;
                if attempt >= 1000 {
                    return Err(DatasetError::Placement { sample, object });
                }
            };
            placed.push((x0, y0, side));
            gts.push(place_shape(
                &mut pixels,
                h,
                w,
                config.shapes[class],
                class,
                x0,
                y0,
                side,
            ));
        }
        let image = Tensor::new(vec![1, h, w], pixels).expect("buffer matches shape");
        let gts = GroundTruthSet::new(gts, config.shapes.len())
            .map_err(|e| DatasetError::Malformed(e.to_string()))?;
        images.push(image);
        annotations.push(gts);
    }
    Ok(Dataset {
        config: config.clone(),
        images,
        annotations,
    })
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    format_version: u32,
    config: DatasetConfig,
    samples: Vec<Vec<GroundTruth>>,
}

/// Write `images.bin` (little-endian f64, sample-major) and
/// `annotations.json` into a directory.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let bin_path = dir.join("images.bin");
    let mut blob = Vec::with_capacity(dataset.images.len() * dataset.config.height * 8);
    for image in &dataset.images {
        for v in image.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&bin_path, &blob).map_err(io_err(&bin_path))?;

    let json_path = dir.join("annotations.json");
    let file = AnnotationFile {
        format_version: 1,
        config: dataset.config.clone(),
        samples: dataset
            .annotations
            .iter()
            .map(|set| set.items().to_vec())
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    let mut f = fs::File::create(&json_path).map_err(io_err(&json_path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&json_path))?;
    Ok(())
}

/// Read a dataset back; the round trip is bit-exact.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DatasetError::Io { path, source }
    };
    let json_path = dir.join("annotations.json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let file: AnnotationFile = serde_json::from_str(&text)?;
    if file.format_version != 1 {
        return Err(DatasetError::Malformed(format!(
            "unsupported format version {}",
            file.format_version
        )));
    }
    check_config(&file.config)?;
    let (h, w) = (file.config.height, file.config.width);
    let per_sample = h * w;

    let bin_path = dir.join("images.bin");
    let blob = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let expected = file.samples.len() * per_sample * 8;
    if blob.len() != expected {
        return Err(DatasetError::Malformed(format!(
            "images.bin holds {} bytes, annotations imply {expected}",
            blob.len()
        )));
    }

    let num_classes = file.config.shapes.len();
    let mut images = Vec::with_capacity(file.samples.len());
    let mut annotations = Vec::with_capacity(file.samples.len());
    for (i, gts) in file.samples.iter().enumerate() {
        let start = i * per_sample * 8;
        let data: Vec<f64> = blob[start..start + per_sample * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(
            Tensor::new(vec![1, h, w], data)
                .map_err(|e| DatasetError::Malformed(e.to_string()))?,
        );
        annotations.push(
            GroundTruthSet::new(gts.clone(), num_classes)
                .map_err(|e| DatasetError::Malformed(format!("sample {i}: {e}")))?,
        );
    }
    Ok(Dataset {
        config: file.config,
        images,
        annotations,
    })
}
