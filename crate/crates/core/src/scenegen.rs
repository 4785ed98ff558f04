//! Deterministic synthetic-scene generation and dataset persistence.
//!
//! Each scene is a 3x32x32 image on a gray background containing 2-4 filled
//! shapes, each in a color unique within the scene (so every (color, shape)
//! combination is distinct and the color word alone disambiguates). Every
//! object carries an unambiguous two-token referring expression
//! ("red circle") and the tight bounding box of its rendered pixels. All
//! randomness flows from explicit seeds so identical seeds reproduce scenes
//! bit for bit.

use crate::boxcodec::{iou, BoundingBox};
use crate::gradcore::Tensor;
use crate::tensorio::{self, Dtype};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const COLOR_COUNT: usize = 6;
pub const SHAPE_COUNT: usize = 3;
/// Prompt vocabulary: color ids 0..6, shape ids 6..9.
pub const PROMPT_VOCAB: usize = COLOR_COUNT + SHAPE_COUNT;

const BACKGROUND: f64 = 0.5;
const COLORS: [[f64; 3]; COLOR_COUNT] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.8, 0.1],
    [0.8, 0.1, 0.8],
    [0.1, 0.8, 0.8],
];
const COLOR_NAMES: [&str; COLOR_COUNT] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
const SHAPE_NAMES: [&str; SHAPE_COUNT] = ["square", "circle", "triangle"];

/// Object placement lattice. Positions snap to an 8-pixel grid aligned with
/// the grounder's 8-pixel patches and shapes share one 16-pixel size, which
/// keeps the space of box coordinates small enough for the toy grounder to
/// master from a few thousand scenes. A small fraction of objects is
/// instead rendered tiny (8 px) at the fixed corner slot, so the corpus
/// contains small boxes near the scale of the targeted-attack corner box
/// without complicating the main placement task; at most one tiny object
/// per scene (two would fully overlap).
const POSITION_GRID: usize = 8;
const SHAPE_SIZE: usize = 16;
const TINY_SIZE: usize = 8;
const TINY_PROB: f64 = 0.04;
const MAX_GT_IOU: f64 = 0.3;

const MANIFEST_FORMAT: &str = "rec-scenes";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("object count {0} outside [2,4]")]
    BadObjectCount(usize),
    #[error("dataset split sizes must be >= 1")]
    EmptySplit,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("tensor payload {path}: {source}")]
    Payload {
        path: String,
        source: tensorio::TensorIoError,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// Two-token referring expression over the closed prompt vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferringExpression {
    color: usize,
    shape: usize,
}

impl ReferringExpression {
    pub fn new(color: usize, shape: usize) -> Self {
        assert!(color < COLOR_COUNT && shape < SHAPE_COUNT);
        Self { color, shape }
    }

    /// Token ids: [color word, shape word], shape words offset past colors.
    pub fn token_ids(&self) -> [usize; 2] {
        [self.color, COLOR_COUNT + self.shape]
    }

    pub fn text(&self) -> String {
        format!("{} {}", COLOR_NAMES[self.color], SHAPE_NAMES[self.shape])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub prompt: ReferringExpression,
    pub gt_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub seed: u64,
    /// 3x32x32, values in [0,1], exactly representable as f32.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shape_mask(shape: usize, x0: usize, y0: usize, size: usize) -> Vec<bool> {
    let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    match shape {
        0 => {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    mask[y * IMAGE_SIZE + x] = true;
                }
            }
        }
        1 => {
            let r = size as f64 / 2.0;
            let cy = y0 as f64 + r - 0.5;
            let cx = x0 as f64 + r - 0.5;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dy * dy + dx * dx <= r * r {
                        mask[y * IMAGE_SIZE + x] = true;
                    }
                }
            }
        }
        2 => {
            let cx = x0 + size / 2;
            for row in 0..size {
                let half = (row * (size / 2)) / (size - 1).max(1);
                let lo = cx.saturating_sub(half);
                let hi = (cx + half).min(IMAGE_SIZE - 1);
                for x in lo..=hi {
                    mask[(y0 + row) * IMAGE_SIZE + x] = true;
                }
            }
        }
        _ => unreachable!(),
    }
    mask
}

fn tight_box(mask: &[bool]) -> BoundingBox {
    let mut min_x = IMAGE_SIZE;
    let mut min_y = IMAGE_SIZE;
    let mut max_x = 0;
    let mut max_y = 0;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            if mask[y * IMAGE_SIZE + x] {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    BoundingBox::new(
        min_x as f64 / IMAGE_SIZE as f64,
        min_y as f64 / IMAGE_SIZE as f64,
        (max_x + 1) as f64 / IMAGE_SIZE as f64,
        (max_y + 1) as f64 / IMAGE_SIZE as f64,
    )
    .expect("rendered mask is nonempty")
}

/// Render one scene with `n` objects, deterministically from `seed`.
pub fn generate_scene(seed: u64, n: usize) -> Result<SceneAnnotation, SceneError> {
    if !(2..=4).contains(&n) {
        return Err(SceneError::BadObjectCount(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Placement is rejection-sampled; restart the whole scene if an object
    // cannot be placed under the pairwise-IoU cap.
    'scene: loop {
        let mut colors: Vec<usize> = (0..COLOR_COUNT).collect();
        colors.shuffle(&mut rng);
        let mut pixels = vec![BACKGROUND; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut have_tiny = false;
        for &color in colors.iter().take(n) {
            let shape = rng.gen_range(0..SHAPE_COUNT);
            let tiny = !have_tiny && rng.gen_bool(TINY_PROB);
            have_tiny |= tiny;
            let mut placed = false;
            for _ in 0..100 {
                let (size, x0, y0) = if tiny {
                    (TINY_SIZE, 0, 0)
                } else {
                    let slots = (IMAGE_SIZE - SHAPE_SIZE) / POSITION_GRID;
                    (
                        SHAPE_SIZE,
                        POSITION_GRID * rng.gen_range(0..=slots),
                        POSITION_GRID * rng.gen_range(0..=slots),
                    )
                };
                let mask = shape_mask(shape, x0, y0, size);
                let gt_box = tight_box(&mask);
                if objects.iter().all(|o| iou(&o.gt_box, &gt_box) < MAX_GT_IOU) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for ch in 0..CHANNELS {
                                pixels[ch * IMAGE_SIZE * IMAGE_SIZE + i] = COLORS[color][ch];
                            }
                        }
                    }
                    objects.push(SceneObject {
                        prompt: ReferringExpression::new(color, shape),
                        gt_box,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'scene;
            }
        }
        // Later shapes may overdraw earlier ones; recompute tight boxes from
        // the final canvas so every box bounds exactly its own color's pixels.
        // Overlap below the IoU cap cannot erase a shape entirely, but it can
        // shave its extremes, so re-derive each box from surviving pixels.
        let mut final_objects = Vec::with_capacity(n);
        let mut all_visible = true;
        for obj in &objects {
            let color = COLORS[obj.prompt.color];
            let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
            let mut any = false;
            for i in 0..IMAGE_SIZE * IMAGE_SIZE {
                let is_color = (0..CHANNELS).all(|ch| {
                    pixels[ch * IMAGE_SIZE * IMAGE_SIZE + i] == color[ch]
                });
                mask[i] = is_color;
                any |= is_color;
            }
            if !any {
                all_visible = false;
                break;
            }
            let gt_box = tight_box(&mask);
            if gt_box.width() < 0.02 || gt_box.height() < 0.02 {
                all_visible = false;
                break;
            }
            final_objects.push(SceneObject {
                prompt: obj.prompt,
                gt_box,
            });
        }
        if !all_visible {
            continue 'scene;
        }
        // Overdraw may have moved boxes; re-check the pairwise cap.
        for i in 0..final_objects.len() {
            for j in i + 1..final_objects.len() {
                if iou(&final_objects[i].gt_box, &final_objects[j].gt_box) >= MAX_GT_IOU {
                    continue 'scene;
                }
            }
        }
        // Pin every pixel to its f32 representation so payloads roundtrip
        // bit-exactly through the f32 on-disk format.
        for v in &mut pixels {
            *v = *v as f32 as f64;
        }
        let image = Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)
            .expect("canvas dims fixed");
        return Ok(SceneAnnotation {
            seed,
            image,
            objects: final_objects,
        });
    }
}

/// Generate disjoint train/val splits from a master seed.
pub fn generate_dataset(
    master_seed: u64,
    train_count: usize,
    val_count: usize,
) -> Result<(Vec<SceneAnnotation>, Vec<SceneAnnotation>), SceneError> {
    if train_count == 0 || val_count == 0 {
        return Err(SceneError::EmptySplit);
    }
    let split = |offset: usize, count: usize| -> Result<Vec<SceneAnnotation>, SceneError> {
        (0..count)
            .map(|i| {
                let child = splitmix64(master_seed ^ splitmix64((offset + i) as u64));
                let mut nrng = ChaCha8Rng::seed_from_u64(child ^ 0xa5a5_a5a5);
                let n = nrng.gen_range(2..=4);
                generate_scene(child, n)
            })
            .collect()
    };
    Ok((split(0, train_count)?, split(train_count, val_count)?))
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    scenes: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    seed: u64,
    image: String,
    objects: Vec<RecordObject>,
}

#[derive(Serialize, Deserialize)]
struct RecordObject {
    prompt: [usize; 2],
    text: String,
    gt_box: [f64; 4],
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Persist a split under `dir`: a line-delimited manifest plus one raw f32
/// tensor file per scene image.
pub fn save_dataset(split: &[SceneAnnotation], dir: &Path) -> Result<(), SceneError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out =
        BufWriter::new(File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        scenes: split.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| io_err(&manifest_path, e))?;
    for (i, scene) in split.iter().enumerate() {
        let rel = format!("images/scene_{i:05}.tns");
        let img_path = dir.join(&rel);
        let mut w = BufWriter::new(File::create(&img_path).map_err(|e| io_err(&img_path, e))?);
        tensorio::write_tensor(&mut w, &scene.image, Dtype::F32).map_err(|e| {
            SceneError::Payload {
                path: img_path.display().to_string(),
                source: e,
            }
        })?;
        let record = ManifestRecord {
            seed: scene.seed,
            image: rel,
            objects: scene
                .objects
                .iter()
                .map(|o| {
                    let (x1, y1, x2, y2) = o.gt_box.corners();
                    RecordObject {
                        prompt: [o.prompt.color, o.prompt.shape],
                        text: o.prompt.text(),
                        gt_box: [x1, y1, x2, y2],
                    }
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).unwrap())
            .map_err(|e| io_err(&manifest_path, e))?;
    }
    out.flush().map_err(|e| io_err(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneAnnotation>, SceneError> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = File::open(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, reason: String| SceneError::Manifest { line, reason };

    let header_line = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| io_err(&manifest_path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(1, e.to_string()))?;
    if header.format != MANIFEST_FORMAT {
        return Err(bad(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(bad(
            1,
            format!(
                "version mismatch: file {} vs supported {}",
                header.version, MANIFEST_VERSION
            ),
        ));
    }

    let mut scenes = Vec::with_capacity(header.scenes);
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| io_err(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        let img_path = dir.join(&record.image);
        let mut r =
            BufReader::new(File::open(&img_path).map_err(|e| io_err(&img_path, e))?);
        let image = tensorio::read_tensor(&mut r).map_err(|e| SceneError::Payload {
            path: img_path.display().to_string(),
            source: e,
        })?;
        if image.shape() != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(bad(
                lineno,
                format!("image shape {:?} is not 3x32x32", image.shape()),
            ));
        }
        if record.objects.is_empty() {
            return Err(bad(lineno, "record has no objects".into()));
        }
        let mut objects = Vec::with_capacity(record.objects.len());
        for o in &record.objects {
            let [c, s] = o.prompt;
            if c >= COLOR_COUNT || s >= SHAPE_COUNT {
                return Err(bad(lineno, format!("prompt tokens [{c}, {s}] out of vocabulary")));
            }
            let [x1, y1, x2, y2] = o.gt_box;
            let gt_box = BoundingBox::new(x1, y1, x2, y2)
                .map_err(|e| bad(lineno, format!("invalid gt_box: {e}")))?;
            objects.push(SceneObject {
                prompt: ReferringExpression::new(c, s),
                gt_box,
            });
        }
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if objects[i].prompt == objects[j].prompt {
                    return Err(bad(lineno, "duplicate prompt within scene".into()));
                }
            }
        }
        scenes.push(SceneAnnotation {
            seed: record.seed,
            image,
            objects,
        });
    }
    if scenes.len() != header.scenes {
        return Err(bad(
            scenes.len() + 1,
            format!("expected {} scenes, found {}", header.scenes, scenes.len()),
        ));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(123, 3).unwrap();
        let b = generate_scene(123, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn object_count_and_prompt_distinctness() {
        let s = generate_scene(5, 3).unwrap();
        assert_eq!(s.objects.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(s.objects[i].prompt, s.objects[j].prompt);
            }
        }
    }

    #[test]
    fn rejects_object_count_out_of_range() {
        assert!(generate_scene(1, 1).is_err());
        assert!(generate_scene(1, 5).is_err());
    }

    #[test]
    fn boxes_valid_tight_and_separated() {
        for seed in 0..30u64 {
            let s = generate_scene(seed, 2 + (seed % 3) as usize).unwrap();
            for obj in &s.objects {
                assert!(obj.gt_box.width() >= 0.02);
                assert!(obj.gt_box.height() >= 0.02);
                // every pixel of the object's color lies inside its box
                let (x1, y1, x2, y2) = obj.gt_box.corners();
                let color = COLORS[obj.prompt.color];
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let i = y * IMAGE_SIZE + x;
                        let is_color = (0..CHANNELS).all(|ch| {
                            (s.image.data()[ch * IMAGE_SIZE * IMAGE_SIZE + i]
                                - color[ch] as f32 as f64)
                                .abs()
                                < 1e-9
                        });
                        if is_color {
                            let (fx, fy) =
                                (x as f64 / IMAGE_SIZE as f64, y as f64 / IMAGE_SIZE as f64);
                            assert!(fx >= x1 && fx < x2 && fy >= y1 && fy < y2);
                        }
                    }
                }
            }
            for i in 0..s.objects.len() {
                for j in i + 1..s.objects.len() {
                    assert!(iou(&s.objects[i].gt_box, &s.objects[j].gt_box) < MAX_GT_IOU);
                }
            }
        }
    }

    #[test]
    fn image_values_in_range_and_f32_clean() {
        let s = generate_scene(9, 4).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn dataset_determinism_and_seed_disjointness() {
        let (tr1, va1) = generate_dataset(7, 10, 5).unwrap();
        let (tr2, va2) = generate_dataset(7, 10, 5).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        for t in &tr1 {
            for v in &va1 {
                assert_ne!(t.seed, v.seed);
                assert_ne!(t.image, v.image);
            }
        }
        let total: usize = tr1.iter().map(|s| s.objects.len()).sum();
        assert!(total >= 20, "expression count is the sum over scenes");
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let (train, _) = generate_dataset(3, 4, 1).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&train, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(train, back);
    }

    #[test]
    fn truncated_manifest_fails_closed() {
        let (train, _) = generate_dataset(3, 4, 1).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&train, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.jsonl");
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, &text[..text.len() - 40]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn out_of_range_coordinate_names_the_record() {
        let (train, _) = generate_dataset(3, 2, 1).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&train, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.jsonl");
        let text = fs::read_to_string(&mpath).unwrap();
        let mangled = text.replacen("\"gt_box\":[0.", "\"gt_box\":[7.", 1);
        assert_ne!(text, mangled, "expected a leading 0. coordinate to mangle");
        fs::write(&mpath, mangled).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, SceneError::Manifest { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let (train, _) = generate_dataset(3, 2, 1).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&train, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.jsonl");
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"version\":1", "\"version\":9", 1)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
