//! On-disk scene storage.
//!
//! A split is a flat directory. Scene `scene_00042` is stored as
//!
//! ```text
//! scene_00042.json            metadata: seed, size, boxes, part ids, raster names
//! scene_00042.png             RGB image
//! scene_00042_parsing.png     8-bit global part labels
//! scene_00042_inst_00.png     8-bit labels of instance 0 (full image)
//! ```
//!
//! Scenes are listed in file-name order of their metadata files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::LabelRaster;
use crate::synth::{generate_scene, GeneratorConfig, GroundTruthInstance, Scene};

#[derive(Debug, Serialize, Deserialize)]
struct InstanceMeta {
    bbox: BBox,
    part_ids: Vec<u8>,
    raster: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    width: u32,
    height: u32,
    image: String,
    parsing: String,
    instances: Vec<InstanceMeta>,
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

fn write_labels(path: &Path, r: &LabelRaster) -> Result<()> {
    let img = GrayImage::from_raw(r.width() as u32, r.height() as u32, r.data().to_vec())
        .expect("raster size matches buffer");
    img.save(path)?;
    Ok(())
}

pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (index, scene) in scenes.iter().enumerate() {
        let name = scene_name(index);
        let image = format!("{name}.png");
        let parsing = format!("{name}_parsing.png");
        scene.image.save(dir.join(&image))?;
        write_labels(&dir.join(&parsing), &scene.global_parsing)?;
        let mut instances = Vec::with_capacity(scene.instances.len());
        for (i, inst) in scene.instances.iter().enumerate() {
            let raster = format!("{name}_inst_{i:02}.png");
            write_labels(&dir.join(&raster), &inst.parsing)?;
            instances.push(InstanceMeta { bbox: inst.bbox, part_ids: inst.part_ids.clone(), raster });
        }
        let meta = SceneMeta {
            seed: scene.seed,
            width: scene.image.width(),
            height: scene.image.height(),
            image,
            parsing,
            instances,
        };
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

fn metadata_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_scene(dir: &Path, meta_path: &Path, index: usize) -> Result<Scene> {
    let name = meta_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let fail = |reason: String| Error::Scene { index, name: name.clone(), reason };
    let text = fs::read_to_string(meta_path).map_err(|e| fail(format!("metadata: {e}")))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| fail(format!("metadata: {e}")))?;
    let read_labels = |file: &str| -> Result<LabelRaster> {
        let img = image::open(dir.join(file)).map_err(|e| fail(format!("{file}: {e}")))?;
        let img = img.as_luma8().ok_or_else(|| fail(format!("{file}: not an 8-bit label raster")))?;
        if img.dimensions() != (meta.width, meta.height) {
            return Err(fail(format!("{file}: size {:?} does not match the image", img.dimensions())));
        }
        Ok(LabelRaster::from_vec(meta.width as usize, meta.height as usize, img.as_raw().clone()))
    };
    let image: RgbImage = match image::open(dir.join(&meta.image)) {
        Ok(image::DynamicImage::ImageRgb8(img)) => img,
        Ok(_) => return Err(fail(format!("{}: not an 8-bit RGB image", meta.image))),
        Err(e) => return Err(fail(format!("{}: {e}", meta.image))),
    };
    if image.dimensions() != (meta.width, meta.height) {
        return Err(fail(format!("{}: size does not match metadata", meta.image)));
    }
    let global_parsing = read_labels(&meta.parsing)?;
    let instances = meta
        .instances
        .iter()
        .map(|im| {
            Ok(GroundTruthInstance { bbox: im.bbox, parsing: read_labels(&im.raster)?, part_ids: im.part_ids.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { image, instances, global_parsing, seed: meta.seed })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let files = metadata_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    files.iter().enumerate().map(|(i, f)| load_scene(dir, f, i)).collect()
}

/// Offset between the first training and first validation scene seed, so
/// the two splits never share a scene.
pub const VAL_SEED_OFFSET: u64 = 1 << 32;

/// `n` scenes with seeds `first_seed, first_seed + 1, ...`.
pub fn generate_split(cfg: &GeneratorConfig, first_seed: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).map(|i| generate_scene(first_seed + i, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenes(n: u64) -> Vec<Scene> {
        let cfg = GeneratorConfig::default();
        (0..n).map(|s| generate_scene(1000 + s, &cfg).unwrap()).collect()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let original = scenes(10);
        save_dataset(&original, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), original);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn missing_raster_names_the_scene() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&scenes(3), dir.path()).unwrap();
        fs::remove_file(dir.path().join("scene_00001_inst_00.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Scene { index, name, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(name, "scene_00001");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_metadata_names_the_scene() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&scenes(2), dir.path()).unwrap();
        fs::write(dir.path().join("scene_00000.json"), "{ not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene_00000"), "{err}");
    }
}
