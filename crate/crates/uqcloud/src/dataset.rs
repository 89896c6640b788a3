//! Scene directories: `DIR/train/*.ply` and `DIR/test/*.ply`, written by
//! `synth` and read by `train` and `evaluate`.

use std::fs;
use std::path::{Path, PathBuf};

use uqcloud_core::datapipe::PointCloud;
use uqcloud_core::synthgen::{generate_scenes, train_test_split, SceneSpec, SurfaceKind};

use crate::cloud_io::{load_cloud, write_cloud};
use crate::settings::read_pairs;
use crate::{Error, Result};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";

/// Scene generator settings plus how many scenes to make and hold out.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPlan {
    pub spec: SceneSpec,
    pub scenes: usize,
    pub test_fraction: f64,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            scenes: 8,
            test_fraction: 0.25,
        }
    }
}

fn list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e: V::Err| Error::setting(key, format!("`{s}`: {e}")))
        })
        .collect()
}

fn one<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: V::Err| Error::setting(key, format!("`{value}`: {e}")))
}

impl SynthPlan {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.spec;
        match key {
            "extent" => {
                s.extent = list::<f64>(key, value)?
                    .try_into()
                    .map_err(|_| Error::setting(key, "expected three lengths"))?
            }
            "classes" => s.classes = list::<SurfaceKind>(key, value)?,
            "points_per_class" => s.points_per_class = one(key, value)?,
            "imbalance" => s.imbalance = list(key, value)?,
            "hole_probability" => s.hole_probability = one(key, value)?,
            "color_noise" => s.color_noise = one(key, value)?,
            "columns" => s.columns = one(key, value)?,
            "boxes" => s.boxes = one(key, value)?,
            "clutter_blobs" => s.clutter_blobs = one(key, value)?,
            "seed" => s.seed = one(key, value)?,
            "scenes" => self.scenes = one(key, value)?,
            "test_fraction" => self.test_fraction = one(key, value)?,
            _ => return Err(Error::setting(key, "unknown key")),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut plan = Self::default();
        for (k, v) in read_pairs(path)? {
            plan.set(&k, &v)?;
        }
        Ok(plan)
    }
}

/// Generates the scenes of `plan` and writes them as labelled binary PLY.
pub fn write_synthetic(plan: &SynthPlan, out: &Path) -> Result<(usize, usize)> {
    plan.spec.validate()?;
    let scenes = generate_scenes(&plan.spec, plan.scenes)?;
    let named: Vec<(String, PointCloud)> = scenes
        .into_iter()
        .enumerate()
        .map(|(i, c)| (format!("scene_{i:03}"), c))
        .collect();
    let (train, test) = train_test_split(&named, plan.test_fraction, plan.spec.seed)?;
    for (dir, part) in [(TRAIN_DIR, &train), (TEST_DIR, &test)] {
        let dir = out.join(dir);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (name, cloud) in part.iter() {
            write_cloud(&dir.join(format!("{name}.ply")), cloud)?;
        }
    }
    Ok((train.len(), test.len()))
}

/// Cloud files of `dir/part`, or of `dir` itself when it has no such
/// subdirectory, in name order.
pub fn scene_files(dir: &Path, part: &str) -> Result<Vec<PathBuf>> {
    let sub = dir.join(part);
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(Error::io(&dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(&dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(str::to_ascii_lowercase)
                        .as_deref(),
                    Some("ply" | "txt" | "xyz")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(&dir, "no point-cloud files (.ply, .txt, .xyz)"));
    }
    Ok(files)
}

pub fn load_scenes(dir: &Path, part: &str) -> Result<Vec<PointCloud>> {
    scene_files(dir, part)?.iter().map(|p| load_cloud(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_keys() {
        let mut p = SynthPlan::default();
        p.set("extent", "4, 3, 2.5").unwrap();
        p.set("classes", "floor,wall").unwrap();
        p.set("imbalance", "1,0.5").unwrap();
        assert_eq!(p.spec.extent, [4.0, 3.0, 2.5]);
        assert_eq!(p.spec.classes, vec![SurfaceKind::Floor, SurfaceKind::Wall]);
        assert!(p.set("extent", "1,2").is_err());
        assert!(p.set("shape", "round").is_err());
        assert!(p.set("classes", "floor,sofa").is_err());
    }
}
