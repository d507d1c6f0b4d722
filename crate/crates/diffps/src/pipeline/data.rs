//! Deterministic toy dataset generation and on-disk format: a JSON
//! manifest of scene records plus one raw tensor file per scene image.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::synthetic::{render_scene, SceneSpec};
use crate::backbone::{read_feature_dump, write_feature_dump, Block, FeatureMap, LayerId};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::pipeline::config::DataConfig;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub scene: SceneSpec,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub identities: u32,
    pub image_size: usize,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn specs(&self) -> Vec<SceneSpec> {
        self.records.iter().map(|r| r.scene.clone()).collect()
    }

    pub fn identities_in(&self, split: Split) -> std::collections::BTreeSet<u32> {
        self.split(split)
            .flat_map(|r| r.scene.persons.iter().map(|(_, id)| *id))
            .collect()
    }

    /// Write manifest.json plus scenes/scene_NNNN.fdmp image tensors.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("scenes"))?;
        let manifest = serde_json::to_string_pretty(self).expect("dataset serializes");
        std::fs::write(dir.join("manifest.json"), manifest)?;
        for r in &self.records {
            let img = render_scene(&r.scene);
            // image tensors ride in the feature-dump container under a
            // fixed placeholder layer id
            let f = FeatureMap {
                data: img,
                layer: LayerId::down(0, Block::Res, 0),
                timestep: 0,
            };
            write_feature_dump(&dir.join(format!("scenes/scene_{:04}.fdmp", r.id)), &f)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Config(format!("cannot read manifest in {}: {e}", dir.display())))?;
        let ds: Dataset = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
        for r in &ds.records {
            let path = dir.join(format!("scenes/scene_{:04}.fdmp", r.id));
            let img = read_feature_dump(&path)?;
            let rendered = render_scene(&r.scene);
            if img.data != rendered {
                return Err(Error::Contract(format!(
                    "scene {} tensor does not match its manifest record",
                    r.id
                )));
            }
        }
        Ok(ds)
    }
}

/// Render helper for consumers that work from records.
pub fn scene_image(record: &SceneRecord) -> Array3<f64> {
    render_scene(&record.scene)
}

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

fn place_boxes(
    rng: &mut impl Rng,
    n: usize,
    image_size: usize,
) -> Option<Vec<BoundingBox>> {
    let mut placed: Vec<BoundingBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(10.0..18.0);
            let h = rng.gen_range(18.0..28.0);
            let x1 = rng.gen_range(0.0..(image_size as f64 - w));
            let y1 = rng.gen_range(0.0..(image_size as f64 - h));
            let b = BoundingBox::new(x1, y1, x1 + w, y1 + h);
            if placed.iter().all(|p| crate::boxes::iou(p, &b) < 0.2) {
                placed.push(b);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Deterministic toy dataset: `scenes` scenes over `identities` persons,
/// each scene holding a uniform number of persons in the configured range.
/// Every fourth scene goes to the test split; scenes are then moved so each
/// test identity also occurs in training.
pub fn generate_toy_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.identities < 2 {
        return Err(Error::Generation("need at least 2 identities".into()));
    }
    if cfg.persons_min == 0 || cfg.persons_min > cfg.persons_max {
        return Err(Error::Generation("invalid persons-per-scene range".into()));
    }
    if cfg.persons_max > cfg.identities as usize {
        return Err(Error::Generation(format!(
            "cannot place {} distinct persons with only {} identities",
            cfg.persons_max, cfg.identities
        )));
    }
    let mut records = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let mut rng = util::rng_from(&[b"scene", &seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        let n = rng.gen_range(cfg.persons_min..=cfg.persons_max);
        let boxes = place_boxes(&mut rng, n, cfg.image_size).ok_or_else(|| {
            Error::Generation(format!(
                "could not place {n} persons in a {0}x{0} scene",
                cfg.image_size
            ))
        })?;
        // sample distinct identities
        let mut ids: Vec<u32> = (0..cfg.identities).collect();
        for k in 0..n {
            let j = rng.gen_range(k..ids.len());
            ids.swap(k, j);
        }
        let persons: Vec<(BoundingBox, u32)> = boxes
            .into_iter()
            .zip(ids.into_iter().take(n))
            .map(|(b, id)| (b.with_identity(crate::boxes::Identity::Labeled(id)), id))
            .collect();
        let scene_seed = util::seed_from(&[b"scene-seed", &seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        records.push(SceneRecord {
            id: i,
            scene: SceneSpec {
                width: cfg.image_size,
                height: cfg.image_size,
                persons,
                scene_seed,
            },
            split: if i % 4 == 3 { Split::Test } else { Split::Train },
        });
    }
    let mut ds = Dataset {
        identities: cfg.identities,
        image_size: cfg.image_size,
        records,
    };
    // test identities must also appear in training
    loop {
        let train_ids = ds.identities_in(Split::Train);
        let orphan = ds
            .split(Split::Test)
            .flat_map(|r| r.scene.persons.iter().map(|(_, id)| *id))
            .find(|id| !train_ids.contains(id));
        match orphan {
            None => break,
            Some(id) => {
                let idx = ds
                    .records
                    .iter()
                    .position(|r| {
                        r.split == Split::Test && r.scene.persons.iter().any(|(_, p)| *p == id)
                    })
                    .expect("orphan identity has a test scene");
                ds.records[idx].split = Split::Train;
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scenes: usize, identities: u32, pmin: usize, pmax: usize) -> DataConfig {
        DataConfig {
            scenes,
            identities,
            persons_min: pmin,
            persons_max: pmax,
            image_size: 64,
        }
    }

    #[test]
    fn single_scene_single_person() {
        let ds = generate_toy_dataset(&cfg(1, 2, 1, 1), 0).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].scene.persons.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(&cfg(20, 5, 1, 3), 9).unwrap();
        let b = generate_toy_dataset(&cfg(20, 5, 1, 3), 9).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_toy_dataset(&cfg(20, 5, 1, 3), 10).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn infeasible_placement_is_a_generation_error() {
        let mut c = cfg(1, 40, 30, 30);
        c.image_size = 64;
        assert!(generate_toy_dataset(&c, 0).is_err());
        assert!(generate_toy_dataset(&cfg(1, 1, 1, 1), 0).is_err());
        assert!(generate_toy_dataset(&cfg(1, 2, 3, 3), 0).is_err(), "distinct ids exhausted");
    }

    #[test]
    fn boxes_stay_inside_the_image_with_valid_identities() {
        let ds = generate_toy_dataset(&cfg(50, 8, 1, 3), 3).unwrap();
        for r in &ds.records {
            for (b, id) in &r.scene.persons {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.is_valid());
                assert!(*id < 8);
            }
            let mut ids: Vec<u32> = r.scene.persons.iter().map(|(_, i)| *i).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), r.scene.persons.len(), "identities distinct per scene");
        }
    }

    #[test]
    fn test_identities_are_covered_by_training() {
        let ds = generate_toy_dataset(&cfg(40, 6, 1, 2), 5).unwrap();
        let train = ds.identities_in(Split::Train);
        for id in ds.identities_in(Split::Test) {
            assert!(train.contains(&id), "identity {id} only in test");
        }
        assert!(ds.split(Split::Test).count() > 0);
        assert!(ds.split(Split::Train).count() > ds.split(Split::Test).count());
    }

    #[test]
    fn box_count_histogram_matches_the_sampling_law() {
        // persons-per-scene is uniform over {1,2,3}; with 600 scenes each
        // bucket holds about 200 +- Monte-Carlo noise.
        let ds = generate_toy_dataset(&cfg(600, 10, 1, 3), 1).unwrap();
        let mut hist = [0usize; 3];
        for r in &ds.records {
            hist[r.scene.persons.len() - 1] += 1;
        }
        // independently recompute the expected draws from the generator law
        let mut expect = [0usize; 3];
        for i in 0..600u64 {
            let mut rng = util::rng_from(&[b"scene", &1u64.to_le_bytes(), &i.to_le_bytes()]);
            let n: usize = rng.gen_range(1..=3);
            expect[n - 1] += 1;
        }
        assert_eq!(hist, expect, "histogram equals the seeded law exactly");
        for h in hist {
            assert!((h as f64 - 200.0).abs() < 60.0, "bucket {h} implausible for uniform");
        }
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toy_dataset(&cfg(6, 4, 1, 2), 2).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(
            serde_json::to_string(&ds).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }
}
