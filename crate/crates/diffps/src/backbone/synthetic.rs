//! Deterministic synthetic backbone for desk-scale testing.
//!
//! Construction registers every annotated scene (and its horizontal flip)
//! by image digest. Extraction then recognizes rendered scenes and produces:
//!
//! - attention maps with a smooth peak at every annotated person center
//!   (sigma proportional to the box size),
//! - feature maps whose box interiors carry a fixed per-identity unit
//!   signature on top of pseudo-random background, with up-stage layers
//!   carrying the strongest signal,
//! - timestep-degraded features: the clean content is mixed with seeded
//!   noise using the forward-process sqrt(a_bar) / sqrt(1 - a_bar) weights,
//!   so identity information decays monotonically in t.
//!
//! Unknown images yield background features and an all-zero attention map.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    digest_parts, hashed_embedding, AttentionMap, Backbone, BackboneCatalog, Block,
    CatalogEntry, Extraction, FeatureMap, FeatureSelection, LayerId, NoiseSchedule, Stage,
    TextEmbedding,
};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::util;

const UP_AMPLITUDE: f64 = 3.0;
const MID_AMPLITUDE: f64 = 1.5;
const DOWN_AMPLITUDE: f64 = 1.0;
const BG_AMPLITUDE: f64 = 0.25;

/// Everything needed to render one synthetic scene deterministically.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub persons: Vec<(BoundingBox, u32)>,
    pub scene_seed: u64,
}

/// Render a scene to a 3-channel image: noisy background plus one filled
/// rectangle per person with an identity-derived color.
pub fn render_scene(spec: &SceneSpec) -> Array3<f64> {
    let mut rng = util::rng_from(&[b"render", &spec.scene_seed.to_le_bytes()]);
    let mut img = Array3::from_shape_fn((3, spec.height, spec.width), |_| rng.gen_range(0.0..0.3));
    for (bbox, id) in &spec.persons {
        let mut crng = util::rng_from(&[b"color", &id.to_le_bytes()]);
        let color: [f64; 3] = [
            crng.gen_range(0.4..1.0),
            crng.gen_range(0.4..1.0),
            crng.gen_range(0.4..1.0),
        ];
        let x1 = bbox.x1.max(0.0) as usize;
        let y1 = bbox.y1.max(0.0) as usize;
        let x2 = (bbox.x2.min(spec.width as f64)).ceil() as usize;
        let y2 = (bbox.y2.min(spec.height as f64)).ceil() as usize;
        for c in 0..3 {
            for y in y1..y2 {
                for x in x1..x2 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
    img
}

/// Reverse the width axis of a [C,H,W] image.
pub fn flip_image(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| img[[ci, y, w - 1 - x]])
}

pub struct SyntheticBackbone {
    catalog: BackboneCatalog,
    schedule: NoiseSchedule,
    seed: u64,
    scenes: BTreeMap<[u8; 32], Vec<(BoundingBox, u32)>>,
    signature_seeds: BTreeMap<u32, u64>,
}

impl SyntheticBackbone {
    pub fn new(scenes: &[SceneSpec], catalog: BackboneCatalog, seed: u64) -> Result<Self> {
        catalog.validate()?;
        let mut registry = BTreeMap::new();
        let mut signature_seeds: BTreeMap<u32, u64> = BTreeMap::new();
        for spec in scenes {
            let img = render_scene(spec);
            registry.insert(util::digest_array(&img), spec.persons.clone());
            let flipped: Vec<(BoundingBox, u32)> = spec
                .persons
                .iter()
                .map(|(b, id)| (b.flip_horizontal(spec.width as f64), *id))
                .collect();
            registry.insert(util::digest_array(&flip_image(&img)), flipped);
            for (_, id) in &spec.persons {
                let sig_seed = util::seed_from(&[b"sig", &seed.to_le_bytes(), &id.to_le_bytes()]);
                if let Some((other, _)) = signature_seeds.iter().find(|(k, v)| **v == sig_seed && **k != *id)
                {
                    return Err(Error::Construction(format!(
                        "identity signature collision between ids {other} and {id}"
                    )));
                }
                signature_seeds.insert(*id, sig_seed);
            }
        }
        Ok(SyntheticBackbone {
            catalog,
            schedule: NoiseSchedule::linear_default(),
            seed,
            scenes: registry,
            signature_seeds,
        })
    }

    /// Fixed per-identity unit vector for a given channel width.
    fn signature(&self, id: u32, channels: usize) -> Array1<f64> {
        let sig_seed = self
            .signature_seeds
            .get(&id)
            .copied()
            .unwrap_or_else(|| util::seed_from(&[b"sig", &self.seed.to_le_bytes(), &id.to_le_bytes()]));
        let mut rng = util::rng_from(&[b"sigvec", &sig_seed.to_le_bytes()]);
        let normal = StandardNormal;
        let mut v = Array1::from_shape_fn(channels, |_| {
            let x: f64 = normal.sample(&mut rng);
            x
        });
        let norm = v.dot(&v).sqrt().max(1e-12);
        v /= norm;
        v
    }

    fn stage_amplitude(stage: Stage) -> f64 {
        match stage {
            Stage::Up => UP_AMPLITUDE,
            Stage::Mid => MID_AMPLITUDE,
            Stage::Down => DOWN_AMPLITUDE,
        }
    }

    fn layer_feature(
        &self,
        entry: &CatalogEntry,
        digest: &[u8; 32],
        persons: &[(BoundingBox, u32)],
        t: usize,
    ) -> Result<FeatureMap> {
        let stride = entry.downscale;
        let hl = self.catalog.input_size / stride;
        let wl = hl;
        let layer_str = entry.layer.to_string();
        let mut rng = util::rng_from(&[b"bg", &self.seed.to_le_bytes(), layer_str.as_bytes(), digest]);
        let normal = StandardNormal;
        let mut clean = Array3::from_shape_fn((entry.channels, hl, wl), |_| {
            let x: f64 = normal.sample(&mut rng);
            x * BG_AMPLITUDE
        });
        let amp = Self::stage_amplitude(entry.layer.stage);
        for (bbox, id) in persons {
            let sig = self.signature(*id, entry.channels);
            let fb = bbox.downscale(stride as f64);
            // At least the center pixel carries the signature even when the
            // scaled box collapses below one cell.
            let (cx, cy) = fb.center();
            let x1 = (fb.x1.floor().max(0.0) as usize).min(wl - 1);
            let y1 = (fb.y1.floor().max(0.0) as usize).min(hl - 1);
            let x2 = (fb.x2.ceil() as usize).clamp(x1 + 1, wl);
            let y2 = (fb.y2.ceil() as usize).clamp(y1 + 1, hl);
            for y in y1..y2 {
                for x in x1..x2 {
                    for c in 0..entry.channels {
                        clean[[c, y, x]] += amp * sig[c];
                    }
                }
            }
            let (cxp, cyp) = (
                (cx as usize).min(wl - 1),
                (cy as usize).min(hl - 1),
            );
            if cxp < x1 || cxp >= x2 || cyp < y1 || cyp >= y2 {
                for c in 0..entry.channels {
                    clean[[c, cyp, cxp]] += amp * sig[c];
                }
            }
        }
        let data = if t == 0 {
            clean
        } else {
            if t > self.schedule.t_max() {
                return Err(Error::Range(format!(
                    "timestep {t} exceeds schedule T = {}",
                    self.schedule.t_max()
                )));
            }
            let ab = self.schedule.alpha_bar[t];
            let mut nrng = util::rng_from(&[
                b"noise",
                &self.seed.to_le_bytes(),
                layer_str.as_bytes(),
                digest,
                &(t as u64).to_le_bytes(),
            ]);
            let noise = Array3::from_shape_fn((entry.channels, hl, wl), |_| {
                let x: f64 = normal.sample(&mut nrng);
                x
            });
            clean * ab.sqrt() + &(noise * (1.0 - ab).sqrt())
        };
        Ok(FeatureMap {
            data,
            layer: entry.layer,
            timestep: t,
        })
    }

    fn attention_for(
        &self,
        entry: &CatalogEntry,
        persons: &[(BoundingBox, u32)],
    ) -> Array2<f64> {
        let stride = entry.downscale as f64;
        let hl = self.catalog.input_size / entry.downscale;
        let wl = hl;
        let mut scores = Array2::<f64>::zeros((hl, wl));
        for (bbox, _) in persons {
            let (cx, cy) = bbox.center();
            let (cx, cy) = (cx / stride, cy / stride);
            let sx = (0.5 * bbox.width() / stride).max(0.5);
            let sy = (0.5 * bbox.height() / stride).max(0.5);
            for y in 0..hl {
                for x in 0..wl {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let g = (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
                    if g > scores[[y, x]] {
                        scores[[y, x]] = g;
                    }
                }
            }
        }
        scores
    }
}

impl Backbone for SyntheticBackbone {
    fn catalog(&self) -> &BackboneCatalog {
        &self.catalog
    }

    fn extract_features(
        &self,
        image: &Array3<f64>,
        selection: &FeatureSelection,
        t: usize,
    ) -> Result<Extraction> {
        selection.validate(&self.catalog)?;
        let (_, h, w) = image.dim();
        if h != self.catalog.input_size || w != self.catalog.input_size {
            return Err(Error::Contract(format!(
                "image is {h}x{w}, catalog contract is {0}x{0}",
                self.catalog.input_size
            )));
        }
        let digest = util::digest_array(image);
        let empty = Vec::new();
        let persons = self.scenes.get(&digest).unwrap_or(&empty);
        let mut features = Vec::new();
        for layer in selection.all_layers() {
            let entry = self.catalog.find(&layer)?;
            features.push((layer, self.layer_feature(entry, &digest, persons, t)?));
        }
        let att_entry = self.catalog.find(&selection.detection_attention_layer)?;
        let attention = AttentionMap {
            scores: self.attention_for(att_entry, persons),
            token: "person".to_string(),
            layer: att_entry.layer,
        };
        Ok(Extraction { features, attention })
    }

    fn encode_text_prompts(&self, prompts: &[String]) -> Result<Vec<TextEmbedding>> {
        if prompts.is_empty() {
            return Err(Error::Argument("prompt list is empty".into()));
        }
        Ok(prompts
            .iter()
            .map(|p| TextEmbedding {
                vector: hashed_embedding(p, self.catalog.embed_dim, self.seed),
                prompt: p.clone(),
            })
            .collect())
    }

    fn digest(&self) -> [u8; 32] {
        let catalog = self.catalog.to_toml();
        let mut scene_bytes = Vec::new();
        for (d, persons) in &self.scenes {
            scene_bytes.extend_from_slice(d);
            for (b, id) in persons {
                for v in [b.x1, b.y1, b.x2, b.y2] {
                    scene_bytes.extend_from_slice(&v.to_le_bytes());
                }
                scene_bytes.extend_from_slice(&id.to_le_bytes());
            }
        }
        digest_parts(&[
            b"synthetic-backbone",
            &self.seed.to_le_bytes(),
            catalog.as_bytes(),
            &scene_bytes,
        ])
    }
}

/// Catalog used by the toy pipeline: 64x64 input, 32-d embeddings,
/// down/mid/up layer inventory with up-stage level l at downscale 2^l.
pub fn default_catalog() -> BackboneCatalog {
    let mut entries = Vec::new();
    for level in 0..4u8 {
        for (block, index) in [(Block::Res, 0), (Block::Res, 1), (Block::VitKey, 0)] {
            entries.push(CatalogEntry {
                layer: LayerId::down(level, block, index),
                channels: 16,
                downscale: 1 << level,
            });
        }
    }
    for (block, index) in [(Block::Res, 0), (Block::Vit, 0)] {
        entries.push(CatalogEntry {
            layer: LayerId::new(Stage::Mid, None, block, index).unwrap(),
            channels: 16,
            downscale: 8,
        });
    }
    for level in 0..4u8 {
        for (block, index) in [
            (Block::VitQuery, 0),
            (Block::VitKey, 0),
            (Block::VitValue, 0),
            (Block::Res, 0),
            (Block::Res, 1),
        ] {
            entries.push(CatalogEntry {
                layer: LayerId::up(level, block, index),
                channels: 16,
                downscale: 1 << level,
            });
        }
    }
    BackboneCatalog {
        input_size: 64,
        embed_dim: 32,
        entries,
    }
}
