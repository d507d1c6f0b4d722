//! Backbone interface: hierarchical feature maps, cross-attention maps, and
//! text embeddings behind one trait.
//!
//! The shipped implementation is [`synthetic::SyntheticBackbone`], a
//! deterministic stand-in that places attention peaks at annotated person
//! centers and embeds identity signatures into box interiors, so the rest
//! of the pipeline is trainable and testable without diffusion weights.
//! [`RealDiffusionAdapter`] declares the slot a real UNet would fill.

pub mod synthetic;

use std::fmt;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Down,
    Mid,
    Up,
}

impl Stage {
    fn as_str(&self) -> &'static str {
        match self {
            Stage::Down => "down",
            Stage::Mid => "mid",
            Stage::Up => "up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Res,
    Vit,
    VitQuery,
    VitKey,
    VitValue,
    Sampler,
}

impl Block {
    fn as_str(&self) -> &'static str {
        match self {
            Block::Res => "res",
            Block::Vit => "vit",
            Block::VitQuery => "vit_query",
            Block::VitKey => "vit_key",
            Block::VitValue => "vit_value",
            Block::Sampler => "sampler",
        }
    }
}

/// Identifies one layer in a backbone catalog, e.g. `up.l3.vit_key.0`.
/// Mid-stage layers carry no level (`mid.vit.0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub stage: Stage,
    pub level: Option<u8>,
    pub block: Block,
    pub index: u8,
}

impl LayerId {
    pub fn new(stage: Stage, level: Option<u8>, block: Block, index: u8) -> Result<Self> {
        match (stage, level) {
            (Stage::Mid, Some(_)) => {
                return Err(Error::Argument("mid stage permits no level".into()))
            }
            (Stage::Down | Stage::Up, None) => {
                return Err(Error::Argument("down/up stages require a level".into()))
            }
            (_, Some(l)) if l > 3 => {
                return Err(Error::Argument(format!("level {l} out of [0,3]")))
            }
            _ => {}
        }
        Ok(LayerId {
            stage,
            level,
            block,
            index,
        })
    }

    pub fn up(level: u8, block: Block, index: u8) -> Self {
        LayerId::new(Stage::Up, Some(level), block, index).unwrap()
    }

    pub fn down(level: u8, block: Block, index: u8) -> Self {
        LayerId::new(Stage::Down, Some(level), block, index).unwrap()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            Some(l) => write!(
                f,
                "{}.l{}.{}.{}",
                self.stage.as_str(),
                l,
                self.block.as_str(),
                self.index
            ),
            None => write!(f, "{}.{}.{}", self.stage.as_str(), self.block.as_str(), self.index),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::Argument(format!("malformed layer id {s:?}"));
        let (stage, level, block_s, idx_s) = match parts.as_slice() {
            [st, lv, bl, ix] => {
                let level = lv
                    .strip_prefix('l')
                    .ok_or_else(bad)?
                    .parse::<u8>()
                    .map_err(|_| bad())?;
                (*st, Some(level), *bl, *ix)
            }
            [st, bl, ix] => (*st, None, *bl, *ix),
            _ => return Err(bad()),
        };
        let stage = match stage {
            "down" => Stage::Down,
            "mid" => Stage::Mid,
            "up" => Stage::Up,
            _ => return Err(bad()),
        };
        let block = match block_s {
            "res" => Block::Res,
            "vit" => Block::Vit,
            "vit_query" => Block::VitQuery,
            "vit_key" => Block::VitKey,
            "vit_value" => Block::VitValue,
            "sampler" => Block::Sampler,
            _ => return Err(bad()),
        };
        let index = idx_s.parse::<u8>().map_err(|_| bad())?;
        LayerId::new(stage, level, block, index)
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A channels x height x width grid with provenance.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub layer: LayerId,
    pub timestep: usize,
}

impl FeatureMap {
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Nonnegative score grid for one text token.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub scores: ndarray::Array2<f64>,
    pub token: String,
    pub layer: LayerId,
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vector: Array1<f64>,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub layer: LayerId,
    pub channels: usize,
    pub downscale: usize,
}

/// Layer inventory plus the input-resolution and embedding-width contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneCatalog {
    pub input_size: usize,
    pub embed_dim: usize,
    pub entries: Vec<CatalogEntry>,
}

impl BackboneCatalog {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.entries.iter().enumerate() {
            if !a.downscale.is_power_of_two() {
                return Err(Error::Catalog(format!(
                    "layer {} downscale {} is not a power of two",
                    a.layer, a.downscale
                )));
            }
            if self.input_size % a.downscale != 0 {
                return Err(Error::Catalog(format!(
                    "input size {} not divisible by downscale {}",
                    self.input_size, a.downscale
                )));
            }
            for b in &self.entries[i + 1..] {
                if a.layer == b.layer {
                    return Err(Error::Catalog(format!("duplicate layer id {}", a.layer)));
                }
            }
        }
        Ok(())
    }

    pub fn find(&self, layer: &LayerId) -> Result<&CatalogEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == *layer)
            .ok_or_else(|| Error::Catalog(format!("layer {layer} not in catalog")))
    }

    pub fn layers_at(&self, stage: Stage, level: u8) -> Vec<LayerId> {
        self.entries
            .iter()
            .filter(|e| e.layer.stage == stage && e.layer.level == Some(level))
            .map(|e| e.layer)
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: BackboneCatalog =
            toml::from_str(s).map_err(|e| Error::Config(format!("catalog parse: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Which layers feed detection and re-ID.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub detection_layer: LayerId,
    pub detection_attention_layer: LayerId,
    pub reid_layers: Vec<LayerId>,
}

impl FeatureSelection {
    /// Default selection: detection from up-level-3 ViT0 key, re-ID from
    /// 4 up-level-3 + 2 up-level-2 + 1 up-level-1 layers.
    pub fn default_for(catalog: &BackboneCatalog) -> Result<Self> {
        let take = |level: u8, n: usize| -> Result<Vec<LayerId>> {
            let avail = catalog.layers_at(Stage::Up, level);
            if avail.len() < n {
                return Err(Error::Catalog(format!(
                    "catalog has {} up-level-{level} layers, need {n}",
                    avail.len()
                )));
            }
            Ok(avail.into_iter().take(n).collect())
        };
        let mut reid = take(3, 4)?;
        reid.extend(take(2, 2)?);
        reid.extend(take(1, 1)?);
        let det = LayerId::up(3, Block::VitKey, 0);
        catalog.find(&det)?;
        Ok(FeatureSelection {
            detection_layer: det,
            detection_attention_layer: det,
            reid_layers: reid,
        })
    }

    pub fn validate(&self, catalog: &BackboneCatalog) -> Result<()> {
        catalog.find(&self.detection_layer)?;
        catalog.find(&self.detection_attention_layer)?;
        for l in &self.reid_layers {
            catalog.find(l)?;
        }
        Ok(())
    }

    pub fn all_layers(&self) -> Vec<LayerId> {
        let mut out = vec![self.detection_layer];
        for l in &self.reid_layers {
            if !out.contains(l) {
                out.push(*l);
            }
        }
        out
    }
}

/// Cumulative noise schedule: alpha_bar[t] with alpha_bar[0] = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta from 1e-4 to 2e-2 over T = 1000 steps.
    pub fn linear_default() -> Self {
        Self::linear(1000, 1e-4, 2e-2)
    }

    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * ((t - 1) as f64) / ((t_max - 1) as f64)
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        NoiseSchedule { alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }
}

/// Forward-noising closed form: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps,
/// with eps drawn deterministically from `seed`. t = 0 returns x0 exactly.
pub fn add_noise(
    x0: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array3<f64>> {
    if t > schedule.t_max() {
        return Err(Error::Range(format!(
            "timestep {t} exceeds schedule T = {}",
            schedule.t_max()
        )));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar[t];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let noise = Array3::from_shape_fn(x0.dim(), |_| {
        let e: f64 = normal.sample(&mut rng);
        e
    });
    Ok(x0 * ab.sqrt() + &(noise * (1.0 - ab).sqrt()))
}

/// One extraction call's outputs: requested feature maps in request order,
/// plus the "person" attention map at the detection attention layer.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub features: Vec<(LayerId, FeatureMap)>,
    pub attention: AttentionMap,
}

impl Extraction {
    pub fn get(&self, layer: &LayerId) -> Option<&FeatureMap> {
        self.features.iter().find(|(l, _)| l == layer).map(|(_, f)| f)
    }
}

/// Frozen feature provider. Implementations must be deterministic functions
/// of (inputs, construction seed) and immutable after construction.
pub trait Backbone {
    fn catalog(&self) -> &BackboneCatalog;

    fn extract_features(
        &self,
        image: &Array3<f64>,
        selection: &FeatureSelection,
        t: usize,
    ) -> Result<Extraction>;

    fn encode_text_prompts(&self, prompts: &[String]) -> Result<Vec<TextEmbedding>>;

    /// Digest over everything that determines outputs; used to assert the
    /// frozen-backbone contract across training runs.
    fn digest(&self) -> [u8; 32];
}

/// Declared adapter slot for a real diffusion UNet. Loading always fails:
/// pretrained weights are out of scope at desk scale, but the catalog
/// contract stays visible through this type.
#[derive(Debug)]
pub struct RealDiffusionAdapter {
    _private: (),
}

impl RealDiffusionAdapter {
    pub fn load(weights_path: &Path) -> Result<Self> {
        Err(Error::Runtime(format!(
            "real diffusion backbone not available at desk scale (requested weights: {})",
            weights_path.display()
        )))
    }
}

// ---- feature dump file format ----
//
// magic "FDMP", version u8, dtype u8 (0 = f64 LE), ndim u8,
// shape: ndim x u32, layer string (u16 len + utf8), timestep u32,
// then the elements row-major as little-endian f64.

const DUMP_MAGIC: &[u8; 4] = b"FDMP";

pub fn write_feature_dump(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    out.push(1); // version
    out.push(0); // dtype f64
    let shape = f.data.shape();
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    let layer = f.layer.to_string();
    out.extend_from_slice(&(layer.len() as u16).to_le_bytes());
    out.extend_from_slice(layer.as_bytes());
    out.extend_from_slice(&(f.timestep as u32).to_le_bytes());
    for v in f.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureMap> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Contract(format!("feature dump {}: {m}", path.display()));
    if buf.len() < 7 || &buf[..4] != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    if buf[4] != 1 || buf[5] != 0 {
        return Err(bad("unsupported version or dtype"));
    }
    let ndim = buf[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let slen = u16::from_le_bytes(buf[pos..pos + 2].try_into().unwrap()) as usize;
    pos += 2;
    let layer: LayerId = std::str::from_utf8(&buf[pos..pos + slen])
        .map_err(|_| bad("layer id not utf8"))?
        .parse()?;
    pos += slen;
    let timestep = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let n: usize = shape.iter().product();
    if buf.len() - pos != n * 8 {
        return Err(bad("payload length mismatch"));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f64::from_le_bytes(buf[pos + 8 * i..pos + 8 * i + 8].try_into().unwrap()));
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|_| bad("shape/payload mismatch"))?
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| bad("feature dumps are 3-d"))?;
    Ok(FeatureMap {
        data: arr,
        layer,
        timestep,
    })
}

/// Digest helper for backbone implementors.
pub(crate) fn digest_parts(parts: &[&[u8]]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Unit-norm embedding deterministically seeded from the prompt text.
pub(crate) fn hashed_embedding(prompt: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = util::rng_from(&[b"text", &seed.to_le_bytes(), prompt.as_bytes()]);
    let normal = StandardNormal;
    let mut v = Array1::from_shape_fn(dim, |_| {
        let x: f64 = normal.sample(&mut rng);
        x
    });
    let norm = v.dot(&v).sqrt().max(1e-12);
    v /= norm;
    v
}
