//! Semantic feature attention for the re-ID branch.
//!
//! Refined features are projected into the text-embedding space and scored
//! per pixel against body-part prompt embeddings by cosine similarity
//! (Eq. 6). A softmax across categories turns the score maps into a
//! partition of unity, and the output is a weighted sum of the masked
//! feature map, one learnable scalar weight per category. With all weights
//! at their init of 1 the module is the identity, which doubles as the
//! "attention off" ablation baseline.

use ndarray::{Array1, Array2, Array3};

use crate::autograd::{Tape, Var};
use crate::backbone::TextEmbedding;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};

/// Body-part prompt categories, in fixed order.
pub const BODY_PARTS: [&str; 4] = ["head", "shirts", "pants", "shoes"];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SfanConfig {
    pub temperature: f64,
    pub categories: Vec<String>,
}

impl Default for SfanConfig {
    fn default() -> Self {
        SfanConfig {
            temperature: 1.0,
            categories: BODY_PARTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SfanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Config(
                "semantic normalization needs at least 2 categories".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Register SFAN parameters: a channel-to-embedding projection and one
/// scalar weight per category (init 1, making the module start as the
/// identity thanks to the partition of unity).
pub fn init_sfan(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    embed_dim: usize,
    cfg: &SfanConfig,
    seed: u64,
) {
    store.init_randn(&format!("{prefix}.proj.w"), &[embed_dim, channels], 0.1, seed);
    for c in &cfg.categories {
        store.init_const(&format!("{prefix}.w.{c}"), &[], 1.0);
    }
}

/// Eq. 6 per pixel: cosine between the projected feature vector and a text
/// embedding. A zero vector on either side scores exactly 0.
pub fn semantic_similarity(
    f: &Array3<f64>,
    proj: &Array2<f64>,
    e: &Array1<f64>,
) -> Result<Array2<f64>> {
    let (c, h, w) = f.dim();
    let (d, cin) = proj.dim();
    if cin != c {
        return Err(Error::Argument(format!(
            "projection expects {cin} channels, feature has {c}"
        )));
    }
    if e.len() != d {
        return Err(Error::Argument(format!(
            "embedding dim {} does not match projection dim {d}",
            e.len()
        )));
    }
    let en = e.dot(e).sqrt();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut num = 0.0;
            let mut sq = 0.0;
            for di in 0..d {
                let mut p = 0.0;
                for ci in 0..c {
                    p += proj[[di, ci]] * f[[ci, y, x]];
                }
                num += p * e[di];
                sq += p * p;
            }
            let pn = sq.sqrt();
            out[[y, x]] = if pn == 0.0 || en == 0.0 {
                0.0
            } else {
                num / (pn * en)
            };
        }
    }
    Ok(out)
}

const NORM_EPS: f64 = 1e-12;

/// Eq. 6 on a tape, differentiable in the projection (and the features).
/// The pixel norm is smoothed by a 1e-12 floor inside the square root.
pub fn similarity_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    f: Var,
    e: &TextEmbedding,
) -> Var {
    let proj = bound.var(&format!("{prefix}.proj.w"));
    let pf = tape.conv1x1(proj, f, None);
    let d = e.vector.len();
    let en = e.vector.dot(&e.vector).sqrt();
    let e_row = tape.input(
        Array2::from_shape_fn((1, d), |(_, i)| e.vector[i]).into_dyn(),
    );
    let num = tape.conv1x1(e_row, pf, None);
    let sq = tape.mul(pf, pf);
    let ones = tape.input(Array2::from_elem((1, d), 1.0).into_dyn());
    let sqsum = tape.conv1x1(ones, sq, None);
    let (h, w) = {
        let s = tape.value(num).shape().to_vec();
        (s[1], s[2])
    };
    let eps = tape.input(Array3::from_elem((1, h, w), NORM_EPS).into_dyn());
    let shifted = tape.add(sqsum, eps);
    let norm = tape.sqrt(shifted);
    let inv = tape.recip(norm);
    let cos = tape.mul(num, inv);
    let cos = tape.scale(cos, 1.0 / en);
    tape.unstack_map(cos, 0)
}

/// Softmax across categories with temperature; errors below 2 maps.
pub fn normalize_semantic(tape: &mut Tape, maps: &[Var], temperature: f64) -> Result<Var> {
    if maps.len() < 2 {
        return Err(Error::Argument(
            "semantic normalization needs at least 2 category maps".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let stacked = tape.stack_maps(maps);
    let scaled = tape.scale(stacked, 1.0 / temperature);
    Ok(tape.softmax_axis0(scaled))
}

/// F_sem = sum_c W_c (S_hat_c (*) F).
pub fn aggregate_semantic(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    f: Var,
    s_hat: Var,
    categories: &[String],
) -> Var {
    let mut acc: Option<Var> = None;
    for (k, c) in categories.iter().enumerate() {
        let mask = tape.unstack_map(s_hat, k);
        let masked = tape.spatial_scale(f, mask);
        let w = bound.var(&format!("{prefix}.w.{c}"));
        let term = tape.mul_scalar(masked, w);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.expect("at least one category")
}

/// Full SFAN pass: similarity per category, softmax normalization, weighted
/// aggregation. `embeddings` must follow `cfg.categories` order.
pub fn sfan_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &SfanConfig,
    f: Var,
    embeddings: &[TextEmbedding],
) -> Result<Var> {
    cfg.validate()?;
    if embeddings.len() != cfg.categories.len() {
        return Err(Error::Argument(format!(
            "got {} embeddings for {} categories",
            embeddings.len(),
            cfg.categories.len()
        )));
    }
    let maps: Vec<Var> = embeddings
        .iter()
        .map(|e| similarity_forward(tape, bound, prefix, f, e))
        .collect();
    let s_hat = normalize_semantic(tape, &maps, cfg.temperature)?;
    Ok(aggregate_semantic(tape, bound, prefix, f, s_hat, &cfg.categories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::max_rel_error;
    use crate::util;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn embeddings(dim: usize, cfg: &SfanConfig) -> Vec<TextEmbedding> {
        cfg.categories
            .iter()
            .map(|c| {
                let mut rng = util::rng_from(&[b"test-emb", c.as_bytes()]);
                let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
                let n = v.dot(&v).sqrt();
                v /= n;
                TextEmbedding {
                    vector: v,
                    prompt: c.clone(),
                }
            })
            .collect()
    }

    fn setup(channels: usize, dim: usize) -> (SfanConfig, ParamStore, Vec<TextEmbedding>) {
        let cfg = SfanConfig::default();
        let mut store = ParamStore::new();
        init_sfan(&mut store, "reid.sfan", channels, dim, &cfg, 31);
        let embs = embeddings(dim, &cfg);
        (cfg, store, embs)
    }

    #[test]
    fn similarity_matches_cosine_oracle() {
        let (_, store, embs) = setup(5, 6);
        let f = randn3((5, 4, 4), 1);
        let proj: Array2<f64> = store
            .get("reid.sfan.proj.w")
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        let pure = semantic_similarity(&f, &proj, &embs[0].vector).unwrap();

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let fv = tape.input(f.clone().into_dyn());
        let out = similarity_forward(&mut tape, &bound, "reid.sfan", fv, &embs[0]);
        let got = tape.value(out).clone();
        for (g, w) in got.iter().zip(pure.iter()) {
            assert!((g - w).abs() <= 1e-7, "{g} vs {w}");
            assert!(*w >= -1.0 - 1e-9 && *w <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn zero_feature_vector_scores_zero() {
        let (_, store, embs) = setup(5, 6);
        let f = Array3::zeros((5, 3, 3));
        let proj: Array2<f64> = store
            .get("reid.sfan.proj.w")
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        let s = semantic_similarity(&f, &proj, &embs[0].vector).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_rejects_shape_mismatches() {
        let (_, store, embs) = setup(5, 6);
        let proj: Array2<f64> = store
            .get("reid.sfan.proj.w")
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        assert!(semantic_similarity(&randn3((4, 3, 3), 2), &proj, &embs[0].vector).is_err());
        let short = Array1::zeros(3);
        assert!(semantic_similarity(&randn3((5, 3, 3), 2), &proj, &short).is_err());
    }

    #[test]
    fn normalized_maps_are_a_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let mut tape = Tape::new();
            let maps: Vec<Var> = (0..k)
                .map(|_| {
                    let m = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-3.0..3.0));
                    tape.input(m.into_dyn())
                })
                .collect();
            let t = rng.gen_range(0.2..3.0);
            let s = normalize_semantic(&mut tape, &maps, t).unwrap();
            let v = tape.value(s);
            for y in 0..5 {
                for x in 0..5 {
                    let sum: f64 = (0..k).map(|c| v[[c, y, x]]).sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    for c in 0..k {
                        assert!(v[[c, y, x]] > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_category_is_rejected() {
        let mut tape = Tape::new();
        let m = tape.input(Array2::<f64>::zeros((3, 3)).into_dyn());
        assert!(normalize_semantic(&mut tape, &[m], 1.0).is_err());
        let cfg = SfanConfig {
            temperature: 1.0,
            categories: vec!["head".into()],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn aggregation_matches_elementwise_oracle() {
        let (cfg, mut store, _) = setup(3, 4);
        // distinct weights so the oracle exercises them
        for (i, c) in cfg.categories.iter().enumerate() {
            store.insert(
                &format!("reid.sfan.w.{c}"),
                ArrayD::from_elem(ndarray::IxDyn(&[]), 0.5 + 0.25 * i as f64),
            );
        }
        let f = randn3((3, 4, 4), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s_hat = ndarray::Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(0.0..1.0));
        for y in 0..4 {
            for x in 0..4 {
                let sum: f64 = (0..4).map(|k| s_hat[[k, y, x]]).sum();
                for k in 0..4 {
                    s_hat[[k, y, x]] /= sum;
                }
            }
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let fv = tape.input(f.clone().into_dyn());
        let sv = tape.input(s_hat.clone().into_dyn());
        let out = aggregate_semantic(&mut tape, &bound, "reid.sfan", fv, sv, &cfg.categories);
        let got = tape.value(out).clone();
        for ((c, y, x), &v) in got
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .indexed_iter()
        {
            let want: f64 = (0..4)
                .map(|k| (0.5 + 0.25 * k as f64) * s_hat[[k, y, x]] * f[[c, y, x]])
                .sum();
            assert!((v - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn unit_weights_make_the_module_an_identity() {
        let (cfg, store, embs) = setup(4, 5);
        let f = randn3((4, 6, 6), 7);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let fv = tape.input(f.clone().into_dyn());
        let out = sfan_forward(&mut tape, &bound, "reid.sfan", &cfg, fv, &embs).unwrap();
        let got = tape.value(out);
        for (g, w) in got.iter().zip(f.iter()) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn forward_gradients_pass_finite_difference_check() {
        let cfg = SfanConfig::default();
        let mut store = ParamStore::new();
        init_sfan(&mut store, "s", 3, 4, &cfg, 41);
        // move the weights off the identity point
        for (i, c) in cfg.categories.iter().enumerate() {
            store.insert(
                &format!("s.w.{c}"),
                ArrayD::from_elem(ndarray::IxDyn(&[]), 0.8 + 0.1 * i as f64),
            );
        }
        let embs = embeddings(4, &cfg);
        let f = randn3((3, 4, 4), 8);
        let names = store.names();
        let mut values: Vec<ArrayD<f64>> =
            names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        values.push(f.clone().into_dyn());
        let err = max_rel_error(
            &values,
            &|tape, vars| {
                let bound_vars: std::collections::BTreeMap<String, Var> = names
                    .iter()
                    .cloned()
                    .zip(vars[..names.len()].iter().copied())
                    .collect();
                let bound = Bound::from_vars(bound_vars);
                let fv = vars[names.len()];
                let out = sfan_forward(tape, &bound, "s", &cfg, fv, &embs).unwrap();
                tape.sum_all(out)
            },
            1e-5,
        );
        assert!(err < 1e-4, "max relative gradient error {err}");
    }
}
