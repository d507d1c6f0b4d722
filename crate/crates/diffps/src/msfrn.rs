//! Multi-scale feature refinement for the re-ID branch.
//!
//! Per selected backbone layer, a lightweight pyramid module (1x1 conv,
//! depthwise 3x3, 1x1 conv) projects features to a common width; layers at
//! the same resolution are aggregated by concatenation plus a 1x1 conv.
//! Levels are then fused coarsest to finest: upsample + add + LayerNorm,
//! a 2-d Haar split, residual refinement of the three high-frequency bands
//! (Eq. 5, with learnable per-band scales gamma_X), and inverse transform.
//! A final 1x1 conv yields F_refined at the finest selected resolution.

use std::collections::BTreeMap;

use ndarray::Array3;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};

/// One resolution level: which pyramid level it is and the channel count of
/// each backbone layer feeding it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LevelSpec {
    pub level: u8,
    pub input_channels: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MsfrnConfig {
    /// Common channel width after the pyramid modules.
    pub width: usize,
    /// Levels ordered coarsest (smallest spatial size) first. Each fusion
    /// step doubles the resolution, so consecutive levels must differ by
    /// exactly one downscale octave.
    pub levels: Vec<LevelSpec>,
}

impl MsfrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("msfrn width must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("msfrn needs at least one level".into()));
        }
        for l in &self.levels {
            if l.input_channels.is_empty() {
                return Err(Error::Config(format!(
                    "msfrn level {} has no input layers",
                    l.level
                )));
            }
        }
        Ok(())
    }
}

const BANDS: [&str; 3] = ["lh", "hl", "hh"];

/// Register all MSFRN parameters under `prefix`.
pub fn init_msfrn(store: &mut ParamStore, prefix: &str, cfg: &MsfrnConfig, seed: u64) {
    let w = cfg.width;
    for spec in &cfg.levels {
        for (j, &cin) in spec.input_channels.iter().enumerate() {
            let p = format!("{prefix}.lpm.l{}.{j}", spec.level);
            store.init_randn(&format!("{p}.pw1.w"), &[w, cin], 0.1, seed);
            store.init_const(&format!("{p}.pw1.b"), &[w], 0.0);
            store.init_randn(&format!("{p}.dw.w"), &[w, 3, 3], 0.1, seed);
            store.init_randn(&format!("{p}.pw2.w"), &[w, w], 0.1, seed);
            store.init_const(&format!("{p}.pw2.b"), &[w], 0.0);
        }
        let n = spec.input_channels.len();
        let p = format!("{prefix}.agg.l{}", spec.level);
        store.init_randn(&format!("{p}.w"), &[w, w * n], 0.1, seed);
        store.init_const(&format!("{p}.b"), &[w], 0.0);
    }
    for f in 0..cfg.levels.len().saturating_sub(1) {
        let p = format!("{prefix}.frm.f{f}");
        store.init_const(&format!("{p}.ln.g"), &[w], 1.0);
        store.init_const(&format!("{p}.ln.b"), &[w], 0.0);
        for band in BANDS {
            let b = format!("{p}.srb.{band}");
            store.init_randn(&format!("{b}.dw1.w"), &[w, 3, 3], 0.1, seed);
            store.init_randn(&format!("{b}.pw.w"), &[w, w], 0.1, seed);
            store.init_const(&format!("{b}.pw.b"), &[w], 0.0);
            store.init_randn(&format!("{b}.gate.w"), &[w, w], 0.1, seed);
            store.init_const(&format!("{b}.gate.b"), &[w], 0.0);
            store.init_randn(&format!("{b}.dw2.w"), &[w, 3, 3], 0.1, seed);
            store.init_const(&format!("{p}.gamma.{band}"), &[], 1.0);
        }
    }
    store.init_randn(&format!("{prefix}.out.w"), &[w, w], 0.1, seed);
    store.init_const(&format!("{prefix}.out.b"), &[w], 0.0);
}

/// Pyramid module: 1x1 conv, ReLU, depthwise 3x3, ReLU, 1x1 conv.
pub fn lpm_forward(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Var {
    let w1 = bound.var(&format!("{name}.pw1.w"));
    let b1 = bound.var(&format!("{name}.pw1.b"));
    let dw = bound.var(&format!("{name}.dw.w"));
    let w2 = bound.var(&format!("{name}.pw2.w"));
    let b2 = bound.var(&format!("{name}.pw2.b"));
    let h = tape.conv1x1(w1, x, Some(b1));
    let h = tape.relu(h);
    let h = tape.depthwise(dw, h, None);
    let h = tape.relu(h);
    tape.conv1x1(w2, h, Some(b2))
}

/// Same-resolution aggregation: concatenate and project with a 1x1 conv.
pub fn aggregate_level(tape: &mut Tape, bound: &Bound, name: &str, parts: &[Var]) -> Var {
    let cat = tape.concat_channels(parts);
    let w = bound.var(&format!("{name}.w"));
    let b = bound.var(&format!("{name}.b"));
    tape.conv1x1(w, cat, Some(b))
}

/// Sub-band refinement: a channel gate from global context of a
/// depthwise-separable conv, applied to a depthwise conv of the band.
pub fn srb_forward(tape: &mut Tape, bound: &Bound, name: &str, band: Var) -> Var {
    let dw1 = bound.var(&format!("{name}.dw1.w"));
    let pw_w = bound.var(&format!("{name}.pw.w"));
    let pw_b = bound.var(&format!("{name}.pw.b"));
    let gate_w = bound.var(&format!("{name}.gate.w"));
    let gate_b = bound.var(&format!("{name}.gate.b"));
    let dw2 = bound.var(&format!("{name}.dw2.w"));
    let t = tape.depthwise(dw1, band, None);
    let t = tape.conv1x1(pw_w, t, Some(pw_b));
    let g = tape.gap(t);
    let s = tape.linear(gate_w, g);
    let s = tape.add(s, gate_b);
    let s = tape.sigmoid(s);
    let base = tape.depthwise(dw2, band, None);
    tape.channel_scale(base, s)
}

/// Fuse a coarse level into the next finer one (Eq. 5): upsample + add +
/// LayerNorm, Haar split, refine LH/HL/HH with per-band SRBs and learnable
/// scales, then invert the transform.
pub fn frm_fuse(tape: &mut Tape, bound: &Bound, name: &str, coarse: Var, fine: Var) -> Var {
    let up = tape.upsample2(coarse);
    let s = tape.add(up, fine);
    let ln_g = bound.var(&format!("{name}.ln.g"));
    let ln_b = bound.var(&format!("{name}.ln.b"));
    let s = tape.layer_norm_ch(s, ln_g, ln_b, 1e-5);
    let (ll, lh, hl, hh) = tape.dwt2(s);
    let mut refined = Vec::with_capacity(3);
    for (band, v) in BANDS.iter().zip([lh, hl, hh]) {
        let r = srb_forward(tape, bound, &format!("{name}.srb.{band}"), v);
        let gamma = bound.var(&format!("{name}.gamma.{band}"));
        refined.push(tape.mul_scalar(r, gamma));
    }
    tape.idwt2(ll, refined[0], refined[1], refined[2])
}

/// Full refinement: per-layer pyramid modules, per-level aggregation, then
/// coarse-to-fine fusion and a final 1x1 conv. `inputs` maps each level in
/// `cfg` to its bound backbone features, in the order of `input_channels`.
pub fn msfrn_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &MsfrnConfig,
    inputs: &BTreeMap<u8, Vec<Var>>,
) -> Result<Var> {
    cfg.validate()?;
    let mut per_level = Vec::with_capacity(cfg.levels.len());
    for spec in &cfg.levels {
        let feats = inputs
            .get(&spec.level)
            .ok_or_else(|| Error::Argument(format!("missing inputs for level {}", spec.level)))?;
        if feats.len() != spec.input_channels.len() {
            return Err(Error::Argument(format!(
                "level {} expects {} inputs, got {}",
                spec.level,
                spec.input_channels.len(),
                feats.len()
            )));
        }
        let projected: Vec<Var> = feats
            .iter()
            .enumerate()
            .map(|(j, &f)| lpm_forward(tape, bound, &format!("{prefix}.lpm.l{}.{j}", spec.level), f))
            .collect();
        per_level.push(aggregate_level(
            tape,
            bound,
            &format!("{prefix}.agg.l{}", spec.level),
            &projected,
        ));
    }
    let mut acc = per_level[0];
    for (f, &fine) in per_level[1..].iter().enumerate() {
        let cd = tape.value(acc).shape().to_vec();
        let fd = tape.value(fine).shape().to_vec();
        if cd[1] * 2 != fd[1] || cd[2] * 2 != fd[2] {
            return Err(Error::Contract(format!(
                "fusion step {f}: coarse {cd:?} does not upsample to fine {fd:?}"
            )));
        }
        acc = frm_fuse(tape, bound, &format!("{prefix}.frm.f{f}"), acc, fine);
    }
    let w = bound.var(&format!("{prefix}.out.w"));
    let b = bound.var(&format!("{prefix}.out.b"));
    Ok(tape.conv1x1(w, acc, Some(b)))
}

/// Shapes of the per-level feature maps a config expects, given the finest
/// grid size; used by callers to sanity-check backbone outputs.
pub fn expected_shapes(cfg: &MsfrnConfig, finest: (usize, usize)) -> Vec<(u8, (usize, usize))> {
    let n = cfg.levels.len();
    cfg.levels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let shrink = 1 << (n - 1 - i);
            (s.level, (finest.0 / shrink, finest.1 / shrink))
        })
        .collect()
}

/// Degenerate "no multi-scale" baseline for ablations: the coarsest level's
/// pyramid + aggregation + output conv only, skipping every fusion step.
pub fn msfrn_coarsest_only(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &MsfrnConfig,
    inputs: &BTreeMap<u8, Vec<Var>>,
) -> Result<Var> {
    cfg.validate()?;
    let spec = &cfg.levels[0];
    let feats = inputs
        .get(&spec.level)
        .ok_or_else(|| Error::Argument(format!("missing inputs for level {}", spec.level)))?;
    let projected: Vec<Var> = feats
        .iter()
        .enumerate()
        .map(|(j, &f)| lpm_forward(tape, bound, &format!("{prefix}.lpm.l{}.{j}", spec.level), f))
        .collect();
    let agg = aggregate_level(tape, bound, &format!("{prefix}.agg.l{}", spec.level), &projected);
    let w = bound.var(&format!("{prefix}.out.w"));
    let b = bound.var(&format!("{prefix}.out.b"));
    Ok(tape.conv1x1(w, agg, Some(b)))
}

/// Convenience: the config implied by a level -> channel-counts layout.
pub fn config_from_layout(width: usize, layout: &[(u8, Vec<usize>)]) -> MsfrnConfig {
    MsfrnConfig {
        width,
        levels: layout
            .iter()
            .map(|(level, chans)| LevelSpec {
                level: *level,
                input_channels: chans.clone(),
            })
            .collect(),
    }
}

pub fn bind_inputs(
    tape: &mut Tape,
    features: &[(u8, Array3<f64>)],
) -> BTreeMap<u8, Vec<Var>> {
    let mut out: BTreeMap<u8, Vec<Var>> = BTreeMap::new();
    for (level, f) in features {
        out.entry(*level).or_default().push(tape.input(f.clone().into_dyn()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::max_rel_error;
    use crate::wavelet;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    // Pure reimplementations used as oracles.
    fn pconv1x1(w: &Array2<f64>, b: &Array1<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (co, ci) = w.dim();
        let (cin, h, wd) = x.dim();
        assert_eq!(ci, cin);
        Array3::from_shape_fn((co, h, wd), |(o, y, xx)| {
            b[o] + (0..ci).map(|i| w[[o, i]] * x[[i, y, xx]]).sum::<f64>()
        })
    }

    fn pdepthwise(w: &Array3<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        Array3::from_shape_fn((c, h, wd), |(ci, y, xx)| {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as i64 + ky as i64 - 1;
                    let sx = xx as i64 + kx as i64 - 1;
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < wd as i64 {
                        acc += w[[ci, ky, kx]] * x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
            acc
        })
    }

    fn prelu(x: &Array3<f64>) -> Array3<f64> {
        x.mapv(|v| v.max(0.0))
    }

    fn pln(x: &Array3<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let mut out = Array3::zeros((c, h, w));
        for y in 0..h {
            for xx in 0..w {
                let mean = (0..c).map(|ci| x[[ci, y, xx]]).sum::<f64>() / c as f64;
                let var =
                    (0..c).map(|ci| (x[[ci, y, xx]] - mean).powi(2)).sum::<f64>() / c as f64;
                for ci in 0..c {
                    out[[ci, y, xx]] =
                        g[ci] * (x[[ci, y, xx]] - mean) / (var + eps).sqrt() + b[ci];
                }
            }
        }
        out
    }

    fn pupsample2(x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| {
            let sy = (y as f64 + 0.5) / 2.0 - 0.5;
            let sx = (xx as f64 + 0.5) / 2.0 - 0.5;
            crate::autograd::bilinear_weights(sy, sx, h, w)
                .into_iter()
                .map(|(yy, xb, wt)| wt * x[[ci, yy, xb]])
                .sum()
        })
    }

    fn a2<'a>(
        store: &'a ParamStore,
        name: &str,
    ) -> ndarray::ArrayView2<'a, f64> {
        store
            .get(name)
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
    }

    fn a1s<'a>(store: &'a ParamStore, name: &str) -> ndarray::ArrayView1<'a, f64> {
        store
            .get(name)
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
    }

    fn a3s<'a>(store: &'a ParamStore, name: &str) -> ndarray::ArrayView3<'a, f64> {
        store
            .get(name)
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
    }

    fn tiny_cfg() -> MsfrnConfig {
        config_from_layout(4, &[(3, vec![3, 3]), (2, vec![3]), (1, vec![3])])
    }

    fn tiny_store(cfg: &MsfrnConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_msfrn(&mut store, "reid.msfrn", cfg, 17);
        store
    }

    #[test]
    fn lpm_matches_pure_composition() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let x = randn3((3, 6, 6), 1);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let xv = tape.input(x.clone().into_dyn());
        let out = lpm_forward(&mut tape, &bound, "reid.msfrn.lpm.l3.0", xv);
        let got = tape.value(out).clone();

        let p = "reid.msfrn.lpm.l3.0";
        let h = pconv1x1(
            &a2(&store, &format!("{p}.pw1.w")).to_owned(),
            &a1s(&store, &format!("{p}.pw1.b")).to_owned(),
            &x,
        );
        let h = prelu(&h);
        let h = pdepthwise(&a3s(&store, &format!("{p}.dw.w")).to_owned(), &h);
        let h = prelu(&h);
        let want = pconv1x1(
            &a2(&store, &format!("{p}.pw2.w")).to_owned(),
            &a1s(&store, &format!("{p}.pw2.b")).to_owned(),
            &h,
        );
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregation_matches_concat_projection() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let a = randn3((4, 5, 5), 2);
        let b = randn3((4, 5, 5), 3);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let av = tape.input(a.clone().into_dyn());
        let bv = tape.input(b.clone().into_dyn());
        let out = aggregate_level(&mut tape, &bound, "reid.msfrn.agg.l3", &[av, bv]);
        let got = tape.value(out).clone();

        let mut cat = Array3::zeros((8, 5, 5));
        cat.slice_mut(ndarray::s![..4, .., ..]).assign(&a);
        cat.slice_mut(ndarray::s![4.., .., ..]).assign(&b);
        let want = pconv1x1(
            &a2(&store, "reid.msfrn.agg.l3.w").to_owned(),
            &a1s(&store, "reid.msfrn.agg.l3.b").to_owned(),
            &cat,
        );
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn srb_matches_staged_oracle() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let band = randn3((4, 4, 4), 4);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bv = tape.input(band.clone().into_dyn());
        let name = "reid.msfrn.frm.f0.srb.lh";
        let out = srb_forward(&mut tape, &bound, name, bv);
        let got = tape.value(out).clone();

        let t = pdepthwise(&a3s(&store, &format!("{name}.dw1.w")).to_owned(), &band);
        let t = pconv1x1(
            &a2(&store, &format!("{name}.pw.w")).to_owned(),
            &a1s(&store, &format!("{name}.pw.b")).to_owned(),
            &t,
        );
        let g: Array1<f64> = Array1::from_shape_fn(4, |c| {
            t.index_axis(ndarray::Axis(0), c).mean().unwrap()
        });
        let gw = a2(&store, &format!("{name}.gate.w"));
        let gb = a1s(&store, &format!("{name}.gate.b"));
        let s = Array1::from_shape_fn(4, |o| {
            let z: f64 = (0..4).map(|i| gw[[o, i]] * g[i]).sum::<f64>() + gb[o];
            1.0 / (1.0 + (-z).exp())
        });
        let base = pdepthwise(&a3s(&store, &format!("{name}.dw2.w")).to_owned(), &band);
        for ((c, y, x), &v) in got
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .indexed_iter()
        {
            let want = s[c] * base[[c, y, x]];
            assert!((v - want).abs() < 1e-10, "({c},{y},{x})");
        }
    }

    #[test]
    fn frm_fuse_matches_staged_oracle() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let coarse = randn3((4, 3, 3), 5);
        let fine = randn3((4, 6, 6), 6);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let cv = tape.input(coarse.clone().into_dyn());
        let fv = tape.input(fine.clone().into_dyn());
        let name = "reid.msfrn.frm.f0";
        let out = frm_fuse(&mut tape, &bound, name, cv, fv);
        let got = tape.value(out).clone();

        let s = pupsample2(&coarse) + &fine;
        let s = pln(
            &s,
            &a1s(&store, &format!("{name}.ln.g")).to_owned(),
            &a1s(&store, &format!("{name}.ln.b")).to_owned(),
            1e-5,
        );
        let bands = wavelet::dwt2(&s).unwrap();
        // Reuse the tape's SRB for band refinement (verified separately)
        // but apply gammas and the inverse transform independently.
        let refine = |b: &Array3<f64>, band: &str| -> Array3<f64> {
            let mut t = Tape::new();
            let bd = Bound::bind(&mut t, &store);
            let v = t.input(b.clone().into_dyn());
            let r = srb_forward(&mut t, &bd, &format!("{name}.srb.{band}"), v);
            t.value(r)
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned()
        };
        let lh = refine(&bands.lh, "lh");
        let hl = refine(&bands.hl, "hl");
        let hh = refine(&bands.hh, "hh");
        let want = wavelet::idwt2(&bands.ll, &lh, &hl, &hh).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-9);
        }
        assert_eq!(got.shape(), &[4, 6, 6]);
    }

    #[test]
    fn refine_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let feats = vec![
            (3u8, randn3((3, 4, 4), 7)),
            (3, randn3((3, 4, 4), 8)),
            (2, randn3((3, 8, 8), 9)),
            (1, randn3((3, 16, 16), 10)),
        ];
        let run = || {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &store);
            let inputs = bind_inputs(&mut tape, &feats);
            let out = msfrn_forward(&mut tape, &bound, "reid.msfrn", &cfg, &inputs).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[4, 16, 16]);
        assert_eq!(a, b);
    }

    #[test]
    fn refine_rejects_wrong_resolution_chain() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg);
        let feats = vec![
            (3u8, randn3((3, 4, 4), 7)),
            (3, randn3((3, 4, 4), 8)),
            (2, randn3((3, 8, 8), 9)),
            (1, randn3((3, 32, 32), 10)), // should be 16x16
        ];
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let inputs = bind_inputs(&mut tape, &feats);
        assert!(msfrn_forward(&mut tape, &bound, "reid.msfrn", &cfg, &inputs).is_err());
    }

    #[test]
    fn expected_shapes_follow_octaves() {
        let cfg = tiny_cfg();
        let shapes = expected_shapes(&cfg, (16, 16));
        assert_eq!(shapes, vec![(3, (4, 4)), (2, (8, 8)), (1, (16, 16))]);
    }

    #[test]
    fn refine_gradients_pass_finite_difference_check() {
        let cfg = config_from_layout(2, &[(3, vec![2]), (2, vec![2])]);
        let mut store = ParamStore::new();
        init_msfrn(&mut store, "m", &cfg, 23);
        let feats = vec![(3u8, randn3((2, 2, 2), 11)), (2, randn3((2, 4, 4), 12))];

        let names = store.names();
        let values: Vec<ndarray::ArrayD<f64>> =
            names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let err = max_rel_error(
            &values,
            &|tape, vars| {
                let bound_vars: std::collections::BTreeMap<String, crate::autograd::Var> =
                    names.iter().cloned().zip(vars.iter().copied()).collect();
                let bound = Bound::from_vars(bound_vars);
                let inputs = bind_inputs(tape, &feats);
                let out = msfrn_forward(tape, &bound, "m", &cfg, &inputs).unwrap();
                tape.sum_all(out)
            },
            1e-5,
        );
        assert!(err < 1e-4, "max relative gradient error {err}");
    }
}
