//! Assembles the two branches over a frozen backbone: parameter layout,
//! training-time loss graphs, and inference paths. Detection parameters
//! live under `det.*` and re-ID parameters under `reid.*`; the disjoint
//! prefixes are what make joint and per-branch training provably equal.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{
    Backbone, BackboneCatalog, Extraction, FeatureSelection, TextEmbedding,
};
use crate::boxes::{iou, nms, BoundingBox, Identity};
use crate::dgrpn::{
    gaussian_prior, init_rpn, modulate_features, modulate_forward, prior_forward, propose_regions,
    rpn_forward, rpn_loss, AnchorConfig, GaussianProposalMap, ProposalConfig,
};
use crate::error::{Error, Result};
use crate::heads::{
    det_head_forward, detection_losses, init_det_head, init_stripe, stripe_encode, RoiTarget,
};
use crate::msfrn::{init_msfrn, msfrn_coarsest_only, msfrn_forward, MsfrnConfig};
use crate::nn::{Bound, ParamStore};
use crate::pipeline::config::PipelineConfig;
use crate::sfan::{init_sfan, sfan_forward};
use crate::util;

/// Module toggles for ablations; everything on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Toggles {
    pub dgrpn: bool,
    pub msfrn: bool,
    pub sfan: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles {
            dgrpn: true,
            msfrn: true,
            sfan: true,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["B"];
        if self.dgrpn {
            parts.push("D");
        }
        if self.msfrn {
            parts.push("M");
        }
        if self.sfan {
            parts.push("S");
        }
        parts.join("+")
    }
}

pub struct Model {
    pub cfg: PipelineConfig,
    pub catalog: BackboneCatalog,
    pub selection: FeatureSelection,
    pub msfrn_cfg: MsfrnConfig,
    pub anchors: AnchorConfig,
    pub proposals: ProposalConfig,
}

impl Model {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let catalog = crate::backbone::synthetic::default_catalog();
        let selection = FeatureSelection::default_for(&catalog)?;
        Self::with_selection(cfg, catalog, selection)
    }

    /// Build around an explicit layer selection (used by the layer probes).
    pub fn with_selection(
        cfg: PipelineConfig,
        catalog: BackboneCatalog,
        selection: FeatureSelection,
    ) -> Result<Self> {
        cfg.validate()?;
        selection.validate(&catalog)?;
        let msfrn_cfg = msfrn_layout(&catalog, &selection, cfg.msfrn.width)?;
        let det_entry = catalog.find(&selection.detection_layer)?;
        let anchors = AnchorConfig::toy_default(det_entry.downscale);
        Ok(Model {
            cfg,
            catalog,
            selection,
            msfrn_cfg,
            anchors,
            proposals: ProposalConfig::default(),
        })
    }

    fn det_channels(&self) -> usize {
        self.catalog
            .find(&self.selection.detection_layer)
            .expect("validated")
            .channels
    }

    pub fn init_params(&self) -> ParamStore {
        let seed = self.cfg.seed;
        let mut store = ParamStore::new();
        store.insert(
            "det.beta",
            ArrayD::from_elem(IxDyn(&[]), self.cfg.dgrpn.beta_init),
        );
        store.insert(
            "det.gamma",
            ArrayD::from_elem(IxDyn(&[]), self.cfg.dgrpn.gamma_init),
        );
        let c = self.det_channels();
        init_rpn(&mut store, "det.rpn", c, self.anchors.per_cell(), seed);
        init_det_head(&mut store, "det.head", c, seed);
        init_msfrn(&mut store, "reid.msfrn", &self.msfrn_cfg, seed);
        init_sfan(
            &mut store,
            "reid.sfan",
            self.cfg.msfrn.width,
            self.catalog.embed_dim,
            &self.cfg.sfan,
            seed,
        );
        init_stripe(&mut store, "reid.head", self.cfg.msfrn.width, &self.cfg.stripe, seed);
        store
    }

    pub fn text_embeddings(&self, backbone: &dyn Backbone) -> Result<Vec<TextEmbedding>> {
        backbone.encode_text_prompts(&self.cfg.sfan.categories)
    }

    // ---- detection branch ----

    fn det_stride(&self) -> usize {
        self.anchors.stride
    }

    /// Gaussian prior for the scene attention, using the current beta.
    fn prior(&self, extraction: &Extraction, beta: f64) -> Result<GaussianProposalMap> {
        let (map, _) = gaussian_prior(&extraction.attention, &self.cfg.dgrpn, beta)?;
        Ok(map)
    }

    /// Differentiable detection loss: DGRPN-modulated RPN plus a sampled
    /// second-stage head. `scene_key` seeds the RoI sampling.
    pub fn det_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        extraction: &Extraction,
        gts: &[BoundingBox],
        toggles: Toggles,
        scene_key: &[u8],
    ) -> Result<Var> {
        let fmap = extraction
            .get(&self.selection.detection_layer)
            .ok_or_else(|| Error::Contract("detection layer missing from extraction".into()))?;
        let f = tape.input(fmap.data.clone().into_dyn());
        let f_det = if toggles.dgrpn {
            let beta_val = *store.get("det.beta")?.first().unwrap();
            let (_, peaks) = gaussian_prior(&extraction.attention, &self.cfg.dgrpn, beta_val)?;
            let beta = bound.var("det.beta");
            let gamma = bound.var("det.gamma");
            let shape = {
                let d = extraction.attention.scores.dim();
                (d.0, d.1)
            };
            let g = prior_forward(tape, &peaks, beta, shape);
            modulate_forward(tape, f, g, gamma)
        } else {
            f
        };
        let (cls, reg) = rpn_forward(tape, bound, "det.rpn", f_det);
        let grid = {
            let s = tape.value(cls).shape().to_vec();
            (s[1], s[2])
        };
        let rpn = rpn_loss(tape, cls, reg, &self.anchors, grid, gts);

        // second stage on jittered positives and clear negatives
        let mut rng = util::rng_from(&[b"roi", &self.cfg.seed.to_le_bytes(), scene_key]);
        let stride = self.det_stride() as f64;
        let image = self.catalog.input_size as f64;
        let mut rois: Vec<(Var, Var, RoiTarget)> = Vec::new();
        for gt in gts {
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng, b: &BoundingBox| {
                let dx = rng.gen_range(-2.0..2.0);
                let dy = rng.gen_range(-2.0..2.0);
                BoundingBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy).clip(image, image)
            };
            let pos = jitter(&mut rng, gt);
            if !pos.is_valid() {
                continue;
            }
            let crop = tape.roi_align(
                f_det,
                (pos.x1 / stride, pos.y1 / stride, pos.x2 / stride, pos.y2 / stride),
                4,
                4,
            );
            let pooled = tape.gap(crop);
            let (c, r) = det_head_forward(tape, bound, "det.head", pooled);
            rois.push((c, r, RoiTarget::positive(&pos, gt)));

            // one matched negative per positive
            for _ in 0..20 {
                let w = gt.width();
                let h = gt.height();
                let x1 = rng.gen_range(0.0..(image - w));
                let y1 = rng.gen_range(0.0..(image - h));
                let neg = BoundingBox::new(x1, y1, x1 + w, y1 + h);
                if gts.iter().all(|g| iou(g, &neg) < 0.1) {
                    let crop = tape.roi_align(
                        f_det,
                        (neg.x1 / stride, neg.y1 / stride, neg.x2 / stride, neg.y2 / stride),
                        4,
                        4,
                    );
                    let pooled = tape.gap(crop);
                    let (c, r) = det_head_forward(tape, bound, "det.head", pooled);
                    rois.push((c, r, RoiTarget::negative()));
                    break;
                }
            }
        }
        let second = detection_losses(tape, &rois);
        Ok(tape.add(rpn, second))
    }

    /// The modulated detection feature as a plain array, for inference.
    fn det_feature_value(
        &self,
        store: &ParamStore,
        extraction: &Extraction,
        toggles: Toggles,
    ) -> Result<Array3<f64>> {
        let fmap = extraction
            .get(&self.selection.detection_layer)
            .ok_or_else(|| Error::Contract("detection layer missing from extraction".into()))?;
        if !toggles.dgrpn {
            return Ok(fmap.data.clone());
        }
        let beta = *store.get("det.beta")?.first().unwrap();
        let gamma = *store.get("det.gamma")?.first().unwrap();
        let g = self.prior(extraction, beta)?;
        Ok(modulate_features(fmap, &g, gamma)?.data)
    }

    /// Full detector: RPN proposals rescored and refined by the RoI head.
    pub fn detect(
        &self,
        store: &ParamStore,
        extraction: &Extraction,
        toggles: Toggles,
    ) -> Result<Vec<BoundingBox>> {
        let f_det = self.det_feature_value(store, extraction, toggles)?;
        let image = self.catalog.input_size;
        let proposals = propose_regions(
            store,
            "det.rpn",
            &f_det,
            &self.anchors,
            &self.proposals,
            image,
        )?;
        let stride = self.det_stride() as f64;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, store);
        let fv = tape.input(f_det.into_dyn());
        let mut scored = Vec::new();
        for p in &proposals {
            let crop = tape.roi_align(
                fv,
                (p.x1 / stride, p.y1 / stride, p.x2 / stride, p.y2 / stride),
                4,
                4,
            );
            let pooled = tape.gap(crop);
            let (cls, reg) = det_head_forward(&mut tape, &bound, "det.head", pooled);
            let cls = tape.value(cls);
            let (bg, fg) = (cls[[0]], cls[[1]]);
            let m = bg.max(fg);
            let prob = (fg - m).exp() / ((bg - m).exp() + (fg - m).exp());
            let reg = tape.value(reg);
            let deltas = [reg[[0]], reg[[1]], reg[[2]], reg[[3]]];
            let refined = crate::boxes::decode_deltas(p, &deltas)
                .clip(image as f64, image as f64)
                .with_score(prob);
            if refined.is_valid() && prob > 0.05 {
                scored.push(refined);
            }
        }
        let mut kept = nms(&scored, self.proposals.nms_threshold);
        kept.truncate(self.proposals.post_nms_top);
        Ok(kept)
    }

    // ---- re-ID branch ----

    fn reid_inputs(
        &self,
        tape: &mut Tape,
        extraction: &Extraction,
    ) -> Result<BTreeMap<u8, Vec<Var>>> {
        let mut out: BTreeMap<u8, Vec<Var>> = BTreeMap::new();
        for layer in &self.selection.reid_layers {
            let fmap = extraction
                .get(layer)
                .ok_or_else(|| Error::Contract(format!("re-id layer {layer} missing")))?;
            let level = layer.level.ok_or_else(|| {
                Error::Contract(format!("re-id layer {layer} lacks a pyramid level"))
            })?;
            out.entry(level)
                .or_default()
                .push(tape.input(fmap.data.clone().into_dyn()));
        }
        Ok(out)
    }

    /// The semantic re-ID feature map and its stride in image pixels.
    pub fn reid_feature(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        extraction: &Extraction,
        toggles: Toggles,
        embeddings: &[TextEmbedding],
    ) -> Result<(Var, f64)> {
        let inputs = self.reid_inputs(tape, extraction)?;
        let (f_refined, stride) = if toggles.msfrn {
            let f = msfrn_forward(tape, bound, "reid.msfrn", &self.msfrn_cfg, &inputs)?;
            let finest = self.msfrn_cfg.levels.last().expect("validated").level;
            (f, (1usize << finest) as f64)
        } else {
            let f = msfrn_coarsest_only(tape, bound, "reid.msfrn", &self.msfrn_cfg, &inputs)?;
            let coarsest = self.msfrn_cfg.levels[0].level;
            (f, (1usize << coarsest) as f64)
        };
        let f_sem = if toggles.sfan {
            sfan_forward(tape, bound, "reid.sfan", &self.cfg.sfan, f_refined, embeddings)?
        } else {
            f_refined
        };
        Ok((f_sem, stride))
    }

    /// Unit-norm embeddings for a list of boxes in image coordinates.
    pub fn embed_boxes(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_sem: Var,
        stride: f64,
        boxes: &[BoundingBox],
    ) -> Result<Vec<Var>> {
        let (oh, ow) = self.cfg.stripe.roi_size;
        boxes
            .iter()
            .map(|b| {
                let crop = tape.roi_align(
                    f_sem,
                    (b.x1 / stride, b.y1 / stride, b.x2 / stride, b.y2 / stride),
                    oh,
                    ow,
                );
                stripe_encode(tape, bound, "reid.head", &self.cfg.stripe, crop)
            })
            .collect()
    }

    /// Re-ID training loss over the labeled boxes of a scene, plus the
    /// embeddings and identities needed for the OIM buffer update.
    pub fn reid_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        extraction: &Extraction,
        gts: &[BoundingBox],
        toggles: Toggles,
        embeddings: &[TextEmbedding],
        oim: &crate::heads::OimState,
    ) -> Result<(Var, Vec<(Var, Identity)>)> {
        let (f_sem, stride) = self.reid_feature(tape, bound, extraction, toggles, embeddings)?;
        let vars = self.embed_boxes(tape, bound, f_sem, stride, gts)?;
        let mut losses = Vec::new();
        let mut outputs = Vec::new();
        for (emb, gt) in vars.into_iter().zip(gts) {
            let identity = gt.identity.unwrap_or(Identity::Unlabeled);
            if let Some(l) = oim.loss(tape, emb, identity) {
                losses.push(l);
            }
            outputs.push((emb, identity));
        }
        Ok((crate::dgrpn::mean_of(tape, &losses), outputs))
    }
}

/// Group the selected re-ID layers by pyramid level, coarsest first.
fn msfrn_layout(
    catalog: &BackboneCatalog,
    selection: &FeatureSelection,
    width: usize,
) -> Result<MsfrnConfig> {
    let mut by_level: BTreeMap<(std::cmp::Reverse<usize>, u8), Vec<usize>> = BTreeMap::new();
    for layer in &selection.reid_layers {
        let entry = catalog.find(layer)?;
        let level = layer
            .level
            .ok_or_else(|| Error::Config(format!("re-id layer {layer} lacks a level")))?;
        by_level
            .entry((std::cmp::Reverse(entry.downscale), level))
            .or_default()
            .push(entry.channels);
    }
    let levels = by_level
        .into_iter()
        .map(|((_, level), chans)| crate::msfrn::LevelSpec {
            level,
            input_channels: chans,
        })
        .collect();
    let cfg = MsfrnConfig { width, levels };
    cfg.validate()?;
    Ok(cfg)
}
