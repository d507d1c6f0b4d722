//! Training loop (warm-up + step-decay Adam over shuffled scene batches)
//! and the evaluation protocol shared by the CLI, probes, and ablations.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Tape;
use crate::backbone::{Backbone, Extraction};
use crate::boxes::{BoundingBox, Identity};
use crate::error::{Error, Result};
use crate::eval::{
    detection_ap_recall, detection_ap_small, search_map_top1, DetectionMetrics, GalleryItem,
    Query, SearchMetrics,
};
use crate::heads::{OimConfig, OimState};
use crate::nn::{Adam, Bound, ParamStore};
use crate::pipeline::data::{scene_image, Dataset, SceneRecord, Split};
use crate::pipeline::model::{Model, Toggles};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainMode {
    Joint,
    DetectionOnly,
    ReidOnly,
}

impl TrainMode {
    fn trains_det(self) -> bool {
        self != TrainMode::ReidOnly
    }

    fn trains_reid(self) -> bool {
        self != TrainMode::DetectionOnly
    }
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub oim: OimState,
    /// Append-only per-step metrics, tab separated:
    /// step, epoch, lr, det loss, reid loss.
    pub metrics_log: String,
}

/// Learning rate for a 1-based epoch and 0-based step within the epoch:
/// linear warm-up from `lr_start` to `lr_peak` across epoch 1, then the
/// peak with a step decay once 60% and again once 85% of the epochs have
/// passed.
pub fn learning_rate(
    cfg: &crate::pipeline::config::TrainConfig,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
) -> f64 {
    let base = if epoch == 1 {
        let frac = (step_in_epoch + 1) as f64 / steps_per_epoch.max(1) as f64;
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    } else {
        cfg.lr_peak
    };
    let m1 = (0.6 * cfg.epochs as f64).ceil() as usize;
    let m2 = (0.85 * cfg.epochs as f64).ceil() as usize;
    let mut lr = base;
    if epoch > m1 {
        lr *= cfg.decay;
    }
    if epoch > m2 {
        lr *= cfg.decay;
    }
    lr
}

fn scene_inputs(
    model: &Model,
    backbone: &dyn Backbone,
    record: &SceneRecord,
    flip: bool,
) -> Result<(Extraction, Vec<BoundingBox>)> {
    let mut image = scene_image(record);
    let mut gts: Vec<BoundingBox> = record.scene.persons.iter().map(|(b, _)| *b).collect();
    if flip {
        image = crate::backbone::synthetic::flip_image(&image);
        let w = record.scene.width as f64;
        gts = gts.iter().map(|b| b.flip_horizontal(w)).collect();
    }
    let extraction = backbone.extract_features(&image, &model.selection, model.cfg.timestep)?;
    Ok((extraction, gts))
}

/// Train the selected branches. All randomness (shuffling, flips, RoI
/// sampling) is keyed off the config seed, independently per branch, so
/// joint training walks the exact same parameter trajectory as the two
/// single-branch runs.
pub fn train(
    model: &Model,
    dataset: &Dataset,
    backbone: &dyn Backbone,
    mode: TrainMode,
    toggles: Toggles,
) -> Result<TrainOutput> {
    let cfg = &model.cfg;
    let mut store = model.init_params();
    let mut oim = OimState::new(OimConfig {
        temperature: cfg.oim.temperature,
        momentum: cfg.oim.momentum,
        queue_size: cfg.oim.queue_size,
        embed_dim: cfg.stripe.embed_dim,
        num_labeled: dataset.identities as usize,
    });
    let embeddings = model.text_embeddings(backbone)?;
    let mut adam = Adam::new(0.9, 0.999);
    let mut log = String::from("step\tepoch\tlr\tdet_loss\treid_loss\n");

    let train_scenes: Vec<&SceneRecord> = dataset.split(Split::Train).collect();
    if train_scenes.is_empty() {
        return Err(Error::Protocol("training split is empty".into()));
    }
    let steps_per_epoch = train_scenes.len().div_ceil(cfg.train.batch_size);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut order_rng = util::rng_from(&[
            b"order",
            &cfg.seed.to_le_bytes(),
            &(epoch as u64).to_le_bytes(),
        ]);
        order.shuffle(&mut order_rng);

        for (step, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let lr = learning_rate(&cfg.train, epoch, step, steps_per_epoch);
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &store);
            let mut det_losses = Vec::new();
            let mut reid_losses = Vec::new();
            let mut pending_updates: Vec<(crate::autograd::Var, Identity)> = Vec::new();

            for &idx in chunk {
                let record = train_scenes[idx];
                let mut aug_rng = util::rng_from(&[
                    b"aug",
                    &cfg.seed.to_le_bytes(),
                    &(epoch as u64).to_le_bytes(),
                    &(record.id as u64).to_le_bytes(),
                ]);
                let flip: bool = aug_rng.gen();
                let (extraction, gts) = scene_inputs(model, backbone, record, flip)?;

                if mode.trains_det() {
                    let key = [
                        (epoch as u64).to_le_bytes(),
                        (record.id as u64).to_le_bytes(),
                    ]
                    .concat();
                    let l = model.det_loss(
                        &mut tape,
                        &bound,
                        &store,
                        &extraction,
                        &gts,
                        toggles,
                        &key,
                    )?;
                    det_losses.push(l);
                }
                if mode.trains_reid() {
                    let (l, outs) = model.reid_loss(
                        &mut tape,
                        &bound,
                        &extraction,
                        &gts,
                        toggles,
                        &embeddings,
                        &oim,
                    )?;
                    reid_losses.push(l);
                    pending_updates.extend(outs);
                }
            }

            let det_mean = crate::dgrpn::mean_of(&mut tape, &det_losses);
            let reid_mean = crate::dgrpn::mean_of(&mut tape, &reid_losses);
            let total = tape.add(det_mean, reid_mean);
            let det_val = tape.scalar_value(det_mean);
            let reid_val = tape.scalar_value(reid_mean);
            if !det_val.is_finite() || !reid_val.is_finite() {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "det_loss": det_val.to_string(),
                    "reid_loss": reid_val.to_string(),
                    "scene_ids": chunk.iter().map(|&i| train_scenes[i].id).collect::<Vec<_>>(),
                });
                return Err(Error::Runtime(format!(
                    "non-finite loss, aborting; batch dump: {dump}"
                )));
            }

            let grads = tape.backward(total);
            let keep = |name: &str| match mode {
                TrainMode::Joint => true,
                TrainMode::DetectionOnly => name.starts_with("det."),
                TrainMode::ReidOnly => name.starts_with("reid."),
            };
            let gmap = bound.grads(&store, &grads, keep);
            let emb_values: Vec<(Array1<f64>, Identity)> = pending_updates
                .iter()
                .map(|(v, id)| {
                    let arr = tape.value(*v);
                    (
                        Array1::from_iter(arr.iter().copied()),
                        *id,
                    )
                })
                .collect();
            adam.step(&mut store, &gmap, lr)?;
            for (emb, identity) in &emb_values {
                oim.update(emb, *identity);
            }

            log.push_str(&format!(
                "{global_step}\t{epoch}\t{lr:.12e}\t{det_val:.12e}\t{reid_val:.12e}\n"
            ));
            global_step += 1;
        }
    }
    Ok(TrainOutput {
        store,
        oim,
        metrics_log: log,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub detection: DetectionMetrics,
    pub detection_small: DetectionMetrics,
    pub search: SearchMetrics,
}

/// Evaluate on the test split. Detection runs the full detector; search
/// metrics use ground-truth boxes as the gallery so re-ID quality is
/// measured independently of detector recall.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    backbone: &dyn Backbone,
    toggles: Toggles,
) -> Result<EvalReport> {
    let test: Vec<&SceneRecord> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Protocol("test split is empty".into()));
    }
    let embeddings = model.text_embeddings(backbone)?;
    let iou_thr = model.cfg.eval.iou_threshold;

    let mut dets_per_image = Vec::with_capacity(test.len());
    let mut gts_per_image = Vec::with_capacity(test.len());
    let mut gallery: Vec<GalleryItem> = Vec::new();
    let mut queries: Vec<Query> = Vec::new();
    let mut search_gts: Vec<(usize, BoundingBox)> = Vec::new();

    for (image_idx, record) in test.iter().enumerate() {
        let (extraction, gts) = scene_inputs(model, backbone, record, false)?;
        dets_per_image.push(model.detect(store, &extraction, toggles)?);

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, store);
        let (f_sem, stride) =
            model.reid_feature(&mut tape, &bound, &extraction, toggles, &embeddings)?;
        let vars = model.embed_boxes(&mut tape, &bound, f_sem, stride, &gts)?;
        for (gt, var) in gts.iter().zip(vars) {
            let emb = Array1::from_iter(tape.value(var).iter().copied());
            gallery.push(GalleryItem {
                image: image_idx,
                bbox: *gt,
                embedding: emb.clone(),
            });
            if let Some(Identity::Labeled(id)) = gt.identity {
                queries.push(Query {
                    identity: id,
                    image: image_idx,
                    embedding: emb,
                });
            }
            search_gts.push((image_idx, *gt));
        }
        gts_per_image.push(gts);
    }

    let detection = detection_ap_recall(&dets_per_image, &gts_per_image, iou_thr)?;
    let detection_small = detection_ap_small(&dets_per_image, &gts_per_image, iou_thr)?;
    let search = search_map_top1(&queries, &gallery, &search_gts, iou_thr)?;
    Ok(EvalReport {
        detection,
        detection_small,
        search,
    })
}
