//! RoI heads: stripe re-ID embeddings, the online instance-matching loss,
//! and the second-stage detection losses.

use ndarray::{Array1, Array2};

use crate::autograd::{Tape, Var};
use crate::boxes::{BoundingBox, Identity};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};

/// Stripe embedding head: the RoI crop is split into `stripes` horizontal
/// bands, each band is average-pooled and projected to `embed_dim /
/// stripes` dims, and the concatenation is L2-normalized.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StripeConfig {
    pub stripes: usize,
    pub embed_dim: usize,
    pub roi_size: (usize, usize),
}

impl Default for StripeConfig {
    fn default() -> Self {
        StripeConfig {
            stripes: 4,
            embed_dim: 32,
            roi_size: (8, 8),
        }
    }
}

impl StripeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stripes == 0 {
            return Err(Error::Config("stripes must be positive".into()));
        }
        if self.stripes > self.roi_size.0 {
            return Err(Error::Config(format!(
                "{} stripes cannot partition {} rows",
                self.stripes, self.roi_size.0
            )));
        }
        if self.embed_dim % self.stripes != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} stripes",
                self.embed_dim, self.stripes
            )));
        }
        Ok(())
    }
}

pub fn init_stripe(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &StripeConfig, seed: u64) {
    let per = cfg.embed_dim / cfg.stripes;
    for i in 0..cfg.stripes {
        store.init_randn(&format!("{prefix}.stripe{i}.w"), &[per, channels], 0.1, seed);
        store.init_const(&format!("{prefix}.stripe{i}.b"), &[per], 0.0);
    }
}

/// Encode one RoI crop [C, Hr, Wr] into a unit-norm embedding [E].
pub fn stripe_encode(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &StripeConfig,
    roi: Var,
) -> Result<Var> {
    cfg.validate()?;
    let rows = tape.value(roi).shape()[1];
    if cfg.stripes > rows {
        return Err(Error::Config(format!(
            "{} stripes cannot partition {rows} rows",
            cfg.stripes
        )));
    }
    let mut parts = Vec::with_capacity(cfg.stripes);
    for i in 0..cfg.stripes {
        let r0 = i * rows / cfg.stripes;
        let r1 = (i + 1) * rows / cfg.stripes;
        let pooled = tape.row_band_mean(roi, r0, r1);
        let w = bound.var(&format!("{prefix}.stripe{i}.w"));
        let b = bound.var(&format!("{prefix}.stripe{i}.b"));
        let p = tape.linear(w, pooled);
        parts.push(tape.add(p, b));
    }
    let cat = tape.concat_vec(&parts);
    Ok(tape.l2_normalize(cat))
}

// ---- online instance matching ----

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OimConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub embed_dim: usize,
    pub num_labeled: usize,
}

impl OimConfig {
    pub fn toy(num_labeled: usize, embed_dim: usize) -> Self {
        OimConfig {
            temperature: 1.0 / 30.0,
            momentum: 0.5,
            queue_size: 50,
            embed_dim,
            num_labeled,
        }
    }
}

/// Lookup table of labeled-identity prototypes plus a circular queue of
/// unlabeled embeddings. Both are buffers, not parameters: gradients flow
/// to the query embedding only.
#[derive(Debug, Clone)]
pub struct OimState {
    pub cfg: OimConfig,
    pub lut: Array2<f64>,
    queue: Array2<f64>,
    filled: usize,
    head: usize,
}

impl OimState {
    pub fn new(cfg: OimConfig) -> Self {
        let lut = Array2::zeros((cfg.num_labeled, cfg.embed_dim));
        let queue = Array2::zeros((cfg.queue_size, cfg.embed_dim));
        OimState {
            cfg,
            lut,
            queue,
            filled: 0,
            head: 0,
        }
    }

    pub fn queue_filled(&self) -> usize {
        self.filled
    }

    /// Similarity logits against the LUT and the populated queue slots,
    /// scaled by 1/T. Index i < num_labeled is identity i.
    pub fn logits(&self, tape: &mut Tape, emb: Var) -> Var {
        let mut bank = Array2::zeros((self.cfg.num_labeled + self.filled, self.cfg.embed_dim));
        bank.slice_mut(ndarray::s![..self.cfg.num_labeled, ..])
            .assign(&self.lut);
        for i in 0..self.filled {
            bank.row_mut(self.cfg.num_labeled + i).assign(&self.queue.row(i));
        }
        let bank = tape.input(bank.into_dyn());
        let sims = tape.linear(bank, emb);
        tape.scale(sims, 1.0 / self.cfg.temperature)
    }

    /// Cross-entropy against the LUT + queue bank; only labeled identities
    /// contribute a loss.
    pub fn loss(&self, tape: &mut Tape, emb: Var, identity: Identity) -> Option<Var> {
        match identity {
            Identity::Labeled(id) => {
                let idx = id as usize;
                assert!(idx < self.cfg.num_labeled, "identity index {idx} out of range");
                let logits = self.logits(tape, emb);
                Some(tape.cross_entropy(logits, idx))
            }
            Identity::Unlabeled => None,
        }
    }

    /// Post-step buffer update: momentum blend + renormalize for labeled
    /// identities, circular push for unlabeled embeddings.
    pub fn update(&mut self, emb: &Array1<f64>, identity: Identity) {
        assert_eq!(emb.len(), self.cfg.embed_dim);
        match identity {
            Identity::Labeled(id) => {
                let idx = id as usize;
                assert!(idx < self.cfg.num_labeled);
                let m = self.cfg.momentum;
                let mut v = self.lut.row(idx).to_owned() * m + &(emb * (1.0 - m));
                let n = v.dot(&v).sqrt();
                if n > 0.0 {
                    v /= n;
                }
                self.lut.row_mut(idx).assign(&v);
            }
            Identity::Unlabeled => {
                if self.cfg.queue_size == 0 {
                    return;
                }
                self.queue.row_mut(self.head).assign(emb);
                self.head = (self.head + 1) % self.cfg.queue_size;
                self.filled = (self.filled + 1).min(self.cfg.queue_size);
            }
        }
    }
}

// ---- second-stage detection head ----

pub fn init_det_head(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) {
    store.init_randn(&format!("{prefix}.cls.w"), &[2, channels], 0.1, seed);
    store.init_const(&format!("{prefix}.cls.b"), &[2], 0.0);
    store.init_randn(&format!("{prefix}.reg.w"), &[4, channels], 0.1, seed);
    store.init_const(&format!("{prefix}.reg.b"), &[4], 0.0);
}

/// Per-RoI head on a pooled feature vector: person/background logits and
/// box refinement deltas.
pub fn det_head_forward(tape: &mut Tape, bound: &Bound, prefix: &str, pooled: Var) -> (Var, Var) {
    let cw = bound.var(&format!("{prefix}.cls.w"));
    let cb = bound.var(&format!("{prefix}.cls.b"));
    let rw = bound.var(&format!("{prefix}.reg.w"));
    let rb = bound.var(&format!("{prefix}.reg.b"));
    let c = tape.linear(cw, pooled);
    let cls = tape.add(c, cb);
    let r = tape.linear(rw, pooled);
    let reg = tape.add(r, rb);
    (cls, reg)
}

/// One matched RoI's contribution to the detection losses.
pub struct RoiTarget {
    pub label: usize,
    pub reg_target: Option<[f64; 4]>,
}

impl RoiTarget {
    pub fn positive(anchor: &BoundingBox, gt: &BoundingBox) -> Self {
        RoiTarget {
            label: 1,
            reg_target: Some(crate::boxes::encode_deltas(anchor, gt)),
        }
    }

    pub fn negative() -> Self {
        RoiTarget {
            label: 0,
            reg_target: None,
        }
    }
}

/// Mean cross-entropy over all RoIs plus mean smooth-L1 over positives;
/// either term is a zero scalar when it has no contributors.
pub fn detection_losses(tape: &mut Tape, rois: &[(Var, Var, RoiTarget)]) -> Var {
    let mut ce = Vec::new();
    let mut l1 = Vec::new();
    for (cls, reg, target) in rois {
        ce.push(tape.cross_entropy(*cls, target.label));
        if let Some(t) = target.reg_target {
            let tv = Array1::from_vec(t.to_vec());
            l1.push(tape.smooth_l1_sum(*reg, &tv));
        }
    }
    let ce = crate::dgrpn::mean_of(tape, &ce);
    let l1 = crate::dgrpn::mean_of(tape, &l1);
    tape.add(ce, l1)
}
