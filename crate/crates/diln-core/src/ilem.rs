//! Interest Life-cycle Encoder Module: CNN histogram encoder and the
//! vector-quantized life-cycle cluster.
//!
//! The encoder stacks three valid 1D convolutions (kernel sizes 5/3/2 with
//! 8/16/32 filters) over the 3-row histogram block and a linear head to a
//! fixed-width vector `x`. The VQ block compresses a stop-gradient copy of
//! `x` through a small MLP, snaps it to the nearest codebook center, and
//! trains encoder and decoder with a straight-through reconstruction loss:
//!
//! - the reconstruction loss reaches the VQ encoder through the
//!   straight-through estimator but never the histogram encoder (its input is
//!   stop-gradient),
//! - the codebook itself receives no gradient; it moves by exponential moving
//!   averages of its assigned vectors, with dead codes reseeded from the
//!   batch.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nn::{Activation, ParamStore, Tape, Tensor, ValueId};
use crate::util::normal;

/// Histogram-encoder and VQ dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDims {
    pub histogram_len: usize,
    pub enc_dim: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub vq_hidden: usize,
    pub code_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            histogram_len: 20,
            enc_dim: 32,
            conv_channels: [8, 16, 32],
            conv_kernels: [5, 3, 2],
            vq_hidden: 32,
            code_dim: 16,
        }
    }
}

impl EncoderDims {
    /// Width after the conv stack flattens, e.g. 20 -> 16 -> 14 -> 13 gives
    /// 13 * 32 = 416.
    pub fn flat_width(&self) -> Result<usize> {
        let mut len = self.histogram_len;
        for k in self.conv_kernels {
            if len < k {
                return Err(CoreError::Shape(format!(
                    "histogram length {} too small for the conv stack",
                    self.histogram_len
                )));
            }
            len = len - k + 1;
        }
        Ok(len * self.conv_channels[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.histogram_len < 10 {
            return Err(CoreError::Shape(format!(
                "histogram length must be at least 10, got {}",
                self.histogram_len
            )));
        }
        self.flat_width().map(|_| ())
    }
}

/// Register the histogram-encoder parameters (group `cnn`).
pub fn register_encoder_params<R: Rng>(store: &mut ParamStore, dims: &EncoderDims, rng: &mut R) {
    let [c1, c2, c3] = dims.conv_channels;
    let [k1, k2, k3] = dims.conv_kernels;
    let fan1 = (3 * k1) as f64;
    let fan2 = (c1 * k2) as f64;
    let fan3 = (c2 * k3) as f64;
    store.register("cnn.conv1.kernels", Tensor::uniform(&[c1, 3, k1], fan1.sqrt().recip(), rng));
    store.register("cnn.conv1.bias", Tensor::zeros(&[c1]));
    store.register("cnn.conv2.kernels", Tensor::uniform(&[c2, c1, k2], fan2.sqrt().recip(), rng));
    store.register("cnn.conv2.bias", Tensor::zeros(&[c2]));
    store.register("cnn.conv3.kernels", Tensor::uniform(&[c3, c2, k3], fan3.sqrt().recip(), rng));
    store.register("cnn.conv3.bias", Tensor::zeros(&[c3]));
    let flat = dims.flat_width().expect("validated dims");
    store.register("cnn.head.w", Tensor::uniform(&[flat, dims.enc_dim], (flat as f64).sqrt().recip(), rng));
    store.register("cnn.head.b", Tensor::zeros(&[dims.enc_dim]));
}

/// Register the VQ encoder/decoder parameters (groups `vq_encoder`,
/// `vq_decoder`).
pub fn register_vq_params<R: Rng>(store: &mut ParamStore, dims: &EncoderDims, rng: &mut R) {
    let e = dims.enc_dim as f64;
    let h = dims.vq_hidden as f64;
    let c = dims.code_dim as f64;
    store.register("vq_encoder.l1.w", Tensor::uniform(&[dims.enc_dim, dims.vq_hidden], e.sqrt().recip(), rng));
    store.register("vq_encoder.l1.b", Tensor::zeros(&[dims.vq_hidden]));
    store.register("vq_encoder.l2.w", Tensor::uniform(&[dims.vq_hidden, dims.code_dim], h.sqrt().recip(), rng));
    store.register("vq_encoder.l2.b", Tensor::zeros(&[dims.code_dim]));
    store.register("vq_decoder.l1.w", Tensor::uniform(&[dims.code_dim, dims.vq_hidden], c.sqrt().recip(), rng));
    store.register("vq_decoder.l1.b", Tensor::zeros(&[dims.vq_hidden]));
    store.register("vq_decoder.l2.w", Tensor::uniform(&[dims.vq_hidden, dims.enc_dim], h.sqrt().recip(), rng));
    store.register("vq_decoder.l2.b", Tensor::zeros(&[dims.enc_dim]));
}

/// Conv stack plus linear head over a `[batch, 3, histogram_len]` block,
/// producing the life-cycle vector `x` of shape `[batch, enc_dim]`.
pub fn encode_histograms(
    tape: &mut Tape,
    store: &ParamStore,
    block: ValueId,
    dims: &EncoderDims,
) -> ValueId {
    assert_eq!(
        tape.value(block).shape()[2],
        dims.histogram_len,
        "block length does not match the configured histogram length"
    );
    let p = |name: &str| store.id(name).expect("encoder params registered");
    let k1 = tape.param(store, p("cnn.conv1.kernels"));
    let b1 = tape.param(store, p("cnn.conv1.bias"));
    let h = tape.conv1d(block, k1, b1);
    let h = tape.relu(h);
    let k2 = tape.param(store, p("cnn.conv2.kernels"));
    let b2 = tape.param(store, p("cnn.conv2.bias"));
    let h = tape.conv1d(h, k2, b2);
    let h = tape.relu(h);
    let k3 = tape.param(store, p("cnn.conv3.kernels"));
    let b3 = tape.param(store, p("cnn.conv3.bias"));
    let h = tape.conv1d(h, k3, b3);
    let h = tape.relu(h);

    let shape = tape.value(h).shape().to_vec();
    let (batch, flat) = (shape[0], shape[1] * shape[2]);
    let h = tape.reshape(h, &[batch, flat]);
    let w = tape.param(store, p("cnn.head.w"));
    let b = tape.param(store, p("cnn.head.b"));
    tape.dense(h, w, b, Activation::Identity)
}

/// Cluster assignment: index plus the codebook center it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleCode {
    pub index: usize,
    pub center: Vec<f64>,
}

/// Codebook update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookConfig {
    pub clusters: usize,
    pub code_dim: usize,
    /// EMA decay toward the mean of assigned vectors.
    pub decay: f64,
    /// Laplace smoothing added to the EMA cluster size.
    pub smoothing: f64,
    /// Updates without a single assignment before a code is reseeded.
    pub dead_steps: u32,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig { clusters: 10, code_dim: 16, decay: 0.99, smoothing: 1e-5, dead_steps: 25 }
    }
}

/// The VQ codebook: cluster centers plus EMA statistics and usage counters.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub config: CodebookConfig,
    centers: Tensor,
    ema_counts: Vec<f64>,
    ema_sums: Tensor,
    steps_since_used: Vec<u32>,
    initialized: bool,
}

impl Codebook {
    pub fn new(config: CodebookConfig) -> Self {
        let m = config.clusters;
        let d = config.code_dim;
        Codebook {
            centers: Tensor::zeros(&[m, d]),
            ema_counts: vec![0.0; m],
            ema_sums: Tensor::zeros(&[m, d]),
            steps_since_used: vec![0; m],
            initialized: false,
            config,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn usage_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    // Per-dimension spread of a batch, floored so noise never vanishes.
    // Seeding noise must stay small relative to the data cloud: a code
    // dropped outside the cloud never wins an assignment and the quantizer
    // collapses onto a single center.
    fn batch_noise_scale(xc: &Tensor) -> Vec<f64> {
        let (rows, d) = (xc.rows(), xc.cols());
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let mean: f64 = (0..rows).map(|r| xc.at2(r, j)).sum::<f64>() / rows as f64;
            let var: f64 =
                (0..rows).map(|r| (xc.at2(r, j) - mean).powi(2)).sum::<f64>() / rows as f64;
            scale[j] = (0.05 * var.sqrt()).max(1e-8);
        }
        scale
    }

    /// Seed the centers from rows of a batch of compressed vectors plus a
    /// little spread-scaled noise, so no code starts empty.
    pub fn init_from_batch<R: Rng>(&mut self, xc: &Tensor, rng: &mut R) {
        let m = self.config.clusters;
        let d = self.config.code_dim;
        assert_eq!(xc.cols(), d, "codebook init dimension mismatch");
        let rows = xc.rows();
        assert!(rows > 0, "cannot initialize a codebook from an empty batch");
        let noise = Self::batch_noise_scale(xc);
        for c in 0..m {
            let src = if rows >= m { c * rows / m } else { c % rows };
            for j in 0..d {
                let v = xc.at2(src, j) + noise[j] * normal(rng);
                self.centers.data_mut()[c * d + j] = v;
                self.ema_sums.data_mut()[c * d + j] = v;
            }
            self.ema_counts[c] = 1.0;
            self.steps_since_used[c] = 0;
        }
        self.initialized = true;
    }

    /// Exhaustive nearest-center search in squared L2; ties resolve to the
    /// lowest index.
    pub fn nearest(&self, row: &[f64]) -> LifecycleCode {
        let m = self.config.clusters;
        let d = self.config.code_dim;
        assert_eq!(row.len(), d, "query dimension mismatch");
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for c in 0..m {
            let center = self.centers.row(c);
            let dist: f64 = center.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        LifecycleCode { index: best, center: self.centers.row(best).to_vec() }
    }

    pub fn assign_batch(&self, xc: &Tensor) -> Vec<usize> {
        (0..xc.rows()).map(|r| self.nearest(xc.row(r)).index).collect()
    }

    /// EMA update toward the mean of each code's assigned vectors. Codes with
    /// no assignment in this batch are unchanged except for their dead-code
    /// counter; a code unused for `dead_steps` consecutive updates is
    /// reseeded to a random batch vector.
    pub fn update<R: Rng>(&mut self, xc: &Tensor, codes: &[usize], rng: &mut R) {
        assert!(self.initialized, "update before init_from_batch");
        assert_eq!(xc.rows(), codes.len(), "assignment count mismatch");
        assert!(!codes.is_empty(), "codebook update needs a non-empty batch");
        let m = self.config.clusters;
        let d = self.config.code_dim;
        let decay = self.config.decay;

        let mut counts = vec![0.0f64; m];
        let mut sums = vec![0.0f64; m * d];
        for (r, &c) in codes.iter().enumerate() {
            counts[c] += 1.0;
            for (j, &v) in xc.row(r).iter().enumerate() {
                sums[c * d + j] += v;
            }
        }

        let noise = Self::batch_noise_scale(xc);
        for c in 0..m {
            if counts[c] == 0.0 {
                self.steps_since_used[c] += 1;
                if self.steps_since_used[c] >= self.config.dead_steps {
                    let src = rng.gen_range(0..xc.rows());
                    for j in 0..d {
                        let v = xc.at2(src, j) + noise[j] * normal(rng);
                        self.centers.data_mut()[c * d + j] = v;
                        self.ema_sums.data_mut()[c * d + j] = v;
                    }
                    self.ema_counts[c] = 1.0;
                    self.steps_since_used[c] = 0;
                }
                continue;
            }
            self.steps_since_used[c] = 0;
            self.ema_counts[c] = decay * self.ema_counts[c] + (1.0 - decay) * counts[c];
            for j in 0..d {
                let s = decay * self.ema_sums.at2(c, j) + (1.0 - decay) * sums[c * d + j];
                self.ema_sums.data_mut()[c * d + j] = s;
                self.centers.data_mut()[c * d + j] = s / (self.ema_counts[c] + self.config.smoothing);
            }
        }
    }

    /// Flatten into named arrays for checkpointing.
    pub fn to_arrays(&self) -> Vec<(String, Tensor)> {
        vec![
            ("codebook.centers".into(), self.centers.clone()),
            ("codebook.ema_counts".into(), Tensor::from_vec(&[self.config.clusters], self.ema_counts.clone())),
            ("codebook.ema_sums".into(), self.ema_sums.clone()),
            (
                "codebook.steps_since_used".into(),
                Tensor::from_vec(
                    &[self.config.clusters],
                    self.steps_since_used.iter().map(|&s| s as f64).collect(),
                ),
            ),
            ("codebook.initialized".into(), Tensor::scalar(self.initialized as u8 as f64)),
        ]
    }

    pub fn from_arrays(config: CodebookConfig, arrays: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            arrays.get(name).cloned().ok_or_else(|| CoreError::Shape(format!("checkpoint is missing {name}")))
        };
        let centers = get("codebook.centers")?;
        if centers.shape() != [config.clusters, config.code_dim] {
            return Err(CoreError::Shape(format!(
                "codebook centers: expected {:?}, checkpoint has {:?}",
                [config.clusters, config.code_dim],
                centers.shape()
            )));
        }
        Ok(Codebook {
            ema_counts: get("codebook.ema_counts")?.data().to_vec(),
            ema_sums: get("codebook.ema_sums")?,
            steps_since_used: get("codebook.steps_since_used")?.data().iter().map(|&v| v as u32).collect(),
            initialized: get("codebook.initialized")?.item() != 0.0,
            centers,
            config,
        })
    }
}

/// The VQ forward pass hanging off an encoded batch.
pub struct VqForward {
    /// Compressed vectors `[batch, code_dim]` (on the tape).
    pub xc: ValueId,
    /// Per-sample cluster assignments.
    pub codes: Vec<usize>,
    /// Cluster centers as a constant `[batch, code_dim]` leaf.
    pub centers: ValueId,
    /// Straight-through reconstruction loss (scalar node).
    pub recon_loss: ValueId,
}

/// Build the VQ path: compress a stop-gradient copy of `x`, assign nearest
/// codes (or reuse `codes_override`), decode through the straight-through
/// estimator and emit the mean-squared reconstruction loss.
/// The VQ-encoder MLP over a stop-gradient copy of `x`, returning
/// `(sg(x), xc)`. Used by the full VQ path and for seeding the codebook from
/// a first batch.
pub fn compress_encoded(tape: &mut Tape, store: &ParamStore, x: ValueId) -> (ValueId, ValueId) {
    let p = |name: &str| store.id(name).expect("vq params registered");
    let sg_x = tape.stop_gradient(x);
    let w1 = tape.param(store, p("vq_encoder.l1.w"));
    let b1 = tape.param(store, p("vq_encoder.l1.b"));
    let h = tape.dense(sg_x, w1, b1, Activation::Relu);
    let w2 = tape.param(store, p("vq_encoder.l2.w"));
    let b2 = tape.param(store, p("vq_encoder.l2.b"));
    let xc = tape.dense(h, w2, b2, Activation::Identity);
    (sg_x, xc)
}

pub fn vq_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: ValueId,
    codebook: &Codebook,
    codes_override: Option<&[usize]>,
) -> VqForward {
    let p = |name: &str| store.id(name).expect("vq params registered");
    let (sg_x, xc) = compress_encoded(tape, store, x);

    let xc_value = tape.value(xc).clone();
    let codes: Vec<usize> = match codes_override {
        Some(codes) => codes.to_vec(),
        None => codebook.assign_batch(&xc_value),
    };
    let d = codebook.config.code_dim;
    let mut center_data = Vec::with_capacity(codes.len() * d);
    for &c in &codes {
        center_data.extend_from_slice(codebook.centers().row(c));
    }
    let centers = tape.input(Tensor::from_vec(&[codes.len(), d], center_data));

    // Straight-through: forward value is the center, backward is identity in
    // the compressed vector.
    let gap = tape.sub(centers, xc);
    let sg_gap = tape.stop_gradient(gap);
    let dec_in = tape.add(xc, sg_gap);

    let dw1 = tape.param(store, p("vq_decoder.l1.w"));
    let db1 = tape.param(store, p("vq_decoder.l1.b"));
    let dh = tape.dense(dec_in, dw1, db1, Activation::Relu);
    let dw2 = tape.param(store, p("vq_decoder.l2.w"));
    let db2 = tape.param(store, p("vq_decoder.l2.b"));
    let decoded = tape.dense(dh, dw2, db2, Activation::Identity);

    let resid = tape.sub(sg_x, decoded);
    let sq = tape.mul(resid, resid);
    let recon_loss = tape.mean_all(sq);

    VqForward { xc, codes, centers, recon_loss }
}
