//! Interest life-cycle fusion on an MMOE backbone.
//!
//! The multi-task ranker comes in three variants, built from the same code so
//! ablations are exact:
//!
//! - `Baseline`: plain MMOE over the base features only,
//! - `IlemFeatures`: the encoded life-cycle vector and its cluster center are
//!   concatenated into the shared input, gates stay neutral,
//! - `Full`: the cluster center drives a feature recalibrator on the shared
//!   input and a fusion gate inside every expert layer.
//!
//! Both gate families are `gate_scale * sigmoid(affine(c))`, so every gate
//! component lies strictly inside (0, gate_scale); zero-initializing the gate
//! affine maps makes the full model start as the exact plain-MMOE forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::RankingSample;
use crate::error::{CoreError, Result};
use crate::ilem::{
    encode_histograms, register_encoder_params, register_vq_params, vq_forward, Codebook,
    EncoderDims,
};
use crate::nn::{Activation, ParamStore, Tape, Tensor, ValueId};

/// Which pieces of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Baseline,
    IlemFeatures,
    Full,
}

impl ModelVariant {
    pub fn parse(s: &str) -> Option<ModelVariant> {
        match s {
            "baseline" => Some(ModelVariant::Baseline),
            "ilem" => Some(ModelVariant::IlemFeatures),
            "full" => Some(ModelVariant::Full),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::IlemFeatures => "ilem",
            ModelVariant::Full => "full",
        }
    }
}

pub const TASK_NAMES: [&str; 2] = ["ctr", "cvr"];

/// Full model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderDims,
    /// Width of the base (non-ILEM) shared features.
    pub base_dim: usize,
    /// Number of VQ clusters.
    pub clusters: usize,
    pub recal_hidden: usize,
    pub expert_count: usize,
    pub expert_widths: Vec<usize>,
    pub tower_hidden: usize,
    /// Gate scaling factor; gates live strictly inside (0, gate_scale).
    pub gate_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Full,
            encoder: EncoderDims::default(),
            base_dim: 12,
            clusters: 10,
            recal_hidden: 32,
            expert_count: 3,
            expert_widths: vec![64, 32],
            tower_hidden: 16,
            gate_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn uses_ilem(&self) -> bool {
        self.variant != ModelVariant::Baseline
    }

    /// Width of the shared-bottom input after ILEM features (if any) are
    /// concatenated. Both ILEM variants feed the encoded vector and the
    /// cluster center as features, so the full model is the feature model
    /// plus gates and starts as its exact equal under neutral gates.
    pub fn z_dim(&self) -> usize {
        match self.variant {
            ModelVariant::Baseline => self.base_dim,
            ModelVariant::IlemFeatures | ModelVariant::Full => {
                self.base_dim + self.encoder.enc_dim + self.encoder.code_dim
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate_scale <= 0.0 {
            return Err(CoreError::Config("gate_scale must be positive".into()));
        }
        if self.expert_count == 0 || self.expert_widths.is_empty() {
            return Err(CoreError::Config("need at least one expert with one layer".into()));
        }
        if self.base_dim == 0 {
            return Err(CoreError::Config("base feature width must be positive".into()));
        }
        if self.clusters == 0 {
            return Err(CoreError::Config("cluster count must be positive".into()));
        }
        if self.uses_ilem() {
            self.encoder.validate()?;
        }
        Ok(())
    }
}

/// One batch of samples as dense inputs.
pub struct Batch {
    pub base: Tensor,
    pub blocks: Tensor,
    pub label_click: Tensor,
    pub label_conversion: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&RankingSample]) -> Batch {
        assert!(!samples.is_empty(), "empty batch");
        let b = samples.len();
        let f = samples[0].shared_features.len();
        let k = samples[0].histograms[0].len();
        let mut base = Vec::with_capacity(b * f);
        let mut blocks = Vec::with_capacity(b * 3 * k);
        let mut clicks = Vec::with_capacity(b);
        let mut convs = Vec::with_capacity(b);
        for s in samples {
            assert_eq!(s.shared_features.len(), f, "inconsistent feature width in batch");
            base.extend_from_slice(&s.shared_features);
            for row in &s.histograms {
                assert_eq!(row.len(), k, "inconsistent histogram length in batch");
                blocks.extend_from_slice(row);
            }
            clicks.push(s.label_click as u8 as f64);
            convs.push(s.label_conversion as u8 as f64);
        }
        Batch {
            base: Tensor::from_vec(&[b, f], base),
            blocks: Tensor::from_vec(&[b, 3, k], blocks),
            label_click: Tensor::from_vec(&[b, 1], clicks),
            label_conversion: Tensor::from_vec(&[b, 1], convs),
        }
    }

    pub fn size(&self) -> usize {
        self.base.rows()
    }
}

/// Running bounds over every gate component seen in a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateStats {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GateStats {
    fn new() -> Self {
        GateStats { min: f64::INFINITY, max: f64::NEG_INFINITY, count: 0 }
    }

    fn absorb(&mut self, values: &Tensor) {
        for &v in values.data() {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += values.len();
    }

    pub fn merge(&mut self, other: &GateStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }
}

/// Value snapshots of one forward pass, for tests and reports.
pub struct ForwardTrace {
    pub z: Tensor,
    /// Recalibration vector `g'` (full variant only).
    pub recalibration: Option<Tensor>,
    pub z_prime: Tensor,
    /// Fusion gate tensors, one per (expert, layer), in order.
    pub expert_gates: Vec<Tensor>,
    /// Per-task softmax weights over experts.
    pub task_gate_weights: Vec<Tensor>,
}

/// Handles into the tape after a forward pass.
pub struct ForwardPass {
    pub ctr_logits: ValueId,
    pub cvr_logits: ValueId,
    pub p_ctr: ValueId,
    pub p_cvr: ValueId,
    /// Straight-through reconstruction loss, absent for the baseline.
    pub recon_loss: Option<ValueId>,
    /// Per-sample cluster assignments (empty for the baseline).
    pub codes: Vec<usize>,
    /// Compressed vectors for the codebook EMA update.
    pub xc_value: Option<Tensor>,
    /// Gate bounds, present when fusion gates are active.
    pub gate_stats: Option<GateStats>,
    pub trace: Option<ForwardTrace>,
}

/// The ranker. Owns no parameters itself; everything lives in a
/// [`ParamStore`] created by [`DilnModel::init_params`].
pub struct DilnModel {
    pub config: ModelConfig,
}

impl DilnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(DilnModel { config })
    }

    /// Register and initialize all trainable parameters. Weights use uniform
    /// fan-in scaling; biases and both gate affine maps start at zero so the
    /// full model begins as the exact plain-MMOE baseline.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &self.config;
        if cfg.uses_ilem() {
            register_encoder_params(&mut store, &cfg.encoder, &mut rng);
            register_vq_params(&mut store, &cfg.encoder, &mut rng);
        }
        let z_dim = cfg.z_dim();
        let code_dim = cfg.encoder.code_dim;
        if cfg.variant == ModelVariant::Full {
            let bound = (code_dim as f64).sqrt().recip();
            store.register("recal.l1.w", Tensor::uniform(&[code_dim, cfg.recal_hidden], bound, &mut rng));
            store.register("recal.l1.b", Tensor::zeros(&[cfg.recal_hidden]));
            store.register("recal.l2.w", Tensor::zeros(&[cfg.recal_hidden, z_dim]));
            store.register("recal.l2.b", Tensor::zeros(&[z_dim]));
        }
        for e in 0..cfg.expert_count {
            let mut inw = z_dim;
            for (l, &out) in cfg.expert_widths.iter().enumerate() {
                let bound = (inw as f64).sqrt().recip();
                store.register(&format!("experts.e{e}.l{l}.w"), Tensor::uniform(&[inw, out], bound, &mut rng));
                store.register(&format!("experts.e{e}.l{l}.b"), Tensor::zeros(&[out]));
                if cfg.variant == ModelVariant::Full {
                    store.register(&format!("nfu.e{e}.l{l}.w"), Tensor::zeros(&[code_dim, out]));
                    store.register(&format!("nfu.e{e}.l{l}.b"), Tensor::zeros(&[out]));
                }
                inw = out;
            }
        }
        let expert_out = *cfg.expert_widths.last().unwrap();
        for task in TASK_NAMES {
            let bound = (z_dim as f64).sqrt().recip();
            store.register(&format!("task_gates.{task}.w"), Tensor::uniform(&[z_dim, cfg.expert_count], bound, &mut rng));
            store.register(&format!("task_gates.{task}.b"), Tensor::zeros(&[cfg.expert_count]));
            let b1 = (expert_out as f64).sqrt().recip();
            store.register(&format!("towers.{task}.l1.w"), Tensor::uniform(&[expert_out, cfg.tower_hidden], b1, &mut rng));
            store.register(&format!("towers.{task}.l1.b"), Tensor::zeros(&[cfg.tower_hidden]));
            let b2 = (cfg.tower_hidden as f64).sqrt().recip();
            store.register(&format!("towers.{task}.l2.w"), Tensor::uniform(&[cfg.tower_hidden, 1], b2, &mut rng));
            store.register(&format!("towers.{task}.l2.b"), Tensor::zeros(&[1]));
        }
        store
    }

    /// Forward pass with the variant's own fusion setting.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        codebook: Option<&Codebook>,
        codes_override: Option<&[usize]>,
        want_trace: bool,
    ) -> Result<ForwardPass> {
        let fused = self.config.variant == ModelVariant::Full;
        self.forward_with_fusion(tape, store, batch, codebook, codes_override, want_trace, fused)
    }

    /// Forward pass with fusion forced on or off. With `fused = false` the
    /// recalibrator and fusion gates are skipped entirely, which is the plain
    /// MMOE the gated model must match bitwise at neutral initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_fusion(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        codebook: Option<&Codebook>,
        codes_override: Option<&[usize]>,
        want_trace: bool,
        fused: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if batch.base.cols() != cfg.base_dim {
            return Err(CoreError::Shape(format!(
                "shared feature width: model expects {}, batch has {}",
                cfg.base_dim,
                batch.base.cols()
            )));
        }
        if cfg.uses_ilem() && batch.blocks.shape()[2] != cfg.encoder.histogram_len {
            return Err(CoreError::Shape(format!(
                "histogram length: model expects {}, batch has {}",
                cfg.encoder.histogram_len,
                batch.blocks.shape()[2]
            )));
        }

        let base = tape.input(batch.base.clone());
        let p = |name: &str| store.id(name).expect("model params registered");

        let mut recon_loss = None;
        let mut codes = Vec::new();
        let mut xc_value = None;
        let mut center_leaf = None;
        let mut x_leaf = None;
        if cfg.uses_ilem() {
            let codebook = codebook.ok_or_else(|| {
                CoreError::Data("this model variant needs a codebook, none was supplied".into())
            })?;
            if !codebook.is_initialized() {
                return Err(CoreError::Data("codebook is not initialized".into()));
            }
            let blocks = tape.input(batch.blocks.clone());
            let x = encode_histograms(tape, store, blocks, &cfg.encoder);
            let vq = vq_forward(tape, store, x, codebook, codes_override);
            recon_loss = Some(vq.recon_loss);
            codes = vq.codes;
            xc_value = Some(tape.value(vq.xc).clone());
            center_leaf = Some(vq.centers);
            x_leaf = Some(x);
        }

        let z = match cfg.variant {
            ModelVariant::Baseline => base,
            ModelVariant::IlemFeatures | ModelVariant::Full => {
                tape.concat_cols(&[base, x_leaf.unwrap(), center_leaf.unwrap()])
            }
        };

        let mut gate_stats = if fused { Some(GateStats::new()) } else { None };
        let mut trace_recal = None;
        let mut trace_expert_gates = Vec::new();

        // Feature recalibrator: z' = (gate_scale * sigmoid(W' relu(W c + b) + b')) o z.
        let z_prime = if fused {
            let c = center_leaf.expect("full variant always has centers");
            let w1 = tape.param(store, p("recal.l1.w"));
            let b1 = tape.param(store, p("recal.l1.b"));
            let g = tape.dense(c, w1, b1, Activation::Relu);
            let w2 = tape.param(store, p("recal.l2.w"));
            let b2 = tape.param(store, p("recal.l2.b"));
            let gp_raw = tape.dense(g, w2, b2, Activation::Sigmoid);
            let gp = tape.scale(gp_raw, cfg.gate_scale);
            if let Some(stats) = gate_stats.as_mut() {
                stats.absorb(tape.value(gp));
            }
            if want_trace {
                trace_recal = Some(tape.value(gp).clone());
            }
            tape.mul(gp, z)
        } else {
            z
        };

        // Experts, each layer optionally rescaled by its fusion gate.
        let mut expert_outputs = Vec::with_capacity(cfg.expert_count);
        for e in 0..cfg.expert_count {
            let mut h = z_prime;
            for l in 0..cfg.expert_widths.len() {
                let w = tape.param(store, p(&format!("experts.e{e}.l{l}.w")));
                let b = tape.param(store, p(&format!("experts.e{e}.l{l}.b")));
                let lin = tape.dense(h, w, b, Activation::Relu);
                h = if fused {
                    let c = center_leaf.expect("full variant always has centers");
                    let gw = tape.param(store, p(&format!("nfu.e{e}.l{l}.w")));
                    let gb = tape.param(store, p(&format!("nfu.e{e}.l{l}.b")));
                    let f_raw = tape.dense(c, gw, gb, Activation::Sigmoid);
                    let f = tape.scale(f_raw, cfg.gate_scale);
                    if let Some(stats) = gate_stats.as_mut() {
                        stats.absorb(tape.value(f));
                    }
                    if want_trace {
                        trace_expert_gates.push(tape.value(f).clone());
                    }
                    tape.mul(f, lin)
                } else {
                    lin
                };
            }
            expert_outputs.push(h);
        }

        // Per-task softmax gates over expert outputs, then the task towers.
        let mut task_logits = Vec::with_capacity(2);
        let mut trace_task_weights = Vec::new();
        for task in TASK_NAMES {
            let gw = tape.param(store, p(&format!("task_gates.{task}.w")));
            let gb = tape.param(store, p(&format!("task_gates.{task}.b")));
            let gate_logits = tape.dense(z_prime, gw, gb, Activation::Identity);
            let weights = tape.softmax_rows(gate_logits);
            if want_trace {
                trace_task_weights.push(tape.value(weights).clone());
            }
            let mut mixed: Option<ValueId> = None;
            for (e, &out) in expert_outputs.iter().enumerate() {
                let w_col = tape.slice_col(weights, e);
                let scaled = tape.mul_col_broadcast(out, w_col);
                mixed = Some(match mixed {
                    Some(acc) => tape.add(acc, scaled),
                    None => scaled,
                });
            }
            let mixed = mixed.unwrap();
            let t1w = tape.param(store, p(&format!("towers.{task}.l1.w")));
            let t1b = tape.param(store, p(&format!("towers.{task}.l1.b")));
            let th = tape.dense(mixed, t1w, t1b, Activation::Relu);
            let t2w = tape.param(store, p(&format!("towers.{task}.l2.w")));
            let t2b = tape.param(store, p(&format!("towers.{task}.l2.b")));
            task_logits.push(tape.dense(th, t2w, t2b, Activation::Identity));
        }

        let p_ctr = tape.sigmoid(task_logits[0]);
        let p_cvr = tape.sigmoid(task_logits[1]);
        let trace = if want_trace {
            Some(ForwardTrace {
                z: tape.value(z).clone(),
                recalibration: trace_recal,
                z_prime: tape.value(z_prime).clone(),
                expert_gates: trace_expert_gates,
                task_gate_weights: trace_task_weights,
            })
        } else {
            None
        };

        Ok(ForwardPass {
            ctr_logits: task_logits[0],
            cvr_logits: task_logits[1],
            p_ctr,
            p_cvr,
            recon_loss,
            codes,
            xc_value,
            gate_stats,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CategoryId, ItemId, UserId};
    use crate::ilem::CodebookConfig;
    use rand::Rng;

    fn sample(rng: &mut ChaCha8Rng, base_dim: usize, k: usize) -> RankingSample {
        RankingSample {
            user_id: UserId(rng.gen_range(0..100)),
            candidate_item_id: ItemId(rng.gen_range(0..1000)),
            candidate_category_id: CategoryId(rng.gen_range(0..10)),
            shared_features: (0..base_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            histograms: [
                (0..k).map(|_| rng.gen_range(0.0..0.6)).collect(),
                (0..k).map(|_| rng.gen_range(0.0..0.3)).collect(),
                (0..k).map(|_| rng.gen_range(0.0..0.1)).collect(),
            ],
            label_click: rng.gen_bool(0.3),
            label_conversion: false,
            day_index: 21,
            lifecycle_tag: None,
            timestamp: 21 * 86_400,
        }
    }

    fn make_batch(seed: u64, n: usize, base_dim: usize, k: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<RankingSample> = (0..n).map(|_| sample(&mut rng, base_dim, k)).collect();
        let refs: Vec<&RankingSample> = samples.iter().collect();
        Batch::from_samples(&refs)
    }

    fn ready_codebook(model: &DilnModel, store: &ParamStore, batch: &Batch, seed: u64) -> Codebook {
        // Seed the codebook from the batch's compressed vectors, the same way
        // training does on its first step.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CodebookConfig {
            clusters: model.config.clusters,
            code_dim: model.config.encoder.code_dim,
            ..Default::default()
        };
        let mut cb = Codebook::new(cfg);
        let mut tape = Tape::new();
        let blocks = tape.input(batch.blocks.clone());
        let x = encode_histograms(&mut tape, store, blocks, &model.config.encoder);
        let (_, xc) = crate::ilem::compress_encoded(&mut tape, store, x);
        cb.init_from_batch(tape.value(xc), &mut rng);
        cb
    }

    #[test]
    fn full_model_with_neutral_gates_equals_plain_mmoe_bitwise() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(42);
        let batch = make_batch(1, 16, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 9);

        let mut fused_tape = Tape::new();
        let fused = model
            .forward_with_fusion(&mut fused_tape, &store, &batch, Some(&cb), None, false, true)
            .unwrap();
        let mut plain_tape = Tape::new();
        let plain = model
            .forward_with_fusion(&mut plain_tape, &store, &batch, Some(&cb), None, false, false)
            .unwrap();

        assert_eq!(
            fused_tape.value(fused.p_ctr).data(),
            plain_tape.value(plain.p_ctr).data(),
            "neutral-at-init forward must be bitwise identical"
        );
        assert_eq!(fused_tape.value(fused.p_cvr).data(), plain_tape.value(plain.p_cvr).data());
    }

    #[test]
    fn recalibrator_with_zero_second_layer_is_identity() {
        // gate = gate_scale * sigmoid(0) = 1, so z' == z.
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(3);
        let batch = make_batch(2, 8, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 10);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, true).unwrap();
        let trace = pass.trace.unwrap();
        assert!(trace.recalibration.unwrap().data().iter().all(|&g| g == 1.0));
        assert_eq!(trace.z.data(), trace.z_prime.data());
    }

    #[test]
    fn zero_shared_input_stays_zero_after_recalibration() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let mut store = model.init_params(4);
        // Make the recalibrator nontrivial.
        let id = store.id("recal.l2.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 0.7, &mut rng);

        let mut batch = make_batch(3, 6, 12, 20);
        batch.base.fill(0.0);
        batch.blocks.fill(0.0);
        // Codebook with exactly-zero centers, so z (base + x + center) is
        // exactly the zero vector.
        let m = model.config.clusters;
        let d = model.config.encoder.code_dim;
        let arrays: std::collections::BTreeMap<String, Tensor> = [
            ("codebook.centers".to_string(), Tensor::zeros(&[m, d])),
            ("codebook.ema_counts".to_string(), Tensor::from_vec(&[m], vec![1.0; m])),
            ("codebook.ema_sums".to_string(), Tensor::zeros(&[m, d])),
            ("codebook.steps_since_used".to_string(), Tensor::zeros(&[m])),
            ("codebook.initialized".to_string(), Tensor::scalar(1.0)),
        ]
        .into_iter()
        .collect();
        let cb = Codebook::from_arrays(
            CodebookConfig { clusters: m, code_dim: d, ..Default::default() },
            &arrays,
        )
        .unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, true).unwrap();
        let trace = pass.trace.unwrap();
        // Hadamard rescaling must keep a zero shared input at zero whatever
        // the gates say.
        assert!(trace.z.data().iter().all(|&v| v == 0.0));
        assert!(trace.z_prime.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recalibrator_matches_hand_composition_oracle() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let mut store = model.init_params(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for name in ["recal.l2.w", "recal.l2.b"] {
            let id = store.id(name).unwrap();
            *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 0.8, &mut rng);
        }
        let batch = make_batch(33, 4, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 34);
        let mut tape = Tape::new();
        let pass = model
            .forward_with_fusion(&mut tape, &store, &batch, Some(&cb), Some(&[0, 1, 2, 3]), true, true)
            .unwrap();
        let trace = pass.trace.unwrap();

        // Independent composition: g' = scale * sigmoid(W2^T relu(W1^T c + b1) + b2).
        let get = |name: &str| store.value(store.id(name).unwrap()).clone();
        let (w1, b1) = (get("recal.l1.w"), get("recal.l1.b"));
        let (w2, b2) = (get("recal.l2.w"), get("recal.l2.b"));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for (row, &code) in [0usize, 1, 2, 3].iter().enumerate() {
            let c = cb.centers().row(code);
            let hidden: Vec<f64> = (0..w1.cols())
                .map(|h| {
                    let mut acc = b1.data()[h];
                    for (j, &cv) in c.iter().enumerate() {
                        acc += cv * w1.at2(j, h);
                    }
                    acc.max(0.0)
                })
                .collect();
            for k in 0..w2.cols() {
                let mut acc = b2.data()[k];
                for (h, &hv) in hidden.iter().enumerate() {
                    acc += hv * w2.at2(h, k);
                }
                let expected = 2.0 * sig(acc);
                let got = trace.recalibration.as_ref().unwrap().at2(row, k);
                assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
                let z = trace.z.at2(row, k);
                let zp = trace.z_prime.at2(row, k);
                assert!((zp - expected * z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_stay_strictly_inside_bounds() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let mut store = model.init_params(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in ["recal.l2.w", "recal.l2.b", "nfu.e0.l0.w", "nfu.e1.l1.b"] {
            let id = store.id(name).unwrap();
            *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 1.5, &mut rng);
        }
        let batch = make_batch(8, 32, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 12);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, false).unwrap();
        let stats = pass.gate_stats.unwrap();
        assert!(stats.min > 0.0 && stats.max < 2.0, "gate bounds [{}, {}]", stats.min, stats.max);
        assert!(stats.count > 0);
    }

    #[test]
    fn saturated_gate_can_silence_an_expert_layer() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let mut store = model.init_params(13);
        // Push the first expert's first-layer gate to an extreme negative
        // pre-activation: f ~ 0 silences the layer.
        let id = store.id("nfu.e0.l0.b").unwrap();
        store.value_mut(id).fill(-40.0);
        let batch = make_batch(9, 4, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 14);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, true).unwrap();
        let trace = pass.trace.unwrap();
        let first_gate = &trace.expert_gates[0];
        assert!(first_gate.data().iter().all(|&f| f < 1e-15), "gate should collapse to ~0");
    }

    #[test]
    fn distinct_centers_produce_distinct_gates() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let mut store = model.init_params(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let id = store.id("nfu.e0.l0.w").unwrap();
        *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 1.0, &mut rng);

        let batch = make_batch(10, 2, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 17);
        // Force the two samples onto different codes.
        let mut tape = Tape::new();
        let pass = model
            .forward_with_fusion(&mut tape, &store, &batch, Some(&cb), Some(&[0, 1]), true, true)
            .unwrap();
        let trace = pass.trace.unwrap();
        let gate = &trace.expert_gates[0];
        assert_ne!(gate.row(0), gate.row(1), "different centers must gate differently");
    }

    #[test]
    fn single_expert_gate_weight_is_exactly_one() {
        let cfg = ModelConfig { expert_count: 1, variant: ModelVariant::Baseline, ..Default::default() };
        let model = DilnModel::new(cfg).unwrap();
        let store = model.init_params(18);
        let batch = make_batch(11, 5, 12, 20);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, None, None, true).unwrap();
        let trace = pass.trace.unwrap();
        for w in &trace.task_gate_weights {
            assert!(w.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn identical_experts_make_gates_irrelevant() {
        let model = DilnModel::new(ModelConfig { variant: ModelVariant::Baseline, ..Default::default() }).unwrap();
        let mut store = model.init_params(19);
        // Copy expert 0 into experts 1 and 2.
        for l in 0..2 {
            for kind in ["w", "b"] {
                let src = store.value(store.id(&format!("experts.e0.l{l}.{kind}")).unwrap()).clone();
                for e in 1..3 {
                    let id = store.id(&format!("experts.e{e}.l{l}.{kind}")).unwrap();
                    *store.value_mut(id) = src.clone();
                }
            }
        }
        let batch = make_batch(12, 6, 12, 20);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, None, None, false).unwrap();
        let p_before = tape.value(pass.p_ctr).data().to_vec();

        // Perturb the ctr task gate: predictions must not move.
        let id = store.id("task_gates.ctr.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 2.0, &mut rng);
        let mut tape2 = Tape::new();
        let pass2 = model.forward(&mut tape2, &store, &batch, None, None, false).unwrap();
        for (a, b) in p_before.iter().zip(tape2.value(pass2.p_ctr).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn task_gate_weights_sum_to_one() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(21);
        let batch = make_batch(13, 9, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 22);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, true).unwrap();
        for w in &pass.trace.unwrap().task_gate_weights {
            for r in 0..w.rows() {
                let sum: f64 = w.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(w.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn predictions_live_in_the_open_unit_interval() {
        let model = DilnModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(23);
        let batch = make_batch(14, 32, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 24);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &batch, Some(&cb), None, false).unwrap();
        for &p in tape.value(pass.p_ctr).data().iter().chain(tape.value(pass.p_cvr).data()) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn feature_width_mismatch_names_the_component() {
        let model = DilnModel::new(ModelConfig { base_dim: 16, ..Default::default() }).unwrap();
        let store = model.init_params(25);
        let batch = make_batch(15, 4, 12, 20);
        let cb = ready_codebook(&model, &store, &batch, 26);
        let mut tape = Tape::new();
        let err = match model.forward(&mut tape, &store, &batch, Some(&cb), None, false) {
            Err(e) => e,
            Ok(_) => panic!("mismatched feature width must fail"),
        };
        assert!(err.to_string().contains("shared feature width"), "{err}");
    }
}
