//! Joint optimization: task losses plus the VQ reconstruction loss, epoch
//! loop with early stopping on validation GAUC, seeded reproducibility.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, RankingSample};
use crate::error::{CoreError, Result};
use crate::evaluation::{gauc, GaucReport};
use crate::gsu::SearchConfig;
use crate::ilem::{compress_encoded, encode_histograms, Codebook, CodebookConfig};
use crate::model::{Batch, DilnModel, ForwardPass, GateStats, ModelConfig};
use crate::nn::{
    finite_diff_check, AdamConfig, FrozenContext, GradCheckReport, GradCheckTarget, ParamStore,
    Tape, Tensor, ValueId,
};

/// Optimization hyperparameters. The retrieval constants live in
/// [`SearchConfig`]; the architecture in [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the VQ reconstruction loss in the total.
    pub recon_weight: f64,
    /// Decoupled weight decay on the gate affine maps (recalibrator second
    /// layer and fusion gates), keeping them out of sigmoid saturation.
    pub gate_weight_decay: f64,
    /// Early-stop patience (epochs without validation improvement).
    pub patience: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 256,
            learning_rate: 3e-3,
            recon_weight: 1.0,
            gate_weight_decay: 0.05,
            patience: 3,
            seed: 42,
            model: ModelConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn codebook_config(&self) -> CodebookConfig {
        CodebookConfig {
            clusters: self.model.clusters,
            code_dim: self.model.encoder.code_dim,
            ..Default::default()
        }
    }
}

/// Scalar loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub ctr: f64,
    pub cvr: f64,
    pub recon: f64,
}

/// Loss nodes of one batch on the tape.
pub struct BatchLoss {
    pub total: ValueId,
    pub pass: ForwardPass,
    pub parts: LossParts,
}

/// Build the full training loss for one batch:
/// `bce(ctr) + bce(cvr | clicked) + recon_weight * recon`.
///
/// The conversion loss is weighted by the click labels, so unclicked samples
/// contribute exactly zero conversion gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss(
    tape: &mut Tape,
    model: &DilnModel,
    store: &ParamStore,
    batch: &Batch,
    codebook: Option<&Codebook>,
    codes_override: Option<&[usize]>,
    recon_weight: f64,
    want_trace: bool,
) -> Result<BatchLoss> {
    let pass = model.forward(tape, store, batch, codebook, codes_override, want_trace)?;
    let clicks = tape.input(batch.label_click.clone());
    let convs = tape.input(batch.label_conversion.clone());
    let ones = tape.input(Tensor::from_vec(&[batch.size(), 1], vec![1.0; batch.size()]));

    let ctr_loss = tape.bce_logits_mean(pass.ctr_logits, clicks, ones);
    let cvr_loss = tape.bce_logits_mean(pass.cvr_logits, convs, clicks);
    let task_total = tape.add(ctr_loss, cvr_loss);
    let (total, recon_val) = match pass.recon_loss {
        Some(recon) => {
            let scaled = tape.scale(recon, recon_weight);
            (tape.add(task_total, scaled), tape.value(recon).item())
        }
        None => (task_total, 0.0),
    };
    let parts = LossParts {
        total: tape.value(total).item(),
        ctr: tape.value(ctr_loss).item(),
        cvr: tape.value(cvr_loss).item(),
        recon: recon_val,
    };
    Ok(BatchLoss { total, pass, parts })
}

/// One history row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_ctr: f64,
    pub loss_cvr: f64,
    pub loss_recon: f64,
    pub gauc_ctr: Option<f64>,
    pub gauc_cvr: Option<f64>,
    pub gate_min: Option<f64>,
    pub gate_max: Option<f64>,
    pub is_best: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "na".into(),
    }
}

impl EpochRecord {
    /// Line-delimited history format (`key=value` pairs).
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={} loss_ctr={} loss_cvr={} loss_recon={} gauc_ctr={} gauc_cvr={} gate_min={} gate_max={} best={}",
            self.epoch,
            self.train_loss,
            self.loss_ctr,
            self.loss_cvr,
            self.loss_recon,
            fmt_opt(self.gauc_ctr),
            fmt_opt(self.gauc_cvr),
            fmt_opt(self.gate_min),
            fmt_opt(self.gate_max),
            self.is_best,
        )
    }
}

/// Everything a finished run hands back: best-validation parameters, the
/// codebook that goes with them, per-epoch history and the saved
/// checkpoint's validation metrics.
pub struct TrainResult {
    pub store: ParamStore,
    pub codebook: Option<Codebook>,
    pub history: Vec<EpochRecord>,
    pub final_gauc_ctr: Option<f64>,
    pub final_gauc_cvr: Option<f64>,
    /// Run-wide gate bounds over every forward pass (full variant only).
    pub gate_bounds: Option<(f64, f64)>,
}

impl TrainResult {
    /// History file content: one line per epoch plus a final line with the
    /// saved checkpoint's validation metrics.
    pub fn history_text(&self) -> String {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out.push_str(&format!(
            "epoch=final gauc_ctr={} gauc_cvr={}\n",
            fmt_opt(self.final_gauc_ctr),
            fmt_opt(self.final_gauc_cvr)
        ));
        out
    }
}

/// Batched prediction output.
pub struct Predictions {
    pub p_ctr: Vec<f64>,
    pub p_cvr: Vec<f64>,
    /// Per-sample cluster assignments; empty for the baseline variant.
    pub codes: Vec<usize>,
}

/// Forward the samples in batches, no gradients.
pub fn predict(
    model: &DilnModel,
    store: &ParamStore,
    codebook: Option<&Codebook>,
    samples: &[RankingSample],
    batch_size: usize,
) -> Result<Predictions> {
    let mut out = Predictions { p_ctr: Vec::new(), p_cvr: Vec::new(), codes: Vec::new() };
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&RankingSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, store, &batch, codebook, None, false)?;
        out.p_ctr.extend_from_slice(tape.value(pass.p_ctr).data());
        out.p_cvr.extend_from_slice(tape.value(pass.p_cvr).data());
        out.codes.extend_from_slice(&pass.codes);
    }
    Ok(out)
}

/// Task GAUCs: click ranking over all samples, conversion ranking restricted
/// to clicked impressions (the conversion label is conditional on the
/// click). `None` when no user has both classes.
pub fn task_gaucs(
    samples: &[RankingSample],
    preds: &Predictions,
) -> (Option<GaucReport>, Option<GaucReport>) {
    let ctr_rows: Vec<_> = samples
        .iter()
        .zip(&preds.p_ctr)
        .map(|(s, &p)| (s.user_id, p, s.label_click))
        .collect();
    let cvr_rows: Vec<_> = samples
        .iter()
        .zip(&preds.p_cvr)
        .filter(|(s, _)| s.label_click)
        .map(|(s, &p)| (s.user_id, p, s.label_conversion))
        .collect();
    (gauc(&ctr_rows).ok(), gauc(&cvr_rows).ok())
}

/// Seed a fresh codebook from the compressed vectors of one batch.
pub fn init_codebook(
    model: &DilnModel,
    store: &ParamStore,
    batch: &Batch,
    config: CodebookConfig,
    rng: &mut ChaCha8Rng,
) -> Codebook {
    let mut tape = Tape::new();
    let blocks = tape.input(batch.blocks.clone());
    let x = encode_histograms(&mut tape, store, blocks, &model.config.encoder);
    let (_, xc) = compress_encoded(&mut tape, store, x);
    let mut cb = Codebook::new(config);
    cb.init_from_batch(tape.value(xc), rng);
    cb
}

/// Run the optimization loop. Identical seeds produce identical histories
/// and parameters.
pub fn train(config: &TrainConfig, split: &DatasetSplit) -> Result<TrainResult> {
    config.model.validate()?;
    if split.train.is_empty() {
        return Err(CoreError::Data("empty training split".into()));
    }
    if config.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be positive".into()));
    }
    let model = DilnModel::new(config.model.clone())?;
    let mut store = model.init_params(config.seed);
    store.set_group_weight_decay("recal", config.gate_weight_decay);
    store.set_group_weight_decay("nfu", config.gate_weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5117));
    let mut codebook_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xC0DE));

    let mut codebook = if config.model.uses_ilem() {
        let first: Vec<&RankingSample> =
            split.train.iter().take(config.batch_size).collect();
        let batch = Batch::from_samples(&first);
        Some(init_codebook(&model, &store, &batch, config.codebook_config(), &mut codebook_rng))
    } else {
        None
    };

    let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut history = Vec::new();
    let mut run_gate_stats: Option<GateStats> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_snapshot: Option<(Vec<(String, Tensor)>, Option<Codebook>)> = None;
    let mut stale_epochs = 0usize;

    let mut indices: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_parts = LossParts { total: 0.0, ctr: 0.0, cvr: 0.0, recon: 0.0 };
        let mut batches = 0usize;
        let mut epoch_gates: Option<GateStats> = None;

        for (batch_no, chunk) in indices.chunks(config.batch_size).enumerate() {
            let refs: Vec<&RankingSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = Batch::from_samples(&refs);
            let mut tape = Tape::new();
            store.zero_grads();
            let loss = build_batch_loss(
                &mut tape,
                &model,
                &store,
                &batch,
                codebook.as_ref(),
                None,
                config.recon_weight,
                false,
            )?;
            if !loss.parts.total.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            let grads = tape.backward(loss.total);
            tape.accumulate_into(&grads, &mut store);
            store.adam_step(&adam)?;
            if let (Some(cb), Some(xc)) = (codebook.as_mut(), loss.pass.xc_value.as_ref()) {
                cb.update(xc, &loss.pass.codes, &mut codebook_rng);
            }
            if let Some(stats) = loss.pass.gate_stats {
                match epoch_gates.as_mut() {
                    Some(agg) => agg.merge(&stats),
                    None => epoch_gates = Some(stats),
                }
            }
            epoch_parts.total += loss.parts.total;
            epoch_parts.ctr += loss.parts.ctr;
            epoch_parts.cvr += loss.parts.cvr;
            epoch_parts.recon += loss.parts.recon;
            batches += 1;
        }
        if let Some(stats) = epoch_gates.as_ref() {
            match run_gate_stats.as_mut() {
                Some(agg) => agg.merge(stats),
                None => run_gate_stats = Some(*stats),
            }
        }

        let n = batches.max(1) as f64;
        let preds = predict(&model, &store, codebook.as_ref(), &split.validation, config.batch_size)?;
        let (g_ctr, g_cvr) = task_gaucs(&split.validation, &preds);
        let metric = early_stop_metric(&g_ctr, &g_cvr);
        let improved = metric > best_metric;
        if improved {
            best_metric = metric;
            best_snapshot = Some((store.snapshot_values(), codebook.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_parts.total / n,
            loss_ctr: epoch_parts.ctr / n,
            loss_cvr: epoch_parts.cvr / n,
            loss_recon: epoch_parts.recon / n,
            gauc_ctr: g_ctr.as_ref().map(|r| r.gauc),
            gauc_cvr: g_cvr.as_ref().map(|r| r.gauc),
            gate_min: epoch_gates.as_ref().map(|s| s.min),
            gate_max: epoch_gates.as_ref().map(|s| s.max),
            is_best: improved,
        });
        if stale_epochs > config.patience {
            break;
        }
    }

    if let Some((values, cb)) = best_snapshot {
        store.restore_values(&values);
        codebook = cb;
    }
    let preds = predict(&model, &store, codebook.as_ref(), &split.validation, config.batch_size)?;
    let (g_ctr, g_cvr) = task_gaucs(&split.validation, &preds);

    Ok(TrainResult {
        store,
        codebook,
        history,
        final_gauc_ctr: g_ctr.map(|r| r.gauc),
        final_gauc_cvr: g_cvr.map(|r| r.gauc),
        gate_bounds: run_gate_stats.map(|s| (s.min, s.max)),
    })
}

fn early_stop_metric(ctr: &Option<GaucReport>, cvr: &Option<GaucReport>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    if let Some(r) = ctr {
        sum += r.gauc;
        n += 1.0;
    }
    if let Some(r) = cvr {
        sum += r.gauc;
        n += 1.0;
    }
    if n == 0.0 {
        0.0
    } else {
        sum / n
    }
}

/// Gradient-check target over one batch of the full training loss. The base
/// pass records stop-gradient outputs, relu activation masks and cluster
/// assignments; frozen re-evaluations replay all three, so finite differences
/// probe exactly the function backprop differentiates.
pub struct DilnLossTarget<'a> {
    pub model: &'a DilnModel,
    pub batch: &'a Batch,
    pub codebook: Option<&'a Codebook>,
    pub recon_weight: f64,
    frozen: Option<FrozenContext>,
    frozen_codes: Option<Vec<usize>>,
}

impl<'a> DilnLossTarget<'a> {
    pub fn new(
        model: &'a DilnModel,
        batch: &'a Batch,
        codebook: Option<&'a Codebook>,
        recon_weight: f64,
    ) -> Self {
        DilnLossTarget { model, batch, codebook, recon_weight, frozen: None, frozen_codes: None }
    }
}

impl GradCheckTarget for DilnLossTarget<'_> {
    fn loss_and_grad(&mut self, store: &mut ParamStore) -> Result<f64> {
        let mut tape = Tape::recording();
        let loss = build_batch_loss(
            &mut tape,
            self.model,
            store,
            self.batch,
            self.codebook,
            None,
            self.recon_weight,
            false,
        )?;
        let grads = tape.backward(loss.total);
        tape.accumulate_into(&grads, store);
        let total = loss.parts.total;
        self.frozen_codes = Some(loss.pass.codes.clone());
        self.frozen = Some(tape.take_frozen());
        Ok(total)
    }

    fn loss_frozen(&self, store: &ParamStore) -> Result<f64> {
        let ctx = self.frozen.clone().expect("loss_and_grad runs first");
        let codes = self.frozen_codes.as_ref().expect("loss_and_grad runs first");
        let mut tape = Tape::replaying(ctx);
        let loss = build_batch_loss(
            &mut tape,
            self.model,
            store,
            self.batch,
            self.codebook,
            Some(codes),
            self.recon_weight,
            false,
        )?;
        Ok(loss.parts.total)
    }
}

/// Map a freeze spec to parameter groups: module shorthands (`ilfm`, `ilem`)
/// or a raw group name.
pub fn freeze_spec_groups(spec: &str) -> Vec<&'static str> {
    match spec {
        "ilfm" => vec!["recal", "nfu"],
        "ilem" => vec!["cnn", "vq_encoder", "vq_decoder"],
        "cnn" => vec!["cnn"],
        "vq_encoder" => vec!["vq_encoder"],
        "vq_decoder" => vec!["vq_decoder"],
        "recal" => vec!["recal"],
        "nfu" => vec!["nfu"],
        "experts" => vec!["experts"],
        "task_gates" => vec!["task_gates"],
        "towers" => vec!["towers"],
        _ => vec![],
    }
}

/// Build the deterministic gradient-check batch (from the synthetic
/// generator, balanced across click labels where possible), check the full
/// loss and report per-group errors.
pub fn run_gradcheck(
    config: &TrainConfig,
    sample_count: usize,
    freeze: &[String],
) -> Result<GradCheckReport> {
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::histogram::{materialize_histograms, SearchMode};

    let synth = SyntheticConfig {
        users: 24,
        categories: 12,
        categories_per_user: 4,
        seed: config.seed,
        feature_dim: config.model.base_dim,
        window_days: config.model.encoder.histogram_len as u32,
        ..Default::default()
    };
    let mut data = generate_synthetic(&synth)?;
    let window_end = synth.window_days as i64;
    let feature_events: Vec<_> =
        data.events.iter().filter(|e| e.date_key() <= window_end).copied().collect();
    materialize_histograms(
        &mut data.samples,
        &feature_events,
        SearchMode::Hard,
        &config.search,
        config.model.encoder.histogram_len,
        1,
    )?;

    // Mix clicked and unclicked samples so both towers carry gradient.
    let clicked: Vec<&RankingSample> = data.samples.iter().filter(|s| s.label_click).collect();
    let unclicked: Vec<&RankingSample> = data.samples.iter().filter(|s| !s.label_click).collect();
    let mut refs: Vec<&RankingSample> = Vec::new();
    let half = sample_count / 2;
    refs.extend(clicked.iter().take(half));
    refs.extend(unclicked.iter().take(sample_count - refs.len()));
    if refs.len() < sample_count {
        refs.extend(clicked.iter().skip(half).take(sample_count - refs.len()));
    }
    if refs.is_empty() {
        return Err(CoreError::Data("gradcheck needs at least one sample".into()));
    }
    let batch = Batch::from_samples(&refs);

    let model = DilnModel::new(config.model.clone())?;
    let mut store = model.init_params(config.seed);
    // Jitter every parameter away from the training init. The check probes
    // chain-rule correctness, which holds at any point, but the zero-
    // initialized biases and gate maps put many relu pre-activations exactly
    // on their kink, where one-sided finite differences disagree with the
    // subgradient by construction.
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6E6E));
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += jitter_rng.gen_range(-0.05..=0.05);
        }
    }
    for spec in freeze {
        let groups = freeze_spec_groups(spec);
        if groups.is_empty() {
            return Err(CoreError::Config(format!("unknown freeze target {spec}")));
        }
        for g in groups {
            store.set_group_frozen(g, true);
        }
    }
    let mut codebook_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xC0DE));
    let codebook = if config.model.uses_ilem() {
        Some(init_codebook(&model, &store, &batch, config.codebook_config(), &mut codebook_rng))
    } else {
        None
    };

    let mut target = DilnLossTarget::new(&model, &batch, codebook.as_ref(), config.recon_weight);
    finite_diff_check(&mut target, &mut store, 1e-5)
}
