//! The one experiment configuration: every module's knobs in a single flat
//! key-value file, command-line flags winning over file values, unknown keys
//! rejected, and the effective result echoed next to each command's outputs.

use std::path::Path;

use diln_core::config::{KvFile, KvReader};
use diln_core::data::{LifecyclePhase, SyntheticConfig};
use diln_core::error::{CoreError, Result};
use diln_core::gsu::SearchConfig;
use diln_core::ilem::EncoderDims;
use diln_core::model::{ModelConfig, ModelVariant};
use diln_core::training::TrainConfig;

/// Retrieval flavor used during data preparation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsuMode {
    Hard,
    Soft,
}

impl GsuMode {
    pub fn parse(s: &str) -> Option<GsuMode> {
        match s {
            "hard" => Some(GsuMode::Hard),
            "soft" => Some(GsuMode::Soft),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GsuMode::Hard => "hard",
            GsuMode::Soft => "soft",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub gsu_mode: GsuMode,
    pub embed_dim: usize,
    pub embed_epochs: usize,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 1,
            gsu_mode: GsuMode::Hard,
            embed_dim: 16,
            embed_epochs: 2,
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn phase_key(prefix: &str, phase: LifecyclePhase) -> String {
    format!("{prefix}_{}", phase.as_str())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let kv = match path {
            Some(p) => KvFile::load(p)?,
            None => KvFile::default(),
        };
        RunConfig::from_kv(&kv)
    }

    /// Parse a key-value file; every key any command understands is consumed
    /// here, anything left over is an error.
    pub fn from_kv(kv: &KvFile) -> Result<RunConfig> {
        let mut r = kv.reader();
        let cfg = Self::read(&mut r)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn read(r: &mut KvReader<'_>) -> Result<RunConfig> {
        let d = RunConfig::default();
        let seed = r.u64("seed", d.seed)?;

        // Retrieval and histogram geometry.
        let histogram_len = r.usize("histogram_len", 20)?;
        let search = SearchConfig {
            max_results: r.usize("gsu_max_results", 100)?,
            active_date_window: histogram_len,
        };
        let gsu_mode_s = r.string("gsu_mode", d.gsu_mode.as_str());
        let gsu_mode = GsuMode::parse(&gsu_mode_s)
            .ok_or_else(|| CoreError::Config(format!("gsu_mode must be hard or soft, got {gsu_mode_s}")))?;

        // Architecture.
        let encoder = EncoderDims {
            histogram_len,
            enc_dim: r.usize("enc_dim", 32)?,
            conv_channels: [8, 16, 32],
            conv_kernels: [5, 3, 2],
            vq_hidden: r.usize("vq_hidden", 32)?,
            code_dim: r.usize("code_dim", 16)?,
        };
        let variant_s = r.string("ablation", "full");
        let variant = ModelVariant::parse(&variant_s).ok_or_else(|| {
            CoreError::Config(format!("ablation must be baseline, ilem or full, got {variant_s}"))
        })?;
        let expert_widths_s = r.string("expert_widths", "64,32");
        let expert_widths: Vec<usize> = expert_widths_s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CoreError::Config(format!("expert_widths: bad list {expert_widths_s}")))?;
        let feature_dim = r.usize("feature_dim", 12)?;
        let model = ModelConfig {
            variant,
            encoder,
            base_dim: feature_dim,
            clusters: r.usize("vq_clusters", 10)?,
            recal_hidden: r.usize("recal_hidden", 32)?,
            expert_count: r.usize("expert_count", 3)?,
            expert_widths,
            tower_hidden: r.usize("tower_hidden", 16)?,
            gate_scale: r.f64("gate_scale", 2.0)?,
        };

        // Optimization.
        let train = TrainConfig {
            epochs: r.usize("epochs", 12)?,
            batch_size: r.usize("batch_size", 256)?,
            learning_rate: r.f64("learning_rate", 3e-3)?,
            recon_weight: r.f64("recon_weight", 1.0)?,
            gate_weight_decay: r.f64("gate_weight_decay", 0.05)?,
            patience: r.usize("patience", 3)?,
            seed,
            model,
            search,
        };

        // Synthetic generator.
        let ds = SyntheticConfig::default();
        let mut phase_mix = [0.0f64; 4];
        for (i, phase) in LifecyclePhase::ALL.iter().enumerate() {
            phase_mix[i] = r.f64(&phase_key("phase_mix", *phase), ds.phase_mix[i])?;
        }
        let mut event_click_rate = ds.event_click_rate;
        let mut event_interaction_rate = ds.event_interaction_rate;
        let mut rates = ds.rates;
        for (i, phase) in LifecyclePhase::ALL.iter().enumerate() {
            event_click_rate[i] =
                r.f64(&phase_key("event_click_rate", *phase), ds.event_click_rate[i])?;
            event_interaction_rate[i] =
                r.f64(&phase_key("event_interaction_rate", *phase), ds.event_interaction_rate[i])?;
            rates[i].ctr_bias = r.f64(&phase_key("ctr_bias", *phase), ds.rates[i].ctr_bias)?;
            rates[i].ctr_rel_weight =
                r.f64(&phase_key("ctr_rel_weight", *phase), ds.rates[i].ctr_rel_weight)?;
            rates[i].cvr_bias = r.f64(&phase_key("cvr_bias", *phase), ds.rates[i].cvr_bias)?;
            rates[i].cvr_rel_weight =
                r.f64(&phase_key("cvr_rel_weight", *phase), ds.rates[i].cvr_rel_weight)?;
        }
        let synthetic = SyntheticConfig {
            users: r.usize("users", ds.users)?,
            categories: r.usize("categories", ds.categories)?,
            categories_per_user: r.usize("categories_per_user", ds.categories_per_user)?,
            phase_mix,
            window_days: r.u32("window_days", ds.window_days)?,
            train_days: r.u32("train_days", ds.train_days)?,
            validation_days: r.u32("validation_days", ds.validation_days)?,
            test_days: r.u32("test_days", ds.test_days)?,
            samples_per_user_day: r.usize("samples_per_user_day", ds.samples_per_user_day)?,
            peak_daily_exposures: r.f64("peak_daily_exposures", ds.peak_daily_exposures)?,
            event_click_rate,
            event_interaction_rate,
            rates,
            feature_dim,
            seed,
        };

        Ok(RunConfig {
            seed,
            threads: r.usize("threads", d.threads)?,
            gsu_mode,
            embed_dim: r.usize("embed_dim", d.embed_dim)?,
            embed_epochs: r.usize("embed_epochs", d.embed_epochs)?,
            synthetic,
            train,
        })
    }

    fn validate(&self) -> Result<()> {
        self.train.model.validate()?;
        if self.threads == 0 {
            return Err(CoreError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Render every effective key (including defaults) for the config echo.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let m = &self.train.model;
        kv.set("seed", self.seed.to_string());
        kv.set("threads", self.threads.to_string());
        kv.set("gsu_mode", self.gsu_mode.as_str().to_string());
        kv.set("gsu_max_results", self.train.search.max_results.to_string());
        kv.set("histogram_len", m.encoder.histogram_len.to_string());
        kv.set("embed_dim", self.embed_dim.to_string());
        kv.set("embed_epochs", self.embed_epochs.to_string());
        kv.set("ablation", m.variant.as_str().to_string());
        kv.set("feature_dim", m.base_dim.to_string());
        kv.set("enc_dim", m.encoder.enc_dim.to_string());
        kv.set("code_dim", m.encoder.code_dim.to_string());
        kv.set("vq_hidden", m.encoder.vq_hidden.to_string());
        kv.set("vq_clusters", m.clusters.to_string());
        kv.set("recal_hidden", m.recal_hidden.to_string());
        kv.set("expert_count", m.expert_count.to_string());
        kv.set(
            "expert_widths",
            m.expert_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("tower_hidden", m.tower_hidden.to_string());
        kv.set("gate_scale", m.gate_scale.to_string());
        kv.set("epochs", self.train.epochs.to_string());
        kv.set("batch_size", self.train.batch_size.to_string());
        kv.set("learning_rate", self.train.learning_rate.to_string());
        kv.set("recon_weight", self.train.recon_weight.to_string());
        kv.set("gate_weight_decay", self.train.gate_weight_decay.to_string());
        kv.set("patience", self.train.patience.to_string());
        let s = &self.synthetic;
        kv.set("users", s.users.to_string());
        kv.set("categories", s.categories.to_string());
        kv.set("categories_per_user", s.categories_per_user.to_string());
        kv.set("window_days", s.window_days.to_string());
        kv.set("train_days", s.train_days.to_string());
        kv.set("validation_days", s.validation_days.to_string());
        kv.set("test_days", s.test_days.to_string());
        kv.set("samples_per_user_day", s.samples_per_user_day.to_string());
        kv.set("peak_daily_exposures", s.peak_daily_exposures.to_string());
        for (i, phase) in LifecyclePhase::ALL.iter().enumerate() {
            kv.set(&phase_key("phase_mix", *phase), s.phase_mix[i].to_string());
            kv.set(&phase_key("event_click_rate", *phase), s.event_click_rate[i].to_string());
            kv.set(
                &phase_key("event_interaction_rate", *phase),
                s.event_interaction_rate[i].to_string(),
            );
            kv.set(&phase_key("ctr_bias", *phase), s.rates[i].ctr_bias.to_string());
            kv.set(&phase_key("ctr_rel_weight", *phase), s.rates[i].ctr_rel_weight.to_string());
            kv.set(&phase_key("cvr_bias", *phase), s.rates[i].cvr_bias.to_string());
            kv.set(&phase_key("cvr_rel_weight", *phase), s.rates[i].cvr_rel_weight.to_string());
        }
        kv
    }
}
