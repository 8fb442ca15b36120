//! Command implementations: data preparation, training, evaluation and
//! gradient checking. Every command echoes its effective configuration into
//! the output directory so a run is reproducible from that file alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diln_core::data::{
    generate_synthetic, load_events, read_cache, split_by_day, write_cache, ActionType,
    BehaviorEvent, CategoryId, DatasetCache, LifecyclePhase, LogFormat, RankingSample, UserId,
};
use diln_core::embeddings::learn_item_embeddings;
use diln_core::error::{CoreError, Result};
use diln_core::evaluation::{
    cluster_activation_report, lifecycle_slice_report, rule_based_tag, GaucReport,
};
use diln_core::histogram::{materialize_histograms, SearchMode};
use diln_core::ilem::{Codebook, CodebookConfig, EncoderDims};
use diln_core::model::{DilnModel, ModelConfig, ModelVariant};
use diln_core::nn::Checkpoint;
use diln_core::training::{predict, run_gradcheck, task_gaucs, train};

use crate::runcfg::{GsuMode, RunConfig};

const CACHE_FILE: &str = "dataset.cache";
const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_ECHO_FILE: &str = "effective_config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const HISTORY_FILE: &str = "history.txt";

// Rule-based tagging threshold on the exposure-histogram trend (reports on
// untagged data only).
const TAG_SLOPE_THRESHOLD: f64 = 0.005;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(dir: &Path, cfg: &RunConfig, command_line: &[(&str, String)]) -> Result<()> {
    let mut kv = cfg.to_kv();
    for (k, v) in command_line {
        kv.set(&format!("command.{k}"), v.clone());
    }
    write_file(&dir.join(CONFIG_ECHO_FILE), &kv.render_sorted())
}

pub struct PrepareArgs {
    pub synthetic: bool,
    pub input: Option<PathBuf>,
    pub format: Option<String>,
    pub window_days: Option<u32>,
    pub out: PathBuf,
}

pub fn cmd_prepare(mut cfg: RunConfig, args: &PrepareArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    if let Some(w) = args.window_days {
        cfg.synthetic.window_days = w;
    }
    let mut manifest: Vec<(String, String)> = Vec::new();

    let (events, samples, window_days, base_date_key) = if args.synthetic {
        let data = generate_synthetic(&cfg.synthetic)?;
        manifest.push(("source".into(), "synthetic".into()));
        (data.events, data.samples, cfg.synthetic.window_days, 0i64)
    } else {
        let input = args
            .input
            .as_ref()
            .ok_or_else(|| CoreError::Config("prepare-data needs --input or --synthetic".into()))?;
        let format_s = args
            .format
            .as_deref()
            .ok_or_else(|| CoreError::Config("--input requires --format".into()))?;
        let format = LogFormat::parse(format_s)
            .ok_or_else(|| CoreError::Config(format!("unknown format tag {format_s}")))?;
        let report = load_events(input, format)?;
        manifest.push(("source".into(), input.display().to_string()));
        manifest.push(("rows_read".into(), report.rows_read.to_string()));
        manifest.push(("rows_rejected".into(), report.rows_rejected.to_string()));
        let window = args.window_days.unwrap_or(cfg.synthetic.window_days);
        let (samples, base) = build_log_samples(&report.events, window, &cfg)?;
        (report.events, samples, window, base)
    };

    let boundaries = (
        window_days + cfg.synthetic.train_days,
        window_days + cfg.synthetic.train_days + cfg.synthetic.validation_days,
    );
    let split = split_by_day(&events, samples, boundaries, window_days, base_date_key)?;

    // Materialize histograms from the feature window.
    let histogram_len = cfg.train.model.encoder.histogram_len;
    let mode_table;
    let mode = match cfg.gsu_mode {
        GsuMode::Hard => SearchMode::Hard,
        GsuMode::Soft => {
            mode_table = learn_item_embeddings(
                &split.feature_events,
                cfg.embed_dim,
                cfg.embed_epochs,
                cfg.seed.wrapping_add(0xE4B),
            );
            manifest.push(("embedding_items".into(), mode_table.len().to_string()));
            SearchMode::Soft { table: &mode_table }
        }
    };
    let mut all: Vec<RankingSample> = Vec::new();
    all.extend(split.train.iter().cloned());
    all.extend(split.validation.iter().cloned());
    all.extend(split.test.iter().cloned());
    materialize_histograms(
        &mut all,
        &split.feature_events,
        mode,
        &cfg.train.search,
        histogram_len,
        cfg.threads,
    )?;

    let cache = DatasetCache {
        histogram_len,
        feature_dim: all.first().map(|s| s.shared_features.len()).unwrap_or(0),
        window_days,
        boundaries,
        samples: all,
    };
    write_cache(&cache, &args.out.join(CACHE_FILE))?;

    manifest.push(("cache_version".into(), diln_core::data::CACHE_VERSION.to_string()));
    manifest.push(("seed".into(), cfg.seed.to_string()));
    manifest.push(("gsu_mode".into(), cfg.gsu_mode.as_str().into()));
    manifest.push(("histogram_len".into(), histogram_len.to_string()));
    manifest.push(("feature_dim".into(), cache.feature_dim.to_string()));
    manifest.push(("events_total".into(), events.len().to_string()));
    manifest.push(("feature_window_days".into(), format!("1..{window_days}")));
    manifest.push((
        "train_day_range".into(),
        format!("{}..{} ({} days)", window_days + 1, boundaries.0, cfg.synthetic.train_days),
    ));
    manifest.push((
        "validation_day_range".into(),
        format!("{}..{} ({} days)", boundaries.0 + 1, boundaries.1, cfg.synthetic.validation_days),
    ));
    let max_day = cache.samples.iter().map(|s| s.day_index).max().unwrap_or(boundaries.1);
    manifest.push((
        "test_day_range".into(),
        format!("{}..{} ({} days)", boundaries.1 + 1, max_day, max_day - boundaries.1),
    ));
    manifest.push(("samples_train".into(), split.train.len().to_string()));
    manifest.push(("samples_validation".into(), split.validation.len().to_string()));
    manifest.push(("samples_test".into(), split.test.len().to_string()));
    let manifest_text: String =
        manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write_file(&args.out.join(MANIFEST_FILE), &manifest_text)?;

    echo_config(
        &args.out,
        &cfg,
        &[
            ("name", "prepare-data".into()),
            ("synthetic", args.synthetic.to_string()),
            ("input", args.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("format", args.format.clone().unwrap_or_default()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    println!(
        "prepared {} samples ({} train / {} validation / {} test) into {}",
        cache.samples.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

// Turn raw log events into labeled samples: every post-window exposure is an
// impression; click/interaction events sharing (user, item, timestamp) set
// the labels. Base features are window aggregates.
fn build_log_samples(
    events: &[BehaviorEvent],
    window_days: u32,
    cfg: &RunConfig,
) -> Result<(Vec<RankingSample>, i64)> {
    if events.is_empty() {
        return Err(CoreError::Data("no events to build samples from".into()));
    }
    let base_date_key = events.iter().map(|e| e.date_key()).min().unwrap() - 1;
    let day_of = |e: &BehaviorEvent| (e.date_key() - base_date_key) as u32;

    let mut user_counts: BTreeMap<UserId, [u64; 3]> = BTreeMap::new();
    let mut user_cat: BTreeMap<(UserId, CategoryId), ([u64; 3], i64)> = BTreeMap::new();
    let mut cat_counts: BTreeMap<CategoryId, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| day_of(e) <= window_days) {
        user_counts.entry(e.user_id).or_default()[e.action_type.index()] += 1;
        let entry = user_cat.entry((e.user_id, e.category_id)).or_insert(([0; 3], i64::MIN));
        entry.0[e.action_type.index()] += 1;
        entry.1 = entry.1.max(e.timestamp);
        if e.action_type == ActionType::Exposure {
            *cat_counts.entry(e.category_id).or_default() += 1;
        }
    }

    // Click/interaction lookup keyed by the shared exposure identity.
    let mut clicked: std::collections::BTreeSet<(UserId, u64, i64)> = Default::default();
    let mut interacted: std::collections::BTreeSet<(UserId, u64, i64)> = Default::default();
    for e in events.iter().filter(|e| day_of(e) > window_days) {
        match e.action_type {
            ActionType::Click => {
                clicked.insert((e.user_id, e.item_id.0, e.timestamp));
            }
            ActionType::Interaction => {
                interacted.insert((e.user_id, e.item_id.0, e.timestamp));
            }
            ActionType::Exposure => {}
        }
    }

    let ln1p = |c: u64| (c as f64).ln_1p();
    let mut samples = Vec::new();
    for e in events.iter().filter(|e| e.action_type == ActionType::Exposure) {
        let day = day_of(e);
        if day <= window_days {
            continue;
        }
        let uc = user_counts.get(&e.user_id).copied().unwrap_or_default();
        let (ucc, last_ts) =
            user_cat.get(&(e.user_id, e.category_id)).copied().unwrap_or(([0; 3], i64::MIN));
        let recency = if last_ts == i64::MIN {
            2.0
        } else {
            (((e.timestamp - last_ts) as f64 / 86_400.0) / window_days.max(1) as f64).clamp(0.0, 2.0)
        };
        let features = vec![
            ln1p(uc[0]),
            ln1p(uc[1]),
            ln1p(uc[2]),
            ln1p(ucc[0]),
            ln1p(ucc[1]),
            ln1p(cat_counts.get(&e.category_id).copied().unwrap_or(0)),
            recency,
            1.0,
        ];
        let key = (e.user_id, e.item_id.0, e.timestamp);
        let label_click = clicked.contains(&key);
        samples.push(RankingSample {
            user_id: e.user_id,
            candidate_item_id: e.item_id,
            candidate_category_id: e.category_id,
            shared_features: features,
            histograms: [Vec::new(), Vec::new(), Vec::new()],
            label_click,
            label_conversion: label_click && interacted.contains(&key),
            day_index: day,
            lifecycle_tag: None,
            timestamp: e.timestamp,
        });
    }
    if cfg.train.model.base_dim != 8 {
        return Err(CoreError::Config(format!(
            "log-derived features are 8-dimensional; feature_dim is {}",
            cfg.train.model.base_dim
        )));
    }
    Ok((samples, base_date_key))
}

fn meta_set(meta: &mut BTreeMap<String, String>, cfg: &ModelConfig, seed: u64) {
    meta.insert("variant".into(), cfg.variant.as_str().into());
    meta.insert("base_dim".into(), cfg.base_dim.to_string());
    meta.insert("histogram_len".into(), cfg.encoder.histogram_len.to_string());
    meta.insert("enc_dim".into(), cfg.encoder.enc_dim.to_string());
    meta.insert("code_dim".into(), cfg.encoder.code_dim.to_string());
    meta.insert("vq_hidden".into(), cfg.encoder.vq_hidden.to_string());
    meta.insert("vq_clusters".into(), cfg.clusters.to_string());
    meta.insert("recal_hidden".into(), cfg.recal_hidden.to_string());
    meta.insert("expert_count".into(), cfg.expert_count.to_string());
    meta.insert(
        "expert_widths".into(),
        cfg.expert_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    );
    meta.insert("tower_hidden".into(), cfg.tower_hidden.to_string());
    meta.insert("gate_scale".into(), cfg.gate_scale.to_string());
    meta.insert("seed".into(), seed.to_string());
}

fn model_from_meta(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| CoreError::Data(format!("checkpoint metadata is missing {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| CoreError::Data(format!("checkpoint metadata {k} is not an integer")))
    };
    let variant_s = get("variant")?;
    let variant = ModelVariant::parse(variant_s)
        .ok_or_else(|| CoreError::Data(format!("checkpoint has unknown variant {variant_s}")))?;
    let expert_widths = get("expert_widths")?
        .split(',')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CoreError::Data("checkpoint metadata expert_widths is malformed".into()))?;
    Ok(ModelConfig {
        variant,
        encoder: EncoderDims {
            histogram_len: parse_usize("histogram_len")?,
            enc_dim: parse_usize("enc_dim")?,
            conv_channels: [8, 16, 32],
            conv_kernels: [5, 3, 2],
            vq_hidden: parse_usize("vq_hidden")?,
            code_dim: parse_usize("code_dim")?,
        },
        base_dim: parse_usize("base_dim")?,
        clusters: parse_usize("vq_clusters")?,
        recal_hidden: parse_usize("recal_hidden")?,
        expert_count: parse_usize("expert_count")?,
        expert_widths,
        tower_hidden: parse_usize("tower_hidden")?,
        gate_scale: get("gate_scale")?
            .parse()
            .map_err(|_| CoreError::Data("checkpoint metadata gate_scale is not a number".into()))?,
    })
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let cache = read_cache(&args.data.join(CACHE_FILE))?;
    // The cache defines the data geometry.
    cfg.train.model.base_dim = cache.feature_dim;
    cfg.train.model.encoder.histogram_len = cache.histogram_len;
    let split = cache.to_split();

    let result = train(&cfg.train, &split)?;

    let mut ck = Checkpoint::from_store(&result.store);
    meta_set(&mut ck.meta, &cfg.train.model, cfg.seed);
    if let Some(cb) = result.codebook.as_ref() {
        for (name, arr) in cb.to_arrays() {
            ck.arrays.insert(name, arr);
        }
    }
    ck.save(&args.out.join(CHECKPOINT_FILE))?;
    write_file(&args.out.join(HISTORY_FILE), &result.history_text())?;
    echo_config(
        &args.out,
        &cfg,
        &[
            ("name", "train".into()),
            ("data", args.data.display().to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    println!(
        "trained {} ({} epochs run); checkpoint and history in {}",
        cfg.train.model.variant.as_str(),
        result.history.len(),
        args.out.display()
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "na".into(),
    }
}

pub fn cmd_evaluate(cfg: RunConfig, args: &EvaluateArgs) -> Result<()> {
    ensure_dir(&args.report_dir)?;
    let cache = read_cache(&args.data.join(CACHE_FILE))?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model_cfg = model_from_meta(&ck.meta)?;
    if model_cfg.base_dim != cache.feature_dim {
        return Err(CoreError::Shape(format!(
            "shared feature width: checkpoint expects {}, dataset has {}",
            model_cfg.base_dim, cache.feature_dim
        )));
    }
    if model_cfg.uses_ilem() && model_cfg.encoder.histogram_len != cache.histogram_len {
        return Err(CoreError::Shape(format!(
            "histogram length: checkpoint expects {}, dataset has {}",
            model_cfg.encoder.histogram_len, cache.histogram_len
        )));
    }
    let model = DilnModel::new(model_cfg.clone())?;
    let mut store = model.init_params(0);
    ck.load_into(&mut store)?;
    let codebook = if model_cfg.uses_ilem() {
        Some(Codebook::from_arrays(
            CodebookConfig {
                clusters: model_cfg.clusters,
                code_dim: model_cfg.encoder.code_dim,
                ..Default::default()
            },
            &ck.arrays,
        )?)
    } else {
        None
    };

    let split = cache.to_split();
    let batch = cfg.train.batch_size;
    let val_preds = predict(&model, &store, codebook.as_ref(), &split.validation, batch)?;
    let test_preds = predict(&model, &store, codebook.as_ref(), &split.test, batch)?;
    let (val_ctr, val_cvr) = task_gaucs(&split.validation, &val_preds);
    let (test_ctr, test_cvr) = task_gaucs(&split.test, &test_preds);

    write_gauc_report(&args.report_dir.join("gauc_validation.txt"), "validation", &val_ctr, &val_cvr)?;
    write_gauc_report(&args.report_dir.join("gauc_test.txt"), "test", &test_ctr, &test_cvr)?;
    write_user_records(
        &args.report_dir.join("gauc_user_records.txt"),
        &[("validation", &val_ctr, &val_cvr), ("test", &test_ctr, &test_cvr)],
    )?;

    // Life-cycle slices: ground-truth tags when present, rule-based tags
    // from the exposure histogram otherwise (reports only).
    let mut slice_text = String::new();
    let mut cluster_text = String::new();
    let mut ami_line: Option<f64> = None;
    for (name, samples, preds) in
        [("validation", &split.validation, &val_preds), ("test", &split.test, &test_preds)]
    {
        let has_tags = samples.iter().all(|s| s.lifecycle_tag.is_some());
        let tagged: Vec<RankingSample> = if has_tags {
            samples.clone()
        } else {
            samples
                .iter()
                .cloned()
                .map(|mut s| {
                    s.lifecycle_tag = Some(rule_based_tag(&s.histograms[0], TAG_SLOPE_THRESHOLD));
                    s
                })
                .collect()
        };
        slice_text.push_str(&format!(
            "split={name} tag_source={}\n",
            if has_tags { "ground_truth" } else { "rule_based" }
        ));
        for row in lifecycle_slice_report(&tagged, &preds.p_ctr, &preds.p_cvr) {
            slice_text.push_str(&format!(
                "tag={} impressions={} share={} ctr={} cvr={} mean_p_ctr={} mean_p_cvr={}\n",
                row.tag,
                row.impressions,
                row.impression_share,
                row.ctr,
                fmt_opt(row.cvr),
                row.mean_p_ctr,
                row.mean_p_cvr
            ));
        }

        if !preds.codes.is_empty() {
            let tags: Vec<LifecyclePhase> =
                tagged.iter().map(|s| s.lifecycle_tag.unwrap()).collect();
            let report = cluster_activation_report(&tags, &preds.codes, model_cfg.clusters);
            cluster_text.push_str(&format!(
                "split={name} clusters={} ami={}\n",
                model_cfg.clusters, report.ami
            ));
            for (phase, impressions, freq) in &report.rows {
                cluster_text.push_str(&format!("tag={phase} impressions={impressions}"));
                for (c, f) in freq.iter().enumerate() {
                    cluster_text.push_str(&format!(" p{c}={f}"));
                }
                cluster_text.push('\n');
            }
            if name == "test" {
                ami_line = Some(report.ami);
            }
        }
    }
    write_file(&args.report_dir.join("lifecycle_slices.txt"), &slice_text)?;
    if !cluster_text.is_empty() {
        write_file(&args.report_dir.join("cluster_activation.txt"), &cluster_text)?;
    }

    let mut metrics = String::new();
    metrics.push_str(&format!("gauc_ctr_validation={}\n", fmt_opt(val_ctr.as_ref().map(|r| r.gauc))));
    metrics.push_str(&format!("gauc_cvr_validation={}\n", fmt_opt(val_cvr.as_ref().map(|r| r.gauc))));
    metrics.push_str(&format!("gauc_ctr_test={}\n", fmt_opt(test_ctr.as_ref().map(|r| r.gauc))));
    metrics.push_str(&format!("gauc_cvr_test={}\n", fmt_opt(test_cvr.as_ref().map(|r| r.gauc))));
    if let Some(ami) = ami_line {
        metrics.push_str(&format!("cluster_ami_test={ami}\n"));
    }
    write_file(&args.report_dir.join("metrics.txt"), &metrics)?;

    echo_config(
        &args.report_dir,
        &cfg,
        &[
            ("name", "evaluate".into()),
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("report_dir", args.report_dir.display().to_string()),
        ],
    )?;
    println!(
        "evaluation reports written to {} (validation gauc ctr={} cvr={})",
        args.report_dir.display(),
        fmt_opt(val_ctr.as_ref().map(|r| r.gauc)),
        fmt_opt(val_cvr.as_ref().map(|r| r.gauc)),
    );
    Ok(())
}

fn write_gauc_report(
    path: &Path,
    split: &str,
    ctr: &Option<GaucReport>,
    cvr: &Option<GaucReport>,
) -> Result<()> {
    let mut out = format!("split={split}\n");
    for (task, report) in [("ctr", ctr), ("cvr", cvr)] {
        match report {
            Some(r) => out.push_str(&format!(
                "task={task} gauc={} users={} skipped_single_class={}\n",
                r.gauc,
                r.per_user.len(),
                r.skipped_single_class
            )),
            None => out.push_str(&format!("task={task} gauc=na users=0 skipped_single_class=0\n")),
        }
    }
    write_file(path, &out)
}

type SplitReports<'a> = (&'a str, &'a Option<GaucReport>, &'a Option<GaucReport>);

fn write_user_records(path: &Path, splits: &[SplitReports<'_>]) -> Result<()> {
    let mut out = String::new();
    for (split, ctr, cvr) in splits {
        for (task, report) in [("ctr", ctr), ("cvr", cvr)] {
            if let Some(r) = report {
                for u in &r.per_user {
                    out.push_str(&format!(
                        "split={split} task={task} user={} impressions={} auc={}\n",
                        u.user, u.impressions, u.auc
                    ));
                }
            }
        }
    }
    write_file(path, &out)
}

pub struct GradcheckArgs {
    pub samples: usize,
    pub tolerance: f64,
    pub freeze: Vec<String>,
}

pub fn cmd_gradcheck(cfg: RunConfig, args: &GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(&cfg.train, args.samples, &args.freeze)?;
    println!("base loss {:.6}, central differences with step {:.0e}", report.base_loss, report.step);
    println!("{:<14} {:>8} {:>14}  {:<28} status", "group", "params", "max_rel_err", "worst");
    for g in &report.groups {
        if g.frozen {
            println!("{:<14} {:>8} {:>14}  {:<28} frozen (zero gradient, excluded)", g.group, 0, "-", "-");
        } else {
            let status = if g.max_rel_err < args.tolerance { "ok" } else { "FAIL" };
            println!(
                "{:<14} {:>8} {:>14.3e}  {:<28} {status}",
                g.group, g.params_checked, g.max_rel_err, g.worst_param
            );
        }
    }
    if report.passes(args.tolerance) {
        println!("gradient check passed (tolerance {})", args.tolerance);
        Ok(())
    } else {
        Err(CoreError::Numeric(format!(
            "gradient check failed: max relative error {} exceeds tolerance {}",
            report.max_rel_err(),
            args.tolerance
        )))
    }
}

