//! One function per subcommand. Every command validates its inputs and
//! stage order before doing any training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use uapath::data::{generate_bag_images, generate_bags, generate_synthetic, load_manifest, make_splits, PatchDataset};
use uapath::mil::{attention_map, featurize, load_bag, save_bag, train_mil, write_attention_csv, Bag};
use uapath::model::{load_checkpoint, save_checkpoint, HeadKind, ModelCheckpoint, Stage};
use uapath::report::{export_embeddings, MetricsReport};
use uapath::sslpipe::{self, evaluate, linear_probe, predict, predict_opinions};
use uapath::ualoop::{run_ua_loop, Selection, UaLoopConfig};

use crate::config::{BagSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::rundir::{sha256_file, upstream_file, StageDir};

pub const CKPT: &str = "model.ckpt";

/// Dataset splits for a run.
pub struct Splits {
    pub train: PatchDataset,
    pub val: PatchDataset,
    pub test: PatchDataset,
    pub fingerprint: String,
}

impl Splits {
    pub fn get(&self, name: &str) -> CliResult<&PatchDataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(CliError::new("E_ARG", format!("unknown split `{name}` (train, val or test)"))),
        }
    }
}

pub fn load_splits(cfg: &RunConfig) -> CliResult<Splits> {
    let ds = match &cfg.dataset.manifest {
        Some(p) => load_manifest(p)?,
        None => generate_synthetic(&cfg.dataset.synthetic)?,
    };
    let fingerprint = ds.fingerprint();
    let [a, b, c] = cfg.dataset.split;
    let (train, val, test) = make_splits(&ds, (a, b, c), cfg.split_seed())?;
    Ok(Splits {
        train,
        val,
        test,
        fingerprint,
    })
}

fn require_nonempty<'a>(ds: &'a PatchDataset, what: &str) -> CliResult<&'a PatchDataset> {
    if ds.is_empty() {
        return Err(CliError::new("E_DATA", format!("the {what} split is empty")));
    }
    Ok(ds)
}

/// Checkpoint named by `explicit`, or the one a finished upstream stage
/// produced. Records it as an input of `dir`.
fn input_checkpoint(
    cfg: &RunConfig,
    dir: &mut StageDir,
    explicit: Option<&Path>,
    upstream: &str,
) -> CliResult<ModelCheckpoint> {
    let (path, sha) = match explicit {
        Some(p) => (p.to_path_buf(), sha256_file(p)?),
        None => upstream_file(cfg, upstream, CKPT)?,
    };
    let ckpt = load_checkpoint(&path, None)?;
    dir.record_input(&path, sha);
    Ok(ckpt)
}

/// Like [`input_checkpoint`] but rejects the wrong stage up front.
fn staged_checkpoint(
    cfg: &RunConfig,
    dir: &mut StageDir,
    explicit: Option<&Path>,
    upstream: &str,
    stage: Stage,
    what: &str,
) -> CliResult<ModelCheckpoint> {
    let ckpt = input_checkpoint(cfg, dir, explicit, upstream)?;
    ckpt.require_stage(stage, what)?;
    Ok(ckpt)
}

/// Removes the partial directory when a command fails midway.
fn guarded<T>(dir: StageDir, f: impl FnOnce(&mut StageDir) -> CliResult<T>) -> CliResult<(StageDir, T)> {
    let mut dir = dir;
    match f(&mut dir) {
        Ok(v) => Ok((dir, v)),
        Err(e) => {
            let _ = std::fs::remove_dir_all(dir.path(""));
            Err(e)
        }
    }
}

fn uncertainty_csv(u: &uapath::report::UncertaintySummary) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    u.write_csv(&mut buf).map_err(|e| CliError::new("E_IO", e.to_string()))?;
    Ok(buf)
}

fn write_checkpoint(dir: &StageDir, ckpt: &ModelCheckpoint, file: &str) -> CliResult<()> {
    save_checkpoint(ckpt, &dir.path(file))?;
    Ok(())
}

#[derive(Serialize)]
struct StageMetrics<'a> {
    stage: &'a str,
    seed: u64,
    split: &'a str,
    metrics: &'a MetricsReport,
    uncertainty: Option<&'a uapath::report::UncertaintySummary>,
    mean_u_correct: Option<f64>,
    mean_u_incorrect: Option<f64>,
    final_loss: Option<f64>,
}

fn write_eval(dir: &StageDir, cfg: &RunConfig, model: &uapath::model::Model, ds: &PatchDataset, split: &str, final_loss: Option<f64>) -> CliResult<MetricsReport> {
    let ev = evaluate(model, ds)?;
    dir.write_json(
        "metrics.json",
        &StageMetrics {
            stage: &dir.name,
            seed: cfg.seed,
            split,
            metrics: &ev.metrics,
            uncertainty: ev.uncertainty.as_ref(),
            mean_u_correct: ev.uncertainty.as_ref().and_then(|u| u.mean_u_correct),
            mean_u_incorrect: ev.uncertainty.as_ref().and_then(|u| u.mean_u_incorrect),
            final_loss,
        },
    )?;
    if let Some(u) = &ev.uncertainty {
        dir.write("uncertainty.csv", uncertainty_csv(u)?)?;
    }
    Ok(ev.metrics)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = StageDir::create(&cfg.out, "pretrain")?;
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let train = require_nonempty(&splits.train, "training")?;
        let run = sslpipe::pretrain(train, &cfg.model.encoder, &cfg.model.projection, &cfg.stage(&cfg.pretrain))?;
        write_checkpoint(dir, &run.checkpoint, CKPT)?;
        dir.write_json("report.json", &run.report)?;
        let probe = if !splits.test.is_empty() && train.labels().is_ok() && splits.test.labels().is_ok() {
            Some(linear_probe(&run.checkpoint.model()?, train, &splits.test)?)
        } else {
            None
        };
        dir.write_json(
            "metrics.json",
            &json!({
                "stage": "pretrain",
                "seed": cfg.seed,
                "final_loss": run.report.loss_curve.last(),
                "loss_curve": run.report.loss_curve,
                "linear_probe_accuracy": probe,
            }),
        )
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

pub fn cmd_finetune(cfg: &RunConfig, from: Option<&Path>) -> CliResult<PathBuf> {
    let mut dir = StageDir::create(&cfg.out, "finetune")?;
    let pre = match staged_checkpoint(cfg, &mut dir, from, "pretrain", Stage::Pretrained, "fine-tuning") {
        Ok(c) => c,
        Err(e) => return abandon(dir, e),
    };
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let train = require_nonempty(&splits.train, "training")?;
        let test = require_nonempty(&splits.test, "test")?;
        let run = sslpipe::finetune(&pre, train, cfg.model.head, &cfg.stage(&cfg.finetune))?;
        write_checkpoint(dir, &run.checkpoint, CKPT)?;
        dir.write_json("report.json", &run.report)?;
        write_eval(dir, cfg, &run.checkpoint.model()?, test, "test", run.report.loss_curve.last().copied())?;
        Ok(())
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

pub fn cmd_distill(cfg: &RunConfig, from: Option<&Path>) -> CliResult<PathBuf> {
    let mut dir = StageDir::create(&cfg.out, "distill")?;
    let teacher = match staged_checkpoint(cfg, &mut dir, from, "finetune", Stage::Finetuned, "distillation") {
        Ok(c) => c,
        Err(e) => return abandon(dir, e),
    };
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let train = require_nonempty(&splits.train, "training")?;
        let test = require_nonempty(&splits.test, "test")?;
        let arch = teacher.meta.architecture.clone();
        let run = sslpipe::distill(&teacher, train, &arch, &cfg.stage(&cfg.distill))?;
        write_checkpoint(dir, &run.checkpoint, CKPT)?;
        dir.write_json("report.json", &run.report)?;
        write_eval(dir, cfg, &run.checkpoint.model()?, test, "test", run.report.loss_curve.last().copied())?;
        Ok(())
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

pub fn ualoop_stage_name(selection: Selection) -> &'static str {
    match selection {
        Selection::Uncertainty => "ualoop",
        Selection::Random => "ualoop-random",
    }
}

pub fn cmd_ualoop(cfg: &RunConfig, from: Option<&Path>) -> CliResult<PathBuf> {
    let name = ualoop_stage_name(cfg.ualoop.selection);
    let mut dir = StageDir::create(&cfg.out, name)?;
    let pre = match staged_checkpoint(cfg, &mut dir, from, "pretrain", Stage::Pretrained, "the acquisition loop") {
        Ok(c) => c,
        Err(e) => return abandon(dir, e),
    };
    if cfg.model.head != HeadKind::Evidential && cfg.ualoop.selection == Selection::Uncertainty {
        return abandon(dir, CliError::new("E_CONFIG", "uncertainty selection needs model.head = \"evidential\""));
    }
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let train = require_nonempty(&splits.train, "training")?;
        let test = require_nonempty(&splits.test, "test")?;
        let lc = UaLoopConfig {
            rounds: cfg.ualoop.rounds,
            per_round_fraction: cfg.ualoop.per_round_fraction,
            selection: cfg.ualoop.selection,
            warm_start: cfg.ualoop.warm_start,
            seed: cfg.seed,
            finetune: cfg.stage(&cfg.finetune),
        };
        let run = run_ua_loop(&pre, train, test, &lc)?;
        let mut csv = String::from("round,budget,labeled_fraction,accuracy,macro_f1,auc,mean_u_correct,mean_u_incorrect\n");
        let mut by_round = serde_json::Map::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &run.rounds {
            let rec = &r.record;
            let frac = rec.budget as f64 / train.len() as f64;
            write_checkpoint(dir, &r.checkpoint, &format!("round_{:02}.ckpt", rec.round))?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                rec.round,
                rec.budget,
                frac,
                r.metrics.accuracy,
                r.metrics.macro_f1,
                opt(r.metrics.auc),
                opt(rec.mean_u_correct),
                opt(rec.mean_u_incorrect)
            );
            by_round.insert(
                format!("round_{:02}", rec.round),
                json!({
                    "budget": rec.budget,
                    "labeled_fraction": frac,
                    "accuracy": r.metrics.accuracy,
                    "macro_f1": r.metrics.macro_f1,
                    "auc": r.metrics.auc,
                    "mean_u_correct": rec.mean_u_correct,
                    "mean_u_incorrect": rec.mean_u_incorrect,
                }),
            );
        }
        let records: Vec<_> = run.rounds.iter().map(|r| &r.record).collect();
        dir.write_json("rounds.json", &records)?;
        dir.write("rounds.csv", csv)?;
        dir.write_json(
            "metrics.json",
            &json!({
                "stage": name,
                "seed": cfg.seed,
                "selection": cfg.ualoop.selection,
                "pool_size": train.len(),
                "final": run.rounds.last().map(|r| &r.metrics),
                "by_round": by_round,
            }),
        )?;
        dir.write_json(
            "report.json",
            &json!({ "warnings": run.warnings, "labeled_ids": run.state.labeled_ids }),
        )
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

fn load_bag_dir(dir: &Path) -> CliResult<Vec<Bag>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bag"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::new("E_DATA", format!("no .bag files in {}", dir.display())));
    }
    files.iter().map(|p| load_bag(p).map_err(CliError::from)).collect()
}

fn cache_bags(dir: &StageDir, sub: &str, bags: &[Bag]) -> CliResult<()> {
    std::fs::create_dir_all(dir.path(sub)).map_err(|e| CliError::io(&dir.path(sub), e))?;
    for (i, b) in bags.iter().enumerate() {
        let safe: String = b
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        save_bag(b, &dir.path(&format!("{sub}/{i:05}-{safe}.bag")))?;
    }
    Ok(())
}

/// Newest finished classifier or encoder stage in the run directory.
fn latest_model_stage(cfg: &RunConfig) -> Option<&'static str> {
    ["distill", "finetune", "pretrain"]
        .into_iter()
        .find(|s| cfg.out.join(s).join(crate::rundir::MANIFEST).exists())
}

pub fn cmd_mil(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let mut dir = StageDir::create(&cfg.out, "mil")?;
    let m = &cfg.mil;
    let mut encoder = None;
    if m.bags_dir.is_none() && m.source == BagSource::Encoder {
        let upstream = match (checkpoint, latest_model_stage(cfg)) {
            (Some(_), _) => "",
            (None, Some(s)) => s,
            (None, None) => {
                return abandon(dir, CliError::new("E_MISSING_INPUT", "encoder bags need a trained checkpoint"));
            }
        };
        match input_checkpoint(cfg, &mut dir, checkpoint, upstream) {
            Ok(c) => encoder = Some(c),
            Err(e) => return abandon(dir, e),
        }
    }
    let (dir, fingerprint) = guarded(dir, |dir| {
        let (train, test) = if let Some(bd) = &m.bags_dir {
            let (tr, te) = (bd.join("train"), bd.join("test"));
            (load_bag_dir(&tr)?, load_bag_dir(&te)?)
        } else if let Some(ckpt) = &encoder {
            let model = ckpt.model()?;
            let mut patches = cfg.dataset.synthetic.clone();
            patches.class_count = 2;
            let tr = featurize(&model, &generate_bag_images(&m.bags, &patches, 2 * cfg.seed)?)?;
            let te = featurize(&model, &generate_bag_images(&m.bags, &patches, 2 * cfg.seed + 1)?)?;
            cache_bags(dir, "bags/train", &tr)?;
            cache_bags(dir, "bags/test", &te)?;
            (tr, te)
        } else {
            (generate_bags(&m.bags, 2 * cfg.seed)?, generate_bags(&m.bags, 2 * cfg.seed + 1)?)
        };
        let run = train_mil(&train, &test, &m.train, cfg.seed)?;
        dir.write_json("model.json", &run.net)?;
        let mut rows = Vec::new();
        let mut preds = String::from("bag_id,label,probability\n");
        for (b, p) in test.iter().zip(&run.eval_probs) {
            rows.extend(attention_map(&run.net, b, m.train.pseudo_bags, cfg.seed)?);
            let _ = writeln!(preds, "{},{},{}", b.id, u8::from(b.label), p);
        }
        let mut csv = Vec::new();
        write_attention_csv(&rows, &mut csv).map_err(|e| CliError::new("E_IO", e.to_string()))?;
        dir.write("attention.csv", csv)?;
        dir.write("predictions.csv", preds)?;
        dir.write_json(
            "metrics.json",
            &json!({
                "stage": "mil",
                "seed": cfg.seed,
                "split": "test",
                "metrics": run.report,
                "final_loss": run.loss_curve.last(),
                "loss_curve": run.loss_curve,
            }),
        )?;
        dir.write_json("report.json", &json!({ "warnings": run.warnings, "train_bags": train.len(), "test_bags": test.len() }))?;
        let mut h = sha2::Sha256::default();
        for b in train.iter().chain(&test) {
            sha2::Digest::update(&mut h, b.id.as_bytes());
            sha2::Digest::update(&mut h, b"\n");
        }
        Ok(hex::encode(sha2::Digest::finalize(h)))
    })?;
    dir.finish(cfg, Some(fingerprint))
}

/// Picks the checkpoint for `eval`/`export`: an explicit path, a named
/// stage, or the newest finished one.
fn pick_source<'a>(cfg: &RunConfig, stage: Option<&'a str>, checkpoint: Option<&'a Path>) -> CliResult<(String, Option<&'a str>)> {
    match (stage, checkpoint) {
        (Some(_), Some(_)) => Err(CliError::new("E_ARG", "give either --stage or --checkpoint, not both")),
        (None, Some(_)) => Ok(("checkpoint".into(), None)),
        (Some(s), None) => Ok((s.to_string(), Some(s))),
        (None, None) => match latest_model_stage(cfg) {
            Some(s) => Ok((s.to_string(), Some(s))),
            None => Err(CliError::new("E_MISSING_INPUT", format!("no finished stage in {}", cfg.out.display()))),
        },
    }
}

pub fn cmd_eval(cfg: &RunConfig, stage: Option<&str>, checkpoint: Option<&Path>, split: &str) -> CliResult<PathBuf> {
    let (label, upstream) = pick_source(cfg, stage, checkpoint)?;
    let mut dir = StageDir::create(&cfg.out, &format!("eval-{label}-{split}"))?;
    let ckpt = match input_checkpoint(cfg, &mut dir, checkpoint, upstream.unwrap_or("")) {
        Ok(c) => c,
        Err(e) => return abandon(dir, e),
    };
    if ckpt.head() == HeadKind::Projection {
        return abandon(dir, CliError::new("E_STAGE_ORDER", "evaluation needs a classifier checkpoint"));
    }
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let ds = require_nonempty(splits.get(split)?, split)?;
        let model = ckpt.model()?;
        write_eval(dir, cfg, &model, ds, split, None)?;
        let mut csv = String::from("id,label,prediction,uncertainty");
        for k in 0..model.output_dim() {
            let _ = write!(csv, ",p{k}");
        }
        csv.push('\n');
        let (scores, unc): (Vec<Vec<f64>>, Option<Vec<f64>>) = if ckpt.head() == HeadKind::Evidential {
            let ops = predict_opinions(&model, ds)?;
            (ops.iter().map(|o| o.mean.clone()).collect(), Some(ops.iter().map(|o| o.uncertainty).collect()))
        } else {
            (predict(&model, ds)?, None)
        };
        for (i, (item, s)) in ds.items().iter().zip(&scores).enumerate() {
            let pred = s
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > s[best] { k } else { best });
            let _ = write!(
                csv,
                "{},{},{},{}",
                item.id,
                item.label.map(|l| l.to_string()).unwrap_or_default(),
                pred,
                unc.as_ref().map(|u| u[i].to_string()).unwrap_or_default()
            );
            for v in s {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        dir.write("predictions.csv", csv)
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

pub fn cmd_export(cfg: &RunConfig, stage: Option<&str>, checkpoint: Option<&Path>, split: &str, pca: bool) -> CliResult<PathBuf> {
    let (label, upstream) = pick_source(cfg, stage, checkpoint)?;
    let mut dir = StageDir::create(&cfg.out, &format!("export-{label}-{split}"))?;
    let ckpt = match input_checkpoint(cfg, &mut dir, checkpoint, upstream.unwrap_or("")) {
        Ok(c) => c,
        Err(e) => return abandon(dir, e),
    };
    let splits = match load_splits(cfg) {
        Ok(s) => s,
        Err(e) => return abandon(dir, e),
    };
    let (dir, _) = guarded(dir, |dir| {
        let ds = require_nonempty(splits.get(split)?, split)?;
        let mut buf = Vec::new();
        export_embeddings(&ckpt.model()?, ds, &mut buf, pca)?;
        dir.write("embeddings.tsv", buf)
    })?;
    dir.finish(cfg, Some(splits.fingerprint))
}

fn abandon<T>(dir: StageDir, e: CliError) -> CliResult<T> {
    let _ = std::fs::remove_dir_all(dir.path(""));
    Err(e)
}
