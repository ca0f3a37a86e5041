//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use madation::checkpoint::Checkpoint;
use madation::data::synth::{gen_benchmark, BenchmarkConfig};
use madation::data::{load_examples, Example, SampleManifest};
use madation::metrics::{det_csv, det_curve, det_svg, report, Report, ScoreSet};
use madation::model::MadModel;
use madation::nn::{derive_seed, Module};
use madation::training::{log_csv, train_with, Regime, TrainConfig};
use madation::vit::{VitBackbone, VitConfig};
use madation::zero_shot::{ti_score, LabelEmbeddings};
use madation::{Error, Label, Result};
use rayon::prelude::*;

use crate::config::{key, Key, RunConfig};

// seed streams derived from the run seed
const HEAD_STREAM: u64 = 1;
const LORA_STREAM: u64 = 2;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const GEN_DATA: &[Key] = &[
    key("out", "", "output directory"),
    key("n_identities", "64", "identities over both splits"),
    key("images_per_identity", "16", "bona-fide images per identity"),
    key("morph_fraction", "0.375", "share of morphs in each split"),
    key("resolution", "32", "image side in pixels"),
    key("alpha", "0.5", "morph blend weight"),
];

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let config = BenchmarkConfig {
        n_identities: cfg.get("n_identities")?,
        images_per_identity: cfg.get("images_per_identity")?,
        morph_fraction: cfg.get("morph_fraction")?,
        resolution: cfg.get("resolution")?,
        alpha: cfg.get("alpha")?,
        seed: cfg.get("seed")?,
    };
    let bench = gen_benchmark(&config, &out)?;
    cfg.write_to(&out)?;
    for split in [&bench.train, &bench.test] {
        let m = &split.manifest;
        println!(
            "{}: {} identities, {} bonafide, {} attack -> {}",
            split.name,
            split.identities.len(),
            m.count(Label::BonaFide),
            m.count(Label::Attack),
            out.join(&split.name).join("manifest.csv").display()
        );
    }
    Ok(())
}

pub const TRAIN: &[Key] = &[
    key("data", "", "training manifest"),
    key("out", "", "output directory"),
    key("regime", "MADATION", "FE, VIT_FS or MADATION"),
    key("preset", "desk", "hyper-parameter preset; desk picks desk-<regime>"),
    key("model", "tiny", "backbone shape: tiny, vit-b or vit-l"),
    key("init", "", "backbone checkpoint; random when empty"),
    key("backbone_seed", "1000", "seed of a random backbone"),
    key("save_every", "5", "checkpoint period in epochs, 0 to disable"),
    key("epochs", "", "override preset"),
    key("batch_size", "", "override preset"),
    key("model_lr", "", "override preset"),
    key("head_lr", "", "override preset"),
    key("weight_decay", "", "override preset"),
    key("lora_rank", "", "override preset"),
    key("lora_alpha", "", "override preset"),
    key("lora_dropout", "", "override preset"),
    key("flip_prob", "", "override preset"),
];

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let regime: Regime = cfg.get("regime")?;
    let preset = cfg.str("preset")?;
    let mut tc = if preset == "desk" {
        TrainConfig::desk(regime)
    } else {
        TrainConfig::preset(preset)?
    };
    if tc.regime != regime {
        return Err(Error::Config(format!("preset {preset} is for {}, not {regime}", tc.regime)));
    }
    macro_rules! overrides {
        ($($field:ident),*) => {$(
            if let Some(v) = cfg.opt(stringify!($field))? {
                tc.$field = v;
            }
        )*};
    }
    overrides!(epochs, batch_size, model_lr, head_lr, weight_decay, lora_rank, lora_alpha, lora_dropout, flip_prob);
    tc.seed = cfg.get("seed")?;
    tc.deterministic = cfg.get("deterministic")?;
    tc.validate()?;
    Ok(tc)
}

fn initial_model(cfg: &RunConfig, tc: &TrainConfig) -> Result<MadModel> {
    let backbone = if cfg.is_set("init") {
        VitBackbone::load_weights(&cfg.path("init")?)?
    } else {
        VitBackbone::init(VitConfig::preset(cfg.str("model")?)?, cfg.get("backbone_seed")?)?
    };
    let mut model = MadModel::new(backbone, derive_seed(tc.seed, &[HEAD_STREAM]));
    if tc.regime == Regime::Madation {
        model.inject(tc.lora(), derive_seed(tc.seed, &[LORA_STREAM]))?;
    }
    Ok(model)
}

fn model_inputs(manifest: &SampleManifest, config: &VitConfig) -> Result<Vec<Example>> {
    load_examples(manifest, config.image_size, config.channels)
}

fn save_model(model: &MadModel, regime: Regime, epoch: usize, path: &Path) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    ckpt.set_meta("train.regime", regime);
    ckpt.set_meta("train.epoch", epoch);
    ckpt.save(path)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let tc = train_config(cfg)?;
    let mut cfg = cfg.clone();
    cfg.set("epochs", tc.epochs);
    cfg.set("batch_size", tc.batch_size);
    cfg.set("model_lr", tc.model_lr);
    cfg.set("head_lr", tc.head_lr);
    cfg.set("weight_decay", tc.weight_decay);
    cfg.set("lora_rank", tc.lora_rank);
    cfg.set("lora_alpha", tc.lora_alpha);
    cfg.set("lora_dropout", tc.lora_dropout);
    cfg.set("flip_prob", tc.flip_prob);
    let cfg = &cfg;
    let out = cfg.path("out")?;
    let save_every: usize = cfg.get("save_every")?;
    let manifest = SampleManifest::load(&cfg.path("data")?)?;
    let mut model = initial_model(cfg, &tc)?;
    let data = model_inputs(&manifest, model.config())?;
    create_dir(&out)?;
    cfg.write_to(&out)?;

    let mut log = Vec::new();
    let report = train_with(&mut model, &data, &tc, |entry, m, best| {
        println!(
            "epoch {} mean_loss {:.6} train_eer {:.4}",
            entry.epoch, entry.mean_loss, entry.train_eer
        );
        log.push(*entry);
        write(&out.join("train_log.csv"), &log_csv(&log))?;
        if best {
            save_model(m, tc.regime, entry.epoch, &out.join("best.ckpt"))?;
        }
        if save_every > 0 && entry.epoch % save_every == 0 {
            save_model(m, tc.regime, entry.epoch, &out.join(format!("epoch_{:03}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;
    save_model(&model, tc.regime, tc.epochs, &out.join("last.ckpt"))?;
    println!(
        "{} trained {} parameters in {} steps; best epoch {}",
        tc.regime, report.trainable.count, report.steps, report.best_epoch
    );
    Ok(())
}

/// Scores grouped by manifest subset, in manifest order.
fn subset_sets(examples: &[Example], scores: Vec<f64>) -> Result<Vec<(String, ScoreSet)>> {
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for (e, s) in examples.iter().zip(scores) {
        let entry = grouped.entry(e.subset.clone()).or_default();
        entry.0.push(s);
        entry.1.push(e.label);
    }
    grouped
        .into_iter()
        .map(|(name, (s, l))| Ok((name, ScoreSet::new(s, l)?)))
        .collect()
}

fn print_report(r: &Report) {
    println!(
        "{:<16} {:>8}  {:>24}  {:>24}",
        "subset", "EER(%)", "APCER(%)@BPCER 1/10/20", "BPCER(%)@APCER 1/10/20"
    );
    for row in r.all_rows() {
        let pct = |v: [f64; 3]| format!("{:.2}/{:.2}/{:.2}", v[0] * 100.0, v[1] * 100.0, v[2] * 100.0);
        println!(
            "{:<16} {:>8.2}  {:>24}  {:>24}",
            row.name,
            row.eer * 100.0,
            pct(row.apcer_at_bpcer),
            pct(row.bpcer_at_apcer)
        );
    }
}

/// Writes `report.csv`, `report.json` and, per set, DET CSV and SVG.
fn write_report(sets: &[(String, ScoreSet)], out: &Path) -> Result<Report> {
    let r = report(sets)?;
    write(&out.join("report.csv"), &r.to_csv())?;
    write(&out.join("report.json"), &r.to_json())?;
    for (name, set) in sets {
        let points = det_curve(set)?;
        write(&out.join(format!("det_{name}.csv")), &det_csv(&points))?;
        write(&out.join(format!("det_{name}.svg")), &det_svg(name, &points))?;
    }
    print_report(&r);
    Ok(r)
}

fn write_scores(sets: &[(String, ScoreSet)], out: &Path) -> Result<()> {
    for (name, set) in sets {
        set.write_csv(&out.join(format!("scores_{name}.csv")))?;
    }
    Ok(())
}

pub const EVAL: &[Key] = &[
    key("checkpoint", "", "trained model checkpoint"),
    key("manifest", "", "manifest of images to score"),
    key("out", "", "output directory"),
];

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let model = MadModel::load(&cfg.path("checkpoint")?)?;
    let manifest = SampleManifest::load(&cfg.path("manifest")?)?;
    let out = cfg.path("out")?;
    let examples = model_inputs(&manifest, model.config())?;
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let scores = model.scores(&images)?;
    let sets = subset_sets(&examples, scores)?;
    create_dir(&out)?;
    cfg.write_to(&out)?;
    write_scores(&sets, &out)?;
    write_report(&sets, &out)?;
    Ok(())
}

pub const TI: &[Key] = &[
    key("checkpoint", "", "backbone checkpoint; random backbone when empty"),
    key("model", "tiny", "shape of a random backbone"),
    key("backbone_seed", "1000", "seed of a random backbone"),
    key("manifest", "", "manifest of images to score"),
    key("out", "", "output directory"),
    key("labels", "", "label embedding file"),
    key("toy_text", "false", "embed the canonical prompts with the toy text embedder"),
    key("class_means", "", "labelled manifest whose class-mean embeddings become the labels"),
];

fn ti_backbone(cfg: &RunConfig) -> Result<VitBackbone> {
    if !cfg.is_set("checkpoint") {
        return VitBackbone::init(VitConfig::preset(cfg.str("model")?)?, cfg.get("backbone_seed")?);
    }
    let ckpt = Checkpoint::load(&cfg.path("checkpoint")?)?;
    if ckpt.meta.contains_key("lora.rank") {
        return Err(Error::State("zero-shot scoring takes a plain backbone; merge the adapters first".into()));
    }
    VitBackbone::from_checkpoint(&ckpt)
}

fn ti_labels(cfg: &RunConfig, backbone: &VitBackbone) -> Result<LabelEmbeddings> {
    let toy: bool = cfg.get("toy_text")?;
    let sources = [cfg.is_set("labels"), toy, cfg.is_set("class_means")];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(Error::Config(
            "ti needs exactly one of --labels, --toy-text, --class-means".into(),
        ));
    }
    if toy {
        return LabelEmbeddings::toy(backbone.config.embed_dim, cfg.get("seed")?);
    }
    if cfg.is_set("labels") {
        return LabelEmbeddings::load(&cfg.path("labels")?);
    }
    let manifest = SampleManifest::load(&cfg.path("class_means")?)?;
    let examples = model_inputs(&manifest, &backbone.config)?;
    let embeddings = examples
        .par_iter()
        .map(|e| backbone.encode(&e.image, None))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    LabelEmbeddings::class_means(&embeddings, &labels)
}

pub fn ti(cfg: &RunConfig) -> Result<()> {
    let backbone = ti_backbone(cfg)?;
    let labels = ti_labels(cfg, &backbone)?;
    if labels.dim() != backbone.config.embed_dim {
        return Err(Error::dimension("ti labels", &[labels.dim()], &[backbone.config.embed_dim]));
    }
    let manifest = SampleManifest::load(&cfg.path("manifest")?)?;
    let out = cfg.path("out")?;
    let examples = model_inputs(&manifest, &backbone.config)?;
    let scores = examples
        .par_iter()
        .map(|e| ti_score(&e.image, &backbone, &labels))
        .collect::<Result<Vec<_>>>()?;
    let sets = subset_sets(&examples, scores)?;
    create_dir(&out)?;
    cfg.write_to(&out)?;
    labels.save(&out.join("labels.tsv"))?;
    write_scores(&sets, &out)?;
    write_report(&sets, &out)?;
    Ok(())
}

pub const MERGE: &[Key] = &[
    key("checkpoint", "", "checkpoint with adapters"),
    key("out", "", "merged checkpoint path"),
];

pub fn merge(cfg: &RunConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&cfg.path("checkpoint")?)?;
    let merged = MadModel::from_checkpoint(&ckpt)?.merged()?;
    let out = cfg.path("out")?;
    let mut merged_ckpt = merged.to_checkpoint();
    for (k, v) in ckpt.meta.iter().filter(|(k, _)| k.starts_with("train.")) {
        merged_ckpt.set_meta(k.clone(), v);
    }
    merged_ckpt.set_meta("merged", true);
    merged_ckpt.save(&out)?;
    println!("merged {} parameters -> {}", merged.num_params(), out.display());
    Ok(())
}

pub const REPORT: &[Key] = &[
    key("scores", "", "comma-separated score files"),
    key("out", "", "output directory"),
];

/// `scores_<name>.csv` reports as `<name>`, or as `<dir>-<name>` when
/// names would collide.
fn set_names(paths: &[PathBuf]) -> Result<Vec<String>> {
    let name = |p: &Path| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        stem.strip_prefix("scores_").map(str::to_string).unwrap_or(stem)
    };
    let distinct = |names: &[String]| {
        let mut sorted = names.to_vec();
        sorted.sort();
        sorted.windows(2).all(|w| w[0] != w[1])
    };
    let short: Vec<String> = paths.iter().map(|p| name(p)).collect();
    if distinct(&short) {
        return Ok(short);
    }
    let long: Vec<String> = paths
        .iter()
        .zip(&short)
        .map(|(p, n)| {
            let dir = p.parent().and_then(Path::file_name).map(|d| d.to_string_lossy().into_owned());
            match dir {
                Some(d) => format!("{d}-{n}"),
                None => n.clone(),
            }
        })
        .collect();
    if distinct(&long) {
        Ok(long)
    } else {
        Err(Error::Config("score files must have distinct names".into()))
    }
}

pub fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let files: Vec<PathBuf> = cfg.str("scores")?.split(',').map(|s| PathBuf::from(s.trim())).collect();
    let sets = set_names(&files)?
        .into_iter()
        .zip(&files)
        .map(|(name, f)| Ok((name, ScoreSet::read_csv(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.path("out")?;
    create_dir(&out)?;
    cfg.write_to(&out)?;
    write_report(&sets, &out)?;
    Ok(())
}
