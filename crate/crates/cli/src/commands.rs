use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use malm::checkpoint;
use malm::config::RunConfig;
use malm::data::{
    generate_synthetic, load_groundtruth, load_image, load_recipe1m_subset, write_dataset, Dataset,
    ImageTensor, RawRecipe, RecipeDoc, SyntheticSpec, CLASS_NAMES,
};
use malm::evaluation::{
    attention_localization, component_variants, evaluate, mask_ratio_variants, run_ablation, top_k,
    Direction, RetrievalReport,
};
use malm::training::{train, TrainOutcome};
use malm::{Malm, MalmConfig, MalmError};
use serde_json::json;

/// A fresh `<root>/<timestamp>` directory holding the resolved config.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(root: &Path, rc: &RunConfig) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut path = root.join(&stamp);
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{n}"));
            n += 1;
        }
        fs::create_dir(&path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join("config.resolved"), rc.render())?;
        log::info!("run directory {}", path.display());
        Ok(Self { path })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.file(name), text).with_context(|| format!("writing {name}"))
    }

    /// `<stem>.json` and `<stem>.txt`.
    fn report(&self, stem: &str, value: &serde_json::Value, text: &str) -> Result<()> {
        self.write(
            &format!("{stem}.json"),
            &serde_json::to_string_pretty(value)?,
        )?;
        self.write(&format!("{stem}.txt"), &format!("{text}\n"))
    }
}

pub fn dispatch(name: &str, m: &ArgMatches, rc: RunConfig) -> Result<bool> {
    let root = m.get_one::<PathBuf>("run-root").expect("defaulted");
    let run = RunDir::create(root, &rc)?;
    let cfg = rc.config.clone();
    match name {
        "generate-data" => generate_data(&cfg, &run),
        "train" => train_cmd(&cfg, m, &run),
        "eval" => eval_cmd(m, &run),
        "ablate" => ablate(&cfg, m, &run),
        "retrieve" => retrieve(m, &run),
        "check" => check(&cfg, m, &run),
        other => bail!("unknown command `{other}`"),
    }
}

/// Train and test splits of the synthetic set a config describes.
fn synthetic_splits(cfg: &MalmConfig) -> malm::Result<(Dataset, Dataset)> {
    let spec = SyntheticSpec::from_config(cfg);
    let set = generate_synthetic(&spec, cfg.data.synth_pairs + cfg.data.synth_test_pairs)?;
    Ok(set.dataset.split_tail(cfg.data.synth_test_pairs))
}

fn generate_data(cfg: &MalmConfig, run: &RunDir) -> Result<bool> {
    let spec = SyntheticSpec::from_config(cfg);
    let n_train = cfg.data.synth_pairs;
    let set = generate_synthetic(&spec, n_train + cfg.data.synth_test_pairs)?;
    for (split, range) in [("train", 0..n_train), ("test", n_train..set.raw.len())] {
        let raw = &set.raw[range.clone()];
        let pairs = &set.dataset.pairs[range];
        let images: Vec<&ImageTensor> = pairs.iter().map(|p| &p.image).collect();
        let gt = raw
            .iter()
            .zip(pairs)
            .filter_map(|(r, p)| p.groundtruth.clone().map(|g| (r.id.clone(), g)))
            .collect();
        write_dataset(&run.file(split), raw, &images, Some(&gt))?;
    }
    println!(
        "wrote {n_train} train and {} test pairs under {}",
        cfg.data.synth_test_pairs,
        run.path.display()
    );
    Ok(true)
}

/// Loads a dataset directory. With a vocabulary the recipes are encoded
/// against it; `groundtruth.json`, when present, enables localization.
fn load_dir(dir: &Path, image_size: usize, vocab: Option<malm::data::Vocab>) -> Result<Dataset> {
    let report = load_recipe1m_subset(&dir.join("dataset.json"), dir, image_size)
        .with_context(|| format!("loading {}", dir.display()))?;
    if report.unpaired > 0 {
        log::info!("{} records without an image were dropped", report.unpaired);
    }
    let ids: Vec<String> = report.records.iter().map(|(r, _)| r.id.clone()).collect();
    let mut data = Dataset::from_records(report.records, vocab)?;
    let gt_path = dir.join("groundtruth.json");
    if gt_path.exists() {
        let gt = load_groundtruth(&gt_path)?;
        let mut max_class = 0;
        for (pair, id) in data.pairs.iter_mut().zip(&ids) {
            pair.groundtruth = gt.get(id).cloned();
            let top = pair.groundtruth.iter().flat_map(|g| g.values()).max();
            max_class = max_class.max(top.map_or(0, |c| c + 1));
        }
        let n = max_class.min(CLASS_NAMES.len());
        data.class_tokens = Some(CLASS_NAMES[..n].iter().map(|w| data.vocab.id(w)).collect());
    }
    Ok(data)
}

fn write_metrics(run: &RunDir, out: &TrainOutcome) -> Result<()> {
    let mut w = BufWriter::new(File::create(run.file("metrics.jsonl"))?);
    for r in &out.metrics {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    let mut w = BufWriter::new(File::create(run.file("validation.jsonl"))?);
    for r in &out.validation {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn both_directions(model: &Malm, data: &Dataset) -> Result<Vec<RetrievalReport>> {
    [Direction::ImageToRecipe, Direction::RecipeToImage]
        .into_iter()
        .map(|d| Ok(evaluate(model, data, d)?))
        .collect()
}

fn retrieval_text(reports: &[RetrievalReport]) -> String {
    reports
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn train_cmd(cfg: &MalmConfig, m: &ArgMatches, run: &RunDir) -> Result<bool> {
    let (train_set, val) = match m.get_one::<PathBuf>("data") {
        Some(dir) => {
            let t = load_dir(dir, cfg.data.image_size, None)?;
            let v = match m.get_one::<PathBuf>("val") {
                Some(vd) => Some(load_dir(vd, cfg.data.image_size, Some(t.vocab.clone()))?),
                None => None,
            };
            (t, v)
        }
        None => {
            let (t, v) = synthetic_splits(cfg)?;
            (t, Some(v))
        }
    };
    if let Some(v) = &val {
        if v.len() < 2 {
            bail!("validation set of {} pairs is too small", v.len());
        }
    }
    log::info!("training on {} pairs", train_set.len());
    let model = Malm::new(cfg.clone(), train_set.vocab.clone())?;
    let every = 25;
    let outcome = train(model, &train_set, val.as_ref(), &mut |r| {
        if r.step % every == 0 {
            log::info!(
                "step {} epoch {}: L {:.4} itc {:.4} gc {:.4} lc {:.4} dist {:.4}",
                r.step,
                r.epoch,
                r.total,
                r.itc,
                r.gc,
                r.lc,
                r.dist
            );
        }
    });
    let out = match outcome {
        Ok(o) => o,
        Err(MalmError::Diverged {
            step,
            component,
            last_good,
        }) => {
            checkpoint::save(&last_good, &run.file("last_good.ckpt.json"))?;
            bail!("training diverged at step {step} (`{component}`); last good parameters saved");
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics(run, &out)?;
    checkpoint::save(&out.last, &run.file("last.ckpt.json"))?;
    checkpoint::save(&out.best, &run.file("best.ckpt.json"))?;
    let mut summary = json!({
        "steps": out.steps,
        "best_epoch": out.best_epoch,
        "final_loss": out.metrics.last().map(|r| r.total),
    });
    let mut text = format!("{} steps", out.steps);
    if let Some(v) = &val {
        let reports = both_directions(&out.best, v)?;
        text = format!("{text}\n\n{}", retrieval_text(&reports));
        summary["retrieval"] = serde_json::to_value(&reports)?;
    }
    run.report("train_report", &summary, &text)?;
    println!("{text}");
    Ok(true)
}

fn eval_cmd(m: &ArgMatches, run: &RunDir) -> Result<bool> {
    let ckpt = m.get_one::<PathBuf>("checkpoint").expect("required");
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dir = m.get_one::<PathBuf>("data").expect("required");
    let data = load_dir(dir, model.cfg.data.image_size, Some(model.vocab.clone()))?;
    let reports = both_directions(&model, &data)?;
    let mut text = retrieval_text(&reports);
    let mut value = json!({ "retrieval": reports });
    if data.class_tokens.is_some() && model.matching_enabled() {
        let loc = attention_localization(&model, &data, 200, model.cfg.seed)?;
        text = format!(
            "{text}\n\nlocalization {:.4} (chance {:.4}, null 95th percentile {:.4}, p = {:.3})",
            loc.score, loc.chance, loc.null_p95, loc.p_value
        );
        value["localization"] = serde_json::to_value(&loc)?;
    }
    run.report("eval_report", &value, &text)?;
    println!("{text}");
    Ok(true)
}

fn ablate(cfg: &MalmConfig, m: &ArgMatches, run: &RunDir) -> Result<bool> {
    let seeds: Vec<u64> = m
        .get_many::<u64>("seeds")
        .expect("defaulted")
        .copied()
        .collect();
    let which = m.get_one::<String>("table").expect("defaulted").as_str();
    let mut tables = Vec::new();
    if which != "mask-ratio" {
        tables.push(("components", component_variants()));
    }
    if which != "components" {
        tables.push(("mask_ratio", mask_ratio_variants()));
    }
    let mut value = json!({});
    let mut text = String::new();
    for (name, variants) in tables {
        let table = run_ablation(cfg, &variants, &seeds, &mut |c| {
            log::info!("{name}: seed {} mask_ratio {}", c.seed, c.mask.ratio);
            let (tr, te) = synthetic_splits(c)?;
            let model = Malm::new(c.clone(), tr.vocab.clone())?;
            let out = train(model, &tr, None, &mut |_| {})?;
            evaluate(&out.last, &te, Direction::ImageToRecipe)
        });
        value[name] = serde_json::to_value(&table)?;
        text.push_str(&format!(
            "{name} (image→recipe, seeds {seeds:?})\n{table}\n"
        ));
    }
    run.report("ablation", &value, text.trim_end())?;
    print!("{text}");
    Ok(true)
}

fn read_query_recipe(path: &Path) -> Result<RawRecipe> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| MalmError::Schema {
        field: "<root>".into(),
        reason: e.to_string(),
    })?;
    let mut obj = v;
    // the query needs no image; fill the optional field if absent
    if let Some(o) = obj.as_object_mut() {
        o.entry("image").or_insert(serde_json::Value::Null);
        if !o.contains_key("id") {
            o.insert("id".into(), json!("query"));
        }
    }
    Ok(RawRecipe::from_value(&obj, 0)?)
}

fn retrieve(m: &ArgMatches, run: &RunDir) -> Result<bool> {
    let ckpt = m.get_one::<PathBuf>("checkpoint").expect("required");
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let corpus_dir = m.get_one::<PathBuf>("corpus").expect("required");
    let k = *m.get_one::<usize>("k").expect("defaulted");
    let corpus = load_dir(
        corpus_dir,
        model.cfg.data.image_size,
        Some(model.vocab.clone()),
    )?;
    let ids: Vec<String> = corpus.pairs.iter().map(|p| p.recipe.id.clone()).collect();

    let (query, emb, side) = if let Some(p) = m.get_one::<PathBuf>("query-recipe") {
        let raw = read_query_recipe(p)?;
        let doc = RecipeDoc::from_raw(&raw, &model.vocab)?;
        let q = model.embed_recipes(&[&doc])?;
        let images: Vec<&ImageTensor> = corpus.pairs.iter().map(|p| &p.image).collect();
        (q, model.embed_images(&images)?, "images")
    } else {
        let p = m
            .get_one::<PathBuf>("query-image")
            .expect("one query is required");
        let img = load_image(p, model.cfg.data.image_size)?;
        let q = model.embed_images(&[&img])?;
        let docs: Vec<&RecipeDoc> = corpus.pairs.iter().map(|p| &p.recipe).collect();
        (q, model.embed_recipes(&docs)?, "recipes")
    };
    let hits = top_k(query.row(0), &emb, k);
    let note = (k > ids.len()).then(|| {
        format!(
            "k = {k} exceeds the corpus of {}; returning the full ranking",
            ids.len()
        )
    });
    if let Some(n) = &note {
        log::warn!("{n}");
    }
    let list: Vec<serde_json::Value> = hits
        .iter()
        .enumerate()
        .map(|(r, (i, s))| json!({ "rank": r + 1, "id": ids[*i], "score": s }))
        .collect();
    let mut text = format!("top {} of {} corpus {side}", hits.len(), ids.len());
    for (r, (i, s)) in hits.iter().enumerate() {
        text.push_str(&format!("\n{:>4}  {:<24} {s:.4}", r + 1, ids[*i]));
    }
    if let Some(n) = &note {
        text.push_str(&format!("\nnote: {n}"));
    }
    run.report(
        "retrieval",
        &json!({ "k": k, "results": list, "note": note }),
        &text,
    )?;
    println!("{text}");
    Ok(true)
}

fn check(cfg: &MalmConfig, m: &ArgMatches, run: &RunDir) -> Result<bool> {
    use malm::checks;
    let seed = cfg.seed;
    let quick = m.get_flag("quick");
    let results = if quick {
        let fx = checks::tiny_fixture(seed)?;
        let mut r = checks::gradient_checks(&fx, 8, seed)?;
        r.extend(checks::oracle_checks(100, seed)?);
        r.extend(checks::distillation_checks(&fx, seed)?);
        r.extend(checks::invariant_checks(&fx, seed)?);
        r
    } else {
        checks::run_all(seed)?
    };
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!(
            "{} {:<44} {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    text.push_str(&format!("{} checks, {failed} failed", results.len()));
    let value = serde_json::Value::Array(
        results
            .iter()
            .map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail }))
            .collect(),
    );
    run.report("check", &value, &text)?;
    println!("{text}");
    Ok(failed == 0)
}
