//! Subcommand implementations. Each one records a [`RunManifest`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use r2t_core::corpus::{read_jsonl, read_sentences, write_jsonl, write_plain_text, Sentence, TaggedSentence, Tagset, OTHER_TAG};
use r2t_core::eval::{align_corpora, macro_f1, span_f1, summarize_seeds, MeanStd, SpanReport, TagReport};
use r2t_core::loss::LossMode;
use r2t_core::neural::{load_checkpoint, load_embeddings, save_checkpoint, CharVocab, EmbeddingTable, Tagger};
use r2t_core::rules::{load_rules, RuleSet};
use r2t_core::silver::{generate_silver, summary_path, SilverConfig};
use r2t_core::synth::{Grammar, GrammarSpec, NerSpec, NerTask};
use r2t_core::train::{train_sft, train_unsupervised, write_loss_csv, EpochLog};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{CliError, Command, EvalArgs, RulesCommand, SynthArgs, SynthCommand, TagArgs, Task, TrainArgs, ValidateArgs};

type CliResult<T = ()> = Result<T, CliError>;

pub fn dispatch(command: Command, args: &[String]) -> CliResult {
    match command {
        Command::Rules(RulesCommand::Validate(a)) => rules_validate(&a, args),
        Command::Train(a) => train(&a, args),
        Command::Tag(a) => tag(&a, args),
        Command::Eval(a) => eval(&a, args),
        Command::Synth(SynthCommand::Gen(a)) => synth_gen(&a, args),
        Command::Rerun(a) => rerun(&a.manifest),
    }
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::config(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn rules_validate(a: &ValidateArgs, args: &[String]) -> CliResult {
    let mut manifest = RunManifest::new("rules validate", args, serde_json::json!({}), None);
    manifest.add_input("rules", &a.rules)?;
    let rules = match load_rules(&a.rules) {
        Ok(r) => r,
        Err(r2t_core::Error::Conflict(items)) => {
            println!("invalid: {} conflict(s)", items.len());
            for item in &items {
                println!("  {item}");
            }
            return Err(CliError { code: crate::EXIT_VALIDATION, message: format!("{} has conflicting entries", a.rules.display()) });
        }
        Err(e) => return Err(e.into()),
    };
    println!(
        "valid: {} tags, {} tier-1 words, {} tier-2 words, {} morphological rules",
        rules.tagset().len(),
        rules.tier1_len(),
        rules.tier2_len(),
        rules.morph_rules().len()
    );
    if let Some(corpus) = &a.corpus {
        manifest.add_input("corpus", corpus)?;
        let sentences = read_sentences(corpus)?;
        let report = rules.coverage_report(&sentences);
        let (t1, t2, t3, oov) = report.fractions();
        println!("coverage over {} tokens: tier1 {t1:.4}  tier2 {t2:.4}  tier3 {t3:.4}  oov {oov:.4}", report.total);
    }
    if let Some(path) = &a.manifest {
        manifest.write(path)?;
    }
    Ok(())
}

fn train(a: &TrainArgs, args: &[String]) -> CliResult {
    let cfg = RunConfig::load(&a.config, |k| std::env::var(k).ok())?;
    run_training(&cfg, args)
}

/// Builds a fresh model around the given tag inventory and characters.
fn fresh_tagger(cfg: &RunConfig, tagset: Tagset, chars: CharVocab) -> CliResult<Tagger> {
    let model = cfg.model_config(tagset.len());
    let embeddings = match &cfg.paths.embeddings {
        Some(path) => load_embeddings(path, model.word_emb_dim)?,
        None => {
            log::warn!("no word vectors configured; every word uses the shared unknown vector");
            EmbeddingTable::empty(model.word_emb_dim)
        }
    };
    Ok(Tagger::new(model, tagset, chars, embeddings, cfg.run.seed)?)
}

fn gold_tagset(gold: &[TaggedSentence]) -> CliResult<Tagset> {
    let tags: BTreeSet<&str> = gold.iter().flat_map(|s| s.tags.iter().map(String::as_str)).filter(|t| *t != OTHER_TAG).collect();
    Ok(Tagset::new(&tags.into_iter().collect::<Vec<_>>())?)
}

fn run_training(cfg: &RunConfig, args: &[String]) -> CliResult {
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let paths = &cfg.paths;
    let out_dir = paths.output_dir.clone().expect("validated");
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let mut manifest = RunManifest::new("train", args, config_json, Some(cfg.run.seed));
    for (key, p) in [
        ("rules", &paths.rules),
        ("corpus", &paths.corpus),
        ("gold", &paths.gold),
        ("embeddings", &paths.embeddings),
        ("init_checkpoint", &paths.init_checkpoint),
    ] {
        if let Some(p) = p {
            manifest.add_input(key, p)?;
        }
    }
    let rules = paths.rules.as_ref().map(load_rules).transpose()?;
    let init = paths.init_checkpoint.as_ref().map(load_checkpoint).transpose()?;

    let ckpt_dir = out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let hook = |log: &EpochLog, tagger: &Tagger| save_checkpoint(tagger, ckpt_dir.join(format!("epoch-{:03}.ckpt", log.epoch)));

    let outcome = match cfg.run.mode {
        LossMode::Unsupervised => {
            let rules = rules.as_ref().expect("validated");
            let corpus = read_sentences(paths.corpus.as_ref().expect("validated"))?;
            let tagger = match init {
                Some(t) => t,
                None => fresh_tagger(cfg, rules.tagset().clone(), CharVocab::from_sentences(&corpus))?,
            };
            train_unsupervised(tagger, rules, &corpus, &train_cfg, hook)?
        }
        LossMode::Sft => {
            let gold = read_jsonl(paths.gold.as_ref().expect("validated"))?;
            let tagger = match init {
                Some(t) => t,
                None => {
                    let tagset = match &rules {
                        Some(r) => r.tagset().clone(),
                        None => gold_tagset(&gold)?,
                    };
                    let sentences: Vec<Sentence> = gold.iter().map(TaggedSentence::sentence).collect();
                    fresh_tagger(cfg, tagset, CharVocab::from_sentences(&sentences))?
                }
            };
            train_sft(tagger, &gold, rules.as_ref(), &train_cfg, hook)?
        }
    };

    let model_path = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.tagger, &model_path)?;
    let csv_path = out_dir.join("loss.csv");
    write_loss_csv(&outcome.log, &csv_path)?;
    manifest.add_output("model", &model_path)?;
    manifest.add_output("loss_csv", &csv_path)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(last) = outcome.log.last() {
        println!("trained {} epochs; final loss {:.6}; model at {}", last.epoch, last.loss.total, model_path.display());
    }
    manifest.write(&out_dir.join("manifest.json"))
}

fn tag(a: &TagArgs, args: &[String]) -> CliResult {
    let config = SilverConfig::new(a.threshold)?;
    let mut manifest = RunManifest::new("tag", args, serde_json::to_value(config).expect("config serializes"), None);
    manifest.add_input("checkpoint", &a.checkpoint)?;
    manifest.add_input("input", &a.input)?;
    let tagger = load_checkpoint(&a.checkpoint)?;
    let summary = generate_silver(&tagger, &config, &a.input, &a.output)?;
    manifest.add_output("silver", &a.output)?;
    manifest.add_output("summary", &summary_path(&a.output))?;
    println!(
        "tagged {} sentences ({} tokens); OTHER fraction {:.4} at threshold {}",
        summary.sentences, summary.tokens, summary.other_fraction, summary.confidence_threshold
    );
    let path = a.manifest.clone().unwrap_or_else(|| a.output.with_extension("manifest.json"));
    manifest.write(&path)
}

/// A prediction file, or every `*.jsonl` in a directory (sorted by name).
fn prediction_files(pred: &Path) -> CliResult<Vec<PathBuf>> {
    if !pred.is_dir() {
        return Ok(vec![pred.to_path_buf()]);
    }
    let entries = fs::read_dir(pred).map_err(|e| CliError::config(format!("cannot read {}: {e}", pred.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::config(format!("no .jsonl predictions in {}", pred.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pred".into())
}

/// Entity types named by the `B-`/`I-` tags of a corpus.
fn span_types(gold: &[TaggedSentence]) -> Vec<String> {
    let types: BTreeSet<String> = gold
        .iter()
        .flat_map(|s| s.tags.iter())
        .filter_map(|t| t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")))
        .map(str::to_string)
        .collect();
    types.into_iter().collect()
}

fn eval(a: &EvalArgs, args: &[String]) -> CliResult {
    let mut manifest = RunManifest::new("eval", args, serde_json::json!({ "task": format!("{:?}", a.task).to_lowercase() }), None);
    manifest.add_input("gold", &a.gold)?;
    let gold = read_jsonl(&a.gold)?;
    let files = prediction_files(&a.pred)?;
    let mut preds = Vec::with_capacity(files.len());
    for f in &files {
        manifest.add_input(&format!("pred:{}", stem(f)), f)?;
        let pred = read_jsonl(f)?;
        align_corpora(&gold, &pred).map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
        preds.push(pred);
    }
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
    }
    let mut outputs: Vec<(String, PathBuf, String)> = Vec::new();
    let multi = files.len() > 1 || a.pred.is_dir();
    match a.task {
        Task::Pos => {
            let tagset = match &a.tagset {
                Some(tags) => Tagset::new(tags)?,
                None => gold_tagset(&gold)?,
            };
            let mut reports: Vec<TagReport> = Vec::new();
            for pred in &preds {
                let (g, p) = align_corpora(&gold, pred)?;
                reports.push(macro_f1(&g, &p, &tagset)?);
            }
            if multi {
                let summary = summarize_seeds(&reports)?;
                print!("{}", summary.render());
                for (f, r) in files.iter().zip(&reports) {
                    outputs.push((format!("report:{}", stem(f)), format!("{}.report.json", stem(f)).into(), to_json(r)));
                    outputs.push((format!("confusion:{}", stem(f)), format!("{}.confusion.csv", stem(f)).into(), r.confusion.to_csv()));
                }
                outputs.push(("summary".into(), "summary.json".into(), to_json(&summary)));
                outputs.push(("summary_text".into(), "summary.txt".into(), summary.render()));
            } else {
                let r = &reports[0];
                let text = format!("{}\n{}", r.render(), r.confusion.render_heatmap());
                print!("{text}");
                outputs.push(("report".into(), "report.json".into(), to_json(r)));
                outputs.push(("report_text".into(), "report.txt".into(), text));
                outputs.push(("confusion".into(), "confusion.csv".into(), r.confusion.to_csv()));
            }
        }
        Task::Ner => {
            let types = match &a.tagset {
                Some(t) => t.clone(),
                None => span_types(&gold),
            };
            let gold_tags: Vec<Vec<&str>> = gold.iter().map(|s| s.tags.iter().map(String::as_str).collect()).collect();
            let mut reports: Vec<SpanReport> = Vec::new();
            for pred in &preds {
                let pred_tags: Vec<Vec<&str>> = pred.iter().map(|s| s.tags.iter().map(String::as_str).collect()).collect();
                reports.push(span_f1(&gold_tags, &pred_tags, Some(&types))?);
            }
            if multi {
                let summary = NerSeedSummary::of(&reports);
                let text = summary.render();
                print!("{text}");
                for (f, r) in files.iter().zip(&reports) {
                    outputs.push((format!("report:{}", stem(f)), format!("{}.report.json", stem(f)).into(), to_json(r)));
                }
                outputs.push(("summary".into(), "summary.json".into(), to_json(&summary)));
                outputs.push(("summary_text".into(), "summary.txt".into(), text));
            } else {
                let text = reports[0].render();
                print!("{text}");
                outputs.push(("report".into(), "report.json".into(), to_json(&reports[0])));
                outputs.push(("report_text".into(), "report.txt".into(), text));
            }
        }
    }
    if let Some(dir) = &a.out_dir {
        for (key, name, content) in &outputs {
            let path = dir.join(name);
            write_text(&path, content)?;
            manifest.add_output(key, &path)?;
        }
    }
    match (&a.manifest, &a.out_dir) {
        (Some(path), _) => manifest.write(path),
        (None, Some(dir)) => manifest.write(&dir.join("manifest.json")),
        (None, None) => Ok(()),
    }
}

/// Span F1 across seeds: mean ± sample standard deviation.
#[derive(Debug, Serialize)]
struct NerSeedSummary {
    runs: usize,
    per_type: BTreeMap<String, MeanStd>,
    micro_f1: MeanStd,
}

impl NerSeedSummary {
    fn of(reports: &[SpanReport]) -> Self {
        let mut per_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in reports {
            for (k, s) in &r.per_type {
                per_type.entry(k.clone()).or_default().push(s.f1);
            }
        }
        Self {
            runs: reports.len(),
            per_type: per_type.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect(),
            micro_f1: MeanStd::of(&reports.iter().map(|r| r.micro.f1).collect::<Vec<_>>()),
        }
    }

    fn render(&self) -> String {
        let mut out = format!("{:<9} {:>17}   ({} runs)\n", "type", "span f1", self.runs);
        for (k, v) in &self.per_type {
            out.push_str(&format!("{k:<9} {:>17}\n", v.to_string()));
        }
        out.push_str(&format!("{:<9} {:>17}\n", "micro", self.micro_f1.to_string()));
        out
    }
}

fn synth_gen(a: &SynthArgs, args: &[String]) -> CliResult {
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(CliError::config(format!("invalid sentence length range {}..={}", a.min_len, a.max_len)));
    }
    if !(0.0..=1.0).contains(&a.coverage) {
        return Err(CliError::config(format!("coverage must lie in [0, 1], got {}", a.coverage)));
    }
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<GrammarSpec>(&text).map_err(|e| CliError::config(format!("invalid grammar spec: {e}")))?
        }
        None => GrammarSpec::pos_default(),
    };
    spec.seed = spec.seed.wrapping_add(a.seed);
    if let Some(x) = a.ambiguity {
        spec.ambiguity_fraction = x;
    }
    let config = serde_json::json!({
        "task": format!("{:?}", a.task).to_lowercase(),
        "grammar": spec,
        "sentences": a.sentences,
        "test_sentences": a.test_sentences,
        "length": [a.min_len, a.max_len],
        "coverage": a.coverage,
        "embedding_dim": a.embedding_dim,
        "signal": a.signal,
    });
    let mut manifest = RunManifest::new("synth gen", args, config, Some(a.seed));
    if let Some(p) = &a.spec {
        manifest.add_input("spec", p)?;
    }
    let grammar = Grammar::generate(spec.clone())?;
    let range = (a.min_len, a.max_len);
    // Distinct streams for the two splits, the rules and the vectors.
    let (s_train, s_test, s_rules, s_emb) = (a.seed.wrapping_mul(4), a.seed.wrapping_mul(4) + 1, a.seed.wrapping_mul(4) + 2, a.seed.wrapping_mul(4) + 3);
    let (train, test, rules, embeddings) = match a.task {
        Task::Pos => (
            grammar.sample_corpus(a.sentences, range, s_train)?,
            grammar.sample_corpus(a.test_sentences, range, s_test)?,
            grammar.rules_file(a.coverage, s_rules)?,
            grammar.embeddings(a.embedding_dim, a.signal, s_emb),
        ),
        Task::Ner => {
            let ner = NerTask::new(grammar, NerSpec { seed: NerSpec::default().seed.wrapping_add(a.seed), ..NerSpec::default() })?;
            (
                ner.sample_corpus(a.sentences, range, s_train)?,
                ner.sample_corpus(a.test_sentences, range, s_test)?,
                ner.rules_file(),
                ner.embeddings(a.embedding_dim, a.signal, s_emb),
            )
        }
    };
    let rules = RuleSet::from_file(rules)?;

    create_dir(&a.out_dir)?;
    let dir = &a.out_dir;
    let files = [
        ("train", dir.join("train.jsonl")),
        ("train_text", dir.join("train.txt")),
        ("test", dir.join("test.jsonl")),
        ("rules", dir.join("rules.json")),
        ("embeddings", dir.join("embeddings.vec")),
        ("spec", dir.join("spec.json")),
    ];
    write_jsonl(&train, &files[0].1)?;
    write_plain_text(&train.iter().map(TaggedSentence::sentence).collect::<Vec<_>>(), &files[1].1)?;
    write_jsonl(&test, &files[2].1)?;
    rules.save(&files[3].1)?;
    embeddings.save(&files[4].1)?;
    write_text(&files[5].1, &to_json(&spec))?;
    for (key, path) in &files {
        manifest.add_output(key, path)?;
    }
    let tokens: usize = train.iter().map(TaggedSentence::len).sum();
    println!(
        "wrote {} training sentences ({tokens} tokens), {} test sentences, {} tags to {}",
        train.len(),
        test.len(),
        rules.tagset().len(),
        dir.display()
    );
    manifest.write(&dir.join("manifest.json"))
}

/// Checks the recorded inputs, then runs the recorded command again.
/// Training uses the configuration embedded in the manifest rather than
/// re-reading the run file.
fn rerun(path: &Path) -> CliResult {
    let manifest = RunManifest::read(path)?;
    manifest.verify_inputs()?;
    if manifest.subcommand == "train" {
        let cfg: RunConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| CliError::config(format!("manifest holds an invalid run config: {e}")))?;
        return run_training(&cfg, &manifest.args);
    }
    let mut argv = vec!["r2t".to_string()];
    argv.extend(manifest.args.iter().cloned());
    let cli = <crate::Cli as clap::Parser>::try_parse_from(&argv)
        .map_err(|e| CliError::config(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::config("a manifest cannot record a rerun"));
    }
    dispatch(cli.command, &manifest.args)
}
