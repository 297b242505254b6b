use r2t_core::corpus::{read_jsonl, Sentence, TaggedSentence, OTHER_TAG};
use r2t_core::eval::macro_f1;
use r2t_core::neural::{load_checkpoint, save_checkpoint, CharVocab, ModelConfig, Tagger};
use r2t_core::rules::load_rules;
use r2t_core::silver::{generate_silver, tag_corpus, SilverConfig};
use r2t_core::synth::{Grammar, GrammarSpec};
use r2t_core::train::{no_hook, train_sft, train_unsupervised, TrainConfig};

fn sentences(c: &[TaggedSentence]) -> Vec<Sentence> {
    c.iter().map(TaggedSentence::sentence).collect()
}

fn small_tagger(g: &Grammar, corpus: &[Sentence], seed: u64) -> Tagger {
    let mut cfg = ModelConfig::recurrent(g.tagset().len());
    cfg.word_emb_dim = 16;
    cfg.token_hidden = 16;
    Tagger::new(cfg, g.tagset().clone(), CharVocab::from_sentences(corpus), g.embeddings(16, 1.0, seed), seed).unwrap()
}

fn accuracy(t: &Tagger, test: &[TaggedSentence]) -> f64 {
    let (tagged, _) = tag_corpus(t, &SilverConfig::new(0.0).unwrap(), &sentences(test)).unwrap();
    let gold: Vec<&str> = test.iter().flat_map(|s| s.tags.iter().map(String::as_str)).collect();
    let pred: Vec<&str> = tagged.iter().flat_map(|s| s.tags.iter().map(String::as_str)).collect();
    macro_f1(&gold, &pred, t.tagset()).unwrap().accuracy
}

#[test]
fn rules_alone_teach_the_tagger() {
    let g = Grammar::generate(GrammarSpec::pos_default()).unwrap();
    let rules = g.derive_rules(0.85, 1).unwrap();
    let train = sentences(&g.sample_corpus(300, (4, 10), 2).unwrap());
    let test = g.sample_corpus(60, (4, 10), 3).unwrap();
    let tagger = small_tagger(&g, &train, 4);
    let before = accuracy(&tagger, &test);
    let cfg = TrainConfig { epochs: 6, batch_size: 16, learning_rate: 1e-2, ..TrainConfig::unsupervised() };
    let out = train_unsupervised(tagger, &rules, &train, &cfg, no_hook).unwrap();
    let after = accuracy(&out.tagger, &test);
    assert!(after > 0.7 && after > before + 0.3, "accuracy {before:.3} -> {after:.3}");
    assert_eq!(out.log.len(), 6);
    assert!(out.log.last().unwrap().loss.lex < out.log[0].loss.lex);
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grammar::generate(GrammarSpec::pos_default()).unwrap();
    let rules_path = dir.path().join("rules.json");
    g.derive_rules(0.85, 0).unwrap().save(&rules_path).unwrap();
    let rules = load_rules(&rules_path).unwrap();
    assert_eq!(rules.tagset(), g.tagset());

    let gold = g.sample_corpus(40, (3, 8), 9).unwrap();
    let train = sentences(&gold);
    let pretrained = train_unsupervised(
        small_tagger(&g, &train, 1),
        &rules,
        &train,
        &TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::unsupervised() },
        no_hook,
    )
    .unwrap()
    .tagger;
    let tuned = train_sft(pretrained, &gold, None, &TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::sft() }, no_hook)
        .unwrap()
        .tagger;

    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&tuned, &ckpt).unwrap();
    let back = load_checkpoint(&ckpt).unwrap();
    let probe = &train[0].tokens;
    assert_eq!(tuned.predict(probe).unwrap(), back.predict(probe).unwrap());

    let raw = dir.path().join("raw.txt");
    std::fs::write(&raw, train.iter().map(|s| s.text.clone() + "\n").collect::<String>()).unwrap();
    let out = dir.path().join("silver.jsonl");
    let summary = generate_silver(&back, &SilverConfig::default(), &raw, &out).unwrap();
    let silver = read_jsonl(&out).unwrap();
    assert_eq!(silver.len(), train.len());
    assert_eq!(summary.tokens, train.iter().map(Sentence::len).sum::<usize>());
    for s in &silver {
        assert!(s.tags.iter().all(|t| t == OTHER_TAG || g.tagset().contains(t)));
    }
}
