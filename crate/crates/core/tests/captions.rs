mod common;

use std::fs;
use std::path::Path;

use common::{oracles, rng, small};
use rand::Rng;
use vaemo::captions::caption_corpus;
use vaemo::captions::client::{fixture_path, CaptionRequest};
use vaemo::captions::store::to_jsonl;
use vaemo::captions::{
    caption_sample, embed_captions, load_caption_embeddings, persist_caption_store, CaptionRecord,
    ClientMode, LexiconFilter, ModelClient, RelevanceFilter, ReplayClient, SampleMeta,
    StubEmbedder, Verdict,
};
use vaemo::config::Stage;
use vaemo::data::{synth_corpus, Sample, SynthConfig};
use vaemo::stage2::{captioned, stage2_pass};
use vaemo::tokenizer::Modality;
use vaemo::Error;

fn meta(id: &str) -> SampleMeta {
    SampleMeta {
        sample_id: id.into(),
        seconds: 2.0,
    }
}

fn write_fixtures(dir: &Path, ids: &[String], passes: usize, seed: u64) {
    let mut r = rng(seed);
    for id in ids {
        for m in [Modality::Audio, Modality::Video] {
            for pass in 0..passes {
                let p = fixture_path(dir, id, m, pass);
                fs::create_dir_all(p.parent().unwrap()).unwrap();
                fs::write(p, oracles::random_caption(&mut r)).unwrap();
            }
        }
    }
}

fn replay_run(fixtures: &Path, out: &Path, ids: &[String]) -> (Vec<u8>, Vec<u8>) {
    let client = ReplayClient {
        dir: fixtures.to_path_buf(),
    };
    let metas: Vec<SampleMeta> = ids.iter().map(|i| meta(i)).collect();
    let mut records = caption_corpus(&client, &LexiconFilter::default(), &metas, 3).unwrap();
    fs::create_dir_all(out).unwrap();
    embed_captions(out, &mut records, &StubEmbedder::new(16)).unwrap();
    persist_caption_store(&out.join("captions.jsonl"), &records).unwrap();
    (
        fs::read(out.join("captions.jsonl")).unwrap(),
        fs::read(out.join("caption_embeddings.vaem")).unwrap(),
    )
}

#[test]
fn replay_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..20).map(|i| format!("s{i:03}")).collect();
    write_fixtures(&dir.path().join("fx"), &ids, 3, 7);
    let a = replay_run(&dir.path().join("fx"), &dir.path().join("a"), &ids);
    let b = replay_run(&dir.path().join("fx"), &dir.path().join("b"), &ids);
    assert_eq!(a, b);
}

#[test]
fn replay_miss_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let client = ReplayClient {
        dir: dir.path().to_path_buf(),
    };
    let err = caption_sample(
        &client,
        &LexiconFilter::default(),
        &meta("x"),
        Modality::Audio,
        3,
    );
    assert!(matches!(err, Err(Error::Data(_))));
}

struct Fixed(Vec<String>);

impl ModelClient for Fixed {
    fn mode(&self) -> ClientMode {
        ClientMode::Replay
    }
    fn complete(&self, req: &CaptionRequest) -> vaemo::Result<String> {
        Ok(self.0[req.pass].clone())
    }
}

#[test]
fn voting_and_filtering_match_definitions_on_fuzzed_sets() {
    let mut r = rng(8);
    let (mut winners, mut kept) = (0, 0);
    for case in 0..100 {
        let n = r.gen_range(1..6);
        let mut cands: Vec<String> = (0..n).map(|_| oracles::random_caption(&mut r)).collect();
        if case % 2 == 0 {
            let (word, _) = oracles::EMOTION_WORDS[r.gen_range(0..oracles::EMOTION_WORDS.len())];
            for c in cands.iter_mut().filter(|_| r.gen_bool(0.7)) {
                *c = format!("{word} {c}");
            }
        }
        let rec = caption_sample(
            &Fixed(cands.clone()),
            &LexiconFilter::default(),
            &meta("x"),
            Modality::Video,
            n,
        )
        .unwrap();
        let labels: Vec<Option<String>> = cands.iter().map(|c| oracles::label_of(c)).collect();
        assert_eq!(rec.candidates, cands, "case {case}");
        assert_eq!(rec.votes, labels, "case {case}");
        match oracles::vote(&labels) {
            None => {
                assert!(
                    rec.winner.is_none() && rec.filtered && rec.reason.is_some(),
                    "case {case}"
                );
            }
            Some((index, _)) => {
                winners += 1;
                assert_eq!(
                    rec.winner.as_deref(),
                    Some(cands[index].as_str()),
                    "case {case}"
                );
                let keep = oracles::relevant(&cands[index]);
                assert_eq!(rec.filtered, !keep, "case {case}");
                assert_eq!(rec.reason.is_some(), !keep, "case {case}");
                kept += keep as usize;
            }
        }
    }
    assert!(
        winners > 30 && kept > 30,
        "fuzz coverage: {winners} winners, {kept} kept"
    );
}

#[test]
fn lexicon_filter_matches_relevance_definition() {
    let mut r = rng(9);
    let filter = LexiconFilter::default();
    for _ in 0..100 {
        let c = oracles::random_caption(&mut r);
        let kept = filter.judge(&c).unwrap() == Verdict::Kept;
        assert_eq!(kept, oracles::relevant(&c), "{c:?}");
    }
}

#[test]
fn stage2_reads_only_unfiltered_records() {
    let cfg = small(Stage::Stage2, 1);
    let corpus = synth_corpus(&SynthConfig::for_model(&cfg.model, 4, 4, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let caption = |id: &str, m: Modality, text: &str| CaptionRecord {
        sample_id: id.into(),
        modality: m,
        candidates: vec![text.into(); 3],
        votes: vec![Some("happy".into()); 3],
        winner: Some(text.into()),
        filtered: false,
        reason: None,
        embedding_ref: None,
    };
    let mut records = Vec::new();
    for s in &corpus.samples {
        records.push(caption(&s.id, Modality::Audio, "a happy voice"));
        records.push(caption(&s.id, Modality::Video, "a happy face"));
    }
    // Sample 1 loses its video caption to the filter after embedding.
    embed_captions(
        dir.path(),
        &mut records,
        &StubEmbedder::new(cfg.model.text_dim),
    )
    .unwrap();
    records[3].filtered = true;
    records[3].reason = Some("no affect terms".into());
    let emb = load_caption_embeddings(dir.path(), &records).unwrap();
    assert_eq!(emb.len(), 7);
    assert!(!emb.contains_key(&(corpus.samples[1].id.clone(), Modality::Video)));

    let all: Vec<&Sample> = corpus.samples.iter().collect();
    let usable = captioned(&all, &emb);
    assert_eq!(usable.len(), 3);
    assert!(usable.iter().all(|s| s.id != corpus.samples[1].id));

    let mut store = vaemo::backbone::init_representation(&cfg.model, &mut rng(3));
    vaemo::stage2::init_adapters(&mut store, &cfg.model, &mut rng(4));
    let mut sess = vaemo::params::Session::frozen(&store);
    match stage2_pass(&mut sess, &all, &emb, &cfg) {
        Err(Error::Data(msg)) => assert!(msg.contains(&corpus.samples[1].id), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    let _ = to_jsonl(&records).unwrap();
}
