//! One function per subcommand. Each reads its settings from [`KeyValues`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::json;
use vaemo::backbone::init_representation;
use vaemo::captions::{
    caption_corpus, embed_captions, load_caption_embeddings, load_caption_store,
    persist_caption_store, ClientMode, LexiconFilter, LiveClient, LiveFilter, ModelClient,
    RelevanceFilter, ReplayClient, SampleMeta, StubClient, StubEmbedder, DEFAULT_PASSES,
};
use vaemo::checkpoint::Checkpoint;
use vaemo::config::{KeyValues, Stage, Task, TrainConfig, MODEL_KEYS, TRAIN_KEYS};
use vaemo::data::synth::{CAPTIONS_FILE, MANIFEST_FILE};
use vaemo::data::{
    load_samples, read_latents, read_manifest, synth_corpus, write_corpus, Label, Sample,
    SynthConfig,
};
use vaemo::error::{Error, Result};
use vaemo::eval::{aggregate_folds, export_embeddings, pcc_per_dimension, FoldPredictions};
use vaemo::finetune::{argmax, cross_validate, predict};
use vaemo::params::{is_adapter, is_decoder, is_head, is_layer_norm, ParamFilter, ParamStore};
use vaemo::rng;
use vaemo::stage1::init_decoder;
use vaemo::stage2::{captioned, init_adapters, select_subset};
use vaemo::train::{
    init_pretraining, prepare_finetune, prepare_stage2, train_finetune, train_stage1, train_stage2,
    Run, FINETUNE_COLUMNS, STAGE1_COLUMNS, STAGE2_COLUMNS,
};

use crate::rundir::{write_text, RunDir};

fn known<'a>(extra: &[&'a str], with_train: bool) -> Vec<&'a str> {
    let mut k: Vec<&str> = MODEL_KEYS.to_vec();
    if with_train {
        k.extend_from_slice(TRAIN_KEYS);
    }
    k.extend_from_slice(extra);
    k
}

fn flag(kv: &KeyValues, key: &str) -> Result<bool> {
    kv.get_or(key, false)
}

fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    load_samples(dir, &rows)
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&cfg.model)?;
    Ok(ckpt)
}

/// `synth-data`: writes a synthetic corpus with stub captions.
pub fn synth_data(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(
        &[
            "out",
            "n",
            "num_classes",
            "seed",
            "folds",
            "audio_noise",
            "video_noise",
            "labels",
            "captions",
        ],
        false,
    ))?;
    let model = kv.model_config()?;
    let out = kv.require_path("out")?;
    let defaults = SynthConfig::for_model(&model, 0, 0, 0);
    let cfg = SynthConfig {
        n: kv.get_or("n", 400)?,
        num_classes: kv.get_or("num_classes", 4)?,
        folds: kv.get_or("folds", defaults.folds)?,
        audio_noise: kv.get_or("audio_noise", defaults.audio_noise)?,
        video_noise: kv.get_or("video_noise", defaults.video_noise)?,
        seed: kv.get_or("seed", 0)?,
        ..defaults
    };
    let mut corpus = synth_corpus(&cfg)?;
    match kv.raw("labels").unwrap_or("class") {
        "class" => {}
        "vad" => {
            for (s, l) in corpus.samples.iter_mut().zip(&corpus.latents) {
                s.label = Some(Label::Vad(l.vad()));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "labels must be `class` or `vad`, got `{other}`"
            )))
        }
    }
    let text_dim = kv.get_or("captions", true)?.then_some(model.text_dim);
    let rows = write_corpus(&out, &corpus, text_dim)?;
    println!("wrote {} samples to {}", rows.len(), out.display());
    Ok(())
}

/// `gen-captions`: captions a corpus through the stub, a replay fixture
/// directory or a live endpoint, then embeds the kept winners.
pub fn gen_captions(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(
        &[
            "data",
            "mode",
            "fixtures",
            "endpoint",
            "filter_endpoint",
            "passes",
            "record",
        ],
        false,
    ))?;
    let model = kv.model_config()?;
    let data = kv.require_path("data")?;
    let rows = read_manifest(&data.join(MANIFEST_FILE))?;
    let passes = kv.get_or("passes", DEFAULT_PASSES)?;
    let mode: ClientMode = kv.get_or("mode", ClientMode::Stub)?;
    let client: Box<dyn ModelClient> = match mode {
        ClientMode::Stub => {
            let latents = read_latents(&data, &rows)?;
            let k = latents.values().map(|l| l.class + 1).max().unwrap_or(1);
            Box::new(StubClient::new(latents, k))
        }
        ClientMode::Replay => Box::new(ReplayClient {
            dir: kv.require_path("fixtures")?,
        }),
        ClientMode::Live => {
            let endpoint = kv
                .raw("endpoint")
                .ok_or_else(|| Error::Config("live mode needs `endpoint`".into()))?;
            Box::new(LiveClient::new(endpoint, kv.path("record")))
        }
    };
    let filter: Box<dyn RelevanceFilter> = match kv.raw("filter_endpoint") {
        Some(url) => Box::new(LiveFilter::new(url)),
        None => Box::new(LexiconFilter::default()),
    };
    let samples = load_samples(&data, &rows)?;
    let metas: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            sample_id: s.id.clone(),
            seconds: s.audio.spectrogram.shape()[0] as f32 * 0.01,
        })
        .collect();
    let mut records = caption_corpus(client.as_ref(), filter.as_ref(), &metas, passes)?;
    embed_captions(&data, &mut records, &StubEmbedder::new(model.text_dim))?;
    persist_caption_store(&data.join(CAPTIONS_FILE), &records)?;
    let kept = records.iter().filter(|r| r.is_usable()).count();
    println!("captioned {} records, {kept} kept", records.len());
    Ok(())
}

/// `pretrain-stage1`.
pub fn pretrain_stage1(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(&["data", "run", "resume", "stop_after"], true))?;
    let cfg = kv.train_config(Stage::Stage1)?;
    let samples = load_corpus(&kv.require_path("data")?)?;
    let rd = RunDir::open(&kv.require_path("run")?)?;
    let fresh = Run::fresh(init_pretraining(&cfg), &STAGE1_COLUMNS);
    let mut run = rd.start(fresh, &cfg, flag(kv, "resume")?)?;
    let mut writer = rd.epoch_writer(&cfg);
    train_stage1(
        &mut run,
        &refs(&samples),
        &cfg,
        Some(&mut writer),
        kv.get("stop_after")?,
    )?;
    finish(&rd, &run, &cfg, "stage1.vaem")
}

fn finish(rd: &RunDir, run: &Run, cfg: &TrainConfig, name: &str) -> Result<()> {
    if run.epoch < cfg.epochs {
        println!("stopped after epoch {} of {}", run.epoch, cfg.epochs);
        return Ok(());
    }
    let path = rd.file(name);
    run.checkpoint(cfg).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `inject-stage2`: LayerNorm-only caption alignment of a Stage-1 network.
pub fn inject_stage2(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(&["data", "run", "init", "resume"], true))?;
    let cfg = kv.train_config(Stage::Stage2)?;
    let data = kv.require_path("data")?;
    let init = load_checkpoint(&kv.require_path("init")?, &cfg)?;
    let samples = load_corpus(&data)?;
    let records = load_caption_store(&data.join(CAPTIONS_FILE))?;
    let emb = load_caption_embeddings(&data, &records)?;
    let all = refs(&samples);
    let subset = select_subset(all.len(), cfg.subset_fraction, cfg.seed)?;
    let chosen: Vec<&Sample> = subset.iter().map(|&i| all[i]).collect();
    let chosen = captioned(&chosen, &emb);
    if chosen.len() < 2 {
        return Err(Error::Data(format!(
            "only {} of {} subset samples have usable captions in both modalities",
            chosen.len(),
            subset.len()
        )));
    }
    let rd = RunDir::open(&kv.require_path("run")?)?;
    let ids: String = chosen.iter().map(|s| format!("{}\n", s.id)).collect();
    write_text(&rd.file("subset.txt"), &ids)?;
    let fresh = Run::fresh(prepare_stage2(init.params, &cfg), &STAGE2_COLUMNS);
    let mut run = rd.start(fresh, &cfg, flag(kv, "resume")?)?;
    let mut writer = rd.epoch_writer(&cfg);
    train_stage2(&mut run, &chosen, &emb, &cfg, Some(&mut writer))?;
    finish(&rd, &run, &cfg, "stage2.vaem")
}

/// Samples of the listed folds, or all samples when `folds` is absent.
fn fold_filter(kv: &KeyValues, samples: &[Sample]) -> Result<Option<BTreeSet<usize>>> {
    let Some(text) = kv.raw("folds") else {
        return Ok(None);
    };
    if text == "all" {
        return Ok(Some(samples.iter().map(|s| s.fold).collect()));
    }
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad fold list `{text}`")))
        })
        .collect::<Result<BTreeSet<_>>>()
        .map(Some)
}

/// `finetune`: trains a task head and the backbone; `test_fold` is held out.
pub fn finetune(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(
        &["data", "run", "init", "test_fold", "resume"],
        true,
    ))?;
    let cfg = kv.train_config(Stage::Finetune)?;
    let samples = load_corpus(&kv.require_path("data")?)?;
    let held_out: Option<usize> = kv.get("test_fold")?;
    let train: Vec<&Sample> = samples
        .iter()
        .filter(|s| Some(s.fold) != held_out)
        .collect();
    if train.is_empty() {
        return Err(Error::Data(
            "no training samples outside the held-out fold".into(),
        ));
    }
    let base = match kv.path("init") {
        Some(p) => load_checkpoint(&p, &cfg)?.params,
        None => init_representation(&cfg.model, &mut rng::stream(cfg.seed, "init", &[])),
    };
    let rd = RunDir::open(&kv.require_path("run")?)?;
    let fresh = Run::fresh(prepare_finetune(base, &cfg), &FINETUNE_COLUMNS);
    let mut run = rd.start(fresh, &cfg, flag(kv, "resume")?)?;
    let mut writer = rd.epoch_writer(&cfg);
    train_finetune(&mut run, &train, &cfg, Some(&mut writer))?;
    finish(&rd, &run, &cfg, "finetune.vaem")
}

/// `evaluate`: scores a fine-tuned checkpoint on the listed folds, or, for a
/// pre-trained checkpoint, fine-tunes once per listed fold and pools the
/// held-out predictions.
pub fn evaluate(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(&["data", "checkpoint", "folds", "out"], true))?;
    let cfg = kv.train_config(Stage::Finetune)?;
    let samples = load_corpus(&kv.require_path("data")?)?;
    let ckpt = load_checkpoint(&kv.require_path("checkpoint")?, &cfg)?;
    let out = kv.path("out").unwrap_or_else(|| PathBuf::from("eval"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let folds = fold_filter(kv, &samples)?;
    let has_head = ckpt.params.names().any(is_head);
    if !has_head {
        let folds: Vec<usize> = folds
            .unwrap_or_else(|| samples.iter().map(|s| s.fold).collect())
            .into_iter()
            .collect();
        let report = cross_validate(&ckpt.params, &refs(&samples), &cfg, &folds)?;
        report.write(&out.join("report.json"), &out.join("predictions.csv"))?;
        println!(
            "pooled UAR {:.4} WAR {:.4} over {} folds",
            report.uar,
            report.war,
            folds.len()
        );
        return Ok(());
    }
    let chosen: Vec<&Sample> = samples
        .iter()
        .filter(|s| folds.as_ref().is_none_or(|f| f.contains(&s.fold)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data("no samples in the requested folds".into()));
    }
    let outputs = predict(&ckpt.params, &chosen, &cfg.model, cfg.batch_size)?;
    match cfg.task {
        Task::Categorical => {
            let mut per_fold: Vec<FoldPredictions> = Vec::new();
            for (s, o) in chosen.iter().zip(&outputs) {
                let pos = match per_fold.iter().position(|f| f.fold == s.fold) {
                    Some(p) => p,
                    None => {
                        per_fold.push(FoldPredictions {
                            fold: s.fold,
                            ..Default::default()
                        });
                        per_fold.len() - 1
                    }
                };
                let f = &mut per_fold[pos];
                f.ids.push(s.id.clone());
                f.preds.push(argmax(o));
                f.labels.push(s.class()?);
            }
            per_fold.sort_by_key(|f| f.fold);
            let report = aggregate_folds(&per_fold, cfg.num_classes)?;
            report.write(&out.join("report.json"), &out.join("predictions.csv"))?;
            println!("pooled UAR {:.4} WAR {:.4}", report.uar, report.war);
        }
        Task::Dimensional => {
            let targets = chosen.iter().map(|s| s.vad()).collect::<Result<Vec<_>>>()?;
            let pcc = pcc_per_dimension(&outputs, &targets)?;
            let report = json!({
                "count": chosen.len(),
                "pcc": {"valence": pcc[0], "arousal": pcc[1], "dominance": pcc[2]},
            });
            write_text(
                &out.join("report.json"),
                &serde_json::to_string_pretty(&report).expect("json"),
            )?;
            let mut csv = String::from(
                "sample_id,valence,arousal,dominance,pred_valence,pred_arousal,pred_dominance\n",
            );
            for ((s, t), o) in chosen.iter().zip(&targets).zip(&outputs) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.id, t[0], t[1], t[2], o[0], o[1], o[2]
                ));
            }
            write_text(&out.join("predictions.csv"), &csv)?;
            println!(
                "PCC valence {:.4} arousal {:.4} dominance {:.4}",
                pcc[0], pcc[1], pcc[2]
            );
        }
    }
    Ok(())
}

/// `export-embeddings`: pooled fused representation per sample.
pub fn export(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(&["data", "checkpoint", "out"], false))?;
    let model = kv.model_config()?;
    let samples = load_corpus(&kv.require_path("data")?)?;
    let ckpt = Checkpoint::load(&kv.require_path("checkpoint")?)?;
    ckpt.check_compatible(&model)?;
    let out = kv.require_path("out")?;
    let z = export_embeddings(&ckpt.params, &refs(&samples), &model, &out)?;
    println!(
        "wrote {}x{} embeddings to {}",
        z.rows(),
        z.last_dim(),
        out.display()
    );
    Ok(())
}

/// `count-params`: exact parameter counts of a freshly initialised network.
pub fn count_params(kv: &KeyValues) -> Result<()> {
    kv.check_known(&known(&["json", "num_classes"], false))?;
    let model = kv.model_config()?;
    let mut r = rng::stream(0, "count", &[]);
    let mut store: ParamStore = init_representation(&model, &mut r);
    let repr = store.count(ParamFilter::All);
    let layer_norm = store.count(ParamFilter::LayerNorm);
    init_decoder(&mut store, &model, &mut r);
    init_adapters(&mut store, &model, &mut r);
    let decoder = store.count_where(is_decoder);
    let adapters = store.count_where(is_adapter);
    let adapter_norm = store.count_where(|n| is_adapter(n) && is_layer_norm(n));
    let head = model.dim * kv.get_or("num_classes", 4usize)? + kv.get_or("num_classes", 4usize)?;
    let report = json!({
        "representation": repr,
        "representation_layernorm": layer_norm,
        "decoder": decoder,
        "adapters": adapters,
        "adapters_layernorm": adapter_norm,
        "head": head,
        "stage2_trainable": layer_norm + adapters,
    });
    if flag(kv, "json")? {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        println!("representation        {repr}");
        println!("  layernorm           {layer_norm}");
        println!("decoder               {decoder}");
        println!("adapters              {adapters}");
        println!("head                  {head}");
        println!("stage-2 trainable     {}", layer_norm + adapters);
    }
    Ok(())
}
