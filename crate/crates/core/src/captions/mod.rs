//! Caption generation: chain-of-thought prompts, multi-pass generation,
//! majority voting, relevance filtering and the persistent caption store.

pub mod client;
pub mod lexicon;
pub mod prompt;
pub mod store;
pub mod vote;

use std::path::Path;

pub use client::{
    generate, ClientMode, LexiconFilter, LiveClient, LiveFilter, ModelClient, RelevanceFilter,
    ReplayClient, StubClient, Verdict,
};
pub use lexicon::{extract_label, AffectLexicon, StubEmbedder, EMOTIONS};
pub use prompt::{build_cot_prompt, CotPrompt, SampleMeta};
pub use store::{
    load_caption_embeddings, load_caption_store, persist_caption_store, CaptionEmbeddings,
    CaptionRecord,
};
pub use vote::{majority_vote, VoteOutcome};

use crate::data::ArrayContainer;
use crate::error::Result;
use crate::tokenizer::Modality;

pub const DEFAULT_PASSES: usize = 3;
pub const EMBEDDINGS_FILE: &str = "caption_embeddings.vaem";

/// Prompt, generate, vote and filter for one sample and modality.
pub fn caption_sample(
    client: &dyn ModelClient,
    filter: &dyn RelevanceFilter,
    meta: &SampleMeta,
    modality: Modality,
    passes: usize,
) -> Result<CaptionRecord> {
    let prompt = build_cot_prompt(modality, meta);
    let candidates = generate(client, &meta.sample_id, &prompt, passes)?;
    let (votes, outcome) = majority_vote(&candidates, extract_label);
    let (winner, filtered, reason) = match outcome {
        VoteOutcome::Inconsistent { reason } => (None, true, Some(reason)),
        VoteOutcome::Winner { index, .. } => {
            let text = candidates[index].clone();
            match filter.judge(&text)? {
                Verdict::Kept => (Some(text), false, None),
                Verdict::Discarded(reason) => (Some(text), true, Some(reason)),
            }
        }
    };
    Ok(CaptionRecord {
        sample_id: meta.sample_id.clone(),
        modality,
        candidates,
        votes,
        winner,
        filtered,
        reason,
        embedding_ref: None,
    })
}

/// Captions every sample in both modalities.
pub fn caption_corpus(
    client: &dyn ModelClient,
    filter: &dyn RelevanceFilter,
    metas: &[SampleMeta],
    passes: usize,
) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::with_capacity(metas.len() * 2);
    for meta in metas {
        for m in [Modality::Audio, Modality::Video] {
            out.push(caption_sample(client, filter, meta, m, passes)?);
        }
    }
    Ok(out)
}

/// Embeds each usable winner, stores the vectors in `dir/caption_embeddings.vaem`
/// and points the records at them.
pub fn embed_captions(
    dir: &Path,
    records: &mut [CaptionRecord],
    embedder: &StubEmbedder,
) -> Result<()> {
    let mut container = ArrayContainer::new();
    for r in records.iter_mut() {
        r.embedding_ref = None;
        if !r.is_usable() {
            continue;
        }
        let entry = format!("{}/{}", r.sample_id, r.modality.code());
        container.insert(
            entry.clone(),
            embedder.embed(r.winner.as_deref().unwrap_or("")),
        )?;
        r.embedding_ref = Some(format!("{EMBEDDINGS_FILE}#{entry}"));
    }
    container.write(&dir.join(EMBEDDINGS_FILE))
}
