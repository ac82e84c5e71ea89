//! Caption model clients and relevance filters.
//!
//! Three interchangeable back ends sit behind [`ModelClient`]: a live HTTP
//! endpoint (which can record fixtures), a replay client reading recorded
//! fixtures, and a stub that verbalises the latent emotion of synthetic data.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::lexicon::{AffectLexicon, EMOTIONS};
use super::prompt::CotPrompt;
use crate::data::Latent;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    Replay,
    Stub,
}

impl std::str::FromStr for ClientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "stub" => Ok(Self::Stub),
            other => Err(Error::Config(format!("unknown caption mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CaptionRequest<'a> {
    pub sample_id: &'a str,
    pub prompt: &'a CotPrompt,
    pub pass: usize,
}

pub trait ModelClient {
    fn mode(&self) -> ClientMode;
    fn complete(&self, req: &CaptionRequest) -> Result<String>;
}

/// Runs `passes` inference passes for one prompt.
pub fn generate(
    client: &dyn ModelClient,
    sample_id: &str,
    prompt: &CotPrompt,
    passes: usize,
) -> Result<Vec<String>> {
    if passes == 0 {
        return Err(Error::Config(
            "at least one caption pass is required".into(),
        ));
    }
    (0..passes)
        .map(|pass| {
            client.complete(&CaptionRequest {
                sample_id,
                prompt,
                pass,
            })
        })
        .collect()
}

pub fn fixture_path(dir: &Path, sample_id: &str, modality: Modality, pass: usize) -> PathBuf {
    dir.join(sample_id)
        .join(modality.code())
        .join(format!("{pass}.txt"))
}

// ---- stub ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StubClient {
    latents: HashMap<String, Latent>,
    num_classes: usize,
    /// Probability that a pass describes a different emotion than the latent one.
    pub flip_rate: f64,
    pub seed: u64,
}

impl StubClient {
    pub fn new(latents: HashMap<String, Latent>, num_classes: usize) -> Self {
        Self {
            latents,
            num_classes,
            flip_rate: 0.1,
            seed: 0,
        }
    }
}

fn level(v: f32, hi: &'static str, lo: &'static str) -> &'static str {
    if v >= 0.0 {
        hi
    } else {
        lo
    }
}

fn video_cues(class: usize) -> &'static str {
    match class {
        0 => "AU6 and AU12 (cheek raiser, lip corner puller)",
        1 => "AU1 and AU15 (inner brow raiser, lip corner depressor)",
        2 => "AU4 and AU23 (brow lowerer, lip tightener)",
        3 => "loose facial muscles without strong action units",
        4 => "AU1, AU2 and AU20 (brow raiser, lip stretcher)",
        _ => "AU1, AU2 and AU26 (brow raiser, jaw drop)",
    }
}

/// Caption text the stub produces for a latent state, as if `class` were the emotion.
pub fn stub_caption(latent: &Latent, modality: Modality, class: usize) -> String {
    let emotion = EMOTIONS[class % EMOTIONS.len()];
    let arousal = level(latent.arousal, "high", "low");
    let valence = level(latent.valence, "positive", "negative");
    let trend = if latent.dominance >= 0.3 {
        "builds"
    } else if latent.dominance <= -0.3 {
        "fades"
    } else {
        "stays consistent"
    };
    match modality {
        Modality::Audio => format!(
            "Observable features: the voice is {} with a {} timbre and {} pitch. \
             Emotional state: the speaker sounds {emotion}, with {arousal} arousal and {valence} valence. \
             Temporal change: the {emotion} tone {trend} over the clip.",
            level(latent.arousal, "loud and fast-paced", "soft and slow"),
            level(latent.valence, "bright", "dark"),
            level(latent.dominance, "steady", "wavering"),
        ),
        Modality::Video => format!(
            "Observable features: the face shows {}, the posture is {} and body movements are {}. \
             Emotional state: the person appears {emotion}, with {arousal} arousal and {valence} valence. \
             Temporal change: the {emotion} expression {trend} over the clip.",
            video_cues(class),
            level(latent.dominance, "upright", "slumped"),
            level(latent.arousal, "brisk", "slow"),
        ),
    }
}

impl ModelClient for StubClient {
    fn mode(&self) -> ClientMode {
        ClientMode::Stub
    }

    fn complete(&self, req: &CaptionRequest) -> Result<String> {
        let latent = self.latents.get(req.sample_id).ok_or_else(|| {
            Error::Data(format!("stub has no latent for sample `{}`", req.sample_id))
        })?;
        let tag = format!("stub-flip/{}", req.sample_id);
        let m = req.prompt.modality as u64;
        let mut class = latent.class;
        if self.num_classes > 1
            && rng::unit(self.seed, &tag, &[m, req.pass as u64]) < self.flip_rate
        {
            let shift = 1
                + (rng::unit(self.seed, &tag, &[m, req.pass as u64, 1])
                    * (self.num_classes - 1) as f64) as usize;
            class = (class + shift.min(self.num_classes - 1)) % self.num_classes;
        }
        Ok(stub_caption(latent, req.prompt.modality, class))
    }
}

// ---- replay ----------------------------------------------------------

/// Reads `<dir>/<sample_id>/<modality>/<pass>.txt` verbatim.
#[derive(Clone, Debug)]
pub struct ReplayClient {
    pub dir: PathBuf,
}

impl ModelClient for ReplayClient {
    fn mode(&self) -> ClientMode {
        ClientMode::Replay
    }

    fn complete(&self, req: &CaptionRequest) -> Result<String> {
        let path = fixture_path(&self.dir, req.sample_id, req.prompt.modality, req.pass);
        std::fs::read_to_string(&path)
            .map_err(|_| Error::Data(format!("fixture miss: {}", path.display())))
    }
}

// ---- live ------------------------------------------------------------

#[derive(Serialize)]
struct LiveRequest<'a> {
    sample_id: &'a str,
    modality: Modality,
    pass: usize,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct LiveResponse {
    text: String,
}

/// Posts prompts as JSON to an HTTP endpoint; optionally records every
/// response in the replay fixture layout.
pub struct LiveClient {
    pub endpoint: String,
    pub record_dir: Option<PathBuf>,
    agent: ureq::Agent,
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(120))
        .build()
}

fn transport(e: ureq::Error) -> Error {
    Error::Transport(e.to_string())
}

impl LiveClient {
    pub fn new(endpoint: impl Into<String>, record_dir: Option<PathBuf>) -> Self {
        Self {
            endpoint: endpoint.into(),
            record_dir,
            agent: agent(),
        }
    }
}

impl ModelClient for LiveClient {
    fn mode(&self) -> ClientMode {
        ClientMode::Live
    }

    fn complete(&self, req: &CaptionRequest) -> Result<String> {
        let body = LiveRequest {
            sample_id: req.sample_id,
            modality: req.prompt.modality,
            pass: req.pass,
            prompt: &req.prompt.text,
        };
        let resp: LiveResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(transport)?
            .into_json()
            .map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
        if let Some(dir) = &self.record_dir {
            let path = fixture_path(dir, req.sample_id, req.prompt.modality, req.pass);
            let parent = path.parent().expect("fixture has a parent");
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            std::fs::write(&path, &resp.text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(resp.text)
    }
}

// ---- relevance filters -----------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Kept,
    Discarded(String),
}

pub trait RelevanceFilter {
    fn judge(&self, caption: &str) -> Result<Verdict>;
}

/// Keeps captions that contain at least one affect-lexicon term.
#[derive(Clone, Debug, Default)]
pub struct LexiconFilter {
    pub lexicon: AffectLexicon,
}

impl RelevanceFilter for LexiconFilter {
    fn judge(&self, caption: &str) -> Result<Verdict> {
        if caption.trim().is_empty() {
            return Ok(Verdict::Discarded("empty".into()));
        }
        Ok(match self.lexicon.first_hit(caption) {
            Some(_) => Verdict::Kept,
            None => Verdict::Discarded("no affect terms".into()),
        })
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    caption: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    keep: bool,
    #[serde(default)]
    reason: Option<String>,
}

/// Asks a secondary language model endpoint whether a caption is emotion-relevant.
pub struct LiveFilter {
    pub endpoint: String,
    agent: ureq::Agent,
}

impl LiveFilter {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: agent(),
        }
    }
}

impl RelevanceFilter for LiveFilter {
    fn judge(&self, caption: &str) -> Result<Verdict> {
        if caption.trim().is_empty() {
            return Ok(Verdict::Discarded("empty".into()));
        }
        let resp: JudgeResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(JudgeRequest { caption })
            .map_err(transport)?
            .into_json()
            .map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
        Ok(if resp.keep {
            Verdict::Kept
        } else {
            Verdict::Discarded(resp.reason.unwrap_or_else(|| "judged irrelevant".into()))
        })
    }
}
