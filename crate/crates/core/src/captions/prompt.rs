//! Chain-of-thought caption prompts.

use serde::{Deserialize, Serialize};

use crate::tokenizer::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub seconds: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStage {
    ObservableFeatures,
    EmotionalState,
    TemporalChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotPrompt {
    pub modality: Modality,
    pub stages: Vec<(PromptStage, String)>,
    pub text: String,
}

fn observation_step(modality: Modality) -> &'static str {
    match modality {
        Modality::Video => {
            "Describe the visible facial action units, the overall posture, and the body \
             movements of the person."
        }
        Modality::Audio => {
            "Describe the acoustic properties of the voice: pitch and its contour, loudness, \
             speaking rate, and timbre."
        }
    }
}

/// Instantiates the three-step template for one modality.
pub fn build_cot_prompt(modality: Modality, meta: &SampleMeta) -> CotPrompt {
    let source = match modality {
        Modality::Audio => "speech recording",
        Modality::Video => "face video",
    };
    let stages =
        vec![
        (PromptStage::ObservableFeatures, observation_step(modality).to_string()),
        (
            PromptStage::EmotionalState,
            "From those features only, assess the emotional state: name the emotion, its \
             intensity (arousal), and its valence."
                .to_string(),
        ),
        (
            PromptStage::TemporalChange,
            "Analyze how the emotional state changes from the beginning to the end of the clip."
                .to_string(),
        ),
    ];
    let mut text = format!(
        "You are given a {source} of {:.1} seconds (clip `{}`). Ground every inference in \
         observable features; do not speculate beyond what is perceivable.\n",
        meta.seconds, meta.sample_id
    );
    for (i, (_, instruction)) in stages.iter().enumerate() {
        text.push_str(&format!("Step {}: {instruction}\n", i + 1));
    }
    text.push_str("Answer in one paragraph that follows the three steps in order.");
    CotPrompt {
        modality,
        stages,
        text,
    }
}
