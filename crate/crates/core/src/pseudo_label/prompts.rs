//! Prompt templates for the labelers.

pub const CAPTION_PROMPT: &str = "Describe this video frame in one concise sentence.";

pub const SPATIAL_TEMPLATE: &str = "The image is a video frame from a video. A question about the video is:\n\
{question}\n\
Evaluate whether the video frame provides useful information to answer this question about the video. \
First explain your reasoning. Then generate a Boolean evaluation of the frame's usefulness. For example:\n\
Evaluation: True";

/// Marker after which the Boolean evaluation is read.
pub const EVAL_MARKER: &str = "Evaluation:";

/// Text appended to replies that never reached a Boolean evaluation.
pub const FALLBACK_SUFFIX: &str = "Evaluation: True";

pub fn spatial_prompt(question: &str) -> String {
    SPATIAL_TEMPLATE.replace("{question}", question)
}

/// Caption-then-rank prompt. Frames are numbered from 1.
pub fn temporal_prompt(question: &str, captions: &[String], want: usize) -> String {
    let n = captions.len();
    let mut out = format!(
        "I need to answer a question based on a long video. To do this, I have uniformly sampled {n} frames \
         from the video, each with a corresponding caption. The question I need to answer is:\n{question}\n\
         Below is the list of frames and their captions:\n\n"
    );
    for (i, c) in captions.iter().enumerate() {
        out.push_str(&format!("Frame {} : {}\n", i + 1, c));
    }
    out.push_str(&format!(
        "\nPlease provide a list of {want} frames that would be most helpful for answering this question.\n\
         Rule: ONLY provide a Python List without extra text."
    ));
    out
}
