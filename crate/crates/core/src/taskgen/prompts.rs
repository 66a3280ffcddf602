//! Prompt templates and the versioned prompt registry.
//!
//! Templates name slots in braces, e.g. `{REGION}`. Box slots render as four
//! `<loc_N>` placeholders that [`tokenize_prompt`] maps to location tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TaskId;
use crate::error::{Error, Result};
use crate::sparse_codec::{quantize_coord, NormBox};
use crate::text_tok::SubwordModel;
use crate::vocab::VocabLayout;

pub const REGISTRY_FORMAT: &str = "uio-prompts";
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotType {
    Text,
    Box,
    ColorMap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotValue {
    Text(String),
    Box(NormBox),
    /// `(color name, class)` pairs.
    ColorMap(Vec<(String, String)>),
}

impl SlotValue {
    fn kind(&self) -> SlotType {
        match self {
            SlotValue::Text(_) => SlotType::Text,
            SlotValue::Box(_) => SlotType::Box,
            SlotValue::ColorMap(_) => SlotType::ColorMap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: TaskId,
    pub template: String,
    pub slots: BTreeMap<String, SlotType>,
}

/// Slot names referenced by a template string, in order of appearance.
pub fn referenced_slots(template: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::Config(format!("unclosed slot in template {template:?}")))?;
        out.push(after[..close].to_string());
        rest = &after[close + 1..];
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        for s in referenced_slots(&self.template)? {
            if !self.slots.contains_key(&s) {
                return Err(Error::Config(format!("template for {:?} references undeclared slot {s}", self.task)));
            }
        }
        Ok(())
    }
}

pub fn loc_placeholder(bin: usize) -> String {
    format!("<loc_{bin}>")
}

fn render_box(b: &NormBox, bins: usize) -> Result<String> {
    let parts = [b.y_min, b.x_min, b.y_max, b.x_max]
        .iter()
        .map(|&v| quantize_coord(v, bins).map(loc_placeholder))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" "))
}

/// Substitutes every slot; `bins` is the number of location tokens.
pub fn render_prompt(t: &PromptTemplate, slots: &BTreeMap<String, SlotValue>, bins: usize) -> Result<String> {
    let mut out = String::new();
    let mut rest = t.template.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::Config(format!("unclosed slot in {:?}", t.template)))?;
        let name = &after[..close];
        let declared = t.slots.get(name).ok_or_else(|| Error::Task(format!("unknown slot {name}")))?;
        let value = slots.get(name).ok_or_else(|| Error::Task(format!("missing slot {name}")))?;
        if value.kind() != *declared {
            return Err(Error::Task(format!("slot {name} expects {declared:?}, got {:?}", value.kind())));
        }
        match value {
            SlotValue::Text(s) => out.push_str(s),
            SlotValue::Box(b) => out.push_str(&render_box(b, bins)?),
            SlotValue::ColorMap(m) => {
                let parts: Vec<String> = m.iter().map(|(c, k)| format!("{c} : {k}")).collect();
                out.push_str(&parts.join(" , "));
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Tokenizes a rendered prompt: `<loc_N>` placeholders become location ids,
/// the text between them is trimmed and subword-encoded.
pub fn tokenize_prompt(tok: &SubwordModel, layout: &VocabLayout, s: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    let mut rest = s;
    loop {
        let Some(start) = rest.find("<loc_") else { break };
        let tail = &rest[start + 5..];
        let Some(end) = tail.find('>') else { break };
        let Ok(bin) = tail[..end].parse::<usize>() else {
            ids.extend(tok.encode(&rest[..start + 5]));
            rest = tail;
            continue;
        };
        let text = rest[..start].trim();
        if !text.is_empty() {
            ids.extend(tok.encode(text));
        }
        ids.push(layout.location_id(bin)?);
        rest = &tail[end + 1..];
    }
    let text = rest.trim();
    if !text.is_empty() {
        ids.extend(tok.encode(text));
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    /// The wording used in training.
    pub prompt: String,
    /// Alternative wordings for robustness evaluation.
    pub paraphrases: Vec<String>,
    pub slots: BTreeMap<String, SlotType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRegistry {
    pub format: String,
    pub version: u32,
    pub tasks: BTreeMap<TaskId, PromptEntry>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        use SlotType::*;
        let mut tasks = BTreeMap::new();
        let mut add = |task: TaskId, prompt: &str, paraphrases: &[&str], slots: &[(&str, SlotType)]| {
            tasks.insert(
                task,
                PromptEntry {
                    prompt: prompt.into(),
                    paraphrases: paraphrases.iter().map(|s| s.to_string()).collect(),
                    slots: slots.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
                },
            );
        };
        add(
            TaskId::ImageGeneration,
            "What is the complete image ? Text : \" {CAPTION} \" .",
            &["Generate an image that matches \" {CAPTION} \" .", "Draw \" {CAPTION} \" ."],
            &[("CAPTION", Text)],
        );
        add(
            TaskId::ImageInpainting,
            "Filling the blank region {REGION} with \" {CLASS} \" .",
            &["Fill {REGION} with a \" {CLASS} \" .", "Paint \" {CLASS} \" into the region {REGION} ."],
            &[("REGION", Box), ("CLASS", Text)],
        );
        add(
            TaskId::SegmentationToImage,
            "Generate an image from the segmentation with \" {COLORMAP} \" .",
            &["What image matches the segmentation \" {COLORMAP} \" ?", "Render the segmentation \" {COLORMAP} \" ."],
            &[("COLORMAP", ColorMap)],
        );
        add(
            TaskId::ObjectDetection,
            "What objects are in the image ?",
            &["List the objects in the image .", "Detect all objects ."],
            &[],
        );
        add(
            TaskId::ObjectLocalization,
            "What region does \" {CLASS} \" describe ?",
            &["Find every \" {CLASS} \" .", "Where are the \" {CLASS} \" objects ?"],
            &[("CLASS", Text)],
        );
        add(
            TaskId::ReferringExpression,
            "Which region does the text \" {REFEXP} \" describe ?",
            &[
                "Which region does the text \"{REFEXP}\" describe?",
                "Which region matches the text \" {REFEXP} \" ?",
                "Locate the \" {REFEXP} \" .",
                "Which region can be described as \" {REFEXP} \" ?",
                "Locate the region described by \" {REFEXP} \" .",
            ],
            &[("REFEXP", Text)],
        );
        add(
            TaskId::KeypointEstimation,
            "Find the human joints in the region {REGION} .",
            &["Where are the joints of the person in {REGION} ?", "Locate the keypoints in {REGION} ."],
            &[("REGION", Box)],
        );
        add(
            TaskId::ObjectSegmentation,
            "Segment the object \" {CLASS} \" .",
            &["What are the masks of \" {CLASS} \" ?", "Show every \" {CLASS} \" as a mask ."],
            &[("CLASS", Text)],
        );
        add(
            TaskId::DepthEstimation,
            "What is the depth map of the image ?",
            &["How far away is each pixel ?", "Estimate the depth of the image ."],
            &[],
        );
        add(
            TaskId::SurfaceNormals,
            "What is the surface normal of the image ?",
            &["Estimate the surface orientation .", "Which way does each surface face ?"],
            &[],
        );
        add(
            TaskId::ImageClassification,
            "What is this image ?",
            &["What category does this image belong to ?", "Classify the image ."],
            &[],
        );
        add(
            TaskId::ObjectCategorization,
            "What is the category of the region {REGION} ?",
            &["What object is in {REGION} ?", "Name the object in {REGION} ."],
            &[("REGION", Box)],
        );
        add(
            TaskId::ImageCaptioning,
            "What does the image describe ?",
            &["Describe the image .", "Write a caption for the image ."],
            &[],
        );
        add(
            TaskId::RegionCaptioning,
            "What does the region {REGION} describe ?",
            &["Describe the region {REGION} .", "Caption the area {REGION} ."],
            &[("REGION", Box)],
        );
        add(TaskId::Vqa, "{QUESTION}", &["Question : {QUESTION}", "Answer the question : {QUESTION}"], &[("QUESTION", Text)]);
        add(
            TaskId::GroundedVqa,
            "{QUESTION} Answer and show the evidence .",
            &["{QUESTION} Where is the evidence ?", "Answer with evidence : {QUESTION}"],
            &[("QUESTION", Text)],
        );
        add(
            TaskId::RelationshipDetection,
            "What is the relationship between {REGION} and {REGION2} ?",
            &["How is {REGION} related to {REGION2} ?", "Relation of {REGION} to {REGION2} ?"],
            &[("REGION", Box), ("REGION2", Box)],
        );
        add(
            TaskId::QuestionAnswering,
            "{QUESTION} Context : {CONTEXT}",
            &["Answer \" {QUESTION} \" using {CONTEXT}", "Context : {CONTEXT} Question : {QUESTION}"],
            &[("QUESTION", Text), ("CONTEXT", Text)],
        );
        add(
            TaskId::TextClassification,
            "{TEXT} {QUERY}",
            &["{QUERY} {TEXT}", "Text : {TEXT} Query : {QUERY}"],
            &[("TEXT", Text), ("QUERY", Text)],
        );
        add(
            TaskId::Summarization,
            "Summarize : {TEXT}",
            &["What is the summary of {TEXT}", "Give a headline for {TEXT}"],
            &[("TEXT", Text)],
        );
        add(TaskId::TextDenoising, "An image of", &["A picture of", "A photo of"], &[]);
        add(TaskId::ImageDenoising, "An image of", &["A picture of", "A photo of"], &[]);
        Self { format: REGISTRY_FORMAT.into(), version: REGISTRY_VERSION, tasks }
    }
}

impl PromptRegistry {
    /// Wording `variant` (0 = training prompt, i > 0 = paraphrase i) as a template.
    pub fn template(&self, task: TaskId, variant: usize) -> Result<PromptTemplate> {
        let e = self.tasks.get(&task).ok_or_else(|| Error::Task(format!("no prompt registered for {task:?}")))?;
        let template = match variant {
            0 => e.prompt.clone(),
            i => e
                .paraphrases
                .get(i - 1)
                .cloned()
                .ok_or_else(|| Error::Task(format!("{task:?} has only {} paraphrases", e.paraphrases.len())))?,
        };
        Ok(PromptTemplate { task, template, slots: e.slots.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != REGISTRY_FORMAT || self.version != REGISTRY_VERSION {
            return Err(Error::Config(format!("unsupported prompt registry {} v{}", self.format, self.version)));
        }
        for (task, e) in &self.tasks {
            if e.paraphrases.len() < 2 {
                return Err(Error::Config(format!("{task:?} needs at least two paraphrases")));
            }
            for v in 0..=e.paraphrases.len() {
                self.template(*task, v)?.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}
