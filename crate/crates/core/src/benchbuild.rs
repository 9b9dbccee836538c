//! Benchmark construction pipelines over annotation records.
//!
//! Video sources (scene-graph frames, event boundaries, cooking segments) are
//! filtered into candidate image/caption pairs. Synthetic sources (rendered
//! scenes, diffusion prompts) are produced as caption pairs that differ in
//! exactly one phrase. Nothing here touches pixels: face detection is an
//! injected predicate and image generation is out of the picture entirely.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod rules {
    pub const AG_RELATION_DIFF: &str = "ag_relation_diff_ge_2";
    pub const AG_SKIP_NEXT: &str = "ag_skip_next_2";
    pub const GEBC_STRIDE: &str = "gebc_boundary_stride_2";
    pub const GEBC_ACTION_WORD: &str = "gebc_action_word";
    pub const GEBC_SAME_CAPTION: &str = "gebc_same_caption";
    pub const YOUCOOK2_MIDDLE_FRAME: &str = "youcook2_middle_frame";
    pub const YOUCOOK2_FACE: &str = "youcook2_face_filter";
}

/// Action words that cannot be judged from a single static frame.
pub const DEFAULT_ACTION_WORDS: [&str; 5] = ["up", "down", "upward", "downward", "towards"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgFrame {
    pub index: u64,
    pub attention_rel: String,
    pub spatial_rel: String,
    pub contact_rel: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GebcBoundary {
    pub index: u64,
    pub caption_before: String,
    pub caption_after: String,
    pub frame_before: String,
    pub frame_after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CookingSegment {
    pub start: u64,
    pub end: u64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub frame: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub source: String,
    pub item1: CandidateItem,
    pub item2: CandidateItem,
    pub filter_trace: Vec<String>,
}

/// `The person is <attention> <object> which is <spatial> him/her.`
pub fn ag_caption(f: &AgFrame) -> Result<String> {
    let field = |value: &str, name: &'static str| -> Result<String> {
        let words: Vec<&str> = value.split_whitespace().collect();
        if words.is_empty() {
            Err(Error::MissingField(name))
        } else {
            Ok(words.join(" "))
        }
    };
    Ok(format!(
        "The person is {} {} which is {} him/her.",
        field(&f.attention_rel, "attention_rel")?,
        field(&f.object, "object")?,
        field(&f.spatial_rel, "spatial_rel")?,
    ))
}

fn relation_diffs(a: &AgFrame, b: &AgFrame) -> usize {
    [
        a.attention_rel != b.attention_rel,
        a.spatial_rel != b.spatial_rel,
        a.contact_rel != b.contact_rel,
    ]
    .into_iter()
    .filter(|&d| d)
    .count()
}

/// Greedy forward scan: from the current anchor, the first later frame that
/// differs in at least two of (attention, spatial, contact) forms a pair; the
/// scan then skips the frame right after the selected one and resumes with a
/// new anchor two positions later. The scan never looks back, so the pairs
/// with second index below `t` depend only on `frames[..t]`.
pub fn ag_select_pairs(frames: &[AgFrame]) -> Result<Vec<CandidatePair>> {
    let mut pairs = Vec::new();
    let mut anchor = 0;
    let mut j = 1;
    while j < frames.len() {
        if relation_diffs(&frames[anchor], &frames[j]) >= 2 {
            pairs.push(CandidatePair {
                source: "ag".into(),
                item1: CandidateItem {
                    frame: frames[anchor].index.to_string(),
                    caption: ag_caption(&frames[anchor])?,
                },
                item2: CandidateItem {
                    frame: frames[j].index.to_string(),
                    caption: ag_caption(&frames[j])?,
                },
                filter_trace: vec![rules::AG_RELATION_DIFF.into(), rules::AG_SKIP_NEXT.into()],
            });
            anchor = j + 2;
            j = anchor + 1;
        } else {
            j += 1;
        }
    }
    Ok(pairs)
}

fn lowercase_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// First action word appearing as a whole word in `caption`, case-insensitive.
pub fn find_action_word<'a>(caption: &str, action_words: &'a BTreeSet<String>) -> Option<&'a str> {
    lowercase_words(caption).find_map(|w| action_words.get(&w).map(String::as_str))
}

pub fn default_action_words() -> BTreeSet<String> {
    DEFAULT_ACTION_WORDS.iter().map(|w| w.to_string()).collect()
}

/// Outcome of a filtering pipeline: kept items plus per-rule drop counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Selection<T> {
    pub kept: Vec<T>,
    pub dropped: Vec<(String, usize)>,
}

impl<T> Selection<T> {
    fn drop(&mut self, rule: &str) {
        match self.dropped.iter_mut().find(|(r, _)| r == rule) {
            Some((_, n)) => *n += 1,
            None => self.dropped.push((rule.to_string(), 1)),
        }
    }

    pub fn dropped_by(&self, rule: &str) -> usize {
        self.dropped
            .iter()
            .find(|(r, _)| r == rule)
            .map_or(0, |(_, n)| *n)
    }
}

/// Pair the frame before boundary `i` with the frame before boundary `i + 2`
/// for `i = 0, 2, 4, ...`, dropping pairs whose captions use an action word
/// or repeat each other.
/// `action_words` must be lowercase.
pub fn gebc_select(boundaries: &[GebcBoundary], action_words: &BTreeSet<String>) -> Selection<CandidatePair> {
    let mut out = Selection {
        kept: Vec::new(),
        dropped: Vec::new(),
    };
    for i in (0..boundaries.len()).step_by(2) {
        let Some(second) = boundaries.get(i + 2) else { break };
        let first = &boundaries[i];
        let flagged = [&first.caption_before, &second.caption_before]
            .into_iter()
            .any(|c| find_action_word(c, action_words).is_some());
        if flagged {
            out.drop(rules::GEBC_ACTION_WORD);
            continue;
        }
        if first.caption_before.trim() == second.caption_before.trim() {
            out.drop(rules::GEBC_SAME_CAPTION);
            continue;
        }
        out.kept.push(CandidatePair {
            source: "gebc".into(),
            item1: CandidateItem {
                frame: first.frame_before.clone(),
                caption: first.caption_before.clone(),
            },
            item2: CandidateItem {
                frame: second.frame_before.clone(),
                caption: second.caption_before.clone(),
            },
            filter_trace: vec![
                rules::GEBC_STRIDE.into(),
                rules::GEBC_ACTION_WORD.into(),
                rules::GEBC_SAME_CAPTION.into(),
            ],
        });
    }
    out
}

/// Decides whether a frame may be kept; stands in for a face detector.
pub trait FramePredicate {
    fn keep(&self, frame: u64) -> bool;
}

impl<F: Fn(u64) -> bool> FramePredicate for F {
    fn keep(&self, frame: u64) -> bool {
        self(frame)
    }
}

/// Keeps every frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysPass;

impl FramePredicate for AlwaysPass {
    fn keep(&self, _frame: u64) -> bool {
        true
    }
}

/// Rejects the listed frame ids.
#[derive(Debug, Clone, Default)]
pub struct RejectList(pub BTreeSet<u64>);

impl FramePredicate for RejectList {
    fn keep(&self, frame: u64) -> bool {
        !self.0.contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedFrame {
    pub frame: u64,
    pub caption: String,
    pub filter_trace: Vec<String>,
}

pub fn youcook2_select(
    segments: &[CookingSegment],
    face_filter: &dyn FramePredicate,
) -> Result<Selection<SelectedFrame>> {
    let mut out = Selection {
        kept: Vec::new(),
        dropped: Vec::new(),
    };
    for (index, seg) in segments.iter().enumerate() {
        if seg.start >= seg.end {
            return Err(Error::BadSegment {
                index,
                start: seg.start,
                end: seg.end,
            });
        }
        let middle = seg.start + (seg.end - seg.start) / 2;
        if !face_filter.keep(middle) {
            out.drop(rules::YOUCOOK2_FACE);
            continue;
        }
        out.kept.push(SelectedFrame {
            frame: middle,
            caption: seg.caption.clone(),
            filter_trace: vec![rules::YOUCOOK2_MIDDLE_FRAME.into(), rules::YOUCOOK2_FACE.into()],
        });
    }
    Ok(out)
}

/// Word tokens of a caption, with sentence punctuation split off.
pub fn caption_tokens(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        match word.strip_suffix(['.', ',', '!', '?']) {
            Some(stem) if !stem.is_empty() => {
                out.push(stem);
                out.push(&word[stem.len()..]);
            }
            _ => out.push(word),
        }
    }
    out
}

/// Picks uniformly among `values` other than `current`.
fn other_value<'a, R: Rng + ?Sized>(values: &'a [String], current: &str, what: &str, rng: &mut R) -> Result<&'a str> {
    let others: Vec<&String> = values.iter().filter(|v| v.as_str() != current).collect();
    if others.is_empty() {
        return Err(Error::UneditableAspect(what.to_string()));
    }
    Ok(others[rng.random_range(0..others.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KubricAspect {
    Location,
    Counting,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KubricVocab {
    pub objects: Vec<String>,
    pub counts: Vec<String>,
    pub attributes: Vec<String>,
    pub locations: Vec<String>,
}

impl Default for KubricVocab {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            objects: own(&["clock", "cube", "sphere", "cylinder", "teapot", "chair"]),
            counts: own(&["1", "2", "3", "4", "5"]),
            attributes: own(&["red", "blue", "green", "yellow", "metal", "rubber"]),
            locations: own(&["on the left", "on the right", "in the center", "in the back", "in the front"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KubricScene {
    pub object: String,
    pub count: String,
    pub attribute: String,
    pub location: String,
}

impl KubricScene {
    pub fn caption(&self) -> String {
        format!(
            "There are {} {} {} {}.",
            self.count, self.attribute, self.object, self.location
        )
    }

    pub fn random<R: Rng + ?Sized>(vocab: &KubricVocab, rng: &mut R) -> Result<Self> {
        let pick = |xs: &[String], what: &'static str, rng: &mut R| -> Result<String> {
            if xs.is_empty() {
                return Err(Error::EmptySubset(what.into()));
            }
            Ok(xs[rng.random_range(0..xs.len())].clone())
        };
        Ok(Self {
            object: pick(&vocab.objects, "objects", rng)?,
            count: pick(&vocab.counts, "counts", rng)?,
            attribute: pick(&vocab.attributes, "attributes", rng)?,
            location: pick(&vocab.locations, "locations", rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangedPhrase {
    pub old: String,
    pub new: String,
}

/// Two captions of one scene template that differ only in the phrase of `aspect`.
pub fn kubric_captions<R: Rng + ?Sized>(
    aspect: KubricAspect,
    scene: &KubricScene,
    vocab: &KubricVocab,
    rng: &mut R,
) -> Result<(String, String, ChangedPhrase)> {
    let mut edited = scene.clone();
    let (old, new) = match aspect {
        KubricAspect::Counting => {
            edited.count = other_value(&vocab.counts, &scene.count, "counting", rng)?.to_string();
            (&scene.count, &edited.count)
        }
        KubricAspect::Attribute => {
            edited.attribute = other_value(&vocab.attributes, &scene.attribute, "attribute", rng)?.to_string();
            (&scene.attribute, &edited.attribute)
        }
        KubricAspect::Location => {
            edited.location = other_value(&vocab.locations, &scene.location, "location", rng)?.to_string();
            (&scene.location, &edited.location)
        }
    };
    let changed = ChangedPhrase {
        old: old.clone(),
        new: new.clone(),
    };
    Ok((scene.caption(), edited.caption(), changed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdEditCategory {
    ObjectChange,
    SceneChange,
    AttributeChange,
}

/// Objects that can stand in for each other, with the scenes and attributes
/// that make sense for all of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdSubset {
    pub objects: Vec<String>,
    pub scenes: Vec<String>,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdVocab {
    pub subsets: Vec<SdSubset>,
}

impl Default for SdVocab {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            subsets: vec![
                SdSubset {
                    objects: own(&["horse", "cattle", "elephant", "goat", "deer", "camel", "zebra"]),
                    scenes: own(&["standing on the grass", "in the desert", "near the river", "in the zoo"]),
                    attributes: own(&["with a saddle", "with a blanket", "with a garland"]),
                },
                SdSubset {
                    objects: own(&["dog", "cat", "rabbit", "fox", "bear"]),
                    scenes: own(&["in the winter", "on the beach", "in the forest", "on the sofa"]),
                    attributes: own(&["with a sunglasses", "with a hat", "with a scarf"]),
                },
                SdSubset {
                    objects: own(&["car", "bus", "truck", "bicycle"]),
                    scenes: own(&["on the street", "in the parking lot", "on the bridge"]),
                    attributes: own(&["painted red", "painted blue", "covered in snow"]),
                },
            ],
        }
    }
}

impl SdVocab {
    pub fn subset_of(&self, object: &str) -> Result<&SdSubset> {
        self.subsets
            .iter()
            .find(|s| s.objects.iter().any(|o| o == object))
            .ok_or_else(|| Error::EmptySubset(format!("no subset contains object {object:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdSlots {
    pub object: String,
    pub scene: Option<String>,
    pub attribute: Option<String>,
}

impl SdSlots {
    /// `A photo of a <object>[ <attribute>][ <scene>].`
    pub fn caption(&self) -> String {
        let mut words = vec!["A photo of a", self.object.as_str()];
        words.extend(self.attribute.as_deref());
        words.extend(self.scene.as_deref());
        format!("{}.", words.join(" "))
    }
}

fn pick_other<'a, R: Rng + ?Sized>(
    pool: &'a [String],
    current: Option<&str>,
    what: &str,
    rng: &mut R,
) -> Result<&'a str> {
    let others: Vec<&String> = pool.iter().filter(|v| Some(v.as_str()) != current).collect();
    if others.is_empty() {
        return Err(Error::EmptySubset(what.to_string()));
    }
    Ok(others[rng.random_range(0..others.len())])
}

/// Apply one textual minimal edit to `base`. Object swaps stay within the
/// object's subset; scene and attribute edits replace the existing phrase or
/// append one drawn from the subset.
pub fn sd_caption_edit<R: Rng + ?Sized>(
    base: &SdSlots,
    category: SdEditCategory,
    vocab: &SdVocab,
    rng: &mut R,
) -> Result<(String, String)> {
    let subset = vocab.subset_of(&base.object)?;
    let mut edited = base.clone();
    match category {
        SdEditCategory::ObjectChange => {
            edited.object = pick_other(&subset.objects, Some(&base.object), "objects", rng)?.to_string();
        }
        SdEditCategory::SceneChange => {
            edited.scene = Some(pick_other(&subset.scenes, base.scene.as_deref(), "scenes", rng)?.to_string());
        }
        SdEditCategory::AttributeChange => {
            edited.attribute =
                Some(pick_other(&subset.attributes, base.attribute.as_deref(), "attributes", rng)?.to_string());
        }
    }
    Ok((base.caption(), edited.caption()))
}

/// Token spans `(start, end)` in each caption that remain after stripping the
/// longest common word prefix and suffix.
pub fn token_diff(a: &str, b: &str) -> ((usize, usize), (usize, usize)) {
    let (ta, tb) = (caption_tokens(a), caption_tokens(b));
    let prefix = ta.iter().zip(&tb).take_while(|(x, y)| x == y).count();
    let max_suffix = ta.len().min(tb.len()) - prefix;
    let suffix = ta
        .iter()
        .rev()
        .zip(tb.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    ((prefix, ta.len() - suffix), (prefix, tb.len() - suffix))
}
