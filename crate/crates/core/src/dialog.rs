//! Dialog records and the preprocessing that turns them into
//! (context, image, prefix, completion) samples.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{char_len, split_chars, stable_hash, unit_hash};

/// Default maximum prefix length in characters.
pub const DEFAULT_MAX_PREFIX_CHARS: usize = 512;

/// Default marker for the image position in flattened prompts.
pub const DEFAULT_IMAGE_TOKEN: &str = "<IMAGE>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    #[default]
    User,
    Partner,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "User",
            Speaker::Partner => "Partner",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// 1-based turn index inside the dialog; assigned on load.
    #[serde(skip)]
    pub position: usize,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
            image_ref: None,
            position: 0,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<i32>,
    pub turns: Vec<Utterance>,
}

impl Dialog {
    pub fn new(id: impl Into<String>, turns: Vec<Utterance>) -> Self {
        let mut d = Dialog {
            id: id.into(),
            relevance_score: None,
            turns,
        };
        d.number_turns();
        d
    }

    fn number_turns(&mut self) {
        for (i, t) in self.turns.iter_mut().enumerate() {
            t.position = i + 1;
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        self.turns.iter().find_map(|t| t.image_ref.as_deref())
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.turns.is_empty() {
            return Err("dialog has no turns".into());
        }
        if let Some(score) = self.relevance_score {
            if !(1..=5).contains(&score) {
                return Err(format!("relevance_score {score} outside 1..=5"));
            }
        }
        let images = self.turns.iter().filter(|t| t.image_ref.is_some()).count();
        if images > 1 {
            return Err(format!("{images} images in one dialog; at most one allowed"));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.text.trim().is_empty() && t.image_ref.is_none() {
                return Err(format!("turn {} has empty text and no image", i + 1));
            }
        }
        Ok(())
    }
}

/// Dialog history visible to a completer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogContext {
    #[serde(default)]
    pub history: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl DialogContext {
    /// Flattens the history plus a partially typed turn into one prompt.
    ///
    /// Each turn becomes a `Speaker: text` line. The turn that carries the
    /// image gets `image_token` in front of its text. When the image belongs
    /// to the turn being typed, the token goes on the final line instead.
    pub fn render(&self, speaker: Speaker, prefix: &str, image_token: &str) -> String {
        let image_in_history = self.history.iter().any(|t| t.image_ref.is_some());
        let mut out = String::new();
        let line = |out: &mut String, speaker: Speaker, text: &str, image: bool| {
            out.push_str(speaker.label());
            out.push(':');
            if image {
                out.push(' ');
                out.push_str(image_token);
            }
            if !text.is_empty() {
                out.push(' ');
                out.push_str(text);
            }
        };
        for turn in &self.history {
            line(&mut out, turn.speaker, &turn.text, turn.image_ref.is_some());
            out.push('\n');
        }
        line(
            &mut out,
            speaker,
            prefix,
            !image_in_history && self.image_ref.is_some(),
        );
        out
    }
}

/// One evaluation unit: history, optional image, typed prefix and the gold
/// continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSample {
    pub dialog_id: String,
    #[serde(flatten)]
    pub context: DialogContext,
    pub prefix: String,
    pub completion: String,
    #[serde(default)]
    pub speaker: Speaker,
}

impl PrefixSample {
    /// Split point in characters.
    pub fn split_point(&self) -> usize {
        char_len(&self.prefix)
    }

    /// The full final turn.
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.prefix.len() + self.completion.len());
        s.push_str(&self.prefix);
        s.push_str(&self.completion);
        s
    }

    fn number_turns(&mut self) {
        for (i, t) in self.context.history.iter_mut().enumerate() {
            t.position = i + 1;
        }
    }
}

pub fn interleave_format(sample: &PrefixSample, image_token: &str) -> String {
    sample
        .context
        .render(sample.speaker, &sample.prefix, image_token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_dialogs: usize,
    pub avg_utterance_len: f64,
    pub avg_n_utterances: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub dialogs: Vec<Dialog>,
    pub errors: Vec<RecordError>,
}

/// Reads a dialog JSONL file. Bad records are reported, not dropped silently.
pub fn ingest(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file)).map_err(|e| Error::io(path, e))
}

pub fn ingest_reader(reader: impl BufRead) -> std::io::Result<IngestReport> {
    let mut report = IngestReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Dialog>(&line)
            .map_err(|e| e.to_string())
            .and_then(|mut d| {
                d.validate()?;
                d.number_turns();
                Ok(d)
            });
        match parsed {
            Ok(d) => report.dialogs.push(d),
            Err(message) => report.errors.push(RecordError {
                line: idx + 1,
                message,
            }),
        }
    }
    Ok(report)
}

/// Keeps dialogs whose relevance score reaches `min_score`. Unscored dialogs
/// pass only when `min_score <= 0`.
pub fn relevance_gate(dialogs: Vec<Dialog>, min_score: i32) -> Vec<Dialog> {
    dialogs
        .into_iter()
        .filter(|d| match d.relevance_score {
            Some(s) => s >= min_score,
            None => min_score <= 0,
        })
        .collect()
}

/// Progressive unrolling: pair `j` has the first `j` turns as context and
/// turn `j + 1` as the turn to complete.
pub fn unroll(dialog: &Dialog) -> Vec<(&[Utterance], &Utterance)> {
    (1..dialog.turns.len())
        .map(|j| (&dialog.turns[..j], &dialog.turns[j]))
        .collect()
}

/// Draws a split point uniformly from `[1, len - 1]`.
pub fn draw_split_point(len: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    (len >= 2).then(|| rng.random_range(1..len))
}

/// Splits `text` at a seeded uniform character position. Returns `None` when
/// the text is shorter than two characters.
pub fn split(text: &str, seed: u64) -> Option<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = draw_split_point(char_len(text), &mut rng)?;
    let (p, c) = split_chars(text, at);
    Some((p.to_owned(), c.to_owned()))
}

pub fn compute_stats(dialogs: &[Dialog]) -> Result<DatasetStats> {
    if dialogs.is_empty() {
        return Err(Error::Empty("no dialogs"));
    }
    let n_turns: usize = dialogs.iter().map(|d| d.turns.len()).sum();
    let n_chars: usize = dialogs
        .iter()
        .flat_map(|d| &d.turns)
        .map(|t| char_len(&t.text))
        .sum();
    Ok(DatasetStats {
        n_dialogs: dialogs.len(),
        avg_utterance_len: n_chars as f64 / n_turns as f64,
        avg_n_utterances: n_turns as f64 / dialogs.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct PrepConfig {
    pub min_score: i32,
    pub seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            min_score: 4,
            seed: 42,
        }
    }
}

#[derive(Debug, Default)]
pub struct PrepOutput {
    pub samples: Vec<PrefixSample>,
    pub kept_dialogs: usize,
    pub skipped_short: usize,
}

/// Per-sample seed, independent of dialog order in the input file.
fn sample_seed(base: u64, dialog_id: &str, turn: usize) -> u64 {
    stable_hash(format!("{base}\u{1f}{dialog_id}\u{1f}{turn}").as_bytes())
}

/// Builds one sample per (context, final turn) pair of every dialog.
pub fn samples_from_dialog(dialog: &Dialog, seed: u64, skipped: &mut usize) -> Vec<PrefixSample> {
    let mut out = Vec::new();
    for (context, last) in unroll(dialog) {
        let Some((prefix, completion)) =
            split(&last.text, sample_seed(seed, &dialog.id, last.position))
        else {
            log::warn!(
                "dialog {} turn {}: text shorter than 2 characters, skipped",
                dialog.id,
                last.position
            );
            *skipped += 1;
            continue;
        };
        let image_ref = context
            .iter()
            .chain(std::iter::once(last))
            .find_map(|t| t.image_ref.clone());
        let mut sample = PrefixSample {
            dialog_id: dialog.id.clone(),
            context: DialogContext {
                history: context.to_vec(),
                image_ref,
            },
            prefix,
            completion,
            speaker: last.speaker,
        };
        sample.number_turns();
        out.push(sample);
    }
    out
}

/// Relevance gate, then unroll and split every surviving dialog.
pub fn prepare(dialogs: Vec<Dialog>, cfg: &PrepConfig) -> PrepOutput {
    let kept = relevance_gate(dialogs, cfg.min_score);
    let mut out = PrepOutput {
        kept_dialogs: kept.len(),
        ..Default::default()
    };
    for d in &kept {
        let s = samples_from_dialog(d, cfg.seed, &mut out.skipped_short);
        out.samples.extend(s);
    }
    out
}

/// Partitions dialogs into (train, test) at dialog level so unrolled
/// contexts of one dialog never straddle the split.
pub fn split_dialogs(dialogs: Vec<Dialog>, test_fraction: f64, seed: u64) -> (Vec<Dialog>, Vec<Dialog>) {
    let f = test_fraction.clamp(0.0, 1.0);
    dialogs
        .into_iter()
        .partition(|d| unit_hash(format!("{seed}\u{1f}{}", d.id).as_bytes()) >= f)
}

/// Shortens a prefix to its last `max_chars` characters.
pub fn clip_prefix(prefix: &str, max_chars: usize) -> &str {
    let len = char_len(prefix);
    if len <= max_chars {
        return prefix;
    }
    log::warn!("prefix of {len} characters truncated to the last {max_chars}");
    split_chars(prefix, len - max_chars).1
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<PrefixSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: PrefixSample = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        s.number_turns();
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Each distinct turn of the dialogs behind `samples`, counted once per
/// occurrence in the corpus. Turns repeated across unrolled samples of the
/// same dialog are not double counted.
pub fn utterance_corpus(samples: &[PrefixSample]) -> Vec<(String, u64)> {
    use std::collections::{BTreeMap, HashSet};
    let mut seen: HashSet<(&str, usize)> = HashSet::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in samples {
        let last_pos = s.context.history.len() + 1;
        for t in &s.context.history {
            if seen.insert((&s.dialog_id, t.position)) && !t.text.is_empty() {
                *counts.entry(t.text.clone()).or_default() += 1;
            }
        }
        if seen.insert((&s.dialog_id, last_pos)) {
            *counts.entry(s.full_text()).or_default() += 1;
        }
    }
    counts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_turns() -> Dialog {
        Dialog::new(
            "d1",
            vec![
                Utterance::new(Speaker::User, "Look at my dog"),
                Utterance::new(Speaker::Partner, "That looks amazing!").with_image("img/1.jpg"),
                Utterance::new(Speaker::User, "He loves the park"),
            ],
        )
    }

    #[test]
    fn ingest_parses_turns_in_order() {
        let line = r#"{"id":"a","relevance_score":5,"turns":[{"speaker":"user","text":"hi"},{"speaker":"partner","text":"hello there"}]}"#;
        let r = ingest_reader(line.as_bytes()).unwrap();
        assert!(r.errors.is_empty());
        assert_eq!(r.dialogs.len(), 1);
        let d = &r.dialogs[0];
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[1].speaker, Speaker::Partner);
        assert_eq!(d.turns[1].position, 2);
    }

    #[test]
    fn ingest_reports_missing_text() {
        let line = r#"{"id":"a","turns":[{"speaker":"user"}]}"#;
        let r = ingest_reader(line.as_bytes()).unwrap();
        assert!(r.dialogs.is_empty());
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].line, 1);
        assert!(r.errors[0].message.contains("text"), "{}", r.errors[0]);
    }

    #[test]
    fn ingest_keeps_good_lines_around_a_bad_one() {
        let data = concat!(
            r#"{"id":"a","turns":[{"speaker":"user","text":"x"}]}"#,
            "\n",
            r#"{"id":"b","turns":[{"speaker":"robot","text":"x"}]}"#,
            "\n",
            r#"{"id":"c","turns":[{"speaker":"partner","text":"y"}]}"#,
            "\n"
        );
        let r = ingest_reader(data.as_bytes()).unwrap();
        assert_eq!(r.dialogs.len(), 2);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].line, 2);
    }

    #[test]
    fn ingest_rejects_two_images() {
        let line = r#"{"id":"a","turns":[{"speaker":"user","text":"x","image_ref":"1"},{"speaker":"user","text":"y","image_ref":"2"}]}"#;
        let r = ingest_reader(line.as_bytes()).unwrap();
        assert_eq!(r.errors.len(), 1);
    }

    #[test]
    fn gate_threshold() {
        let ds: Vec<Dialog> = [5, 4, 3, 2, 1]
            .iter()
            .map(|&s| {
                let mut d = Dialog::new(format!("d{s}"), vec![Utterance::new(Speaker::User, "x")]);
                d.relevance_score = Some(s);
                d
            })
            .collect();
        let kept = relevance_gate(ds.clone(), 4);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].id, "d5");
        assert_eq!(relevance_gate(kept.clone(), 4), kept);
    }

    #[test]
    fn gate_unscored_needs_nonpositive_threshold() {
        let d = Dialog::new("u", vec![Utterance::new(Speaker::User, "x")]);
        assert!(relevance_gate(vec![d.clone()], 1).is_empty());
        assert_eq!(relevance_gate(vec![d], 0).len(), 1);
    }

    #[test]
    fn unroll_sizes() {
        let d = three_turns();
        let pairs = unroll(&d);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.len(), 1);
        assert_eq!(pairs[1].0.len(), 2);
        assert_eq!(pairs[1].1.text, "He loves the park");

        let two = Dialog::new("2", d.turns[..2].to_vec());
        assert_eq!(unroll(&two).len(), 1);
        let one = Dialog::new("1", d.turns[..1].to_vec());
        assert!(unroll(&one).is_empty());
    }

    #[test]
    fn split_slices_at_drawn_point() {
        // find a seed that lands on 2 for "hello"
        let seed = (0..1000u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                draw_split_point(5, &mut rng) == Some(2)
            })
            .unwrap();
        assert_eq!(
            split("hello", seed),
            Some(("he".to_string(), "llo".to_string()))
        );
        assert_eq!(split("xy", 9), Some(("x".into(), "y".into())));
        assert_eq!(split("x", 9), None);
        assert_eq!(split("", 9), None);
    }

    #[test]
    fn split_is_reproducible() {
        assert_eq!(split("reproducible text", 7), split("reproducible text", 7));
    }

    #[test]
    fn interleave_reference_example() {
        let sample = PrefixSample {
            dialog_id: "x".into(),
            context: DialogContext {
                history: vec![
                    Utterance::new(Speaker::User, "That looks amazing!").with_image("i.jpg")
                ],
                image_ref: Some("i.jpg".into()),
            },
            prefix: "Tha".into(),
            completion: "nks".into(),
            speaker: Speaker::Partner,
        };
        let out = interleave_format(&sample, DEFAULT_IMAGE_TOKEN);
        assert_eq!(out, "User: <IMAGE> That looks amazing!\nPartner: Tha");
    }

    #[test]
    fn interleave_without_image() {
        let d = Dialog::new(
            "d",
            vec![
                Utterance::new(Speaker::User, "a"),
                Utterance::new(Speaker::Partner, "bb"),
            ],
        );
        let s = &samples_from_dialog(&d, 1, &mut 0)[0];
        let out = interleave_format(s, DEFAULT_IMAGE_TOKEN);
        assert!(!out.contains(DEFAULT_IMAGE_TOKEN));
        assert!(!out.ends_with('\n'));
        assert_eq!(out, "User: a\nPartner: b");
    }

    #[test]
    fn interleave_image_on_second_of_three() {
        let d = Dialog::new(
            "d",
            vec![
                Utterance::new(Speaker::User, "one"),
                Utterance::new(Speaker::Partner, "two").with_image("p.png"),
                Utterance::new(Speaker::User, "three"),
                Utterance::new(Speaker::Partner, "four"),
            ],
        );
        let samples = samples_from_dialog(&d, 3, &mut 0);
        let s = samples.last().unwrap();
        let out = interleave_format(s, "<IMG>");
        assert_eq!(out.matches("<IMG>").count(), 1);
        assert_eq!(out.lines().nth(1), Some("Partner: <IMG> two"));
    }

    #[test]
    fn interleave_image_on_typed_turn() {
        let d = Dialog::new(
            "d",
            vec![
                Utterance::new(Speaker::User, "one"),
                Utterance::new(Speaker::Partner, "look at this").with_image("p.png"),
            ],
        );
        let s = &samples_from_dialog(&d, 3, &mut 0)[0];
        assert_eq!(s.context.image_ref.as_deref(), Some("p.png"));
        let out = interleave_format(s, DEFAULT_IMAGE_TOKEN);
        assert_eq!(out.matches(DEFAULT_IMAGE_TOKEN).count(), 1);
        assert!(out.lines().last().unwrap().starts_with("Partner: <IMAGE> "));
    }

    #[test]
    fn stats_examples() {
        let d = Dialog::new(
            "d",
            vec![
                Utterance::new(Speaker::User, "abcd"),
                Utterance::new(Speaker::Partner, "abcdef"),
            ],
        );
        let s = compute_stats(&[d]).unwrap();
        assert_eq!((s.n_dialogs, s.avg_utterance_len, s.avg_n_utterances), (1, 5.0, 2.0));

        let one = Dialog::new("e", vec![Utterance::new(Speaker::User, "ab")]);
        let s = compute_stats(&[one]).unwrap();
        assert_eq!((s.n_dialogs, s.avg_utterance_len, s.avg_n_utterances), (1, 2.0, 1.0));

        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn stats_on_ten_dialog_fixture() {
        // dialog i has i+1 turns, each of length 10 * (i + 1)
        let dialogs: Vec<Dialog> = (0..10)
            .map(|i| {
                let turns = (0..=i)
                    .map(|_| Utterance::new(Speaker::User, "x".repeat(10 * (i + 1))))
                    .collect();
                Dialog::new(format!("d{i}"), turns)
            })
            .collect();
        let s = compute_stats(&dialogs).unwrap();
        // turns: 1+2+..+10 = 55; chars: sum (i+1)*10(i+1) = 10 * 385
        assert_eq!(s.n_dialogs, 10);
        assert!((s.avg_n_utterances - 5.5).abs() < 1e-12);
        assert!((s.avg_utterance_len - 3850.0 / 55.0).abs() < 1e-12);
    }

    #[test]
    fn clip_prefix_keeps_tail() {
        assert_eq!(clip_prefix("abcdef", 3), "def");
        assert_eq!(clip_prefix("abc", 3), "abc");
    }

    #[test]
    fn sample_jsonl_schema() {
        let d = three_turns();
        let s = &samples_from_dialog(&d, 1, &mut 0)[1];
        let v: serde_json::Value = serde_json::to_value(s).unwrap();
        for key in ["dialog_id", "history", "image_ref", "prefix", "completion"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: PrefixSample = serde_json::from_value(v).unwrap();
        assert_eq!(back.full_text(), "He loves the park");
    }

    #[test]
    fn corpus_counts_each_turn_once() {
        let d = three_turns();
        let samples = samples_from_dialog(&d, 1, &mut 0);
        let corpus = utterance_corpus(&samples);
        assert_eq!(corpus.len(), 3);
        assert!(corpus.iter().all(|(_, c)| *c == 1));
    }
}
