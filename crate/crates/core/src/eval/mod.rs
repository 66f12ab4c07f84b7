//! Benchmark scoring for high-resolution visual QA: a multiple-choice
//! protocol with strict letter matching and a free-form protocol graded
//! by a yes/no judge.

pub mod fixture;
pub mod judge;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::{build_prompt, detokenize, SpecialTokens};
use crate::model::{decode_greedy, AttentionKernel, ModelParams};
use crate::patch::{RawImage, ResizePolicy};

pub use judge::{
    judge_concurrently, ExternalJudge, ExternalJudgeConfig, Judge, JudgeJob, StubJudge,
};

pub const MC_HINT: &str = "Answer with the option letter from the given choices directly";
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qtype {
    Identification,
    Numerical,
    Color,
    Other,
}

impl Qtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Qtype::Identification => "identification",
            Qtype::Numerical => "numerical",
            Qtype::Color => "color",
            Qtype::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagRecord {
    pub id: String,
    /// Image path, relative to the dataset file on disk.
    pub image: PathBuf,
    pub question: String,
    pub options: Vec<String>,
    pub gold_letter: char,
    pub gold_freeform: String,
    pub qtype: Qtype,
}

impl MagRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("record {}: {msg}", self.id)));
        if self.options.len() != 4 {
            return bad(format!("expected 4 options, got {}", self.options.len()));
        }
        let distinct: HashSet<&str> = self.options.iter().map(String::as_str).collect();
        if distinct.len() != 4 {
            return bad("options are not distinct".into());
        }
        if self.question.trim().is_empty() || self.gold_freeform.trim().is_empty() {
            return bad("empty question or free-form answer".into());
        }
        let Some(idx) = self.gold_index() else {
            return bad(format!(
                "gold letter {:?} is not one of A-D",
                self.gold_letter
            ));
        };
        if self.options[idx] != self.gold_freeform {
            return bad(format!(
                "option {} is {:?} but the free-form answer is {:?}",
                self.gold_letter, self.options[idx], self.gold_freeform
            ));
        }
        Ok(())
    }

    pub fn gold_index(&self) -> Option<usize> {
        LETTERS.iter().position(|&l| l == self.gold_letter)
    }
}

/// Reads JSON-lines records, resolving image paths against the file's
/// directory. Ids must be unique.
pub fn load_records(path: &Path) -> Result<Vec<MagRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out: Vec<MagRecord> = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let input_err = |detail: String| Error::Input {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", n + 1),
        };
        let mut r: MagRecord = serde_json::from_str(line).map_err(|e| input_err(e.to_string()))?;
        r.validate().map_err(|e| input_err(e.to_string()))?;
        if !ids.insert(r.id.clone()) {
            return Err(input_err(format!("duplicate id {}", r.id)));
        }
        r.image = base.join(&r.image);
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Input {
            path: path.to_path_buf(),
            detail: "no records".into(),
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[MagRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hint line, question, then the options lettered in stored order.
pub fn format_mc_prompt(r: &MagRecord) -> String {
    let mut s = format!("{MC_HINT}\n{}", r.question);
    for (letter, opt) in LETTERS.iter().zip(&r.options) {
        let _ = write!(s, "\n{letter}. {opt}");
    }
    s
}

pub fn format_freeform_prompt(r: &MagRecord) -> String {
    r.question.clone()
}

/// Trim, drop one trailing punctuation mark, uppercase.
pub fn normalize_mc(response: &str) -> String {
    let t = response.trim();
    let t = match t.chars().last() {
        Some(c) if c.is_ascii_punctuation() => &t[..t.len() - 1],
        _ => t,
    };
    t.to_uppercase()
}

pub fn score_mc(response: &str, gold: char) -> bool {
    let n = normalize_mc(response);
    let mut chars = n.chars();
    chars.next() == Some(gold) && chars.next().is_none()
}

/// The response must be the bare letter, nothing else.
pub fn score_mc_strict(response: &str, gold: char) -> bool {
    let mut chars = response.chars();
    chars.next() == Some(gold) && chars.next().is_none()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mc,
    Freeform,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Mc => "mc",
            Protocol::Freeform => "freeform",
        }
    }

    /// Parses `mc`, `freeform` or `both`.
    pub fn parse_set(s: &str) -> Result<Vec<Protocol>> {
        match s {
            "mc" => Ok(vec![Protocol::Mc]),
            "freeform" => Ok(vec![Protocol::Freeform]),
            "both" => Ok(vec![Protocol::Mc, Protocol::Freeform]),
            other => Err(Error::config(format!(
                "unknown protocol {other:?}; expected mc, freeform or both"
            ))),
        }
    }
}

/// Who decided correctness. Multiple-choice answers are matched by rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSource {
    Exact,
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub record_id: String,
    pub protocol: Protocol,
    pub qtype: Qtype,
    pub raw_response: String,
    /// `None` when the judge could not be reached.
    pub correct: Option<bool>,
    /// Bare-letter match, multiple choice only.
    pub strict_correct: Option<bool>,
    pub judge_source: JudgeSource,
}

/// Scores every record under each protocol. `respond` produces the model's
/// answer to a prompt; free-form answers are then judged with up to
/// `concurrency` judge calls in flight.
pub fn evaluate<F>(
    records: &[MagRecord],
    protocols: &[Protocol],
    mut respond: F,
    judge: &dyn Judge,
    concurrency: usize,
) -> Result<Vec<Verdict>>
where
    F: FnMut(&MagRecord, Protocol, &str) -> Result<String>,
{
    let mut verdicts = Vec::new();
    for &protocol in protocols {
        match protocol {
            Protocol::Mc => {
                for r in records {
                    let response = respond(r, protocol, &format_mc_prompt(r))?;
                    verdicts.push(Verdict {
                        record_id: r.id.clone(),
                        protocol,
                        qtype: r.qtype,
                        correct: Some(score_mc(&response, r.gold_letter)),
                        strict_correct: Some(score_mc_strict(&response, r.gold_letter)),
                        raw_response: response,
                        judge_source: JudgeSource::Exact,
                    });
                }
            }
            Protocol::Freeform => {
                let mut jobs = Vec::with_capacity(records.len());
                for r in records {
                    jobs.push(JudgeJob {
                        question: r.question.clone(),
                        gold: r.gold_freeform.clone(),
                        response: respond(r, protocol, &format_freeform_prompt(r))?,
                    });
                }
                let outcomes = judge_concurrently(&jobs, judge, concurrency);
                for ((r, job), outcome) in records.iter().zip(jobs).zip(outcomes) {
                    let correct = match outcome {
                        Ok(v) => Some(v),
                        Err(e) => {
                            log::warn!("record {} left unjudged: {e}", r.id);
                            None
                        }
                    };
                    verdicts.push(Verdict {
                        record_id: r.id.clone(),
                        protocol,
                        qtype: r.qtype,
                        raw_response: job.response,
                        correct,
                        strict_correct: None,
                        judge_source: judge.source(),
                    });
                }
            }
        }
    }
    Ok(verdicts)
}

/// Greedy answers from a checkpoint, with records' images at `policy`.
pub fn model_responder<'a, R: Rng>(
    params: &'a ModelParams,
    policy: &'a ResizePolicy,
    specials: &'a SpecialTokens,
    max_new: usize,
    mut rng: R,
) -> impl FnMut(&MagRecord, Protocol, &str) -> Result<String> + 'a
where
    R: 'a,
{
    move |r, _, prompt| {
        let image = RawImage::load(&r.image)?;
        let seq = build_prompt(&image, prompt, policy, specials, &mut rng)?;
        let budget = max_new.min(params.config().max_seq.saturating_sub(seq.len()));
        if budget == 0 {
            return Err(Error::Capacity {
                len: seq.len(),
                max_seq: params.config().max_seq,
            });
        }
        let mut ids = decode_greedy(params, &seq, budget, specials.eos, AttentionKernel::Naive)?;
        if ids.last() == Some(&specials.eos) {
            ids.pop();
        }
        Ok(detokenize(&ids))
    }
}

/// Uniform random letters scored against `records`, cycling through them
/// for `trials` draws.
pub fn random_guess_accuracy<R: Rng + ?Sized>(
    records: &[MagRecord],
    trials: usize,
    rng: &mut R,
) -> f64 {
    if records.is_empty() || trials == 0 {
        return 0.0;
    }
    let hits = (0..trials)
        .filter(|t| {
            let guess = LETTERS[rng.random_range(0..4)];
            score_mc(&guess.to_string(), records[t % records.len()].gold_letter)
        })
        .count();
    hits as f64 / trials as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub judged: usize,
    pub correct: usize,
    /// Percentage of judged items; absent when nothing was judged.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl Tally {
    fn add(&mut self, correct: Option<bool>) {
        self.total += 1;
        if let Some(c) = correct {
            self.judged += 1;
            self.correct += usize::from(c);
        }
        self.accuracy = (self.judged > 0).then(|| 100.0 * self.correct as f64 / self.judged as f64);
    }

    pub fn unjudged(&self) -> usize {
        self.total - self.judged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub overall: Tally,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict: Option<Tally>,
    pub by_qtype: BTreeMap<Qtype, Tally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocols: Vec<ProtocolReport>,
}

/// Tallies per protocol and per question type. Protocols are never pooled.
pub fn report(verdicts: &[Verdict]) -> Result<EvalReport> {
    if verdicts.is_empty() {
        return Err(Error::contract("no verdicts to report"));
    }
    let mut by_protocol: BTreeMap<Protocol, ProtocolReport> = BTreeMap::new();
    for v in verdicts {
        let rep = by_protocol
            .entry(v.protocol)
            .or_insert_with(|| ProtocolReport {
                protocol: v.protocol,
                overall: Tally::default(),
                strict: None,
                by_qtype: BTreeMap::new(),
            });
        rep.overall.add(v.correct);
        rep.by_qtype.entry(v.qtype).or_default().add(v.correct);
        if let Some(s) = v.strict_correct {
            rep.strict.get_or_insert_with(Tally::default).add(Some(s));
        }
    }
    Ok(EvalReport {
        protocols: by_protocol.into_values().collect(),
    })
}

impl EvalReport {
    pub fn protocol(&self, p: Protocol) -> Option<&ProtocolReport> {
        self.protocols.iter().find(|r| r.protocol == p)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:<16} {:>8} {:>8} {:>9}\n",
            "protocol", "qtype", "judged", "correct", "accuracy"
        );
        let mut row = |proto: &str, q: &str, t: &Tally| {
            let acc = t
                .accuracy
                .map_or_else(|| "-".to_string(), |a| format!("{a:.1}"));
            let _ = writeln!(
                out,
                "{proto:<12} {q:<16} {:>8} {:>8} {acc:>9}",
                format!("{}/{}", t.judged, t.total),
                t.correct
            );
        };
        for p in &self.protocols {
            row(p.protocol.as_str(), "all", &p.overall);
            for (q, t) in &p.by_qtype {
                row(p.protocol.as_str(), q.as_str(), t);
            }
            if let Some(s) = &p.strict {
                row("mc-strict", "all", s);
            }
        }
        for p in &self.protocols {
            if p.overall.unjudged() > 0 {
                let _ = writeln!(
                    out,
                    "warning: {} {} items unjudged",
                    p.overall.unjudged(),
                    p.protocol.as_str()
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MagRecord {
        MagRecord {
            id: "r0".into(),
            image: "img.png".into(),
            question: "What is on the shelf?".into(),
            options: vec![
                "cup".into(),
                "red cup".into(),
                "plate".into(),
                "bowl".into(),
            ],
            gold_letter: 'B',
            gold_freeform: "red cup".into(),
            qtype: Qtype::Identification,
        }
    }

    #[test]
    fn mc_prompt_layout() {
        let p = format_mc_prompt(&record());
        assert!(p.starts_with(MC_HINT));
        let lines: Vec<&str> = p.lines().collect();
        assert_eq!(lines[1], "What is on the shelf?");
        assert_eq!(
            &lines[2..],
            &["A. cup", "B. red cup", "C. plate", "D. bowl"]
        );
        for l in LETTERS {
            assert_eq!(p.matches(&format!("\n{l}. ")).count(), 1);
        }
        assert_eq!(p, format_mc_prompt(&record()));
    }

    #[test]
    fn mc_scoring_examples() {
        assert!(score_mc("B", 'B'));
        assert!(score_mc(" b.", 'B'));
        assert!(!score_mc("The answer is B", 'B'));
        assert!(!score_mc("B..", 'B'));
        assert!(!score_mc("", 'B'));
        assert!(!score_mc("A", 'B'));
        assert!(score_mc_strict("B", 'B'));
        assert!(!score_mc_strict(" b.", 'B'));
    }

    #[test]
    fn record_invariants() {
        assert!(record().validate().is_ok());
        let mut r = record();
        r.options[2] = "cup".into();
        assert!(r.validate().is_err());
        let mut r = record();
        r.gold_letter = 'E';
        assert!(r.validate().is_err());
        let mut r = record();
        r.gold_freeform = "plate".into();
        assert!(r.validate().is_err());
        let mut r = record();
        r.options.pop();
        assert!(r.validate().is_err());
    }

    fn verdict(protocol: Protocol, qtype: Qtype, correct: Option<bool>) -> Verdict {
        Verdict {
            record_id: "x".into(),
            protocol,
            qtype,
            raw_response: String::new(),
            correct,
            strict_correct: None,
            judge_source: JudgeSource::Stub,
        }
    }

    #[test]
    fn report_accuracy_and_separation() {
        let mut vs: Vec<Verdict> = [true, true, true, false]
            .iter()
            .map(|&c| verdict(Protocol::Mc, Qtype::Color, Some(c)))
            .collect();
        vs.push(verdict(Protocol::Freeform, Qtype::Color, Some(false)));
        let rep = report(&vs).unwrap();
        assert_eq!(
            rep.protocol(Protocol::Mc).unwrap().overall.accuracy,
            Some(75.0)
        );
        assert_eq!(
            rep.protocol(Protocol::Freeform).unwrap().overall.accuracy,
            Some(0.0)
        );
        assert_eq!(rep.protocol(Protocol::Mc).unwrap().overall.total, 4);
    }

    #[test]
    fn all_unjudged_reports_no_accuracy() {
        let vs: Vec<Verdict> = (0..3)
            .map(|_| verdict(Protocol::Freeform, Qtype::Other, None))
            .collect();
        let rep = report(&vs).unwrap();
        let t = &rep.protocols[0].overall;
        assert_eq!((t.judged, t.total, t.accuracy), (0, 3, None));
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["protocols"][0]["overall"].get("accuracy").is_none());
        assert!(rep.to_text().contains("3 freeform items unjudged"));
        assert!(report(&[]).is_err());
    }

    #[test]
    fn protocol_sets() {
        assert_eq!(Protocol::parse_set("both").unwrap().len(), 2);
        assert!(Protocol::parse_set("all").is_err());
    }
}
