//! Multi-label metrics, label extraction from generated reports, report
//! judging, and the evaluation loop.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{JudgeConfig, JudgeKind, ScoreSource};
use crate::data::dataset::answer_for;
use crate::data::signal::incompatible;
use crate::data::{ClassCatalog, EcgClass, GrayImage, LoadedSample};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::tokenizer::{tokenize, TokenSequence, EOS};

pub const JUDGE_URL_ENV: &str = "ECGLAB_JUDGE_URL";

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. `None` when either class
/// is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    // Average ranks over tied groups, then the rank-sum statistic.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

fn check_same_shape(a: &[Vec<u8>], b: &[Vec<u8>]) -> Result<usize> {
    let cols = a.first().map_or(0, Vec::len);
    if a.len() != b.len() || a.iter().chain(b).any(|r| r.len() != cols) {
        return Err(Error::Shape("prediction and truth matrices differ in shape".into()));
    }
    Ok(cols)
}

/// Unweighted mean of per-class F1; a class with no predicted and no true
/// positives scores 0.
pub fn macro_f1(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    let classes = check_same_shape(pred, truth)?;
    if classes == 0 {
        return Err(Error::Shape("no classes".into()));
    }
    let mut total = 0.0;
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, t) in pred.iter().zip(truth) {
            match (p[c] != 0, t[c] != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / classes as f64)
}

/// Fraction of mismatched label bits.
pub fn hamming_loss(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    let classes = check_same_shape(pred, truth)?;
    let cells = pred.len() * classes;
    if cells == 0 {
        return Err(Error::Shape("empty label matrix".into()));
    }
    let wrong: usize = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| (**a != 0) != (**b != 0)).count())
        .sum();
    Ok(wrong as f64 / cells as f64)
}

/// Lowercase words with punctuation removed.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bit per class: set iff the class name occurs as a whole phrase,
/// case-insensitively.
pub fn extract_labels(text: &str, catalog: &ClassCatalog) -> Vec<u8> {
    let hay = format!(" {} ", words(text).join(" "));
    catalog
        .classes
        .iter()
        .map(|c| u8::from(hay.contains(&format!(" {} ", c.canonical_name()))))
        .collect()
}

/// `100 × F1` of the two reports' word multisets.
pub fn word_f1_score(generated: &str, reference: &str) -> f64 {
    let (g, r) = (words(generated), words(reference));
    if g.is_empty() && r.is_empty() {
        return 100.0;
    }
    if g.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut pool: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for w in &r {
        *pool.entry(w.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &g {
        if let Some(n) = pool.get_mut(w.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    // Harmonic mean of precision and recall, in a form that is exactly symmetric.
    100.0 * 2.0 * overlap as f64 / (g.len() + r.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub generated: String,
    pub reference: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub score: f64,
    #[serde(default)]
    pub rationale: String,
}

pub trait Judge: Sync {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse>;
    fn name(&self) -> &'static str;
}

pub struct BuiltinJudge;

impl Judge for BuiltinJudge {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse> {
        Ok(JudgeResponse {
            score: word_f1_score(&req.generated, &req.reference),
            rationale: "word-overlap F1".into(),
        })
    }

    fn name(&self) -> &'static str {
        "builtin"
    }
}

/// Posts each request as JSON and reads `{"score", "rationale"}` back.
pub struct RemoteJudge {
    url: String,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        RemoteJudge {
            url: url.to_string(),
            agent,
        }
    }
}

impl Judge for RemoteJudge {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse> {
        let body = serde_json::to_string(req).expect("serializable");
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| Error::Judge(format!("{}: {e}", self.url)))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Judge(format!("{}: reading response: {e}", self.url)))?;
        let mut parsed: JudgeResponse =
            serde_json::from_str(&text).map_err(|e| Error::Judge(format!("{}: malformed response: {e}", self.url)))?;
        if !parsed.score.is_finite() {
            return Err(Error::Judge(format!("{}: non-finite score", self.url)));
        }
        parsed.score = parsed.score.clamp(0.0, 100.0);
        Ok(parsed)
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

/// Builtin judge, or a remote one at the configured URL (falling back to
/// the environment variable).
pub fn judge_from_config(cfg: &JudgeConfig) -> Result<Box<dyn Judge>> {
    match cfg.kind {
        JudgeKind::Builtin => Ok(Box::new(BuiltinJudge)),
        JudgeKind::Remote => {
            let url = match &cfg.url {
                Some(u) => u.clone(),
                None => std::env::var(JUDGE_URL_ENV)
                    .map_err(|_| Error::Config(format!("remote judge needs judge.url or {JUDGE_URL_ENV}")))?,
            };
            Ok(Box::new(RemoteJudge::new(&url, Duration::from_secs_f64(cfg.timeout_s))))
        }
    }
}

/// Anything that writes a report for an image.
pub trait ReportModel: Sync {
    fn report(&self, image: &GrayImage, question: &str) -> Result<String>;

    /// Continuous per-class scores for AUC, when the model offers them.
    fn class_scores(&self, _image: &GrayImage, _question: &str) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Every label set the dataset can produce: single classes and compatible
/// abnormal pairs.
pub fn answer_label_sets() -> Vec<Vec<EcgClass>> {
    let mut sets: Vec<Vec<EcgClass>> = EcgClass::ALL.iter().map(|&c| vec![c]).collect();
    for (i, &a) in EcgClass::ALL.iter().enumerate() {
        for &b in &EcgClass::ALL[i + 1..] {
            if !incompatible(a, b) && a != EcgClass::Normal {
                sets.push(vec![a, b]);
            }
        }
    }
    sets
}

/// Greedy-decoding reporter over a [`MultimodalModel`].
pub struct ModelReporter<'m> {
    pub model: &'m MultimodalModel,
    pub max_new_tokens: usize,
    pub scores: ScoreSource,
}

impl ReportModel for ModelReporter<'_> {
    fn report(&self, image: &GrayImage, question: &str) -> Result<String> {
        let channels = self.model.config.vision.channels;
        self.model
            .generate(&image.to_tensor(channels), question, self.max_new_tokens)
    }

    /// Posterior mass of each class over the templated answers.
    fn class_scores(&self, image: &GrayImage, question: &str) -> Result<Option<Vec<f64>>> {
        if self.scores != ScoreSource::AnswerPosterior {
            return Ok(None);
        }
        let channels = self.model.config.vision.channels;
        let features = self.model.visual_features(&image.to_tensor(channels))?;
        let prompt = TokenSequence::prompt(question).ids;
        let sets = answer_label_sets();
        let mut logps = Vec::with_capacity(sets.len());
        for set in &sets {
            let mut cont = tokenize(&answer_for(set));
            cont.push(EOS);
            logps.push(self.model.continuation_logprob(Some(&features), &prompt, &cont)?);
        }
        let m = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logps.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut scores = vec![0.0; EcgClass::ALL.len()];
        for (set, w) in sets.iter().zip(&weights) {
            for c in set {
                scores[c.index()] += w / z;
            }
        }
        Ok(Some(scores))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    /// `null` for classes whose test labels are all equal.
    pub auc_per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub hamming_loss: f64,
    pub report_score: f64,
    pub n_samples: usize,
    pub config_fingerprint: String,
    pub score_source: ScoreSource,
    pub judge: String,
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Per-class AUC and their macro mean over scorable classes. With no
/// scorable class the macro value is 0.5 and a flag is raised.
pub fn macro_auc(
    scores: &[Vec<f64>],
    truth: &[Vec<u8>],
    names: &[&str],
) -> Result<(Vec<Option<f64>>, f64, Vec<String>)> {
    let mut per = Vec::with_capacity(names.len());
    let mut flags = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<u8> = truth.iter().map(|r| r[c]).collect();
        let auc = roc_auc(&s, &l)?;
        if auc.is_none() {
            flags.push(format!("degenerate_auc:{name}"));
        }
        per.push(auc);
    }
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        flags.push("no_scorable_class".into());
        0.5
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok((per, mean, flags))
}

/// Generates a report per sample, extracts labels, judges the report
/// against the reference answer, and aggregates. Any judge failure aborts.
pub fn evaluate(
    model: &dyn ReportModel,
    samples: &[LoadedSample],
    catalog: &ClassCatalog,
    judge: &dyn Judge,
    score_source: ScoreSource,
    fingerprint: &str,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    let names = catalog.names();
    let label_names: Vec<String> = names.iter().map(|n| n.to_string()).collect();
    let rows: Vec<(Vec<u8>, Vec<f64>, f64)> = samples
        .par_iter()
        .map(|s| {
            if s.record.labels.len() != catalog.len() {
                return Err(Error::Shape(format!(
                    "sample {} has {} labels for {} classes",
                    s.record.image,
                    s.record.labels.len(),
                    catalog.len()
                )));
            }
            let text = model.report(&s.image, &s.record.question)?;
            let bits = extract_labels(&text, catalog);
            let cont = match model.class_scores(&s.image, &s.record.question)? {
                Some(v) => v,
                None => bits.iter().map(|&b| f64::from(b)).collect(),
            };
            let resp = judge.score(&JudgeRequest {
                generated: text,
                reference: s.record.answer.clone(),
                labels: label_names.clone(),
            })?;
            Ok((bits, cont, resp.score.clamp(0.0, 100.0)))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<u8>> = samples.iter().map(|s| s.record.labels.clone()).collect();
    let judged: f64 = rows.iter().map(|r| r.2).sum();
    let (preds, scores): (Vec<Vec<u8>>, Vec<Vec<f64>>) = rows.into_iter().map(|(b, c, _)| (b, c)).unzip();
    let (auc_per_class, macro_auc, flags) = macro_auc(&scores, &truth, &names)?;
    Ok(MetricsReport {
        classes: names.iter().map(|n| n.to_string()).collect(),
        auc_per_class,
        macro_auc,
        macro_f1: macro_f1(&preds, &truth)?,
        hamming_loss: hamming_loss(&preds, &truth)?,
        report_score: judged / samples.len() as f64,
        n_samples: samples.len(),
        config_fingerprint: fingerprint.to_string(),
        score_source,
        judge: judge.name().to_string(),
        flags,
    })
}
