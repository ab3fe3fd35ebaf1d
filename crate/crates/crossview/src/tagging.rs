//! Sequence-tagging task head.
//!
//! The primary module classifies each token from the full encoder view
//! `h1ᵗ ⊕ h2ᵗ`. Five auxiliary student modules see restricted views built
//! from the first-layer directional outputs: `fwd` (no right context),
//! `bwd` (no left context), `future` (no right context and no current
//! token), `past` (no left context and no current token), and a full-view
//! module whose input representation is dropout-corrupted even when the
//! teacher's is not. Also houses BIOES span coding and exact-match span F1.

use rand::RngCore;
use std::collections::HashMap;
use std::collections::HashSet;

use crate::encoder::{Encoder, EncoderOutput};
use crate::graph::{
    cross_entropy, kl_divergence, smoothed_target, Graph, Init, Mode, NodeId, ParamId, Params,
};
use crate::{Error, Result};

/// Default label-smoothing rate for supervised tagging losses.
pub const LABEL_SMOOTHING: f64 = 0.1;

// ── Tag sets and BIOES span coding ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Plain,
    Bioes,
}

/// Label vocabulary for one tagging task.
#[derive(Debug, Clone)]
pub struct TagSet {
    labels: Vec<String>,
    by_label: HashMap<String, usize>,
    scheme: Scheme,
}

impl TagSet {
    pub fn new(labels: Vec<String>, scheme: Scheme) -> Result<Self> {
        if scheme == Scheme::Bioes {
            for l in &labels {
                if bioes_parts(l).is_none() {
                    return Err(Error::Config(format!("label '{l}' is not a BIOES label")));
                }
            }
        }
        let by_label = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(TagSet { labels, by_label, scheme })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.by_label.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    /// Entity type of a BIOES label; `None` for `O` or plain labels.
    pub fn entity_type(&self, id: usize) -> Option<&str> {
        match self.scheme {
            Scheme::Plain => None,
            Scheme::Bioes => bioes_parts(&self.labels[id]).and_then(|(_, t)| t),
        }
    }

    /// Decode a tagged sentence into spans (BIOES sets only).
    pub fn decode_spans(&self, ids: &[usize]) -> Vec<Span> {
        let labels: Vec<&str> = ids.iter().map(|&i| self.labels[i].as_str()).collect();
        bioes_decode(&labels)
    }
}

fn bioes_parts(label: &str) -> Option<(char, Option<&str>)> {
    if label == "O" {
        return Some(('O', None));
    }
    let (prefix, rest) = label.split_once('-')?;
    let c = prefix.chars().next()?;
    if prefix.len() == 1 && matches!(c, 'B' | 'I' | 'E' | 'S') && !rest.is_empty() {
        Some((c, Some(rest)))
    } else {
        None
    }
}

/// An exact-match entity span with inclusive token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Decode a BIOES tag sequence into non-overlapping sorted spans.
///
/// Ill-formed transitions are repaired, never rejected: an `I`/`E` without
/// a preceding `B` of the same type starts a new span, and an unterminated
/// `B..I` run closes at its last token.
pub fn bioes_decode(labels: &[&str]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (t, label) in labels.iter().enumerate() {
        let (prefix, ty) = match bioes_parts(label) {
            Some(p) => p,
            None => ('O', None),
        };
        let ty = ty.map(|s| s.to_string());
        match prefix {
            'O' => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span { start, end: t - 1, label });
                }
            }
            'S' => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span { start, end: t - 1, label });
                }
                spans.push(Span { start: t, end: t, label: ty.unwrap() });
            }
            'B' => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span { start, end: t - 1, label });
                }
                open = Some((t, ty.unwrap()));
            }
            'I' => {
                let ty = ty.unwrap();
                match &open {
                    Some((_, current)) if *current == ty => {}
                    Some(_) => {
                        let (start, label) = open.take().unwrap();
                        spans.push(Span { start, end: t - 1, label });
                        open = Some((t, ty));
                    }
                    None => open = Some((t, ty)),
                }
            }
            'E' => {
                let ty = ty.unwrap();
                match open.take() {
                    Some((start, current)) if current == ty => {
                        spans.push(Span { start, end: t, label: current });
                    }
                    Some((start, current)) => {
                        spans.push(Span { start, end: t - 1, label: current });
                        spans.push(Span { start: t, end: t, label: ty });
                    }
                    None => spans.push(Span { start: t, end: t, label: ty }),
                }
            }
            _ => unreachable!(),
        }
    }
    if let Some((start, label)) = open {
        spans.push(Span { start, end: labels.len() - 1, label });
    }
    spans.sort();
    spans
}

/// Encode non-overlapping spans as BIOES labels over `len` tokens.
pub fn bioes_encode(spans: &[Span], len: usize) -> Vec<String> {
    let mut labels = vec!["O".to_string(); len];
    for s in spans {
        if s.start == s.end {
            labels[s.start] = format!("S-{}", s.label);
        } else {
            labels[s.start] = format!("B-{}", s.label);
            for t in s.start + 1..s.end {
                labels[t] = format!("I-{}", s.label);
            }
            labels[s.end] = format!("E-{}", s.label);
        }
    }
    labels
}

/// Convert BIO-coded labels to BIOES.
pub fn bio_to_bioes(labels: &[String]) -> Vec<String> {
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let label = &labels[t];
        let Some((prefix, Some(ty))) = label
            .split_once('-')
            .map(|(p, r)| (p, Some(r)))
            .or(Some(("O", None)))
            .filter(|(p, _)| matches!(*p, "B" | "I" | "O"))
        else {
            out.push(label.clone());
            continue;
        };
        if prefix == "O" {
            out.push("O".to_string());
            continue;
        }
        let next_continues = t + 1 < n && labels[t + 1] == format!("I-{ty}");
        match (prefix, next_continues) {
            ("B", true) => out.push(format!("B-{ty}")),
            ("B", false) => out.push(format!("S-{ty}")),
            ("I", true) => out.push(format!("I-{ty}")),
            ("I", false) => out.push(format!("E-{ty}")),
            _ => unreachable!(),
        }
    }
    out
}

/// Precision, recall, and F1 from exact-match span counting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match `(start, end, type)` span F1 over aligned sentence lists.
pub fn span_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> Prf {
    assert_eq!(predicted.len(), gold.len(), "span_f1: sentence count mismatch");
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_correct = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        n_pred += p.len();
        n_gold += g.len();
        let gold_set: HashSet<&Span> = g.iter().collect();
        n_correct += p.iter().filter(|s| gold_set.contains(s)).count();
    }
    let precision = if n_pred == 0 { 0.0 } else { n_correct as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { n_correct as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

// ── Prediction modules ──────────────────────────────────────────────────

/// Restricted views for auxiliary tagging students.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagView {
    Fwd,
    Bwd,
    Future,
    Past,
    FullDropped,
}

impl TagView {
    pub const ALL: [TagView; 5] =
        [TagView::Fwd, TagView::Bwd, TagView::Future, TagView::Past, TagView::FullDropped];

    pub fn parse(s: &str) -> Result<TagView> {
        match s {
            "fwd" => Ok(TagView::Fwd),
            "bwd" => Ok(TagView::Bwd),
            "future" => Ok(TagView::Future),
            "past" => Ok(TagView::Past),
            "full" | "full-dropped" => Ok(TagView::FullDropped),
            other => Err(Error::UnknownView(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TagView::Fwd => "fwd",
            TagView::Bwd => "bwd",
            TagView::Future => "future",
            TagView::Past => "past",
            TagView::FullDropped => "full-dropped",
        }
    }
}

/// One-hidden-layer classifier `softmax(U · relu(W x) + b)`.
pub(crate) struct Mlp {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl Mlp {
    pub(crate) fn new(
        params: &mut Params,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        Mlp {
            w: params.add(&format!("{prefix}/w"), &[hidden, in_dim], Init::Glorot, rng),
            u: params.add(&format!("{prefix}/u"), &[out, hidden], Init::Glorot, rng),
            b: params.add(&format!("{prefix}/b"), &[out], Init::Zeros, rng),
        }
    }

    pub(crate) fn predict(&self, g: &mut Graph, params: &Params, x: NodeId) -> NodeId {
        let w = g.param(params, self.w);
        let u = g.param(params, self.u);
        let b = g.param(params, self.b);
        let hidden = g.matvec(w, x);
        let act = g.relu(hidden);
        let scores = g.matvec(u, act);
        let logits = g.add(scores, b);
        g.softmax1d(logits)
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.u, self.b]
    }
}

/// Parameters for one tagging task: the primary module plus one auxiliary
/// module per restricted view, each with its own network.
pub struct TaggingHead {
    pub n_labels: usize,
    primary: Mlp,
    views: Vec<(TagView, Mlp)>,
}

impl TaggingHead {
    pub fn new(
        params: &mut Params,
        task: &str,
        enc_output_dim: usize,
        directional_dim: usize,
        hidden: usize,
        n_labels: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let full_dim = 2 * enc_output_dim;
        let primary = Mlp::new(params, &format!("task/{task}/primary"), full_dim, hidden, n_labels, rng);
        let views = TagView::ALL
            .iter()
            .map(|&view| {
                let in_dim = match view {
                    TagView::Fwd | TagView::Bwd | TagView::Future | TagView::Past => {
                        directional_dim
                    }
                    TagView::FullDropped => full_dim,
                };
                let mlp = Mlp::new(
                    params,
                    &format!("task/{task}/aux_{}", view.name()),
                    in_dim,
                    hidden,
                    n_labels,
                    rng,
                );
                (view, mlp)
            })
            .collect();
        TaggingHead { n_labels, primary, views }
    }

    fn view_mlp(&self, view: TagView) -> &Mlp {
        &self.views.iter().find(|(v, _)| *v == view).unwrap().1
    }

    /// Per-token class distributions from the full view `h1ᵗ ⊕ h2ᵗ`.
    pub fn primary_predict(
        &self,
        g: &mut Graph,
        params: &Params,
        enc: &EncoderOutput,
    ) -> Vec<NodeId> {
        (0..enc.len())
            .map(|t| {
                let x = enc.full_view(g, t);
                self.primary.predict(g, params, x)
            })
            .collect()
    }

    /// Per-token class distributions from one restricted view.
    ///
    /// `full_drop` is the drop probability the full-view student applies to
    /// its own input representation; the directional views ignore it.
    pub fn aux_predict(
        &self,
        g: &mut Graph,
        params: &Params,
        enc: &EncoderOutput,
        view: TagView,
        full_drop: f64,
    ) -> Result<Vec<NodeId>> {
        let mlp = self.view_mlp(view);
        let t_len = enc.len();
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = match view {
                TagView::Fwd => enc.h1fwd[t],
                TagView::Bwd => enc.h1bwd[t],
                TagView::Future => {
                    if t == 0 {
                        enc.h1fwd_start
                    } else {
                        enc.h1fwd[t - 1]
                    }
                }
                TagView::Past => {
                    if t + 1 == t_len {
                        enc.h1bwd_end
                    } else {
                        enc.h1bwd[t + 1]
                    }
                }
                TagView::FullDropped => {
                    let full = enc.full_view(g, t);
                    g.dropout(full, full_drop, Mode::Train)?
                }
            };
            out.push(mlp.predict(g, params, x));
        }
        Ok(out)
    }

    /// Mean label-smoothed cross-entropy over tokens.
    pub fn sup_loss(
        &self,
        g: &mut Graph,
        predictions: &[NodeId],
        gold: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        assert_eq!(predictions.len(), gold.len(), "sup_loss: length mismatch");
        let mut terms = Vec::with_capacity(gold.len());
        for (&pred, &label) in predictions.iter().zip(gold) {
            if label >= self.n_labels {
                return Err(Error::LabelOutOfRange { id: label, classes: self.n_labels });
            }
            let target = g.leaf(smoothed_target(label, self.n_labels, smoothing), vec![self.n_labels]);
            terms.push(cross_entropy(g, target, pred));
        }
        let total = g.sum_list(&terms);
        Ok(g.scale(total, 1.0 / gold.len() as f64))
    }

    /// Consistency loss on one unlabeled sentence, given a dropout-free
    /// teacher pass and a dropout-corrupted student pass of the encoder.
    ///
    /// The teacher is the primary module wrapped in stop-gradient; the loss
    /// sums KL(teacher ‖ student) over the listed views and averages over
    /// tokens.
    pub fn cvt_loss_from(
        &self,
        g: &mut Graph,
        params: &Params,
        teacher_enc: &EncoderOutput,
        student_enc: &EncoderOutput,
        views: &[TagView],
        full_drop: f64,
    ) -> Result<NodeId> {
        let teacher: Vec<NodeId> = self
            .primary_predict(g, params, teacher_enc)
            .into_iter()
            .map(|d| g.stop_grad(d))
            .collect();
        let t_len = teacher.len();
        let mut terms = Vec::new();
        for &view in views {
            let students = self.aux_predict(g, params, student_enc, view, full_drop)?;
            for t in 0..t_len {
                terms.push(kl_divergence(g, teacher[t], students[t])?);
            }
        }
        let total = g.sum_list(&terms);
        Ok(g.scale(total, 1.0 / t_len as f64))
    }

    /// Build both encoder passes and compute the consistency loss.
    pub fn cvt_loss(
        &self,
        g: &mut Graph,
        params: &Params,
        encoder: &Encoder,
        sentence: &crate::encoder::EncodedSentence,
        views: &[TagView],
        unlabeled_drop: f64,
    ) -> Result<NodeId> {
        let teacher_enc = encoder.encode_tokens(g, params, sentence, None)?;
        let student_enc =
            encoder.encode_tokens(g, params, sentence, Some(unlabeled_drop))?;
        self.cvt_loss_from(g, params, &teacher_enc, &student_enc, views, unlabeled_drop)
    }

    pub fn primary_param_ids(&self) -> Vec<ParamId> {
        self.primary.param_ids()
    }

    pub fn aux_param_ids(&self) -> Vec<ParamId> {
        self.views.iter().flat_map(|(_, m)| m.param_ids()).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.primary_param_ids();
        ids.extend(self.aux_param_ids());
        ids
    }
}

/// Token-level accuracy of argmax predictions.
pub fn tag_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        total += g.len();
        correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Index of the largest probability, lowest index winning ties.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in dist.iter().enumerate().skip(1) {
        if *v > dist[best] {
            best = i;
        }
    }
    best
}
