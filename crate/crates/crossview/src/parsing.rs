//! Graph-based dependency parsing head.
//!
//! Parsing is treated as one classification per dependent token: the
//! distribution ranges over every (candidate head, relation) pair, where
//! candidate heads are ROOT plus all other tokens. A candidate edge is
//! scored by a bilinear form over separately transformed head-side and
//! dependent-side representations, with one weight matrix per relation plus
//! a shared one. Four auxiliary views score edges from first-layer
//! directional encoder outputs only; ROOT is a learned vector per view. The
//! parser consumes words only — no part-of-speech inputs appear anywhere.

use rand::RngCore;

use crate::encoder::EncoderOutput;
use crate::graph::{kl_divergence, Graph, Init, NodeId, ParamId, Params, PROB_FLOOR};
use crate::{Error, Result};

/// Head index denoting the artificial ROOT node.
pub const ROOT: usize = 0;

/// One dependency parse: for token `t` (0-based), `heads[t]` is the 1-based
/// index of its head (0 = ROOT) and `relations[t]` its relation id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepParse {
    pub heads: Vec<usize>,
    pub relations: Vec<usize>,
}

impl DepParse {
    pub fn new(heads: Vec<usize>, relations: Vec<usize>) -> Result<Self> {
        let len = heads.len();
        for (t, &u) in heads.iter().enumerate() {
            if u > len {
                return Err(Error::HeadOutOfRange { head: u, len });
            }
            if u == t + 1 {
                return Err(Error::SelfLoopHead { index: t });
            }
        }
        Ok(DepParse { heads, relations })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Whether the head assignment contains a cycle (ROOT breaks all walks).
    pub fn has_cycle(&self) -> bool {
        let n = self.len();
        for start in 0..n {
            let mut seen = vec![false; n];
            let mut u = self.heads[start];
            while u != ROOT {
                let idx = u - 1;
                if seen[idx] {
                    return true;
                }
                seen[idx] = true;
                u = self.heads[idx];
            }
        }
        false
    }
}

/// Which representation pair scores an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseView {
    Primary,
    FwdFwd,
    FwdBwd,
    BwdFwd,
    BwdBwd,
}

impl ParseView {
    pub const AUX: [ParseView; 4] =
        [ParseView::FwdFwd, ParseView::FwdBwd, ParseView::BwdFwd, ParseView::BwdBwd];

    pub fn name(&self) -> &'static str {
        match self {
            ParseView::Primary => "primary",
            ParseView::FwdFwd => "fwd-fwd",
            ParseView::FwdBwd => "fwd-bwd",
            ParseView::BwdFwd => "bwd-fwd",
            ParseView::BwdBwd => "bwd-bwd",
        }
    }
}

/// Transforms and bilinear weights for one view.
struct ViewParams {
    mlp_h_w: ParamId,
    mlp_h_b: ParamId,
    mlp_d_w: ParamId,
    mlp_d_b: ParamId,
    /// Shared across relations.
    w_shared: ParamId,
    /// One matrix per relation.
    w_rel: Vec<ParamId>,
    /// Learned ROOT vector in this view's input space.
    root: ParamId,
}

impl ViewParams {
    fn new(
        params: &mut Params,
        prefix: &str,
        in_dim: usize,
        mlp_dim: usize,
        n_relations: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        ViewParams {
            mlp_h_w: params.add(&format!("{prefix}/mlp_h/w"), &[mlp_dim, in_dim], Init::Glorot, rng),
            mlp_h_b: params.add(&format!("{prefix}/mlp_h/b"), &[mlp_dim], Init::Zeros, rng),
            mlp_d_w: params.add(&format!("{prefix}/mlp_d/w"), &[mlp_dim, in_dim], Init::Glorot, rng),
            mlp_d_b: params.add(&format!("{prefix}/mlp_d/b"), &[mlp_dim], Init::Zeros, rng),
            w_shared: params.add(&format!("{prefix}/w_shared"), &[mlp_dim, mlp_dim], Init::Glorot, rng),
            w_rel: (0..n_relations)
                .map(|r| {
                    params.add(&format!("{prefix}/w_rel{r}"), &[mlp_dim, mlp_dim], Init::Glorot, rng)
                })
                .collect(),
            root: params.add(&format!("{prefix}/root"), &[in_dim], Init::Embedding, rng),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.mlp_h_w,
            self.mlp_h_b,
            self.mlp_d_w,
            self.mlp_d_b,
            self.w_shared,
            self.root,
        ];
        ids.extend(&self.w_rel);
        ids
    }
}

/// Parsing head: primary view over `h1 ⊕ h2` plus four directional views,
/// each with fully separate parameters.
pub struct ParserHead {
    pub n_relations: usize,
    primary: ViewParams,
    fwd_fwd: ViewParams,
    fwd_bwd: ViewParams,
    bwd_fwd: ViewParams,
    bwd_bwd: ViewParams,
}

impl ParserHead {
    pub fn new(
        params: &mut Params,
        task: &str,
        enc_output_dim: usize,
        directional_dim: usize,
        mlp_dim: usize,
        n_relations: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let full = 2 * enc_output_dim;
        let mk = |params: &mut Params, name: &str, in_dim, rng: &mut dyn RngCore| {
            ViewParams::new(params, &format!("task/{task}/{name}"), in_dim, mlp_dim, n_relations, rng)
        };
        ParserHead {
            n_relations,
            primary: mk(params, "primary", full, rng),
            fwd_fwd: mk(params, "fwd_fwd", directional_dim, rng),
            fwd_bwd: mk(params, "fwd_bwd", directional_dim, rng),
            bwd_fwd: mk(params, "bwd_fwd", directional_dim, rng),
            bwd_bwd: mk(params, "bwd_bwd", directional_dim, rng),
        }
    }

    fn view(&self, view: ParseView) -> &ViewParams {
        match view {
            ParseView::Primary => &self.primary,
            ParseView::FwdFwd => &self.fwd_fwd,
            ParseView::FwdBwd => &self.fwd_bwd,
            ParseView::BwdFwd => &self.bwd_fwd,
            ParseView::BwdBwd => &self.bwd_bwd,
        }
    }

    fn mlp(
        g: &mut Graph,
        params: &Params,
        w: ParamId,
        b: ParamId,
        x: NodeId,
    ) -> NodeId {
        let wn = g.param(params, w);
        let bn = g.param(params, b);
        let lin = g.matvec(wn, x);
        let biased = g.add(lin, bn);
        g.relu(biased)
    }

    /// Bilinear edge score `MLP_h(z_head)ᵀ (W_r + W) MLP_d(z_dep)`.
    pub fn edge_score(
        &self,
        g: &mut Graph,
        params: &Params,
        view: ParseView,
        z_head: NodeId,
        z_dep: NodeId,
        relation: usize,
    ) -> Result<NodeId> {
        let vp = self.view(view);
        if relation >= self.n_relations {
            return Err(Error::RelationOutOfRange { id: relation, size: self.n_relations });
        }
        let mh = Self::mlp(g, params, vp.mlp_h_w, vp.mlp_h_b, z_head);
        let md = Self::mlp(g, params, vp.mlp_d_w, vp.mlp_d_b, z_dep);
        let wr = g.param(params, vp.w_rel[relation]);
        let ws = g.param(params, vp.w_shared);
        let w = g.add(wr, ws);
        let wd = g.matvec(w, md);
        Ok(g.dot(mh, wd))
    }

    /// Head-side and dependent-side input representations for a view.
    fn view_inputs(
        g: &mut Graph,
        enc: &EncoderOutput,
        view: ParseView,
    ) -> (Vec<NodeId>, Vec<NodeId>) {
        let t_len = enc.len();
        match view {
            ParseView::Primary => {
                let full: Vec<NodeId> = (0..t_len).map(|t| enc.full_view(g, t)).collect();
                (full.clone(), full)
            }
            ParseView::FwdFwd => (enc.h1fwd.clone(), enc.h1fwd.clone()),
            ParseView::FwdBwd => (enc.h1fwd.clone(), enc.h1bwd.clone()),
            ParseView::BwdFwd => (enc.h1bwd.clone(), enc.h1fwd.clone()),
            ParseView::BwdBwd => (enc.h1bwd.clone(), enc.h1bwd.clone()),
        }
    }

    /// Candidate heads for dependent `t` (0-based): ROOT first, then every
    /// other token in ascending 1-based order.
    pub fn candidate_heads(t: usize, t_len: usize) -> Vec<usize> {
        std::iter::once(ROOT)
            .chain((1..=t_len).filter(|&u| u != t + 1))
            .collect()
    }

    /// Per-dependent distributions over (candidate head × relation) pairs,
    /// each normalized over `T·R` candidates in candidate-head-major order.
    pub fn probabilities(
        &self,
        g: &mut Graph,
        params: &Params,
        enc: &EncoderOutput,
        view: ParseView,
    ) -> Vec<NodeId> {
        let vp = self.view(view);
        let t_len = enc.len();
        let r_count = self.n_relations;
        let (head_in, dep_in) = Self::view_inputs(g, enc, view);

        // transform once per token
        let root_in = g.param(params, vp.root);
        let mh_root = Self::mlp(g, params, vp.mlp_h_w, vp.mlp_h_b, root_in);
        let mh: Vec<NodeId> = head_in
            .iter()
            .map(|&z| Self::mlp(g, params, vp.mlp_h_w, vp.mlp_h_b, z))
            .collect();
        let md: Vec<NodeId> = dep_in
            .iter()
            .map(|&z| Self::mlp(g, params, vp.mlp_d_w, vp.mlp_d_b, z))
            .collect();
        let ws = g.param(params, vp.w_shared);
        let w_all: Vec<NodeId> = (0..r_count)
            .map(|r| {
                let wr = g.param(params, vp.w_rel[r]);
                g.add(wr, ws)
            })
            .collect();

        (0..t_len)
            .map(|t| {
                // (W_r + W) · MLP_d(z_t), reused across candidate heads
                let wd: Vec<NodeId> = (0..r_count).map(|r| g.matvec(w_all[r], md[t])).collect();
                let mut scores = Vec::with_capacity(t_len * r_count);
                for u in Self::candidate_heads(t, t_len) {
                    let head_vec = if u == ROOT { mh_root } else { mh[u - 1] };
                    for r in 0..r_count {
                        scores.push(g.dot(head_vec, wd[r]));
                    }
                }
                let joined = g.concat(&scores);
                g.softmax1d(joined)
            })
            .collect()
    }

    /// Mean negative log-probability of the gold (head, relation) pairs
    /// under the primary distributions. No label smoothing.
    pub fn sup_loss(
        &self,
        g: &mut Graph,
        dists: &[NodeId],
        gold: &DepParse,
    ) -> Result<NodeId> {
        let t_len = gold.len();
        assert_eq!(dists.len(), t_len, "sup_loss: length mismatch");
        let mut terms = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let u = gold.heads[t];
            if u == t + 1 {
                return Err(Error::SelfLoopHead { index: t });
            }
            if u > t_len {
                return Err(Error::HeadOutOfRange { head: u, len: t_len });
            }
            let r = gold.relations[t];
            if r >= self.n_relations {
                return Err(Error::RelationOutOfRange { id: r, size: self.n_relations });
            }
            let idx = candidate_index(u, r, t, t_len, self.n_relations);
            let p = g.elem(dists[t], idx);
            let logp = g.log_floor(p, PROB_FLOOR);
            terms.push(g.scale(logp, -1.0));
        }
        let total = g.sum_list(&terms);
        Ok(g.scale(total, 1.0 / t_len as f64))
    }

    /// Consistency loss over the four directional views against the
    /// stop-gradiented primary distributions, averaged over tokens.
    pub fn cvt_loss_from(
        &self,
        g: &mut Graph,
        params: &Params,
        teacher_enc: &EncoderOutput,
        student_enc: &EncoderOutput,
    ) -> Result<NodeId> {
        let teacher: Vec<NodeId> = self
            .probabilities(g, params, teacher_enc, ParseView::Primary)
            .into_iter()
            .map(|d| g.stop_grad(d))
            .collect();
        let t_len = teacher.len();
        let mut terms = Vec::new();
        for view in ParseView::AUX {
            let students = self.probabilities(g, params, student_enc, view);
            for t in 0..t_len {
                terms.push(kl_divergence(g, teacher[t], students[t])?);
            }
        }
        let total = g.sum_list(&terms);
        Ok(g.scale(total, 1.0 / t_len as f64))
    }

    pub fn primary_param_ids(&self) -> Vec<ParamId> {
        self.primary.param_ids()
    }

    pub fn aux_param_ids(&self) -> Vec<ParamId> {
        ParseView::AUX.iter().flat_map(|&v| self.view(v).param_ids()).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.primary_param_ids();
        ids.extend(self.aux_param_ids());
        ids
    }

    /// Ids needed by gradient-fidelity checks for one view.
    pub fn view_param_ids(&self, view: ParseView) -> Vec<ParamId> {
        self.view(view).param_ids()
    }
}

/// Flat candidate index of `(head u, relation r)` for dependent `t`.
pub fn candidate_index(u: usize, r: usize, t: usize, t_len: usize, n_relations: usize) -> usize {
    let heads = ParserHead::candidate_heads(t, t_len);
    let pos = heads
        .iter()
        .position(|&h| h == u)
        .expect("head not in candidate set");
    pos * n_relations + r
}

/// Greedy per-dependent argmax decode; ties break toward the lower head
/// index, then the lower relation id. The result may contain cycles.
pub fn decode(dists: &[Vec<f64>], t_len: usize, n_relations: usize) -> DepParse {
    let mut heads = Vec::with_capacity(t_len);
    let mut relations = Vec::with_capacity(t_len);
    for (t, dist) in dists.iter().enumerate() {
        let cand = ParserHead::candidate_heads(t, t_len);
        let mut best = 0usize;
        for i in 1..dist.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        heads.push(cand[best / n_relations]);
        relations.push(best % n_relations);
    }
    DepParse { heads, relations }
}

/// Unlabeled and labeled attachment scores in percent over non-punctuation
/// tokens. `punct[t]` marks tokens excluded from scoring.
pub fn uas_las(predicted: &DepParse, gold: &DepParse, punct: &[bool]) -> (f64, f64) {
    assert_eq!(predicted.len(), gold.len(), "uas_las: length mismatch");
    assert_eq!(punct.len(), gold.len(), "uas_las: mask length mismatch");
    let mut scored = 0usize;
    let mut head_ok = 0usize;
    let mut both_ok = 0usize;
    for t in 0..gold.len() {
        if punct[t] {
            continue;
        }
        scored += 1;
        if predicted.heads[t] == gold.heads[t] {
            head_ok += 1;
            if predicted.relations[t] == gold.relations[t] {
                both_ok += 1;
            }
        }
    }
    if scored == 0 {
        return (0.0, 0.0);
    }
    (
        100.0 * head_ok as f64 / scored as f64,
        100.0 * both_ok as f64 / scored as f64,
    )
}

/// Aggregate attachment scores over a corpus.
pub fn attachment_scores(
    predicted: &[DepParse],
    gold: &[DepParse],
    punct: &[Vec<bool>],
) -> (f64, f64) {
    let mut scored = 0usize;
    let mut head_ok = 0usize;
    let mut both_ok = 0usize;
    for ((p, g), m) in predicted.iter().zip(gold).zip(punct) {
        for t in 0..g.len() {
            if m[t] {
                continue;
            }
            scored += 1;
            if p.heads[t] == g.heads[t] {
                head_ok += 1;
                if p.relations[t] == g.relations[t] {
                    both_ok += 1;
                }
            }
        }
    }
    if scored == 0 {
        return (0.0, 0.0);
    }
    (
        100.0 * head_ok as f64 / scored as f64,
        100.0 * both_ok as f64 / scored as f64,
    )
}
