//! Interleaved input layouts for the two language models.
//!
//! Grammars, with `m` codec frames per chunk and `n` reference frames:
//!
//! ```text
//! selm interleaved:  Ref^n Sep (Mix^m Task Tok^m)^t
//! arlm interleaved:  Ref^n Sep (Mix^m Chunk)^t
//! arlm ref-only:     Ref^n Sep Chunk^t
//! arlm sequential:   Ref^n Sep Mix^m(1) .. Mix^m(t) Chunk(1) .. Chunk(t)
//! ```
//!
//! Every element takes one position, except a token chunk, which expands to
//! `m` token-embedding positions.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use streamtse_nn::AttentionMask;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Interleaved,
    Sequential,
    RefOnly,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(Self::Interleaved),
            "sequential" => Ok(Self::Sequential),
            "ref-only" | "ref_only" => Ok(Self::RefOnly),
            other => Err(Error::Config(format!("unknown strategy `{other}` (interleaved|sequential|ref-only)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Interleaved => "interleaved",
            Self::Sequential => "sequential",
            Self::RefOnly => "ref_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selm,
    Arlm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceElement {
    RefFrame(Vec<f64>),
    Sep,
    MixFrame { vector: Vec<f64>, step: usize },
    Task { step: usize },
    TargetToken { id: u32, step: usize },
    TokenChunk { ids: Vec<u32>, step: usize },
}

impl SequenceElement {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::RefFrame(_) => "ref",
            Self::Sep => "sep",
            Self::MixFrame { .. } => "mix",
            Self::Task { .. } => "task",
            Self::TargetToken { .. } => "tok",
            Self::TokenChunk { .. } => "tokchunk",
        }
    }

    /// Step tag; prefix elements belong to step 0.
    pub fn step(&self) -> usize {
        match self {
            Self::RefFrame(_) | Self::Sep => 0,
            Self::MixFrame { step, .. }
            | Self::Task { step }
            | Self::TargetToken { step, .. }
            | Self::TokenChunk { step, .. } => *step,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::TokenChunk { ids, .. } => ids.len(),
            _ => 1,
        }
    }
}

/// What occupies a single position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionRole<'a> {
    Ref(&'a [f64]),
    Sep,
    Mix { vector: &'a [f64], step: usize },
    Task { step: usize },
    Token { id: u32, step: usize },
}

impl PositionRole<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Ref(_) => "ref",
            Self::Sep => "sep",
            Self::Mix { .. } => "mix",
            Self::Task { .. } => "task",
            Self::Token { .. } => "tok",
        }
    }

    pub fn step(&self) -> Option<usize> {
        match self {
            Self::Ref(_) | Self::Sep => None,
            Self::Mix { step, .. } | Self::Task { step } | Self::Token { step, .. } => Some(*step),
        }
    }
}

/// Elements added by one step. `invalidate_from` is the first position whose
/// cached state is no longer valid, when the step is not a pure append.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendDelta {
    pub appended: Vec<SequenceElement>,
    pub appended_positions: usize,
    pub invalidate_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    stage: Stage,
    strategy: Strategy,
    frames_per_chunk: usize,
    n_ref: usize,
    steps: usize,
    elements: Vec<SequenceElement>,
    positions: usize,
}

/// `[Ref x n, Sep]` for the given stage and strategy.
pub fn build_prefix(reference: &streamtse_nn::Tensor2, stage: Stage, strategy: Strategy, frames_per_chunk: usize) -> Result<Layout> {
    if reference.rows() == 0 {
        return Err(Error::EmptyReference);
    }
    if stage == Stage::Selm && strategy != Strategy::Interleaved {
        return Err(Error::UnsupportedLayout(format!("semantic stage only supports interleaving, got {strategy}")));
    }
    if frames_per_chunk == 0 {
        return Err(Error::Config("frames per chunk must be positive".into()));
    }
    let mut elements: Vec<SequenceElement> = reference.iter_rows().map(|r| SequenceElement::RefFrame(r.to_vec())).collect();
    elements.push(SequenceElement::Sep);
    Ok(Layout {
        stage,
        strategy,
        frames_per_chunk,
        n_ref: reference.rows(),
        steps: 0,
        positions: elements.len(),
        elements,
    })
}

/// Closed-form position count after `t` steps.
pub fn layout_length(t: usize, n_ref: usize, m: usize, stage: Stage, strategy: Strategy) -> Result<usize> {
    let per_step = match (stage, strategy) {
        (Stage::Selm, Strategy::Interleaved) => 2 * m + 1,
        (Stage::Selm, s) => return Err(Error::UnsupportedLayout(format!("semantic stage with {s}"))),
        (Stage::Arlm, Strategy::Interleaved | Strategy::Sequential) => 2 * m,
        (Stage::Arlm, Strategy::RefOnly) => m,
    };
    Ok(n_ref + 1 + t * per_step)
}

/// Positions recomputed by the sequential strategy at step `t`.
pub fn sequential_recompute(t: usize, m: usize) -> usize {
    m + t * m
}

impl Layout {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn frames_per_chunk(&self) -> usize {
        self.frames_per_chunk
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn elements(&self) -> &[SequenceElement] {
        &self.elements
    }

    /// Number of positions (not elements).
    pub fn len(&self) -> usize {
        self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.n_ref + 1
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step != self.steps + 1 {
            return Err(Error::StepOrder { expected: self.steps + 1, got: step });
        }
        Ok(())
    }

    fn check_rows(&self, what: &str, n: usize) -> Result<()> {
        if n != self.frames_per_chunk {
            return Err(Error::Shape(format!("{what} has {n} frames, expected {}", self.frames_per_chunk)));
        }
        Ok(())
    }

    fn push(&mut self, e: SequenceElement) {
        self.positions += e.width();
        self.elements.push(e);
    }

    /// Appends `Mix^m Task Tok^m` for `step`.
    pub fn append_selm_step(&mut self, step: usize, mix: &streamtse_nn::Tensor2, tokens: &[u32]) -> Result<AppendDelta> {
        if self.stage != Stage::Selm || self.strategy != Strategy::Interleaved {
            return Err(Error::UnsupportedLayout("append_selm_step needs an interleaved semantic layout".into()));
        }
        self.check_step(step)?;
        self.check_rows("mixture chunk", mix.rows())?;
        self.check_rows("token chunk", tokens.len())?;
        let start = self.elements.len();
        for r in mix.iter_rows() {
            self.push(SequenceElement::MixFrame { vector: r.to_vec(), step });
        }
        self.push(SequenceElement::Task { step });
        for &id in tokens {
            self.push(SequenceElement::TargetToken { id, step });
        }
        self.steps = step;
        let appended = self.elements[start..].to_vec();
        Ok(AppendDelta { appended_positions: appended.len(), appended, invalidate_from: None })
    }

    /// Adds step `step` of the acoustic layout according to its strategy.
    pub fn append_arlm_step(&mut self, step: usize, mix: &streamtse_nn::Tensor2, tokens: &[u32]) -> Result<AppendDelta> {
        if self.stage != Stage::Arlm {
            return Err(Error::UnsupportedLayout("append_arlm_step needs an acoustic layout".into()));
        }
        self.check_step(step)?;
        self.check_rows("mixture chunk", mix.rows())?;
        self.check_rows("token chunk", tokens.len())?;
        let m = self.frames_per_chunk;
        let chunk = SequenceElement::TokenChunk { ids: tokens.to_vec(), step };
        let mix_elems = || mix.iter_rows().map(|r| SequenceElement::MixFrame { vector: r.to_vec(), step });
        let delta = match self.strategy {
            Strategy::Interleaved => {
                let mut appended: Vec<SequenceElement> = mix_elems().collect();
                appended.push(chunk);
                for e in appended.clone() {
                    self.push(e);
                }
                AppendDelta { appended, appended_positions: 2 * m, invalidate_from: None }
            }
            Strategy::RefOnly => {
                self.push(chunk.clone());
                AppendDelta { appended: vec![chunk], appended_positions: m, invalidate_from: None }
            }
            Strategy::Sequential => {
                // new mixture frames go after the last mixture block, pushing
                // every token chunk back
                let insert_elem = self.n_ref + 1 + (step - 1) * m;
                let insert_pos = insert_elem;
                let mut appended: Vec<SequenceElement> = mix_elems().collect();
                self.elements.splice(insert_elem..insert_elem, appended.clone());
                self.positions += m;
                self.push(chunk.clone());
                appended.push(chunk);
                AppendDelta { appended, appended_positions: 2 * m, invalidate_from: Some(insert_pos) }
            }
        };
        self.steps = step;
        Ok(delta)
    }

    /// Per-position roles, expanding token chunks.
    pub fn positions(&self) -> Vec<PositionRole<'_>> {
        let mut out = Vec::with_capacity(self.positions);
        for e in &self.elements {
            match e {
                SequenceElement::RefFrame(v) => out.push(PositionRole::Ref(v)),
                SequenceElement::Sep => out.push(PositionRole::Sep),
                SequenceElement::MixFrame { vector, step } => out.push(PositionRole::Mix { vector, step: *step }),
                SequenceElement::Task { step } => out.push(PositionRole::Task { step: *step }),
                SequenceElement::TargetToken { id, step } => out.push(PositionRole::Token { id: *id, step: *step }),
                SequenceElement::TokenChunk { ids, step } => {
                    out.extend(ids.iter().map(|&id| PositionRole::Token { id, step: *step }))
                }
            }
        }
        out
    }

    /// Positions holding the target tokens of `step`.
    pub fn token_positions(&self, step: usize) -> Range<usize> {
        let m = self.frames_per_chunk;
        let p = self.prefix_len();
        match (self.stage, self.strategy) {
            (Stage::Selm, _) => {
                let s = p + (step - 1) * (2 * m + 1) + m + 1;
                s..s + m
            }
            (Stage::Arlm, Strategy::Interleaved) => {
                let s = p + (step - 1) * 2 * m + m;
                s..s + m
            }
            (Stage::Arlm, Strategy::RefOnly) => {
                let s = p + (step - 1) * m;
                s..s + m
            }
            (Stage::Arlm, Strategy::Sequential) => {
                let s = p + self.steps * m + (step - 1) * m;
                s..s + m
            }
        }
    }

    /// Positions holding the mixture frames of `step` (empty for ref-only).
    pub fn mix_positions(&self, step: usize) -> Range<usize> {
        let m = self.frames_per_chunk;
        let p = self.prefix_len();
        match (self.stage, self.strategy) {
            (Stage::Selm, _) => {
                let s = p + (step - 1) * (2 * m + 1);
                s..s + m
            }
            (Stage::Arlm, Strategy::Interleaved) => {
                let s = p + (step - 1) * 2 * m;
                s..s + m
            }
            (Stage::Arlm, Strategy::RefOnly) => p..p,
            (Stage::Arlm, Strategy::Sequential) => {
                let s = p + (step - 1) * m;
                s..s + m
            }
        }
    }

    /// For the semantic layout: the positions whose outputs predict the
    /// tokens of `step` (the task marker, then every token but the last).
    pub fn prediction_positions(&self, step: usize) -> Range<usize> {
        let tok = self.token_positions(step);
        tok.start - 1..tok.end - 1
    }

    /// One line per position: `index tag step` (`-` for prefix positions).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, role) in self.positions().iter().enumerate() {
            match role.step() {
                Some(s) => writeln!(out, "{i} {} {s}", role.tag()),
                None => writeln!(out, "{i} {} -", role.tag()),
            }
            .expect("write to String");
        }
        out
    }

    /// Checks the element sequence against this layout's grammar.
    pub fn validate(&self) -> Result<()> {
        validate_elements(&self.elements, self.stage, self.strategy, self.n_ref, self.frames_per_chunk, self.steps)
    }

    /// Mutable element access for building invalid layouts in tests.
    pub fn elements_mut(&mut self) -> &mut Vec<SequenceElement> {
        &mut self.elements
    }
}

/// Lower-triangular mask over all positions of `layout`.
pub fn causal_mask_for(layout: &Layout) -> AttentionMask {
    AttentionMask::causal(layout.len())
}

fn grammar(index: usize, reason: impl Into<String>) -> Error {
    Error::Grammar { index, reason: reason.into() }
}

/// Accepts exactly the element strings of the grammar for (`stage`, `strategy`)
/// that contain `steps` steps.
pub fn validate_elements(elements: &[SequenceElement], stage: Stage, strategy: Strategy, n_ref: usize, m: usize, steps: usize) -> Result<()> {
    if n_ref == 0 {
        return Err(Error::EmptyReference);
    }
    let mut i = 0;
    let expect = |i: usize, what: &str, ok: bool| if ok { Ok(()) } else { Err(grammar(i, format!("expected {what}, found {}", elements.get(i).map_or("end", |e| e.tag())))) };
    let ref_dim = match elements.first() {
        Some(SequenceElement::RefFrame(v)) => v.len(),
        _ => return Err(grammar(0, "layout must start with a reference frame")),
    };
    while i < n_ref {
        expect(i, "reference frame", matches!(elements.get(i), Some(SequenceElement::RefFrame(v)) if v.len() == ref_dim))?;
        i += 1;
    }
    expect(i, "separator", matches!(elements.get(i), Some(SequenceElement::Sep)))?;
    i += 1;

    let is_mix = |e: Option<&SequenceElement>, t: usize| matches!(e, Some(SequenceElement::MixFrame { vector, step }) if *step == t && vector.len() == ref_dim);
    let is_chunk = |e: Option<&SequenceElement>, t: usize| matches!(e, Some(SequenceElement::TokenChunk { ids, step }) if *step == t && ids.len() == m);

    let found = match (stage, strategy) {
        (Stage::Selm, Strategy::Interleaved) => {
            let mut t = 1;
            while i < elements.len() {
                for _ in 0..m {
                    expect(i, &format!("mixture frame of step {t}"), is_mix(elements.get(i), t))?;
                    i += 1;
                }
                expect(i, &format!("task marker of step {t}"), matches!(elements.get(i), Some(SequenceElement::Task { step }) if *step == t))?;
                i += 1;
                for _ in 0..m {
                    expect(i, &format!("target token of step {t}"), matches!(elements.get(i), Some(SequenceElement::TargetToken { step, .. }) if *step == t))?;
                    i += 1;
                }
                t += 1;
            }
            t - 1
        }
        (Stage::Selm, s) => return Err(Error::UnsupportedLayout(format!("semantic stage with {s}"))),
        (Stage::Arlm, Strategy::Interleaved) => {
            let mut t = 1;
            while i < elements.len() {
                for _ in 0..m {
                    expect(i, &format!("mixture frame of step {t}"), is_mix(elements.get(i), t))?;
                    i += 1;
                }
                expect(i, &format!("token chunk of step {t}"), is_chunk(elements.get(i), t))?;
                i += 1;
                t += 1;
            }
            t - 1
        }
        (Stage::Arlm, Strategy::RefOnly) => {
            let mut t = 1;
            while i < elements.len() {
                expect(i, &format!("token chunk of step {t}"), is_chunk(elements.get(i), t))?;
                i += 1;
                t += 1;
            }
            t - 1
        }
        (Stage::Arlm, Strategy::Sequential) => {
            let rest = elements.len() - i;
            if rest % (m + 1) != 0 {
                return Err(grammar(i, format!("{rest} trailing elements do not form whole steps")));
            }
            let n = rest / (m + 1);
            for t in 1..=n {
                for _ in 0..m {
                    expect(i, &format!("mixture frame of step {t}"), is_mix(elements.get(i), t))?;
                    i += 1;
                }
            }
            for t in 1..=n {
                expect(i, &format!("token chunk of step {t}"), is_chunk(elements.get(i), t))?;
                i += 1;
            }
            n
        }
    };
    if found != steps {
        return Err(grammar(elements.len(), format!("layout holds {found} steps, expected {steps}")));
    }
    Ok(())
}
