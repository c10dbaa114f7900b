//! Generation: the insertion CTMC stepped jointly with per-image flows.
//!
//! Each step evaluates the model once against the pre-step state. Images
//! below time 1 take an Euler update; if the text clock is below 1, every
//! editable gap draws its insertion Bernoullis against the hazard-scaled
//! rate, and fired insertions are applied right to left so pre-step gap
//! indices stay valid. At most one insertion lands per gap per step; the
//! dropped multi-insertion events are second order in the step size.
//! Inserted image tokens expand into fresh noise blocks at time 0, which is
//! why the loop keeps running after the text completes.

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionMode;
use crate::heads::{GapHeads, InsertionHeads};
use crate::oracle::OracleTable;
use crate::rng::SplitRng;
use crate::schedule::{ExtendedTime, Schedule};
use crate::sequence::{Element, MixedSequence, SeqBounds, Vocabulary};

/// Anything that can drive the sampler: per-gap insertion heads plus a
/// velocity field per in-flight image.
///
/// `t_text` is supplied for exact posterior models; learned models are
/// time-independent and ignore it.
pub trait Model: Sync {
    fn heads(&self, x: &MixedSequence, t_text: f64) -> InsertionHeads;
    fn velocity(&self, x: &MixedSequence, t_text: f64, pos: usize, y: &[f64], t_img: f64)
        -> Vec<f64>;
}

/// Exact-posterior model backed by an [`OracleTable`].
///
/// Velocity queries clamp the text clock just below 1 so that states left
/// incomplete by discretization still have a well-defined posterior.
pub struct OracleModel<'a> {
    pub table: &'a OracleTable,
    pub schedule: Schedule,
    pub mode: CorruptionMode,
}

impl Model for OracleModel<'_> {
    fn heads(&self, x: &MixedSequence, t_text: f64) -> InsertionHeads {
        self.table
            .oracle_heads(x, t_text, &self.schedule, self.mode)
            .expect("sampler state must stay reachable under oracle heads")
    }

    fn velocity(
        &self,
        x: &MixedSequence,
        t_text: f64,
        pos: usize,
        y: &[f64],
        t_img: f64,
    ) -> Vec<f64> {
        let t_text = t_text.min(1.0 - 1e-9);
        self.table
            .velocity(x, t_text, pos, y, t_img, &self.schedule, self.mode)
            .expect("velocity query on a reachable image position")
    }
}

/// Classifier-free guidance over two models: rates and token distributions
/// are geometrically interpolated; velocities come from the conditional.
pub struct CfgModel<'a, C: Model, U: Model> {
    pub cond: &'a C,
    pub uncond: &'a U,
    pub w: f64,
}

impl<C: Model, U: Model> Model for CfgModel<'_, C, U> {
    fn heads(&self, x: &MixedSequence, t_text: f64) -> InsertionHeads {
        cfg_heads(
            &self.cond.heads(x, t_text),
            &self.uncond.heads(x, t_text),
            self.w,
        )
    }

    fn velocity(
        &self,
        x: &MixedSequence,
        t_text: f64,
        pos: usize,
        y: &[f64],
        t_img: f64,
    ) -> Vec<f64> {
        self.cond.velocity(x, t_text, pos, y, t_img)
    }
}

/// Geometric interpolation of insertion heads.
///
/// The guided effective rate is `r_c^w * r_u^(1-w)` with `r = (1-pi) *
/// lambda_nonzero`; it is re-split by interpolating the zero-probabilities
/// geometrically and taking `lambda` as the rate quotient. `w = 0` and
/// `w = 1` are exact passthroughs, bit for bit.
pub fn cfg_heads(cond: &InsertionHeads, uncond: &InsertionHeads, w: f64) -> InsertionHeads {
    assert_eq!(
        cond.gap_count(),
        uncond.gap_count(),
        "guidance requires matching gap counts"
    );
    if w == 1.0 {
        return cond.clone();
    }
    if w == 0.0 {
        return uncond.clone();
    }
    let gaps = cond
        .gaps
        .iter()
        .zip(&uncond.gaps)
        .map(|(c, u)| {
            let rc = c.combined_rate();
            let ru = u.combined_rate();
            let rate = if rc == 0.0 {
                0.0
            } else {
                rc.powf(w) * ru.max(1e-300).powf(1.0 - w)
            };
            // Geometric interpolation of the zero/nonzero odds.
            let zero = c.pi.powf(w) * u.pi.powf(1.0 - w);
            let nonzero = (1.0 - c.pi).powf(w) * (1.0 - u.pi).powf(1.0 - w);
            let pi = if zero + nonzero > 0.0 && (zero + nonzero).is_finite() {
                zero / (zero + nonzero)
            } else if zero > nonzero {
                1.0
            } else {
                0.0
            };
            let lambda_nonzero = if pi < 1.0 { rate / (1.0 - pi) } else { 0.0 };
            // Token distribution in log space; zero mass stays zero.
            let logq: Vec<f64> = c
                .q
                .iter()
                .zip(&u.q)
                .map(|(&qc, &qu)| {
                    if qc == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        w * qc.ln() + (1.0 - w) * qu.max(1e-300).ln()
                    }
                })
                .collect();
            let max = logq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let q: Vec<f64> = if max.is_finite() {
                let raw: Vec<f64> = logq.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|r| r / z).collect()
            } else {
                c.q.clone()
            };
            GapHeads {
                pi,
                lambda_nonzero,
                q,
            }
        })
        .collect();
    InsertionHeads { gaps }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: Schedule,
    pub mode: CorruptionMode,
    /// Step size of the text clock; the final step is clipped.
    pub dt: f64,
    pub bounds: SeqBounds,
    /// Sample the zero indicator and the nonzero rate separately (default)
    /// instead of using the single expectation rate.
    pub two_head_sampling: bool,
    /// Temperature on the token distribution, applied before any guidance
    /// renormalization. 1.0 leaves q untouched bit for bit.
    pub temperature: f64,
    /// Euler substeps per sampler step for image updates; the velocity is
    /// re-evaluated on the updated block, context frozen at the step start.
    pub steps_img: usize,
    /// Guidance weight, recorded in traces; callers wire a [`CfgModel`].
    pub guidance_w: Option<f64>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(schedule: Schedule, mode: CorruptionMode, dt: f64, bounds: SeqBounds) -> Self {
        assert!(dt > 0.0 && dt <= 1.0, "dt must lie in (0, 1]");
        Self {
            schedule,
            mode,
            dt,
            bounds,
            two_head_sampling: true,
            temperature: 1.0,
            steps_img: 1,
            guidance_w: None,
            seed: 0,
        }
    }
}

/// One insertion event: the step's left-endpoint time, the pre-step gap,
/// and the inserted id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionEvent {
    pub t: f64,
    pub gap: usize,
    pub id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub t_text: f64,
    pub image_times: Vec<f64>,
    pub len: usize,
}

/// Everything observable about one generation run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub events: Vec<InsertionEvent>,
    /// Insertion time per final element; `None` for prompt elements and
    /// pre-existing images.
    pub birth_times: Vec<Option<f64>>,
    /// Per-step snapshots, recorded only when asked (they dwarf the rest).
    pub snapshots: Vec<StepSnapshot>,
    /// An insertion was dropped because the sequence hit the length cap.
    pub truncated: bool,
    /// How often a per-step insertion probability had to be clamped to 1;
    /// nonzero counts signal the step size is too coarse.
    pub clamp_events: u64,
    pub final_t_text: f64,
}

/// Mutable sampler state: the sequence, the text clock, and per-element
/// birth times parallel to the sequence.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub seq: MixedSequence,
    pub t_text: f64,
    birth: Vec<Option<f64>>,
}

impl SamplerState {
    pub fn from_prompt(prompt: &MixedSequence) -> Self {
        Self {
            seq: prompt.clone(),
            t_text: 0.0,
            birth: vec![None; prompt.len()],
        }
    }

    /// Positions and clipped times of images still below time 1.
    fn open_images(&self) -> Vec<(usize, f64)> {
        self.seq
            .elements()
            .iter()
            .enumerate()
            .filter_map(|(pos, e)| match e {
                Element::Image(block) if block.time.clipped() < 1.0 => {
                    Some((pos, block.time.clipped()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn done(&self) -> bool {
        self.t_text >= 1.0 && self.open_images().is_empty()
    }
}

/// Append `count` fresh noise blocks to a prompt: the starting state for
/// fixed-image-count (independent-schedule) generation.
pub fn prompt_with_noise_images(
    prompt: &MixedSequence,
    count: usize,
    bounds: &SeqBounds,
    rng: &mut SplitRng,
) -> MixedSequence {
    let mut elements = prompt.elements().to_vec();
    for _ in 0..count {
        elements.push(Element::Image(crate::sequence::ImageBlock::noise(
            bounds.img_dim,
            rng,
        )));
    }
    MixedSequence::new(elements, prompt.prompt_len()).expect("prompt length unchanged")
}

/// Advance the state by one step. Returns false once the run is complete.
pub fn step<M: Model>(
    state: &mut SamplerState,
    model: &M,
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    trace: &mut GenerationTrace,
    rng: &mut SplitRng,
) -> bool {
    if state.done() {
        return false;
    }
    let pre = state.seq.clone();
    let t_text = state.t_text;
    let dt_text = (1.0 - t_text).min(cfg.dt).max(0.0);

    // Image flow updates, velocities evaluated against the pre-step context.
    for (pos, t_img) in state.open_images() {
        let dt_img = (1.0 - t_img).min(cfg.dt);
        let Element::Image(block) = pre.element(pos) else {
            unreachable!()
        };
        let mut y = block.values.clone();
        let substeps = cfg.steps_img.max(1);
        let h = dt_img / substeps as f64;
        for s in 0..substeps {
            let t_sub = t_img + h * s as f64;
            let v = model.velocity(&pre, t_text, pos, &y, t_sub);
            for (yd, vd) in y.iter_mut().zip(&v) {
                *yd += h * vd;
            }
        }
        state
            .seq
            .update_image_block(pos, y, ExtendedTime::new(t_img + dt_img));
    }

    // Parallel insertions against the pre-step gaps.
    if dt_text > 0.0 {
        let heads = model.heads(&pre, t_text);
        assert_eq!(
            heads.gap_count(),
            pre.gap_count(),
            "model produced wrong gap count"
        );
        let hazard = cfg.schedule.hazard(t_text).expect("t_text < 1 here");
        let mut fired: Vec<(usize, u32)> = Vec::new();
        for gap in 0..pre.gap_count() {
            if !pre.gap_is_editable(gap) {
                continue;
            }
            let h = &heads.gaps[gap];
            let insert = if cfg.two_head_sampling {
                let p_pi = 1.0 - h.pi;
                let raw = dt_text * hazard * h.lambda_nonzero;
                if raw > 1.0 {
                    trace.clamp_events += 1;
                }
                let p_lambda = raw.min(1.0);
                // Draw both so the stream shape does not depend on outcomes.
                let a = rng.bernoulli(p_pi);
                let b = rng.bernoulli(p_lambda);
                a && b
            } else {
                let raw = dt_text * hazard * h.combined_rate();
                if raw > 1.0 {
                    trace.clamp_events += 1;
                }
                rng.bernoulli(raw.min(1.0))
            };
            if !insert {
                continue;
            }
            let id = draw_token(&h.q, cfg, vocab, rng);
            fired.push((gap, id));
        }
        // Right-to-left keeps pre-step gap indices valid.
        for &(gap, id) in fired.iter().rev() {
            match state.seq.insert(gap, id, vocab, &cfg.bounds, rng) {
                Ok(next) => {
                    state.seq = next;
                    state.birth.insert(gap, Some(t_text));
                    trace.events.push(InsertionEvent { t: t_text, gap, id });
                }
                Err(_) => {
                    trace.truncated = true;
                }
            }
        }
        state.t_text += dt_text;
    }
    true
}

fn draw_token(q: &[f64], cfg: &SamplerConfig, vocab: &Vocabulary, rng: &mut SplitRng) -> u32 {
    let image_id = vocab.image_token_id() as usize;
    let mut weights: Vec<f64> = if cfg.temperature == 1.0 {
        q.to_vec()
    } else {
        q.iter()
            .map(|&p| if p > 0.0 { p.powf(1.0 / cfg.temperature) } else { 0.0 })
            .collect()
    };
    // Only the interleaved process may materialize new images.
    if cfg.mode != CorruptionMode::Interleaved {
        weights[image_id] = 0.0;
    }
    rng.weighted_index(&weights) as u32
}

/// Run the full loop: text to time 1, then any in-flight images to time 1.
pub fn generate<M: Model>(
    prompt: &MixedSequence,
    model: &M,
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    record_snapshots: bool,
    rng: &mut SplitRng,
) -> (MixedSequence, GenerationTrace) {
    assert!(prompt.len() <= cfg.bounds.max_len, "prompt exceeds max_len");
    let mut state = SamplerState::from_prompt(prompt);
    let mut trace = GenerationTrace::default();
    // Text takes <= ceil(1/dt) + 1 steps; late-inserted images one unit more.
    let max_steps = (2.0 / cfg.dt).ceil() as usize + 4;
    for _ in 0..max_steps {
        if record_snapshots {
            trace.snapshots.push(StepSnapshot {
                t_text: state.t_text,
                image_times: state
                    .seq
                    .elements()
                    .iter()
                    .filter_map(|e| match e {
                        Element::Image(b) => Some(b.time.clipped()),
                        _ => None,
                    })
                    .collect(),
                len: state.seq.len(),
            });
        }
        if !step(&mut state, model, vocab, cfg, &mut trace, rng) {
            break;
        }
    }
    assert!(state.done(), "sampler failed to finish within the step budget");
    trace.birth_times = state.birth.clone();
    trace.final_t_text = state.t_text;
    (state.seq, trace)
}

/// Independent generation runs with per-run split RNG streams, fanned out
/// across threads; output order is deterministic.
pub fn run_many<M: Model>(
    prompt: &MixedSequence,
    model: &M,
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    runs: usize,
    rng: &mut SplitRng,
) -> Vec<(MixedSequence, GenerationTrace)> {
    use rayon::prelude::*;
    let rngs = rng.split_n(runs);
    rngs.into_par_iter()
        .map(|mut run_rng| generate(prompt, model, vocab, cfg, false, &mut run_rng))
        .collect()
}

/// First-order Euler integration of a velocity field over `[t0, t1]` with
/// uniform substeps.
pub fn euler_flow<V: Fn(&[f64], f64) -> Vec<f64>>(
    y: &[f64],
    t0: f64,
    t1: f64,
    velocity: V,
    steps: usize,
) -> Vec<f64> {
    assert!(steps > 0, "at least one step");
    assert!((0.0..=1.0).contains(&t0) && t0 < t1 && t1 <= 1.0, "need 0 <= t0 < t1 <= 1");
    let h = (t1 - t0) / steps as f64;
    let mut y = y.to_vec();
    for s in 0..steps {
        let t = t0 + h * s as f64;
        let v = velocity(&y, t);
        for (yd, vd) in y.iter_mut().zip(&v) {
            *yd += h * vd;
        }
    }
    y
}

/// Empirical distribution of final id-skeletons over a batch of runs.
pub fn skeleton_distribution(
    results: &[(MixedSequence, GenerationTrace)],
    vocab: &Vocabulary,
) -> std::collections::BTreeMap<Vec<u32>, f64> {
    let mut dist = std::collections::BTreeMap::new();
    for (seq, _) in results {
        *dist.entry(seq.id_skeleton(vocab)).or_insert(0.0) += 1.0;
    }
    dist
}
