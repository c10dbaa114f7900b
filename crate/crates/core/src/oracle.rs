//! Exact posterior insertion statistics, brute-forced from a tiny dataset.
//!
//! For a corrupted sequence `x_t` at time `t`, every way a data sequence
//! could have produced it is a subsequence embedding; the deletion pattern,
//! and hence every gap's missing count and bag, is determined per embedding.
//! Enumerating embeddings therefore yields the exact posterior over
//! `(data sequence, embedding)` and with it the population minimizers of the
//! insertion losses: `pi = P(k = 0)`, `lambda_nonzero = E[k | k > 0]`, and
//! `q` proportional to the expected bag composition. The same posterior
//! supplies per-image velocity targets, for which the conditional velocity
//! has a Gaussian-mixture closed form.
//!
//! The table treats images as pseudo-tokens of the image id: under the
//! interleaved schedule an image is present at text time `t` with the same
//! probability `retention(t)` as any token, so presence patterns carry no
//! extra information. Continuous values of other in-flight images are not
//! conditioned on; on the point-target datasets used for verification the
//! discrete context already determines the mixture.
//!
//! Everything is exact, so data sequences are capped at 12 elements and
//! whole-process enumerations at 10^4 states.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::corruption::{corrupt_at, CorruptionMode, CorruptionRecord};
use crate::heads::{GapHeads, InsertionHeads};
use crate::losses::{text_loss, text_normalizer, SATURATED_NEG_LOG};
use crate::rng::SplitRng;
use crate::schedule::{ExtendedTime, Schedule};
use crate::sequence::{Element, MixedSequence, Vocabulary};

/// Hard cap on a single data sequence for explicit embedding enumeration.
pub const MAX_DATA_LEN: usize = 12;
/// Hard cap on whole-process enumerations (sum over data of 2^corruptible).
pub const MAX_ENUM_STATES: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("state is unreachable: no data sequence embeds the query")]
    UnreachableState,
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("data sequence of length {0} exceeds the enumeration cap {MAX_DATA_LEN}")]
    DataTooLong(usize),
    #[error("enumeration budget exceeded: {0} states > {MAX_ENUM_STATES}")]
    BudgetExceeded(usize),
    #[error("velocity undefined at t_img = 1")]
    ImageTimeAtOne,
    #[error("no image at position {0} of the query")]
    NoImageAt(usize),
    #[error("dataset is empty or has non-positive total weight")]
    BadDataset,
}

/// Exact per-state statistics, cached per `(skeleton, prompt_len, t)`.
#[derive(Debug, Clone)]
pub struct OracleEntry {
    /// Normalized posterior over dataset indices.
    pub posterior: Vec<f64>,
    pub heads: InsertionHeads,
    /// Exact `E[k_i]` per gap.
    pub expected_counts: Vec<f64>,
    /// Exact `P(k_i = 0)` per gap.
    pub p_zero: Vec<f64>,
    /// Expected bag composition per gap (unnormalized weights over ids).
    pub bag_weights: Vec<Vec<f64>>,
    /// For each element position of the query holding an image: the posterior
    /// mixture of clean target blocks `(weight, values)`.
    pub image_targets: HashMap<usize, Vec<(f64, Vec<f64>)>>,
}

type CacheKey = (Vec<u32>, usize, u64, u8);

/// Brute-force ground truth over a weighted toy dataset.
#[derive(Debug)]
pub struct OracleTable {
    dataset: Vec<(MixedSequence, f64)>,
    vocab: Vocabulary,
    cache: RwLock<HashMap<CacheKey, Arc<OracleEntry>>>,
}

impl OracleTable {
    pub fn new(dataset: Vec<(MixedSequence, f64)>, vocab: Vocabulary) -> Result<Self, OracleError> {
        if dataset.is_empty() {
            return Err(OracleError::BadDataset);
        }
        for (seq, _) in &dataset {
            if seq.len() > MAX_DATA_LEN {
                return Err(OracleError::DataTooLong(seq.len()));
            }
        }
        let total: f64 = dataset.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(OracleError::BadDataset);
        }
        let dataset = dataset
            .into_iter()
            .map(|(seq, w)| (seq, w / total))
            .collect();
        Ok(Self {
            dataset,
            vocab,
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// The same data with prompts stripped: the marginal law of targets,
    /// used as the unconditional model under guidance.
    pub fn unconditional(&self) -> Result<Self, OracleError> {
        let stripped = self
            .dataset
            .iter()
            .map(|(seq, w)| {
                let target = seq.elements()[seq.prompt_len()..].to_vec();
                (MixedSequence::new(target, 0).expect("no prompt"), *w)
            })
            .collect();
        Self::new(stripped, self.vocab.clone())
    }

    pub fn dataset(&self) -> &[(MixedSequence, f64)] {
        &self.dataset
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn cache_key(&self, skeleton: &[u32], prompt_len: usize, t: f64, mode: CorruptionMode) -> CacheKey {
        let mode_tag = match mode {
            CorruptionMode::Interleaved => 0u8,
            CorruptionMode::Independent => 1,
            CorruptionMode::TextOnly => 2,
        };
        // Discretize t to 1e-9 to avoid float-key pathologies.
        (skeleton.to_vec(), prompt_len, (t * 1e9).round() as u64, mode_tag)
    }

    /// Exact statistics for the state `(x_t, t)` under the given corruption
    /// law, computed once and cached. Under the interleaved law images delete
    /// like tokens; under the others an image's presence is certain and
    /// carries no information.
    pub fn entry(
        &self,
        x_t: &MixedSequence,
        t: f64,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<Arc<OracleEntry>, OracleError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(OracleError::TimeOutOfRange(t));
        }
        let skeleton = x_t.id_skeleton(&self.vocab);
        let key = self.cache_key(&skeleton, x_t.prompt_len(), t, mode);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let entry = Arc::new(self.compute_entry(x_t, &skeleton, t, schedule, mode)?);
        self.cache
            .write()
            .expect("cache lock")
            .insert(key, entry.clone());
        Ok(entry)
    }

    fn compute_entry(
        &self,
        x_t: &MixedSequence,
        skeleton: &[u32],
        t: f64,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<OracleEntry, OracleError> {
        let kappa = schedule.retention(t).expect("t in [0, 1]");
        let n = skeleton.len();
        let gaps = n + 1;
        let width = self.vocab.head_width();

        let mut z = 0.0;
        let mut posterior_raw = vec![0.0; self.dataset.len()];
        let mut p_zero_w = vec![0.0; gaps];
        let mut count_w = vec![0.0; gaps];
        let mut bag_w = vec![vec![0.0; width]; gaps];
        let mut image_targets: HashMap<usize, Vec<(f64, Vec<f64>)>> = HashMap::new();

        // Survival probability of one data element under the mode's law.
        let keep_p = |element: &Element| -> f64 {
            match (element, mode) {
                (Element::Image(_), CorruptionMode::Independent)
                | (Element::Image(_), CorruptionMode::TextOnly) => 1.0,
                _ => kappa,
            }
        };

        for (di, (data, w)) in self.dataset.iter().enumerate() {
            let Some((dskel, offset)) = prompt_compatible(data, skeleton, x_t.prompt_len(), &self.vocab)
            else {
                continue;
            };
            for emb in enumerate_embeddings(&skeleton[offset..], &dskel[offset..]) {
                // Absolute source positions of survivors: prompt then embedding.
                let mut positions: Vec<usize> = (0..offset).collect();
                positions.extend(emb.iter().map(|p| p + offset));
                // Per-embedding weight: survival factors over the non-prompt
                // region. Mode-dependent, so embeddings of one datum can
                // weigh differently (e.g. deleting a never-deleted image).
                let mut weight = *w;
                {
                    let mut iter = positions.iter().peekable();
                    for (src, element) in data.elements().iter().enumerate() {
                        let kept = iter.peek() == Some(&&src);
                        if kept {
                            iter.next();
                        }
                        if src < offset {
                            continue;
                        }
                        let p = keep_p(element);
                        weight *= if kept { p } else { 1.0 - p };
                        if weight == 0.0 {
                            break;
                        }
                    }
                }
                if weight <= 0.0 {
                    continue;
                }
                z += weight;
                posterior_raw[di] += weight;
                // Walk the data sequence, attributing deletions to gaps. The
                // running `gap` equals the survivor ordinal, i.e. the element
                // position in the query.
                let mut deleted_in_gap = vec![0usize; gaps];
                let mut gap = 0usize;
                let mut iter = positions.iter().peekable();
                for (src, &id) in dskel.iter().enumerate() {
                    if iter.peek() == Some(&&src) {
                        iter.next();
                        if let Element::Image(block) = data.element(src) {
                            image_targets
                                .entry(gap)
                                .or_default()
                                .push((weight, block.values.clone()));
                        }
                        gap += 1;
                    } else {
                        count_w[gap] += weight;
                        bag_w[gap][id as usize] += weight;
                        deleted_in_gap[gap] += 1;
                    }
                }
                for (g, &k) in deleted_in_gap.iter().enumerate() {
                    if k == 0 {
                        p_zero_w[g] += weight;
                    }
                }
            }
        }

        if z <= 0.0 {
            return Err(OracleError::UnreachableState);
        }

        let posterior: Vec<f64> = posterior_raw.iter().map(|p| p / z).collect();
        let expected_counts: Vec<f64> = count_w.iter().map(|c| c / z).collect();
        let p_zero: Vec<f64> = p_zero_w.iter().map(|p| p / z).collect();
        let mut heads = Vec::with_capacity(gaps);
        for g in 0..gaps {
            let pi = p_zero[g].clamp(0.0, 1.0);
            let lambda_nonzero = if pi < 1.0 {
                expected_counts[g] / (1.0 - pi)
            } else {
                0.0
            };
            let total: f64 = bag_w[g].iter().sum();
            let q = if total > 0.0 {
                bag_w[g].iter().map(|c| c / total).collect()
            } else {
                vec![1.0 / width as f64; width]
            };
            heads.push(GapHeads {
                pi,
                lambda_nonzero,
                q,
            });
        }
        // Image targets were keyed by survivor ordinal == element position,
        // and their weights normalize per image.
        let image_targets = image_targets
            .into_iter()
            .map(|(pos, mut targets)| {
                let tz: f64 = targets.iter().map(|(w, _)| w).sum();
                for (w, _) in &mut targets {
                    *w /= tz;
                }
                (pos, targets)
            })
            .collect();

        Ok(OracleEntry {
            posterior,
            heads: InsertionHeads { gaps: heads },
            expected_counts,
            p_zero,
            bag_weights: bag_w,
            image_targets,
        })
    }

    /// Normalized posterior over data sequences given the observed state.
    pub fn posterior_over_data(
        &self,
        x_t: &MixedSequence,
        t: f64,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<Vec<f64>, OracleError> {
        Ok(self.entry(x_t, t, schedule, mode)?.posterior.clone())
    }

    /// The population-minimizing insertion heads at `(x_t, t)`.
    pub fn oracle_heads(
        &self,
        x_t: &MixedSequence,
        t: f64,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<InsertionHeads, OracleError> {
        Ok(self.entry(x_t, t, schedule, mode)?.heads.clone())
    }

    /// Exact marginal velocity for the image at element position `pos`.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity(
        &self,
        x_t: &MixedSequence,
        t_text: f64,
        pos: usize,
        y_t: &[f64],
        t_img: f64,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<Vec<f64>, OracleError> {
        let entry = self.entry(x_t, t_text, schedule, mode)?;
        let targets = entry
            .image_targets
            .get(&pos)
            .ok_or(OracleError::NoImageAt(pos))?;
        mixture_velocity(targets, y_t, t_img)
    }

    /// Expected per-record text loss at time `t` with the given head source,
    /// by exhaustive enumeration of `(datum, deletion pattern)`.
    pub fn expected_text_loss<H>(
        &self,
        t: f64,
        mode: CorruptionMode,
        schedule: &Schedule,
        mut heads_for: H,
    ) -> Result<f64, OracleError>
    where
        H: FnMut(&MixedSequence, f64) -> Result<InsertionHeads, OracleError>,
    {
        if !(0.0..=1.0).contains(&t) {
            return Err(OracleError::TimeOutOfRange(t));
        }
        let kappa = schedule.retention(t).expect("t in [0, 1]");
        let budget: usize = self
            .dataset
            .iter()
            .map(|(d, _)| 1usize << corruptible_positions(d, mode).len())
            .sum();
        if budget > MAX_ENUM_STATES {
            return Err(OracleError::BudgetExceeded(budget));
        }

        let mut total = 0.0;
        for (data, w) in &self.dataset {
            let corruptible = corruptible_positions(data, mode);
            let c = corruptible.len();
            for mask in 0u32..(1u32 << c) {
                let kept_of_mask = mask.count_ones() as i32;
                let p_mask = kappa.powi(kept_of_mask) * (1.0 - kappa).powi(c as i32 - kept_of_mask);
                if p_mask <= 0.0 {
                    continue;
                }
                let rec = record_from_mask(data, &corruptible, mask, t, &self.vocab);
                let heads = heads_for(&rec.x_t, t)?;
                let report =
                    text_loss(&heads, &rec).map_err(|_| OracleError::UnreachableState)?;
                total += w * p_mask * report.text_total;
            }
        }
        Ok(total)
    }

    /// Population minimum of the expected text loss at time `t`: the value
    /// reached by plugging the oracle's own heads in.
    pub fn loss_floor(
        &self,
        t: f64,
        mode: CorruptionMode,
        schedule: &Schedule,
    ) -> Result<f64, OracleError> {
        self.expected_text_loss(t, mode, schedule, |x, tt| {
            self.oracle_heads(x, tt, schedule, mode)
        })
    }

    /// Expected per-record text loss conditional on the state `x_t`, for
    /// arbitrary heads, in closed form from the cached gap statistics.
    /// Infinite if some head puts zero mass where the posterior does not.
    pub fn expected_state_loss(
        &self,
        x_t: &MixedSequence,
        t: f64,
        heads: &InsertionHeads,
        schedule: &Schedule,
        mode: CorruptionMode,
    ) -> Result<f64, OracleError> {
        let entry = self.entry(x_t, t, schedule, mode)?;
        let gaps = x_t.gap_count();
        assert_eq!(heads.gap_count(), gaps, "gap count mismatch");
        let mut total = 0.0;
        for g in 0..gaps {
            if !x_t.gap_is_editable(g) {
                continue;
            }
            let h = &heads.gaps[g];
            let p0 = entry.p_zero[g];
            let ek = entry.expected_counts[g];
            let pn = 1.0 - p0;
            // Token cross-entropy: -sum_a E[count_a] ln q_a.
            let z: f64 = entry.bag_weights[g].iter().sum();
            for (a, &wq) in entry.bag_weights[g].iter().enumerate() {
                if wq > 0.0 {
                    let e_count = ek * (wq / z);
                    total += e_count * neg_ln(h.q[a]);
                }
            }
            // Gated Poisson: lambda P(k>0) - ln(lambda) E[k].
            if pn > 0.0 {
                total += h.lambda_nonzero * pn;
                if ek > 0.0 {
                    total += ek * neg_ln(h.lambda_nonzero);
                }
            }
            // BCE on the zero indicator.
            if p0 > 0.0 {
                total += p0 * neg_ln(h.pi);
            }
            if pn > 0.0 {
                total += pn * neg_ln(1.0 - h.pi);
            }
        }
        Ok(total / text_normalizer(x_t.len()))
    }

    /// Monte Carlo secondary oracle: simulate the corruption process and
    /// condition on the observed skeleton by rejection. Returns the matched
    /// sample count and the estimated gap statistics.
    pub fn simulate_heads(
        &self,
        x_t: &MixedSequence,
        t: f64,
        mode: CorruptionMode,
        schedule: &Schedule,
        samples: usize,
        rng: &mut SplitRng,
    ) -> SimulatedHeads {
        let query = x_t.id_skeleton(&self.vocab);
        let gaps = query.len() + 1;
        let width = self.vocab.head_width();
        let weights: Vec<f64> = self.dataset.iter().map(|(_, w)| *w).collect();
        let mut matched = 0usize;
        let mut count_sum = vec![0.0; gaps];
        let mut zero_sum = vec![0.0; gaps];
        let mut bag_sum = vec![vec![0.0; width]; gaps];
        for _ in 0..samples {
            let di = rng.weighted_index(&weights);
            let rec = corrupt_at(&self.dataset[di].0, &self.vocab, schedule, mode, t, rng);
            if rec.x_t.id_skeleton(&self.vocab) != query
                || rec.x_t.prompt_len() != x_t.prompt_len()
            {
                continue;
            }
            matched += 1;
            for g in 0..gaps {
                count_sum[g] += rec.counts[g] as f64;
                if rec.counts[g] == 0 {
                    zero_sum[g] += 1.0;
                }
                for &id in &rec.bags[g] {
                    bag_sum[g][id as usize] += 1.0;
                }
            }
        }
        let m = matched.max(1) as f64;
        SimulatedHeads {
            matched,
            expected_counts: count_sum.iter().map(|c| c / m).collect(),
            p_zero: zero_sum.iter().map(|z| z / m).collect(),
            bag_probs: bag_sum
                .iter()
                .map(|row| {
                    let z: f64 = row.iter().sum();
                    if z > 0.0 {
                        row.iter().map(|c| c / z).collect()
                    } else {
                        vec![0.0; width]
                    }
                })
                .collect(),
        }
    }

    /// All states reachable by corrupting the dataset, as canonical
    /// `(skeleton, prompt_len)` pairs. Budget-guarded.
    pub fn reachable_states(&self) -> Result<Vec<(Vec<u32>, usize)>, OracleError> {
        let budget: usize = self
            .dataset
            .iter()
            .map(|(d, _)| 1usize << (d.len() - d.prompt_len()))
            .sum();
        if budget > MAX_ENUM_STATES {
            return Err(OracleError::BudgetExceeded(budget));
        }
        let mut states: Vec<(Vec<u32>, usize)> = Vec::new();
        for (data, _) in &self.dataset {
            let corruptible: Vec<usize> = (data.prompt_len()..data.len()).collect();
            let skel = data.id_skeleton(&self.vocab);
            for mask in 0u32..(1u32 << corruptible.len()) {
                let mut state: Vec<u32> = skel[..data.prompt_len()].to_vec();
                for (bit, &pos) in corruptible.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        state.push(skel[pos]);
                    }
                }
                states.push((state, data.prompt_len()));
            }
        }
        states.sort();
        states.dedup();
        Ok(states)
    }
}

/// Monte Carlo estimates of the oracle gap statistics.
#[derive(Debug, Clone)]
pub struct SimulatedHeads {
    pub matched: usize,
    pub expected_counts: Vec<f64>,
    pub p_zero: Vec<f64>,
    pub bag_probs: Vec<Vec<f64>>,
}

fn neg_ln(p: f64) -> f64 {
    if p > 0.0 {
        -p.ln()
    } else {
        SATURATED_NEG_LOG
    }
}

/// Conditional velocity of a point-target mixture: responsibilities are
/// Gaussian likelihoods of `y_t` around `t * target`, each component moving
/// straight at `(target - y_t) / (1 - t)`.
pub fn mixture_velocity(
    targets: &[(f64, Vec<f64>)],
    y_t: &[f64],
    t_img: f64,
) -> Result<Vec<f64>, OracleError> {
    if !(0.0..=1.0).contains(&t_img) || t_img >= 1.0 {
        return Err(OracleError::ImageTimeAtOne);
    }
    assert!(!targets.is_empty(), "empty target mixture");
    let dim = y_t.len();
    let sigma2 = (1.0 - t_img).powi(2);
    // Log-space responsibilities for numerical sanity.
    let log_resp: Vec<f64> = targets
        .iter()
        .map(|(w, target)| {
            let d2: f64 = y_t
                .iter()
                .zip(target)
                .map(|(y, ts)| (y - t_img * ts).powi(2))
                .sum();
            w.max(1e-300).ln() - d2 / (2.0 * sigma2)
        })
        .collect();
    let max = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let resp_raw: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = resp_raw.iter().sum();
    let mut v = vec![0.0; dim];
    for ((_, target), r) in targets.iter().zip(&resp_raw) {
        let r = r / z;
        for d in 0..dim {
            v[d] += r * (target[d] - y_t[d]) / (1.0 - t_img);
        }
    }
    Ok(v)
}

/// Data skeleton plus the shared prompt length if the datum's prompt matches
/// the query's; `None` if incompatible.
fn prompt_compatible(
    data: &MixedSequence,
    query_skeleton: &[u32],
    query_prompt_len: usize,
    vocab: &Vocabulary,
) -> Option<(Vec<u32>, usize)> {
    if data.prompt_len() != query_prompt_len {
        return None;
    }
    let dskel = data.id_skeleton(vocab);
    if dskel.len() < query_skeleton.len() {
        return None;
    }
    if dskel[..query_prompt_len] != query_skeleton[..query_prompt_len] {
        return None;
    }
    Some((dskel, query_prompt_len))
}

/// All strictly increasing position maps embedding `query` into `data`.
fn enumerate_embeddings(query: &[u32], data: &[u32]) -> Vec<Vec<usize>> {
    fn recurse(
        qi: usize,
        start: usize,
        query: &[u32],
        data: &[u32],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if qi == query.len() {
            out.push(current.clone());
            return;
        }
        let needed = query.len() - qi;
        if data.len() < start + needed {
            return;
        }
        for pos in start..=(data.len() - needed) {
            if data[pos] == query[qi] {
                current.push(pos);
                recurse(qi + 1, pos + 1, query, data, current, out);
                current.pop();
            }
        }
    }
    let mut out = Vec::new();
    recurse(0, 0, query, data, &mut Vec::new(), &mut out);
    out
}

/// Positions of `data` subject to deletion under `mode`.
fn corruptible_positions(data: &MixedSequence, mode: CorruptionMode) -> Vec<usize> {
    (data.prompt_len()..data.len())
        .filter(|&i| match mode {
            CorruptionMode::Interleaved => true,
            CorruptionMode::Independent | CorruptionMode::TextOnly => {
                !data.element(i).is_image()
            }
        })
        .collect()
}

/// Deterministic corruption record for a fixed keep-mask over the
/// corruptible positions. Surviving images keep their clean values; the text
/// loss never reads them.
fn record_from_mask(
    data: &MixedSequence,
    corruptible: &[usize],
    mask: u32,
    t: f64,
    vocab: &Vocabulary,
) -> CorruptionRecord {
    let mut kept_flags = vec![true; data.len()];
    for (bit, &pos) in corruptible.iter().enumerate() {
        kept_flags[pos] = mask & (1 << bit) != 0;
    }
    let mut survivors = Vec::new();
    let mut alignment = Vec::new();
    let mut deleted: Vec<(usize, u32)> = Vec::new();
    for (src, element) in data.elements().iter().enumerate() {
        if kept_flags[src] {
            alignment.push(src);
            survivors.push(element.clone());
        } else {
            deleted.push((survivors.len(), element.id(vocab)));
        }
    }
    let gap_count = survivors.len() + 1;
    let mut bags: Vec<Vec<u32>> = vec![Vec::new(); gap_count];
    for (gap, id) in deleted {
        bags[gap].push(id);
    }
    let counts = bags.iter().map(Vec::len).collect();
    CorruptionRecord {
        x_t: MixedSequence::new(survivors, data.prompt_len()).expect("prompt kept"),
        bags,
        counts,
        tau_text: ExtendedTime::new(t),
        image_times: Vec::new(),
        image_noise: Vec::new(),
        alignment,
    }
}
