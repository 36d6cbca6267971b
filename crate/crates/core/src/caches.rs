//! Entropy, align and negative caches with their admission and eviction
//! rules, plus the reflecting step that recalibrates high-entropy samples.
//!
//! Every cache is per class and bounded. Victims are always the slot with
//! the highest stored entropy; among equal entropies the newest slot is
//! evicted so the older one survives. A newcomer must be strictly better
//! than the victim, so ties never replace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, euclidean, softmax, HyperParams, Matrix, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheKind {
    Entropy,
    Align,
    Negative,
}

impl CacheKind {
    pub const ALL: [CacheKind; 3] = [CacheKind::Entropy, CacheKind::Align, CacheKind::Negative];

    pub fn name(self) -> &'static str {
        match self {
            CacheKind::Entropy => "entropy",
            CacheKind::Align => "align",
            CacheKind::Negative => "negative",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-kind ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheToggles {
    pub entropy: bool,
    pub align: bool,
    pub negative: bool,
}

impl Default for CacheToggles {
    fn default() -> Self {
        Self {
            entropy: true,
            align: true,
            negative: true,
        }
    }
}

impl CacheToggles {
    pub fn enabled(&self, kind: CacheKind) -> bool {
        match kind {
            CacheKind::Entropy => self.entropy,
            CacheKind::Align => self.align,
            CacheKind::Negative => self.negative,
        }
    }

    /// The seven non-empty on/off combinations of the three caches.
    pub fn all_nonempty() -> Vec<CacheToggles> {
        (1u8..8)
            .map(|bits| CacheToggles {
                entropy: bits & 1 != 0,
                align: bits & 2 != 0,
                negative: bits & 4 != 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSlot {
    /// Unit feature.
    pub feature: Vec<f64>,
    /// Entropy at admission (calibrated entropy for negative slots).
    pub entropy: f64,
    pub pseudo_label: usize,
    pub probs: Vec<f64>,
    /// Euclidean distance to the class center at admission; align slots only.
    pub dist_to_center: Option<f64>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCache {
    capacity: usize,
    slots: Vec<CacheSlot>,
}

impl ClassCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn slots(&self) -> &[CacheSlot] {
        &self.slots
    }

    /// Index of the eviction candidate: highest entropy, newest on ties.
    pub fn victim_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.slots.iter().enumerate() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cur = &self.slots[b];
                    if s.entropy > cur.entropy || (s.entropy == cur.entropy && s.seq > cur.seq) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    pub fn max_entropy(&self) -> Option<f64> {
        self.victim_index().map(|i| self.slots[i].entropy)
    }

    /// Slots ordered by admission sequence.
    pub fn ordered(&self) -> Vec<&CacheSlot> {
        let mut v: Vec<&CacheSlot> = self.slots.iter().collect();
        v.sort_by_key(|s| s.seq);
        v
    }

    pub(crate) fn from_parts(capacity: usize, slots: Vec<CacheSlot>) -> Self {
        Self { capacity, slots }
    }
}

/// Outcome of one admission attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Admitted,
    Replaced { victim: CacheSlot },
    Rejected,
    /// The cache kind is switched off.
    Disabled,
}

impl Admission {
    pub fn stored(&self) -> bool {
        matches!(self, Admission::Admitted | Admission::Replaced { .. })
    }
}

/// Where a reflected sample goes.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// Calibrated entropy inside `[H_low, H_high]`.
    Negative(Admission),
    /// Calibrated entropy below `H_low`: the caller may retry the entropy cache.
    Reconsider,
    Discard,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub admitted: u64,
    pub replaced: u64,
    pub rejected: u64,
}

/// Features and label rows gathered from one cache kind, ordered by
/// `(class, seq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheMatrices {
    /// `K × d` unit features.
    pub features: Matrix,
    /// `K × C` one-hot labels, or the negative mask for the negative kind.
    pub labels: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBank {
    classes: usize,
    dim: usize,
    entropy: Vec<ClassCache>,
    align: Vec<ClassCache>,
    negative: Vec<ClassCache>,
    toggles: CacheToggles,
    next_seq: u64,
    stats: [KindStats; 3],
}

impl CacheBank {
    pub fn new(classes: usize, dim: usize, hp: &HyperParams, toggles: CacheToggles) -> Self {
        Self {
            classes,
            dim,
            entropy: (0..classes).map(|_| ClassCache::new(hp.m_entropy)).collect(),
            align: (0..classes).map(|_| ClassCache::new(hp.m_align)).collect(),
            negative: (0..classes).map(|_| ClassCache::new(hp.m_negative)).collect(),
            toggles,
            next_seq: 0,
            stats: [KindStats::default(); 3],
        }
    }

    pub(crate) fn from_parts(
        classes: usize,
        dim: usize,
        caches: [Vec<ClassCache>; 3],
        toggles: CacheToggles,
        next_seq: u64,
    ) -> Self {
        let [entropy, align, negative] = caches;
        Self {
            classes,
            dim,
            entropy,
            align,
            negative,
            toggles,
            next_seq,
            stats: [KindStats::default(); 3],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn toggles(&self) -> CacheToggles {
        self.toggles
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn stats(&self, kind: CacheKind) -> KindStats {
        self.stats[kind.index()]
    }

    pub fn class_cache(&self, kind: CacheKind, class: usize) -> &ClassCache {
        &self.kind_caches(kind)[class]
    }

    pub fn kind_caches(&self, kind: CacheKind) -> &[ClassCache] {
        match kind {
            CacheKind::Entropy => &self.entropy,
            CacheKind::Align => &self.align,
            CacheKind::Negative => &self.negative,
        }
    }

    fn kind_caches_mut(&mut self, kind: CacheKind) -> &mut Vec<ClassCache> {
        match kind {
            CacheKind::Entropy => &mut self.entropy,
            CacheKind::Align => &mut self.align,
            CacheKind::Negative => &mut self.negative,
        }
    }

    pub fn occupancy(&self, kind: CacheKind) -> usize {
        self.kind_caches(kind).iter().map(ClassCache::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        CacheKind::ALL.iter().all(|&k| self.occupancy(k) == 0)
    }

    /// Features of the entropy and align slots of `class` (the positive set).
    pub fn positive_features(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        self.entropy[class]
            .slots
            .iter()
            .chain(self.align[class].slots.iter())
            .map(|s| s.feature.as_slice())
    }

    /// Mean feature of each class's negative slots, `None` when empty.
    pub fn negative_means(&self) -> Vec<Option<Vec<f64>>> {
        self.negative
            .iter()
            .map(|cc| {
                crate::math::mean_rows(cc.ordered().into_iter().map(|s| s.feature.as_slice()), self.dim)
            })
            .collect()
    }

    fn check_inputs(&self, feature: &[f64], probs: &ProbVector) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has dimension {}, bank expects {}",
                feature.len(),
                self.dim
            )));
        }
        if probs.len() != self.classes {
            return Err(Error::invalid(format!(
                "probability vector has {} classes, bank expects {}",
                probs.len(),
                self.classes
            )));
        }
        Ok(())
    }

    fn make_slot(&mut self, feature: &[f64], probs: &ProbVector, entropy: f64, dist: Option<f64>) -> CacheSlot {
        let seq = self.next_seq;
        self.next_seq += 1;
        CacheSlot {
            feature: feature.to_vec(),
            entropy,
            pseudo_label: probs.argmax(),
            probs: probs.as_slice().to_vec(),
            dist_to_center: dist,
            seq,
        }
    }

    fn record(&mut self, kind: CacheKind, decision: &Admission) {
        let s = &mut self.stats[kind.index()];
        match decision {
            Admission::Admitted => s.admitted += 1,
            Admission::Replaced { .. } => s.replaced += 1,
            Admission::Rejected => s.rejected += 1,
            Admission::Disabled => {}
        }
    }

    /// Admit when the class cache has room, otherwise replace the
    /// highest-entropy slot iff the newcomer's entropy is strictly lower.
    pub fn entropy_cache_update(&mut self, feature: &[f64], probs: &ProbVector) -> Result<Admission> {
        self.check_inputs(feature, probs)?;
        let h = probs.entropy();
        self.entropy_admit(feature, probs, h)
    }

    /// Like [`Self::entropy_cache_update`] but with an externally supplied
    /// entropy (used when a reflected sample is reconsidered).
    pub fn entropy_admit(&mut self, feature: &[f64], probs: &ProbVector, h: f64) -> Result<Admission> {
        self.check_inputs(feature, probs)?;
        if !self.toggles.entropy {
            return Ok(Admission::Disabled);
        }
        let class = probs.argmax();
        let decision = if !self.entropy[class].is_full() {
            let slot = self.make_slot(feature, probs, h, None);
            self.entropy[class].slots.push(slot);
            Admission::Admitted
        } else {
            let vi = self.entropy[class].victim_index().expect("full cache has a victim");
            if h < self.entropy[class].slots[vi].entropy {
                let slot = self.make_slot(feature, probs, h, None);
                let victim = std::mem::replace(&mut self.entropy[class].slots[vi], slot);
                Admission::Replaced { victim }
            } else {
                Admission::Rejected
            }
        };
        self.record(CacheKind::Entropy, &decision);
        Ok(decision)
    }

    /// Admit unconditionally while there is room. When full, the
    /// highest-entropy slot is replaced only if the newcomer has strictly
    /// lower entropy and is strictly closer (Euclidean) to `center` than
    /// that slot is to the same center.
    pub fn align_cache_update(
        &mut self,
        feature: &[f64],
        probs: &ProbVector,
        center: &[f64],
    ) -> Result<Admission> {
        self.check_inputs(feature, probs)?;
        if center.len() != self.dim {
            return Err(Error::invalid("center dimension mismatch"));
        }
        if !self.toggles.align {
            return Ok(Admission::Disabled);
        }
        let class = probs.argmax();
        let h = probs.entropy();
        let dist = euclidean(feature, center);
        let decision = if !self.align[class].is_full() {
            let slot = self.make_slot(feature, probs, h, Some(dist));
            self.align[class].slots.push(slot);
            Admission::Admitted
        } else {
            let vi = self.align[class].victim_index().expect("full cache has a victim");
            let victim = &self.align[class].slots[vi];
            let victim_dist = euclidean(&victim.feature, center);
            if h < victim.entropy && dist < victim_dist {
                let slot = self.make_slot(feature, probs, h, Some(dist));
                let victim = std::mem::replace(&mut self.align[class].slots[vi], slot);
                Admission::Replaced { victim }
            } else {
                Admission::Rejected
            }
        };
        self.record(CacheKind::Align, &decision);
        Ok(decision)
    }

    /// Recalibrate a high-entropy sample against the current entropy and
    /// align caches. Returns the calibrated distribution and its entropy.
    ///
    /// Logits are the zero-shot text logits `f·t_c / τ` plus, per class,
    /// the summed affinity `Σ A(cos(f, f_ci))` over that class's positive
    /// slots. Empty classes add nothing, so an empty bank reproduces the
    /// zero-shot distribution exactly.
    pub fn reflect(&self, feature: &[f64], text: &Matrix, hp: &HyperParams) -> Result<(ProbVector, f64)> {
        if feature.len() != self.dim || text.cols() != self.dim || text.rows() != self.classes {
            return Err(Error::invalid("reflect: shape mismatch"));
        }
        let mut logits: Vec<f64> = text.iter_rows().map(|t| dot(feature, t) / hp.tau).collect();
        for (c, l) in logits.iter_mut().enumerate() {
            for s in self.positive_features(c) {
                *l += hp.affinity(dot(feature, s).clamp(-1.0, 1.0));
            }
        }
        let probs = softmax(&logits, 1.0)?;
        let h = probs.entropy();
        Ok((probs, h))
    }

    /// Three-way routing on the calibrated entropy `h_prime`:
    /// `[H_low, H_high]` goes to the negative cache, below `H_low` is
    /// handed back for entropy-cache reconsideration, above `H_high` is
    /// discarded. Bounds are `h_low_frac·ln C` and `h_high_frac·ln C`.
    pub fn negative_cache_update(
        &mut self,
        feature: &[f64],
        calibrated: &ProbVector,
        h_prime: f64,
        hp: &HyperParams,
    ) -> Result<Routing> {
        self.check_inputs(feature, calibrated)?;
        let (low, high) = negative_band(self.classes, hp);
        if h_prime < low {
            return Ok(Routing::Reconsider);
        }
        if h_prime > high {
            return Ok(Routing::Discard);
        }
        if !self.toggles.negative {
            return Ok(Routing::Negative(Admission::Disabled));
        }
        let class = calibrated.argmax();
        let decision = if !self.negative[class].is_full() {
            let slot = self.make_slot(feature, calibrated, h_prime, None);
            self.negative[class].slots.push(slot);
            Admission::Admitted
        } else {
            let vi = self.negative[class].victim_index().expect("full cache has a victim");
            if h_prime < self.negative[class].slots[vi].entropy {
                let slot = self.make_slot(feature, calibrated, h_prime, None);
                let victim = std::mem::replace(&mut self.negative[class].slots[vi], slot);
                Admission::Replaced { victim }
            } else {
                Admission::Rejected
            }
        };
        self.record(CacheKind::Negative, &decision);
        Ok(Routing::Negative(decision))
    }

    /// Feature matrix and one-hot label matrix of one cache kind.
    pub fn cache_matrices(&self, kind: CacheKind) -> CacheMatrices {
        let slots = self.ordered_slots(kind);
        let mut features = Matrix::zeros(slots.len(), self.dim);
        let mut labels = Matrix::zeros(slots.len(), self.classes);
        for (i, (class, s)) in slots.iter().enumerate() {
            features.row_mut(i).copy_from_slice(&s.feature);
            labels.set(i, *class, 1.0);
        }
        CacheMatrices { features, labels }
    }

    /// Negative features `Q_n` and mask `L_n`, where `L_n[i][c] = 1` iff the
    /// stored calibrated probability of class `c` exceeds `p_mask`.
    pub fn negative_matrices(&self, p_mask: f64) -> CacheMatrices {
        let slots = self.ordered_slots(CacheKind::Negative);
        let mut features = Matrix::zeros(slots.len(), self.dim);
        let mut labels = Matrix::zeros(slots.len(), self.classes);
        for (i, (_, s)) in slots.iter().enumerate() {
            features.row_mut(i).copy_from_slice(&s.feature);
            labels.row_mut(i).copy_from_slice(&negative_mask(&s.probs, p_mask));
        }
        CacheMatrices { features, labels }
    }

    fn ordered_slots(&self, kind: CacheKind) -> Vec<(usize, &CacheSlot)> {
        self.kind_caches(kind)
            .iter()
            .enumerate()
            .flat_map(|(c, cc)| cc.ordered().into_iter().map(move |s| (c, s)))
            .collect()
    }

    /// Drop every slot of `kind`; used by tests and ablations.
    pub fn clear(&mut self, kind: CacheKind) {
        for cc in self.kind_caches_mut(kind) {
            cc.slots.clear();
        }
    }
}

/// `(H_low, H_high)` in nats for `classes` classes.
pub fn negative_band(classes: usize, hp: &HyperParams) -> (f64, f64) {
    let ln_c = (classes as f64).ln();
    (hp.h_low_frac * ln_c, hp.h_high_frac * ln_c)
}

pub fn negative_mask(probs: &[f64], p_mask: f64) -> Vec<f64> {
    probs.iter().map(|&p| if p > p_mask { 1.0 } else { 0.0 }).collect()
}

/// Zero-shot distribution `softmax(f·Tᵀ, τ)` and its entropy.
pub fn zero_shot(feature: &[f64], text: &Matrix, tau: f64) -> Result<(ProbVector, f64)> {
    if feature.len() != text.cols() {
        return Err(Error::invalid("zero-shot: feature/text dimension mismatch"));
    }
    let probs = softmax(&text.mat_vec(feature), tau)?;
    let h = probs.entropy();
    Ok((probs, h))
}
