//! Synthetic narrated videos with a controllable narration noise model.
//!
//! A video is a tiling of its timeline into segments. Every segment shows
//! one latent topic: its frames are the topic's unit vector plus isotropic
//! Gaussian noise. Each segment gets one narration sentence. A sentence is
//! either alignable (its words come from the segment's topic, ground truth
//! is the segment) or unalignable (its words come from a topic that never
//! appears in this video). ASR timestamps are exact for well-aligned
//! sentences, shifted by up to `max_offset_sec` for the rest of the
//! alignable ones, and occasionally swapped between neighbours to break the
//! narration order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, HiddenGt, NarratedVideo, SentenceRecord};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModelParams {
    /// Fraction of sentences that depict something in the video.
    pub frac_alignable: f64,
    /// Fraction of all sentences whose ASR timestamps are exact.
    pub frac_well_aligned: f64,
    /// Largest ASR shift, in seconds, for misaligned sentences.
    pub max_offset_sec: f64,
    /// Chance of swapping the ASR slots of two neighbouring misaligned sentences.
    pub order_shuffle_prob: f64,
    /// Expected norm of the per-frame Gaussian noise (topic vectors have unit norm).
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for NoiseModelParams {
    fn default() -> Self {
        Self {
            frac_alignable: 0.30,
            frac_well_aligned: 0.15,
            max_offset_sec: 8.0,
            order_shuffle_prob: 0.1,
            feature_noise: 0.5,
            seed: 0,
        }
    }
}

impl NoiseModelParams {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(p(self.frac_alignable) && p(self.frac_well_aligned) && p(self.order_shuffle_prob)) {
            return Err(CorpusError::Params("fractions must lie in [0, 1]".into()));
        }
        if self.frac_well_aligned > self.frac_alignable {
            return Err(CorpusError::Params(
                "frac_well_aligned cannot exceed frac_alignable".into(),
            ));
        }
        if !(self.max_offset_sec >= 0.0) || !(self.feature_noise >= 0.0) {
            return Err(CorpusError::Params(
                "max_offset_sec and feature_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Word inventory: filler words shared by all sentences, plus a disjoint
/// block of words per topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Vocabulary {
    /// Topics that can appear on screen.
    pub n_topics: usize,
    /// Topics that are only ever talked about; unalignable sentences draw
    /// from these. With none, they reuse visual topics absent from the video.
    pub n_speech_topics: usize,
    pub words_per_topic: usize,
    pub n_filler: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            n_topics: 32,
            n_speech_topics: 16,
            words_per_topic: 2,
            n_filler: 32,
        }
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.n_filler + (self.n_topics + self.n_speech_topics) * self.words_per_topic
    }

    /// Word `i` of `topic`; speech topics are numbered after visual ones.
    pub fn topic_word(&self, topic: usize, i: usize) -> u32 {
        (self.n_filler + topic * self.words_per_topic + i) as u32
    }

    pub fn word_text(&self, id: u32) -> String {
        let id = id as usize;
        if id < self.n_filler {
            format!("f{id}")
        } else {
            let t = (id - self.n_filler) / self.words_per_topic;
            let i = (id - self.n_filler) % self.words_per_topic;
            if t < self.n_topics {
                format!("t{t}w{i}")
            } else {
                format!("s{}w{i}", t - self.n_topics)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusDims {
    /// Video length T in seconds (one feature per second).
    pub duration_sec: usize,
    /// Raw visual feature size C_raw.
    pub feature_dim: usize,
    pub min_segment_sec: usize,
    pub max_segment_sec: usize,
    pub vocab: Vocabulary,
}

impl Default for CorpusDims {
    fn default() -> Self {
        Self {
            duration_sec: 96,
            feature_dim: 64,
            min_segment_sec: 4,
            max_segment_sec: 10,
            vocab: Vocabulary::default(),
        }
    }
}

impl CorpusDims {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.duration_sec == 0 || self.feature_dim == 0 {
            return Err(CorpusError::Params("dimensions must be positive".into()));
        }
        if self.min_segment_sec == 0 || self.min_segment_sec > self.max_segment_sec {
            return Err(CorpusError::Params("need 0 < min_segment_sec <= max_segment_sec".into()));
        }
        let max_segments = self.duration_sec.div_ceil(self.min_segment_sec);
        let spare = usize::from(self.vocab.n_speech_topics == 0);
        if self.vocab.n_topics < max_segments + spare || self.vocab.words_per_topic == 0 {
            return Err(CorpusError::Params(format!(
                "need at least {} visual topics with at least one word each",
                max_segments + spare
            )));
        }
        Ok(())
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_topics(seed: u64, dims: &CorpusDims) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
    (0..dims.vocab.n_topics)
        .map(|_| {
            let v = gaussian_vec(&mut rng, dims.feature_dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// `floor(x + u)` with `u ~ U[0,1)`: unbiased integer rounding.
fn randomized_round(rng: &mut ChaCha8Rng, x: f64) -> usize {
    (x + rng.random::<f64>()).floor().max(0.0) as usize
}

pub fn generate_corpus(
    n_videos: usize,
    params: &NoiseModelParams,
    dims: &CorpusDims,
) -> Result<Vec<NarratedVideo>, CorpusError> {
    params.validate()?;
    dims.validate()?;
    let topics = unit_topics(params.seed, dims);
    (0..n_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(params.seed, i as u64));
            generate_video(&format!("synth-{i:05}"), &mut rng, &topics, params, dims)
        })
        .collect()
}

struct Slot {
    start: usize,
    end: usize,
    topic: usize,
}

fn generate_video(
    id: &str,
    rng: &mut ChaCha8Rng,
    topics: &[Vec<f64>],
    params: &NoiseModelParams,
    dims: &CorpusDims,
) -> Result<NarratedVideo, CorpusError> {
    let t_len = dims.duration_sec;
    let vocab = &dims.vocab;

    // timeline tiling
    let mut bounds = Vec::new();
    let mut at = 0;
    while at < t_len {
        let len = rng.random_range(dims.min_segment_sec..=dims.max_segment_sec);
        let end = (at + len).min(t_len);
        bounds.push((at, end));
        at = end;
    }
    let mut topic_order: Vec<usize> = (0..vocab.n_topics).collect();
    topic_order.shuffle(rng);
    let (shown, hidden) = topic_order.split_at(bounds.len());
    let slots: Vec<Slot> = bounds
        .iter()
        .zip(shown)
        .map(|(&(start, end), &topic)| Slot { start, end, topic })
        .collect();

    // frames
    let noise_scale = params.feature_noise / (dims.feature_dim as f64).sqrt();
    let mut features = Tensor2D::zeros(t_len, dims.feature_dim);
    for slot in &slots {
        for t in slot.start..slot.end {
            let noise = gaussian_vec(rng, dims.feature_dim);
            for (c, out) in features.row_mut(t).iter_mut().enumerate() {
                *out = topics[slot.topic][c] + noise_scale * noise[c];
            }
        }
    }

    // which slots carry alignable / well-aligned narration
    let k = slots.len();
    let n_align = randomized_round(rng, params.frac_alignable * k as f64).min(k);
    let n_well = randomized_round(rng, params.frac_well_aligned * k as f64).min(n_align);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut alignable = vec![false; k];
    let mut well = vec![false; k];
    for (rank, &s) in order.iter().enumerate() {
        alignable[s] = rank < n_align;
        well[s] = rank < n_well;
    }

    let max_off = params.max_offset_sec.floor() as i64;
    let mut asr: Vec<(usize, usize)> = Vec::with_capacity(k);
    for (s, slot) in slots.iter().enumerate() {
        if alignable[s] && !well[s] && max_off >= 1 {
            let mag = rng.random_range(1..=max_off);
            let shift = if rng.random::<bool>() { mag } else { -mag };
            let len = (slot.end - slot.start) as i64;
            let start = (slot.start as i64 + shift).clamp(0, t_len as i64 - len);
            asr.push((start as usize, (start + len) as usize));
        } else {
            asr.push((slot.start, slot.end));
        }
    }
    // order violations between neighbouring misaligned sentences
    let misaligned: Vec<usize> = (0..k).filter(|&s| alignable[s] && !well[s]).collect();
    for pair in misaligned.windows(2) {
        if rng.random::<f64>() < params.order_shuffle_prob {
            asr.swap(pair[0], pair[1]);
        }
    }

    let mut hidden_iter = hidden.iter().copied().cycle();
    let mut sentences = Vec::with_capacity(k);
    for (s, slot) in slots.iter().enumerate() {
        let (topic, gt) = if alignable[s] {
            (slot.topic, HiddenGt::aligned(slot.start as f64, slot.end as f64))
        } else {
            let fresh = if vocab.n_speech_topics > 0 {
                vocab.n_topics + rng.random_range(0..vocab.n_speech_topics)
            } else {
                hidden_iter.next().expect("validated topic count")
            };
            (fresh, HiddenGt::unalignable())
        };
        let mut tokens: Vec<u32> = Vec::new();
        for _ in 0..rng.random_range(1..=3usize) {
            tokens.push(vocab.topic_word(topic, rng.random_range(0..vocab.words_per_topic)));
        }
        if vocab.n_filler > 0 {
            for _ in 0..rng.random_range(1..=4usize) {
                tokens.push(rng.random_range(0..vocab.n_filler) as u32);
            }
        }
        tokens.shuffle(rng);
        let text = tokens.iter().map(|&t| vocab.word_text(t)).collect::<Vec<_>>().join(" ");
        let (start, end) = asr[s];
        sentences.push(SentenceRecord {
            text,
            tokens,
            start: start as f64,
            end: end as f64,
            gt: Some(gt),
        });
    }
    sentences.sort_by(|a, b| a.start.total_cmp(&b.start));

    let video = NarratedVideo {
        id: id.to_string(),
        features,
        sentences,
    };
    video.validate()?;
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(videos: &[NarratedVideo], f: impl Fn(&SentenceRecord) -> bool) -> (usize, usize) {
        let all: Vec<&SentenceRecord> = videos.iter().flat_map(|v| &v.sentences).collect();
        (all.iter().filter(|s| f(s)).count(), all.len())
    }

    #[test]
    fn alignable_fraction_near_target() {
        let params = NoiseModelParams::default();
        let dims = CorpusDims::default();
        // ~13 sentences per video
        let videos = generate_corpus(80, &params, &dims).unwrap();
        let (al, n) = count(&videos, |s| s.gt.as_ref().unwrap().alignable);
        assert!(n >= 1000, "{n}");
        let frac = al as f64 / n as f64;
        assert!((frac - 0.30).abs() <= 0.03, "alignable fraction {frac}");
    }

    #[test]
    fn noiseless_limit_matches_ground_truth() {
        let params = NoiseModelParams {
            frac_alignable: 1.0,
            max_offset_sec: 0.0,
            order_shuffle_prob: 0.0,
            ..Default::default()
        };
        let dims = CorpusDims::default();
        for v in generate_corpus(10, &params, &dims).unwrap() {
            for s in &v.sentences {
                let (gs, ge) = s.gt.as_ref().unwrap().interval().unwrap();
                let t = v.duration();
                assert_eq!(s.asr_mask(t), super::super::SentenceMask::from_interval(gs, ge, t));
            }
        }
    }

    #[test]
    fn same_seed_is_identical() {
        let params = NoiseModelParams {
            seed: 42,
            ..Default::default()
        };
        let dims = CorpusDims::default();
        let a = generate_corpus(5, &params, &dims).unwrap();
        let b = generate_corpus(5, &params, &dims).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        super::super::write_jsonl(&mut ba, &a).unwrap();
        super::super::write_jsonl(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn ground_truth_stays_in_bounds() {
        let dims = CorpusDims::default();
        let params = NoiseModelParams {
            max_offset_sec: 30.0,
            order_shuffle_prob: 0.5,
            ..Default::default()
        };
        for v in generate_corpus(30, &params, &dims).unwrap() {
            v.validate().unwrap();
            for s in &v.sentences {
                if let Some((a, b)) = s.gt.as_ref().unwrap().interval() {
                    assert!(a >= 0.0 && b <= v.duration() as f64 && a < b);
                }
            }
        }
    }

    #[test]
    fn invalid_fractions_are_rejected() {
        let params = NoiseModelParams {
            frac_alignable: 0.1,
            frac_well_aligned: 0.2,
            ..Default::default()
        };
        assert!(generate_corpus(1, &params, &CorpusDims::default()).is_err());
    }
}
