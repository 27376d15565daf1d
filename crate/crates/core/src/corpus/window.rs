use rand::Rng;

use super::{CorpusError, HiddenGt, NarratedVideo, SentenceMask};
use crate::tensor::Tensor2D;

/// A contiguous crop of a video with its overlapping sentences, all masks
/// re-indexed to window coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub video_id: String,
    /// Window start in video seconds.
    pub offset: usize,
    pub features: Tensor2D,
    /// Index of each kept sentence in the source video.
    pub sentence_index: Vec<usize>,
    pub tokens: Vec<Vec<u32>>,
    /// ASR masks clipped to the window.
    pub masks: Vec<SentenceMask>,
    /// Ground truth for each kept sentence, when the corpus carries it.
    pub gt: Vec<Option<HiddenGt>>,
}

impl WindowSample {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn n_sentences(&self) -> usize {
        self.masks.len()
    }

    /// Crops `video` to `offset..offset + window_sec`, keeping sentences
    /// whose ASR interval overlaps the crop.
    pub fn crop(video: &NarratedVideo, offset: usize, window_sec: usize) -> Self {
        let t = video.duration();
        let features = Tensor2D::from_fn(window_sec, video.features.cols(), |i, j| {
            video.features.get(offset + i, j)
        });
        let mut out = WindowSample {
            video_id: video.id.clone(),
            offset,
            features,
            sentence_index: Vec::new(),
            tokens: Vec::new(),
            masks: Vec::new(),
            gt: Vec::new(),
        };
        for (k, s) in video.sentences.iter().enumerate() {
            let mask = s.asr_mask(t).window(offset, window_sec);
            if mask.any() {
                out.sentence_index.push(k);
                out.tokens.push(s.tokens.clone());
                out.masks.push(mask);
                out.gt.push(s.gt.clone());
            }
        }
        out
    }

    /// Ground-truth mask in window coordinates for alignable sentences.
    pub fn gt_mask(&self, k: usize) -> Option<SentenceMask> {
        let (s, e) = self.gt[k].as_ref()?.interval()?;
        let t_total = self.offset + self.len();
        let m = SentenceMask::from_interval(s, e, t_total.max(e.ceil() as usize));
        Some(m.window(self.offset, self.len()))
    }
}

/// Window starts that contain at least one sentence.
pub fn window_starts(video: &NarratedVideo, window_sec: usize) -> Result<Vec<usize>, CorpusError> {
    let t = video.duration();
    if window_sec == 0 || window_sec > t {
        return Err(CorpusError::WindowTooLong {
            window: window_sec,
            duration: t,
        });
    }
    if video.sentences.is_empty() {
        return Err(CorpusError::EmptySample(video.id.clone()));
    }
    let masks: Vec<SentenceMask> = video.sentences.iter().map(|s| s.asr_mask(t)).collect();
    let starts: Vec<usize> = (0..=t - window_sec)
        .filter(|&o| masks.iter().any(|m| m.bits()[o..o + window_sec].iter().any(|&b| b)))
        .collect();
    if starts.is_empty() {
        return Err(CorpusError::EmptySample(video.id.clone()));
    }
    Ok(starts)
}

/// Uniformly samples a window start among those containing a sentence.
pub fn window_sample<R: Rng + ?Sized>(
    video: &NarratedVideo,
    window_sec: usize,
    rng: &mut R,
) -> Result<WindowSample, CorpusError> {
    let starts = window_starts(video, window_sec)?;
    let offset = starts[rng.random_range(0..starts.len())];
    Ok(WindowSample::crop(video, offset, window_sec))
}
