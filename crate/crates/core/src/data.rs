//! Procedural segmentation task: textured regions over a noisy background.
//!
//! Each foreground class has its own stripe or checker texture and a jittered
//! hue; two classes share a hue, so only their texture tells them apart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::resize_forward;
use crate::numerics::Tensor;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { height: 64, width: 128, classes: 4, train_samples: 256, val_samples: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainA,
    TrainB,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub config: TaskConfig,
    samples: Vec<Sample>,
}

// Distinct stream per sample keeps every sample a pure function of (seed, index).
const SAMPLE_STREAM: u64 = 0x5eed;

impl TaskDataset {
    pub fn generate(config: TaskConfig) -> Result<Self> {
        if config.classes < 2 || config.height == 0 || config.width == 0 {
            return Err(Error::InvalidConfig("task needs at least 2 classes and a non-empty image".into()));
        }
        if config.train_samples < 2 || config.val_samples == 0 {
            return Err(Error::InvalidConfig("task needs 2+ training and 1+ validation samples".into()));
        }
        let n = config.train_samples + config.val_samples;
        let samples = (0..n).map(|i| render(&config, i as u64)).collect();
        Ok(Self { config, samples })
    }

    /// Sample indices of a split; trainA and trainB halve the training set.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        let t = self.config.train_samples;
        match split {
            Split::TrainA => (0..t / 2).collect(),
            Split::TrainB => (t / 2..t).collect(),
            Split::Val => (t..t + self.config.val_samples).collect(),
        }
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Stacks samples into an NCHW image tensor and flat labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let (h, w) = (self.config.height, self.config.width);
        let mut img = Vec::with_capacity(idx.len() * 3 * h * w);
        let mut lab = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            img.extend_from_slice(&self.samples[i].image);
            lab.extend_from_slice(&self.samples[i].labels);
        }
        (Tensor::new(vec![idx.len(), 3, h, w], img).expect("consistent sizes"), lab)
    }
}

fn render(cfg: &TaskConfig, index: u64) -> Sample {
    let mut rng = seeded(cfg.seed, SAMPLE_STREAM + index);
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0usize; h * w];
    let mut image = vec![0.0; 3 * h * w];
    let grey = rng.gen_range(-0.3..0.3);
    let bg: [f64; 3] = [0, 1, 2].map(|_| grey + rng.gen_range(-0.05..0.05));
    let tilt: [f64; 2] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    for y in 0..h {
        for x in 0..w {
            let g = tilt[0] * (y as f64 / h as f64 - 0.5) + tilt[1] * (x as f64 / w as f64 - 0.5);
            for c in 0..3 {
                image[(c * h + y) * w + x] = bg[c] + g;
            }
        }
    }
    let objects = rng.gen_range(1..=3);
    let min_side = (h.min(w) / 2).max(2);
    for _ in 0..objects {
        let class = rng.gen_range(1..cfg.classes);
        let oh = rng.gen_range(min_side..=(h * 3 / 4).max(min_side));
        let ow = rng.gen_range(min_side..=(w / 2).max(min_side));
        let y0 = rng.gen_range(0..=h - oh.min(h));
        let x0 = rng.gen_range(0..=w - ow.min(w));
        let disc = rng.gen_bool(0.5);
        let hue = class_hue(class);
        let color: [f64; 3] = [0, 1, 2].map(|c| hue[c] + rng.gen_range(-0.15..0.15));
        let contrast = rng.gen_range(0.3..0.5);
        let period = rng.gen_range(4..=6);
        let phase = rng.gen_range(0..period);
        for y in y0..(y0 + oh).min(h) {
            for x in x0..(x0 + ow).min(w) {
                if disc {
                    let dy = (y as f64 + 0.5 - y0 as f64 - oh as f64 / 2.0) / (oh as f64 / 2.0);
                    let dx = (x as f64 + 0.5 - x0 as f64 - ow as f64 / 2.0) / (ow as f64 / 2.0);
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let p = texture(class, y + phase, x + phase, period);
                labels[y * w + x] = class;
                for c in 0..3 {
                    image[(c * h + y) * w + x] = color[c] + contrast * p;
                }
            }
        }
    }
    for v in &mut image {
        *v += rng.gen_range(-0.1..0.1);
    }
    Sample { image, labels }
}

/// Mean colour of a foreground class. Classes 1 and 2 share a hue so only their texture separates them.
fn class_hue(class: usize) -> [f64; 3] {
    match (class - 1) % 4 {
        0 | 1 => [0.6, -0.4, -0.4],
        2 => [-0.4, -0.4, 0.6],
        _ => [-0.4, 0.6, -0.4],
    }
}

/// ±1 pattern of a foreground class.
fn texture(class: usize, y: usize, x: usize, period: usize) -> f64 {
    let on = match (class - 1) % 4 {
        0 => (y / period).is_multiple_of(2),
        1 => (x / period).is_multiple_of(2),
        2 => ((y / period) + (x / period)).is_multiple_of(2),
        _ => ((x + y) / period).is_multiple_of(2),
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

/// Confusion counts accumulated over many predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * self.k + p] += 1;
        }
    }

    /// Mean IoU over classes that occur in the truth or the predictions.
    pub fn miou(&self) -> f64 {
        let k = self.k;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
            let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

/// Per-pixel argmax after bilinear upsampling of `[N, K, h, w]` logits to `H × W`.
pub fn predict(logits: &Tensor, height: usize, width: usize) -> Vec<usize> {
    let (n, k, h, w) = logits.dims4();
    let up = resize_forward(logits.data(), n * k, h, w, height, width);
    let plane = height * width;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if up[(b * k + c) * plane + p] > up[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_pure_and_splits_disjoint() {
        let cfg = TaskConfig { height: 16, width: 32, train_samples: 10, val_samples: 4, ..TaskConfig::default() };
        let a = TaskDataset::generate(cfg).unwrap();
        let b = TaskDataset::generate(cfg).unwrap();
        assert_eq!(a, b);
        let ta = a.indices(Split::TrainA);
        let tb = a.indices(Split::TrainB);
        assert!(ta.iter().all(|i| !tb.contains(i)));
        assert_eq!(ta.len() + tb.len(), 10);
        assert!(a.sample(0).labels.iter().any(|&l| l > 0));
    }

    #[test]
    fn miou_of_perfect_and_swapped_predictions() {
        let truth = [0, 0, 1, 1];
        let mut c = Confusion::new(2);
        c.add(&truth, &truth);
        assert_eq!(c.miou(), 1.0);
        let mut c = Confusion::new(2);
        c.add(&[0, 1, 1, 1], &truth);
        // class 0: 1/2, class 1: 2/3
        assert!((c.miou() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
