//! Dataset container, synthetic temporal-task generator, context-window
//! extraction, and binary persistence for datasets and checkpoints.
//!
//! The synthetic task: each utterance follows a slow latent scalar path (a
//! smoothed random walk). The frame label is the quantile bucket of the
//! latent's local slope, while the observed frame only encodes the latent's
//! current *value* through a noisy sinusoid bank. A single frame is
//! therefore ambiguous about the label, but a window of frames reveals the
//! trajectory - the property that separates temporal models from a flat
//! baseline.

mod files;

pub use files::{
    dataset_file_size, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint,
};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// half-width of the slope window that defines labels
const SLOPE_MARGIN: usize = 5;

/// A variable-length sequence of feature frames with one class label per
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// num_frames x feat_dim
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.num_frames() {
            return Err(Error::Input(format!(
                "utterance {}: {} labels for {} frames",
                self.id,
                self.labels.len(),
                self.num_frames()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label(format!(
                "utterance {}: label {bad} out of range for {num_classes} classes",
                self.id
            )));
        }
        Ok(())
    }
}

/// Flattened context windows ready for training: one row per frame of the
/// source utterances, with the center-frame label as target.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    /// N x context_frames*feat_dim
    pub windows: Tensor<f32>,
    pub targets: Vec<usize>,
    /// (utterance id, center frame) per window
    pub provenance: Vec<(String, usize)>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Copies the selected rows into a dense minibatch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let width = self.windows.cols();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.windows.row(i));
            targets.push(self.targets[i]);
        }
        (
            Tensor::new(indices.len(), width, data).expect("gather shape"),
            targets,
        )
    }
}

/// Generator settings for the synthetic temporal task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub utterance_length: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub noise_sigma: f64,
    /// moving-average window over the latent random walk
    pub latent_smoothing: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feat_dim: 16,
            utterance_length: 200,
            train_utterances: 200,
            dev_utterances: 40,
            test_utterances: 40,
            noise_sigma: 0.5,
            latent_smoothing: 11,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".to_string()));
        }
        if self.latent_smoothing == 0 {
            return Err(Error::Config("latent_smoothing must be positive".to_string()));
        }
        if self.utterance_length < self.latent_smoothing {
            return Err(Error::Config(format!(
                "utterance_length {} shorter than smoothing window {}",
                self.utterance_length, self.latent_smoothing
            )));
        }
        if self.train_utterances == 0 || self.dev_utterances == 0 || self.test_utterances == 0 {
            return Err(Error::Config(
                "every split needs at least one utterance".to_string(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// The three splits of one generated task.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Generator-side ground truth kept for oracle tests: the latent slope per
/// frame and the trained bucket edges.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub train_slopes: Vec<Vec<f64>>,
    pub dev_slopes: Vec<Vec<f64>>,
    pub test_slopes: Vec<Vec<f64>>,
    pub bucket_edges: Vec<f64>,
}

struct RawUtterance {
    /// smoothed latent, one value per frame
    latent: Vec<f64>,
    /// one-frame increment of the latent, per frame
    increments: Vec<f64>,
    /// local slope of the latent over +-SLOPE_MARGIN frames
    slopes: Vec<f64>,
}

fn draw_latent(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> RawUtterance {
    let unit = Normal::new(0.0f64, 1.0).expect("static distribution");
    let frames = spec.utterance_length;
    let smooth = spec.latent_smoothing;
    // enough raw walk for the smoothing window plus the slope margins
    let padded = frames + 2 * SLOPE_MARGIN;
    let raw_len = padded + smooth - 1;
    let mut walk = Vec::with_capacity(raw_len);
    let mut acc = 0.0f64;
    for _ in 0..raw_len {
        acc += unit.sample(rng);
        walk.push(acc);
    }
    let mut smoothed = Vec::with_capacity(padded);
    let inv = 1.0 / smooth as f64;
    for i in 0..padded {
        let s: f64 = walk[i..i + smooth].iter().sum();
        smoothed.push(s * inv);
    }
    let mut latent = Vec::with_capacity(frames);
    let mut increments = Vec::with_capacity(frames);
    let mut slopes = Vec::with_capacity(frames);
    for t in 0..frames {
        let center = t + SLOPE_MARGIN;
        latent.push(smoothed[center]);
        increments.push(smoothed[center] - smoothed[center - 1]);
        slopes.push(
            (smoothed[center + SLOPE_MARGIN] - smoothed[center - SLOPE_MARGIN])
                / (2 * SLOPE_MARGIN) as f64,
        );
    }
    RawUtterance {
        latent,
        increments,
        slopes,
    }
}

/// Quantile edges over the pooled training slopes; label = bucket index.
fn bucket_edges(train_slopes: &[Vec<f64>], num_classes: usize) -> Vec<f64> {
    let mut pooled: Vec<f64> = train_slopes.iter().flatten().copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..num_classes)
        .map(|k| pooled[k * pooled.len() / num_classes])
        .collect()
}

pub fn bucket_of(slope: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= slope)
}

fn observe(
    spec: &SyntheticSpec,
    raw: &RawUtterance,
    edges: &[f64],
    id: String,
    rng: &mut ChaCha20Rng,
) -> Utterance {
    let unit = Normal::new(0.0f64, 1.0).expect("static distribution");
    let frames = spec.utterance_length;
    let feat = spec.feat_dim;
    let mut data = Vec::with_capacity(frames * feat);
    for t in 0..frames {
        let z = raw.latent[t];
        let dz = raw.increments[t];
        for d in 0..feat {
            // most channels follow the latent's position at frequencies
            // where the frame-to-frame phase drift encodes the slope; every
            // fourth channel phase-encodes the one-frame motion directly.
            // a single frame therefore carries only a weak, noisy cue about
            // the local slope, while the window's worth of frames pins it
            // down
            let phase = 2.399963229728653 * d as f64;
            let clean = if d % 4 == 1 {
                let omega = 3.0 + 1.8 * (d / 4) as f64;
                (omega * dz + phase).sin()
            } else {
                let omega = 0.6 + 0.3 * (d - d / 4) as f64;
                (omega * z + phase).sin()
            };
            let noisy = clean + spec.noise_sigma * unit.sample(rng);
            data.push(noisy as f32);
        }
    }
    let labels = raw.slopes.iter().map(|&s| bucket_of(s, edges)).collect();
    Utterance {
        id,
        frames: Tensor::new(frames, feat, data).expect("generator shape"),
        labels,
    }
}

/// Generates the three splits plus the generator's hidden ground truth.
/// Deterministic given the spec seed.
pub fn generate_synthetic_with_truth(
    spec: &SyntheticSpec,
) -> Result<(SyntheticData, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let counts = [
        ("train", spec.train_utterances),
        ("dev", spec.dev_utterances),
        ("test", spec.test_utterances),
    ];
    let mut raw_splits: Vec<Vec<RawUtterance>> = Vec::with_capacity(3);
    for (_, count) in counts {
        raw_splits.push((0..count).map(|_| draw_latent(spec, &mut rng)).collect());
    }
    let train_slopes: Vec<Vec<f64>> = raw_splits[0].iter().map(|r| r.slopes.clone()).collect();
    let edges = bucket_edges(&train_slopes, spec.num_classes);

    let mut splits: Vec<Vec<Utterance>> = Vec::with_capacity(3);
    for ((name, _), raws) in counts.iter().zip(raw_splits.iter()) {
        let utts = raws
            .iter()
            .enumerate()
            .map(|(i, raw)| {
                observe(spec, raw, &edges, format!("{name}-{i:04}"), &mut rng)
            })
            .collect();
        splits.push(utts);
    }
    let mut iter = splits.into_iter();
    let data = SyntheticData {
        train: iter.next().unwrap(),
        dev: iter.next().unwrap(),
        test: iter.next().unwrap(),
    };
    let truth = SyntheticTruth {
        dev_slopes: raw_splits[1].iter().map(|r| r.slopes.clone()).collect(),
        test_slopes: raw_splits[2].iter().map(|r| r.slopes.clone()).collect(),
        train_slopes,
        bucket_edges: edges,
    };
    Ok((data, truth))
}

/// Generates train/dev/test utterance sets for the synthetic task.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    Ok(generate_synthetic_with_truth(spec)?.0)
}

/// One centered window per frame; utterance edges are padded by repeating
/// the first or last frame. The target is the center-frame label.
pub fn extract_windows(utts: &[Utterance], context_frames: usize) -> Result<WindowDataset> {
    if context_frames == 0 || context_frames % 2 == 0 {
        return Err(Error::Config(format!(
            "context_frames must be odd, got {context_frames}"
        )));
    }
    if utts.is_empty() {
        return Err(Error::Input("no utterances to window".to_string()));
    }
    let feat = utts[0].feat_dim();
    let half = (context_frames - 1) / 2;
    let total: usize = utts.iter().map(|u| u.num_frames()).sum();
    let width = context_frames * feat;

    let mut data = Vec::with_capacity(total * width);
    let mut targets = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    for utt in utts {
        if utt.feat_dim() != feat {
            return Err(Error::Input(format!(
                "utterance {} feat_dim {} differs from {}",
                utt.id,
                utt.feat_dim(),
                feat
            )));
        }
        let n = utt.num_frames() as isize;
        for t in 0..utt.num_frames() {
            for offset in -(half as isize)..=(half as isize) {
                let src = (t as isize + offset).clamp(0, n - 1) as usize;
                data.extend_from_slice(utt.frames.row(src));
            }
            targets.push(utt.labels[t]);
            provenance.push((utt.id.clone(), t));
        }
    }
    Ok(WindowDataset {
        windows: Tensor::new(total, width, data).expect("window shape"),
        targets,
        provenance,
    })
}

/// Text summary used by the CLI: counts, dimensions, label histogram.
pub fn dataset_summary(name: &str, utts: &[Utterance]) -> String {
    let total_frames: usize = utts.iter().map(|u| u.num_frames()).sum();
    let feat = utts.first().map(|u| u.feat_dim()).unwrap_or(0);
    let num_classes = utts
        .iter()
        .flat_map(|u| u.labels.iter())
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0);
    let mut histogram = vec![0usize; num_classes];
    for utt in utts {
        for &l in &utt.labels {
            histogram[l] += 1;
        }
    }
    let mut out = format!(
        "{name}: {} utterances, {total_frames} frames, feat_dim {feat}, {num_classes} classes\n",
        utts.len()
    );
    for (c, count) in histogram.iter().enumerate() {
        out.push_str(&format!("  class {c}: {count}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            feat_dim: 4,
            utterance_length: 60,
            train_utterances: 12,
            dev_utterances: 4,
            test_utterances: 4,
            noise_sigma: 0.3,
            latent_smoothing: 7,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        let mut other = spec.clone();
        other.seed = 6;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn degenerate_spec_is_config_error() {
        let mut spec = tiny_spec();
        spec.utterance_length = 5;
        spec.latent_smoothing = 7;
        assert!(matches!(
            generate_synthetic(&spec).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn train_label_histogram_is_near_uniform() {
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec).unwrap();
        for (name, split) in [("train", &data.train), ("dev", &data.dev)] {
            let mut histogram = vec![0usize; spec.num_classes];
            let mut total = 0usize;
            for utt in split {
                for &l in &utt.labels {
                    histogram[l] += 1;
                    total += 1;
                }
            }
            let expected = total as f64 / spec.num_classes as f64;
            for (c, &count) in histogram.iter().enumerate() {
                let dev_frac = (count as f64 - expected).abs() / expected;
                assert!(
                    dev_frac <= 0.10,
                    "{name} class {c}: {count} vs expected {expected}"
                );
            }
        }
    }

    #[test]
    fn oracle_on_hidden_slope_reproduces_labels_exactly() {
        let spec = tiny_spec();
        let (data, truth) = generate_synthetic_with_truth(&spec).unwrap();
        for (utt, slopes) in data.dev.iter().zip(truth.dev_slopes.iter()) {
            for (label, &slope) in utt.labels.iter().zip(slopes.iter()) {
                assert_eq!(*label, bucket_of(slope, &truth.bucket_edges));
            }
        }
    }

    #[test]
    fn single_frame_is_ambiguous_but_latent_is_not() {
        // noiseless two-class task: a logistic regression on single center
        // frames stays below perfect while the latent-slope oracle is exact
        let mut spec = tiny_spec();
        spec.noise_sigma = 0.0;
        spec.num_classes = 2;
        spec.train_utterances = 20;
        let (data, truth) = generate_synthetic_with_truth(&spec).unwrap();

        // oracle: 100 percent by construction
        for (utt, slopes) in data.dev.iter().zip(truth.dev_slopes.iter()) {
            for (label, &slope) in utt.labels.iter().zip(slopes.iter()) {
                assert_eq!(*label, bucket_of(slope, &truth.bucket_edges));
            }
        }

        // logistic baseline on single frames
        let feat = spec.feat_dim;
        let mut w = vec![0.0f64; feat + 1];
        let lr = 0.5;
        for _ in 0..200 {
            let mut grad = vec![0.0f64; feat + 1];
            let mut n = 0.0;
            for utt in &data.train {
                for t in 0..utt.num_frames() {
                    let row = utt.frames.row(t);
                    let mut z = w[feat];
                    for (d, &x) in row.iter().enumerate() {
                        z += w[d] * x as f64;
                    }
                    let p = 1.0 / (1.0 + (-z).exp());
                    let err = p - utt.labels[t] as f64;
                    for (d, &x) in row.iter().enumerate() {
                        grad[d] += err * x as f64;
                    }
                    grad[feat] += err;
                    n += 1.0;
                }
            }
            for (wi, g) in w.iter_mut().zip(grad.iter()) {
                *wi -= lr * g / n;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for utt in &data.dev {
            for t in 0..utt.num_frames() {
                let row = utt.frames.row(t);
                let mut z = w[feat];
                for (d, &x) in row.iter().enumerate() {
                    z += w[d] * x as f64;
                }
                let predicted = usize::from(z > 0.0);
                correct += usize::from(predicted == utt.labels[t]);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc < 1.0, "single-frame baseline should not be perfect");
    }

    #[test]
    fn window_extraction_counts_and_padding() {
        let utt = Utterance {
            id: "u".to_string(),
            frames: Tensor::from_fn(5, 2, |r, c| (r * 2 + c) as f32),
            labels: vec![0, 1, 0, 1, 0],
        };
        // context 1: windows are the frames themselves
        let ds = extract_windows(std::slice::from_ref(&utt), 1).unwrap();
        assert_eq!(ds.len(), 5);
        for t in 0..5 {
            assert_eq!(ds.windows.row(t), utt.frames.row(t));
            assert_eq!(ds.targets[t], utt.labels[t]);
        }

        // context 21 over 5 frames: heavy padding by frame repetition
        let ds = extract_windows(std::slice::from_ref(&utt), 21).unwrap();
        assert_eq!(ds.len(), 5);
        let first = ds.windows.row(0);
        for frame in 0..10 {
            assert_eq!(
                &first[frame * 2..frame * 2 + 2],
                utt.frames.row(0),
                "frame {frame} of the first window must repeat frame 0"
            );
        }
        let last = ds.windows.row(4);
        for frame in 11..21 {
            assert_eq!(&last[frame * 2..frame * 2 + 2], utt.frames.row(4));
        }

        assert!(extract_windows(&[utt], 4).is_err());
    }

    #[test]
    fn window_count_equals_total_frames() {
        let spec = tiny_spec();
        let data = generate_synthetic(&spec).unwrap();
        let total: usize = data.train.iter().map(|u| u.num_frames()).sum();
        let ds = extract_windows(&data.train, 9).unwrap();
        assert_eq!(ds.len(), total);
        assert_eq!(ds.windows.rows(), total);
        assert_eq!(ds.provenance.len(), total);
    }
}
