//! Time convolution: overlapping stride-1 sub-windows of the context
//! window, one per recurrent timestep.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of the input windowing. `context_frames` is the full window
/// around the center frame (odd), `tc_width` is the number of frames per
/// column; the stride is fixed at 1, so a window yields
/// `context_frames - tc_width + 1` timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeConvSpec {
    pub context_frames: usize,
    pub tc_width: usize,
    /// share one column DNN across timesteps (a true time convolution);
    /// false gives every timestep its own column weights
    pub tied_columns: bool,
}

impl Default for TimeConvSpec {
    fn default() -> Self {
        Self {
            context_frames: 21,
            tc_width: 5,
            tied_columns: true,
        }
    }
}

impl TimeConvSpec {
    pub fn new(context_frames: usize, tc_width: usize, tied_columns: bool) -> Result<Self> {
        let spec = Self {
            context_frames,
            tc_width,
            tied_columns,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_frames == 0 || self.context_frames % 2 == 0 {
            return Err(Error::Config(format!(
                "context_frames must be odd and positive, got {}",
                self.context_frames
            )));
        }
        if self.tc_width == 0 {
            return Err(Error::Config("tc_width must be at least 1".to_string()));
        }
        if self.tc_width > self.context_frames {
            return Err(Error::Config(format!(
                "tc_width {} exceeds context_frames {}",
                self.tc_width, self.context_frames
            )));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.context_frames - self.tc_width + 1
    }
}

/// Slices one window of frames (context_frames x feat_dim) into overlapping
/// stride-1 columns. Output t is frames[t .. t+tc_width) flattened
/// row-major, earliest frame first, as a 1 x (tc_width*feat_dim) tensor.
pub fn tc_window<F: Scalar>(spec: &TimeConvSpec, frames: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    spec.validate()?;
    if frames.rows() != spec.context_frames {
        return Err(Error::Shape(format!(
            "tc_window expected {} frames, got {}",
            spec.context_frames,
            frames.rows()
        )));
    }
    let feat = frames.cols();
    let width = spec.tc_width * feat;
    let mut out = Vec::with_capacity(spec.timesteps());
    for t in 0..spec.timesteps() {
        let start = t * feat;
        let slice = &frames.data()[start..start + width];
        out.push(Tensor::new(1, width, slice.to_vec())?);
    }
    Ok(out)
}

/// Batched windowing over flattened windows (batch x context_frames*feat):
/// because windows are stored frame-major, each timestep is a contiguous
/// column slice.
pub fn tc_window_batch<F: Scalar>(
    spec: &TimeConvSpec,
    batch: &Tensor<F>,
    feat_dim: usize,
) -> Result<Vec<Tensor<F>>> {
    spec.validate()?;
    if batch.cols() != spec.context_frames * feat_dim {
        return Err(Error::Shape(format!(
            "tc_window_batch expected width {}, got {}",
            spec.context_frames * feat_dim,
            batch.cols()
        )));
    }
    let width = spec.tc_width * feat_dim;
    (0..spec.timesteps())
        .map(|t| batch.slice_cols(t * feat_dim, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: usize, feat: usize) -> Tensor<f32> {
        Tensor::from_fn(rows, feat, |r, c| (r * feat + c) as f32)
    }

    #[test]
    fn width_one_returns_original_frames() {
        let spec = TimeConvSpec::new(5, 1, true).unwrap();
        let f = frames(5, 3);
        let windows = tc_window(&spec, &f).unwrap();
        assert_eq!(windows.len(), 5);
        for (t, w) in windows.iter().enumerate() {
            assert_eq!(w.data(), f.row(t));
        }
        // concatenating width-1 windows reconstructs the input
        let flat: Vec<f32> = windows.iter().flat_map(|w| w.data().to_vec()).collect();
        assert_eq!(flat, f.data());
    }

    #[test]
    fn full_window_is_single_timestep() {
        let spec = TimeConvSpec::new(5, 5, true).unwrap();
        let f = frames(5, 5);
        let windows = tc_window(&spec, &f).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].cols(), 25);
        assert_eq!(windows[0].data(), f.data());
    }

    #[test]
    fn window_indices_enumerate_slices() {
        // oracle: enumerate expected frame indices per window
        let spec = TimeConvSpec::new(21, 5, true).unwrap();
        let feat = 2;
        let f = frames(21, feat);
        let windows = tc_window(&spec, &f).unwrap();
        assert_eq!(windows.len(), 17);
        for (t, w) in windows.iter().enumerate() {
            let mut expected = Vec::new();
            for frame in t..t + 5 {
                expected.extend_from_slice(f.row(frame));
            }
            assert_eq!(w.data(), &expected[..], "window {t}");
        }
        assert_eq!(windows[0].data()[0], f.get(0, 0));
        assert_eq!(windows[16].data()[0], f.get(16, 0));
    }

    #[test]
    fn batch_windowing_matches_per_row_windowing() {
        let spec = TimeConvSpec::new(7, 3, true).unwrap();
        let feat = 2;
        let w0 = frames(7, feat);
        let w1 = frames(7, feat).map(|v| v * 0.5 - 3.0);
        let mut batch_data = w0.data().to_vec();
        batch_data.extend_from_slice(w1.data());
        let batch = Tensor::new(2, 14, batch_data).unwrap();

        let batched = tc_window_batch(&spec, &batch, feat).unwrap();
        let rows0 = tc_window(&spec, &w0).unwrap();
        let rows1 = tc_window(&spec, &w1).unwrap();
        assert_eq!(batched.len(), 5);
        for t in 0..5 {
            assert_eq!(batched[t].row(0), rows0[t].data());
            assert_eq!(batched[t].row(1), rows1[t].data());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TimeConvSpec::new(4, 2, true).is_err()); // even context
        assert!(TimeConvSpec::new(5, 6, true).is_err()); // width > context
        assert!(TimeConvSpec::new(5, 0, true).is_err());
        let spec = TimeConvSpec::new(5, 3, true).unwrap();
        assert_eq!(spec.timesteps(), 3);
        assert!(tc_window(&spec, &frames(4, 2)).is_err());
    }
}
