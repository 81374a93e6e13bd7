use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `frames × dim` feature matrix stored as 32-bit floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if frames * dim != data.len() {
            return Err(Error::invalid(format!(
                "{frames}x{dim} frames need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame data"));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// `frames × dim` tensor in 64-bit precision.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.frames, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Stacks each frame with its `stack_prev` predecessors (oldest first,
/// left-padded by repeating frame 0), then keeps every `stride`-th frame.
pub fn stack_downsample(frames: &FrameSequence, stack_prev: usize, stride: usize) -> Result<FrameSequence> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if frames.frames == 0 {
        return Err(Error::invalid("cannot stack an empty frame sequence"));
    }
    let out_dim = frames.dim * (stack_prev + 1);
    let out_frames = frames.frames.div_ceil(stride);
    let mut data = Vec::with_capacity(out_frames * out_dim);
    for t in (0..frames.frames).step_by(stride) {
        for k in (0..=stack_prev).rev() {
            data.extend_from_slice(frames.frame(t.saturating_sub(k)));
        }
    }
    FrameSequence::new(out_frames, out_dim, data)
}
