use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered frames of equal shape `[C×H×W]` with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("frame sequence is empty".into()))?;
        if first.ndim() != 3 {
            return Err(Error::Shape {
                shape: first.shape().to_vec(),
                reason: "frames must be C×H×W".into(),
            });
        }
        if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::Contract(format!(
                "inconsistent frame shapes {:?} and {:?}",
                first.shape(),
                bad.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    /// `[C, H, W]` of every frame.
    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    /// Index of the center frame.
    pub fn reference_index(&self) -> usize {
        self.frames.len() / 2
    }

    /// Indices of the `k`-frame window centered on `center`, replicating the
    /// first/last frame where the window runs past either end.
    pub fn window_indices(&self, center: usize, k: usize) -> Vec<usize> {
        let half = (k / 2) as isize;
        let last = self.frames.len() as isize - 1;
        (-half..=half)
            .map(|off| (center as isize + off).clamp(0, last) as usize)
            .collect()
    }

    /// Stacks the window around `center` into `[K×C×H×W]`.
    pub fn window(&self, center: usize, k: usize) -> Result<Tensor> {
        if center >= self.frames.len() {
            return Err(Error::Contract(format!(
                "center {center} outside sequence of {} frames",
                self.frames.len()
            )));
        }
        let picked: Vec<Tensor> = self
            .window_indices(center, k)
            .into_iter()
            .map(|i| self.frames[i].clone())
            .collect();
        Tensor::stack(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(matches!(FrameSequence::new(vec![]), Err(Error::Contract(_))));
        let a = Tensor::zeros(&[3, 4, 4]).unwrap();
        let b = Tensor::zeros(&[3, 4, 5]).unwrap();
        assert!(FrameSequence::new(vec![a, b]).is_err());
    }

    #[test]
    fn window_replicates_edges() {
        let frames = (0..4).map(|i| Tensor::full(&[1, 1, 1], i as f64).unwrap()).collect();
        let s = FrameSequence::new(frames).unwrap();
        assert_eq!(s.window_indices(0, 5), vec![0, 0, 0, 1, 2]);
        assert_eq!(s.window_indices(3, 3), vec![2, 3, 3]);
        assert_eq!(s.window(1, 3).unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(s.reference_index(), 2);
    }
}
