use std::ops::Range;

use super::EventStream;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Signed event-count frames, one channel per fixed-size temporal window.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelTensor {
    tensor: Tensor<f64>,
}

impl VoxelTensor {
    pub fn from_tensor(tensor: Tensor<f64>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "voxel tensor must be G×H×W, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.tensor
    }

    pub fn channel(&self, g: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.tensor.data()[g * n..(g + 1) * n]
    }

    /// Σ|v| over one channel.
    pub fn channel_abs_sum(&self, g: usize) -> f64 {
        self.channel(g).iter().map(|v| v.abs()).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.tensor.data().iter().map(|v| v.abs()).sum()
    }
}

/// Event index ranges of the `num_grids` windows: the newest
/// `events_per_grid × num_grids` events split in time order.
pub fn voxel_windows(
    num_events: usize,
    events_per_grid: usize,
    num_grids: usize,
) -> Result<Vec<Range<usize>>> {
    if events_per_grid == 0 || num_grids == 0 {
        return Err(Error::InvalidArgument(
            "events_per_grid and num_grids must be at least 1".into(),
        ));
    }
    let required = events_per_grid
        .checked_mul(num_grids)
        .ok_or_else(|| Error::InvalidArgument("window size overflows".into()))?;
    if num_events < required {
        return Err(Error::InsufficientEvents {
            required,
            available: num_events,
        });
    }
    let start = num_events - required;
    Ok((0..num_grids)
        .map(|g| start + g * events_per_grid..start + (g + 1) * events_per_grid)
        .collect())
}

/// Accumulates each window into its own channel: `+1` per positive event and
/// `−1` per negative event at the event's pixel. Older surplus events are
/// dropped.
pub fn voxelize(
    stream: &EventStream,
    events_per_grid: usize,
    num_grids: usize,
) -> Result<VoxelTensor> {
    let windows = voxel_windows(stream.len(), events_per_grid, num_grids)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut data = vec![0.0f64; num_grids * h * w];
    for (g, range) in windows.into_iter().enumerate() {
        let plane = &mut data[g * h * w..(g + 1) * h * w];
        for e in &stream.events()[range] {
            plane[e.y as usize * w + e.x as usize] += e.polarity_sign();
        }
    }
    VoxelTensor::from_tensor(Tensor::from_vec(&[num_grids, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;

    #[test]
    fn unit_event() {
        let s = EventStream::new(
            5,
            4,
            vec![Event {
                x: 3,
                y: 2,
                t: 10,
                p: 1,
            }],
        )
        .unwrap();
        let v = voxelize(&s, 1, 1).unwrap();
        assert_eq!(v.channels(), 1);
        for y in 0..4 {
            for x in 0..5 {
                let expect = if (y, x) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(v.channel(0)[y * 5 + x], expect);
            }
        }
    }

    #[test]
    fn insufficient_events_reports_counts() {
        let s = EventStream::new(2, 2, vec![]).unwrap();
        match voxelize(&s, 3, 2) {
            Err(Error::InsufficientEvents {
                required,
                available,
            }) => assert_eq!((required, available), (6, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn newest_events_are_kept() {
        let ev = |p, t| Event { x: 0, y: 0, t, p };
        let s = EventStream::new(1, 1, vec![ev(1, 0), ev(0, 1), ev(0, 2)]).unwrap();
        let v = voxelize(&s, 1, 2).unwrap();
        assert_eq!(v.channel(0), &[-1.0]);
        assert_eq!(v.channel(1), &[-1.0]);
    }

    #[test]
    fn dsec_preset_windows() {
        let w = voxel_windows(4_000_000, 100_000, 40).unwrap();
        assert_eq!(w.len(), 40);
        assert_eq!(w[0], 0..100_000);
        assert_eq!(w[39].end, 4_000_000);
    }
}
