//! Event-camera data: the event tuple and stream types, a synthetic scene
//! renderer with a log-intensity threshold event simulator, fixed-count
//! voxelization, and the binary/CSV event file formats.

mod io;
mod scene;
mod simulate;
mod voxel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_events, read_events_csv, write_events, write_events_csv, EVENT_MAGIC};
pub use scene::{class_shade, render_scene, SceneObject, SceneSpec, Shape, MAX_CLASSES};
pub use simulate::{simulate_events, FRAME_INTERVAL_US};
pub use voxel::{voxel_windows, voxelize, VoxelTensor};

/// One brightness-change event. `p` is 1 for an increase, 0 for a decrease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: u8,
}

impl Event {
    pub fn polarity_sign(&self) -> f64 {
        if self.p == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Time-ordered events of a `width × height` sensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStream {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        let mut last_t = 0u64;
        for (i, e) in events.iter().enumerate() {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::EventBounds {
                    index: i as u64,
                    x: u32::from(e.x),
                    y: u32::from(e.y),
                    width,
                    height,
                });
            }
            if e.p > 1 {
                return Err(Error::InvalidArgument(format!(
                    "event {i} has polarity {}",
                    e.p
                )));
            }
            if e.t < last_t {
                return Err(Error::InvalidArgument(format!(
                    "event {i} timestamp {} precedes {last_t}",
                    e.t
                )));
            }
            last_t = e.t;
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// (positive, negative) event counts.
    pub fn polarity_counts(&self) -> (usize, usize) {
        let pos = self.events.iter().filter(|e| e.p == 1).count();
        (pos, self.events.len() - pos)
    }
}
