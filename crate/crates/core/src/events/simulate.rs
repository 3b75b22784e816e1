use super::{render_scene, Event, EventStream, SceneSpec};
use crate::error::{Error, Result};

/// Time between consecutive rendered frames.
pub const FRAME_INTERVAL_US: u64 = 10_000;

/// Threshold event model over `steps` rendered frames.
///
/// Between frames `k` and `k+1`, a pixel whose log-intensity changed by `Δ`
/// emits `⌊|Δ|/threshold⌋` events of polarity `sign(Δ)`, with timestamps
/// spaced uniformly inside the interval. Output is stably sorted by time.
pub fn simulate_events(spec: &SceneSpec, steps: u64, threshold: f64) -> Result<EventStream> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 steps, got {steps}"
        )));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let log_frame = |step: u64| -> Result<Vec<f64>> {
        let (img, _) = render_scene(spec, step)?;
        Ok(img.data().iter().map(|v| v.ln()).collect())
    };

    let mut events = Vec::new();
    let mut prev = log_frame(0)?;
    for k in 0..steps - 1 {
        let next = log_frame(k + 1)?;
        let t0 = k * FRAME_INTERVAL_US;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // The ramp is added after differencing so that negating it
                // mirrors the change exactly.
                let delta = (next[i] - prev[i]) + spec.brightness_ramp;
                let n = (delta.abs() / threshold).floor() as u64;
                let p = u8::from(delta > 0.0);
                for j in 0..n {
                    events.push(Event {
                        x: x as u16,
                        y: y as u16,
                        t: t0 + (j + 1) * FRAME_INTERVAL_US / (n + 1),
                        p,
                    });
                }
            }
        }
        prev = next;
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(w as u32, h as u32, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{SceneObject, Shape};

    fn disc_scene(vx: f64) -> SceneSpec {
        let mut spec = SceneSpec::empty(24, 16, 3, 5);
        spec.texture = 0.0;
        spec.objects.push(SceneObject {
            class: 2,
            shape: Shape::Disc {
                cx: 8.0,
                cy: 8.0,
                r: 4.0,
            },
            vx,
            vy: 0.0,
        });
        spec
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = disc_scene(1.0);
        assert!(matches!(
            simulate_events(&spec, 1, 0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(simulate_events(&spec, 3, 0.0).is_err());
    }

    #[test]
    fn static_scene_is_silent() {
        let mut spec = disc_scene(0.0);
        spec.texture = 0.1;
        assert!(simulate_events(&spec, 5, 0.05).unwrap().is_empty());
    }

    #[test]
    fn bright_disc_moving_right() {
        let spec = disc_scene(1.0);
        assert!(crate::events::class_shade(2) > crate::events::class_shade(0));
        let s = simulate_events(&spec, 2, 0.1).unwrap();
        assert!(!s.is_empty());
        for e in s.events() {
            // Leading edge is right of the centre, trailing edge left of it.
            let right = f64::from(e.x) + 0.5 > 8.5;
            assert_eq!(e.p == 1, right, "event {e:?}");
        }
        let (pos, neg) = s.polarity_counts();
        assert!(pos > 0 && neg > 0);
    }

    #[test]
    fn timestamps_sorted_and_inside_intervals() {
        let s = simulate_events(&disc_scene(1.5), 4, 0.05).unwrap();
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert!(ts.iter().all(|&t| t > 0 && t < 3 * FRAME_INTERVAL_US));
        assert!(ts.iter().all(|&t| t % FRAME_INTERVAL_US != 0));
    }

    #[test]
    fn doubling_threshold_never_adds_events() {
        let mut spec = disc_scene(1.3);
        spec.texture = 0.08;
        spec.objects.push(SceneObject {
            class: 2,
            shape: Shape::Rect {
                x: 14.0,
                y: 2.0,
                w: 6.0,
                h: 9.0,
            },
            vx: -0.8,
            vy: 0.6,
        });
        for th in [0.02, 0.05, 0.1, 0.3] {
            let a = simulate_events(&spec, 5, th).unwrap().len();
            let b = simulate_events(&spec, 5, 2.0 * th).unwrap().len();
            assert!(b <= a, "threshold {th}: {a} -> {b}");
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = disc_scene(0.9);
        assert_eq!(
            simulate_events(&spec, 6, 0.05).unwrap(),
            simulate_events(&spec, 6, 0.05).unwrap()
        );
    }

    #[test]
    fn negated_ramp_swaps_polarities() {
        let mut up = disc_scene(0.0);
        up.texture = 0.1;
        up.brightness_ramp = 0.23;
        let mut down = up.clone();
        down.brightness_ramp = -0.23;
        let a = simulate_events(&up, 4, 0.05).unwrap();
        let b = simulate_events(&down, 4, 0.05).unwrap();
        let (ap, an) = a.polarity_counts();
        let (bp, bn) = b.polarity_counts();
        assert_eq!((ap, an), (bn, bp));
        assert!(ap > 0 && an == 0);
    }
}
