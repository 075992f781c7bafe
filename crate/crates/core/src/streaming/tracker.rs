use crate::geometry::{Panorama, PixelBox};

use super::TrackerConfig;

/// A head detection. `truth_id` is carried for evaluation and never used
/// for association.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: PixelBox,
    pub truth_id: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub bbox: PixelBox,
    pub created_tick: u64,
    pub last_seen_tick: u64,
    /// Whether the box moved beyond the motion threshold at the last match.
    pub moving: bool,
    pub truth_id: Option<u64>,
}

/// Greedy IoU tracker whose detector only discovers new heads in one
/// horizontal stripe of the panorama per tick.
#[derive(Clone, Debug)]
pub struct TrackletManager {
    config: TrackerConfig,
    panorama: Panorama,
    retire_ticks: u64,
    next_id: u64,
    tick: u64,
    tracklets: Vec<Tracklet>,
}

impl TrackletManager {
    pub fn new(config: TrackerConfig, panorama: Panorama, tick_rate: f64) -> Self {
        Self {
            config,
            panorama,
            retire_ticks: (config.retire_after_s * tick_rate).round() as u64,
            next_id: 0,
            tick: 0,
            tracklets: Vec::new(),
        }
    }

    /// Stripe searched for new heads at the next step.
    pub fn stripe(&self) -> usize {
        (self.tick % self.config.stripes as u64) as usize
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    fn in_stripe(&self, b: &PixelBox, stripe: usize) -> bool {
        let w = self.panorama.width as f64;
        let cx = b.center().0.rem_euclid(w);
        let s = self.config.stripes as f64;
        ((cx / w * s).floor() as usize).min(self.config.stripes - 1) == stripe
    }

    /// Advance one tick. Returns the active tracklets, ordered by id.
    pub fn step(&mut self, detections: &[Detection]) -> &[Tracklet] {
        let tick = self.tick;
        let stripe = self.stripe();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in self.tracklets.iter().enumerate() {
            for (di, d) in detections.iter().enumerate() {
                let iou = self.panorama.iou(&t.bbox, &d.bbox);
                if iou >= self.config.iou_threshold {
                    pairs.push((iou, ti, di));
                }
            }
        }
        // best overlap first; tracklets are stored by ascending id
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut t_used = vec![false; self.tracklets.len()];
        let mut d_used = vec![false; detections.len()];
        for (_, ti, di) in pairs {
            if t_used[ti] || d_used[di] {
                continue;
            }
            t_used[ti] = true;
            d_used[di] = true;
            let t = &mut self.tracklets[ti];
            let d = &detections[di];
            let (a, b) = (t.bbox.center(), d.bbox.center());
            let shift = self.panorama.dx(a.0, b.0).hypot(b.1 - a.1);
            t.moving = shift > self.config.motion_threshold_px;
            if t.moving {
                t.bbox = d.bbox;
            }
            t.last_seen_tick = tick;
            t.truth_id = d.truth_id;
        }
        for (di, d) in detections.iter().enumerate() {
            if !d_used[di] && self.in_stripe(&d.bbox, stripe) {
                self.tracklets.push(Tracklet {
                    id: self.next_id,
                    bbox: d.bbox,
                    created_tick: tick,
                    last_seen_tick: tick,
                    moving: false,
                    truth_id: d.truth_id,
                });
                self.next_id += 1;
            }
        }
        let retire = self.retire_ticks;
        self.tracklets.retain(|t| tick - t.last_seen_tick <= retire);
        self.tick += 1;
        &self.tracklets
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, id: u64) -> Detection {
        Detection { bbox: PixelBox::from_center(cx, 800.0, 200.0, 260.0), truth_id: Some(id) }
    }

    fn manager() -> TrackletManager {
        TrackletManager::new(TrackerConfig::default(), Panorama::default(), 7.5)
    }

    #[test]
    fn new_heads_only_in_current_stripe() {
        let mut m = manager();
        // stripe 2 covers x in [5000, 7500)
        let d = [det(6000.0, 1)];
        assert!(m.step(&d).is_empty());
        assert!(m.step(&d).is_empty());
        let t = m.step(&d);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].created_tick, t[0].truth_id), (2, Some(1)));
    }

    #[test]
    fn static_boxes_are_bit_stable_and_small_motion_is_ignored() {
        let mut m = manager();
        let base = det(100.0, 1);
        m.step(&[base]);
        let first = m.tracklets()[0].bbox;
        let jitter = Detection { bbox: PixelBox { x: base.bbox.x + 1.5, ..base.bbox }, truth_id: Some(1) };
        m.step(&[jitter]);
        assert_eq!(m.tracklets()[0].bbox, first);
        assert!(!m.tracklets()[0].moving);
        let moved = Detection { bbox: PixelBox { x: base.bbox.x + 30.0, ..base.bbox }, truth_id: Some(1) };
        m.step(&[moved]);
        assert!(m.tracklets()[0].moving);
        assert_eq!(m.tracklets()[0].bbox, moved.bbox);
    }

    #[test]
    fn unseen_tracklets_retire_after_timeout() {
        let mut m = manager();
        m.step(&[det(100.0, 1)]);
        for _ in 0..15 {
            assert_eq!(m.step(&[]).len(), 1);
        }
        assert!(m.step(&[]).is_empty());
    }

    #[test]
    fn seam_crossing_keeps_identity() {
        let mut m = manager();
        m.step(&[det(9_990.0, 1)]);
        for _ in 0..4 {
            m.step(&[det(9_990.0, 1)]);
        }
        m.step(&[det(20.0, 1)]);
        assert_eq!(m.tracklets().len(), 1);
        assert_eq!(m.tracklets()[0].id, 0);
    }
}
